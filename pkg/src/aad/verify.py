"""Self-checks run by ``aad verify``: gradients, AUC oracle, shape laws, parameter counts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from .diffcore import (NetworkParams, Tensor, conv2d_forward, dense_forward, grad_check, leaky_relu, mul, relu,
                       tsum)
from .evaluation import auc, auc_pairwise
from .features import compute_log_mel, stack_frames, tile_windows

GRAD_TOLERANCE = 1e-5
AE_EXPECTED = 50760
SVDD_REFERENCE = {2: 6848, 4: 7360, 8: 8384}
SVDD_DELTAS = {(2, 4): 512, (4, 8): 1024}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _t(rng, *shape, away_from_zero=False):
    x = rng.standard_normal(shape)
    if away_from_zero:
        # keep inputs off the activation kink so finite differences stay valid
        x = np.where(np.abs(x) < 0.1, np.sign(x + 1e-12) * 0.1, x)
    return Tensor(x, requires_grad=True)


def gradient_cases(seed: int):
    """name -> (loss_fn, tensors, max_entries, step). All float64.

    The AE loss sums thousands of terms, so its step is larger to keep
    roundoff well below the tolerance; the conv nets cross LeakyReLU kinks
    too often at that step, so they use a smaller one.
    """
    rng = np.random.default_rng(seed)
    cases = {}

    x, w, b = _t(rng, 6, 5), _t(rng, 5, 4), _t(rng, 4)
    r = rng.standard_normal((6, 4))
    cases["dense"] = (lambda: tsum(mul(dense_forward(x, w, b), Tensor(r))), {"x": x, "w": w, "b": b}, None, 1e-5)

    xc, kc = _t(rng, 2, 2, 7, 7), _t(rng, 3, 2, 3, 3)
    rc1 = rng.standard_normal((2, 3, 4, 4))
    rc2 = rng.standard_normal((2, 3, 5, 5))
    cases["conv2d s2p1"] = (lambda: tsum(mul(conv2d_forward(xc, kc, 2, 1), Tensor(rc1))), {"x": xc, "k": kc}, None, 1e-5)
    cases["conv2d s1p0"] = (lambda: tsum(mul(conv2d_forward(xc, kc, 1, 0), Tensor(rc2))), {"x": xc, "k": kc}, None, 1e-5)

    xa = _t(rng, 5, 6, away_from_zero=True)
    ra = rng.standard_normal((5, 6))
    cases["leaky_relu"] = (lambda: tsum(mul(leaky_relu(xa, 0.2), Tensor(ra))), {"x": xa}, None, 1e-5)
    xr = _t(rng, 5, 6, away_from_zero=True)
    cases["relu"] = (lambda: tsum(mul(relu(xr), Tensor(ra))), {"x": xr}, None, 1e-5)

    # built from the layout directly so a drifted layout is reported, not asserted
    ae = models.DenseAeModel(NetworkParams.initialize(models.ae_layout(), seed, np.float64))
    v = rng.standard_normal((8, 320))
    cases["mse (dense AE)"] = (lambda: models.ae_loss(ae, v), ae.params, 25, 1e-4)

    net = models.build_svdd_net(2, seed, dtype=np.float64)
    win = rng.standard_normal((3, 64, 64))
    c = models.init_center(net, win)
    cases["one-class loss"] = (lambda: models.one_class_loss(net, win, c, 1e-2), net.params, 20, 1e-5)

    net2 = models.build_svdd_net(2, seed + 1, dtype=np.float64)
    win2 = rng.standard_normal((6, 64, 64))
    c2 = models.init_center(net2, win2)
    d = models.anomaly_score(net2, win2, c2)[0]
    # radius between two distances so the hinge is active for some windows only
    srt = np.sort(d)
    radius = float(np.sqrt(0.5 * (srt[2] + srt[3])))
    cases["soft-boundary loss"] = (
        lambda: models.soft_boundary_loss(net2, win2, c2, radius, 1.0 / (0.1 * len(win2)), 1e-2), net2.params, 20, 1e-5)
    return cases


def check_gradients(seeds=range(10), grad_hook=None, tolerance: float = GRAD_TOLERANCE) -> list[CheckResult]:
    worst, checked, skipped = {}, {}, {}
    for seed in seeds:
        for name, (fn, tensors, max_entries, step) in gradient_cases(seed).items():
            rep = grad_check(fn, tensors, tolerance=tolerance, h=step, max_entries=max_entries,
                             rng=np.random.default_rng(seed), grad_hook=grad_hook)
            worst[name] = max(worst.get(name, 0.0), rep.max_error)
            checked[name] = checked.get(name, 0) + rep.checked
            skipped[name] = skipped.get(name, 0) + rep.skipped
    n = len(list(seeds))
    out = []
    for name, err in worst.items():
        # a check that skipped most of its entries proves little
        enough = checked[name] >= 4 * skipped[name]
        out.append(CheckResult(f"gradient {name}", err < tolerance and enough,
                               f"max rel err {err:.2e} over {n} seeds, "
                               f"{checked[name]} entries checked, {skipped[name]} skipped at kinks"))
    return out


def random_auc_instance(rng, max_n: int = 500):
    n = int(rng.integers(2, max_n + 1))
    n_pos = int(rng.integers(1, n))
    labels = np.zeros(n, dtype=bool)
    labels[rng.choice(n, n_pos, replace=False)] = True
    mode = rng.integers(3)
    if mode == 0:
        scores = rng.standard_normal(n)
    elif mode == 1:
        scores = rng.integers(0, 5, n).astype(float)  # heavy ties
    else:
        scores = np.full(n, 0.5)
        scores[rng.random(n) < 0.3] = rng.integers(0, 3)
    return scores, labels


def check_auc_oracle(n_instances: int = 1000, seed: int = 0, max_n: int = 500) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_instances):
        s, lab = random_auc_instance(rng, max_n)
        if auc(s, lab) != auc_pairwise(s, lab):
            bad += 1
    return CheckResult("AUC sort vs pair count", bad == 0, f"{n_instances - bad}/{n_instances} exact matches")


def check_shapes() -> list[CheckResult]:
    x = np.random.default_rng(0).standard_normal(160000) * 0.1
    spec = compute_log_mel(x, 16000)
    vec = stack_frames(spec)
    win = tile_windows(spec)
    pad_zero = bool(np.all(win[-1, 313 - 4 * 64 :] == 0)) and bool(np.any(win[-1, : 313 - 4 * 64] != 0))
    return [
        CheckResult("log-Mel shape", spec.values.shape == (313, 64), f"{spec.values.shape}"),
        CheckResult("AE vectors", vec.shape == (309, 320), f"{vec.shape}"),
        CheckResult("SVDD windows", win.shape == (5, 64, 64) and pad_zero,
                    f"{win.shape}, last window zero-padded rows: {64 - (313 - 4 * 64)}"),
    ]


def parameter_counts() -> dict:
    """Counted from freshly initialized layouts, bypassing the builders' own asserts."""
    counts = {"ae": NetworkParams.initialize(models.ae_layout(), 0).total_parameter_count()}
    for dim in SVDD_REFERENCE:
        counts[f"svdd{dim}"] = NetworkParams.initialize(models.svdd_layout(dim), 0).total_parameter_count()
    return counts


def check_parameter_counts() -> list[CheckResult]:
    c = parameter_counts()
    out = [CheckResult("AE parameters", c["ae"] == AE_EXPECTED, f"{c['ae']} (expected {AE_EXPECTED})")]
    for (a, b), delta in SVDD_DELTAS.items():
        got = c[f"svdd{b}"] - c[f"svdd{a}"]
        out.append(CheckResult(f"SVDD delta dim{b}-dim{a}", got == delta, f"{got} (expected {delta})"))
    for dim, ref in SVDD_REFERENCE.items():
        got = c[f"svdd{dim}"]
        out.append(CheckResult(f"SVDD dim{dim} total", abs(got - ref) <= 0.1 * ref, f"{got} (reference {ref} +-10%)"))
    return out


def _guarded(name, fn) -> list[CheckResult]:
    try:
        out = fn()
    except Exception as exc:  # a crashing check is a failing check
        return [CheckResult(name, False, f"{type(exc).__name__}: {exc}")]
    return out if isinstance(out, list) else [out]


def run_all(grad_seeds=range(10), auc_instances: int = 1000, grad_hook=None) -> list[CheckResult]:
    return (_guarded("parameter counts", check_parameter_counts)
            + _guarded("shape laws", check_shapes)
            + _guarded("AUC oracle", lambda: check_auc_oracle(auc_instances))
            + _guarded("gradients", lambda: check_gradients(grad_seeds, grad_hook)))
