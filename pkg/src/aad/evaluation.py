"""ROC-AUC, report aggregation in the per-machine / per-SNR table layout, and latency timing."""

from __future__ import annotations

import csv
import io
import platform
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import EmptyInputError
from .audio_io import MACHINE_TYPES, SNR_TAGS


class UndefinedMetricError(EmptyInputError):
    pass


def _binary_labels(labels) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.dtype.kind in "USO":
        return lab == "anomalous"
    return lab.astype(bool)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(anomalous > normal) + 0.5 * P(tie).

    Ranks are computed by sorting, with tied scores sharing their mid-rank.
    ``labels`` are booleans/ints (1 = anomalous) or "normal"/"anomalous".
    """
    s = np.asarray(scores, dtype=np.float64)
    pos = _binary_labels(labels)
    if s.shape != pos.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one normal and one anomalous score")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # tie groups: [start, end) in sorted order; mid-rank (1-based) = (start + end + 1) / 2
    bounds = np.flatnonzero(np.diff(sorted_s)) + 1
    starts = np.concatenate(([0], bounds))
    ends = np.concatenate((bounds, [s.size]))
    ranks = np.empty(s.size)
    ranks[order] = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pairwise(scores, labels) -> float:
    """O(n^2) reference: count anomalous-over-normal pairs, ties weighted 0.5."""
    s = np.asarray(scores, dtype=np.float64)
    pos = _binary_labels(labels)
    a, n = s[pos], s[~pos]
    if a.size == 0 or n.size == 0:
        raise UndefinedMetricError("AUC needs at least one normal and one anomalous score")
    greater = 0
    ties = 0
    for x in a:
        greater += int(np.count_nonzero(x > n))
        ties += int(np.count_nonzero(x == n))
    return (greater + 0.5 * ties) / (a.size * n.size)


def roc_curve(scores, labels):
    """False/true positive rates at every distinct threshold (descending)."""
    s = np.asarray(scores, dtype=np.float64)
    pos = _binary_labels(labels)
    order = np.argsort(-s, kind="mergesort")
    s, pos = s[order], pos[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(pos)[last]
    fp = np.cumsum(~pos)[last]
    tpr = np.r_[0.0, tp / max(pos.sum(), 1)]
    fpr = np.r_[0.0, fp / max((~pos).sum(), 1)]
    return fpr, tpr


@dataclass(frozen=True)
class EvalRecord:
    machine: str
    model_id: str
    snr: str
    seed: int
    model_kind: str
    subspace_dim: int  # 0 for the AE
    auc: float
    n_test: int

    @property
    def method(self) -> tuple[str, int]:
        return (self.model_kind, self.subspace_dim)


CSV_FIELDS = ["machine", "model_id", "snr", "seed", "model_kind", "dim", "auc", "n_test"]


def method_label(kind: str, dim: int) -> str:
    if kind == "ae":
        return "Dense AE"
    return f"Deep SVDD (dim {dim})"


def _machine_order(m):
    return MACHINE_TYPES.index(m) if m in MACHINE_TYPES else len(MACHINE_TYPES)


def _snr_order(s):
    return SNR_TAGS.index(s) if s in SNR_TAGS else len(SNR_TAGS)


@dataclass
class EvalReport:
    records: list[EvalRecord]
    # (machine, snr, kind, dim) -> mean AUC over model ids and seeds
    cell_means: dict = field(default_factory=dict)
    # (snr, kind, dim) -> mean of the machine means
    all_machines: dict = field(default_factory=dict)

    def machines(self):
        return sorted({r.machine for r in self.records}, key=_machine_order)

    def snrs(self):
        return sorted({r.snr for r in self.records}, key=_snr_order)

    def methods(self):
        return sorted({r.method for r in self.records}, key=lambda m: (m[0] != "ae", m[1]))

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in sorted(self.records, key=lambda r: (_machine_order(r.machine), r.model_id, _snr_order(r.snr),
                                                     r.model_kind, r.subspace_dim, r.seed)):
            w.writerow([r.machine, r.model_id, r.snr, r.seed, r.model_kind, r.subspace_dim,
                        f"{r.auc:.6f}", r.n_test])
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        recs = [
            EvalRecord(r["machine"], r["model_id"], r["snr"], int(r["seed"]), r["model_kind"], int(r["dim"]),
                       float(r["auc"]), int(r["n_test"]))
            for r in csv.DictReader(io.StringIO(text))
        ]
        return aggregate(recs)

    def to_markdown(self) -> str:
        """Rows are methods; column groups are machines then the all-machines average, one column per SNR."""
        machines, snrs = self.machines(), self.snrs()
        groups = machines + ["All machines avg."]
        head = ["Method"] + [f"{g} {s}" for g in groups for s in snrs]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for kind, dim in self.methods():
            cells = [method_label(kind, dim)]
            for g in groups:
                for s in snrs:
                    if g in machines:
                        v = self.cell_means.get((g, s, kind, dim))
                    else:
                        v = self.all_machines.get((s, kind, dim))
                    cells.append("-" if v is None else f"{v:.3f}")
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def aggregate(records) -> EvalReport:
    """Mean AUC per (machine, snr, method); all-machines average weights each machine equally."""
    records = list(records)
    if not records:
        raise EmptyInputError("aggregate: no records")
    cells = defaultdict(list)
    for r in records:
        cells[(r.machine, r.snr, r.model_kind, r.subspace_dim)].append(r.auc)
    cell_means = {k: float(np.mean(v)) for k, v in sorted(cells.items())}
    per_snr = defaultdict(list)
    for (machine, snr, kind, dim), v in cell_means.items():
        per_snr[(snr, kind, dim)].append(v)
    all_machines = {k: float(np.mean(v)) for k, v in sorted(per_snr.items())}
    return EvalReport(records, cell_means, all_machines)


@dataclass
class LatencyReport:
    mean_ms: float
    per_window_ms: float
    n_units: int  # vectors (AE) or windows (SVDD) per clip
    repetitions: int
    hardware: str
    samples_ms: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d.pop("samples_ms")
        return d


def hardware_descriptor() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} / numpy {np.__version__} (CPU, 1 thread)"


def time_calls(fn, arg, repetitions: int = 100) -> list[float]:
    """Milliseconds per ``fn(arg)`` call, single-threaded, after one excluded warm-up call."""
    from threadpoolctl import threadpool_limits

    repetitions = max(1, int(repetitions))
    with threadpool_limits(1):
        fn(arg)
        samples = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            fn(arg)
            samples.append((time.perf_counter() - t0) * 1000.0)
    return samples


def measure_latency(checkpoint, feature, repetitions: int = 100) -> LatencyReport:
    """Mean wall-clock time to score one clip (forward pass plus error / distance)."""
    from .training import score_clip

    units = feature.ae_vectors if checkpoint.kind == "ae" else feature.svdd_windows
    samples = time_calls(lambda f: score_clip(checkpoint, f), feature, repetitions)
    mean_ms = float(np.mean(samples))
    n_units = 0 if units is None else len(units)
    return LatencyReport(mean_ms, mean_ms / max(n_units, 1), n_units, len(samples), hardware_descriptor(), samples)
