"""Dense autoencoder baseline and deep SVDD networks, objectives and scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ConfigurationError, DimensionError, EmptyInputError
from .diffcore import LayerSpec, NetworkParams, Tensor, add, forward, hinge, mean, mul, square, sub, tsum

AE_INPUT_DIM = 320
AE_PARAM_COUNT = 50760
SVDD_CHANNELS = (1, 8, 16, 16, 16)
SVDD_FLAT = 256  # 16 channels x 4 x 4 after four stride-2 convolutions of 64x64
PAPER_SUBSPACE_DIMS = (2, 4, 8)
LEAKY_SLOPE = 0.2
CENTER_GUARD = 0.1


def ae_layout() -> list[LayerSpec]:
    sizes = (320, 64, 64, 8, 64, 64, 320)
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = "linear" if i == len(sizes) - 2 else "relu"
        layers.append(LayerSpec("dense", a, b, bias=True, activation=act))
    return layers


def svdd_layout(subspace_dim: int, bias: bool = False) -> list[LayerSpec]:
    """Conv stack 1->8->16->16->16 (3x3, stride 2, pad 1) then dense 256->subspace_dim.

    ``bias=True`` only adds a bias to the dense layer; it exists to
    demonstrate hypersphere collapse and is refused by :func:`build_svdd_net`.
    """
    layers = [
        LayerSpec("conv2d", a, b, activation="leaky_relu", kernel=3, stride=2, pad=1, slope=LEAKY_SLOPE)
        for a, b in zip(SVDD_CHANNELS[:-1], SVDD_CHANNELS[1:])
    ]
    layers.append(LayerSpec("dense", SVDD_FLAT, subspace_dim, bias=bias,
                            activation="leaky_relu", slope=LEAKY_SLOPE))
    return layers


@dataclass
class DenseAeModel:
    params: NetworkParams
    kind: str = "ae"

    def forward(self, vectors) -> Tensor:
        return forward(self.params, vectors)


@dataclass
class DeepSvddModel:
    params: NetworkParams
    subspace_dim: int
    center: np.ndarray | None = None
    radius_sq: float = 0.0  # soft-boundary variant only
    kind: str = "svdd"

    def embed(self, windows) -> Tensor:
        x = windows.data if isinstance(windows, Tensor) else np.asarray(windows)
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1:] != (1, 64, 64):
            raise DimensionError(f"expected [n, 64, 64] windows, got {np.shape(windows)}")
        return forward(self.params, x.astype(self.params.dtype, copy=False))

    @property
    def radius(self) -> float:
        return float(np.sqrt(self.radius_sq))


@dataclass(frozen=True)
class SvddObjectiveConfig:
    variant: str = "one_class"  # "one_class" | "soft_boundary"
    weight_decay: float = 1e-5
    nu: float = 0.1
    warmup_epochs: int = 10

    def __post_init__(self):
        if self.variant not in ("one_class", "soft_boundary"):
            raise ConfigurationError(f"unknown SVDD variant {self.variant!r}")
        if self.weight_decay <= 0:
            raise ConfigurationError("weight decay must be > 0")
        if self.variant == "soft_boundary" and not 0 < self.nu <= 1:
            raise ConfigurationError("nu must lie in (0, 1]")

    def outlier_weight(self, n: int) -> float:
        """C = 1 / (nu * N)."""
        return 1.0 / (self.nu * n)


def build_dense_ae(seed: int = 0, dtype=np.float32) -> DenseAeModel:
    params = NetworkParams.initialize(ae_layout(), seed, dtype)
    assert params.total_parameter_count() == AE_PARAM_COUNT
    return DenseAeModel(params)


def build_svdd_net(subspace_dim: int, seed: int = 0, dtype=np.float32) -> DeepSvddModel:
    if subspace_dim < 1:
        raise ConfigurationError("subspace_dim must be >= 1")
    params = NetworkParams.initialize(svdd_layout(subspace_dim), seed, dtype)
    # bias terms would let the network collapse onto the center
    assert not params.bias_names(), params.bias_names()
    return DeepSvddModel(params, subspace_dim)


def _as_input(x, params: NetworkParams):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return arr.astype(params.dtype, copy=False)


def ae_reconstruction_error(model: DenseAeModel, vectors, batch_size: int = 4096):
    """Per-vector mean squared error over the 320 outputs, and their mean."""
    x = _as_input(vectors, model.params)
    if x.ndim != 2 or x.shape[1] != model.params.layers[0].in_size:
        raise DimensionError(f"expected [n, {model.params.layers[0].in_size}] vectors, got {x.shape}")
    errs = np.empty(x.shape[0], dtype=np.float64)
    for s in range(0, x.shape[0], batch_size):
        xb = x[s : s + batch_size]
        y = model.forward(xb).data
        errs[s : s + batch_size] = np.mean((y.astype(np.float64) - xb) ** 2, axis=1)
    return errs, float(errs.mean())


def ae_loss(model: DenseAeModel, vectors) -> Tensor:
    x = Tensor(_as_input(vectors, model.params))
    return mean(square(sub(model.forward(x), x)))


def embed_numpy(model: DeepSvddModel, windows, batch_size: int = 256) -> np.ndarray:
    x = _as_input(windows, model.params)
    out = [model.embed(x[s : s + batch_size]).data for s in range(0, len(x), batch_size)]
    return np.concatenate(out).astype(np.float64)


def init_center(model: DeepSvddModel, train_windows, guard: float = CENTER_GUARD) -> np.ndarray:
    """Mean embedding of the training windows; near-zero coordinates pushed to +-guard."""
    if len(train_windows) == 0:
        raise EmptyInputError("init_center: no training windows")
    c = embed_numpy(model, train_windows).mean(axis=0)
    small = np.abs(c) < guard
    c[small & (c < 0)] = -guard
    c[small & (c >= 0)] = guard
    model.center = c
    return c


def _sq_distances(z: Tensor, c) -> Tensor:
    return tsum(square(sub(z, np.asarray(c, dtype=z.dtype))), axis=1)


def one_class_loss(model: DeepSvddModel, windows, c, weight_decay: float) -> Tensor:
    """mean ||phi(x) - c||^2 + (lambda / 2) ||W||_F^2"""
    dist = _sq_distances(model.embed(windows), c)
    return add(mean(dist), mul(model.params.frobenius_sq(), 0.5 * weight_decay))


def soft_boundary_loss(model: DeepSvddModel, windows, c, radius: float, outlier_weight: float,
                       weight_decay: float) -> Tensor:
    """R^2 + C * sum max(0, ||phi(x) - c||^2 - R^2) + (lambda / 2) ||W||_F^2.

    R is a constant here; it is refit separately with :func:`update_radius`.
    """
    r2 = float(radius) ** 2
    dist = _sq_distances(model.embed(windows), c)
    violations = tsum(hinge(sub(dist, r2)))
    loss = add(mul(violations, outlier_weight), mul(model.params.frobenius_sq(), 0.5 * weight_decay))
    return add(loss, r2)


def update_radius(dist_sq, nu: float) -> float:
    """R^2 as the lower-nearest (1 - nu) quantile of squared distances."""
    d = np.asarray(dist_sq, dtype=np.float64).ravel()
    if d.size == 0:
        raise EmptyInputError("update_radius: no distances")
    if not 0 < nu <= 1:
        raise ConfigurationError("nu must lie in (0, 1]")
    return float(np.quantile(d, 1.0 - nu, method="lower"))


def anomaly_score(model: DeepSvddModel, windows, c=None):
    """Squared distance to the center per window, and the clip mean."""
    c = model.center if c is None else c
    if c is None:
        raise ConfigurationError("model has no center; call init_center first")
    z = embed_numpy(model, windows)
    s = np.sum((z - np.asarray(c, dtype=np.float64)) ** 2, axis=1)
    return s, float(s.mean())
