"""Data splits, training loops with early stopping, checkpoints and test-set scoring."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ConfigurationError, DivergenceError, UsageError
from .audio_io import ClipEntry, ClipIndex
from .diffcore import INIT_SCHEME, AdamState, adam_step, config_digest, load_checkpoint, save_checkpoint
from .features import FeatureBatch, LogMelSpectrogram, NormStats, fit_normalizer, make_feature_batch
from .models import (
    AE_PARAM_COUNT,
    PAPER_SUBSPACE_DIMS,
    DeepSvddModel,
    DenseAeModel,
    SvddObjectiveConfig,
    ae_loss,
    ae_reconstruction_error,
    anomaly_score,
    build_dense_ae,
    build_svdd_net,
    embed_numpy,
    init_center,
    one_class_loss,
    soft_boundary_loss,
    update_radius,
)

log = logging.getLogger(__name__)

VAL_FRACTION = 0.10


@dataclass
class SplitSpec:
    train: list[ClipEntry]
    val: list[ClipEntry]
    test: list[ClipEntry]
    rng_seed: int

    def test_labels(self):
        return [e.label for e in self.test]

    def to_dict(self):
        return {
            "rng_seed": self.rng_seed,
            **{k: [asdict(e) for e in getattr(self, k)] for k in ("train", "val", "test")},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(*([ClipEntry(**e) for e in d[k]] for k in ("train", "val", "test")), rng_seed=d["rng_seed"])


def make_split(index: ClipIndex, machine: str, model_id: str, snr: str, seed: int) -> SplitSpec:
    """All anomalies plus as many random normals form the test set; 10% of the rest validates."""
    group = index.select(machine=machine, model_id=model_id, snr=snr)
    normals = sorted((e for e in group if e.label == "normal"), key=lambda e: e.path)
    anomalies = sorted((e for e in group if e.label == "anomalous"), key=lambda e: e.path)
    n_a = len(anomalies)
    if n_a == 0:
        raise ConfigurationError(f"{machine}/{model_id}/{snr}: no anomalous clips to test on")
    if len(normals) < 2 * n_a:
        raise ConfigurationError(
            f"{machine}/{model_id}/{snr}: need {2 * n_a} normal clips for {n_a} anomalous, "
            f"have {len(normals)} (short by {2 * n_a - len(normals)})"
        )
    perm = np.random.default_rng(seed).permutation(len(normals))
    pool = len(normals) - n_a
    n_val = max(1, math.ceil(VAL_FRACTION * pool))
    pick = [normals[i] for i in perm]
    by_path = lambda e: e.path  # noqa: E731
    return SplitSpec(
        train=sorted(pick[n_a + n_val :], key=by_path),
        val=sorted(pick[n_a : n_a + n_val], key=by_path),
        test=sorted(pick[:n_a] + anomalies, key=by_path),
        rng_seed=seed,
    )


@dataclass
class TrainConfig:
    model_kind: str = "svdd"  # "svdd" | "ae"
    max_epochs: int = 50
    patience: int = 10
    batch_size: int = 32
    learning_rate: float = 5e-4
    weight_decay: float = 1e-5
    seed: int = 0
    subspace_dim: int = 2
    variant: str = "one_class"
    nu: float = 0.1
    warmup_epochs: int = 10

    def __post_init__(self):
        if self.model_kind not in ("svdd", "ae"):
            raise ConfigurationError(f"unknown model kind {self.model_kind!r}")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigurationError("max_epochs, batch_size and patience must be >= 1")

    @classmethod
    def paper_svdd(cls, subspace_dim: int = 2, seed: int = 0, **kw) -> "TrainConfig":
        return cls("svdd", 50, 10, 32, 5e-4, 1e-5, seed, subspace_dim, **kw)

    @classmethod
    def default_ae(cls, seed: int = 0, **kw) -> "TrainConfig":
        base = dict(max_epochs=100, patience=10, batch_size=256, learning_rate=1e-3)
        base.update(kw)
        return cls("ae", seed=seed, **base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training options {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        if self.model_kind == "ae":
            for k in ("subspace_dim", "variant", "nu", "warmup_epochs", "weight_decay"):
                d.pop(k)
        return d

    @property
    def is_paper_dim(self) -> bool:
        return self.model_kind == "ae" or self.subspace_dim in PAPER_SUBSPACE_DIMS

    def objective(self) -> SvddObjectiveConfig:
        return SvddObjectiveConfig(self.variant, self.weight_decay, self.nu, self.warmup_epochs)


class EarlyStopping:
    """Tracks the best validation loss; stops after ``patience`` epochs without a strict improvement."""

    def __init__(self, patience: int = 10):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.since_best = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record ``val_loss``; returns True if it is a new best."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.since_best = val_loss, epoch, 0
            return True
        self.since_best += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.since_best >= self.patience


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)  # (epoch, train_loss, val_loss, is_best)
    best_epoch: int = 0
    stop_reason: str = ""
    initial_train_distance: float | None = None
    final_train_distance: float | None = None

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "is_best"])
        for epoch, tr, va, best in self.rows:
            w.writerow([epoch, repr(float(tr)), repr(float(va)), int(best)])
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainingLog":
        rows = [
            (int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]), r["is_best"] == "1")
            for r in csv.DictReader(io.StringIO(text))
        ]
        best = max((r[0] for r in rows if r[3]), default=0)
        return cls(rows, best)

    @property
    def val_losses(self):
        return [r[2] for r in self.rows]


@dataclass
class Checkpoint:
    model: DenseAeModel | DeepSvddModel
    config: TrainConfig
    norm: NormStats | None = None
    extra: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.model.kind

    def metadata(self) -> dict:
        cfg = self.config.to_dict()
        meta = {
            "model_kind": self.kind,
            "seed": self.config.seed,
            "init_scheme": INIT_SCHEME,
            "config": cfg,
            "config_digest": config_digest(cfg),
            "param_count": self.model.params.total_parameter_count(),
            "norm": self.norm.to_dict() if self.norm else None,
            **self.extra,
        }
        if self.kind == "svdd":
            meta.update(
                subspace_dim=self.model.subspace_dim,
                center=[float(v) for v in self.model.center],
                radius_sq=float(self.model.radius_sq),
                nu=self.config.nu,
                weight_decay=self.config.weight_decay,
                variant=self.config.variant,
            )
        return meta

    def save(self, path) -> None:
        save_checkpoint(path, self.model.params, self.metadata())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        params, meta = load_checkpoint(path)
        config = TrainConfig.from_dict(meta["config"])
        norm = NormStats.from_dict(meta["norm"]) if meta.get("norm") else None
        if meta["model_kind"] == "ae":
            if params.total_parameter_count() != AE_PARAM_COUNT:
                raise ConfigurationError(
                    f"{path}: AE checkpoint has {params.total_parameter_count()} parameters, "
                    f"expected {AE_PARAM_COUNT}"
                )
            model = DenseAeModel(params)
        else:
            if params.bias_names():
                raise ConfigurationError(f"{path}: deep SVDD checkpoint carries bias tensors")
            model = DeepSvddModel(params, int(meta["subspace_dim"]), np.asarray(meta["center"]),
                                  float(meta["radius_sq"]))
        known = set(cls(model, config).metadata()) | {"config", "norm"}
        extra = {k: v for k, v in meta.items() if k not in known}
        return cls(model, config, norm, extra)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: TrainingLog


def _batches(n: int, batch_size: int, seed: int):
    order = np.random.default_rng(seed).permutation(n)
    for s in range(0, n, batch_size):
        yield order[s : s + batch_size]


def _check_finite(value: float, epoch: int):
    if not math.isfinite(value):
        raise DivergenceError(epoch)


def _mean_sq_distance(model: DeepSvddModel, windows) -> float:
    z = embed_numpy(model, windows)
    return float(np.mean(np.sum((z - model.center) ** 2, axis=1)))


def fit_svdd(config: TrainConfig, train_windows, val_windows, model: DeepSvddModel | None = None) -> TrainResult:
    """Train deep SVDD on normalized [n, 64, 64] windows."""
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise UsageError("fit_svdd: empty training or validation set")
    obj = config.objective()
    model = model or build_svdd_net(config.subspace_dim, config.seed)
    train_windows = np.asarray(train_windows, dtype=model.params.dtype)
    val_windows = np.asarray(val_windows, dtype=model.params.dtype)
    c = init_center(model, train_windows)
    train_log = TrainingLog()
    init_dist = np.sum((embed_numpy(model, train_windows) - c) ** 2, axis=1)
    train_log.initial_train_distance = float(init_dist.mean())
    if obj.variant == "soft_boundary":
        model.radius_sq = update_radius(init_dist, obj.nu)

    state = AdamState(lr=config.learning_rate)
    stopper = EarlyStopping(config.patience)
    best_params, best_r2 = model.params.copy(), model.radius_sq
    for epoch in range(1, config.max_epochs + 1):
        losses, epoch_dist = [], []
        for idx in _batches(len(train_windows), config.batch_size, config.seed + epoch):
            xb = train_windows[idx]
            if obj.variant == "one_class":
                loss = one_class_loss(model, xb, c, obj.weight_decay)
            else:
                z = model.embed(xb)
                epoch_dist.append(np.sum((z.data.astype(np.float64) - c) ** 2, axis=1))
                loss = soft_boundary_loss(model, xb, c, model.radius, obj.outlier_weight(len(idx)),
                                          obj.weight_decay)
            value = loss.item()
            _check_finite(value, epoch)
            losses.append(value)
            loss.backward()
            adam_step(model.params, state)
        if obj.variant == "soft_boundary" and epoch > obj.warmup_epochs:
            model.radius_sq = update_radius(np.concatenate(epoch_dist), obj.nu)
        val = _mean_sq_distance(model, val_windows)
        _check_finite(val, epoch)
        is_best = stopper.update(epoch, val)
        if is_best:
            best_params, best_r2 = model.params.copy(), model.radius_sq
        train_log.rows.append((epoch, float(np.mean(losses)), val, is_best))
        log.debug("epoch %d train %.6g val %.6g%s", epoch, np.mean(losses), val, " *" if is_best else "")
        if stopper.should_stop:
            train_log.stop_reason = "patience"
            break
    else:
        train_log.stop_reason = "max_epochs"
    model.params, model.radius_sq = best_params, best_r2
    train_log.best_epoch = stopper.best_epoch
    train_log.final_train_distance = _mean_sq_distance(model, train_windows)
    return TrainResult(Checkpoint(model, config), train_log)


def fit_ae(config: TrainConfig, train_vectors, val_vectors, model: DenseAeModel | None = None) -> TrainResult:
    """Train the dense AE on normalized [n, 320] vectors with an MSE loss."""
    if len(train_vectors) == 0 or len(val_vectors) == 0:
        raise UsageError("fit_ae: empty training or validation set")
    model = model or build_dense_ae(config.seed)
    train_vectors = np.asarray(train_vectors, dtype=model.params.dtype)
    val_vectors = np.asarray(val_vectors, dtype=model.params.dtype)
    state = AdamState(lr=config.learning_rate)
    stopper = EarlyStopping(config.patience)
    train_log = TrainingLog()
    best_params = model.params.copy()
    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for idx in _batches(len(train_vectors), config.batch_size, config.seed + epoch):
            loss = ae_loss(model, train_vectors[idx])
            value = loss.item()
            _check_finite(value, epoch)
            losses.append(value)
            loss.backward()
            adam_step(model.params, state)
        val = ae_reconstruction_error(model, val_vectors)[1]
        _check_finite(val, epoch)
        is_best = stopper.update(epoch, val)
        if is_best:
            best_params = model.params.copy()
        train_log.rows.append((epoch, float(np.mean(losses)), val, is_best))
        if stopper.should_stop:
            train_log.stop_reason = "patience"
            break
    else:
        train_log.stop_reason = "max_epochs"
    model.params = best_params
    train_log.best_epoch = stopper.best_epoch
    return TrainResult(Checkpoint(model, config), train_log)


def _spec_of(features, entry):
    try:
        return features[entry.path]
    except KeyError:
        raise UsageError(f"no features for {entry.path}") from None


def stack_inputs(entries, features, norm: NormStats, kind: str) -> np.ndarray:
    """Concatenate the normalized model inputs of ``entries``."""
    parts = []
    for e in entries:
        fb = make_feature_batch(_spec_of(features, e), norm, e.path, kinds=(kind,))
        parts.append(fb.ae_vectors if kind == "ae" else fb.svdd_windows)
    return np.concatenate(parts)


def train_model(config: TrainConfig, split: SplitSpec, features) -> TrainResult:
    """Fit normalization on the training clips only, then train.

    ``features`` maps clip path -> :class:`LogMelSpectrogram`.
    """
    if not split.train or not split.val:
        raise UsageError("train_model: split has no training or validation clips")
    norm = fit_normalizer(_spec_of(features, e) for e in split.train)
    train_x = stack_inputs(split.train, features, norm, config.model_kind)
    val_x = stack_inputs(split.val, features, norm, config.model_kind)
    fit = fit_svdd if config.model_kind == "svdd" else fit_ae
    result = fit(config, train_x, val_x)
    result.checkpoint.norm = norm
    result.checkpoint.extra["norm_fit_clips"] = len(split.train)
    return result


@dataclass(frozen=True)
class ClipScore:
    path: str
    score: float
    label: str


def score_clip(checkpoint: Checkpoint, feature) -> float:
    """Clip score: mean per-vector reconstruction error (AE) or mean squared distance (SVDD)."""
    if isinstance(feature, LogMelSpectrogram):
        feature = make_feature_batch(feature, checkpoint.norm, kinds=(checkpoint.kind,))
    if not isinstance(feature, FeatureBatch):
        raise UsageError(f"cannot score {type(feature).__name__}")
    if checkpoint.kind == "ae":
        if feature.ae_vectors is None:
            raise UsageError("AE checkpoint needs stacked-frame vectors, feature batch has none")
        return ae_reconstruction_error(checkpoint.model, feature.ae_vectors)[1]
    if feature.svdd_windows is None:
        raise UsageError("deep SVDD checkpoint needs 64x64 windows, feature batch has none")
    return anomaly_score(checkpoint.model, feature.svdd_windows)[1]


def score_test_set(checkpoint: Checkpoint, split: SplitSpec, features) -> list[ClipScore]:
    """One score per test clip.

    ``features`` values may be raw spectrograms (normalized here with the
    checkpoint's stats) or already-normalized :class:`FeatureBatch` objects.
    """
    return [ClipScore(e.path, score_clip(checkpoint, _spec_of(features, e)), e.label) for e in split.test]


def with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    return replace(config, seed=seed)
