"""Filesystem glue between the dataset tree, the feature cache, checkpoints and reports."""

from __future__ import annotations

import datetime as _dt
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

from . import ConfigurationError, UsageError, __version__
from .audio_io import ClipEntry, ClipIndex, read_wav, select_channel
from .diffcore import config_digest
from .evaluation import EvalRecord, auc
from .features import compute_log_mel, fit_normalizer, preprocess_valve, read_feat, write_feat
from .training import Checkpoint, ClipScore, SplitSpec, TrainConfig, make_split, score_test_set, train_model

log = logging.getLogger(__name__)

FEATURES_MANIFEST = "features.json"
INDEX_CSV = "index.csv"
ANALYSIS_CHANNEL = 0


def valve_enabled(policy: str, machine: str) -> bool:
    """Valve preprocessing only ever applies to valve clips."""
    if policy not in ("on", "off", "auto"):
        raise ConfigurationError(f"valve preprocessing policy must be on/off/auto, got {policy!r}")
    return machine == "valve" and policy in ("on", "auto")


def clip_log_mel(path, machine: str, valve_policy: str = "on"):
    clip = select_channel(read_wav(path), ANALYSIS_CHANNEL)
    x = clip.samples[0]
    if valve_enabled(valve_policy, machine):
        x = preprocess_valve(x, clip.sample_rate)
    return compute_log_mel(x, clip.sample_rate)


def _label_dir(entry: ClipEntry) -> str:
    return "abnormal" if entry.is_anomalous else "normal"


def feat_path(feature_dir, entry: ClipEntry) -> Path:
    return (Path(feature_dir) / entry.snr / entry.machine / entry.model_id / _label_dir(entry)
            / (Path(entry.path).name + ".feat"))


def group_dir(root, machine: str, model_id: str, snr: str) -> Path:
    return Path(root) / snr / machine / model_id


@dataclass
class FeatureStore:
    """Lazy mapping from clip path to its cached log-Mel spectrogram."""

    root: Path
    index: ClipIndex

    def __post_init__(self):
        self.root = Path(self.root)
        self._by_path = {e.path: e for e in self.index}
        self._cache = {}

    def __getitem__(self, path):
        if path not in self._cache:
            entry = self._by_path[path]
            self._cache[path] = read_feat(feat_path(self.root, entry))
        return self._cache[path]

    def __contains__(self, path):
        return path in self._by_path

    def split(self, machine, model_id, snr, seed) -> SplitSpec:
        p = group_dir(self.root, machine, model_id, snr) / f"split_seed{seed}.json"
        if p.exists():
            return SplitSpec.from_dict(json.loads(p.read_text()))
        return make_split(self.index, machine, model_id, snr, seed)

    @classmethod
    def open(cls, root) -> "FeatureStore":
        root = Path(root)
        idx = root / INDEX_CSV
        if not idx.exists():
            raise UsageError(f"{root} is not a feature directory (no {INDEX_CSV}); run `aad features` first")
        return cls(root, ClipIndex.from_csv(idx.read_text()))


def extract_features(index: ClipIndex, out_dir, valve_policy: str = "on", seeds=(0,)) -> dict:
    """Write one .feat per clip plus per-group split and train-only normalization sidecars.

    Cached files are reused when the extraction parameters are unchanged and
    the .feat is newer than its WAV. Returns counts of computed / cached clips.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = {"valve_preprocess": valve_policy, "channel": ANALYSIS_CHANNEL, "frame_size": 1024,
              "hop_size": 512, "n_mels": 64, "mel_scale": "htk", "log_floor": 1e-10}
    mpath = out / FEATURES_MANIFEST
    previous = json.loads(mpath.read_text()) if mpath.exists() else {}
    same_params = previous.get("params") == params
    missing = [e.path for e in index if not os.path.exists(e.path)]
    if missing:
        raise UsageError(f"{len(missing)} clips missing, e.g. {missing[:5]}")
    computed = cached = 0
    for entry in index:
        fp = feat_path(out, entry)
        if same_params and fp.exists() and fp.stat().st_mtime >= os.path.getmtime(entry.path):
            cached += 1
            continue
        fp.parent.mkdir(parents=True, exist_ok=True)
        write_feat(fp, clip_log_mel(entry.path, entry.machine, valve_policy))
        computed += 1
    (out / INDEX_CSV).write_text(index.to_csv())
    store = FeatureStore(out, index)
    for machine, model_id, snr in index.groups():
        gdir = group_dir(out, machine, model_id, snr)
        for seed in seeds:
            split = make_split(index, machine, model_id, snr, seed)
            stats = fit_normalizer(store[e.path] for e in split.train)
            _write_json(gdir / f"split_seed{seed}.json", split.to_dict())
            _write_json(gdir / f"norm_seed{seed}.json",
                        {**stats.to_dict(), "fit_clips": sorted(e.path for e in split.train)})
    _write_json(mpath, {"params": params, "n_clips": len(index)})
    return {"computed": computed, "cached": cached, "groups": len(index.groups())}


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_dir(out_root, machine, model_id, snr, config: TrainConfig) -> Path:
    dim = config.subspace_dim if config.model_kind == "svdd" else 0
    return group_dir(out_root, machine, model_id, snr) / f"{config.model_kind}_dim{dim}_seed{config.seed}"


def train_group(store: FeatureStore, machine, model_id, snr, config: TrainConfig, out_root) -> Path:
    split = store.split(machine, model_id, snr, config.seed)
    result = train_model(config, split, store)
    ckpt = result.checkpoint
    ckpt.extra.update(machine=machine, model_id=model_id, snr=snr, best_epoch=result.log.best_epoch,
                      stop_reason=result.log.stop_reason, paper_config=config.is_paper_dim)
    d = run_dir(out_root, machine, model_id, snr, config)
    d.mkdir(parents=True, exist_ok=True)
    ckpt.save(d / "model.ckpt")
    (d / "train_log.csv").write_text(result.log.to_csv())
    return d


def find_checkpoints(root) -> list[Path]:
    return sorted(Path(root).rglob("model.ckpt"))


def evaluate_checkpoint(path, store: FeatureStore) -> tuple[EvalRecord, list[ClipScore], Checkpoint]:
    ckpt = Checkpoint.load(path)
    meta = ckpt.extra
    split = store.split(meta["machine"], meta["model_id"], meta["snr"], ckpt.config.seed)
    scores = score_test_set(ckpt, split, store)
    value = auc([s.score for s in scores], [s.label for s in scores])
    dim = ckpt.model.subspace_dim if ckpt.kind == "svdd" else 0
    rec = EvalRecord(meta["machine"], meta["model_id"], meta["snr"], ckpt.config.seed, ckpt.kind, dim,
                     value, len(scores))
    return rec, scores, ckpt


def write_manifest(out_dir, command: str, config: dict, seeds, inputs, outputs, extra: dict | None = None) -> Path:
    """One manifest.json per output directory; rewritten on every run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_digest": config_digest(config),
        "config": config,
        "seeds": list(seeds),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "tool_version": __version__,
        **(extra or {}),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
