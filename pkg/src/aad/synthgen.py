"""Deterministic synthetic machine sounds laid out like the MIMII dataset.

Each machine analog is a harmonic source (stationary hum, or sparse
valve-like clicks) plus background noise scaled to a target SNR. The
background drifts slowly in level; for the valve it also carries passing
tonal interference that stays below the actuation peaks. Anomalies
imitate the recorded fault families: ``detuned_harmonics`` (leakage /
contamination shifts the spectrum), ``amplitude_modulation`` (rotating
unbalance) and ``transient_bursts`` (rail damage clicks).
"""

from __future__ import annotations

import json
import shutil
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ConfigurationError
from .audio_io import MACHINE_TYPES, write_wav

ANOMALY_KINDS = ("transient_bursts", "detuned_harmonics", "amplitude_modulation")
SAMPLE_RATE = 16000
DURATION = 10.0
N_HARMONICS = 8
STATIONARY_RMS = 0.1
VALVE_RMS = 0.03
LEVEL_SPREAD_DB = 1.0
VALVE_BURSTS = 3  # fixed actuation count, so preprocessed clips share one length
TRANSIENTS = (6, 12)  # impacts per anomalous clip, inclusive range
BACKGROUND_SWING_DB = 6.0  # slow factory-noise level drift, peak deviation
INTERFERENCE_LEVEL = 1.5  # tonal interference amplitude, relative to the noise floor

MACHINE_DEFAULTS = {
    "pump": {"base_freqs": [150.0, 410.0], "anomaly_kind": "detuned_harmonics"},
    "fan": {"base_freqs": [240.0], "anomaly_kind": "amplitude_modulation", "anomaly_strength": 1.5},
    "slide_rail": {"base_freqs": [320.0, 530.0], "anomaly_kind": "transient_bursts", "anomaly_strength": 2.0},
    "valve": {"base_freqs": [700.0], "anomaly_kind": "detuned_harmonics", "anomaly_strength": 1.5,
              "interference_events": 3},
}


@dataclass
class SynthSpec:
    machine_type: str
    n_normal: int
    n_anomalous: int
    snr_db: float = 6.0
    base_freqs: list = field(default_factory=lambda: [200.0])
    anomaly_kind: str = "detuned_harmonics"
    seed: int = 0
    model_id: str = "id_00"
    anomaly_strength: float = 1.0
    background_swing_db: float = BACKGROUND_SWING_DB
    interference_events: int = 0
    sample_rate: int = SAMPLE_RATE
    duration: float = DURATION

    def __post_init__(self):
        if self.machine_type not in MACHINE_TYPES:
            raise ConfigurationError(f"unknown machine type {self.machine_type!r}")
        if self.anomaly_kind not in ANOMALY_KINDS:
            raise ConfigurationError(f"unknown anomaly kind {self.anomaly_kind!r}")
        if self.n_normal < 2 * self.n_anomalous:
            raise ConfigurationError(
                f"n_normal ({self.n_normal}) must be >= 2 * n_anomalous ({self.n_anomalous})"
            )

    @classmethod
    def for_machine(cls, machine_type: str, **overrides) -> "SynthSpec":
        kw = dict(MACHINE_DEFAULTS[machine_type])
        kw.update(overrides)
        return cls(machine_type=machine_type, **kw)

    @property
    def snr_tag(self) -> str:
        return f"{int(round(self.snr_db))}dB"

    @property
    def n_samples(self) -> int:
        return int(round(self.sample_rate * self.duration))

    def to_dict(self):
        return asdict(self)


def _rng(spec: SynthSpec, index: int, label: str) -> np.random.Generator:
    group = zlib.crc32(f"{spec.machine_type}/{spec.model_id}".encode())
    return np.random.default_rng([spec.seed, group, 1 if label == "anomalous" else 0, index])


def _harmonic_source(t, base_freqs, rng, detune=0.0, stretch=0.0):
    """Sum of harmonic series; ``detune`` shifts every partial, ``stretch`` spreads upper ones."""
    x = np.zeros_like(t)
    for f0 in base_freqs:
        f = f0 * (1.0 + rng.uniform(-0.005, 0.005))
        for h in range(1, N_HARMONICS + 1):
            fh = h * f * (1.0 + detune + stretch * (h - 1))
            if fh >= 0.45 * (1.0 / (t[1] - t[0])):
                break
            amp = rng.uniform(0.85, 1.15) / h
            x += amp * np.sin(2.0 * np.pi * fh * t + rng.uniform(0, 2 * np.pi))
    return x


def _burst_times(rng, n, duration, min_gap, margin=0.3):
    """``n`` sorted onsets in [margin, duration - margin], at least ``min_gap`` apart.

    Sorted uniform draws on the interval shrunk by the gaps, then spread
    out again: uniform over all valid placements, no rejection loop.
    """
    free = duration - 2 * margin - (n - 1) * min_gap
    if free < 0:
        raise ConfigurationError(f"{n} bursts {min_gap} s apart do not fit in a {duration} s clip")
    return margin + np.sort(rng.uniform(0.0, free, size=n)) + min_gap * np.arange(n)


def _valve_source(t, spec, rng, detune=0.0):
    sr = spec.sample_rate
    x = np.zeros_like(t)
    for t0 in _burst_times(rng, VALVE_BURSTS, spec.duration, min_gap=1.2):
        i0 = int(t0 * sr)
        n = int(0.3 * sr)
        tt = np.arange(n) / sr
        env = np.minimum(tt / 0.005, 1.0) * np.exp(-tt / 0.06)
        burst = _harmonic_source(tt, spec.base_freqs, rng, detune=detune)
        seg = slice(i0, min(i0 + n, t.size))
        x[seg] += (env * burst)[: seg.stop - seg.start]
    return x


def _add_transients(x, spec, rng, strength):
    sr = spec.sample_rate
    rms = np.sqrt(np.mean(x**2))
    n_bursts = int(rng.integers(TRANSIENTS[0], TRANSIENTS[1] + 1))
    n = int(0.06 * sr)
    env = np.exp(-np.arange(n) / (0.015 * sr))
    for t0 in _burst_times(rng, n_bursts, spec.duration, min_gap=0.3):
        i0 = int(t0 * sr)
        click = rng.standard_normal(n) * env * rms * 12.0 * strength
        end = min(i0 + n, x.size)
        x[i0:end] += click[: end - i0]
    return x


def _background_level(t, rng, swing_db):
    """Slowly wandering background gain: a few sub-hertz sinusoids spanning +-swing_db."""
    level = np.zeros_like(t)
    for _ in range(3):
        level += np.sin(2.0 * np.pi * rng.uniform(0.05, 0.6) * t + rng.uniform(0, 2 * np.pi))
    level *= swing_db / max(np.max(np.abs(level)), 1e-12)
    return 10.0 ** (level / 20.0)


def _interference(t, rng, n_events):
    """Unrelated tonal sources passing by: a few faded harmonic tones of 0.5-2 s at random pitch."""
    sr = 1.0 / (t[1] - t[0])
    x = np.zeros_like(t)
    for _ in range(n_events):
        n = int(rng.uniform(0.5, 2.0) * sr)
        i0 = int(rng.integers(0, t.size - n))
        tt = t[:n]
        fade = np.minimum(1.0, np.minimum(tt, tt[-1] - tt) / 0.05)
        tone = _harmonic_source(tt, [rng.uniform(250.0, 2500.0)], rng)
        x[i0 : i0 + n] += fade * tone / np.sqrt(np.mean(tone**2))
    return x


def gen_components(spec: SynthSpec, index: int, label: str) -> tuple[np.ndarray, np.ndarray]:
    """Return (machine signal, noise).

    The base machine sound is normalized before any anomaly is applied and
    the noise is scaled to that nominal power, so normal clips sit exactly
    ``snr_db`` above the noise and anomalies never shift the background
    level. A random per-clip gain (shared by signal and noise) mimics
    recording-level spread.
    """
    if label not in ("normal", "anomalous"):
        raise ConfigurationError(f"unknown label {label!r}")
    rng = _rng(spec, index, label)
    t = np.arange(spec.n_samples) / spec.sample_rate
    anomalous = label == "anomalous"
    s = spec.anomaly_strength
    kind = spec.anomaly_kind

    detune = 0.0
    if anomalous and kind == "detuned_harmonics":
        detune = s * rng.uniform(0.03, 0.06) * rng.choice([-1.0, 1.0])
    if spec.machine_type == "valve":
        x = _valve_source(t, spec, rng, detune=detune)
        target_rms = VALVE_RMS
    else:
        x = _harmonic_source(t, spec.base_freqs, rng, detune=detune)
        target_rms = STATIONARY_RMS
    x *= target_rms / np.sqrt(np.mean(x**2))
    if anomalous and kind == "amplitude_modulation":
        fm = rng.uniform(3.0, 8.0)
        depth = min(0.95, 0.6 * s)
        x = x * (1.0 + depth * np.sin(2.0 * np.pi * fm * t + rng.uniform(0, 2 * np.pi)))
    if anomalous and kind == "transient_bursts":
        x = _add_transients(x, spec, rng, s)

    noise = rng.standard_normal(t.size)
    if spec.background_swing_db:
        noise *= _background_level(t, rng, spec.background_swing_db)
    if spec.interference_events:
        noise += INTERFERENCE_LEVEL * _interference(t, rng, spec.interference_events)
    noise *= np.sqrt(target_rms**2 / 10.0 ** (spec.snr_db / 10.0) / np.mean(noise**2))
    gain = 10.0 ** (rng.uniform(-LEVEL_SPREAD_DB, LEVEL_SPREAD_DB) / 20.0)
    return gain * x, gain * noise


def gen_clip(spec: SynthSpec, index: int, label: str) -> np.ndarray:
    x, noise = gen_components(spec, index, label)
    return x + noise


def group_dir(root, spec: SynthSpec) -> Path:
    return Path(root) / spec.snr_tag / spec.machine_type / spec.model_id


def gen_dataset(specs, root, overwrite: bool = False) -> dict:
    """Write ``<snr>/<machine>/<id>/<normal|abnormal>/NNNN.wav`` plus ``manifest.json``.

    Refuses a non-empty ``root`` unless ``overwrite``; with it, only the
    group directories being generated are replaced.
    """
    specs = [specs] if isinstance(specs, SynthSpec) else list(specs)
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not overwrite:
        raise FileExistsError(f"{root} is not empty; pass overwrite=True to regenerate")
    root.mkdir(parents=True, exist_ok=True)
    counts = {}
    for spec in specs:
        gdir = group_dir(root, spec)
        if gdir.exists():
            shutil.rmtree(gdir)
        for label, sub, n in (("normal", "normal", spec.n_normal), ("anomalous", "abnormal", spec.n_anomalous)):
            d = gdir / sub
            d.mkdir(parents=True, exist_ok=True)
            for i in range(n):
                write_wav(d / f"{i:04d}.wav", gen_clip(spec, i, label), spec.sample_rate)
        counts[str(gdir.relative_to(root))] = {"normal": spec.n_normal, "anomalous": spec.n_anomalous}
    manifest = {"generator": "aad.synthgen", "specs": [s.to_dict() for s in specs], "counts": counts}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def specs_from_config(cfg: dict) -> list[SynthSpec]:
    """Parse the ``synth`` section of a config: defaults merged into each machine entry."""
    if "machines" not in cfg:
        raise ConfigurationError("synth config needs a 'machines' list")
    defaults = {k: v for k, v in cfg.items() if k not in ("machines", "schema")}
    specs = []
    for entry in cfg["machines"]:
        kw = {**defaults, **entry}
        machine = kw.pop("machine_type")
        ids = kw.pop("model_ids", None) or [kw.pop("model_id", "id_00")]
        for j, mid in enumerate(ids):
            seed = int(kw.get("seed", 0)) + 1000 * j
            specs.append(SynthSpec.for_machine(machine, **{**kw, "model_id": mid, "seed": seed}))
    return specs
