"""WAV reading/writing and dataset directory indexing."""

from __future__ import annotations

import csv
import io
import logging
import os
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import EmptyInputError, FormatError, UnsupportedFormatError

log = logging.getLogger(__name__)

MACHINE_TYPES = ("valve", "pump", "fan", "slide_rail")
SNR_TAGS = ("6dB", "0dB", "-6dB")
LABEL_DIRS = {"normal": "normal", "abnormal": "anomalous"}

PAPER_SAMPLE_RATE = 16000
WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_EXTENSIBLE = 0xFFFE

_SNR_RE = re.compile(r"^(-?\d+)_?dB", re.IGNORECASE)


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray  # [channels, n_samples], float in [-1, 1]
    sample_rate: int
    source_path: str = ""

    def __post_init__(self):
        if self.samples.ndim != 2:
            raise ValueError("samples must be 2-D [channels, n_samples]")
        if self.samples.shape[0] < 1 or self.samples.shape[1] < 1:
            raise ValueError("clip needs at least one channel and one sample")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


def _parse_wav(buf: bytes, name: str):
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise FormatError(f"{name}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(buf):
        cid, size = struct.unpack_from("<4sI", buf, pos)
        body = pos + 8
        if cid == b"fmt ":
            if size < 16 or body + size > len(buf):
                raise FormatError(f"{name}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", buf, body)
            if fmt[0] == WAVE_FORMAT_EXTENSIBLE:
                if size < 40:
                    raise FormatError(f"{name}: truncated extensible fmt chunk")
                sub = struct.unpack_from("<H", buf, body + 24)[0]
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            # tolerate a data chunk whose declared size overruns the file end
            data = buf[body:min(body + size, len(buf))]
            if fmt is not None:
                break
        pos = body + size + (size & 1)
    if fmt is None:
        raise FormatError(f"{name}: missing fmt chunk")
    if data is None:
        raise FormatError(f"{name}: missing data chunk")
    return fmt, data


def read_wav(path, expected_rate: int | None = PAPER_SAMPLE_RATE) -> AudioClip:
    """Read a 16-bit PCM WAV file into an :class:`AudioClip`.

    Samples are scaled by 1/32768 so that -32768 maps to exactly -1.0.
    ``expected_rate`` rejects files at any other rate; pass ``None`` to
    accept any rate.
    """
    path = os.fspath(path)
    with open(path, "rb") as fh:
        buf = fh.read()
    (code, channels, rate, _, block_align, bits), data = _parse_wav(buf, path)
    if code != WAVE_FORMAT_PCM or bits != 16:
        raise UnsupportedFormatError(
            f"{path}: unsupported encoding (format code {code:#06x}, {bits}-bit); "
            "only 16-bit integer PCM is read",
            format_code=code,
        )
    if channels < 1 or block_align != 2 * channels:
        raise FormatError(f"{path}: inconsistent channel count / block alignment")
    if expected_rate is not None and rate != expected_rate:
        raise UnsupportedFormatError(
            f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz", format_code=code
        )
    n_frames = len(data) // block_align
    if n_frames == 0:
        raise FormatError(f"{path}: no audio frames")
    pcm = np.frombuffer(data[: n_frames * block_align], dtype="<i2")
    samples = pcm.reshape(n_frames, channels).T.astype(np.float64) / 32768.0
    return AudioClip(np.ascontiguousarray(samples), int(rate), path)


def write_wav(path, samples, sample_rate: int = PAPER_SAMPLE_RATE) -> None:
    """Write float samples ([n] or [channels, n]) as 16-bit PCM, clipping to full scale."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    channels, n = pcm.shape
    payload = pcm.T.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, WAVE_FORMAT_PCM, channels, sample_rate,
        sample_rate * channels * 2, channels * 2, 16,
        b"data", len(payload),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def select_channel(clip: AudioClip, index: int) -> AudioClip:
    if not 0 <= index < clip.channels:
        raise IndexError(f"channel {index} out of range for {clip.channels}-channel clip")
    return AudioClip(clip.samples[index : index + 1].copy(), clip.sample_rate, clip.source_path)


@dataclass(frozen=True)
class ClipEntry:
    path: str
    machine: str
    model_id: str
    snr: str
    label: str  # "normal" | "anomalous"

    @property
    def is_anomalous(self) -> bool:
        return self.label == "anomalous"


@dataclass
class ClipIndex:
    entries: list[ClipEntry]
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def counts(self) -> dict[tuple[str, str, str, str], int]:
        return dict(Counter((e.machine, e.model_id, e.snr, e.label) for e in self.entries))

    def groups(self) -> list[tuple[str, str, str]]:
        return sorted({(e.machine, e.model_id, e.snr) for e in self.entries})

    def select(self, machine=None, model_id=None, snr=None, label=None) -> "ClipIndex":
        """Filter entries; each criterion is a single value or a collection of accepted values."""

        def ok(value, want):
            if want is None:
                return True
            return value == want if isinstance(want, str) else value in want

        keep = [
            e for e in self.entries
            if ok(e.machine, machine) and ok(e.model_id, model_id) and ok(e.snr, snr) and ok(e.label, label)
        ]
        return ClipIndex(keep, list(self.warnings))

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["path", "machine", "model_id", "snr", "label"])
        for e in self.entries:
            w.writerow([e.path, e.machine, e.model_id, e.snr, e.label])
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ClipIndex":
        rows = csv.DictReader(io.StringIO(text))
        return cls([ClipEntry(r["path"], r["machine"], r["model_id"], r["snr"], r["label"]) for r in rows])


def parse_snr_tag(name: str) -> str | None:
    """'6dB', '-6_dB', '0_dB_fan' -> canonical tag, or None."""
    m = _SNR_RE.match(name)
    return f"{int(m.group(1))}dB" if m else None


def scan_dataset(root) -> ClipIndex:
    """Index ``root/<snr>/<machine>/<model_id>/<normal|abnormal>/*.wav``.

    Labels come from directory names only. Unknown machine, SNR or label
    directories are skipped and reported in ``ClipIndex.warnings``.
    """
    root = Path(root)
    if not root.is_dir():
        raise EmptyInputError(f"{root}: not a directory")
    entries = []
    warnings = []
    for snr_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        snr = parse_snr_tag(snr_dir.name)
        if snr is None:
            warnings.append(f"skipped non-SNR directory {snr_dir}")
            continue
        for mdir in sorted(p for p in snr_dir.iterdir() if p.is_dir()):
            if mdir.name not in MACHINE_TYPES:
                warnings.append(f"skipped unknown machine directory {mdir}")
                continue
            for iddir in sorted(p for p in mdir.iterdir() if p.is_dir()):
                for ldir in sorted(p for p in iddir.iterdir() if p.is_dir()):
                    label = LABEL_DIRS.get(ldir.name)
                    if label is None:
                        warnings.append(f"skipped unknown label directory {ldir}")
                        continue
                    for wav in sorted(ldir.glob("*.wav")):
                        entries.append(ClipEntry(str(wav), mdir.name, iddir.name, snr, label))
    if not entries:
        raise EmptyInputError(f"{root}: no clips found")
    for w in warnings:
        log.warning(w)
    entries.sort(key=lambda e: e.path)
    return ClipIndex(entries, warnings)
