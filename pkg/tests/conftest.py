import os
import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def wav_bytes(pcm: np.ndarray, rate: int = 16000, code: int = 1, bits: int = 16) -> bytes:
    """Hand-built RIFF/WAVE image; ``pcm`` is [n] or [n, channels] of raw sample ints."""
    pcm = np.asarray(pcm)
    if pcm.ndim == 1:
        pcm = pcm[:, None]
    channels = pcm.shape[1]
    width = bits // 8
    if bits == 16:
        payload = pcm.astype("<i2").tobytes()
    elif bits == 32:
        payload = pcm.astype("<f4" if code == 3 else "<i4").tobytes()
    else:
        payload = b"".join(int(v).to_bytes(width, "little", signed=True) for v in pcm.ravel())
    fmt = struct.pack("<HHIIHH", code, channels, rate, rate * channels * width, channels * width, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


@pytest.fixture
def make_tree(tmp_path):
    """Build root/<snr>/<machine>/<id>/<label dir>/NNNN.wav with short noise clips."""
    from aad.audio_io import write_wav

    def build(groups, root=None, n_samples=1600):
        root = root or tmp_path / "data"
        rng = np.random.default_rng(0)
        for (snr, machine, model_id, label_dir), n in groups.items():
            d = root / snr / machine / model_id / label_dir
            d.mkdir(parents=True, exist_ok=True)
            for i in range(n):
                write_wav(d / f"{i:04d}.wav", 0.1 * rng.standard_normal(n_samples))
        return root

    return build


# -- acceptance summary -----------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
