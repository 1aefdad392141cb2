import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aad import ConfigurationError, DimensionError, EmptyInputError
from aad.features import (LOG_FLOOR, LogMelSpectrogram, NormStats, apply_normalizer, compute_log_mel,
                          detect_valve_peaks, fit_normalizer, hann, log_mel, make_feature_batch, mel_centers,
                          mel_filterbank, preprocess_valve, read_feat, stack_frames, stft_power, tile_windows,
                          write_feat)

SR = 16000


def spec_of(values):
    return LogMelSpectrogram(np.asarray(values, dtype=float), 1024, 512, np.shape(values)[1], SR)


# -- STFT ---------------------------------------------------------------------

def test_ten_second_clip_has_313_frames():
    p = stft_power(np.random.default_rng(0).standard_normal(160000))
    assert p.shape == (313, 513)


def test_zero_signal_zero_power():
    assert not np.any(stft_power(np.zeros(4000)))


def test_empty_signal():
    with pytest.raises(EmptyInputError):
        stft_power(np.zeros(0))


def _dft_oracle(frame):
    n = len(frame)
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    return np.abs(np.sum(frame * np.exp(-2j * np.pi * k * t / n), axis=1)) ** 2


def test_1khz_sine_peaks_at_bin_64_against_direct_dft():
    t = np.arange(16000) / SR
    x = np.sin(2 * np.pi * 1000 * t)
    p = stft_power(x)
    # interior frames: the window sees only the sine (edge frames include reflected padding)
    for f in (5, 10, 20):
        assert np.argmax(p[f]) == 64
        seg = x[f * 512 - 512 : f * 512 + 512] * hann(1024)
        np.testing.assert_allclose(p[f], _dft_oracle(seg), rtol=1e-9, atol=1e-6)


def test_hann_is_periodic():
    w = hann(1024)
    assert w[0] == 0.0 and w[512] == pytest.approx(1.0)
    np.testing.assert_allclose(w[1:], w[1:][::-1], atol=1e-12)


@given(st.integers(1, 6000))
def test_frame_count_law(n):
    assert stft_power(np.ones(n)).shape[0] == n // 512 + 1


# -- Mel filterbank ----------------------------------------------------------------

def test_filterbank_shape_and_positivity():
    fb = mel_filterbank()
    assert fb.shape == (64, 513)
    assert np.all(fb >= 0)
    assert np.all(fb.sum(axis=1) > 0)
    for row in fb:
        nz = np.flatnonzero(row)
        assert np.all(np.diff(nz) == 1), "support must be contiguous"


def test_filter_centers_follow_htk_formula():
    def mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def inv(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    expected = inv(np.linspace(0.0, mel(8000.0), 66))[1:-1]
    c = mel_centers()
    assert np.all(np.diff(c) > 0)
    np.testing.assert_allclose(c, expected, rtol=1e-10)


def test_filterbank_peaks_near_centers():
    fb = mel_filterbank()
    freqs = np.arange(513) * SR / 1024
    c = mel_centers()
    peak = freqs[np.argmax(fb, axis=1)]
    # peak bin within one bin of the analytic center
    assert np.all(np.abs(peak - c) <= SR / 1024 + 1e-9)
    assert fb.max() <= 1.0 + 1e-12


def test_too_many_filters():
    with pytest.raises(ConfigurationError):
        mel_filterbank(n_mels=600)


# -- log-Mel -----------------------------------------------------------------------

def test_log_mel_shape():
    spec = log_mel(np.ones((313, 513)), mel_filterbank())
    assert spec.values.shape == (313, 64) and spec.n_frames == 313


def test_log_mel_zero_power_floor():
    spec = log_mel(np.zeros((3, 513)), mel_filterbank())
    assert np.all(spec.values == math.log(LOG_FLOOR))


def test_log_mel_single_frame_oracle():
    rng = np.random.default_rng(3)
    power = rng.random((1, 513))
    fb = mel_filterbank()
    oracle = [math.log(max(sum(fb[m, b] * power[0, b] for b in range(513)), LOG_FLOOR)) for m in range(64)]
    np.testing.assert_allclose(log_mel(power, fb).values[0], oracle, atol=1e-10)


def test_log_mel_shape_mismatch():
    with pytest.raises(DimensionError):
        log_mel(np.ones((3, 512)), mel_filterbank())


@given(st.floats(1.01, 1e4))
def test_log_mel_scaling_shifts_by_log_k(k):
    power = np.random.default_rng(0).random((4, 513)) + 0.1
    fb = mel_filterbank()
    a, b = log_mel(power, fb).values, log_mel(power * k, fb).values
    np.testing.assert_allclose(b - a, math.log(k), atol=1e-9)


def test_compute_log_mel_full_clip():
    spec = compute_log_mel(0.1 * np.random.default_rng(0).standard_normal(160000), SR)
    assert spec.values.shape == (313, 64)
    assert np.all(np.isfinite(spec.values))
    assert np.all(np.isfinite(compute_log_mel(np.zeros(160000), SR).values))


# -- model inputs ---------------------------------------------------------------------

def test_stack_frames_shapes():
    v = np.random.default_rng(0).standard_normal((313, 64))
    assert stack_frames(spec_of(v)).shape == (309, 320)
    five = v[:5]
    np.testing.assert_array_equal(stack_frames(five)[0], five.reshape(-1))
    with pytest.raises(DimensionError):
        stack_frames(v[:4])


@given(st.integers(5, 80))
def test_stack_frames_rows(n):
    v = np.random.default_rng(n).standard_normal((n, 64))
    s = stack_frames(v)
    assert s.shape == (n - 4, 320)
    np.testing.assert_array_equal(s[:, :64], v[: n - 4])
    np.testing.assert_array_equal(s[:, 256:], v[4:])


def test_tile_windows_examples():
    v = np.random.default_rng(0).standard_normal((313, 64)) + 5.0
    w = tile_windows(v)
    assert w.shape == (5, 64, 64)
    assert np.all(w[-1, 57:] == 0) and np.all(w[-1, :57] != 0)
    assert tile_windows(v[:64]).shape == (1, 64, 64)
    w65 = tile_windows(v[:65])
    assert w65.shape == (2, 64, 64)
    assert np.all(w65[1, 1:] == 0) and np.all(w65[1, 0] != 0)
    with pytest.raises(DimensionError):
        tile_windows(np.ones((10, 32)))


@given(st.integers(1, 400))
def test_tile_windows_reconstructs(n):
    v = np.random.default_rng(n).standard_normal((n, 64))
    w = tile_windows(v)
    assert w.shape[0] == math.ceil(n / 64)
    np.testing.assert_array_equal(w.reshape(-1, 64)[:n], v)


# -- normalization ---------------------------------------------------------------------

def test_fit_normalizer_examples():
    st_ = fit_normalizer([np.zeros((1, 2)), np.full((1, 2), 2.0)])
    assert st_.mean == 1.0 and st_.std == 1.0
    assert fit_normalizer([np.full((3, 4), 7.0)]).std == 1e-8
    with pytest.raises(EmptyInputError):
        fit_normalizer([])


def test_fit_normalizer_two_pass_oracle():
    rng = np.random.default_rng(4)
    specs = [rng.normal(-3, 2, (rng.integers(5, 40), 64)) for _ in range(10)]
    cells = [c for s in specs for c in s.ravel()]
    mean = sum(cells) / len(cells)
    var = sum((c - mean) ** 2 for c in cells) / len(cells)
    got = fit_normalizer(specs)
    assert got.mean == pytest.approx(mean, abs=1e-9)
    assert got.std == pytest.approx(math.sqrt(var), abs=1e-9)


def test_apply_normalizer_examples():
    stats = NormStats(-4.0, 2.5)
    assert not np.any(apply_normalizer(np.full((3, 64), -4.0), stats))
    v = np.random.default_rng(0).standard_normal((20, 64))
    back = apply_normalizer(v, stats) * stats.std + stats.mean
    np.testing.assert_allclose(back, v, atol=1e-12)
    specs = [np.random.default_rng(i).normal(-6, 3, (50, 64)) for i in range(5)]
    s = fit_normalizer(specs)
    normed = fit_normalizer([apply_normalizer(x, s) for x in specs])
    assert abs(normed.mean) < 1e-6 and abs(normed.std - 1) < 1e-6


def test_apply_normalizer_keeps_metadata():
    spec = spec_of(np.ones((5, 64)))
    out = apply_normalizer(spec, NormStats(1.0, 2.0))
    assert isinstance(out, LogMelSpectrogram) and out.hop_size == 512
    assert not np.any(out.values)


def test_feature_batch_normalizes_then_shapes():
    v = np.random.default_rng(0).normal(-5, 2, (313, 64))
    stats = NormStats(-5.0, 2.0)
    fb = make_feature_batch(spec_of(v), stats, "clip")
    assert fb.ae_vectors.shape == (309, 320) and fb.svdd_windows.shape == (5, 64, 64)
    # padding is zero in the normalized domain, i.e. the training mean
    assert np.all(fb.svdd_windows[-1, 57:] == 0)
    np.testing.assert_allclose(fb.ae_vectors[0, :64], (v[0] - -5.0) / 2.0, rtol=1e-6)


# -- valve preprocessing --------------------------------------------------------------

def test_valve_silent_input_unchanged():
    x = np.zeros(10 * SR)
    np.testing.assert_array_equal(preprocess_valve(x, SR), x)


def test_valve_single_impulse_centered():
    x = np.zeros(10 * SR)
    x[5 * SR] = 1.0
    y = preprocess_valve(x, SR)
    assert len(y) == SR
    assert np.argmax(y) == SR // 2


def test_valve_bursts_are_kept_and_silence_dropped():
    rng = np.random.default_rng(0)
    x = 0.001 * rng.standard_normal(10 * SR)
    starts = [int(1.3 * SR), int(4.1 * SR), int(7.7 * SR)]
    for s in starts:
        x[s : s + 2000] += 0.5 * np.sin(np.arange(2000) * 0.3) * np.exp(-np.arange(2000) / 400)
    y = preprocess_valve(x, SR)
    assert len(y) == 3 * SR < len(x)
    # nearly all burst energy survives
    assert np.sum(y**2) > 0.95 * np.sum(x**2) - np.sum((0.001 * rng.standard_normal(10 * SR)) ** 2)


def test_valve_peak_at_edge_is_clamped():
    x = np.zeros(3 * SR)
    x[100] = 1.0
    y = preprocess_valve(x, SR)
    assert len(y) == SR and y[100] == 1.0


def test_valve_too_short():
    with pytest.raises(EmptyInputError):
        preprocess_valve(np.ones(SR - 1), SR)


def test_valve_min_gap_keeps_largest():
    x = np.zeros(5 * SR)
    x[2 * SR] = 0.5
    x[2 * SR + SR // 4] = 1.0  # within 1 s of the first: only the larger survives
    peaks = detect_valve_peaks(x, SR)
    assert len(peaks) == 1 and abs(peaks[0] - (2 * SR + SR // 4)) <= 1


@given(arrays(np.float64, st.integers(SR, 3 * SR), elements=st.floats(-1, 1)))
def test_valve_output_length_law(x):
    y = preprocess_valve(x, SR)
    assert len(y) == len(x) or len(y) % SR == 0


# -- cache -----------------------------------------------------------------------------

def test_feat_round_trip_and_header(tmp_path):
    v = np.random.default_rng(0).standard_normal((313, 64)).astype(np.float32)
    p = tmp_path / "0001.wav.feat"
    write_feat(p, spec_of(v))
    raw = p.read_bytes()
    assert raw[:4] == b"AADF"
    assert int.from_bytes(raw[4:6], "little") == 1
    assert int.from_bytes(raw[6:10], "little") == 313
    assert int.from_bytes(raw[10:12], "little") == 64
    assert len(raw) == 16 + 313 * 64 * 4
    np.testing.assert_array_equal(read_feat(p).values, v)
