import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contsep.dsp import (DESK, PAPER, ComplexSpectrogram, MagnitudeSpectrogram, RatioMask,
                         Waveform, apply_mask_and_reconstruct, hann_window, inverse_log_freq_resample,
                         istft, log_freq_matrix, log_freq_resample, ratio_mask, ratio_mask_array,
                         stft, to_linear_grid, to_log_grid)
from contsep.errors import ConfigError, DimensionError, InputError
from contsep.metrics import bss_eval


def snr_db(ref, est):
    return 10 * np.log10(np.sum(ref ** 2) / np.sum((ref - est) ** 2))


def test_hann_window_is_periodic():
    w = hann_window(8)
    assert w[0] == 0.0 and w[4] == pytest.approx(1.0)
    assert np.sum(w ** 2) == pytest.approx(3 * 8 / 8)


@pytest.mark.parametrize("prof", [DESK, PAPER], ids=["desk", "paper"])
def test_round_trip_interior_snr(prof):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(prof.clip_samples)
    y = istft(stft(x, prof.window_len, prof.hop), x.size).samples
    n = prof.window_len
    assert snr_db(x[n:-n], y[n:-n]) >= 60.0


def test_stft_frame_count_and_trim():
    x = np.random.default_rng(1).standard_normal(DESK.clip_samples)
    spec = stft(x, DESK.window_len, DESK.hop)
    assert spec.shape == (DESK.linear_bins, 1 + x.size // DESK.hop)
    assert stft(x, DESK.window_len, DESK.hop, n_frames=DESK.n_frames).shape[1] == DESK.n_frames
    assert stft(x, DESK.window_len, DESK.hop, n_frames=200).shape[1] == 200


def test_stft_of_tone_peaks_at_its_bin():
    sr, n = 8000, 256
    t = np.arange(4096) / sr
    k = 20
    x = np.sin(2 * np.pi * k * sr / n * t)
    mag = stft(x, n, 64).magnitude().mag
    assert np.argmax(mag[:, 10]) == k


def test_geometry_and_input_errors():
    with pytest.raises(ConfigError):
        stft(np.zeros(100), 32, 0)
    with pytest.raises(ConfigError):
        stft(np.zeros(100), 16, 32)
    with pytest.raises(InputError):
        stft(np.zeros(10), 32, 8)
    with pytest.raises(InputError):
        Waveform(np.array([0.0, np.nan]), 8000)
    with pytest.raises(DimensionError):
        ComplexSpectrogram(np.zeros((3, 4)), np.zeros((3, 5)), 4, 2)
    with pytest.raises(InputError):
        MagnitudeSpectrogram(-np.ones((3, 4)))


def test_log_grid_matrix_rows_are_interpolation_weights():
    m = log_freq_matrix(128, 64)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
    assert m[0, 1] == pytest.approx(1.0) and m[-1, -1] == pytest.approx(1.0)


def test_log_grid_round_trip_on_smooth_spectrum():
    k = np.arange(DESK.linear_bins, dtype=np.float64)
    smooth = np.exp(-((np.log(np.maximum(k, 1)) - 3.0) ** 2))[:, None] * np.ones((1, 5))
    back = to_linear_grid(to_log_grid(smooth, 64), DESK.linear_bins)
    np.testing.assert_allclose(back[1:], smooth[1:], atol=0.03)


def test_resample_wrappers_check_grids():
    m = MagnitudeSpectrogram(np.ones((DESK.linear_bins, 4)))
    log = log_freq_resample(m, 64)
    assert log.grid == "log" and log.shape == (64, 4)
    assert inverse_log_freq_resample(log).shape == (DESK.linear_bins, 4)
    with pytest.raises(InputError):
        log_freq_resample(log, 64)
    with pytest.raises(InputError):
        inverse_log_freq_resample(m)


def test_ratio_mask_bounds_and_errors():
    rng = np.random.default_rng(2)
    a, b = rng.random((5, 6)), rng.random((5, 6))
    mask = ratio_mask_array(a, a + b)
    assert mask.min() >= 0.0 and mask.max() <= 1.0
    np.testing.assert_allclose(mask + ratio_mask_array(b, a + b), 1.0, atol=1e-6)
    assert np.all(ratio_mask_array(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0)
    with pytest.raises(DimensionError):
        ratio_mask_array(a, b[:4])
    with pytest.raises(DimensionError):
        ratio_mask(MagnitudeSpectrogram(a), MagnitudeSpectrogram(b, grid="log"))


def test_unit_mask_reconstructs_mixture():
    x = np.random.default_rng(3).standard_normal(DESK.clip_samples)
    spec = stft(x, DESK.window_len, DESK.hop)
    y = apply_mask_and_reconstruct(np.ones(spec.shape), spec, x.size).samples
    n = DESK.window_len
    assert snr_db(x[n:-n], y[n:-n]) >= 60.0
    with pytest.raises(DimensionError):
        apply_mask_and_reconstruct(np.ones((3, 3)), spec, x.size)


@pytest.mark.parametrize("grid", ["linear", "log"])
def test_ground_truth_mask_separates_two_tones(grid):
    sr, n = DESK.sample_rate, DESK.clip_samples
    t = np.arange(n) / sr
    s1 = 0.5 * np.sin(2 * np.pi * 440 * t)
    s2 = 0.3 * np.sin(2 * np.pi * 1230 * t + 0.4)
    mix = stft(s1 + s2, DESK.window_len, DESK.hop)
    m1 = stft(s1, DESK.window_len, DESK.hop).magnitude()
    if grid == "linear":
        mask = ratio_mask(m1, mix.magnitude())
    else:
        mask = ratio_mask(log_freq_resample(m1, 64), log_freq_resample(mix.magnitude(), 64))
    est = apply_mask_and_reconstruct(mask, mix, n).samples
    assert bss_eval(est, [s1, s2], 0, filter_len=64)[0] >= 10.0


def test_ratio_mask_type_keeps_grid():
    mask = RatioMask(np.ones((64, 3)), grid="log", linear_bins=DESK.linear_bins)
    assert mask.shape == (64, 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([(64, 16), (128, 32), (254, 64)]))
def test_round_trip_property(seed, geom):
    win, hop = geom
    x = np.random.default_rng(seed).standard_normal(4 * win + 17)
    y = istft(stft(x, win, hop), x.size).samples
    assert snr_db(x[win:-win], y[win:-win]) >= 60.0
