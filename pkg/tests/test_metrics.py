import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contsep.errors import DimensionError, InputError
from contsep.metrics import (DB_CAP, ReferenceSpace, bss_decompose, bss_eval, ratio_db, sar,
                             sdr, sir)

from oracles import bss_projection


def _sources(seed, n=600, k=2):
    return list(np.random.default_rng(seed).standard_normal((k, n)))


def test_decomposition_sums_to_estimate():
    refs = _sources(0)
    est = 0.8 * refs[0] + 0.2 * refs[1] + 0.05 * np.random.default_rng(1).standard_normal(600)
    d = bss_decompose(est, refs, 0, filter_len=32)
    total = d.s_target + d.e_interf + d.e_artif
    padded = np.pad(est, (0, 31))
    assert np.linalg.norm(total - padded) <= 1e-9 * np.linalg.norm(padded)


@pytest.mark.parametrize("seed", range(3))
def test_projection_matches_least_squares_oracle(seed):
    refs = _sources(seed, n=200)
    rng = np.random.default_rng(seed + 10)
    est = rng.standard_normal(200) + np.convolve(refs[0], [1.0, 0.4, -0.2])[:200]
    d = bss_decompose(est, refs, 0, filter_len=8)
    s_t, e_i, e_a = bss_projection(est, refs, 0, 8)
    for got, want in ((d.s_target, s_t), (d.e_interf, e_i), (d.e_artif, e_a)):
        np.testing.assert_allclose(got, want, atol=1e-9 * np.linalg.norm(est))


def band_noise(seed, n, lo, hi):
    """White noise restricted to FFT bins [lo, hi): disjoint bands stay orthogonal at every shift."""
    spec = np.fft.rfft(np.random.default_rng(seed).standard_normal(n))
    keep = np.zeros(spec.size, dtype=bool)
    keep[lo:hi] = True
    x = np.fft.irfft(np.where(keep, spec, 0), n)
    return x / np.sqrt(np.mean(x * x))


def test_orthogonal_interference_closed_form():
    n = 4096
    s1 = band_noise(0, n, 20, 600)
    s2 = band_noise(1, n, 900, 1800)
    est = s1 + 0.1 * s2
    assert sir(bss_decompose(est, [s1, s2], 0, filter_len=1)) == pytest.approx(20.0, abs=1e-6)
    assert bss_eval(est, [s1, s2], 0, filter_len=64)[1] == pytest.approx(20.0, abs=0.5)


def test_scale_invariance():
    refs = _sources(3)
    est = refs[0] + 0.3 * refs[1] + 0.1 * np.random.default_rng(4).standard_normal(600)
    base = bss_eval(est, refs, 0, 16)
    for scale in (1e-3, 7.5, -2.0):
        for a, b in zip(bss_eval(scale * est, refs, 0, 16), base):
            assert abs(a - b) <= 1e-9


def test_perfect_estimate_hits_cap_and_zero_estimate_floor():
    refs = _sources(5)
    assert bss_eval(refs[0], refs, 0, 16)[0] == DB_CAP
    d = bss_decompose(np.zeros(600), refs, 0, 16)
    assert d.degenerate
    assert sdr(d) == -DB_CAP


def test_reference_space_reuses_factorisation():
    refs = _sources(6)
    space = ReferenceSpace(refs, 16)
    est = refs[1] + 0.2 * refs[0]
    a = space.decompose(est, 1)
    b = bss_decompose(est, refs, 1, 16)
    np.testing.assert_allclose(a.s_target, b.s_target)
    assert sar(a) == pytest.approx(sar(b))


def test_ratio_db_edges():
    assert ratio_db(0.0, 1.0) == -DB_CAP
    assert ratio_db(1.0, 0.0) == DB_CAP
    assert ratio_db(10.0, 1.0) == pytest.approx(10.0)


def test_shape_errors():
    refs = _sources(7)
    with pytest.raises(DimensionError):
        bss_eval(np.zeros(10), refs, 0)
    with pytest.raises(InputError):
        ReferenceSpace(refs, 0)
    with pytest.raises(InputError):
        ReferenceSpace(refs, 4).decompose(refs[0], 5)


def test_singular_references_warn_and_still_decompose():
    s = _sources(8)[0]
    with pytest.warns(RuntimeWarning):
        d = bss_decompose(s, [s, 2 * s], 0, 4)
    assert np.isfinite(sdr(d))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_more_interference_lowers_sir(seed, amount):
    refs = _sources(seed, n=300)
    lo = bss_eval(refs[0] + 0.5 * amount * refs[1], refs, 0, 8)[1]
    hi = bss_eval(refs[0] + amount * refs[1], refs, 0, 8)[1]
    assert hi < lo
