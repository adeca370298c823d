"""BSS-eval source metrics (SDR / SIR / SAR).

The estimate is split into a target part (projection onto delayed copies
of the true source), an interference part (projection onto every
reference's delays, minus the target part) and an artifact remainder. As
in ``bss_eval_sources`` all signals are zero-padded by ``filter_len - 1``
samples, so delayed copies are full shifts and the Gram matrix is block
Toeplitz.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.fft import irfft, next_fast_len, rfft

from .dsp import Waveform
from .errors import DimensionError, InputError

DB_CAP = 100.0
DEFAULT_FILTER_LEN = 512


@dataclass
class BssDecomposition:
    s_target: np.ndarray
    e_interf: np.ndarray
    e_artif: np.ndarray
    filter_len: int

    @property
    def estimate(self) -> np.ndarray:
        return self.s_target + self.e_interf + self.e_artif

    @property
    def degenerate(self) -> bool:
        """True when the target projection has no energy (metrics sit at the floor)."""
        return float(np.dot(self.s_target, self.s_target)) == 0.0


def ratio_db(num: float, den: float) -> float:
    """``10 log10(num / den)`` clipped to +-100 dB instead of going infinite."""
    if num <= 0.0:
        return -DB_CAP
    if den <= 1e-20 * num:
        return DB_CAP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CAP, DB_CAP))


def _energy(x: np.ndarray) -> float:
    return float(np.dot(x, x))


def sdr(d: BssDecomposition) -> float:
    return ratio_db(_energy(d.s_target), _energy(d.e_interf + d.e_artif))


def sir(d: BssDecomposition) -> float:
    return ratio_db(_energy(d.s_target), _energy(d.e_interf))


def sar(d: BssDecomposition) -> float:
    return ratio_db(_energy(d.s_target + d.e_interf), _energy(d.e_artif))


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


class ReferenceSpace:
    """Delay-span projections for a fixed set of reference sources.

    Factorisations are cached, so decomposing several estimates against the
    same references (both sides of one mixture) costs one Gram solve setup.
    """

    def __init__(self, references: Sequence, filter_len: int = DEFAULT_FILTER_LEN):
        refs = np.stack([_samples(r) for r in references])
        if refs.ndim != 2:
            raise DimensionError(f"references must be 1-D signals, got stack of shape {refs.shape}")
        if filter_len < 1:
            raise InputError(f"filter_len must be positive, got {filter_len}")
        self.n_src, self.length = refs.shape
        self.filter_len = filter_len
        self.padded_len = self.length + filter_len - 1
        self.refs = np.pad(refs, ((0, 0), (0, filter_len - 1)))
        self.nfft = next_fast_len(2 * self.padded_len)
        self.ref_fft = rfft(self.refs, n=self.nfft, axis=-1)
        self._full = None
        self._single: dict[int, tuple] = {}

    def _gram_block(self, j: int, k: int) -> np.ndarray:
        # xc[d] = sum_m r_j[m] r_k[m + d]; block[t1, t2] = xc[t1 - t2]
        xc = irfft(np.conj(self.ref_fft[j]) * self.ref_fft[k], n=self.nfft)
        L = self.filter_len
        first_col = xc[np.arange(L)]                # d = t1 - 0 >= 0
        first_row = xc[(-np.arange(L)) % self.nfft]  # d = 0 - t2 <= 0
        return scipy.linalg.toeplitz(first_col, first_row)

    def _factor(self, sources: tuple[int, ...]):
        L = self.filter_len
        n = len(sources)
        gram = np.zeros((n * L, n * L))
        for a, j in enumerate(sources):
            for b, k in enumerate(sources):
                if b < a:
                    continue
                block = self._gram_block(j, k)
                gram[a * L:(a + 1) * L, b * L:(b + 1) * L] = block
                if b != a:
                    gram[b * L:(b + 1) * L, a * L:(a + 1) * L] = block.T
        try:
            return scipy.linalg.cho_factor(gram, check_finite=False)
        except np.linalg.LinAlgError:
            ridge = 1e-10 * np.trace(gram)
            warnings.warn(f"singular reference Gram matrix; ridge-regularising with {ridge:.3g}",
                          RuntimeWarning, stacklevel=3)
            gram = gram + max(ridge, np.finfo(float).tiny) * np.eye(gram.shape[0])
            return scipy.linalg.cho_factor(gram, check_finite=False)

    def _project(self, est_fft: np.ndarray, sources: tuple[int, ...], factor) -> np.ndarray:
        L = self.filter_len
        rhs = np.concatenate([
            irfft(np.conj(self.ref_fft[j]) * est_fft, n=self.nfft)[:L] for j in sources
        ])
        coef = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
        spec = sum(rfft(coef[a * L:(a + 1) * L], n=self.nfft) * self.ref_fft[j]
                   for a, j in enumerate(sources))
        return irfft(spec, n=self.nfft)[: self.padded_len]

    def decompose(self, estimate, target_idx: int) -> BssDecomposition:
        est = _samples(estimate)
        if est.shape != (self.length,):
            raise DimensionError(f"estimate length {est.shape} != reference length {self.length}")
        if not 0 <= target_idx < self.n_src:
            raise InputError(f"target index {target_idx} out of range for {self.n_src} references")
        est = np.pad(est, (0, self.filter_len - 1))
        est_fft = rfft(est, n=self.nfft)
        if target_idx not in self._single:
            self._single[target_idx] = self._factor((target_idx,))
        if self._full is None:
            self._full = self._factor(tuple(range(self.n_src)))
        s_target = self._project(est_fft, (target_idx,), self._single[target_idx])
        p_all = self._project(est_fft, tuple(range(self.n_src)), self._full)
        return BssDecomposition(s_target, p_all - s_target, est - p_all, self.filter_len)


def bss_decompose(estimate, references: Sequence, target_idx: int,
                  filter_len: int = DEFAULT_FILTER_LEN) -> BssDecomposition:
    refs = [_samples(r) for r in references]
    lengths = {r.size for r in refs} | {_samples(estimate).size}
    if len(lengths) != 1:
        raise DimensionError(f"estimate and references must share one length, got {sorted(lengths)}")
    return ReferenceSpace(refs, filter_len).decompose(estimate, target_idx)


def bss_eval(estimate, references: Sequence, target_idx: int,
             filter_len: int = DEFAULT_FILTER_LEN) -> tuple[float, float, float]:
    d = bss_decompose(estimate, references, target_idx, filter_len)
    return sdr(d), sir(d), sar(d)
