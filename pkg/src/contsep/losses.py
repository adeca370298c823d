"""Training objectives: mask L1, old-model mask distillation, cross-modal similarity distillation.

Contrastive terms work on a :class:`FeatureBatch`. Every entry has
current-model features for the audio (``"a"``), object (``"o"``) and motion
(``"m"``) modalities. Entries replayed from the exemplar memory also carry
the frozen previous model's features. Those are plain arrays, so no
gradient reaches them.

For an anchor ``i`` the admissible (anchor model, candidate model) pairs
are ``(cur, cur)`` for current-task data and additionally ``(cur, old)``
and ``(old, cur)`` for memory data. A candidate set contains every entry
that has features from the candidate model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError

MODALITIES = ("a", "o", "m")
CROSS_PAIRS = (("a", "o"), ("a", "m"), ("m", "o"))
INTRA_PAIRS = (("a", "a"), ("o", "o"), ("m", "m"))
CUR, OLD = "cur", "old"


@dataclass(frozen=True)
class LossWeights:
    lambda_ins: float = 0.1
    lambda_cls: float = 0.3
    lambda_dist: float = 0.3
    temperature: float = 0.07

    def __post_init__(self):
        if min(self.lambda_ins, self.lambda_cls, self.lambda_dist) < 0:
            raise ConfigError(f"loss weights must be non-negative: {self}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


@dataclass
class FeatureBatch:
    """Features of every side in a batch.

    ``current[mod]`` is an ``(N, D)`` tensor. ``old[mod]`` is an ``(M, D)``
    array whose rows belong to the memory entries, in order.
    """

    sample_ids: np.ndarray
    class_ids: np.ndarray
    is_memory: np.ndarray
    current: dict
    old: dict | None = None

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids)
        self.class_ids = np.asarray(self.class_ids)
        self.is_memory = np.asarray(self.is_memory, dtype=bool)
        n = len(self.sample_ids)
        if len(self.class_ids) != n or len(self.is_memory) != n:
            raise DimensionError("sample_ids, class_ids and is_memory lengths differ")
        for mod, t in self.current.items():
            if t.shape[0] != n:
                raise DimensionError(f"current '{mod}' features have {t.shape[0]} rows, expected {n}")
        n_mem = int(self.is_memory.sum())
        if self.old is not None:
            for mod, arr in self.old.items():
                if np.shape(arr)[0] != n_mem:
                    raise DimensionError(f"old '{mod}' features have {np.shape(arr)[0]} rows "
                                         f"for {n_mem} memory entries")

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def memory_index(self) -> np.ndarray:
        return np.flatnonzero(self.is_memory)

    @property
    def has_old(self) -> bool:
        return self.old is not None and bool(self.is_memory.any())

    def combos(self) -> list[tuple[str, str]]:
        return [(CUR, CUR), (CUR, OLD), (OLD, CUR)] if self.has_old else [(CUR, CUR)]

    def features(self, mod: str, model: str, rows: np.ndarray) -> Tensor:
        """Features for batch rows ``rows``; old rows must be memory entries."""
        if model == CUR:
            return ad.getitem(self.current[mod], rows)
        pos = np.searchsorted(self.memory_index, rows)
        return Tensor(np.asarray(self.old[mod])[pos])

    def permuted(self, perm: np.ndarray) -> "FeatureBatch":
        perm = np.asarray(perm)
        mem_perm = perm[self.is_memory[perm]]
        old = None
        if self.old is not None:
            pos = np.searchsorted(self.memory_index, mem_perm)
            old = {k: np.asarray(v)[pos] for k, v in self.old.items()}
        return FeatureBatch(self.sample_ids[perm], self.class_ids[perm], self.is_memory[perm],
                            {k: ad.getitem(v, perm) for k, v in self.current.items()}, old)


def _zero() -> Tensor:
    return Tensor(np.array(0.0))


def _check_pair(pair) -> tuple[str, str]:
    if len(pair) != 2 or pair[0] not in MODALITIES or pair[1] not in MODALITIES:
        raise ContractError(f"unknown modality pair {pair!r}")
    return pair[0], pair[1]


def _directional(batch: FeatureBatch, mod1: str, mod2: str, temperature: float,
                 labels: np.ndarray, exclude_self: bool) -> Tensor:
    """Mean over (anchor, model-combination) terms of the positive-averaged -log softmax."""
    n = len(batch)
    all_rows = np.arange(n)
    mem_rows = batch.memory_index
    total, count = None, 0
    for m1, m2 in batch.combos():
        anchors = all_rows if (m1, m2) == (CUR, CUR) else mem_rows
        cands = all_rows if m2 == CUR else mem_rows
        a = ad.l2_normalize(batch.features(mod1, m1, anchors), axis=-1)
        c = ad.l2_normalize(batch.features(mod2, m2, cands), axis=-1)
        logp = ad.log_softmax((a @ c.T) * (1.0 / temperature), axis=-1)
        pos = (labels[anchors][:, None] == labels[cands][None, :]).astype(np.float64)
        if exclude_self and mod1 == mod2 and m1 == m2:
            pos[anchors[:, None] == cands[None, :]] = 0.0
        npos = pos.sum(axis=1, keepdims=True)
        weights = np.divide(pos, npos, out=np.zeros_like(pos), where=npos > 0)
        term = -ad.tsum(logp * weights)
        total = term if total is None else total + term
        count += len(anchors)
    return total * (1.0 / count)


def _similarity_loss(batch, pair, temperature, labels, exclude_self, symmetric) -> Tensor:
    mod1, mod2 = _check_pair(pair)
    if len(batch) == 0:
        return _zero()
    fwd = _directional(batch, mod1, mod2, temperature, labels, exclude_self)
    if not symmetric or mod1 == mod2:
        return fwd
    return (fwd + _directional(batch, mod2, mod1, temperature, labels, exclude_self)) * 0.5


def instance_similarity_loss(batch: FeatureBatch, pair, temperature: float = 0.07,
                             symmetric: bool = True) -> Tensor:
    """Instance-aware term: the positive for an anchor is the same video (same sample id)."""
    return _similarity_loss(batch, pair, temperature, batch.sample_ids, False, symmetric)


def class_similarity_loss(batch: FeatureBatch, pair, temperature: float = 0.07,
                          symmetric: bool = True) -> Tensor:
    """Class-aware term: every candidate of the anchor's class is a positive.

    An anchor compared with its own identical vector (same modality and
    model) does not count itself; anchors without positives add zero.
    """
    return _similarity_loss(batch, pair, temperature, batch.class_ids, True, symmetric)


def cross_sdc(batch: FeatureBatch, weights: LossWeights, mode: str = "cross",
              symmetric: bool = True) -> Tensor:
    """``lambda_ins * mean_pairs(L_inst) + lambda_cls * mean_pairs(L_cls)``."""
    if mode == "cross":
        pairs = CROSS_PAIRS
    elif mode == "intra":
        pairs = INTRA_PAIRS
    else:
        raise ConfigError(f"similarity mode must be 'cross' or 'intra', got {mode!r}")
    out = _zero()
    if weights.lambda_ins > 0:
        inst = sum((instance_similarity_loss(batch, p, weights.temperature, symmetric)
                    for p in pairs), _zero())
        out = out + inst * (weights.lambda_ins / len(pairs))
    if weights.lambda_cls > 0:
        cls = sum((class_similarity_loss(batch, p, weights.temperature, symmetric)
                   for p in pairs), _zero())
        out = out + cls * (weights.lambda_cls / len(pairs))
    return out


def _check_same(a, b, what):
    sa = a.shape if hasattr(a, "shape") else np.shape(a)
    sb = b.shape if hasattr(b, "shape") else np.shape(b)
    if tuple(sa) != tuple(sb):
        raise DimensionError(f"{what}: shapes {tuple(sa)} and {tuple(sb)} differ")


def main_separation_loss(pred1, pred2, gt1, gt2) -> Tensor:
    """Per-pixel L1 of each side against its ground-truth mask, summed over sides, mean over batch."""
    _check_same(pred1, gt1, "main loss side 1")
    _check_same(pred2, gt2, "main loss side 2")
    _check_same(pred1, pred2, "main loss sides")
    return ad.mean(ad.tabs(ad.sub(pred1, gt1))) + ad.mean(ad.tabs(ad.sub(pred2, gt2)))


def output_distillation_loss(cur1, cur2, old1, old2, memory1, memory2) -> Tensor:
    """L1 between current and frozen-old masks on memory-origin sides only.

    ``memory1``/``memory2`` flag, per pair, whether that side's video comes
    from the exemplar memory. Each flagged side adds its per-pixel mean
    absolute difference; the sum is divided by the number of pairs.
    """
    if old1 is None or old2 is None:
        return _zero()
    _check_same(cur1, old1, "distillation side 1")
    _check_same(cur2, old2, "distillation side 2")
    memory1 = np.asarray(memory1, dtype=bool)
    memory2 = np.asarray(memory2, dtype=bool)
    n_pairs = cur1.shape[0]
    if memory1.shape != (n_pairs,) or memory2.shape != (n_pairs,):
        raise DimensionError(f"memory flags must have shape ({n_pairs},)")
    if not (memory1.any() or memory2.any()):
        return _zero()
    per_pixel = 1.0 / (np.prod(cur1.shape[1:]) * n_pairs)
    out = _zero()
    for cur, old, flags in ((cur1, old1, memory1), (cur2, old2, memory2)):
        if flags.any():
            rows = np.flatnonzero(flags)
            old_rows = np.asarray(old.data if isinstance(old, Tensor) else old)[rows]
            out = out + ad.tsum(ad.tabs(ad.getitem(cur, rows) - old_rows)) * per_pixel
    return out


def total_loss(main: Tensor, dist: Tensor, sdc: Tensor, weights: LossWeights) -> Tensor:
    return main + dist * weights.lambda_dist + sdc
