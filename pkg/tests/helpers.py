"""Builders shared by several test modules."""

from __future__ import annotations

import numpy as np

from contsep.autodiff import Tensor
from contsep.losses import MODALITIES, FeatureBatch


def random_batch(rng: np.random.Generator, n: int, dim: int = 5, with_old: bool = True,
                 n_classes: int = 3, grad: bool = True):
    """A FeatureBatch with repeated sample and class ids plus its raw arrays."""
    sample_ids = rng.integers(0, max(2, n // 2 + 1), n)
    # one class per sample id keeps the labels consistent
    class_of = rng.integers(0, n_classes, sample_ids.max() + 1)
    class_ids = class_of[sample_ids]
    is_memory = rng.random(n) < 0.5 if with_old else np.zeros(n, dtype=bool)
    cur = {m: rng.standard_normal((n, dim)) for m in MODALITIES}
    old_full = {m: rng.standard_normal((n, dim)) for m in MODALITIES} if with_old else None
    tensors = {m: Tensor(v.copy(), requires_grad=grad) for m, v in cur.items()}
    old = None if old_full is None else {m: v[is_memory] for m, v in old_full.items()}
    batch = FeatureBatch(sample_ids, class_ids, is_memory, tensors, old)
    return batch, dict(sample_ids=sample_ids, class_ids=class_ids, is_memory=is_memory,
                       cur=cur, old=old_full)
