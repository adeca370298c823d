"""Class-incremental training and evaluation loop.

A run splits the classes into disjoint tasks and trains one separator
task by task on mix-and-separate pairs. Memory-based methods replay a few
exemplars of every old class and distil from a frozen copy of the model
taken at the end of the previous task. After each task the model is
evaluated on cross-class test mixtures of every class seen so far.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig
from .data import Dataset, VideoSample
from .dsp import (ComplexSpectrogram, DSPProfile, RatioMask, apply_mask_and_reconstruct, ratio_mask_array, stft,
                  to_log_grid)
from .errors import ConfigError, ContractError, InputError, NumericError
from .io import load_checkpoint, save_checkpoint
from .losses import (FeatureBatch, LossWeights, cross_sdc, main_separation_loss,
                     output_distillation_loss, total_loss, MODALITIES)
from .metrics import ReferenceSpace, sar, sdr, sir
from .model import Separator

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "method", "seed", "sdr", "sir", "sar", "sdr_old", "sir_old", "sar_old")


# ---------------------------------------------------------------------------
# tasks and memory


@dataclass
class TaskSequence:
    tasks: list[list[int]]

    def __post_init__(self):
        seen: set[int] = set()
        for classes in self.tasks:
            if seen & set(classes):
                raise ConfigError(f"tasks share classes {sorted(seen & set(classes))}")
            seen |= set(classes)

    def __len__(self) -> int:
        return len(self.tasks)

    def seen(self, t: int) -> list[int]:
        """Classes of tasks 1..t (1-based)."""
        return [c for classes in self.tasks[:t] for c in classes]


def split_classes(num_classes: int, num_tasks: int, seed: int) -> TaskSequence:
    """Shuffled partition into ``num_tasks`` near-equal class sets."""
    if num_tasks < 1 or num_tasks > num_classes:
        raise ConfigError(f"cannot split {num_classes} classes into {num_tasks} tasks")
    perm = np.random.default_rng([seed, 31]).permutation(num_classes)
    return TaskSequence([sorted(int(c) for c in part) for part in np.array_split(perm, num_tasks)])


@dataclass
class MemorySet:
    capacity: int
    exemplars: dict[int, list[VideoSample]] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted(self.exemplars)

    def samples(self) -> list[VideoSample]:
        return [s for c in self.classes for s in self.exemplars[c]]

    def __len__(self) -> int:
        return sum(len(v) for v in self.exemplars.values())


def select_exemplars(memory: MemorySet, task_train: list[VideoSample],
                     rng: np.random.Generator) -> MemorySet:
    """Add ``capacity`` random exemplars of every class in ``task_train`` to the memory."""
    if memory.capacity < 1:
        raise ConfigError(f"memory capacity must be at least 1, got {memory.capacity}")
    by_class: dict[int, list[VideoSample]] = {}
    for s in task_train:
        by_class.setdefault(s.class_id, []).append(s)
    merged = {c: list(v) for c, v in memory.exemplars.items()}
    for c in sorted(by_class):
        pool = by_class[c]
        k = min(memory.capacity, len(pool))
        picks = rng.choice(len(pool), size=k, replace=False)
        merged[c] = [pool[i] for i in sorted(picks)]
    return MemorySet(memory.capacity, merged)


# ---------------------------------------------------------------------------
# mix-and-separate pairs


class Frontend:
    """Spectrogram features for a DSP profile.

    Per-sample spectra are cached by sample id. The STFT is linear, so a
    mixture's spectrum is the sum of its sources' spectra.
    """

    def __init__(self, profile: DSPProfile):
        self.profile = profile
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def spectrum(self, wave: np.ndarray) -> ComplexSpectrogram:
        p = self.profile
        return stft(wave, p.window_len, p.hop, n_frames=p.n_frames)

    def source(self, sample: VideoSample) -> tuple[np.ndarray, np.ndarray]:
        """Complex spectrum and log-grid magnitude of one sample."""
        hit = self._cache.get(sample.sample_id)
        if hit is None:
            z = self.spectrum(sample.waveform).values
            hit = (z, self.log_mag(z))
            self._cache[sample.sample_id] = hit
        return hit

    def log_mag(self, z: np.ndarray) -> np.ndarray:
        return to_log_grid(np.abs(z), self.profile.log_bins)

    def mixture_spectrum(self, a: VideoSample, b: VideoSample) -> ComplexSpectrogram:
        p = self.profile
        return ComplexSpectrogram.from_complex(self.source(a)[0] + self.source(b)[0],
                                               p.window_len, p.hop)

    def reconstruct(self, mask: np.ndarray, mixture_spec, length: int) -> np.ndarray:
        return apply_mask_and_reconstruct(RatioMask(mask, grid="log"), mixture_spec, length,
                                          self.profile.sample_rate).samples


@dataclass
class TrainingPair:
    a: VideoSample
    b: VideoSample
    mixture: np.ndarray          # waveform
    mix_mag: np.ndarray          # (F, T) log-grid magnitude
    mask_a: np.ndarray
    mask_b: np.ndarray
    memory_a: bool
    memory_b: bool


def make_pair(frontend: Frontend, a: VideoSample, b: VideoSample,
              memory_ids: frozenset = frozenset()) -> TrainingPair:
    za, mag_a = frontend.source(a)
    zb, mag_b = frontend.source(b)
    mix_mag = frontend.log_mag(za + zb)
    return TrainingPair(a, b, a.waveform + b.waveform, mix_mag,
                        ratio_mask_array(mag_a, mix_mag), ratio_mask_array(mag_b, mix_mag),
                        a.sample_id in memory_ids, b.sample_id in memory_ids)


def build_pairs(frontend: Frontend, available: list[VideoSample], batch_size: int,
                rng: np.random.Generator, memory_ids: frozenset = frozenset(),
                allow_same_class: bool = True) -> list[TrainingPair]:
    """Uniformly sampled pairs of distinct videos from ``available``."""
    n = len(available)
    if n < 2:
        raise InputError(f"need at least 2 samples to build pairs, got {n}")
    if not allow_same_class and len({s.class_id for s in available}) < 2:
        raise InputError("cross-class pairs need samples from at least 2 classes")
    pairs = []
    while len(pairs) < batch_size:
        i = int(rng.integers(n))
        j = int(rng.integers(n - 1))
        j += j >= i
        a, b = available[i], available[j]
        if not allow_same_class and a.class_id == b.class_id:
            continue
        pairs.append(make_pair(frontend, a, b, memory_ids))
    return pairs


def crop_pairs(pairs: list[TrainingPair], frames: int | None,
               rng: np.random.Generator) -> list[TrainingPair]:
    """Random time crop of each pair's spectrogram and masks (waveforms untouched)."""
    if frames is None:
        return pairs
    out = []
    for p in pairs:
        total = p.mix_mag.shape[1]
        start = int(rng.integers(total - frames + 1))
        sl = slice(start, start + frames)
        out.append(TrainingPair(p.a, p.b, p.mixture, p.mix_mag[:, sl], p.mask_a[:, sl],
                                p.mask_b[:, sl], p.memory_a, p.memory_b))
    return out


def _stack_visual(samples):
    return (np.stack([s.obj for s in samples]), np.stack([s.mot for s in samples]))


# ---------------------------------------------------------------------------
# training


@dataclass
class LossRecord:
    step: int
    iteration: int
    total: float
    main: float
    dist: float
    sdc: float


def batch_losses(model: Separator, old_model: Separator | None, pairs: list[TrainingPair],
                 weights: LossWeights, similarity_mode: str = "cross",
                 symmetric: bool = True) -> dict:
    """All loss terms for one batch of pairs; ``old_model`` None means the first task."""
    mix = np.stack([p.mix_mag for p in pairs])
    side_a = [p.a for p in pairs]
    side_b = [p.b for p in pairs]
    out = model.forward_pair(mix, _stack_visual(side_a), _stack_visual(side_b))
    gt_a = np.stack([p.mask_a for p in pairs])
    gt_b = np.stack([p.mask_b for p in pairs])
    main = main_separation_loss(out.mask1, out.mask2, gt_a, gt_b)

    mem_a = np.array([p.memory_a for p in pairs])
    mem_b = np.array([p.memory_b for p in pairs])
    need_old = old_model is not None and (mem_a.any() or mem_b.any()) and \
        (weights.lambda_dist > 0 or weights.lambda_ins > 0 or weights.lambda_cls > 0)
    old_out = None
    rows = np.flatnonzero(mem_a | mem_b)
    if need_old:
        with ad.no_grad():
            old_out = old_model.forward_pair(mix[rows], _stack_visual([side_a[i] for i in rows]),
                                             _stack_visual([side_b[i] for i in rows]))

    zero = ad.Tensor(np.array(0.0))
    dist = zero
    if old_out is not None and weights.lambda_dist > 0:
        full = []
        for old_mask in (old_out.mask1, old_out.mask2):
            arr = np.zeros(gt_a.shape)
            arr[rows] = old_mask.data
            full.append(arr)
        dist = output_distillation_loss(out.mask1, out.mask2, full[0], full[1], mem_a, mem_b)

    sdc = zero
    if weights.lambda_ins > 0 or weights.lambda_cls > 0:
        sides = side_a + side_b
        is_mem = np.concatenate([mem_a, mem_b])
        current = {m: ad.concat([out.feats1[m], out.feats2[m]], axis=0) for m in MODALITIES}
        old = None
        if old_out is not None:
            # old features for memory sides, in batch-row order
            pos = {int(r): k for k, r in enumerate(rows)}
            old = {}
            for m in MODALITIES:
                vals = []
                for side, flags, feats in ((0, mem_a, old_out.feats1), (1, mem_b, old_out.feats2)):
                    for r in np.flatnonzero(flags):
                        vals.append(feats[m].data[pos[int(r)]])
                old[m] = np.stack(vals)
        fb = FeatureBatch(np.array([s.sample_id for s in sides]),
                          np.array([s.class_id for s in sides]), is_mem, current, old)
        sdc = cross_sdc(fb, weights, similarity_mode, symmetric)
    return {"total": total_loss(main, dist, sdc, weights), "main": main, "dist": dist, "sdc": sdc}


def _dump_batch(path: Path, pairs: list[TrainingPair], losses: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, mix=np.stack([p.mix_mag for p in pairs]),
             sample_a=[p.a.sample_id for p in pairs], sample_b=[p.b.sample_id for p in pairs],
             **{k: float(v.data) for k, v in losses.items()})


def train_task(model: Separator, old_model: Separator | None, available: list[VideoSample],
               memory_ids: frozenset, cfg: ExperimentConfig, rng: np.random.Generator,
               step: int, steps: int | None = None, dump_dir: Path | None = None
               ) -> list[LossRecord]:
    """Run the configured number of Adam steps on pairs drawn from ``available``."""
    frontend = Frontend(cfg.dsp)
    weights = cfg.loss_weights()
    opt = ad.Adam(model.params, lr=cfg.lr, clip_norm=cfg.clip_norm, lr_scales=cfg.lr_scales)
    records = []
    for it in range(steps or cfg.steps_per_task):
        pairs = build_pairs(frontend, available, cfg.batch_size, rng, memory_ids,
                            cfg.train_same_class_pairs)
        pairs = crop_pairs(pairs, cfg.train_crop_frames, rng)
        opt.zero_grad()
        losses = batch_losses(model, old_model, pairs, weights, cfg.similarity_mode,
                              cfg.symmetric_anchors)
        vals = {k: float(v.data) for k, v in losses.items()}
        if not all(np.isfinite(v) for v in vals.values()):
            where = ""
            if dump_dir is not None:
                dump = Path(dump_dir) / f"nonfinite_step{step}_iter{it}.npz"
                _dump_batch(dump, pairs, losses)
                where = f"; batch dumped to {dump}"
            raise NumericError(f"non-finite loss at task {step} iteration {it}: {vals}; samples "
                               f"{[(p.a.sample_id, p.b.sample_id) for p in pairs]}{where}")
        losses["total"].backward()
        opt.step()
        records.append(LossRecord(step, it, vals["total"], vals["main"], vals["dist"], vals["sdc"]))
    return records


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class StepRecord:
    step: int
    sdr: float
    sir: float
    sar: float
    sdr_old: float | None = None
    sir_old: float | None = None
    sar_old: float | None = None

    def row(self, method: str, seed: int) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return [str(self.step), method, str(seed)] + [fmt(v) for v in
                (self.sdr, self.sir, self.sar, self.sdr_old, self.sir_old, self.sar_old)]


def eval_pairs(test: list[VideoSample], n_mixtures: int, seed: int,
               cross_class_only: bool = True) -> list[tuple[VideoSample, VideoSample]]:
    """A fixed list of test mixtures; duplicates are allowed only when pairs run out."""
    rng = np.random.default_rng([seed, 4242])
    cands = [(i, j) for i in range(len(test)) for j in range(i + 1, len(test))
             if not cross_class_only or test[i].class_id != test[j].class_id]
    if not cands:
        raise InputError("no admissible evaluation mixtures among the test samples")
    order = rng.permutation(len(cands))
    picks = [cands[k] for k in order[:n_mixtures]]
    while len(picks) < n_mixtures:
        picks.append(cands[int(rng.integers(len(cands)))])
    return [(test[i], test[j]) for i, j in picks]


def predict_masks(model: Separator, pairs: list[TrainingPair], chunk: int = 16
                  ) -> tuple[np.ndarray, np.ndarray]:
    m1, m2 = [], []
    with ad.no_grad():
        for k in range(0, len(pairs), chunk):
            part = pairs[k:k + chunk]
            out = model.forward_pair(np.stack([p.mix_mag for p in part]),
                                     _stack_visual([p.a for p in part]),
                                     _stack_visual([p.b for p in part]))
            m1.append(out.mask1.data)
            m2.append(out.mask2.data)
    return np.concatenate(m1), np.concatenate(m2)


def eval_workers() -> int:
    """Evaluation thread count from ``CONTSEP_THREADS`` (default 1)."""
    raw = os.environ.get("CONTSEP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CONTSEP_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CONTSEP_THREADS must be >= 1, got {n}")
    return n


def _pair_metrics(frontend: Frontend, p: TrainingPair, k1: np.ndarray, k2: np.ndarray,
                  filter_len: int) -> list[tuple[int, float, float, float]]:
    spec = frontend.mixture_spectrum(p.a, p.b)
    space = ReferenceSpace([p.a.waveform, p.b.waveform], filter_len)
    out = []
    for idx, (sample, mask) in enumerate(((p.a, k1), (p.b, k2))):
        est = frontend.reconstruct(mask, spec, p.mixture.size)
        d = space.decompose(est, idx)
        out.append((sample.class_id, sdr(d), sir(d), sar(d)))
    return out


def side_metrics(frontend: Frontend, pairs: list[TrainingPair], masks1: np.ndarray,
                 masks2: np.ndarray, filter_len: int = 512,
                 workers: int | None = None) -> list[tuple[int, float, float, float]]:
    """(class, SDR, SIR, SAR) for both sides of every mixture, in pair order.

    Mixtures may be scored on several threads; results are gathered in pair
    order so the output does not depend on ``workers``.
    """
    workers = eval_workers() if workers is None else workers
    jobs = list(zip(pairs, masks1, masks2))
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_pair = list(pool.map(lambda j: _pair_metrics(frontend, *j, filter_len), jobs))
    else:
        per_pair = [_pair_metrics(frontend, *j, filter_len) for j in jobs]
    return [row for rows in per_pair for row in rows]


def step_pairs(frontend: Frontend, test: list[VideoSample], seen: list[int], t: int,
               n_mixtures: int, seed: int, cross_class_only: bool = True) -> list[TrainingPair]:
    """The fixed test mixtures scored after task ``t`` of run seed ``seed``."""
    seen_set = set(seen)
    pool = [s for s in test if s.class_id in seen_set]
    return [make_pair(frontend, a, b) for a, b in
            eval_pairs(pool, n_mixtures, seed * 1000 + t, cross_class_only)]


def evaluate_step(model: Separator, test: list[VideoSample], seen: list[int], old: list[int],
                  t: int, frontend: Frontend, n_mixtures: int, seed: int,
                  filter_len: int = 512, cross_class_only: bool = True) -> StepRecord:
    old_set = set(old)
    pairs = step_pairs(frontend, test, seen, t, n_mixtures, seed, cross_class_only)
    m1, m2 = predict_masks(model, pairs)
    sides = side_metrics(frontend, pairs, m1, m2, filter_len)
    rows = np.array([r[1:] for r in sides])
    classes = np.array([r[0] for r in sides])
    rec = StepRecord(t, *rows.mean(axis=0))
    is_old = np.isin(classes, sorted(old_set))
    if t > 1 and is_old.any():
        rec.sdr_old, rec.sir_old, rec.sar_old = rows[is_old].mean(axis=0)
    return rec


def aggregate_old_class_means(records: list[StepRecord]):
    """Mean of the old-class metrics over steps 2..T; None for a single step."""
    later = [r for r in records if r.step > 1 and r.sdr_old is not None]
    if not later:
        return None
    return tuple(float(np.mean([getattr(r, k) for r in later])) for k in ("sdr_old", "sir_old", "sar_old"))


# ---------------------------------------------------------------------------
# whole runs


@dataclass
class RunResult:
    method: str
    seed: int
    split: TaskSequence
    records: list[StepRecord]
    losses: list[LossRecord]
    model: Separator
    seconds: float

    @property
    def final(self) -> StepRecord:
        return self.records[-1]


def run_seed(cfg: ExperimentConfig, data: Dataset, seed: int, out_dir: Path | None = None,
             on_step=None) -> RunResult:
    """Train and evaluate ``cfg.method`` for one seed."""
    start = time.perf_counter()
    split = split_classes(cfg.num_classes, cfg.num_tasks, seed)
    frontend = Frontend(cfg.dsp)
    model = Separator(cfg.separator_config(), seed=seed)
    batch_rng = np.random.default_rng([seed, 1])
    mem_rng = np.random.default_rng([seed, 2])
    train = data.subset("train")
    test = data.subset("test")
    records, losses = [], []

    if cfg.method == "upper_bound":
        # joint training on every class, evaluated once against the same old/new split
        all_classes = split.seen(len(split))
        pool = [s for s in train if s.class_id in set(all_classes)]
        losses += train_task(model, None, pool, frozenset(), cfg, batch_rng, len(split),
                             steps=cfg.steps_per_task * len(split), dump_dir=out_dir)
        rec = evaluate_step(model, test, all_classes, split.seen(len(split) - 1), len(split),
                            frontend, cfg.eval_mixtures, seed, cfg.filter_len,
                            cfg.eval_cross_class_only)
        records.append(rec)
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "checkpoints" / f"task{len(split)}",
                            model.state_arrays(), cfg.hash())
        if on_step:
            on_step(rec)
        return RunResult(cfg.method, seed, split, records, losses, model,
                         time.perf_counter() - start)

    memory = MemorySet(max(cfg.memory_per_class, 1))
    old_model = None
    for t in range(1, len(split) + 1):
        classes = set(split.tasks[t - 1])
        current = [s for s in train if s.class_id in classes]
        available = list(current)
        memory_ids: frozenset = frozenset()
        if cfg.uses_memory and t > 1:
            replay = memory.samples()
            available += replay
            memory_ids = frozenset(s.sample_id for s in replay)
        losses += train_task(model, old_model if cfg.uses_memory else None, available,
                             memory_ids, cfg, batch_rng, t, dump_dir=out_dir)
        rec = evaluate_step(model, test, split.seen(t), split.seen(t - 1), t, frontend,
                            cfg.eval_mixtures, seed, cfg.filter_len, cfg.eval_cross_class_only)
        records.append(rec)
        log.info("%s seed %d task %d: SDR %.2f", cfg.method, seed, t, rec.sdr)
        if on_step:
            on_step(rec)
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "checkpoints" / f"task{t}", model.state_arrays(),
                            cfg.hash())
        if cfg.uses_memory:
            memory = select_exemplars(memory, current, mem_rng)
            old_model = model.frozen_clone()
    return RunResult(cfg.method, seed, split, records, losses, model, time.perf_counter() - start)


def write_metrics(path: Path, results: list[RunResult]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in results:
            for rec in r.records:
                w.writerow(rec.row(r.method, r.seed))


def write_losses(path: Path, results: list[RunResult]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("seed", "step", "iteration", "total", "main", "dist", "sdc"))
        for r in results:
            for l in r.losses:
                w.writerow((r.seed, l.step, l.iteration, repr(l.total), repr(l.main),
                            repr(l.dist), repr(l.sdc)))


def run_experiment(cfg: ExperimentConfig, data: Dataset, out_dir) -> list[RunResult]:
    """Every seed of one method; writes metrics.csv, losses.csv, manifest.json, config.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    results = []
    for seed in cfg.seeds:
        results.append(run_seed(cfg, data, seed, out_dir / f"seed{seed}"))
    write_metrics(out_dir / "metrics.csv", results)
    write_losses(out_dir / "losses.csv", results)
    manifest = {
        "config_hash": cfg.hash(),
        "method": cfg.method,
        "seeds": list(cfg.seeds),
        "class_split": {str(r.seed): r.split.tasks for r in results},
        "old_class_means": {str(r.seed): aggregate_old_class_means(r.records) for r in results},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return results


def load_model(cfg: ExperimentConfig, checkpoint_dir) -> Separator:
    """A separator restored from a checkpoint written under ``cfg``."""
    try:
        params, cfg_hash = load_checkpoint(checkpoint_dir)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise InputError(f"cannot read checkpoint {checkpoint_dir}: {exc}") from None
    if cfg_hash != cfg.hash():
        raise ContractError(f"checkpoint {checkpoint_dir} was written under config "
                            f"{cfg_hash}, not {cfg.hash()}")
    model = Separator(cfg.separator_config())
    model.load_arrays(params)
    return model.freeze()


def checkpoint_steps(run_dir, seed: int) -> list[tuple[int, Path]]:
    root = Path(run_dir) / f"seed{seed}" / "checkpoints"
    found = sorted((int(p.name[len("task"):]), p) for p in root.glob("task*") if p.is_dir())
    if not found:
        raise InputError(f"no checkpoints under {root}")
    return found


def reevaluate_run(cfg: ExperimentConfig, data: Dataset, run_dir) -> list[RunResult]:
    """Score every saved checkpoint of a run again with the run's own protocol."""
    frontend = Frontend(cfg.dsp)
    test = data.subset("test")
    results = []
    for seed in cfg.seeds:
        start = time.perf_counter()
        split = split_classes(cfg.num_classes, cfg.num_tasks, seed)
        records, model = [], None
        for t, path in checkpoint_steps(run_dir, seed):
            model = load_model(cfg, path)
            records.append(evaluate_step(model, test, split.seen(t), split.seen(t - 1), t,
                                         frontend, cfg.eval_mixtures, seed, cfg.filter_len,
                                         cfg.eval_cross_class_only))
        results.append(RunResult(cfg.method, seed, split, records, [], model,
                                 time.perf_counter() - start))
    return results
