"""Summaries of finished runs: mean/std tables, memory sweeps and spectrogram images."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.stats import spearmanr

from .config import ExperimentConfig
from .data import Dataset
from .errors import ConfigError, InputError
from .harness import (Frontend, StepRecord, aggregate_old_class_means, checkpoint_steps,
                      load_model, predict_masks, split_classes, step_pairs)

# fields that may differ between the runs of one report; everything else must match
VARIANT_KEYS = ("method", "memory_per_class", "similarity_mode", "symmetric_anchors",
                "lambda_ins", "lambda_cls", "lambda_dist", "temperature")
METRICS = ("sdr", "sir", "sar")
DB_RANGE = (-60.0, 0.0)


@dataclass
class LoadedRun:
    path: Path
    config: dict
    records: dict[int, list[StepRecord]]   # seed -> records in step order

    @property
    def label(self) -> str:
        defaults = ExperimentConfig().to_dict()
        parts = [self.config["method"]]
        for key in VARIANT_KEYS[1:]:
            if self.config.get(key) != defaults[key]:
                parts.append(f"{key}={self.config.get(key)}")
        return " ".join(parts)


def _opt(v: str) -> float | None:
    return None if v == "" else float(v)


def read_metrics(path) -> dict[tuple[str, int], list[StepRecord]]:
    """``(method, seed) -> records`` from a metrics CSV."""
    out: dict[tuple[str, int], list[StepRecord]] = {}
    try:
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                rec = StepRecord(int(row["step"]), float(row["sdr"]), float(row["sir"]),
                                 float(row["sar"]), _opt(row["sdr_old"]), _opt(row["sir_old"]),
                                 _opt(row["sar_old"]))
                out.setdefault((row["method"], int(row["seed"])), []).append(rec)
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot read metrics {path}: {exc}") from None
    for recs in out.values():
        recs.sort(key=lambda r: r.step)
    return out


def load_run(path) -> LoadedRun:
    path = Path(path)
    try:
        config = json.loads((path / "config.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"{path} is not a run directory: {exc}") from None
    records = {seed: recs for (_, seed), recs in read_metrics(path / "metrics.csv").items()}
    if not records:
        raise InputError(f"{path}: metrics.csv has no rows")
    return LoadedRun(path, config, records)


def check_consistent(runs: list[LoadedRun]) -> None:
    """Refuse to compare runs whose shared settings differ."""
    if not runs:
        raise InputError("no run directories given")
    ref = {k: v for k, v in runs[0].config.items() if k not in VARIANT_KEYS + ("seeds",)}
    for run in runs[1:]:
        cur = {k: v for k, v in run.config.items() if k not in VARIANT_KEYS + ("seeds",)}
        diff = sorted(k for k in set(ref) | set(cur) if ref.get(k) != cur.get(k))
        if diff:
            raise ConfigError(f"{run.path} differs from {runs[0].path} in {diff}; "
                              "refusing to aggregate")


def mean_std(values) -> tuple[float, float | None]:
    """Mean and sample standard deviation (None for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), (float(v.std(ddof=1)) if v.size > 1 else None)


@dataclass
class SummaryRow:
    label: str
    method: str
    memory_per_class: int
    seeds: list[int]
    final: dict[str, tuple[float, float | None]]
    old: dict[str, tuple[float, float | None]] = field(default_factory=dict)
    final_sdr_by_seed: dict[int, float] = field(default_factory=dict)


def summarize(runs: list[LoadedRun]) -> list[SummaryRow]:
    """One row per run variant: final-step and old-class means over seeds."""
    check_consistent(runs)
    groups: dict[str, list[tuple[int, list[StepRecord], dict]]] = {}
    for run in runs:
        for seed, recs in run.records.items():
            group = groups.setdefault(run.label, [])
            if any(s == seed for s, _, _ in group):
                raise ConfigError(f"seed {seed} of '{run.label}' appears in more than one run")
            group.append((seed, recs, run.config))
    rows = []
    for label, items in groups.items():
        items.sort(key=lambda x: x[0])
        finals = [recs[-1] for _, recs, _ in items]
        row = SummaryRow(label, items[0][2]["method"], int(items[0][2]["memory_per_class"]),
                         [s for s, _, _ in items],
                         {m: mean_std([getattr(r, m) for r in finals]) for m in METRICS},
                         final_sdr_by_seed={s: recs[-1].sdr for s, recs, _ in items})
        olds = [aggregate_old_class_means(recs) for _, recs, _ in items]
        if all(o is not None for o in olds):
            row.old = {m: mean_std([o[k] for o in olds]) for k, m in enumerate(METRICS)}
        rows.append(row)
    return rows


def _fmt(ms: tuple[float, float | None] | None) -> str:
    if ms is None:
        return "-"
    mean, std = ms
    return f"{mean:.2f}" if std is None else f"{mean:.2f} ± {std:.2f}"


def summary_csv(rows: list[SummaryRow]) -> str:
    cols = ["label", "method", "memory_per_class", "n_seeds"]
    for prefix in ("", "old_"):
        for m in METRICS:
            cols += [f"{prefix}{m}_mean", f"{prefix}{m}_std"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        vals = [r.label, r.method, r.memory_per_class, len(r.seeds)]
        for source in (r.final, r.old):
            for m in METRICS:
                mean, std = source.get(m, (None, None))
                vals += ["" if mean is None else repr(mean), "" if std is None else repr(std)]
        w.writerow(vals)
    return buf.getvalue()


def summary_text(rows: list[SummaryRow]) -> str:
    header = ["variant", "seeds", "SDR", "SIR", "SAR", "SDR old", "SIR old", "SAR old"]
    table = [header]
    for r in rows:
        table.append([r.label, str(len(r.seeds))] + [_fmt(r.final[m]) for m in METRICS]
                     + [_fmt(r.old.get(m)) for m in METRICS])
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
                     for row in table) + "\n"


@dataclass
class MemorySweep:
    sizes: list[int]
    rows: list[SummaryRow]
    spearman: float | None


def memory_sweep(rows: list[SummaryRow]) -> MemorySweep:
    """Rows ordered by memory size, with the rank correlation of size vs seed-mean final SDR."""
    rows = sorted(rows, key=lambda r: r.memory_per_class)
    sizes = [r.memory_per_class for r in rows]
    if len(set(sizes)) != len(sizes):
        raise ConfigError("memory sweep needs exactly one variant per memory size")
    rho = None
    if len(rows) >= 2:
        rho = float(spearmanr(sizes, [r.final["sdr"][0] for r in rows]).statistic)
    return MemorySweep(sizes, rows, rho)


def memory_sweep_text(sweep: MemorySweep) -> str:
    table = [["memory/class"] + [str(s) for s in sweep.sizes]]
    for m in METRICS:
        table.append([m.upper()] + [_fmt(r.final[m]) for r in sweep.rows])
    widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
    body = "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in table)
    rho = "undefined" if sweep.spearman is None or np.isnan(sweep.spearman) \
        else f"{sweep.spearman:.3f}"
    return body + f"\nSpearman(memory size, SDR) = {rho}\n"


# ---------------------------------------------------------------------------
# spectrogram images


def spectrogram_image(magnitude: np.ndarray, ref: float | None = None) -> Image.Image:
    """Grayscale image of ``20 log10(|X| / ref)`` clipped to [-60, 0] dB; low bins at the bottom."""
    mag = np.abs(np.asarray(magnitude, dtype=np.float64))
    if mag.ndim != 2:
        raise InputError(f"spectrogram must be 2-D, got shape {mag.shape}")
    ref = float(mag.max()) if ref is None else float(ref)
    db = 20.0 * np.log10(np.maximum(mag, 1e-12) / max(ref, 1e-12))
    lo, hi = DB_RANGE
    level = (np.clip(db, lo, hi) - lo) / (hi - lo)
    return Image.fromarray(np.round(level[::-1] * 255).astype(np.uint8), mode="L")


def save_spectrogram(path, magnitude: np.ndarray, ref: float | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    spectrogram_image(magnitude, ref).save(path)


def dump_spectrograms(run: LoadedRun, data: Dataset, out_dir, n_mixtures: int = 2,
                      seed: int | None = None) -> list[Path]:
    """Mixture, ground-truth and predicted spectrograms for the first test mixtures of each step.

    Every image of one mixture shares the mixture's peak as the 0 dB reference.
    """
    cfg = ExperimentConfig(**run.config)
    seed = cfg.seeds[0] if seed is None else seed
    split = split_classes(cfg.num_classes, cfg.num_tasks, seed)
    frontend = Frontend(cfg.dsp)
    test = data.subset("test")
    out_dir = Path(out_dir)
    written = []
    for t, ckpt in checkpoint_steps(run.path, seed):
        model = load_model(cfg, ckpt)
        pairs = step_pairs(frontend, test, split.seen(t), t, cfg.eval_mixtures, seed,
                           cfg.eval_cross_class_only)[:n_mixtures]
        m1, m2 = predict_masks(model, pairs)
        for k, (p, k1, k2) in enumerate(zip(pairs, m1, m2)):
            ref = float(p.mix_mag.max())
            images = {"mixture": p.mix_mag,
                      f"gt_a_class{p.a.class_id}": p.mix_mag * p.mask_a,
                      f"pred_a_class{p.a.class_id}": p.mix_mag * k1,
                      f"gt_b_class{p.b.class_id}": p.mix_mag * p.mask_b,
                      f"pred_b_class{p.b.class_id}": p.mix_mag * k2}
            for name, mag in images.items():
                path = out_dir / f"seed{seed}" / f"step{t}" / f"mix{k}_{name}.png"
                save_spectrogram(path, mag, ref)
                written.append(path)
    return written
