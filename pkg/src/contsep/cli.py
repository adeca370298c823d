"""Command line front end: ``contsep {gen-data,train,eval,report,sweep-memory}``.

Every command writes under ``--out`` and refuses to touch a non-empty
directory unless ``--force`` is given. On failure a JSON object
``{"error": kind, "message": ...}`` goes to stderr and the exit code is
nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .data import Dataset, export_dataset, generate_class_bank, generate_dataset, load_dataset
from .errors import ConfigError, ContSepError, InputError, OutputExistsError
from .harness import run_experiment, reevaluate_run, write_metrics
from . import report

log = logging.getLogger("contsep")

EXIT_ERROR = 2
EXIT_CRASH = 3


def prepare_out(path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise OutputExistsError(f"{path} exists and is not a directory")
    if path.exists() and any(path.iterdir()) and not force:
        raise OutputExistsError(f"{path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def dataset_digest(root) -> str:
    """SHA-256 over the manifest and every file it lists, in manifest order."""
    root = Path(root)
    h = hashlib.sha256()
    manifest = (root / "manifest.json").read_bytes()
    h.update(manifest)
    h.update((root / "bank.json").read_bytes())
    for e in json.loads(manifest)["entries"]:
        for key in ("wav", "object_feature", "motion_feature"):
            h.update((root / e[key]).read_bytes())
    return h.hexdigest()


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    bank = generate_class_bank(cfg.num_classes, seed=cfg.data_seed)
    return generate_dataset(bank, cfg.samples_per_class, cfg.dsp.clip_samples, cfg.dsp.sample_rate)


def open_dataset(root, cfg: ExperimentConfig) -> Dataset:
    data = load_dataset(root)
    if data.bank.num_classes != cfg.num_classes:
        raise ConfigError(f"dataset has {data.bank.num_classes} classes, config expects "
                          f"{cfg.num_classes}")
    prof = cfg.dsp
    for s in data.samples:
        if s.sample_rate != prof.sample_rate or s.waveform.size != prof.clip_samples:
            raise InputError(f"sample {s.sample_id} is {s.waveform.size} samples at "
                             f"{s.sample_rate} Hz; profile '{cfg.profile}' needs "
                             f"{prof.clip_samples} at {prof.sample_rate} Hz")
    return data


def _summary(results) -> dict:
    return {str(r.seed): {"final_sdr": r.final.sdr, "seconds": round(r.seconds, 2)}
            for r in results}


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: ExperimentConfig, out, force: bool = False) -> dict:
    out = prepare_out(out, force)
    export_dataset(build_dataset(cfg), out)
    digest = dataset_digest(out)
    (out / "dataset.json").write_text(json.dumps(
        {"num_classes": cfg.num_classes, "samples_per_class": cfg.samples_per_class,
         "data_seed": cfg.data_seed, "profile": cfg.profile, "digest": digest}, indent=1))
    return {"dataset": str(out), "num_classes": cfg.num_classes, "digest": digest}


def cmd_train(cfg: ExperimentConfig, data_dir, out, force: bool = False,
              methods: list[str] | None = None) -> dict:
    data = open_dataset(data_dir, cfg)
    out = prepare_out(out, force)
    if not methods:
        return {"runs": {cfg.method: {"dir": str(out),
                                      "seeds": _summary(run_experiment(cfg, data, out))}}}
    runs = {}
    for m in methods:
        sub = cfg.with_overrides(method=m)
        runs[m] = {"dir": str(out / m), "seeds": _summary(run_experiment(sub, data, out / m))}
    return {"runs": runs}


def cmd_eval(run_dir, data_dir, out, force: bool = False) -> dict:
    run = report.load_run(run_dir)
    cfg = ExperimentConfig(**run.config)
    data = open_dataset(data_dir, cfg)
    out = prepare_out(out, force)
    results = reevaluate_run(cfg, data, run_dir)
    write_metrics(out / "metrics.csv", results)
    return {"metrics": str(out / "metrics.csv"),
            "final_sdr": {str(r.seed): r.final.sdr for r in results}}


def cmd_report(run_dirs, out, force: bool = False, data_dir=None, images: int = 0) -> dict:
    runs = [report.load_run(p) for p in run_dirs]
    rows = report.summarize(runs)
    out = prepare_out(out, force)
    (out / "summary.csv").write_text(report.summary_csv(rows))
    text = report.summary_text(rows)
    result = {"summary": str(out / "summary.csv"), "rows": len(rows)}
    if len({r.memory_per_class for r in rows}) > 1 and len({r.method for r in rows}) == 1:
        sweep = report.memory_sweep(rows)
        text += "\n" + report.memory_sweep_text(sweep)
        result["spearman"] = sweep.spearman
    (out / "summary.txt").write_text(text)
    if images > 0:
        if data_dir is None:
            raise ConfigError("--images needs --data")
        written = []
        for run in runs:
            data = open_dataset(data_dir, ExperimentConfig(**run.config))
            written += report.dump_spectrograms(run, data, out / "images" / run.path.name, images)
        result["images"] = len(written)
    print(text, file=sys.stderr)
    return result


def cmd_sweep_memory(cfg: ExperimentConfig, data_dir, out, sizes: list[int],
                     force: bool = False) -> dict:
    if not sizes or any(k < 1 for k in sizes):
        raise ConfigError(f"memory sizes must be positive integers, got {sizes}")
    data = open_dataset(data_dir, cfg)
    out = prepare_out(out, force)
    runs = []
    for k in sizes:
        sub = cfg.with_overrides(memory_per_class=k)
        run_experiment(sub, data, out / f"mem{k}")
        runs.append(report.load_run(out / f"mem{k}"))
    sweep = report.memory_sweep(report.summarize(runs))
    text = report.memory_sweep_text(sweep)
    (out / "sweep.txt").write_text(text)
    (out / "sweep.json").write_text(json.dumps(
        {"sizes": sweep.sizes, "sdr": [r.final["sdr"][0] for r in sweep.rows],
         "spearman": sweep.spearman}, indent=1))
    print(text, file=sys.stderr)
    return {"sizes": sweep.sizes, "spearman": sweep.spearman}


# ---------------------------------------------------------------------------
# argument handling


def _int_list(raw: str) -> list[int]:
    try:
        return [int(v) for v in raw.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--force", action="store_true", help="write into a non-empty --out")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    configured = argparse.ArgumentParser(add_help=False)
    configured.add_argument("--config", help="JSON config file")
    configured.add_argument("--set", dest="overrides", action="append", default=[],
                            metavar="KEY=VALUE", help="config override (repeatable)")

    p = argparse.ArgumentParser(prog="contsep", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common, configured], help="generate the synthetic dataset")
    t = sub.add_parser("train", parents=[common, configured], help="train and evaluate a method")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--methods", help="comma-separated methods, one subdirectory each")
    e = sub.add_parser("eval", parents=[common], help="re-score the checkpoints of a run")
    e.add_argument("--run", required=True, help="run directory")
    e.add_argument("--data", required=True, help="dataset directory")
    r = sub.add_parser("report", parents=[common], help="summarise run directories")
    r.add_argument("runs", nargs="+", help="run directories")
    r.add_argument("--data", help="dataset directory (needed for --images)")
    r.add_argument("--images", type=int, default=0, help="spectrogram dumps per step")
    s = sub.add_parser("sweep-memory", parents=[common, configured],
                       help="train one method for several memory sizes")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--sizes", default="1,2,4,8", help="memory sizes per class")
    return p


def run(argv: list[str] | None = None) -> dict:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    if args.command == "eval":
        return cmd_eval(args.run, args.data, args.out, args.force)
    if args.command == "report":
        return cmd_report(args.runs, args.out, args.force, args.data, args.images)
    cfg = load_config(args.config, args.overrides)
    if args.command == "gen-data":
        return cmd_gen_data(cfg, args.out, args.force)
    if args.command == "train":
        methods = args.methods.split(",") if args.methods else None
        for m in methods or []:
            cfg.with_overrides(method=m)   # validates the method name early
        return cmd_train(cfg, args.data, args.out, args.force, methods)
    if args.command == "sweep-memory":
        return cmd_sweep_memory(cfg, args.data, args.out, _int_list(args.sizes), args.force)
    raise ConfigError(f"unknown command {args.command}")


def main(argv: list[str] | None = None) -> int:
    try:
        result = run(argv)
    except ContSepError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:   # unexpected crash: still machine-readable
        print(json.dumps({"error": "internal", "type": type(exc).__name__,
                          "message": str(exc)}), file=sys.stderr)
        return EXIT_CRASH
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
