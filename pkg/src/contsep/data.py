"""Deterministic synthetic audio-visual classes.

Each class is a harmonic instrument (fundamental, partial amplitudes,
vibrato) paired with an object and a motion prototype vector that stand in
for frozen visual encoders. A clip is fully determined by
``(bank seed, class id, instance seed)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError, InputError
from .io import quantize_pcm16, read_f32, read_wav, write_f32, write_wav

log = logging.getLogger(__name__)

F0_RANGE = (110.0, 1760.0)
MIN_F0_RATIO = 1.05
MAX_PROTO_COSINE = 0.5
FEATURE_NOISE = 0.1
N_PARTIALS = 12
NOTE_LEN = (0.1, 0.3)    # seconds
NOTE_GAP = (0.1, 0.3)


@dataclass
class VisualFeatures:
    object_feature: np.ndarray
    motion_feature: np.ndarray


@dataclass
class VideoSample:
    sample_id: int
    class_id: int
    waveform: np.ndarray
    sample_rate: int
    visual: VisualFeatures

    @property
    def obj(self) -> np.ndarray:
        return self.visual.object_feature

    @property
    def mot(self) -> np.ndarray:
        return self.visual.motion_feature


@dataclass
class ClassBank:
    fundamentals: np.ndarray          # (C,) Hz
    partial_amps: np.ndarray          # (C, N_PARTIALS), first partial = 1
    vibrato_rate: np.ndarray          # (C,) Hz
    vibrato_depth: np.ndarray         # (C,) relative frequency deviation
    object_protos: np.ndarray         # (C, d_o), norm sqrt(d_o)
    motion_protos: np.ndarray         # (C, d_m), norm sqrt(d_m)
    seed: int

    @property
    def num_classes(self) -> int:
        return len(self.fundamentals)

    def to_json(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_json(cls, d: dict) -> "ClassBank":
        return cls(**{k: (v if k == "seed" else np.asarray(v, dtype=np.float64)) for k, v in d.items()})


def _prototypes(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    if dim < n:
        raise ConfigError(
            f"cannot keep {n} prototypes below cosine {MAX_PROTO_COSINE} in {dim} dims; "
            f"use a feature dimension of at least {n}")
    q, _ = np.linalg.qr(rng.standard_normal((dim, n)))
    protos = q.T * np.sqrt(dim)
    cos = protos @ protos.T / dim
    np.fill_diagonal(cos, 0.0)
    assert np.max(np.abs(cos)) <= MAX_PROTO_COSINE
    return protos


def generate_class_bank(num_classes: int, obj_dim: int = 32, mot_dim: int = 32,
                        seed: int = 0) -> ClassBank:
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng([seed, 7919])
    lo, hi = np.log(F0_RANGE[0]), np.log(F0_RANGE[1])
    step = (hi - lo) / (num_classes - 1)
    jitter = rng.uniform(-0.1, 0.1, num_classes) * step
    log_f0 = np.clip(np.linspace(lo, hi, num_classes) + jitter, lo, hi)
    f0 = np.exp(log_f0)
    if np.min(np.diff(np.sort(f0)) / np.sort(f0)[:-1]) < MIN_F0_RATIO - 1.0:
        raise ConfigError(f"{num_classes} classes do not fit in {F0_RANGE} Hz "
                          f"with a {MIN_F0_RATIO} fundamental ratio gap")
    k = np.arange(1, N_PARTIALS + 1)
    tilt = rng.uniform(0.5, 1.5, num_classes)
    amps = k[None, :] ** -tilt[:, None] * rng.uniform(0.3, 1.0, (num_classes, N_PARTIALS))
    amps[:, 0] = 1.0
    return ClassBank(
        fundamentals=f0,
        partial_amps=amps,
        vibrato_rate=rng.uniform(4.0, 7.0, num_classes),
        vibrato_depth=rng.uniform(0.002, 0.008, num_classes),
        object_protos=_prototypes(rng, num_classes, obj_dim),
        motion_protos=_prototypes(rng, num_classes, mot_dim),
        seed=seed,
    )


def _envelope(rng: np.random.Generator, n: int, sample_rate: int) -> np.ndarray:
    """Gate of separate notes, each with its own attack-sustain-release shape."""
    env = np.zeros(n)
    pos = int(rng.uniform(0.0, NOTE_GAP[1]) * sample_rate)
    while pos < n:
        length = int(rng.uniform(*NOTE_LEN) * sample_rate)
        attack = int(rng.uniform(0.01, 0.04) * sample_rate)
        release = int(rng.uniform(0.03, 0.08) * sample_rate)
        note = np.ones(length)
        note[:attack] = np.linspace(0.0, 1.0, attack, endpoint=False)
        note[length - release:] = np.linspace(1.0, 0.0, release)
        end = min(n, pos + length)
        env[pos:end] = note[: end - pos]
        pos = end + int(rng.uniform(*NOTE_GAP) * sample_rate)
    if not env.any():
        env[:] = 1.0
    return env


def _feature(rng: np.random.Generator, proto: np.ndarray) -> np.ndarray:
    v = proto + FEATURE_NOISE * rng.standard_normal(proto.shape)
    v = v / np.linalg.norm(v)
    return v.astype(np.float32).astype(np.float64)


def render_clip(bank: ClassBank, class_id: int, instance_seed: int, n_samples: int,
                sample_rate: int, sample_id: int | None = None) -> VideoSample:
    """Render one instance: harmonic tone with vibrato and envelope plus noisy features.

    The waveform is RMS-normalised to a random level in [0.1, 0.3] and snapped
    to the 16-bit grid; features are unit vectors rounded to float32.
    """
    if not 0 <= class_id < bank.num_classes:
        raise InputError(f"class {class_id} not in bank of {bank.num_classes}")
    rng = np.random.default_rng([bank.seed, class_id, instance_seed])
    t = np.arange(n_samples) / sample_rate
    f0 = bank.fundamentals[class_id]
    vib = 1.0 + bank.vibrato_depth[class_id] * np.sin(
        2 * np.pi * bank.vibrato_rate[class_id] * t + rng.uniform(0, 2 * np.pi))
    # instantaneous phase of the fundamental; partial k runs at k times it
    phase = 2 * np.pi * np.cumsum(f0 * vib) / sample_rate
    x = np.zeros(n_samples)
    for k, amp in enumerate(bank.partial_amps[class_id], start=1):
        if k * f0 * (1 + bank.vibrato_depth[class_id]) >= 0.95 * sample_rate / 2:
            break
        x += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    x *= _envelope(rng, n_samples, sample_rate)
    x *= rng.uniform(0.1, 0.3) / np.sqrt(np.mean(x * x))
    visual = VisualFeatures(_feature(rng, bank.object_protos[class_id]),
                            _feature(rng, bank.motion_protos[class_id]))
    sid = sample_id if sample_id is not None else class_id * 100_000 + instance_seed
    return VideoSample(sid, class_id, quantize_pcm16(x), sample_rate, visual)


@dataclass
class Dataset:
    bank: ClassBank
    samples: list[VideoSample]
    splits: dict[str, list[int]] = field(default_factory=dict)   # split -> sample indices

    def subset(self, split: str, classes=None) -> list[VideoSample]:
        keep = None if classes is None else set(classes)
        return [self.samples[i] for i in self.splits[split]
                if keep is None or self.samples[i].class_id in keep]


SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


def generate_dataset(bank: ClassBank, samples_per_class: int, n_samples: int,
                     sample_rate: int) -> Dataset:
    """``samples_per_class`` clips per class, split 80/10/10 within each class."""
    if samples_per_class < 3:
        raise ConfigError("need at least 3 samples per class for train/val/test")
    samples, splits = [], {"train": [], "val": [], "test": []}
    n_val = max(1, int(round(samples_per_class * SPLIT_FRACTIONS[1])))
    n_test = max(1, int(round(samples_per_class * SPLIT_FRACTIONS[2])))
    n_train = samples_per_class - n_val - n_test
    for c in range(bank.num_classes):
        for i in range(samples_per_class):
            idx = len(samples)
            samples.append(render_clip(bank, c, i, n_samples, sample_rate, sample_id=idx))
            split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
            splits[split].append(idx)
    return Dataset(bank, samples, splits)


# ---------------------------------------------------------------------------
# on-disk layout


def export_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "bank.json").write_text(json.dumps(ds.bank.to_json()))
    split_of = {i: s for s, idxs in ds.splits.items() for i in idxs}
    entries = []
    for i, s in enumerate(ds.samples):
        wav = Path("samples") / str(s.class_id) / f"{s.sample_id}.wav"
        obj = Path("features") / str(s.class_id) / f"{s.sample_id}.obj.f32"
        mot = Path("features") / str(s.class_id) / f"{s.sample_id}.mot.f32"
        write_wav(root / wav, s.waveform, s.sample_rate)
        write_f32(root / obj, s.obj)
        write_f32(root / mot, s.mot)
        entries.append({"sample_id": s.sample_id, "class": s.class_id, "split": split_of.get(i),
                        "wav": str(wav), "object_feature": str(obj), "motion_feature": str(mot)})
    path = root / "manifest.json"
    path.write_text(json.dumps({"entries": entries}, indent=1))
    return path


def ingest_precomputed(manifest_path, obj_dim: int | None = None,
                       mot_dim: int | None = None) -> list[VideoSample]:
    """Load WAVs and float32 feature vectors listed in a manifest.

    Paths in the manifest are relative to the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"cannot read manifest {manifest_path}: {exc}") from None
    base = manifest_path.parent
    out = []
    for n, e in enumerate(manifest.get("entries", [])):
        label = f"entry {n} ({e.get('wav', '?')})"
        try:
            samples, rate = read_wav(base / e["wav"])
            obj, _ = read_f32(base / e["object_feature"])
            mot, _ = read_f32(base / e["motion_feature"])
        except (OSError, KeyError, InputError, ValueError) as exc:
            raise IngestionError(f"{label}: {exc}") from None
        if obj_dim is not None and obj.shape != (obj_dim,):
            raise IngestionError(f"{label}: object feature shape {obj.shape}, expected ({obj_dim},)")
        if mot_dim is not None and mot.shape != (mot_dim,):
            raise IngestionError(f"{label}: motion feature shape {mot.shape}, expected ({mot_dim},)")
        out.append(VideoSample(int(e.get("sample_id", n)), int(e["class"]), samples, rate,
                               VisualFeatures(obj, mot)))
    return out


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "manifest.json").exists():
        raise InputError(f"no dataset at {root} (manifest.json missing)")
    bank = ClassBank.from_json(json.loads((root / "bank.json").read_text()))
    manifest = json.loads((root / "manifest.json").read_text())
    samples = ingest_precomputed(root / "manifest.json")
    splits: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for i, e in enumerate(manifest["entries"]):
        splits.setdefault(e.get("split") or "train", []).append(i)
    return Dataset(bank, samples, splits)
