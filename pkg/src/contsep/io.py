"""On-disk formats: 16-bit PCM WAV, raw float arrays with JSON sidecars, checkpoints."""

from __future__ import annotations

import hashlib
import json
import wave
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DimensionError, InputError

PCM_SCALE = 32768.0


def quantize_pcm16(x: np.ndarray) -> np.ndarray:
    """Snap samples onto the 16-bit grid so a WAV round trip is lossless."""
    q = np.clip(np.round(np.asarray(x) * PCM_SCALE), -32768, 32767)
    return q / PCM_SCALE + 0.0   # + 0.0 turns -0.0 into 0.0, as a WAV read would


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    q = np.clip(np.round(np.asarray(samples) * PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(sample_rate))
        f.writeframes(q.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    try:
        with wave.open(str(path), "rb") as f:
            if f.getnchannels() != 1 or f.getsampwidth() != 2:
                raise InputError(f"{path}: expected mono 16-bit PCM")
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as exc:
        raise InputError(f"{path}: unreadable WAV ({exc})") from None
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE, rate


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_f32(path, arr: np.ndarray, grid: str | None = None) -> None:
    """Raw little-endian float32 plus ``<path>.json`` with shape/dtype/grid."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(arr)
    path.write_bytes(arr.astype("<f4").tobytes())
    meta = {"shape": list(arr.shape), "dtype": "float32"}
    if grid is not None:
        meta["grid"] = grid
    _sidecar(path).write_text(json.dumps(meta))


def read_f32(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    arr = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
    shape = tuple(meta["shape"])
    if arr.size != int(np.prod(shape)):
        raise DimensionError(f"{path}: {arr.size} values but sidecar shape {shape}")
    return arr.reshape(shape), meta


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(directory, params: Mapping[str, np.ndarray], cfg_hash: str) -> None:
    """``params.bin`` (float64 LE, concatenated) + ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / "params.bin", "wb") as f:
        for name, arr in params.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            f.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    (directory / "manifest.json").write_text(
        json.dumps({"config_hash": cfg_hash, "params": entries}, indent=1))


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], str]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    flat = np.frombuffer((directory / "params.bin").read_bytes(), dtype="<f8")
    params = {}
    for e in manifest["params"]:
        n = int(np.prod(e["shape"]))
        params[e["name"]] = flat[e["offset"]: e["offset"] + n].reshape(e["shape"]).copy()
    return params, manifest["config_hash"]
