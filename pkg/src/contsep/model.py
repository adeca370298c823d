"""Audio-visual separator: dense U-Net-style audio net, query transformer, mask head.

Activations use a channels-last layout ``(batch, freq, frames, channels)``.
The encoder halves both spectrogram axes at every stage after the first,
so ``len(channels) == 3`` gives a ``latent_dim x F/4 x T/4`` latent.
Instead of 2-D convolutions each stage mixes channels per bin (a matmul on
the last axis) and then mixes bands along frequency with a residual
``F x F`` matrix. The decoder mirrors the encoder with skip connections
and ends in a ``mask_embed_dim``-channel audio embedding; the mask is the
sigmoid of its channel-wise product with an MLP embedding of the
separated-sound feature.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import VisualFeatures
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class SeparatorConfig:
    freq_bins: int = 64
    frames: int = 128
    channels: tuple = (8, 16, 32)      # last entry is the latent dimension
    feature_dim: int = 64
    obj_dim: int = 32
    mot_dim: int = 32
    n_fusion_layers: int = 2           # first layer attends to motion, the rest to audio
    mask_embed_dim: int = 32
    mlp_hidden: int = 64
    query_mode: str = "single"
    latent_pos_embed: bool = False
    full_res_band_mix: bool = False    # band mixing at full resolution is costly at desk scale
    freq_embed: bool = False           # learned per-bin offset on the audio embedding
    mask_bias_init: float = -2.0       # most bins of a source's ratio mask are near zero

    def __post_init__(self):
        ints = [self.freq_bins, self.frames, self.feature_dim, self.obj_dim, self.mot_dim,
                self.n_fusion_layers, self.mask_embed_dim, self.mlp_hidden, *self.channels]
        if any(int(v) <= 0 for v in ints) or not self.channels:
            raise ConfigError(f"separator dimensions must be positive: {self}")
        scale = 2 ** (len(self.channels) - 1)
        if self.freq_bins % scale or self.frames % scale:
            raise ConfigError(f"grid {self.freq_bins}x{self.frames} not divisible by {scale}")
        if self.n_fusion_layers < 2:
            raise ConfigError("need a motion layer and at least one audio layer")
        if self.query_mode != "single":
            raise ConfigError(f"query_mode '{self.query_mode}' is not supported (only 'single')")

    @property
    def latent_dim(self) -> int:
        return self.channels[-1]

    @property
    def latent_grid(self) -> tuple[int, int]:
        scale = 2 ** (len(self.channels) - 1)
        return self.freq_bins // scale, self.frames // scale

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


DESK_MODEL = SeparatorConfig(freq_embed=True)
PAPER_MODEL = SeparatorConfig(freq_bins=256, frames=256, channels=(32, 64, 128, 256),
                              feature_dim=256, obj_dim=512, mot_dim=768, n_fusion_layers=4,
                              mask_embed_dim=32, mlp_hidden=256)


@dataclass
class PairOutput:
    mask1: Tensor
    mask2: Tensor
    feats1: dict           # modality ("a", "o", "m") -> (B, D) tensor
    feats2: dict


def _rms_norm(x: Tensor) -> Tensor:
    """Rescale the last axis to unit root-mean-square (zero vectors stay zero)."""
    return ad.l2_normalize(x, axis=-1) * float(np.sqrt(x.shape[-1]))


def _space_to_depth(x: Tensor) -> Tensor:
    b, f, t, c = x.shape
    x = x.reshape(b, f // 2, 2, t // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, f // 2, t // 2, 4 * c)


def _depth_to_space(x: Tensor) -> Tensor:
    b, f, t, c4 = x.shape
    c = c4 // 4
    x = x.reshape(b, f, t, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, 2 * f, 2 * t, c)


def _band_mix(x: Tensor, w: Tensor) -> Tensor:
    """Residual mixing along the frequency axis: ``x + W @ x`` per frame and channel."""
    y = ad.matmul(w, x.transpose(0, 2, 1, 3))          # (b, t, f, c)
    return x + y.transpose(0, 2, 1, 3)


class Separator:
    """All trainable parameters of one separator plus its forward pass."""

    def __init__(self, config: SeparatorConfig = DESK_MODEL, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._init(np.random.default_rng(seed))

    # -- parameters -----------------------------------------------------
    def _add(self, name, shape, rng, fan_in=None, gain=6.0, zero=False):
        if zero:
            arr = np.zeros(shape)
        else:
            bound = np.sqrt(gain / (fan_in if fan_in is not None else shape[0]))
            arr = rng.uniform(-bound, bound, shape)
        self.params[name] = Tensor(arr, requires_grad=True, name=name)

    def _init(self, rng):
        cfg = self.config
        ch = cfg.channels
        F, D, K = cfg.freq_bins, cfg.feature_dim, cfg.mask_embed_dim
        prev = 1
        for s, c in enumerate(ch):
            c_in = prev if s == 0 else 4 * prev
            f_s = F >> s
            self._add(f"enc.{s}.w", (c_in, c), rng)
            self._add(f"enc.{s}.b", (c,), rng, zero=True)
            if s > 0 or cfg.full_res_band_mix:
                self._add(f"enc.{s}.band", (f_s, f_s), rng, gain=0.03)
            prev = c
        if cfg.latent_pos_embed:
            n_tok = cfg.latent_grid[0] * cfg.latent_grid[1]
            self._add("fuse.pos", (n_tok, ch[-1]), rng, fan_in=1, gain=0.03)
        for s in range(len(ch) - 1, 0, -1):
            self._add(f"dec.{s}.up", (ch[s], 4 * ch[s - 1]), rng)
            self._add(f"dec.{s}.up_b", (4 * ch[s - 1],), rng, zero=True)
            self._add(f"dec.{s}.w", (2 * ch[s - 1], ch[s - 1]), rng)
            self._add(f"dec.{s}.b", (ch[s - 1],), rng, zero=True)
            if s > 1 or cfg.full_res_band_mix:
                self._add(f"dec.{s}.band", (F >> (s - 1), F >> (s - 1)), rng, gain=0.03)
        self._add("dec.out.w", (ch[0], K), rng, gain=3.0)
        self._add("dec.out.b", (K,), rng, zero=True)
        if cfg.freq_embed:
            self._add("dec.freq", (F, 1, K), rng, fan_in=K, gain=3.0)

        self._add("fuse.U_o", (cfg.obj_dim, D), rng, gain=3.0)
        self._add("fuse.U_o_b", (D,), rng, zero=True)
        self._add("fuse.U_m", (cfg.mot_dim, D), rng, gain=3.0)
        self._add("fuse.U_m_b", (D,), rng, zero=True)
        self._add("fuse.query", (D,), rng, fan_in=1, gain=0.03)
        self._add("fuse.0.v", (D, D), rng, gain=3.0)
        for layer in range(1, cfg.n_fusion_layers):
            p = f"fuse.{layer}"
            self._add(f"{p}.q", (D, D), rng, gain=3.0)
            self._add(f"{p}.k", (ch[-1], D), rng, gain=3.0)
            self._add(f"{p}.v", (ch[-1], D), rng, gain=3.0)
            self._add(f"{p}.o", (D, D), rng, gain=3.0)
            self._add(f"{p}.sq", (D, D), rng, gain=3.0)
            self._add(f"{p}.sk", (D, D), rng, gain=3.0)
            self._add(f"{p}.sv", (D, D), rng, gain=3.0)
        for layer in range(cfg.n_fusion_layers):
            p = f"fuse.{layer}"
            self._add(f"{p}.ff1", (D, D), rng)
            self._add(f"{p}.ff1_b", (D,), rng, zero=True)
            self._add(f"{p}.ff2", (D, D), rng, gain=3.0)
            self._add(f"{p}.ff2_b", (D,), rng, zero=True)

        self._add("mlp.w1", (D, cfg.mlp_hidden), rng)
        self._add("mlp.b1", (cfg.mlp_hidden,), rng, zero=True)
        self._add("mlp.w2", (cfg.mlp_hidden, K), rng, gain=3.0)
        self._add("mlp.b2", (K,), rng, zero=True)
        self._add("mask.bias", (1,), rng, zero=True)
        self.params["mask.bias"].data[:] = cfg.mask_bias_init

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for name in self.params:
            out.setdefault(name.split(".")[0], []).append(name)
        return out

    def clone(self) -> "Separator":
        twin = copy.copy(self)
        twin.params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                       for k, v in self.params.items()}
        return twin

    def freeze(self) -> "Separator":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def frozen_clone(self) -> "Separator":
        return self.clone().freeze()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            raise DimensionError("checkpoint parameter names do not match this configuration")
        for k, arr in arrays.items():
            if arr.shape != self.params[k].shape:
                raise DimensionError(f"{k}: checkpoint shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float64)

    # -- forward pieces -------------------------------------------------
    def encode_audio(self, mix_spec) -> tuple[Tensor, list[Tensor]]:
        """Mixture magnitudes on the log grid ``(B, F, T)`` -> latent and skips."""
        cfg, P = self.config, self.params
        mag = mix_spec.data if isinstance(mix_spec, Tensor) else np.asarray(mix_spec, dtype=np.float64)
        if mag.ndim == 2:
            mag = mag[None]
        # every layer is frame-local apart from the 2x2 pooling, so any frame
        # count divisible by the pooling factor works (training uses crops)
        scale = 2 ** (len(cfg.channels) - 1)
        if mag.shape[1] != cfg.freq_bins or mag.shape[2] % scale:
            raise DimensionError(f"spectrogram grid {mag.shape[1:]} incompatible with "
                                 f"{cfg.freq_bins} bins and frame multiples of {scale}")
        if cfg.latent_pos_embed and mag.shape[2] != cfg.frames:
            raise DimensionError(f"positional embedding needs exactly {cfg.frames} frames")
        x = Tensor(np.log1p(mag)[..., None])
        skips = []
        for s in range(len(cfg.channels)):
            if s > 0:
                skips.append(x)
                x = _space_to_depth(x)
            x = ad.relu(x @ P[f"enc.{s}.w"] + P[f"enc.{s}.b"])
            if f"enc.{s}.band" in P:
                x = _band_mix(x, P[f"enc.{s}.band"])
        return x, skips

    def project_visual(self, vis) -> tuple[Tensor, Tensor]:
        obj, mot = _visual_arrays(vis)
        cfg = self.config
        if obj.shape[-1] != cfg.obj_dim or mot.shape[-1] != cfg.mot_dim:
            raise DimensionError(f"visual dims ({obj.shape[-1]}, {mot.shape[-1]}) != configured "
                                 f"({cfg.obj_dim}, {cfg.mot_dim})")
        P = self.params
        return (Tensor(obj) @ P["fuse.U_o"] + P["fuse.U_o_b"],
                Tensor(mot) @ P["fuse.U_m"] + P["fuse.U_m_b"])

    def fuse(self, latent: Tensor, vis) -> tuple[Tensor, Tensor, Tensor]:
        """Separated-sound feature ``f_a`` plus the projected ``f_o``, ``f_m`` (each ``(B, D)``).

        Attention and feed-forward blocks are pre-normalised and ``f_a`` is
        returned RMS-normalised, which keeps the residual stream from
        growing without bound under large learning rates.
        """
        cfg, P = self.config, self.params
        D = cfg.feature_dim
        f_o, f_m = self.project_visual(vis)
        b = latent.shape[0]
        if f_o.shape[0] != b:
            raise DimensionError(f"{f_o.shape[0]} visual inputs for {b} mixtures")
        tokens = _rms_norm(latent.reshape(b, -1, cfg.latent_dim))
        if cfg.latent_pos_embed:
            tokens = tokens + P["fuse.pos"]
        scale = 1.0 / np.sqrt(D)
        q = (f_o + P["fuse.query"]).reshape(b, 1, D)
        # layer 0: one motion token, so attention weight is exactly 1
        q = q + (f_m @ P["fuse.0.v"]).reshape(b, 1, D)
        q = self._ffn(q, 0)
        side = ad.stack([f_o, f_m], axis=1)                       # (b, 2, D)
        for layer in range(1, cfg.n_fusion_layers):
            p = f"fuse.{layer}"
            k = tokens @ P[f"{p}.k"]
            v = tokens @ P[f"{p}.v"]
            qn = _rms_norm(q)
            att = ad.softmax(((qn @ P[f"{p}.q"]) @ k.transpose(0, 2, 1)) * scale, axis=-1)
            q = q + (att @ v) @ P[f"{p}.o"]
            qn = _rms_norm(q)
            pool = ad.concat([qn, side], axis=1)                 # self-attention over {q, f_o, f_m}
            att = ad.softmax(((qn @ P[f"{p}.sq"]) @ (pool @ P[f"{p}.sk"]).transpose(0, 2, 1)) * scale,
                             axis=-1)
            q = q + att @ (pool @ P[f"{p}.sv"])
            q = self._ffn(q, layer)
        return _rms_norm(q.reshape(b, D)), f_o, f_m

    def _ffn(self, q: Tensor, layer: int) -> Tensor:
        P, p = self.params, f"fuse.{layer}"
        h = ad.relu(_rms_norm(q) @ P[f"{p}.ff1"] + P[f"{p}.ff1_b"])
        return q + h @ P[f"{p}.ff2"] + P[f"{p}.ff2_b"]

    def decode(self, latent: Tensor, skips: list[Tensor]) -> Tensor:
        """Latent + skips -> full-resolution decoder features ``(B, F, T, channels[0])``.

        Features are RMS-normalised per bin, and so is the mask embedding, so
        mask logits cannot grow as a product of three unbounded factors.
        """
        P = self.params
        x = latent
        for s in range(len(self.config.channels) - 1, 0, -1):
            x = _depth_to_space(ad.relu(x @ P[f"dec.{s}.up"] + P[f"dec.{s}.up_b"]))
            x = ad.concat([x, skips[s - 1]], axis=-1)
            x = ad.relu(x @ P[f"dec.{s}.w"] + P[f"dec.{s}.b"])
            if f"dec.{s}.band" in P:
                x = _band_mix(x, P[f"dec.{s}.band"])
        return _rms_norm(x)

    def audio_embedding(self, feats: Tensor) -> Tensor:
        """Per-bin ``mask_embed_dim`` audio embedding from decoder features."""
        P = self.params
        emb = feats @ P["dec.out.w"] + P["dec.out.b"]
        if "dec.freq" in P:
            emb = emb + P["dec.freq"]
        return emb

    def mask_embedding(self, f_a: Tensor) -> Tensor:
        P = self.params
        return ad.relu(f_a @ P["mlp.w1"] + P["mlp.b1"]) @ P["mlp.w2"] + P["mlp.b2"]

    def predict_mask(self, latent: Tensor, skips: list[Tensor], f_a: Tensor,
                     feats: Tensor | None = None) -> Tensor:
        """``(B, F, T)`` mask in (0, 1); pass ``feats`` to reuse a decoder pass.

        The logit is the channel-wise product of the audio embedding with the
        mask embedding. The output projection is folded into the mask
        embedding first, so the full ``(B, F, T, K)`` embedding is never built.
        """
        P = self.params
        if feats is None:
            feats = self.decode(latent, skips)
        b, f, t, c = feats.shape
        e = _rms_norm(self.mask_embedding(f_a))                      # (b, K)
        u = (e @ P["dec.out.w"].T).reshape(b, c, 1)
        offset = (e @ P["dec.out.b"].reshape(-1, 1)).reshape(b, 1, 1)
        logits = (feats.reshape(b, f * t, c) @ u).reshape(b, f, t) + offset
        if "dec.freq" in P:
            k = e.shape[-1]
            per_bin = e @ P["dec.freq"].reshape(f, k).T                # (b, f)
            logits = logits + per_bin.reshape(b, f, 1)
        return ad.sigmoid(logits + P["mask.bias"])

    def forward_pair(self, mixture, vis1, vis2) -> PairOutput:
        """Both masks for one mixture, sharing the encoder and decoder passes."""
        latent, skips = self.encode_audio(mixture)
        feats = self.decode(latent, skips)
        out = []
        for vis in (vis1, vis2):
            f_a, f_o, f_m = self.fuse(latent, vis)
            mask = self.predict_mask(latent, skips, f_a, feats)
            out.append((mask, {"a": f_a, "o": f_o, "m": f_m}))
        return PairOutput(out[0][0], out[1][0], out[0][1], out[1][1])


def _visual_arrays(vis) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(vis, VisualFeatures):
        obj, mot = vis.object_feature, vis.motion_feature
    elif isinstance(vis, (list, tuple)) and vis and isinstance(vis[0], VisualFeatures):
        obj = np.stack([v.object_feature for v in vis])
        mot = np.stack([v.motion_feature for v in vis])
    else:
        obj, mot = vis
    obj = np.asarray(obj, dtype=np.float64)
    mot = np.asarray(mot, dtype=np.float64)
    return np.atleast_2d(obj), np.atleast_2d(mot)
