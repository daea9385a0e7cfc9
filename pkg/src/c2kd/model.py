"""Text and video encoders with gated projection, plus the checkpoint format.

Both encoders mean-pool a feature sequence, project it linearly, apply a
sigmoid context gate and L2-normalize. The video encoder can optionally run
a stack of post-norm self-attention layers (no positional embeddings) before
pooling. Batched forward functions return a cache consumed by the matching
backward function, which yields gradients keyed by parameter name.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, InputError
from .kernel import l2_normalize_rows_backward, l2_normalize_rows_forward, sigmoid

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

CHECKPOINT_MAGIC = b"C2KM"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sHIIIIIIIII")
FLAG_FROZEN = 1
FLAG_ATTENTION = 2


@dataclass(frozen=True)
class ModelConfig:
    text_dim: int
    video_dim: int
    embed_dim: int = 512
    attention_layers: int = 0
    heads: int = 4
    ff_dim: int = 0  # 0 means 2 * video_dim
    max_tokens: int = 40
    max_frames: int = 30

    def __post_init__(self):
        for name in ("text_dim", "video_dim", "embed_dim", "max_tokens", "max_frames"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.attention_layers < 0:
            raise ConfigurationError("attention_layers must be >= 0")
        if self.attention_layers:
            if self.heads < 1 or self.video_dim % self.heads:
                raise ConfigurationError(
                    f"head count {self.heads} does not divide video width {self.video_dim}"
                )

    @property
    def ff_width(self) -> int:
        return self.ff_dim or 2 * self.video_dim


@dataclass
class AttentionLayer:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray  # no key bias: softmax over keys is invariant to it
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ff1_w: np.ndarray
    ff1_b: np.ndarray
    ff2_w: np.ndarray
    ff2_b: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.{f.name}": getattr(self, f.name) for f in fields(self)}


@dataclass
class GatedHead:
    proj_w: np.ndarray
    proj_b: np.ndarray
    gate_w: np.ndarray
    gate_b: np.ndarray

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.proj_w": self.proj_w,
            f"{prefix}.proj_b": self.proj_b,
            f"{prefix}.gate_w": self.gate_w,
            f"{prefix}.gate_b": self.gate_b,
        }


@dataclass
class TextHead(GatedHead):
    max_tokens: int = 40


@dataclass
class VideoHead(GatedHead):
    layers: list[AttentionLayer] = field(default_factory=list)
    heads: int = 4
    max_frames: int = 30

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"{prefix}.layer{i}"))
        out.update(super().named(prefix))
        return out


@dataclass
class ModelParams:
    config: ModelConfig
    text: TextHead
    video: VideoHead
    frozen: bool = False

    def named_parameters(self) -> dict[str, np.ndarray]:
        """All weights in declaration order (text head, then video head)."""
        out = self.text.named("text")
        out.update(self.video.named("video"))
        return out

    def freeze(self) -> ModelParams:
        for arr in self.named_parameters().values():
            arr.flags.writeable = False
        self.frozen = True
        return self

    def copy(self) -> ModelParams:
        """Deep, trainable copy."""
        clone = _empty_model(self.config)
        for dst, src in zip(clone.named_parameters().values(), self.named_parameters().values()):
            dst[...] = src
        return clone

    def num_parameters(self) -> int:
        return sum(a.size for a in self.named_parameters().values())


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_gated(rng, in_dim: int, d: int) -> dict:
    return dict(
        proj_w=_uniform(rng, (d, in_dim), in_dim),
        proj_b=_uniform(rng, (d,), in_dim),
        gate_w=_uniform(rng, (d, d), d),
        gate_b=_uniform(rng, (d,), d),
    )


def _init_attention(rng, w: int, ff: int) -> AttentionLayer:
    return AttentionLayer(
        wq=_uniform(rng, (w, w), w), bq=_uniform(rng, (w,), w),
        wk=_uniform(rng, (w, w), w),
        wv=_uniform(rng, (w, w), w), bv=_uniform(rng, (w,), w),
        wo=_uniform(rng, (w, w), w), bo=_uniform(rng, (w,), w),
        ln1_gain=np.ones(w), ln1_bias=np.zeros(w),
        ff1_w=_uniform(rng, (ff, w), w), ff1_b=_uniform(rng, (ff,), w),
        ff2_w=_uniform(rng, (w, ff), ff), ff2_b=_uniform(rng, (w,), ff),
        ln2_gain=np.ones(w), ln2_bias=np.zeros(w),
    )


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Seeded uniform(±1/sqrt(fan_in)) initialization; layer-norm gains start at 1."""
    rng = np.random.default_rng(seed)
    text = TextHead(**_init_gated(rng, config.text_dim, config.embed_dim), max_tokens=config.max_tokens)
    layers = [_init_attention(rng, config.video_dim, config.ff_width) for _ in range(config.attention_layers)]
    video = VideoHead(
        **_init_gated(rng, config.video_dim, config.embed_dim),
        layers=layers,
        heads=config.heads,
        max_frames=config.max_frames,
    )
    return ModelParams(config=config, text=text, video=video)


def _empty_model(config: ModelConfig) -> ModelParams:
    model = init_model(config, 0)
    for arr in model.named_parameters().values():
        arr[...] = 0.0
    return model


# --------------------------------------------------------------------------
# gated projection

def context_gate(x, gate_w: np.ndarray, gate_b: np.ndarray) -> np.ndarray:
    """x ⊙ σ(W_g x + b_g) for a single projected vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    return x * sigmoid(x @ gate_w.T + gate_b)


def gated_projection_forward(head: GatedHead, x: np.ndarray):
    y = x @ head.proj_w.T + head.proj_b
    g = sigmoid(y @ head.gate_w.T + head.gate_b)
    h = y * g
    e, norms = l2_normalize_rows_forward(h)
    return e, (x, y, g, e, norms)


def gated_projection_backward(head: GatedHead, grad_e: np.ndarray, cache, prefix: str):
    x, y, g, e, norms = cache
    gh = l2_normalize_rows_backward(grad_e, e, norms)
    ga = gh * y * g * (1.0 - g)
    gy = gh * g + ga @ head.gate_w
    grads = {
        f"{prefix}.proj_w": gy.T @ x,
        f"{prefix}.proj_b": gy.sum(axis=0),
        f"{prefix}.gate_w": ga.T @ y,
        f"{prefix}.gate_b": ga.sum(axis=0),
    }
    return gy @ head.proj_w, grads


# --------------------------------------------------------------------------
# pooling

def _check_sequence(seq: np.ndarray, width: int, what: str) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise InputError(f"{what} sequence must be a non-empty T×D matrix, got shape {seq.shape}")
    if seq.shape[1] != width:
        raise InputError(f"{what} feature width {seq.shape[1]} != expected {width}")
    return seq


def pool_sequences(seqs: Sequence[np.ndarray], max_len: int, width: int, what: str = "input") -> np.ndarray:
    """Mean over the first ``max_len`` rows of each sequence."""
    if len(seqs) == 0:
        raise InputError(f"empty {what} batch")
    out = np.empty((len(seqs), width))
    for i, s in enumerate(seqs):
        s = _check_sequence(s, width, what)[:max_len]
        out[i] = s.sum(axis=0) / s.shape[0]  # same rounding as .mean, without its overhead
    return out


# --------------------------------------------------------------------------
# self-attention

def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    n = x.shape[-1]
    xc = x - x.sum(axis=-1, keepdims=True) / n
    inv = 1.0 / np.sqrt((xc * xc).sum(axis=-1, keepdims=True) / n + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layer_norm_backward(grad: np.ndarray, gain: np.ndarray, cache):
    xhat, inv = cache
    dxhat = grad * gain
    dx = inv * (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, _sum_leading(grad * xhat), _sum_leading(grad)


def _sum_leading(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1]).sum(axis=0)


def _gelu(u: np.ndarray):
    t = np.tanh(_GELU_C * (u + 0.044715 * u ** 3))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u: np.ndarray, t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _linear_grads(grad_out: np.ndarray, inp: np.ndarray):
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    return g2.T @ inp.reshape(-1, inp.shape[-1]), g2.sum(axis=0)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, t, w = x.shape
    return x.reshape(b, t, heads, w // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def attention_layer_forward(layer: AttentionLayer, x: np.ndarray, heads: int):
    """One post-norm encoder layer on a (B, T, W) batch of equal-length sequences."""
    w = x.shape[-1]
    if heads < 1 or w % heads:
        raise ConfigurationError(f"head count {heads} does not divide model width {w}")
    dh = w // heads
    q = _split_heads(x @ layer.wq.T + layer.bq, heads)
    k = _split_heads(x @ layer.wk.T, heads)
    v = _split_heads(x @ layer.wv.T + layer.bv, heads)
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
    scores = scores - scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    o = _merge_heads(attn @ v)
    r1 = x + o @ layer.wo.T + layer.bo
    h1, ln1 = _layer_norm(r1, layer.ln1_gain, layer.ln1_bias)
    u = h1 @ layer.ff1_w.T + layer.ff1_b
    a, t = _gelu(u)
    r2 = h1 + a @ layer.ff2_w.T + layer.ff2_b
    out, ln2 = _layer_norm(r2, layer.ln2_gain, layer.ln2_bias)
    return out, (x, q, k, v, attn, o, h1, ln1, u, a, t, ln2, heads)


def attention_layer_backward(layer: AttentionLayer, grad_out: np.ndarray, cache, prefix: str):
    x, q, k, v, attn, o, h1, ln1, u, a, t, ln2, heads = cache
    dh = x.shape[-1] // heads
    grads: dict[str, np.ndarray] = {}
    dr2, grads[f"{prefix}.ln2_gain"], grads[f"{prefix}.ln2_bias"] = _layer_norm_backward(
        grad_out, layer.ln2_gain, ln2
    )
    grads[f"{prefix}.ff2_w"], grads[f"{prefix}.ff2_b"] = _linear_grads(dr2, a)
    du = (dr2 @ layer.ff2_w) * _gelu_grad(u, t)
    grads[f"{prefix}.ff1_w"], grads[f"{prefix}.ff1_b"] = _linear_grads(du, h1)
    dh1 = dr2 + du @ layer.ff1_w
    dr1, grads[f"{prefix}.ln1_gain"], grads[f"{prefix}.ln1_bias"] = _layer_norm_backward(
        dh1, layer.ln1_gain, ln1
    )
    grads[f"{prefix}.wo"], grads[f"{prefix}.bo"] = _linear_grads(dr1, o)
    do = _split_heads(dr1 @ layer.wo, heads)
    dattn = do @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ do
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
    dq = _merge_heads(dscores @ k)
    dk = _merge_heads(dscores.transpose(0, 1, 3, 2) @ q)
    dv = _merge_heads(dv)
    grads[f"{prefix}.wq"], grads[f"{prefix}.bq"] = _linear_grads(dq, x)
    grads[f"{prefix}.wk"] = _linear_grads(dk, x)[0]
    grads[f"{prefix}.wv"], grads[f"{prefix}.bv"] = _linear_grads(dv, x)
    dx = dr1 + dq @ layer.wq + dk @ layer.wk + dv @ layer.wv
    return dx, grads


def self_attention_block(x, layer: AttentionLayer, heads: int) -> np.ndarray:
    """Apply one encoder layer to a single T×W sequence."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise InputError(f"expected a non-empty T×W sequence, got shape {x.shape}")
    out, _ = attention_layer_forward(layer, x[None], heads)
    return out[0]


# --------------------------------------------------------------------------
# encoders

def encode_texts(head: TextHead, seqs: Sequence[np.ndarray]):
    """Embed a batch of token-feature sequences; returns (B×d unit rows, cache)."""
    pooled = pool_sequences(seqs, head.max_tokens, head.proj_w.shape[1], "text")
    return gated_projection_forward(head, pooled)


def encode_texts_backward(head: TextHead, grad_e: np.ndarray, cache) -> dict[str, np.ndarray]:
    _, grads = gated_projection_backward(head, grad_e, cache, "text")
    return grads


def encode_videos(head: VideoHead, seqs: Sequence[np.ndarray]):
    if len(seqs) == 0:
        raise InputError("empty video batch")
    width = head.proj_w.shape[1]
    if not head.layers:
        pooled = pool_sequences(seqs, head.max_frames, width, "video")
        e, proj_cache = gated_projection_forward(head, pooled)
        return e, (None, proj_cache)
    clipped = [_check_sequence(s, width, "video")[: head.max_frames] for s in seqs]
    # equal-length sequences are processed together; order of groups is fixed
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(clipped):
        groups.setdefault(s.shape[0], []).append(i)
    pooled = np.empty((len(seqs), width))
    group_caches = []
    for length in sorted(groups):
        idx = groups[length]
        h = np.stack([clipped[i] for i in idx])
        layer_caches = []
        for layer in head.layers:
            h, c = attention_layer_forward(layer, h, head.heads)
            layer_caches.append(c)
        pooled[idx] = h.sum(axis=1) / length
        group_caches.append((idx, length, layer_caches))
    e, proj_cache = gated_projection_forward(head, pooled)
    return e, (group_caches, proj_cache)


def encode_videos_backward(head: VideoHead, grad_e: np.ndarray, cache) -> dict[str, np.ndarray]:
    group_caches, proj_cache = cache
    gpooled, grads = gated_projection_backward(head, grad_e, proj_cache, "video")
    if group_caches is None:
        return grads
    for i, layer in enumerate(head.layers):
        for name, arr in layer.named(f"video.layer{i}").items():
            grads[name] = np.zeros_like(arr)
    for idx, length, layer_caches in group_caches:
        dh = np.repeat(gpooled[idx][:, None, :] / length, length, axis=1)
        for i in reversed(range(len(head.layers))):
            dh, lg = attention_layer_backward(head.layers[i], dh, layer_caches[i], f"video.layer{i}")
            for name, g in lg.items():
                grads[name] += g
    return grads


def embed_text(tokens, head: TextHead) -> np.ndarray:
    e, _ = encode_texts(head, [tokens])
    return e[0]


def embed_video(frames, head: VideoHead) -> np.ndarray:
    e, _ = encode_videos(head, [frames])
    return e[0]


# --------------------------------------------------------------------------
# checkpoint I/O

def save_checkpoint(model: ModelParams, path) -> None:
    """Write ``model`` as: header, then every weight as float64 little-endian in declaration order."""
    c = model.config
    flags = (FLAG_FROZEN if model.frozen else 0) | (FLAG_ATTENTION if c.attention_layers else 0)
    parts = [
        _HEADER.pack(
            CHECKPOINT_MAGIC, CHECKPOINT_VERSION, c.text_dim, c.video_dim, c.embed_dim,
            c.attention_layers, c.heads, c.ff_width, c.max_tokens, c.max_frames, flags,
        )
    ]
    for arr in model.named_parameters().values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("checkpoint truncated inside header", len(data))
    magic, version, *dims, flags = _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    text_dim, video_dim, embed_dim, layers, heads, ff, max_tokens, max_frames = dims
    try:
        config = ModelConfig(text_dim, video_dim, embed_dim, layers, heads, ff, max_tokens, max_frames)
    except ConfigurationError as exc:
        raise FormatError(f"inconsistent checkpoint dims: {exc}", 6) from exc
    model = _empty_model(config)
    offset = _HEADER.size
    for name, arr in model.named_parameters().items():
        nbytes = arr.size * 8
        if offset + nbytes > len(data):
            raise FormatError(f"checkpoint truncated while reading {name}", offset)
        arr[...] = np.frombuffer(data, dtype="<f8", count=arr.size, offset=offset).reshape(arr.shape)
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after last weight", offset)
    if flags & FLAG_FROZEN:
        model.freeze()
    return model


def with_embed_dim(config: ModelConfig, embed_dim: int) -> ModelConfig:
    return replace(config, embed_dim=embed_dim)
