"""Zipformer blocks and down-up sampling stacks for dual-path T/F modelling.

Sequence modules take ``[N, S, C]`` tensors (N independent sequences of
length S with C channels). The dual-path layer folds a ``[B, T, F, C]``
feature into frequency sequences first, then time sequences.

Block layout (residual add unless noted)::

    FFN1 -> attention weights (once) -> NLA -> SA1 -> Conv1 -> FFN2
         -> Bypass_mid -> SA2 -> Conv2 -> FFN3 -> BiasNorm -> Bypass_out

All Bypass weights are clamped to [0.9, 1.0] before global step 2000 and
to [0.2, 1.0] from then on. ``step=None`` (inference) uses the later range.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensors as T
from .nn import Linear, Module, Parameter, PReLU
from .tensors import Tensor

BYPASS_WARMUP_STEPS = 2000
BYPASS_EARLY_RANGE = (0.9, 1.0)
BYPASS_LATE_RANGE = (0.2, 1.0)


@dataclass
class ModelConfig:
    """Architecture hyper-parameters; unset inner dims derive from ``channels``."""

    n_stacks: int = 4
    ratios: tuple = (1, 2, 2, 1)
    channels: int = 64
    heads: int = 4
    ffn_hidden: int | None = None
    conv_kernel: int = 15
    attn_head_dim: int | None = None
    pos_clip: int = 64
    name: str = "custom"

    def __post_init__(self):
        self.ratios = tuple(int(r) for r in self.ratios)
        if self.ffn_hidden is None:
            self.ffn_hidden = 3 * self.channels
        if self.attn_head_dim is None:
            self.attn_head_dim = self.channels // max(self.heads, 1)
        self.validate()

    def validate(self) -> None:
        if len(self.ratios) != self.n_stacks:
            raise ValueError(f"{len(self.ratios)} ratios given for {self.n_stacks} stacks")
        if any(r < 1 for r in self.ratios):
            raise ValueError(f"ratios must be >= 1, got {self.ratios}")
        if self.heads < 1 or self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")

    @property
    def value_head_dim(self) -> int:
        return self.channels // self.heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        return d


def bypass_range(step: int | None) -> tuple[float, float]:
    if step is not None and step < BYPASS_WARMUP_STEPS:
        return BYPASS_EARLY_RANGE
    return BYPASS_LATE_RANGE


def effective_bypass_weight(raw: Tensor, step: int | None) -> Tensor:
    lo, hi = bypass_range(step)
    return T.clip(raw, lo, hi)


def bypass(x, y, c_raw: Tensor, step: int | None) -> Tensor:
    """``(1 - c) * x + c * y`` with the step-scheduled clamp on ``c``."""
    if x.shape != y.shape:
        raise T.ShapeError(f"bypass: {x.shape} vs {y.shape}")
    c = effective_bypass_weight(c_raw, step)
    return x + (y - x) * c


def bias_norm(x, bias: Tensor, log_scale: Tensor, eps: float = 1e-8) -> Tensor:
    """``x / RMS[x - b] * exp(gamma)`` with the RMS taken over channels (last axis)."""
    d = x - bias
    ms = T.tensor_mean(d * d, axis=-1, keepdims=True)
    if np.any(ms.data < eps * eps):
        raise FloatingPointError("bias_norm: degenerate frame (all channels equal the bias)")
    return x * (T.power(ms, -0.5) * T.exp(log_scale))


def downsample(x, axis: int, r: int, weights: Tensor | None) -> Tensor:
    """Weighted average of every ``r`` frames along ``axis``.

    ``weights`` holds ``r`` raw scores, softmax-normalized here. A trailing
    partial group is completed by repeating the final frame.
    """
    if r == 1:
        return x
    axis = axis % x.ndim
    S = x.shape[axis]
    groups = -(-S // r)
    extra = groups * r - S
    if extra:
        last = x[(slice(None),) * axis + (slice(S - 1, S),)]
        x = T.concat([x] + [last] * extra, axis=axis)
    shape = list(x.shape)
    shape[axis:axis + 1] = [groups, r]
    xr = T.reshape(x, tuple(shape))
    w = T.softmax(weights, axis=0)
    wshape = [1] * len(shape)
    wshape[axis + 1] = r
    return T.tensor_sum(xr * T.reshape(w, tuple(wshape)), axis=axis + 1)


def upsample(x, axis: int, r: int, target_len: int) -> Tensor:
    """Repeat each frame ``r`` times along ``axis`` and truncate to ``target_len``."""
    if r == 1 and x.shape[axis] == target_len:
        return x
    return T.repeat_frames(x, r, axis, target_len)


def relative_position_index(S: int, clip: int) -> np.ndarray:
    d = np.arange(S)[None, :] - np.arange(S)[:, None]
    return np.clip(d, -clip, clip) + clip


class AttentionWeights(Module):
    """Computes per-head row-stochastic weights once per block.

    ``softmax(Q K^T / sqrt(d) + bias[clip(j - i)])`` with a learned clipped
    relative-position bias table per head.
    """

    def __init__(self, channels: int, heads: int, head_dim: int, pos_clip: int, rng):
        self.heads, self.head_dim, self.pos_clip = heads, head_dim, pos_clip
        self.query = Linear(channels, heads * head_dim, rng)
        self.key = Linear(channels, heads * head_dim, rng)
        self.pos_bias = Parameter(np.zeros((heads, 2 * pos_clip + 1)))
        self.calls = 0

    def forward(self, x) -> Tensor:
        self.calls += 1
        N, S, _ = x.shape
        H, d = self.heads, self.head_dim
        q = T.transpose(T.reshape(self.query(x), (N, S, H, d)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(self.key(x), (N, S, H, d)), (0, 2, 3, 1))
        scores = T.matmul(q, k) * (1.0 / np.sqrt(d))
        bias = T.take(self.pos_bias, relative_position_index(S, self.pos_clip), axis=1)
        return T.softmax(scores + bias, axis=-1)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    N, S, C = x.shape
    return T.transpose(T.reshape(x, (N, S, heads, C // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    N, H, S, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (N, S, H * d))


def _check_weights(aw: Tensor, x) -> None:
    if aw.shape[-1] != x.shape[1] or aw.shape[-2] != x.shape[1]:
        raise T.ShapeError(f"attention weights for length {aw.shape[-1]} applied to length {x.shape[1]}")


class SelfAttention(Module):
    """Value projection mixed by precomputed attention weights (no softmax here)."""

    def __init__(self, channels: int, heads: int, rng):
        self.heads = heads
        self.value = Linear(channels, channels, rng)
        self.out = Linear(channels, channels, rng)

    def forward(self, x, aw: Tensor) -> Tensor:
        _check_weights(aw, x)
        v = _split_heads(self.value(x), self.heads)
        return self.out(_merge_heads(T.matmul(aw, v)))


class NonlinAttention(Module):
    """``out(A * attend(tanh(B) * C))`` with shared attention weights."""

    def __init__(self, channels: int, heads: int, rng):
        self.heads = heads
        self.a = Linear(channels, channels, rng)
        self.b = Linear(channels, channels, rng)
        self.c = Linear(channels, channels, rng)
        self.out = Linear(channels, channels, rng)

    def forward(self, x, aw: Tensor) -> Tensor:
        _check_weights(aw, x)
        inner = T.tanh(self.b(x)) * self.c(x)
        mixed = _merge_heads(T.matmul(aw, _split_heads(inner, self.heads)))
        return self.out(self.a(x) * mixed)


class FeedForward(Module):
    def __init__(self, channels: int, hidden: int, rng):
        self.up = Linear(channels, hidden, rng)
        self.down = Linear(hidden, channels, rng)

    def forward(self, x) -> Tensor:
        return self.down(T.silu(self.up(x)))


class ConvModule(Module):
    """pointwise -> GLU -> depthwise conv along the sequence -> PReLU -> pointwise."""

    def __init__(self, channels: int, kernel: int, rng):
        self.pointwise_in = Linear(channels, 2 * channels, rng)
        bound = 1.0 / np.sqrt(kernel)
        self.depthwise_weight = Parameter(rng.uniform(-bound, bound, (channels, kernel)))
        self.depthwise_bias = Parameter(rng.uniform(-bound, bound, channels))
        self.act = PReLU(channels)
        self.pointwise_out = Linear(channels, channels, rng)

    def forward(self, x) -> Tensor:
        h = T.glu(self.pointwise_in(x), axis=-1)
        h = T.depthwise_conv1d(h, self.depthwise_weight, self.depthwise_bias)
        return self.pointwise_out(self.act(h))


class BiasNorm(Module):
    def __init__(self, channels: int):
        self.bias = Parameter(np.zeros(channels))
        self.log_scale = Parameter(np.zeros(()))

    def forward(self, x) -> Tensor:
        return bias_norm(x, self.bias, self.log_scale)


class Bypass(Module):
    def __init__(self, channels: int, init: float = 1.0):
        self.weight = Parameter(np.full(channels, init))

    def forward(self, x, y, step: int | None) -> Tensor:
        return bypass(x, y, self.weight, step)


class ZipformerBlock(Module):
    def __init__(self, cfg: ModelConfig, rng):
        C = cfg.channels
        self.ffn1 = FeedForward(C, cfg.ffn_hidden, rng)
        self.attn_weights = AttentionWeights(C, cfg.heads, cfg.attn_head_dim, cfg.pos_clip, rng)
        self.nla = NonlinAttention(C, cfg.heads, rng)
        self.sa1 = SelfAttention(C, cfg.heads, rng)
        self.conv1 = ConvModule(C, cfg.conv_kernel, rng)
        self.ffn2 = FeedForward(C, cfg.ffn_hidden, rng)
        self.bypass_mid = Bypass(C)
        self.sa2 = SelfAttention(C, cfg.heads, rng)
        self.conv2 = ConvModule(C, cfg.conv_kernel, rng)
        self.ffn3 = FeedForward(C, cfg.ffn_hidden, rng)
        self.norm = BiasNorm(C)
        self.bypass_out = Bypass(C)

    def forward(self, x, step: int | None = None) -> Tensor:
        x0 = x
        x = x + self.ffn1(x)
        aw = self.attn_weights(x)
        x = x + self.nla(x, aw)
        x = x + self.sa1(x, aw)
        x = x + self.conv1(x)
        x = x + self.ffn2(x)
        x = self.bypass_mid(x0, x, step)
        x = x + self.sa2(x, aw)
        x = x + self.conv2(x)
        x = x + self.ffn3(x)
        x = self.norm(x)
        return self.bypass_out(x0, x, step)


class DualPathLayer(Module):
    """Frequency-axis block over (B*T) sequences, then time-axis block over (B*F)."""

    def __init__(self, cfg: ModelConfig, rng):
        self.f_block = ZipformerBlock(cfg, rng)
        self.t_block = ZipformerBlock(cfg, rng)

    def forward(self, x, step: int | None = None) -> Tensor:
        B, Tn, F, C = x.shape
        y = self.f_block(T.reshape(x, (B * Tn, F, C)), step)
        y = T.transpose(T.reshape(y, (B, Tn, F, C)), (0, 2, 1, 3))
        y = self.t_block(T.reshape(y, (B * F, Tn, C)), step)
        return T.transpose(T.reshape(y, (B, F, Tn, C)), (0, 2, 1, 3))


class DownsampleStack(Module):
    """Down-sample T and F by ``r``, run a dual-path layer, up-sample, Bypass-merge.

    At ``r == 1`` no sampling weights exist and the layer runs at full resolution.
    """

    def __init__(self, cfg: ModelConfig, ratio: int, rng):
        self.ratio = int(ratio)
        if self.ratio > 1:
            self.time_weights = Parameter(np.zeros(self.ratio))
            self.freq_weights = Parameter(np.zeros(self.ratio))
        self.layer = DualPathLayer(cfg, rng)
        self.bypass = Bypass(cfg.channels)

    def forward(self, x, step: int | None = None) -> Tensor:
        r = self.ratio
        B, Tn, F, C = x.shape
        z = x
        if r > 1:
            z = downsample(z, 1, r, self.time_weights)
            z = downsample(z, 2, r, self.freq_weights)
        z = self.layer(z, step)
        if r > 1:
            z = upsample(z, 2, r, F)
            z = upsample(z, 1, r, Tn)
        return self.bypass(x, z, step)
