"""Analytic parameter and FLOP counts for ZipEnhancer configurations.

Counting convention (tag ``"mac2"``):

* a multiply-accumulate is 2 FLOPs; a bias add is 1 FLOP per output;
* an attention matrix product costs ``2 * S^2 * d`` per head;
* elementwise ops (activations, residual adds, gates) cost 1 FLOP per element,
  softmax 3 per entry, normalizations 5 per element, Bypass 3 per element;
* down-sampling costs 2 FLOPs per averaged input frame element; up-sampling
  (repetition) and reshapes are free;
* STFT/ISTFT are outside the model and not counted.

Counts are for batch size 1. Nothing is executed: the traversal mirrors the
module structure in :mod:`zipenhancer.codec` and :mod:`zipenhancer.zipblocks`.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .codec import DENSE_DILATIONS, DENSE_KERNEL, reduced_bins
from .dsp import StftConfig
from .zipblocks import ModelConfig

CONVENTION = "mac2"
ELEMENTWISE = 1
SOFTMAX = 3
NORM = 5
BYPASS = 3


@dataclass
class CostReport:
    name: str
    config: ModelConfig
    duration_s: float
    params: dict[str, int] = field(default_factory=dict)
    flops: dict[str, float] = field(default_factory=dict)
    convention: str = CONVENTION

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def total_flops(self) -> float:
        return sum(self.flops.values())

    @property
    def has_sampling(self) -> bool:
        return any(r > 1 for r in self.config.ratios)


# ---------------------------------------------------------------------------
# parameter counts
# ---------------------------------------------------------------------------

def _linear(i: int, o: int) -> int:
    return i * o + o


def _conv_norm_act(ci: int, co: int, kh: int, kw: int) -> int:
    return ci * co * kh * kw + co + 2 * co + co


def _dense_params(C: int) -> int:
    kh, kw = DENSE_KERNEL
    return sum(_conv_norm_act(C * (i + 1), C, kh, kw) for i in range(len(DENSE_DILATIONS)))


def block_params(cfg: ModelConfig) -> int:
    C, H, h, d = cfg.channels, cfg.ffn_hidden, cfg.heads, cfg.attn_head_dim
    ffn = _linear(C, H) + _linear(H, C)
    mhaw = 2 * _linear(C, h * d) + h * (2 * cfg.pos_clip + 1)
    sa = 2 * _linear(C, C)
    nla = 4 * _linear(C, C)
    conv = _linear(C, 2 * C) + C * cfg.conv_kernel + C + C + _linear(C, C)
    return 3 * ffn + mhaw + nla + 2 * sa + 2 * conv + (C + 1) + 2 * C


def sampling_params(r: int) -> int:
    return 2 * r if r > 1 else 0


def count_params(cfg: ModelConfig, duration_s: float = 1.0) -> CostReport:
    """Exact trainable-scalar count by structural traversal."""
    C = cfg.channels
    rep = CostReport(cfg.name, cfg, duration_s)
    rep.params["encoder"] = _conv_norm_act(2, C, 3, 3) + _dense_params(C) + _conv_norm_act(C, C, 3, 3)
    for i, r in enumerate(cfg.ratios):
        if r > 1:
            rep.params[f"stack{i}.sampling"] = sampling_params(r)
        rep.params[f"stack{i}.f_block"] = block_params(cfg)
        rep.params[f"stack{i}.t_block"] = block_params(cfg)
        rep.params[f"stack{i}.bypass"] = C
    trunk = _dense_params(C) + _linear(C * 3, 2 * C) + 2 * C + C
    rep.params["mag_decoder"] = trunk + _linear(C, 1)
    rep.params["phase_decoder"] = trunk + 2 * _linear(C, 1)
    return rep


# ---------------------------------------------------------------------------
# FLOP counts
# ---------------------------------------------------------------------------

def _conv_flops(ci: int, co: int, kh: int, kw: int, positions: int) -> float:
    return (2 * ci * kh * kw + 1) * co * positions


def _cna_flops(ci: int, co: int, kh: int, kw: int, positions: int) -> float:
    return _conv_flops(ci, co, kh, kw, positions) + (NORM + ELEMENTWISE) * co * positions


def _dense_flops(C: int, positions: int) -> float:
    kh, kw = DENSE_KERNEL
    total = sum(_cna_flops(C * (i + 1), C, kh, kw, positions) for i in range(len(DENSE_DILATIONS)))
    return float(total)


def _lin_flops(i: int, o: int, n: float) -> float:
    return (2 * i + 1) * o * n


def block_flops(cfg: ModelConfig, n_seq: int, length: int) -> float:
    """One ZipformerBlock over ``n_seq`` sequences of ``length`` frames."""
    C, H, h, d = cfg.channels, cfg.ffn_hidden, cfg.heads, cfg.attn_head_dim
    dv = cfg.value_head_dim
    P = n_seq * length
    S2 = float(length) ** 2
    ffn = _lin_flops(C, H, P) + ELEMENTWISE * H * P + _lin_flops(H, C, P) + ELEMENTWISE * C * P
    mhaw = 2 * _lin_flops(C, h * d, P) + n_seq * h * (2 * S2 * d + 2 * ELEMENTWISE * S2 + SOFTMAX * S2)
    attend = n_seq * h * 2 * S2 * dv
    nla = 4 * _lin_flops(C, C, P) + 3 * ELEMENTWISE * C * P + attend
    sa = 2 * _lin_flops(C, C, P) + attend + ELEMENTWISE * C * P
    conv = (_lin_flops(C, 2 * C, P) + 2 * ELEMENTWISE * C * P
            + (2 * cfg.conv_kernel + 1) * C * P + ELEMENTWISE * C * P
            + _lin_flops(C, C, P) + ELEMENTWISE * C * P)
    return float(3 * ffn + mhaw + nla + 2 * sa + 2 * conv + NORM * C * P + 2 * BYPASS * C * P)


def dual_path_flops(cfg: ModelConfig, n_frames: int, n_bins: int) -> tuple[float, float]:
    """(frequency block, time block) costs at the given resolution."""
    return block_flops(cfg, n_frames, n_bins), block_flops(cfg, n_bins, n_frames)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def count_flops(cfg: ModelConfig, duration_s: float = 1.0, stft: StftConfig = StftConfig(),
                sample_rate: int = 16000) -> CostReport:
    """Analytic FLOPs for one utterance of ``duration_s`` seconds (batch 1)."""
    length = int(round(duration_s * sample_rate))
    Tn = stft.n_frames(length)
    F = stft.n_bins
    Fr = reduced_bins(F)
    C = cfg.channels
    rep = count_params(cfg, duration_s)
    rep.name = cfg.name
    full = Tn * F
    rep.flops["encoder"] = (_cna_flops(2, C, 3, 3, full) + _dense_flops(C, full)
                            + _cna_flops(C, C, 3, 3, Tn * Fr))
    for i, r in enumerate(cfg.ratios):
        t_r, f_r = _ceil_div(Tn, r), _ceil_div(Fr, r)
        if r > 1:
            rep.flops[f"stack{i}.sampling"] = float(2 * r * C * (t_r * Fr + t_r * f_r))
        fb, tb = dual_path_flops(cfg, t_r, f_r)
        rep.flops[f"stack{i}.f_block"] = fb
        rep.flops[f"stack{i}.t_block"] = tb
        rep.flops[f"stack{i}.bypass"] = float(BYPASS * C * Tn * Fr)
    trunk = (_dense_flops(C, Tn * Fr) + _conv_flops(C, 2 * C, 1, 3, Tn * Fr)
             + (NORM + ELEMENTWISE) * C * full)
    rep.flops["mag_decoder"] = trunk + _conv_flops(C, 1, 1, 1, full)
    rep.flops["phase_decoder"] = trunk + 2 * _conv_flops(C, 1, 1, 1, full) + 2 * full
    return rep


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

TABLE_COLUMNS = ["Model", "N", "Ratios", "C", "Heads", "Para[M]", "FLOPS[G]"]


def _row(rep: CostReport) -> list[str]:
    cfg = rep.config
    ratios = "{" + ", ".join(str(r) for r in cfg.ratios) + "}"
    return [rep.name, str(cfg.n_stacks), ratios, str(cfg.channels), str(cfg.heads),
            f"{rep.total_params / 1e6:.4f}", f"{rep.total_flops / 1e9:.2f}"]


def format_table(reports: list[CostReport]) -> str:
    rows = [TABLE_COLUMNS] + [_row(r) for r in reports]
    widths = [max(len(r[i]) for r in rows) for i in range(len(TABLE_COLUMNS))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in rows]
    dur = reports[0].duration_s if reports else 0
    lines.append(f"# FLOPs for {dur:g} s of 16 kHz audio, batch 1, convention {CONVENTION} (MAC = 2 FLOPs)")
    return "\n".join(lines)


def format_csv(reports: list[CostReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(TABLE_COLUMNS + ["params", "flops", "duration_s", "convention"])
    for r in reports:
        w.writerow(_row(r) + [r.total_params, f"{r.total_flops:.0f}", r.duration_s, r.convention])
    return buf.getvalue()


def format_breakdown(rep: CostReport) -> str:
    lines = [f"{'module':<20} {'params':>10} {'GFLOPs':>10}"]
    for key in rep.flops:
        lines.append(f"{key:<20} {rep.params.get(key, 0):>10d} {rep.flops[key] / 1e9:>10.3f}")
    lines.append(f"{'total':<20} {rep.total_params:>10d} {rep.total_flops / 1e9:>10.3f}")
    return "\n".join(lines)
