"""Losses, ScaleAdam, the Eden schedule, synthetic data and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import signal

from . import dsp
from . import tensors as T
from .codec import ZipEnhancer, model_input
from .metrics import si_sdr
from .tensors import Tensor

log = logging.getLogger(__name__)

METRIC_FIELDS = ["step", "lr", "loss_total", "loss_stft", "loss_mag", "loss_com",
                 "loss_pha", "loss_time", "sisdr_train"]


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class LossWeights:
    """Weights of the (pesq, stft, mag, com, pha, time) terms.

    The PESQ discriminator term needs an external scorer, so ``pesq`` stays 0
    unless a ``pesq_hook`` is passed to :func:`loss_total`. ``WITH_PESQ``
    holds the full weighting used when a scorer is available.
    """

    pesq: float = 0.0
    stft: float = 0.1
    mag: float = 0.9
    com: float = 0.1
    pha: float = 0.3
    time: float = 0.2

    WITH_PESQ = (0.05, 0.1, 0.9, 0.1, 0.3, 0.2)

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ValueError("loss weights must be nonnegative")


def anti_wrap(d):
    """``|d - 2*pi*round(d / 2*pi)|`` for arrays or tensors; range [0, pi]."""
    if isinstance(d, Tensor):
        return T.anti_wrap(d)
    d = np.asarray(d, dtype=np.float64)
    return np.abs(d - 2.0 * np.pi * np.round(d / (2.0 * np.pi)))


def _const(a: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(np.asarray(a, dtype=like.dtype))


def _diff(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    lo = [slice(None)] * x.ndim
    hi = [slice(None)] * x.ndim
    lo[axis] = slice(0, n - 1)
    hi[axis] = slice(1, n)
    return x[tuple(hi)] - x[tuple(lo)]


def phase_loss(phase_est: Tensor, phase_ref) -> Tensor:
    """Instantaneous phase + group delay (frequency diff) + instantaneous
    angular frequency (time diff), each an anti-wrapped mean distance.
    Arrays are ``[..., T, F]``."""
    ref = phase_ref if isinstance(phase_ref, Tensor) else _const(phase_ref, phase_est)
    ip = T.tensor_mean(T.anti_wrap(phase_est - ref))
    gd = T.tensor_mean(T.anti_wrap(_diff(phase_est, -1) - _diff(ref, -1)))
    iaf = T.tensor_mean(T.anti_wrap(_diff(phase_est, -2) - _diff(ref, -2)))
    return ip + gd + iaf


def _mse(a: Tensor, b) -> Tensor:
    d = a - b
    return T.tensor_mean(d * d)


def compressed_complex(mag_c: Tensor, phase: Tensor) -> tuple[Tensor, Tensor]:
    return mag_c * T.cos(phase), mag_c * T.sin(phase)


def synthesize(mag_c: Tensor, phase: Tensor, cfg: dsp.StftConfig, length: int) -> Tensor:
    """Differentiable decompress + ISTFT of an estimated spectrum."""
    mag = T.power(T.relu(mag_c), 1.0 / cfg.compression_c)
    return dsp.istft_tensor(mag * T.cos(phase), mag * T.sin(phase), cfg, length)


REANALYSIS_EPS = 1e-8


def reanalyze(wave: Tensor, cfg: dsp.StftConfig, eps: float = REANALYSIS_EPS) -> tuple[Tensor, Tensor]:
    """Compressed complex spectrum of a (differentiable) waveform.

    Computed as ``z * (|z|^2 + eps)^((c - 1) / 2)``, i.e. the compressed
    magnitude with the original phase, but smooth at ``z = 0`` where the plain
    power law has an unbounded derivative.
    """
    re, im = dsp.stft_tensor(wave, cfg)
    scale = T.power(re * re + im * im + eps, 0.5 * (cfg.compression_c - 1.0))
    return re * scale, im * scale


@dataclass
class Reference:
    """Clean targets: waveform ``[B, L]`` and its STFT."""

    wave: np.ndarray
    mag_c: np.ndarray
    phase: np.ndarray

    @classmethod
    def from_waves(cls, waves: np.ndarray, cfg: dsp.StftConfig) -> "Reference":
        spec = dsp.stft(np.atleast_2d(waves), cfg)
        return cls(np.atleast_2d(waves), dsp.compress_magnitude(spec.magnitude, cfg.compression_c), spec.phase)


def loss_total(mag_c_est: Tensor, phase_est: Tensor, ref: Reference, cfg: dsp.StftConfig,
               weights: LossWeights = LossWeights(),
               pesq_hook: Callable | None = None) -> tuple[Tensor, dict]:
    """Weighted sum of the enhancement losses.

    Returns the total and a dict of the scalar components (plus the
    estimated waveform under ``"wave"``).
    """
    if mag_c_est.shape != ref.mag_c.shape or phase_est.shape != ref.phase.shape:
        raise T.ShapeError(f"estimate {mag_c_est.shape} vs reference {ref.mag_c.shape}")
    length = ref.wave.shape[-1]
    clean_mag_c = _const(ref.mag_c, mag_c_est)
    clean_re, clean_im = compressed_complex(clean_mag_c, _const(ref.phase, phase_est))

    est_re, est_im = compressed_complex(mag_c_est, phase_est)
    wave = synthesize(mag_c_est, phase_est, cfg, length)
    cons_re, cons_im = reanalyze(wave, cfg)

    parts = {
        "stft": _mse(est_re, cons_re) + _mse(est_im, cons_im),
        "mag": _mse(mag_c_est, clean_mag_c),
        "com": _mse(est_re, clean_re) + _mse(est_im, clean_im),
        "pha": phase_loss(phase_est, ref.phase),
        "time": T.tensor_mean(T.absolute(wave - _const(ref.wave, wave))),
    }
    total = None
    for key, value in parts.items():
        term = value * getattr(weights, key)
        total = term if total is None else total + term
    if weights.pesq > 0:
        if pesq_hook is None:
            raise ValueError("pesq weight > 0 requires a pesq_hook")
        total = total + pesq_hook(wave, ref) * weights.pesq
    components = {k: float(v.data) for k, v in parts.items()}
    components["wave"] = wave
    return total, components


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class EdenConfig:
    alpha_base: float = 0.04
    t_warmup: int = 4000
    alpha_step: float = 2500
    alpha_epoch: float = 24
    steps_per_epoch: int = 1000

    def __post_init__(self):
        if min(self.alpha_base, self.t_warmup, self.alpha_step, self.alpha_epoch, self.steps_per_epoch) <= 0:
            raise ValueError("Eden parameters must be positive")


def eden_lr(step: int, cfg: EdenConfig = EdenConfig()) -> float:
    """``base * ((s/a_s)^2+1)^-1/4 * ((e/a_e)^2+1)^-1/4 * warmup``.

    Warmup rises linearly from 0.5 to 1 over ``t_warmup`` steps.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    epoch = step / cfg.steps_per_epoch
    step_factor = ((step / cfg.alpha_step) ** 2 + 1.0) ** -0.25
    epoch_factor = ((epoch / cfg.alpha_epoch) ** 2 + 1.0) ** -0.25
    warm = 0.5 + 0.5 * step / cfg.t_warmup if step < cfg.t_warmup else 1.0
    return cfg.alpha_base * step_factor * epoch_factor * warm


class ScaleAdam:
    """Adam with updates proportional to each tensor's RMS, plus a learned-scale channel.

    For a tensor ``p`` with gradient ``g``::

        rms      = max(RMS(p), eps_rms)
        n        = bias-corrected Adam direction of g
        d_main   = -lr * rms * n
        h        = sum(g * p) / (numel * rms)        # scalar
        d_scale  = -lr * adam_direction(h) * p
        p       += d_main + d_scale
    """

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.98), eps: float = 1e-8,
                 eps_rms: float = 1e-5):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.eps_rms = eps_rms
        self.step_count = 0
        self.exp_avg = [np.zeros_like(p.data) for p in self.params]
        self.exp_avg_sq = [np.zeros_like(p.data) for p in self.params]
        self.scale_avg = np.zeros(len(self.params))
        self.scale_avg_sq = np.zeros(len(self.params))
        self.last_main_update: list[np.ndarray] = []

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
        self.last_main_update = []
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter {i}")
            rms = max(float(np.sqrt(np.mean(p.data * p.data))), self.eps_rms)
            m, v = self.exp_avg[i], self.exp_avg_sq[i]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            direction = (m / c1) / (np.sqrt(v / c2) + self.eps)
            d_main = -lr * rms * direction

            h = float(np.sum(g * p.data)) / (p.data.size * rms)
            self.scale_avg[i] = b1 * self.scale_avg[i] + (1.0 - b1) * h
            self.scale_avg_sq[i] = b2 * self.scale_avg_sq[i] + (1.0 - b2) * h * h
            h_dir = (self.scale_avg[i] / c1) / (math.sqrt(self.scale_avg_sq[i] / c2) + self.eps)
            d_scale = -lr * h_dir * p.data

            self.last_main_update.append(d_main)
            p.data = (p.data + d_main + d_scale).astype(p.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i in range(len(self.params)):
            out[f"exp_avg.{i}"] = self.exp_avg[i]
            out[f"exp_avg_sq.{i}"] = self.exp_avg_sq[i]
        out["scale_avg"] = self.scale_avg
        out["scale_avg_sq"] = self.scale_avg_sq
        out["step_count"] = np.array([self.step_count], dtype=np.float64)
        return out

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for i, p in enumerate(self.params):
            for key, store in (("exp_avg", self.exp_avg), ("exp_avg_sq", self.exp_avg_sq)):
                arr = np.asarray(state[f"{key}.{i}"])
                if arr.shape != p.shape:
                    raise ValueError(f"optimizer state {key}.{i} has shape {arr.shape}, expected {p.shape}")
                store[i] = arr.astype(p.dtype, copy=True)
        self.scale_avg = np.asarray(state["scale_avg"], dtype=np.float64).copy()
        self.scale_avg_sq = np.asarray(state["scale_avg_sq"], dtype=np.float64).copy()
        self.step_count = int(np.asarray(state["step_count"])[0])


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class SynthPair:
    clean: dsp.Waveform
    noise: dsp.Waveform
    snr_db: float
    noisy: dsp.Waveform


def _adsr(n: int, rng: np.random.Generator, sr: int) -> np.ndarray:
    attack, decay, release = (int(rng.uniform(0.01, 0.08) * sr) for _ in range(3))
    sustain = rng.uniform(0.4, 0.9)
    env = np.full(n, sustain)
    a = min(attack, n)
    env[:a] = np.linspace(0.0, 1.0, a, endpoint=False)
    d = min(decay, n - a)
    env[a:a + d] = np.linspace(1.0, sustain, d, endpoint=False)
    r = min(release, n)
    env[n - r:] *= np.linspace(1.0, 0.0, r)
    return env


def synth_clean(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    """Sum of 2-5 harmonic tones (80-3500 Hz partials) with ADSR envelopes."""
    t = np.arange(n) / sr
    x = np.zeros(n)
    for _ in range(rng.integers(2, 6)):
        f0 = rng.uniform(80.0, 400.0)
        start = int(rng.uniform(0.0, 0.5) * n)
        length = max(int(rng.uniform(0.3, 1.0) * (n - start)), min(n - start, 64))
        seg = slice(start, start + length)
        tone = np.zeros(length)
        phase0 = rng.uniform(0, 2 * np.pi)
        for k in range(1, int(3500.0 // f0) + 1):
            tone += np.sin(2 * np.pi * k * f0 * t[:length] + k * phase0) / k
        x[seg] += rng.uniform(0.3, 1.0) * tone * _adsr(length, rng, sr)
    peak = np.max(np.abs(x))
    return 0.5 * x / peak if peak > 0 else x


def synth_noise(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    """White noise through a random 2nd-order Butterworth band-pass."""
    lo = rng.uniform(50.0, 600.0)
    hi = rng.uniform(3000.0, 0.47 * sr)
    sos = signal.butter(2, [lo, hi], btype="bandpass", fs=sr, output="sos")
    return signal.sosfilt(sos, rng.standard_normal(n))


def scale_to_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    gain = np.sqrt(np.sum(clean ** 2) / (np.sum(noise ** 2) * 10.0 ** (snr_db / 10.0)))
    return noise * gain


def make_synth_pair(seed: int, snr_db: float, duration_s: float, sample_rate: int = 16000) -> SynthPair:
    """Deterministic synthetic clean/noise pair mixed at ``snr_db``."""
    if duration_s < 0.2:
        raise ValueError("duration must be at least 0.2 s")
    n = int(round(duration_s * sample_rate))
    clean = synth_clean(np.random.default_rng([seed, 0]), n, sample_rate)
    noise = scale_to_snr(clean, synth_noise(np.random.default_rng([seed, 1]), n, sample_rate), snr_db)
    return SynthPair(dsp.Waveform(clean, sample_rate), dsp.Waveform(noise, sample_rate), float(snr_db),
                     dsp.Waveform(clean + noise, sample_rate))


@dataclass
class PairedData:
    """Fixed list of (noisy, clean) sample arrays of equal length per pair."""

    noisy: list
    clean: list
    names: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.noisy)

    @classmethod
    def synthetic(cls, n_pairs: int, seed: int = 0, duration_s: float = 2.0,
                  snr_range=(-5.0, 15.0)) -> "PairedData":
        rng = np.random.default_rng([seed, 99])
        snrs = rng.uniform(snr_range[0], snr_range[1], n_pairs)
        pairs = [make_synth_pair(seed * 100003 + i, snrs[i], duration_s) for i in range(n_pairs)]
        return cls([p.noisy.samples for p in pairs], [p.clean.samples for p in pairs],
                   [f"synth_{i:04d}" for i in range(n_pairs)])

    @classmethod
    def from_directory(cls, root) -> "PairedData":
        """``root/noisy/*.wav`` matched by filename with ``root/clean/*.wav``."""
        root = Path(root)
        noisy_files = sorted((root / "noisy").glob("*.wav"))
        if not noisy_files:
            raise FileNotFoundError(f"no WAV files in {root / 'noisy'}")
        noisy, clean, names = [], [], []
        for f in noisy_files:
            ref = root / "clean" / f.name
            if not ref.exists():
                raise FileNotFoundError(f"missing clean file for {f.name}")
            a, b = dsp.read_wav(f).samples, dsp.read_wav(ref).samples
            n = min(len(a), len(b))
            noisy.append(a[:n])
            clean.append(b[:n])
            names.append(f.name)
        return cls(noisy, clean, names)

    def batch(self, rng: np.random.Generator, batch_size: int, segment: int) -> tuple[np.ndarray, np.ndarray]:
        """Random pairs, random aligned crops of ``segment`` samples (zero-padded if short)."""
        noisy = np.zeros((batch_size, segment))
        clean = np.zeros((batch_size, segment))
        for b in range(batch_size):
            i = int(rng.integers(len(self)))
            n = len(self.noisy[i])
            if n > segment:
                off = int(rng.integers(n - segment + 1))
                noisy[b], clean[b] = self.noisy[i][off:off + segment], self.clean[i][off:off + segment]
            else:
                noisy[b, :n], clean[b, :n] = self.noisy[i], self.clean[i]
        return noisy, clean


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    model: ZipEnhancer
    optimizer: ScaleAdam
    step: int = 0


def new_state(model_cfg, seed: int, dtype=None) -> TrainState:
    with T.precision(dtype or T.get_default_dtype()):
        model = ZipEnhancer(model_cfg, seed=seed)
    return TrainState(model, ScaleAdam(model.parameters()), 0)


def train_step(state: TrainState, noisy: np.ndarray, clean: np.ndarray, stft_cfg: dsp.StftConfig,
               weights: LossWeights, eden: EdenConfig) -> dict:
    """One optimizer step on a batch; returns the metrics row."""
    model, opt, step = state.model, state.optimizer, state.step
    dtype = model.parameters()[0].dtype
    y_in, _ = model_input(noisy, stft_cfg, dtype)
    ref = Reference.from_waves(clean, stft_cfg)
    mag_c, phase = model(y_in, step=step)
    total, parts = loss_total(mag_c, phase, ref, stft_cfg, weights)
    loss_value = float(total.data)
    if not math.isfinite(loss_value):
        comp = {k: v for k, v in parts.items() if k != "wave"}
        raise TrainingDiverged(f"non-finite loss at step {step}: total={loss_value} components={comp}")
    opt.zero_grad()
    total.backward()
    lr = eden_lr(step, eden)
    opt.step(lr)
    est = parts["wave"].data
    sisdr = float(np.mean([si_sdr(est[b], clean[b]) for b in range(clean.shape[0])
                           if np.any(clean[b] != 0)] or [float("nan")]))
    state.step += 1
    return {"step": step, "lr": lr, "loss_total": loss_value,
            **{f"loss_{k}": parts[k] for k in ("stft", "mag", "com", "pha", "time")},
            "sisdr_train": sisdr}


def train_loop(state: TrainState, data: PairedData, steps: int, stft_cfg: dsp.StftConfig,
               weights: LossWeights = LossWeights(), eden: EdenConfig = EdenConfig(),
               batch_size: int = 4, segment_seconds: float = 2.0, seed: int = 0,
               sample_rate: int = 16000, metrics_path=None,
               checkpoint_fn: Callable[[TrainState], None] | None = None,
               checkpoint_every: int = 0) -> list[dict]:
    """Run ``steps`` optimizer steps starting at ``state.step``.

    Batch sampling is keyed on (seed, global step), so resuming from a
    checkpoint replays exactly the batches an uninterrupted run would see.
    """
    segment = int(round(segment_seconds * sample_rate))
    rows = []
    writer = fh = None
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        new_file = not metrics_path.exists() or state.step == 0
        fh = open(metrics_path, "w" if new_file else "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if new_file:
            writer.writeheader()
    try:
        end = state.step + steps
        t0 = time.time()
        while state.step < end:
            rng = np.random.default_rng([seed, state.step])
            noisy, clean = data.batch(rng, batch_size, segment)
            row = train_step(state, noisy, clean, stft_cfg, weights, eden)
            rows.append(row)
            if writer:
                writer.writerow(row)
            if state.step % 50 == 0:
                log.info("step %d lr %.5f loss %.4f sisdr %.2f dB (%.1fs)", row["step"], row["lr"],
                         row["loss_total"], row["sisdr_train"], time.time() - t0)
            if checkpoint_fn and checkpoint_every and state.step % checkpoint_every == 0:
                checkpoint_fn(state)
        if checkpoint_fn:
            checkpoint_fn(state)
    finally:
        if fh:
            fh.close()
    return rows
