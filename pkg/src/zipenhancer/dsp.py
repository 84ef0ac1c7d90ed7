"""Audio I/O and time-frequency analysis/synthesis.

STFT framing uses centre reflect padding of ``n_fft // 2`` samples on each
side, so a signal of ``L`` samples yields ``floor(L / hop) + 1`` frames.
Magnitudes are plain one-sided ``|FFT|`` (no doubling of non-DC bins).
The inverse is weighted overlap-add with the analysis window as synthesis
window, normalized by the overlap-added squared window.

Two code paths exist: numpy functions (:func:`stft`, :func:`istft`) for
feature extraction and synthesis, and tensor functions
(:func:`stft_tensor`, :func:`istft_tensor`) that are differentiable and used
by the training losses. They agree to rounding error.
"""

from __future__ import annotations

import functools
import logging
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.io import wavfile

from . import tensors as T
from .tensors import Tensor

log = logging.getLogger(__name__)

EXPECTED_SAMPLE_RATE = 16000


class WavError(ValueError):
    """Unreadable or unsupported WAV file."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = EXPECTED_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 400
    win_length: int = 400
    hop: int = 100
    window: str = "hann"
    compression_c: float = 0.3
    center_pad: bool = True

    def __post_init__(self):
        if self.win_length > self.n_fft:
            raise ValueError(f"win_length {self.win_length} exceeds n_fft {self.n_fft}")
        if not 0 < self.hop <= self.win_length:
            raise ValueError(f"hop must be in (0, win_length], got {self.hop}")
        if not 0 < self.compression_c <= 1:
            raise ValueError(f"compression_c must be in (0, 1], got {self.compression_c}")
        if self.window != "hann":
            raise ValueError(f"only the hann window is supported, got {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, length: int) -> int:
        if self.center_pad:
            return length // self.hop + 1
        return (length - self.n_fft) // self.hop + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Spectrum:
    magnitude: np.ndarray
    phase: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    original_length: int = 0

    @property
    def shape(self) -> tuple:
        return self.magnitude.shape


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def read_wav(path) -> Waveform:
    """Read a mono PCM16 or float32 RIFF/WAVE file; PCM16 is scaled by 1/32768."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except (ValueError, EOFError) as exc:
        raise WavError(f"{path}: malformed WAV ({exc})") from exc
    if data.ndim != 1:
        raise WavError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavError(f"{path}: unsupported sample encoding {data.dtype}")
    if rate != EXPECTED_SAMPLE_RATE:
        log.warning("%s: sample rate %d Hz (expected %d, no resampling)", path, rate, EXPECTED_SAMPLE_RATE)
    return Waveform(samples, int(rate))


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    """Saturating conversion of [-1, 1] floats to int16."""
    scaled = np.round(np.clip(samples, -1.0, 1.0) * 32768.0)
    return np.clip(scaled, -32768, 32767).astype(np.int16)


def write_wav(path, wave: Waveform) -> None:
    """Write mono PCM16, clipping samples to [-1, 1]."""
    wavfile.write(path, int(wave.sample_rate), to_pcm16(wave.samples))


def write_spectrogram_csv(path, spec: Spectrum) -> None:
    """Magnitude only: one row per frame, one column per bin."""
    np.savetxt(path, spec.magnitude, delimiter=",", fmt="%.8g")


# ---------------------------------------------------------------------------
# STFT / ISTFT (numpy path)
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=16)
def analysis_window(n_fft: int, win_length: int) -> np.ndarray:
    """Periodic Hann window of ``win_length`` centred in ``n_fft`` samples."""
    n = np.arange(win_length)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win_length)
    left = (n_fft - win_length) // 2
    out = np.zeros(n_fft)
    out[left:left + win_length] = w
    out.setflags(write=False)
    return out


def _pad_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    if not cfg.center_pad:
        return x
    half = cfg.n_fft // 2
    return np.pad(x, [(0, 0)] * (x.ndim - 1) + [(half, half)], mode="reflect")


def _frames(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    xp = _pad_signal(x, cfg)
    if xp.shape[-1] < cfg.n_fft:
        raise ValueError(f"signal too short for n_fft={cfg.n_fft}")
    win = np.lib.stride_tricks.sliding_window_view(xp, cfg.n_fft, axis=-1)[..., ::cfg.hop, :]
    return win * analysis_window(cfg.n_fft, cfg.win_length)


def stft(wave: Waveform | np.ndarray, cfg: StftConfig = StftConfig()) -> Spectrum:
    """Hann-windowed one-sided STFT; returns magnitude and phase in (-pi, pi]."""
    x = wave.samples if isinstance(wave, Waveform) else np.asarray(wave, dtype=np.float64)
    if x.shape[-1] < 1:
        raise ValueError("empty signal")
    spec = np.fft.rfft(_frames(x, cfg), n=cfg.n_fft, axis=-1)
    return Spectrum(np.abs(spec), wrap_phase(np.angle(spec)), cfg, x.shape[-1])


def wrap_phase(p: np.ndarray) -> np.ndarray:
    """Map -pi to pi so phases lie in (-pi, pi]."""
    return np.where(p <= -np.pi, p + 2.0 * np.pi, p)


def window_envelope(cfg: StftConfig, n_frames: int) -> np.ndarray:
    """Overlap-added squared window over the padded signal axis."""
    w2 = analysis_window(cfg.n_fft, cfg.win_length) ** 2
    length = (n_frames - 1) * cfg.hop + cfg.n_fft
    return T._overlap_add_np(np.broadcast_to(w2, (n_frames, cfg.n_fft)), cfg.hop, length)


def _retained(cfg: StftConfig, length: int) -> slice:
    start = cfg.n_fft // 2 if cfg.center_pad else 0
    return slice(start, start + length)


def istft(spec: Spectrum, length: int | None = None) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`, trimmed to the original length."""
    cfg = spec.config
    length = spec.original_length if length is None else length
    X = spec.magnitude * np.exp(1j * spec.phase)
    frames = np.fft.irfft(X, n=cfg.n_fft, axis=-1) * analysis_window(cfg.n_fft, cfg.win_length)
    n_frames = frames.shape[-2]
    env = window_envelope(cfg, n_frames)
    y = T._overlap_add_np(frames, cfg.hop, env.shape[-1])
    keep = _retained(cfg, length)
    env = env[keep]
    if env.shape[0] < length:
        raise ValueError(f"spectrum of {n_frames} frames cannot cover {length} samples")
    if np.any(env < 1e-8):
        raise ValueError("window overlap too small: reconstruction is ill-posed")
    return Waveform(y[..., keep] / env)


def compress_magnitude(m, c: float = 0.3):
    return np.power(m, c)


def decompress_magnitude(m_c, c: float = 0.3):
    """Inverse of :func:`compress_magnitude`; negative inputs clamp to 0."""
    return np.power(np.maximum(m_c, 0.0), 1.0 / c)


def stack_input(spec: Spectrum) -> Tensor:
    """``[2, T, F]`` model input: compressed magnitude and wrapped phase."""
    mag_c = compress_magnitude(spec.magnitude, spec.config.compression_c)
    return Tensor(np.stack([mag_c, spec.phase], axis=0).astype(T.get_default_dtype()))


# ---------------------------------------------------------------------------
# differentiable path
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=16)
def _dft_bases(n_fft: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Real DFT matrices: forward (cos, -sin) ``[N, F]`` and inverse ``[F, N]``."""
    n_bins = n_fft // 2 + 1
    n = np.arange(n_fft)[:, None]
    k = np.arange(n_bins)[None, :]
    ang = 2.0 * np.pi * n * k / n_fft
    fwd_re, fwd_im = np.cos(ang), -np.sin(ang)
    # inverse of a one-sided spectrum: interior bins count twice
    scale = np.full(n_bins, 2.0 / n_fft)
    scale[0] = 1.0 / n_fft
    if n_fft % 2 == 0:
        scale[-1] = 1.0 / n_fft
    inv_re = (np.cos(ang) * scale).T
    inv_im = (-np.sin(ang) * scale).T
    return fwd_re, fwd_im, inv_re, inv_im


def stft_tensor(x: Tensor, cfg: StftConfig) -> tuple[Tensor, Tensor]:
    """Differentiable STFT of ``[..., L]`` -> (real, imag), each ``[..., T, F]``."""
    fwd_re, fwd_im, _, _ = _dft_bases(cfg.n_fft)
    dtype = x.dtype
    if cfg.center_pad:
        half = cfg.n_fft // 2
        x = T.reflect_pad(x, half, half)
    frames = T.frame(x, cfg.n_fft, cfg.hop) * Tensor(analysis_window(cfg.n_fft, cfg.win_length).astype(dtype))
    re = T.matmul(frames, Tensor(fwd_re.astype(dtype)))
    im = T.matmul(frames, Tensor(fwd_im.astype(dtype)))
    return re, im


def istft_tensor(re: Tensor, im: Tensor, cfg: StftConfig, length: int) -> Tensor:
    """Differentiable inverse of :func:`stft_tensor`, trimmed to ``length`` samples."""
    _, _, inv_re, inv_im = _dft_bases(cfg.n_fft)
    dtype = re.dtype
    frames = T.matmul(re, Tensor(inv_re.astype(dtype))) + T.matmul(im, Tensor(inv_im.astype(dtype)))
    frames = frames * Tensor(analysis_window(cfg.n_fft, cfg.win_length).astype(dtype))
    n_frames = re.shape[-2]
    env = window_envelope(cfg, n_frames)
    y = T.overlap_add(frames, cfg.hop, env.shape[-1])
    keep = _retained(cfg, length)
    env = env[keep]
    if env.shape[0] < length or np.any(env < 1e-8):
        raise ValueError("window overlap too small or too few frames for requested length")
    idx = (Ellipsis, keep)
    return y[idx] * Tensor((1.0 / env).astype(dtype))
