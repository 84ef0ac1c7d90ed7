"""Convolutional encoder, magnitude/phase decoders and the full enhancement model.

Feature layout is ``[B, C, T, F]`` in the codec and ``[B, T, F', C]`` inside
the stacks. Frequency bookkeeping for the default 400-point STFT: 201 bins are reduced
to 101 by the stride-2 encoder conv, the decoders' sub-pixel shuffle
restores 202 and the last bin is dropped.
"""

from __future__ import annotations

import numpy as np

from . import dsp
from . import tensors as T
from .nn import Conv2d, InstanceNorm2d, Module, PReLU
from .tensors import Tensor
from .zipblocks import DownsampleStack, ModelConfig

DENSE_DILATIONS = (1, 2, 4, 8)
DENSE_KERNEL = (2, 3)


def reduced_bins(n_bins: int) -> int:
    """Frequency extent after the stride-2 encoder conv (kernel 3, padding 1)."""
    return (n_bins - 1) // 2 + 1


class ConvNormAct(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, dilation=1, padding=0):
        self.conv = Conv2d(c_in, c_out, kernel, rng, stride=stride, dilation=dilation, padding=padding)
        self.norm = InstanceNorm2d(c_out)
        self.act = PReLU(c_out, axis=-3)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class DilatedDenseNet(Module):
    """Four densely connected (2 x 3) convs with time dilations 1, 2, 4, 8.

    Layer ``i`` reads the concatenation of the block input and all earlier
    outputs; the time axis is zero-padded only at the start so (T, F) is kept.
    The block returns the last layer's output.
    """

    def __init__(self, channels: int, rng):
        kt, kf = DENSE_KERNEL
        self.layers = [
            ConvNormAct(channels * (i + 1), channels, DENSE_KERNEL, rng,
                        dilation=(d, 1), padding=(d * (kt - 1), 0, (kf - 1) // 2, (kf - 1) // 2))
            for i, d in enumerate(DENSE_DILATIONS)
        ]

    def forward(self, x):
        skip = x
        out = x
        for i, layer in enumerate(self.layers):
            out = layer(skip)
            if i + 1 < len(self.layers):
                skip = T.concat([out, skip], axis=-3)
        return out

    @staticmethod
    def receptive_field() -> int:
        return 1 + sum((DENSE_KERNEL[0] - 1) * d for d in DENSE_DILATIONS)


class Encoder(Module):
    def __init__(self, channels: int, rng):
        self.conv1 = ConvNormAct(2, channels, (3, 3), rng, padding=(1, 1))
        self.dense = DilatedDenseNet(channels, rng)
        self.conv2 = ConvNormAct(channels, channels, (3, 3), rng, stride=(1, 2), padding=(1, 1))

    def forward(self, y_in):
        if y_in.shape[-1] < 3:
            raise T.ShapeError(f"encoder needs at least 3 frequency bins, got {y_in.shape[-1]}")
        return self.conv2(self.dense(self.conv1(y_in)))


class _UpsampleTrunk(Module):
    """Dense block, sub-pixel (x2) frequency conv, trim, InstanceNorm + PReLU."""

    def __init__(self, channels: int, rng):
        self.dense = DilatedDenseNet(channels, rng)
        self.sp_conv = Conv2d(channels, 2 * channels, (1, 3), rng, padding=(0, 1))
        self.norm = InstanceNorm2d(channels)
        self.act = PReLU(channels, axis=-3)

    def forward(self, x, n_bins: int):
        h = T.sub_pixel(self.sp_conv(self.dense(x)), 2)
        if h.shape[-1] < n_bins:
            raise T.ShapeError(f"decoder produced {h.shape[-1]} bins, need {n_bins}")
        h = h[..., :n_bins]
        return self.act(self.norm(h))


class MagnitudeDecoder(Module):
    """Predicts the compressed clean magnitude directly (linear head, no mask)."""

    def __init__(self, channels: int, rng):
        self.trunk = _UpsampleTrunk(channels, rng)
        self.head = Conv2d(channels, 1, (1, 1), rng)

    def forward(self, x, n_bins: int):
        out = self.head(self.trunk(x, n_bins))
        return T.reshape(out, out.shape[:-3] + out.shape[-2:])


class PhaseDecoder(Module):
    """Two parallel 1x1 heads combined by ``atan2(imag_head, real_head)``."""

    def __init__(self, channels: int, rng):
        self.trunk = _UpsampleTrunk(channels, rng)
        self.real_head = Conv2d(channels, 1, (1, 1), rng)
        self.imag_head = Conv2d(channels, 1, (1, 1), rng)

    def heads(self, x, n_bins: int):
        h = self.trunk(x, n_bins)
        r, i = self.real_head(h), self.imag_head(h)
        shape = r.shape[:-3] + r.shape[-2:]
        return T.reshape(r, shape), T.reshape(i, shape)

    def forward(self, x, n_bins: int):
        r, i = self.heads(x, n_bins)
        return T.atan2(i, r)


class ZipEnhancer(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        C = cfg.channels
        self.encoder = Encoder(C, rng)
        self.stacks = [DownsampleStack(cfg, r, rng) for r in cfg.ratios]
        self.mag_decoder = MagnitudeDecoder(C, rng)
        self.phase_decoder = PhaseDecoder(C, rng)

    def core(self, h, step: int | None = None):
        """Run the down-sample stacks over a ``[B, C, T, F']`` feature."""
        z = T.transpose(h, (0, 2, 3, 1))
        for stack in self.stacks:
            z = stack(z, step)
        return T.transpose(z, (0, 3, 1, 2))

    def forward(self, y_in, step: int | None = None):
        """``[B, 2, T, F]`` input -> (compressed magnitude, phase), each ``[B, T, F]``."""
        y_in = y_in if isinstance(y_in, Tensor) else Tensor(y_in)
        squeeze = y_in.ndim == 3
        if squeeze:
            y_in = T.reshape(y_in, (1,) + y_in.shape)
        n_bins = y_in.shape[-1]
        h = self.core(self.encoder(y_in), step)
        mag_c = self.mag_decoder(h, n_bins)
        phase = self.phase_decoder(h, n_bins)
        if squeeze:
            mag_c, phase = mag_c[0], phase[0]
        return mag_c, phase


def model_input(waves: np.ndarray, cfg: dsp.StftConfig, dtype=None) -> tuple[Tensor, dsp.Spectrum]:
    """Batch ``[B, L]`` waveforms into the ``[B, 2, T, F]`` model input."""
    spec = dsp.stft(np.atleast_2d(waves), cfg)
    mag_c = dsp.compress_magnitude(spec.magnitude, cfg.compression_c)
    stacked = np.stack([mag_c, spec.phase], axis=1)
    return Tensor(stacked.astype(dtype or T.get_default_dtype())), spec


def enhance(wave: dsp.Waveform, model: ZipEnhancer, cfg: dsp.StftConfig = dsp.StftConfig()) -> dsp.Waveform:
    """Noisy waveform -> enhanced waveform of the same length."""
    dtype = model.parameters()[0].dtype
    with T.no_grad():
        y_in, _ = model_input(wave.samples, cfg, dtype)
        mag_c, phase = model(y_in)
    mag = dsp.decompress_magnitude(mag_c.data[0].astype(np.float64), cfg.compression_c)
    spec = dsp.Spectrum(mag, phase.data[0].astype(np.float64), cfg, len(wave))
    return dsp.Waveform(dsp.istft(spec).samples, wave.sample_rate)
