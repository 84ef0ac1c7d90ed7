# %% [markdown]
# # From waveform to model input and back
#
# A 2 s synthetic utterance goes through the analysis STFT, power-law
# compression and the inverse transform.

# %%
import numpy as np

from zipenhancer import dsp
from zipenhancer.train import make_synth_pair

pair = make_synth_pair(seed=3, snr_db=5.0, duration_s=2.0)
cfg = dsp.StftConfig()  # 400-point FFT, 25 ms Hann window, 100-sample hop
spec = dsp.stft(pair.noisy.samples, cfg)
print("frames x bins:", spec.magnitude.shape)

# %%
back = dsp.istft(spec)
print("reconstruction error:", np.max(np.abs(back.samples - pair.noisy.samples)))

# %% [markdown]
# Compression with c = 0.3 lifts quiet bins so the network sees a flatter
# dynamic range. Decompression undoes it exactly.

# %%
comp = dsp.compress_magnitude(spec.magnitude, cfg.compression_c)
print("raw range    %.2e .. %.2e" % (spec.magnitude.min(), spec.magnitude.max()))
print("compressed   %.2e .. %.2e" % (comp.min(), comp.max()))
print("round trip", np.max(np.abs(dsp.decompress_magnitude(comp, cfg.compression_c) - spec.magnitude)))

# %%
x = dsp.stack_input(spec)
print("model input", x.shape, "(channel 0 magnitude, channel 1 phase)")
