# %% [markdown]
# # A few training steps on the tiny preset
#
# This is a plumbing demo rather than a quality demo: 30 steps are far too
# few to enhance anything. It shows the loss components, the learning-rate
# schedule and the enhance/evaluate path end to end.

# %%
import numpy as np

from zipenhancer import dsp
from zipenhancer import tensors as T
from zipenhancer.codec import enhance
from zipenhancer.config import TINY_STFT, preset
from zipenhancer.metrics import si_sdr, ssnr
from zipenhancer.train import EdenConfig, PairedData, new_state, train_loop

data = PairedData.synthetic(4, seed=0, duration_s=1.0, snr_range=(0.0, 10.0))
eden = EdenConfig(alpha_base=0.02, t_warmup=200)

# %%
with T.precision("float32"):
    state = new_state(preset("S-tiny"), seed=0)
    rows = train_loop(state, data, 30, TINY_STFT, eden=eden, batch_size=2, segment_seconds=0.125)

for r in rows[::10]:
    print(f"step {r['step']:3d} lr {r['lr']:.4f} total {r['loss_total']:.3f} "
          f"mag {r['loss_mag']:.4f} pha {r['loss_pha']:.3f} time {r['loss_time']:.4f}")

# %% [markdown]
# Enhancement keeps the input length. The metrics compare against the clean
# reference; at this stage the model is still close to its initialisation.

# %%
noisy, clean = data.noisy[0], data.clean[0]
out = enhance(dsp.Waveform(noisy), state.model, TINY_STFT)
assert len(out) == len(noisy)
print(f"noisy    SI-SDR {si_sdr(noisy, clean):6.2f} dB  SSNR {ssnr(noisy, clean):6.2f} dB")
print(f"enhanced SI-SDR {si_sdr(out.samples, clean):6.2f} dB  SSNR {ssnr(out.samples, clean):6.2f} dB")
