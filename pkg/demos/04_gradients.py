# %% [markdown]
# # Checking the autodiff against finite differences
#
# A single Zipformer block in 64-bit. The bypass weights start exactly on
# their clamp boundary, where the loss has a kink, so they are nudged inside
# the interval before comparing.

# %%
import numpy as np

from zipenhancer import tensors as T
from zipenhancer import zipblocks as Z
from zipenhancer.gradcheck import check_parameters
from zipenhancer.tensors import Tensor

rng = np.random.default_rng(0)
T.set_default_dtype("float64")
cfg = Z.ModelConfig(n_stacks=1, ratios=(1,), channels=8, heads=2, conv_kernel=5, pos_clip=8)
block = Z.ZipformerBlock(cfg, rng)
for name, p in block.named_parameters():
    if "bypass" in name:
        p.data = rng.uniform(0.91, 0.99, p.shape)

# %%
x = Tensor(rng.standard_normal((2, 6, 8)))
cot = Tensor(rng.standard_normal((2, 6, 8)))
rows = check_parameters(lambda: T.tensor_sum(block(x, 10) * cot), list(block.named_parameters()),
                        n_samples=60)
for err, name, idx, a, n in rows[:5]:
    print(f"{err:.1e}  {name}{list(idx)}  analytic {a:+.6f}  numeric {n:+.6f}")

# %% [markdown]
# The same block computes its attention weights once per call, however many
# mixing modules consume them.

# %%
block.attn_weights.calls = 0
block(x, 10)
print("attention weight computations per forward:", block.attn_weights.calls)
