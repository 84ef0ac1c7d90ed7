# %% [markdown]
# # Where the FLOPs go
#
# Every S-family preset has the same blocks and almost the same parameter
# count. They differ only in the down-sampling ratio of each stack, and that
# ratio decides how many time frames and frequency bins the attention sees.

# %%
from zipenhancer import complexity
from zipenhancer.config import S_FAMILY, preset, preset_stft

reports = [complexity.count_flops(preset(n), 2.0, preset_stft(n)) for n in S_FAMILY]
print(complexity.format_table(reports))

# %% [markdown]
# S2 never samples, so all four stacks run at full resolution. S halves the
# middle two stacks, which is enough to cut roughly a quarter of the cost.

# %%
s, s2 = reports[0], reports[1]
print(f"S / S2 = {s.total_flops / s2.total_flops:.3f}")
print(f"extra parameters in S: {s.total_params - s2.total_params}")

# %% [markdown]
# The per-module breakdown shows the time-axis attention shrinking in the
# down-sampled stacks.

# %%
for name in ("stack0.t_block", "stack1.t_block", "stack2.t_block", "stack3.t_block"):
    print(f"{name:16s} S {s.flops[name] / 1e9:7.2f} G   S2 {s2.flops[name] / 1e9:7.2f} G")
