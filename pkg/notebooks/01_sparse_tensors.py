# %% [markdown]
# # Sparse three-mode tensors
#
# Observations are `(s, p, t, y)` quadruples: station, indicator, time slice
# and a value. Only a small fraction of the cells is ever observed, so the
# package keeps them in coordinate form and never materializes the dense
# tensor unless asked to.

# %%
import numpy as np

from hds_impute import data

spec = data.SynthSpec(dims=(24, 24, 90), rank=3, density=0.1, noise_std=0.02,
                      nonlinearity="squash", seed=7)
res = data.synthesize_with_truth(spec)
obs = res.observed
print(len(obs), "of", obs.n_cells, "cells observed")

# %% [markdown]
# The ground truth is a random Tucker tensor: a 3x3x3 core multiplied by a
# factor matrix along each mode, squashed through tanh. Noise is added to the
# observed cells only, so `res.truth` stays an exact oracle for imputation.

# %%
print("core shape", res.core.shape, "factor shapes", [f.shape for f in res.factors])
print("truth range", res.truth.min().round(3), res.truth.max().round(3))
noise = obs.values - res.truth[obs.s, obs.p, obs.t]
print("empirical noise std", noise.std().round(4))

# %% [markdown]
# ## COO files
#
# A header line with the three mode sizes, then one `s,p,t,y` line per cell.
# Values are written with the shortest digit string that parses back to the
# same double, so a save/load cycle is lossless.

# %%
import tempfile
from pathlib import Path

path = Path(tempfile.mkdtemp()) / "demo.coo"
data.save_coo(obs, path, header_comment="synthetic demo tensor")
print(path.read_text().splitlines()[:4])
back = data.load_coo(path)
print("identical after roundtrip:", np.array_equal(back.values, obs.values))

# %% [markdown]
# ## Preprocessing and splitting
#
# Values are mapped into (0, 1) with a sigmoid (min-max scaling is the
# alternative) and then partitioned into training, validation and test parts.
# The default ratio 1:2:7 leaves only a tenth of the observations for training.

# %%
z = data.preprocess_sigmoid(obs)
parts = data.split(z, (1, 2, 7), seed=0)
for name in ("train", "validation", "test"):
    print(f"{name:<10} {len(parts.part(name)):>5}")

# Largest-remainder rounding keeps the part sizes as close to the ratio as possible.
print(data.split_sizes(10, (1, 2, 7)), data.split_sizes(11, (1, 2, 7)))
