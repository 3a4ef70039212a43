# %% [markdown]
# # Inside the network
#
# For one cell the network looks up three embedding rows, forms their outer
# product (a rank x rank x rank "interaction" tensor), standardizes it, runs two
# valid 3D convolutions and a small MLP, and ends in a sigmoid.

# %%
import numpy as np

from hds_impute import gradcheck, ntcn, tensor_ops as ops

config = ntcn.NtcnConfig(rank=10, c1=8, c2=16, k1=6, k2=5, h1=32)
params = ntcn.init(config, dims=(24, 24, 90))
print("parameters:", params.n_parameters())
for name, value in params.tensors.items():
    print(f"  {name:<6} {value.shape}")

# %% [markdown]
# With rank 10, a 6^3 kernel leaves a 5^3 map and a 5^3 kernel leaves a
# single voxel, so the MLP sees one value per second-layer channel.

# %%
trace = ntcn.forward(params, [0, 5, 23], [1, 1, 2], [0, 40, 89])
print("interaction", trace.x.shape, "-> conv1", trace.z1.shape, "-> conv2", trace.z2.shape)
print("predictions", trace.y_hat.round(4))

# %% [markdown]
# Standardization makes the network blind to the overall scale of the
# embeddings: the tiny U(0, 0.004) initial embeddings give the same normalized
# input as embeddings a thousand times larger.

# %%
x = ops.outer3(params["A"][0], params["B"][1], params["C"][0])
z_small, _, _ = ops.standardize(x)
z_large, _, _ = ops.standardize(1000 * x)
print("max difference after standardizing:", np.abs(z_small - z_large).max())

# %% [markdown]
# ## Checking the backward pass
#
# Every gradient is written by hand, so each one is compared with central
# finite differences. The checker looks for a point where all ReLU layers are
# partly active; at a dead point every gradient would be zero and the check
# would prove nothing.

# %%
results = gradcheck.run_suite(tiny_seeds=range(3), rank10_seeds=range(1))
print(gradcheck.format_report(results))

# %% [markdown]
# Dropping the mean and standard deviation terms from the standardization
# backward is the classic mistake; it is far off the numerical gradient.

# %%
rng = np.random.default_rng(0)
x, g = rng.normal(size=(1, 3, 3, 3)), rng.normal(size=(1, 3, 3, 3))
_, mu, sd = ops.standardize(x)
exact = ops.standardize_backward(x, mu, sd, g)
numeric = gradcheck.numerical_grad(lambda: float(np.sum(ops.standardize(x)[0] * g)), x)
print("full rule  ", gradcheck.relative_error(exact, numeric))
print("naive rule ", gradcheck.relative_error(g / sd, numeric))
