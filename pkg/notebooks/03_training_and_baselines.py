# %% [markdown]
# # Training and comparing models
#
# The same loop trains the network and the two factorization baselines
# (Tucker and CP). Each epoch shuffles the training cells, takes one optimizer
# step per minibatch, and records the training objective and validation
# errors. The parameters with the best validation RMSE are returned.

# %%
import numpy as np

from hds_impute import baselines, data, training

obs = data.preprocess_sigmoid(data.synthesize(
    data.SynthSpec(dims=(24, 24, 90), rank=3, density=0.2, seed=1)))
parts = data.split(obs, (7, 1, 2), seed=1)

params = baselines.init_tucker(4, obs.dims, seed=1)
config = training.TrainConfig(model="tucker", optimizer="adam", lr=0.01, batch_size=128,
                              epochs=1000, lam=0.0, seed=1, val_patience=150)
best, log = training.train(params, parts, config)
print(f"{len(log)} epochs, stopped by {log.stop_reason}, best epoch {log.best_epoch}")
print(training.evaluate(best, parts.test).table())

# %% [markdown]
# The objective curve shows the typical shape for a small positive
# initialization: a long flat stretch while the factors are still tiny, then
# a quick drop once they grow.

# %%
objectives = np.array(log.objectives)
for epoch in (1, 50, 100, 200, 300, len(objectives)):
    print(f"epoch {epoch:>4}  objective {objectives[epoch - 1]:.5f}")

# %% [markdown]
# ## Robust loss
#
# The baselines can also be trained with a Cauchy loss, which caps the pull of
# any single large residual. Here a few corrupted training cells barely move
# the Cauchy fit.

# %%
values = parts.train.values.copy()
rng = np.random.default_rng(0)
bad = rng.choice(len(values), size=len(values) // 50, replace=False)
values[bad] = rng.uniform(0, 1, size=bad.size)
corrupted = data.SplitSet(parts.train.with_values(values), parts.validation, parts.test, parts.seed)
for loss in ("squared", "cauchy"):
    cfg = training.TrainConfig(model="tucker", optimizer="adam", lr=0.01, batch_size=128, epochs=1000,
                               lam=0.0, seed=1, loss=loss, cauchy_scale=0.05, val_patience=150)
    fit, _ = training.train(baselines.init_tucker(4, obs.dims, seed=1), corrupted, cfg)
    print(f"{loss:<8} test RMSE {training.evaluate(fit, parts.test).rmse:.4f}")

# %% [markdown]
# ## Checkpoints
#
# Checkpoints are JSON. Floats are written with their shortest round-trip
# representation, so a reloaded model reproduces its evaluation bit for bit.

# %%
import tempfile
from pathlib import Path

path = Path(tempfile.mkdtemp()) / "tucker.json"
training.save_checkpoint(best, path)
again = training.load_checkpoint(path)
print(training.evaluate(again, parts.test) == training.evaluate(best, parts.test))
