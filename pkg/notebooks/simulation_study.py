# %% [markdown]
# # Simulation study
#
# Curve MISE, variance-component MSE, the structured vs per-cluster loss ratio,
# and the calibration of the constancy test and simultaneous bands.
# Run as a script (`python3 notebooks/simulation_study.py --reps 20`) or cell
# by cell in an editor that understands `# %%` markers.

# %%
import argparse

import numpy as np

from vcmm import FitConfig, SimConfig, calibration_study, mise_study, rmise_study

parser = argparse.ArgumentParser()
parser.add_argument("--reps", type=int, default=20)
parser.add_argument("--seed", type=int, default=1)
args, _ = parser.parse_known_args()

sim = SimConfig()  # p=3, q=2, m=100, Sigma=0.25 I, sigma=0.5
cfg = FitConfig(h=0.15)

# %% [markdown]
# ## Curve and variance-component accuracy

# %%
mise = mise_study(sim, cfg, reps=args.reps, seed=args.seed)
for name, value in zip(mise.names, mise.mise):
    print(f"MISE {name:>9s}  {value:.4f}")
for name, value in mise.varcomp_mse.items():
    print(f"MSE  {name:>9s}  {value:.5f}")

# %% [markdown]
# ## Pooling across clusters
#
# Fixed cluster size 50 and no random effect. A ratio well below one means the
# cluster-level structure pays off against fitting each cluster on its own.

# %%
bws = (0.1, 0.15, 0.2, 0.25, 0.3)
rm = rmise_study(sim, bws, reps=max(2, args.reps // 5), seed=args.seed)
for h, ra, rb in zip(bws, rm.rmise_a, rm.rmise_beta):
    print(f"h={h:<5} RMISE(a)={ra:.4f}  RMISE(beta)={rb:.4f}")

# %% [markdown]
# ## Test and band calibration
#
# The pilot bandwidth is set to the average sample size to the power -1/7.

# %%
n_bar = sim.m * 7.1292
cal_cfg = FitConfig(h=0.15, h_pilot=n_bar ** (-1 / 7))
alt = calibration_study(sim, cal_cfg, "alpha0_1", reps=args.reps, seed=args.seed)
null_sim = SimConfig(truth=sim.truth.with_constant("alpha0_1", 0.5))
null = calibration_study(null_sim, cal_cfg, "alpha0_1", reps=args.reps, seed=args.seed)
print(f"power {alt.reject_rate:.3f}   size {null.reject_rate:.3f}   "
      f"band coverage {alt.coverage:.3f}")
print("median p-value under the null:", np.median(null.p_values).round(3))
