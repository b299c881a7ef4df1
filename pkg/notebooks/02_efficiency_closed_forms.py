# %% [markdown]
# # When does the cluster-level analysis lose efficiency?
#
# Under a correctly specified random-intercept model the mixed-model ANCOVA has
# asymptotic variance 4 / E[N / (sigma2 + N tau2)], and the cluster-level
# ANCOVA 4 E[(sigma2 + N tau2) / N]. Their ratio is at least one, with equality
# only for constant cluster sizes.

# %%
from crt_ancova.variance import (
    cluster_level_true_variance, holder_ratio, jensen_gap, mixed_true_variance, uniform_sizes,
)

sizes = uniform_sizes(4, 12)
for tau2 in (0.0, 1.0, 5.0, 25.0):
    print(f"tau2={tau2:5.1f}  mixed {mixed_true_variance(25, tau2, sizes):7.3f}  "
          f"cluster {cluster_level_true_variance(25, tau2, sizes):7.3f}  "
          f"ratio {holder_ratio(25, tau2, sizes):.4f}  gap {jensen_gap(25, tau2, sizes):.5f}")

# %% [markdown]
# A wider size distribution makes the gap larger.

# %%
for lo, hi in ((8, 8), (6, 10), (4, 12), (2, 30)):
    print((lo, hi), round(holder_ratio(25, 1, uniform_sizes(lo, hi)), 4))

# %% [markdown]
# Intracluster correlation of the three simulation scenarios, by Monte Carlo
# and in closed form.

# %%
from crt_ancova.dgp import ScenarioConfig, analytic_icc, icc_estimate

for gamma in (False, True):
    for sc in (1, 2, 3):
        cfg = ScenarioConfig(sc, 1, add_gamma=gamma)
        est, se = icc_estimate(cfg, 50_000)
        print(f"scenario {sc} gamma={gamma!s:5s} icc {est:.3f} (se {se:.3f}) exact {analytic_icc(cfg):.3f}")
