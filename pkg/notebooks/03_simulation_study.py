# %% [markdown]
# # A small simulation study
#
# Runs the three estimators on shared replications and prints the metrics
# table. The full-size version (10,000 replications) lives in the acceptance
# tests; here 300 replications keep the run short.

# %%
from crt_ancova import ScenarioConfig, compare_ml_reml, run_study
from crt_ancova.dataio import format_report
from crt_ancova.simkit import DEFAULT_ROSTER, EstimatorSpec

table = run_study(ScenarioConfig(2, 200, master_seed=3), DEFAULT_ROSTER, n_reps=300)
print(format_report(table))

# %% [markdown]
# Extra estimators can share the same replications, for example the sandwich
# variance for the mixed-model ANCOVA.

# %%
roster = DEFAULT_ROSTER + (EstimatorSpec("MixedAncova", variance="Sandwich", label="MixedAncova sandwich"),)
print(format_report(run_study(ScenarioConfig(3, 20), roster, n_reps=300)))

# %% [markdown]
# ML versus REML with few clusters: REML's standard error is smaller than the
# df-inflated ML one, while the point estimates barely differ.

# %%
print(format_report(compare_ml_reml(ScenarioConfig(3, 20), n_reps=300)))
