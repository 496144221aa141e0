"""A tour of the synthetic EHR cohort: what the records look like and what signal is planted."""

# %%
import numpy as np

from medbert.ehr import build_vocabulary, encode_patient
from medbert.synth import SynthConfig, build_world, generate_cohort, risk_code_count, split_cohort

config = SynthConfig(n_patients=5000, seed=1)
cohort = generate_cohort(config)
world = build_world(config)

# %% One patient: visits are bags of ICD-style codes with a length of stay.
p = cohort[0]
for v in p.visits:
    print(v.visit_index, v.los_days, [c.code for c in v.codes])
print("prolonged stay:", p.prolonged_los_label, "outcome:", p.outcome_label)

# %% Cohort statistics
visits = np.array([len(p.visits) for p in cohort])
codes = np.array([p.n_codes for p in cohort])
labels = np.array([p.outcome_label for p in cohort])
print(f"mean visits {visits.mean():.2f}, mean codes {codes.mean():.1f}, prevalence {labels.mean():.3f}")
print(f"any visit > 7 days: {np.mean([p.prolonged_los_label for p in cohort]):.3f}")

# %% The outcome rises with the number of planted risk codes a patient carries.
k = np.array([risk_code_count(p, world) for p in cohort])
for n in range(4):
    sel = np.minimum(k, 3) == n
    print(f"risk codes {n}{'+' if n == 3 else ' '}: {sel.sum():5d} patients, outcome rate {labels[sel].mean():.3f}")

# %% Model inputs: three aligned id streams, truncated to the most recent visits.
vocab = build_vocabulary(cohort)
mi = encode_patient(p, vocab, max_seq_len=16)
print("codes ", mi.code_ids)
print("serial", mi.serialization_ids)
print("visits", mi.visit_ids)

# %% 7:1:2 split
parts = split_cohort(cohort, (0.7, 0.1, 0.2), seed=0)
print([len(x) for x in parts])
