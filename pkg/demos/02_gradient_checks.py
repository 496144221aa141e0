"""Every model's backward pass, compared against central finite differences."""

# %%
from medbert import gradchecks

for name, report in gradchecks.run_checks("all", tolerance=1e-4, max_entries=40).items():
    print(f"{name:9s} worst relative error {report.worst:.2e}  passed={report.passed}")

# %% Per-parameter detail for the micro Med-BERT
report = gradchecks.med_bert_check(max_entries=10)
for param, err in sorted(report.max_rel_error.items(), key=lambda kv: -kv[1])[:8]:
    print(f"{param:28s} {err:.2e}")
