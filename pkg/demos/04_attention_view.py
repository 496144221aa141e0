"""Attention maps for one patient, written as a self-contained HTML page."""

# %%
import tempfile
from pathlib import Path

from medbert.ehr import build_vocabulary, encode_patient
from medbert.model import MedBert, MedBertConfig
from medbert.pretrain import PretrainConfig, train_model
from medbert.synth import SynthConfig, generate_cohort
from medbert.viz import count_edges, extract_attention, locality_csv, render_attention, summarize_locality

cohort = generate_cohort(SynthConfig(n_patients=2000, vocab_size=300, n_clusters=10, seed=5))
vocab = build_vocabulary(cohort)
model = MedBert(MedBertConfig(len(vocab)), seed=0)
train_model(model, [encode_patient(p, vocab, 128) for p in cohort], [], PretrainConfig(total_steps=500))

# %%
patient = max(cohort[:50], key=lambda p: len(p.visits))
record = extract_attention(model, patient, vocab)
print(record.code_labels)
print("visit starts:", record.visit_boundaries)

# %% How much attention stays inside the query's own visit, per layer and head.
print(locality_csv(summarize_locality(record)))

# %%
out = Path(tempfile.mkdtemp()) / "attention.html"
html = render_attention(record, layer=1, head="all", threshold=0.05)
out.write_text(html)
print(f"{count_edges(html)} edges above 0.05 -> {out}")
