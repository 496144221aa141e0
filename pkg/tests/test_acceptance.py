"""Acceptance criteria, one test per criterion.

Each test appends a single PASS/FAIL line to the terminal summary.  The
training-based criteria (4, 5, 6) share one pretrained checkpoint and take
roughly 20 minutes together on one CPU core.
"""

import contextlib
import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from medbert import gradchecks
from medbert.baselines import Artifacts, train_skipgram
from medbert.cli import dispatch
from medbert.ehr import (
    MASK, PROLONGED_LOS_DAYS, PatientRecord, Visit, DiagnosisCode, build_vocabulary, derive_prolonged_los_label,
    encode_patient, make_patient, write_patients,
)
from medbert.evaluation import CONDITIONS, FinetuneConfig, compute_auc, run_ex1, run_finetune, run_size_sweep
from medbert.model import MedBert, MedBertConfig, collate
from medbert.pretrain import PretrainConfig, apply_masking, run_pretraining, train_model
from medbert.synth import SynthConfig, generate_cohort, split_cohort, subsample_training


@contextlib.contextmanager
def criterion(number, title):
    """Record one PASS/FAIL line for a criterion; ``detail`` is filled in by the body."""
    detail = {}
    start = time.perf_counter()
    try:
        yield detail
    except BaseException as exc:
        status, detail["error"] = "FAIL", str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        raise
    else:
        status = "PASS"
    finally:
        extra = ", ".join(f"{k}={v}" for k, v in detail.items())
        line = f"criterion {number} {status}: {title} ({extra}; {time.perf_counter() - start:.1f}s)"
        ACCEPTANCE_LINES.append(line)
        print(line)


# -- shared training artifacts -------------------------------------------------

PRETRAIN_STEPS = 8000


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    """Med-BERT pretrained on 20,000 unlabeled synthetic patients."""
    d = tmp_path_factory.mktemp("acceptance")
    cohort = generate_cohort(SynthConfig(n_patients=20_000, seed=100))
    write_patients(d / "pretrain.jsonl", cohort)
    vocab = build_vocabulary(cohort)
    report = run_pretraining(d / "pretrain.jsonl", PretrainConfig(total_steps=PRETRAIN_STEPS, eval_every=1000),
                             d / "pt", MedBertConfig(len(vocab)), vocab=vocab)
    return Artifacts(vocab, med_bert_path=report.model_path)


@pytest.fixture(scope="module")
def finetune_cohort():
    # same world as the pretraining cohort, disjoint patients
    return generate_cohort(SynthConfig(n_patients=20_000, seed=200))


# -- criteria ------------------------------------------------------------------

def test_criterion_1_gradients():
    with criterion(1, "grad_check < 1e-4 for Med-BERT micro, GRU, Bi-GRU, RETAIN, skip-gram") as d:
        start = time.perf_counter()
        reports = gradchecks.run_checks("all", tolerance=1e-4)
        elapsed = time.perf_counter() - start
        worst = {name: r.worst for name, r in reports.items()}
        d.update({name: f"{w:.1e}" for name, w in worst.items()})
        assert set(worst) == {"med_bert", "gru", "bigru", "retain", "skipgram"}
        assert all(w < 1e-4 for w in worst.values()), worst
        assert elapsed < 300


def test_criterion_2_masking():
    with criterion(2, "masking branches 80/10/10 with one masked position") as d:
        rng = np.random.default_rng(20)
        cohort = generate_cohort(SynthConfig(n_patients=500, vocab_size=200, n_clusters=5, seed=2))
        vocab = build_vocabulary(cohort)
        inputs = [encode_patient(p, vocab, 128) for p in cohort]
        branches = []
        for trial in range(10_000):
            mi = inputs[trial % len(inputs)]
            ex = apply_masking(mi, rng, len(vocab))
            changed = np.flatnonzero(ex.input.code_ids != mi.code_ids)
            assert 0 <= ex.masked_position < mi.length
            assert ex.original_code_id == mi.code_ids[ex.masked_position]
            assert set(changed) <= {ex.masked_position}
            if ex.branch == "mask":
                assert changed.tolist() == [ex.masked_position]
            branches.append(ex.branch)
        branches = np.array(branches)
        freq = {b: float(np.mean(branches == b)) for b in ("mask", "random", "keep")}
        d.update({b: f"{f:.4f}" for b, f in freq.items()})
        assert 0.78 <= freq["mask"] <= 0.82
        assert 0.08 <= freq["random"] <= 0.12
        assert 0.08 <= freq["keep"] <= 0.12


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_criterion_3_auc():
    with criterion(3, "compute_auc equals pair counting on 1000 instances") as d:
        rng = np.random.default_rng(30)
        checked = 0
        while checked < 1000:
            n = int(rng.integers(2, 51))
            labels = rng.random(n) < rng.uniform(0.1, 0.9)
            if labels.all() or not labels.any():
                continue
            # coarse integer scores half the time so ties are common
            scores = rng.integers(0, 6, n).astype(float) if checked % 2 else rng.normal(size=n)
            auc = compute_auc(scores, labels)
            assert auc == brute_auc(scores, labels)
            assert auc + compute_auc(scores, ~labels) == 1.0
            assert compute_auc(np.exp(scores), labels) == auc
            assert compute_auc(2.5 * scores + 1.0, labels) == auc
            checked += 1
        d["instances"] = checked


def all_position_eval(model, inputs):
    """Mask each position in turn; mean cross-entropy and argmax accuracy."""
    losses, hits = [], []
    for mi in inputs:
        for pos in range(mi.length):
            codes = mi.code_ids.copy()
            codes[pos] = MASK
            hidden = model.encode(collate([mi.with_codes(codes)])).hidden_states
            logits = model.masked_lm_logits(hidden, [pos]).data[0].astype(np.float64)
            top = logits.max()
            losses.append(top + np.log(np.exp(logits - top).sum()) - logits[mi.code_ids[pos]])
            hits.append(logits.argmax() == mi.code_ids[pos])
    return float(np.mean(losses)), float(np.mean(hits))


def test_criterion_4_overfit():
    with criterion(4, "16-patient overfit: masked-LM loss < 0.1, accuracy >= 95%") as d:
        cohort = generate_cohort(SynthConfig(n_patients=16, seed=4))
        vocab = build_vocabulary(cohort)
        inputs = [encode_patient(p, vocab, 128) for p in cohort]
        model = MedBert(MedBertConfig(len(vocab), dropout_rate=0.0), seed=0)
        train_model(model, inputs, [], PretrainConfig(batch_size=16, total_steps=2000, eval_every=500))
        loss, acc = all_position_eval(model, inputs)
        d.update(loss=f"{loss:.4f}", accuracy=f"{acc:.3f}")
        assert loss < 0.1 and acc >= 0.95


def test_criterion_5_planted_signal(pretrained, finetune_cohort):
    with criterion(5, "Med-BERT_only test AUC > 0.80 at train size 5000") as d:
        parts = split_cohort(finetune_cohort, (0.7, 0.1, 0.2), 0)
        train = subsample_training(parts.train, 5000, 0)
        config = FinetuneConfig(base="med_bert_only", pretrained="med_bert")
        result = run_finetune(train, parts.valid, parts.test, config, pretrained)
        d["auc"] = f"{result.test_auc:.4f}"
        assert result.test_auc > 0.80


def test_criterion_6_transfer(pretrained, finetune_cohort):
    with criterion(6, "GRU+Med-BERT beats GRU by > 0.03 mean AUC at n=300, 500") as d:
        report = run_size_sweep(finetune_cohort, [300, 500], FinetuneConfig(), pretrained,
                                conditions=["GRU", "GRU+Med-BERT"], replicates=10)
        print(report.table())
        gaps = {}
        for size in (300, 500):
            gaps[size] = report.aucs("GRU+Med-BERT", size).mean() - report.aucs("GRU", size).mean()
            d[f"gap@{size}"] = f"{gaps[size]:.4f}"
        assert all(g > 0.03 for g in gaps.values()), gaps


def test_criterion_7_report_structure(tmp_path):
    with criterion(7, "ex1 has the 10 conditions x 10 replicates; sweep grid; exact 7:1:2 splits") as d:
        cohort = generate_cohort(SynthConfig(n_patients=400, vocab_size=100, n_clusters=5, seed=12,
                                             outcome_prevalence=0.3, risk_condition_rate=0.4))
        vocab = build_vocabulary(cohort)
        MedBert(MedBertConfig(len(vocab), max_seq_len=64, max_visits=64), seed=0).save(tmp_path / "m.ckpt")
        art = Artifacts(vocab, train_skipgram(cohort, vocab, dim=32, steps=30), str(tmp_path / "m.ckpt"))
        fast = FinetuneConfig(epochs=1, hidden_dim=8, early_stop_patience=1, max_seq_len=64)

        ex1 = run_ex1(cohort, fast, art, replicates=10)
        summary = ex1.summary()
        assert sorted(s["condition"] for s in summary) == sorted(CONDITIONS.values())
        assert len(summary) == 10
        assert all(s["n"] == 10 and np.isfinite(s["mean"]) and s["std"] >= 0 for s in summary)
        d["ex1_rows"] = len(ex1.rows)

        sizes = [40, 80, 120]
        labels = ["GRU", "RETAIN+t-W2V", "GRU+Med-BERT"]
        sweep = run_size_sweep(cohort, sizes, fast, art, labels, replicates=2)
        grid = {(s["size"], s["condition"]) for s in sweep.summary()}
        assert grid == {(n, c) for n in sizes for c in labels}
        d["sweep_cells"] = len(grid)

        for n in (10, 100, 1000, 20_000):
            people = [make_patient(f"p{i}", [["A"]]) for i in range(n)]
            parts = split_cohort(people, (0.7, 0.1, 0.2), 0)
            assert tuple(map(len, parts)) == (n * 7 // 10, n // 10, n * 2 // 10)


def test_criterion_8_model_invariants(tmp_path):
    with criterion(8, "attention rows, padding, permutation, bitwise pipeline determinism") as d:
        cohort = generate_cohort(SynthConfig(n_patients=50, vocab_size=60, n_clusters=3, seed=8))
        vocab = build_vocabulary(cohort)
        inputs = [encode_patient(p, vocab, 64) for p in cohort[:12]]
        model = MedBert(MedBertConfig(len(vocab), max_seq_len=64, max_visits=64, init_std=0.2), seed=1,
                        dtype=np.float64)

        out = model.encode(collate(inputs))
        lengths = np.array([mi.length for mi in inputs])
        for probs in out.attention_maps:
            for b, n in enumerate(lengths):
                np.testing.assert_allclose(probs[b, :, :n].sum(-1), 1.0, atol=1e-6)
                assert np.all(probs[b, :, :n, n:] == 0)
        d["attention"] = "ok"

        worst_pad = 0.0
        for mi in inputs:
            alone = model.encode(collate([mi])).hidden_states.data[0]
            padded = model.encode(collate([mi], pad_to=mi.length + 9)).hidden_states.data[0, :mi.length]
            worst_pad = max(worst_pad, float(np.abs(alone - padded).max()))
        assert worst_pad <= 1e-5
        d["padding"] = f"{worst_pad:.1e}"

        nodrop = MedBert(MedBertConfig(len(vocab), dropout_rate=0.0, max_seq_len=64, max_visits=64, init_std=0.2),
                         seed=2, dtype=np.float64)
        nodrop["emb.serial"].data[:] = 0
        rng = np.random.default_rng(8)
        worst_perm = 0.0
        for mi in inputs:
            codes = mi.code_ids.copy()
            for v in np.unique(mi.visit_ids):
                idx = np.flatnonzero(mi.visit_ids == v)
                codes[idx] = codes[rng.permutation(idx)]
            a = nodrop.pooled_logit(nodrop.encode(collate([mi])).hidden_states, [mi.length]).item()
            b = nodrop.pooled_logit(nodrop.encode(collate([mi.with_codes(codes)])).hidden_states, [mi.length]).item()
            worst_perm = max(worst_perm, abs(a - b))
        assert worst_perm <= 1e-5
        d["permutation"] = f"{worst_perm:.1e}"

        manifests = [run_pipeline(tmp_path / name) for name in ("a", "b")]
        assert manifests[0] == manifests[1]
        d["pipeline_artifacts"] = len(manifests[0])


def run_pipeline(root):
    """synth -> vocab -> pretrain -> finetune through the CLI; returns every checksum."""
    cohort, vocab, pt, ft = root / "c.jsonl", root / "vocab.txt", root / "pt", root / "ft"
    steps = [
        ["synth", "--n", "300", "--seed", "5", "--vocab-size", "80", "--n-clusters", "4", "--out", cohort],
        ["vocab", "--cohort", cohort, "--out", vocab],
        ["pretrain", "--cohort", cohort, "--vocab", vocab, "--out-dir", pt, "--total-steps", "30",
         "--eval-every", "10", "--checkpoint-every", "15", "--max-seq-len", "64", "--max-visits", "64"],
        ["finetune", "--cohort", cohort, "--vocab", vocab, "--med-bert-checkpoint", pt / "model.ckpt",
         "--condition", "GRU+Med-BERT", "--epochs", "2", "--out-dir", ft],
    ]
    for argv in steps:
        assert dispatch([str(a) for a in argv] + ["--quiet"]) == 0
    checksums = {}
    for manifest in sorted(root.rglob("*manifest.json")):
        for name, digest in json.loads(manifest.read_text())["artifacts"].items():
            if name != "result.json":  # records wall-clock seconds
                checksums[str(manifest.parent.relative_to(root) / name)] = digest
    return checksums


def random_patient(rng, i):
    n_visits = int(rng.integers(1, 8))
    los = [None if rng.random() < 0.1 else int(rng.integers(0, 10)) for _ in range(n_visits)]
    visits = tuple(Visit((DiagnosisCode(f"C{j}"),), los[j], j + 1) for j in range(n_visits))
    return PatientRecord(f"p{i}", visits, None), los


def test_criterion_9_prolonged_los():
    with criterion(9, "prolonged LOS boundaries and max-over-visits equivalence") as d:
        assert PROLONGED_LOS_DAYS == 7
        for days in range(0, 31):
            assert derive_prolonged_los_label(make_patient("p", [["A"]], [days])) is (days >= 8)
        assert derive_prolonged_los_label(make_patient("p", [["A"], ["B"]], [7, 7])) is False
        assert derive_prolonged_los_label(make_patient("p", [["A"], ["B"]], [7, 8])) is True
        rng = np.random.default_rng(9)
        positives = 0
        for i in range(10_000):
            patient, los = random_patient(rng, i)
            oracle = max(x or 0 for x in los) > 7
            assert derive_prolonged_los_label(patient) is oracle
            assert patient.prolonged_los_label is oracle
            positives += oracle
        d["patients"] = 10_000
        d["positive"] = positives
