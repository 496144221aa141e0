"""Fine-tuning driver and the comparison / training-size experiments.

Report files written by :meth:`ExperimentReport.write` (``<name>`` is the
report name, ``ex1`` or ``sweep`` from the CLI):

* ``<name>_replicates.csv``: condition, size, replicate, seed, auc, seconds
* ``<name>_summary.csv``: size, condition, mean, std, n, seconds
* ``<name>_long.csv``: condition, size, stat, value (mean / std / min / max)
* ``<name>_report.json``: everything above in one document
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import NamedTuple, Sequence

import numpy as np

from . import autograd as ag
from .baselines import Artifacts, SequenceClassifier
from .ehr import encode_patient
from .errors import ConfigError, DegenerateLabels, DegenerateSample, RangeError
from .metrics import compute_auc
from .model import collate
from .pretrain import epoch_batches
from .synth import split_cohort, subsample_training

log = logging.getLogger(__name__)

__all__ = [
    "CONDITIONS", "ExperimentReport", "FinetuneConfig", "FinetuneResult", "ReplicateRow",
    "compute_auc", "condition_label", "run_ex1", "run_finetune", "run_size_sweep",
    "stratified_holdout",
]

_FINETUNE_KEY = 21
_SWEEP_KEY = 22

# (base, pretrained input) -> row label of the comparison table
CONDITIONS = {
    ("gru", "none"): "GRU",
    ("gru", "skipgram"): "GRU+t-W2V",
    ("gru", "med_bert"): "GRU+Med-BERT",
    ("bigru", "none"): "Bi-GRU",
    ("bigru", "skipgram"): "Bi-GRU+t-W2V",
    ("bigru", "med_bert"): "Bi-GRU+Med-BERT",
    ("retain", "none"): "RETAIN",
    ("retain", "skipgram"): "RETAIN+t-W2V",
    ("retain", "med_bert"): "RETAIN+Med-BERT",
    ("med_bert_only", "med_bert"): "Med-BERT_only (FFL)",
}
LABEL_TO_CONDITION = {v: k for k, v in CONDITIONS.items()}
_MODE = {"none": "one_hot_embed", "skipgram": "skipgram", "med_bert": "med_bert"}


def condition_label(base: str, pretrained: str) -> str:
    try:
        return CONDITIONS[(base, pretrained)]
    except KeyError:
        raise ConfigError("model_spec", f"no condition {base!r} x {pretrained!r}") from None


@dataclass(frozen=True)
class FinetuneConfig:
    base: str = "gru"  # gru | bigru | retain | med_bert_only
    pretrained: str = "none"  # none | skipgram | med_bert
    train_size: int = 0  # 0 means the whole training split
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 32
    early_stop_patience: int = 5
    seed: int = 0
    hidden_dim: int = 32
    embed_dim: int = 32
    freeze_encoder: bool = False
    max_seq_len: int = 128

    def __post_init__(self):
        condition_label(self.base, self.pretrained)
        for name in ("epochs", "batch_size", "early_stop_patience", "hidden_dim", "embed_dim", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0 or self.weight_decay < 0 or self.train_size < 0:
            raise ConfigError("lr", "lr must be > 0, weight_decay and train_size >= 0")

    @property
    def label(self) -> str:
        return condition_label(self.base, self.pretrained)

    @classmethod
    def for_condition(cls, label: str, **kw) -> "FinetuneConfig":
        if label not in LABEL_TO_CONDITION:
            raise ConfigError("conditions", f"unknown condition {label!r}")
        base, pretrained = LABEL_TO_CONDITION[label]
        return cls(base=base, pretrained=pretrained, **kw)


class FinetuneResult(NamedTuple):
    test_auc: float
    valid_auc: float
    best_epoch: int
    epochs_run: int
    state: dict  # best-validation parameter snapshot
    seconds: float


def _check_labels(name, inputs):
    labels = [mi.outcome_label for mi in inputs]
    if any(label is None for label in labels):
        raise DegenerateLabels(f"{name} split has patients without an outcome label")
    if all(labels) or not any(labels):
        raise DegenerateLabels(f"{name} split needs both outcome classes")


def run_finetune(train, valid, test, config: FinetuneConfig, artifacts: Artifacts,
                 checkpoint_path=None) -> FinetuneResult:
    """Train on ``train`` with binary cross-entropy, keep the parameters with
    the best validation AUC (stopping after ``early_stop_patience`` epochs
    without improvement) and report the test AUC of that snapshot."""
    t0 = time.perf_counter()
    clf = SequenceClassifier(config.base, _MODE[config.pretrained], artifacts, config.hidden_dim,
                             config.embed_dim, config.seed, config.freeze_encoder)
    max_len = clf.max_seq_len or config.max_seq_len
    enc = [[encode_patient(p, artifacts.vocab, max_len) for p in part] for part in (train, valid, test)]
    for name, part in zip(("train", "valid", "test"), enc):
        _check_labels(name, part)
    tr, va, te = enc
    lengths = np.array([mi.length for mi in tr])
    va_labels = np.array([mi.outcome_label for mi in va])

    best_auc, best_epoch, best_state, stale, epoch = -1.0, -1, None, 0, 0
    for epoch in range(config.epochs):
        for step, idx in enumerate(epoch_batches(lengths, config.batch_size, config.seed, epoch)):
            rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(_FINETUNE_KEY, epoch, step)))
            ag.backward(clf.loss(collate([tr[i] for i in idx]), train=True, rng=rng))
            ag.adamw_step(clf.store, config.lr, weight_decay=config.weight_decay)
        auc = compute_auc(clf.predict(va), va_labels)
        if auc > best_auc:
            best_auc, best_epoch, best_state, stale = auc, epoch, clf.store.values(), 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break
    clf.store.load_values(best_state)
    test_auc = compute_auc(clf.predict(te), [mi.outcome_label for mi in te])
    if checkpoint_path is not None:
        meta = {"finetune_config": asdict(config), "valid_auc": best_auc, "test_auc": test_auc,
                "best_epoch": best_epoch}
        if clf.bert is not None:
            meta.update(config=clf.bert.config.to_dict(), heads=list(clf.bert.heads), step=clf.store.t)
        ag.save_checkpoint(checkpoint_path, best_state, "finetuned", meta)
    return FinetuneResult(test_auc, best_auc, best_epoch, epoch + 1, best_state, time.perf_counter() - t0)


# -- reports ------------------------------------------------------------------

class ReplicateRow(NamedTuple):
    condition: str
    size: int
    replicate: int
    seed: int
    auc: float
    seconds: float


_ROW_TYPES = {"condition": str, "size": int, "replicate": int, "seed": int, "auc": float, "seconds": float}
SUMMARY_COLUMNS = ("size", "condition", "mean", "std", "n", "seconds")


def _std(x):
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


@dataclass
class ExperimentReport:
    name: str
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def conditions(self) -> list:
        seen = []
        for r in self.rows:
            if r.condition not in seen:
                seen.append(r.condition)
        return seen

    @property
    def sizes(self) -> list:
        return sorted({r.size for r in self.rows})

    def aucs(self, condition: str, size: int | None = None) -> np.ndarray:
        return np.array([r.auc for r in self.rows
                         if r.condition == condition and (size is None or r.size == size)])

    def summary(self) -> list:
        """One dict per (size, condition): mean and sample std of replicate AUCs."""
        out = []
        for size in self.sizes:
            for cond in self.conditions:
                rs = [r for r in self.rows if r.condition == cond and r.size == size]
                if not rs:
                    continue
                a = [r.auc for r in rs]
                out.append({"size": size, "condition": cond, "mean": float(np.mean(a)), "std": _std(a),
                            "n": len(rs), "seconds": float(sum(r.seconds for r in rs))})
        return out

    def table(self) -> str:
        """Plain-text grid: one line per condition, ``mean +/- std`` per size."""
        sizes = self.sizes
        width = max(len(c) for c in self.conditions) if self.rows else 10
        lines = [" " * width + "".join(f"  {('n=' + str(s)):>16}" for s in sizes)]
        summ = {(s["condition"], s["size"]): s for s in self.summary()}
        for cond in self.conditions:
            cells = []
            for size in sizes:
                s = summ.get((cond, size))
                cells.append(f"  {s['mean'] * 100:7.2f} +/- {s['std'] * 100:4.2f}" if s else " " * 18)
            lines.append(cond.ljust(width) + "".join(cells))
        return "\n".join(lines)

    # serialisation

    def replicates_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ReplicateRow._fields)
        for r in self.rows:
            w.writerow([r.condition, r.size, r.replicate, r.seed, repr(r.auc), repr(r.seconds)])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for s in self.summary():
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in s.items()})
        return buf.getvalue()

    def long_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("condition", "size", "stat", "value"))
        for s in self.summary():
            a = self.aucs(s["condition"], s["size"])
            for stat, value in (("mean", s["mean"]), ("std", s["std"]), ("min", a.min()), ("max", a.max())):
                w.writerow((s["condition"], s["size"], stat, repr(float(value))))
        return buf.getvalue()

    @classmethod
    def from_replicates_csv(cls, text: str, name: str = "report") -> "ExperimentReport":
        rows = [ReplicateRow(**{k: _ROW_TYPES[k](v) for k, v in rec.items()})
                for rec in csv.DictReader(io.StringIO(text))]
        return cls(name, rows)

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "meta": self.meta,
                           "rows": [r._asdict() for r in self.rows], "summary": self.summary()},
                          indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        d = json.loads(text)
        return cls(d["name"], [ReplicateRow(**r) for r in d["rows"]], d.get("meta", {}))

    def write(self, out_dir) -> dict:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for suffix, text in (("replicates.csv", self.replicates_csv()), ("summary.csv", self.summary_csv()),
                             ("long.csv", self.long_csv()), ("report.json", self.to_json())):
            p = out / f"{self.name}_{suffix}"
            p.write_text(text)
            paths[suffix] = str(p)
        return paths


# -- experiments --------------------------------------------------------------

def stratified_holdout(patients: Sequence, fraction: float, seed: int):
    """Split into (train, held-out) with ``floor(fraction * n_c)`` of each
    outcome class held out, but at least one per class."""
    rng = np.random.default_rng(seed)
    train, held = [], []
    for label in (True, False):
        members = [p for p in patients if bool(p.outcome_label) == label]
        if len(members) < 2:
            raise DegenerateSample(f"need two patients with outcome={label} to hold one out")
        k = max(1, int(np.floor(fraction * len(members) + 1e-9)))
        perm = rng.permutation(len(members))
        held.extend(members[i] for i in perm[:k])
        train.extend(members[i] for i in perm[k:])
    order = {p.patient_id: i for i, p in enumerate(patients)}

    def key(p):
        return order[p.patient_id]

    return sorted(train, key=key), sorted(held, key=key)


def _task(args):
    label, size, replicate, train, valid, test, config, artifacts = args
    res = run_finetune(train, valid, test, config, artifacts)
    log.info("%s size=%d rep=%d auc=%.4f (%.1fs)", label, size, replicate, res.test_auc, res.seconds)
    return ReplicateRow(label, size, replicate, config.seed, float(res.test_auc), float(res.seconds))


def _run_tasks(tasks, jobs):
    if jobs <= 1:
        return [_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_task, tasks))


def _resolve(conditions):
    if conditions is None:
        return list(CONDITIONS.values())
    unknown = [c for c in conditions if c not in LABEL_TO_CONDITION]
    if unknown:
        raise ConfigError("conditions", f"unknown conditions {unknown}")
    return list(conditions)


def _check_artifacts(labels, artifacts):
    needs = {LABEL_TO_CONDITION[c][1] for c in labels}
    if "med_bert" in needs and artifacts.med_bert_path is None and artifacts.med_bert_state is None:
        raise ConfigError("med_bert_checkpoint", "a pretrained Med-BERT checkpoint is required")
    if "skipgram" in needs and artifacts.skipgram is None:
        raise ConfigError("skipgram_checkpoint", "skip-gram embeddings are required")
    if "med_bert" in needs:
        artifacts.med_bert()  # load once here so worker processes receive the arrays


def run_ex1(cohort, base_config: FinetuneConfig, artifacts: Artifacts, conditions=None,
            replicates: int = 10, seed: int = 0, jobs: int = 1) -> ExperimentReport:
    """Every condition on one 7:1:2 split, re-initialised ``replicates`` times."""
    labels = _resolve(conditions)
    _check_artifacts(labels, artifacts)
    parts = split_cohort(cohort, (0.7, 0.1, 0.2), seed)
    train = parts.train
    if base_config.train_size:
        if base_config.train_size > len(train):
            raise RangeError(f"train_size {base_config.train_size} > training split {len(train)}")
        train = subsample_training(train, base_config.train_size, seed)
    tasks = []
    for label in labels:
        base, pretrained = LABEL_TO_CONDITION[label]
        for r in range(replicates):
            cfg = replace(base_config, base=base, pretrained=pretrained, seed=seed * 1000 + r)
            tasks.append((label, len(train), r, train, parts.valid, parts.test, cfg, artifacts))
    t0 = time.perf_counter()
    rows = _run_tasks(tasks, jobs)
    return ExperimentReport("ex1", rows, {"replicates": replicates, "seed": seed,
                                          "seconds": time.perf_counter() - t0,
                                          "finetune_config": asdict(base_config)})


def run_size_sweep(cohort, sizes: Sequence[int], base_config: FinetuneConfig, artifacts: Artifacts,
                   conditions=None, replicates: int = 10, seed: int = 0, jobs: int = 1,
                   valid_fraction: float = 0.25) -> ExperimentReport:
    """For each size draw ``replicates`` training subsamples, hold out
    ``valid_fraction`` of each for early stopping and score every condition
    on the shared test split.  Conditions see identical subsamples."""
    labels = _resolve(conditions)
    _check_artifacts(labels, artifacts)
    parts = split_cohort(cohort, (0.7, 0.1, 0.2), seed)
    for size in sizes:
        if not 1 <= size <= len(parts.train):
            raise RangeError(f"size {size} outside [1, {len(parts.train)}]")
    tasks = []
    for size in sizes:
        for r in range(replicates):
            sub_seed = int(np.random.SeedSequence(seed, spawn_key=(_SWEEP_KEY, size, r)).generate_state(1)[0])
            sample = subsample_training(parts.train, size, sub_seed)
            train, valid = stratified_holdout(sample, valid_fraction, sub_seed)
            for label in labels:
                base, pretrained = LABEL_TO_CONDITION[label]
                cfg = replace(base_config, base=base, pretrained=pretrained, train_size=size,
                              seed=seed * 1000 + r)
                tasks.append((label, size, r, train, valid, parts.test, cfg, artifacts))
    t0 = time.perf_counter()
    rows = _run_tasks(tasks, jobs)
    return ExperimentReport("sweep", rows, {"replicates": replicates, "seed": seed, "sizes": list(sizes),
                                            "seconds": time.perf_counter() - t0,
                                            "finetune_config": asdict(base_config)})


def finetune_config_from_mapping(mapping) -> FinetuneConfig:
    names = {f.name for f in fields(FinetuneConfig)}
    unknown = set(mapping) - names
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown finetune key")
    return FinetuneConfig(**mapping)
