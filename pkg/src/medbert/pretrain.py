"""Pretraining: one-code masking, joint masked-LM + prolonged-stay loss, the
training loop with checkpoints and a CSV loss curve."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import autograd as ag
from .ehr import MASK, N_RESERVED, ModelInput, Vocabulary, build_vocabulary, encode_patient, order_patient, read_patients
from .errors import ConfigError, ContractError, NumericsError
from .metrics import compute_auc
from .model import MedBert, MedBertConfig, collate
from .synth import split_cohort

log = logging.getLogger(__name__)

_ORDER_KEY = 11
_STEP_KEY = 12

MASK_PROB = 0.8
RANDOM_PROB = 0.1


class MaskedExample(NamedTuple):
    input: ModelInput
    masked_position: int
    original_code_id: int
    los_label: bool
    branch: str  # "mask", "random" or "keep"


def apply_masking(model_input: ModelInput, rng: np.random.Generator, vocab_size: int) -> MaskedExample:
    """Hide exactly one code: 80% [MASK], 10% a random code, 10% unchanged."""
    n = model_input.length
    if n < 1 or not np.any(model_input.code_ids[:n] != 0):
        raise ContractError("cannot mask a patient without codes")
    if vocab_size <= N_RESERVED:
        raise ContractError(f"vocab_size {vocab_size} leaves no codes to sample")
    pos = int(rng.integers(n))
    original = int(model_input.code_ids[pos])
    u = rng.random()
    if u < MASK_PROB:
        new, branch = MASK, "mask"
    elif u < MASK_PROB + RANDOM_PROB:
        new, branch = int(rng.integers(N_RESERVED, vocab_size)), "random"
    else:
        new, branch = original, "keep"
    codes = model_input.code_ids.copy()
    codes[pos] = new
    return MaskedExample(model_input.with_codes(codes), pos, original,
                         bool(model_input.prolonged_los_label), branch)


@dataclass(frozen=True)
class PretrainConfig:
    batch_size: int = 32
    total_steps: int = 1000
    lr: float = 1e-3
    weight_decay: float = 0.01
    los_loss_weight: float = 1.0
    seed: int = 0
    eval_every: int = 100
    checkpoint_every: int = 0
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-6
    bucket_factor: int = 50

    def __post_init__(self):
        for name in ("batch_size", "total_steps", "eval_every", "bucket_factor"):
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        for name in ("lr", "weight_decay", "los_loss_weight", "checkpoint_every", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(name, f"must be >= 0, got {getattr(self, name)}")

    def lr_at(self, step: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        return self.lr


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Masking/dropout stream for one optimiser step; makes resumption exact."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_STEP_KEY, step)))


def epoch_batches(lengths: np.ndarray, batch_size: int, seed: int, epoch: int, bucket_factor: int = 50):
    """Shuffle, sort by length inside buckets of ``batch_size * bucket_factor``,
    cut into batches and shuffle the batch order."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_ORDER_KEY, epoch)))
    order = rng.permutation(len(lengths))
    chunk = batch_size * bucket_factor
    batches = []
    for start in range(0, len(order), chunk):
        idx = order[start:start + chunk]
        idx = idx[np.argsort(lengths[idx], kind="stable")]
        batches.extend(idx[i:i + batch_size] for i in range(0, len(idx), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def pretrain_losses(batch: Sequence[MaskedExample], model: MedBert, train=True, rng=None):
    b = collate([ex.input for ex in batch])
    out = model.encode(b, train=train, rng=rng)
    positions = np.array([ex.masked_position for ex in batch])
    targets = np.array([ex.original_code_id for ex in batch])
    mlm = ag.cross_entropy_logits(model.masked_lm_logits(out.hidden_states, positions), targets)
    los = ag.binary_cross_entropy_logit(model.pooled_logit(out.hidden_states, b.lengths, "los_head"), b.los_labels)
    return mlm, los


def pretrain_step(batch: Sequence[MaskedExample], model: MedBert, config: PretrainConfig,
                  rng=None, step: int = 0):
    """Forward, one backward pass over MLM + weighted LOS loss, one AdamW update."""
    if not batch:
        raise ContractError("pretrain_step needs a non-empty batch")
    if rng is None:
        rng = step_rng(config.seed, step)
    try:
        mlm, los = pretrain_losses(batch, model, train=True, rng=rng)
        total = mlm + los * config.los_loss_weight if config.los_loss_weight else mlm
        ag.backward(total)
        norm = model.store.grad_norm()
        if not np.isfinite(norm):
            raise NumericsError(f"gradient norm is {norm}")
    except NumericsError as exc:
        model.store.zero_grad()
        raise NumericsError(f"step {step}: {exc}") from exc
    ag.adamw_step(model.store, config.lr_at(step), config.beta1, config.beta2,
                  config.adam_eps, config.weight_decay)
    return mlm.item(), los.item()


def predict_pooled(model: MedBert, inputs: Sequence[ModelInput], head: str, batch_size: int = 128) -> np.ndarray:
    """Eval-mode pooled logits, batched by length to limit padding."""
    order = np.argsort([mi.length for mi in inputs], kind="stable")
    out = np.empty(len(inputs))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        b = collate([inputs[i] for i in idx])
        hidden = model.encode(b).hidden_states
        out[idx] = model.pooled_logit(hidden, b.lengths, head).data
    return out


@dataclass
class PretrainReport:
    final_mlm_loss: float = float("nan")
    final_los_loss: float = float("nan")
    valid_los_auc: float = float("nan")
    curve: list = field(default_factory=list)  # rows: step, mlm_loss, los_loss, los_auc_on_valid
    step_losses: dict = field(default_factory=dict)  # step -> (mlm, los)
    checkpoint_paths: list = field(default_factory=list)
    model_path: str = ""
    vocab_path: str = ""
    curve_path: str = ""
    seconds: float = 0.0


CURVE_COLUMNS = ("step", "mlm_loss", "los_loss", "los_auc_on_valid")


def _auc_or_nan(scores, labels):
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        return float("nan")
    return compute_auc(scores, labels)


def train_model(model: MedBert, train: Sequence[ModelInput], valid: Sequence[ModelInput],
                config: PretrainConfig, start_step: int = 0, out_dir=None, on_step=None) -> PretrainReport:
    """Run steps ``start_step .. total_steps - 1`` on already-encoded inputs."""
    report = PretrainReport()
    lengths = np.array([mi.length for mi in train])
    vocab_size = model.config.vocab_size
    n_batches = None
    epoch_cache = (None, None)
    window = []
    t0 = time.perf_counter()
    for step in range(start_step, config.total_steps):
        if n_batches is None:
            n_batches = len(epoch_batches(lengths, config.batch_size, config.seed, 0, config.bucket_factor))
        epoch, slot = divmod(step, n_batches)
        if epoch_cache[0] != epoch:
            epoch_cache = (epoch, epoch_batches(lengths, config.batch_size, config.seed, epoch, config.bucket_factor))
        rng = step_rng(config.seed, step)
        batch = [apply_masking(train[i], rng, vocab_size) for i in epoch_cache[1][slot]]
        mlm, los = pretrain_step(batch, model, config, rng=rng, step=step)
        report.step_losses[step] = (mlm, los)
        window.append((mlm, los))
        if on_step is not None:
            on_step(step, mlm, los)

        done = step + 1
        if done % config.eval_every == 0 or done == config.total_steps:
            auc = float("nan")
            if valid:
                logits = predict_pooled(model, valid, "los_head")
                auc = _auc_or_nan(logits, [mi.prolonged_los_label for mi in valid])
            w = np.array(window)
            row = {"step": done, "mlm_loss": float(w[:, 0].mean()),
                   "los_loss": float(w[:, 1].mean()), "los_auc_on_valid": auc}
            report.curve.append(row)
            window = []
            log.info("step %d mlm %.4f los %.4f valid-auc %.4f", done, row["mlm_loss"], row["los_loss"], auc)
        if out_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
            path = Path(out_dir) / f"checkpoint_step{done:07d}.ckpt"
            model.save(path, {"pretrain_config": asdict(config)}, include_optimizer=True)
            report.checkpoint_paths.append(str(path))

    if report.curve:
        last = report.curve[-1]
        report.final_mlm_loss = last["mlm_loss"]
        report.final_los_loss = last["los_loss"]
        report.valid_los_auc = last["los_auc_on_valid"]
    report.seconds = time.perf_counter() - t0
    return report


def write_curve(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(float(row[k])) if k != "step" else row[k] for k in CURVE_COLUMNS})


def run_pretraining(cohort_path, config: PretrainConfig, out_dir, model_config: MedBertConfig | None = None,
                    vocab: Vocabulary | None = None, resume_from=None, split=(0.7, 0.1, 0.2)) -> PretrainReport:
    """Pretrain on a patient JSONL file.

    Writes ``vocab.txt``, ``loss_curve.csv``, periodic
    ``checkpoint_step*.ckpt`` files and the final ``model.ckpt`` into
    ``out_dir``.  Labels other than the prolonged-stay flag are ignored.
    With ``resume_from`` the model, optimiser moments and step counter are
    restored and training continues to ``config.total_steps``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cohort = [order_patient(p) for p in read_patients(cohort_path)]
    vocab = vocab or build_vocabulary(cohort)
    parts = split_cohort(cohort, split, config.seed)

    if resume_from is not None:
        model = MedBert.load(resume_from)
        start = model.store.t
    else:
        model_config = model_config or MedBertConfig(vocab_size=len(vocab))
        if model_config.vocab_size != len(vocab):
            model_config = replace(model_config, vocab_size=len(vocab))
        model = MedBert(model_config, seed=config.seed)
        start = 0
    max_len = model.config.max_seq_len
    train = [encode_patient(p, vocab, max_len) for p in parts.train]
    valid = [encode_patient(p, vocab, max_len) for p in parts.valid]

    report = train_model(model, train, valid, config, start, out_dir)
    report.vocab_path = str(out_dir / "vocab.txt")
    vocab.save(report.vocab_path)
    report.curve_path = str(out_dir / "loss_curve.csv")
    write_curve(report.curve_path, report.curve)
    report.model_path = str(out_dir / "model.ckpt")
    model.save(report.model_path, {"pretrain_config": asdict(config)}, include_optimizer=True)
    return report


def pretrain_config_from_mapping(mapping) -> PretrainConfig:
    names = {f.name for f in fields(PretrainConfig)}
    unknown = set(mapping) - names
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown pretrain key")
    return PretrainConfig(**mapping)
