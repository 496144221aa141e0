"""Recurrent baselines (GRU, Bi-GRU, RETAIN), a skip-gram code-embedding
trainer, and the classifier that stacks a baseline on top of learnable,
skip-gram-initialised or Med-BERT contextual input vectors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .ehr import N_RESERVED, ModelInput, Vocabulary, encode_patient
from .errors import ConfigError, ContractError, ShapeError
from .model import Batch, MedBert, collate

BASES = ("gru", "bigru", "retain", "med_bert_only")
INPUT_MODES = ("one_hot_embed", "skipgram", "med_bert")


def _scaled(rng, shape, fan_in):
    return ag.truncated_normal(rng, shape, 1.0 / math.sqrt(fan_in))


def reverse_within_length(lengths, width: int) -> np.ndarray:
    """[B, width] gather index that reverses each row's first ``lengths[b]`` slots."""
    t = np.arange(width)[None, :]
    lengths = np.asarray(lengths)[:, None]
    return np.where(t < lengths, lengths - 1 - t, t)


def _as_batch(x: Tensor, lengths):
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
        lengths = [x.shape[1]] if lengths is None else lengths
    if x.ndim != 3:
        raise ShapeError(f"expected [B, T, D] inputs, got {x.shape}")
    lengths = np.full(x.shape[0], x.shape[1]) if lengths is None else np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (x.shape[0],) or lengths.min() < 1 or lengths.max() > x.shape[1]:
        raise ShapeError(f"lengths {lengths.tolist()} do not fit inputs {x.shape}")
    return x, lengths


# -- GRU ----------------------------------------------------------------------

class GruParams(NamedTuple):
    w_x: Tensor  # [D, 3H]: reset, update, candidate
    w_rz: Tensor  # [H, 2H]
    w_h: Tensor  # [H, H]
    b: Tensor  # [3H]

    @property
    def hidden_dim(self) -> int:
        return self.w_h.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_x.shape[0]


def init_gru(store: ag.ParameterStore, prefix: str, input_dim: int, hidden_dim: int, rng) -> GruParams:
    h = hidden_dim
    return GruParams(
        store.add(f"{prefix}.w_x", _scaled(rng, (input_dim, 3 * h), input_dim)),
        store.add(f"{prefix}.w_rz", _scaled(rng, (h, 2 * h), h)),
        store.add(f"{prefix}.w_h", _scaled(rng, (h, h), h)),
        store.add(f"{prefix}.b", np.zeros(3 * h), decay=False),
    )


def gru_params_from(store, prefix) -> GruParams:
    return GruParams(*(store[f"{prefix}.{n}"] for n in ("w_x", "w_rz", "w_h", "b")))


def gru_states(x: Tensor, params: GruParams, lengths=None) -> list:
    """Hidden state after every step, ``[B, H]`` each; rows stop updating past their length.

    Cell: r, z = sigmoid(x W + h U + b); c = tanh(x W_c + (r * h) U_c + b_c);
    h <- (1 - z) * h + z * c, starting from h = 0.
    """
    x, lengths = _as_batch(x, lengths)
    if x.shape[2] != params.input_dim:
        raise ShapeError(f"input dim {x.shape[2]} != GRU input dim {params.input_dim}")
    b, n, _ = x.shape
    hd = params.hidden_dim
    proj = x @ params.w_x + params.b
    x_rz, x_c = proj[:, :, :2 * hd], proj[:, :, 2 * hd:]
    live = (np.arange(n)[None, :] < lengths[:, None]).astype(x.dtype)
    h = Tensor(np.zeros((b, hd), dtype=x.dtype))
    states = []
    for t in range(n):
        rz = ag.sigmoid(x_rz[:, t] + h @ params.w_rz)
        r, z = rz[:, :hd], rz[:, hd:]
        cand = ag.tanh(x_c[:, t] + (r * h) @ params.w_h)
        if live[:, t].all():
            h = h + z * (cand - h)
        else:
            h = h + (z * Tensor(live[:, t:t + 1])) * (cand - h)
        states.append(h)
    return states


def gru_forward(inputs: Tensor, params, bidirectional: bool = False, lengths=None) -> Tensor:
    """Final GRU state ``[B, H]`` (``[H]`` for a single unbatched sequence).

    With ``bidirectional`` set, ``params`` is a ``(forward, backward)`` pair;
    the second GRU reads each sequence reversed within its length and the
    two final states are concatenated.
    """
    single = inputs.ndim == 2
    x, lengths = _as_batch(inputs, lengths)
    if bidirectional:
        if not (isinstance(params, tuple) and len(params) == 2 and isinstance(params[0], GruParams)):
            raise ShapeError("bidirectional GRU needs a (forward, backward) parameter pair")
        fwd, bwd = params
    else:
        fwd, bwd = params, None
    out = gru_states(x, fwd, lengths)[-1]
    if bwd is not None:
        rows = np.arange(x.shape[0])[:, None]
        rev = x[rows, reverse_within_length(lengths, x.shape[1])]
        out = ag.concat([out, gru_states(rev, bwd, lengths)[-1]], axis=-1)
    return out.reshape(-1) if single else out


# -- RETAIN -------------------------------------------------------------------

class RetainParams(NamedTuple):
    gru_alpha: GruParams
    gru_beta: GruParams
    w_alpha: Tensor  # [H, 1]
    b_alpha: Tensor  # [1]
    w_beta: Tensor  # [H, D]
    b_beta: Tensor  # [D]
    w_out: Tensor  # [D, 1]
    b_out: Tensor  # [1]


def init_retain(store, prefix, input_dim, hidden_dim, rng) -> RetainParams:
    d, h = input_dim, hidden_dim
    return RetainParams(
        init_gru(store, f"{prefix}.gru_alpha", d, h, rng),
        init_gru(store, f"{prefix}.gru_beta", d, h, rng),
        store.add(f"{prefix}.w_alpha", _scaled(rng, (h, 1), h)),
        store.add(f"{prefix}.b_alpha", np.zeros(1), decay=False),
        store.add(f"{prefix}.w_beta", _scaled(rng, (h, d), h)),
        store.add(f"{prefix}.b_beta", np.zeros(d), decay=False),
        store.add(f"{prefix}.w_out", _scaled(rng, (d, 1), d)),
        store.add(f"{prefix}.b_out", np.zeros(1), decay=False),
    )


def retain_params_from(store, prefix) -> RetainParams:
    return RetainParams(
        gru_params_from(store, f"{prefix}.gru_alpha"),
        gru_params_from(store, f"{prefix}.gru_beta"),
        *(store[f"{prefix}.{n}"] for n in ("w_alpha", "b_alpha", "w_beta", "b_beta", "w_out", "b_out")),
    )


class RetainOutput(NamedTuple):
    logit: Tensor  # [B] (scalar for one unbatched patient)
    alphas: Tensor  # [B, V] visit weights, zero on padded visits
    betas: Tensor  # [B, V, D] variable weights in [-1, 1]


def retain_forward(visit_vectors: Tensor, params: RetainParams, n_visits=None) -> RetainOutput:
    """Two-level attention over visit vectors, both RNNs reading in reverse time.

    The RNN state for visit j has consumed visits last, ..., j.
    alpha = softmax over visits of ``g_j w_alpha``; beta = tanh(h_j W_beta);
    logit = (sum_j alpha_j * beta_j * v_j) w_out + b_out.
    """
    single = visit_vectors.ndim == 2
    v, n_visits = _as_batch(visit_vectors, n_visits)
    if v.shape[2] != params.gru_alpha.input_dim:
        raise ShapeError(f"visit dim {v.shape[2]} != RETAIN input dim {params.gru_alpha.input_dim}")
    b, n, _ = v.shape
    rows = np.arange(b)[:, None]
    rev = reverse_within_length(n_visits, n)
    v_rev = v[rows, rev]
    # rev is an involution, so the same gather restores the original order
    g = ag.stack(gru_states(v_rev, params.gru_alpha, n_visits), axis=1)[rows, rev]
    h = ag.stack(gru_states(v_rev, params.gru_beta, n_visits), axis=1)[rows, rev]
    e = (g @ params.w_alpha + params.b_alpha).reshape(b, n)
    pad = np.arange(n)[None, :] >= n_visits[:, None]
    if pad.any():
        e = e + Tensor(np.where(pad, ag.MASK_VALUE, 0.0).astype(v.dtype))
    alphas = ag.softmax(e, axis=1)
    betas = ag.tanh(h @ params.w_beta + params.b_beta)
    context = (alphas.reshape(b, n, 1) * betas * v).sum(axis=1)
    logit = (context @ params.w_out + params.b_out).reshape(-1)
    if single:
        return RetainOutput(logit.reshape(()), alphas.reshape(n), betas.reshape(n, -1))
    return RetainOutput(logit, alphas, betas)


def visit_assignment(visit_ids: np.ndarray, dtype=np.float32):
    """``A[b, j, t] = 1`` when position t belongs to visit j+1; also visit counts."""
    n_visits = visit_ids.max(axis=1)
    width = int(n_visits.max())
    a = (visit_ids[:, None, :] == np.arange(1, width + 1)[None, :, None]).astype(dtype)
    return a, n_visits.astype(np.int64)


def visit_sums(x: Tensor, visit_ids: np.ndarray):
    """Per-visit sums of position vectors: ``[B, V, D]`` plus visit counts."""
    a, n_visits = visit_assignment(visit_ids, x.dtype)
    return Tensor(a) @ x, n_visits


# -- skip-gram ----------------------------------------------------------------

class SkipGramParams(NamedTuple):
    input_table: np.ndarray  # [V, dim]; rows aligned with vocabulary ids
    output_table: np.ndarray
    window: int
    negatives: int

    def save(self, path) -> str:
        return ag.save_checkpoint(
            path, {"input": self.input_table, "output": self.output_table}, "skipgram",
            {"window": self.window, "negatives": self.negatives},
        )

    @classmethod
    def load(cls, path) -> "SkipGramParams":
        tensors, kind, meta = ag.load_checkpoint(path)
        if kind != "skipgram":
            raise ConfigError("skipgram", f"expected a skipgram checkpoint, got {kind!r}")
        return cls(tensors["input"], tensors["output"], meta["window"], meta["negatives"])


def skipgram_pairs(sequences: Sequence[np.ndarray], window: int) -> np.ndarray:
    """All (center, context) id pairs with ``0 < |i - j| <= window``, as [N, 2]."""
    out = []
    for seq in sequences:
        seq = np.asarray(seq)
        for k in range(1, window + 1):
            if len(seq) > k:
                out.append(np.stack([seq[:-k], seq[k:]], axis=1))
                out.append(np.stack([seq[k:], seq[:-k]], axis=1))
    if not out:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


def skipgram_loss(store: ag.ParameterStore, centers, contexts, negatives) -> Tensor:
    """Mean over pairs of ``-log s(u_o.v_c) - sum_k log s(-u_k.v_c)``."""
    v = ag.embedding(store["sg.input"], centers)  # [N, D]
    u = ag.embedding(store["sg.output"], contexts)
    un = ag.embedding(store["sg.output"], negatives)  # [N, K, D]
    pos = (v * u).sum(axis=-1)
    neg = (un * v.reshape(v.shape[0], 1, v.shape[1])).sum(axis=-1)
    k = negatives.shape[1]
    loss = ag.binary_cross_entropy_logit(pos, np.ones(pos.shape))
    if k == 0:
        return loss
    return loss + ag.binary_cross_entropy_logit(neg.reshape(-1), np.zeros(neg.size)) * float(k)


def train_skipgram(cohort, vocab: Vocabulary, dim: int = 32, window: int = 5, negatives: int = 5,
                   steps: int = 2000, seed: int = 0, lr: float = 0.01, batch_size: int = 256,
                   max_seq_len: int | None = None) -> SkipGramParams:
    """Skip-gram with negative sampling over each patient's flattened code sequence.

    Negatives come from the unigram distribution raised to 0.75.  Input
    vectors start small and uniform, output vectors at zero; AdamW without
    decay does the updates.
    """
    if not cohort:
        raise ConfigError("cohort", "skip-gram needs a non-empty cohort")
    if len(vocab) - N_RESERVED < negatives + 1:
        raise ConfigError("negatives", f"{len(vocab) - N_RESERVED} codes cannot supply {negatives} negatives")
    if window < 1 or dim < 1 or steps < 0:
        raise ConfigError("window", "window, dim must be >= 1 and steps >= 0")
    seqs = [encode_patient(p, vocab, max_seq_len or max(p.n_codes, 1)).code_ids for p in cohort]
    pairs = skipgram_pairs(seqs, window)
    counts = np.bincount(np.concatenate(seqs), minlength=len(vocab)).astype(np.float64)
    counts[:N_RESERVED] = 0
    noise = counts ** 0.75
    noise /= noise.sum()

    rng = np.random.default_rng(seed)
    store = ag.ParameterStore(np.float32)
    store.add("sg.input", (rng.random((len(vocab), dim)) - 0.5) / dim, decay=False)
    store.add("sg.output", np.zeros((len(vocab), dim)), decay=False)
    if len(pairs):
        for _ in range(steps):
            idx = rng.integers(len(pairs), size=min(batch_size, len(pairs)))
            neg = rng.choice(len(vocab), size=(len(idx), negatives), p=noise)
            ag.backward(skipgram_loss(store, pairs[idx, 0], pairs[idx, 1], neg))
            ag.adamw_step(store, lr, weight_decay=0.0)
    return SkipGramParams(store["sg.input"].data.copy(), store["sg.output"].data.copy(), window, negatives)


# -- composition --------------------------------------------------------------

@dataclass
class Artifacts:
    """Pretrained inputs a classifier can be built from."""

    vocab: Vocabulary
    skipgram: SkipGramParams | None = None
    med_bert_path: str | None = None
    med_bert_state: tuple | None = None  # (tensors, meta) cached from the checkpoint

    def med_bert(self) -> MedBert:
        if self.med_bert_state is None:
            if self.med_bert_path is None:
                raise ConfigError("med_bert_checkpoint", "a Med-BERT checkpoint is required for this condition")
            tensors, kind, meta = ag.load_checkpoint(self.med_bert_path)
            if kind != "med_bert":
                raise ConfigError("med_bert_checkpoint", f"expected a med_bert checkpoint, got {kind!r}")
            self.med_bert_state = ({k: v for k, v in tensors.items() if not k.startswith("adam.")}, meta)
        tensors, meta = self.med_bert_state
        return MedBert.from_state(tensors, meta)


_BERT_PREFIXES = ("emb.", "layer", "final_ln.", "mlm.", "los_head.")


class SequenceClassifier:
    """A baseline (or a bare pooled head) over one of three input encodings.

    ``base`` is ``gru``, ``bigru``, ``retain`` or ``med_bert_only``;
    ``input_mode`` is ``one_hot_embed`` (fresh learnable code vectors),
    ``skipgram`` (code vectors initialised from a skip-gram table and then
    trained) or ``med_bert`` (encoder hidden states, encoder fine-tuned
    unless ``freeze_encoder``).  All parameters share one store.
    """

    def __init__(self, base: str, input_mode: str, artifacts: Artifacts, hidden_dim: int = 32,
                 embed_dim: int = 32, seed: int = 0, freeze_encoder: bool = False):
        if base not in BASES:
            raise ConfigError("base", f"unknown base {base!r}; choose from {BASES}")
        if input_mode not in INPUT_MODES:
            raise ConfigError("pretrained", f"unknown input mode {input_mode!r}")
        if base == "med_bert_only" and input_mode != "med_bert":
            raise ConfigError("pretrained", "med_bert_only needs Med-BERT inputs")
        self.base, self.input_mode, self.artifacts = base, input_mode, artifacts
        rng = np.random.default_rng(seed)
        self.bert = None
        if input_mode == "med_bert":
            self.bert = artifacts.med_bert()
            self.store = self.bert.store
            dim = self.bert.config.hidden_dim
            if freeze_encoder:
                for prefix in _BERT_PREFIXES:
                    self.store.freeze(prefix)
        else:
            self.store = ag.ParameterStore(np.float32)
            if input_mode == "skipgram":
                if artifacts.skipgram is None:
                    raise ConfigError("skipgram_checkpoint", "skip-gram embeddings are required for this condition")
                table = artifacts.skipgram.input_table
                if table.shape[0] != len(artifacts.vocab):
                    raise ConfigError("skipgram_checkpoint",
                                      f"table has {table.shape[0]} rows, vocabulary {len(artifacts.vocab)}")
                dim = table.shape[1]
            else:
                dim = embed_dim
                table = ag.truncated_normal(rng, (len(artifacts.vocab), dim), 0.1)
            self.store.add("input.emb", table)
        self.input_dim = dim

        if base == "med_bert_only":
            self.bert.add_head("cls_head", seed=seed)
        elif base == "retain":
            init_retain(self.store, "retain", dim, hidden_dim, rng)
        else:
            init_gru(self.store, "gru_fwd", dim, hidden_dim, rng)
            width = hidden_dim
            if base == "bigru":
                init_gru(self.store, "gru_bwd", dim, hidden_dim, rng)
                width *= 2
            self.store.add("out.w", _scaled(rng, (width, 1), width))
            self.store.add("out.b", np.zeros(1), decay=False)

    @property
    def max_seq_len(self):
        return self.bert.config.max_seq_len if self.bert is not None else None

    def compose(self, batch: Batch, train: bool = False, rng=None) -> Tensor:
        """Per-position input vectors ``[B, L, D]`` for the baseline."""
        if self.bert is not None:
            return self.bert.encode(batch, train, rng).hidden_states
        return ag.embedding(self.store["input.emb"], batch.code_ids)

    def logits(self, batch: Batch, train: bool = False, rng=None) -> Tensor:
        x = self.compose(batch, train, rng)
        if self.base == "med_bert_only":
            return self.bert.pooled_logit(x, batch.lengths, "cls_head")
        if self.base == "retain":
            v, n_visits = visit_sums(x, batch.visit_ids)
            return retain_forward(v, retain_params_from(self.store, "retain"), n_visits).logit
        params = gru_params_from(self.store, "gru_fwd")
        if self.base == "bigru":
            params = (params, gru_params_from(self.store, "gru_bwd"))
        h = gru_forward(x, params, self.base == "bigru", batch.lengths)
        return (h @ self.store["out.w"] + self.store["out.b"]).reshape(-1)

    def loss(self, batch: Batch, train: bool = False, rng=None) -> Tensor:
        labels = batch.outcome_labels
        if np.isnan(labels).any():
            raise ContractError("every fine-tuning patient needs an outcome label")
        return ag.binary_cross_entropy_logit(self.logits(batch, train, rng), labels)

    def predict(self, inputs: Sequence[ModelInput], batch_size: int = 128) -> np.ndarray:
        order = np.argsort([mi.length for mi in inputs], kind="stable")
        out = np.empty(len(inputs))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            out[idx] = self.logits(collate([inputs[i] for i in idx])).data
        return out


def compose_inputs(patient, mode: str, artifacts: Artifacts, max_seq_len: int = 128, seed: int = 0) -> Tensor:
    """Input vectors a baseline would see for one patient: ``[length, D]``."""
    clf = SequenceClassifier("gru" if mode != "med_bert" else "med_bert_only", mode, artifacts, seed=seed)
    if clf.max_seq_len is not None:
        max_seq_len = clf.max_seq_len
    mi = patient if isinstance(patient, ModelInput) else encode_patient(patient, artifacts.vocab, max_seq_len)
    return clf.compose(collate([mi]))[0]
