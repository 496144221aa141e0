"""Med-BERT: summed code/serialization/visit embeddings, a bidirectional
transformer encoder, a masked-LM head and mean-pooled sequence heads.

There are no [CLS]/[SEP] tokens.  Sequence-level predictions (prolonged
stay during pretraining, disease outcome during fine-tuning) come from a
feed-forward layer over the mean of all real positions' hidden states.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .ehr import ModelInput
from .errors import ConfigError, ContractError, RangeError, ShapeError, VocabRangeError


@dataclass(frozen=True)
class MedBertConfig:
    vocab_size: int
    hidden_dim: int = 32
    n_heads: int = 2
    head_dim: int = 16
    n_layers: int = 2
    max_seq_len: int = 128
    max_visits: int = 128
    max_codes_per_visit: int = 64
    ffn_dim: int = 128
    dropout_rate: float = 0.1
    pre_norm: bool = False
    tie_mlm_weights: bool = False
    layer_norm_eps: float = 1e-12
    init_std: float = 0.02

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name in ("pre_norm", "tie_mlm_weights"):
                continue
            if f.name == "dropout_rate":
                if not 0 <= val < 1:
                    raise ConfigError(f.name, f"must lie in [0, 1), got {val}")
            elif not val > 0:
                raise ConfigError(f.name, f"must be positive, got {val}")
        if self.hidden_dim != self.n_heads * self.head_dim:
            raise ConfigError(
                "hidden_dim",
                f"{self.hidden_dim} != n_heads ({self.n_heads}) x head_dim ({self.head_dim})",
            )

    @classmethod
    def full_size(cls, vocab_size: int) -> "MedBertConfig":
        """Full-size configuration: 6 layers, 6 heads of 32 dims, length 512."""
        return cls(vocab_size, hidden_dim=192, n_heads=6, head_dim=32, n_layers=6,
                   max_seq_len=512, max_visits=512, ffn_dim=768)

    @classmethod
    def micro(cls, vocab_size: int) -> "MedBertConfig":
        """Tiny model for gradient checks."""
        return cls(vocab_size, hidden_dim=32, n_heads=2, head_dim=16, n_layers=2,
                   max_seq_len=16, max_visits=8, max_codes_per_visit=8, ffn_dim=48,
                   dropout_rate=0.0, init_std=0.1)

    def to_dict(self) -> dict:
        return asdict(self)


class Batch(NamedTuple):
    code_ids: np.ndarray  # [B, L] int
    serialization_ids: np.ndarray
    visit_ids: np.ndarray
    lengths: np.ndarray  # [B]
    los_labels: np.ndarray  # [B] float
    outcome_labels: np.ndarray  # [B] float, nan when unknown

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.code_ids.shape[1])[None, :] < self.lengths[:, None]

    def __len__(self):
        return self.code_ids.shape[0]


def collate(inputs: Sequence[ModelInput], pad_to: int | None = None) -> Batch:
    """Right-pad a list of encoded patients with PAD=0 on all three streams."""
    if not inputs:
        raise ContractError("cannot collate an empty batch")
    width = max(mi.length for mi in inputs)
    if pad_to is not None:
        width = max(width, pad_to)
    b = len(inputs)
    codes = np.zeros((b, width), dtype=np.int64)
    ser = np.zeros((b, width), dtype=np.int64)
    vis = np.zeros((b, width), dtype=np.int64)
    for i, mi in enumerate(inputs):
        codes[i, :mi.length] = mi.code_ids
        ser[i, :mi.length] = mi.serialization_ids
        vis[i, :mi.length] = mi.visit_ids
    lengths = np.array([mi.length for mi in inputs], dtype=np.int64)
    los = np.array([float(mi.prolonged_los_label) for mi in inputs])
    out = np.array([np.nan if mi.outcome_label is None else float(mi.outcome_label) for mi in inputs])
    return Batch(codes, ser, vis, lengths, los, out)


class EncoderOutput(NamedTuple):
    hidden_states: Tensor  # [B, L, H]
    attention_maps: list  # per layer: ndarray [B, heads, L, L]


class MedBert:
    """Parameters live in ``self.store`` under dotted names."""

    def __init__(self, config: MedBertConfig, seed: int = 0, dtype=np.float32,
                 heads: Sequence[str] = ("los_head",), store: ag.ParameterStore | None = None):
        self.config = config
        self.heads = []
        self._init_rng = np.random.default_rng(seed)
        if store is not None:
            self.store = store
            self.heads = sorted({n.split(".")[0] for n in store if n.endswith(".cls.w")})
            return
        self.store = ag.ParameterStore(dtype)
        c, rng = config, self._init_rng
        h = c.hidden_dim

        def dense(name, n_in, n_out):
            self.store.add(f"{name}.w", ag.truncated_normal(rng, (n_in, n_out), c.init_std))
            self.store.add(f"{name}.b", np.zeros(n_out), decay=False)

        def norm(name):
            self.store.add(f"{name}.gain", np.ones(h), decay=False)
            self.store.add(f"{name}.bias", np.zeros(h), decay=False)

        self.store.add("emb.code", ag.truncated_normal(rng, (c.vocab_size, h), c.init_std))
        self.store.add("emb.serial", ag.truncated_normal(rng, (c.max_codes_per_visit, h), c.init_std))
        self.store.add("emb.visit", ag.truncated_normal(rng, (c.max_visits + 1, h), c.init_std))
        for i in range(c.n_layers):
            for proj in ("q", "k", "v", "o"):
                dense(f"layer{i}.attn.{proj}", h, h)
            norm(f"layer{i}.ln1")
            dense(f"layer{i}.ffn.in", h, c.ffn_dim)
            dense(f"layer{i}.ffn.out", c.ffn_dim, h)
            norm(f"layer{i}.ln2")
        if c.pre_norm:
            norm("final_ln")
        dense("mlm.dense", h, h)
        norm("mlm.ln")
        if c.tie_mlm_weights:
            self.store.add("mlm.out.b", np.zeros(c.vocab_size), decay=False)
        else:
            dense("mlm.out", h, c.vocab_size)
        for head in heads:
            self.add_head(head)

    def __getitem__(self, name) -> Tensor:
        return self.store[name]

    def add_head(self, name: str, seed: int | None = None):
        """Fresh pooled head: FFL (hidden -> hidden, gelu) then a scalar classifier."""
        if f"{name}.cls.w" in self.store:
            raise ContractError(f"head {name!r} already exists")
        rng = self._init_rng if seed is None else np.random.default_rng(seed)
        h, std = self.config.hidden_dim, self.config.init_std
        self.store.add(f"{name}.ffl.w", ag.truncated_normal(rng, (h, h), std))
        self.store.add(f"{name}.ffl.b", np.zeros(h), decay=False)
        self.store.add(f"{name}.cls.w", ag.truncated_normal(rng, (h, 1), std))
        self.store.add(f"{name}.cls.b", np.zeros(1), decay=False)
        self.heads.append(name)

    # -- forward pieces ------------------------------------------------------

    def embed_inputs(self, batch: Batch, train: bool = False, rng=None) -> Tensor:
        c = self.config
        if batch.code_ids.shape[1] > c.max_seq_len:
            raise ShapeError(f"sequence length {batch.code_ids.shape[1]} > max_seq_len {c.max_seq_len}")
        if batch.visit_ids.size and batch.visit_ids.max() > c.max_visits:
            raise VocabRangeError(f"visit id {batch.visit_ids.max()} > max_visits {c.max_visits}")
        ser = np.minimum(batch.serialization_ids, c.max_codes_per_visit - 1)
        x = (ag.embedding(self["emb.code"], batch.code_ids)
             + ag.embedding(self["emb.serial"], ser)
             + ag.embedding(self["emb.visit"], batch.visit_ids))
        return ag.dropout(x, c.dropout_rate, train, rng)

    def _attention(self, x, mask_add, i, train, rng):
        c = self.config
        b, n, _ = x.shape
        p = f"layer{i}.attn"

        def heads(t):
            return t.reshape(b, n, c.n_heads, c.head_dim).transpose(0, 2, 1, 3)

        q = heads(x @ self[f"{p}.q.w"] + self[f"{p}.q.b"])
        k = heads(x @ self[f"{p}.k.w"] + self[f"{p}.k.b"])
        v = heads(x @ self[f"{p}.v.w"] + self[f"{p}.v.b"])
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(c.head_dim)) + mask_add
        probs = ag.softmax(scores, axis=-1)
        ctx = ag.dropout(probs, c.dropout_rate, train, rng) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, n, c.hidden_dim)
        out = ctx @ self[f"{p}.o.w"] + self[f"{p}.o.b"]
        return ag.dropout(out, c.dropout_rate, train, rng), probs.data

    def _ffn(self, x, i, train, rng):
        p = f"layer{i}.ffn"
        hidden = ag.gelu(x @ self[f"{p}.in.w"] + self[f"{p}.in.b"])
        out = hidden @ self[f"{p}.out.w"] + self[f"{p}.out.b"]
        return ag.dropout(out, self.config.dropout_rate, train, rng)

    def _ln(self, x, name):
        return ag.layer_norm(x, self[f"{name}.gain"], self[f"{name}.bias"], self.config.layer_norm_eps)

    def encoder_forward(self, embedded: Tensor, mask: np.ndarray, train: bool = False, rng=None) -> EncoderOutput:
        """Run the transformer stack.  ``mask`` is [B, L] boolean, True on real codes."""
        if embedded.ndim != 3 or embedded.shape[:2] != mask.shape:
            raise ShapeError(f"embedded {embedded.shape} does not match mask {mask.shape}")
        if embedded.shape[1] > self.config.max_seq_len:
            raise ShapeError(f"length {embedded.shape[1]} > max_seq_len {self.config.max_seq_len}")
        mask_add = Tensor(
            np.where(mask, 0.0, ag.MASK_VALUE)[:, None, None, :].astype(embedded.dtype)
        )
        x, maps = embedded, []
        for i in range(self.config.n_layers):
            if self.config.pre_norm:
                a, probs = self._attention(self._ln(x, f"layer{i}.ln1"), mask_add, i, train, rng)
                x = x + a
                x = x + self._ffn(self._ln(x, f"layer{i}.ln2"), i, train, rng)
            else:
                a, probs = self._attention(x, mask_add, i, train, rng)
                x = self._ln(x + a, f"layer{i}.ln1")
                x = self._ln(x + self._ffn(x, i, train, rng), f"layer{i}.ln2")
            maps.append(probs)
        if self.config.pre_norm:
            x = self._ln(x, "final_ln")
        return EncoderOutput(x, maps)

    def encode(self, batch: Batch, train: bool = False, rng=None) -> EncoderOutput:
        return self.encoder_forward(self.embed_inputs(batch, train, rng), batch.mask, train, rng)

    def masked_lm_logits(self, hidden: Tensor, positions, rows=None) -> Tensor:
        """Vocabulary logits at ``hidden[rows[j], positions[j]]``.

        ``hidden`` may be a single sequence [L, H]; then ``rows`` is ignored.
        """
        positions = np.asarray(positions, dtype=np.int64)
        if hidden.ndim == 2:
            hidden = hidden.reshape(1, *hidden.shape)
            rows = np.zeros_like(positions)
        elif rows is None:
            rows = np.arange(len(positions))
        rows = np.asarray(rows, dtype=np.int64)
        if positions.size and (positions.min() < 0 or positions.max() >= hidden.shape[1]):
            raise RangeError(f"masked positions {positions.tolist()} outside length {hidden.shape[1]}")
        h = hidden[rows, positions]
        h = ag.gelu(h @ self["mlm.dense.w"] + self["mlm.dense.b"])
        h = self._ln(h, "mlm.ln")
        w = self["emb.code"].transpose(1, 0) if self.config.tie_mlm_weights else self["mlm.out.w"]
        return h @ w + self["mlm.out.b"]

    def pooled_logit(self, hidden: Tensor, lengths, head: str = "los_head") -> Tensor:
        """Mean over the first ``lengths[b]`` positions, FFL with gelu, scalar logit [B]."""
        lengths = np.atleast_1d(np.asarray(lengths, dtype=np.int64))
        if hidden.ndim == 2:
            hidden = hidden.reshape(1, *hidden.shape)
        if lengths.min() < 1:
            raise ContractError("pooled_logit needs length >= 1")
        if f"{head}.cls.w" not in self.store:
            raise ContractError(f"no head named {head!r}")
        n = hidden.shape[1]
        weights = (np.arange(n)[None, :] < lengths[:, None]) / lengths[:, None]
        pooled = (hidden * Tensor(weights[:, :, None].astype(hidden.dtype))).sum(axis=1)
        z = ag.gelu(pooled @ self[f"{head}.ffl.w"] + self[f"{head}.ffl.b"])
        return (z @ self[f"{head}.cls.w"] + self[f"{head}.cls.b"]).reshape(-1)

    # -- persistence ---------------------------------------------------------

    def save(self, path, extra_meta: dict | None = None, include_optimizer=False) -> str:
        meta = {"config": self.config.to_dict(), "heads": list(self.heads), "step": self.store.t}
        meta.update(extra_meta or {})
        tensors = self.store.state() if include_optimizer else self.store.values()
        return ag.save_checkpoint(path, tensors, "med_bert", meta)

    @classmethod
    def load(cls, path, dtype=np.float32) -> "MedBert":
        tensors, kind, meta = ag.load_checkpoint(path)
        if kind != "med_bert":
            raise ConfigError("checkpoint", f"expected a med_bert checkpoint, got {kind!r}")
        return cls.from_state(tensors, meta, dtype)

    @classmethod
    def from_state(cls, tensors: dict, meta: dict, dtype=np.float32) -> "MedBert":
        config = MedBertConfig(**meta["config"])
        model = cls(config, heads=meta.get("heads", ()), dtype=dtype)
        params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
        missing = set(model.store.params) - set(params)
        if missing:
            raise ConfigError("checkpoint", f"missing parameters {sorted(missing)[:3]}")
        model.store.load_values(params)
        if any(k.startswith("adam.") for k in tensors):
            model.store.load_state(tensors, int(meta.get("step", 0)))
        return model
