"""Finite-difference checks of the micro models, shared by the CLI and tests."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .baselines import gru_forward, init_gru, init_retain, retain_forward, skipgram_loss
from .ehr import ModelInput
from .model import MedBert, MedBertConfig, collate

MODELS = ("med_bert", "gru", "bigru", "retain", "skipgram")


def _micro_inputs(vocab_size, rng):
    """Three short patients of different lengths, so padding is exercised."""
    out = []
    for n_visits, los in ((3, True), (2, False), (1, True)):
        sizes = rng.integers(1, 4, size=n_visits)
        codes = rng.integers(3, vocab_size, size=sizes.sum())
        ser = np.concatenate([np.arange(s) for s in sizes])
        vis = np.repeat(np.arange(1, n_visits + 1), sizes)
        out.append(ModelInput(codes, ser, vis, len(codes), los, not los))
    return out


def med_bert_check(vocab_size=12, tolerance=1e-4, max_entries=None, seed=0) -> ag.GradCheckReport:
    """Masked-LM + prolonged-stay loss of the micro Med-BERT (2 layers, 2 heads, hidden 32)."""
    rng = np.random.default_rng(seed)
    model = MedBert(MedBertConfig.micro(vocab_size), seed=seed, dtype=np.float64)
    batch = collate(_micro_inputs(vocab_size, rng))
    positions = np.minimum(batch.lengths - 1, 1)
    targets = batch.code_ids[np.arange(len(batch)), positions]

    def closure():
        hidden = model.encode(batch).hidden_states
        mlm = ag.cross_entropy_logits(model.masked_lm_logits(hidden, positions), targets)
        los = ag.binary_cross_entropy_logit(model.pooled_logit(hidden, batch.lengths), batch.los_labels)
        return mlm + los

    return ag.grad_check(closure, model.store, tolerance, max_entries=max_entries, seed=seed)


def _sequence_data(rng, b=3, n=5, d=4):
    x = rng.normal(size=(b, n, d))
    lengths = np.array([n, n - 2, 1])[:b]
    labels = np.arange(b) % 2
    return x, lengths, labels


def gru_check(bidirectional=False, tolerance=1e-4, seed=0) -> ag.GradCheckReport:
    rng = np.random.default_rng(seed)
    x, lengths, labels = _sequence_data(rng)
    store = ag.ParameterStore(np.float64)
    inputs = store.add("inputs", x)
    fwd = init_gru(store, "fwd", x.shape[2], 3, rng)
    params = (fwd, init_gru(store, "bwd", x.shape[2], 3, rng)) if bidirectional else fwd
    width = 6 if bidirectional else 3
    store.add("out.w", rng.normal(size=(width, 1)))
    store.add("out.b", np.zeros(1))
    # nonzero biases so their gradients are exercised away from zero
    for name in store.names():
        if name.endswith(".b"):
            store[name].data = rng.normal(scale=0.5, size=store[name].shape)

    def closure():
        h = gru_forward(inputs, params, bidirectional, lengths)
        return ag.binary_cross_entropy_logit((h @ store["out.w"] + store["out.b"]).reshape(-1), labels)

    return ag.grad_check(closure, store, tolerance)


def retain_check(tolerance=1e-4, seed=0) -> ag.GradCheckReport:
    rng = np.random.default_rng(seed)
    v, n_visits, labels = _sequence_data(rng, n=4)
    store = ag.ParameterStore(np.float64)
    visits = store.add("visits", v)
    params = init_retain(store, "retain", v.shape[2], 3, rng)
    for name in store.names():
        if name.endswith((".b", "b_alpha", "b_beta", "b_out")):
            store[name].data = rng.normal(scale=0.5, size=store[name].shape)

    def closure():
        return ag.binary_cross_entropy_logit(retain_forward(visits, params, n_visits).logit, labels)

    return ag.grad_check(closure, store, tolerance)


def skipgram_check(vocab_size=5, dim=4, tolerance=1e-4, seed=0) -> ag.GradCheckReport:
    rng = np.random.default_rng(seed)
    store = ag.ParameterStore(np.float64)
    store.add("sg.input", rng.normal(scale=0.5, size=(vocab_size, dim)))
    store.add("sg.output", rng.normal(scale=0.5, size=(vocab_size, dim)))
    centers = rng.integers(vocab_size, size=8)
    contexts = rng.integers(vocab_size, size=8)
    negatives = rng.integers(vocab_size, size=(8, 2))

    def closure():
        return skipgram_loss(store, centers, contexts, negatives)

    return ag.grad_check(closure, store, tolerance)


def run_checks(model="all", tolerance=1e-4, max_entries=None, vocab_size=12) -> dict:
    names = MODELS if model == "all" else (model,)
    out = {}
    for name in names:
        if name == "med_bert":
            out[name] = med_bert_check(vocab_size, tolerance, max_entries)
        elif name in ("gru", "bigru"):
            out[name] = gru_check(name == "bigru", tolerance)
        elif name == "retain":
            out[name] = retain_check(tolerance)
        elif name == "skipgram":
            out[name] = skipgram_check(tolerance=tolerance)
        else:
            raise ValueError(f"unknown model {name!r}; choose from {MODELS} or 'all'")
    return out


def linear_regression_check(tolerance=1e-6, seed=0) -> ag.GradCheckReport:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(20, 3)))
    y = rng.normal(size=(20, 1))
    store = ag.ParameterStore(np.float64)
    store.add("w", rng.normal(size=(3, 1)))
    store.add("b", rng.normal(size=(1,)))

    def closure():
        r = x @ store["w"] + store["b"] - Tensor(y)
        return (r * r).mean()

    return ag.grad_check(closure, store, tolerance)
