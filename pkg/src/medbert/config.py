"""Flat ``key = value`` run configuration shared by every CLI subcommand.

A config file holds one ``key = value`` per line; ``#`` starts a comment.
Values are parsed by the declared type of the key, so the same text works
in a file and on the command line (``--key value``).  Unknown keys are
rejected.
"""
from __future__ import annotations

import dataclasses
from typing import Any, NamedTuple

from .errors import ConfigError
from .evaluation import FinetuneConfig
from .model import MedBertConfig
from .pretrain import PretrainConfig
from .synth import SynthConfig


class Key(NamedTuple):
    name: str
    kind: str  # int | float | bool | str | ints | strs
    default: Any
    help: str
    required: bool = False


def _kind(value) -> str:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int"
    if isinstance(value, float):
        return "float"
    return "str"


def _from_dataclass(cls, skip=(), notes=None) -> list:
    notes = notes or {}
    keys = []
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        keys.append(Key(f.name, _kind(f.default), f.default, notes.get(f.name, f"{cls.__name__}.{f.name}")))
    return keys


def parse_value(key: Key, text):
    if not isinstance(text, str):
        return text
    text = text.strip()
    try:
        if key.kind == "int":
            return int(text)
        if key.kind == "float":
            return float(text)
        if key.kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if key.kind == "ints":
            return [int(x) for x in text.split(",") if x.strip()]
        if key.kind == "strs":
            return [x.strip() for x in text.split(",") if x.strip()]
        return text
    except ValueError:
        raise ConfigError(key.name, f"cannot parse {text!r} as {key.kind}") from None


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return "" if value is None else str(value)


def read_config_file(path) -> dict:
    out = {}
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("config", f"{path}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def dumps_config(values: dict) -> str:
    return "".join(f"{k} = {format_value(values[k])}\n" for k in sorted(values))


def resolve(keys: list, file_values: dict, overrides: dict) -> dict:
    """Defaults < config file < command line; unknown keys and missing required keys fail."""
    by_name = {k.name: k for k in keys}
    for name in list(file_values) + list(overrides):
        if name not in by_name:
            raise ConfigError(name, "unknown key for this subcommand")
    out = {}
    for k in keys:
        if k.name in overrides:
            out[k.name] = parse_value(k, overrides[k.name])
        elif k.name in file_values:
            out[k.name] = parse_value(k, file_values[k.name])
        else:
            out[k.name] = k.default
        if k.required and out[k.name] in (None, ""):
            raise ConfigError(k.name, "required key is missing")
    return out


def pick(values: dict, cls, **extra):
    names = {f.name for f in dataclasses.fields(cls)}
    kw = {k: v for k, v in values.items() if k in names}
    kw.update(extra)
    return cls(**kw)


# -- per-subcommand key sets ----------------------------------------------------

def _path(name, help, required=False, default=None):
    return Key(name, "str", default, help, required)


_NOTES = {
    # synthetic cohort
    "n_patients": "number of patients to draw",
    "vocab_size": "distinct diagnosis codes in the synthetic world",
    "mean_visits": "mean visits per patient (minimum 1)",
    "mean_codes_per_visit": "mean codes per visit (minimum 1)",
    "outcome_prevalence": "target share of positive outcome labels",
    "signal_strength": "log-odds added per risk code carried",
    "prolonged_los_rate": "target share of patients with a stay over 7 days",
    "n_clusters": "latent condition clusters; cluster 0 holds the risk codes",
    "world_seed": "seed of the code universe, separate from the patient draw",
    "zipf_exponent": "skew of code frequencies inside clusters and background",
    "cluster_affinity": "share of code mass drawn from a patient's own clusters",
    "mean_extra_conditions": "mean number of conditions beyond the first",
    "risk_cap": "risk codes counted at most this many times",
    "los_burden_slope": "log-odds of a long stay per sd of code burden",
    "risk_condition_rate": "probability that a patient carries the risk condition",
    "risk_zipf_exponent": "skew of code frequencies inside the risk cluster",
    # model
    "hidden_dim": "hidden and embedding width (n_heads * head_dim)",
    "n_heads": "attention heads per layer",
    "head_dim": "width of each attention head",
    "n_layers": "transformer layers",
    "max_seq_len": "longest code sequence; older visits are dropped beyond it",
    "max_visits": "visit-embedding table size (id 0 is padding)",
    "max_codes_per_visit": "serialization-embedding table size; later codes share the last row",
    "ffn_dim": "width of the position-wise feed-forward layer",
    "dropout_rate": "dropout on embeddings, attention and residual branches",
    "pre_norm": "layer norm before each sublayer instead of after",
    "tie_mlm_weights": "reuse the code embeddings as the masked-LM output matrix",
    "layer_norm_eps": "variance floor inside layer norm",
    "init_std": "std of the truncated-normal weight initialisation",
    # pretraining
    "batch_size": "patients per optimiser step",
    "total_steps": "optimiser steps to run",
    "lr": "AdamW learning rate",
    "weight_decay": "decoupled AdamW weight decay",
    "los_loss_weight": "weight of the prolonged-stay loss next to the masked-LM loss",
    "eval_every": "steps between loss-curve rows and validation AUC",
    "checkpoint_every": "steps between checkpoints (0 = only the final model)",
    "warmup_steps": "linear learning-rate warmup steps (0 = constant)",
    "beta1": "AdamW first-moment decay",
    "beta2": "AdamW second-moment decay",
    "adam_eps": "AdamW denominator epsilon",
    "bucket_factor": "batches per length-sorting bucket",
    # fine-tuning
    "train_size": "training patients to subsample (0 = whole training split)",
    "epochs": "maximum fine-tuning epochs",
    "early_stop_patience": "epochs without validation-AUC gain before stopping",
    "embed_dim": "width of freshly initialised code embeddings",
    "freeze_encoder": "keep the pretrained encoder fixed while fine-tuning",
}
_FT_NOTES = dict(_NOTES, hidden_dim="GRU / RETAIN hidden width",
                 max_seq_len="longest code sequence for baselines without Med-BERT",
                 batch_size="patients per fine-tuning step", lr="fine-tuning learning rate",
                 weight_decay="fine-tuning weight decay")

_SYNTH = _from_dataclass(SynthConfig, skip=("seed",), notes=_NOTES)
_MODEL = _from_dataclass(MedBertConfig, skip=("vocab_size",), notes=_NOTES)
_PRETRAIN = _from_dataclass(PretrainConfig, skip=("seed",), notes=_NOTES)
_FINETUNE = _from_dataclass(FinetuneConfig, skip=("seed", "base", "pretrained"), notes=_FT_NOTES)
_SKIPGRAM = [
    _path("skipgram_checkpoint", "skip-gram embeddings; trained on pretrain_cohort when absent"),
    _path("pretrain_cohort", "cohort for training skip-gram embeddings (default: the fine-tuning cohort)"),
    Key("sg_steps", "int", 2000, "skip-gram training steps"),
    Key("sg_window", "int", 5, "skip-gram window"),
    Key("sg_negatives", "int", 5, "negative samples per positive pair"),
]
_EXPERIMENT = [
    _path("cohort", "labelled patient JSONL", required=True),
    _path("vocab", "vocabulary file written by pretraining", required=True),
    _path("med_bert_checkpoint", "pretrained Med-BERT checkpoint"),
    _path("out_dir", "output directory", required=True),
    Key("conditions", "strs", None, "comma-separated condition labels (default: all ten)"),
    Key("replicates", "int", 10, "replicates per condition"),
] + _SKIPGRAM + _FINETUNE

KEYS = {
    "synth": [_path("out", "output JSONL path", required=True)] + _SYNTH,
    "vocab": [_path("cohort", "patient JSONL", required=True), _path("out", "vocabulary file", required=True)],
    "pretrain": [
        _path("cohort", "pretraining patient JSONL", required=True),
        _path("out_dir", "output directory", required=True),
        _path("vocab", "existing vocabulary file (default: built from the cohort)"),
        _path("resume_from", "checkpoint to resume from"),
    ] + _PRETRAIN + _MODEL,
    "finetune": [
        _path("cohort", "labelled patient JSONL", required=True),
        _path("vocab", "vocabulary file", required=True),
        _path("med_bert_checkpoint", "pretrained Med-BERT checkpoint"),
        _path("out_dir", "output directory", required=True),
        Key("condition", "str", "Med-BERT_only (FFL)", "condition label, e.g. GRU+Med-BERT"),
    ] + _SKIPGRAM + _FINETUNE,
    "ex1": list(_EXPERIMENT),
    "sweep": list(_EXPERIMENT) + [Key("sizes", "ints", [100, 300, 500, 1000, 2000, 5000], "training sizes")],
    "viz": [
        _path("checkpoint", "Med-BERT checkpoint", required=True),
        _path("vocab", "vocabulary file", required=True),
        _path("cohort", "patient JSONL", required=True),
        _path("out_dir", "output directory", required=True),
        _path("patient_id", "patient to show (default: the first)"),
        Key("layer", "int", 0, "layer to render"),
        Key("head", "str", "all", "head index or 'all'"),
        Key("threshold", "float", 0.05, "smallest weight drawn as an edge"),
    ],
    "gradcheck": [
        Key("model", "str", "all", "med_bert | gru | bigru | retain | skipgram | all"),
        Key("tolerance", "float", 1e-4, "largest accepted relative error"),
        Key("max_entries", "int", 0, "entries sampled per parameter (0 = every entry)"),
        Key("vocab_size", "int", 12, "vocabulary size of the micro models"),
    ],
}

ALIASES = {"synth": {"n": "n_patients"}}
