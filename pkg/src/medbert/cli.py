"""Command-line entry point: ``medbert <subcommand> [--config FILE] [--key value ...]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Every output directory receives the resolved configuration (``run.cfg``)
and a ``manifest.json`` with the seed and sha256 checksums of the files
written.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import Artifacts, SkipGramParams, train_skipgram
from .config import ALIASES, KEYS, dumps_config, pick, read_config_file, resolve
from .ehr import Vocabulary, build_vocabulary, order_patient, read_patients, write_patients
from .errors import ConfigError, MedBertError
from .evaluation import (
    LABEL_TO_CONDITION, FinetuneConfig, run_ex1, run_finetune, run_size_sweep,
)
from .gradchecks import run_checks
from .model import MedBert, MedBertConfig
from .pretrain import PretrainConfig, run_pretraining
from .synth import SynthConfig, generate_cohort, split_cohort, subsample_training
from .viz import extract_attention, locality_csv, render_attention, summarize_locality

log = logging.getLogger("medbert")

DESCRIPTIONS = {
    "synth": "generate a synthetic cohort as patient JSONL",
    "vocab": "build a vocabulary file from a cohort",
    "pretrain": "pretrain Med-BERT (masked LM + prolonged stay)",
    "finetune": "fine-tune one condition and report its test AUC",
    "ex1": "compare all conditions at the full training size",
    "sweep": "compare conditions across training-set sizes",
    "viz": "render attention maps for one patient",
    "gradcheck": "verify analytic gradients of the micro models",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="medbert", description="Med-BERT pipeline on structured EHR sequences.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    for name, keys in KEYS.items():
        lines = [f"  {k.name:22s} {k.kind:6s} {'(required) ' if k.required else ''}{k.help}"
                 f"{'' if k.required or k.default is None else f' [default: {k.default}]'}" for k in keys]
        p = sub.add_parser(name, help=DESCRIPTIONS[name], description=DESCRIPTIONS[name],
                           epilog="accepted keys (config file or --key value):\n" + "\n".join(lines),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None,
                       help="seed for every random choice of the run (default: the config file's, else 0)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for replicate runs")
        p.add_argument("--quiet", action="store_true", help="log warnings only")
        aliases = {v: k for k, v in ALIASES.get(name, {}).items()}
        for k in keys:
            flags = [f"--{k.name}"]
            if "_" in k.name:
                flags.append(f"--{k.name.replace('_', '-')}")
            if k.name in aliases:
                flags.append(f"--{aliases[k.name]}")
            p.add_argument(*flags, dest=f"key_{k.name}", metavar=k.kind.upper(), default=None, help=k.help)
    return parser


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _finish(out_dir: Path, command: str, seed: int, values: dict, written: list, prefix: str = "") -> None:
    cfg = out_dir / f"{prefix}run.cfg"
    cfg.write_text(dumps_config(dict(values, seed=seed)))
    manifest = {
        "command": command,
        "seed": seed,
        "version": __version__,
        "config": {k: v for k, v in sorted(values.items())},
        "artifacts": {Path(p).name: _sha256(p) for p in sorted(set(map(str, written))) if Path(p).is_file()},
    }
    (out_dir / f"{prefix}manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _load_cohort(path):
    return [order_patient(p) for p in read_patients(path)]


def _artifacts(values, seed, labels, cohort, out_dir, written) -> Artifacts:
    vocab = Vocabulary.load(values["vocab"])
    art = Artifacts(vocab, med_bert_path=values.get("med_bert_checkpoint"))
    if any(LABEL_TO_CONDITION[c][1] == "skipgram" for c in labels):
        if values.get("skipgram_checkpoint"):
            art.skipgram = SkipGramParams.load(values["skipgram_checkpoint"])
        else:
            source = _load_cohort(values["pretrain_cohort"]) if values.get("pretrain_cohort") else cohort
            dim = art.med_bert().config.hidden_dim if art.med_bert_path else values["embed_dim"]
            art.skipgram = train_skipgram(source, vocab, dim, values["sg_window"], values["sg_negatives"],
                                          values["sg_steps"], seed)
            path = out_dir / "skipgram.ckpt"
            art.skipgram.save(path)
            written.append(path)
    return art


def _finetune_base(values, seed) -> FinetuneConfig:
    return pick(values, FinetuneConfig, seed=seed)


# -- subcommands --------------------------------------------------------------

def cmd_synth(values, seed, jobs):
    config = pick(values, SynthConfig, seed=seed).validate()
    out = Path(values["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_patients(out, generate_cohort(config))
    _finish(out.parent, "synth", seed, values, [out], prefix=f"{out.name}.")
    print(f"wrote {config.n_patients} patients to {out}")


def cmd_vocab(values, seed, jobs):
    vocab = build_vocabulary(_load_cohort(values["cohort"]))
    out = Path(values["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    _finish(out.parent, "vocab", seed, values, [out], prefix=f"{out.name}.")
    print(f"wrote {len(vocab)} tokens to {out}")


def cmd_pretrain(values, seed, jobs):
    config = pick(values, PretrainConfig, seed=seed)
    vocab = Vocabulary.load(values["vocab"]) if values["vocab"] else None
    model_config = pick(values, MedBertConfig, vocab_size=len(vocab) if vocab else 1)
    out = Path(values["out_dir"])
    report = run_pretraining(values["cohort"], config, out, model_config, vocab=vocab,
                             resume_from=values["resume_from"])
    written = [report.model_path, report.vocab_path, report.curve_path] + report.checkpoint_paths
    _finish(out, "pretrain", seed, values, written)
    print(f"final mlm_loss {report.final_mlm_loss:.4f} los_loss {report.final_los_loss:.4f} "
          f"valid LOS AUC {report.valid_los_auc:.4f}")


def cmd_finetune(values, seed, jobs):
    label = values["condition"]
    if label not in LABEL_TO_CONDITION:
        raise ConfigError("condition", f"unknown condition {label!r}")
    base, pretrained = LABEL_TO_CONDITION[label]
    out = Path(values["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cohort = _load_cohort(values["cohort"])
    written = []
    art = _artifacts(values, seed, [label], cohort, out, written)
    config = pick(values, FinetuneConfig, seed=seed, base=base, pretrained=pretrained)
    parts = split_cohort(cohort, (0.7, 0.1, 0.2), seed)
    train = parts.train
    if config.train_size:
        train = subsample_training(train, config.train_size, seed)
    ckpt = out / "finetuned.ckpt"
    res = run_finetune(train, parts.valid, parts.test, config, art, checkpoint_path=ckpt)
    result = out / "result.json"
    result.write_text(json.dumps({"condition": label, "test_auc": res.test_auc, "valid_auc": res.valid_auc,
                                  "best_epoch": res.best_epoch, "epochs_run": res.epochs_run,
                                  "train_size": len(train)}, indent=1, sort_keys=True) + "\n")
    _finish(out, "finetune", seed, values, written + [ckpt, result])
    print(f"{label}: test AUC {res.test_auc:.4f} (valid {res.valid_auc:.4f}, best epoch {res.best_epoch})")


def _experiment(values, seed, jobs, sweep: bool):
    labels = values["conditions"] or list(LABEL_TO_CONDITION)
    out = Path(values["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cohort = _load_cohort(values["cohort"])
    written = []
    art = _artifacts(values, seed, labels, cohort, out, written)
    base = _finetune_base(values, seed)
    if sweep:
        report = run_size_sweep(cohort, values["sizes"], base, art, labels, values["replicates"], seed, jobs)
    else:
        report = run_ex1(cohort, base, art, labels, values["replicates"], seed, jobs)
    written += report.write(out).values()
    _finish(out, report.name, seed, values, written)
    print(report.table())


def cmd_ex1(values, seed, jobs):
    _experiment(values, seed, jobs, sweep=False)


def cmd_sweep(values, seed, jobs):
    _experiment(values, seed, jobs, sweep=True)


def cmd_viz(values, seed, jobs):
    model = MedBert.load(values["checkpoint"])
    vocab = Vocabulary.load(values["vocab"])
    cohort = read_patients(values["cohort"])
    pid = values["patient_id"]
    matches = [p for p in cohort if pid is None or p.patient_id == pid]
    if not matches:
        raise ConfigError("patient_id", f"no patient {pid!r} in {values['cohort']}")
    record = extract_attention(model, matches[0], vocab)
    head = values["head"]
    if head != "all":
        try:
            head = int(head)
        except ValueError:
            raise ConfigError("head", f"expected an integer or 'all', got {head!r}") from None
    out = Path(values["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "attention.html", out / "attention.json", out / "locality.csv"]
    paths[0].write_text(render_attention(record, values["layer"], head, values["threshold"]))
    paths[1].write_text(record.to_json() + "\n")
    paths[2].write_text(locality_csv(summarize_locality(record)))
    _finish(out, "viz", seed, values, paths)
    print(f"attention for {record.patient_id} ({record.length} codes) written to {out}")


def cmd_gradcheck(values, seed, jobs):
    reports = run_checks(values["model"], values["tolerance"], values["max_entries"] or None,
                         values["vocab_size"])
    ok = True
    for name, rep in reports.items():
        for line in rep.lines():
            log.info("%s %s", name, line)
        status = "pass" if rep.passed else "FAIL"
        ok &= rep.passed
        print(f"{name:9s} max relative error {rep.worst:.3e} (tolerance {rep.tolerance:g}) {status}")
    return 0 if ok else 2


COMMANDS = {
    "synth": cmd_synth, "vocab": cmd_vocab, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "ex1": cmd_ex1, "sweep": cmd_sweep, "viz": cmd_viz, "gradcheck": cmd_gradcheck,
}


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip() + "\nmedbert: a subcommand is required")
        keys = KEYS[args.command]
        overrides = {k.name: getattr(args, f"key_{k.name}") for k in keys
                     if getattr(args, f"key_{k.name}") is not None}
        file_values = read_config_file(args.config) if args.config else {}
        file_seed = file_values.pop("seed", "0")
        try:
            seed = args.seed if args.seed is not None else int(file_seed)
        except ValueError:
            raise ConfigError("seed", f"cannot parse {file_seed!r} as int") from None
        values = resolve(keys, file_values, overrides)
        if args.jobs < 1:
            raise ConfigError("jobs", "must be >= 1")
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        code = COMMANDS[args.command](values, seed, args.jobs)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (MedBertError, OSError, FloatingPointError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return code or 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
