"""Command-line entry point.

Subcommands: gen-data, label, train, eval, sweep, report.  Each command takes
an optional JSON config file plus flag overrides (flags win), writes its
artifacts into --out, and echoes the effective configuration there as
effective_config.json so any run can be replayed from its artifacts alone.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional

from . import __version__, dataset, kernels, metrics, report_labeler, train as train_mod
from .errors import ConfigError, DivergenceError, ManifestError
from .labels import UncertainPolicy
from .model import load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4


def _load_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ManifestError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc


def _merge(defaults: dict, file_cfg: dict, flags: dict) -> dict:
    """defaults <- config file <- explicitly-set flags."""
    merged = dict(defaults)
    for k, v in file_cfg.items():
        if k not in merged:
            raise ConfigError(f"unknown config key {k!r}")
        merged[k] = v
    for k, v in flags.items():
        if v is not None:
            merged[k] = v
    return merged


def _echo_config(out_dir: str, subcommand: str, effective: dict) -> None:
    payload = {"subcommand": subcommand, "version": __version__,
               "kernel_backend": kernels.backend_name(), "config": effective}
    with open(os.path.join(out_dir, "effective_config.json"), "w",
              encoding="utf-8") as fh:
        fh.write(json.dumps(payload, indent=2, sort_keys=True))
        fh.write("\n")


def _parse_fractions(text: str, flag: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"{flag} needs three comma-separated fractions, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"{flag} has a non-numeric fraction: {text!r}") from exc


def _load_split(args, which: str):
    samples = dataset.filter_frontal(dataset.read_manifest(args.data))
    fractions = _parse_fractions(args.split, "--split")
    tr, va, te = dataset.split_by_patient(samples, fractions, args.split_seed)
    return {"train": tr, "val": va, "test": te, "all": samples}[which]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    defaults = dataset.SynthConfig().to_dict()
    flags = {"n_patients": args.n_patients,
             "images_per_patient": args.images_per_patient,
             "seed": args.seed,
             "ambiguity_fraction": args.ambiguity_fraction,
             "not_mentioned_rate": args.not_mentioned_rate,
             "uncertain_rate": args.uncertain_rate,
             "noise_sigma": args.noise_sigma,
             "image_size": args.image_size,
             "lateral_fraction": args.lateral_fraction}
    effective = _merge(defaults, _load_config_file(args.config), flags)
    cfg = dataset.SynthConfig.from_dict(effective)
    samples = dataset.generate(cfg)
    os.makedirs(args.out, exist_ok=True)
    dataset.write_manifest(samples, args.out)
    _echo_config(args.out, "gen-data", cfg.to_dict())
    print(f"wrote {len(samples)} samples from {cfg.n_patients} patients to {args.out}")
    return EXIT_OK


def _read_documents(path: str):
    if os.path.isdir(path):
        docs = []
        for name in sorted(os.listdir(path)):
            full = os.path.join(path, name)
            if os.path.isfile(full):
                with open(full, "r", encoding="utf-8") as fh:
                    docs.append((os.path.splitext(name)[0], fh.read()))
        return docs
    if not os.path.isfile(path):
        raise ManifestError(f"input path not found: {path}")
    docs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                docs.append((str(row["id"]), row["text"]))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ConfigError(
                    f"{path}:{lineno}: expected JSONL with id and text fields") from exc
    return docs


def _cmd_label(args) -> int:
    lex = (report_labeler.MentionLexicon.from_file(args.lexicon)
           if args.lexicon else report_labeler.MentionLexicon.default())
    docs = _read_documents(args.input)
    lines = []
    for doc_id, text in docs:
        states = report_labeler.label_report(text, lex)
        lines.append(json.dumps({"id": doc_id,
                                 "states": [s.value for s in states]},
                                separators=(",", ":")))
    out_dir = os.path.dirname(os.path.abspath(args.output))
    os.makedirs(out_dir, exist_ok=True)
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    print(f"labeled {len(docs)} reports -> {args.output}")
    return EXIT_OK


def _train_config_from_args(args) -> train_mod.TrainConfig:
    defaults = train_mod.TrainConfig().to_dict()
    meta_features = None
    if args.baseline:
        meta_features = []   # sentinel: baseline requested via flag
    elif args.meta_features is not None:
        meta_features = args.meta_features.split(",")
    flags = {"preset": args.preset, "epochs": args.epochs,
             "batch_size": args.batch_size, "learning_rate": args.lr,
             "optimizer": args.optimizer, "seed": args.seed,
             "policy": args.policy,
             "meta_features": meta_features,
             "meta_hidden": args.meta_hidden, "meta_out": args.meta_out}
    effective = _merge(defaults, _load_config_file(args.config), flags)
    if effective["meta_features"] == []:
        effective["meta_features"] = None
    return train_mod.TrainConfig.from_dict(effective)


def _cmd_train(args) -> int:
    cfg = _train_config_from_args(args)
    tr = _load_split(args, "train")
    va = _load_split(args, "val")
    model, log = train_mod.fit(cfg, tr, va)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(model, os.path.join(args.out, "checkpoint.json"))
    with open(os.path.join(args.out, "runlog.csv"), "w", encoding="utf-8") as fh:
        fh.write(log.to_csv())
    echoed = cfg.to_dict()
    echoed["split"] = args.split
    echoed["split_seed"] = args.split_seed
    _echo_config(args.out, "train", echoed)
    best = max((r.val_macro_auroc for r in log.rows
                if r.val_macro_auroc is not None), default=None)
    print(f"trained {cfg.preset} ({'fusion' if cfg.meta_features else 'baseline'}) "
          f"for {cfg.epochs} epochs; best val macro AUROC: "
          f"{'undef' if best is None else f'{best:.5f}'}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    samples = _load_split(args, args.eval_split)
    policy = UncertainPolicy(args.policy) if args.policy else UncertainPolicy.AS_NEGATIVE
    report = metrics.evaluate(model, samples, policy=policy)
    for key in args.subgroup or []:
        report.subgroups.append(
            metrics.subgroup_report(model, samples, key, policy=policy))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    text = metrics.render_table({args.name: report})
    if report.subgroups:
        text += "\n" + metrics.render_subgroups(report.subgroups)
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    _echo_config(args.out, "eval", {
        "checkpoint": args.checkpoint, "data": args.data,
        "eval_split": args.eval_split, "split": args.split,
        "split_seed": args.split_seed, "policy": policy.value,
        "subgroup": list(args.subgroup or []), "name": args.name})
    print(text, end="")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    spec_cfg = _load_config_file(args.spec)
    if "sweep" not in spec_cfg:
        raise ConfigError(f"sweep spec {args.spec} must contain a 'sweep' object")
    spec = train_mod.SweepSpec.from_dict(spec_cfg["sweep"])
    base = train_mod.TrainConfig.from_dict(
        {**train_mod.TrainConfig().to_dict(), **spec_cfg.get("base", {})})
    tr = _load_split(args, "train")
    va = _load_split(args, "val")
    result = train_mod.sweep(spec, base, tr, va, jobs=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "trials.csv"), "w", encoding="utf-8") as fh:
        fh.write(result.to_csv())
    for t in result.trials:
        if t.log is not None:
            with open(os.path.join(args.out, f"runlog_trial_{t.trial_id}.csv"),
                      "w", encoding="utf-8") as fh:
                fh.write(t.log.to_csv())
    if result.winner is not None:
        with open(os.path.join(args.out, "best_config.json"), "w",
                  encoding="utf-8") as fh:
            fh.write(json.dumps(result.winner.to_dict(), indent=2, sort_keys=True))
            fh.write("\n")
    _echo_config(args.out, "sweep", {
        "sweep": spec.to_dict(), "base": base.to_dict(),
        "data": args.data, "split": args.split, "split_seed": args.split_seed,
        "jobs": args.jobs})
    n_ok = sum(1 for t in result.trials if t.status == "ok")
    print(f"swept {len(result.trials)} trials ({n_ok} ok) -> {args.out}/trials.csv")
    return EXIT_OK


def _cmd_report(args) -> int:
    def _read_report(path: str) -> metrics.EvalReport:
        if not os.path.isfile(path):
            raise ManifestError(f"report not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            return metrics.EvalReport.from_json(fh.read())

    baseline = _read_report(args.baseline)
    fusion = _read_report(args.fusion)
    text = metrics.render_comparison(baseline, fusion)
    payload = metrics.compare_reports(baseline, fusion)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "comparison.txt"), "w", encoding="utf-8") as fh:
            fh.write(text)
        with open(os.path.join(args.out, "comparison.json"), "w", encoding="utf-8") as fh:
            fh.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        _echo_config(args.out, "report",
                     {"baseline": args.baseline, "fusion": args.fusion})
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_split_flags(p) -> None:
    p.add_argument("--split", default="0.7,0.1,0.2",
                   help="train,val,test fractions (default 0.7,0.1,0.2)")
    p.add_argument("--split-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cxrfusion",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="SynthConfig JSON file")
    p.add_argument("--n-patients", type=int, dest="n_patients")
    p.add_argument("--images-per-patient", type=int, dest="images_per_patient")
    p.add_argument("--seed", type=int)
    p.add_argument("--ambiguity-fraction", type=float, dest="ambiguity_fraction")
    p.add_argument("--not-mentioned-rate", type=float, dest="not_mentioned_rate")
    p.add_argument("--uncertain-rate", type=float, dest="uncertain_rate")
    p.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--lateral-fraction", type=float, dest="lateral_fraction")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("label", help="label free-text reports")
    p.add_argument("--input", required=True,
                   help="JSONL file with id/text, or a directory of text files")
    p.add_argument("--output", required=True, help="output JSONL path")
    p.add_argument("--lexicon", help="lexicon JSON (default: shipped lexicon)")
    p.set_defaults(func=_cmd_label)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="TrainConfig JSON file")
    p.add_argument("--preset", choices=sorted(train_mod.PRESETS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=["adam", "sgd-momentum"])
    p.add_argument("--seed", type=int)
    p.add_argument("--policy", choices=[p.value for p in UncertainPolicy])
    p.add_argument("--baseline", action="store_true",
                   help="image-only model (no metadata branch)")
    p.add_argument("--meta-features", dest="meta_features",
                   help="comma-separated subset of age,sex,bmi,race,insurance")
    p.add_argument("--meta-hidden", type=int, dest="meta_hidden")
    p.add_argument("--meta-out", type=int, dest="meta_out")
    _add_split_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-split", dest="eval_split", default="test",
                   choices=["train", "val", "test", "all"])
    p.add_argument("--subgroup", action="append",
                   choices=["age", "sex", "bmi", "race", "insurance"])
    p.add_argument("--policy", choices=[p.value for p in UncertainPolicy])
    p.add_argument("--name", default="model", help="row label in the text table")
    _add_split_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="hyperparameter sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spec", required=True,
                   help="JSON with 'sweep' (SweepSpec) and optional 'base' (TrainConfig)")
    p.add_argument("--jobs", type=int, default=1)
    _add_split_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="compare baseline vs fusion eval reports")
    p.add_argument("--baseline", required=True)
    p.add_argument("--fusion", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ManifestError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
