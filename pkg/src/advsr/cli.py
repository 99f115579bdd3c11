"""Command-line pipeline: synth-data, train, attack, defend, evaluate, report.

One configuration file (see config.py) drives every subcommand, and one
global seed fans out to per-stage seeds through a documented hash
(seeding.derive_seed over path-style labels), so any stage can be rerun in
isolation and reproduce its part of a full run bit for bit.

Logging is split by audience: line-oriented JSON events go to stderr for
machines, a short human summary goes to stdout.  Exit codes: 0 success,
1 usage error (bad flags or config), 2 runtime failure, 3 threshold-check
failure under `evaluate --check`.

The output root from the config can be overridden with the environment
variable ADVSR_OUTPUT_ROOT, so one config can drive several result trees.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import attacks, corpus, defenses, dsp, evaluate
from .config import ConfigError, load_config
from .model import AcousticModel, train
from .seeding import derive_seed
from .transcript import Transcript

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_CHECK = 3

OUTPUT_ROOT_ENV = "ADVSR_OUTPUT_ROOT"


class UsageError(Exception):
    """Bad flags, bad config, or an impossible flag combination."""


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on usage errors; the pipeline reserves 2
    for runtime failures, so remap argparse's own complaints to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _log(event, **fields):
    record = {"ts": round(time.time(), 3), "event": event}
    record.update(fields)
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
    sys.stderr.flush()


def _say(text):
    sys.stdout.write(text + "\n")
    sys.stdout.flush()


# --------------------------------------------------------------------------
# shared plumbing


def _load(args):
    cfg = load_config(args.config)
    override = os.environ.get(OUTPUT_ROOT_ENV)
    if override:
        cfg = dataclasses.replace(cfg, output=Path(override).resolve())
    return cfg


def _parse_chain_flag(text):
    try:
        return defenses.parse_chain(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _output_dir(cfg, *parts):
    path = cfg.output.joinpath(*parts)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _checkpoint_path(cfg):
    return cfg.output / "models" / f"{cfg.model_name}.ckpt"


def _load_manifest(cfg):
    manifest_path = cfg.corpus_root / "manifest.jsonl"
    if not manifest_path.is_file():
        raise FileNotFoundError(
            f"no corpus manifest at {manifest_path}; run `advsr synth-data` first"
        )
    return corpus.Manifest.load(manifest_path)


def _entries(cfg, manifest):
    entries = manifest.split(cfg.eval_split)
    if cfg.eval_limit:
        entries = entries[: cfg.eval_limit]
    return entries


def _eval_models(cfg):
    """Models for the evaluation matrix: explicit checkpoints, or the one
    this config trains."""
    paths = list(cfg.eval_models) or [_checkpoint_path(cfg)]
    models = []
    for path in paths:
        if not Path(path).is_file():
            raise FileNotFoundError(f"missing checkpoint {path}; run `advsr train` first")
        models.append(AcousticModel.load(path))
    return models


def _jobs(cfg, args):
    if getattr(args, "jobs", None) is not None:
        value = args.jobs
    else:
        value = cfg.jobs
    return value if value > 0 else (os.cpu_count() or 1)


# --------------------------------------------------------------------------
# subcommands


def _cmd_synth_data(args):
    cfg = _load(args)
    manifest_path = cfg.corpus_root / "manifest.jsonl"
    if manifest_path.is_file() and not args.force:
        _say(f"corpus already present at {cfg.corpus_root} (use --force to rebuild)")
        _log("synth_data_skipped", root=str(cfg.corpus_root))
        return EXIT_OK
    vocabulary = cfg.vocabulary or corpus.VOCABULARY
    seed = cfg.stage_seed("corpus")
    _log("synth_data_start", root=str(cfg.corpus_root), train=cfg.n_train,
         test=cfg.n_test, seed=seed)
    t0 = time.time()
    corpus.build_corpus(cfg.corpus_root, n_train=cfg.n_train, n_test=cfg.n_test,
                        seed=seed, vocabulary=vocabulary)
    _log("synth_data_done", seconds=round(time.time() - t0, 1))
    _say(f"wrote {cfg.n_train} train / {cfg.n_test} test utterances to {cfg.corpus_root}")
    return EXIT_OK


def _cmd_train(args):
    cfg = _load(args)
    manifest = _load_manifest(cfg)
    train_cfg = cfg.train_config()
    overrides = {}
    if args.label_smoothing is not None:
        overrides["label_smoothing"] = args.label_smoothing
    if args.rs_aug:
        overrides["rs_aug"] = True
        overrides["rs_sigma_range"] = (0.0, 0.3)
    if args.wave_aug:
        overrides["wave_aug"] = True
    if overrides:
        train_cfg = dataclasses.replace(train_cfg, **overrides)
    model = AcousticModel(cfg.model_config(), seed=derive_seed(cfg.seed, "model", cfg.model_name))
    _log("train_start", model=cfg.model_name, epochs=train_cfg.epochs,
         label_smoothing=train_cfg.label_smoothing, rs_aug=train_cfg.rs_aug,
         wave_aug=train_cfg.wave_aug, seed=train_cfg.seed)
    t0 = time.time()
    curve = train(model, manifest, cfg.corpus_root, train_cfg)
    seconds = round(time.time() - t0, 1)
    ckpt = _checkpoint_path(cfg)
    _output_dir(cfg, "models")
    model.save(ckpt)
    curve_path = ckpt.with_name(f"{cfg.model_name}_loss.csv")
    lines = ["epoch,mean_loss"] + [f"{i + 1},{loss:.6f}" for i, loss in enumerate(curve)]
    curve_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    _log("train_done", model=cfg.model_name, seconds=seconds,
         final_loss=round(curve[-1], 6), checkpoint=str(ckpt))
    _say(f"trained {cfg.model_name}: final mean loss {curve[-1]:.4f} "
         f"({train_cfg.epochs} epochs, {seconds}s) -> {ckpt}")
    return EXIT_OK


def _attack_cfg_from_flags(cfg, args):
    """Resolve --method/--eps/--iterations to one attack configuration."""
    seed = cfg.stage_seed("attack")
    if args.method is None:
        raise UsageError("attack needs --method (fgsm, pgd, or imperceptible)")
    if args.method == "imperceptible":
        if args.eps is not None:
            raise UsageError("imperceptible ignores --eps; its budget starts at 0.01")
        return attacks.imperceptible_config(seed=seed)
    if args.eps is None:
        raise UsageError(f"--method {args.method} needs --eps")
    if args.method == "fgsm":
        return attacks.fgsm_config(args.eps, seed=seed)
    iterations = args.iterations if args.iterations is not None else 7
    return attacks.pgd_config(args.eps, iterations=iterations, seed=seed)


def _cmd_attack(args):
    cfg = _load(args)
    manifest = _load_manifest(cfg)
    entries = _entries(cfg, manifest)
    pool = manifest.transcripts("train")
    model_path = Path(args.model) if args.model else _checkpoint_path(cfg)
    if not model_path.is_file():
        raise FileNotFoundError(f"missing checkpoint {model_path}; run `advsr train` first")
    model = AcousticModel.load(model_path)
    attack_cfg = _attack_cfg_from_flags(cfg, args)

    chain = ()
    if args.defense_chain is not None:
        chain = _parse_chain_flag(args.defense_chain)
    if args.white_box:
        if not chain:
            raise UsageError("--white-box needs --defense-chain to attack through")
        if not all(el.differentiable for el in chain):
            raise UsageError(
                "--white-box needs a differentiable chain: every element must "
                "carry the '@diff' suffix (e.g. 'resynth@diff')"
            )
        if attack_cfg.method == "imperceptible":
            raise UsageError("the imperceptible attack cannot be crafted through a defense chain")
    elif chain:
        raise UsageError("--defense-chain only matters with --white-box; "
                         "use `advsr defend` to apply a chain to finished audio")

    label = args.method if args.method == "imperceptible" else f"{args.method}_eps{args.eps:g}"
    out_dir = _output_dir(cfg, "attacks", label)
    seed = cfg.stage_seed("attack")
    targets = evaluate.attack_targets(entries, pool, seed, model=model, corpus_root=cfg.corpus_root)
    _log("attack_start", method=args.method, model=model.config.name,
         utterances=len(entries), out=str(out_dir), white_box=bool(args.white_box))
    t0 = time.time()
    linfs = []
    successes = 0
    for entry in entries:
        wave = entry.load(cfg.corpus_root)
        result = attacks.run_attack(model, wave, attack_cfg, targets[entry.id],
                                    defense_chain=chain if args.white_box else None)
        attacks.write_attack_outputs(out_dir, entry.id, result,
                                     Transcript.from_text(entry.transcript),
                                     targets[entry.id])
        linfs.append(result.linf)
        successes += int(result.success)
        _log("attack_utt", utt=entry.id, linf=round(result.linf, 8),
             success=result.success,
             decoded=getattr(result.decoded, "text", result.decoded))
    seconds = round(time.time() - t0, 1)
    _log("attack_done", seconds=seconds, mean_linf=float(np.mean(linfs)),
         successes=successes, total=len(entries))
    _say(f"{args.method} on {len(entries)} utterances: {successes} reached their target, "
         f"mean L-inf {np.mean(linfs):.2e} ({seconds}s) -> {out_dir}")
    return EXIT_OK


def _cmd_defend(args):
    cfg = _load(args)
    chain = _parse_chain_flag(args.defense_chain)
    if not chain:
        raise UsageError("defend needs a non-empty --defense-chain")
    in_dir = Path(args.input) if args.input else cfg.output / "attacks"
    if not in_dir.is_dir():
        raise FileNotFoundError(f"no input directory {in_dir}")
    wavs = sorted(in_dir.rglob("*.wav"))
    if not wavs:
        raise FileNotFoundError(f"no .wav files under {in_dir}")
    label = defenses.chain_label(chain)
    out_dir = _output_dir(cfg, "defended", label.replace(":", "_"))
    seed = cfg.stage_seed("defend")
    _log("defend_start", chain=label, files=len(wavs), out=str(out_dir))
    t0 = time.time()
    for path in wavs:
        wave = dsp.read_wav(path)
        out = defenses.apply_chain(chain, wave, derive_seed(seed, label, path.stem))
        dsp.write_wav(out_dir / path.name, out)
    seconds = round(time.time() - t0, 1)
    _log("defend_done", seconds=seconds)
    _say(f"applied `{label}` to {len(wavs)} files ({seconds}s) -> {out_dir}")
    return EXIT_OK


def _matrix_inputs(cfg):
    manifest = _load_manifest(cfg)
    entries = _entries(cfg, manifest)
    pool = manifest.transcripts("train")
    models = _eval_models(cfg)
    attack_cfgs = [parsed for _, parsed in cfg.attack_configs()]
    chains = cfg.chains()
    return models, attack_cfgs, chains, entries, pool


def _emit_reports(cfg, records):
    paths = []
    _output_dir(cfg)
    for fmt in cfg.formats:
        ext = {"csv": "csv", "markdown": "md", "json": "json"}[fmt]
        path = cfg.output / f"report.{ext}"
        evaluate.emit_report(records, path, fmt)
        paths.append(path)
    return paths


def _cmd_evaluate(args):
    cfg = _load(args)
    models, attack_cfgs, chains, entries, pool = _matrix_inputs(cfg)
    cache_dir = _output_dir(cfg, "cache")
    jobs = _jobs(cfg, args)
    _log("evaluate_start", models=[m.config.name for m in models],
         attacks=list(cfg.attack_grid), chains=list(cfg.defense_chains),
         utterances=len(entries), jobs=jobs, resume=bool(args.resume))
    if not args.resume:
        # Without --resume every cell is recomputed; cached cells are only
        # trusted when the caller explicitly asks to continue a run.
        for stale in cache_dir.glob("*/records.json"):
            stale.unlink()
    t0 = time.time()
    records = evaluate.run_matrix(
        models, attack_cfgs, chains, entries, cfg.corpus_root, pool,
        seed=cfg.stage_seed("evaluate"), cache_dir=cache_dir,
        artifacts=cfg.artifacts, log=_log, jobs=jobs,
    )
    seconds = round(time.time() - t0, 1)
    paths = _emit_reports(cfg, records)
    _log("evaluate_done", seconds=seconds, records=len(records),
         reports=[str(p) for p in paths])
    _say(f"evaluated {len(records)} cells in {seconds}s; reports: "
         + ", ".join(str(p) for p in paths))
    if args.check:
        failures = _threshold_failures(records)
        for line in failures:
            _say("CHECK FAIL: " + line)
            _log("check_failed", detail=line)
        if failures:
            return EXIT_CHECK
        _say("all threshold checks passed")
    return EXIT_OK


def _threshold_failures(records):
    """Report-level invariants behind `evaluate --check`.

    Checks apply to whichever cells the configured matrix actually
    produced: clean accuracy, monotone single-step attack damage with
    high-epsilon breakage, iterated-attack dominance, and the perturbation
    budget. A slice that lacks the relevant cells skips that check.
    """
    failures = []
    by_model = {}
    for r in records:
        by_model.setdefault(r.model, []).append(r)
    for model, recs in sorted(by_model.items()):
        clean = [r for r in recs if r.attack == "none" and r.defense == "none"
                 and r.condition == evaluate.CLEAN]
        for r in clean:
            if r.wer > 0.05:
                failures.append(f"{model}: clean WER {r.wer:.2%} exceeds 5%")
        fgsm = sorted(
            (r.epsilon, r.wer)
            for r in recs
            if r.attack == "fgsm" and r.defense == "none"
            and r.condition == evaluate.GROUND_TRUTH and not r.white_box
        )
        for (e1, w1), (e2, w2) in zip(fgsm, fgsm[1:]):
            if w2 < w1 - 1e-9:
                failures.append(
                    f"{model}: fgsm WER decreases from {w1:.2%} (eps={e1:g}) "
                    f"to {w2:.2%} (eps={e2:g})"
                )
        for eps, wer in fgsm:
            if eps >= 0.1 and wer < 0.80:
                failures.append(
                    f"{model}: fgsm at eps={eps:g} only reaches {wer:.2%} WER (< 80%)"
                )
        fgsm_by_eps = dict(fgsm)
        pgd = [
            (r.epsilon, r.wer)
            for r in recs
            if r.attack == "pgd" and r.defense == "none"
            and r.condition == evaluate.GROUND_TRUTH and not r.white_box
        ]
        for eps, wer in pgd:
            if eps in fgsm_by_eps and wer < fgsm_by_eps[eps] - 0.05:
                failures.append(
                    f"{model}: pgd at eps={eps:g} ({wer:.2%}) trails fgsm "
                    f"({fgsm_by_eps[eps]:.2%}) by more than 5 points"
                )
        for r in recs:
            if r.attack in ("fgsm", "pgd") and r.condition == evaluate.GROUND_TRUTH:
                if r.mean_linf is not None and r.epsilon and r.mean_linf > r.epsilon + 1e-12:
                    failures.append(
                        f"{model}: {r.attack} mean L-inf {r.mean_linf:.3e} exceeds "
                        f"eps={r.epsilon:g}"
                    )
    return failures


def _cmd_report(args):
    cfg = _load(args)
    models, attack_cfgs, chains, entries, pool = _matrix_inputs(cfg)
    cache_root = cfg.output / "cache"
    records = []
    missing = 0
    seed = cfg.stage_seed("evaluate")
    for model in models:
        for chain in chains:
            for attack_cfg in attack_cfgs:
                key = evaluate.cell_cache_key(model, chain, attack_cfg, entries, seed)
                path = cache_root / key / "records.json"
                if not path.is_file():
                    missing += 1
                    continue
                records.extend(
                    evaluate.CellRecord.from_json(r)
                    for r in json.loads(path.read_text(encoding="utf-8"))
                )
    if missing:
        raise FileNotFoundError(
            f"{missing} matrix cells have no cached results under {cache_root}; "
            "run `advsr evaluate` first"
        )
    paths = _emit_reports(cfg, records)
    _log("report_done", records=len(records), reports=[str(p) for p in paths])
    _say("reports regenerated from cache: " + ", ".join(str(p) for p in paths))
    return EXIT_OK


# --------------------------------------------------------------------------
# argument wiring


def build_parser():
    parser = _Parser(
        prog="advsr",
        description="Train a small speech recognizer, attack it with "
                    "adversarial audio, defend it, and score the matrix.",
    )
    parser.add_argument("-c", "--config", default="run.ini",
                        help="configuration file (default: ./run.ini)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic spoken-digit corpus")
    p.add_argument("--force", action="store_true",
                   help="rebuild even if a manifest already exists")
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("train", help="train the recognizer and write a checkpoint")
    p.add_argument("--label-smoothing", type=float, default=None, metavar="WEIGHT",
                   help="mix a uniform target distribution into the loss")
    p.add_argument("--rs-aug", action="store_true",
                   help="augment training audio with gaussian noise, sigma drawn from 0-0.3")
    p.add_argument("--wave-aug", action="store_true",
                   help="train on re-synthesized copies of the training audio")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("attack", help="write adversarial WAVs for the evaluation split")
    p.add_argument("--model", default=None, metavar="CKPT",
                   help="checkpoint to attack (default: the one this config trains)")
    p.add_argument("--method", choices=("fgsm", "pgd", "imperceptible"), default=None)
    p.add_argument("--eps", type=float, default=None, help="max-norm budget")
    p.add_argument("--iterations", type=int, default=None,
                   help="pgd iterations (default 7, step = eps/5)")
    p.add_argument("--defense-chain", default=None, metavar="CHAIN",
                   help="defense chain to attack through (white-box only)")
    p.add_argument("--white-box", action="store_true",
                   help="backpropagate through the defense chain jointly with the model")
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("defend", help="pass finished WAVs through a defense chain")
    p.add_argument("--defense-chain", required=True, metavar="CHAIN",
                   help="e.g. 'rs:0.01', 'resynth', or 'rs:0.01+resynth'")
    p.add_argument("--input", default=None, metavar="DIR",
                   help="directory of WAVs (default: OUTPUT/attacks)")
    p.set_defaults(func=_cmd_defend)

    p = sub.add_parser("evaluate", help="run the full attack-by-defense matrix")
    p.add_argument("--resume", action="store_true",
                   help="reuse cached cells from an interrupted run")
    p.add_argument("--check", action="store_true",
                   help="verify report-level thresholds; exit 3 on failure")
    p.add_argument("--jobs", type=int, default=None,
                   help="worker threads (default: config, then logical CPUs)")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="regenerate report files from cached cells")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        _log("usage_error", detail=str(exc))
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except Exception as exc:  # every non-usage failure maps to exit code 2
        _log("runtime_error", kind=type(exc).__name__, detail=str(exc))
        traceback.print_exc()
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
