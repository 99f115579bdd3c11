"""Word error rate scoring and the attack-by-defense evaluation matrix.

WER is word-level Levenshtein distance aggregated corpus-style: total edit
distance over total reference words, which can legitimately exceed 100%
when hypotheses insert words.  Each attacked cell is scored under two
conditions from the same decoded hypotheses: against the true transcript
(how much recognition degraded) and against the attacker's target phrase
(how close the attack came to planting it).  Clean cells score only the
defended, unattacked audio.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attacks as attacks_mod
from . import defenses as defenses_mod
from .dsp import DEFAULT_FRONTEND, num_frames, write_wav
from .model import frames_after_conv
from .seeding import derive_seed
from .transcript import Transcript

CLEAN = "clean"
GROUND_TRUTH = "ground_truth"
TARGET = "target"


class EmptyReferenceError(ValueError):
    """WER against an empty reference is undefined."""


def edit_distance(reference, hypothesis):
    """Word-level Levenshtein distance with unit costs."""
    ref, hyp = list(reference), list(hypothesis)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(
                prev[j] + 1,          # deletion of the reference word
                cur[j - 1] + 1,       # insertion of the hypothesis word
                prev[j - 1] + (r != h),
            )
        prev = cur
    return prev[len(hyp)]


def edit_alignment(reference, hypothesis):
    """Edit script as (op, ref_word, hyp_word) tuples for audit traces.

    Ties between operations resolve substitution over insertion over
    deletion, so traces are deterministic.
    """
    ref, hyp = list(reference), list(hypothesis)
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=int)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            dist[i, j] = min(
                dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                dist[i, j - 1] + 1,
                dist[i - 1, j] + 1,
            )
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            op = "match" if ref[i - 1] == hyp[j - 1] else "substitute"
            ops.append((op, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif j > 0 and dist[i, j] == dist[i, j - 1] + 1:
            ops.append(("insert", None, hyp[j - 1]))
            j -= 1
        else:
            ops.append(("delete", ref[i - 1], None))
            i -= 1
    ops.reverse()
    return ops


def wer(reference, hypothesis):
    """Single-pair word error rate as a fraction; may exceed 1."""
    ref_words = reference.words if isinstance(reference, Transcript) else tuple(reference)
    hyp_words = hypothesis.words if isinstance(hypothesis, Transcript) else tuple(hypothesis)
    if not ref_words:
        raise EmptyReferenceError("reference transcript is empty")
    return edit_distance(ref_words, hyp_words) / len(ref_words)


@dataclass
class CellRecord:
    """One report row: a (model, defense, attack, condition) measurement."""

    model: str
    defense: str
    attack: str
    epsilon: float | None
    condition: str
    wer: float
    utterances: int
    errors: int
    reference_words: int
    mean_linf: float | None = None
    runtime_s: float = 0.0
    white_box: bool = False

    def to_json(self):
        return {
            "model": self.model,
            "defense": self.defense,
            "attack": self.attack,
            "epsilon": self.epsilon,
            "condition": self.condition,
            "wer": self.wer,
            "utterances": self.utterances,
            "errors": self.errors,
            "reference_words": self.reference_words,
            "mean_linf": self.mean_linf,
            "runtime_s": self.runtime_s,
            "white_box": self.white_box,
        }

    @classmethod
    def from_json(cls, rec):
        return cls(**rec)


def _attack_label(cfg, white_box=False):
    if cfg is None:
        return "none"
    return cfg.method + ("/wb" if white_box else "")


def _defense_seed(seed, model_name, chain, utt_id):
    # Defense draws depend on (model, chain, utterance) but never on the
    # attack, so clean and attacked rows share the exact same noise and an
    # epsilon-zero attack scores identically to the clean condition.
    return derive_seed(seed, "defense", model_name, defenses_mod.chain_label(chain), utt_id)


def _decode_defended(model, wave, chain, seed):
    defended = defenses_mod.apply_chain(chain, wave, seed)
    return model.transcribe(defended)


def evaluate_clean(model, entries, corpus_root, chain, seed):
    errors = 0
    words = 0
    for e in entries:
        hyp = _decode_defended(
            model, e.load(corpus_root), chain, _defense_seed(seed, model.config.name, chain, e.id)
        )
        ref = Transcript.from_text(e.transcript)
        errors += edit_distance(ref.words, hyp.words)
        words += len(ref.words)
    return errors, words


def _run_one_attack(model, wave, target, attack_cfg, chain, white_box):
    attack_chain = chain if (white_box and attack_cfg.method in ("fgsm", "pgd")) else None
    return attacks_mod.run_attack(model, wave, attack_cfg, target=target, defense_chain=attack_chain)


def attack_targets(entries, pool_texts, seed, tolerance=1, model=None, corpus_root=None):
    """Deterministic attack target per utterance, sampled from the pool.

    When a model is given, candidates are restricted to transcripts whose
    minimum CTC alignment fits that utterance's output frames; same-length
    targets always fit, so this only trims the +1-word end of the window.
    """
    targets = {}
    for e in entries:
        budget = None
        if model is not None:
            n = e.load(corpus_root).samples.size
            budget = frames_after_conv(num_frames(n, DEFAULT_FRONTEND), model.config)
        targets[e.id] = attacks_mod.sample_target(
            Transcript.from_text(e.transcript),
            pool_texts,
            derive_seed(seed, "target", e.id),
            word_count_tolerance=tolerance,
            max_label_frames=budget,
        )
    return targets


def evaluate_cell(
    model,
    entries,
    corpus_root,
    chain,
    attack_cfg=None,
    pool_texts=None,
    seed=0,
    white_box=False,
    artifacts_dir=None,
    attack_memo=None,
):
    """Score one matrix cell; returns one (clean) or three condition records.

    attack_memo, when given, caches AttackResult objects across cells keyed
    by (model, attack, utterance); black-box adversarial audio does not
    depend on the defense chain, so the matrix reuses it chain-to-chain.
    """
    started = time.time()
    chain_name = defenses_mod.chain_label(chain)
    model_name = model.config.name
    if attack_cfg is None:
        errors, words = evaluate_clean(model, entries, corpus_root, chain, seed)
        return [
            CellRecord(
                model=model_name,
                defense=chain_name,
                attack="none",
                epsilon=None,
                condition=CLEAN,
                wer=errors / words,
                utterances=len(entries),
                errors=errors,
                reference_words=words,
                runtime_s=time.time() - started,
            )
        ]
    if pool_texts is None:
        raise ValueError("attacked cells need a target pool")
    targets = attack_targets(entries, pool_texts, seed, model=model, corpus_root=corpus_root)
    gt_errors = gt_words = tgt_errors = tgt_words = 0
    linfs = []
    if artifacts_dir is not None:
        artifacts_dir = Path(artifacts_dir)
        artifacts_dir.mkdir(parents=True, exist_ok=True)
    for e in entries:
        wave = e.load(corpus_root)
        target = targets[e.id]
        memo_key = (model_name, attacks_mod.attack_key(attack_cfg), white_box and attack_cfg.method in ("fgsm", "pgd"), chain_name if white_box else "", e.id)
        result = None if attack_memo is None else attack_memo.get(memo_key)
        if result is None:
            result = _run_one_attack(model, wave, target, attack_cfg, chain, white_box)
            if attack_memo is not None:
                attack_memo[memo_key] = result
        hyp = _decode_defended(
            model,
            result.adversarial,
            chain,
            _defense_seed(seed, model_name, chain, e.id),
        )
        ref = Transcript.from_text(e.transcript)
        gt_errors += edit_distance(ref.words, hyp.words)
        gt_words += len(ref.words)
        tgt_errors += edit_distance(target.words, hyp.words)
        tgt_words += len(target.words)
        linfs.append(result.linf)
        if artifacts_dir is not None:
            stem = artifacts_dir / f"{e.id}"
            write_wav(f"{stem}.wav", result.adversarial)
            audit = {
                "id": e.id,
                "reference": ref.text,
                "target": target.text,
                "hypothesis": hyp.text,
                "linf": result.linf,
                "edit_ops": [op for op, _, _ in edit_alignment(ref.words, hyp.words)],
            }
            Path(f"{stem}.json").write_text(
                json.dumps(audit, sort_keys=True, indent=1), encoding="utf-8"
            )
    runtime = time.time() - started
    common = dict(
        model=model_name,
        defense=chain_name,
        attack=_attack_label(attack_cfg, white_box),
        epsilon=attack_cfg.epsilon if attack_cfg.method in ("fgsm", "pgd") else attack_cfg.initial_eps,
        utterances=len(entries),
        mean_linf=float(np.mean(linfs)),
        white_box=white_box,
    )
    return [
        CellRecord(
            condition=GROUND_TRUTH,
            wer=gt_errors / gt_words,
            errors=gt_errors,
            reference_words=gt_words,
            runtime_s=runtime,
            **common,
        ),
        CellRecord(
            condition=TARGET,
            wer=tgt_errors / tgt_words,
            errors=tgt_errors,
            reference_words=tgt_words,
            runtime_s=0.0,
            **common,
        ),
    ]


def _cell_cache_key(model, chain, attack_cfg, white_box, entries, seed):
    payload = {
        "model": model.config.name,
        "model_checksum": model.param_checksum(),
        "chain": defenses_mod.chain_to_json(chain),
        "attack": None if attack_cfg is None else attacks_mod.attack_to_json(attack_cfg),
        "white_box": bool(white_box),
        "utts": [e.id for e in entries],
        "seed": int(seed),
        "format": 1,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def cell_cache_key(model, chain, attack_cfg, entries, seed):
    """Content hash naming one matrix cell's cache directory."""
    return _cell_cache_key(model, chain, attack_cfg, False, entries, seed)


def _atomic_write(path, text):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def run_matrix(
    models,
    attack_cfgs,
    chains,
    entries,
    corpus_root,
    pool_texts,
    seed=0,
    cache_dir=None,
    artifacts=False,
    log=None,
    jobs=1,
):
    """Evaluate every (model, attack, chain) cell; resumable via cache_dir.

    models: list of AcousticModel.  attack_cfgs: list of AttackConfig or
    None for the clean column.  Completed cells are stored one directory
    per content hash and skipped on rerun; partially written cells are
    invisible because records land via atomic rename.  jobs > 1 evaluates
    uncached cells on a thread pool; records keep the nested
    model-chain-attack order either way.
    """
    attack_memo = {}
    cache_root = Path(cache_dir) if cache_dir else None
    cells = [
        (model, chain, attack_cfg)
        for model in models
        for chain in chains
        for attack_cfg in attack_cfgs
    ]
    results = [None] * len(cells)
    pending = []
    for i, (model, chain, attack_cfg) in enumerate(cells):
        key = None
        if cache_root is not None:
            key = _cell_cache_key(model, chain, attack_cfg, False, entries, seed)
            record_path = cache_root / key / "records.json"
            if record_path.exists():
                cached = json.loads(record_path.read_text(encoding="utf-8"))
                results[i] = [CellRecord.from_json(r) for r in cached]
                if log:
                    log("cell_cached", model=model.config.name,
                        defense=defenses_mod.chain_label(chain),
                        attack=_attack_label(attack_cfg))
                continue
        pending.append((i, key))

    def evaluate_one(i, key):
        model, chain, attack_cfg = cells[i]
        cell_dir = cache_root / key if key is not None else None
        artifacts_dir = cell_dir / "utterances" if (artifacts and cell_dir) else None
        cell_records = evaluate_cell(
            model,
            entries,
            corpus_root,
            chain,
            attack_cfg=attack_cfg,
            pool_texts=pool_texts,
            seed=seed,
            artifacts_dir=artifacts_dir,
            attack_memo=attack_memo,
        )
        if cell_dir is not None:
            cell_dir.mkdir(parents=True, exist_ok=True)
            _atomic_write(
                cell_dir / "records.json",
                json.dumps([r.to_json() for r in cell_records], sort_keys=True, indent=1),
            )
        if log:
            log("cell_done", model=model.config.name,
                defense=defenses_mod.chain_label(chain),
                attack=_attack_label(attack_cfg),
                wers=[round(r.wer, 4) for r in cell_records])
        return cell_records

    if jobs <= 1 or len(pending) <= 1:
        for i, key in pending:
            results[i] = evaluate_one(i, key)
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=int(jobs)) as pool:
            futures = [(i, pool.submit(evaluate_one, i, key)) for i, key in pending]
            for i, future in futures:
                results[i] = future.result()
    records = []
    for cell_records in results:
        records.extend(cell_records)
    return records


def transfer_eval(source_model, victim_model, attack_cfg, entries, corpus_root, pool_texts, seed=0, chain=()):
    """Estimate attacks on source_model, score them on victim_model.

    Returns the victim's cell records with the attack label annotated with
    the source model's name.  Refuses to run when source and victim are the
    same object or carry identical parameters.
    """
    if source_model is victim_model or source_model.param_checksum() == victim_model.param_checksum():
        raise ValueError("transfer evaluation needs two distinct models")
    targets = attack_targets(entries, pool_texts, seed, model=source_model, corpus_root=corpus_root)
    gt_errors = gt_words = tgt_errors = tgt_words = 0
    linfs = []
    for e in entries:
        wave = e.load(corpus_root)
        target = targets[e.id]
        result = attacks_mod.run_attack(source_model, wave, attack_cfg, target=target)
        hyp = _decode_defended(
            victim_model,
            result.adversarial,
            chain,
            _defense_seed(seed, victim_model.config.name, chain, e.id),
        )
        ref = Transcript.from_text(e.transcript)
        gt_errors += edit_distance(ref.words, hyp.words)
        gt_words += len(ref.words)
        tgt_errors += edit_distance(target.words, hyp.words)
        tgt_words += len(target.words)
        linfs.append(result.linf)
    label = f"{attack_cfg.method}<-{source_model.config.name}"
    common = dict(
        model=victim_model.config.name,
        defense=defenses_mod.chain_label(chain),
        attack=label,
        epsilon=attack_cfg.epsilon,
        utterances=len(entries),
        mean_linf=float(np.mean(linfs)),
    )
    return [
        CellRecord(condition=GROUND_TRUTH, wer=gt_errors / gt_words, errors=gt_errors,
                   reference_words=gt_words, **common),
        CellRecord(condition=TARGET, wer=tgt_errors / tgt_words, errors=tgt_errors,
                   reference_words=tgt_words, **common),
    ]


def _format_eps(eps):
    if eps is None:
        return ""
    return format(eps, "g")


def emit_report(records, path, fmt):
    """Write records as csv, markdown or json with a stable layout.

    The csv column order is model, defense, attack, epsilon, condition,
    wer_percent; rows keep the order the matrix produced them in, so a
    rerun with the same seed emits byte-identical bytes.
    """
    path = Path(path)
    if fmt == "csv":
        lines = ["model,defense,attack,epsilon,condition,wer_percent"]
        for r in records:
            lines.append(
                f"{r.model},{r.defense},{r.attack},{_format_eps(r.epsilon)},{r.condition},{r.wer * 100:.4f}"
            )
        _atomic_write(path, "\n".join(lines) + "\n")
    elif fmt == "json":
        payload = {"records": [r.to_json() for r in records]}
        _atomic_write(path, json.dumps(payload, sort_keys=True, indent=1) + "\n")
    elif fmt == "markdown":
        _atomic_write(path, render_markdown(records))
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def parse_report_csv(path):
    """Read back rows written by emit_report(..., 'csv')."""
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        rows.append(dict(zip(header, line.split(","))))
    return rows


def render_markdown(records):
    """Ground-truth WER table per model: rows are defenses, columns attacks.

    The target condition appears in a second block for targeted attacks so
    the layout reads like the usual attack-versus-defense summary table.
    """
    by_model = {}
    for r in records:
        by_model.setdefault(r.model, []).append(r)
    out = []
    for model_name in by_model:
        model_records = by_model[model_name]
        columns = []
        for r in model_records:
            col = (r.attack, r.epsilon)
            if col not in columns:
                columns.append(col)
        defenses = []
        for r in model_records:
            if r.defense not in defenses:
                defenses.append(r.defense)
        out.append(f"### {model_name}")
        out.append("")
        header = ["defense"]
        for attack, eps in columns:
            name = attack if attack == "none" else f"{attack} {_format_eps(eps)}"
            header.append(name.strip())
        out.append("| " + " | ".join(header) + " |")
        out.append("|" + "---|" * len(header))
        values = {}
        target_values = {}
        for r in model_records:
            slot = (r.defense, (r.attack, r.epsilon))
            if r.condition in (CLEAN, GROUND_TRUTH):
                values[slot] = r.wer
            elif r.condition == TARGET:
                target_values[slot] = r.wer
        for defense in defenses:
            row = [defense]
            for col in columns:
                v = values.get((defense, col))
                row.append("" if v is None else f"{v * 100:.1f}")
            out.append("| " + " | ".join(row) + " |")
        if target_values:
            out.append("")
            out.append("Target-phrase WER (targeted attacks):")
            out.append("")
            out.append("| " + " | ".join(header) + " |")
            out.append("|" + "---|" * len(header))
            for defense in defenses:
                row = [defense]
                for col in columns:
                    v = target_values.get((defense, col))
                    row.append("" if v is None else f"{v * 100:.1f}")
                out.append("| " + " | ".join(row) + " |")
        out.append("")
    return "\n".join(out) + "\n"
