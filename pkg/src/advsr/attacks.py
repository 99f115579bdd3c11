"""Targeted adversarial waveform attacks against the recognizer.

All three methods push the input toward an attacker-chosen target phrase
by descending the CTC loss of that phrase; recognition of the true
transcript collapses as a side effect.  Signed gradients keep every step
inside an L-infinity budget:

* fgsm: one signed-gradient step of size epsilon.
* pgd: several smaller steps, each followed by projection of the total
  perturbation back into the epsilon ball and the waveform into [-1, 1];
  the best iterate by target loss is returned.
* imperceptible: two stages.  Stage one drives the decoder to the target
  under a shrinking L-infinity bound (the bound halves every time the
  greedy decode matches).  Stage two keeps optimizing the same objective
  plus a penalty on perturbation energy that pokes above the clean
  signal's psychoacoustic masking threshold, trading attack margin for
  inaudibility.

Attacks read model parameters but never write them, and identical seeds
reproduce identical adversarial audio.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import defenses as defenses_mod
from . import dsp
from .model import ctc_loss, greedy_decode, min_alignment_frames
from .seeding import derive_seed
from .tensor import Tape, Tensor, clamp, mul, relu, sub, tsum
from .transcript import Transcript


class NoCandidateError(ValueError):
    """The target pool offers no transcript near the reference length."""


@dataclass(frozen=True)
class AttackConfig:
    """Declarative description of one attack.

    epsilon/alpha/iterations drive fgsm and pgd; the stage fields drive the
    imperceptible attack.  alpha defaults to epsilon / 5 when unset.
    """

    method: str
    epsilon: float = 0.0
    alpha: float | None = None
    iterations: int = 1
    initial_eps: float = 0.01
    eps_decay: float = 0.5
    stage1_iters: int = 100
    stage1_lr: float = 8e-4
    stage2_iters: int = 25
    stage2_lr: float = 8e-7
    penalty_weight: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("fgsm", "pgd", "imperceptible"):
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive when given")
        if not 0.0 < self.eps_decay <= 1.0:
            raise ValueError("eps_decay must lie in (0, 1]")

    @property
    def step_size(self):
        return self.alpha if self.alpha is not None else self.epsilon / 5.0


def fgsm_config(epsilon, seed=0):
    return AttackConfig(method="fgsm", epsilon=epsilon, iterations=1, seed=seed)


def pgd_config(epsilon, iterations=7, alpha=None, seed=0):
    return AttackConfig(method="pgd", epsilon=epsilon, iterations=iterations, alpha=alpha, seed=seed)


def imperceptible_config(seed=0, **overrides):
    return AttackConfig(method="imperceptible", **overrides, seed=seed)


@dataclass
class AttackResult:
    adversarial: dsp.Waveform
    linf: float
    loss_trajectory: list
    iterations_per_stage: dict
    success: bool | None = None
    decoded: Transcript | None = None
    masked_above_stage1: float | None = None
    masked_above_stage2: float | None = None

    def to_json(self):
        return {
            "linf": self.linf,
            "loss_trajectory": [float(v) for v in self.loss_trajectory],
            "iterations_per_stage": self.iterations_per_stage,
            "success": self.success,
            "decoded": None if self.decoded is None else self.decoded.text,
            "masked_above_stage1": self.masked_above_stage1,
            "masked_above_stage2": self.masked_above_stage2,
        }


def attack_key(cfg):
    """Stable identity string for memoization and cache keys."""
    return json.dumps(attack_to_json(cfg), sort_keys=True, separators=(",", ":"))


def attack_to_json(cfg):
    return {
        "method": cfg.method,
        "epsilon": cfg.epsilon,
        "alpha": cfg.alpha,
        "iterations": cfg.iterations,
        "initial_eps": cfg.initial_eps,
        "eps_decay": cfg.eps_decay,
        "stage1_iters": cfg.stage1_iters,
        "stage1_lr": cfg.stage1_lr,
        "stage2_iters": cfg.stage2_iters,
        "stage2_lr": cfg.stage2_lr,
        "penalty_weight": cfg.penalty_weight,
        "seed": cfg.seed,
    }


def sample_target(reference, pool, seed, word_count_tolerance=1, max_label_frames=None):
    """Pick a target transcript of similar word count from a pool.

    pool holds transcript strings or Transcript objects.  Candidates match
    the reference word count within the tolerance and differ textually
    from the reference; ties are broken by the seeded generator.

    max_label_frames, when given, drops candidates whose minimum CTC
    alignment would not fit the attacked utterance.  Matched-word-count
    candidates always fit on this corpus, so the filter only prunes the
    longer end of the tolerance window.
    """
    texts = []
    for item in pool:
        text = item.text if isinstance(item, Transcript) else str(item)
        if abs(len(text.split()) - len(reference.words)) > word_count_tolerance or text == reference.text:
            continue
        if max_label_frames is not None:
            cand = Transcript.from_text(text)
            if min_alignment_frames(cand.char_ids()) > max_label_frames:
                continue
        texts.append(text)
    if not texts:
        raise NoCandidateError(
            f"no pool transcript within {word_count_tolerance} words of a "
            f"{len(reference.words)}-word reference"
        )
    rng = np.random.default_rng(seed)
    return Transcript.from_text(texts[int(rng.integers(len(texts)))])


def _forward_loss(model, samples, target, defense_chain=None, chain_seed=0):
    """One taped forward pass; returns (loss value, input gradient, logprobs)."""
    x = Tensor(samples, requires_grad=True)
    with Tape() as tape:
        inp = x
        if defense_chain:
            inp = defenses_mod.apply_chain_tensor(defense_chain, x, chain_seed)
        logprobs = model.forward(inp)
        loss = ctc_loss(logprobs, target)
    tape.backward(loss)
    return loss.item(), x.grad, logprobs


def _loss_only(model, samples, target, defense_chain=None, chain_seed=0):
    # No tape is active, so nothing gets recorded regardless of the chain.
    inp = Tensor(samples)
    if defense_chain:
        inp = defenses_mod.apply_chain_tensor(defense_chain, inp, chain_seed)
    return ctc_loss(model.forward(inp), target).item()


def fgsm(model, wave, target, cfg, defense_chain=None):
    """Single signed-gradient step of size epsilon toward the target phrase."""
    x = wave.samples
    chain_seed = derive_seed(cfg.seed, "chain")
    loss0, grad, _ = _forward_loss(model, x, target, defense_chain, chain_seed)
    adv = np.clip(x - cfg.epsilon * np.sign(grad), -1.0, 1.0)
    loss1 = _loss_only(model, adv, target, defense_chain, chain_seed)
    decoded = greedy_decode(model.forward(Tensor(adv)))
    return AttackResult(
        adversarial=dsp.Waveform(adv, wave.sample_rate),
        linf=float(np.abs(adv - x).max()),
        loss_trajectory=[loss0, loss1],
        iterations_per_stage={"fgsm": 1},
        success=decoded.text == target.text,
        decoded=decoded,
    )


def pgd(model, wave, target, cfg, defense_chain=None):
    """Iterated signed steps with epsilon-ball projection; best iterate wins.

    Step size is alpha (default epsilon / 5).  After each step the total
    perturbation is clamped into [-epsilon, epsilon] and the waveform into
    [-1, 1].  Among the produced iterates the one with the lowest target
    loss is returned; with one iteration and alpha equal to epsilon this
    reduces exactly to fgsm.
    """
    x = wave.samples
    alpha = cfg.step_size
    chain_seed = derive_seed(cfg.seed, "chain")
    current = x.copy()
    iterates = []
    losses = []  # target loss at the start point, then at each iterate
    for _ in range(cfg.iterations):
        loss, grad, _ = _forward_loss(model, current, target, defense_chain, chain_seed)
        losses.append(loss)
        stepped = current - alpha * np.sign(grad)
        delta = np.clip(stepped - x, -cfg.epsilon, cfg.epsilon)
        current = np.clip(x + delta, -1.0, 1.0)
        iterates.append(current.copy())
    losses.append(_loss_only(model, current, target, defense_chain, chain_seed))
    best_idx = int(np.argmin(losses[1:]))  # ties go to the earliest iterate
    best = iterates[best_idx]
    decoded = greedy_decode(model.forward(Tensor(best)))
    return AttackResult(
        adversarial=dsp.Waveform(best, wave.sample_rate),
        linf=float(np.abs(best - x).max()),
        loss_trajectory=losses,
        iterations_per_stage={"pgd": cfg.iterations},
        success=decoded.text == target.text,
        decoded=decoded,
    )


class _Adam:
    """Stateful Adam update returning the step to subtract."""

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _fraction_above_threshold(delta, threshold_db, cfg=dsp.DEFAULT_FRONTEND):
    """Share of perturbation STFT cells whose power pokes above the mask."""
    power = dsp.power_spectrogram(Tensor(delta), cfg).data
    level = dsp.power_to_db(power, cfg)
    return float((level > threshold_db).mean())


def _masking_penalty_value(delta, threshold_db, cfg=dsp.DEFAULT_FRONTEND):
    power = dsp.power_spectrogram(Tensor(delta), cfg).data
    level = dsp.power_to_db(power, cfg)
    return float(np.maximum(level - threshold_db, 0.0).sum())


def imperceptible(model, wave, target, cfg):
    """Two-stage targeted attack balancing success against audibility.

    Stage one: Adam on the target CTC loss gradient with the
    perturbation projected into an L-infinity ball whose radius starts at
    initial_eps and multiplies by eps_decay whenever the greedy decode
    matches the target.  Stage two: same optimizer at a much smaller
    learning rate on loss + penalty_weight * masked-energy violation; the
    weight doubles on success and halves on failure every ten steps.  The
    returned iterate prefers (decoded == target), then the smallest
    masked-energy violation.
    """
    x = wave.samples
    threshold = dsp.masking_threshold(wave).db
    n = x.shape[0]
    eps = cfg.initial_eps
    delta = np.zeros(n)
    adam = _Adam(n, cfg.stage1_lr)
    trajectory = []
    # Stage one keeps the lowest-loss visited iterate, the same best-iterate
    # rule pgd uses; Adam oscillates and the endpoint is often not the best.
    best_loss = np.inf
    stage1_delta = delta.copy()
    for _ in range(cfg.stage1_iters):
        loss, grad, logprobs = _forward_loss(model, x + delta, target)
        trajectory.append(loss)
        if loss < best_loss:
            best_loss = loss
            stage1_delta = delta.copy()
        if greedy_decode(logprobs).text == target.text:
            eps *= cfg.eps_decay
            delta = np.clip(delta, -eps, eps)
        delta = np.clip(delta - adam.step(grad), -eps, eps)
        delta = np.clip(x + delta, -1.0, 1.0) - x
    stage1_above = _fraction_above_threshold(stage1_delta, threshold)

    # Candidate pool: the stage-one endpoint plus every stage-two iterate.
    def assess(d):
        lp = model.forward(Tensor(x + d))
        decoded = greedy_decode(lp)
        return {
            "delta": d.copy(),
            "success": decoded.text == target.text,
            "violation": _masking_penalty_value(d, threshold),
            "decoded": decoded,
        }

    candidates = [assess(stage1_delta)]
    weight = cfg.penalty_weight
    adam2 = _Adam(n, cfg.stage2_lr)
    delta = stage1_delta.copy()
    for it in range(cfg.stage2_iters):
        grad_total, loss, _ = _stage2_gradient(
            model, x, delta, target, threshold, weight
        )
        trajectory.append(loss)
        delta = delta - adam2.step(grad_total)
        delta = np.clip(x + delta, -1.0, 1.0) - x
        candidates.append(assess(delta))
        if (it + 1) % 10 == 0:
            weight = weight * 2.0 if candidates[-1]["success"] else weight / 2.0
    ranked = sorted(
        range(len(candidates)),
        key=lambda i: (not candidates[i]["success"], candidates[i]["violation"], i),
    )
    chosen = candidates[ranked[0]]
    final = np.clip(x + chosen["delta"], -1.0, 1.0)
    return AttackResult(
        adversarial=dsp.Waveform(final, wave.sample_rate),
        linf=float(np.abs(final - x).max()),
        loss_trajectory=trajectory,
        iterations_per_stage={"stage1": cfg.stage1_iters, "stage2": cfg.stage2_iters},
        success=chosen["success"],
        decoded=chosen["decoded"],
        masked_above_stage1=stage1_above,
        masked_above_stage2=_fraction_above_threshold(chosen["delta"], threshold),
    )


def _stage2_gradient(model, x, delta, target, threshold_db, weight):
    """Gradient of target loss plus weighted masked-energy hinge, by tape."""
    d = Tensor(delta, requires_grad=True)
    with Tape() as tape:
        adv = clamp(Tensor(x) + d, -1.0, 1.0)
        logprobs = model.forward(adv)
        loss = ctc_loss(logprobs, target)
        total = loss
        if weight > 0.0:
            level = dsp.power_db_tensor(dsp.power_spectrogram(d))
            hinge = relu(sub(level, Tensor(threshold_db)))
            total = total + mul(tsum(hinge), weight)
    tape.backward(total)
    success = greedy_decode(logprobs).text == target.text
    return d.grad, loss.item(), success


def run_attack(model, wave, cfg, target, defense_chain=None):
    """Dispatch on cfg.method; checks the defense chain is usable first."""
    if defense_chain and cfg.method == "imperceptible":
        raise ValueError("the imperceptible attack does not support attack-through-defense")
    if cfg.method == "fgsm":
        return fgsm(model, wave, target, cfg, defense_chain)
    if cfg.method == "pgd":
        return pgd(model, wave, target, cfg, defense_chain)
    return imperceptible(model, wave, target, cfg)


def write_attack_outputs(out_dir, utt_id, result, reference, target):
    """Persist adversarial audio plus a JSON sidecar describing the attempt."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    wav_path = out_dir / f"{utt_id}.wav"
    dsp.write_wav(wav_path, result.adversarial)
    sidecar = {"id": utt_id, "reference": reference.text, "target": target.text}
    sidecar.update(result.to_json())
    (out_dir / f"{utt_id}.json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=1), encoding="utf-8"
    )
    return wav_path
