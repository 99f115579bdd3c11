"""Inference-time input transformations that blunt adversarial audio.

Two building blocks, composable into ordered chains:

* smooth: one draw of Gaussian noise added to the waveform, then a clamp
  back into [-1, 1].  Cheap randomization that shifts inputs off the
  attacker's optimized point.
* resynth: analysis to log-mel, least-squares mel inversion, then
  Griffin-Lim phase retrieval.  The waveform is rebuilt from features
  only, discarding the fine phase structure adversarial perturbations
  love to hide in.

Chains apply left to right; an empty chain is the identity.  Resynthesis
can also run inside an attacker's differentiable graph (white-box mode),
where Griffin-Lim is truncated to a few iterations to keep the graph
small while the defender still runs the full loop at inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsp
from .seeding import derive_seed
from .tensor import Tensor, clamp, sqrt

VALID_METHODS = ("smooth", "resynth")
# Griffin-Lim depth used when resynthesis is recorded on an attack tape.
WHITE_BOX_GL_ITERS = 4


@dataclass(frozen=True)
class DefenseConfig:
    method: str
    sigma: float = 0.01
    griffin_lim_iters: int = 32
    differentiable: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.method not in VALID_METHODS:
            raise ValueError(f"unknown defense method {self.method!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.griffin_lim_iters < 1:
            raise ValueError("griffin_lim_iters must be at least 1")


def smooth(wave, cfg, rng):
    """Single-draw Gaussian randomized smoothing; sigma 0 is the identity."""
    noisy = wave.samples + rng.normal(0.0, cfg.sigma, len(wave))
    return dsp.Waveform(np.clip(noisy, -1.0, 1.0), wave.sample_rate)


def resynthesize(wave, cfg, frontend=dsp.DEFAULT_FRONTEND):
    """Rebuild audio from its own log-mel features via phase retrieval."""
    out = _resynth_tensor(Tensor(wave.samples), cfg.griffin_lim_iters, frontend)
    return dsp.Waveform(out.data, wave.sample_rate)


def _resynth_tensor(x, gl_iters, frontend):
    mel = dsp.logmel(x, frontend)
    magnitude = sqrt(dsp.mel_invert(mel, frontend))
    return dsp.griffin_lim(magnitude, gl_iters, frontend, length=x.shape[0])


def apply_chain(chain, wave, seed=0, frontend=dsp.DEFAULT_FRONTEND):
    """Run a defense chain left to right on a waveform.

    Noise draws derive from (seed, position, defense seed) so a fixed seed
    reproduces the chain bit for bit.
    """
    out = wave
    for position, cfg in enumerate(chain):
        if cfg.method == "smooth":
            rng = np.random.default_rng(derive_seed(seed, "smooth", position, cfg.seed))
            out = smooth(out, cfg, rng)
        else:
            out = resynthesize(out, cfg, frontend)
    return out


def apply_chain_tensor(chain, x, seed=0, frontend=dsp.DEFAULT_FRONTEND):
    """Differentiable chain application for white-box attack graphs.

    Every config must be flagged differentiable.  Smoothing adds its noise
    draw as a constant (the gradient passes through unchanged); resynthesis
    runs Griffin-Lim truncated to WHITE_BOX_GL_ITERS on the tape.
    """
    for cfg in chain:
        if not cfg.differentiable:
            raise ValueError(
                f"defense {cfg.method!r} is not flagged differentiable; "
                "white-box attacks need a fully differentiable chain"
            )
    out = x
    for position, cfg in enumerate(chain):
        if cfg.method == "smooth":
            rng = np.random.default_rng(derive_seed(seed, "smooth", position, cfg.seed))
            noise = Tensor(rng.normal(0.0, cfg.sigma, out.shape[0]))
            out = clamp(out + noise, -1.0, 1.0)
        else:
            out = _resynth_tensor(out, WHITE_BOX_GL_ITERS, frontend)
    return out


def chain_label(chain):
    """Compact human-readable chain name for reports, 'none' when empty."""
    if not chain:
        return "none"
    parts = []
    for cfg in chain:
        if cfg.method == "smooth":
            parts.append(f"rs{format(cfg.sigma, 'g')}")
        else:
            parts.append("resynth")
    return "+".join(parts)


def chain_to_json(chain):
    return [
        {
            "method": cfg.method,
            "sigma": cfg.sigma,
            "griffin_lim_iters": cfg.griffin_lim_iters,
            "differentiable": cfg.differentiable,
            "seed": cfg.seed,
        }
        for cfg in chain
    ]


def parse_chain(text):
    """Parse a chain spec such as 'none', 'rs:0.01', 'resynth@diff+rs:0.01'.

    Elements join with '+' and apply left to right.  'rs:SIGMA' is
    smoothing, 'resynth' is feature resynthesis, and a '@diff' suffix marks
    an element as usable inside differentiable attack graphs.
    """
    text = text.strip()
    if text in ("", "none"):
        return ()
    chain = []
    for part in text.split("+"):
        part = part.strip()
        differentiable = part.endswith("@diff")
        if differentiable:
            part = part[: -len("@diff")]
        if part == "resynth":
            chain.append(DefenseConfig(method="resynth", differentiable=differentiable))
        elif part.startswith("rs:"):
            chain.append(
                DefenseConfig(
                    method="smooth", sigma=float(part[3:]), differentiable=differentiable
                )
            )
        elif part == "rs":
            chain.append(DefenseConfig(method="smooth", differentiable=differentiable))
        else:
            raise ValueError(f"cannot parse defense element {part!r}")
    return tuple(chain)
