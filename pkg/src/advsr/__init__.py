"""Adversarially robust toy speech recognition, end to end.

A small, dependency-light laboratory for studying adversarial attacks and
defenses on connectionist-temporal-classification (CTC) speech
recognition.  Everything needed to run the full loop lives here:

- a deterministic synthetic spoken-command corpus (`corpus`),
- a log-mel signal-processing front end with invertible pieces and
  psychoacoustic masking thresholds (`dsp`),
- a tape-based reverse-mode autodiff engine (`tensor`),
- a convolutional CTC recognizer with training-time defense options
  (`model`),
- max-norm and psychoacoustically-masked adversarial attacks (`attacks`),
- inference-time defenses: gaussian smoothing and spectral re-synthesis
  (`defenses`),
- a word-error-rate evaluation matrix with caching and reports
  (`evaluate`),
- configuration files and a command-line pipeline (`config`, `cli`).
"""

from . import attacks, config, corpus, defenses, dsp, evaluate, model, tensor
from .attacks import AttackConfig, AttackResult, fgsm_config, imperceptible_config, pgd_config, run_attack
from .config import ConfigError, RunConfig, load_config
from .corpus import Manifest, build_corpus, synthesize
from .defenses import DefenseConfig, apply_chain, parse_chain
from .evaluate import CellRecord, edit_distance, emit_report, run_matrix, wer
from .model import AcousticModel, ModelConfig, TrainConfig, ctc_loss, train
from .seeding import derive_seed
from .tensor import Tape, Tensor
from .transcript import Transcript

__version__ = "0.1.0"

__all__ = [
    "AcousticModel",
    "AttackConfig",
    "AttackResult",
    "CellRecord",
    "ConfigError",
    "DefenseConfig",
    "Manifest",
    "ModelConfig",
    "RunConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "Transcript",
    "apply_chain",
    "attacks",
    "build_corpus",
    "config",
    "corpus",
    "ctc_loss",
    "defenses",
    "derive_seed",
    "dsp",
    "edit_distance",
    "emit_report",
    "evaluate",
    "fgsm_config",
    "imperceptible_config",
    "load_config",
    "model",
    "parse_chain",
    "pgd_config",
    "run_attack",
    "run_matrix",
    "synthesize",
    "tensor",
    "wer",
    "__version__",
]
