"""Miniature convolutional CTC recognizer over log-mel features.

Architecture: log-mel frontend, two stride-2 1D convolutions with relu,
a linear projection, then row-wise log-softmax over the 28-symbol
character alphabet.  Each stride-2 layer halves (ceiling) the frame count,
so frames_out = ceil(frames / 4).

The CTC loss runs the forward algorithm in log space over the
blank-augmented label sequence; its backward pass uses the matching
backward recursion to produce the exact gradient with respect to the
per-frame log-probabilities in a single tape node.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import dsp
from .seeding import derive_seed
from .tensor import (
    NonFiniteInputError,
    Tape,
    Tensor,
    _emit,
    conv1d,
    log_softmax,
    matmul,
    mul,
    relu,
    sub,
    tmean,
    add,
)
from .transcript import BLANK_ID, Transcript, VOCAB_SIZE, ids_to_text

# Fixed affine feature normalization: log-mel cells live in roughly
# [log(1e-10), +7]; this recentering keeps the first convolution's inputs
# near unit scale without introducing any data-dependent state.
FEATURE_CENTER = -11.5
FEATURE_SCALE = 0.2


class InfeasibleAlignmentError(ValueError):
    """Target transcript longer than any CTC alignment the frames allow."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class ModelConfig:
    name: str = "model"
    conv_channels: tuple = (16, 32)
    kernel_size: int = 9
    stride: int = 2
    n_mels: int = 40
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self):
        if len(self.conv_channels) != 2:
            raise ValueError("conv_channels must list exactly two widths")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd so stride-2 halving is exact")
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))


def frames_after_conv(n_frames, cfg):
    out = n_frames
    for _ in range(2):
        out = 1 + (out + 2 * (cfg.kernel_size // 2) - cfg.kernel_size) // cfg.stride
    return out


class AcousticModel:
    """Parameter container plus the differentiable forward pass."""

    def __init__(self, config=None, seed=0):
        self.config = config or ModelConfig()
        self.seed = int(seed)
        rng = np.random.default_rng(derive_seed(seed, "init", self.config.name))
        k = self.config.kernel_size
        c1, c2 = self.config.conv_channels
        mels = self.config.n_mels
        vocab = self.config.vocab_size

        def he(shape, fan_in):
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)

        self.params = {
            "conv1.w": Tensor(he((k, mels, c1), k * mels), requires_grad=True),
            "conv1.b": Tensor(np.zeros(c1), requires_grad=True),
            "conv2.w": Tensor(he((k, c1, c2), k * c1), requires_grad=True),
            "conv2.b": Tensor(np.zeros(c2), requires_grad=True),
            # Small output scale starts the per-frame distribution near uniform.
            "out.w": Tensor(rng.normal(0.0, 0.1 / np.sqrt(c2), (c2, vocab)), requires_grad=True),
            "out.b": Tensor(np.zeros(vocab), requires_grad=True),
        }

    def parameters(self):
        return self.params

    def forward(self, samples, frontend=dsp.DEFAULT_FRONTEND):
        """Log-probabilities (frames_out, vocab) from 1D sample tensor."""
        feats = dsp.logmel(samples, frontend)
        h = mul(sub(feats, FEATURE_CENTER), FEATURE_SCALE)
        cfg = self.config
        pad = cfg.kernel_size // 2
        h = relu(conv1d(h, self.params["conv1.w"], self.params["conv1.b"], stride=cfg.stride, padding=pad))
        h = relu(conv1d(h, self.params["conv2.w"], self.params["conv2.b"], stride=cfg.stride, padding=pad))
        logits = add(matmul(h, self.params["out.w"]), self.params["out.b"])
        return log_softmax(logits)

    def transcribe(self, wave, frontend=dsp.DEFAULT_FRONTEND):
        """Greedy-decoded transcript of a waveform, no gradients recorded."""
        logprobs = self.forward(Tensor(wave.samples), frontend)
        return greedy_decode(logprobs)

    def param_checksum(self):
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(self.params[name].data.tobytes())
        return digest.hexdigest()

    def save(self, path):
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path):
        return load_checkpoint(path)


def _blank_augment(labels):
    seq = [BLANK_ID]
    for label in labels:
        seq.append(label)
        seq.append(BLANK_ID)
    return np.array(seq)


def min_alignment_frames(labels):
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def ctc_loss(logprobs, target):
    """Negative log-probability of the target labeling, scalar tensor.

    target is a Transcript or a list of nonblank label ids.  Raises
    InfeasibleAlignmentError when the target cannot be aligned inside the
    available frames.
    """
    labels = target.char_ids() if isinstance(target, Transcript) else list(target)
    if not labels:
        raise ValueError("ctc_loss target must be nonempty")
    if any(l == BLANK_ID for l in labels):
        raise ValueError("ctc_loss target must not contain the blank id")
    lp = logprobs.data
    T, vocab = lp.shape
    if max(labels) >= vocab:
        raise ValueError("ctc_loss target label outside the model vocabulary")
    needed = min_alignment_frames(labels)
    if T < needed:
        raise InfeasibleAlignmentError(
            f"target needs at least {needed} frames, model produced {T}"
        )
    seq = _blank_augment(labels)
    S = seq.shape[0]
    emit = lp[:, seq]  # (T, S) log p(symbol of state s at time t)
    # Skip transition s-2 -> s is legal into nonblank states that differ
    # from the nonblank two back.
    can_skip = np.zeros(S, dtype=bool)
    can_skip[2:] = (seq[2:] != BLANK_ID) & (seq[2:] != seq[:-2])

    neg_inf = -np.inf
    alpha = np.full((T, S), neg_inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([neg_inf], prev[:-1]))
        skip = np.concatenate(([neg_inf, neg_inf], prev[:-2]))
        skip = np.where(can_skip, skip, neg_inf)
        alpha[t] = emit[t] + np.logaddexp(np.logaddexp(stay, step), skip)
    tail = alpha[T - 1, S - 1]
    if S > 1:
        tail = np.logaddexp(tail, alpha[T - 1, S - 2])
    log_p = tail
    loss = np.asarray(-log_p)

    def backward_fn(g):
        # beta excludes the emission at t, so alpha + beta sums path mass
        # through each state exactly once per time step.
        beta = np.full((T, S), neg_inf)
        beta[T - 1, S - 1] = 0.0
        if S > 1:
            beta[T - 1, S - 2] = 0.0
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1] + emit[t + 1]
            stay = nxt
            step = np.concatenate((nxt[1:], [neg_inf]))
            skip = np.concatenate((nxt[2:], [neg_inf, neg_inf]))
            skip = np.where(np.concatenate((can_skip[2:], [False, False])), skip, neg_inf)
            beta[t] = np.logaddexp(np.logaddexp(stay, step), skip)
        gamma = alpha + beta - log_p  # log posterior of passing state s at t
        post = np.exp(gamma)
        grad = np.zeros_like(lp)
        for s in range(S):
            grad[:, seq[s]] -= post[:, s]
        return (g.reshape(()) * grad,)

    return _emit(loss, (logprobs,), backward_fn)


def label_smoothing_loss(logprobs):
    """Mean per-frame KL(uniform || model); zero when already uniform."""
    vocab = logprobs.shape[1]
    return sub(np.log(1.0 / vocab), tmean(logprobs))


def greedy_decode(logprobs):
    """Best-path decode: argmax per frame, collapse repeats, drop blanks."""
    data = logprobs.data if isinstance(logprobs, Tensor) else np.asarray(logprobs)
    best = data.argmax(axis=1)
    ids = []
    prev = None
    for b in best:
        if b != prev and b != BLANK_ID:
            ids.append(int(b))
        prev = b
    return Transcript.from_text(ids_to_text(ids))


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 8
    learning_rate: float = 3e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    label_smoothing: float = 0.0
    rs_aug: bool = False
    rs_sigma_range: tuple = (0.0, 0.3)
    wave_aug: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        lo, hi = self.rs_sigma_range
        if not (0.0 <= lo <= hi <= 0.3):
            raise ValueError("rs_sigma_range must satisfy 0 <= lo <= hi <= 0.3")


class AdamState:
    def __init__(self, params, cfg):
        self.cfg = cfg
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, params):
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            self.m[name] = cfg.adam_beta1 * self.m[name] + (1 - cfg.adam_beta1) * g
            self.v[name] = cfg.adam_beta2 * self.v[name] + (1 - cfg.adam_beta2) * g * g
            m_hat = self.m[name] / (1 - cfg.adam_beta1**t)
            v_hat = self.v[name] / (1 - cfg.adam_beta2**t)
            p.data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def train(model, manifest, corpus_root, cfg):
    """Optimize model parameters in place; returns per-epoch mean losses.

    Deterministic for fixed (model seed, train config, corpus): shuffling,
    noise-augmentation draws and parameter updates all derive from
    cfg.seed.  Raises DivergenceError if any batch loss goes non-finite.
    """
    entries = manifest.split("train")
    if not entries:
        raise ValueError("manifest has no train split")
    # Keep the PCM payloads in memory; float conversion happens per use.
    pcm = []
    for e in entries:
        wave = e.load(corpus_root)
        pcm.append(np.rint(wave.samples * 32768.0).astype(np.int16))
    resynth = None
    if cfg.wave_aug:
        from .defenses import DefenseConfig, resynthesize

        resynth_cfg = DefenseConfig(method="resynth")
        resynth = [
            resynthesize(e.load(corpus_root), resynth_cfg).samples for e in entries
        ]
    targets = [Transcript.from_text(e.transcript) for e in entries]
    rng = np.random.default_rng(derive_seed(cfg.seed, "train", model.config.name))
    adam = AdamState(model.params, cfg)
    lam = cfg.label_smoothing
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(entries))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            try:
                with Tape() as tape:
                    total = None
                    for idx in batch:
                        samples = (
                            resynth[idx].copy()
                            if resynth is not None
                            else pcm[idx].astype(np.float64) / 32768.0
                        )
                        if cfg.rs_aug:
                            sigma = rng.uniform(*cfg.rs_sigma_range)
                            samples = np.clip(
                                samples + rng.normal(0.0, sigma, samples.shape[0]), -1.0, 1.0
                            )
                        logprobs = model.forward(Tensor(samples))
                        loss = ctc_loss(logprobs, targets[idx])
                        if lam > 0.0:
                            loss = add(
                                mul(loss, 1.0 - lam),
                                mul(label_smoothing_loss(logprobs), lam),
                            )
                        total = loss if total is None else add(total, loss)
                    batch_loss = mul(total, 1.0 / len(batch))
                    tape.backward(batch_loss)
            except NonFiniteInputError as exc:
                # Exploded parameters surface as non-finite activations on
                # the next forward pass; report them as training divergence.
                raise DivergenceError(f"non-finite loss in epoch {epoch}") from exc
            value = batch_loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss in epoch {epoch}")
            try:
                adam.step(model.params)
            except NonFiniteInputError as exc:  # pragma: no cover - guard
                raise DivergenceError(f"non-finite update in epoch {epoch}") from exc
            epoch_losses.append(value)
        curve.append(float(np.mean(epoch_losses)))
    return curve


_MAGIC = b"AMCK"
_VERSION = 1


def save_checkpoint(model, path):
    """Single-file checkpoint: magic, version, embedded config, named tensors.

    Byte layout (all integers little-endian):
      bytes 0-3   magic "AMCK"
      uint32      format version (1)
      uint32      length of UTF-8 JSON config blob, then the blob
      uint32      number of parameter tensors
      per tensor: uint16 name length, name bytes, uint8 ndim,
                  uint32 per dimension, then float64 data little-endian
    """
    cfg = asdict(model.config)
    cfg["seed"] = model.seed
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(model.params)))
        for name in sorted(model.params):
            data = np.ascontiguousarray(model.params[name].data, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        cfg = json.loads(fh.read(blob_len).decode("utf-8"))
        seed = cfg.pop("seed", 0)
        cfg["conv_channels"] = tuple(cfg["conv_channels"])
        model = AcousticModel(ModelConfig(**cfg), seed=seed)
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(size * 8), dtype="<f8").reshape(shape)
            if name not in model.params:
                raise ValueError(f"{path}: unexpected tensor {name!r}")
            if model.params[name].data.shape != shape:
                raise ValueError(f"{path}: tensor {name!r} has shape {shape}")
            model.params[name] = Tensor(data.copy(), requires_grad=True)
    return model
