"""Deterministic synthetic spoken-command corpus.

Each vocabulary word owns a fixed two-tone chirp signature: a frequency
sweep plus a steady overtone, both unique to the word, lasting 150 ms.
Words are separated by 50 ms of near-silence, each word gets a seeded
presentation gain so utterances have real dynamic range, a reproducible
noise floor sits 30 dB below the mixed signal, and every utterance is
peak-normalized to 0.5.  The mapping (transcript, seed) -> samples is
bit-exact, which keeps whole corpora reproducible from a single root seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import Waveform, read_wav, write_wav
from .seeding import derive_seed

SAMPLE_RATE = 8000
WORD_SECONDS = 0.150
GAP_SECONDS = 0.050
NOISE_DB = -30.0
PEAK = 0.5
MIN_WORDS = 2
MAX_WORDS = 8

# Word -> base frequency of its chirp in Hz.  The sweep runs base..base+150,
# the overtone sits at base+700; bases are 160 Hz apart so no two words share
# a spectral peak within 50 Hz.  Lengths mix 2, 3 and 4 characters and no
# word repeats a letter back to back, keeping every transcript alignable.
WORD_TABLE = {
    "go": 350.0,
    "up": 510.0,
    "it": 670.0,
    "red": 830.0,
    "sun": 990.0,
    "box": 1150.0,
    "leg": 1310.0,
    "blue": 1470.0,
    "stop": 1630.0,
    "gray": 1790.0,
    "pond": 1950.0,
    "left": 2110.0,
}
VOCABULARY = tuple(WORD_TABLE)
CHIRP_SPAN_HZ = 150.0
OVERTONE_OFFSET_HZ = 700.0
# Per-word presentation gain range.  Quiet words keep small perturbations
# and inference-time smoothing noise relevant; loud words anchor the peak.
GAIN_RANGE = (0.35, 1.0)


class UnknownWordError(ValueError):
    """A transcript used a word outside the synthesis vocabulary."""


@dataclass(frozen=True)
class Utterance:
    id: str
    transcript: str
    path: str
    split: str

    def load(self, root):
        return read_wav(Path(root) / self.path)


@dataclass
class Manifest:
    """Ordered utterance index stored as JSON lines next to the audio."""

    entries: list = field(default_factory=list)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("manifest ids must be unique")

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def transcripts(self, split_name=None):
        return [
            e.transcript
            for e in self.entries
            if split_name is None or e.split == split_name
        ]

    def save(self, path):
        lines = [
            json.dumps(
                {"id": e.id, "transcript": e.transcript, "path": e.path, "split": e.split},
                sort_keys=True,
                separators=(",", ":"),
            )
            for e in self.entries
        ]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, check_files=True):
        root = Path(path).parent
        entries = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            entry = Utterance(
                id=rec["id"], transcript=rec["transcript"], path=rec["path"], split=rec["split"]
            )
            if check_files and not (root / entry.path).exists():
                raise FileNotFoundError(f"manifest references missing file {entry.path}")
            entries.append(entry)
        return cls(entries=entries)


def word_samples():
    return int(round(WORD_SECONDS * SAMPLE_RATE))


def gap_samples():
    return int(round(GAP_SECONDS * SAMPLE_RATE))


def utterance_samples(n_words):
    return n_words * word_samples() + (n_words - 1) * gap_samples()


def _word_signal(word):
    if word not in WORD_TABLE:
        raise UnknownWordError(f"word {word!r} is not in the synthesis vocabulary")
    base = WORD_TABLE[word]
    n = word_samples()
    t = np.arange(n) / SAMPLE_RATE
    sweep_rate = CHIRP_SPAN_HZ / WORD_SECONDS
    chirp_phase = 2.0 * np.pi * (base * t + 0.5 * sweep_rate * t * t)
    tone_phase = 2.0 * np.pi * (base + OVERTONE_OFFSET_HZ) * t
    signal = 0.65 * np.sin(chirp_phase) + 0.35 * np.sin(tone_phase)
    # 5 ms raised-cosine ramps keep word boundaries click-free.
    ramp = int(0.005 * SAMPLE_RATE)
    env = np.ones(n)
    env[:ramp] = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    env[-ramp:] = env[:ramp][::-1]
    return signal * env


def synthesize(transcript, seed):
    """Render a transcript to audio; bit-identical for identical arguments."""
    words = transcript.split() if isinstance(transcript, str) else list(transcript)
    if not words:
        raise ValueError("cannot synthesize an empty transcript")
    gap = np.zeros(gap_samples())
    rng = np.random.default_rng(derive_seed(seed, "synth", " ".join(words)))
    gains = rng.uniform(GAIN_RANGE[0], GAIN_RANGE[1], len(words))
    pieces = []
    for i, word in enumerate(words):
        if i:
            pieces.append(gap)
        pieces.append(gains[i] * _word_signal(word))
    signal = np.concatenate(pieces)
    noise_rms = np.sqrt(np.mean(signal**2)) * 10.0 ** (NOISE_DB / 20.0)
    noisy = signal + rng.normal(0.0, noise_rms, signal.shape[0])
    return Waveform(samples=noisy * (PEAK / np.abs(noisy).max()), sample_rate=SAMPLE_RATE)


def _sample_transcript(rng, vocabulary):
    count = int(rng.integers(MIN_WORDS, MAX_WORDS + 1))
    return " ".join(vocabulary[int(i)] for i in rng.integers(0, len(vocabulary), count))


def build_corpus(root, n_train=2000, n_test=100, seed=0, vocabulary=VOCABULARY):
    """Generate audio plus manifest under root; train/test share no transcript.

    Test transcripts are unique; train transcripts may repeat each other but
    never collide with the test side.  Returns the manifest, which is also
    written to root/manifest.jsonl.
    """
    for word in vocabulary:
        if word not in WORD_TABLE:
            raise UnknownWordError(f"word {word!r} is not in the synthesis vocabulary")
    root = Path(root)
    (root / "wavs").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(derive_seed(seed, "corpus"))
    test_texts = []
    seen = set()
    while len(test_texts) < n_test:
        text = _sample_transcript(rng, vocabulary)
        if text not in seen:
            seen.add(text)
            test_texts.append(text)
    train_texts = []
    while len(train_texts) < n_train:
        text = _sample_transcript(rng, vocabulary)
        if text not in seen:
            train_texts.append(text)
    entries = []
    for split, texts in (("train", train_texts), ("test", test_texts)):
        width = max(4, len(str(len(texts))))
        for i, text in enumerate(texts):
            utt_id = f"{split}-{i:0{width}d}"
            rel = f"wavs/{utt_id}.wav"
            write_wav(root / rel, synthesize(text, seed))
            entries.append(Utterance(id=utt_id, transcript=text, path=rel, split=split))
    manifest = Manifest(entries=entries)
    manifest.save(root / "manifest.jsonl")
    return manifest
