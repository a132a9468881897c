"""Synthetic speech-like corpora with controllable domain shift, and their on-disk format.

Each character owns a short prototype sequence of feature frames. An utterance
concatenates tempo-stretched prototypes for its transcript, then applies a
speaker offset, a per-dimension channel filter and additive Gaussian noise.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .ctc import DEFAULT_VOCAB, Vocabulary


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # [T, d_in] float32
    text: str
    domain: str

    @property
    def frames(self) -> int:
        return int(self.features.shape[0])


@dataclass
class Corpus:
    utterances: list[Utterance] = field(default_factory=list)
    name: str = ""

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.utterances)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Corpus(self.utterances[i], self.name)
        return self.utterances[i]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for u in self.utterances:
            h.update(u.id.encode())
            h.update(u.text.encode())
            h.update(u.domain.encode())
            h.update(np.ascontiguousarray(u.features, dtype="<f4").tobytes())
        return h.hexdigest()


@dataclass
class DomainSpec:
    name: str
    seed: int
    prototypes: dict[str, np.ndarray]
    noise: float = 0.3
    channel_scale: np.ndarray | None = None
    channel_offset: np.ndarray | None = None
    speaker_std: float = 0.3
    tempo: tuple[float, float] = (1.2, 2.0)
    edge_silence: int = 2
    repeat_gap: int = 4
    text_mode: str = "words"  # words | uniform
    lexicon: tuple[str, ...] = ()

    def __post_init__(self):
        if self.noise < 0 or self.speaker_std < 0:
            raise ValueError("noise and speaker_std must be non-negative")
        if not self.prototypes:
            raise ValueError("prototype dictionary is empty")
        if self.tempo[0] <= 0 or self.tempo[1] < self.tempo[0]:
            raise ValueError(f"bad tempo range {self.tempo}")

    @property
    def d_in(self) -> int:
        return next(iter(self.prototypes.values())).shape[1]


def make_prototypes(vocab: Vocabulary = DEFAULT_VOCAB, d_in: int = 16, seed: int = 0,
                    length_range: tuple[int, int] = (3, 6), margin: float = 2.0) -> dict[str, np.ndarray]:
    """Random per-character frame sequences whose mean vectors are pairwise >= ``margin`` apart."""
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        protos = {}
        for c in vocab.chars:
            n = int(rng.integers(length_range[0], length_range[1] + 1))
            protos[c] = rng.normal(0.0, 1.0, size=(n, d_in))
        try:
            check_prototypes(protos, margin)
        except ValueError:
            continue
        return protos
    raise RuntimeError("could not draw separable prototypes")


def check_prototypes(protos: dict[str, np.ndarray], margin: float = 2.0) -> None:
    keys = list(protos)
    means = np.stack([protos[k].mean(0) for k in keys])
    for i in range(len(keys)):
        for j in range(i + 1, len(keys)):
            if np.linalg.norm(means[i] - means[j]) < margin:
                raise ValueError(f"prototypes {keys[i]!r} and {keys[j]!r} closer than {margin}")


def make_lexicon(vocab: Vocabulary = DEFAULT_VOCAB, size: int = 40, seed: int = 0) -> tuple[str, ...]:
    rng = np.random.default_rng(seed)
    letters = [c for c in vocab.chars if c != " "]
    words: set[str] = set()
    while len(words) < size:
        n = int(rng.integers(1, 5))
        words.add("".join(rng.choice(letters, size=n)))
    return tuple(sorted(words))


def indomain_spec(seed: int = 0, vocab: Vocabulary = DEFAULT_VOCAB, d_in: int = 16, text_mode: str = "words") -> DomainSpec:
    protos = make_prototypes(vocab, d_in, seed)
    return DomainSpec(name="indomain", seed=seed, prototypes=protos, noise=0.4, speaker_std=0.3,
                      channel_scale=np.ones(d_in), channel_offset=np.zeros(d_in),
                      tempo=(1.2, 2.0), text_mode=text_mode, lexicon=make_lexicon(vocab, seed=seed + 1))


def ood_spec(seed: int = 0, vocab: Vocabulary = DEFAULT_VOCAB, d_in: int = 16) -> DomainSpec:
    """Same language, harsher channel: 3x noise, shifted per-dimension filter, wider speakers."""
    base = indomain_spec(seed, vocab, d_in)
    rng = np.random.default_rng(seed + 7919)
    return replace(base, name="ood", noise=3 * base.noise, speaker_std=1.5 * base.speaker_std,
                   channel_scale=1.0 + rng.uniform(-0.4, 0.4, size=d_in),
                   channel_offset=rng.normal(0.0, 0.4, size=d_in), tempo=(1.1, 2.2))


def _sample_text(spec: DomainSpec, vocab: Vocabulary, rng: np.random.Generator, lo: int, hi: int) -> str:
    target = int(rng.integers(lo, hi + 1))
    if spec.text_mode == "uniform":
        letters = [c for c in vocab.chars if c != " "]
        out: list[str] = []
        while len(out) < target:
            if out and out[-1] != " " and len(out) < target - 1 and " " in vocab.chars and rng.random() < 0.2:
                out.append(" ")
            else:
                out.append(str(rng.choice(letters)))
        return "".join(out)
    if spec.text_mode != "words" or not spec.lexicon:
        raise ValueError(f"text_mode {spec.text_mode!r} needs a lexicon")
    text = ""
    while len(text) < target:
        w = spec.lexicon[int(rng.integers(len(spec.lexicon)))]
        text = w if not text else f"{text} {w}"
    return text[:hi].rstrip()


def _stretch(proto: np.ndarray, n: int) -> np.ndarray:
    if n == proto.shape[0]:
        return proto.copy()
    src = np.linspace(0.0, proto.shape[0] - 1, n)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, proto.shape[0] - 1)
    w = (src - lo)[:, None]
    return proto[lo] * (1 - w) + proto[hi] * w


def render(spec: DomainSpec, text: str, rng: np.random.Generator) -> np.ndarray:
    """Features for one transcript (float64, before float32 storage)."""
    d = spec.d_in
    pieces = []
    if spec.edge_silence:
        pieces.append(np.zeros((spec.edge_silence, d)))
    prev = None
    for c in text:
        if c not in spec.prototypes:
            raise ValueError(f"no prototype for character {c!r}")
        if c == prev and spec.repeat_gap:
            pieces.append(np.zeros((spec.repeat_gap, d)))
        proto = spec.prototypes[c]
        tempo = rng.uniform(*spec.tempo) if spec.tempo[1] > spec.tempo[0] else spec.tempo[0]
        n = max(1, int(round(proto.shape[0] * tempo)))
        pieces.append(_stretch(proto, n))
        prev = c
    if spec.edge_silence:
        pieces.append(np.zeros((spec.edge_silence, d)))
    x = np.concatenate(pieces, axis=0)
    if spec.speaker_std > 0:
        x = x + rng.normal(0.0, spec.speaker_std, size=d)
    if spec.channel_scale is not None:
        x = x * spec.channel_scale
    if spec.channel_offset is not None:
        x = x + spec.channel_offset
    if spec.noise > 0:
        x = x + rng.normal(0.0, spec.noise, size=x.shape)
    return x


def generate_corpus(spec: DomainSpec, n_utterances: int, length_range: tuple[int, int] = (5, 15),
                    seed: int = 0, vocab: Vocabulary = DEFAULT_VOCAB, prefix: str | None = None) -> Corpus:
    """Deterministic in ``(spec, n_utterances, length_range, seed)``; one derived RNG per utterance."""
    if n_utterances < 1:
        raise ValueError("n_utterances must be >= 1")
    if not vocab.chars:
        raise ValueError("vocabulary is empty")
    check_prototypes(spec.prototypes, margin=1e-9)
    prefix = prefix or f"{spec.name}-{seed}"
    utts = []
    for i in range(n_utterances):
        rng = np.random.default_rng([seed, i])
        text = _sample_text(spec, vocab, rng, *length_range)
        feats = render(spec, text, rng).astype(np.float32)
        utts.append(Utterance(f"{prefix}-{i:05d}", feats, text, spec.name))
    return Corpus(utts, prefix)


def single_utterance(spec: DomainSpec, text: str, seed: int = 0) -> Utterance:
    feats = render(spec, text, np.random.default_rng(seed)).astype(np.float32)
    return Utterance(f"{spec.name}-single", feats, text, spec.name)


# ------------------------------------------------------------------ persistence

MANIFEST = "manifest.jsonl"


def save_corpus(corpus: Corpus, directory, overwrite: bool = False) -> Path:
    """Write ``<id>.f32`` payloads (raw little-endian float32) and a JSON-lines manifest."""
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()) and not overwrite:
        raise FileExistsError(f"{directory} is not empty (pass overwrite=True)")
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for u in corpus:
        rel = f"{u.id}.f32"
        (directory / rel).write_bytes(np.ascontiguousarray(u.features, dtype="<f4").tobytes())
        rec = {"id": u.id, "path": rel, "frames": u.frames, "dim": int(u.features.shape[1]),
               "text": u.text, "domain": u.domain}
        lines.append(json.dumps(rec, ensure_ascii=False))
    manifest = directory / MANIFEST
    manifest.write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return manifest


def load_corpus(manifest_path, vocab: Vocabulary | None = DEFAULT_VOCAB) -> Corpus:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(manifest_path)
    root = manifest_path.parent
    utts = []
    allowed = set(vocab.chars) if vocab is not None else None
    for lineno, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        keys = {"id", "path", "frames", "dim", "text", "domain"}
        if set(rec) != keys:
            raise ValueError(f"{manifest_path}:{lineno}: fields {sorted(rec)} != {sorted(keys)}")
        uid = rec["id"]
        path = root / rec["path"]
        if not path.exists():
            raise FileNotFoundError(f"payload for utterance {uid} missing: {path}")
        raw = path.read_bytes()
        expected = rec["frames"] * rec["dim"] * 4
        if len(raw) != expected:
            raise ValueError(f"utterance {uid}: payload has {len(raw)} bytes, expected {expected}")
        feats = np.frombuffer(raw, dtype="<f4").reshape(rec["frames"], rec["dim"]).astype(np.float32)
        if not np.isfinite(feats).all():
            raise ValueError(f"utterance {uid}: non-finite features")
        if allowed is not None:
            bad = set(rec["text"]) - allowed
            if bad:
                raise ValueError(f"utterance {uid}: unknown characters {sorted(bad)}")
        utts.append(Utterance(uid, feats, rec["text"], rec["domain"]))
    return Corpus(utts, root.name)


# --------------------------------------------------------------------- batching

def pad_batch(utts: Sequence[Utterance]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad features to ``[N, T_max, d_in]`` float64; returns ``(features, lengths)``."""
    lengths = np.array([u.frames for u in utts], dtype=np.int64)
    d = utts[0].features.shape[1]
    out = np.zeros((len(utts), int(lengths.max()), d))
    for i, u in enumerate(utts):
        out[i, : u.frames] = u.features
    return out, lengths


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
