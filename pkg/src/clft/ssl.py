"""Masked latent prediction with an EMA teacher (Data2Vec-style), and the pretraining loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import Corpus, Utterance, batches, pad_batch
from .encoder import Encoder, EncoderConfig
from .numerics import OptimizerState, Tensor

log = logging.getLogger(__name__)


@dataclass
class MaskSpec:
    p_start: float = 0.15
    span: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_start <= 1.0:
            raise ValueError("p_start must lie in [0, 1]")
        if self.span < 1:
            raise ValueError("span must be >= 1")


@dataclass
class TeacherState:
    encoder: Encoder
    decay: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError("decay must lie in [0, 1]")
        self.encoder.params.set_trainable(None)

    @classmethod
    def from_student(cls, student: Encoder, decay: float = 0.999) -> "TeacherState":
        teacher = Encoder(student.config, params=student.params.copy())
        # attachments never enter the teacher
        for name in list(teacher.params.names()):
            if ".lora_" in name or ".adapter." in name:
                raise ValueError("cannot build a teacher from an adapted encoder")
        return cls(teacher, decay)


def sample_mask(frames: int, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of length ``frames``: each frame starts a span of ``spec.span`` with prob ``p_start``.

    Spans are clipped at the sequence end and overlapping spans merge. When no
    span is drawn, one span of ``min(span, frames)`` is forced at a uniform position.
    """
    if frames < 1:
        raise ValueError("need at least one frame")
    starts = rng.random(frames) < spec.p_start
    if not starts.any():
        width = min(spec.span, frames)
        s = int(rng.integers(0, frames - width + 1))
        mask = np.zeros(frames, dtype=bool)
        mask[s:s + width] = True
        return mask
    covered = np.convolve(starts.astype(np.int64), np.ones(spec.span, dtype=np.int64))[:frames]
    return covered > 0


def expected_mask_fraction(frames: int, p_start: float, span: int) -> float:
    """Exact expected masked fraction, including edge effects and the forced span."""
    p_none = (1 - p_start) ** frames
    cover = np.array([1 - (1 - p_start) ** min(t + 1, span) for t in range(frames)])
    width = min(span, frames)
    return float(cover.sum() / frames + p_none * width / frames)


def utterance_masks(lengths: Sequence[int], spec: MaskSpec, keys: Sequence[int], t_max: int) -> np.ndarray:
    """Batch masks with one independent RNG per utterance key (fixed across calls)."""
    out = np.zeros((len(lengths), t_max), dtype=bool)
    for i, (ln, key) in enumerate(zip(lengths, keys)):
        out[i, :ln] = sample_mask(int(ln), spec, np.random.default_rng([spec.seed, int(key)]))
    return out


def instance_norm(x: np.ndarray, lengths, eps: float = 1e-5) -> np.ndarray:
    """Normalise each channel over the valid frames of each sequence; padding becomes 0."""
    out = np.zeros_like(x)
    for i, n in enumerate(lengths):
        seg = x[i, :n]
        out[i, :n] = (seg - seg.mean(0)) / np.sqrt(seg.var(0) + eps)
    return out


def teacher_targets(teacher: TeacherState, features: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    # Per-utterance channel normalisation removes the constant component a
    # collapsed student could otherwise match for free.
    with nx.no_grad():
        layers, out_len = teacher.encoder.forward(features, lengths)
    return instance_norm(layers[-1].values, out_len)


def ssl_loss(encoder: Encoder, teacher: TeacherState, features: np.ndarray, lengths: np.ndarray,
             mask: np.ndarray, targets: np.ndarray | None = None) -> Tensor:
    """MSE between student final-block output (masked input) and teacher output (unmasked) at masked frames."""
    if not mask.any():
        raise ValueError("mask selects no frames")
    if targets is None:
        targets = teacher_targets(teacher, features, lengths)
    layers, _ = encoder.forward(features, lengths, mask=mask)
    pred = layers[-1]
    if pred.shape != targets.shape:
        raise ValueError(f"student output {pred.shape} != teacher output {targets.shape}")
    return nx.masked_mse(pred, targets, mask)


def ssl_loss_batch(encoder: Encoder, teacher: TeacherState, utts: Sequence[Utterance], spec: MaskSpec,
                   rng: np.random.Generator | None = None, keys: Sequence[int] | None = None) -> Tensor:
    """Pad ``utts``, draw masks (from ``rng`` or per-utterance ``keys``) and compute :func:`ssl_loss`."""
    feats, lengths = pad_batch(utts)
    cfg = encoder.config
    out_len = np.array([cfg.output_length(int(l)) for l in lengths])
    t_max = cfg.output_length(feats.shape[1])
    if keys is not None:
        mask = utterance_masks(out_len, spec, keys, t_max)
    else:
        rng = rng if rng is not None else np.random.default_rng(spec.seed)
        mask = np.zeros((len(utts), t_max), dtype=bool)
        for i, ln in enumerate(out_len):
            mask[i, :ln] = sample_mask(int(ln), spec, rng)
    return ssl_loss(encoder, teacher, feats, lengths, mask)


def ema_update(teacher: TeacherState, student: Encoder) -> TeacherState:
    """``shadow <- tau * shadow + (1 - tau) * student`` for every teacher parameter."""
    tau = teacher.decay
    for name, t in teacher.encoder.params.items():
        if name not in student.params:
            raise KeyError(f"student lacks parameter {name!r}")
        s = student.params[name].values
        if s.shape != t.shape:
            raise ValueError(f"shape mismatch for {name}: {s.shape} vs {t.shape}")
        if tau == 1.0:
            continue
        t.values = s.copy() if tau == 0.0 else tau * t.values + (1.0 - tau) * s
    return teacher


def corpus_ssl_loss(encoder: Encoder, teacher: TeacherState, corpus: Corpus, spec: MaskSpec,
                    batch_size: int = 32, target_cache: dict | None = None) -> float:
    """Mean per-utterance SSL loss with fixed per-utterance masks (keys = corpus index)."""
    total = 0.0
    cfg = encoder.config
    with nx.no_grad():
        for idx in batches(len(corpus), batch_size):
            utts = [corpus[int(i)] for i in idx]
            feats, lengths = pad_batch(utts)
            out_len = np.array([cfg.output_length(int(l)) for l in lengths])
            t_max = cfg.output_length(feats.shape[1])
            mask = utterance_masks(out_len, spec, [int(i) for i in idx], t_max)
            key = (int(idx[0]), len(idx))
            if target_cache is not None and key in target_cache:
                targets = target_cache[key]
            else:
                targets = teacher_targets(teacher, feats, lengths)
                if target_cache is not None:
                    target_cache[key] = targets
            layers, _ = encoder.forward(feats, lengths, mask=mask)
            pred = layers[-1].values
            for j in range(len(idx)):
                m = mask[j]
                diff = pred[j][m] - targets[j][m]
                total += float((diff * diff).mean())
    return total / len(corpus)


@dataclass
class PretrainResult:
    student: Encoder
    teacher: TeacherState
    log: list[dict]


def pretrain(config: EncoderConfig, corpus: Corpus, epochs: int, seed: int = 0, valid: Corpus | None = None,
             mask: MaskSpec | None = None, batch_size: int = 8, lr: float = 1e-3, decay: float = 0.999,
             log_path=None) -> PretrainResult:
    """Self-supervised pretraining: ssl_loss -> backward -> Adam -> EMA, per batch."""
    if len(corpus) == 0:
        raise ValueError("pretraining corpus is empty")
    mask = mask or MaskSpec()
    student = Encoder(config, seed=seed)
    teacher = TeacherState.from_student(student, decay)
    opt = OptimizerState(lr=lr)
    data_rng = np.random.default_rng([seed, 1])
    mask_rng = np.random.default_rng([seed, 2])
    rows = []
    valid_spec = MaskSpec(mask.p_start, mask.span, seed=mask.seed + 1)
    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        for idx in batches(len(corpus), batch_size, data_rng):
            utts = [corpus[int(i)] for i in idx]
            loss = ssl_loss_batch(student, teacher, utts, mask, rng=mask_rng)
            if not np.isfinite(loss.values):
                raise FloatingPointError(f"pretraining diverged at epoch {epoch}: loss={loss.values}")
            grads = nx.backward(loss, student.params)
            nx.adam_step(student.params, grads, opt)
            ema_update(teacher, student)
            total += float(loss.values) * len(idx)
            count += len(idx)
        rows.append({"epoch": epoch, "split": "train", "ssl_loss": total / count})
        if valid is not None and len(valid):
            rows.append({"epoch": epoch, "split": "valid",
                         "ssl_loss": corpus_ssl_loss(student, teacher, valid, valid_spec)})
        log.info("pretrain epoch %d: %s", epoch, rows[-1])
    if log_path is not None:
        write_pretrain_log(rows, log_path)
    return PretrainResult(student, teacher, rows)


def write_pretrain_log(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "ssl_loss"])
        for r in rows:
            w.writerow([r["epoch"], r["split"], repr(float(r["ssl_loss"]))])
