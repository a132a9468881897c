"""Character recognition head, CTC objective, greedy decoding and error rates."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from . import numerics as nx
from .numerics import ParamStore, Tensor

BLANK = 0


@dataclass(frozen=True)
class Vocabulary:
    """Characters map to indices ``1..len``; index 0 is the CTC blank."""

    chars: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.chars)) != len(self.chars):
            raise ValueError("vocabulary characters must be unique")
        if any(len(c) != 1 for c in self.chars):
            raise ValueError("vocabulary entries must be single characters")

    @classmethod
    def from_string(cls, s: str) -> "Vocabulary":
        return cls(tuple(s))

    @property
    def size(self) -> int:
        """Output classes including blank."""
        return len(self.chars) + 1

    def encode(self, text: str) -> np.ndarray:
        lookup = {c: i + 1 for i, c in enumerate(self.chars)}
        try:
            return np.array([lookup[c] for c in text], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"unknown character {exc.args[0]!r} in {text!r}") from None

    def decode(self, indices) -> str:
        return "".join(self.chars[i - 1] for i in indices if i != BLANK)


DEFAULT_VOCAB = Vocabulary.from_string("abcdefg ")


class DownstreamHead:
    """Two dense layers ``d -> H -> |V|+1`` with ReLU, then log-softmax per frame."""

    def __init__(self, d_model: int, n_classes: int, hidden: int = 64, seed: int = 0, prefix: str = "head"):
        rng = np.random.default_rng(seed)
        self.prefix = prefix
        self.d_model = d_model
        self.params = ParamStore()
        self.params.add(f"{prefix}.fc1.weight", rng.normal(0, 1 / np.sqrt(d_model), (d_model, hidden)))
        self.params.add(f"{prefix}.fc1.bias", np.zeros(hidden))
        self.params.add(f"{prefix}.fc2.weight", rng.normal(0, 1 / np.sqrt(hidden), (hidden, n_classes)))
        self.params.add(f"{prefix}.fc2.bias", np.zeros(n_classes))

    def __call__(self, latents) -> Tensor:
        return head_forward(self, latents)


def head_forward(head: DownstreamHead, latents) -> Tensor:
    x = nx.as_tensor(latents)
    if x.shape[-1] != head.d_model:
        raise ValueError(f"latent dim {x.shape[-1]} != head input {head.d_model}")
    p, pre = head.params, head.prefix
    h = nx.relu(nx.linear(x, p[f"{pre}.fc1.weight"], p[f"{pre}.fc1.bias"]))
    return nx.log_softmax(nx.linear(h, p[f"{pre}.fc2.weight"], p[f"{pre}.fc2.bias"]), axis=-1)


def min_frames(target: Sequence[int]) -> int:
    """Shortest input admitting a CTC alignment: labels plus repeated adjacent pairs."""
    t = np.asarray(target)
    return int(len(t) + (np.count_nonzero(t[1:] == t[:-1]) if len(t) > 1 else 0))


def _check_target(target: np.ndarray, frames: int) -> None:
    if (target == BLANK).any():
        raise ValueError("target contains the blank index")
    need = min_frames(target)
    if need > frames:
        raise ValueError(f"target needs {need} frames but only {frames} available")


def ctc_loss(logp, target) -> Tensor:
    """Negative log-likelihood of ``target`` under per-frame log-probs ``[T, K]``."""
    logp = nx.as_tensor(logp)
    target = np.asarray(target, dtype=np.int64)
    _check_target(target, logp.shape[0])
    nll, grad = _kernels.ctc_forward_backward(logp.values, target, BLANK)
    return nx.make_node(np.asarray(nll), (logp,), lambda g: (g * grad,))


def ctc_loss_batch(logp: Tensor, lengths: np.ndarray, targets: Sequence[np.ndarray]) -> Tensor:
    """Mean CTC loss over a right-padded batch ``[N, T, K]``."""
    n = logp.shape[0]
    grad = np.zeros_like(logp.values)
    total = 0.0
    for i in range(n):
        ln = int(lengths[i])
        tgt = np.asarray(targets[i], dtype=np.int64)
        _check_target(tgt, ln)
        nll, g = _kernels.ctc_forward_backward(logp.values[i, :ln], tgt, BLANK)
        total += nll
        grad[i, :ln] = g
    grad /= n
    return nx.make_node(np.asarray(total / n), (logp,), lambda g: (g * grad,))


def greedy_decode(logp) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks. Ties go to the lowest index."""
    lp = logp.values if isinstance(logp, Tensor) else np.asarray(logp)
    best = np.argmax(lp, axis=-1)
    out = []
    prev = -1
    for k in best:
        k = int(k)
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


def error_rate(hypotheses: Sequence[str], references: Sequence[str], unit: str = "char") -> float:
    """Total edit distance over total reference length (WER for ``unit='word'``)."""
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in length")
    if unit not in ("char", "word"):
        raise ValueError(f"unit must be 'char' or 'word', got {unit!r}")
    errors = 0
    total = 0
    for hyp, ref in zip(hypotheses, references):
        h_units, r_units = _units(hyp, unit), _units(ref, unit)
        table: dict[str, int] = {}
        h_ids = [table.setdefault(u, len(table)) for u in h_units]
        r_ids = [table.setdefault(u, len(table)) for u in r_units]
        errors += _kernels.edit_distance(r_ids, h_ids)
        total += len(r_units)
    if total == 0:
        raise ValueError("total reference length is zero")
    return errors / total


def _units(text: str, unit: str) -> list[str]:
    return text.split() if unit == "word" else list(text)
