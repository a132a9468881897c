"""Fine-tuning strategies as policies over (trainable set, extra losses, replay gating).

Eight strategies are supported: ``frozen``, ``full_ft``, ``fixed_cnn``,
``two_phase``, ``lora``, ``adapters``, ``ewc`` and ``replay``. A strategy decides
which parameters train at a given epoch, whether an EWC penalty is added to
the CTC loss, and whether a replayed self-supervised batch joins the step.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .ctc import DEFAULT_VOCAB, DownstreamHead, Vocabulary, ctc_loss_batch, error_rate, greedy_decode, head_forward
from .data import Corpus, Utterance, batches, pad_batch
from .encoder import (ADAPTATION, FRONTEND, AdaptationSpec, Encoder, EncoderConfig, encoder_from_state,
                      inject_adapters, inject_lora, partition, save_checkpoint, weighted_layer_sum)
from .numerics import OptimizerState, ParamStore, Tensor
from .ssl import MaskSpec, TeacherState, ssl_loss_batch

log = logging.getLogger(__name__)

STRATEGIES = ("frozen", "full_ft", "fixed_cnn", "two_phase", "lora", "adapters", "ewc", "replay")
LAYER_WEIGHTS = "layer_weights"
METRIC_COLUMNS = ["run_id", "strategy", "seed", "epoch", "split", "metric", "value"]


@dataclass
class StrategyConfig:
    kind: str = "full_ft"
    ewc_lambda: float = 50.0
    lora_rank: int = 16
    adapter_dim: int = 8
    replay_p: float = 0.25
    freeze_epochs: int = 3
    replay_source: str = "pretrain_corpus"  # pretrain_corpus | finetune_corpus

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if self.ewc_lambda < 0:
            raise ValueError("ewc_lambda must be >= 0")
        if not 0.0 <= self.replay_p <= 1.0:
            raise ValueError("replay_p must lie in [0, 1]")
        if self.freeze_epochs < 0:
            raise ValueError("freeze_epochs must be >= 0")
        if self.replay_source not in ("pretrain_corpus", "finetune_corpus"):
            raise ValueError(f"unknown replay_source {self.replay_source!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FisherInfo:
    values: dict[str, np.ndarray]
    corpus_id: str = ""
    n_samples: int = 0

    def __post_init__(self):
        for name, v in self.values.items():
            if (v < 0).any():
                raise ValueError(f"negative Fisher entry for {name}")


# -------------------------------------------------------------------- the model

class AsrModel:
    """Encoder + CTC head (+ learned layer weights for the frozen strategy).

    ``params`` holds the encoder tensors under their own names, the head under
    ``head.*`` and the optional layer weights under ``layer_weights``.
    """

    def __init__(self, encoder: Encoder, head: DownstreamHead, layer_sum: bool = False):
        self.encoder = encoder
        self.head = head
        self.layer_sum = layer_sum
        self.params = ParamStore()
        for name, t in encoder.params.items():
            self.params.attach(name, t)
        for name, t in head.params.items():
            self.params.attach(name, t)
        if layer_sum:
            self.params.add(LAYER_WEIGHTS, np.zeros(encoder.num_layers))

    def sync(self) -> None:
        """Pick up parameters added to the encoder after construction (injections)."""
        for name, t in self.encoder.params.items():
            if name not in self.params:
                self.params.attach(name, t)

    def label(self, name: str) -> str:
        if name == LAYER_WEIGHTS:
            return LAYER_WEIGHTS
        if name.startswith(self.head.prefix + "."):
            return "head"
        return partition(name)

    def head_names(self) -> list[str]:
        return [n for n in self.params.names() if self.label(n) == "head"]

    def logprobs(self, features: np.ndarray, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        layers, out_len = self.encoder.forward(features, lengths)
        x = weighted_layer_sum(layers, self.params[LAYER_WEIGHTS]) if self.layer_sum else layers[-1]
        return head_forward(self.head, x), out_len


def build_model(encoder_state: dict[str, np.ndarray], config: EncoderConfig, strategy: StrategyConfig,
                vocab: Vocabulary = DEFAULT_VOCAB, hidden: int = 64, seed: int = 0) -> AsrModel:
    encoder = encoder_from_state(config, encoder_state, trainable=True)
    if strategy.kind == "lora":
        inject_lora(encoder, AdaptationSpec("lora", rank=strategy.lora_rank), seed=seed)
    elif strategy.kind == "adapters":
        inject_adapters(encoder, AdaptationSpec("adapter", bottleneck=strategy.adapter_dim), seed=seed)
    head = DownstreamHead(config.d_model, vocab.size, hidden=hidden, seed=seed)
    return AsrModel(encoder, head, layer_sum=strategy.kind == "frozen")


def trainable_set(model: AsrModel, strategy: StrategyConfig, epoch: int) -> list[str]:
    """Names that train under ``strategy`` at 1-indexed ``epoch``."""
    names = model.params.names()
    head = model.head_names()
    kind = strategy.kind
    if kind == "frozen":
        if not model.layer_sum:
            raise ValueError("frozen strategy needs a model with layer weights")
        return sorted(head + [LAYER_WEIGHTS])
    if model.layer_sum:
        raise ValueError(f"strategy {kind!r} does not use layer weights")
    labels = {n: model.label(n) for n in names}
    has_lora = any(".lora_" in n for n in names)
    has_adapters = any(".adapter." in n for n in names)
    if kind == "lora":
        if not has_lora:
            raise ValueError("lora strategy requires injected LoRA factors")
        return sorted(head + [n for n in names if ".lora_" in n])
    if kind == "adapters":
        if not has_adapters:
            raise ValueError("adapters strategy requires injected adapters")
        return sorted(head + [n for n in names if ".adapter." in n])
    if has_lora or has_adapters:
        raise ValueError(f"strategy {kind!r} does not expect adaptation attachments")
    if kind in ("full_ft", "ewc", "replay"):
        return list(names)
    if kind == "fixed_cnn":
        return [n for n in names if labels[n] != FRONTEND]
    if kind == "two_phase":
        return sorted(head) if epoch <= strategy.freeze_epochs else list(names)
    raise ValueError(f"unknown strategy {kind!r}")


# ------------------------------------------------------------------ EWC pieces

def empirical_fisher(loss_fn: Callable[[object], Tensor], params: ParamStore, samples: Iterable,
                     names: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Diagonal empirical Fisher: mean over samples of squared loss gradients."""
    names = list(params.names() if names is None else names)
    saved = {n: params[n].requires_grad for n in params.names()}
    params.set_trainable(names)
    acc = {n: np.zeros_like(params[n].values) for n in names}
    count = 0
    try:
        for sample in samples:
            grads = nx.backward(loss_fn(sample), params)
            for n in names:
                acc[n] += grads[n] * grads[n]
            count += 1
    finally:
        for n, flag in saved.items():
            params[n].requires_grad = flag
    if count == 0:
        raise ValueError("no samples for Fisher estimation")
    return {n: v / count for n, v in acc.items()}


def estimate_fisher(encoder: Encoder, teacher: TeacherState, corpus: Corpus, n_samples: int,
                    seed: int = 0, mask: MaskSpec | None = None) -> FisherInfo:
    """Per-utterance SSL gradients at ``encoder`` (θ*), squared and averaged."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if len(corpus) == 0:
        raise ValueError("Fisher corpus is empty")
    mask = mask or MaskSpec()
    work = Encoder(encoder.config, params=encoder.params.copy())
    rng = np.random.default_rng([seed, 11])
    order = [int(i) for i in rng.permutation(len(corpus))]
    picks = [order[i % len(order)] for i in range(n_samples)]
    mask_rng = np.random.default_rng([seed, 12])

    def loss_fn(i: int) -> Tensor:
        return ssl_loss_batch(work, teacher, [corpus[i]], mask, rng=mask_rng)

    values = empirical_fisher(loss_fn, work.params, picks, names=work.pretrained_names())
    return FisherInfo(values, corpus_id=corpus.name, n_samples=n_samples)


def ewc_penalty(params: ParamStore, anchor: dict[str, np.ndarray], fisher: FisherInfo, lam: float) -> Tensor:
    """``sum_i (lam/2) F_i (theta_i - theta*_i)^2`` over the Fisher-covered parameters."""
    tensors = []
    diffs = []
    total = 0.0
    for name in sorted(fisher.values):
        if name not in params or name not in anchor:
            raise KeyError(f"parameter {name!r} missing from model or anchor")
        t = params[name]
        f = fisher.values[name]
        if t.shape != f.shape or anchor[name].shape != f.shape:
            raise ValueError(f"shape mismatch for {name}")
        d = t.values - anchor[name]
        total += float((0.5 * lam * f * d * d).sum())
        tensors.append(t)
        diffs.append(lam * f * d)

    def bw(g):
        return tuple(g * d for d in diffs)

    return nx.make_node(np.asarray(total), tuple(tensors), bw)


# ------------------------------------------------------------------ train state

@dataclass
class TrainState:
    theta_star: dict[str, np.ndarray]
    optimizer: OptimizerState
    seed: int = 0
    epoch: int = 1
    fisher: FisherInfo | None = None
    teacher: TeacherState | None = None
    mask: MaskSpec = field(default_factory=MaskSpec)
    replay_rng: np.random.Generator = None
    replay_pick_rng: np.random.Generator = None
    replay_mask_rng: np.random.Generator = None
    data_rng: np.random.Generator = None
    replay_fired: int = 0
    replay_checks: int = 0

    def __post_init__(self):
        self.theta_star = {k: v.copy() for k, v in self.theta_star.items()}
        for arr in self.theta_star.values():
            arr.setflags(write=False)
        if self.replay_rng is None:
            self.replay_rng = np.random.default_rng([self.seed, 101])
        if self.replay_pick_rng is None:
            self.replay_pick_rng = np.random.default_rng([self.seed, 102])
        if self.replay_mask_rng is None:
            self.replay_mask_rng = np.random.default_rng([self.seed, 103])
        if self.data_rng is None:
            self.data_rng = np.random.default_rng([self.seed, 104])


def replay_gate(state: TrainState, p: float) -> bool:
    """No replay in epoch 1; afterwards fire when ``U(0,1) < p`` from the replay RNG."""
    if state.epoch <= 1:
        return False
    state.replay_checks += 1
    fired = bool(state.replay_rng.random() < p)
    state.replay_fired += fired
    return fired


def finetune_objective(model: AsrModel, ds_batch: Sequence[Utterance], replay_batch: Sequence[Utterance] | None,
                       strategy: StrategyConfig, state: TrainState,
                       vocab: Vocabulary = DEFAULT_VOCAB) -> tuple[Tensor, dict[str, float]]:
    """CTC (+ EWC) (+ replayed SSL) as one graph, plus the per-term values."""
    feats, lengths = pad_batch(ds_batch)
    logp, out_len = model.logprobs(feats, lengths)
    targets = [vocab.encode(u.text) for u in ds_batch]
    l_ds = ctc_loss_batch(logp, out_len, targets)
    total = l_ds
    l_ewc = 0.0
    l_ssl = 0.0
    if strategy.kind == "ewc":
        if state.fisher is None:
            raise ValueError("ewc strategy requires FisherInfo")
        pen = ewc_penalty(model.params, state.theta_star, state.fisher, strategy.ewc_lambda)
        l_ewc = float(pen.values)
        total = nx.add(total, pen)
    if replay_batch:
        if state.teacher is None:
            raise ValueError("replay requires the frozen pretraining teacher")
        rep = ssl_loss_batch(model.encoder, state.teacher, replay_batch, state.mask, rng=state.replay_mask_rng)
        l_ssl = float(rep.values)
        total = nx.add(total, rep)
    return total, {"L_DS": float(l_ds.values), "L_EWC": l_ewc, "L_SSL": l_ssl, "total": float(total.values)}


def finetune_step(model: AsrModel, ds_batch: Sequence[Utterance], replay_batch: Sequence[Utterance] | None,
                  strategy: StrategyConfig, state: TrainState, vocab: Vocabulary = DEFAULT_VOCAB) -> dict[str, float]:
    """One optimizer step on CTC (+ EWC) (+ replayed SSL); returns the loss breakdown."""
    model.params.set_trainable(trainable_set(model, strategy, state.epoch))
    total, parts = finetune_objective(model, ds_batch, replay_batch, strategy, state, vocab)
    if not np.isfinite(total.values):
        raise FloatingPointError(f"non-finite fine-tuning loss at epoch {state.epoch}")
    grads = nx.backward(total, model.params)
    nx.adam_step(model.params, grads, state.optimizer)
    return parts


# -------------------------------------------------------------------- evaluation

def transcribe(model: AsrModel, corpus: Corpus, vocab: Vocabulary = DEFAULT_VOCAB, batch_size: int = 32) -> list[str]:
    out = []
    with nx.no_grad():
        for idx in batches(len(corpus), batch_size):
            utts = [corpus[int(i)] for i in idx]
            feats, lengths = pad_batch(utts)
            logp, out_len = model.logprobs(feats, lengths)
            for j in range(len(utts)):
                out.append(vocab.decode(greedy_decode(logp.values[j, : out_len[j]])))
    return out


def evaluate(model: AsrModel, corpus: Corpus, vocab: Vocabulary = DEFAULT_VOCAB) -> dict[str, float]:
    hyps = transcribe(model, corpus, vocab)
    refs = [u.text for u in corpus]
    return {"cer": error_rate(hyps, refs, "char"), "wer": error_rate(hyps, refs, "word")}


# ------------------------------------------------------------------ the loop

@dataclass
class FinetuneResult:
    model: AsrModel
    rows: list[dict]
    checkpoints: list[Path]
    state: TrainState


def finetune(encoder_state: dict[str, np.ndarray], config: EncoderConfig, strategy: StrategyConfig,
             train: Corpus, epochs: int, seed: int = 0, *, replay_corpus: Corpus | None = None,
             fisher: FisherInfo | None = None, teacher: TeacherState | None = None,
             eval_sets: dict[str, Corpus] | None = None, out_dir=None, run_id: str = "run",
             vocab: Vocabulary = DEFAULT_VOCAB, batch_size: int = 8, lr: float = 1e-3, hidden: int = 64,
             mask: MaskSpec | None = None) -> FinetuneResult:
    """Fine-tune from ``encoder_state`` (θ*), saving ``epoch_{N}.ckpt`` after every epoch."""
    check_inputs(strategy, replay_corpus, fisher, teacher)
    if strategy.kind == "replay" and strategy.replay_source == "finetune_corpus":
        replay_corpus = train
    model = build_model(encoder_state, config, strategy, vocab, hidden, seed)
    state = TrainState(theta_star=encoder_state, optimizer=OptimizerState(lr=lr), seed=seed,
                       fisher=fisher, teacher=teacher, mask=mask or MaskSpec())
    rows: list[dict] = []
    ckpts: list[Path] = []
    out = Path(out_dir) if out_dir is not None else None

    def row(epoch, split, metric, value):
        rows.append({"run_id": run_id, "strategy": strategy.kind, "seed": seed, "epoch": epoch,
                     "split": split, "metric": metric, "value": float(value)})

    for epoch in range(1, epochs + 1):
        state.epoch = epoch
        fired0, checks0 = state.replay_fired, state.replay_checks
        sums = {"L_DS": 0.0, "L_EWC": 0.0, "L_SSL": 0.0, "total": 0.0}
        steps = 0
        for idx in batches(len(train), batch_size, state.data_rng):
            ds = [train[int(i)] for i in idx]
            rep = None
            if strategy.kind == "replay" and replay_gate(state, strategy.replay_p):
                pick = state.replay_pick_rng.choice(len(replay_corpus), size=min(batch_size, len(replay_corpus)),
                                                    replace=False)
                rep = [replay_corpus[int(i)] for i in pick]
            parts = finetune_step(model, ds, rep, strategy, state, vocab)
            for k in sums:
                sums[k] += parts[k]
            steps += 1
        for k in ("L_DS", "L_EWC", "L_SSL", "total"):
            row(epoch, "train", "loss_" + k.lower().replace("l_", ""), sums[k] / steps)
        if strategy.kind == "replay":
            checks = state.replay_checks - checks0
            row(epoch, "train", "replay_steps", state.replay_fired - fired0)
            row(epoch, "train", "gate_checks", checks)
        for split, corpus in (eval_sets or {}).items():
            scores = evaluate(model, corpus, vocab)
            row(epoch, split, "cer", scores["cer"])
            row(epoch, split, "wer", scores["wer"])
        if out is not None:
            path = out / f"epoch_{epoch}.ckpt"
            save_checkpoint(path, model.params, checkpoint_meta(config, strategy, epoch, vocab, hidden, seed, run_id))
            ckpts.append(path)
        log.info("%s epoch %d: %s", run_id, epoch, {k: round(v / steps, 4) for k, v in sums.items()})
    if out is not None:
        write_metrics(rows, out / "metrics.csv")
    return FinetuneResult(model, rows, ckpts, state)


def check_inputs(strategy: StrategyConfig, replay_corpus, fisher, teacher) -> None:
    if strategy.kind == "ewc" and fisher is None:
        raise ValueError("strategy 'ewc' requires FisherInfo")
    if strategy.kind == "replay":
        if teacher is None:
            raise ValueError("strategy 'replay' requires the frozen pretraining teacher")
        if strategy.replay_source == "pretrain_corpus" and (replay_corpus is None or len(replay_corpus) == 0):
            raise ValueError("strategy 'replay' with replay_source='pretrain_corpus' requires a replay corpus")


def checkpoint_meta(config: EncoderConfig, strategy: StrategyConfig, epoch: int, vocab: Vocabulary,
                    hidden: int, seed: int, run_id: str) -> dict:
    return {"encoder": asdict(config), "strategy": strategy.to_dict(), "epoch": epoch,
            "vocab": "".join(vocab.chars), "hidden": hidden, "seed": seed, "run_id": run_id}


def write_metrics(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["run_id"], r["strategy"], r["seed"], r["epoch"], r["split"], r["metric"], repr(float(r["value"]))])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        r["epoch"] = int(r["epoch"])
        r["value"] = float(r["value"])
    return rows
