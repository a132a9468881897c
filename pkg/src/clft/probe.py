"""Forgetting probe: pretraining SSL loss of each fine-tuning checkpoint against the frozen teacher."""
from __future__ import annotations

import csv
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Corpus
from .encoder import Encoder, EncoderConfig, encoder_from_state, load_checkpoint
from .plots import line_chart, write_svg
from .ssl import MaskSpec, TeacherState, corpus_ssl_loss, utterance_masks

PROBE_COLUMNS = ["run_id", "probe_set", "epoch", "ssl_loss"]
_EPOCH_RE = re.compile(r"epoch_(\d+)\.ckpt$")


@dataclass
class ProbeReport:
    run_id: str
    probe_set: str
    probe_seed: int
    points: list[tuple[int, float]] = field(default_factory=list)
    mask_hashes: list[str] = field(default_factory=list)

    @property
    def epochs(self) -> list[int]:
        return [e for e, _ in self.points]

    @property
    def losses(self) -> list[float]:
        return [l for _, l in self.points]


def probe_mask_hash(corpus: Corpus, config: EncoderConfig, spec: MaskSpec) -> str:
    h = hashlib.sha256()
    for i, u in enumerate(corpus):
        t = config.output_length(u.frames)
        h.update(np.packbits(utterance_masks([t], spec, [i], t)[0]).tobytes())
    return h.hexdigest()[:16]


def _encoder_from(checkpoint, config: EncoderConfig | None) -> Encoder:
    if isinstance(checkpoint, Encoder):
        return checkpoint
    if isinstance(checkpoint, dict):
        if config is None:
            raise ValueError("an EncoderConfig is needed for an in-memory state")
        return encoder_from_state(config, checkpoint)
    state, meta = load_checkpoint(checkpoint)
    cfg = EncoderConfig.from_dict(meta["encoder"]) if "encoder" in meta else config
    if cfg is None:
        raise ValueError(f"{checkpoint}: no encoder config in metadata")
    return encoder_from_state(cfg, state)


def probe_checkpoint(checkpoint, teacher: TeacherState, corpus: Corpus, probe_seed: int = 0,
                     mask: MaskSpec | None = None, config: EncoderConfig | None = None,
                     target_cache: dict | None = None) -> float:
    """Mean SSL loss of ``checkpoint`` (path, state dict or Encoder) on ``corpus``.

    Masks come from ``probe_seed`` and the utterance index only, so every
    checkpoint of a run sees the same masks.
    """
    if len(corpus) == 0:
        raise ValueError("probe corpus is empty")
    encoder = _encoder_from(checkpoint, config)
    for name, t in teacher.encoder.params.items():
        if name not in encoder.params or encoder.params[name].shape != t.shape:
            raise ValueError(f"checkpoint does not match teacher at {name!r}")
    base = mask or MaskSpec()
    spec = MaskSpec(base.p_start, base.span, seed=probe_seed)
    return corpus_ssl_loss(encoder, teacher, corpus, spec, target_cache=target_cache)


def list_checkpoints(run_dir) -> list[tuple[int, Path]]:
    found = []
    for p in Path(run_dir).glob("epoch_*.ckpt"):
        m = _EPOCH_RE.search(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return sorted(found)


def probe_series(run_dir, probe_corpora: dict[str, Corpus], teacher: TeacherState, probe_seed: int = 0,
                 run_id: str | None = None, mask: MaskSpec | None = None) -> list[ProbeReport]:
    ckpts = list_checkpoints(run_dir)
    if not ckpts:
        raise FileNotFoundError(f"no epoch_*.ckpt checkpoints in {run_dir}")
    run_id = run_id or Path(run_dir).name
    base = mask or MaskSpec()
    spec = MaskSpec(base.p_start, base.span, seed=probe_seed)
    reports = []
    for name, corpus in probe_corpora.items():
        rep = ProbeReport(run_id, name, probe_seed)
        cache: dict = {}
        for epoch, path in ckpts:
            enc = _encoder_from(path, None)
            rep.points.append((epoch, probe_checkpoint(enc, teacher, corpus, probe_seed, mask, target_cache=cache)))
            rep.mask_hashes.append(probe_mask_hash(corpus, enc.config, spec))
        reports.append(rep)
    return reports


def write_probe_csv(reports: list[ProbeReport], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROBE_COLUMNS)
        for rep in reports:
            for epoch, loss in rep.points:
                w.writerow([rep.run_id, rep.probe_set, epoch, repr(float(loss))])
    return path


def read_probe_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["epoch"] = int(r["epoch"])
        r["ssl_loss"] = float(r["ssl_loss"])
    return rows


def probe_plot(reports: list[ProbeReport], path, title: str = "SSL loss during fine-tuning") -> Path:
    series = {f"{r.run_id} [{r.probe_set}]": (r.epochs, r.losses) for r in reports}
    return write_svg(path, line_chart(series, title=title, xlabel="epoch", ylabel="SSL loss"))
