"""Config-driven pipeline: data -> pretrain -> Fisher -> fine-tune per (strategy, seed) -> probe -> report."""
from __future__ import annotations

import csv
import json
import logging
import math
import shutil
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .ctc import Vocabulary
from .data import Corpus, MANIFEST, generate_corpus, indomain_spec, load_corpus, ood_spec, save_corpus
from .encoder import EncoderConfig, encoder_from_state, load_checkpoint, save_checkpoint
from .plots import line_chart, write_svg
from .probe import probe_plot, probe_series, read_probe_csv, write_probe_csv
from .ssl import MaskSpec, TeacherState, pretrain, write_pretrain_log
from .strategies import (METRIC_COLUMNS, FisherInfo, StrategyConfig, estimate_fisher, finetune, read_metrics,
                         write_metrics)

log = logging.getLogger(__name__)

SPLITS = ("pretrain", "pretrain_valid", "train", "valid", "test_id", "test_ood")
# corpus seed offsets; the effective seed is 1000 * data.seed + offset
_SPLIT_SEEDS = {"pretrain": 100, "pretrain_valid": 101, "train": 200, "valid": 201, "test_id": 202, "test_ood": 203}
SWEEP_COLUMNS = ["run_id", "hyperparameter", "value", "split", "metric", "value"]
SWEEP_PARAMS = {"r": "lora_rank", "lambda": "ewc_lambda", "p_R": "replay_p"}
SWEEP_STRATEGY = {"r": "lora", "lambda": "ewc", "p_R": "replay"}
INCOMPLETE = "INCOMPLETE"


class ConfigError(ValueError):
    """Invalid experiment configuration; the message starts with the offending field path."""


# ----------------------------------------------------------------- config types

@dataclass
class DataConfig:
    generate: bool = True
    seed: int = 0
    n_pretrain: int = 2000
    n_pretrain_valid: int = 100
    n_train: int = 200
    n_valid: int = 100
    n_test: int = 100
    length_min: int = 5
    length_max: int = 15
    paths: dict[str, str] = field(default_factory=dict)  # split -> manifest, used when generate is false


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    decay: float = 0.999
    seed: int = 0
    checkpoint: str | None = None  # load theta* instead of training


@dataclass
class FinetuneConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    hidden: int = 64
    eval_splits: list[str] = field(default_factory=lambda: ["valid", "test_id", "test_ood"])


@dataclass
class RunSpec:
    """One named strategy configuration; ``label`` becomes the run-id prefix."""
    label: str
    strategy: StrategyConfig


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mask: MaskSpec = field(default_factory=MaskSpec)
    vocab: str = "abcdefg "
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    runs: list[RunSpec] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: [0])
    fisher_samples: int = 100
    probe_seed: int = 0
    probe_sets: list[str] = field(default_factory=lambda: ["test_id", "test_ood"])

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary.from_string(self.vocab)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["runs"] = [{"label": r.label, **r.strategy.to_dict()} for r in self.runs]
        return d

    def validate(self) -> "ExperimentConfig":
        if not self.seeds:
            raise ConfigError("seeds: must list at least one seed")
        if not self.runs:
            raise ConfigError("runs: must list at least one strategy")
        labels = [r.label for r in self.runs]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"runs: duplicate labels {labels}")
        for section, name in (("pretrain", "epochs"), ("finetune", "epochs"), ("pretrain", "batch_size"),
                              ("finetune", "batch_size"), ("finetune", "hidden")):
            if getattr(getattr(self, section), name) < 1:
                raise ConfigError(f"{section}.{name}: must be >= 1")
        for section in ("pretrain", "finetune"):
            if not getattr(self, section).lr > 0:
                raise ConfigError(f"{section}.lr: must be > 0")
        if self.fisher_samples < 1:
            raise ConfigError("fisher_samples: must be >= 1")
        for split in self.finetune.eval_splits:
            if split not in SPLITS:
                raise ConfigError(f"finetune.eval_splits: unknown split {split!r}")
        for split in self.probe_sets:
            if split not in SPLITS:
                raise ConfigError(f"probe_sets: unknown split {split!r}")
        d = self.data
        if not 1 <= d.length_min <= d.length_max:
            raise ConfigError("data.length_min/length_max: need 1 <= min <= max")
        for name in ("n_pretrain", "n_pretrain_valid", "n_train", "n_valid", "n_test"):
            if getattr(d, name) < 1:
                raise ConfigError(f"data.{name}: must be >= 1")
        if not d.generate:
            need = {"train"} | set(self.finetune.eval_splits) | set(self.probe_sets)
            if self.pretrain.checkpoint is None or any(r.strategy.kind in ("ewc", "replay") for r in self.runs):
                need.add("pretrain")
            for split in sorted(need):
                if split not in d.paths:
                    raise ConfigError(f"data.paths.{split}: required when data.generate is false")
        for i, r in enumerate(self.runs):
            s = r.strategy
            if s.kind == "lora" and s.lora_rank > min(self.encoder.d_model, self.encoder.d_ff):
                raise ConfigError(f"runs[{i}].lora_rank: {s.lora_rank} exceeds the FFN matrix dims")
            if s.kind == "lora" and s.lora_rank < 1:
                raise ConfigError(f"runs[{i}].lora_rank: must be >= 1")
            if s.kind == "adapters" and s.adapter_dim < 1:
                raise ConfigError(f"runs[{i}].adapter_dim: must be >= 1")
        return self


def _build(cls, d, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(d) - known)
    if extra:
        raise ConfigError(f"{path}.{extra[0]}: unknown field")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("<root>: expected a JSON object")
    d = dict(d)
    known = {f.name for f in fields(ExperimentConfig)}
    extra = sorted(set(d) - known)
    if extra:
        raise ConfigError(f"{extra[0]}: unknown field")
    enc = _build(EncoderConfig, d.pop("encoder", {}), "encoder")
    try:
        enc.validate()
    except ValueError as exc:
        raise ConfigError(f"encoder: {exc}") from None
    runs = []
    for i, r in enumerate(d.pop("runs", [])):
        if not isinstance(r, dict):
            raise ConfigError(f"runs[{i}]: expected an object")
        r = dict(r)
        label = r.pop("label", None) or r.get("kind", "full_ft")
        runs.append(RunSpec(str(label), _build(StrategyConfig, r, f"runs[{i}]")))
    cfg = ExperimentConfig(
        encoder=enc,
        mask=_build(MaskSpec, d.pop("mask", {}), "mask"),
        data=_build(DataConfig, d.pop("data", {}), "data"),
        pretrain=_build(PretrainConfig, d.pop("pretrain", {}), "pretrain"),
        finetune=_build(FinetuneConfig, d.pop("finetune", {}), "finetune"),
        runs=runs,
        **d,
    )
    try:
        cfg.vocabulary
    except ValueError as exc:
        raise ConfigError(f"vocab: {exc}") from None
    if not isinstance(cfg.seeds, list) or not all(isinstance(s, int) for s in cfg.seeds):
        raise ConfigError("seeds: must be a list of integers")
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"<file>: {path} does not exist")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<file>: {path} is not valid JSON ({exc})") from None
    return config_from_dict(d)


# ------------------------------------------------------------------- workspace

@dataclass
class Workspace:
    """Directory layout of one experiment."""
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def pretrain(self) -> Path:
        return self.root / "pretrain"

    @property
    def runs(self) -> Path:
        return self.root / "runs"

    def run_dir(self, run_id: str) -> Path:
        return self.runs / run_id


def run_id(label: str, seed: int) -> str:
    return f"{label}_s{seed}"


def _prepare_dir(path: Path, overwrite: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{path} is not empty (use --overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


# ------------------------------------------------------------------------ stages

def generate_data(cfg: ExperimentConfig, ws: Workspace, overwrite: bool = False) -> dict[str, Corpus]:
    """Draw every split from the stock domain specs and write them under ``ws.data``."""
    vocab = cfg.vocabulary
    d = cfg.data
    d_in = cfg.encoder.d_in
    specs = {
        "pretrain": indomain_spec(d.seed, vocab, d_in, text_mode="uniform"),
        "train": indomain_spec(d.seed, vocab, d_in),
        "test_ood": ood_spec(d.seed, vocab, d_in),
    }
    specs["pretrain_valid"] = specs["pretrain"]
    specs["valid"] = specs["test_id"] = specs["train"]
    sizes = {"pretrain": d.n_pretrain, "pretrain_valid": d.n_pretrain_valid, "train": d.n_train,
             "valid": d.n_valid, "test_id": d.n_test, "test_ood": d.n_test}
    _prepare_dir(ws.data, overwrite)
    out = {}
    for split in SPLITS:
        corpus = generate_corpus(specs[split], sizes[split], (d.length_min, d.length_max),
                                 seed=1000 * d.seed + _SPLIT_SEEDS[split], vocab=vocab, prefix=split)
        save_corpus(corpus, ws.data / split)
        out[split] = corpus
    log.info("wrote %d splits under %s", len(out), ws.data)
    return out


def load_data(cfg: ExperimentConfig, ws: Workspace, splits=SPLITS) -> dict[str, Corpus]:
    out = {}
    for split in splits:
        if cfg.data.generate:
            path = ws.data / split / MANIFEST
        elif split in cfg.data.paths:
            path = Path(cfg.data.paths[split])
        else:
            continue
        if not path.exists():
            raise FileNotFoundError(f"corpus {split!r} not found at {path} (run gen-data first)")
        out[split] = load_corpus(path, cfg.vocabulary)
        out[split].name = split
    return out


def run_pretrain(cfg: ExperimentConfig, ws: Workspace, corpora: dict[str, Corpus]) -> tuple[dict, TeacherState]:
    """Train theta* and its EMA teacher; both are saved as checkpoints."""
    p = cfg.pretrain
    res = pretrain(cfg.encoder, corpora["pretrain"], p.epochs, seed=p.seed, valid=corpora.get("pretrain_valid"),
                   mask=cfg.mask, batch_size=p.batch_size, lr=p.lr, decay=p.decay)
    ws.pretrain.mkdir(parents=True, exist_ok=True)
    write_pretrain_log(res.log, ws.pretrain / "log.csv")
    meta = {"encoder": asdict(cfg.encoder), "decay": p.decay, "role": "student"}
    save_checkpoint(ws.pretrain / "theta_star.ckpt", res.student.params, meta)
    save_checkpoint(ws.pretrain / "teacher.ckpt", res.teacher.encoder.params, {**meta, "role": "teacher"})
    return res.student.params.state_dict(), res.teacher


def load_pretrained(cfg: ExperimentConfig, ws: Workspace) -> tuple[dict, TeacherState]:
    student_path = Path(cfg.pretrain.checkpoint) if cfg.pretrain.checkpoint else ws.pretrain / "theta_star.ckpt"
    if not student_path.exists():
        raise FileNotFoundError(f"no pretrained checkpoint at {student_path} (run pretrain first)")
    state, _ = load_checkpoint(student_path)
    teacher_path = student_path.with_name("teacher.ckpt")
    # a lone student checkpoint doubles as its own teacher
    tstate = load_checkpoint(teacher_path)[0] if teacher_path.exists() else state
    return state, TeacherState(encoder_from_state(cfg.encoder, tstate), cfg.pretrain.decay)


def fisher_for(cfg: ExperimentConfig, theta: dict, teacher: TeacherState, corpora: dict[str, Corpus]) -> FisherInfo:
    return estimate_fisher(encoder_from_state(cfg.encoder, theta), teacher, corpora["pretrain"],
                           cfg.fisher_samples, seed=cfg.pretrain.seed, mask=cfg.mask)


def run_finetune(cfg: ExperimentConfig, ws: Workspace, corpora: dict[str, Corpus], theta: dict,
                 teacher: TeacherState, labels: list[str] | None = None, seeds: list[int] | None = None,
                 fisher: FisherInfo | None = None) -> list[str]:
    """Fine-tune every selected (run, seed) pair; returns the run ids in order."""
    runs = [r for r in cfg.runs if labels is None or r.label in labels]
    if labels is not None and len(runs) != len(set(labels)):
        missing = sorted(set(labels) - {r.label for r in cfg.runs})
        raise ConfigError(f"runs: no run labelled {missing}")
    if fisher is None and any(r.strategy.kind == "ewc" for r in runs):
        fisher = fisher_for(cfg, theta, teacher, corpora)
    f = cfg.finetune
    done = []
    for spec in runs:
        for seed in seeds if seeds is not None else cfg.seeds:
            rid = run_id(spec.label, seed)
            out = ws.run_dir(rid)
            _prepare_dir(out, overwrite=True)
            marker = out / INCOMPLETE
            marker.write_text("fine-tuning started\n")
            t0 = time.perf_counter()
            finetune(theta, cfg.encoder, spec.strategy, corpora["train"], f.epochs, seed=seed,
                     replay_corpus=corpora.get("pretrain"), fisher=fisher, teacher=teacher,
                     eval_sets={s: corpora[s] for s in f.eval_splits}, out_dir=out, run_id=rid,
                     vocab=cfg.vocabulary, batch_size=f.batch_size, lr=f.lr, hidden=f.hidden, mask=cfg.mask)
            marker.write_text("fine-tuning finished; probe pending\n")
            log.info("%s finished in %.1fs", rid, time.perf_counter() - t0)
            done.append(rid)
    return done


def present_runs(cfg: ExperimentConfig, ws: Workspace) -> list[str]:
    """Run directories on disk, in config order, then any strays sorted."""
    on_disk = {p.name for p in ws.runs.iterdir() if p.is_dir()}
    known = [run_id(r.label, s) for r in cfg.runs for s in cfg.seeds]
    ordered = [r for r in known if r in on_disk]
    return ordered + sorted(on_disk - set(ordered))


def run_probe(cfg: ExperimentConfig, ws: Workspace, corpora: dict[str, Corpus], teacher: TeacherState,
              run_ids: list[str] | None = None) -> list[str]:
    run_ids = run_ids if run_ids is not None else present_runs(cfg, ws)
    probes = {s: corpora[s] for s in cfg.probe_sets}
    for rid in run_ids:
        d = ws.run_dir(rid)
        reports = probe_series(d, probes, teacher, cfg.probe_seed, rid, cfg.mask)
        write_probe_csv(reports, d / "probe.csv")
        probe_plot(reports, d / "probe.svg", title=f"{rid}: pretraining SSL loss")
        (d / INCOMPLETE).unlink(missing_ok=True)
    return run_ids


def collect(ws: Workspace, run_ids: list[str]) -> None:
    """Concatenate per-run metrics and probe CSVs at the experiment root."""
    rows, probe_rows = [], []
    for rid in run_ids:
        rows += read_metrics(ws.run_dir(rid) / "metrics.csv")
        probe_rows += read_probe_csv(ws.run_dir(rid) / "probe.csv")
    write_metrics(rows, ws.root / "metrics.csv")
    with open(ws.root / "probe.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "probe_set", "epoch", "ssl_loss"])
        for r in probe_rows:
            w.writerow([r["run_id"], r["probe_set"], r["epoch"], repr(r["ssl_loss"])])


def run_experiment(cfg: ExperimentConfig | str | Path, out, overwrite: bool = False) -> Path:
    """Full pipeline into ``out``; returns the experiment directory."""
    if not isinstance(cfg, ExperimentConfig):
        cfg = load_config(cfg)
    ws = Workspace(out)
    ws.root.mkdir(parents=True, exist_ok=True)
    (ws.root / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    if cfg.data.generate:
        corpora = generate_data(cfg, ws, overwrite=True) if overwrite or not (ws.data / "train").exists() \
            else load_data(cfg, ws)
    else:
        corpora = load_data(cfg, ws)
    if cfg.pretrain.checkpoint:
        theta, teacher = load_pretrained(cfg, ws)
    else:
        theta, teacher = run_pretrain(cfg, ws, corpora)
    ids = run_finetune(cfg, ws, corpora, theta, teacher)
    run_probe(cfg, ws, corpora, teacher, ids)
    collect(ws, ids)
    report([ws.root], ws.root / "report")
    return ws.root


# ------------------------------------------------------------------------ sweep

@dataclass
class SweepSpec:
    base: ExperimentConfig
    hyperparameter: str
    values: list[float]
    baseline: bool = True

    def validate(self) -> "SweepSpec":
        if self.hyperparameter not in SWEEP_PARAMS:
            raise ConfigError(f"hyperparameter: must be one of {sorted(SWEEP_PARAMS)}")
        if not self.values:
            raise ConfigError("values: grid is empty")
        for i, v in enumerate(self.values):
            try:
                self.run_for(v)
            except ValueError as exc:
                raise ConfigError(f"values[{i}]: {exc}") from None
            if self.hyperparameter == "r":
                if v != int(v) or not 1 <= v <= min(self.base.encoder.d_model, self.base.encoder.d_ff):
                    raise ConfigError(f"values[{i}]: rank {v} outside [1, min(d, d_ff)]")
        return self

    @property
    def strategy(self) -> str:
        return SWEEP_STRATEGY[self.hyperparameter]

    def run_for(self, value) -> RunSpec:
        attr = SWEEP_PARAMS[self.hyperparameter]
        value = int(value) if attr == "lora_rank" else float(value)
        template = next((r.strategy for r in self.base.runs if r.strategy.kind == self.strategy), None)
        params = template.to_dict() if template else {"kind": self.strategy}
        params[attr] = value
        return RunSpec(f"{self.strategy}_{self.hyperparameter}{value:g}", StrategyConfig(**params))

    def experiment(self) -> ExperimentConfig:
        runs = [self.run_for(v) for v in self.values]
        if self.baseline:
            runs.insert(0, RunSpec("full_ft", StrategyConfig("full_ft")))
        d = self.base.to_dict()
        d["runs"] = [{"label": r.label, **r.strategy.to_dict()} for r in runs]
        return config_from_dict(d)


def load_sweep(path) -> SweepSpec:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"<file>: cannot read sweep spec {path} ({exc})") from None
    for key in ("base", "hyperparameter", "values"):
        if key not in d:
            raise ConfigError(f"{key}: required")
    base = d["base"]
    if isinstance(base, str):
        base_cfg = load_config((path.parent / base) if not Path(base).is_absolute() else base)
    else:
        base_cfg = config_from_dict(base)
    if not isinstance(d["values"], list):
        raise ConfigError("values: must be a list")
    return SweepSpec(base_cfg, d["hyperparameter"], d["values"], bool(d.get("baseline", True))).validate()


def sweep(spec: SweepSpec | str | Path, out, overwrite: bool = False) -> Path:
    """One run per grid value per seed, plus the aggregate CSV and an SVG against the hyperparameter."""
    if not isinstance(spec, SweepSpec):
        spec = load_sweep(spec)
    root = run_experiment(spec.experiment(), out, overwrite)
    rows = read_metrics(root / "metrics.csv")
    final = max(r["epoch"] for r in rows)
    grid = {spec.run_for(v).label: v for v in spec.values}
    agg = []
    for r in rows:
        label = r["run_id"].rsplit("_s", 1)[0]
        if r["epoch"] != final or r["split"] == "train" and r["metric"] not in ("replay_steps", "gate_checks"):
            continue
        if label in grid:
            agg.append([r["run_id"], spec.hyperparameter, grid[label], r["split"], r["metric"], r["value"]])
        elif label == "full_ft":
            agg.append([r["run_id"], spec.hyperparameter, "baseline", r["split"], r["metric"], r["value"]])
    # replay frequency over the whole run, not only the final epoch
    if spec.hyperparameter == "p_R":
        for label, v in grid.items():
            for seed in spec.base.seeds:
                rid = run_id(label, seed)
                fired = sum(r["value"] for r in rows if r["run_id"] == rid and r["metric"] == "replay_steps")
                checks = sum(r["value"] for r in rows if r["run_id"] == rid and r["metric"] == "gate_checks")
                agg.append([rid, spec.hyperparameter, v, "train", "replay_rate", fired / checks if checks else 0.0])
    with open(root / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for a in agg:
            w.writerow([a[0], a[1], a[2] if isinstance(a[2], str) else repr(float(a[2])), a[3], a[4], repr(float(a[5]))])
    _sweep_plot(spec, agg, root / "sweep.svg")
    return root


def read_sweep(path) -> list[dict]:
    """The header repeats ``value``; rows are read positionally."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != SWEEP_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        return [{"run_id": a, "hyperparameter": b, "grid_value": c, "split": d, "metric": e, "value": float(f)}
                for a, b, c, d, e, f in r]


def _sweep_plot(spec: SweepSpec, agg: list, path: Path) -> None:
    series, hlines = {}, {}
    for split, name in (("test_id", "in-domain"), ("test_ood", "OOD")):
        xs, ys = [], []
        for x in sorted(set(float(v) for v in spec.values)):
            vals = [a[5] for a in agg if a[2] != "baseline" and float(a[2]) == x and a[3] == split and a[4] == "cer"]
            if vals:
                xs.append(x)
                ys.append(float(np.mean(vals)))
        if xs:
            series[f"{name} CER"] = (xs, ys)
        base = [a[5] for a in agg if a[2] == "baseline" and a[3] == split and a[4] == "cer"]
        if base:
            hlines[f"full_ft {name}"] = float(np.mean(base))
    title = f"{spec.strategy}: final CER vs {spec.hyperparameter}"
    write_svg(path, line_chart(series, title=title, xlabel=spec.hyperparameter, ylabel="CER", hlines=hlines))


# ----------------------------------------------------------------------- report

def _complete_runs(run_dirs) -> list[Path]:
    """Expand experiment roots into run directories, skipping incomplete ones with a warning."""
    found = []
    for d in map(Path, run_dirs):
        candidates = sorted(p for p in (d / "runs").iterdir() if p.is_dir()) if (d / "runs").is_dir() else [d]
        for c in candidates:
            if (c / INCOMPLETE).exists() or not (c / "metrics.csv").exists():
                log.warning("skipping incomplete run directory %s", c)
                continue
            found.append(c)
    return found


def report(run_dirs, out) -> Path:
    """Final-epoch CER/WER per strategy label and test split, averaged over seeds, plus a probe overlay."""
    out = Path(out)
    runs = _complete_runs(run_dirs)
    if not runs:
        raise ValueError("no completed runs to report")
    finals: dict[tuple[str, str, str], list[float]] = {}
    probes: dict[str, dict[int, list[float]]] = {}
    splits: list[str] = []
    for d in runs:
        rows = read_metrics(d / "metrics.csv")
        last = max(r["epoch"] for r in rows)
        for r in rows:
            if r["epoch"] == last and r["metric"] in ("cer", "wer") and r["split"] != "train":
                label = r["run_id"].rsplit("_s", 1)[0]
                finals.setdefault((label, r["metric"], r["split"]), []).append(r["value"])
                if r["split"] not in splits:
                    splits.append(r["split"])
        if (d / "probe.csv").exists():
            for p in read_probe_csv(d / "probe.csv"):
                label = p["run_id"].rsplit("_s", 1)[0]
                probes.setdefault(f"{label} [{p['probe_set']}]", {}).setdefault(p["epoch"], []).append(p["ssl_loss"])
    test_splits = [s for s in splits if s.startswith("test")] or splits
    labels = sorted({k[0] for k in finals})
    out.mkdir(parents=True, exist_ok=True)
    table = out / "table.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "metric", *test_splits, "mean", "n_seeds"])
        for label in labels:
            for metric in ("cer", "wer"):
                vals = [float(np.mean(finals[(label, metric, s)])) if (label, metric, s) in finals else math.nan
                        for s in test_splits]
                n = max(len(finals.get((label, metric, s), [])) for s in test_splits)
                w.writerow([label, metric, *[repr(v) for v in vals], repr(float(np.mean(vals))), n])
    series = {k: (sorted(v), [float(np.mean(v[e])) for e in sorted(v)]) for k, v in sorted(probes.items())}
    if series:
        write_svg(out / "probe.svg", line_chart(series, title="Pretraining SSL loss during fine-tuning",
                                               xlabel="epoch", ylabel="SSL loss"))
    return table


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in list(r):
            if k not in ("strategy", "metric"):
                r[k] = float(r[k])
    return rows
