import json

import numpy as np
import pytest

from clft import experiment as ex
from clft.cli import main
from clft.strategies import read_metrics

TINY = {
    "name": "tiny",
    "encoder": {"d_in": 16, "conv_channels": 8, "blocks": 2, "d_model": 8, "heads": 2, "d_ff": 16},
    "data": {"n_pretrain": 16, "n_pretrain_valid": 4, "n_train": 8, "n_valid": 4, "n_test": 4,
             "length_min": 5, "length_max": 8},
    "pretrain": {"epochs": 1, "batch_size": 4},
    "finetune": {"epochs": 2, "batch_size": 4},
    "runs": [{"label": "frozen", "kind": "frozen"}],
    "seeds": [0],
    "fisher_samples": 2,
}


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def test_frozen_two_epochs_accounting(tmp_path):
    root = ex.run_experiment(ex.config_from_dict(TINY), tmp_path / "out")
    rows = read_metrics(root / "runs" / "frozen_s0" / "metrics.csv")
    for split in ("valid", "test_id", "test_ood"):
        assert sorted(r["epoch"] for r in rows if r["split"] == split and r["metric"] == "cer") == [1, 2]
    assert not (root / "runs" / "frozen_s0" / "INCOMPLETE").exists()
    assert (root / "runs" / "frozen_s0" / "probe.svg").exists()
    assert (root / "report" / "table.csv").exists() and (root / "report" / "probe.svg").exists()
    table = ex.read_table(root / "report" / "table.csv")
    assert [(r["strategy"], r["metric"]) for r in table] == [("frozen", "cer"), ("frozen", "wer")]
    r = table[0]
    assert r["mean"] == pytest.approx((r["test_id"] + r["test_ood"]) / 2)


def test_config_validation_reports_field_paths(tmp_path):
    cases = [
        ({**TINY, "seeds": []}, "seeds"),
        ({**TINY, "bogus": 1}, "bogus"),
        ({**TINY, "finetune": {"epochs": 0}}, "finetune.epochs"),
        ({**TINY, "runs": [{"kind": "lora", "lora_rank": 99}]}, "runs[0].lora_rank"),
        ({**TINY, "runs": [{"kind": "teleport"}]}, "runs[0]"),
        ({**TINY, "encoder": {"d_model": 30}}, "encoder"),
        ({**TINY, "data": {"generate": False, "paths": {"train": "x"}},
          "runs": [{"kind": "replay"}]}, "data.paths"),
    ]
    for cfg, where in cases:
        with pytest.raises(ex.ConfigError) as info:
            ex.config_from_dict(cfg)
        assert str(info.value).startswith(where), str(info.value)


def test_replay_without_corpus_fails_before_training(tmp_path, capsys):
    cfg = {**TINY, "data": {"generate": False, "paths": {"train": str(tmp_path / "t"), "valid": "v",
                                                          "test_id": "a", "test_ood": "b", "pretrain_valid": "c"}},
           "runs": [{"kind": "replay"}], "probe_sets": ["pretrain_valid"]}
    code = main(["run", "--config", str(_write(tmp_path, cfg)), "--out", str(tmp_path / "out")])
    assert code == 2
    assert "data.paths.pretrain" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_cli_stages_match_run(tmp_path, capsys):
    cfg = {**TINY, "runs": [{"label": "ft", "kind": "full_ft"}, {"label": "ewc", "kind": "ewc"}]}
    path = _write(tmp_path, cfg)
    staged = tmp_path / "staged"
    assert main(["gen-data", "--config", str(path), "--out", str(staged)]) == 0
    assert main(["gen-data", "--config", str(path), "--out", str(staged)]) == 1  # exists, no --overwrite
    assert main(["pretrain", "--config", str(path), "--out", str(staged)]) == 0
    assert main(["finetune", "--config", str(path), "--out", str(staged)]) == 0
    assert main(["probe", "--config", str(path), "--out", str(staged)]) == 0
    assert main(["report", str(staged), "--out", str(staged / "report")]) == 0
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "whole")]) == 0
    for name in ("metrics.csv", "probe.csv"):
        assert (staged / name).read_bytes() == (tmp_path / "whole" / name).read_bytes()
    out = capsys.readouterr().out
    assert "strategy,metric" in out


def test_cli_missing_inputs(tmp_path, capsys):
    path = _write(tmp_path, TINY)
    assert main(["finetune", "--config", str(path), "--out", str(tmp_path / "nothing")]) == 1
    assert main(["run", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit):
        main(["explode"])


def test_report_skips_incomplete(tmp_path, caplog):
    root = ex.run_experiment(ex.config_from_dict(TINY), tmp_path / "out")
    broken = root / "runs" / "broken_s0"
    broken.mkdir()
    (broken / "INCOMPLETE").write_text("x")
    table = ex.report([root], tmp_path / "rep")
    assert "broken" not in table.read_text()
    assert any("incomplete" in r.message for r in caplog.records)
    with pytest.raises(ValueError):
        ex.report([broken], tmp_path / "rep2")


def test_sweep_p_r_frequencies_and_outputs(tmp_path):
    base = {**TINY, "data": {**TINY["data"], "n_train": 40}, "finetune": {"epochs": 3, "batch_size": 1,
                                                                          "eval_splits": ["test_id", "test_ood"]},
            "runs": [{"kind": "replay"}]}
    spec = {"base": base, "hyperparameter": "p_R", "values": [0.1, 0.25, 0.5], "baseline": True}
    path = _write(tmp_path, spec, "sweep.json")
    assert main(["sweep", "--config", str(path), "--out", str(tmp_path / "sw")]) == 0
    rows = ex.read_sweep(tmp_path / "sw" / "sweep.csv")
    rates = {r["grid_value"]: r["value"] for r in rows if r["metric"] == "replay_rate"}
    assert set(rates) == {"0.1", "0.25", "0.5"}
    n = 2 * 40  # epochs 2..3, batch size 1
    for g, rate in rates.items():
        p = float(g)
        assert abs(rate - p) <= 3 * np.sqrt(p * (1 - p) / n)
    assert any(r["grid_value"] == "baseline" for r in rows)
    svg = (tmp_path / "sw" / "sweep.svg").read_text()
    assert "stroke-dasharray" in svg  # baseline reference lines


def test_sweep_validation(tmp_path):
    base = dict(TINY)
    with pytest.raises(ex.ConfigError):
        ex.load_sweep(_write(tmp_path, {"base": base, "hyperparameter": "r", "values": [64]}, "a.json"))
    with pytest.raises(ex.ConfigError):
        ex.load_sweep(_write(tmp_path, {"base": base, "hyperparameter": "lambda", "values": []}, "b.json"))
    with pytest.raises(ex.ConfigError):
        ex.load_sweep(_write(tmp_path, {"base": base, "hyperparameter": "lr", "values": [1]}, "c.json"))
    spec = ex.load_sweep(_write(tmp_path, {"base": base, "hyperparameter": "lambda", "values": [5, 50, 500]}, "d.json"))
    labels = [r.label for r in spec.experiment().runs]
    assert labels == ["full_ft", "ewc_lambda5", "ewc_lambda50", "ewc_lambda500"]
    assert 50 in spec.values


def test_single_value_sweep_is_an_experiment(tmp_path):
    base = {**TINY, "runs": [{"kind": "ewc"}]}
    spec = ex.SweepSpec(ex.config_from_dict(base), "lambda", [50], baseline=False).validate()
    a = ex.sweep(spec, tmp_path / "sweep")
    cfg = ex.config_from_dict({**TINY, "runs": [{"label": "ewc_lambda50", "kind": "ewc", "ewc_lambda": 50}]})
    b = ex.run_experiment(cfg, tmp_path / "plain")
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_shipped_configs_parse():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    cfg = ex.load_config(root / "default.json")
    assert cfg.seeds == [0, 1, 2] and cfg.finetune.epochs == 20 and cfg.pretrain.epochs == 30
    assert {r.strategy.kind for r in cfg.runs} == {"full_ft", "frozen", "ewc", "lora", "replay"}
    assert sorted(r.strategy.ewc_lambda for r in cfg.runs if r.strategy.kind == "ewc") == [5, 50, 500]
    assert ex.load_sweep(root / "sweep_lambda.json").values == [5, 50, 500]
    ex.load_config(root / "smoke.json")
