import json

import pytest

from structprune.arch import unpruned_counts
from structprune.cli import main
from structprune.data import save_image_set, synthetic_images
from structprune.errors import ConfigurationError, InputError
from structprune.experiments import (TIMING_COLUMNS, ExperimentConfig, RunRecord, csv_text, expand_prune_pipeline,
                                     init_prune_pipeline, load_data, loglog_slope, mean_std, prune_pipeline,
                                     report, run_grid, timing_sweep, train_model)


def blobs_cfg(**kw):
    base = dict(model="mlp_toy", model_kwargs={"hidden": [16, 16]},
                dataset={"kind": "blobs", "n_train": 300, "n_test": 100, "d": 8, "classes": 2},
                train={"epochs": 2, "lr": 0.05}, finetune_epochs=1, n_prime=100, seeds=[0])
    base.update(kw)
    return ExperimentConfig(**base)


def fake_record(acc, seed=0, method="sosp_h"):
    return RunRecord("h", "prune", "m", method, 0.5, seed, 1.0, acc, acc, acc, [], [], {},
                     {"layers": [0, 2], "pruned": [1, 2], "totals": [4, 4], "blocks": [None, None]},
                     {"exact_params": 10, "exact_macs": 20}, {}, {})


# -- config ------------------------------------------------------------------

@pytest.mark.parametrize("field,value", [
    ("model", "restoy"), ("method", "sosp_i"), ("ratios", [0.3]), ("seeds", [1]), ("n_prime", 10),
    ("layer_cap", 0.5), ("kernel_scaling", True), ("finetune_epochs", 3), ("train", {"lr": 0.2}),
    ("dataset", {"kind": "synthetic", "noise": 0.5}), ("model_kwargs", {"widths": [4, 4, 4, 4, 4, 4]}),
])
def test_hash_changes_with_result_affecting_fields(field, value):
    cfg = ExperimentConfig()
    assert cfg.replace(**{field: value}).hash() != cfg.hash()


def test_hash_ignores_output_location():
    cfg = ExperimentConfig()
    assert cfg.replace(out_dir="/tmp/x", workers=4).hash() == cfg.hash()
    assert ExperimentConfig().hash() == cfg.hash()


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"modle": "mlp_toy"})
    with pytest.raises(ConfigurationError):
        ExperimentConfig(ratios=[1.0])
    with pytest.raises(ConfigurationError):
        ExperimentConfig(method="magnitude")
    with pytest.raises(ConfigurationError):
        ExperimentConfig(train={"epochs": 0})
    assert ExperimentConfig(model="convnet_toy").resolved_cap() == 0.95
    assert ExperimentConfig(model="mlp_toy").resolved_cap() is None


def test_config_file_round_trip(tmp_path):
    cfg = blobs_cfg()
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert ExperimentConfig.load(path).hash() == cfg.hash()
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigurationError):
        ExperimentConfig.load(tmp_path / "bad.json")


# -- report ------------------------------------------------------------------

def test_report_mean_and_std():
    rows = report([fake_record(a, s) for s, a in enumerate((0.90, 0.91, 0.92))]).summary
    assert len(rows) == 1
    assert rows[0]["acc_after_ft_mean"] == pytest.approx(0.91)
    assert rows[0]["acc_after_ft_std"] == pytest.approx(0.01)


def test_report_single_record_and_histograms(tmp_path):
    bundle = report([fake_record(0.8)])
    assert bundle.summary[0]["acc_after_ft_std"] == 0.0
    (rows,) = bundle.histograms.values()
    assert len(rows) == 2
    paths = bundle.write(tmp_path)
    text = open(paths[0], newline="").read()
    assert text.startswith("pipeline,model,method,ratio,n,")
    assert "\r" not in text


def test_report_empty():
    with pytest.raises(InputError):
        report([])
    assert mean_std([3.0]) == (3.0, 0.0)


def test_csv_and_slope_helpers():
    text = csv_text([{"family": "mlp_toy", "multiplier": 1, "S": 2, "P": 3, "method": "x",
                      "saliency_s": 0.5, "selection_s": 0.25, "total_s": 0.75}], TIMING_COLUMNS)
    assert text == ("family,multiplier,S,P,method,saliency_s,selection_s,total_s\n"
                    "mlp_toy,1,2,3,x,0.5,0.25,0.75\n")
    assert loglog_slope([1, 2, 4], [3, 12, 48]) == pytest.approx(2.0)


# -- pipelines ----------------------------------------------------------------

def test_zero_ratio_prune_is_a_no_op():
    cfg = blobs_cfg(finetune_epochs=0)
    data = load_data(cfg)
    trained = train_model(cfg, 0, data=data)
    rec = prune_pipeline(cfg, trained, 0, 0.0, data=data)
    assert rec.acc_before_ft == rec.acc_unpruned == rec.acc_after_ft
    assert rec.counts["exact_params"] == trained.net.P
    assert (rec.counts["exact_params"], rec.counts["exact_macs"]) == unpruned_counts(trained.net)
    assert rec.mask["entries"] == []


@pytest.mark.parametrize("method", ["sosp_h", "sosp_i", "first_order", "sosp_i_diag", "random"])
def test_prune_pipeline_runs_every_method(method):
    cfg = blobs_cfg(method=method)
    data = load_data(cfg)
    trained = train_model(cfg, 0, data=data)
    rec = prune_pipeline(cfg, trained, 0, 0.5, data=data)
    assert len(rec.mask["entries"]) == 16
    assert rec.meta["acc_compact"] == pytest.approx(rec.acc_before_ft)
    assert rec.meta["counts_after_ft"] is True
    assert rec.counts["exact_params"] < trained.net.P
    assert set(rec.timings) >= {"saliency", "selection", "total"}
    back = RunRecord.from_dict(json.loads(rec.to_json()))
    assert back.comparable() == rec.comparable()


def test_init_prune_budget_matches_prune():
    cfg = blobs_cfg(finetune_epochs=2)
    rec = init_prune_pipeline(cfg, 0, 0.5)
    assert rec.meta["total_epochs"] == 4
    assert len(rec.ft_history) == 4
    assert rec.pipeline == "init_prune"


def test_expand_pipeline_without_bottleneck_uses_widen_only():
    cfg = blobs_cfg()
    data = load_data(cfg)
    base = fake_record(0.9)
    base.layer_ratios = {"layers": [0, 2], "pruned": [8, 8], "totals": [16, 16], "blocks": [None, None]}
    res = expand_prune_pipeline(cfg, base, data=data)
    assert res.expanded is None
    assert res.widen_multiplier == 1.0
    assert res.widened.pipeline == "expand_prune"


def test_expand_pipeline_matches_parameter_counts():
    cfg = blobs_cfg()
    data = load_data(cfg)
    base = fake_record(0.9)
    base.layer_ratios = {"layers": [0, 2], "pruned": [8, 1], "totals": [16, 16], "blocks": [None, None]}
    res = expand_prune_pipeline(cfg, base, data=data)
    assert res.bottlenecks == [2]
    assert res.expanded is not None
    assert abs(res.meta["widened_params"] - res.meta["expanded_params"]) <= 0.05 * res.meta["expanded_params"]


def test_run_grid_shares_training_per_seed():
    cfg = blobs_cfg(ratios=[0.25, 0.5], seeds=[0, 1])
    recs = run_grid(cfg, methods=["sosp_h", "random"])
    assert len(recs) == 8
    by_seed = {}
    for r in recs:
        by_seed.setdefault(r.seed, set()).add(r.acc_unpruned)
    assert all(len(v) == 1 for v in by_seed.values())


def test_timing_sweep_rows():
    rows = timing_sweep("mlp_toy", (1, 2), ("sosp_h", "sosp_i"), n_prime=20,
                        base_kwargs={"d": 8, "hidden": (4, 4)})
    assert [(r["multiplier"], r["method"]) for r in rows] == [(1, "sosp_h"), (1, "sosp_i"),
                                                               (2, "sosp_h"), (2, "sosp_i")]
    assert rows[2]["S"] == 16
    with pytest.raises(InputError):
        timing_sweep(multipliers=(0.5,))


def test_sosp_i_structure_limit():
    cfg = blobs_cfg(method="sosp_i", sosp_i_max_structures=10)
    data = load_data(cfg)
    trained = train_model(cfg, 0, data=data)
    with pytest.raises(ConfigurationError):
        prune_pipeline(cfg, trained, 0, 0.5, data=data)


# -- CLI ------------------------------------------------------------------------

def _cli_cfg(tmp_path, **kw):
    cfg = blobs_cfg(out_dir=str(tmp_path / "out"), **kw)
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    return str(path)


def test_cli_train_prune_report(tmp_path, capsys):
    cfg = _cli_cfg(tmp_path)
    assert main(["train", "--config", cfg]) == 0
    ckpt = json.loads(capsys.readouterr().out)["checkpoints"][0]
    assert main(["prune", "--config", cfg, "--checkpoint", ckpt, "--ratios", "0.25,0.5"]) == 0
    recs = json.loads(capsys.readouterr().out)["records"]
    assert len(recs) == 2
    assert main(["report", *recs, "--out-dir", str(tmp_path / "rep")]) == 0
    files = json.loads(capsys.readouterr().out)["files"]
    assert any(f.endswith("summary.csv") for f in files)


def test_cli_image_dataset(tmp_path, capsys):
    save_image_set(tmp_path / "tr.bin", synthetic_images(40, (3, 8, 8), 4, seed=0), classes=4)
    save_image_set(tmp_path / "te.bin", synthetic_images(20, (3, 8, 8), 4, seed=1), classes=4)
    rc = main(["init-prune", "--model", "convnet_toy", "--dataset", str(tmp_path / "tr.bin"),
               "--test-dataset", str(tmp_path / "te.bin"), "--epochs", "1", "--finetune-epochs", "1",
               "--n-prime", "10", "--out-dir", str(tmp_path / "o"),
               "--set", 'model_kwargs={"widths": [4, 4, 4, 4, 4, 4]}'])
    assert rc == 0
    rec = json.loads(open(json.loads(capsys.readouterr().out)["records"][0]).read())
    assert rec["meta"]["total_epochs"] == 2


def test_cli_timing(tmp_path):
    out = tmp_path / "t.csv"
    assert main(["timing", "--multipliers", "1", "--n-prime", "10", "--out", str(out)]) == 0
    assert out.read_text().splitlines()[0] == ",".join(TIMING_COLUMNS)


@pytest.mark.parametrize("argv,code,category", [
    (["train", "--set", "modle=1"], 2, "configuration"),
    (["train", "--ratios", "1.5"], 2, "configuration"),
    (["prune", "--checkpoint", "/nonexistent.ckpt"], 7, "io"),
    (["report", "/nonexistent.json"], 7, "io"),
])
def test_cli_error_exit_codes(argv, code, category, capsys):
    assert main(argv) == code
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == category
    assert err["message"]


def test_cli_report_single_record(tmp_path, capsys):
    (tmp_path / "r.json").write_text(fake_record(0.5).to_json())
    assert main(["report", str(tmp_path / "r.json"), "--out-dir", str(tmp_path / "rep")]) == 0
    capsys.readouterr()
    summary = (tmp_path / "rep" / "summary.csv").read_text().splitlines()
    assert len(summary) == 2


def test_cli_report_rejects_non_record_json(tmp_path, capsys):
    (tmp_path / "mask.json").write_text(json.dumps({"entries": []}))
    (tmp_path / "hist.json").write_text(json.dumps([{"epoch": 0}]))
    for name in ("mask.json", "hist.json"):
        assert main(["report", str(tmp_path / name), "--out-dir", str(tmp_path / "rep")]) == 7
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "io"
        assert name in err["message"]
