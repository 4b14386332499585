import csv
import hashlib
import json
import time

import pytest

from freshcl import checkpoint
from freshcl.cli import RunConfig, main


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def small_config(tmp_path, **kw):
    cfg = RunConfig(n_tasks=2, d_in=16, samples_per_class_train=8, samples_per_class_test=5,
                    n_experts=3, k_top=2, k_freeze=1, iterations=20, output_dir=str(tmp_path / "run"))
    for k, v in kw.items():
        setattr(cfg, k, v)
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    return str(path), tmp_path / "run"


def test_gen_data_writes_tasks_and_manifest(tmp_path):
    out = tmp_path / "data"
    assert main(["gen-data", "--seed", "0", "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["manifest.json", "run_config.json", "task0.csv", "task1.csv", "task2.csv"]
    first = {p.name: digest(p) for p in out.iterdir()}
    assert main(["gen-data", "--seed", "0", "--out", str(out)]) == 0
    assert {p.name: digest(p) for p in out.iterdir()} == first


def test_gen_data_infeasible_angle(tmp_path):
    cfg, _ = small_config(tmp_path, inter_class_min_angle=170.0)
    assert main(["gen-data", "--config", cfg]) == 3


def test_gen_data_capacity(tmp_path):
    cfg, _ = small_config(tmp_path, n_tasks=5, classes_per_task=4, d_in=16)
    assert main(["gen-data", "--config", cfg]) == 4


def test_bad_config_is_usage_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_tasks": 2, "bogus": 1}))
    assert main(["gen-data", "--config", str(bad)]) == 2
    bad.write_text("{not json")
    assert main(["gen-data", "--config", str(bad)]) == 2
    assert main(["gen-data", "--config", str(tmp_path / "missing.json")]) == 2


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-flag"])
    assert exc.value.code == 2


def test_eval_without_checkpoints(tmp_path):
    cfg, _ = small_config(tmp_path)
    assert main(["gen-data", "--config", cfg]) == 0
    assert main(["eval", "--config", cfg]) == 5


def test_train_without_data_is_missing_artifact(tmp_path):
    cfg, _ = small_config(tmp_path)
    assert main(["train", "--config", cfg]) == 5


def test_k_freeze_zero_freezes_nothing(tmp_path):
    cfg, run = small_config(tmp_path)
    assert main(["gen-data", "--config", cfg]) == 0
    assert main(["train", "--config", cfg, "--k-freeze", "0"]) == 0
    state = checkpoint.load(run / "ckpt_task1.bin")
    assert not any(e.frozen for e in state.experts)


def test_train_then_eval(tmp_path, capsys):
    cfg, run = small_config(tmp_path)
    assert main(["gen-data", "--config", cfg]) == 0
    assert main(["train", "--config", cfg]) == 0
    assert (run / "train_log_task0.csv").exists()
    capsys.readouterr()
    assert main(["eval", "--config", cfg, "--id-mode", "both"]) == 0
    printed = capsys.readouterr().out
    with open(run / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    modes = {r["id_mode"] for r in rows}
    assert modes == {"oracle", "pseudo"}
    for r in rows:
        if r["metric"] == "A_last":
            assert f"A_last [{r['id_mode']}]: {r['value']}" in printed
            assert len(r["value"].split(".")[1]) == 4
        if r["metric"] == "mean_forgetting":
            assert f"mean forgetting [{r['id_mode']}]: {r['value']}" in printed
    assert (run / "accuracy_matrix_oracle.csv").exists()
    assert (run / "accuracy_matrix_pseudo.csv").exists()
    assert (run / "separation.csv").exists()


def test_rerun_gives_identical_checkpoints(tmp_path):
    cfg, run = small_config(tmp_path)
    assert main(["gen-data", "--config", cfg]) == 0
    assert main(["train", "--config", cfg]) == 0
    first = digest(run / "ckpt_task1.bin")
    assert main(["train", "--config", cfg]) == 0
    assert digest(run / "ckpt_task1.bin") == first


def test_ablate_rows(tmp_path, capsys):
    cfg, run = small_config(tmp_path, iterations=10)
    assert main(["ablate", "--config", cfg, "--counts", "1,2", "--seeds", "2"]) == 0
    with open(run / "ablation_runs.csv", newline="") as fh:
        runs = list(csv.DictReader(fh))
    with open(run / "ablation.csv", newline="") as fh:
        summary = list(csv.DictReader(fh))
    assert len(runs) == 4
    assert [r["n_experts"] for r in summary] == ["1", "2"]
    assert all(r["runs"] == "2" for r in summary)


def test_config_round_trip_is_fixpoint(tmp_path):
    cfg, run = small_config(tmp_path, noise_sigma=0.125, ablation_counts=[2, 3])
    assert main(["gen-data", "--config", cfg]) == 0
    written = (run / "run_config.json").read_text()
    assert RunConfig.from_json(written).to_json() == written
    assert RunConfig.from_json(written) == RunConfig.from_json(open(cfg).read())


def test_few_shot_flag(tmp_path):
    out = tmp_path / "fs"
    assert main(["gen-data", "--few-shot", "--out", str(out), "--seed", "3"]) == 0
    cfg = RunConfig.from_json((out / "run_config.json").read_text())
    assert cfg.samples_per_class_train == 5


def test_etf_and_gradcheck_commands(capsys):
    assert main(["etf-check", "--dim", "16", "--k", "8"]) == 0
    assert main(["gradcheck", "--instances", "5"]) == 0
    assert main(["etf-check", "--dim", "4", "--k", "9"]) == 2


@pytest.mark.slow
def test_selfcheck_exit_codes(capsys):
    assert main(["selfcheck"]) == 0
    assert main(["selfcheck", "--inject-grad-bug"]) == 1
    assert "FAIL gradient:" in capsys.readouterr().out


@pytest.mark.slow
def test_default_training_under_a_minute(tmp_path):
    out = tmp_path / "default"
    assert main(["gen-data", "--out", str(out)]) == 0
    start = time.perf_counter()
    assert main(["train", "--out", str(out)]) == 0
    assert time.perf_counter() - start < 60.0
