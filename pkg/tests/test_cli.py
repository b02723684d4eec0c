import json
import shutil
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from lsnet import cli, profiler
from lsnet.synth import SynthConfig, write_synthetic_dataset

FIXTURES = Path(__file__).parent / "fixtures"
CKPT = FIXTURES / "desk_synth.ckpt"

TINY_TOML = """
[backbone]
stage_blocks = [1, 1, 1, 1]
stage_channels = [8, 8, 16, 16]
stage_dilations = [2, 2, 4, 4]
attention_reduction = 4

[fpn]
variant = "diff"
fusion_channels = [4, 4, 4, 4]

[train]
batch_size = 2
max_steps = 4
eval_interval = 2
val_size = 2

[synth]
image_size = 16
shape_size = [3, 6]
"""


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def run_json(capsys, *argv):
    code, out, err = run(capsys, *argv, "--format", "json")
    assert code == 0, err
    return json.loads(out)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cdd")
    write_synthetic_dataset(root, SynthConfig(seed=11), 4, split="test")
    return root


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML)
    return path


def test_usage_errors_exit_2(capsys):
    assert run(capsys)[0] == 2
    assert run(capsys, "profile", "--bogus")[0] == 2
    assert run(capsys, "train", "--out", "x.ckpt")[0] == 2
    assert run(capsys, "--help")[0] == 0


# ---------------------------------------------------------------- profile

def test_profile_prints_config_and_deviation(capsys):
    code, out, _ = run(capsys, "profile", "--model", "canonical", "--input-size", 256, 256)
    assert code == 0
    assert out.startswith("# ")
    assert "0.9326" in out and "backbone" in out and "%" in out


def test_profile_json_and_file(capsys, tmp_path):
    doc = run_json(capsys, "profile", "--input-size", 256, 256, "--out", tmp_path / "r.json")
    bb = doc["result"]["backbone"]
    assert abs(bb["params_deviation_pct"]) <= 15
    assert json.loads((tmp_path / "r.json").read_text())["result"] == doc["result"]


def test_profile_compare(capsys):
    doc = run_json(capsys, "profile", "--compare")
    assert doc["result"]["diff"]["fpn"]["gflops"] < doc["result"]["dense"]["fpn"]["gflops"]
    assert doc["result"]["delta"]["fpn"]["gflops"] < 0 < doc["result"]["delta"]["fpn"]["params"]
    code, text, _ = run(capsys, "profile", "--compare")
    assert "[diff - dense]" in text


def test_profile_config_precedence(capsys, monkeypatch, tiny_config):
    monkeypatch.setenv("LSNET_CONFIG", str(tiny_config))
    assert run_json(capsys, "profile", "--input-size", 32, 32)["config"]["model"] == str(tiny_config)
    assert run_json(capsys, "profile", "--model", "desk")["config"]["model"] == "builtin:desk"


def test_profile_input_errors(capsys, tmp_path):
    code, _, err = run(capsys, "profile", "--model", tmp_path / "missing.toml")
    assert code == 2 and "not found" in err
    (tmp_path / "bad.toml").write_text("[backbone\n")
    assert run(capsys, "profile", "--model", tmp_path / "bad.toml")[0] == 2
    assert run(capsys, "profile", "--input-size", 30, 32)[0] == 2


# ---------------------------------------------------------------- train

def test_train_is_deterministic(capsys, tmp_path, tiny_config):
    outputs = []
    for tag in ("a", "b"):
        code, out, err = run(capsys, "train", "--synthetic", "--config", tiny_config, "--out", tmp_path / f"{tag}.ckpt")
        assert code == 0, err
        outputs.append(out.replace(f"{tag}.ckpt", "X"))
    assert (tmp_path / "a.ckpt.history.jsonl").read_bytes() == (tmp_path / "b.ckpt.history.jsonl").read_bytes()
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert outputs[0] == outputs[1]
    steps = [json.loads(s)["step"] for s in (tmp_path / "a.ckpt.history.jsonl").read_text().splitlines()]
    assert steps == [0, 2, 4]


def test_train_flag_beats_env_beats_file(capsys, monkeypatch, tmp_path, tiny_config):
    monkeypatch.setenv("LSNET_TRAIN_MAX_STEPS", "2")
    monkeypatch.setenv("LSNET_TRAIN_LR", "0.01")
    doc = run_json(capsys, "train", "--synthetic", "--config", tiny_config, "--out", tmp_path / "c.ckpt",
                   "--lr", 0.02)
    assert doc["config"]["train"]["max_steps"] == 2
    assert doc["config"]["train"]["lr"] == 0.02
    assert doc["config"]["train"]["batch_size"] == 2


def test_train_on_dataset_dir(capsys, tmp_path, tiny_config):
    write_synthetic_dataset(tmp_path / "d", SynthConfig(seed=1, image_size=16, shape_size=(3, 6)), 3, split="train")
    doc = run_json(capsys, "train", "--data", tmp_path / "d", "--config", tiny_config, "--out", tmp_path / "c.ckpt")
    assert doc["config"]["data"]["pairs"] == 3 and doc["result"]["steps"] == 4


def test_train_malformed_root_surfaces_index_error(capsys, tmp_path, tiny_config):
    (tmp_path / "root" / "A").mkdir(parents=True)
    code, _, err = run(capsys, "train", "--data", tmp_path / "root", "--config", tiny_config, "--out", tmp_path / "c")
    assert code == 2
    assert "missing subdirectories B, OUT" in err


def test_train_bad_options_exit_2(capsys, tmp_path, tiny_config):
    assert run(capsys, "train", "--synthetic", "--config", tiny_config, "--out", tmp_path / "c", "--lr", -1)[0] == 2
    bad = tmp_path / "bad.toml"
    bad.write_text(TINY_TOML + "\nunknown_key = 1\n".replace("unknown_key", "[train.extra]\nx"))
    assert run(capsys, "train", "--synthetic", "--config", bad, "--out", tmp_path / "c")[0] == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exits_1(capsys, tmp_path, tiny_config):
    code, _, err = run(capsys, "train", "--synthetic", "--config", tiny_config, "--out", tmp_path / "c",
                       "--lr", 1e30, "--steps", 20, "--eval-interval", 20)
    assert code == 1 and "diverged" in err and "step" in err


# ---------------------------------------------------------------- infer

def test_infer_identical_inputs_mostly_empty(capsys, tmp_path, dataset):
    a = dataset / "test" / "A" / "00000.png"
    doc = run_json(capsys, "infer", "--ckpt", CKPT, "--a", a, "--b", a, "--out", tmp_path / "s.png")
    assert doc["result"]["positive_fraction"] < 0.02
    mask = np.asarray(Image.open(tmp_path / "s_mask.png"))
    assert np.count_nonzero(mask) / mask.size < 0.02


def test_infer_dimensions_and_threshold(capsys, tmp_path, dataset):
    a = dataset / "test" / "A" / "00001.png"
    b = dataset / "test" / "B" / "00001.png"
    doc = run_json(capsys, "infer", "--ckpt", CKPT, "--a", a, "--b", b, "--out", tmp_path / "s.png",
                   "--threshold", 1.1, "--mask", tmp_path / "m.png")
    score = Image.open(tmp_path / "s.png")
    assert score.size == Image.open(a).size and score.mode == "L"
    assert not np.asarray(Image.open(tmp_path / "m.png")).any()
    assert doc["result"]["positive_fraction"] == 0.0
    assert 0 < doc["result"]["score_min"] <= doc["result"]["score_max"] < 1


def test_infer_input_errors(capsys, tmp_path, dataset):
    a = dataset / "test" / "A" / "00000.png"
    Image.fromarray(np.zeros((20, 20, 3), np.uint8)).save(tmp_path / "odd.png")
    Image.fromarray(np.zeros((32, 32, 3), np.uint8)).save(tmp_path / "small.png")
    assert run(capsys, "infer", "--ckpt", CKPT, "--a", tmp_path / "odd.png", "--b", tmp_path / "odd.png",
               "--out", tmp_path / "s.png")[0] == 2
    assert run(capsys, "infer", "--ckpt", CKPT, "--a", a, "--b", tmp_path / "small.png",
               "--out", tmp_path / "s.png")[0] == 2
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    code, _, err = run(capsys, "infer", "--ckpt", tmp_path / "bad.ckpt", "--a", a, "--b", a, "--out", tmp_path / "s.png")
    assert code == 2 and "magic" in err


# ---------------------------------------------------------------- eval

def copy_predictions(dataset, dest, zero=False):
    dest.mkdir()
    for p in sorted((dataset / "test" / "OUT").iterdir()):
        if zero:
            Image.fromarray(np.zeros(Image.open(p).size[::-1], np.uint8)).save(dest / p.name)
        else:
            shutil.copy(p, dest / p.name)
    return dest


def test_eval_oracle_predictions_score_100(capsys, tmp_path, dataset):
    pred = copy_predictions(dataset, tmp_path / "pred")
    res = run_json(capsys, "eval", "--pred", pred, "--data", dataset)["result"]
    assert (res["p"], res["r"], res["f1"], res["oa"]) == (100.0, 100.0, 100.0, 100.0)
    assert res["images"] == 4


def test_eval_all_zero_predictor_has_zero_recall(capsys, tmp_path, dataset):
    pred = copy_predictions(dataset, tmp_path / "pred", zero=True)
    res = run_json(capsys, "eval", "--pred", pred, "--data", dataset)["result"]
    assert res["r"] == 0.0 and "no_predicted_positives" in res["degenerate"]


def test_eval_checkpoint_is_deterministic(capsys, dataset):
    first = run(capsys, "eval", "--ckpt", CKPT, "--data", dataset, "--format", "json")
    second = run(capsys, "eval", "--ckpt", CKPT, "--data", dataset, "--format", "json")
    assert first[0] == 0 and first == second
    assert json.loads(first[1])["result"]["f1"] > 50


def test_eval_input_errors(capsys, tmp_path, dataset):
    assert run(capsys, "eval", "--pred", tmp_path / "none", "--data", dataset)[0] == 2
    (tmp_path / "empty").mkdir()
    code, _, err = run(capsys, "eval", "--pred", tmp_path / "empty", "--data", dataset)
    assert code == 2 and "no prediction" in err
    assert run(capsys, "eval", "--ckpt", CKPT, "--data", tmp_path)[0] == 2


# ---------------------------------------------------------------- efficiency / synth

def test_efficiency_shipped_table_ranks_diff_first(capsys):
    table = Path(profiler.__file__).parent / "tables" / "efficiency.csv"
    rows = run_json(capsys, "efficiency", "--table", table)["result"]["rows"]
    first = min(rows, key=lambda r: r["rank"])
    assert first["name"] == "LSNet-diffFPN"
    code, text, _ = run(capsys, "efficiency", "--table", table)
    assert code == 0 and "LSNet-diffFPN" in text


def test_efficiency_single_entry(capsys, tmp_path):
    (tmp_path / "one.csv").write_text("M,91.5,2,3\n")
    row = run_json(capsys, "efficiency", "--table", tmp_path / "one.csv")["result"]["rows"][0]
    assert row["f1_eff"] == 91.5


def test_efficiency_malformed_line(capsys, tmp_path):
    (tmp_path / "bad.csv").write_text("name,f1,params_m,gflops\nA,90,1,2\nB,90,oops,2\n")
    code, _, err = run(capsys, "efficiency", "--table", tmp_path / "bad.csv")
    assert code == 2 and "line 3" in err and "bad.csv" in err
    assert run(capsys, "efficiency", "--table", tmp_path / "none.csv")[0] == 2


def test_synth_writes_dataset(capsys, tmp_path):
    code, out, _ = run(capsys, "synth", "--out", tmp_path, "--count", 2, "--split", "val", "--size", 32)
    assert code == 0
    assert sorted(p.name for p in (tmp_path / "val" / "OUT").iterdir()) == ["00000.png", "00001.png"]
    assert run(capsys, "synth", "--out", tmp_path, "--size", 31)[0] == 2


# ---------------------------------------------------------------- exit code 1

@pytest.mark.parametrize("command,target", [
    ("profile", "count_flops"), ("train", "train"), ("infer", "load_image_pair"), ("eval", "evaluate"),
    ("efficiency", "efficiency_metrics"), ("synth", "write_synthetic_dataset"),
])
def test_computation_failures_exit_1(capsys, monkeypatch, tmp_path, dataset, tiny_config, command, target):
    def boom(*a, **k):
        raise FloatingPointError("simulated failure")
    monkeypatch.setattr(cli, target, boom)
    a = dataset / "test" / "A" / "00000.png"
    table = tmp_path / "t.csv"
    table.write_text("A,90,1,2\n")
    argv = {
        "profile": ["profile"],
        "train": ["train", "--synthetic", "--config", tiny_config, "--out", tmp_path / "c"],
        "infer": ["infer", "--ckpt", CKPT, "--a", a, "--b", a, "--out", tmp_path / "s.png"],
        "eval": ["eval", "--ckpt", CKPT, "--data", dataset],
        "efficiency": ["efficiency", "--table", table],
        "synth": ["synth", "--out", tmp_path / "s"],
    }[command]
    code, _, err = run(capsys, *argv)
    assert code == 1 and "simulated failure" in err


def test_profile_reports_both_flop_conventions(capsys):
    mac = run_json(capsys, "profile")["result"]["backbone"]
    two = run_json(capsys, "profile", "--convention", "2mac")["result"]["backbone"]
    assert two["gflops"] == 2 * mac["gflops"] == mac["gflops_2mac"] == 2 * mac["gmacs"]
    assert two["gflops_deviation_pct"] == mac["gflops_deviation_pct"]
    assert "2xMAC GFLOPs" in run(capsys, "profile")[1]


def test_outputs_create_missing_directories(capsys, tmp_path, tiny_config, dataset):
    assert run(capsys, "train", "--synthetic", "--config", tiny_config, "--out", tmp_path / "runs" / "c.ckpt")[0] == 0
    assert (tmp_path / "runs" / "c.ckpt.history.jsonl").is_file()
    a = dataset / "test" / "A" / "00000.png"
    assert run(capsys, "infer", "--ckpt", tmp_path / "runs" / "c.ckpt", "--a", a, "--b", a,
               "--out", tmp_path / "maps" / "s.png")[0] == 0
    assert (tmp_path / "maps" / "s_mask.png").is_file()
    assert run(capsys, "profile", "--out", tmp_path / "reports" / "p.json")[0] == 0
