import json
import subprocess
import sys
from pathlib import Path

import pytest

from streamdet.cli import ConfigError, RunConfig, build_config, parse_pairs, run

SMALL_WORLD = ["--set", "world.n_static=3", "--set", "world.n_moving=1", "--set", "world.n_clutter=1",
               "--set", "world.n_ground=100", "--set", "world.lidar_range=12"]


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv("STREAMDET_OUT", str(tmp_path / "runs"))
    return tmp_path


def call(argv, capsys):
    code = run(argv)
    cap = capsys.readouterr()
    result = json.loads(cap.out.splitlines()[-1]) if code == 0 and cap.out.strip() else None
    return code, result, cap.err


def test_gen_zero_frames_is_config_error(out, capsys):
    code, _, err = call(["gen", "--frames", "0"], capsys)
    assert code == 2
    assert err.strip() == "streamdet: error: duration must be positive"


def test_unknown_key_rejected(out, capsys):
    code, _, err = call(["gen", "--set", "bogus=1"], capsys)
    assert code == 2 and "unknown config key 'bogus'" in err
    with pytest.raises(ConfigError):
        parse_pairs(["frames=ten"], "x")


def test_missing_subcommand_and_paths(out, capsys):
    assert call([], capsys)[0] == 2
    code, _, err = call(["eval", "--root", str(out / "nope"), "--model", "m"], capsys)
    assert code == 1 and "not found" in err


def test_config_file_and_flag_precedence(out):
    cfg_file = out / "run.cfg"
    cfg_file.write_text("# comment\nepochs = 3\nseq-len = 7\ndtsl = off\nworld.noise_sigma = 0.05\n")
    code = run(["sampler-dump", "--config", str(cfg_file), "--epochs", "2", "--lengths", "5,3"])
    assert code == 0
    from streamdet.cli import load_config_file
    file_values = load_config_file(cfg_file)
    assert file_values == {"epochs": 3, "l_max": 7, "dtsl": False, "world.noise_sigma": 0.05}
    cfg = build_config("sampler-dump", file_values, {"epochs": 2})
    assert cfg.epochs == 2 and cfg.l_max == 7 and cfg.world == {"noise_sigma": 0.05}


def test_sampler_dump_is_reproducible(out, capsys):
    argv = ["sampler-dump", "--lengths", "5,3", "--seq-len", "4", "--batch-size", "2", "--epochs", "4"]
    code, res, _ = call(argv, capsys)
    assert code == 0
    run_dir = Path(res["run_dir"])
    header = json.loads((run_dir / "header.json").read_text())
    assert header["config"]["l_max"] == 4 and header["seed"] == 0 and len(header["config_hash"]) == 64
    first = (run_dir / "schedule.jsonl").read_bytes()
    rows = [json.loads(x) for x in first.decode().splitlines()]
    assert {r["epoch"] for r in rows} == {0, 1, 2, 3}
    assert set(rows[0]) == {"epoch", "lane", "segment", "seq", "frame", "reset"}
    # epoch 0 is single-frame: every row starts a segment
    assert all(r["reset"] for r in rows if r["epoch"] == 0)
    code, res2, _ = call(argv, capsys)
    assert res2["run_dir"] == res["run_dir"]
    assert (run_dir / "schedule.jsonl").read_bytes() == first


def test_sampler_dump_dtsl_off_uses_full_length(out, capsys):
    argv = ["sampler-dump", "--lengths", "8", "--seq-len", "4", "--batch-size", "1", "--epochs", "2"]
    _, on, _ = call(argv, capsys)
    _, off, _ = call(argv + ["--dtsl", "off"], capsys)
    assert on["run_dir"] != off["run_dir"]
    rows = [json.loads(x) for x in (Path(off["run_dir"]) / "schedule.jsonl").read_text().splitlines()]
    ep0 = [r for r in rows if r["epoch"] == 0]
    assert [r["reset"] for r in ep0] == [True, False, False, False] * 2


def test_bench_int_1000_frames(out, capsys):
    argv = ["bench", "--mode", "int", "--frames", "1000", "--points-per-frame", "300", "--grid-extent", "8",
            "--fm", "none", "--pm", "none"]
    code, res, _ = call(argv, capsys)
    assert code == 0 and res["frames"] == 950
    run_dir = Path(res["run_dir"])
    lines = (run_dir / "latency.csv").read_text().splitlines()
    assert lines[0] == "frame,stage,micros" and len(lines) == 951
    counters = [c.split(",") for c in (run_dir / "counters.csv").read_text().splitlines()[1:]]
    # once the point bank is full, per-frame work and memory stop changing
    assert len({(c[1], c[2]) for c in counters[-500:]}) == 1
    assert json.loads((run_dir / "summary.json").read_text())["warmup"] == 50


def test_bench_frames_must_exceed_warmup(out, capsys):
    code, _, err = call(["bench", "--frames", "40"], capsys)
    assert code == 2 and "exceed warmup" in err


def test_gen_train_eval_infer_round_trip(out, capsys):
    data = out / "data"
    code, res, _ = call(["gen", "--root", str(data), "--frames", "6", "--sequences", "2", "--seed", "3"]
                        + SMALL_WORLD, capsys)
    assert code == 0 and res["sequences"] == 2
    code, res, _ = call(["stats", "--root", str(data)], capsys)
    assert code == 0
    model = out / "m.ckpt"
    code, res, _ = call(["train", "--root", str(data), "--model", str(model), "--epochs", "2", "--seq-len", "3",
                         "--grid-extent", "12", "--batch-size", "2"], capsys)
    assert code == 0 and model.exists()
    assert len((Path(res["run_dir"]) / "train_log.csv").read_text().splitlines()) == 3
    code, res, _ = call(["eval", "--root", str(data), "--model", str(model)], capsys)
    assert code == 0 and 0.0 <= res["mAP"] <= 1.0
    code, res, _ = call(["infer", "--root", str(data), "--model", str(model), "--history", "3"], capsys)
    assert code == 0 and res["frames"] == 12
    first = json.loads(Path(res["output"]).read_text().splitlines()[0])
    assert first["seq"] == "seq000" and first["frame"] == 0


def test_runconfig_digest_tracks_values():
    a, b = RunConfig(subcommand="gen"), RunConfig(subcommand="gen", seed=1)
    assert a.digest() == RunConfig(subcommand="gen").digest() != b.digest()


def test_console_entry_point(out):
    proc = subprocess.run([sys.executable, "-m", "streamdet.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("streamdet ")


def test_gtdb_and_ablate_write_sweep_csv(out, capsys):
    train_root, test_root = out / "train", out / "test"
    for root, seed in ((train_root, 1), (test_root, 2)):
        assert call(["gen", "--root", str(root), "--frames", "5", "--sequences", "1", "--seed", str(seed)]
                    + SMALL_WORLD, capsys)[0] == 0
    code, res, _ = call(["gtdb", "--root", str(train_root), "--gt-db", str(out / "db")], capsys)
    assert code == 0 and res["objects"] > 0
    code, res, _ = call(["ablate", "--root", str(train_root), "--set", f"test_root={test_root}", "--epochs", "1",
                         "--grid-extent", "12", "--seq-len", "2"], capsys)
    assert code == 0 and set(res) - {"run_dir"} == {"none", "pc", "fm", "pm", "all"}
    lines = (Path(res["run_dir"]) / "ablation.csv").read_text().splitlines()
    assert lines[0].startswith("setting,pc,fm,pm,mAP,ap@0.5") and len(lines) == 6
