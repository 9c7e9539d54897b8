import json
import subprocess

from conftest import tiny_config


def run(cli, *args, env=None, cwd=None):
    return subprocess.run([cli, *map(str, args)], capture_output=True, text=True, env=env, cwd=cwd)


def test_success_and_artifacts(cli, write_json, tmp_path):
    out = tmp_path / "out"
    r = run(cli, "run", "-c", write_json(tiny_config()), "-o", out, "-q")
    assert r.returncode == 0, r.stderr
    for name in ["config.json", "corpus.bin", "metrics.jsonl", "metrics.csv", "plot_data.csv", "summary.json",
                 "manifest.json"]:
        assert (out / name).exists(), name
    assert list((out / "partitions").glob("safeclip_epoch_*.csv"))
    assert list((out / "checkpoints").glob("*.ckpt"))


def test_seed_override(cli, write_json, tmp_path):
    r = run(cli, "run", "-c", write_json(tiny_config()), "-o", tmp_path / "s", "-s", "42", "-q")
    assert r.returncode == 0, r.stderr
    assert json.loads((tmp_path / "s" / "summary.json").read_text())["seed"] == 42


def test_output_dir_from_environment(cli, write_json, tmp_path):
    import os

    env = dict(os.environ, SAFECLIP_OUTPUT_DIR=str(tmp_path / "envroot"))
    r = run(cli, "run", "-c", write_json(tiny_config()), "-q", env=env)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "envroot" / "tiny" / "summary.json").exists()


def test_config_errors_exit_1(cli, write_json, tmp_path):
    assert run(cli, "run", "-c", tmp_path / "missing.json").returncode == 1
    r = run(cli, "run", "-c", write_json("{\n  \"name\": }", "bad.json"))
    assert r.returncode == 1
    assert "bad.json:2:" in r.stderr
    c = tiny_config()
    c["train"]["gmm_threshold"] = 1.5
    r = run(cli, "run", "-c", write_json(c), "-o", tmp_path / "x")
    assert r.returncode == 1
    assert "gmm_threshold" in r.stderr


def test_training_fault_exits_2(cli, write_json, tmp_path):
    c = tiny_config()
    c["train"]["lr"] = 1e300
    c["train"]["lr_low"] = 1e298
    r = run(cli, "run", "-c", write_json(c), "-o", tmp_path / "f", "-q")
    assert r.returncode == 2, r.stderr
    assert "clip_baseline" in r.stderr


def test_failed_check_exits_3(cli, write_json, tmp_path):
    c = tiny_config()
    c["checks"] = {"baseline_min_asr": 2.0}
    cfg = write_json(c)
    r = run(cli, "run", "-c", cfg, "-o", tmp_path / "c", "--check", "-q")
    assert r.returncode == 3
    assert "FAIL" in r.stdout
    # without --check the same run succeeds
    assert run(cli, "run", "-c", cfg, "-o", tmp_path / "d", "-q").returncode == 0


def test_preset_commands(cli):
    r = run(cli, "preset", "list")
    assert r.returncode == 0 and "tdpa_desk" in r.stdout.split()
    r = run(cli, "preset", "dump", "smoke")
    assert json.loads(r.stdout)["name"] == "smoke"
    assert run(cli, "preset", "dump", "nope").returncode == 1
