"""Exit codes, config merging, and end-to-end flows for the cluttershape CLI."""
import json

import pytest

from cluttershape import cli

FAST = ["--fit-samples", "600", "--fit-evals", "60", "--objects", "3"]


def run(argv):
    return cli.main(argv)


def parse_config(argv):
    args = cli.build_parser().parse_args(argv)
    return cli.build_config(args)


# --- usage errors (exit 1) --------------------------------------------------

def test_no_subcommand_is_usage_error(capsys):
    assert run([]) == 1
    assert "subcommand" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    assert run(["gen", "--bogus"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_invalid_preset_is_usage_error(capsys):
    assert run(["gen", "--preset", "impossible"]) == 1
    capsys.readouterr()


def test_invalid_config_value_is_usage_error(tmp_path, capsys):
    assert run(["gen", "--objects", "99", "--out", str(tmp_path)]) == 1
    assert "objects" in capsys.readouterr().err


def test_unknown_toml_key_is_usage_error(tmp_path, capsys):
    config = tmp_path / "run.toml"
    config.write_text("wibble = 3\n")
    assert run(["gen", "--config", str(config), "--out", str(tmp_path)]) == 1
    assert "wibble" in capsys.readouterr().err


def test_unknown_nested_toml_key_is_usage_error(tmp_path, capsys):
    config = tmp_path / "run.toml"
    config.write_text("[fit]\nturbo = true\n")
    assert run(["gen", "--config", str(config), "--out", str(tmp_path)]) == 1
    assert "turbo" in capsys.readouterr().err


def test_help_exits_zero():
    with pytest.raises(SystemExit) as info:
        run(["--help"])
    assert info.value.code == 0


# --- data errors (exit 2) ---------------------------------------------------

def test_estimate_missing_scene_is_data_error(tmp_path, capsys):
    assert run(["estimate", str(tmp_path / "nowhere")]) == 2
    assert "error" in capsys.readouterr().err


def test_eval_missing_results_is_data_error(tmp_path, capsys):
    scene_dir = tmp_path / "scene"
    assert run(["gen", "--dir", str(scene_dir), *FAST]) == 0
    capsys.readouterr()
    assert run(["eval", str(scene_dir), str(tmp_path / "nowhere")]) == 2
    capsys.readouterr()


def test_broken_toml_is_data_error(tmp_path, capsys):
    config = tmp_path / "run.toml"
    config.write_text("preset = [unterminated\n")
    assert run(["gen", "--config", str(config)]) == 2
    assert "cannot parse" in capsys.readouterr().err


def test_missing_toml_is_data_error(tmp_path, capsys):
    assert run(["gen", "--config", str(tmp_path / "absent.toml")]) == 2
    capsys.readouterr()


# --- config merging ---------------------------------------------------------

def test_defaults_without_flags():
    config = parse_config(["gen"])
    assert config.preset == "easy"
    assert config.seed == 0
    assert config.out == "out"
    assert config.mode == "full"


def test_flags_override_toml(tmp_path):
    toml = tmp_path / "run.toml"
    toml.write_text('preset = "normal"\nseed = 9\nh_threshold = 0.001\n')
    config = parse_config(["gen", "--config", str(toml), "--seed", "3"])
    assert config.preset == "normal"  # from TOML
    assert config.seed == 3  # flag wins
    assert config.h == 0.001


def test_nested_toml_tables(tmp_path):
    toml = tmp_path / "run.toml"
    toml.write_text(
        "[noise]\nerode_px = 2\nflip_prob = 0.05\n"
        "[fit]\nsamples = 512\nmax_evaluations = 50\n"
    )
    config = parse_config(["gen", "--config", str(toml)])
    assert config.noise.erode_px == 2
    assert config.noise.flip_prob == 0.05
    assert config.fit.samples == 512
    assert config.fit.max_evaluations == 50


def test_noise_and_fit_flags(tmp_path):
    toml = tmp_path / "run.toml"
    toml.write_text("[fit]\nsamples = 512\n")
    config = parse_config([
        "gen", "--config", str(toml),
        "--noise-drop", "0.25", "--fit-samples", "900", "--reverse-weight", "0.5",
    ])
    assert config.noise.drop_prob == 0.25
    assert config.fit.samples == 900  # flag beats [fit] table
    assert config.fit.reverse_weight == 0.5


def test_out_env_var_and_flag_precedence(monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, "/tmp/from-env")
    assert parse_config(["gen"]).out == "/tmp/from-env"
    assert parse_config(["gen", "--out", "explicit"]).out == "explicit"
    monkeypatch.delenv(cli.OUT_ENV)
    assert parse_config(["gen"]).out == "out"


def test_categories_from_toml(tmp_path):
    toml = tmp_path / "run.toml"
    toml.write_text('categories = ["box", "ball"]\n')
    assert parse_config(["gen", "--config", str(toml)]).categories == ("box", "ball")


# --- happy paths (exit 0) ---------------------------------------------------

def test_gen_estimate_eval_round_trip(tmp_path, capsys):
    scene_dir = tmp_path / "scene"
    assert run(["gen", "--seed", "4", "--dir", str(scene_dir), *FAST]) == 0
    out = capsys.readouterr().out
    assert "3 instances" in out

    results_dir = scene_dir / "results"
    assert run(["estimate", str(scene_dir), "--seed", "4", *FAST]) == 0
    capsys.readouterr()
    fits = json.loads((results_dir / "fits.json").read_text())
    assert fits["mode"] == "full" and len(fits["fits"]) == 3

    assert run(["eval", str(scene_dir), str(results_dir)]) == 0
    capsys.readouterr()
    seg = json.loads((results_dir / "seg_report.json").read_text())
    assert seg["mAP"] == 1.0


def test_estimate_mode_flag_is_recorded(tmp_path, capsys):
    scene_dir = tmp_path / "scene"
    assert run(["gen", "--dir", str(scene_dir), *FAST]) == 0
    assert run(["estimate", str(scene_dir), "--mode", "none", *FAST,
                "--results", str(tmp_path / "r")]) == 0
    capsys.readouterr()
    fits = json.loads((tmp_path / "r" / "fits.json").read_text())
    assert fits["mode"] == "none"
    for entry in fits["fits"]:
        params = entry["result"]["params"]
        assert params["alpha_x"] == 1.0 and params["epsilon"] == 0.0


def test_estimate_with_full_drop_still_succeeds(tmp_path, capsys):
    scene_dir = tmp_path / "scene"
    assert run(["gen", "--dir", str(scene_dir), *FAST]) == 0
    assert run(["estimate", str(scene_dir), "--noise-drop", "1.0", *FAST]) == 0
    assert "no partitions" in capsys.readouterr().err


def test_bench_subcommand_writes_aggregate(tmp_path, capsys):
    directory = tmp_path / "bench"
    assert run(["bench", "--scenes", "1", "--presets", "easy", "--modes", "none",
                "--dir", str(directory), *FAST]) == 0
    capsys.readouterr()
    aggregate = json.loads((directory / "aggregate.json").read_text())
    assert aggregate["presets"]["easy"]["completed"] == 1
