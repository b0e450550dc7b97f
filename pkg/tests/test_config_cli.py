import json

import numpy as np
import pytest

from adac import dataset as ds
from adac.cli import main
from adac.config import ConfigError, RunConfig, load_config, parse_config

TINY = """\
[run]
seed = 3

[data]
trajectory_count = 6
normalize_states = true
export_jsonl = true

[pretrain]
behavior_steps = 20
value_steps = 20
transition_steps = 20
batch_size = 16
log_interval = 10
behavior_hidden = 16, 16
value_hidden = 16
transition_hidden = 16
diffusion_steps = 3

[advantage]
sample_count = 4

[train]
total_steps = 4
log_interval = 2
eval_interval = 4
eval_episodes = 2
batch_size = 8
backup_count = 2
use_max_q_backup = true
eval_candidates = 3
diffusion_steps = 3
actor_hidden = 16, 16
critic_hidden = 16
critic_blocks = 1

[eval]
episodes = 3

[stats]
advantage_states = 12

[verify]
trial_count = 3
"""


def test_defaults():
    cfg = load_config()
    assert cfg.run.seed == 0 and cfg.train.total_steps == 50_000
    assert cfg.advantage.kappa == 0.65 and cfg.advantage.sample_count == 25
    assert cfg.route_mix() == {"left": 0.33, "middle": 0.22, "right": 0.45}
    assert cfg.maze_spec().shape == (7, 7)


def test_parse_typed_values_and_tuples():
    cfg = parse_config(TINY)
    assert cfg.run.seed == 3 and cfg.train.seed == 3
    assert cfg.pretrain.behavior_hidden == (16, 16) and cfg.data.normalize_states is True
    assert parse_config("[maze]\nmax_episode_steps = 20\n").maze_spec().max_episode_steps == 20


@pytest.mark.parametrize("text", [
    "[bogus]\nx = 1\n",
    "[train]\nlearning_rate = 1\n",
    "[train]\ngamma = fast\n",
    "[train]\ngamma = 1.5\n",
    "[data]\nnormalize_states = maybe\n",
    "no section header\n",
])
def test_bad_configs_raise(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")


def test_render_round_trips():
    cfg = parse_config(TINY).with_overrides(ablate=True)
    again = parse_config(cfg.render())
    assert again == cfg


def test_stage_hash_tracks_only_upstream_sections():
    base = RunConfig()
    other_train = parse_config("[train]\nalpha = 2.0\n")
    assert base.stage_hash("data") == other_train.stage_hash("data")
    assert base.stage_hash("pretrain") == other_train.stage_hash("pretrain")
    assert base.stage_hash("train") != other_train.stage_hash("train")
    assert base.stage_hash("train") != base.with_overrides(ablate=True).stage_hash("train")
    assert base.stage_hash("data") != base.with_overrides(seed=1).stage_hash("data")


def test_overrides():
    cfg = RunConfig().with_overrides(seed=7, out="elsewhere", ablate=True)
    assert cfg.run.seed == 7 and cfg.train.seed == 7 and cfg.ablate_advantage
    assert str(cfg.stage_dir("data")).startswith("elsewhere/data-")


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return ["--config", str(path), "--out", str(tmp_path / "out")]


def test_missing_artifacts_exit_with_hint(tiny_config, capsys):
    assert main(["pretrain", *tiny_config]) == 2
    assert "adac gen-data" in capsys.readouterr().err
    assert main(["eval", *tiny_config]) == 2
    assert "adac train" in capsys.readouterr().err


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nnope = 1\n")
    assert main(["gen-data", "--config", str(bad)]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_unfittable_collector_exits_2(tmp_path, capsys):
    path = tmp_path / "short.ini"
    path.write_text("[maze]\nmax_episode_steps = 20\n[data]\ntrajectory_count = 2\n")
    assert main(["gen-data", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert "discarded" in capsys.readouterr().err


def test_full_pipeline(tiny_config, tmp_path, capsys):
    cfg = load_config(tiny_config[1]).with_overrides(out=tiny_config[3])
    assert main(["gen-data", *tiny_config]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["trajectories"] == 6 and report["success_rate"] == 1.0
    data = ds.load(cfg.stage_dir("data") / "dataset.adac")
    assert data.normalization is not None and len(data) == report["tuples"]
    assert (cfg.stage_dir("data") / "dataset.jsonl").exists()

    assert main(["pretrain", *tiny_config]) == 0
    capsys.readouterr()
    pre = cfg.stage_dir("pretrain")
    for name in ("behavior.ckpt", "value.ckpt", "transition.ckpt", "pretrain_value.csv", "report.json"):
        assert (pre / name).exists(), name

    assert main(["train", *tiny_config]) == 0
    capsys.readouterr()
    tr = cfg.stage_dir("train")
    assert (tr / "metrics.csv").read_text().count("\n") == 3
    assert np.load(tr / "thresholds.npy").shape == (len(data),)

    assert main(["eval", *tiny_config]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert len(ev["lengths"]) == 3 and ev["dataset_min_length"] == int(data.trajectory_lengths().min())
    assert len((tr / "eval_trajectories.jsonl").read_text().splitlines()) == 3

    assert main(["stats", "dataset", *tiny_config]) == 0
    st = json.loads(capsys.readouterr().out)
    assert st["trajectories"] == 6 and st["length_categories"]["optimal"] == 0.0
    assert main(["stats", "advantage", *tiny_config]) == 0
    adv = json.loads(capsys.readouterr().out)
    assert adv["states"] == 12 and set(adv["by_kappa"]) == {"0.55", "0.65", "0.75", "0.85", "0.95"}

    # the ablation arm reuses data and pretraining but trains into its own directory
    assert main(["train", "--ablate-advantage", *tiny_config]) == 0
    capsys.readouterr()
    assert cfg.with_overrides(ablate=True).stage_dir("train") != tr


def test_pipeline_is_deterministic(tiny_config, tmp_path, capsys):
    first = tmp_path / "a"
    second = tmp_path / "b"
    for out in (first, second):
        args = [tiny_config[0], tiny_config[1], "--out", str(out)]
        for cmd in ("gen-data", "pretrain", "train"):
            assert main([cmd, *args]) == 0
    capsys.readouterr()
    cfg = load_config(tiny_config[1])
    a = (cfg.with_overrides(out=str(first)).stage_dir("train") / "metrics.csv").read_bytes()
    b = (cfg.with_overrides(out=str(second)).stage_dir("train") / "metrics.csv").read_bytes()
    assert a == b


def test_verify_command_writes_report(tiny_config, tmp_path, capsys):
    code = main(["verify", *tiny_config])
    out = capsys.readouterr().out
    assert code in (0, 1) and "P1" in out
    assert (tmp_path / "out" / "verify" / "certificate.json").exists()
