"""Every CLI stage on a toy budget, in a scratch directory.

The numbers mean nothing at this size; the point is the artifact
layout each stage leaves behind.
"""
import json
import tempfile
from pathlib import Path

from adac.cli import main

TINY = """\
[data]
trajectory_count = 12
normalize_states = true

[pretrain]
behavior_steps = 300
value_steps = 300
transition_steps = 300

[advantage]
sample_count = 8

[train]
total_steps = 200
log_interval = 50
eval_interval = 200
eval_episodes = 4

[eval]
episodes = 4

[stats]
advantage_states = 50
"""

with tempfile.TemporaryDirectory() as tmp:
    cfg = Path(tmp) / "tiny.ini"
    cfg.write_text(TINY)
    args = ["--config", str(cfg), "--out", str(Path(tmp) / "runs")]
    for cmd in (["gen-data"], ["pretrain"], ["train"], ["train", "--ablate-advantage"], ["eval"],
                ["stats", "advantage"]):
        print("$ adac", " ".join(cmd))
        assert main(cmd + args) == 0
    for path in sorted((Path(tmp) / "runs").rglob("*")):
        if path.is_file():
            print(path.relative_to(tmp), path.stat().st_size)
    metrics = next((Path(tmp) / "runs").glob("train-*/metrics.csv")).read_text()
    print(metrics)
