"""Desk maze and its scripted dataset.

Collects a few hundred noisy, speed-capped demonstrations along the
three corridors, prints the length categories against the shortest
path, and round-trips the binary file.
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from adac import dataset as ds
from adac.envs import DEFAULT_ROUTE_MIX, collect_scripted_dataset, desk_maze, shortest_path_steps


def main(count=300, seed=0):
    spec = desk_maze()
    print("\n".join(spec.grid))
    trajs = collect_scripted_dataset(spec, DEFAULT_ROUTE_MIX, count, np.random.default_rng(seed))
    data = ds.OfflineDataset.from_trajectories(trajs)

    shortest = shortest_path_steps(spec)
    cats = ds.trajectory_stats(data, ds.scaled_thresholds(shortest)).as_dict()
    thresholds = cats.pop("thresholds")
    lengths = data.trajectory_lengths()
    print(f"{len(trajs)} trajectories, {len(data)} transitions; shortest path {shortest} steps")
    print(f"lengths min {lengths.min()} median {np.median(lengths):.0f} max {lengths.max()}; "
          f"category cut points {thresholds}")
    for name, share in cats.items():
        print(f"  {name:<13} {share:6.1%}")
    routes = [t.route for t in trajs]
    for r in sorted(set(routes)):
        print(f"  route {r:<7} {routes.count(r) / len(routes):6.1%}")

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "desk.adac"
        ds.save(ds.fit_normalization(data), path)
        back = ds.load(path)
        print(f"file {path.stat().st_size} bytes; round trip equal: "
              f"{np.array_equal(back.observations, data.observations)}, normalization kept: "
              f"{back.normalization is not None}")


if __name__ == "__main__":
    main(*map(int, sys.argv[1:]))
