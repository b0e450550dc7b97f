from .maze import (
    DEFAULT_ROUTE_MIX,
    CollectorConfig,
    MazeSpec,
    MazeState,
    Trajectory,
    collect_scripted_dataset,
    desk_maze,
    load_maze,
    maze_reset,
    maze_step,
    large_maze,
    shortest_path_steps,
)
from .tabular import TabularMdp, make_random_mdp
