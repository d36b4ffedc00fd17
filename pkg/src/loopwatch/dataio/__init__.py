from .dataset import (AnomalousCase, Dataset, find_episode_dirs, generate_dataset,
                      is_pair_dir, load_dataset, load_nominal, load_pair, save_dataset)
from .episode import (Episode, EpisodeRecord, TrainingWindow, load_episode, load_udacity,
                      make_windows, save_episode)
from .simulate import (AnomalyScenario, inject_anomaly, linked_pair, pick_scenario,
                       simulate_episode)
from .world import VehicleState, World, WorldConfig

__all__ = [
    "AnomalousCase", "Dataset", "find_episode_dirs", "generate_dataset", "is_pair_dir",
    "load_dataset", "load_nominal", "load_pair", "save_dataset",
    "AnomalyScenario", "Episode", "EpisodeRecord", "TrainingWindow", "VehicleState", "World",
    "WorldConfig", "inject_anomaly", "linked_pair", "load_episode", "load_udacity",
    "make_windows", "pick_scenario", "save_episode", "simulate_episode",
]
