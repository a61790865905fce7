"""Named experiment configurations."""

import copy

# Desk-scale fork study that runs in seconds on one core: 4-arm spiral,
# 2x64 ReLU MLP, parent 20 epochs, forks at {0, 2, 5, 10}, 30 child epochs.
DESK = {
    "name": "desk",
    "dataset": {"kind": "spiral", "n": 8000, "seed": 0, "classes": 4, "noise": 0.05,
                "turns": 1.0, "subset": 4000, "subset_seed": 0},
    "network": {"mlp": {"hidden": [64, 64], "activation": "relu"}, "loss": "cross_entropy"},
    "train": {"epochs": 20, "batch_size": 128, "lr": 0.1, "lr_decay_epochs": [10, 15],
              "lr_decay_factor": 10.0, "momentum": 0.9, "weight_decay": 1e-4, "seed": 0},
    "forks": [{"fork_epoch": e, "child_seeds": [1, 2], "child_epochs": 30, "checkpoint_every": 1}
              for e in (0, 2, 5, 10)],
    "analysis": {"grid": 25, "metrics": ["loss", "error_rate"], "predict": True,
                 "layerwise": "all", "geometry": ["origin", "fork_point"],
                 "evolution": {"stride": 5, "metric": "error_rate"}},
    "toy": {"minima": [-1.5, -1.0, 1.0, 1.5]},
}

TOY = {
    "name": "toy",
    "toy": {"minima": [-1.5, -1.0, 1.0, 1.5], "grid_size": 1001},
}

PRESETS = {"desk": DESK, "toy": TOY}


def preset(name: str) -> dict:
    return copy.deepcopy(PRESETS[name])
