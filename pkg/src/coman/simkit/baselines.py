"""Train the comparison baselines with the shared trainer."""
from __future__ import annotations

from ..trainer import TrainConfig, TrainResult, train_named
from .world import LoggedDataset, SyntheticWorld

BASELINES = ("dnn", "dnn-m", "fpm", "cmnn-relu", "cmnn-elu", "cmnn-clu")


def baselines_train(data: LoggedDataset, world: SyntheticWorld, config: TrainConfig | None = None,
                    eval_data: LoggedDataset | None = None, names=BASELINES) -> dict[str, TrainResult]:
    """Train every baseline on ``data`` with the same config and seed."""
    if len(data) == 0:
        raise ValueError("cannot train baselines on an empty dataset")
    config = config or TrainConfig()
    return {name: train_named(name, data, world, config, eval_data) for name in names}
