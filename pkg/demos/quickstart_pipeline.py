"""End-to-end run on a small synthetic world: generate, train, evaluate, allocate.

Everything goes through the library API. The same steps are available as
``coman gen/train/eval/allocate`` on the command line.
"""
import warnings

import numpy as np

from coman.allocator import AllocationProblem, allocate
from coman.simkit.evaluation import evaluate
from coman.simkit.world import gen_dataset, gen_world
from coman.trainer import TrainConfig, train_named

warnings.simplefilter("ignore", RuntimeWarning)  # clamp notices

world = gen_world(0)
train = gen_dataset(world, 8_000, "biased", seed=1)
valid = gen_dataset(world, 1_000, "uniform", seed=3, id_offset=10**7)
test = gen_dataset(world, 1_000, "uniform", seed=2)
print(f"train rows {len(train.label)}, mean label {train.label.mean():.3f}")

cfg = TrainConfig(epochs=3, batch_size=256, learning_rate=0.05, dropout=0.1)
for name in ("dnn", "coman"):
    res = train_named(name, train, world, cfg, valid)
    rep = evaluate(res.model, test, world)
    o = rep.overall
    print(f"{name:6s} auc={o.auc:.4f} mae={o.mae:.4f} kl={o.kl:.5f}")

# price five incentive levels for the test users under a spend ratio of 3
grid = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
curves = res.model.predict_curves(test, grid)
plan = allocate(AllocationProblem(grid, curves, 3.0))
values, counts = np.unique(plan.treatment_values, return_counts=True)
print("expected conversions", round(plan.objective, 2), "ratio", round(plan.budget_ratio, 4))
print("assignment histogram", dict(zip(values.tolist(), counts.tolist())))
