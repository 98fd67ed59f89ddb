"""Do steeper predicted curves mean bigger real uplift?

Trains the full model on a world with a steep tier and a flat tier of
cities, ranks test users by predicted slope, and reports the true uplift
per cohort.
"""
import warnings

from coman.simkit.evaluation import uplift_cohorts
from coman.simkit.world import gen_dataset, gen_world
from coman.trainer import TrainConfig, train_named

warnings.simplefilter("ignore", RuntimeWarning)


class GroundTruth:
    """Wraps the world so it can be ranked like a trained model."""

    def __init__(self, world):
        self.world = world

    def predict(self, data):
        return self.world.curve(data.city, data.period, data.treatment)

    def predict_curves(self, data, grid):
        return self.world.curves(data.city, data.period, grid)


world = gen_world(0, two_tier=True)
train = gen_dataset(world, 20_000, "biased", seed=1)
test = gen_dataset(world, 2_000, "uniform", seed=2)
res = train_named("coman", train, world, TrainConfig(epochs=4, batch_size=256, learning_rate=0.05, dropout=0.1))

cohorts = uplift_cohorts(res.model, test, k_groups=5, direction=world.direction)
truth = uplift_cohorts(GroundTruth(world), test, k_groups=5, direction=world.direction)
print("cohort  n     pred slope  pred uplift  | true uplift (ranked by truth)")
for c, g in zip(cohorts, truth):
    print(f"{c.cohort:5d} {c.n:5d}  {c.mean_slope:10.4f}  {c.mean_uplift:11.4f}  | {g.mean_uplift:.4f}")
print("top-bottom predicted uplift gap:", round(cohorts[0].mean_uplift - cohorts[-1].mean_uplift, 4))
