"""Budget-constrained assignment and what the dual tells you.

Builds a small random instance, solves it with the multiplier search, and
compares the result with exhaustive search. The gap between the two is
always within the reported bound.
"""
import numpy as np

from coman.allocator import AllocationProblem, allocate, brute_force_oracle

rng = np.random.default_rng(7)
t = np.array([1.0, 2.0, 3.0, 4.0])
# responses rise with the incentive, with a user-specific ceiling
base = rng.uniform(0.05, 0.3, (8, 1))
lift = rng.uniform(0.02, 0.15, (8, 1))
r = np.clip(base + lift * np.log1p(t), 0, 1)

for budget in (1.5, 2.0, 2.5, 3.5):
    problem = AllocationProblem(t, r, budget)
    plan = allocate(problem)
    oracle = brute_force_oracle(problem)
    print(f"B={budget:.1f}  lambda*={plan.lambda_star:.4f}  plan={plan.objective:.4f}  "
          f"best={oracle.objective:.4f}  gap={oracle.objective - plan.objective:.2e}  "
          f"bound={plan.gap_bound:.2e}  ratio={plan.budget_ratio:.3f}")
    print("        treatments:", plan.treatment_values)

# on the LP mix of the two bracketing plans the constraint is tight
plan = allocate(AllocationProblem(t, r, 2.0))
print("complementary slackness on the LP mix:", plan.complementary_slackness)
print("LP budget ratio:", plan.lp_budget_ratio)
