"""Budget-constrained incentive allocation through a single Lagrange multiplier.

Each user ``i`` receives one treatment ``j`` with predicted response ``r[i, j]``.
The plan maximizes the expected number of conversions subject to the
average incentive per converted order staying within ``B``:

    sum_i r[i, j(i)] * t[j(i)] / sum_i r[i, j(i)] <= B

which is handled in its linear form ``S = sum_i r[i, j(i)] * (t[j(i)] - B) <= 0``.
Pricing the constraint with ``lam >= 0`` gives the per-user rule
``j(i) = argmin_j r[i, j] * (lam * t[j] - lam * B - 1)``.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from .simkit.world import SchemaError

ORACLE_LIMIT = 10**6
SCORES_HEADER = ["user_id", "treatment_value", "response_score"]


class BudgetInfeasible(ValueError):
    """No assignment satisfies the budget, not even the cheapest one per user."""

    def __init__(self, budget: float, min_slack: float):
        self.budget, self.min_slack = budget, min_slack
        super().__init__(f"budget {budget:.17g} is infeasible: the least-spend assignment "
                         f"still exceeds it by {min_slack:.6g} weighted currency units")


@dataclass
class AllocationProblem:
    treatments: np.ndarray
    responses: np.ndarray  # (users, treatments)
    budget: float
    user_ids: np.ndarray | None = None

    def __post_init__(self):
        self.treatments = np.asarray(self.treatments, dtype=float)
        self.responses = np.asarray(self.responses, dtype=float)
        t, r = self.treatments, self.responses
        if t.ndim != 1 or t.size < 1:
            raise ValueError("treatments must be a non-empty vector")
        if np.any(np.diff(t) <= 0):
            raise ValueError("treatments must be strictly increasing")
        if r.ndim != 2 or r.shape[1] != t.size:
            raise ValueError(f"responses must have shape (users, {t.size}), got {r.shape}")
        if not np.all(np.isfinite(r)) or np.any(r < 0) or np.any(r > 1):
            raise ValueError("responses must be finite and lie in [0, 1]")
        if not self.budget > 0:
            raise ValueError("budget must be positive")
        if self.user_ids is None:
            self.user_ids = np.arange(r.shape[0])
        self.user_ids = np.asarray(self.user_ids)

    @property
    def n_users(self) -> int:
        return self.responses.shape[0]

    def slack(self, assignment) -> float:
        """Linearized budget usage ``sum_i r (t - B)``; non-positive means feasible."""
        j = np.asarray(assignment)
        r = self.responses[np.arange(self.n_users), j]
        return float(np.sum(r * (self.treatments[j] - self.budget)))

    def objective(self, assignment) -> float:
        return float(self.responses[np.arange(self.n_users), np.asarray(assignment)].sum())

    def budget_ratio(self, assignment) -> float:
        """Average incentive per expected conversion (0 when nothing converts)."""
        j = np.asarray(assignment)
        r = self.responses[np.arange(self.n_users), j]
        total = r.sum()
        return float(np.sum(r * self.treatments[j]) / total) if total > 0 else 0.0


def dual_scores(problem: AllocationProblem, lam: float) -> np.ndarray:
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    return problem.responses * (lam * problem.treatments - lam * problem.budget - 1.0)


def dual_objective(problem: AllocationProblem, lam: float) -> tuple[float, np.ndarray]:
    """Per-user minimizing treatment and the summed minimal scores at ``lam``.

    ``np.argmin`` returns the first minimizer, so ties go to the cheapest treatment.
    """
    scores = dual_scores(problem, lam)
    idx = np.argmin(scores, axis=1)
    return float(scores[np.arange(problem.n_users), idx].sum()), idx


def min_slack(problem: AllocationProblem) -> float:
    r, t, b = problem.responses, problem.treatments, problem.budget
    return float(np.min(r * (t - b), axis=1).sum())


@dataclass
class LambdaSearch:
    lam: float
    lo: float
    hi: float
    iterations: int


def search_lambda(problem: AllocationProblem, tol: float = 1e-10, max_iter: int = 200) -> LambdaSearch:
    """Bisection for the smallest ``lam`` whose induced assignment is feasible.

    The induced linear slack is non-increasing in ``lam`` (it is the derivative
    of the concave dual function), so the feasible set of multipliers is a
    half-line and bisection on a doubling bracket finds its left end.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    worst = min_slack(problem)
    if worst > 0:
        raise BudgetInfeasible(problem.budget, worst)
    if problem.slack(dual_objective(problem, 0.0)[1]) <= 0:
        return LambdaSearch(0.0, 0.0, 0.0, 0)
    lo, hi = 0.0, 1.0
    it = 0
    while problem.slack(dual_objective(problem, hi)[1]) > 0:
        lo, hi = hi, 2.0 * hi
        it += 1
        if it > max_iter:
            raise BudgetInfeasible(problem.budget, worst)
    while hi - lo > tol * max(1.0, hi) and it < max_iter:
        mid = 0.5 * (lo + hi)
        if problem.slack(dual_objective(problem, mid)[1]) <= 0:
            hi = mid
        else:
            lo = mid
        it += 1
    return LambdaSearch(hi, lo, hi, it)


def solve_lambda(problem: AllocationProblem, tol: float = 1e-10, max_iter: int = 200) -> float:
    return search_lambda(problem, tol, max_iter).lam


@dataclass
class AllocationPlan:
    assignment: np.ndarray
    treatment_values: np.ndarray
    objective: float
    budget_ratio: float
    lambda_star: float
    slack: float
    gap_bound: float
    lp_objective: float
    lp_budget_ratio: float
    complementary_slackness: float
    user_ids: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def summary(self, budget: float) -> dict:
        return {
            "users": int(self.assignment.size),
            "budget": float(budget),
            "objective": self.objective,
            "budget_ratio": self.budget_ratio,
            "lambda_star": self.lambda_star,
            "linear_slack": self.slack,
            "gap_bound": self.gap_bound,
            "lp_objective": self.lp_objective,
            "lp_budget_ratio": self.lp_budget_ratio,
            "complementary_slackness": self.complementary_slackness,
        }


def allocate(problem: AllocationProblem, tol: float = 1e-10, max_iter: int = 200) -> AllocationPlan:
    """Assign one treatment per user with the decision rule at the optimal multiplier.

    Besides the integral plan the result reports the fractional (LP) optimum,
    obtained by mixing the assignments just below and at ``lambda_star`` so
    that the linear budget binds exactly. Its objective equals the dual bound,
    and ``gap_bound = lp_objective - objective`` bounds how far the integral
    plan can be from the best feasible integral assignment.
    """
    search = search_lambda(problem, tol, max_iter)
    lam = search.lam
    dual_value, idx = dual_objective(problem, lam)
    obj, s = problem.objective(idx), problem.slack(idx)
    lp_obj, lp_ratio = obj, problem.budget_ratio(idx)
    if lam > 0:
        lo_idx = dual_objective(problem, search.lo)[1]
        s_lo = problem.slack(lo_idx)
        theta = s_lo / (s_lo - s) if s_lo - s > 0 else 1.0
        r_hi = problem.responses[np.arange(problem.n_users), idx]
        r_lo = problem.responses[np.arange(problem.n_users), lo_idx]
        lp_obj = theta * obj + (1 - theta) * problem.objective(lo_idx)
        spend = theta * np.sum(r_hi * problem.treatments[idx]) + (1 - theta) * np.sum(r_lo * problem.treatments[lo_idx])
        lp_ratio = float(spend / lp_obj) if lp_obj > 0 else 0.0
    gap = max(-dual_value - obj, 0.0)
    return AllocationPlan(
        assignment=idx,
        treatment_values=problem.treatments[idx],
        objective=obj,
        budget_ratio=problem.budget_ratio(idx),
        lambda_star=lam,
        slack=s,
        gap_bound=gap,
        lp_objective=float(lp_obj),
        lp_budget_ratio=lp_ratio,
        complementary_slackness=float(lam * (lp_ratio - problem.budget)) if lam > 0 else 0.0,
        user_ids=problem.user_ids,
    )


@dataclass
class OracleResult:
    assignment: np.ndarray
    objective: float


def brute_force_oracle(problem: AllocationProblem, feas_tol: float = 1e-12) -> OracleResult:
    """Best budget-feasible integral assignment by exhaustive enumeration.

    Ties in objective go to the lexicographically smallest assignment.
    """
    n, m = problem.responses.shape
    if m ** n > ORACLE_LIMIT:
        raise ValueError(f"{m}^{n} assignments exceed the enumeration limit {ORACLE_LIMIT}")
    combos = np.array(list(itertools.product(range(m), repeat=n)), dtype=np.int64).reshape(-1, n)
    rows = np.arange(n)
    r = problem.responses[rows, combos]
    obj = r.sum(axis=1)
    slack = np.sum(r * (problem.treatments[combos] - problem.budget), axis=1)
    ok = slack <= feas_tol * max(1.0, np.abs(r).sum() * problem.treatments[-1])
    if not ok.any():
        raise BudgetInfeasible(problem.budget, float(slack.min()))
    best = int(np.flatnonzero(ok)[np.argmax(obj[ok])])
    return OracleResult(combos[best], float(obj[best]))


# ---------------------------------------------------------------------------
# file formats

def read_scores_csv(path, budget: float) -> AllocationProblem:
    """Read ``user_id,treatment_value,response_score`` rows into a problem.

    Every user must carry a score for every treatment value that appears.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCORES_HEADER:
            raise SchemaError(f"{path}: expected header {','.join(SCORES_HEADER)}, got {header}")
        rows = []
        for line, rec in enumerate(reader, start=2):
            if len(rec) != 3:
                raise SchemaError(f"{path}:{line}: expected 3 fields, got {len(rec)}")
            try:
                rows.append((rec[0], float(rec[1]), float(rec[2])))
            except ValueError:
                raise SchemaError(f"{path}:{line}: non-numeric treatment or score") from None
    if not rows:
        raise SchemaError(f"{path}: no score rows")
    users = list(dict.fromkeys(r[0] for r in rows))
    treatments = np.unique([r[1] for r in rows])
    u_index = {u: k for k, u in enumerate(users)}
    t_index = {t: k for k, t in enumerate(treatments)}
    resp = np.full((len(users), treatments.size), np.nan)
    for u, t, s in rows:
        resp[u_index[u], t_index[t]] = s
    if np.isnan(resp).any():
        raise SchemaError(f"{path}: every user needs a score for each of the {treatments.size} treatment values")
    return AllocationProblem(treatments, resp, budget, np.array(users))


def write_scores_csv(path, user_ids, treatments, responses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORES_HEADER)
        for u, row in zip(user_ids, responses):
            for t, s in zip(treatments, row):
                w.writerow([u, f"{t:.17g}", f"{s:.17g}"])


def write_plan_csv(path, plan: AllocationPlan) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "treatment_value"])
        for u, t in zip(plan.user_ids, plan.treatment_values):
            w.writerow([u, f"{t:.17g}"])
