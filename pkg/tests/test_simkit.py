import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy.stats import chisquare

from coman import diffcore as dc
from coman.activations import FpmParams
from coman.monolayer import monotone_violation_scan
from coman.simkit import metrics
from coman.simkit.baselines import BASELINES, baselines_train
from coman.simkit.evaluation import curve_slopes, evaluate, uplift_cohorts, write_cohorts
from coman.simkit.world import (
    N_CITIES,
    N_CTX,
    N_PERIODS,
    LoggedDataset,
    SchemaError,
    SyntheticWorld,
    biased_treatment_probs,
    gen_dataset,
    gen_world,
)
from coman.trainer import TrainConfig, train_named


class TruthPredictor:
    """Predicts the world's own ground-truth curves."""

    def __init__(self, world):
        self.world = world

    def predict(self, data):
        return self.world.curve(data.city, data.period, data.treatment)

    def predict_curves(self, data, grid):
        return self.world.curves(data.city, data.period, grid)


class ConstantPredictor:
    def __init__(self, c):
        self.c = c

    def predict(self, data):
        return np.full(len(data), self.c)

    def predict_curves(self, data, grid):
        return np.full((len(data), len(grid)), self.c)


@pytest.fixture(scope="module")
def world():
    return gen_world(0)


@pytest.fixture(scope="module")
def big_uniform(world):
    return gen_dataset(world, 100_000, "uniform", seed=5)


def test_world_is_deterministic_and_valid():
    a, b = gen_world(3), gen_world(3)
    assert_array_equal(a.params, b.params)
    assert not np.array_equal(a.params, gen_world(4).params)
    for c in range(N_CITIES):
        for p in range(N_PERIODS):
            assert isinstance(a.cell(c, p), FpmParams)
    assert SyntheticWorld.from_dict(a.to_dict()).to_dict() == a.to_dict()


def test_uniform_world_has_identical_cells():
    w = gen_world(0, uniform=True)
    assert np.all(w.params == w.params[0, 0])


def test_default_world_has_spatio_temporal_spread(world):
    step = world.treatments[1] - world.treatments[0]
    omega2 = world.params[..., 2]
    assert omega2.max() - omega2.min() >= step
    assert world.params[..., 1].std() > 0.1


def test_invalid_world_rejected(world):
    bad = world.params.copy()
    bad[0, 0, 3] = bad[0, 0, 0]
    with pytest.raises(ValueError):
        SyntheticWorld(0, bad)
    with pytest.raises(ValueError):
        SyntheticWorld(0, world.params, campaign="cashback")


@pytest.mark.parametrize("campaign,direction", [("amount", 1), ("threshold", -1), ("delivery_fee", -1)])
def test_direction_conventions(campaign, direction):
    w = gen_world(1, campaign=campaign)
    assert w.direction == direction
    curves = w.curves(np.repeat(np.arange(N_CITIES), N_PERIODS), np.tile(np.arange(N_PERIODS), N_CITIES))
    assert np.all(direction * np.diff(curves, axis=1) > 0)


def test_single_user_dataset(world):
    d = gen_dataset(world, 1, seed=0)
    assert len(d) == 1 and d.ctx.shape == (1, N_CTX)
    with pytest.raises(ValueError):
        gen_dataset(world, 0)
    with pytest.raises(ValueError):
        gen_dataset(world, 5, policy="greedy")


def test_dataset_determinism_and_splits(world):
    a = gen_dataset(world, 500, "biased", seed=9)
    b = gen_dataset(world, 500, "biased", seed=9)
    assert_array_equal(a.ctx, b.ctx)
    assert_array_equal(a.label, b.label)
    assert a.split == "biased-train"
    assert gen_dataset(world, 10, "uniform").split == "unbiased-eval"


def test_label_rate_per_cell_within_binomial_bounds(world, big_uniform):
    d = big_uniform
    p = world.curve(d.city, d.period, d.treatment)
    for c in range(N_CITIES):
        for q in range(N_PERIODS):
            sel = (d.city == c) & (d.period == q)
            n = sel.sum()
            mean_p = p[sel].mean()
            sigma = np.sqrt(np.sum(p[sel] * (1 - p[sel]))) / n
            assert abs(d.label[sel].mean() - mean_p) <= 3 * sigma


def test_label_rate_per_cell_and_treatment(world, big_uniform):
    d = big_uniform
    z = []
    for c in range(N_CITIES):
        for q in range(N_PERIODS):
            for t in world.treatments:
                sel = (d.city == c) & (d.period == q) & (d.treatment == t)
                n = sel.sum()
                if n == 0:
                    continue
                p = world.curve(c, q, t)
                z.append((d.label[sel].mean() - p) / np.sqrt(p * (1 - p) / n))
    z = np.abs(np.array(z))
    # 400 bins: a handful beyond 3 sigma is expected, many would mean a biased generator
    assert np.mean(z > 3) < 0.01
    assert np.mean(z > 2) < 0.08


def test_uniform_policy_histogram(world, big_uniform):
    counts = np.array([(big_uniform.treatment == t).sum() for t in world.treatments])
    assert chisquare(counts).pvalue > 0.01


def test_biased_policy_skews_cheap(world):
    d = gen_dataset(world, 50_000, "biased", seed=3)
    probs = biased_treatment_probs(world.treatments)
    assert np.all(np.diff(probs) < 0)
    counts = np.array([(d.treatment == t).sum() for t in world.treatments])
    assert chisquare(counts, probs * len(d)).pvalue > 0.01


def test_dataset_csv_round_trip(world, tmp_path):
    d = gen_dataset(world, 50, seed=4)
    d.to_csv(tmp_path / "d.csv")
    e = LoggedDataset.from_csv(tmp_path / "d.csv")
    for attr in ("user_id", "city", "period", "ctx", "treatment", "label", "value"):
        assert_array_equal(getattr(d, attr), getattr(e, attr))
    (tmp_path / "bad.csv").write_text("id,city\n1,2\n")
    with pytest.raises(SchemaError):
        LoggedDataset.from_csv(tmp_path / "bad.csv")


# -- metrics -----------------------------------------------------------------

def test_metric_identities():
    rng = np.random.default_rng(0)
    grid = np.linspace(0.5, 8, 16)
    curves = rng.uniform(0.05, 0.9, (10, 16))
    assert_array_equal(metrics.curve_kl(curves, curves, grid), np.zeros(10))
    labels = rng.random(200) < 0.4
    assert metrics.auc(labels, labels + rng.uniform(0, 0.5, 200)) == 1.0
    x = rng.normal(size=50)
    assert metrics.pearson(x, x).value == pytest.approx(1.0, abs=1e-15)
    assert metrics.pearson(x, np.full(50, 2.0)) == metrics.Correlation(0.0, True)


def test_auc_examples():
    assert metrics.auc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8]) == 0.75
    assert metrics.auc([0, 1], [0.5, 0.5]) == 0.5
    assert metrics.auc([1, 0], [0.9, 0.1]) == 1.0
    assert np.isnan(metrics.auc([1, 1], [0.2, 0.3]))


def test_random_predictor_auc():
    rng = np.random.default_rng(1)
    labels = np.repeat([0, 1], 5_000)
    assert abs(metrics.auc(labels, rng.random(10_000)) - 0.5) < 0.02


def test_binned_mass_and_kl_examples():
    grid = np.linspace(0.0, 1.0, 32)
    mass = metrics.binned_mass(np.ones((1, 32)), grid)
    assert_allclose(mass, np.full((1, 16), 1 / 16), rtol=1e-12)
    p, q = np.array([0.5, 0.5]), np.array([0.25, 0.75])
    assert metrics.kl_divergence(p, q) == pytest.approx(0.5 * np.log(2) + 0.5 * np.log(2 / 3), rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_kl_non_negative_and_correlation_bounded(seed):
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.5, 8, 16)
    a, b = rng.uniform(0, 1, (2, 5, 16))
    assert np.all(metrics.curve_kl(a, b, grid) >= 0)
    assert abs(metrics.pearson(a, b).value) <= 1


def test_per_treatment_kl_zero_for_matching_means():
    t = np.repeat([1.0, 2.0, 3.0], 4)
    y = np.tile([0.0, 1.0, 1.0, 0.0], 3)
    assert metrics.per_treatment_kl(t, y, np.full(12, 0.5), [1.0, 2.0, 3.0]) == pytest.approx(0.0, abs=1e-15)


# -- evaluation --------------------------------------------------------------

def test_evaluate_truth_predictor_is_perfect(world):
    data = gen_dataset(world, 3_000, "uniform", seed=6)
    report = evaluate(TruthPredictor(world), data, world)
    o = report.overall
    assert o.mae == 0.0 and o.mse == 0.0 and o.kl == 0.0
    assert o.pearson == pytest.approx(1.0, abs=1e-12)
    assert 0.5 < o.auc <= 1.0
    assert set(report.per_period) == set(range(N_PERIODS)) and not report.notices


def test_evaluate_constant_predictor_flags_degenerate_correlation(world):
    data = gen_dataset(world, 500, "uniform", seed=7)
    report = evaluate(ConstantPredictor(0.3), data, world)
    assert report.overall.pearson == 0.0 and report.overall.pearson_degenerate
    assert report.overall.auc == 0.5


def test_slice_additivity(world):
    data = gen_dataset(world, 4_000, "uniform", seed=8)
    report = evaluate(ConstantPredictor(0.3), data, world)
    for slices in (report.per_period, report.per_city):
        weighted = sum(m.n * m.mae for m in slices.values()) / len(data)
        assert abs(weighted - report.overall.mae) <= 1e-12
        assert sum(m.n for m in slices.values()) == len(data)


def test_empty_slice_omitted_with_notice(world, tmp_path):
    data = gen_dataset(world, 2_000, "uniform", seed=9)
    data = data.subset(data.period != 2)
    report = evaluate(TruthPredictor(world), data, world)
    assert 2 not in report.per_period
    assert any("period 2" in n for n in report.notices)
    paths = report.write(tmp_path)
    assert all(p.exists() for p in paths)
    lines = paths[1].read_text().splitlines()
    assert lines[0].startswith("slice,key,n,auc") and len(lines) == 1 + 1 + 4 + N_CITIES


def test_curve_slopes_follow_direction():
    grid = np.linspace(0, 1, 11)
    curves = np.stack([grid, 1 - 2 * grid])
    assert_allclose(curve_slopes(curves, grid, 1), [1.0, -2.0])
    assert_allclose(curve_slopes(curves, grid, -1), [-1.0, 2.0])


def test_uplift_cohorts_identical_users_and_single_group(world):
    data = gen_dataset(world, 300, "uniform", seed=10)
    same = data.subset(slice(None))
    same.city[:] = 1
    same.period[:] = 3
    cohorts = uplift_cohorts(TruthPredictor(world), same, 5)
    assert len(cohorts) == 5 and sum(c.n for c in cohorts) == 300
    assert len({c.mean_uplift for c in cohorts}) == 1
    one = uplift_cohorts(TruthPredictor(world), data, 1)
    grid = np.linspace(data.treatment.min(), data.treatment.max(), 64)
    curves = world.curves(data.city, data.period, grid)
    assert one[0].n == 300
    assert one[0].mean_uplift == pytest.approx(np.mean(curves[:, -1] - curves[:, 0]), rel=1e-12)
    with pytest.raises(ValueError):
        uplift_cohorts(TruthPredictor(world), data, 0)


def test_two_tier_world_orders_cohorts(tmp_path):
    w = gen_world(2, two_tier=True)
    slopes = {round(w.params[c, p, 1], 6) for c in range(N_CITIES) for p in range(N_PERIODS)}
    assert slopes == {0.5, 2.0}
    data = gen_dataset(w, 2_000, "uniform", seed=1)
    cohorts = uplift_cohorts(TruthPredictor(w), data, 5)
    assert cohorts[0].mean_uplift > cohorts[-1].mean_uplift
    assert all(a.mean_slope >= b.mean_slope for a, b in zip(cohorts, cohorts[1:]))
    write_cohorts(tmp_path / "c.csv", cohorts)
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "cohort,n,mean_slope,mean_uplift"


# -- baselines ---------------------------------------------------------------

@pytest.fixture(scope="module")
def small_data(world):
    return gen_dataset(world, 3_000, "biased", seed=11), gen_dataset(world, 800, "uniform", seed=12)


def test_baselines_train_to_finite_loss(world, small_data):
    train, ev = small_data
    config = TrainConfig(batch_size=256, learning_rate=0.05, epochs=1, dropout=0.1)
    results = baselines_train(train, world, config, ev)
    assert tuple(results) == BASELINES
    for name, res in results.items():
        assert np.isfinite(res.trace[-1].train_loss), name
        assert np.isfinite(res.trace[-1].eval_kl), name
    with pytest.raises(ValueError):
        baselines_train(train.subset(slice(0, 0)), world, config)


def _treatment_chains(model, data, n_chains, seed):
    """Sample (context, t_lo, t_hi) chains and return the two predictions."""
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(data), n_chains)
    t = np.sort(rng.choice(data.treatment.max() * np.linspace(0.05, 1, 64), (n_chains, 2)), axis=1)
    base = data.subset(idx)
    return model.predict(base.with_treatment(t[:, 0])), model.predict(base.with_treatment(t[:, 1]))


def test_unconstrained_dnn_violates_monotonicity(world):
    noisy = gen_dataset(world, 4_000, "biased", seed=13)
    res = train_named("dnn", noisy, world, TrainConfig(batch_size=64, learning_rate=0.1, epochs=3, dropout=0.0))
    lo, hi = _treatment_chains(res.model, noisy, 10_000, 0)
    violations = int(np.sum(lo > hi + 1e-12))
    assert violations > 0


def test_monotone_baseline_has_no_chain_violations(world, small_data):
    train, _ = small_data
    for name in ("dnn-m", "cmnn-clu", "fpm"):
        res = train_named(name, train, world, TrainConfig(batch_size=256, learning_rate=0.05, epochs=1, dropout=0.0))
        lo, hi = _treatment_chains(res.model, train, 10_000, 1)
        assert np.all(hi >= lo - 1e-12), name


def test_dnn_m_gradient_signs(world, small_data):
    from coman.models import build_model

    train, _ = small_data
    model = build_model("dnn-m", train, world, seed=3)
    net = model.monotone_networks()[0]
    x = dc.Parameter(np.random.default_rng(0).normal(size=(500, net.spec.widths[0])))
    dc.backward(dc.sum_(net(x)))
    assert np.all(x.grad[:, 0] >= -1e-12)
    report = monotone_violation_scan(net.predict, lambda rng, n: rng.normal(size=(n, net.spec.widths[0])),
                                     net.spec.indicator, 10_000, seed=4)
    assert report.count == 0
