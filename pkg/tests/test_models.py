import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from coman import diffcore as dc
from coman.models import MODEL_NAMES, ModelConfig, ResponseModel, build_model, dumps_document, model_config
from coman.simkit.world import gen_dataset, gen_world
from coman.trainer import TrainConfig, batch_loss


@pytest.fixture(scope="module")
def setup():
    world = gen_world(0)
    data = gen_dataset(world, 400, "biased", seed=1)
    return world, data


def test_model_zoo_names_and_ablation_flags():
    assert MODEL_NAMES == ("dnn", "dnn-m", "fpm", "cmnn-relu", "cmnn-elu", "cmnn-clu",
                           "coman-b", "coman-no-aa", "coman-no-st", "coman")
    flags = {n: (model_config(n).adaptive, model_config(n).st_head) for n in MODEL_NAMES if n.startswith("coman")}
    assert flags == {"coman-b": (False, False), "coman-no-aa": (False, True),
                     "coman-no-st": (True, False), "coman": (True, True)}
    with pytest.raises(ValueError):
        model_config("xgboost")
    with pytest.raises(ValueError):
        ModelConfig("x", "dnn", dropout=1.0)


@pytest.mark.parametrize("name", MODEL_NAMES)
def test_full_model_gradients(name, setup):
    world, data = setup
    model = build_model(name, data, world, seed=2, dropout=0.0)
    batch = data.subset(slice(0, 50))
    config = TrainConfig()
    report = dc.check_gradients(lambda: batch_loss(model, batch, config, None), model.named_parameters(),
                                n_points=50, seed=sum(map(ord, name)))
    assert report.ok, report.failures


@pytest.mark.parametrize("name", MODEL_NAMES)
def test_checkpoint_round_trip_is_exact(name, setup, tmp_path):
    world, data = setup
    model = build_model(name, data, world, seed=4)
    rng = np.random.default_rng(0)
    for p in model.parameters():
        p.value = p.value + rng.normal(0, 0.1, p.shape)
    model.save(tmp_path / "m.json")
    again = ResponseModel.load(tmp_path / "m.json")
    assert_array_equal(again.predict(data), model.predict(data))
    assert (tmp_path / "m.json").read_text() == dumps_document(again.to_document())


def test_checkpoint_rejects_foreign_document(setup):
    world, data = setup
    doc = build_model("dnn", data, world).to_document()
    doc["format"] = "other/1"
    with pytest.raises(ValueError):
        ResponseModel.from_document(doc)


def test_document_floats_have_17_digits():
    text = dumps_document({"a": 0.1, "b": [1.5, 2, True, None], "c": {}})
    assert '"a": 0.10000000000000001' in text
    assert json.loads(text) == {"a": 0.1, "b": [1.5, 2, True, None], "c": {}}


@pytest.mark.parametrize("name", MODEL_NAMES)
def test_predictions_are_probabilities_and_repeatable(name, setup):
    world, data = setup
    model = build_model(name, data, world, seed=5)
    a, b = model.predict(data), model.predict(data)
    assert_array_equal(a, b)
    assert np.all((a >= 0) & (a <= 1))
    curves = model.predict_curves(data.subset(slice(0, 20)), world.treatments)
    assert curves.shape == (20, world.treatments.size)


@pytest.mark.parametrize("name", [n for n in MODEL_NAMES if n != "dnn"])
def test_constrained_models_are_monotone_in_treatment(name, setup):
    world, data = setup
    model = build_model(name, data, world, seed=6)
    rng = np.random.default_rng(7)
    for p in model.parameters():
        p.value = p.value + rng.normal(0, 0.5, p.shape)
    curves = model.predict_curves(data, np.linspace(world.t_min, world.t_max, 40))
    assert np.all(np.diff(curves, axis=1) >= -1e-12)


def test_decreasing_campaign_gives_decreasing_curves():
    world = gen_world(0, campaign="threshold")
    data = gen_dataset(world, 200, seed=1)
    for name in ("coman", "fpm", "cmnn-clu"):
        curves = build_model(name, data, world, seed=8).predict_curves(data, world.treatments)
        assert np.all(np.diff(curves, axis=1) <= 1e-12), name


def test_fpm_params_exposed(setup):
    world, data = setup
    p = build_model("coman", data, world).fpm_params(data)
    assert p.shape == (len(data), 4)
    assert np.all(p[:, 0] <= p[:, 3]) and np.all(p[:, 1] > 0)
    assert build_model("dnn", data, world).fpm_params(data) is None
