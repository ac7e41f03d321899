import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flamegrad.params import (
    BETA_RAW_FOR_TWO,
    AffineMap,
    FlameParams,
    FlameSpec,
    GeneratorParams,
    GradientSet,
    beta_derivative,
    SceneParams,
    SceneSpec,
    SchemaError,
    Variation,
    deserialize,
    effective_beta,
    from_vector,
    init_random,
    param_groups,
    param_paths,
    project_constraints,
    serialize,
    softplus,
    to_vector,
)

from conftest import make_flame, random_scene, scene_of

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


def test_variation_labels_round_trip():
    for v in Variation:
        assert Variation.from_label(v.label) is v
    with pytest.raises(ValueError, match="unknown variation 'julia'"):
        Variation.from_label("julia")


def test_affine_call_and_array():
    m = AffineMap(0.5, 0.0, 1.0, 0.0, 0.5, 0.0)
    p = m(__import__("flamegrad.params", fromlist=["Point"]).Point(0.0, 0.0))
    assert (p.x, p.y) == (1.0, 0.0)
    assert AffineMap.from_array(m.to_array()) == m


def test_flame_needs_two_generators():
    with pytest.raises(ValueError):
        make_flame([(1, 0, 0, 0, 1, 0)])


def test_flame_needs_one_color_per_generator():
    gens = (GeneratorParams(AffineMap(), Variation.LINEAR),) * 2
    with pytest.raises(ValueError):
        FlameParams(gens, 0.0, AffineMap(), ((1, 1, 1, 1),))


def test_init_random_is_deterministic():
    spec = SceneSpec((FlameSpec.uniform(4), FlameSpec.uniform(3, "spherical")))
    assert init_random(7, spec) == init_random(7, spec)
    assert serialize(init_random(7, spec)) == serialize(init_random(7, spec))


def test_init_random_seeds_differ():
    spec = SceneSpec((FlameSpec.uniform(4),))
    assert not np.array_equal(to_vector(init_random(1, spec)), to_vector(init_random(2, spec)))


def test_init_random_defaults():
    scene = init_random(0, SceneSpec((FlameSpec.uniform(5, "heart"),)))
    fl = scene.flames[0]
    assert fl.beta == pytest.approx(2.0, abs=1e-15)
    assert fl.final_transform == AffineMap()
    assert all(g.variation is Variation.HEART for g in fl.generators)
    assert np.all((fl.color_array() >= 0) & (fl.color_array() <= 1))
    assert scene.background == (1.0, 1.0, 1.0) and not scene.background_learnable


def test_init_random_learnable_background():
    scene = init_random(3, SceneSpec((FlameSpec.uniform(2),), background=None))
    assert scene.background_learnable
    assert all(0 <= c <= 1 for c in scene.background)


def test_effective_beta_values():
    flame = make_flame([(1, 0, 0, 0, 1, 0)] * 2, beta_raw=0.0)
    assert effective_beta(flame) == pytest.approx(1 + math.log(2), abs=1e-15)
    low = make_flame([(1, 0, 0, 0, 1, 0)] * 2, beta_raw=-100.0)
    assert effective_beta(low) - 1 > 0
    assert softplus(-100.0) > 0
    assert 1 + softplus(800.0) == pytest.approx(801.0)
    assert 1 + softplus(BETA_RAW_FOR_TWO) == pytest.approx(2.0, abs=1e-15)


def test_effective_beta_over_a_million_values():
    raw = np.random.default_rng(0).normal(0, 100, 10**6)
    template = make_flame([(1, 0, 0, 0, 1, 0)] * 2)
    betas = np.array([effective_beta(replace(template, beta_raw=float(t))) for t in raw])
    assert np.all(betas > 1)
    mid = np.abs(raw) < 20
    assert np.allclose(betas[mid], 1 + np.logaddexp(0.0, raw[mid]), rtol=1e-14, atol=0)


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_effective_beta_exceeds_one(t):
    assert effective_beta(make_flame([(1, 0, 0, 0, 1, 0)] * 2, beta_raw=t)) > 1


def test_beta_derivative_is_sigmoid():
    for t in (-5.0, 0.0, 3.0):
        h = 1e-6
        num = (softplus(t + h) - softplus(t - h)) / (2 * h)
        assert beta_derivative(t) == pytest.approx(num, rel=1e-8)
    assert beta_derivative(-40.0) == 0.0


def test_project_constraints_examples():
    flame = make_flame([(1, 0, 0, 0, 1, 0)] * 2, colors=((1.3, 0.5, -0.2, 1.0), (0.0, 1.0, 0.25, 2.0)))
    scene = project_constraints(scene_of(flame, background=(-0.1, 0.5, 2.0)))
    assert scene.flames[0].colors == ((1.0, 0.5, 0.0, 1.0), (0.0, 1.0, 0.25, 1.0))
    assert scene.background == (0.0, 0.5, 1.0)


@given(st.lists(st.floats(-5, 5), min_size=8, max_size=8), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_project_constraints_idempotent(cols, bg):
    colors = (tuple(cols[:4]), tuple(cols[4:]))
    scene = scene_of(make_flame([(1, 0, 0, 0, 1, 0)] * 2, colors=colors), background=tuple(bg))
    once = project_constraints(scene)
    assert project_constraints(once) == once
    assert np.all((to_vector(once)[-3:] >= 0) & (to_vector(once)[-3:] <= 1))


def test_vector_layout():
    scene = random_scene(0, n=3, flames=2)
    vec = to_vector(scene)
    paths = param_paths(scene)
    groups = param_groups(scene)
    per_flame = 6 * 3 + 1 + 6 + 4 * 3
    assert vec.size == len(paths) == len(groups) == 2 * per_flame + 3
    assert paths[0] == "flames[0].generators[0].affine.a"
    assert paths[18] == "flames[0].beta_raw"
    assert paths[per_flame + 19] == "flames[1].final_transform.a"
    assert paths[-1] == "background.b"
    assert groups[18] == "beta_raw" and groups[-1] == "background"
    assert from_vector(scene, vec) == scene
    with pytest.raises(ValueError):
        from_vector(scene, vec[:-1])


def test_gradient_set_layout_matches_params():
    scene = random_scene(1, n=4, flames=2)
    g = GradientSet.zeros_like(scene)
    g.flames[1].beta_raw = 1.0
    vec = g.to_vector()
    assert vec.size == to_vector(scene).size
    assert param_paths(scene)[int(np.argmax(vec))] == "flames[1].beta_raw"
    assert g.is_finite()
    g.background[0] = np.nan
    assert not g.is_finite()


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.lists(finite, min_size=30, max_size=30), st.booleans())
def test_serialize_round_trip_exact(seed, noise, learnable):
    scene = random_scene(seed % 1000, n=2, learnable=learnable)
    vec = to_vector(scene)
    vec[: len(noise)] = noise
    scene = from_vector(scene, vec)
    back = deserialize(serialize(scene))
    assert back == scene
    assert np.array_equal(to_vector(back), to_vector(scene))


def test_serialize_round_trip_all_variations():
    spec = SceneSpec((FlameSpec(tuple(Variation)),), background=None)
    scene = init_random(11, spec)
    assert deserialize(serialize(scene)) == scene


def _doc(scene):
    import json
    return json.loads(serialize(scene))


def test_deserialize_rejects_single_generator():
    import json
    doc = _doc(random_scene(0, n=2))
    del doc["flames"][0]["generators"][1]
    del doc["flames"][0]["colors"][1]
    with pytest.raises(SchemaError, match="at least 2 generators"):
        deserialize(json.dumps(doc))


def test_deserialize_names_unknown_variation():
    import json
    doc = _doc(random_scene(0, n=2))
    doc["flames"][0]["generators"][1]["variation"] = "swirl"
    with pytest.raises(SchemaError) as err:
        deserialize(json.dumps(doc))
    assert "swirl" in str(err.value)
    assert err.value.where == "flames[0].generators[1].variation"


@pytest.mark.parametrize("mutate, where", [
    (lambda d: d.update(schema="flamegrad-v0"), "schema"),
    (lambda d: d["flames"][0]["generators"][0]["affine"].pop(), "flames[0].generators[0].affine"),
    (lambda d: d["flames"][0].update(beta_raw="big"), "flames[0].beta_raw"),
    (lambda d: d["flames"][0]["colors"].pop(), "flames[0].colors"),
    (lambda d: d.update(background=[1, 1]), "background"),
    (lambda d: d.pop("flames"), "flames"),
])
def test_deserialize_reports_field_path(mutate, where):
    import json
    doc = _doc(random_scene(0, n=2))
    mutate(doc)
    with pytest.raises(SchemaError) as err:
        deserialize(json.dumps(doc))
    assert err.value.where == where


def test_deserialize_reports_json_position():
    with pytest.raises(SchemaError, match="line 2"):
        deserialize('{\n  "schema": }')


def test_serialized_numbers_are_decimal_doubles():
    text = serialize(random_scene(5, n=2))
    assert '"schema": "flamegrad-v1"' in text
    assert "NaN" not in text and "Infinity" not in text


def test_scene_requires_a_flame():
    with pytest.raises(ValueError):
        SceneParams((), (1, 1, 1))
