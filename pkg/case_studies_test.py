import numpy as np
import pytest
import yaml

from case_studies import (
    AdSchedulingSpec,
    LatticeTeachingSpec,
    ad_observation_table,
    ad_policy,
    build_ad_pomdp,
    build_builtin,
    build_lattice_pomdp,
    teaching_unsafe_states,
    version_space,
)
from pomdp_model import Belief, belief_update, reach_enumerate


def pytest_generate_tests(metafunc):
    # One test per built-in model listed in config.yaml
    if "model" in metafunc.fixturenames:
        with open("config.yaml", "r", encoding="utf-8") as f:
            config = yaml.safe_load(f) or {}
        models = config.get("models", [])
        if not models:
            pytest.skip("No models listed in config.yaml (key 'models').")
        metafunc.parametrize("model", models, ids=[m["name"] for m in models])


def test_builtin_dimensions(model):
    pomdp = build_builtin(model["name"])
    assert pomdp.n_states == model["states"]
    assert len(pomdp.actions) == model["actions"]
    assert len(pomdp.observations) == model["observations"]
    assert np.allclose(pomdp.transition.sum(axis=1), 1.0)
    assert np.allclose(pomdp.observation.sum(axis=2), 1.0)


def test_ad_observation_table():
    table = ad_observation_table((2.0, 4.0, 6.0), (3, 6))
    assert table[0][0] == pytest.approx(0.8571, abs=1e-4)
    assert table[1][1] == pytest.approx(0.4559, abs=1e-4)
    assert table[2][2] == pytest.approx(0.3937, abs=1e-4)
    assert table[1][2] == pytest.approx(0.1107, abs=1e-4)


def test_ad_variants():
    assert build_builtin("ad-first").initial_belief == Belief.point_mass(3, 0)
    assert build_ad_pomdp().initial_belief == Belief.uniform(3)
    with pytest.raises(ValueError):
        AdSchedulingSpec(rates=(2.0, -1.0, 6.0))
    with pytest.raises(ValueError):
        AdSchedulingSpec(thresholds=(6, 3))
    with pytest.raises(ValueError):
        build_builtin("tiger")


def test_ad_policy_regions():
    ad = build_ad_pomdp()
    policy = ad_policy(ad, threshold=0.5)
    assert policy.region_index(Belief([0.2, 0.2, 0.6])) == 0
    assert policy.region_index(Belief([0.5, 0.3, 0.2])) == 1


def test_lattice_learner_moves_to_nearest_consistent():
    spec = LatticeTeachingSpec()
    pomdp = build_lattice_pomdp(spec)
    start = Belief.point_mass(16, spec.cells().index((1, 1)))
    posterior = belief_update(pomdp, start, "x_1_1", "y_pos")
    # (1, 2) and (2, 1) are both one step away and both consistent
    moved = {pomdp.states[i]: p for i, p in enumerate(posterior.probs) if p > 0}
    assert moved == pytest.approx({"h_1_2": 0.5, "h_2_1": 0.5})
    assert belief_update(pomdp, start, "x_3_3", "y_pos") == start


def test_lattice_version_space_and_unsafe_states():
    spec = LatticeTeachingSpec()
    assert len(version_space(spec, [(1, 1), (2, 2)])) == 14
    unsafe = teaching_unsafe_states(spec)
    assert len(unsafe) == 15 and "h_3_3" not in unsafe
    with pytest.raises(ValueError):
        LatticeTeachingSpec(initial=(5, 1))
    with pytest.raises(ValueError):
        LatticeTeachingSpec(initial=(3, 3), target=(3, 3))


def test_lattice_reachable_beliefs_stay_on_the_lattice():
    pomdp = build_lattice_pomdp()
    reached = reach_enumerate(pomdp, horizon=2)
    assert reached.shape[1] == 16
    assert np.allclose(reached.sum(axis=1), 1.0)
