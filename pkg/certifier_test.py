import copy
import logging
import os

import numpy as np
import pytest
from dotenv import load_dotenv

from case_studies import ad_policy, build_ad_pomdp
from certificate import InitialSet, UnsafeSet
from certifier import (
    ModelContext,
    NotFound,
    OverlapError,
    ReachProgram,
    TubeViolation,
    ValidationFailure,
    build_programs,
    certify_with_escalation,
    load_config,
    reach_per_action,
    reach_policy,
    reach_single,
    set_grid,
    validate_certificate,
    verify_optimality,
    verify_safety,
)
from polynomial import Polynomial, parse_polynomial
from pomdp_model import Belief, PolicyPartition, Pomdp, belief_update, reach_sample, sample_trajectories

XY = ("b1", "b2")


@pytest.fixture(scope="session")
def config():
    settings = load_config()
    settings["time_degree"] = 1
    settings["sampling"].update({"validation_points": 300, "trajectories": 20, "horizon": 5})
    return settings


@pytest.fixture(scope="session")
def static():
    # beliefs never move: identity dynamics and a single uninformative observation
    return Pomdp(
        ["ok", "fail"], ["left", "right"], ["beep"],
        [np.eye(2), np.eye(2)], [[[1.0], [1.0]], [[1.0], [1.0]]],
        Belief([0.9, 0.1]), rewards=np.ones((2, 2)), name="static",
    )


@pytest.fixture(scope="session")
def static_policy(static):
    return PolicyPartition([(parse_polynomial("b1 - 0.95", XY), "left")], "right")


@pytest.fixture(scope="session")
def single_state():
    return Pomdp(["s"], ["a"], ["z"], [[[1.0]]], [[[1.0]]], name="single")


def test_load_config_merges_over_defaults(tmp_path, monkeypatch):
    path = tmp_path / "override.yaml"
    path.write_text("reach:\n  cap: 4.0\n", encoding="utf-8")
    monkeypatch.setenv("POMDP_VERIFY_CONFIG", str(path))
    settings = load_config()
    assert settings["reach"]["cap"] == 4.0
    assert settings["reach"]["condition"] == "invariance"
    assert settings["alternation"]["max_iterations"] == 20
    assert load_config(str(tmp_path / "absent.yaml"))["solver"]["backend"] == "simplex"


def test_reach_static_model(static, config):
    cert = reach_single(static, degree=1, config=config)
    assert cert.mode == "single"
    assert cert.functions[0].level == pytest.approx(1.0, abs=1e-6)
    assert cert.contains(static.initial_belief)
    kinds = {c.kind for c in cert.conditions}
    assert {"nonneg", "level", "invariance", "multiplier_nonneg"} <= kinds
    evidence = validate_certificate(cert, static, config)
    assert evidence["passed"] and evidence["trajectories"] == 20
    assert cert.validated is evidence
    grid = set_grid(cert, resolution=10)
    assert len(grid) == 11
    assert all(inside for _, _, _, inside in grid)


def test_reach_per_action_and_policy(static, static_policy, config):
    per_action = reach_per_action(static, degree=1, config=config)
    assert [f.scope for f in per_action.functions] == ["action:left", "action:right"]
    validate_certificate(per_action, static, config)
    closed_loop = reach_policy(static, static_policy, degree=1, config=config)
    assert closed_loop.mode == "per_partition"
    assert len(closed_loop.functions) == 2
    validate_certificate(closed_loop, static, config)


def test_tampered_certificate_is_rejected(static, config):
    cert = reach_single(static, degree=1, config=config)
    gram = copy.deepcopy(cert)
    gram.conditions[0].witness.grams[0][0, 0] += 0.1
    with pytest.raises(ValidationFailure):
        validate_certificate(gram, static, config)
    shifted = copy.deepcopy(cert)
    shifted.functions[0].polynomial = shifted.functions[0].polynomial + 0.5
    with pytest.raises(ValidationFailure):
        validate_certificate(shifted, static, config)
    with pytest.raises(ValidationFailure):
        validate_certificate(cert, build_ad_pomdp(), config)


def test_decrease_on_a_fixed_point_is_inconclusive(single_state, config):
    decrease = copy.deepcopy(config)
    decrease["reach"]["condition"] = "decrease"
    with pytest.raises(NotFound) as caught:
        certify_with_escalation(reach_single, degrees=[1, 2], config=decrease, pomdp=single_state)
    assert caught.value.degree == 2


def test_invariance_on_a_fixed_point(single_state, config):
    cert = reach_single(single_state, degree=1, config=config)
    assert cert.functions[0].level == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("mode", ["monolithic", "per_action_hull", "per_partition"])
class TestStaticSafety:

    def test_barrier_found_and_validated(self, static, static_policy, config, mode):
        unsafe = UnsafeSet.safety(["fail"], 0.5)
        cert = verify_safety(static, unsafe, horizon=2, degree=1, mode=mode, policy=static_policy, config=config)
        expected = 1 if mode == "monolithic" else 2
        assert len(cert.functions) == expected
        assert "terminal" in {c.kind for c in cert.conditions}
        assert cert.value(0, 0.0, static.initial_belief) < 0.0
        evidence = validate_certificate(cert, static, config)
        assert evidence["max_identity_residual"] <= config["tolerances"]["identity"]


def test_vacuous_safety_on_ad(config):
    ad = build_ad_pomdp()
    cert = verify_safety(ad, UnsafeSet.safety(["q3"], 1.0), horizon=1, degree=1, config=config)
    kinds = [c.kind for c in cert.conditions]
    assert "vacuous_safety" in kinds and "terminal" not in kinds
    validate_certificate(cert, ad, config)


def test_optimality_with_constant_reward(static, config):
    cert = verify_optimality(static, horizon=2, bound=3.0, degree=1, config=config)
    kinds = [c.kind for c in cert.conditions]
    assert kinds.count("vacuous_reward") == 2
    assert "unsafe_time" not in kinds
    assert float(cert.unsafe.tube_polynomial(2).evaluate((0.0,))) == pytest.approx(1.0)
    validate_certificate(cert, static, config)


def test_tube_and_reward_errors(static, config):
    with pytest.raises(TubeViolation):
        verify_optimality(static, horizon=2, bound=2.0, tube=parse_polynomial("1", ("t",)), config=config)
    with pytest.raises(ValueError):
        verify_optimality(build_ad_pomdp(), horizon=2, bound=2.0, config=config)


def test_overlap(static, config):
    with pytest.raises(OverlapError):
        verify_safety(static, UnsafeSet.safety(["fail"], 0.05), horizon=1, config=config)
    with pytest.raises(OverlapError):
        verify_safety(static, UnsafeSet.safety(["fail"], 0.5), horizon=1, initial=InitialSet.box([0.0, 0.0], [1.0, 1.0]), config=config)


def test_argument_errors(static, config):
    unsafe = UnsafeSet.safety(["fail"], 0.5)
    with pytest.raises(ValueError):
        verify_safety(static, unsafe, horizon=0, config=config)
    with pytest.raises(ValueError):
        verify_safety(static, unsafe, horizon=1, mode="sideways", config=config)
    with pytest.raises(ValueError):
        verify_safety(static, unsafe, horizon=1, mode="per_partition", config=config)
    with pytest.raises(ValueError):
        reach_single(static, degree=0, config=config)
    with pytest.raises(ValueError):
        set_grid(reach_single(static, config=config), resolution=0)


def test_build_programs(static, static_policy, config):
    [reach] = build_programs("reach", static, config=config)
    assert "V0.c0" in reach.variables and "gamma" not in reach.variables
    assert [name for name, _, _ in reach.constraints if name == "level"] == ["level"]
    assert len(build_programs("reach", static, mode="per_action", config=config)) == 2
    [barrier] = build_programs("barrier", static, mode="per_partition", policy=static_policy, unsafe=UnsafeSet.safety(["fail"], 0.5), horizon=2, config=config)
    assert barrier.name == "barrier.policy"
    assert any(name == "initial_point" for name, _, _ in barrier.constraints)
    with pytest.raises(ValueError):
        build_programs("lyapunov", static, config=config)


def test_ad_reach_sets():
    load_dotenv()
    if os.getenv("POMDP_VERIFY_SLOW", "").lower() != "true":
        pytest.skip("Set POMDP_VERIFY_SLOW=true to run the ad-scheduling reach sets.")
    settings = load_config()
    ad = build_ad_pomdp()
    cert = reach_single(ad, degree=2, config=settings)
    assert cert.contains(ad.initial_belief)
    validate_certificate(cert, ad, settings)
    closed_loop = reach_policy(ad, ad_policy(ad), degree=2, config=settings)
    validate_certificate(closed_loop, ad, settings)
    per_action = {degree: reach_per_action(ad, degree=degree, config=settings) for degree in (1, 3)}
    value, level = per_action[3].membership(Belief([0.0, 0.0, 1.0]))
    assert value > level + 1e-4
    cloud = reach_sample(ad, horizon=100, n_trajectories=100, rng_seed=0, policy=ad_policy(ad))
    for cert in per_action.values():
        validate_certificate(cert, ad, settings)
        for probs in cloud:
            value, level = cert.membership(Belief(probs))
            assert value <= level + 1e-8


def absorbing_safe_pomdp(rng, n_states, name):
    # q0 is absorbing, the last state is unsafe and only leaks back to the safe states
    safe = n_states - 1
    transition, observation = [], []
    for _ in range(2):
        T = np.zeros((n_states, n_states))
        T[0, 0] = 1.0
        for j in range(1, safe):
            T[:safe, j] = rng.dirichlet(np.ones(safe))
        stay = rng.uniform(0.2, 0.9)
        T[:safe, safe] = (1.0 - stay) * rng.dirichlet(np.ones(safe))
        T[safe, safe] = stay
        transition.append(T)
        observation.append(np.tile(rng.dirichlet(np.ones(2)), (n_states, 1)))
    unsafe_mass = rng.uniform(0.0, 0.3)
    b0 = np.append((1.0 - unsafe_mass) * rng.dirichlet(np.ones(safe)), unsafe_mass)
    states = [f"q{i}" for i in range(n_states)]
    return Pomdp(states, ["a0", "a1"], ["z0", "z1"], transition, observation, Belief(b0), name=name)


def test_absorbing_safe_family_is_certified_and_never_violated(config):
    rng = np.random.default_rng(17)
    for k in range(20):
        pomdp = absorbing_safe_pomdp(rng, int(rng.integers(2, 5)), f"absorbing{k}")
        unsafe_state = pomdp.states[-1]
        cert = verify_safety(pomdp, UnsafeSet.safety([unsafe_state], 0.5), horizon=3, degree=1, config=config)
        evidence = validate_certificate(cert, pomdp, config, n_trajectories=200)
        assert evidence["passed"]
        for trajectory in sample_trajectories(pomdp, 3, 10_000, rng_seed=k):
            assert max(b.probs[-1] for b in trajectory.beliefs) < 0.5


def test_per_action_hull_combinations_are_barriers(config):
    pomdp = absorbing_safe_pomdp(np.random.default_rng(3), 3, "hull")
    horizon, threshold = 3, 0.5
    cert = verify_safety(pomdp, UnsafeSet.safety(["q2"], threshold), horizon=horizon, degree=1, mode="per_action_hull", config=config)
    assert len(cert.functions) == 2
    rng = np.random.default_rng(4)
    points = [Belief(p) for p in rng.dirichlet(np.ones(3), size=200)]
    for weights in rng.dirichlet(np.ones(2), size=100):
        def combined(t, b):
            return sum(w * cert.value(k, t, b) for k, w in enumerate(weights))
        assert combined(0, pomdp.initial_belief) < 0.0
        for b in points:
            for a in pomdp.actions:
                for z in pomdp.observations:
                    after = belief_update(pomdp, b, a, z)
                    for t in range(1, horizon + 1):
                        assert combined(t, after) <= combined(t - 1, b) + 1e-7
            if b.probs[-1] >= threshold:
                assert combined(horizon, b) > -1e-7


def test_higher_degree_keeps_certificates(static, config):
    pomdp = absorbing_safe_pomdp(np.random.default_rng(8), 3, "degrees")
    unsafe = UnsafeSet.safety(["q2"], 0.5)
    for degree in (1, 2):
        validate_certificate(verify_safety(pomdp, unsafe, horizon=2, degree=degree, config=config), pomdp, config)
        reach = reach_single(static, degree=degree, config=config)
        assert reach.contains(static.initial_belief)
        validate_certificate(reach, static, config)


def test_constant_reward_on_ad_with_simplex(config):
    ad = build_ad_pomdp()
    rewarded = Pomdp(ad.states, ad.actions, ad.observations, ad.transition, ad.observation, ad.initial_belief, np.ones((3, 2)), ad.name)
    assert config["solver"]["backend"] == "simplex"
    cert = verify_optimality(rewarded, horizon=3, bound=4.0, degree=1, config=config)
    assert [c.kind for c in cert.conditions].count("vacuous_reward") == 2
    validate_certificate(cert, rewarded, config)
    for trajectory in sample_trajectories(rewarded, 3, 2000, rng_seed=5):
        total = sum(float(b.probs @ rewarded.rewards[:, ad.action_index(a)]) for b, a in zip(trajectory.beliefs, trajectory.actions))
        total += max(float(trajectory.beliefs[-1].probs @ rewarded.rewards[:, i]) for i in range(len(ad.actions)))
        assert total <= 4.0 + 1e-9


def test_seed_multiplier_uses_coordinate_powers(config, caplog):
    ad = build_ad_pomdp()
    program = ReachProgram("seed", ModelContext(ad), [0], {0: list(ad.actions)}, {0: None}, 0, ad.initial_belief, 3, config)
    with caplog.at_level(logging.INFO):
        seed = program.seed_multiplier()
    assert "seeding with a constant" not in caplog.text
    scale = config["alternation"]["multiplier_seed_scale"]
    assert seed.degree_in(XY) == 3
    assert seed.coefficient((3, 0)) == pytest.approx(scale)
    assert seed.coefficient((0, 3)) == pytest.approx(scale)
    assert seed.coefficient((0, 0)) == 0
