import numpy as np
import pytest

from case_studies import ad_policy, build_ad_pomdp
from certificate import (
    BarrierCertificate,
    CertificateFunction,
    Condition,
    InitialSet,
    ReachCertificate,
    UnsafeSet,
    load_certificate,
    save_certificate,
)
from polynomial import parse_polynomial
from pomdp_model import Belief
from psatz_compiler import PsatzWitness

XY = ("b1", "b2")
XYT = ("b1", "b2", "t")


@pytest.fixture(scope="session")
def ad():
    return build_ad_pomdp()


@pytest.fixture
def reach_cert():
    V = parse_polynomial("b1^2 + b2", XY)
    witness = PsatzWitness("nonneg.V0", XY, [[(0, 0), (1, 0)]], [np.array([[1.0, 0.5], [0.5, 1.0]])], [], 0.0)
    condition = Condition("nonneg.V0", "nonneg", {"function": 0, "degree": 2}, 0.0, witness)
    return ReachCertificate("single", [CertificateFunction(V, 0.5)], 2, "invariance", Belief.uniform(3), [condition], "ad")


def test_initial_set_box(ad):
    box = InitialSet.box([0.5, 0.0, 0.0], [1.0, 0.5, 0.5])
    assert box.contains(Belief([0.6, 0.2, 0.2]))
    assert not box.contains(Belief([0.2, 0.4, 0.4]))
    value, argmax = box.maximize([0.0, 0.0, 1.0], 3)
    assert value == pytest.approx(0.5)
    assert box.contains(argmax)
    assert all(box.contains(b) for b in box.sample(3, 500, seed=1))
    eliminated = box.eliminated_generators(3)
    assert eliminated[-1].variables == XY
    assert float(eliminated[-1].evaluate((0.3, 0.3))) == pytest.approx(0.1)


def test_initial_set_rejects_bad_input():
    with pytest.raises(ValueError):
        InitialSet()
    with pytest.raises(ValueError):
        InitialSet(generators=[parse_polynomial("b1^2", ("b1", "b2"))])
    with pytest.raises(ValueError):
        InitialSet.box([0.6, 0.0], [0.4, 1.0])


def test_singleton_initial_set():
    b0 = Belief.point_mass(3, 0)
    single = InitialSet.singleton(b0)
    assert single.sample(3, 10) == [b0]
    assert single.maximize([1.0, 0.0, 0.0], 3) == (1.0, b0)


def test_unsafe_set_validation():
    with pytest.raises(ValueError):
        UnsafeSet.safety([], 0.2)
    with pytest.raises(ValueError):
        UnsafeSet.safety(["q3"], 1.5)
    with pytest.raises(ValueError):
        UnsafeSet("liveness")
    with pytest.raises(ValueError):
        UnsafeSet("optimality")


def test_safety_polynomial(ad):
    unsafe = UnsafeSet.safety(["q3"], 0.2)
    poly = unsafe.safety_polynomial(ad)
    assert poly.variables == XY
    assert float(poly.evaluate((0.1, 0.2))) == pytest.approx(0.5)
    assert unsafe.indicator(ad).tolist() == [0.0, 0.0, 1.0]


def test_tube_defaults_to_even_split():
    unsafe = UnsafeSet.optimality(6.0)
    assert float(unsafe.tube_polynomial(2).evaluate((1.0,))) == pytest.approx(2.0)
    assert unsafe.tube_total(2) == pytest.approx(6.0)
    ramp = UnsafeSet.optimality(6.0, parse_polynomial("1 + 0.5*t", ("t",)))
    assert ramp.tube_total(2) == pytest.approx(4.5)


def test_reach_membership(reach_cert):
    value, level = reach_cert.membership(Belief([0.5, 0.25, 0.25]))
    assert value == pytest.approx(0.5) and level == 0.5
    assert reach_cert.contains(Belief([0.5, 0.25, 0.25]))
    assert not reach_cert.contains(Belief([0.0, 1.0, 0.0]))
    with pytest.raises(ValueError):
        ReachCertificate("single", [CertificateFunction(reach_cert.functions[0].polynomial, -1.0)], 2, "invariance", Belief.uniform(3), [], "ad")


def test_per_action_membership():
    functions = [
        CertificateFunction(parse_polynomial("b1", XY), 0.5, "action:a0"),
        CertificateFunction(parse_polynomial("b2", XY), 0.5, "action:a1"),
    ]
    cert = ReachCertificate("per_action", functions, 1, "invariance", Belief.uniform(3), [], "ad")
    assert cert.membership(Belief([0.25, 0.75, 0.0]))[0] == pytest.approx(0.25)
    assert not cert.contains(Belief([0.25, 0.75, 0.0]))
    assert cert.contains(Belief([0.25, 0.25, 0.5]))


def test_reach_save_and_load(tmp_path, reach_cert):
    path = save_certificate(reach_cert, str(tmp_path / "ad.reach.cert"))
    loaded = load_certificate(path)
    assert isinstance(loaded, ReachCertificate)
    assert loaded.functions[0].polynomial.terms == reach_cert.functions[0].polynomial.terms
    assert loaded.functions[0].level == 0.5
    condition = loaded.conditions[0]
    assert condition.kind == "nonneg" and condition.params == {"function": 0, "degree": 2}
    assert condition.witness.bases == [[(0, 0), (1, 0)]]
    assert np.array_equal(condition.witness.grams[0], reach_cert.conditions[0].witness.grams[0])


def test_barrier_save_and_load(tmp_path, ad):
    cert = BarrierCertificate(
        "per_partition",
        [CertificateFunction(parse_polynomial("t - b1", XYT), scope="region:0"), CertificateFunction(parse_polynomial("0.5*t", XYT), scope="region:1")],
        1, 2, 3,
        UnsafeSet.optimality(3.0, parse_polynomial("1 + 0.5*t", ("t",))),
        InitialSet.box([0.0, 0.0, 0.5], [0.5, 0.5, 1.0]),
        [Condition("vacuous", "vacuous_reward", {"action": "a0"})],
        "ad", 3, ad_policy(ad),
    )
    assert cert.value(0, 2.0, Belief.uniform(3)) == pytest.approx(2.0 - 1.0 / 3.0)
    assert cert.function_for(Belief.uniform(3)) == 1
    loaded = load_certificate(save_certificate(cert, str(tmp_path / "ad.barrier.cert")))
    assert isinstance(loaded, BarrierCertificate)
    assert loaded.variables == XYT
    assert loaded.horizon == 3 and loaded.time_degree == 2
    assert loaded.unsafe.kind == "optimality"
    assert loaded.unsafe.tube.terms == cert.unsafe.tube.terms
    assert len(loaded.initial.generators) == 6
    assert loaded.policy.default_action == "a1"
    assert loaded.functions[1].scope == "region:1"
    assert loaded.conditions[0].witness is None


def test_load_rejects_other_yaml(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("models: []\n", encoding="utf-8")
    with pytest.raises(ValueError):
        load_certificate(str(path))
