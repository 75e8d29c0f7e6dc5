import itertools

import numpy as np
import pytest

from lp_solver import IterationLimit, LinearProgram, TwoPhaseSimplex, dump_program, equilibrate, export_mps, import_mps, solve
from polynomial import LinearForm


def form(constant=0.0, **terms):
    return LinearForm(terms, constant)


@pytest.fixture
def production():
    # max x + y on x + 2y <= 4, 3x + y <= 6: optimum at (1.6, 1.2)
    lp = LinearProgram("production")
    lp.add_variable("x")
    lp.add_variable("y")
    lp.add_constraint(form(-4.0, x=1.0, y=2.0), "<=", "labour")
    lp.add_constraint(form(-6.0, x=3.0, y=1.0), "<=", "material")
    lp.set_objective(form(x=-1.0, y=-1.0))
    return lp


def test_optimum_and_duality(production):
    result = solve(production)
    assert result.feasible
    assert result.assignment["x"] == pytest.approx(1.6)
    assert result.assignment["y"] == pytest.approx(1.2)
    assert result.objective_value == pytest.approx(-2.8)
    assert result.dual_objective == pytest.approx(result.objective_value)
    assert production.max_violation(result.assignment) < 1e-9


def test_matches_highs_on_random_programs():
    rng = np.random.default_rng(7)
    for trial in range(20):
        lp = LinearProgram(f"random{trial}")
        names = [lp.add_variable(f"x{j}") for j in range(4)]
        for i in range(5):
            row = rng.uniform(0.1, 2.0, size=4)
            lp.add_constraint(LinearForm(dict(zip(names, row)), -rng.uniform(1.0, 5.0)), "<=", f"r{i}")
        lp.add_constraint(LinearForm({names[0]: 1.0, names[1]: 1.0}, -0.2), ">=", "floor")
        lp.set_objective(LinearForm(dict(zip(names, rng.uniform(-1.0, 1.0, size=4)))))
        ours = solve(lp)
        reference = solve(lp, backend="highs")
        assert ours.status == reference.status
        if ours.feasible:
            assert ours.objective_value == pytest.approx(reference.objective_value, abs=1e-7)
            assert lp.max_violation(ours.assignment) < 1e-7


def test_infeasible_program_has_farkas_certificate():
    lp = LinearProgram("conflict")
    lp.add_variable("x")
    lp.add_variable("y")
    lp.add_constraint(form(-1.0, x=1.0, y=1.0), "<=")
    lp.add_constraint(form(-2.0, x=1.0, y=1.0), ">=")
    result = solve(lp)
    assert result.status == "infeasible"
    assert lp.verify_farkas(result.certificate)
    assert not lp.verify_farkas([0.0, 0.0])


def test_unbounded():
    lp = LinearProgram("open")
    lp.add_variable("x")
    lp.add_variable("y")
    lp.add_constraint(form(-1.0, x=1.0, y=-1.0), "<=")
    lp.set_objective(form(x=-1.0))
    assert solve(lp).status == "unbounded"


def test_free_variables_and_equalities():
    lp = LinearProgram("free")
    lp.add_variable("x", free=True)
    lp.add_variable("y")
    lp.add_constraint(form(3.0, x=1.0), ">=")
    lp.add_constraint(form(-1.0, x=1.0, y=1.0), "==")
    lp.set_objective(form(x=1.0))
    result = solve(lp)
    assert result.assignment["x"] == pytest.approx(-3.0)
    assert result.assignment["y"] == pytest.approx(4.0)


def test_iteration_limit(production):
    with pytest.raises(IterationLimit):
        solve(production, max_iters=0)


def test_rejects_malformed_rows():
    lp = LinearProgram()
    lp.add_variable("x")
    with pytest.raises(ValueError):
        lp.add_constraint(form(z=1.0), "<=")
    with pytest.raises(ValueError):
        lp.add_constraint(form(x=float("nan")), "<=")
    with pytest.raises(ValueError):
        lp.add_constraint(form(x=1.0), "<")
    with pytest.raises(ValueError):
        solve(lp, backend="cplex")


def test_mps_round_trip(production, tmp_path):
    production.add_variable("G.0.1", free=True)
    production.add_constraint(form(0.5, **{"G.0.1": 1.0, "x": -1.0}), "==", "tie")
    production.set_objective(form(2.0, x=-1.0, y=-1.0))
    path = export_mps(production, str(tmp_path / "production.mps"))
    loaded = import_mps(path)
    assert loaded.name == "production"
    assert loaded.variables == production.variables
    assert loaded.free == {"G.0.1"}
    assert [name for name, _, _ in loaded.constraints] == ["labour", "material", "tie"]
    for (_, ours, sense), (_, theirs, loaded_sense) in zip(production.constraints, loaded.constraints):
        assert sense == loaded_sense
        assert ours.terms == theirs.terms
        assert ours.constant == theirs.constant
    assert solve(loaded).objective_value == pytest.approx(solve(production).objective_value)


def test_dump_program(production, tmp_path):
    path = dump_program(production, str(tmp_path / "production.txt"))
    text = open(path, encoding="utf-8").read()
    assert "labour: +1 x +2 y -4 <= 0" in text
    assert "var x >= 0" in text


def random_program(rng, name):
    # nonnegative variables under a box, so the feasible set is bounded
    n = int(rng.integers(2, 7))
    lp = LinearProgram(name)
    names = [lp.add_variable(f"x{j}") for j in range(n)]
    for j, upper in enumerate(rng.uniform(0.5, 3.0, size=n)):
        lp.add_constraint(LinearForm({names[j]: 1.0}, -upper), "<=", f"box{j}")
    for i in range(int(rng.integers(1, 11 - n))):
        row = rng.uniform(-2.0, 2.0, size=n)
        sense = "<=" if rng.random() < 0.7 else ">="
        lp.add_constraint(LinearForm(dict(zip(names, row)), -rng.uniform(-1.0, 3.0)), sense, f"r{i}")
    lp.set_objective(LinearForm(dict(zip(names, rng.uniform(-1.0, 1.0, size=n)))))
    return lp


def vertex_optimum(lp):
    rows = lp.canonical_rows()
    n = len(lp.variables)
    G = np.vstack([row for row, _, _ in rows] + [-np.eye(n)])
    h = np.array([b for _, b, _ in rows] + [0.0] * n)
    c = np.array([lp.objective.terms.get(name, 0.0) for name in lp.variables])
    active = np.array(list(itertools.combinations(range(len(h)), n)))
    A, rhs = G[active], h[active]
    regular = np.abs(np.linalg.det(A)) > 1e-9
    vertices = np.linalg.solve(A[regular], rhs[regular][..., None])[..., 0]
    inside = np.all(vertices @ G.T <= h + 1e-9, axis=1)
    if not inside.any():
        return None
    return float(np.min(vertices[inside] @ c))


def check_farkas(lp, certificate):
    rows = lp.canonical_rows()
    y = np.array(certificate)
    A = np.vstack([row for row, _, _ in rows])
    b = np.array([rhs for _, rhs, _ in rows])
    inequality = np.array([not is_equality for _, _, is_equality in rows])
    assert np.all(y[inequality] >= -1e-7)
    assert np.all(y @ A >= -1e-7)
    assert y @ b < -1e-7


def test_random_programs_match_vertex_enumeration():
    rng = np.random.default_rng(2024)
    infeasible = 0
    for trial in range(200):
        lp = random_program(rng, f"random{trial}")
        expected = vertex_optimum(lp)
        result = solve(lp)
        if expected is None:
            infeasible += 1
            assert result.status == "infeasible"
            assert lp.verify_farkas(result.certificate)
            check_farkas(lp, result.certificate)
        else:
            assert result.feasible
            assert result.objective_value == pytest.approx(expected, abs=1e-6)
            assert result.dual_objective == pytest.approx(result.objective_value, abs=1e-6)
            assert lp.max_violation(result.assignment) < 1e-7
    assert infeasible < 200


def test_infeasible_random_programs_carry_farkas_vectors():
    rng = np.random.default_rng(11)
    for trial in range(50):
        lp = random_program(rng, f"conflict{trial}")
        names = list(lp.variables)
        weights = rng.uniform(0.1, 1.0, size=len(names))
        upper = sum(weights * [lp.canonical_rows()[j][1] for j in range(len(names))])
        # weighted sum of the boxed variables pushed above its largest value
        lp.add_constraint(LinearForm(dict(zip(names, weights)), -(upper + rng.uniform(0.1, 1.0))), ">=", "beyond")
        result = solve(lp)
        assert result.status == "infeasible"
        assert lp.verify_farkas(result.certificate)
        check_farkas(lp, result.certificate)
        assert max(abs(v) for v in result.certificate) == pytest.approx(1.0)


def test_scaling_does_not_change_the_optimum():
    rng = np.random.default_rng(5)
    checked = 0
    for trial in range(40):
        lp = random_program(rng, f"base{trial}")
        base = solve(lp)
        if not base.feasible:
            continue
        scale = 10.0 ** rng.uniform(-2.0, 2.0, size=len(lp.variables))
        scaled = LinearProgram(f"scaled{trial}")
        for name in lp.variables:
            scaled.add_variable(name)
        # x = s * x', every row multiplied by 1e3
        for row_name, expression, sense in lp.constraints:
            terms = {name: 1e3 * value * scale[lp.index_of(name)] for name, value in expression.terms.items()}
            scaled.add_constraint(LinearForm(terms, 1e3 * expression.constant), sense, row_name)
        scaled.set_objective(LinearForm({name: value * scale[lp.index_of(name)] for name, value in lp.objective.terms.items()}))
        result = solve(scaled)
        assert result.feasible
        assert result.objective_value == pytest.approx(base.objective_value, abs=1e-6)
        mapped = {name: result.assignment[name] * scale[lp.index_of(name)] for name in lp.variables}
        assert lp.max_violation(mapped) < 1e-6
        checked += 1
    assert checked > 10


def beale():
    # cycles under textbook largest-coefficient pricing without anti-cycling
    lp = LinearProgram("beale")
    for name in ("x4", "x5", "x6", "x7"):
        lp.add_variable(name)
    lp.add_constraint(form(x4=0.25, x5=-8.0, x6=-1.0, x7=9.0), "<=", "first")
    lp.add_constraint(form(x4=0.5, x5=-12.0, x6=-0.5, x7=3.0), "<=", "second")
    lp.add_constraint(form(-1.0, x6=1.0), "<=", "third")
    lp.set_objective(form(x4=-0.75, x5=20.0, x6=-0.5, x7=6.0))
    return lp


@pytest.mark.parametrize("scale", [False, True])
def test_degenerate_program_does_not_cycle(scale):
    lp = beale()
    result = TwoPhaseSimplex(degenerate_limit=5, scale=scale).solve(lp)
    assert result.feasible
    assert result.objective_value == pytest.approx(-1.25)
    assert result.assignment["x4"] == pytest.approx(1.0)
    assert result.assignment["x6"] == pytest.approx(1.0)
    assert solve(lp, max_iters=1000).objective_value == pytest.approx(-1.25)


def test_refactoring_every_pivot_agrees():
    rng = np.random.default_rng(9)
    for trial in range(30):
        lp = random_program(rng, f"refactor{trial}")
        default = solve(lp)
        rebuilt = TwoPhaseSimplex(refactor_every=1).solve(lp)
        assert rebuilt.status == default.status
        if default.feasible:
            assert rebuilt.objective_value == pytest.approx(default.objective_value, abs=1e-7)


def test_equilibrate_balances_magnitudes():
    A = np.array([[1e4, 2e4], [1e-3, 3e-3], [0.0, 0.0]])
    rows, cols = equilibrate(A)
    assert rows[2] == 1.0
    for factor in np.concatenate([rows, cols]):
        assert np.log2(factor) == pytest.approx(round(np.log2(factor)))
    scaled = np.abs(A[:2] * rows[:2, None] * cols[None, :])
    assert scaled.max() / scaled.min() < 16.0
