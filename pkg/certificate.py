import logging

import numpy as np
import yaml

from lp_solver import LinearProgram, solve
from polynomial import LinearForm, Polynomial, eliminate_coordinate, parse_polynomial, sample_simplex
from pomdp_model import Belief, PolicyPartition, Pomdp, belief_variables, full_belief_variables
from psatz_compiler import PsatzWitness

TIME = "t"


class Condition:
    def __init__(self, name: str, kind: str, params: dict | None = None, margin: float = 0.0, witness: PsatzWitness | None = None):
        """
        One certified inequality, with what is needed to rebuild it from the model.
        name: unique name
        kind: invariance | decrease | nonneg | multiplier_nonneg | level | initial_point |
              initial_set | terminal | nonincrease | unsafe_time | vacuous_safety | vacuous_reward
        params: rebuild parameters (function indices, action, observation, degree, ...)
        margin: required lower bound
        witness: Psatz multipliers (None for plain row conditions)
        """
        self.name = name
        self.kind = kind
        self.params = params or {}
        self.margin = margin
        self.witness = witness

    def to_dict(self) -> dict:
        record = {"name": self.name, "kind": self.kind, "params": self.params, "margin": float(self.margin)}
        if self.witness is not None:
            record["multipliers"] = [
                {"basis": [list(m) for m in basis], "gram": [[float(v) for v in row] for row in G]}
                for basis, G in zip(self.witness.bases, self.witness.grams)
            ]
        return record

    @classmethod
    def from_dict(cls, record: dict, variables):
        witness = None
        if "multipliers" in record:
            bases = [[tuple(m) for m in item["basis"]] for item in record["multipliers"]]
            grams = [np.array(item["gram"], dtype=float).reshape(len(b), len(b)) for item, b in zip(record["multipliers"], bases)]
            witness = PsatzWitness(record["name"], variables, bases, grams, [], record.get("margin", 0.0))
        return cls(record["name"], record["kind"], record.get("params") or {}, record.get("margin", 0.0), witness)

    def __repr__(self):
        return f"Condition({self.name}, {self.kind})"


class CertificateFunction:
    def __init__(self, polynomial: Polynomial, level: float | None = None, scope: str = "all"):
        """
        polynomial: V or B with float coefficients
        level: sublevel value gamma (reach only)
        scope: 'all', 'action:<name>' or 'region:<index>'
        """
        self.polynomial = polynomial
        self.level = level
        self.scope = scope

    def to_dict(self) -> dict:
        record = {"polynomial": self.polynomial.to_text(), "scope": self.scope}
        if self.level is not None:
            record["level"] = float(self.level)
        return record

    @classmethod
    def from_dict(cls, record: dict, variables):
        return cls(parse_polynomial(str(record["polynomial"]), variables), record.get("level"), record.get("scope", "all"))


class InitialSet:
    def __init__(self, belief: Belief | None = None, generators=()):
        """
        Initial beliefs: a single belief, or a polytope {b on the simplex : g(b) >= 0}.
        belief: singleton belief
        generators: linear polynomials over b1..bn
        """
        self.belief = belief
        self.generators = list(generators)
        if belief is None and not self.generators:
            raise ValueError("An initial set needs a belief or at least one generator")
        for g in self.generators:
            if g.degree > 1:
                raise ValueError(f"Initial-set generators must be linear, got degree {g.degree}")

    @property
    def is_singleton(self) -> bool:
        return self.belief is not None

    @classmethod
    def singleton(cls, belief: Belief):
        return cls(belief=belief)

    @classmethod
    def box(cls, lower, upper):
        """
        Box lower_i <= b_i <= upper_i intersected with the simplex.
        return: InitialSet
        """
        names = full_belief_variables(len(lower))
        generators = []
        for name, low, high in zip(names, lower, upper):
            if low > high:
                raise ValueError(f"Empty box side for {name}: {low} > {high}")
            generators.append(Polynomial.variable(names, name) - float(low))
            generators.append(float(high) - Polynomial.variable(names, name))
        return cls(generators=generators)

    def eliminated_generators(self, n_states: int):
        names = full_belief_variables(n_states)
        return [eliminate_coordinate(g.extend(names), names[-1], names[:-1]).extend(names[:-1]) for g in self.generators]

    def contains(self, b: Belief, tolerance: float = 1e-9) -> bool:
        if self.is_singleton:
            return bool(np.allclose(b.probs, self.belief.probs, atol=tolerance))
        names = full_belief_variables(b.n_states)
        return all(g.extend(names).evaluate(tuple(b.probs)) >= -tolerance for g in self.generators)

    def sample(self, n_states: int, count: int, seed: int = 0):
        """
        Beliefs of the set (rejection from uniform simplex samples, plus the LP extreme points).
        return: list of Belief
        """
        if self.is_singleton:
            return [self.belief]
        points = [Belief(np.append(x, 1.0 - x.sum()).clip(0.0)) for x in sample_simplex(n_states - 1, count, seed)]
        return [b for b in points if self.contains(b)]

    def maximize(self, weights, n_states: int):
        """
        max sum_i weights_i b_i over the set.
        return: (value, maximizing Belief)
        """
        weights = np.asarray(weights, dtype=float)
        if self.is_singleton:
            return float(weights @ self.belief.probs), self.belief
        names = full_belief_variables(n_states)
        lp = LinearProgram("initial_set_max")
        for name in names:
            lp.add_variable(name)
        lp.add_constraint(LinearForm({name: 1.0 for name in names}, -1.0), "==", "simplex")
        for k, g in enumerate(self.generators):
            g = g.extend(names)
            terms = {name: float(g.coefficient(tuple(1 if v == name else 0 for v in names))) for name in names}
            lp.add_constraint(LinearForm(terms, float(g.coefficient((0,) * n_states))), ">=", f"g{k}")
        lp.set_objective(LinearForm({name: -w for name, w in zip(names, weights)}))
        solution = solve(lp)
        if not solution.feasible:
            raise ValueError(f"Initial set is empty on the simplex ({solution.status})")
        probs = np.clip([solution.assignment[name] for name in names], 0.0, None)
        return -solution.objective_value, Belief(probs / probs.sum())

    def to_dict(self) -> dict:
        if self.is_singleton:
            return {"belief": [float(v) for v in self.belief.probs]}
        return {"generators": [g.to_text() for g in self.generators]}

    @classmethod
    def from_dict(cls, record: dict, n_states: int):
        if "belief" in record:
            return cls.singleton(Belief(record["belief"]))
        names = full_belief_variables(n_states)
        return cls(generators=[parse_polynomial(str(text), names) for text in record["generators"]])


class UnsafeSet:
    def __init__(self, kind: str, states=(), threshold: float | None = None, bound: float | None = None, tube: Polynomial | None = None):
        """
        Safety: {b : sum over unsafe states of b(q) > threshold}.
        Optimality: {(t, b) : r(b, a) > tube(t)} for the model's rewards, with sum of the tube <= bound.
        """
        self.kind = kind
        self.states = list(states)
        self.threshold = threshold
        self.bound = bound
        self.tube = tube
        if kind == "safety":
            if not self.states:
                raise ValueError("A safety property needs at least one unsafe state")
            if threshold is None or not 0.0 <= threshold <= 1.0:
                raise ValueError(f"Safety threshold must lie in [0, 1], got {threshold}")
        elif kind == "optimality":
            if bound is None:
                raise ValueError("An optimality property needs a bound")
        else:
            raise ValueError(f"Unknown unsafe-set kind '{kind}'")

    @classmethod
    def safety(cls, states, threshold: float):
        return cls("safety", states=states, threshold=threshold)

    @classmethod
    def optimality(cls, bound: float, tube: Polynomial | None = None):
        return cls("optimality", bound=bound, tube=tube)

    def indicator(self, pomdp: Pomdp) -> np.ndarray:
        weights = np.zeros(pomdp.n_states)
        for state in self.states:
            weights[pomdp.state_index(state)] = 1.0
        return weights

    def safety_polynomial(self, pomdp: Pomdp, exact: bool = False) -> Polynomial:
        """
        sum_{Qu} b - threshold over the eliminated coordinates.
        return: Polynomial
        """
        n = pomdp.n_states
        names = full_belief_variables(n)
        weights = self.indicator(pomdp)
        poly = Polynomial(names, {tuple(1 if k == i else 0 for k in range(n)): 1.0 for i in range(n) if weights[i]}) - self.threshold
        poly = eliminate_coordinate(poly, names[-1], names[:-1]).extend(belief_variables(n))
        return poly.to_exact() if exact else poly

    def tube_polynomial(self, horizon: int) -> Polynomial:
        """Reward tube over t, defaulting to the constant bound / (horizon + 1)."""
        if self.tube is not None:
            return self.tube.extend((TIME,))
        return Polynomial.constant((TIME,), self.bound / (horizon + 1))

    def tube_total(self, horizon: int) -> float:
        tube = self.tube_polynomial(horizon)
        return float(sum(tube.evaluate((s,)) for s in range(horizon + 1)))

    def to_dict(self, horizon: int | None = None) -> dict:
        if self.kind == "safety":
            return {"kind": "safety", "unsafe_states": list(self.states), "threshold": float(self.threshold)}
        record = {"kind": "optimality", "bound": float(self.bound)}
        if self.tube is not None:
            record["tube"] = self.tube.to_text()
        return record

    @classmethod
    def from_dict(cls, record: dict):
        if record["kind"] == "safety":
            return cls.safety(record["unsafe_states"], record["threshold"])
        tube = parse_polynomial(str(record["tube"]), (TIME,)) if "tube" in record else None
        return cls.optimality(record["bound"], tube)


def _policy_to_dict(policy: PolicyPartition | None):
    if policy is None:
        return None
    return {"regions": [{"guard": guard.to_text(), "action": action} for guard, action in policy.regions], "default": policy.default_action}


def _policy_from_dict(record, n_states: int):
    if not record:
        return None
    names = full_belief_variables(n_states)
    regions = [(parse_polynomial(str(item["guard"]), names), item["action"]) for item in record["regions"]]
    return PolicyPartition(regions, record["default"])


class ReachCertificate:
    kind = "reach"

    def __init__(self, mode: str, functions, degree: int, condition: str, initial_belief: Belief, conditions, model: str, policy: PolicyPartition | None = None, validated: dict | None = None):
        """
        Over-approximation of the reachable beliefs.
        mode: single | per_action | per_partition
        functions: list of CertificateFunction (V with level gamma)
        degree: degree of the functions (also the clearing degree)
        condition: invariance | decrease
        """
        self.mode = mode
        self.functions = functions
        self.degree = degree
        self.condition = condition
        self.initial_belief = initial_belief
        self.conditions = conditions
        self.model = model
        self.policy = policy
        self.validated = validated or {}
        for function in functions:
            if function.level is None or function.level < 0:
                raise ValueError(f"Reach function has invalid level {function.level}")

    @property
    def n_states(self) -> int:
        return self.initial_belief.n_states

    @property
    def variables(self):
        return belief_variables(self.n_states)

    def region_of(self, b: Belief) -> int:
        return self.policy.region_index(b) if self.policy is not None else 0

    def membership(self, b: Belief):
        """
        Membership value and level; b is inside when value <= level.
        single / per_partition: (V(b), gamma) of the relevant function.
        per_action: (max_a V_a(b) - gamma_a, 0).
        return: (float, float)
        """
        x = b.eliminated()
        if self.mode == "per_action":
            return max(float(f.polynomial.evaluate(x)) - f.level for f in self.functions), 0.0
        function = self.functions[self.region_of(b)]
        return float(function.polynomial.evaluate(x)), function.level

    def contains(self, b: Belief, tolerance: float = 1e-8) -> bool:
        value, level = self.membership(b)
        return value <= level + tolerance

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "mode": self.mode,
            "model": self.model,
            "degree": self.degree,
            "condition": self.condition,
            "initial_belief": [float(v) for v in self.initial_belief.probs],
            "variables": list(self.variables),
            "policy": _policy_to_dict(self.policy),
            "functions": [f.to_dict() for f in self.functions],
            "conditions": [c.to_dict() for c in self.conditions],
            "validation": self.validated,
        }


class BarrierCertificate:
    kind = "barrier"

    def __init__(self, mode: str, functions, degree: int, time_degree: int, horizon: int, unsafe: UnsafeSet, initial: InitialSet, conditions, model: str, n_states: int, policy: PolicyPartition | None = None, validated: dict | None = None):
        """
        Time-indexed barrier certificate(s) B(t, b).
        mode: monolithic | per_action_hull | per_partition
        functions: list of CertificateFunction over (b1..b{n-1}, t)
        horizon: tau >= 0
        unsafe: UnsafeSet (safety or optimality)
        initial: InitialSet
        """
        if horizon < 0:
            raise ValueError(f"Horizon must be >= 0, got {horizon}")
        self.mode = mode
        self.functions = functions
        self.degree = degree
        self.time_degree = time_degree
        self.horizon = horizon
        self.unsafe = unsafe
        self.initial = initial
        self.conditions = conditions
        self.model = model
        self.n_states = n_states
        self.policy = policy
        self.validated = validated or {}

    @property
    def variables(self):
        return belief_variables(self.n_states) + (TIME,)

    def value(self, index: int, t: float, b: Belief) -> float:
        return float(self.functions[index].polynomial.evaluate(b.eliminated() + (t,)))

    def function_for(self, b: Belief) -> int:
        return self.policy.region_index(b) if self.mode == "per_partition" else 0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "mode": self.mode,
            "model": self.model,
            "degree": self.degree,
            "time_degree": self.time_degree,
            "horizon": self.horizon,
            "n_states": self.n_states,
            "property": self.unsafe.to_dict(),
            "initial": self.initial.to_dict(),
            "variables": list(self.variables),
            "policy": _policy_to_dict(self.policy),
            "functions": [f.to_dict() for f in self.functions],
            "conditions": [c.to_dict() for c in self.conditions],
            "validation": self.validated,
        }


def save_certificate(cert, path: str) -> str:
    """
    Write a certificate as YAML.
    return: str (path)
    """
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cert.to_dict(), f, sort_keys=False, default_flow_style=None, width=200)
    logging.debug(f"Certificate written: {path} ({len(cert.conditions)} conditions)")
    return path


def load_certificate(path: str):
    """
    Read a certificate written by save_certificate.
    return: ReachCertificate | BarrierCertificate
    """
    logging.debug(f"[LOAD] Loading certificate: {path}")
    with open(path, encoding="utf-8") as f:
        record = yaml.safe_load(f)
    if not isinstance(record, dict) or record.get("kind") not in ("reach", "barrier"):
        raise ValueError(f"{path} is not a certificate file")
    variables = tuple(record["variables"])
    functions = [CertificateFunction.from_dict(item, variables) for item in record["functions"]]
    conditions = [Condition.from_dict(item, variables) for item in record["conditions"]]
    if record["kind"] == "reach":
        initial = Belief(record["initial_belief"])
        policy = _policy_from_dict(record.get("policy"), initial.n_states)
        return ReachCertificate(record["mode"], functions, record["degree"], record["condition"], initial, conditions, record["model"], policy, record.get("validation"))
    n_states = record["n_states"]
    return BarrierCertificate(
        record["mode"], functions, record["degree"], record["time_degree"], record["horizon"],
        UnsafeSet.from_dict(record["property"]), InitialSet.from_dict(record["initial"], n_states),
        conditions, record["model"], n_states, _policy_from_dict(record.get("policy"), n_states), record.get("validation"),
    )
