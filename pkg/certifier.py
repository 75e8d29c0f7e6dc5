import copy
import itertools
import logging
import os
from fractions import Fraction

import numpy as np
import yaml

from certificate import (
    TIME,
    BarrierCertificate,
    CertificateFunction,
    Condition,
    InitialSet,
    ReachCertificate,
    UnsafeSet,
)
from lp_solver import solve
from polynomial import LinearForm, Polynomial, compose_cleared, monomial_basis, parse_polynomial, simplex_average
from pomdp_model import Belief, Pomdp, PolicyPartition, belief_variables, rational_map, reward_polynomial, run_parallel, sample_trajectories
from psatz_compiler import (
    PositivityConstraint,
    assemble_program,
    certify_nonnegative,
    decision_polynomial,
    encode_psatz,
    extract_witness,
    is_diagonally_dominant,
    psatz_residual,
)


class NotFound(Exception):
    """The relaxation is infeasible at this degree: inconclusive, not a counterexample."""

    def __init__(self, message: str, degree: int | None = None):
        super().__init__(message)
        self.degree = degree


class OverlapError(Exception):
    """The initial beliefs already intersect the unsafe set."""


class TubeViolation(Exception):
    """The reward tube sums to more than the optimality bound."""


class ValidationFailure(Exception):
    """A certificate failed its post-hoc check."""


DEFAULT_CONFIG = {
    "tolerances": {
        "filter": 1e-12,
        "stochastic": 1e-9,
        "lp_feasibility": 1e-7,
        "lp_pivot": 1e-9,
        "identity": 1e-7,
        "gram": 1e-7,
        "validation": 1e-8,
    },
    "strictness_margin": 1e-6,
    "degrees": [1, 2, 3],
    "time_degree": 2,
    "reach": {"condition": "invariance", "cap": 10.0},
    "alternation": {
        "max_iterations": 20,
        "improvement": 1e-4,
        "multiplier_seed_scale": 1e-5,
    },
    "sampling": {"seed": 0, "validation_points": 2000, "trajectories": 200, "horizon": 30},
    "solver": {"backend": "simplex", "max_iters": 200000, "refactor_every": 100, "degenerate_limit": 50},
}

ROW_KINDS = ("level", "initial_point")
REACH_LEVEL = 1.0


def _merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path: str | None = None) -> dict:
    """
    Read config.yaml over the built-in defaults.
    path: config file (default: $POMDP_VERIFY_CONFIG, then ./config.yaml)
    return: dict
    """
    path = path or os.getenv("POMDP_VERIFY_CONFIG") or "config.yaml"
    if not os.path.exists(path):
        logging.debug(f"[LOAD] No configuration at {path}, using defaults")
        return copy.deepcopy(DEFAULT_CONFIG)
    logging.debug(f"[LOAD] Loading configuration file: {path}")
    with open(path, encoding="utf-8") as f:
        loaded = yaml.safe_load(f) or {}
    return _merge(DEFAULT_CONFIG, loaded)


def solver_options(config: dict) -> dict:
    return {
        "tolerance": config["tolerances"]["lp_feasibility"],
        "pivot_tolerance": config["tolerances"]["lp_pivot"],
        "max_iters": config["solver"]["max_iters"],
        "backend": config["solver"]["backend"],
        "refactor_every": config["solver"]["refactor_every"],
        "degenerate_limit": config["solver"]["degenerate_limit"],
    }


def simplex_generators(variables):
    """x_i >= 0 and 1 - sum(x) >= 0 over the eliminated coordinates."""
    generators = [Polynomial.variable(variables, v) for v in variables]
    rest = Polynomial.constant(variables, 1.0)
    for v in variables:
        rest = rest - Polynomial.variable(variables, v)
    return generators + [rest]


def region_cells(policy: PolicyPartition, n_states: int):
    """
    First-match cells as generator lists: cell i = {-g_i >= 0, g_j >= 0 for j < i},
    the default cell = {g_j >= 0 for all j}.
    return: list of lists of Polynomial
    """
    guards = policy.eliminated_guards(n_states)
    cells = [[-g] + guards[:i] for i, g in enumerate(guards)]
    cells.append(list(guards))
    return cells


class ModelContext:
    def __init__(self, pomdp: Pomdp, exact: bool = False, horizon: int | None = None, unsafe: UnsafeSet | None = None, initial: InitialSet | None = None, policy: PolicyPartition | None = None, time: bool = False):
        """
        Model-derived polynomials shared by program building (float) and validation (exact).
        exact: Fraction coefficients
        time: append the time variable t
        """
        self.pomdp = pomdp
        self.exact = exact
        self.horizon = horizon
        self.unsafe = unsafe
        self.initial = initial
        self.policy = policy
        self.x = belief_variables(pomdp.n_states)
        self.variables = self.x + ((TIME,) if time else ())
        self.simplex = [self._lift(g) for g in simplex_generators(self.x)]
        self.cells = [[self._lift(g) for g in cell] for cell in region_cells(policy, pomdp.n_states)] if policy is not None else None
        self._maps = {}

    def _lift(self, poly: Polynomial) -> Polynomial:
        poly = poly.extend(self.variables)
        return poly.to_exact() if self.exact else poly

    def number(self, value):
        return Fraction(value) if self.exact else float(value)

    def map(self, action, observation):
        key = (action, observation)
        if key not in self._maps:
            self._maps[key] = rational_map(self.pomdp, action, observation, exact=self.exact, validate=not self.exact)
        return self._maps[key]

    def branches(self, actions):
        result = []
        for action in actions:
            for z in self.pomdp.observations:
                f = self.map(action, z)
                if f is not None:
                    result.append((action, z, f))
                else:
                    logging.debug(f"Branch ({action}, {z}) is impossible everywhere, skipped")
        return result

    def cell(self, index):
        if index is None or self.cells is None:
            return []
        return list(self.cells[index])

    def time_generators(self, start: int):
        t = Polynomial.variable(self.variables, TIME)
        return [self._lift(t - start), self._lift(self.horizon - t)]

    def shift(self, offset: int) -> Polynomial:
        """t - offset over the time variable alone."""
        poly = Polynomial.variable((TIME,), TIME) - offset
        return poly.to_exact() if self.exact else poly

    def safety(self) -> Polynomial:
        return self._lift(self.unsafe.safety_polynomial(self.pomdp))

    def reward(self, action) -> Polynomial:
        return self._lift(reward_polynomial(self.pomdp, action))

    def tube(self) -> Polynomial:
        return self._lift(self.unsafe.tube_polynomial(self.horizon))

    def initial_generators(self):
        return [self._lift(g) for g in self.initial.eliminated_generators(self.pomdp.n_states)]

    def at_time(self, poly: Polynomial, value) -> Polynomial:
        """B(value, x) for a constant or a polynomial in t."""
        if isinstance(value, Polynomial):
            value = value.extend((TIME,))
        return poly.substitute(TIME, value).extend(self.variables)


def condition_target(ctx: ModelContext, kind: str, params: dict, functions, gamma=None, multiplier: Polynomial | None = None):
    """
    Target polynomial and generator list of one condition.
    functions: dict index -> Polynomial (decision or numeric)
    gamma: sublevel value (float or Fraction)
    multiplier: S-procedure multiplier p for invariance / decrease
    return: (Polynomial, list of Polynomial)
    """
    simplex = list(ctx.simplex)
    if kind == "nonneg":
        return functions[params["function"]].extend(ctx.variables), simplex
    if kind == "bounded":
        return ctx.number(params["cap"]) - functions[params["function"]].extend(ctx.variables), simplex
    if kind == "multiplier_nonneg":
        return multiplier.extend(ctx.variables), simplex
    if kind in ("invariance", "decrease"):
        source = functions[params["source"]]
        destination = functions[params["target"]]
        f = ctx.map(params["action"], params["observation"])
        if f is None:
            raise ValueError(f"Branch ({params['action']}, {params['observation']}) has a zero denominator")
        d = params["degree"]
        cleared = f.denominator ** d
        first = cleared.scale(gamma) if kind == "invariance" else cleared * source
        target = first - compose_cleared(destination, f, d) - multiplier * ((-source) + gamma)
        return target.extend(ctx.variables), simplex + ctx.cell(params.get("cell"))
    if kind == "terminal":
        B = functions[params["function"]]
        return ctx.at_time(B, ctx.number(ctx.horizon)), simplex + [ctx.safety()] + ctx.cell(params.get("cell"))
    if kind == "initial_set":
        B = functions[params["function"]]
        return -ctx.at_time(B, ctx.number(0)), simplex + ctx.initial_generators() + ctx.cell(params.get("cell"))
    if kind == "nonincrease":
        source = functions[params["source"]]
        destination = functions[params["target"]]
        f = ctx.map(params["action"], params["observation"])
        d = params["degree"]
        shifted = ctx.at_time(source, ctx.shift(1))
        target = shifted * (f.denominator ** d) - compose_cleared(destination, f, d)
        return target.extend(ctx.variables), simplex + ctx.time_generators(1) + ctx.cell(params.get("cell"))
    if kind == "unsafe_time":
        B = functions[params["function"]]
        excess = ctx.reward(params["action"]) - ctx.tube()
        return B.extend(ctx.variables), simplex + ctx.time_generators(0) + [excess] + ctx.cell(params.get("cell"))
    if kind == "vacuous_safety":
        return -ctx.safety(), simplex
    if kind == "vacuous_reward":
        return ctx.tube() - ctx.reward(params["action"]), simplex + ctx.time_generators(0)
    raise ValueError(f"Unknown condition kind '{kind}'")


def _positivity(ctx, name, kind, params, margin, functions, gamma=None, multiplier=None):
    target, generators = condition_target(ctx, kind, params, functions, gamma, multiplier)
    return PositivityConstraint(name, target, generators, margin, params=params)


def _certify_condition(ctx, name, kind, params, config):
    """
    Standalone certificate of a numeric condition (vacuity, multiplier sign).
    return: Condition, or None when the relaxation is infeasible
    """
    target, generators = condition_target(ctx, kind, params, {})
    witness = certify_nonnegative(target, generators, 0.0, solver_options=solver_options(config), name=name)
    if witness is None:
        return None
    return Condition(name, kind, params, 0.0, witness)


def _check_degree(degree: int):
    if degree < 1:
        raise ValueError(f"Certificate degree must be >= 1, got {degree}")


class ReachProgram:
    def __init__(self, name: str, ctx: ModelContext, indices, branch_actions: dict, cells: dict, initial_index: int, b0: Belief, degree: int, config: dict):
        """
        Sublevel sets {V_i <= 1} for one group of functions solved together.
        Each V_i lies between 0 and reach.cap on the simplex and the V-step maximizes
        the simplex mean of sum_i V_i, so V_i only stays low where invariance forces it.
        indices: global indices of the functions solved together
        branch_actions: index -> actions applied inside that function's domain
        cells: index -> policy cell (None outside per-region mode)
        initial_index: function whose sublevel set must contain b0
        """
        self.name = name
        self.ctx = ctx
        self.indices = list(indices)
        self.cells = cells
        self.initial_index = initial_index
        self.b0 = b0
        self.degree = degree
        self.config = config
        self.kind = config["reach"]["condition"]
        if self.kind not in ("invariance", "decrease"):
            raise ValueError(f"Unknown reach condition '{self.kind}'")
        self.level = REACH_LEVEL
        self.cap = float(config["reach"]["cap"])
        if self.cap <= self.level:
            raise ValueError(f"reach.cap must exceed the level {self.level}, got {self.cap}")
        self.margin = config["strictness_margin"] if self.kind == "decrease" else 0.0
        self.keys = []
        for i in self.indices:
            for action, z, _ in ctx.branches(branch_actions[i]):
                for j in self.indices:
                    self.keys.append((i, action, z, j))
        logging.debug(f"[{name}] {len(self.indices)} functions, {len(self.keys)} transition conditions")

    def _params(self, key) -> dict:
        i, action, z, j = key
        return {"source": i, "target": j, "action": action, "observation": z, "degree": self.degree, "cell": self.cells[i]}

    def _condition_name(self, key) -> str:
        i, action, z, j = key
        return f"{self.kind}.V{i}.{action}.{z}.V{j}"

    def seed_multiplier(self) -> Polynomial:
        """epsilon * sum_q b_q^d over the eliminated coordinates, or epsilon when that is not certifiable."""
        x = self.ctx.x
        scale = self.config["alternation"]["multiplier_seed_scale"]
        seed = Polynomial.zero(x)
        for name in x:
            seed = seed + Polynomial.variable(x, name) ** self.degree
        seed = seed * scale
        if certify_nonnegative(seed, simplex_generators(x), solver_options=solver_options(self.config), name="seed") is None:
            logging.info(f"[{self.name}] sum of b_q^{self.degree} is not certifiably nonnegative at degree {self.degree}, seeding with a constant")
            return Polynomial.constant(x, scale)
        return seed

    def build_v_step(self, multipliers: dict):
        """
        LP maximizing the simplex mean of the functions with the multipliers fixed.
        return: (LinearProgram, functions, encodings by condition name)
        """
        functions, symbols = {}, []
        for i in self.indices:
            V, names = decision_polynomial(self.ctx.x, self.degree, f"V{i}")
            functions[i] = V
            symbols += names
        encodings = {}
        for i in self.indices:
            name = f"nonneg.V{i}"
            encodings[name] = encode_psatz(_positivity(self.ctx, name, "nonneg", {"function": i}, 0.0, functions))
            name = f"bounded.V{i}"
            encodings[name] = encode_psatz(_positivity(self.ctx, name, "bounded", {"function": i, "cap": self.cap}, 0.0, functions))
        for key in self.keys:
            name = self._condition_name(key)
            constraint = _positivity(self.ctx, name, self.kind, self._params(key), self.margin, functions, self.level, multipliers[key])
            encodings[name] = encode_psatz(constraint)
        level = self.level - functions[self.initial_index].evaluate(self.b0.eliminated())
        mean = sum((simplex_average(functions[i]) for i in self.indices), LinearForm())
        lp = assemble_program(f"{self.name}.v_step", list(encodings.values()), symbols, extra_rows=[(level, ">=", "level")], objective=-mean)
        return lp, functions, encodings

    def v_step(self, multipliers: dict):
        lp, functions, encodings = self.build_v_step(multipliers)
        solution = solve(lp, **solver_options(self.config))
        if not solution.feasible:
            logging.debug(f"[{self.name}] V-step {solution.status}")
            return None
        values = {i: V.with_solution(solution.assignment) for i, V in functions.items()}
        witnesses = {name: extract_witness(encoding, solution.assignment) for name, encoding in encodings.items()}
        mean = -solution.objective_value
        logging.debug(f"[{self.name}] V-step simplex mean {mean:.6g}")
        return {"functions": values, "mean": mean, "witnesses": witnesses}

    def fit_multiplier(self, key, functions: dict):
        """
        p-step for one condition: the multiplier p >= 0 leaving the largest slack c
        (0 <= c <= 1) in the condition, the functions being fixed.
        return: Polynomial, or None when infeasible
        """
        p, symbols = decision_polynomial(self.ctx.x, self.degree, "p")
        slack = LinearForm.symbol("c")
        nonneg = _positivity(self.ctx, "p.nonneg", "multiplier_nonneg", {}, 0.0, functions, multiplier=p)
        target, generators = condition_target(self.ctx, self.kind, self._params(key), functions, self.level, p)
        condition = PositivityConstraint("p.condition", target - slack, generators, self.margin)
        rows = [(1.0 - slack, ">=", "c.cap")]
        lp = assemble_program(f"{self.name}.p_step", [encode_psatz(nonneg), encode_psatz(condition)], symbols, {"c": False}, rows, -slack)
        solution = solve(lp, **solver_options(self.config))
        if not solution.feasible:
            return None
        logging.debug(f"[{self.name}] p-step {self._condition_name(key)}: slack {solution.assignment['c']:.3g}")
        return p.with_solution(solution.assignment)

    def refit(self, result):
        """
        p-step for every condition with the functions of a V-step fixed.
        return: dict key -> Polynomial, or None when some condition has no multiplier
        """
        functions = result["functions"]
        fitted = run_parallel([(self.fit_multiplier, (key, functions)) for key in self.keys])
        if any(p is None for p in fitted):
            logging.debug(f"[{self.name}] p-step infeasible, keeping the previous multipliers")
            return None
        return dict(zip(self.keys, fitted))

    def run(self):
        """
        Alternate V-steps and p-steps until the simplex mean stops growing.
        return: (V-step result, multipliers used by it)
        """
        seed = self.seed_multiplier()
        multipliers = {key: seed for key in self.keys}
        best = None
        alternation = self.config["alternation"]
        for iteration in range(alternation["max_iterations"]):
            logging.debug(f"[ALTERNATION {iteration + 1}] {self.name}: V-step")
            result = self.v_step(multipliers)
            if result is None:
                break
            gain = None if best is None else result["mean"] - best[0]["mean"]
            if best is None or gain > 0:
                best = (result, dict(multipliers))
            if gain is not None and gain < alternation["improvement"]:
                break
            logging.debug(f"[ALTERNATION {iteration + 1}] {self.name}: p-step")
            refitted = self.refit(result)
            if refitted is None:
                break
            multipliers = refitted
        if best is None:
            raise NotFound(f"{self.name}: no sublevel certificate at degree {self.degree}", self.degree)
        return best

    def conditions(self, result, multipliers):
        """
        Certificate conditions with their witnesses, multiplier signs included.
        return: list of Condition
        """
        witnesses = result["witnesses"]
        conditions = [Condition(f"nonneg.V{i}", "nonneg", {"function": i}, 0.0, witnesses[f"nonneg.V{i}"]) for i in self.indices]
        conditions.append(Condition(f"level.V{self.initial_index}", "level", {"function": self.initial_index}))
        options = solver_options(self.config)
        signs = run_parallel([
            (certify_nonnegative, (multipliers[key], self.ctx.simplex, 0.0, None, options, f"multiplier.{self._condition_name(key)}"))
            for key in self.keys
        ])
        for key, witness in zip(self.keys, signs):
            name = self._condition_name(key)
            text = multipliers[key].to_text()
            if witness is None:
                raise NotFound(f"{self.name}: multiplier of {name} is not certifiably nonnegative", self.degree)
            conditions.append(Condition(name, self.kind, dict(self._params(key), multiplier=text), self.margin, witnesses[name]))
            conditions.append(Condition(f"multiplier.{name}", "multiplier_nonneg", {"multiplier": text}, 0.0, witness))
        return conditions


def _initial_belief(pomdp: Pomdp, b0) -> Belief:
    if b0 is None:
        return pomdp.initial_belief
    b0 = b0 if isinstance(b0, Belief) else Belief(b0)
    if b0.n_states != pomdp.n_states:
        raise ValueError(f"Initial belief has {b0.n_states} entries, model has {pomdp.n_states} states")
    return b0


def reach_single(pomdp: Pomdp, b0=None, degree: int = 1, config: dict | None = None, actions=None) -> ReachCertificate:
    """
    One sublevel set {V <= 1} containing b0 and closed under every belief update.
    pomdp: Pomdp
    b0: initial belief (default pomdp.initial_belief)
    degree: degree d of V (>= 1)
    actions: actions the set must be closed under (default: all)
    return: ReachCertificate
    """
    _check_degree(degree)
    config = config or load_config()
    b0 = _initial_belief(pomdp, b0)
    actions = list(actions or pomdp.actions)
    ctx = ModelContext(pomdp)
    program = ReachProgram("reach", ctx, [0], {0: actions}, {0: None}, 0, b0, degree, config)
    result, multipliers = program.run()
    logging.info(f"Reach set found at degree {degree}: simplex mean of V = {result['mean']:.6g}")
    functions = [CertificateFunction(result["functions"][0], program.level, "all")]
    return ReachCertificate("single", functions, degree, program.kind, b0, program.conditions(result, multipliers), pomdp.name)


def _solve_reach_action(pomdp, ctx, index, action, b0, degree, config):
    program = ReachProgram(f"reach.{action}", ctx, [index], {index: list(pomdp.actions)}, {index: None}, index, b0, degree, config)
    result, multipliers = program.run()
    return CertificateFunction(result["functions"][index], program.level, f"action:{action}"), program.conditions(result, multipliers)


def reach_per_action(pomdp: Pomdp, b0=None, degree: int = 1, config: dict | None = None) -> ReachCertificate:
    """
    One function per action, solved in parallel; the set is {b : max_a V_a(b) - 1 <= 0}.
    Every V_a is closed under every action.
    return: ReachCertificate
    """
    _check_degree(degree)
    config = config or load_config()
    b0 = _initial_belief(pomdp, b0)
    ctx = ModelContext(pomdp)
    results = run_parallel([(_solve_reach_action, (pomdp, ctx, i, action, b0, degree, config)) for i, action in enumerate(pomdp.actions)])
    functions = [function for function, _ in results]
    conditions = [condition for _, group in results for condition in group]
    logging.info(f"Per-action reach sets found at degree {degree} for {len(functions)} actions")
    return ReachCertificate("per_action", functions, degree, config["reach"]["condition"], b0, conditions, pomdp.name)


def reach_policy(pomdp: Pomdp, policy: PolicyPartition, b0=None, degree: int = 1, config: dict | None = None) -> ReachCertificate:
    """
    One function per policy region, solved as one program.
    A belief's membership uses the function of its own region.
    return: ReachCertificate
    """
    _check_degree(degree)
    config = config or load_config()
    policy.check(pomdp)
    b0 = _initial_belief(pomdp, b0)
    ctx = ModelContext(pomdp, policy=policy)
    indices = list(range(len(policy.actions)))
    program = ReachProgram(
        "reach.policy", ctx, indices,
        {i: [action] for i, action in enumerate(policy.actions)},
        {i: i for i in indices},
        policy.region_index(b0), b0, degree, config,
    )
    result, multipliers = program.run()
    logging.info(f"Policy reach set found at degree {degree}: simplex mean of the V_i = {result['mean']:.6g}")
    functions = [CertificateFunction(result["functions"][i], program.level, f"region:{i}") for i in indices]
    return ReachCertificate("per_partition", functions, degree, program.kind, b0, program.conditions(result, multipliers), pomdp.name, policy)


class BarrierProgram:
    def __init__(self, name: str, ctx: ModelContext, indices, branch_actions: dict, unsafe_actions: dict, cells: dict, degree: int, time_degree: int, config: dict, vacuous_actions=()):
        """
        Feasibility program for time-indexed barrier functions B_i(t, x).
        branch_actions: index -> actions whose updates start in that function's domain
        unsafe_actions: index -> actions whose reward tube must be respected there (optimality)
        cells: index -> policy cell (None outside per-region mode)
        vacuous_actions: actions whose reward never exceeds the tube
        """
        self.name = name
        self.ctx = ctx
        self.indices = list(indices)
        self.cells = cells
        self.degree = degree
        self.time_degree = time_degree
        self.config = config
        self.margin = config["strictness_margin"]
        self.specs = []
        unsafe = ctx.unsafe
        initial = ctx.initial
        if initial.is_singleton:
            self.initial_index = ctx.policy.region_index(initial.belief) if ctx.policy is not None and cells[self.indices[0]] is not None else self.indices[0]
        else:
            self.initial_index = None
            for i in self.indices:
                self.specs.append((f"initial_set.B{i}", "initial_set", {"function": i, "cell": cells[i]}, self.margin))
        for i in self.indices:
            if unsafe.kind == "safety":
                if not vacuous_actions:
                    self.specs.append((f"terminal.B{i}", "terminal", {"function": i, "cell": cells[i]}, self.margin))
            else:
                for action in unsafe_actions[i]:
                    if action not in vacuous_actions:
                        self.specs.append((f"unsafe_time.B{i}.{action}", "unsafe_time", {"function": i, "action": action, "cell": cells[i]}, self.margin))
        if ctx.horizon >= 1:
            for i in self.indices:
                for action, z, _ in ctx.branches(branch_actions[i]):
                    for j in self.indices:
                        params = {"source": i, "target": j, "action": action, "observation": z, "degree": degree, "cell": cells[i]}
                        self.specs.append((f"nonincrease.B{i}.{action}.{z}.B{j}", "nonincrease", params, 0.0))
        logging.debug(f"[{name}] {len(self.indices)} functions, {len(self.specs)} conditions")

    def _templates(self):
        x = self.ctx.x
        monomials = [e + (k,) for e in monomial_basis(x, self.degree) for k in range(self.time_degree + 1)]
        functions, symbols = {}, []
        for i in self.indices:
            B, names = decision_polynomial(self.ctx.variables, self.degree + self.time_degree, f"B{i}", monomials)
            functions[i] = B
            symbols += names
        return functions, symbols

    def build(self):
        """
        return: (LinearProgram, functions, encodings by condition name)
        """
        functions, symbols = self._templates()
        encodings = {}
        for name, kind, params, margin in self.specs:
            encodings[name] = encode_psatz(_positivity(self.ctx, name, kind, params, margin, functions))
        rows = []
        if self.initial_index is not None:
            point = self.ctx.initial.belief.eliminated() + (0.0,)
            rows.append((-functions[self.initial_index].evaluate(point) - self.margin, ">=", "initial_point"))
        lp = assemble_program(self.name, list(encodings.values()), symbols, extra_rows=rows)
        return lp, functions, encodings

    def solve(self):
        """
        return: (dict index -> Polynomial, list of Condition)
        """
        lp, functions, encodings = self.build()
        solution = solve(lp, **solver_options(self.config))
        if not solution.feasible:
            raise NotFound(f"{self.name}: no barrier certificate at degree {self.degree} ({solution.status})", self.degree)
        values = {i: B.with_solution(solution.assignment) for i, B in functions.items()}
        conditions = [
            Condition(name, kind, params, margin, extract_witness(encodings[name], solution.assignment))
            for name, kind, params, margin in self.specs
        ]
        if self.initial_index is not None:
            conditions.append(Condition(f"initial_point.B{self.initial_index}", "initial_point", {"function": self.initial_index}, self.margin))
        return values, conditions


def check_overlap(pomdp: Pomdp, unsafe: UnsafeSet, initial: InitialSet, horizon: int, actions=None):
    """
    Reject properties whose initial beliefs are already unsafe.
    Safety: max over the initial set of sum_{Qu} b must not exceed the threshold.
    Optimality: r(b0, a) must not exceed the tube at t = 0 for the actions in use.
    """
    if unsafe.kind == "safety":
        value, worst = initial.maximize(unsafe.indicator(pomdp), pomdp.n_states)
        if value > unsafe.threshold + 1e-12:
            raise OverlapError(f"Initial belief {np.round(worst.probs, 6).tolist()} already has {value:.6g} > {unsafe.threshold} mass on the unsafe states")
        return
    start = float(unsafe.tube_polynomial(horizon).evaluate((0.0,)))
    for action in actions or pomdp.actions:
        value, worst = initial.maximize(pomdp.rewards[:, pomdp.action_index(action)], pomdp.n_states)
        if value > start + 1e-12:
            raise OverlapError(f"Initial reward {value:.6g} of action '{action}' already exceeds the tube value {start:.6g}")


def _vacuity(ctx: ModelContext, unsafe: UnsafeSet, actions, config: dict):
    """
    Certify the unsafe set empty where possible.
    return: (list of Condition, set of actions covered)
    """
    if unsafe.kind == "safety":
        condition = _certify_condition(ctx, "vacuous_safety", "vacuous_safety", {}, config)
        if condition is None:
            return [], set()
        logging.info("Unsafe set is empty on the simplex, terminal condition dropped")
        return [condition], {"*"}
    checks = run_parallel([(_certify_condition, (ctx, f"vacuous_reward.{a}", "vacuous_reward", {"action": a}, config)) for a in actions])
    conditions = [c for c in checks if c is not None]
    covered = {c.params["action"] for c in conditions}
    if covered:
        logging.info(f"Reward never exceeds the tube for {sorted(covered)}")
    return conditions, covered


def _verify(pomdp: Pomdp, unsafe: UnsafeSet, horizon: int, degree: int, mode: str, initial: InitialSet | None, policy: PolicyPartition | None, config: dict | None) -> BarrierCertificate:
    _check_degree(degree)
    config = config or load_config()
    initial = initial or InitialSet.singleton(pomdp.initial_belief)
    if mode not in ("monolithic", "per_action_hull", "per_partition"):
        raise ValueError(f"Unknown barrier mode '{mode}'")
    if mode == "per_partition":
        if policy is None:
            raise ValueError("per_partition mode needs a policy")
        policy.check(pomdp)
    else:
        policy = None
    check_overlap(pomdp, unsafe, initial, horizon, policy.actions if policy else None)
    time_degree = config["time_degree"]
    ctx = ModelContext(pomdp, horizon=horizon, unsafe=unsafe, initial=initial, policy=policy, time=True)
    actions = list(dict.fromkeys(policy.actions)) if policy else list(pomdp.actions)
    vacuous, covered = _vacuity(ctx, unsafe, actions, config)
    if mode == "monolithic":
        programs = [BarrierProgram("barrier", ctx, [0], {0: actions}, {0: actions}, {0: None}, degree, time_degree, config, covered)]
    elif mode == "per_action_hull":
        programs = [
            BarrierProgram(f"barrier.{action}", ctx, [k], {k: actions}, {k: actions}, {k: None}, degree, time_degree, config, covered)
            for k, action in enumerate(actions)
        ]
    else:
        indices = list(range(len(policy.actions)))
        programs = [BarrierProgram(
            "barrier.policy", ctx, indices,
            {i: [a] for i, a in enumerate(policy.actions)},
            {i: [a] for i, a in enumerate(policy.actions)},
            {i: i for i in indices}, degree, time_degree, config, covered,
        )]
    results = run_parallel([(program.solve, ()) for program in programs])
    values = {i: poly for found, _ in results for i, poly in found.items()}
    conditions = vacuous + [condition for _, group in results for condition in group]
    if mode == "monolithic":
        scopes = ["all"]
    elif mode == "per_action_hull":
        scopes = [f"action:{a}" for a in actions]
    else:
        scopes = [f"region:{i}" for i in range(len(values))]
    functions = [CertificateFunction(values[i], None, scopes[i]) for i in range(len(values))]
    logging.info(f"Barrier certificate found: {mode}, degree {degree}, {len(conditions)} conditions")
    return BarrierCertificate(mode, functions, degree, time_degree, horizon, unsafe, initial, conditions, pomdp.name, pomdp.n_states, policy)


def verify_safety(pomdp: Pomdp, unsafe: UnsafeSet, horizon: int, degree: int = 1, mode: str = "monolithic", initial: InitialSet | None = None, policy: PolicyPartition | None = None, config: dict | None = None) -> BarrierCertificate:
    """
    Certify sum_{Qu} b_tau <= threshold for every belief reached at the horizon.
    pomdp: Pomdp
    unsafe: UnsafeSet.safety(states, threshold)
    horizon: tau >= 1
    degree: degree of B in the belief coordinates
    mode: monolithic | per_action_hull | per_partition
    initial: InitialSet (default: the model's initial belief)
    policy: PolicyPartition, required for per_partition
    return: BarrierCertificate
    """
    if unsafe.kind != "safety":
        raise ValueError("verify_safety expects a safety property")
    if horizon < 1:
        raise ValueError(f"Safety horizon must be >= 1, got {horizon}")
    return _verify(pomdp, unsafe, horizon, degree, mode, initial, policy, config)


def verify_optimality(pomdp: Pomdp, horizon: int, bound: float, tube: Polynomial | None = None, degree: int = 1, mode: str = "monolithic", initial: InitialSet | None = None, policy: PolicyPartition | None = None, config: dict | None = None) -> BarrierCertificate:
    """
    Certify sum_{t=0}^{tau} r(b_t, a_t) <= bound along every execution, using a reward
    tube gamma(t) with sum_t gamma(t) <= bound (default bound / (tau + 1)).
    return: BarrierCertificate
    """
    if pomdp.rewards is None:
        raise ValueError(f"Model '{pomdp.name}' has no rewards")
    if horizon < 0:
        raise ValueError(f"Horizon must be >= 0, got {horizon}")
    unsafe = UnsafeSet.optimality(bound, tube)
    total = unsafe.tube_total(horizon)
    if total > bound + 1e-9:
        raise TubeViolation(f"Reward tube sums to {total:.6g} over {horizon + 1} steps, above the bound {bound}")
    return _verify(pomdp, unsafe, horizon, degree, mode, initial, policy, config)


def certify_with_escalation(procedure, degrees=None, config: dict | None = None, **kwargs):
    """
    Try increasing degrees until a certificate is found.
    procedure: reach_single, reach_per_action, reach_policy, verify_safety or verify_optimality
    degrees: candidate degrees (default config degrees)
    return: certificate of the first successful degree
    """
    config = config or load_config()
    degrees = list(degrees or config["degrees"])
    for degree in degrees:
        try:
            return procedure(degree=degree, config=config, **kwargs)
        except NotFound as e:
            logging.info(f"Degree {degree} inconclusive: {e}")
    raise NotFound(f"No certificate up to degree {degrees[-1]}", degrees[-1])


def build_programs(kind: str, pomdp: Pomdp, degree: int = 1, mode: str | None = None, policy: PolicyPartition | None = None, unsafe: UnsafeSet | None = None, horizon: int = 1, initial: InitialSet | None = None, config: dict | None = None):
    """
    The LPs a procedure would solve first, without solving them (export-only mode).
    kind: reach | barrier
    return: list of LinearProgram
    """
    _check_degree(degree)
    config = config or load_config()
    if kind == "reach":
        b0 = pomdp.initial_belief
        if mode == "per_partition":
            ctx = ModelContext(pomdp, policy=policy)
            indices = list(range(len(policy.actions)))
            programs = [ReachProgram(
                "reach.policy", ctx, indices,
                {i: [a] for i, a in enumerate(policy.actions)},
                {i: i for i in indices}, policy.region_index(b0), b0, degree, config,
            )]
        elif mode == "per_action":
            ctx = ModelContext(pomdp)
            programs = [
                ReachProgram(f"reach.{a}", ctx, [k], {k: list(pomdp.actions)}, {k: None}, k, b0, degree, config)
                for k, a in enumerate(pomdp.actions)
            ]
        else:
            ctx = ModelContext(pomdp)
            programs = [ReachProgram("reach", ctx, [0], {0: list(pomdp.actions)}, {0: None}, 0, b0, degree, config)]
        result = []
        for program in programs:
            seed = program.seed_multiplier()
            result.append(program.build_v_step({key: seed for key in program.keys})[0])
        return result
    if kind != "barrier":
        raise ValueError(f"Unknown program kind '{kind}'")
    initial = initial or InitialSet.singleton(pomdp.initial_belief)
    policy = policy if mode == "per_partition" else None
    ctx = ModelContext(pomdp, horizon=horizon, unsafe=unsafe, initial=initial, policy=policy, time=True)
    if policy is not None:
        indices = list(range(len(policy.actions)))
        actions = {i: [a] for i, a in enumerate(policy.actions)}
        return [BarrierProgram("barrier.policy", ctx, indices, actions, actions, {i: i for i in indices}, degree, config["time_degree"], config).build()[0]]
    actions = list(pomdp.actions)
    return [BarrierProgram("barrier", ctx, [0], {0: actions}, {0: actions}, {0: None}, degree, config["time_degree"], config).build()[0]]


def _validation_context(cert, pomdp: Pomdp, exact: bool) -> ModelContext:
    policy = cert.policy if cert.mode == "per_partition" else None
    if cert.kind == "reach":
        return ModelContext(pomdp, exact=exact, policy=policy)
    return ModelContext(pomdp, exact, cert.horizon, cert.unsafe, cert.initial, policy, time=True)


def _sample_points(ctx: ModelContext, count: int, rng: np.random.Generator) -> np.ndarray:
    """Dirichlet points of the simplex plus its vertices; t uniform on [0, horizon] when present."""
    k = len(ctx.x)
    x = rng.dirichlet(np.ones(k + 1), size=count)[:, :k] if k else np.zeros((count, 0))
    x = np.vstack([x, np.eye(k), np.zeros((1, k))]) if k else x
    if TIME not in ctx.variables:
        return x
    t = rng.uniform(0.0, float(ctx.horizon), size=(x.shape[0], 1))
    return np.hstack([x, t])


def _check_condition(condition: Condition, cert, ctx: ModelContext, functions: dict, points: np.ndarray, config: dict):
    """
    Exact identity, Gram dominance and sampled sign of one Psatz condition.
    return: (identity residual, smallest sampled target - margin)
    """
    tolerances = config["tolerances"]
    if condition.witness is None:
        raise ValidationFailure(f"{condition.name}: no multipliers stored")
    params = condition.params
    gamma = Fraction(cert.functions[params["source"]].level) if condition.kind in ("invariance", "decrease") else None
    multiplier = parse_polynomial(params["multiplier"], ctx.x).to_exact() if "multiplier" in params else None
    try:
        target, generators = condition_target(ctx, condition.kind, params, functions, gamma, multiplier)
        residual = psatz_residual(target, generators, condition.margin, condition.witness.bases, condition.witness.grams)
    except ValueError as e:
        raise ValidationFailure(f"{condition.name}: {e}")
    if residual > tolerances["identity"]:
        raise ValidationFailure(f"{condition.name}: identity residual {residual:.3e} above {tolerances['identity']:.1e}")
    for k, G in enumerate(condition.witness.grams):
        if not is_diagonally_dominant(G, tolerances["gram"] * max(1, len(G))):
            raise ValidationFailure(f"{condition.name}: Gram matrix {k} is not diagonally dominant")
    inside = np.ones(points.shape[0], dtype=bool)
    for g in generators:
        inside &= g.evaluate_many(points) >= 0.0
    if not inside.any():
        return residual, float("inf")
    slack = target.evaluate_many(points[inside]) - float(condition.margin)
    worst = int(np.argmin(slack))
    if slack[worst] < -tolerances["validation"]:
        raise ValidationFailure(f"{condition.name}: sampled value {slack[worst]:.3e} below the margin at {points[inside][worst].tolist()}")
    return residual, float(slack[worst])


def _check_row(condition: Condition, cert, functions: dict, config: dict) -> float:
    tolerance = config["tolerances"]["validation"]
    index = condition.params["function"]
    if condition.kind == "level":
        point = tuple(Fraction(v) for v in cert.initial_belief.eliminated())
        slack = Fraction(cert.functions[index].level) - functions[index].evaluate(point)
    else:
        point = tuple(Fraction(v) for v in cert.initial.belief.eliminated()) + (Fraction(0),)
        slack = -functions[index].evaluate(point) - Fraction(condition.margin)
    if slack < -tolerance:
        raise ValidationFailure(f"{condition.name}: initial condition violated by {float(-slack):.3e}")
    return float(slack)


def _check_reach_trajectories(cert: ReachCertificate, pomdp: Pomdp, config: dict, n_trajectories: int, horizon: int, seed: int) -> int:
    policy = cert.policy if cert.mode == "per_partition" else None
    trajectories = sample_trajectories(pomdp, horizon, n_trajectories, seed, policy, cert.initial_belief)
    tolerance = config["tolerances"]["validation"]
    for k, trajectory in enumerate(trajectories):
        for t, b in enumerate(trajectory.beliefs):
            if not cert.contains(b, tolerance):
                value, level = cert.membership(b)
                raise ValidationFailure(f"Trajectory {k}: belief {np.round(b.probs, 6).tolist()} at t={t} is outside the set ({value:.6g} > {level:.6g})")
    return len(trajectories)


def _barrier_values(cert: BarrierCertificate, trajectory, steps: int, weights):
    """Per-step barrier values: the active function, or every function and a convex mix for the hull."""
    series = []
    for t in range(steps + 1):
        b = trajectory.beliefs[t]
        if cert.mode == "per_action_hull":
            values = [cert.value(k, t, b) for k in range(len(cert.functions))]
            series.append(values + [float(np.dot(weights, values))])
        else:
            series.append([cert.value(cert.function_for(b), t, b)])
    return np.array(series)


def _check_barrier_trajectories(cert: BarrierCertificate, pomdp: Pomdp, config: dict, n_trajectories: int, seed: int) -> int:
    tolerance = config["tolerances"]["validation"]
    n = pomdp.n_states
    policy = cert.policy if cert.mode == "per_partition" else None
    starts = cert.initial.sample(n, 200, seed)[:10] or [cert.initial.maximize(np.zeros(n), n)[1]]
    steps = cert.horizon
    simulated = steps + 1 if cert.unsafe.kind == "optimality" else steps
    per_start = -(-n_trajectories // len(starts))
    rng = np.random.default_rng(seed)
    count = 0
    for s, b0 in enumerate(starts):
        for k, trajectory in enumerate(sample_trajectories(pomdp, simulated, per_start, seed + s, policy, b0)):
            weights = rng.dirichlet(np.ones(len(cert.functions)))
            values = _barrier_values(cert, trajectory, steps, weights)
            if np.any(values[0] >= 0.0):
                raise ValidationFailure(f"Trajectory {k}: barrier is nonnegative at the initial belief {np.round(b0.probs, 6).tolist()}")
            increase = values[1:] - values[:-1]
            if increase.size and increase.max() > tolerance:
                t = int(np.argmax(increase.max(axis=1))) + 1
                raise ValidationFailure(f"Trajectory {k}: barrier increases by {increase.max():.3e} at t={t}")
            if cert.unsafe.kind == "safety":
                mass = float(cert.unsafe.indicator(pomdp) @ trajectory.beliefs[steps].probs)
                if mass > cert.unsafe.threshold + tolerance:
                    raise ValidationFailure(f"Trajectory {k}: unsafe mass {mass:.6g} > {cert.unsafe.threshold} at the horizon")
            else:
                total = sum(float(trajectory.beliefs[t].probs @ pomdp.rewards[:, pomdp.action_index(trajectory.actions[t])]) for t in range(steps + 1))
                if total > cert.unsafe.bound + tolerance:
                    raise ValidationFailure(f"Trajectory {k}: accumulated reward {total:.6g} > {cert.unsafe.bound}")
            count += 1
    return count


def validate_certificate(cert, pomdp: Pomdp, config: dict | None = None, n_samples: int | None = None, n_trajectories: int | None = None, rng_seed: int | None = None) -> dict:
    """
    Independent check of a certificate against its model:
    every Psatz identity rebuilt in exact arithmetic, Gram matrices diagonally dominant,
    every condition sampled on its domain, and simulated trajectories kept inside.
    cert: ReachCertificate or BarrierCertificate
    pomdp: the model the certificate was computed for
    return: dict (evidence, also stored in cert.validated)
    """
    config = config or load_config()
    sampling = config["sampling"]
    n_samples = n_samples or sampling["validation_points"]
    n_trajectories = n_trajectories or sampling["trajectories"]
    seed = sampling["seed"] if rng_seed is None else rng_seed
    if cert.n_states != pomdp.n_states:
        raise ValidationFailure(f"Certificate is for {cert.n_states} states, model '{pomdp.name}' has {pomdp.n_states}")
    logging.debug(f"[VALIDATE] {cert.kind} certificate ({cert.mode}), {len(cert.conditions)} conditions")
    ctx = _validation_context(cert, pomdp, exact=True)
    functions = {i: f.polynomial.extend(ctx.variables).to_exact() for i, f in enumerate(cert.functions)}
    points = _sample_points(ctx, n_samples, np.random.default_rng(seed))
    residual, smallest = 0.0, float("inf")
    for condition in cert.conditions:
        if condition.kind in ROW_KINDS:
            smallest = min(smallest, _check_row(condition, cert, functions, config))
            continue
        r, s = _check_condition(condition, cert, ctx, functions, points, config)
        residual, smallest = max(residual, r), min(smallest, s)
    if cert.kind == "reach":
        count = _check_reach_trajectories(cert, pomdp, config, n_trajectories, sampling["horizon"], seed)
    else:
        count = _check_barrier_trajectories(cert, pomdp, config, n_trajectories, seed)
    evidence = {
        "passed": True,
        "conditions": len(cert.conditions),
        "max_identity_residual": residual,
        "min_sampled_slack": smallest if np.isfinite(smallest) else None,
        "samples": int(points.shape[0]),
        "trajectories": count,
    }
    logging.info(f"Certificate validated: {len(cert.conditions)} conditions, residual {residual:.2e}, {count} trajectories")
    cert.validated = evidence
    return evidence


def set_grid(cert, resolution: int = 50, time: int = 0):
    """
    Certificate values on the simplex grid {k / resolution}.
    Reach: (b, membership value, level, inside). Barrier: (b, B(time, b), 0, B <= 0).
    return: list of (np.ndarray, float, float, bool)
    """
    if resolution < 1:
        raise ValueError(f"Grid resolution must be >= 1, got {resolution}")
    n = cert.n_states
    rows = []
    for bars in itertools.combinations(range(resolution + n - 1), n - 1):
        counts = np.diff([-1, *bars, resolution + n - 1]) - 1
        b = Belief(counts / resolution)
        if cert.kind == "reach":
            value, level = cert.membership(b)
        else:
            value, level = cert.value(cert.function_for(b), time, b), 0.0
        rows.append((b.probs, value, level, value <= level + 1e-8))
    logging.debug(f"[GRID] {len(rows)} grid points at resolution {resolution}")
    return rows
