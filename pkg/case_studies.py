import itertools
import logging

import numpy as np
from scipy.stats import poisson

from polynomial import Polynomial
from pomdp_model import Belief, PolicyPartition, Pomdp, full_belief_variables

AD_TRANSITIONS = {
    "a0": [[0.8, 0.2, 0.1], [0.1, 0.7, 0.2], [0.1, 0.1, 0.7]],
    "a1": [[0.5, 0.3, 0.2], [0.3, 0.6, 0.2], [0.2, 0.1, 0.6]],
}


class AdSchedulingSpec:
    def __init__(self, rates=(2.0, 4.0, 6.0), thresholds=(3, 6), transitions=None, policy_threshold: float = 0.5, initial: str = "uniform"):
        """
        Interactive ad-scheduling model: three interest levels observed through like counts.
        rates: Poisson rate of likes per interest level (> 0)
        thresholds: like-count cut points gamma1 < gamma2 splitting observations z1/z2/z3
        transitions: dict action -> column-stochastic 3x3 matrix (default: no ads / show ads)
        policy_threshold: show no ads while b(q1) + b(q2) <= threshold
        initial: 'uniform' or 'first' (all mass on q1)
        """
        self.rates = tuple(float(r) for r in rates)
        self.thresholds = tuple(thresholds)
        self.transitions = transitions or AD_TRANSITIONS
        self.policy_threshold = policy_threshold
        self.initial = initial
        if len(self.rates) != 3 or any(r <= 0 for r in self.rates):
            raise ValueError(f"Three positive Poisson rates are required, got {self.rates}")
        if len(self.thresholds) != 2 or not self.thresholds[0] < self.thresholds[1]:
            raise ValueError(f"Thresholds must satisfy gamma1 < gamma2, got {self.thresholds}")
        if initial not in ("uniform", "first"):
            raise ValueError(f"Unknown initial belief '{initial}' (expected 'uniform' or 'first')")


def ad_observation_table(rates, thresholds) -> np.ndarray:
    """
    Poisson partial sums: z1 = P(N <= g1), z2 = P(g1 < N <= g2), z3 = P(N > g2).
    return: np.ndarray (len(rates), 3)
    """
    low, high = thresholds
    table = []
    for rate in rates:
        below_low = poisson.cdf(low, rate)
        below_high = poisson.cdf(high, rate)
        table.append([below_low, below_high - below_low, 1.0 - below_high])
    return np.array(table)


def build_ad_pomdp(spec: AdSchedulingSpec | None = None) -> Pomdp:
    """
    3-state, 2-action, 3-observation ad-scheduling POMDP.
    return: Pomdp
    """
    spec = spec or AdSchedulingSpec()
    actions = list(spec.transitions)
    transition = np.array([spec.transitions[a] for a in actions], dtype=float)
    table = ad_observation_table(spec.rates, spec.thresholds)
    observation = np.array([table for _ in actions])
    initial = Belief.uniform(3) if spec.initial == "uniform" else Belief.point_mass(3, 0)
    pomdp = Pomdp(["q1", "q2", "q3"], actions, ["z1", "z2", "z3"], transition, observation, initial, name="ad")
    logging.debug(f"Ad-scheduling model built: {pomdp!r}")
    return pomdp


def ad_policy(pomdp: Pomdp, threshold: float = 0.5) -> PolicyPartition:
    """
    No ads (first action) while b(q1) + b(q2) <= threshold, ads otherwise.
    return: PolicyPartition
    """
    names = full_belief_variables(pomdp.n_states)
    guard = Polynomial.variable(names, "b1") + Polynomial.variable(names, "b2") - threshold
    return PolicyPartition([(guard, pomdp.actions[0])], pomdp.actions[1])


class LatticeTeachingSpec:
    def __init__(self, width: int = 4, height: int = 4, initial=(1, 1), target=(3, 3)):
        """
        Learner on a width x height lattice of hypotheses; cells are 1-based (row, column).
        initial: learner's starting hypothesis h0
        target: hypothesis h* to teach
        """
        self.width = width
        self.height = height
        self.initial = tuple(initial)
        self.target = tuple(target)
        if width < 1 or height < 1:
            raise ValueError(f"Lattice must be at least 1x1, got {height}x{width}")
        for label, cell in (("initial", self.initial), ("target", self.target)):
            if not (1 <= cell[0] <= height and 1 <= cell[1] <= width):
                raise ValueError(f"{label} hypothesis {cell} is outside the {height}x{width} lattice")
        if self.initial == self.target:
            raise ValueError("Initial and target hypotheses must differ")

    def cells(self):
        return list(itertools.product(range(1, self.height + 1), range(1, self.width + 1)))


def cell_name(prefix: str, cell) -> str:
    return f"{prefix}_{cell[0]}_{cell[1]}"


def l1_distance(first, second) -> int:
    return abs(first[0] - second[0]) + abs(first[1] - second[1])


def consistent(hypothesis, example) -> bool:
    """An example flags its own cell as explored, ruling that hypothesis out."""
    return tuple(hypothesis) != tuple(example)


def version_space(spec: LatticeTeachingSpec, examples):
    """
    Hypotheses consistent with every example shown so far.
    return: list of cells
    """
    return [h for h in spec.cells() if all(consistent(h, x) for x in examples)]


def build_lattice_pomdp(spec: LatticeTeachingSpec | None = None) -> Pomdp:
    """
    Learning POMDP: states are hypotheses, actions are examples, observations are binary labels.
    A learner contradicted by an example moves uniformly to the l1-nearest consistent
    hypotheses and stays put otherwise. Labels are deterministic: y_pos iff consistent.
    return: Pomdp
    """
    spec = spec or LatticeTeachingSpec()
    cells = spec.cells()
    n = len(cells)
    if n < 2:
        raise ValueError("A teaching lattice needs at least two hypotheses")
    transition = np.zeros((n, n, n))
    observation = np.zeros((n, n, 2))
    for a, example in enumerate(cells):
        for j, hypothesis in enumerate(cells):
            if consistent(hypothesis, example):
                transition[a, j, j] = 1.0
                continue
            candidates = [i for i, h in enumerate(cells) if consistent(h, example)]
            best = min(l1_distance(cells[i], hypothesis) for i in candidates)
            nearest = [i for i in candidates if l1_distance(cells[i], hypothesis) == best]
            for i in nearest:
                transition[a, i, j] = 1.0 / len(nearest)
        for q, hypothesis in enumerate(cells):
            observation[a, q, 1 if consistent(hypothesis, example) else 0] = 1.0
    initial = Belief.point_mass(n, cells.index(spec.initial))
    pomdp = Pomdp([cell_name("h", c) for c in cells], [cell_name("x", c) for c in cells], ["y_neg", "y_pos"], transition, observation, initial, name="lattice")
    logging.debug(f"Lattice teaching model built: {pomdp!r}")
    return pomdp


def teaching_unsafe_states(spec: LatticeTeachingSpec):
    """
    Every hypothesis but the target: belief in h* above `performance` is the
    safety statement sum(b over these) <= 1 - performance.
    return: list of state names
    """
    return [cell_name("h", c) for c in spec.cells() if c != spec.target]


BUILTIN_MODELS = ("ad", "ad-first", "lattice")


def build_builtin(name: str) -> Pomdp:
    """
    Named built-in models for the CLI.
    return: Pomdp
    """
    if name == "ad":
        return build_ad_pomdp()
    if name == "ad-first":
        return build_ad_pomdp(AdSchedulingSpec(initial="first"))
    if name == "lattice":
        return build_lattice_pomdp()
    raise ValueError(f"Unknown built-in model '{name}' (known: {', '.join(BUILTIN_MODELS)})")
