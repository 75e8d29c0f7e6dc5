import asyncio
import functools
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction

import numpy as np

from polynomial import Polynomial, RationalMap, eliminate_coordinate

STOCHASTIC_TOLERANCE = 1e-9
LIKELIHOOD_TOLERANCE = 1e-12


class ZeroLikelihood(Exception):
    """Raised when an observation is impossible from the given belief and action."""


def worker_count() -> int:
    """
    Worker threads for parallel batches (POMDP_VERIFY_THREADS, default min(4, cpu count)).
    return: int >= 1
    """
    value = os.getenv("POMDP_VERIFY_THREADS")
    if not value:
        return min(4, os.cpu_count() or 1)
    try:
        return max(1, int(value))
    except ValueError:
        logging.warning(f"Ignoring invalid POMDP_VERIFY_THREADS='{value}'")
        return 1


async def _gather_calls(calls, workers: int):
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        tasks = [loop.run_in_executor(pool, functools.partial(function, *args)) for function, args in calls]
        return await asyncio.gather(*tasks)


def run_parallel(calls, workers: int | None = None):
    """
    Run independent calls on a thread pool; results come back in call order.
    calls: list of (callable, args tuple)
    workers: thread count (default worker_count())
    return: list of results
    """
    if not calls:
        return []
    workers = workers or worker_count()
    if workers == 1 or len(calls) == 1:
        return [function(*args) for function, args in calls]
    return asyncio.run(_gather_calls(calls, workers))


def belief_variables(n_states: int):
    """Names of the eliminated coordinates b1..b{n-1}."""
    return tuple(f"b{i + 1}" for i in range(n_states - 1))


def full_belief_variables(n_states: int):
    return tuple(f"b{i + 1}" for i in range(n_states))


class Belief:
    def __init__(self, probs, tolerance: float = STOCHASTIC_TOLERANCE):
        """
        Point of the probability simplex.
        probs: sequence of n probabilities (nonnegative, summing to 1)
        """
        probs = np.array(probs, dtype=float)
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError(f"Belief must be a nonempty vector, got shape {probs.shape}")
        if np.any(probs < -tolerance) or abs(probs.sum() - 1.0) > tolerance:
            raise ValueError(f"Belief is not on the simplex: {probs} (sum {probs.sum():.12g})")
        probs = np.clip(probs, 0.0, None)
        probs.setflags(write=False)
        self.probs = probs

    @classmethod
    def uniform(cls, n_states: int):
        return cls(np.full(n_states, 1.0 / n_states))

    @classmethod
    def point_mass(cls, n_states: int, index: int):
        probs = np.zeros(n_states)
        probs[index] = 1.0
        return cls(probs)

    @property
    def n_states(self) -> int:
        return self.probs.size

    def eliminated(self):
        """Coordinates (b1..b{n-1}) used by certificate polynomials."""
        return tuple(float(v) for v in self.probs[:-1])

    def __iter__(self):
        return iter(self.probs)

    def __len__(self):
        return self.probs.size

    def __getitem__(self, index):
        return self.probs[index]

    def __eq__(self, other):
        return isinstance(other, Belief) and np.array_equal(self.probs, other.probs)

    __hash__ = None

    def __repr__(self):
        return f"Belief({np.array2string(self.probs, precision=4)})"


def _read_only(array):
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


class Pomdp:
    def __init__(self, states, actions, observations, transition, observation, initial_belief=None, rewards=None, name: str = "pomdp"):
        """
        Finite POMDP.
        states, actions, observations: ordered names
        transition: array (|A|, n, n), transition[a][i][j] = P(next=i | current=j) (column-stochastic)
        observation: array (|A|, n, |Z|), observation[a][q][z] = P(z | next state q, action a)
        initial_belief: Belief (default uniform)
        rewards: optional array (n, |A|) with R(q, a)
        name: model name
        """
        self.name = name
        self.states = tuple(str(s) for s in states)
        self.actions = tuple(str(a) for a in actions)
        self.observations = tuple(str(z) for z in observations)
        n = len(self.states)
        if n < 1 or not self.actions or not self.observations:
            raise ValueError("A POMDP needs at least one state, one action and one observation")
        for label, names in (("state", self.states), ("action", self.actions), ("observation", self.observations)):
            if len(set(names)) != len(names):
                raise ValueError(f"Duplicate {label} names: {names}")
        self.transition = _read_only(transition)
        self.observation = _read_only(observation)
        if self.transition.shape != (len(self.actions), n, n):
            raise ValueError(f"Transition shape {self.transition.shape} != {(len(self.actions), n, n)}")
        if self.observation.shape != (len(self.actions), n, len(self.observations)):
            raise ValueError(f"Observation shape {self.observation.shape} != {(len(self.actions), n, len(self.observations))}")
        for a, action in enumerate(self.actions):
            T = self.transition[a]
            if np.any(T < -STOCHASTIC_TOLERANCE) or np.any(T > 1 + STOCHASTIC_TOLERANCE):
                raise ValueError(f"Transition entries of '{action}' leave [0, 1]")
            columns = T.sum(axis=0)
            if np.any(np.abs(columns - 1.0) > STOCHASTIC_TOLERANCE):
                raise ValueError(f"Transition columns of '{action}' do not sum to 1: {columns}")
            O = self.observation[a]
            if np.any(O < -STOCHASTIC_TOLERANCE) or np.any(O > 1 + STOCHASTIC_TOLERANCE):
                raise ValueError(f"Observation entries of '{action}' leave [0, 1]")
            rows = O.sum(axis=1)
            if np.any(np.abs(rows - 1.0) > STOCHASTIC_TOLERANCE):
                raise ValueError(f"Observation rows of '{action}' do not sum to 1: {rows}")
        self.initial_belief = initial_belief if initial_belief is not None else Belief.uniform(n)
        if self.initial_belief.n_states != n:
            raise ValueError(f"Initial belief has {self.initial_belief.n_states} entries for {n} states")
        self.rewards = None
        if rewards is not None:
            self.rewards = _read_only(rewards)
            if self.rewards.shape != (n, len(self.actions)):
                raise ValueError(f"Reward shape {self.rewards.shape} != {(n, len(self.actions))}")

    @property
    def n_states(self) -> int:
        return len(self.states)

    def action_index(self, action) -> int:
        if isinstance(action, (int, np.integer)):
            if not 0 <= action < len(self.actions):
                raise ValueError(f"Action index {action} out of range")
            return int(action)
        if action not in self.actions:
            raise ValueError(f"Unknown action '{action}' (known: {self.actions})")
        return self.actions.index(action)

    def observation_index(self, observation) -> int:
        if isinstance(observation, (int, np.integer)):
            if not 0 <= observation < len(self.observations):
                raise ValueError(f"Observation index {observation} out of range")
            return int(observation)
        if observation not in self.observations:
            raise ValueError(f"Unknown observation '{observation}' (known: {self.observations})")
        return self.observations.index(observation)

    def state_index(self, state) -> int:
        if isinstance(state, (int, np.integer)):
            return int(state)
        if state not in self.states:
            raise ValueError(f"Unknown state '{state}' (known: {self.states})")
        return self.states.index(state)

    def with_initial_belief(self, belief: Belief):
        return Pomdp(self.states, self.actions, self.observations, self.transition, self.observation, belief, self.rewards, self.name)

    def __repr__(self):
        return f"Pomdp({self.name}: {self.n_states} states, {len(self.actions)} actions, {len(self.observations)} observations)"


def observation_likelihood(pomdp: Pomdp, b: Belief, a, z) -> float:
    """P(z | a, b)."""
    a, z = pomdp.action_index(a), pomdp.observation_index(z)
    return float(pomdp.observation[a][:, z] @ (pomdp.transition[a] @ b.probs))


def belief_update(pomdp: Pomdp, b: Belief, a, z, tolerance: float = LIKELIHOOD_TOLERANCE) -> Belief:
    """
    Bayesian filter step: predict with T, correct with O(., a, z), normalize.
    pomdp: Pomdp
    b: current belief
    a: action (name or index)
    z: observation (name or index)
    return: Belief
    """
    a, z = pomdp.action_index(a), pomdp.observation_index(z)
    # column-stochastic: T[a][i, j] = P(i | j)
    predicted = pomdp.transition[a] @ b.probs
    corrected = pomdp.observation[a][:, z] * predicted
    likelihood = corrected.sum()
    if likelihood <= tolerance:
        raise ZeroLikelihood(f"Observation '{pomdp.observations[z]}' has likelihood {likelihood:.3e} after action '{pomdp.actions[a]}'")
    posterior = np.clip(corrected / likelihood, 0.0, None)
    return Belief(posterior / posterior.sum())


class PolicyPartition:
    def __init__(self, regions, default_action: str):
        """
        First-match policy over belief space.
        regions: list of (guard Polynomial over b1..bn, action); region = {b : guard(b) <= 0}
        default_action: action when no guard holds
        """
        self.regions = [(guard, str(action)) for guard, action in regions]
        if not self.regions:
            raise ValueError("A policy partition needs at least one region")
        self.default_action = str(default_action)

    @property
    def actions(self):
        return [action for _, action in self.regions] + [self.default_action]

    def check(self, pomdp: Pomdp):
        """
        Check every referenced action and guard variable against the model.
        return: bool
        """
        variables = set(full_belief_variables(pomdp.n_states))
        for action in self.actions:
            if action not in pomdp.actions:
                raise ValueError(f"Policy references unknown action '{action}'")
        for guard, _ in self.regions:
            unknown = [v for v in guard.variables if v not in variables]
            if unknown:
                raise ValueError(f"Policy guard uses unknown variables {unknown}")
        return True

    def eliminated_guards(self, n_states: int):
        """
        Guards rewritten over b1..b{n-1} with b_n = 1 - sum(others).
        return: list of Polynomial
        """
        names = full_belief_variables(n_states)
        result = []
        for guard, _ in self.regions:
            guard = guard.extend(names)
            result.append(eliminate_coordinate(guard, names[-1], names[:-1]).extend(names[:-1]))
        return result

    def region_index(self, b: Belief) -> int:
        """Index of the first region whose guard is <= 0, len(regions) for the default."""
        names = full_belief_variables(b.n_states)
        for i, (guard, _) in enumerate(self.regions):
            if guard.extend(names).evaluate(tuple(b.probs)) <= 0:
                return i
        return len(self.regions)

    def __repr__(self):
        return f"PolicyPartition({len(self.regions)} regions, default {self.default_action})"


def policy_action(partition: PolicyPartition, b: Belief) -> str:
    """
    Action of the first region containing b, the default action otherwise.
    return: str
    """
    index = partition.region_index(b)
    return partition.regions[index][1] if index < len(partition.regions) else partition.default_action


class Trajectory:
    def __init__(self, beliefs, actions, observations, states=None):
        """
        beliefs: b_0..b_T
        actions: a_0..a_{T-1}
        observations: z_1..z_T
        states: hidden states s_0..s_T (optional)
        """
        if len(actions) != len(beliefs) - 1 or len(observations) != len(actions):
            raise ValueError(f"Inconsistent trajectory lengths: {len(beliefs)} beliefs, {len(actions)} actions, {len(observations)} observations")
        self.beliefs = list(beliefs)
        self.actions = list(actions)
        self.observations = list(observations)
        self.states = list(states) if states is not None else []

    @property
    def horizon(self) -> int:
        return len(self.actions)

    def rows(self):
        """
        CSV rows t,b1..bn,action,observation; action/observation are the pair leading to b_t.
        return: list of dict
        """
        rows = []
        for t, b in enumerate(self.beliefs):
            row = {"t": t}
            for i, value in enumerate(b.probs):
                row[f"b{i + 1}"] = repr(float(value))
            row["action"] = self.actions[t - 1] if t else ""
            row["observation"] = self.observations[t - 1] if t else ""
            rows.append(row)
        return rows


def _action_chooser(pomdp: Pomdp, policy, horizon: int):
    if policy is None:
        return lambda t, b, rng: pomdp.actions[int(rng.integers(len(pomdp.actions)))]
    if isinstance(policy, PolicyPartition):
        policy.check(pomdp)
        return lambda t, b, rng: policy_action(policy, b)
    sequence = [pomdp.actions[pomdp.action_index(a)] for a in policy]
    if len(sequence) < horizon:
        raise ValueError(f"Action sequence of length {len(sequence)} is shorter than horizon {horizon}")
    return lambda t, b, rng: sequence[t]


def simulate(pomdp: Pomdp, policy=None, horizon: int = 0, rng_seed=0, b0: Belief | None = None) -> Trajectory:
    """
    Sample one execution of the closed-loop belief system.
    pomdp: Pomdp
    policy: PolicyPartition, fixed action sequence, or None for uniformly random actions
    horizon: number of steps (>= 0)
    rng_seed: int, SeedSequence or Generator
    b0: initial belief (default pomdp.initial_belief)
    return: Trajectory
    """
    if horizon < 0:
        raise ValueError(f"Horizon must be >= 0, got {horizon}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    choose = _action_chooser(pomdp, policy, horizon)
    b = b0 if b0 is not None else pomdp.initial_belief
    state = int(rng.choice(pomdp.n_states, p=b.probs))
    beliefs, actions, observations, states = [b], [], [], [state]
    for t in range(horizon):
        action = choose(t, b, rng)
        a = pomdp.action_index(action)
        state = int(rng.choice(pomdp.n_states, p=pomdp.transition[a][:, state]))
        z = int(rng.choice(len(pomdp.observations), p=pomdp.observation[a][state]))
        b = belief_update(pomdp, b, a, z)
        beliefs.append(b)
        actions.append(action)
        observations.append(pomdp.observations[z])
        states.append(state)
    return Trajectory(beliefs, actions, observations, states)


def _simulate_batch(pomdp, policy, horizon, seeds, b0):
    return [simulate(pomdp, policy, horizon, np.random.default_rng(seed), b0) for seed in seeds]


def sample_trajectories(pomdp: Pomdp, horizon: int, n_trajectories: int, rng_seed: int = 0, policy=None, b0: Belief | None = None, workers: int | None = None):
    """
    Simulate many trajectories, one spawned seed each, in parallel batches.
    return: list of Trajectory (in seed order)
    """
    if n_trajectories < 1:
        raise ValueError(f"n_trajectories must be >= 1, got {n_trajectories}")
    seeds = np.random.SeedSequence(rng_seed).spawn(n_trajectories)
    workers = workers or worker_count()
    size = -(-n_trajectories // workers)
    batches = [seeds[i:i + size] for i in range(0, n_trajectories, size)]
    logging.debug(f"[SAMPLE] {n_trajectories} trajectories, horizon {horizon}, {len(batches)} batches")
    results = run_parallel([(_simulate_batch, (pomdp, policy, horizon, batch, b0)) for batch in batches], workers)
    return [trajectory for batch in results for trajectory in batch]


def _unique_points(points) -> np.ndarray:
    if not len(points):
        return np.zeros((0, 0))
    return np.unique(np.array(points), axis=0)


def reach_sample(pomdp: Pomdp, b0: Belief | None = None, horizon: int = 10, n_trajectories: int = 100, rng_seed: int = 0, policy=None, workers: int | None = None) -> np.ndarray:
    """
    Sampled under-approximation of the reachable belief set.
    return: np.ndarray of distinct beliefs, one per row
    """
    trajectories = sample_trajectories(pomdp, horizon, n_trajectories, rng_seed, policy, b0, workers)
    return _unique_points([b.probs for trajectory in trajectories for b in trajectory.beliefs])


def reach_enumerate(pomdp: Pomdp, b0: Belief | None = None, horizon: int = 3, policy: PolicyPartition | None = None, tolerance: float = LIKELIHOOD_TOLERANCE) -> np.ndarray:
    """
    Exact reachable beliefs up to a horizon: every action (or the policy's action) and
    every observation with nonzero likelihood.
    return: np.ndarray of distinct beliefs, one per row
    """
    if policy is not None:
        policy.check(pomdp)
    frontier = [b0 if b0 is not None else pomdp.initial_belief]
    reached = [frontier[0].probs]
    for step in range(horizon):
        following = {}
        for b in frontier:
            actions = [policy_action(policy, b)] if policy is not None else pomdp.actions
            for action in actions:
                for z in range(len(pomdp.observations)):
                    if observation_likelihood(pomdp, b, action, z) <= tolerance:
                        continue
                    posterior = belief_update(pomdp, b, action, z, tolerance)
                    following.setdefault(tuple(np.round(posterior.probs, 12)), posterior)
        frontier = list(following.values())
        reached += [b.probs for b in frontier]
        logging.debug(f"[ENUMERATE] step {step + 1}: {len(frontier)} distinct beliefs")
    return _unique_points(reached)


def rational_map(pomdp: Pomdp, a, z, exact: bool = False, validate: bool = True):
    """
    Belief update of (a, z) over the eliminated coordinates:
    M_q = O(q,a,z) * (T[q][n] + sum_i (T[q][i] - T[q][n]) x_i), N = sum_q M_q.
    exact: Fraction coefficients (for validation)
    return: RationalMap, or None when N is identically zero
    """
    a, z = pomdp.action_index(a), pomdp.observation_index(z)
    n = pomdp.n_states
    variables = belief_variables(n)
    convert = Fraction if exact else float
    T = pomdp.transition[a]
    O = pomdp.observation[a][:, z]
    numerators = []
    for q in range(n):
        terms = {(0,) * (n - 1): convert(O[q]) * convert(T[q][n - 1])}
        for i in range(n - 1):
            exponents = tuple(1 if k == i else 0 for k in range(n - 1))
            terms[exponents] = convert(O[q]) * (convert(T[q][i]) - convert(T[q][n - 1]))
        numerators.append(Polynomial(variables, terms))
    denominator = Polynomial.zero(variables)
    for poly in numerators:
        denominator = denominator + poly
    if denominator.is_zero():
        return None
    return RationalMap({name: numerators[i] for i, name in enumerate(variables)}, denominator, validate=validate)


def reward_polynomial(pomdp: Pomdp, a, exact: bool = False) -> Polynomial:
    """
    Expected immediate reward r(b, a) = sum_q b(q) R(q, a) over the eliminated coordinates.
    return: Polynomial
    """
    if pomdp.rewards is None:
        raise ValueError(f"Model '{pomdp.name}' has no rewards")
    a = pomdp.action_index(a)
    n = pomdp.n_states
    convert = Fraction if exact else float
    R = [convert(pomdp.rewards[q][a]) for q in range(n)]
    terms = {(0,) * (n - 1): R[n - 1]}
    for i in range(n - 1):
        terms[tuple(1 if k == i else 0 for k in range(n - 1))] = R[i] - R[n - 1]
    return Polynomial(belief_variables(n), terms)
