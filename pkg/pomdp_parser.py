import logging
import os

import numpy as np

from polynomial import PolynomialSyntaxError, parse_polynomial
from pomdp_model import Belief, PolicyPartition, Pomdp, full_belief_variables

KEYWORDS = ("discount", "values", "states", "actions", "observations", "start", "T", "O", "R", "Tcol")


class PomdpFormatError(ValueError):
    """Raised on malformed .pomdp or policy input."""


def _is_number(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


class PomdpParser:
    def __init__(self, path: str):
        """
        Cassandra-style .pomdp reader with the Tcol orientation stanza.
        A full `T: a` matrix is column-stochastic when Tcol is true (default):
        row i lists P(next=i | current=j). Row forms `T: a : s` and entry forms
        `T: a : s : s' p` keep their usual meaning P(s' | s).
        path: model file
        """
        self.path = path
        self.name = os.path.splitext(os.path.basename(path))[0]
        self.lines = []
        with open(path, encoding="utf-8") as f:
            for number, raw in enumerate(f, start=1):
                line = raw.split("#", 1)[0].strip()
                if line:
                    self.lines.append((number, line))
        self.states, self.actions, self.observations = [], [], []
        self.column_stochastic = True
        self.transition = None
        self.observation = None
        self.rewards = None
        self.start = None

    def _error(self, number: int, message: str):
        return PomdpFormatError(f"{self.path}:{number}: {message}")

    def _stanzas(self):
        stanzas = []
        for number, line in self.lines:
            head = line.replace(":", " : ").split()
            if head and head[0] in KEYWORDS and len(head) > 1 and head[1] == ":":
                stanzas.append([number, line, []])
            elif not stanzas:
                raise self._error(number, f"Expected a stanza keyword, found '{line}'")
            else:
                stanzas[-1][2].append(line)
        return stanzas

    @staticmethod
    def _fields(line: str):
        parts = line.replace(":", " : ").split()
        fields, current = [], []
        for token in parts[2:]:
            if token == ":":
                fields.append(current)
                current = []
            else:
                current.append(token)
        fields.append(current)
        return parts[0], fields

    def _get_sao(self, number: int, fields, body, label: str):
        tokens = [t for field in fields for t in field] + [t for line in body for t in line.split()]
        if len(tokens) == 1 and tokens[0].isdigit():
            count = int(tokens[0])
            prefix = {"states": "s", "actions": "a", "observations": "o"}[label]
            return [f"{prefix}{i}" for i in range(count)]
        if not tokens:
            raise self._error(number, f"No {label} declared")
        return tokens

    def _index(self, number: int, token: str, names):
        if token == "*":
            return slice(None)
        if token in names:
            return names.index(token)
        if token.isdigit() and int(token) < len(names):
            return int(token)
        raise self._error(number, f"Unknown name '{token}' (known: {names})")

    def _numbers(self, number: int, tokens, count: int):
        if len(tokens) != count or not all(_is_number(t) for t in tokens):
            raise self._error(number, f"Expected {count} numbers, found {tokens}")
        return np.array([float(t) for t in tokens])

    def _get_transition_kernel(self, number: int, fields, body):
        n = len(self.states)
        action = self._index(number, fields[0][0], self.actions) if fields[0] else None
        if action is None:
            raise self._error(number, "T stanza without an action")
        tokens = [t for line in body for t in line.split()]
        if len(fields) == 3:
            start = self._index(number, fields[1][0], self.states)
            tail = fields[2]
            following = self._index(number, tail[0], self.states)
            value = tail[1] if len(tail) > 1 else (tokens[0] if tokens else "")
            self.transition[action, following, start] = self._numbers(number, [value], 1)[0]
        elif len(fields) == 2:
            start = self._index(number, fields[1][0], self.states)
            if tokens == ["uniform"]:
                self.transition[action, :, start] = 1.0 / n
            else:
                probs = self._numbers(number, tokens, n)
                self.transition[action, :, start] = probs[:, None] if isinstance(start, slice) else probs
        elif tokens == ["identity"]:
            self.transition[action] = np.eye(n)
        elif tokens == ["uniform"]:
            self.transition[action] = 1.0 / n
        else:
            matrix = self._numbers(number, tokens, n * n).reshape(n, n)
            self.transition[action] = matrix if self.column_stochastic else matrix.T

    def _get_observation_kernel(self, number: int, fields, body):
        n, m = len(self.states), len(self.observations)
        action = self._index(number, fields[0][0], self.actions)
        tokens = [t for line in body for t in line.split()]
        if len(fields) == 3:
            state = self._index(number, fields[1][0], self.states)
            tail = fields[2]
            z = self._index(number, tail[0], self.observations)
            value = tail[1] if len(tail) > 1 else (tokens[0] if tokens else "")
            self.observation[action, state, z] = self._numbers(number, [value], 1)[0]
        elif len(fields) == 2:
            state = self._index(number, fields[1][0], self.states)
            if tokens == ["uniform"]:
                self.observation[action, state, :] = 1.0 / m
            else:
                self.observation[action, state, :] = self._numbers(number, tokens, m)
        elif tokens == ["identity"]:
            if n != m:
                raise self._error(number, "identity observations need as many observations as states")
            self.observation[action] = np.eye(n)
        elif tokens == ["uniform"]:
            self.observation[action] = 1.0 / m
        else:
            self.observation[action] = self._numbers(number, tokens, n * m).reshape(n, m)

    def _get_rewards(self, number: int, fields, body):
        if len(fields) < 2:
            raise self._error(number, "R stanza needs an action and a state")
        action = self._index(number, fields[0][0], self.actions)
        tail = fields[-1]
        if len(fields) == 4 and len(tail) == 2:
            value, extra = tail[1], [fields[2][0], tail[0]]
        elif len(fields) == 4 and body:
            value, extra = body[0].split()[0], [fields[2][0], tail[0]]
        elif len(fields) == 2 and len(tail) == 2:
            value, extra = tail[1], []
        else:
            raise self._error(number, "Only state-action rewards 'R: a : s : * : * value' are supported")
        if any(token != "*" for token in extra):
            raise self._error(number, "Rewards depending on next state or observation are not supported")
        state = self._index(number, fields[1][0], self.states)
        self.rewards[state, action] = self._numbers(number, [value], 1)[0]

    def _get_start_dist(self, number: int, fields, body):
        n = len(self.states)
        tokens = [t for field in fields for t in field] + [t for line in body for t in line.split()]
        if tokens == ["uniform"]:
            self.start = np.full(n, 1.0 / n)
        elif len(tokens) == 1 and not _is_number(tokens[0]):
            self.start = np.zeros(n)
            self.start[self._index(number, tokens[0], self.states)] = 1.0
        elif tokens and tokens[0] in ("include", "exclude"):
            chosen = {self._index(number, t, self.states) for t in tokens[1:]}
            mask = np.array([(i in chosen) == (tokens[0] == "include") for i in range(n)], dtype=float)
            self.start = mask / mask.sum()
        else:
            self.start = self._numbers(number, tokens, n)

    def parse(self) -> Pomdp:
        """
        Read the whole file.
        return: Pomdp
        """
        logging.debug(f"[LOAD] Parsing model file: {self.path}")
        stanzas = self._stanzas()
        deferred = []
        for number, line, body in stanzas:
            keyword, fields = self._fields(line)
            if keyword in ("states", "actions", "observations"):
                setattr(self, keyword, self._get_sao(number, fields, body, keyword))
            elif keyword == "Tcol":
                value = fields[0][0].lower() if fields[0] else ""
                if value not in ("true", "false"):
                    raise self._error(number, f"Tcol expects true or false, found '{value}'")
                self.column_stochastic = value == "true"
            elif keyword == "values":
                if fields[0] and fields[0][0] != "reward":
                    raise self._error(number, "Only 'values: reward' is supported")
            elif keyword != "discount":
                deferred.append((number, keyword, fields, body))
        if not self.states or not self.actions or not self.observations:
            raise PomdpFormatError(f"{self.path}: states, actions and observations must all be declared")
        n, k, m = len(self.states), len(self.actions), len(self.observations)
        self.transition = np.zeros((k, n, n))
        self.observation = np.zeros((k, n, m))
        for number, keyword, fields, body in deferred:
            if keyword == "T":
                self._get_transition_kernel(number, fields, body)
            elif keyword == "O":
                self._get_observation_kernel(number, fields, body)
            elif keyword == "R":
                if self.rewards is None:
                    self.rewards = np.zeros((n, k))
                self._get_rewards(number, fields, body)
            elif keyword == "start":
                self._get_start_dist(number, fields, body)
        try:
            initial = Belief(self.start) if self.start is not None else None
            pomdp = Pomdp(self.states, self.actions, self.observations, self.transition, self.observation, initial, self.rewards, self.name)
        except ValueError as e:
            raise PomdpFormatError(f"{self.path}: {e}") from e
        logging.debug(f"[LOAD] Model loaded: {pomdp!r}")
        return pomdp


def parse_pomdp(path: str) -> Pomdp:
    return PomdpParser(path).parse()


def _row(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def write_pomdp(pomdp: Pomdp, path: str, discount: float = 0.95) -> str:
    """
    Write a model in the .pomdp format (Tcol: true, full matrices).
    return: str (path)
    """
    lines = [f"# model {pomdp.name}", f"discount: {discount}", "values: reward"]
    lines.append("states: " + " ".join(pomdp.states))
    lines.append("actions: " + " ".join(pomdp.actions))
    lines.append("observations: " + " ".join(pomdp.observations))
    lines.append("Tcol: true")
    lines.append("start:")
    lines.append(_row(pomdp.initial_belief.probs))
    for a, action in enumerate(pomdp.actions):
        lines.append(f"T: {action}")
        lines += [_row(row) for row in pomdp.transition[a]]
    for a, action in enumerate(pomdp.actions):
        lines.append(f"O: {action}")
        lines += [_row(row) for row in pomdp.observation[a]]
    if pomdp.rewards is not None:
        for a, action in enumerate(pomdp.actions):
            for q, state in enumerate(pomdp.states):
                lines.append(f"R: {action} : {state} : * : * {float(pomdp.rewards[q][a])!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    logging.debug(f"Model written: {path}")
    return path


def parse_policy_text(text: str, pomdp: Pomdp, source: str = "<policy>") -> PolicyPartition:
    """
    Policy lines: `region <poly in b1..bn> -> action`, ending with `default -> action`.
    return: PolicyPartition (checked against the model)
    """
    variables = full_belief_variables(pomdp.n_states)
    regions = []
    default = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "->" not in line:
            raise PomdpFormatError(f"{source}:{number}: expected '<guard> -> <action>'")
        left, action = (part.strip() for part in line.rsplit("->", 1))
        if default is not None:
            raise PomdpFormatError(f"{source}:{number}: lines after 'default' are not allowed")
        if left == "default":
            default = action
        elif left.startswith("region "):
            try:
                regions.append((parse_polynomial(left[len("region "):], variables), action))
            except PolynomialSyntaxError as e:
                raise PomdpFormatError(f"{source}:{number}: {e}") from e
        else:
            raise PomdpFormatError(f"{source}:{number}: expected 'region' or 'default', found '{left}'")
    if default is None:
        raise PomdpFormatError(f"{source}: missing 'default -> <action>' line")
    try:
        partition = PolicyPartition(regions, default)
        partition.check(pomdp)
    except ValueError as e:
        raise PomdpFormatError(f"{source}: {e}") from e
    return partition


def parse_policy(path: str, pomdp: Pomdp) -> PolicyPartition:
    logging.debug(f"[LOAD] Parsing policy file: {path}")
    with open(path, encoding="utf-8") as f:
        return parse_policy_text(f.read(), pomdp, path)


def write_policy(partition: PolicyPartition, path: str) -> str:
    lines = [f"region {guard.to_text()} -> {action}" for guard, action in partition.regions]
    lines.append(f"default -> {partition.default_action}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return path
