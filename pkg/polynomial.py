import itertools
import logging
import math
import re
from fractions import Fraction

import numpy as np


class PolynomialSyntaxError(ValueError):
    """Raised when a polynomial text cannot be parsed."""


class LinearForm:
    """
    Affine expression over named decision symbols: constant + sum(coef * symbol).
    Used as the coefficient type of polynomials whose coefficients are LP unknowns.
    terms: dict symbol -> float
    constant: float
    """

    __slots__ = ("terms", "constant")

    def __init__(self, terms: dict | None = None, constant=0.0):
        self.terms = {k: v for k, v in (terms or {}).items() if v != 0}
        self.constant = constant

    @classmethod
    def symbol(cls, name: str):
        return cls({name: 1.0})

    def is_constant(self) -> bool:
        return not self.terms

    def symbols(self):
        return list(self.terms)

    def __add__(self, other):
        if isinstance(other, LinearForm):
            terms = dict(self.terms)
            for name, value in other.terms.items():
                terms[name] = terms.get(name, 0.0) + value
            return LinearForm(terms, self.constant + other.constant)
        return LinearForm(self.terms, self.constant + float(other))

    __radd__ = __add__

    def __neg__(self):
        return LinearForm({k: -v for k, v in self.terms.items()}, -self.constant)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, LinearForm):
            if other.is_constant():
                return self * other.constant
            if self.is_constant():
                return other * self.constant
            raise TypeError("Product of two decision expressions is not linear")
        factor = float(other)
        return LinearForm({k: v * factor for k, v in self.terms.items()}, self.constant * factor)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * (1.0 / float(other))

    def __eq__(self, other):
        if isinstance(other, LinearForm):
            return self.terms == other.terms and self.constant == other.constant
        return not self.terms and self.constant == other

    __hash__ = None

    def evaluate(self, assignment: dict) -> float:
        """
        Value of the form once every symbol is fixed.
        assignment: dict symbol -> value (missing symbols count as 0)
        return: float
        """
        return self.constant + sum(v * assignment.get(k, 0.0) for k, v in self.terms.items())

    def __repr__(self):
        parts = [f"{v:+g}*{k}" for k, v in self.terms.items()]
        return f"LinearForm({self.constant:g} {' '.join(parts)})"


def _is_zero(value) -> bool:
    if isinstance(value, LinearForm):
        return not value.terms and value.constant == 0
    return value == 0


def monomial_degree(monomial) -> int:
    return sum(monomial)


def monomial_basis(variables, max_degree: int):
    """
    All monomials of total degree <= max_degree in graded lexicographic order.
    variables: sequence of variable names (or their count)
    max_degree: int >= 0
    return: list[tuple[int, ...]]
    """
    nvars = variables if isinstance(variables, int) else len(variables)
    if max_degree < 0:
        raise ValueError(f"max_degree must be >= 0, got {max_degree}")
    basis = []
    for degree in range(max_degree + 1):
        for combo in itertools.combinations_with_replacement(range(nvars), degree):
            exponents = [0] * nvars
            for index in combo:
                exponents[index] += 1
            basis.append(tuple(exponents))
        if nvars == 0:
            break
    return basis


def graded_key(monomial):
    return (sum(monomial), tuple(-e for e in monomial))


class Polynomial:
    def __init__(self, variables, terms: dict | None = None):
        """
        Sparse multivariate polynomial.
        variables: ordered variable names
        terms: dict exponent tuple -> coefficient (float, Fraction or LinearForm)
        """
        self.variables = tuple(variables)
        if len(set(self.variables)) != len(self.variables):
            raise ValueError(f"Duplicate variable names: {self.variables}")
        clean = {}
        for monomial, coefficient in (terms or {}).items():
            monomial = tuple(int(e) for e in monomial)
            if len(monomial) != len(self.variables):
                raise ValueError(f"Monomial {monomial} does not match variables {self.variables}")
            if any(e < 0 for e in monomial):
                raise ValueError(f"Negative exponent in {monomial}")
            if not _is_zero(coefficient):
                clean[monomial] = coefficient
        self.terms = clean
        self.degree = max((sum(m) for m in clean), default=0)

    @classmethod
    def zero(cls, variables):
        return cls(variables)

    @classmethod
    def constant(cls, variables, value):
        variables = tuple(variables)
        return cls(variables, {(0,) * len(variables): value})

    @classmethod
    def variable(cls, variables, name: str):
        variables = tuple(variables)
        if name not in variables:
            raise ValueError(f"Unknown variable '{name}' (known: {variables})")
        exponents = tuple(1 if v == name else 0 for v in variables)
        return cls(variables, {exponents: 1.0})

    @classmethod
    def monomial(cls, variables, exponents, coefficient=1.0):
        return cls(variables, {tuple(exponents): coefficient})

    def is_zero(self) -> bool:
        return not self.terms

    def is_symbolic(self) -> bool:
        return any(isinstance(c, LinearForm) for c in self.terms.values())

    def coefficient(self, monomial):
        return self.terms.get(tuple(monomial), 0.0)

    def degree_in(self, names) -> int:
        """
        Total degree restricted to a subset of the variables.
        names: iterable of variable names
        return: int
        """
        positions = [i for i, v in enumerate(self.variables) if v in set(names)]
        return max((sum(m[i] for i in positions) for m in self.terms), default=0)

    def extend(self, variables):
        """
        Re-express the polynomial over a superset of its variables.
        variables: ordered names containing every current variable
        return: Polynomial
        """
        variables = tuple(variables)
        if variables == self.variables:
            return self
        missing = [v for v in self.variables if v not in variables]
        if missing:
            raise ValueError(f"Cannot drop variables {missing} while extending")
        index = [variables.index(v) for v in self.variables]
        terms = {}
        for monomial, coefficient in self.terms.items():
            exponents = [0] * len(variables)
            for position, e in zip(index, monomial):
                exponents[position] = e
            terms[tuple(exponents)] = coefficient
        return Polynomial(variables, terms)

    def _union(self, other):
        variables = self.variables + tuple(v for v in other.variables if v not in self.variables)
        return self.extend(variables), other.extend(variables)

    def _coerce(self, other):
        if isinstance(other, Polynomial):
            return other
        return Polynomial.constant(self.variables, other)

    def __add__(self, other):
        left, right = self._union(self._coerce(other))
        terms = dict(left.terms)
        for monomial, coefficient in right.terms.items():
            terms[monomial] = terms[monomial] + coefficient if monomial in terms else coefficient
        return Polynomial(left.variables, terms)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.variables, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return (-self) + other

    def scale(self, factor):
        """
        Multiply every coefficient by a scalar (number, Fraction or LinearForm).
        return: Polynomial
        """
        terms = {}
        for monomial, coefficient in self.terms.items():
            if isinstance(factor, LinearForm) and not isinstance(coefficient, LinearForm):
                terms[monomial] = factor * coefficient
            else:
                terms[monomial] = coefficient * factor
        return Polynomial(self.variables, terms)

    def __mul__(self, other):
        if not isinstance(other, Polynomial):
            return self.scale(other)
        left, right = self._union(other)
        terms = {}
        for m1, c1 in left.terms.items():
            for m2, c2 in right.terms.items():
                monomial = tuple(a + b for a, b in zip(m1, m2))
                if isinstance(c2, LinearForm) and not isinstance(c1, LinearForm):
                    product = c2 * c1
                else:
                    product = c1 * c2
                terms[monomial] = terms[monomial] + product if monomial in terms else product
        return Polynomial(left.variables, terms)

    def __rmul__(self, other):
        return self.scale(other)

    def __pow__(self, exponent: int):
        if exponent < 0:
            raise ValueError("Negative powers are not polynomial")
        result = Polynomial.constant(self.variables, 1)
        base = self
        while exponent:
            if exponent & 1:
                result = result * base
            base = base * base
            exponent >>= 1
        return result

    def evaluate(self, point):
        """
        Evaluate at a point, exactly when the point and coefficients are Fractions.
        point: sequence of values, one per variable
        return: scalar (or LinearForm for decision polynomials)
        """
        if len(point) != len(self.variables):
            raise ValueError(f"Point has {len(point)} coordinates, polynomial has {len(self.variables)} variables")
        powers = [[1] for _ in point]
        total = 0
        for monomial, coefficient in self.terms.items():
            value = 1
            for i, e in enumerate(monomial):
                if e:
                    cache = powers[i]
                    while len(cache) <= e:
                        cache.append(cache[-1] * point[i])
                    value = value * cache[e]
            total = total + coefficient * value
        return total

    def evaluate_many(self, points) -> np.ndarray:
        """
        Float evaluation at many points at once.
        points: array (count, len(variables))
        return: np.ndarray (count,)
        """
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points.reshape(1, -1)
        if points.shape[1] != len(self.variables):
            raise ValueError(f"Points have {points.shape[1]} coordinates, polynomial has {len(self.variables)} variables")
        total = np.zeros(points.shape[0])
        for monomial, coefficient in self.terms.items():
            total += float(coefficient) * np.prod(points ** np.array(monomial), axis=1)
        return total

    def substitute(self, name: str, replacement):
        """
        Replace one variable by a polynomial.
        name: variable to replace
        replacement: Polynomial (or scalar)
        return: Polynomial over the remaining variables plus the replacement's variables
        """
        if name not in self.variables:
            return self
        position = self.variables.index(name)
        remaining = tuple(v for v in self.variables if v != name)
        if not isinstance(replacement, Polynomial):
            replacement = Polynomial.constant(remaining, replacement)
        groups = {}
        for monomial, coefficient in self.terms.items():
            rest = monomial[:position] + monomial[position + 1:]
            groups.setdefault(monomial[position], {})[rest] = coefficient
        result = Polynomial.zero(remaining)
        for power in sorted(groups):
            result = result + Polynomial(remaining, groups[power]) * (replacement ** power)
        return result

    def map_coefficients(self, function):
        return Polynomial(self.variables, {m: function(c) for m, c in self.terms.items()})

    def to_exact(self):
        """
        Same polynomial with Fraction coefficients (exact binary value of each float).
        return: Polynomial
        """
        if self.is_symbolic():
            raise TypeError("Decision polynomials have no exact value")
        return self.map_coefficients(Fraction)

    def with_solution(self, assignment: dict):
        """
        Replace decision coefficients by their values in an LP assignment.
        return: Polynomial with float coefficients
        """
        return self.map_coefficients(lambda c: c.evaluate(assignment) if isinstance(c, LinearForm) else float(c))

    def sorted_terms(self):
        return sorted(self.terms.items(), key=lambda item: graded_key(item[0]))

    def to_text(self) -> str:
        """
        Round-trip text: c*b1^e1*...*bn^en terms joined by + / -.
        return: str
        """
        if self.is_symbolic():
            raise TypeError("Decision polynomials have no text form")
        if not self.terms:
            return "0"
        pieces = []
        for monomial, coefficient in self.sorted_terms():
            value = float(coefficient)
            sign = "-" if value < 0 else "+"
            magnitude = abs(value)
            factors = []
            for name, e in zip(self.variables, monomial):
                if e == 1:
                    factors.append(name)
                elif e > 1:
                    factors.append(f"{name}^{e}")
            if not factors:
                body = repr(magnitude)
            elif magnitude == 1.0:
                body = "*".join(factors)
            else:
                body = "*".join([repr(magnitude)] + factors)
            pieces.append((sign, body))
        first_sign, first_body = pieces[0]
        text = ("-" if first_sign == "-" else "") + first_body
        for sign, body in pieces[1:]:
            text += f" {sign} {body}"
        return text

    def __str__(self):
        return self.to_text() if not self.is_symbolic() else repr(self)

    def __repr__(self):
        return f"Polynomial({self.variables}, {len(self.terms)} terms, degree {self.degree})"


_TOKEN = re.compile(r"\s*(?:(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[+\-*^]))")


def _tokenize(text: str):
    tokens = []
    position = 0
    text = text.rstrip()
    while position < len(text):
        match = _TOKEN.match(text, position)
        if not match or match.end() == position:
            raise PolynomialSyntaxError(f"Unexpected character at {position} in '{text}'")
        kind = match.lastgroup
        tokens.append((kind, match.group(kind)))
        position = match.end()
    return tokens


def parse_polynomial(text: str, variables=None):
    """
    Parse the text syntax produced by Polynomial.to_text.
    text: e.g. "b1 + b2 - 0.5" or "3*b1^2*b2 - b3"
    variables: ordered variable names; when None, names are taken in order of appearance
    return: Polynomial
    """
    tokens = _tokenize(text)
    if not tokens:
        raise PolynomialSyntaxError("Empty polynomial text")
    if variables is None:
        seen = []
        for kind, value in tokens:
            if kind == "name" and value not in seen:
                seen.append(value)
        variables = seen
    variables = tuple(variables)
    terms = {}
    index = 0
    expect_term = True
    sign = 1.0
    while index < len(tokens):
        kind, value = tokens[index]
        if expect_term and kind == "op" and value in "+-":
            sign = sign * (-1.0 if value == "-" else 1.0)
            index += 1
            continue
        if not expect_term:
            if kind == "op" and value in "+-":
                expect_term = True
                sign = 1.0
                continue
            raise PolynomialSyntaxError(f"Expected '+' or '-' before '{value}' in '{text}'")
        coefficient = sign
        exponents = [0] * len(variables)
        while True:
            if index >= len(tokens):
                raise PolynomialSyntaxError(f"Dangling operator in '{text}'")
            kind, value = tokens[index]
            if kind == "number":
                coefficient *= float(value)
                index += 1
            elif kind == "name":
                if value not in variables:
                    raise PolynomialSyntaxError(f"Unknown variable '{value}' (expected one of {variables})")
                power = 1
                index += 1
                if index < len(tokens) and tokens[index] == ("op", "^"):
                    if index + 1 >= len(tokens) or tokens[index + 1][0] != "number" or not tokens[index + 1][1].isdigit():
                        raise PolynomialSyntaxError(f"Exponent must be a non-negative integer in '{text}'")
                    power = int(tokens[index + 1][1])
                    index += 2
                exponents[variables.index(value)] += power
            else:
                raise PolynomialSyntaxError(f"Unexpected '{value}' in '{text}'")
            if index < len(tokens) and tokens[index] == ("op", "*"):
                index += 1
                continue
            break
        monomial = tuple(exponents)
        terms[monomial] = terms.get(monomial, 0.0) + coefficient
        expect_term = False
    if expect_term:
        raise PolynomialSyntaxError(f"Dangling operator in '{text}'")
    return Polynomial(variables, terms)


class RationalMap:
    def __init__(self, numerators: dict, denominator: Polynomial, validate: bool = True, seed: int = 0):
        """
        Belief update written as target_i = M_i / N with degree-1 M_i and N.
        numerators: dict target variable name -> Polynomial M_i (empty for a single-state model)
        denominator: Polynomial N shared by all coordinates
        validate: check N >= 0 on simplex vertices and 1000 Dirichlet samples
        """
        if denominator.is_zero():
            raise ValueError("RationalMap denominator is identically zero")
        self.targets = tuple(numerators)
        variables = list(denominator.variables)
        for poly in numerators.values():
            variables += [v for v in poly.variables if v not in variables]
        self.variables = tuple(variables)
        self.numerators = {k: p.extend(self.variables) for k, p in numerators.items()}
        self.denominator = denominator.extend(self.variables)
        for name, poly in list(self.numerators.items()) + [("denominator", self.denominator)]:
            if poly.degree > 1:
                raise ValueError(f"RationalMap {name} has degree {poly.degree} > 1")
        if validate:
            self.check_denominator(seed=seed)

    def check_denominator(self, n_samples: int = 1000, seed: int = 0, tolerance: float = 1e-12):
        """
        Check N >= 0 on the simplex spanned by the map's variables.
        return: float (smallest sampled value)
        """
        dimension = len(self.variables)
        points = [tuple(0.0 for _ in range(dimension))]
        for i in range(dimension):
            points.append(tuple(1.0 if j == i else 0.0 for j in range(dimension)))
        points += [tuple(p) for p in sample_simplex(dimension, n_samples, seed)]
        smallest = min(float(self.denominator.evaluate(p)) for p in points)
        if smallest < -tolerance:
            raise ValueError(f"RationalMap denominator is negative on the simplex (min {smallest:.3e})")
        logging.debug(f"RationalMap denominator checked on {len(points)} points, min {smallest:.3e}")
        return smallest

    def apply(self, point):
        """
        Image of a point (coordinates ordered as self.variables).
        return: tuple of target values in self.targets order
        """
        denominator = self.denominator.evaluate(point)
        if denominator == 0:
            raise ZeroDivisionError("RationalMap denominator vanishes at this point")
        return tuple(self.numerators[name].evaluate(point) / denominator for name in self.targets)


def compose_cleared(V: Polynomial, f: RationalMap, degree: int | None = None):
    """
    Denominator-cleared composition N^d * V(M/N).
    V: polynomial whose variables include f.targets (others pass through)
    f: RationalMap
    degree: clearing degree d, defaults to the degree of V in the target variables
    return: Polynomial P with P(b) = N(b)^d * V(M(b)/N(b)) wherever N(b) != 0
    """
    d = V.degree_in(f.targets) if degree is None else degree
    variables = V.variables + tuple(v for v in f.variables if v not in V.variables)
    positions = [(i, name) for i, name in enumerate(V.variables) if name in f.targets]
    others = [i for i, name in enumerate(V.variables) if name not in f.targets]
    numerators = {name: f.numerators[name].extend(variables) for name in f.targets}
    denominator = f.denominator.extend(variables)
    denominator_powers = [Polynomial.constant(variables, 1)]
    numerator_powers = {name: [Polynomial.constant(variables, 1)] for name in f.targets}
    products = {}
    result = {}
    for monomial, coefficient in V.terms.items():
        target_exponents = tuple(monomial[i] for i, _ in positions)
        target_degree = sum(target_exponents)
        if target_degree > d:
            raise ValueError(f"Clearing degree {d} is below the term degree {target_degree}")
        # N^(d - k) * prod M_i^(e_i), shared by every term with the same target exponents
        key = target_exponents
        if key not in products:
            while len(denominator_powers) <= d - target_degree:
                denominator_powers.append(denominator_powers[-1] * denominator)
            product = denominator_powers[d - target_degree]
            for (i, name), e in zip(positions, target_exponents):
                cache = numerator_powers[name]
                while len(cache) <= e:
                    cache.append(cache[-1] * numerators[name])
                product = product * cache[e]
            products[key] = product
        passthrough = [0] * len(variables)
        for i in others:
            passthrough[variables.index(V.variables[i])] = monomial[i]
        for m, c in products[key].terms.items():
            shifted = tuple(a + b for a, b in zip(m, passthrough))
            if isinstance(coefficient, LinearForm):
                value = coefficient * c
            else:
                value = c * coefficient
            result[shifted] = result[shifted] + value if shifted in result else value
    return Polynomial(variables, result)


def eliminate_coordinate(poly: Polynomial, name: str, others):
    """
    Substitute name := 1 - sum(others), removing the simplex equality.
    return: Polynomial over the remaining variables
    """
    others = tuple(others)
    replacement = Polynomial.constant(others, 1.0)
    for other in others:
        replacement = replacement - Polynomial.variable(others, other)
    result = poly.substitute(name, replacement)
    ordered = tuple(v for v in others) + tuple(v for v in result.variables if v not in others)
    return result.extend(ordered)


def sample_simplex(dimension: int, count: int, seed: int = 0):
    """
    Uniform points of {x >= 0, sum(x) <= 1} in `dimension` coordinates.
    return: np.ndarray of shape (count, dimension)
    """
    rng = np.random.default_rng(seed)
    if dimension == 0:
        return np.zeros((count, 0))
    return rng.dirichlet(np.ones(dimension + 1), size=count)[:, :dimension]


def simplex_moment(exponents) -> Fraction:
    """
    Mean of x^e under the uniform distribution on {x >= 0, sum(x) <= 1}.
    return: Fraction
    """
    k = len(exponents)
    numerator = math.factorial(k)
    for e in exponents:
        numerator *= math.factorial(e)
    return Fraction(numerator, math.factorial(k + sum(exponents)))


def simplex_average(poly: Polynomial, names=None):
    """
    Mean of a polynomial over the uniform simplex in the given variables.
    names: simplex variables (default: all of them)
    return: scalar or LinearForm
    """
    names = poly.variables if names is None else tuple(names)
    if any(v not in names for v in poly.variables):
        raise ValueError(f"simplex_average expects variables within {names}")
    poly = poly.extend(tuple(names))
    total = 0
    for monomial, coefficient in poly.terms.items():
        moment = simplex_moment(monomial)
        total = total + coefficient * (moment if isinstance(coefficient, Fraction) else float(moment))
    return total
