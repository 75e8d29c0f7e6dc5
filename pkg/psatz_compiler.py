import logging
from fractions import Fraction

import numpy as np

from lp_solver import LinearProgram, solve
from polynomial import LinearForm, Polynomial, monomial_basis


class DegreeMismatch(Exception):
    """Raised when no multiplier degrees can reach the target's degree."""


def floor_even(value: int) -> int:
    return value - (value % 2) if value > 0 else 0


def decision_polynomial(variables, max_degree: int, prefix: str, monomials=None):
    """
    Polynomial template whose coefficients are fresh decision symbols.
    variables: ordered variable names
    max_degree: total degree bound
    prefix: symbol prefix (symbols are prefix.c0, prefix.c1, ...)
    monomials: explicit monomial list overriding the full basis
    return: (Polynomial with LinearForm coefficients, list of symbol names)
    """
    monomials = monomial_basis(variables, max_degree) if monomials is None else monomials
    symbols = [f"{prefix}.c{i}" for i in range(len(monomials))]
    terms = {m: LinearForm.symbol(s) for m, s in zip(monomials, symbols)}
    return Polynomial(variables, terms), symbols


class PositivityConstraint:
    def __init__(self, name: str, target: Polynomial, generators=(), margin: float = 0.0, multiplier_degree: int | None = None, params: dict | None = None):
        """
        Requirement target(x) >= margin on {x : g(x) >= 0 for every generator g}.
        name: unique name (prefix of its multiplier symbols)
        target: polynomial, possibly with decision coefficients
        generators: polynomials describing the semialgebraic set
        margin: required lower bound
        multiplier_degree: degree of every generator multiplier (default from the target degree)
        params: free-form description kept with the certificate
        """
        self.name = name
        variables = list(target.variables)
        for g in generators:
            variables += [v for v in g.variables if v not in variables]
        self.variables = tuple(variables)
        self.target = target.extend(self.variables)
        self.generators = [g.extend(self.variables) for g in generators]
        self.margin = margin
        self.multiplier_degree = multiplier_degree
        self.params = params or {}

    def __repr__(self):
        return f"PositivityConstraint({self.name}, degree {self.target.degree}, {len(self.generators)} generators)"


class GramConstraint:
    def __init__(self, name: str, basis, generator: Polynomial):
        """
        Symmetric Gram matrix G with multiplier z^T G z, z the monomial basis.
        Symbols exist for the upper triangle only.
        """
        self.name = name
        self.basis = list(basis)
        self.generator = generator
        self.size = len(self.basis)
        self.symbols = {(a, b): f"{name}.G{a}_{b}" for a in range(self.size) for b in range(a, self.size)}

    def diagonal_symbols(self):
        return [self.symbols[(a, a)] for a in range(self.size)]

    def off_diagonal_symbols(self):
        return [s for (a, b), s in self.symbols.items() if a != b]

    def matrix(self, assignment: dict) -> np.ndarray:
        G = np.zeros((self.size, self.size))
        for (a, b), symbol in self.symbols.items():
            G[a, b] = G[b, a] = assignment.get(symbol, 0.0)
        return G


class PsatzEncoding:
    def __init__(self, constraint: PositivityConstraint, blocks, slack: str, rows):
        self.constraint = constraint
        self.blocks = blocks
        self.slack = slack
        self.rows = rows


def encode_psatz(constraint: PositivityConstraint) -> PsatzEncoding:
    """
    Encode target - margin = lambda + s0 + sum_j s_j g_j coefficient by coefficient.
    constraint: PositivityConstraint
    return: PsatzEncoding (equality rows over Gram symbols, decision symbols and lambda)
    """
    variables = constraint.variables
    target = constraint.target
    degree = target.degree
    factors = [Polynomial.constant(variables, 1.0)] + constraint.generators
    widest = max((g.degree for g in constraint.generators), default=0)
    blocks = []
    reachable = 0
    for j, g in enumerate(factors):
        if constraint.multiplier_degree is None:
            s_degree = floor_even(degree - g.degree)
        elif j == 0:
            s_degree = floor_even(max(degree, constraint.multiplier_degree + widest))
        else:
            s_degree = floor_even(constraint.multiplier_degree)
        reachable = max(reachable, s_degree + g.degree)
        blocks.append(GramConstraint(f"{constraint.name}.s{j}", monomial_basis(variables, s_degree // 2), g))
    if degree > reachable:
        raise DegreeMismatch(f"{constraint.name}: target degree {degree} exceeds reachable degree {reachable}")

    zero = (0,) * len(variables)
    coefficients = {}
    constants = {}
    for monomial, c in target.terms.items():
        row = coefficients.setdefault(monomial, {})
        if isinstance(c, LinearForm):
            for symbol, value in c.terms.items():
                row[symbol] = row.get(symbol, 0.0) + value
            constants[monomial] = constants.get(monomial, 0.0) + c.constant
        else:
            constants[monomial] = constants.get(monomial, 0.0) + float(c)
    constants[zero] = constants.get(zero, 0.0) - constraint.margin
    slack = f"{constraint.name}.lam"
    coefficients.setdefault(zero, {})[slack] = -1.0
    for block in blocks:
        g_terms = [(m, float(c)) for m, c in block.generator.terms.items()]
        for (a, b), symbol in block.symbols.items():
            pair = tuple(x + y for x, y in zip(block.basis[a], block.basis[b]))
            weight = 1.0 if a == b else 2.0
            for mg, cg in g_terms:
                monomial = tuple(x + y for x, y in zip(pair, mg))
                row = coefficients.setdefault(monomial, {})
                row[symbol] = row.get(symbol, 0.0) - weight * cg
    rows = []
    for monomial in sorted(set(coefficients) | set(constants)):
        expression = LinearForm(coefficients.get(monomial, {}), constants.get(monomial, 0.0))
        if expression.is_constant() and abs(expression.constant) == 0:
            continue
        rows.append((f"{constraint.name}.eq{'_'.join(map(str, monomial))}", expression))
    logging.debug(f"[PSATZ] {constraint.name}: {len(rows)} identity rows, Gram sizes {[b.size for b in blocks]}")
    return PsatzEncoding(constraint, blocks, slack, rows)


def dsos_relax(block: GramConstraint):
    """
    Diagonal-dominance restriction of a Gram matrix:
    G_aa >= sum_b u_ab, -u_ab <= G_ab <= u_ab.
    return: (list of (LinearForm, sense, name) rows, list of nonnegative bound symbols)
    """
    bounds = {}
    rows = []
    for (a, b), symbol in block.symbols.items():
        if a == b:
            continue
        u = f"{block.name}.U{a}_{b}"
        bounds[(a, b)] = u
        rows.append((LinearForm({u: 1.0, symbol: -1.0}), ">=", f"{u}.upper"))
        rows.append((LinearForm({u: 1.0, symbol: 1.0}), ">=", f"{u}.lower"))
    for a in range(block.size):
        terms = {block.symbols[(a, a)]: 1.0}
        for (x, y), u in bounds.items():
            if a in (x, y):
                terms[u] = terms.get(u, 0.0) - 1.0
        if len(terms) > 1:
            rows.append((LinearForm(terms), ">=", f"{block.name}.dd{a}"))
    return rows, list(bounds.values())


def assemble_program(name: str, encodings, decision_symbols=(), extra_variables=None, extra_rows=(), objective: LinearForm | None = None) -> LinearProgram:
    """
    Collect Psatz encodings, DSOS rows and free decision symbols into one LP.
    name: program name
    encodings: iterable of PsatzEncoding
    decision_symbols: symbols of decision polynomials (free)
    extra_variables: dict symbol -> free flag for scalars such as gamma
    extra_rows: (LinearForm, sense, name) rows added verbatim
    objective: LinearForm to minimize (feasibility when None)
    return: LinearProgram
    """
    lp = LinearProgram(name)
    for symbol in decision_symbols:
        lp.add_variable(symbol, free=True)
    for symbol, free in (extra_variables or {}).items():
        lp.add_variable(symbol, free=free)
    for encoding in encodings:
        lp.add_variable(encoding.slack)
        for block in encoding.blocks:
            for symbol in block.diagonal_symbols():
                lp.add_variable(symbol)
            for symbol in block.off_diagonal_symbols():
                lp.add_variable(symbol, free=True)
            rows, bounds = dsos_relax(block)
            for u in bounds:
                lp.add_variable(u)
            for expression, sense, row_name in rows:
                lp.add_constraint(expression, sense, row_name)
        for row_name, expression in encoding.rows:
            lp.add_constraint(expression, "==", row_name)
    for expression, sense, row_name in extra_rows:
        lp.add_constraint(expression, sense, row_name)
    if objective is not None:
        lp.set_objective(objective)
    logging.debug(f"[PSATZ] assembled {lp!r}")
    return lp


class PsatzWitness:
    def __init__(self, name: str, variables, bases, grams, generators, margin: float = 0.0):
        """
        Solved multipliers: s0 first, then one per generator.
        bases: list of monomial lists
        grams: list of symmetric numpy matrices
        """
        self.name = name
        self.variables = tuple(variables)
        self.bases = bases
        self.grams = grams
        self.generators = generators
        self.margin = margin

    def multipliers(self):
        return [gram_polynomial(self.variables, basis, G) for basis, G in zip(self.bases, self.grams)]


def extract_witness(encoding: PsatzEncoding, assignment: dict) -> PsatzWitness:
    """
    Read the Gram matrices from an LP assignment; lambda is folded into s0's constant entry.
    return: PsatzWitness
    """
    grams = [block.matrix(assignment) for block in encoding.blocks]
    grams[0][0, 0] += max(0.0, assignment.get(encoding.slack, 0.0))
    constraint = encoding.constraint
    return PsatzWitness(constraint.name, constraint.variables, [b.basis for b in encoding.blocks], grams, constraint.generators, constraint.margin)


def gram_polynomial(variables, basis, G, exact: bool = False) -> Polynomial:
    """
    z^T G z for a monomial basis z.
    exact: use Fraction coefficients
    return: Polynomial
    """
    convert = Fraction if exact else float
    terms = {}
    for a, ma in enumerate(basis):
        for b, mb in enumerate(basis):
            value = convert(G[a][b])
            if value == 0:
                continue
            monomial = tuple(x + y for x, y in zip(ma, mb))
            terms[monomial] = terms.get(monomial, 0) + value
    return Polynomial(variables, terms)


def psatz_residual(target: Polynomial, generators, margin, bases, grams) -> float:
    """
    Largest coefficient of target - margin - s0 - sum_j s_j g_j, computed in exact arithmetic.
    target: numeric polynomial
    generators: polynomials g_j
    bases, grams: multipliers, s0 first
    return: float
    """
    variables = list(target.variables)
    for g in generators:
        variables += [v for v in g.variables if v not in variables]
    variables = tuple(variables)
    if len(bases) != len(generators) + 1 or len(grams) != len(bases):
        raise ValueError(f"Expected {len(generators) + 1} multipliers, got {len(grams)}")
    difference = target.extend(variables).to_exact() - Fraction(margin)
    factors = [Polynomial.constant(variables, Fraction(1))] + [g.extend(variables).to_exact() for g in generators]
    for basis, G, g in zip(bases, grams, factors):
        difference = difference - gram_polynomial(variables, basis, G, exact=True) * g
    return float(max((abs(c) for c in difference.terms.values()), default=0))


def is_diagonally_dominant(G, tolerance: float = 1e-9) -> bool:
    G = np.asarray(G, dtype=float)
    if G.size == 0:
        return True
    if not np.allclose(G, G.T, atol=tolerance):
        return False
    off = np.abs(G).sum(axis=1) - np.abs(np.diag(G))
    return bool(np.all(np.diag(G) - off >= -tolerance))


def certify_nonnegative(poly: Polynomial, generators=(), margin: float = 0.0, multiplier_degree: int | None = None, solver_options: dict | None = None, name: str = "nonneg"):
    """
    Try to certify poly >= margin on {g >= 0} with a standalone LP.
    return: PsatzWitness, or None when the LP is infeasible
    """
    constraint = PositivityConstraint(name, poly, generators, margin, multiplier_degree)
    encoding = encode_psatz(constraint)
    lp = assemble_program(name, [encoding])
    solution = solve(lp, **(solver_options or {}))
    if not solution.feasible:
        logging.debug(f"[PSATZ] {name}: not certified ({solution.status})")
        return None
    return extract_witness(encoding, solution.assignment)
