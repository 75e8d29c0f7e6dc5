import logging
import math

import numpy as np

from polynomial import LinearForm


class IterationLimit(Exception):
    """Raised when the simplex exceeds its pivot budget (distinct from infeasibility)."""


SENSES = ("==", "<=", ">=")


class LinearProgram:
    def __init__(self, name: str = "program"):
        """
        Linear program over named variables: minimize objective s.t. expr (==|<=|>=) 0.
        name: program name (used in exports)
        """
        self.name = name
        self.variables = []
        self._index = {}
        self.free = set()
        self.constraints = []
        self.objective = LinearForm()

    def add_variable(self, name: str, free: bool = False):
        """
        Declare a variable; nonnegative unless free=True. Re-declaring is a no-op.
        return: str (the name)
        """
        if name in self._index:
            return name
        self._index[name] = len(self.variables)
        self.variables.append(name)
        if free:
            self.free.add(name)
        return name

    def add_constraint(self, expression: LinearForm, sense: str, name: str | None = None):
        """
        Add `expression sense 0`.
        expression: LinearForm over declared variables
        sense: '==', '<=' or '>='
        name: optional row name
        """
        if sense not in SENSES:
            raise ValueError(f"Unknown constraint sense '{sense}'")
        if not isinstance(expression, LinearForm):
            expression = LinearForm(constant=float(expression))
        for symbol, value in expression.terms.items():
            if symbol not in self._index:
                raise ValueError(f"Constraint references undeclared variable '{symbol}'")
            if not math.isfinite(value):
                raise ValueError(f"Non-finite coefficient for '{symbol}' in constraint {name}")
        if not math.isfinite(expression.constant):
            raise ValueError(f"Non-finite constant in constraint {name}")
        row_name = name or f"c{len(self.constraints)}"
        self.constraints.append((row_name, expression, sense))

    def set_objective(self, expression: LinearForm):
        for symbol in expression.terms:
            if symbol not in self._index:
                raise ValueError(f"Objective references undeclared variable '{symbol}'")
        self.objective = expression

    def index_of(self, name: str) -> int:
        return self._index[name]

    def canonical_rows(self):
        """
        Rows rewritten as a.x <= b or a.x == b.
        return: list of (dense coefficient array, rhs, is_equality)
        """
        rows = []
        for _, expression, sense in self.constraints:
            row = np.zeros(len(self.variables))
            for symbol, value in expression.terms.items():
                row[self._index[symbol]] = value
            rhs = -expression.constant
            if sense == ">=":
                row, rhs = -row, -rhs
            rows.append((row, rhs, sense == "=="))
        return rows

    def max_violation(self, assignment: dict) -> float:
        """
        Largest constraint or sign violation of an assignment.
        return: float
        """
        worst = 0.0
        for name in self.variables:
            if name not in self.free:
                worst = max(worst, -assignment.get(name, 0.0))
        for _, expression, sense in self.constraints:
            value = expression.evaluate(assignment)
            if sense == "==":
                worst = max(worst, abs(value))
            elif sense == "<=":
                worst = max(worst, value)
            else:
                worst = max(worst, -value)
        return worst

    def verify_farkas(self, certificate, tolerance: float = 1e-7) -> bool:
        """
        Check y.A >= 0 (== 0 on free columns), y >= 0 on inequality rows, y.b < 0,
        for the canonical rows a.x <= b / a.x == b.
        certificate: sequence of multipliers, one per constraint
        return: bool
        """
        if certificate is None or len(certificate) != len(self.constraints):
            return False
        rows = self.canonical_rows()
        combined = np.zeros(len(self.variables))
        rhs = 0.0
        for y, (row, b, is_equality) in zip(certificate, rows):
            if not is_equality and y < -tolerance:
                return False
            combined += y * row
            rhs += y * b
        for name, value in zip(self.variables, combined):
            if name in self.free and abs(value) > tolerance:
                return False
            if name not in self.free and value < -tolerance:
                return False
        return rhs < -tolerance

    def __repr__(self):
        return f"LinearProgram({self.name}: {len(self.variables)} variables, {len(self.constraints)} constraints)"


class LpSolution:
    def __init__(self, status: str, assignment: dict | None = None, objective_value: float = 0.0, certificate=None, dual_objective: float | None = None, iterations: int = 0):
        """
        status: 'feasible' | 'infeasible' | 'unbounded'
        assignment: variable -> value (feasible only)
        objective_value: objective at the assignment
        certificate: Farkas multipliers per constraint (infeasible only)
        dual_objective: dual value at the final basis (feasible only)
        """
        self.status = status
        self.assignment = assignment or {}
        self.objective_value = objective_value
        self.certificate = certificate
        self.dual_objective = dual_objective
        self.iterations = iterations

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"

    def __repr__(self):
        return f"LpSolution({self.status}, objective={self.objective_value:.6g}, iterations={self.iterations})"


def _power_of_two(factor: np.ndarray) -> np.ndarray:
    return np.exp2(np.round(np.log2(factor)))


def equilibrate(A: np.ndarray, passes: int = 4):
    """
    Geometric-mean row and column scaling, rounded to powers of two.
    A: dense matrix
    passes: alternating row/column sweeps
    return: (row factors, column factors) with R A C well balanced
    """
    m, n = A.shape
    rows, cols = np.ones(m), np.ones(n)
    magnitude = np.abs(A)
    mask = magnitude > 0
    for _ in range(passes):
        scaled = magnitude * rows[:, None] * cols[None, :]
        for axis, factors in ((1, rows), (0, cols)):
            present = mask.any(axis=axis)
            big = np.where(mask, scaled, 0.0).max(axis=axis)
            small = np.where(mask, scaled, np.inf).min(axis=axis)
            update = np.ones_like(factors)
            update[present] = 1.0 / np.sqrt(big[present] * small[present])
            factors *= _power_of_two(update)
            scaled = magnitude * rows[:, None] * cols[None, :]
    return rows, cols


class TwoPhaseSimplex:
    def __init__(self, tolerance: float = 1e-7, pivot_tolerance: float = 1e-9, max_iters: int = 200000, refactor_every: int = 100, degenerate_limit: int = 50, scale: bool = True):
        """
        Dense-tableau two-phase primal simplex.
        Pricing is Dantzig's most negative reduced cost; after degenerate_limit
        degenerate pivots in a row it switches to Bland's rule until the
        objective moves again.
        tolerance: feasibility tolerance (phase-1 objective, reported violations)
        pivot_tolerance: smallest admissible pivot / reduced-cost magnitude
        max_iters: pivot budget across both phases
        refactor_every: pivots between rebuilds of the tableau from the basis (0: never)
        degenerate_limit: consecutive degenerate pivots before Bland's rule
        scale: equilibrate rows and columns before solving
        """
        self.tolerance = tolerance
        self.pivot_tolerance = pivot_tolerance
        self.max_iters = max_iters
        self.refactor_every = refactor_every
        self.degenerate_limit = degenerate_limit
        self.scale = scale
        self.iterations = 0
        self.bland = False

    def _pivot(self, T: np.ndarray, row: int, col: int):
        pivot_row = T[row] / T[row, col]
        column = T[:, col].copy()
        T -= np.outer(column, pivot_row)
        T[row] = pivot_row

    def _enter(self, T: np.ndarray, eligible: np.ndarray) -> int:
        reduced = T[-1, :-1]
        candidates = np.nonzero((reduced < -self.pivot_tolerance) & eligible)[0]
        if candidates.size == 0:
            return -1
        if self.bland:
            return int(candidates[0])
        return int(candidates[np.argmin(reduced[candidates])])

    def _leave(self, T: np.ndarray, col: int, basis: list) -> int:
        column = T[:-1, col]
        rows = np.nonzero(column > self.pivot_tolerance)[0]
        if rows.size == 0:
            return -1
        ratios = np.maximum(T[rows, -1], 0.0) / column[rows]
        best = ratios.min()
        ties = rows[ratios <= best + 1e-12 * max(1.0, abs(best))]
        if self.bland:
            return int(min(ties, key=lambda r: basis[r]))
        return int(ties[np.argmax(column[ties])])

    def _refactor(self, T: np.ndarray, basis: list, M: np.ndarray, rhs: np.ndarray, cost: np.ndarray):
        """Rebuild T = B^-1 [M | rhs] and the reduced costs from the original columns."""
        m = len(basis)
        try:
            T[:m] = np.linalg.solve(M[:, basis], np.hstack([M, rhs[:, None]]))
        except np.linalg.LinAlgError:
            logging.debug("[LP] basis matrix is singular, refactorization skipped")
            return
        values = T[:m, -1]
        values[np.abs(values) < self.pivot_tolerance] = 0.0
        T[-1, :-1] = cost - cost[basis] @ T[:m, :-1]
        T[-1, -1] = -cost[basis] @ values

    def _run(self, T: np.ndarray, basis: list, eligible: np.ndarray, phase: int, M: np.ndarray, rhs: np.ndarray, cost: np.ndarray):
        self.bland = False
        degenerate = 0
        since_refactor = 0
        while True:
            col = self._enter(T, eligible)
            if col == -1:
                # confirm optimality on a fresh tableau
                if self.refactor_every and since_refactor:
                    self._refactor(T, basis, M, rhs, cost)
                    since_refactor = 0
                    continue
                return "optimal"
            row = self._leave(T, col, basis)
            if row == -1:
                return "unbounded"
            if self.iterations >= self.max_iters:
                raise IterationLimit(f"Simplex exceeded {self.max_iters} pivots in phase {phase}")
            step = max(T[row, -1], 0.0) / T[row, col]
            self._pivot(T, row, col)
            basis[row] = col
            self.iterations += 1
            since_refactor += 1
            if step <= self.pivot_tolerance:
                degenerate += 1
                if not self.bland and degenerate >= self.degenerate_limit:
                    logging.debug(f"[LP] {degenerate} degenerate pivots in phase {phase}, switching to Bland's rule")
                    self.bland = True
            else:
                degenerate = 0
                self.bland = False
            if self.refactor_every and since_refactor >= self.refactor_every:
                self._refactor(T, basis, M, rhs, cost)
                since_refactor = 0

    def solve(self, lp: LinearProgram) -> LpSolution:
        """
        Solve min objective over the LP's constraints.
        lp: LinearProgram
        return: LpSolution
        """
        self.iterations = 0
        rows = lp.canonical_rows()
        m = len(rows)
        columns = []
        for name in lp.variables:
            columns.append((name, 1.0))
            if name in lp.free:
                columns.append((name, -1.0))
        n = len(columns)
        cost = np.zeros(n)
        for j, (name, sign) in enumerate(columns):
            cost[j] = sign * lp.objective.terms.get(name, 0.0)
        if m == 0:
            if np.any(cost < -self.pivot_tolerance):
                return LpSolution("unbounded", iterations=0)
            assignment = {name: 0.0 for name in lp.variables}
            return LpSolution("feasible", assignment, lp.objective.constant, dual_objective=lp.objective.constant)

        structural = np.zeros((m, n))
        b = np.zeros(m)
        for i, (row, rhs, _) in enumerate(rows):
            for j, (name, sign) in enumerate(columns):
                structural[i, j] = sign * row[lp.index_of(name)]
            b[i] = rhs
        row_scale, col_scale = equilibrate(structural) if self.scale else (np.ones(m), np.ones(n))
        structural = structural * row_scale[:, None] * col_scale[None, :]
        b = b * row_scale
        cost = cost * col_scale

        slack_rows = [i for i, (_, _, eq) in enumerate(rows) if not eq]
        slack_col = {i: n + k for k, i in enumerate(slack_rows)}
        width = n + len(slack_rows)
        A = np.zeros((m, width))
        A[:, :n] = structural
        sigma = np.ones(m)
        for i in range(m):
            if i in slack_col:
                A[i, slack_col[i]] = 1.0
            if b[i] < 0:
                A[i] *= -1.0
                b[i] *= -1.0
                sigma[i] = -1.0

        # rows whose slack enters with +1 start basic on it, the rest get an artificial
        identity_col = {}
        artificial_rows = []
        for i in range(m):
            if i in slack_col and sigma[i] > 0:
                identity_col[i] = slack_col[i]
            else:
                artificial_rows.append(i)
        total = width + len(artificial_rows)
        T = np.zeros((m + 1, total + 1))
        T[:m, :width] = A
        T[:m, -1] = b
        basis = [0] * m
        for k, i in enumerate(artificial_rows):
            T[i, width + k] = 1.0
            identity_col[i] = width + k
        for i in range(m):
            basis[i] = identity_col[i]
        M = T[:m, :total].copy()

        logging.debug(f"[LP] {lp.name}: tableau {m} x {total} ({len(artificial_rows)} artificials)")
        phase1_cost = np.zeros(total)
        phase1_cost[width:] = 1.0
        T[-1, :total] = phase1_cost
        for i in artificial_rows:
            T[-1] -= T[i]
        eligible = np.ones(total, dtype=bool)
        self._run(T, basis, eligible, 1, M, b, phase1_cost)
        infeasibility = -T[-1, -1]
        if infeasibility > self.tolerance:
            y = np.array([phase1_cost[identity_col[i]] - T[-1, identity_col[i]] for i in range(m)])
            certificate = -sigma * row_scale * y
            largest = np.abs(certificate).max()
            certificate = (certificate / largest if largest > 0 else certificate).tolist()
            if not lp.verify_farkas(certificate, tolerance=max(self.tolerance, 1e-9)):
                logging.warning(f"[LP] {lp.name}: Farkas certificate failed its own check")
            logging.debug(f"[LP] {lp.name}: infeasible (phase-1 objective {infeasibility:.3e})")
            return LpSolution("infeasible", certificate=certificate, iterations=self.iterations)

        # drive remaining artificials out of the basis where possible
        eligible[width:] = False
        for i in range(m):
            if basis[i] >= width:
                candidates = np.nonzero(np.abs(T[i, :width]) > self.pivot_tolerance)[0]
                if candidates.size:
                    self._pivot(T, i, int(candidates[0]))
                    basis[i] = int(candidates[0])

        phase2_cost = np.zeros(total)
        phase2_cost[:n] = cost
        T[-1, :] = 0.0
        T[-1, :total] = phase2_cost
        for i in range(m):
            if phase2_cost[basis[i]] != 0:
                T[-1] -= phase2_cost[basis[i]] * T[i]
        status = self._run(T, basis, eligible, 2, M, b, phase2_cost)
        if status == "unbounded":
            logging.debug(f"[LP] {lp.name}: unbounded")
            return LpSolution("unbounded", iterations=self.iterations)

        x = np.zeros(total)
        for i in range(m):
            x[basis[i]] = T[i, -1]
        assignment = {name: 0.0 for name in lp.variables}
        for j, (name, sign) in enumerate(columns):
            assignment[name] += sign * col_scale[j] * x[j]
        objective = lp.objective.evaluate(assignment)
        y = np.array([phase2_cost[identity_col[i]] - T[-1, identity_col[i]] for i in range(m)])
        dual_objective = float(y @ b) + lp.objective.constant
        logging.debug(f"[LP] {lp.name}: feasible, objective {objective:.6g} after {self.iterations} pivots")
        return LpSolution("feasible", assignment, objective, dual_objective=dual_objective, iterations=self.iterations)


def _solve_highs(lp: LinearProgram, max_iters: int) -> LpSolution:
    from scipy.optimize import linprog

    rows = lp.canonical_rows()
    c = np.array([lp.objective.terms.get(name, 0.0) for name in lp.variables])
    ub = [(r, b) for r, b, eq in rows if not eq]
    eq = [(r, b) for r, b, e in rows if e]
    bounds = [(None, None) if name in lp.free else (0, None) for name in lp.variables]
    result = linprog(
        c if len(c) else np.zeros(0),
        A_ub=np.array([r for r, _ in ub]) if ub else None,
        b_ub=np.array([b for _, b in ub]) if ub else None,
        A_eq=np.array([r for r, _ in eq]) if eq else None,
        b_eq=np.array([b for _, b in eq]) if eq else None,
        bounds=bounds,
        method="highs",
        options={"maxiter": max_iters},
    )
    if result.status == 0:
        assignment = dict(zip(lp.variables, (float(v) for v in result.x)))
        objective = lp.objective.evaluate(assignment)
        return LpSolution("feasible", assignment, objective, dual_objective=objective, iterations=int(getattr(result, "nit", 0)))
    if result.status == 2:
        return LpSolution("infeasible")
    if result.status == 3:
        return LpSolution("unbounded")
    raise IterationLimit(f"HiGHS stopped with status {result.status}: {result.message}")


def solve(lp: LinearProgram, tolerance: float = 1e-7, pivot_tolerance: float = 1e-9, max_iters: int = 200000, backend: str = "simplex", refactor_every: int = 100, degenerate_limit: int = 50) -> LpSolution:
    """
    Solve a LinearProgram.
    lp: LinearProgram
    tolerance: feasibility tolerance
    pivot_tolerance: pivot threshold
    max_iters: pivot budget (IterationLimit when exceeded)
    refactor_every, degenerate_limit: simplex tableau rebuild period and Bland fallback trigger
    backend: 'simplex' (in-tree) or 'highs' (scipy)
    return: LpSolution
    """
    if backend == "highs":
        return _solve_highs(lp, max_iters)
    if backend != "simplex":
        raise ValueError(f"Unknown LP backend '{backend}'")
    return TwoPhaseSimplex(tolerance, pivot_tolerance, max_iters, refactor_every, degenerate_limit).solve(lp)


def export_mps(lp: LinearProgram, path: str) -> str:
    """
    Write a fixed-format MPS file. Short generated names keep the classic field
    layout; '*' comment lines map them back to the symbolic names.
    lp: LinearProgram
    path: output path
    return: str (path)
    """
    column_names = {name: f"X{i + 1:07d}" for i, name in enumerate(lp.variables)}
    row_names = [f"R{i + 1:07d}" for i in range(len(lp.constraints))]
    kinds = {"==": "E", "<=": "L", ">=": "G"}
    lines = [f"NAME          {lp.name}"]
    for name in lp.variables:
        lines.append(f"* VAR {column_names[name]} {name}")
    for (row_name, _, _), short in zip(lp.constraints, row_names):
        lines.append(f"* ROW {short} {row_name}")
    lines.append("ROWS")
    lines.append(" N  COST")
    for (_, _, sense), short in zip(lp.constraints, row_names):
        lines.append(f" {kinds[sense]:<2} {short}")
    lines.append("COLUMNS")
    entries = {name: [] for name in lp.variables}
    for name, value in lp.objective.terms.items():
        entries[name].append(("COST", value))
    for (_, expression, _), short in zip(lp.constraints, row_names):
        for name, value in expression.terms.items():
            entries[name].append((short, value))
    for name in lp.variables:
        column = column_names[name]
        if not entries[name]:
            entries[name].append(("COST", 0.0))
        for row, value in entries[name]:
            lines.append(f"    {column:<8}  {row:<8}  {value!r}")
    lines.append("RHS")
    if lp.objective.constant:
        lines.append(f"    RHS       {'COST':<8}  {-lp.objective.constant!r}")
    for (_, expression, _), short in zip(lp.constraints, row_names):
        if expression.constant:
            lines.append(f"    RHS       {short:<8}  {-expression.constant!r}")
    free = [name for name in lp.variables if name in lp.free]
    if free:
        lines.append("BOUNDS")
        for name in free:
            lines.append(f" FR BND       {column_names[name]}")
    lines.append("ENDATA")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    logging.debug(f"MPS written: {path} ({len(lp.variables)} columns, {len(lp.constraints)} rows)")
    return path


def import_mps(path: str) -> LinearProgram:
    """
    Read an MPS file written by export_mps (or any fixed/free MPS using N/L/G/E rows and FR bounds).
    return: LinearProgram
    """
    variable_alias, row_alias = {}, {}
    section = None
    name = "program"
    row_kind, row_order = {}, []
    column_order, entries = [], {}
    rhs = {}
    free = set()
    objective_row = None
    with open(path, encoding="utf-8") as f:
        for raw in f:
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("*"):
                parts = line.split()
                if len(parts) == 4 and parts[1] == "VAR":
                    variable_alias[parts[2]] = parts[3]
                elif len(parts) == 4 and parts[1] == "ROW":
                    row_alias[parts[2]] = parts[3]
                continue
            if not line.startswith(" "):
                parts = line.split()
                section = parts[0]
                if section == "NAME" and len(parts) > 1:
                    name = parts[1]
                continue
            parts = line.split()
            if section == "ROWS":
                kind, row = parts[0], parts[1]
                if kind == "N":
                    objective_row = row
                else:
                    row_kind[row] = kind
                    row_order.append(row)
            elif section == "COLUMNS":
                column = parts[0]
                if column not in entries:
                    entries[column] = {}
                    column_order.append(column)
                for k in range(1, len(parts) - 1, 2):
                    entries[column][parts[k]] = float(parts[k + 1])
            elif section == "RHS":
                for k in range(1, len(parts) - 1, 2):
                    rhs[parts[k]] = float(parts[k + 1])
            elif section == "BOUNDS":
                if parts[0] == "FR":
                    free.add(parts[2] if len(parts) > 2 else parts[1])
                else:
                    raise ValueError(f"Unsupported MPS bound type '{parts[0]}'")
    lp = LinearProgram(name)
    for column in column_order:
        lp.add_variable(variable_alias.get(column, column), free=column in free)
    objective = {}
    rows = {row: {} for row in row_order}
    for column in column_order:
        symbol = variable_alias.get(column, column)
        for row, value in entries[column].items():
            if row == objective_row:
                objective[symbol] = value
            else:
                rows[row][symbol] = value
    lp.set_objective(LinearForm(objective, -rhs.get(objective_row, 0.0) if objective_row else 0.0))
    senses = {"E": "==", "L": "<=", "G": ">="}
    for row in row_order:
        lp.add_constraint(LinearForm(rows[row], -rhs.get(row, 0.0)), senses[row_kind[row]], row_alias.get(row, row))
    logging.debug(f"MPS read: {path} ({len(lp.variables)} columns, {len(lp.constraints)} rows)")
    return lp


def dump_program(lp: LinearProgram, path: str) -> str:
    """
    Human-readable dump: one constraint per line with symbolic names.
    return: str (path)
    """
    def render(expression: LinearForm) -> str:
        parts = [f"{value:+.12g} {symbol}" for symbol, value in expression.terms.items()]
        if expression.constant:
            parts.append(f"{expression.constant:+.12g}")
        return " ".join(parts) if parts else "0"

    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# {lp.name}: {len(lp.variables)} variables, {len(lp.constraints)} constraints\n")
        f.write(f"minimize: {render(lp.objective)}\n")
        for name in lp.variables:
            f.write(f"var {name} {'free' if name in lp.free else '>= 0'}\n")
        for row_name, expression, sense in lp.constraints:
            f.write(f"{row_name}: {render(expression)} {sense} 0\n")
    return path
