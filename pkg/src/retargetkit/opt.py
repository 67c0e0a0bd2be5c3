"""Generic solver layer: convex QP contract and Gauss-Newton SQP.

The QP form is

    min 1/2 x'Hx + g'x   s.t.  lb <= A x <= ub,  x_lo <= x <= x_hi

solved by an interior-point backend (Clarabel) behind a KKT contract:
stationarity H x + g + A' lam + mu = 0, primal feasibility, and
complementarity, all within tol_kkt. Equalities are rows with lb == ub.

The SQP iterates Gauss-Newton subproblems over manifold increments: costs
are weighted squared residual norms (cost = sum r' W r), constraints carry
two-sided bounds, and steps are globalized by a backtracking line search on
the l1 merit function with penalty kept above the dual infinity-norm. An
elastic (slack-penalized) QP is retried when a linearization is infeasible.

One solve is sequential; distinct problems are independent and may run
concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

import clarabel


class OptError(RuntimeError):
    pass


@dataclass
class SolveReport:
    status: str  # optimal | max_iter | infeasible | line_search_failure
    iterations: int
    kkt_residual: float
    constraint_violation: float
    cost_trace: list = field(default_factory=list)
    message: str = ""

    @property
    def ok(self):
        return self.status == "optimal"

    def to_dict(self):
        return {
            "status": self.status,
            "iterations": int(self.iterations),
            "kkt_residual": float(self.kkt_residual),
            "constraint_violation": float(self.constraint_violation),
            "cost_trace": [float(c) for c in self.cost_trace],
            "message": self.message,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


@dataclass
class QpProblem:
    H: object            # (n, n) symmetric PSD, dense or scipy sparse
    g: np.ndarray
    A: object = None     # (m, n)
    lb: np.ndarray = None
    ub: np.ndarray = None
    x_lo: np.ndarray = None
    x_hi: np.ndarray = None

    def dims(self):
        n = self.g.shape[0]
        m = 0 if self.A is None else self.A.shape[0]
        return n, m


def _backend_solve(P_triu, g, A_rows, b, n_eq, n_ineq, tol):
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    # push the interior point past the contract tolerance, but not so far
    # that it burns iterations fighting its own static regularization
    t = max(1e-10, min(1e-9, tol * 1e-2))
    settings.tol_feas = t
    settings.tol_gap_abs = t
    settings.tol_gap_rel = 1e-10
    settings.max_iter = 100
    cones = []
    if n_eq:
        cones.append(clarabel.ZeroConeT(n_eq))
    if n_ineq:
        cones.append(clarabel.NonnegativeConeT(n_ineq))
    solver = clarabel.DefaultSolver(P_triu, g, A_rows, b, cones, settings)
    sol = solver.solve()
    return sol


def solve_qp(problem: QpProblem, tol_kkt: float = 1e-6):
    """Solve a convex QP. Returns (x, duals, SolveReport).

    duals["constraints"] and duals["box"] satisfy the stationarity identity
    H x + g + A' lam_c + lam_b = 0 (active lower bounds carry negative
    multipliers in this convention).
    """
    n, m = problem.dims()
    H = sp.csc_matrix(problem.H)
    g = np.asarray(problem.g, dtype=float)

    A = sp.csc_matrix(problem.A) if m else sp.csc_matrix((0, n))
    lb = np.asarray(problem.lb, dtype=float) if m else np.zeros(0)
    ub = np.asarray(problem.ub, dtype=float) if m else np.zeros(0)
    if m and np.any(lb > ub):
        raise OptError("QP bounds have lb > ub")

    x_lo = problem.x_lo if problem.x_lo is not None else np.full(n, -np.inf)
    x_hi = problem.x_hi if problem.x_hi is not None else np.full(n, np.inf)

    eq = np.isfinite(lb) & np.isfinite(ub) & (lb == ub)
    up = np.isfinite(ub) & ~eq
    lo = np.isfinite(lb) & ~eq
    blo = np.isfinite(x_lo)
    bhi = np.isfinite(x_hi)

    I = sp.identity(n, format="csc")
    blocks = [A[eq]]
    b = [lb[eq]]
    blocks += [A[up], -A[lo], I[bhi], -I[blo]]
    b += [ub[up], -lb[lo], x_hi[bhi], -x_lo[blo]]
    A_all = sp.vstack(blocks, format="csc")
    b_all = np.concatenate(b)
    n_eq = int(eq.sum())
    n_ineq = A_all.shape[0] - n_eq

    sol = _backend_solve(sp.triu(H, format="csc"), g, A_all, b_all,
                         n_eq, n_ineq, tol_kkt)
    status_map = {
        "Solved": "optimal",
        "AlmostSolved": "optimal",
        "PrimalInfeasible": "infeasible",
        "AlmostPrimalInfeasible": "infeasible",
        "DualInfeasible": "infeasible",
        "AlmostDualInfeasible": "infeasible",
        "MaxIterations": "max_iter",
        "MaxTime": "max_iter",
    }
    status = status_map.get(str(sol.status), "max_iter")
    if status == "infeasible":
        report = SolveReport("infeasible", int(sol.iterations), np.inf, np.inf,
                             message=str(sol.status))
        return None, None, report

    x = np.asarray(sol.x)
    z = np.asarray(sol.z)
    lam_c = np.zeros(m)
    lam_b = np.zeros(n)
    off = 0
    lam_c[eq] = z[off:off + n_eq]
    off += n_eq
    lam_c[up] += z[off:off + int(up.sum())]
    off += int(up.sum())
    lam_c[lo] -= z[off:off + int(lo.sum())]
    off += int(lo.sum())
    lam_b[bhi] += z[off:off + int(bhi.sum())]
    off += int(bhi.sum())
    lam_b[blo] -= z[off:off + int(blo.sum())]

    stat = H @ x + g + (A.T @ lam_c if m else 0.0) + lam_b
    kkt = np.abs(stat).max() if n else 0.0
    viol = 0.0
    if m:
        cx = A @ x
        viol = max(viol, float(np.maximum(cx - ub, 0).max(initial=0.0)),
                   float(np.maximum(lb - cx, 0).max(initial=0.0)))
    viol = max(viol, float(np.maximum(x - x_hi, 0).max(initial=0.0)),
               float(np.maximum(x_lo - x, 0).max(initial=0.0)))
    comp = 0.0
    if m:
        slack = np.minimum(np.abs(cx - ub), np.abs(cx - lb))
        lam_ineq = lam_c[~eq]
        comp = float((np.abs(lam_ineq * slack[~eq])
                      / (1.0 + np.abs(lam_ineq))).max(initial=0.0))
    report = SolveReport(
        "optimal" if (kkt <= tol_kkt and viol <= tol_kkt and comp <= tol_kkt)
        else "max_iter",
        int(sol.iterations), float(kkt), float(viol),
        cost_trace=[float(0.5 * x @ (H @ x) + g @ x)],
        message=str(sol.status))
    duals = {"constraints": lam_c, "box": lam_b}
    return x, duals, report


# -- manifolds ---------------------------------------------------------------

class ProductManifold:
    """Flat vector with euclidean and unit-quaternion segments.

    Quaternion segments retract by right-multiplying exp of a body-frame
    rotation increment, matching RobotModel.boxplus.
    """

    def __init__(self, segments):
        # segments: list of ("vec", n) or ("quat",)
        self.segments = list(segments)
        self.dim = 0
        self.tdim = 0
        self._table = []  # (kind, x_off, n, t_off)
        for seg in self.segments:
            if seg[0] == "vec":
                n = seg[1]
                self._table.append(("vec", self.dim, n, self.tdim))
                self.dim += n
                self.tdim += n
            elif seg[0] == "quat":
                self._table.append(("quat", self.dim, 4, self.tdim))
                self.dim += 4
                self.tdim += 3
            else:
                raise ValueError(f"unknown segment kind {seg[0]!r}")
        self._quat_offsets = [(xo, to) for k, xo, _, to in self._table
                              if k == "quat"]

    def retract(self, x, dx):
        from .core_math import quat_mul, so3_exp
        out = np.empty(self.dim)
        for kind, xo, n, to in self._table:
            if kind == "vec":
                out[xo:xo + n] = x[xo:xo + n] + dx[to:to + n]
            else:
                qn = quat_mul(x[xo:xo + 4], so3_exp(dx[to:to + 3]))
                if qn[0] < 0:
                    qn = -qn
                out[xo:xo + 4] = qn
        return out

    def difference(self, x1, x0):
        from .core_math import quat_mul, quat_conj, so3_log
        dx = np.empty(self.tdim)
        for kind, xo, n, to in self._table:
            if kind == "vec":
                dx[to:to + n] = x1[xo:xo + n] - x0[xo:xo + n]
            else:
                dx[to:to + 3] = so3_log(
                    quat_mul(quat_conj(x0[xo:xo + 4]), x1[xo:xo + 4]))
        return dx

    def tangent_box(self, x, x_lo, x_hi):
        """Flat-space box -> bounds on the tangent increment at x."""
        lo = np.full(self.tdim, -np.inf)
        hi = np.full(self.tdim, np.inf)
        for kind, xo, n, to in self._table:
            if kind == "vec":
                lo[to:to + n] = x_lo[xo:xo + n] - x[xo:xo + n]
                hi[to:to + n] = x_hi[xo:xo + n] - x[xo:xo + n]
        return lo, hi


# -- nonlinear problems --------------------------------------------------------

@dataclass
class ResidualBlock:
    """Weighted least-squares term: cost contribution r(x)' diag(weight) r(x).

    ``cols`` are the tangent indices the block depends on; ``jac`` returns the
    dense local Jacobian d r / d (tangent[cols]).
    """

    name: str
    cols: np.ndarray
    weight: np.ndarray
    fun: object
    jac: object


@dataclass
class ConstraintBlock:
    """Two-sided constraint lb <= c(x) <= ub on a column subset (equality
    when lb == ub)."""

    name: str
    cols: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    fun: object
    jac: object


@dataclass
class NlpProblem:
    manifold: ProductManifold
    x0: np.ndarray
    residuals: list
    constraints: list
    x_lo: np.ndarray = None  # flat-space box
    x_hi: np.ndarray = None

    def __post_init__(self):
        if self.x_lo is None:
            self.x_lo = np.full(self.manifold.dim, -np.inf)
        if self.x_hi is None:
            self.x_hi = np.full(self.manifold.dim, np.inf)


def _eval_cost(problem, x):
    f = 0.0
    rs = []
    for blk in problem.residuals:
        r = np.atleast_1d(np.asarray(blk.fun(x), dtype=float))
        rs.append(r)
        f += float(r @ (blk.weight * r))
    return f, rs


def _eval_violation(problem, x):
    """(l1, linf) violation of general constraints plus the flat box."""
    l1 = 0.0
    linf = 0.0
    cs = []
    for blk in problem.constraints:
        c = np.atleast_1d(np.asarray(blk.fun(x), dtype=float))
        cs.append(c)
        over = np.maximum(c - blk.ub, 0.0)
        under = np.maximum(blk.lb - c, 0.0)
        l1 += float(over.sum() + under.sum())
        if c.size:
            linf = max(linf, float(over.max()), float(under.max()))
    over = np.maximum(x - problem.x_hi, 0.0)
    under = np.maximum(problem.x_lo - x, 0.0)
    l1 += float(over.sum() + under.sum())
    linf = max(linf, float(over.max(initial=0.0)), float(under.max(initial=0.0)))
    return l1, linf, cs


def solve_sqp(problem: NlpProblem, max_iter: int = 200, tol_kkt: float = 1e-5,
              tol_feas: float = 1e-6, damping: float = 1e-8,
              qp_tol: float = 1e-8, rho0: float = 10.0, rho_max: float = 1e7,
              callback=None, trace=False):
    """Sl1QP: Gauss-Newton steps on the exact l1 penalty function.

    Every subproblem is solved in elastic form (l1 slacks on the general
    constraints, penalized at the current merit weight), which keeps the
    constraint multipliers bounded by rho even for degenerate or locally
    inconsistent constraint linearizations, and makes each QP solution an
    exact descent direction for the merit function

        phi(x) = cost(x) + rho * (l1 constraint violation).

    rho is steered upward whenever the subproblem prefers to keep slack
    open although the current point is more violated than that. Returns
    (x, SolveReport); the report counts accepted steps, so a warm start that
    already satisfies the KKT conditions returns after 0 iterations.
    """
    man = problem.manifold
    td = man.tdim
    x = np.asarray(problem.x0, dtype=float).copy()
    rho = rho0
    damp = damping
    cost_trace = []
    best = (np.inf, x.copy())
    n_accepted = 0

    for it in range(max_iter + 1):
        f, rs = _eval_cost(problem, x)
        viol_l1, viol_inf, cs = _eval_violation(problem, x)
        cost_trace.append(f)
        if f + viol_l1 < best[0]:
            best = (f + viol_l1, x.copy())

        # Gauss-Newton model of the cost over the tangent increment
        g = np.zeros(td)
        h_i, h_j, h_v = [], [], []
        for blk, r in zip(problem.residuals, rs):
            J = np.atleast_2d(np.asarray(blk.jac(x), dtype=float))
            W = blk.weight
            JT_W = J.T * W
            np.add.at(g, blk.cols, 2.0 * (JT_W @ r))
            ii, jj = np.meshgrid(blk.cols, blk.cols, indexing="ij")
            h_i.append(ii.ravel())
            h_j.append(jj.ravel())
            h_v.append((2.0 * (JT_W @ J)).ravel())
        h_i.append(np.arange(td))
        h_j.append(np.arange(td))
        h_v.append(np.full(td, damp))
        H = sp.csc_matrix((np.concatenate(h_v),
                           (np.concatenate(h_i), np.concatenate(h_j))),
                          shape=(td, td))

        a_i, a_j, a_v = [], [], []
        lbs, ubs = [], []
        row = 0
        for blk, c in zip(problem.constraints, cs):
            J = np.atleast_2d(np.asarray(blk.jac(x), dtype=float))
            nr = J.shape[0]
            rr, cc = np.meshgrid(row + np.arange(nr), blk.cols, indexing="ij")
            a_i.append(rr.ravel())
            a_j.append(cc.ravel())
            a_v.append(J.ravel())
            lbs.append(blk.lb - c)
            ubs.append(blk.ub - c)
            row += nr
        m = row
        A = sp.csc_matrix((np.concatenate(a_v) if a_v else np.zeros(0),
                           (np.concatenate(a_i) if a_i else np.zeros(0),
                            np.concatenate(a_j) if a_j else np.zeros(0))),
                          shape=(m, td))
        lb = np.concatenate(lbs) if lbs else np.zeros(0)
        ub = np.concatenate(ubs) if ubs else np.zeros(0)
        t_lo, t_hi = man.tangent_box(x, problem.x_lo, problem.x_hi)

        # elastic subproblem, re-solved with a stiffer penalty while the
        # step leaves meaningfully more linearized violation than the
        # current point would justify
        while True:
            dx, duals, _, qp_rep = _elastic_qp(
                H, g, A, lb, ub, t_lo, t_hi, rho, qp_tol)
            if dx is None:
                rep = SolveReport("infeasible", n_accepted, np.inf, viol_inf,
                                  cost_trace, "elastic QP failed")
                return best[1], rep
            if m:
                cx = A @ dx
                lin_viol = float(np.maximum(cx - ub, 0).sum()
                                 + np.maximum(lb - cx, 0).sum())
            else:
                lin_viol = 0.0
            if (lin_viol <= max(1e-10, 1e-2 * viol_l1)) or rho >= rho_max:
                break
            rho = min(rho * 10.0, rho_max)
        lam = duals["constraints"]
        lam_b = duals["box"]

        # KKT residual at the current point from the QP multipliers
        grad_L = g + (A.T @ lam if m else 0.0) + lam_b
        kkt = float(np.abs(grad_L).max(initial=0.0))
        if callback is not None:
            callback(it, x, f, viol_inf, kkt)
        if kkt <= tol_kkt and viol_inf <= tol_feas:
            return x, SolveReport("optimal", n_accepted, kkt, viol_inf,
                                  cost_trace)
        if it == max_iter:
            break

        # backtracking on the exact l1 merit that the QP models
        merit0 = f + rho * viol_l1
        # model decrease: quadratic cost part plus penalty on the linearized
        # violation (which the QP reduced from viol_l1 to lin_viol)
        descent = float(g @ dx) - rho * (viol_l1 - lin_viol)
        if descent > -1e-16:
            descent = -1e-16
        alpha = 1.0
        accepted = False
        used_soc = False
        for trial in range(30):
            x_try = man.retract(x, alpha * dx)
            f_try, _ = _eval_cost(problem, x_try)
            v1_try, _, _ = _eval_violation(problem, x_try)
            if f_try + rho * v1_try <= merit0 + 1e-4 * alpha * descent:
                accepted = True
                break
            if trial == 0:
                # second-order correction: cancel the constraint curvature
                # picked up over the full step before shrinking it
                dx_soc = _soc_step(problem, x_try, A, lb, ub, H, g, dx,
                                   rho, qp_tol, cs)
                if dx_soc is not None:
                    x_soc = man.retract(x, dx + dx_soc)
                    f_soc, _ = _eval_cost(problem, x_soc)
                    v1_soc, _, _ = _eval_violation(problem, x_soc)
                    if f_soc + rho * v1_soc <= merit0 + 1e-4 * descent:
                        accepted = True
                        used_soc = True
                        x_try = x_soc
                        break
            alpha *= 0.5
        if trace:
            print(f"    [sqp] it={it} f={f:.6e} viol={viol_inf:.2e} "
                  f"kkt={kkt:.2e} rho={rho:.1e} damp={damp:.1e} "
                  f"|dx|={np.abs(dx).max():.2e} alpha={alpha:.3g} "
                  f"soc={used_soc} acc={accepted}")
        if not accepted:
            rep = SolveReport("line_search_failure", n_accepted, kkt, viol_inf,
                              cost_trace, "30 halvings exhausted")
            return best[1], rep
        x = x_try
        n_accepted += 1
        # trust-region flavored damping adaptation
        if alpha >= 0.5:
            damp = max(damping, damp / 5.0)
        elif alpha < 1.0 / 16.0:
            damp = min(1e4, max(damp, 1e-7) * 10.0)

    f, _ = _eval_cost(problem, x)
    _, viol_inf, _ = _eval_violation(problem, x)
    return x, SolveReport("max_iter", n_accepted, np.inf, viol_inf, cost_trace)


def _soc_step(problem, x_full, A, lb, ub, H, g, dx, rho, qp_tol, cs):
    """Second-order correction: re-solve the subproblem with constraints
    re-evaluated at the full-step point (Jacobians reused), returning a
    correction to add to dx."""
    if A.shape[0] == 0:
        return None
    shift = []
    for blk, c0 in zip(problem.constraints, cs):
        c1 = np.atleast_1d(np.asarray(blk.fun(x_full), dtype=float))
        shift.append(c1 - c0)
    shift = np.concatenate(shift)
    n = len(dx)
    d, _, _, rep = _elastic_qp(H, g + H @ dx, A, lb - shift, ub - shift,
                               np.full(n, -np.inf), np.full(n, np.inf),
                               rho, qp_tol)
    return d


def _elastic_qp(H, g, A, lb, ub, t_lo, t_hi, rho, qp_tol):
    """l1-elastic subproblem: min model(dx) + rho*sum(s+ + s-) subject to
    lb <= A dx + s+ - s- <= ub, s >= 0. Returns (dx, duals, |s|_1, report).

    The general-constraint multipliers of this QP are bounded by rho, which
    keeps the outer merit function well scaled even when the linearized
    constraints are redundant or inconsistent.
    """
    m, n = A.shape
    if m == 0:
        qp = QpProblem(H, g, None, None, None, t_lo, t_hi)
        x, duals, rep = solve_qp(qp, tol_kkt=qp_tol)
        if x is None:
            return None, None, 0.0, rep
        return x, duals, 0.0, rep
    H_e = sp.bmat([[H, None],
                   [None, sp.identity(2 * m, format="csc") * 1e-10]],
                  format="csc")
    g_e = np.concatenate([g, rho * np.ones(2 * m)])
    A_e = sp.bmat([[A, sp.identity(m), -sp.identity(m)]], format="csc")
    lo_e = np.concatenate([t_lo, np.zeros(2 * m)])
    hi_e = np.concatenate([t_hi, np.full(2 * m, np.inf)])
    qp = QpProblem(H_e, g_e, A_e, lb, ub, lo_e, hi_e)
    x, duals, rep = solve_qp(qp, tol_kkt=qp_tol)
    if x is None:
        return None, None, 0.0, rep
    slack_l1 = float(np.abs(x[n:]).sum())
    duals = {"constraints": duals["constraints"], "box": duals["box"][:n]}
    return x[:n], duals, slack_l1, rep
