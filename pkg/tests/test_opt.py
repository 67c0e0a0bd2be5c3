import numpy as np
import pytest
import scipy.optimize

from retargetkit import opt
from retargetkit.core_math import so3_exp, so3_log, quat_mul, quat_conj


class TestSolveQp:
    def test_unconstrained_scalar(self):
        # min 0.5 x^2 - x  ->  x = 1
        qp = opt.QpProblem(np.array([[1.0]]), np.array([-1.0]))
        x, duals, rep = opt.solve_qp(qp)
        assert rep.status == "optimal"
        assert x[0] == pytest.approx(1.0, abs=1e-8)

    def test_active_lower_bound_dual(self):
        # min 0.5 x^2 s.t. x >= 2  ->  x = 2, lower-bound multiplier 2
        qp = opt.QpProblem(np.array([[1.0]]), np.zeros(1),
                           x_lo=np.array([2.0]), x_hi=np.array([np.inf]))
        x, duals, rep = opt.solve_qp(qp)
        assert rep.status == "optimal"
        assert x[0] == pytest.approx(2.0, abs=1e-8)
        # stationarity H x + g + mu = 0 -> mu = -2 for the active lower bound
        assert duals["box"][0] == pytest.approx(-2.0, abs=1e-7)

    def test_random_qps_match_kkt_factorization_oracle(self):
        # oracle: take the solver's active set, re-solve the equality KKT
        # system by dense factorization, compare objectives
        rng = np.random.default_rng(0)
        for trial in range(20):
            n, m = 20, 12
            Q = rng.standard_normal((n, n))
            H = Q.T @ Q + np.eye(n)
            g = rng.standard_normal(n)
            A = rng.standard_normal((m, n))
            lb = -rng.uniform(0.1, 1.0, m)
            ub = rng.uniform(0.1, 1.0, m)
            lb[:3] = ub[:3] = rng.standard_normal(3) * 0.1  # equalities
            qp = opt.QpProblem(H, g, A, lb, ub)
            x, duals, rep = opt.solve_qp(qp)
            assert rep.status == "optimal"
            cx = A @ x
            lam = duals["constraints"]
            # active set from the multipliers, bound side from the sign
            act = np.where((np.abs(lam) > 1e-6) | (lb == ub))[0]
            A_act = A[act]
            b_act = np.where(lam[act] > 0, ub[act], lb[act])
            b_act[lb[act] == ub[act]] = lb[act][lb[act] == ub[act]]
            k = len(act)
            KKT = np.block([[H, A_act.T], [A_act, np.zeros((k, k))]])
            sol = np.linalg.solve(KKT, np.concatenate([-g, b_act]))
            x_ref = sol[:n]
            obj = 0.5 * x @ H @ x + g @ x
            obj_ref = 0.5 * x_ref @ H @ x_ref + g @ x_ref
            assert abs(obj - obj_ref) < 1e-8 * max(1.0, abs(obj_ref))

    def test_infeasible_detected(self):
        qp = opt.QpProblem(np.eye(1), np.zeros(1),
                           A=np.array([[1.0], [-1.0]]),
                           lb=np.array([2.0, 2.0]), ub=np.array([np.inf, np.inf]))
        x, duals, rep = opt.solve_qp(qp)
        assert rep.status == "infeasible"
        assert x is None

    def test_kkt_contract_fields(self):
        rng = np.random.default_rng(5)
        n = 15
        Q = rng.standard_normal((n, n))
        H = Q.T @ Q + np.eye(n)
        g = rng.standard_normal(n)
        A = rng.standard_normal((7, n))
        qp = opt.QpProblem(H, g, A, -np.ones(7), np.ones(7))
        x, duals, rep = opt.solve_qp(qp, tol_kkt=1e-6)
        assert rep.status == "optimal"
        assert rep.kkt_residual <= 1e-6
        assert rep.constraint_violation <= 1e-6
        stat = H @ x + g + A.T @ duals["constraints"] + duals["box"]
        assert np.abs(stat).max() <= 1e-6


def quat_manifold_2seg():
    return opt.ProductManifold([("vec", 2), ("quat",), ("vec", 1)])


class TestProductManifold:
    def test_retract_difference_inverse(self):
        man = quat_manifold_2seg()
        rng = np.random.default_rng(4)
        for _ in range(50):
            x = np.concatenate([rng.standard_normal(2),
                                so3_exp(rng.standard_normal(3)),
                                rng.standard_normal(1)])
            dx = rng.standard_normal(man.tdim) * 0.7
            x2 = man.retract(x, dx)
            np.testing.assert_allclose(man.difference(x2, x), dx, atol=1e-10)

    def test_quat_segment_stays_unit(self):
        man = quat_manifold_2seg()
        x = np.concatenate([np.zeros(2), [1, 0, 0, 0], [0.0]])
        x2 = man.retract(x, np.ones(man.tdim))
        assert abs(np.linalg.norm(x2[2:6]) - 1) < 1e-12

    def test_tangent_box(self):
        man = quat_manifold_2seg()
        x = np.concatenate([[1.0, 2.0], [1, 0, 0, 0], [0.5]])
        x_lo = np.array([0.0, 0.0, -np.inf, -np.inf, -np.inf, -np.inf, 0.0])
        x_hi = np.array([2.0, 3.0, np.inf, np.inf, np.inf, np.inf, 1.0])
        lo, hi = man.tangent_box(x, x_lo, x_hi)
        np.testing.assert_allclose(lo[[0, 1, 5]], [-1.0, -2.0, -0.5])
        np.testing.assert_allclose(hi[[0, 1, 5]], [1.0, 1.0, 0.5])
        assert np.all(np.isinf(lo[2:5])) and np.all(np.isinf(hi[2:5]))


class TestSolveSqp:
    def test_quadratic_converges_in_one_iteration(self):
        # least squares: r = x - t, weight 1; optimum x = t
        t = np.array([1.0, -2.0, 3.0])
        man = opt.ProductManifold([("vec", 3)])
        blk = opt.ResidualBlock("fit", np.arange(3), np.ones(3),
                                lambda x: x - t, lambda x: np.eye(3))
        prob = opt.NlpProblem(man, np.zeros(3), [blk], [])
        x, rep = opt.solve_sqp(prob)
        assert rep.status == "optimal"
        assert rep.iterations == 1
        np.testing.assert_allclose(x, t, atol=1e-7)

    def test_warm_start_at_optimum_zero_iterations(self):
        t = np.array([0.5, 0.5])
        man = opt.ProductManifold([("vec", 2)])
        blk = opt.ResidualBlock("fit", np.arange(2), np.ones(2),
                                lambda x: x - t, lambda x: np.eye(2))
        prob = opt.NlpProblem(man, t.copy(), [blk], [])
        x, rep = opt.solve_sqp(prob)
        assert rep.status == "optimal"
        assert rep.iterations == 0
        assert rep.cost_trace[0] <= 1e-20

    def test_constrained_rosenbrock(self):
        # min (1-x1)^2 + 100 (x2 - x1^2)^2  s.t.  x1^2 + x2^2 <= 1.5
        man = opt.ProductManifold([("vec", 2)])

        def r(x):
            return np.array([1.0 - x[0], 10.0 * (x[1] - x[0] ** 2)])

        def Jr(x):
            return np.array([[-1.0, 0.0], [-20.0 * x[0], 10.0]])

        def c(x):
            return np.array([x[0] ** 2 + x[1] ** 2])

        def Jc(x):
            return np.array([[2 * x[0], 2 * x[1]]])

        blk = opt.ResidualBlock("rosen", np.arange(2), np.ones(2), r, Jr)
        con = opt.ConstraintBlock("disk", np.arange(2), np.array([-np.inf]),
                                  np.array([1.5]), c, Jc)
        prob = opt.NlpProblem(man, np.zeros(2), [blk], [con])
        x, rep = opt.solve_sqp(prob, tol_kkt=1e-8, tol_feas=1e-10)
        assert rep.status == "optimal"

        # oracle: dense grid + scipy polish
        xs = np.linspace(-1.3, 1.3, 121)
        best, bval = None, np.inf
        for x1 in xs:
            for x2 in xs:
                if x1 ** 2 + x2 ** 2 <= 1.5:
                    val = (1 - x1) ** 2 + 100 * (x2 - x1 ** 2) ** 2
                    if val < bval:
                        bval, best = val, (x1, x2)
        polished = scipy.optimize.minimize(
            lambda z: (1 - z[0]) ** 2 + 100 * (z[1] - z[0] ** 2) ** 2,
            best, method="SLSQP",
            constraints=[{"type": "ineq",
                          "fun": lambda z: 1.5 - z[0] ** 2 - z[1] ** 2}],
            options={"ftol": 1e-14, "maxiter": 500})
        assert np.abs(x - polished.x).max() < 1e-6

    def test_linear_residual_matches_normal_equations(self):
        rng = np.random.default_rng(9)
        A = rng.standard_normal((12, 5))
        b = rng.standard_normal(12)
        w = rng.uniform(0.5, 2.0, 12)
        man = opt.ProductManifold([("vec", 5)])
        blk = opt.ResidualBlock("ls", np.arange(5), w,
                                lambda x: A @ x - b, lambda x: A)
        prob = opt.NlpProblem(man, np.zeros(5), [blk], [])
        x, rep = opt.solve_sqp(prob, damping=0.0)
        x_ref = np.linalg.solve(A.T @ (w[:, None] * A), A.T @ (w * b))
        assert rep.status == "optimal"
        assert np.abs(x - x_ref).max() < 1e-8

    def test_manifold_quaternion_alignment(self):
        # rotate a quaternion segment to match a target orientation
        man = opt.ProductManifold([("quat",)])
        q_target = so3_exp([0.4, -0.2, 0.9])

        def r(x):
            return so3_log(quat_mul(quat_conj(q_target), x[0:4]))

        def Jr(x):
            # right-perturbation Jacobian approximated at identity residual
            h = 1e-7
            J = np.zeros((3, 3))
            for i in range(3):
                d = np.zeros(3)
                d[i] = h
                J[:, i] = (r(man.retract(x, d)) - r(man.retract(x, -d))) / (2 * h)
            return J

        blk = opt.ResidualBlock("align", np.arange(3), np.ones(3), r, Jr)
        prob = opt.NlpProblem(man, np.array([1.0, 0, 0, 0]), [blk], [])
        x, rep = opt.solve_sqp(prob, tol_kkt=1e-10)
        assert rep.status == "optimal"
        assert min(np.abs(x - q_target).max(), np.abs(x + q_target).max()) < 1e-7

    def test_merit_non_increasing(self):
        merits = []

        def cb(it, x, f, viol, kkt):
            merits.append((f, viol))

        man = opt.ProductManifold([("vec", 2)])

        def r(x):
            return np.array([x[0] - 1.0, 5 * (x[1] - x[0] ** 2)])

        def Jr(x):
            return np.array([[1.0, 0.0], [-10 * x[0], 5.0]])

        con = opt.ConstraintBlock(
            "line", np.arange(2), np.array([0.3]), np.array([0.3]),
            lambda x: np.array([x[0] + x[1]]),
            lambda x: np.array([[1.0, 1.0]]))
        blk = opt.ResidualBlock("r", np.arange(2), np.ones(2), r, Jr)
        prob = opt.NlpProblem(man, np.array([2.0, -3.0]), [blk], [con])
        x, rep = opt.solve_sqp(prob, callback=cb)
        assert rep.status == "optimal"
        assert abs(x[0] + x[1] - 0.3) < 1e-9

    def test_active_velocity_style_box(self):
        # projection onto a box through the tangent box path
        man = opt.ProductManifold([("vec", 1)])
        blk = opt.ResidualBlock("pull", np.zeros(1, dtype=int), np.ones(1),
                                lambda x: x - 5.0, lambda x: np.eye(1))
        prob = opt.NlpProblem(man, np.zeros(1), [blk], [],
                              x_lo=np.array([-1.0]), x_hi=np.array([2.0]))
        x, rep = opt.solve_sqp(prob)
        assert rep.status == "optimal"
        assert x[0] == pytest.approx(2.0, abs=1e-8)
