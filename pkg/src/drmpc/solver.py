"""Outer min-max solvers: Frank-Wolfe and the Newton-type method.

Both methods iterate theta_{t+1} = theta_t + eta_t (F(theta_t) - theta_t)
with directions from one of two oracles over the lifted feasible polytope:

* FW: F1(theta) = argmin <grad f(theta), v>          (an LP), and
* NT: F(theta) = argmin L(x, v, Sigma*(theta))        (a QP),

where Sigma*(theta) is the inner worst-case covariance and grad f comes from
Danskin's theorem. The duality-gap certificate (theta - F1(theta))' grad
f(theta) >= f(theta) - f* is computed from the LP every iteration and is the
stopping criterion for both methods. On iterations where the LP oracle does
not reach a fixed point within its step budget (the optimal face can be
extremely degenerate), the logged gap falls back to the best-response bound
L(theta, Sigma*) - min_theta' L(theta', Sigma*), which is also a valid upper
bound on f(theta) - f* because f* >= min_theta' L(theta', Sigma*); the
stopping test itself only fires on a settled LP certificate. Stepsizes are
either "adaptive" (eta = min{1, g/(beta |d|^2)} with a fixed smoothness
constant) or "fully-adaptive" (backtracking on beta with the
sufficient-decrease test, which never increases f).

Iterates stay feasible: eta is in [0, 1] and both oracle outputs lie in the
feasible polytope, so each iterate is a convex combination of feasible
points.
"""

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import ambiguity, model, qp, sets
from .errors import (DimensionError, InfeasibleStateError, LineSearchError,
                     ScenarioError, SolverError)

# proximal-point parameters for the certificate LP: ridge weight relative to
# the cost magnitude, fixed-point tolerance on the iterate, the per-call step
# budget, the one-shot escalation budget used when the fallback bound alone
# would stop the solver, and the absolute multiplier sign tolerance under
# which a settled iterate is accepted as an LP minimizer
_PROX_RATIO = 1e-3
_PROX_TOL = 1e-9
_PROX_MAX_STEPS = 60
_PROX_ESCALATION = 240
_DUAL_TOL = 1e-10


@dataclass
class SolverSettings:
    method: str = "NT"                 # NT or FW
    stepsize: str = "fully-adaptive"   # adaptive or fully-adaptive
    beta_init: object = 1.0            # float, or "auto" to estimate
    zeta: float = 2.0
    tau: float = 2.0
    gap_tol: float = 1e-6
    max_iter: int = 1000
    inner_tol: float = 1e-10
    max_backtracks: int = 60
    qp_settings: object = None
    deterministic_timing: bool = True
    # "lp" certifies every iteration through the linearization LP; "bound"
    # logs the best-response bound f(theta_t) - min_theta L(theta, Sigma*)
    # instead, which is also a valid suboptimality certificate but avoids
    # the LP entirely (used by long closed-loop campaigns; NT only)
    certificate: str = "lp"

    def validate(self):
        if self.method not in ("NT", "FW"):
            raise ScenarioError(f"unknown method {self.method!r}")
        if self.stepsize not in ("adaptive", "fully-adaptive"):
            raise ScenarioError(f"unknown stepsize rule {self.stepsize!r}")
        if self.beta_init != "auto":
            if not (float(self.beta_init) > 0):
                raise ScenarioError("beta_init must be positive or 'auto'")
        if not (self.zeta > 1 and self.tau > 1):
            raise ScenarioError("zeta and tau must exceed 1")
        if not (self.gap_tol > 0):
            raise ScenarioError("gap_tol must be positive")
        if self.certificate not in ("lp", "bound"):
            raise ScenarioError(f"unknown certificate {self.certificate!r}")
        return self


@dataclass
class TraceRecord:
    t: int
    f: float
    gap: float
    eta: float
    beta: float
    inner: float
    qp_status: str
    lp_status: str
    wall_ns: int


@dataclass
class SolveTrace:
    records: list = field(default_factory=list)

    def add(self, **kw):
        self.records.append(TraceRecord(**kw))

    def to_csv(self, path, deterministic_timing=True):
        with open(path, "w") as fh:
            fh.write("iter,f,gap,eta,beta,wall_ns\n")
            for r in self.records:
                ns = 0 if deterministic_timing else r.wall_ns
                fh.write("%d,%.17g,%.17g,%.17g,%.17g,%d\n"
                         % (r.t, r.f, r.gap, r.eta, r.beta, ns))

    def __len__(self):
        return len(self.records)


@dataclass
class DrmpcSolution:
    theta: model.PolicyParams
    f: float
    Sigma: ambiguity.BlockCovariance
    gap: float
    trace: SolveTrace
    status: str                  # optimal or max-iter
    iterations: int
    z_lift: np.ndarray = None
    active: object = None        # QP active set at theta (for warm starts)
    lp_active: object = None
    beta: float = None           # last accepted smoothness estimate


def estimate_smoothness(sp, d):
    """Upper bound on the curvature of f: the v-block Hessian is 2 Hu'Hu and
    the M-block curvature is at most 2 ||Hu'Hu|| lam_max(Sigma) with
    lam_max(Sigma) <= (sqrt(tr sigma_hat) + epsilon)^2 over the ball."""
    hnorm = float(np.linalg.norm(sp.HuTHu, 2))
    lam_cap = (math.sqrt(max(np.trace(d.sigma_hat), 0.0)) + d.epsilon) ** 2
    return 2.0 * hnorm * max(1.0, lam_cap)


def _dir_norm_sq(dM, dv):
    return float(np.sum(dM * dM) + dv @ dv)


def step_adaptive(g_t, d_t, beta):
    """eta = min{1, g/(beta |d|^2)}; nonpositive g means no descent and maps
    to eta = 0 (convergence signal)."""
    nsq = _dir_norm_sq(d_t.M, d_t.v)
    if nsq <= 0.0:
        return 0.0
    if g_t <= 0.0:
        return 0.0
    return min(1.0, g_t / (beta * nsq))


def step_fully_adaptive(sp, lifted, d, theta_t, d_t, g_t, beta_prev,
                        zeta=2.0, tau=2.0, f_t=None, inner_tol=1e-9,
                        max_backtracks=60):
    """Backtracking stepsize: start at beta = beta_prev/zeta, set
    eta = min{1, g/(beta |d|^2)}, and multiply beta by tau until

        f(theta + eta d) <= f(theta) - eta g + (eta^2 beta / 2) |d|^2.

    Returns (eta, beta, f_new). Each trial evaluates the worst-case
    objective, so the inner tolerance must be well below the expected
    decrease."""
    if f_t is None:
        f_t, _ = ambiguity.worst_case_objective(sp, theta_t, d, tol=inner_tol)
    nsq = _dir_norm_sq(d_t.M, d_t.v)
    if nsq <= 0.0 or g_t <= 0.0:
        return 0.0, beta_prev, f_t
    beta = beta_prev / zeta
    for _ in range(max_backtracks):
        eta = min(1.0, g_t / (beta * nsq))
        cand = model.PolicyParams(theta_t.M + eta * d_t.M,
                                  theta_t.v + eta * d_t.v)
        f_new, _ = ambiguity.worst_case_objective(sp, cand, d, tol=inner_tol)
        if f_new <= f_t - eta * g_t + 0.5 * eta * eta * beta * nsq:
            return eta, beta, f_new
        beta *= tau
    raise LineSearchError(
        f"no sufficient decrease after {max_backtracks} backtracks "
        f"(f={f_t:.6e}, g={g_t:.3e}, |d|^2={nsq:.3e}); the inner-max "
        "tolerance may be too loose for the requested gap")


def _slide_jump(prob, z, d, active):
    """Longest feasible stride from z along d; lands on the first blocking
    row and marks it active. Returns None when no finite positive stride
    exists."""
    Ad = prob.A @ d
    Az = prob.A @ z
    with np.errstate(divide="ignore", invalid="ignore"):
        a_up = np.where(Ad > 1e-12, (prob.u - Az) / Ad, np.inf)
        a_lo = np.where(Ad < -1e-12, (prob.l - Az) / Ad, np.inf)
    a_up[~(a_up > 0)] = np.inf
    a_lo[~(a_lo > 0)] = np.inf
    j_up = int(np.argmin(a_up))
    j_lo = int(np.argmin(a_lo))
    alpha = min(a_up[j_up], a_lo[j_lo])
    if not np.isfinite(alpha):
        return None
    seed = active.copy()
    if a_up[j_up] <= a_lo[j_lo]:
        seed[j_up] = 1
    else:
        seed[j_lo] = -1
    return z + alpha * d, seed


def _prox_lp(lp_solver, c, mu, z, active=None, max_steps=_PROX_MAX_STEPS):
    """Proximal-point iteration for min c'z over lp_solver's polytope.

    lp_solver must carry P = mu I; each step re-centers the ridge on the
    previous iterate and solves the strictly convex QP. A fixed point of
    that map minimizes c'z exactly, so a settled iterate is a certified
    minimizer. Returns (solution, z, settled); when the budget runs out the
    last iterate is feasible but uncertified.
    """
    prev_dz = None
    sol = None
    for _ in range(max_steps):
        lp_solver.update_q(c - mu * z)
        sol = lp_solver.solve(z0=z, active_guess=active)
        if sol.status == qp.Status.PRIMAL_INFEASIBLE:
            raise InfeasibleStateError(
                "policy set is empty: state outside the feasible region")
        if sol.status != qp.Status.OPTIMAL:
            raise SolverError(
                f"certificate LP failed with status {sol.status}")
        dz = sol.z - z
        step = float(np.abs(dz).max())
        z = sol.z
        active = sol.active
        if step <= _PROX_TOL * max(1.0, float(np.abs(z).max())):
            return sol, z, True
        # two collinear steps of equal length mean the iterates slide along
        # a nearly level face at a pace of one ridge-length per step; a
        # min-ratio jump to the blocking row crosses the face in one move
        if prev_dz is not None:
            nrm = float(np.linalg.norm(dz))
            pnrm = float(np.linalg.norm(prev_dz))
            cos = float(dz @ prev_dz) / max(nrm * pnrm, 1e-300)
            if cos > 0.999 and 0.9 < nrm / pnrm < 1.1:
                jumped = _slide_jump(lp_solver.prob, z, dz / nrm, active)
                if jumped is not None:
                    z, active = jumped
                    prev_dz = None
                    continue
        prev_dz = dz
    return sol, z, False


class DrmpcEngine:
    """Per-scenario solver state: the lifted polytope, the stacked matrices,
    and reusable QP/LP solver instances with their factor caches.

    One engine serves many states x of the same scenario; only the linear
    term, the right-hand sides, and the Sigma-dependent quadratic block
    change between solves.
    """

    def __init__(self, spec, settings=None):
        self.spec = spec
        self.st = (settings or SolverSettings()).validate()
        n = spec.n
        self.sp0 = model.assemble_stacked(spec, np.zeros(n))
        self.lifted = sets.build_policy_set(spec, self.sp0, np.zeros(n))
        lf = self.lifted
        static_idx = np.arange(lf.n_v + lf.n_mfree, lf.n_z)
        # certificate quality rests on exact KKT points, so polish is not
        # optional here
        qset = self.st.qp_settings or qp.QpSettings(require_polish=True)
        self._mrows = lf.mfree_rows
        self._mcols = lf.mfree_cols
        Sig0 = ambiguity.BlockCovariance.repeat(spec.d.sigma_hat, spec.N)
        P0, q0 = self._qp_data(self.sp0, Sig0)
        self.qp_solver = qp.QpSolver(
            qp.QpProblem(P=P0, q=q0, A=lf.A, l=lf.l.copy(), u=lf.u.copy(),
                         static_idx=static_idx), qset)
        # the certificate LP is solved by proximal-point steps, so this
        # instance carries a small full ridge (no static split: the ridge
        # must also cover the aux columns, whose cost is identically zero).
        # Its multipliers certify LP optimality of the settled point, so the
        # sign tolerance is absolute: a relative one admits wrong-signed
        # rows of size 1e-9 |y|, each worth (its slack at the true
        # minimizer) of hidden certificate error
        lpset = replace(qset, dual_tol=_DUAL_TOL)
        self._mu = None
        self._lp_z = None
        self.lp_solver = qp.QpSolver(
            qp.QpProblem(P=np.eye(lf.n_z), q=np.zeros(lf.n_z),
                         A=lf.A, l=lf.l.copy(), u=lf.u.copy()), lpset)

    # -- lifted-space plumbing ------------------------------------------------

    def _qp_data(self, sp, Sigma):
        """P and q of the lifted QP for min L(x, theta, Sigma)."""
        lf = self.lifted
        K = sp.HuTHu
        Sbd = Sigma.as_blockdiag()
        P = np.zeros((lf.n_z, lf.n_z))
        nv = lf.n_v
        nm = lf.n_mfree
        P[:nv, :nv] = 2.0 * K
        if nm:
            P[nv:nv + nm, nv:nv + nm] = 2.0 * (
                K[np.ix_(self._mrows, self._mrows)]
                * Sbd[np.ix_(self._mcols, self._mcols)])
        qv = np.zeros(lf.n_z)
        qv[:nv] = sp.Hu_lin
        if nm:
            lin_M = 2.0 * (sp.HuTHw @ Sbd)
            qv[nv:nv + nm] = lin_M[self._mrows, self._mcols]
        return P, qv

    def _lp_cost(self, grad):
        lf = self.lifted
        c = np.zeros(lf.n_z)
        c[:lf.n_v] = grad.dv
        c[lf.n_v:lf.n_v + lf.n_mfree] = grad.dM[self._mrows, self._mcols]
        return c

    def _theta_from(self, z):
        M, v = self.lifted.extract(z)
        return model.PolicyParams(M, v)

    def set_state(self, x):
        """Point both solver instances at a new measured state."""
        x = np.asarray(x, dtype=float).ravel()
        if x.shape[0] != self.spec.n:
            raise DimensionError(f"state dim {x.shape[0]} != n={self.spec.n}")
        sp = self.sp0.with_state(x)
        u_vec = self.lifted.resolve(x)
        self.qp_solver.update_bounds(u=u_vec)
        self.lp_solver.update_bounds(u=u_vec)
        return sp

    def _feasible_point(self, z):
        """Row-wise feasibility of a packed policy under current bounds."""
        prob = self.lp_solver.prob
        Az = prob.A @ z
        if np.any(Az > prob.u + 1e-8 * np.maximum(1.0, np.abs(prob.u))):
            return False
        lo = np.isfinite(prob.l)
        if np.any(Az[lo] < prob.l[lo]
                  - 1e-8 * np.maximum(1.0, np.abs(prob.l[lo]))):
            return False
        return True

    # -- oracles ---------------------------------------------------------------

    def nt_qp(self, sp, Sigma, z0=None, active_guess=None):
        P, qv = self._qp_data(sp, Sigma)
        self.qp_solver.update_P(P)
        self.qp_solver.update_q(qv)
        sol = self.qp_solver.solve(z0=z0, active_guess=active_guess)
        if sol.status == qp.Status.PRIMAL_INFEASIBLE:
            raise InfeasibleStateError(
                "policy set is empty: state outside the feasible region")
        if sol.status != qp.Status.OPTIMAL:
            raise SolverError(f"inner QP failed with status {sol.status}")
        return sol

    def fw_lp(self, grad, active_guess=None, z0=None, max_steps=None):
        """Minimize the linearized cost over the policy set.

        The cost is linear, so the minimum sits on a face of the polytope
        and splitting iterations stall on the degenerate optimal set.
        Proximal-point steps avoid that: each step is a strictly convex QP,
        the iterates settle after a handful of steps, and a fixed point of
        the prox map minimizes the linear cost exactly.

        Returns (solution, settled). When the step budget runs out before
        the iterates reach a fixed point, the solution is still a feasible
        point of the polytope but not a certified minimizer, and the final
        iterate is kept as the center for the next call.
        """
        c = self._lp_cost(grad)
        scale = max(float(np.abs(c).max()), 1e-8)
        if self._mu is None or not 0.5 < self._mu / (_PROX_RATIO * scale) < 2.0:
            self._mu = _PROX_RATIO * scale
            self.lp_solver.update_P(self._mu * np.eye(self.lifted.n_z))
        # the previous iterate is the best center: the cost drifts slowly
        # between outer iterations, so the fixed point is a step or two away
        if self._lp_z is not None:
            z = self._lp_z
        elif z0 is not None:
            z = np.asarray(z0, dtype=float).copy()
        else:
            z = np.zeros(self.lifted.n_z)
        sol, z, settled = _prox_lp(
            self.lp_solver, c, self._mu, z, active=active_guess,
            max_steps=_PROX_MAX_STEPS if max_steps is None else max_steps)
        self._lp_z = z
        return sol, settled

    # -- main solve --------------------------------------------------------------

    def solve(self, x, warm=None):
        st = self.st
        spec = self.spec
        sp = self.set_state(x)
        d = spec.d
        trace = SolveTrace()
        t_start = time.perf_counter_ns()

        warm_z = None
        warm_active = None
        warm_lp_active = None
        warm_beta = None
        if warm is not None:
            if isinstance(warm, model.PolicyParams):
                warm_z = self.lifted.pack(warm.M, warm.v)
            else:
                warm_z = getattr(warm, "z_lift", None)
                warm_active = getattr(warm, "active", None)
                warm_lp_active = getattr(warm, "lp_active", None)
                warm_beta = getattr(warm, "beta", None)
                if warm_z is None and getattr(warm, "theta", None) is not None:
                    warm_z = self.lifted.pack(warm.theta.M, warm.theta.v)

        beta = st.beta_init
        if beta == "auto":
            beta = estimate_smoothness(sp, d)
        if warm_beta is not None:
            # the smoothness estimate transfers across solves of the same
            # scenario; reusing it skips the backtracking that an initial
            # beta below the true curvature would trigger again
            beta = float(warm_beta)

        if d.epsilon == 0.0:
            # the ambiguity set is a point: the problem is this single QP
            # and its polished solution certifies itself
            Sig0 = ambiguity.BlockCovariance.repeat(d.sigma_hat, spec.N)
            sol0 = self.nt_qp(sp, Sig0, z0=warm_z, active_guess=warm_active)
            theta = self._theta_from(sol0.z)
            wc = ambiguity.worst_case_gradient(sp, theta, d, tol=st.inner_tol)
            trace.add(t=0, f=wc.f, gap=0.0, eta=1.0, beta=float(beta),
                      inner=wc.f, qp_status=str(sol0.status.value),
                      lp_status="",
                      wall_ns=time.perf_counter_ns() - t_start)
            return DrmpcSolution(theta=theta, f=wc.f, Sigma=wc.Sigma, gap=0.0,
                                 trace=trace, status="optimal", iterations=1,
                                 z_lift=sol0.z, active=sol0.active,
                                 lp_active=warm_lp_active, beta=float(beta))

        theta = None
        z_cur = None
        qp_active = warm_active
        if warm_z is not None and self._feasible_point(warm_z):
            # a shifted previous policy is feasible at the new state by
            # construction and near-optimal once the loop settles into its
            # noise ball; starting from it skips the nominal-cost solve
            # and leaves only the tilt toward the new worst case
            theta = self._theta_from(warm_z)
            z_cur = warm_z
        else:
            # initial point: minimizer of the nominal-covariance cost
            Sig0 = ambiguity.BlockCovariance.repeat(d.sigma_hat, spec.N)
            sol0 = self.nt_qp(sp, Sig0, z0=warm_z, active_guess=warm_active)
            theta = self._theta_from(sol0.z)
            z_cur = sol0.z
            qp_active = sol0.active

        f_t = None
        # lacking LP history, the QP's active rows are a workable seed for
        # the certificate LP's working-set repair
        lp_active = warm_lp_active if warm_lp_active is not None else qp_active
        status = "max-iter"
        gap = math.inf
        wc = None
        qp_sol = None
        for t in range(st.max_iter):
            wc = ambiguity.worst_case_gradient(sp, theta, d, tol=st.inner_tol)
            f_t = wc.f
            if st.method == "NT":
                qp_sol = self.nt_qp(sp, wc.Sigma, z0=z_cur,
                                    active_guess=qp_active)
                qp_active = qp_sol.active
                qp_status = str(qp_sol.status.value)
                # best-response bound: the QP minimum under the worst-case
                # covariance lower-bounds the saddle value, so this
                # objective difference upper-bounds f(theta_t) - f*
                dev = max(self.qp_solver.objective(z_cur)
                          - self.qp_solver.objective(qp_sol.z), 0.0)
                target_z = qp_sol.z
                if st.certificate == "bound":
                    gap = dev
                    lp_status = ""
                    certified = True
                else:
                    lp_sol, settled = self.fw_lp(
                        wc.grad, active_guess=lp_active, z0=z_cur)
                    lp_active = lp_sol.active
                    if not settled and dev <= st.gap_tol:
                        # the bound alone would stop the solver, so spend a
                        # larger budget trying to certify via the LP
                        lp_sol, settled = self.fw_lp(
                            wc.grad, active_guess=lp_active, z0=z_cur,
                            max_steps=_PROX_ESCALATION)
                        lp_active = lp_sol.active
                    if settled:
                        theta_lp = self._theta_from(lp_sol.z)
                        gap = wc.grad.dot(theta.M - theta_lp.M,
                                          theta.v - theta_lp.v)
                    else:
                        gap = dev
                    lp_status = "optimal" if settled else "partial"
                    # an unsettled LP on a best-response bound at the
                    # evaluation noise floor is a saddle point whose face
                    # the prox iteration cannot certify; iterating further
                    # cannot move theta, so accept the bound
                    certified = settled or dev <= 1e-8 * (1.0 + abs(f_t))
            else:
                qp_status = ""
                lp_sol, settled = self.fw_lp(wc.grad, active_guess=lp_active,
                                             z0=z_cur)
                lp_active = lp_sol.active
                if not settled:
                    # the best-response bound needs the QP minimizer; an
                    # extra solve on the rare uncertified iterations
                    qp_sol = self.nt_qp(sp, wc.Sigma, z0=z_cur,
                                        active_guess=qp_active)
                    qp_active = qp_sol.active
                    qp_status = str(qp_sol.status.value)
                    gap = max(self.qp_solver.objective(z_cur)
                              - self.qp_solver.objective(qp_sol.z), 0.0)
                    if gap <= st.gap_tol:
                        # the bound alone would stop the solver, so spend a
                        # larger budget trying to certify via the LP
                        lp_sol, settled = self.fw_lp(
                            wc.grad, active_guess=lp_active, z0=z_cur,
                            max_steps=_PROX_ESCALATION)
                        lp_active = lp_sol.active
                if settled:
                    theta_lp = self._theta_from(lp_sol.z)
                    gap = wc.grad.dot(theta.M - theta_lp.M,
                                      theta.v - theta_lp.v)
                lp_status = "optimal" if settled else "partial"
                certified = settled
                target_z = lp_sol.z
            if certified and gap <= st.gap_tol:
                trace.add(t=t, f=f_t, gap=gap, eta=0.0, beta=float(beta),
                          inner=f_t, qp_status=qp_status, lp_status=lp_status,
                          wall_ns=time.perf_counter_ns() - t_start)
                status = "optimal"
                break

            target = self._theta_from(target_z)
            d_t = model.PolicyParams(target.M - theta.M, target.v - theta.v)
            g_t = -wc.grad.dot(d_t.M, d_t.v)

            if _dir_norm_sq(d_t.M, d_t.v) <= 0.0 or \
                    (st.method == "FW" and g_t <= 0.0):
                # oracle fixed point within inner tolerance
                trace.add(t=t, f=f_t, gap=gap, eta=0.0, beta=float(beta),
                          inner=f_t, qp_status=qp_status, lp_status=lp_status,
                          wall_ns=time.perf_counter_ns() - t_start)
                status = ("optimal" if certified and gap <= 10 * st.gap_tol
                          else "stalled")
                break

            if st.method == "NT" and g_t <= 1e-8 * (1.0 + abs(f_t)):
                # the predicted decrease is below what objective evaluations
                # can certify; a line search would only reject noise, while
                # the full best-response step still contracts toward the
                # fixed point through the flat directions
                eta = 1.0
                f_new = None
            elif st.stepsize == "adaptive":
                eta = step_adaptive(g_t, d_t, beta)
                f_new = None
            else:
                eta, beta, f_new = step_fully_adaptive(
                    sp, self.lifted, d, theta, d_t, g_t, beta,
                    zeta=st.zeta, tau=st.tau, f_t=f_t,
                    inner_tol=st.inner_tol,
                    max_backtracks=st.max_backtracks)
            trace.add(t=t, f=f_t, gap=gap, eta=eta, beta=float(beta),
                      inner=f_t, qp_status=qp_status, lp_status=lp_status,
                      wall_ns=time.perf_counter_ns() - t_start)
            theta = model.PolicyParams(theta.M + eta * d_t.M,
                                       theta.v + eta * d_t.v)
            if st.method == "NT" and eta == 1.0:
                z_cur = qp_sol.z
            else:
                z_cur = self.lifted.pack(theta.M, theta.v)
            f_t = f_new

        if wc is None:
            wc = ambiguity.worst_case_gradient(sp, theta, d, tol=st.inner_tol)
        return DrmpcSolution(theta=theta, f=wc.f, Sigma=wc.Sigma, gap=gap,
                             trace=trace, status=status,
                             iterations=len(trace), z_lift=z_cur,
                             active=qp_active, lp_active=lp_active,
                             beta=float(beta))


def fw_oracle(sp, lifted, theta, d=None, grad=None, settings=None):
    """Linearization minimizer F1(theta) over the lifted polytope."""
    if grad is None:
        wc = ambiguity.worst_case_gradient(sp, theta, sp.spec.d if d is None else d)
        grad = wc.grad
    c = np.zeros(lifted.n_z)
    c[:lifted.n_v] = grad.dv
    c[lifted.sl_m] = grad.dM[lifted.mfree_rows, lifted.mfree_cols]
    mu = _PROX_RATIO * max(float(np.abs(c).max()), 1e-8)
    qset = settings or qp.QpSettings(require_polish=True)
    if qset.dual_tol is None:
        qset = replace(qset, dual_tol=_DUAL_TOL)
    prox = qp.QpSolver(
        qp.QpProblem(P=mu * np.eye(lifted.n_z), q=np.zeros(lifted.n_z),
                     A=lifted.A, l=lifted.l.copy(), u=lifted.u.copy()), qset)
    z0 = lifted.pack(theta.M, theta.v)
    sol, _, settled = _prox_lp(prox, c, mu, z0, max_steps=_PROX_ESCALATION)
    if not settled:
        raise SolverError("linear oracle failed to certify a minimizer")
    M, v = lifted.extract(sol.z)
    return model.PolicyParams(M, v)


def nt_oracle(sp, lifted, theta, Sigma, settings=None):
    """Newton-type direction target: argmin of L(x, ., Sigma) over the
    lifted polytope."""
    K = sp.HuTHu
    Sbd = Sigma.as_blockdiag()
    nv, nm = lifted.n_v, lifted.n_mfree
    P = np.zeros((lifted.n_z, lifted.n_z))
    P[:nv, :nv] = 2.0 * K
    rows, cols = lifted.mfree_rows, lifted.mfree_cols
    if nm:
        P[nv:nv + nm, nv:nv + nm] = 2.0 * (
            K[np.ix_(rows, rows)] * Sbd[np.ix_(cols, cols)])
    qv = np.zeros(lifted.n_z)
    qv[:nv] = sp.Hu_lin
    if nm:
        qv[nv:nv + nm] = (2.0 * (sp.HuTHw @ Sbd))[rows, cols]
    static_idx = np.arange(nv + nm, lifted.n_z)
    prob = qp.QpProblem(P=P, q=qv, A=lifted.A, l=lifted.l.copy(),
                        u=lifted.u.copy(), static_idx=static_idx)
    sol = qp.solve_qp(prob, settings)
    if sol.status == qp.Status.PRIMAL_INFEASIBLE:
        raise InfeasibleStateError(
            "policy set is empty: state outside the feasible region")
    if sol.status != qp.Status.OPTIMAL:
        raise SolverError(f"QP oracle failed with status {sol.status}")
    M, v = lifted.extract(sol.z)
    return model.PolicyParams(M, v)


def certificate_gap(sp, lifted, theta, d=None, settings=None):
    """Duality-gap certificate (theta - F1(theta))' grad f(theta); an upper
    bound on f(theta) - f*."""
    dd = sp.spec.d if d is None else d
    wc = ambiguity.worst_case_gradient(sp, theta, dd)
    theta_lp = fw_oracle(sp, lifted, theta, d=dd, grad=wc.grad,
                         settings=settings)
    return wc.grad.dot(theta.M - theta_lp.M, theta.v - theta_lp.v)


def solve_drmpc(spec, x, settings=None, warm=None):
    """One-shot distributionally robust solve at state x (builds an engine;
    reuse DrmpcEngine directly in loops)."""
    engine = DrmpcEngine(spec, settings)
    return engine.solve(x, warm=warm)
