"""Closed-loop simulation: the receding-horizon feedback law, disturbance
sampling, Monte-Carlo rollouts, and aggregate performance statistics.

Each step applies u(k) = v(0) from the policy optimized at x(k) and then
advances x(k+1) = A x(k) + B u(k) + G w(k). Disturbance draws are keyed by
(master seed, realization, timestep), so the same streams replay across
controller variants and ambiguity radii (common random numbers) no matter
the execution order. Every realization owns its own solver engine, and the
policy optimized at step k is shifted into a feasible candidate at step k+1
to warm-start the next solve.
"""

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import ambiguity, model, sets, solver
from .errors import (DimensionError, InfeasibleStateError, ScenarioError,
                     SolverError)
from .linalg import check_psd, psd_sqrt

_SQRT3 = math.sqrt(3.0)


class DisturbanceModel:
    """Scaled-uniform disturbance sampler w = S omega with S = Sigma_true^{1/2}
    and omega iid uniform on [-sqrt(3), sqrt(3)]^q, so every draw has zero
    mean and covariance exactly Sigma_true.

    Draws are generated counter-style from (master_seed, realization,
    timestep), so sample(s, k) returns the same vector regardless of which
    controller or sweep point asks for it and in which order.
    """

    def __init__(self, Sigma_true, W, master_seed=0, law="scaled-uniform"):
        if law != "scaled-uniform":
            raise ScenarioError(f"unknown disturbance law {law!r}")
        self.law = law
        self.Sigma_true = check_psd(
            np.atleast_2d(np.asarray(Sigma_true, dtype=float)), "Sigma_true")
        self.q = self.Sigma_true.shape[0]
        if W.dim != self.q:
            raise DimensionError(
                f"W dim {W.dim} != disturbance dim {self.q}")
        master_seed = int(master_seed)
        if not 0 <= master_seed < 2 ** 64:
            raise ScenarioError("master_seed must fit in 64 bits")
        self.W = W
        self.master_seed = master_seed
        self.S = psd_sqrt(self.Sigma_true)
        # every sample must lie in the support set: the image of the
        # sampling cube under S sits inside {a'w <= b} exactly when
        # sqrt(3) * |S'a|_1 <= b, face by face
        reach = _SQRT3 * np.abs(W.H @ self.S).sum(axis=1)
        slack = W.h - reach
        if np.any(slack < -1e-12):
            i = int(np.argmin(slack))
            raise ScenarioError(
                "sampler can leave W: face %d reachable at %.6g > bound %.6g"
                % (i, reach[i], W.h[i]))

    def sample(self, s, k):
        """Disturbance vector for realization s at timestep k."""
        s = int(s)
        k = int(k)
        if s < 0 or k < 0:
            raise ScenarioError("realization and timestep must be >= 0")
        key = (self.master_seed << 64) | (s << 32) | k
        rng = np.random.Generator(np.random.Philox(key=key))
        omega = rng.uniform(-_SQRT3, _SQRT3, self.q)
        return self.S @ omega


@dataclass
class WarmStart:
    """Carrier for the lifted warm point, active-set guesses, and smoothness
    estimate passed to the next receding-horizon solve."""

    z_lift: np.ndarray
    active: object = None
    lp_active: object = None
    beta: float = None


@dataclass
class ClosedLoopRecord:
    """One rollout: states x(0..K), inputs u(0..K-1), stage costs, solver
    certificate gaps, and per-step solve times."""

    s: int
    x: np.ndarray
    u: np.ndarray
    stage_cost: np.ndarray
    gap: np.ndarray
    solve_ns: np.ndarray
    ok: bool = True
    error: str = None

    @property
    def steps(self):
        return self.u.shape[0]

    @property
    def running_avg(self):
        """Running average cost J_k = (1/k) sum_{j<k} l(j), k = 1..K."""
        if self.stage_cost.size == 0:
            return np.zeros(0)
        return np.cumsum(self.stage_cost) / np.arange(
            1, self.stage_cost.size + 1)

    def to_csv(self, path, deterministic_timing=True):
        n = self.x.shape[1]
        m = self.u.shape[1] if self.u.ndim == 2 else 0
        cols = (["k"] + [f"x{i}" for i in range(n)]
                + [f"u{i}" for i in range(m)]
                + ["stage_cost", "gap", "solve_ns"])
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for k in range(self.steps):
                ns = 0 if deterministic_timing else int(self.solve_ns[k])
                vals = ([f"{k}"]
                        + ["%.17g" % xv for xv in self.x[k]]
                        + ["%.17g" % uv for uv in self.u[k]]
                        + ["%.17g" % self.stage_cost[k],
                           "%.17g" % self.gap[k], str(ns)])
                fh.write(",".join(vals) + "\n")


def control_law(spec, x, settings=None, warm=None, engine=None):
    """Receding-horizon feedback: optimize the policy at x and return the
    first feedforward block u = v(0) along with the full solution (for warm
    starts and certificates). Deterministic given settings and warm start."""
    if engine is None:
        engine = solver.DrmpcEngine(spec, settings)
    sol = engine.solve(np.asarray(x, dtype=float).ravel(), warm=warm)
    return sol.theta.v[:spec.m].copy(), sol


def shift_policy(spec, theta, x_next, w0):
    """Feasible candidate policy at the successor state: replay inputs
    1..N-1 of the previous policy with the realized w(0) folded into the
    feedforward, and fill the final slot with the terminal law u = K_f x
    applied to the predicted terminal state (zero when no K_f is declared).
    """
    N, m, q, n = spec.N, spec.m, spec.q, spec.n
    Mp, vp = theta.M, theta.v
    w0 = np.asarray(w0, dtype=float).ravel()
    M = np.zeros_like(Mp)
    v = np.zeros_like(vp)
    if N > 1:
        M[:(N - 1) * m, :(N - 1) * q] = Mp[m:, q:]
        v[:(N - 1) * m] = vp[m:] + Mp[m:, :q] @ w0
    K = spec.K_f
    if K is not None and np.any(K != 0.0):
        Ap = [np.eye(n)]
        for _ in range(N - 1):
            Ap.append(spec.A @ Ap[-1])
        xbar = Ap[N - 1] @ np.asarray(x_next, dtype=float).ravel()
        for i in range(N - 1):
            xbar = xbar + Ap[N - 2 - i] @ (spec.B @ v[i * m:(i + 1) * m])
        v[(N - 1) * m:] = K @ xbar
        for j in range(N - 1):
            # terminal-state response to w(j) under the shifted policy
            resp = Ap[N - 2 - j] @ spec.G
            for i in range(j + 1, N - 1):
                resp = resp + Ap[N - 2 - i] @ (
                    spec.B @ M[i * m:(i + 1) * m, j * q:(j + 1) * q])
            M[(N - 1) * m:, j * q:(j + 1) * q] = K @ resp
    return model.PolicyParams(M, v)


def simulate(spec, x0, T, S, dist, settings=None, warm_start=True):
    """Monte-Carlo closed-loop rollouts: S realizations of T steps each,
    disturbances drawn per (realization, timestep) from dist. A failed
    realization is recorded with its diagnostic, never dropped silently."""
    if int(T) < 1:
        raise ScenarioError(
            "T must be >= 1: the average cost is undefined on an empty "
            "trajectory")
    if int(S) < 1:
        raise ScenarioError("S must be >= 1")
    T = int(T)
    S = int(S)
    x0 = np.asarray(x0, dtype=float).ravel()
    n, m = spec.n, spec.m
    if x0.shape != (n,):
        raise DimensionError(f"x0 shape {x0.shape} != ({n},)")
    records = []
    for s in range(S):
        eng = solver.DrmpcEngine(spec, settings)
        xs = np.zeros((T + 1, n))
        us = np.zeros((T, m))
        cost = np.zeros(T)
        gaps = np.zeros(T)
        ns = np.zeros(T, dtype=np.int64)
        xs[0] = x0
        x = x0
        warm = None
        ok = True
        err = None
        done = 0
        for k in range(T):
            t0 = time.perf_counter_ns()
            try:
                sol = eng.solve(x, warm=warm)
            except (InfeasibleStateError, SolverError) as exc:
                ok = False
                err = f"realization {s} failed at step {k}: {exc}"
                break
            ns[k] = time.perf_counter_ns() - t0
            u = sol.theta.v[:m]
            us[k] = u
            cost[k] = float(x @ spec.Q @ x + u @ spec.R @ u)
            gaps[k] = sol.gap
            w = dist.sample(s, k)
            x = spec.A @ x + spec.B @ u + spec.G @ w
            xs[k + 1] = x
            done = k + 1
            if warm_start:
                cand = shift_policy(spec, sol.theta, x, w)
                warm = WarmStart(z_lift=eng.lifted.pack(cand.M, cand.v),
                                 active=sol.active, lp_active=sol.lp_active,
                                 beta=sol.beta)
        records.append(ClosedLoopRecord(
            s=s, x=xs[:done + 1].copy(), u=us[:done].copy(),
            stage_cost=cost[:done].copy(), gap=gaps[:done].copy(),
            solve_ns=ns[:done].copy(), ok=ok, error=err))
    return records


@dataclass
class ClosedLoopStats:
    """Sample statistics over the successful realizations of one run."""

    n_real: int
    n_failed: int
    T: int
    ex2: np.ndarray
    j_mean: np.ndarray
    j_std: np.ndarray
    j_min: np.ndarray
    j_max: np.ndarray

    @property
    def j_final(self):
        return float(self.j_mean[-1])

    @property
    def j_final_std(self):
        return float(self.j_std[-1])

    @property
    def j_final_min(self):
        return float(self.j_min[-1])

    @property
    def j_final_max(self):
        return float(self.j_max[-1])

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("k,ex2,j_mean,j_std,j_min,j_max\n")
            for k in range(1, self.T + 1):
                fh.write("%d,%.17g,%.17g,%.17g,%.17g,%.17g\n"
                         % (k, self.ex2[k], self.j_mean[k - 1],
                            self.j_std[k - 1], self.j_min[k - 1],
                            self.j_max[k - 1]))


def aggregate(records):
    """Cross-realization statistics: mean squared state E[|x(k)|^2], the
    average running cost J_k with its spread, and min/max envelopes."""
    good = [r for r in records if r.ok]
    if not good:
        raise ScenarioError("no successful realization to aggregate")
    T = good[0].steps
    for r in good:
        if r.steps != T:
            raise ScenarioError(
                "realizations have unequal lengths "
                f"({r.steps} vs {T}); aggregate needs one horizon")
    X2 = np.stack([np.sum(r.x * r.x, axis=1) for r in good])
    J = np.stack([r.running_avg for r in good])
    n_good = len(good)
    if n_good > 1:
        j_std = J.std(axis=0, ddof=1)
    else:
        j_std = np.zeros(T)
    return ClosedLoopStats(
        n_real=n_good, n_failed=len(records) - n_good, T=T,
        ex2=X2.mean(axis=0), j_mean=J.mean(axis=0), j_std=j_std,
        j_min=J.min(axis=0), j_max=J.max(axis=0))


@dataclass
class SweepCell:
    """One ambiguity-radius grid point of a sweep."""

    epsilon: float
    j_mean: float = math.nan
    j_std: float = math.nan
    j_min: float = math.nan
    j_max: float = math.nan
    n_failed: int = 0
    error: str = None


def with_epsilon(spec, epsilon):
    """Copy of the scenario with the ambiguity radius replaced."""
    d = ambiguity.AmbiguityParams(float(epsilon), spec.d.sigma_hat.copy())
    return replace(spec, d=d)


def epsilon_sweep(spec, eps_grid, x0, T, S, dist, settings=None):
    """Closed-loop performance as a function of the ambiguity radius. Every
    grid point replays the same disturbance streams (common random numbers);
    per-cell failures are recorded in the table, not raised."""
    rows = []
    for eps in eps_grid:
        cell = SweepCell(epsilon=float(eps))
        try:
            sp_e = with_epsilon(spec, eps)
            if sets.check_membership_D(sp_e) == "reject":
                raise ScenarioError(
                    f"(epsilon={eps}, sigma_hat) fails the ambiguity "
                    "membership check: the sampler cannot realize the "
                    "nominal covariance inside W")
            recs = simulate(sp_e, x0, T, S, dist, settings=settings)
            st = aggregate(recs)
            cell.j_mean = st.j_final
            cell.j_std = st.j_final_std
            cell.j_min = st.j_final_min
            cell.j_max = st.j_final_max
            cell.n_failed = st.n_failed
        except (ScenarioError, SolverError, InfeasibleStateError) as exc:
            cell.error = str(exc)
        rows.append(cell)
    return rows


def sweep_to_csv(rows, path):
    with open(path, "w") as fh:
        fh.write("epsilon,j_mean,j_std,j_min,j_max,n_failed,error\n")
        for c in rows:
            err = "" if c.error is None else c.error.replace(",", ";")
            fh.write("%.17g,%.17g,%.17g,%.17g,%.17g,%d,%s\n"
                     % (c.epsilon, c.j_mean, c.j_std, c.j_min, c.j_max,
                        c.n_failed, err))
