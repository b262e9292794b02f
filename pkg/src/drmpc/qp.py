"""Dense convex QP/LP solver: operator splitting plus active-set polish.

Solves

    min 0.5 z' P z + q' z   s.t.   l <= A z <= u      (equalities via l = u)

with the over-relaxed ADMM splitting used by OSQP (alternating a regularized
KKT solve with projection onto the bound box), Ruiz equilibration, vector
step parameter rho (boosted on equality rows), divergence certificates for
primal/dual infeasibility, and a mandatory active-set polish before a
solution is declared optimal.

Two structural features serve the outer control loops:

* a declared "static" variable block on which P is always zero (the lifted
  auxiliaries); the KKT matrix is factored once on that block and only a
  Schur complement on the remaining variables is refactored when P changes;
* direct warm solves from a guessed active set (typically the previous
  timestep's), verified against the full KKT conditions before being
  accepted, with factor caching keyed by the active set.

Dual sign convention: stationarity is P z + q + A' y = 0, so y is
nonnegative on active upper bounds and nonpositive on active lower bounds
(the classical multiplier of a row a'z >= l is -y).
"""

import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import DimensionError, SolverError

_INF = 1e29


class Status(str, Enum):
    OPTIMAL = "optimal"
    PRIMAL_INFEASIBLE = "primal-infeasible"
    DUAL_INFEASIBLE = "dual-infeasible"
    MAX_ITER = "max-iter"
    UNSOLVED = "unsolved"


@dataclass
class QpSettings:
    eps_abs: float = 1e-9
    eps_rel: float = 1e-9
    max_iter: int = 200000
    sigma: float = 1e-6
    alpha: float = 1.6
    rho: float = 0.1
    rho_eq_scale: float = 1e3
    rho_min: float = 1e-6
    rho_max: float = 1e6
    adaptive_rho: bool = True
    adaptive_rho_tol: float = 5.0
    check_every: int = 25
    scaling_iters: int = 10
    eps_prim_inf: float = 1e-7
    eps_dual_inf: float = 1e-7
    polish_delta: float = 1e-6
    refine_steps: int = 4
    polish_trigger: float = 1e4     # try polishing at this multiple of eps
    repair_rounds: int = 40         # active-set add/drop rounds per polish
    require_polish: bool = False    # keep iterating until a polish succeeds
    dual_tol: float = None          # absolute multiplier sign tolerance;
                                    # None scales 1e-9 with the dual norm


@dataclass
class QpProblem:
    P: object            # (n, n) PSD, or None for an LP
    q: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray
    static_idx: object = None   # variable indices where P stays zero

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.l = np.asarray(self.l, dtype=float).ravel()
        self.u = np.asarray(self.u, dtype=float).ravel()
        n = self.q.shape[0]
        if self.P is not None:
            self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
            if self.P.shape != (n, n):
                raise DimensionError(f"P shape {self.P.shape} != ({n}, {n})")
        if self.A.shape[1] != n:
            raise DimensionError(f"A has {self.A.shape[1]} cols, expected {n}")
        if self.l.shape[0] != self.A.shape[0] or self.u.shape[0] != self.A.shape[0]:
            raise DimensionError("bound lengths do not match A rows")
        if np.any(self.l > self.u + 1e-12):
            raise SolverError("inconsistent bounds: some l > u")


@dataclass
class QpSolution:
    z: np.ndarray
    y: np.ndarray
    status: Status
    iterations: int
    obj: float
    pri_res: float
    dua_res: float
    gap: float
    polished: bool = False
    active: object = None      # int8 per row: -1 lower, 0 inactive, +1 upper


def _finite_or(v, fallback):
    out = v.copy()
    out[~np.isfinite(out)] = fallback
    return out


def _scalar_diag(P):
    """alpha when P equals alpha I exactly (alpha > 0), else None."""
    if P is None:
        return None
    d = P.diagonal()
    if d.size == 0:
        return None
    a = float(d[0])
    if a <= 0.0 or not np.all(d == a):
        return None
    if np.count_nonzero(P) != d.size:
        return None
    return a


@dataclass
class _ChainItem:
    """Working-set factors served from the incremental Schur chain; the
    arrays are views into the chain's buffers and must not outlive the
    next chain mutation."""
    A_a: np.ndarray
    chol: tuple
    order: np.ndarray


class _SchurChain:
    """Incrementally factored working-set Schur complement for scalar-P
    problems: S = A_W A_W' / (alpha + delta) + delta I.

    Rows are kept in insertion order, so adding a row only appends a
    bordered Cholesky row (one triangular solve, no downdate) and removing
    one re-triangularizes the tail with orthogonal Givens rotations, both
    O(k^2) against the O(k^3) of a fresh factorization. Correctness never
    rests on the factor: callers refine against the exact KKT system and
    verify candidates in full, so accumulated drift only costs speed, and
    the chain rebuilds itself periodically anyway.
    """

    def __init__(self, A, scale, delta):
        self.A = A
        self.scale = scale
        self.delta = delta
        self.cap = 64
        self.k = 0
        self.order = np.zeros(0, dtype=int)
        self.L = np.zeros((self.cap, self.cap))
        self.A_buf = np.zeros((self.cap, A.shape[1]))
        self.pver = -1
        self._mutations = 0
        self._fchol = None

    def fchol(self):
        """Fortran-ordered copy of the live factor, cached between
        mutations so repeated solves at one working set share it."""
        if self._fchol is None:
            self._fchol = np.asfortranarray(self.L[:self.k, :self.k])
        return self._fchol

    def _grow(self, need):
        while self.cap < need:
            self.cap = int(self.cap * 1.5) + 8
        L = np.zeros((self.cap, self.cap))
        L[:self.k, :self.k] = self.L[:self.k, :self.k]
        self.L = L
        B = np.zeros((self.cap, self.A.shape[1]))
        B[:self.k] = self.A_buf[:self.k]
        self.A_buf = B

    def rebuild(self, rows):
        rows = np.asarray(rows, dtype=int)
        k = rows.size
        if k > self.cap:
            self._grow(k)
        self.order = rows.copy()
        self.k = k
        self._mutations = 0
        self._fchol = None
        if k:
            self.A_buf[:k] = self.A[rows]
            Aw = self.A_buf[:k]
            S = (Aw @ Aw.T) * self.scale
            S[np.diag_indices(k)] += self.delta
            self.L[:k, :k] = np.linalg.cholesky(S)

    def append(self, j):
        k = self.k
        if k + 1 > self.cap:
            self._grow(k + 1)
        a = self.A[j]
        col = (self.A_buf[:k] @ a) * self.scale
        spp = float(a @ a) * self.scale + self.delta
        if k:
            w = solve_triangular(self.L[:k, :k], col, lower=True,
                                 check_finite=False)
            d2 = spp - float(w @ w)
        else:
            w = col
            d2 = spp
        # the ridge keeps S positive definite even for dependent rows, so a
        # pivot materially below delta means the factor has drifted
        if not d2 > 0.25 * self.delta:
            raise np.linalg.LinAlgError("schur chain pivot loss")
        self.A_buf[k] = a
        self.L[k, :k] = w
        self.L[k, k] = math.sqrt(d2)
        self.order = np.append(self.order, j)
        self.k = k + 1
        self._mutations += 1
        self._fchol = None

    def delete(self, pos):
        k = self.k
        L = self.L
        L[pos:k - 1, :k] = L[pos + 1:k, :k]
        self.A_buf[pos:k - 1] = self.A_buf[pos + 1:k]
        self.order = np.delete(self.order, pos)
        for i in range(pos, k - 1):
            a = L[i, i]
            b = L[i, i + 1]
            r = math.hypot(a, b)
            if r == 0.0:
                raise np.linalg.LinAlgError("schur chain delete breakdown")
            c = a / r
            s = b / r
            col_a = L[i:k - 1, i].copy()
            col_b = L[i:k - 1, i + 1].copy()
            L[i:k - 1, i] = c * col_a + s * col_b
            L[i:k - 1, i + 1] = c * col_b - s * col_a
        self.k = k - 1
        L[self.k, :k] = 0.0
        L[:self.k, self.k] = 0.0
        self._mutations += 1
        self._fchol = None

    def ensure(self, rows):
        """Bring the factored set to exactly `rows` (sorted indices)."""
        drops = np.setdiff1d(self.order, rows)
        adds = np.setdiff1d(rows, self.order)
        work = drops.size + adds.size
        if work == 0:
            return
        if (self.k == 0 or work > max(16, rows.size // 4)
                or self._mutations > 1000):
            self.rebuild(rows)
            return
        for j in drops:
            self.delete(int(np.nonzero(self.order == j)[0][0]))
        for j in adds:
            self.append(int(j))


def _ruiz(P, A, q, iters):
    """Symmetric Ruiz equilibration of [[P, A'], [A, 0]] plus cost scaling."""
    n = q.shape[0]
    m = A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    Pb = P.copy() if P is not None else None
    Ab = A.copy()
    qb = q.copy()
    for _ in range(iters):
        cp = np.abs(Pb).max(axis=0) if Pb is not None else np.zeros(n)
        ca = np.abs(Ab).max(axis=0) if m else np.zeros(n)
        col = np.maximum(cp, ca)
        ra = np.abs(Ab).max(axis=1) if m else np.zeros(0)
        dx = 1.0 / np.sqrt(np.clip(col, 1e-8, 1e8))
        de = 1.0 / np.sqrt(np.clip(ra, 1e-8, 1e8))
        dx[col == 0.0] = 1.0
        if m:
            de[ra == 0.0] = 1.0
        if Pb is not None:
            Pb = dx[:, None] * Pb * dx[None, :]
        Ab = de[:, None] * Ab * dx[None, :]
        qb = dx * qb
        D *= dx
        E *= de
    if Pb is not None and Pb.size:
        pcols = np.abs(Pb).max(axis=0)
        denom = max(float(pcols.mean()), float(np.abs(qb).max()), 1e-8)
    else:
        denom = max(float(np.abs(qb).max()), 1e-8)
    c = 1.0 / denom
    if Pb is not None:
        Pb = c * Pb
    qb = c * qb
    return D, E, c, Pb, Ab, qb


class _KktFactor:
    """Cholesky machinery for K = P + sigma I + A' diag(rho) A with an
    optional static block (P identically zero there) factored once."""

    def __init__(self, n, static_idx, sigma):
        self.n = n
        self.sigma = sigma
        if static_idx is not None and len(static_idx):
            s = np.zeros(n, dtype=bool)
            s[np.asarray(static_idx, dtype=int)] = True
            self.s_mask = s
            self.d_idx = np.nonzero(~s)[0]
            self.s_idx = np.nonzero(s)[0]
            self.split = self.s_idx.size > 0 and self.d_idx.size > 0
        else:
            self.split = False
            self.d_idx = np.arange(n)
            self.s_idx = np.arange(0)
        self._full_chol = None

    def set_rho_part(self, K_rho):
        """K_rho = sigma I + A' diag(rho) A; refactors the static block."""
        self.K_rho = K_rho
        if self.split:
            ss = K_rho[np.ix_(self.s_idx, self.s_idx)]
            self.chol_ss = cho_factor(ss, lower=True, check_finite=False)
            self.K_sd = K_rho[np.ix_(self.s_idx, self.d_idx)]
            self.Kss_inv_Ksd = cho_solve(self.chol_ss, self.K_sd,
                                         check_finite=False)
            self.base_dd = K_rho[np.ix_(self.d_idx, self.d_idx)] \
                - self.K_sd.T @ self.Kss_inv_Ksd

    def set_P(self, P):
        """P is the scaled quadratic term (None for an LP)."""
        if self.split:
            if P is None:
                S_d = self.base_dd
            else:
                S_d = self.base_dd + P[np.ix_(self.d_idx, self.d_idx)]
            self.chol_dd = cho_factor(S_d, lower=True, check_finite=False)
        else:
            K = self.K_rho if P is None else self.K_rho + P
            self._full_chol = cho_factor(K, lower=True, check_finite=False)

    def solve(self, b):
        if not self.split:
            return cho_solve(self._full_chol, b, check_finite=False)
        bs = b[self.s_idx]
        bd = b[self.d_idx]
        t = cho_solve(self.chol_ss, bs, check_finite=False)
        xd = cho_solve(self.chol_dd, bd - self.K_sd.T @ t, check_finite=False)
        xs = t - self.Kss_inv_Ksd @ xd
        out = np.empty_like(b)
        out[self.d_idx] = xd
        out[self.s_idx] = xs
        return out


class QpSolver:
    """Reusable solver instance: scaling and structural factorizations are
    done once, then q, bounds, and the P block can be updated in place."""

    def __init__(self, prob, settings=None):
        self.st = settings or QpSettings()
        self.prob = prob
        self.n = prob.q.shape[0]
        self.m = prob.A.shape[0]
        self.D, self.E, self.c, self.Pb, self.Ab, self.qb = _ruiz(
            prob.P, prob.A, prob.q, self.st.scaling_iters)
        self.lb = self.E * prob.l
        self.ub = self.E * prob.u
        self.eq = np.isfinite(prob.l) & np.isfinite(prob.u) & \
            (np.abs(prob.u - prob.l) < 1e-14 * np.maximum(1.0, np.abs(prob.u)))
        self.loose = (prob.l < -_INF) & (prob.u > _INF)
        ineq = ~self.eq & ~self.loose
        Ai = self.Ab[ineq]
        Ae = self.Ab[self.eq]
        Al = self.Ab[self.loose]
        self.AtA_in = Ai.T @ Ai if Ai.size else np.zeros((self.n, self.n))
        self.AtA_eq = Ae.T @ Ae if Ae.size else np.zeros((self.n, self.n))
        self.AtA_loose = Al.T @ Al if Al.size else None
        self.ineq = ineq
        self.kkt = _KktFactor(self.n, prob.static_idx, self.st.sigma)
        self._set_rho(self.st.rho)
        self.kkt.set_P(self.Pb)
        self._p_version = 0
        self._pinv_version = -1
        self._pinv_scalar = None
        self._p_scalar = _scalar_diag(self.prob.P)
        self._chain = None
        self._as_cache = OrderedDict()
        self._as_cache_max = 8
        self.xbar = np.zeros(self.n)
        self.zbar = np.zeros(self.m)
        self.ybar = np.zeros(self.m)

    # -- parameter updates -------------------------------------------------

    def _set_rho(self, rho):
        rho = float(np.clip(rho, self.st.rho_min, self.st.rho_max))
        self.rho_base = rho
        rho_eq = float(np.clip(rho * self.st.rho_eq_scale,
                               self.st.rho_min, self.st.rho_max))
        self.rho_vec = np.full(self.m, rho)
        self.rho_vec[self.eq] = rho_eq
        self.rho_vec[self.loose] = self.st.rho_min
        K_rho = self.st.sigma * np.eye(self.n) + rho * self.AtA_in \
            + rho_eq * self.AtA_eq
        if self.AtA_loose is not None:
            K_rho += self.st.rho_min * self.AtA_loose
        self.kkt.set_rho_part(K_rho)

    def update_P(self, P):
        """Replace the quadratic term; only the dynamic-block Schur
        complement is refactored. P must stay zero on the static block.
        An unchanged P keeps the factor caches, so repeated solves of the
        same quadratic stay warm."""
        Pn = None if P is None else np.atleast_2d(np.asarray(P, dtype=float))
        if (Pn is not None and self.prob.P is not None
                and Pn.shape == self.prob.P.shape
                and np.array_equal(Pn, self.prob.P)):
            return
        self.prob.P = Pn
        if self.prob.P is None:
            self.Pb = None
        else:
            self.Pb = self.c * (self.D[:, None] * self.prob.P * self.D[None, :])
        self.kkt.set_P(self.Pb)
        self._p_version += 1
        self._p_scalar = _scalar_diag(self.prob.P)
        self._as_cache.clear()

    def update_q(self, q):
        self.prob.q = np.asarray(q, dtype=float).ravel()
        if self.Pb is None:
            # pure LP: the cost scale must track the live cost vector, not
            # whatever placeholder the solver was constructed with
            c_new = 1.0 / max(float(np.abs(self.D * self.prob.q).max()), 1e-8)
            if not (0.5 < c_new / self.c < 2.0):
                # the warm dual iterate is stored in cost-scaled units
                self.ybar *= c_new / self.c
                self.c = c_new
        self.qb = self.c * (self.D * self.prob.q)

    def update_bounds(self, l=None, u=None):
        if l is not None:
            self.prob.l = np.asarray(l, dtype=float).ravel()
            self.lb = self.E * self.prob.l
        if u is not None:
            self.prob.u = np.asarray(u, dtype=float).ravel()
            self.ub = self.E * self.prob.u

    # -- unscaled quantities ------------------------------------------------

    def _unscale(self, xbar, zbar, ybar):
        x = self.D * xbar
        z = zbar / self.E
        y = (self.E * ybar) / self.c
        return x, z, y

    def _Px(self, x):
        if self._p_scalar is not None:
            return self._p_scalar * x
        return self.prob.P @ x if self.prob.P is not None else np.zeros_like(x)

    def _residuals(self, x, z, y):
        # row-wise primal scale: a single large row value (a loose synthetic
        # box sitting at its bound) must not widen the tolerance for every
        # other row, so the worst row is taken relative to its own magnitude
        Ax = self.prob.A @ x
        if self.m:
            r = np.abs(Ax - z) / (1.0 + np.abs(Ax))
            j = int(np.argmax(r))
            pri = float(abs(Ax[j] - z[j]))
            eps_pri = self.st.eps_abs + self.st.eps_rel * float(abs(Ax[j]))
        else:
            pri = 0.0
            eps_pri = self.st.eps_abs
        Px = self._Px(x)
        Aty = self.prob.A.T @ y if self.m else np.zeros(self.n)
        dua = float(np.abs(Px + self.prob.q + Aty).max())
        eps_dua = self.st.eps_abs + self.st.eps_rel * max(
            float(np.abs(Px).max()), float(np.abs(Aty).max()),
            float(np.abs(self.prob.q).max()))
        return pri, eps_pri, dua, eps_dua

    def _objective(self, x):
        return float(0.5 * x @ self._Px(x) + self.prob.q @ x)

    def objective(self, x):
        """Objective value 0.5 x'Px + q'x at x under the current data."""
        return self._objective(x)

    def _gap(self, x, y):
        lam_u = np.maximum(y, 0.0)
        lam_l = np.maximum(-y, 0.0)
        l = self.prob.l
        u = self.prob.u
        dual = -0.5 * float(x @ self._Px(x))
        dual += float(np.sum(np.where(lam_l > 0, _finite_or(l, 0.0) * lam_l, 0.0)))
        dual -= float(np.sum(np.where(lam_u > 0, _finite_or(u, 0.0) * lam_u, 0.0)))
        return abs(self._objective(x) - dual)

    # -- infeasibility certificates ------------------------------------------

    def _primal_cert(self, dy):
        nrm = float(np.abs(dy).max()) if dy.size else 0.0
        if nrm <= 1e-14:
            return False
        dy = dy / nrm
        if float(np.abs(self.prob.A.T @ dy).max()) > self.st.eps_prim_inf:
            return False
        dyp = np.maximum(dy, 0.0)
        dym = np.minimum(dy, 0.0)
        if np.any(dyp[self.prob.u > _INF] > self.st.eps_prim_inf):
            return False
        if np.any(dym[self.prob.l < -_INF] < -self.st.eps_prim_inf):
            return False
        val = float(np.sum(np.where(dyp > 0, _finite_or(self.prob.u, 0.0) * dyp, 0.0))
                    + np.sum(np.where(dym < 0, _finite_or(self.prob.l, 0.0) * dym, 0.0)))
        return val < -self.st.eps_prim_inf

    def _dual_cert(self, dx):
        nrm = float(np.abs(dx).max()) if dx.size else 0.0
        if nrm <= 1e-14:
            return False
        dx = dx / nrm
        if float(np.abs(self._Px(dx)).max()) > self.st.eps_dual_inf:
            return False
        if float(self.prob.q @ dx) >= -self.st.eps_dual_inf:
            return False
        Adx = self.prob.A @ dx
        ok_u = (self.prob.u > _INF) | (Adx <= self.st.eps_dual_inf)
        ok_l = (self.prob.l < -_INF) | (Adx >= -self.st.eps_dual_inf)
        return bool(np.all(ok_u & ok_l))

    # -- active-set machinery -------------------------------------------------

    def _pinv_factor(self):
        """Cholesky of (P + delta I) on the dynamic block; the static block
        (P zero there) is handled in closed form, and a scalar P needs no
        factorization at all."""
        if self._pinv_version == self._p_version:
            return
        delta = self.st.polish_delta
        k = self.kkt
        self._pinv_scalar = None
        if self._p_scalar is not None and not k.split:
            self._pinv_scalar = self._p_scalar + delta
            self._chol_pd = None
        elif k.split:
            if self.prob.P is None:
                self._chol_pd = None
            else:
                Pdd = self.prob.P[np.ix_(k.d_idx, k.d_idx)]
                self._chol_pd = cho_factor(Pdd + delta * np.eye(k.d_idx.size),
                                           lower=True, check_finite=False)
        else:
            if self.prob.P is None:
                self._chol_pd = None
            else:
                self._chol_pd = cho_factor(
                    self.prob.P + delta * np.eye(self.n),
                    lower=True, check_finite=False)
        self._pinv_version = self._p_version

    def _pinv_apply(self, b):
        delta = self.st.polish_delta
        k = self.kkt
        if self._pinv_scalar is not None:
            return b / self._pinv_scalar
        if not k.split:
            if self._chol_pd is None:
                return b / delta
            return cho_solve(self._chol_pd, b, check_finite=False)
        out = np.empty_like(b)
        if self._chol_pd is None:
            out[k.d_idx] = b[k.d_idx] / delta
        else:
            out[k.d_idx] = cho_solve(self._chol_pd, b[k.d_idx],
                                     check_finite=False)
        out[k.s_idx] = b[k.s_idx] / delta
        return out

    def _chain_item(self, rows):
        ch = self._chain
        if ch is None or ch.pver != self._p_version:
            delta = self.st.polish_delta
            ch = _SchurChain(self.prob.A, 1.0 / (self._p_scalar + delta),
                             delta)
            ch.pver = self._p_version
            self._chain = ch
        try:
            ch.ensure(rows)
        except np.linalg.LinAlgError:
            self._chain = None
            return None
        k = ch.k
        return _ChainItem(A_a=ch.A_buf[:k], chol=(ch.fchol(), True),
                          order=ch.order)

    def _as_factors(self, key, rows, store=True):
        if self._p_scalar is not None and not self.kkt.split and rows.size:
            item = self._chain_item(rows)
            if item is not None:
                return item
        cached = self._as_cache.get(key)
        if cached is not None:
            self._as_cache.move_to_end(key)
            return cached
        delta = self.st.polish_delta
        A_a = self.prob.A[rows]
        if rows.size:
            if A_a.flags.c_contiguous:
                PiAt = self._pinv_apply_mat(A_a.T)
            else:
                PiAt = self._pinv_apply_mat(np.ascontiguousarray(A_a.T))
            S = A_a @ PiAt + delta * np.eye(rows.size)
            chol_S = cho_factor(S, lower=True, check_finite=False)
        else:
            chol_S = None
        item = (A_a, chol_S)
        if store:
            self._store_factors(key, item)
        return item

    def _store_factors(self, key, item):
        # chain items hold views into mutable buffers; never cache them
        if isinstance(item, _ChainItem):
            return
        self._as_cache[key] = item
        self._as_cache.move_to_end(key)
        if len(self._as_cache) > self._as_cache_max:
            self._as_cache.popitem(last=False)

    def _pinv_apply_mat(self, B):
        delta = self.st.polish_delta
        k = self.kkt
        if self._pinv_scalar is not None:
            return B / self._pinv_scalar
        if not k.split:
            if self._chol_pd is None:
                return B / delta
            return cho_solve(self._chol_pd, B, check_finite=False)
        out = np.empty_like(B)
        if self._chol_pd is None:
            out[k.d_idx] = B[k.d_idx] / delta
        else:
            out[k.d_idx] = cho_solve(self._chol_pd, B[k.d_idx],
                                     check_finite=False)
        out[k.s_idx] = B[k.s_idx] / delta
        return out

    def _kkt_reg_solve(self, A_a, chol_S, rhs1, rhs2):
        delta = self.st.polish_delta
        t = self._pinv_apply(rhs1)
        if chol_S is None:
            return t, np.zeros(0)
        y = cho_solve(chol_S, A_a @ t - rhs2, check_finite=False)
        x = t - self._pinv_apply(A_a.T @ y)
        return x, y

    def _kkt_solve_rows(self, active, rows, store=True):
        """Equality-KKT solve for a working set: factor (or fetch from
        cache), solve, then iteratively refine against the unregularized
        system. Returns (x, y_a, factor_item) or None when the
        factorization fails or a required bound is infinite."""
        self._pinv_factor()
        key = active.tobytes()
        try:
            item = self._as_factors(key, rows, store=store)
        except np.linalg.LinAlgError:
            return None
        if isinstance(item, _ChainItem):
            # the chain keeps rows in insertion order; solve in that order
            # and map the multipliers back to sorted order afterwards
            A_a, chol_S, ord_rows = item.A_a, item.chol, item.order
        else:
            A_a, chol_S = item
            ord_rows = rows
        b_a = np.where(active[ord_rows] > 0, self.prob.u[ord_rows],
                       self.prob.l[ord_rows])
        if rows.size and not np.all(np.isfinite(b_a)):
            return None
        x, y_a = self._kkt_reg_solve(A_a, chol_S, -self.prob.q, b_a)
        scale = max(1.0, float(np.abs(self.prob.q).max()))
        for _ in range(self.st.refine_steps):
            r1 = self._Px(x) + self.prob.q + (A_a.T @ y_a if rows.size else 0.0)
            r2 = (A_a @ x - b_a) if rows.size else np.zeros(0)
            res = float(np.abs(r1).max())
            if rows.size:
                res = max(res, float(np.abs(r2).max()))
            if res <= 1e-14 * scale:
                break
            dx, dy = self._kkt_reg_solve(A_a, chol_S, -r1, -r2)
            x = x + dx
            if rows.size:
                y_a = y_a + dy
        if ord_rows is not rows and rows.size:
            pos = np.searchsorted(rows, ord_rows)
            y_sorted = np.empty_like(y_a)
            y_sorted[pos] = y_a
            y_a = y_sorted
        return x, y_a, item

    def _ytol(self, y_a):
        """Multiplier sign tolerance for the release test and the final
        clamp. Scaling with the dual norm keeps refactoring noise out of
        the working set, but it also hides genuinely wrong-signed rows
        whenever some multiplier is large; callers that consume the
        multipliers as certificates set an absolute dual_tol instead.
        """
        if self.st.dual_tol is not None:
            return self.st.dual_tol
        return 1e-9 * max(1.0, float(np.abs(y_a).max()))

    def _active_set_repair(self, seed, rounds=None):
        """Drive a guessed active set to an exact KKT point.

        Each round solves the working-set KKT system, then adds every row
        the solution violates and drops every row whose multiplier has the
        wrong sign. Equality rows always stay in. Revisiting a working set
        means a cycle; one cycle switches to single-change rounds (one add
        or one drop at a time), a second aborts the repair and the caller
        falls back to continued ADMM iteration.
        """
        active = np.asarray(seed, dtype=np.int8).copy()
        active[self.eq] = 1
        l, u = self.prob.l, self.prob.u
        row_tol = self.st.eps_abs * np.maximum(
            1.0, np.maximum(np.abs(_finite_or(l, 0.0)), np.abs(_finite_or(u, 0.0))))
        seen = set()
        single = False
        first = True
        for _ in range(rounds if rounds is not None else self.st.repair_rounds):
            key = active.tobytes()
            if key in seen:
                if single:
                    return None
                single = True
                seen.clear()
            seen.add(key)
            rows = np.nonzero(active != 0)[0]
            # intermediate working sets would churn the factor cache; only
            # the entry set and the accepted set are worth keeping
            out = self._kkt_solve_rows(active, rows, store=first)
            first = False
            if out is None:
                return None
            x, y_a, factor_item = out
            changed = False
            # wrong-sign multipliers leave the set (equality rows exempt)
            bad_mag = None
            if rows.size:
                ytol = self._ytol(y_a)
                free_sign = self.eq[rows]
                lo_rows = (active[rows] < 0) & ~free_sign
                hi_rows = (active[rows] > 0) & ~free_sign
                bad = (lo_rows & (y_a > ytol)) | (hi_rows & (y_a < -ytol))
                if np.any(bad):
                    if single:
                        bad_mag = rows[bad][np.argmax(np.abs(y_a[bad]))]
                        active[bad_mag] = 0
                    else:
                        active[rows[bad]] = 0
                    changed = True
            # violated inactive rows join at the violated side
            Ax = self.prob.A @ x
            inact = active == 0
            over = inact & (Ax > u + row_tol)
            under = inact & (Ax < l - row_tol)
            if (np.any(over) or np.any(under)) and not (single and changed):
                if single:
                    viol = np.where(over, Ax - u, 0.0) + np.where(under, l - Ax, 0.0)
                    j = int(np.argmax(viol))
                    active[j] = 1 if over[j] else -1
                else:
                    active[over] = 1
                    active[under] = -1
                changed = True
            if changed:
                continue
            # candidate KKT point: clamp sign noise, then verify in full
            y = np.zeros(self.m)
            if rows.size:
                ytol = self._ytol(y_a)
                free_sign = self.eq[rows]
                lo_rows = (active[rows] < 0) & ~free_sign
                hi_rows = (active[rows] > 0) & ~free_sign
                y_a = np.where(lo_rows, np.minimum(y_a, 0.0), y_a)
                y_a = np.where(hi_rows, np.maximum(y_a, 0.0), y_a)
                y[rows] = y_a
            viol = np.maximum(np.maximum(l - Ax, Ax - u), 0.0)
            pri = float(viol.max()) if self.m else 0.0
            # feasibility is checked row by row: a single large row value
            # (a loose synthetic box sitting at its bound) must not widen
            # the tolerance for every other row
            eps_row = self.st.eps_abs + self.st.eps_rel * np.maximum(
                np.abs(Ax), 1.0)
            Px = self._Px(x)
            Aty = self.prob.A.T @ y
            dua = float(np.abs(Px + self.prob.q + Aty).max())
            eps_dua = self.st.eps_abs + self.st.eps_rel * max(
                float(np.abs(Px).max()), float(np.abs(Aty).max()),
                float(np.abs(self.prob.q).max()))
            if (self.m and bool(np.any(viol > eps_row))) or dua > eps_dua:
                return None
            self._store_factors(active.tobytes(), factor_item)
            return QpSolution(
                z=x, y=y, status=Status.OPTIMAL, iterations=0,
                obj=self._objective(x), pri_res=pri, dua_res=dua,
                gap=self._gap(x, y), polished=True, active=active.copy())
        return None

    def _polish(self, x, z, y, iterations, rounds=None):
        ynorm = max(1.0, float(np.abs(y).max()) if self.m else 0.0)
        active = np.zeros(self.m, dtype=np.int8)
        active[y < -1e-12 * ynorm] = -1
        active[y > 1e-12 * ynorm] = 1
        # rows whose projection sits on a bound are active-set candidates
        # even while their multiplier is still drowned in splitting noise
        l, u = self.prob.l, self.prob.u
        ztol = 1e-7 * np.maximum(1.0, np.maximum(
            np.abs(_finite_or(l, 0.0)), np.abs(_finite_or(u, 0.0))))
        at_u = np.isfinite(u) & (z >= u - ztol) & (active == 0)
        at_l = np.isfinite(l) & (z <= l + ztol) & (active == 0)
        active[at_u & ~at_l] = 1
        active[at_l & ~at_u] = -1
        sol = self._active_set_repair(active, rounds=rounds)
        if sol is None:
            return None
        sol.iterations = iterations
        return sol

    # -- main loop -------------------------------------------------------------

    def solve(self, z0=None, y0=None, active_guess=None):
        st = self.st
        if active_guess is not None:
            sol = self._active_set_repair(active_guess)
            if sol is not None:
                return sol
        if z0 is not None:
            self.xbar = np.asarray(z0, dtype=float).ravel() / self.D
            self.zbar = self.Ab @ self.xbar
        if y0 is not None:
            self.ybar = self.c * (np.asarray(y0, dtype=float).ravel() / self.E)
        xbar, zbar, ybar = self.xbar, self.zbar, self.ybar
        x_chk, y_chk = xbar.copy(), ybar.copy()
        polish_level = st.polish_trigger
        rho_updates = 0
        best = None
        pending = None
        pending_checks = 0
        checks_since_attempt = 0
        # speculative attempts back off exponentially: a hard-to-identify
        # active set must not turn every residual check into a repair run
        attempt_every = 10
        it = 0
        while it < st.max_iter:
            it += 1
            rhs = st.sigma * xbar - self.qb + self.Ab.T @ (self.rho_vec * zbar - ybar)
            xt = self.kkt.solve(rhs)
            zt = self.Ab @ xt
            xbar = st.alpha * xt + (1.0 - st.alpha) * xbar
            z_relax = st.alpha * zt + (1.0 - st.alpha) * zbar
            z_new = np.clip(z_relax + ybar / self.rho_vec, self.lb, self.ub)
            ybar = ybar + self.rho_vec * (z_relax - z_new)
            zbar = z_new

            if it % st.check_every == 0 or it == st.max_iter:
                x, z, y = self._unscale(xbar, zbar, ybar)
                pri, eps_pri, dua, eps_dua = self._residuals(x, z, y)
                if pri <= eps_pri and dua <= eps_dua:
                    sol = self._polish(x, z, y, it)
                    if sol is not None:
                        self.xbar, self.zbar, self.ybar = xbar, zbar, ybar
                        return sol
                    unpolished = QpSolution(
                        z=x, y=y, status=Status.OPTIMAL, iterations=it,
                        obj=self._objective(x), pri_res=pri, dua_res=dua,
                        gap=self._gap(x, y), polished=False, active=None)
                    if not st.require_polish:
                        self.xbar, self.zbar, self.ybar = xbar, zbar, ybar
                        return unpolished
                    # keep iterating: a later, tighter iterate usually
                    # yields a polishable active set
                    pending = unpolished
                    pending_checks += 1
                    if pending_checks > 40:
                        self.xbar, self.zbar, self.ybar = xbar, zbar, ybar
                        return pending
                else:
                    ratio = max(pri / eps_pri, dua / eps_dua)
                    checks_since_attempt += 1
                    if ratio <= polish_level or (
                            ratio <= st.polish_trigger
                            and checks_since_attempt >= attempt_every):
                        checks_since_attempt = 0
                        sol = self._polish(x, z, y, it, rounds=12)
                        if sol is not None:
                            self.xbar, self.zbar, self.ybar = xbar, zbar, ybar
                            return sol
                        polish_level = ratio / 10.0
                        attempt_every = min(2 * attempt_every, 320)
                dy = y - (self.E * y_chk) / self.c
                dx = x - self.D * x_chk
                if self._primal_cert(dy):
                    self.xbar, self.zbar, self.ybar = xbar, zbar, ybar
                    return QpSolution(
                        z=x, y=y, status=Status.PRIMAL_INFEASIBLE,
                        iterations=it, obj=math.inf, pri_res=pri, dua_res=dua,
                        gap=math.inf, active=None)
                if self._dual_cert(dx):
                    self.xbar, self.zbar, self.ybar = xbar, zbar, ybar
                    return QpSolution(
                        z=x, y=y, status=Status.DUAL_INFEASIBLE,
                        iterations=it, obj=-math.inf, pri_res=pri,
                        dua_res=dua, gap=math.inf, active=None)
                x_chk, y_chk = xbar.copy(), ybar.copy()
                best = (x, y, pri, dua)
                if st.adaptive_rho and rho_updates < 20:
                    den_p = max(float(np.abs(self.prob.A @ x).max()) if self.m else 0.0,
                                float(np.abs(z).max()) if self.m else 0.0, 1e-12)
                    Px = self._Px(x)
                    den_d = max(float(np.abs(Px).max()),
                                float(np.abs(self.prob.A.T @ y).max()) if self.m else 0.0,
                                float(np.abs(self.prob.q).max()), 1e-12)
                    ratio = math.sqrt((pri / den_p) / max(dua / den_d, 1e-16))
                    if ratio > st.adaptive_rho_tol or ratio < 1.0 / st.adaptive_rho_tol:
                        self._set_rho(self.rho_base * ratio)
                        self.kkt.set_P(self.Pb)
                        rho_updates += 1

        x, z, y = self._unscale(xbar, zbar, ybar)
        pri, eps_pri, dua, eps_dua = self._residuals(x, z, y)
        self.xbar, self.zbar, self.ybar = xbar, zbar, ybar
        if pending is not None:
            pending.iterations = it
            return pending
        if best is not None and max(best[2], best[3]) < max(pri, dua):
            x, y, pri, dua = best
        return QpSolution(
            z=x, y=y, status=Status.MAX_ITER, iterations=it,
            obj=self._objective(x), pri_res=pri, dua_res=dua,
            gap=self._gap(x, y), active=None)


def solve_qp(prob, settings=None, z0=None, y0=None, active_guess=None):
    """One-shot QP solve; builds a solver instance and runs it."""
    return QpSolver(prob, settings).solve(z0=z0, y0=y0, active_guess=active_guess)


def solve_lp(c, constraint_set, settings=None, z0=None, y0=None,
             active_guess=None, solver=None):
    """min c'z over l <= A z <= u given by any object with A, l, u.

    Pass a prebuilt QpSolver as `solver` to reuse its scaling and factor
    caches; its linear term is replaced by c.
    """
    c = np.asarray(c, dtype=float).ravel()
    if solver is not None:
        solver.update_q(c)
        return solver.solve(z0=z0, y0=y0, active_guess=active_guess)
    prob = QpProblem(P=None, q=c, A=constraint_set.A,
                     l=np.asarray(constraint_set.l, dtype=float).copy(),
                     u=np.asarray(constraint_set.u, dtype=float).copy(),
                     static_idx=None)
    return solve_qp(prob, settings, z0=z0, y0=y0, active_guess=active_guess)
