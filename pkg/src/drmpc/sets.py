"""Polytopes, support functions, and the robust lifting that realizes Pi(x).

The lifting turns "constraint rows hold for every disturbance sequence in
W^N" into finitely many linear constraints on a lifted decision vector
[v, free entries of M, auxiliaries]. Two routes are implemented:

* box W: per-entry absolute-value epigraph variables (the l1 support of each
  row), the smaller formulation;
* general polytope W: one nonnegative dual multiplier vector per (row,
  timestep) block, equating S_W' lambda = (row coefficients on that w block)
  and charging h_W' lambda to the row (LP-duality, exact).

Both exploit that W^N is a product, so each row's worst case is a sum of N
per-step support functions.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import qp
from .errors import DimensionError, ScenarioError
from .linalg import psd_sqrt

_BIG = 1e30


class Polytope:
    """H-representation polytope {z : H z <= h}."""

    def __init__(self, H, h):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        h = np.asarray(h, dtype=float).ravel()
        if H.shape[0] != h.shape[0]:
            raise DimensionError(
                f"polytope rows mismatch: H has {H.shape[0]} rows, h has {h.shape[0]}")
        if not np.all(np.isfinite(H)) or not np.all(np.isfinite(h)):
            raise ScenarioError("polytope data must be finite")
        if H.shape[0] and np.any(np.all(H == 0.0, axis=1)):
            raise ScenarioError("polytope H contains an all-zero row")
        self.H = H
        self.h = h
        self._box = None
        self._box_known = False

    @property
    def dim(self):
        return self.H.shape[1]

    @property
    def nrows(self):
        return self.H.shape[0]

    @classmethod
    def box(cls, bounds, dim=None):
        """Symmetric box {|z_i| <= b_i}; scalar bound broadcasts over dim."""
        b = np.asarray(bounds, dtype=float).ravel()
        if b.size == 1 and dim is not None:
            b = np.full(dim, b[0])
        d = b.size
        eye = np.eye(d)
        return cls(np.vstack([eye, -eye]), np.concatenate([b, b]))

    def contains(self, z, tol=1e-9):
        z = np.asarray(z, dtype=float).ravel()
        return bool(np.all(self.H @ z <= self.h + tol))

    def box_bounds(self):
        """Return (lo, hi) if this polytope is exactly an axis-aligned box
        (each row a signed unit vector, every coordinate bounded both ways),
        else None."""
        if self._box_known:
            return self._box
        self._box_known = True
        H, h = self.H, self.h
        lo = np.full(self.dim, -np.inf)
        hi = np.full(self.dim, np.inf)
        ok = True
        for i in range(H.shape[0]):
            row = H[i]
            nz = np.nonzero(row)[0]
            if nz.size != 1:
                ok = False
                break
            j = nz[0]
            c = row[j]
            if c > 0:
                hi[j] = min(hi[j], h[i] / c)
            else:
                lo[j] = max(lo[j], h[i] / c)
        if ok and np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) \
                and np.all(lo <= hi):
            self._box = (lo, hi)
        else:
            self._box = None
        return self._box

    def to_json(self):
        return {"H": self.H.tolist(), "h": self.h.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(np.asarray(obj["H"], dtype=float), np.asarray(obj["h"], dtype=float))

    def __repr__(self):
        return f"Polytope(rows={self.nrows}, dim={self.dim})"


def _lp_over(H, h, c, maximize=False):
    """Solve min/max c'z over {Hz <= h} with the in-house LP solver."""
    prob = qp.QpProblem(
        P=None,
        q=(-c if maximize else c),
        A=H,
        l=np.full(H.shape[0], -np.inf),
        u=h.copy(),
    )
    return qp.solve_qp(prob)


def support_function(P, a):
    """max_{z in P} a'z. Closed form for boxes, LP otherwise.

    Raises ScenarioError on an unbounded direction (violates the boundedness
    required of W/U by Assumption 2.1(ii)).
    """
    a = np.asarray(a, dtype=float).ravel()
    if a.shape[0] != P.dim:
        raise DimensionError(f"direction dim {a.shape[0]} != polytope dim {P.dim}")
    if not np.any(a):
        return 0.0
    bb = P.box_bounds()
    if bb is not None:
        lo, hi = bb
        return float(np.sum(np.where(a >= 0, a * hi, a * lo)))
    sol = _lp_over(P.H, P.h, a, maximize=True)
    if sol.status == qp.Status.DUAL_INFEASIBLE:
        raise ScenarioError("support function unbounded: set is unbounded in the "
                            "queried direction (Assumption 2.1(ii) violated)")
    if sol.status == qp.Status.PRIMAL_INFEASIBLE:
        raise ScenarioError("support function over an empty polytope")
    if sol.status != qp.Status.OPTIMAL:
        raise ScenarioError(f"support-function LP did not converge ({sol.status})")
    return float(a @ sol.z)


def is_bounded(P, tol=1e-6):
    """Boundedness probe: finite support in all +/- coordinate directions."""
    for j in range(P.dim):
        e = np.zeros(P.dim)
        for s in (1.0, -1.0):
            e[j] = s
            try:
                support_function(P, e)
            except ScenarioError:
                return False
        e[j] = 0.0
    return True


def contains_origin(P, strict=False, margin=1e-9):
    if strict:
        return bool(np.all(P.h >= margin))
    return bool(np.all(P.h >= 0.0))


@dataclass
class LiftedPolicySet:
    """Polyhedral realization of Pi(x) in lifted variables.

    The lifted vector is z = [v (N*m), m_free (causal M entries), aux]. The
    constraints are l <= A z <= u(x) with u affine in x on the robustified
    rows: u(x) = u_const + U_x @ x (rows without state dependence have zero
    U_x rows). Index bookkeeping lets callers extract (M, v) and pack
    feasible starting points.
    """

    A: np.ndarray
    l: np.ndarray
    u: np.ndarray           # resolved at the x this set was built for
    u_const: np.ndarray
    U_x: np.ndarray
    x: np.ndarray
    n_v: int
    n_mfree: int
    n_aux: int
    N: int
    m: int
    q: int
    mfree_rows: np.ndarray  # flat M row index per free entry
    mfree_cols: np.ndarray  # flat M col index per free entry
    F: np.ndarray           # constraint-stack input map (rows x N*m)
    E: np.ndarray           # constraint-stack disturbance map (rows x N*q)
    rob_rows: np.ndarray    # indices (into A's rows) of the robustified rows
    aux_kind: str           # "box-l1" or "duality"
    aux_row: np.ndarray     # robust row index per aux column group
    aux_wcol: np.ndarray    # stacked-w column index per aux variable (box path)
    w_bound: np.ndarray     # per-coordinate box bound of stacked W^N (box path)
    W: Polytope

    @property
    def n_z(self):
        return self.n_v + self.n_mfree + self.n_aux

    @property
    def sl_v(self):
        return slice(0, self.n_v)

    @property
    def sl_m(self):
        return slice(self.n_v, self.n_v + self.n_mfree)

    @property
    def sl_aux(self):
        return slice(self.n_v + self.n_mfree, self.n_z)

    def extract(self, z):
        """Split a lifted vector into PolicyParams-level (M, v)."""
        v = np.asarray(z[self.sl_v], dtype=float).copy()
        M = np.zeros((self.N * self.m, self.N * self.q))
        M[self.mfree_rows, self.mfree_cols] = z[self.sl_m]
        return M, v

    def pack(self, M, v):
        """Lifted vector for (M, v) with auxiliaries at their minimal
        feasible values (box path) or the exact duality multipliers are not
        recoverable in closed form (duality path packs a small LP-free
        overestimate only for box W; see _aux_for)."""
        z = np.zeros(self.n_z)
        z[self.sl_v] = np.asarray(v, dtype=float).ravel()
        z[self.sl_m] = np.asarray(M, dtype=float)[self.mfree_rows, self.mfree_cols]
        z[self.sl_aux] = self._aux_for(M)
        return z

    def _aux_for(self, M):
        T = self.F @ M + self.E
        if self.aux_kind == "box-l1":
            return np.abs(T[self.aux_row, self.aux_wcol])
        # duality path: one multiplier block per (row, step); recover
        # multipliers by solving the per-step support LPs' duals is overkill
        # for warm starts, so start them at zero and let ADMM move them.
        return np.zeros(self.n_aux)

    def resolve(self, x):
        """Upper bound vector at a (possibly different) state x."""
        x = np.asarray(x, dtype=float).ravel()
        return self.u_const + self.U_x @ x


def _constraint_stack(spec):
    """Stacked stage+terminal constraint data (bfC, bfD, c, and row blocks).

    Stage rows k = 0..N-1 apply Z's (x, u) rows at time k; terminal rows
    apply Xf to x(N). Returns (bfC, bfD, c) with bfC over the stacked
    (N+1)-state trajectory and bfD over the stacked N inputs, plus the
    per-row timestep tags used for structural sparsity.
    """
    n, m, N = spec.n, spec.m, spec.N
    Cz = spec.Z.H[:, :n]
    Du = spec.Z.H[:, n:]
    bz = spec.Z.h
    rz = Cz.shape[0]
    Cf = spec.Xf.H
    bf = spec.Xf.h
    rf = Cf.shape[0]
    rows = N * rz + rf
    bfC = np.zeros((rows, (N + 1) * n))
    bfD = np.zeros((rows, N * m))
    c = np.zeros(rows)
    row_step = np.zeros(rows, dtype=int)   # earliest w-block NOT affecting the row
    for k in range(N):
        r0 = k * rz
        bfC[r0:r0 + rz, k * n:(k + 1) * n] = Cz
        bfD[r0:r0 + rz, k * m:(k + 1) * m] = Du
        c[r0:r0 + rz] = bz
        row_step[r0:r0 + rz] = k
    bfC[N * rz:, N * n:] = Cf
    c[N * rz:] = bf
    row_step[N * rz:] = N
    return bfC, bfD, c, row_step


def build_policy_set(spec, sp, x):
    """Robust lifting of Pi(x) into a LiftedPolicySet.

    Emptiness of Pi(x) is not detected here; the downstream QP/LP solver's
    infeasibility certificate reports it.
    """
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != spec.n:
        raise DimensionError(f"state dim {x.shape[0]} != n={spec.n}")
    n, m, q, N = spec.n, spec.m, spec.q, spec.N

    bfC, bfD, c, row_step = _constraint_stack(spec)
    F = bfC @ sp.bfB + bfD
    E = bfC @ sp.bfG
    U_x = -(bfC @ sp.bfA)
    n_rows = F.shape[0]

    # causal free entries of M, in block order (i, j<i), row-major inside a block
    mfree_rows = []
    mfree_cols = []
    for i in range(N):
        for j in range(i):
            for a in range(m):
                for b in range(q):
                    mfree_rows.append(i * m + a)
                    mfree_cols.append(j * q + b)
    mfree_rows = np.asarray(mfree_rows, dtype=int)
    mfree_cols = np.asarray(mfree_cols, dtype=int)
    n_v = N * m
    n_mf = mfree_rows.size

    # structural support: row with tag s depends on w-blocks 0..s-1
    wbb = spec.W.box_bounds()
    box_path = wbb is not None

    # per-free-entry w-block tag for the M columns
    mcol_block = mfree_cols // q

    if box_path:
        lo, hi = wbb
        if not np.allclose(-lo, hi, rtol=0, atol=1e-12):
            box_path = False   # asymmetric box: fall through to duality path

    if box_path:
        b_w = hi  # per-coordinate bound of W
        # aux variable per (row i, stacked w column j) with j's block < row tag
        aux_row = []
        aux_wcol = []
        for i in range(n_rows):
            s = row_step[i]
            if s == 0:
                continue
            for j in range(s * q):
                aux_row.append(i)
                aux_wcol.append(j)
        aux_row = np.asarray(aux_row, dtype=int)
        aux_wcol = np.asarray(aux_wcol, dtype=int)
        n_aux = aux_row.size
        n_z = n_v + n_mf + n_aux

        # rows: [abs+/-] T_ij - t_ij <= 0 and -T_ij - t_ij <= 0, then the
        # robustified rows F v + sum_j bw_j t_ij <= c_i + (U_x x)_i.
        n_con = 2 * n_aux + n_rows
        A = np.zeros((n_con, n_z))
        l = np.full(n_con, -np.inf)
        u_const = np.zeros(n_con)
        Ux_full = np.zeros((n_con, n))

        # T_ij = sum_e F[i, mfree_rows[e]] * m_e  (for entries with matching col) + E_ij
        # Build the coefficient matrix of T rows at the aux (i, j) pairs.
        for a_idx in range(n_aux):
            i = aux_row[a_idx]
            j = aux_wcol[a_idx]
            sel = np.nonzero(mfree_cols == j)[0]
            coef = F[i, mfree_rows[sel]]
            r_plus = 2 * a_idx
            r_minus = 2 * a_idx + 1
            A[r_plus, n_v + sel] = coef
            A[r_plus, n_v + n_mf + a_idx] = -1.0
            u_const[r_plus] = -E[i, j]
            A[r_minus, n_v + sel] = -coef
            A[r_minus, n_v + n_mf + a_idx] = -1.0
            u_const[r_minus] = E[i, j]

        rob0 = 2 * n_aux
        A[rob0:, :n_v] = F
        for a_idx in range(n_aux):
            A[rob0 + aux_row[a_idx], n_v + n_mf + a_idx] = b_w[aux_wcol[a_idx] % q]
        u_const[rob0:] = c
        Ux_full[rob0:, :] = U_x
        rob_rows = np.arange(rob0, n_con)

        return LiftedPolicySet(
            A=A, l=l, u=u_const + Ux_full @ x, u_const=u_const, U_x=Ux_full,
            x=x, n_v=n_v, n_mfree=n_mf, n_aux=n_aux, N=N, m=m, q=q,
            mfree_rows=mfree_rows, mfree_cols=mfree_cols, F=F, E=E,
            rob_rows=rob_rows, aux_kind="box-l1", aux_row=aux_row,
            aux_wcol=aux_wcol,
            w_bound=np.tile(b_w, N), W=spec.W)

    # General polytope path: one multiplier vector lambda_{i,k} in R^{rW}_{>=0}
    # per (row i, step k < row tag), with S_W' lambda_{i,k} = T_{i, block k}'
    # and h_W' lambda_{i,k} charged to row i.
    S_w = spec.W.H
    h_w = spec.W.h
    r_w = S_w.shape[0]
    pairs = [(i, k) for i in range(n_rows) for k in range(row_step[i])]
    n_aux = len(pairs) * r_w
    n_z = n_v + n_mf + n_aux
    n_eq = len(pairs) * q
    n_con = n_eq + n_aux + n_rows   # equalities, lambda >= 0, robust rows
    A = np.zeros((n_con, n_z))
    l = np.full(n_con, -np.inf)
    u_const = np.zeros(n_con)
    Ux_full = np.zeros((n_con, n))

    for p_idx, (i, k) in enumerate(pairs):
        lam0 = n_v + n_mf + p_idx * r_w
        # equalities: S_w' lambda - T_{i, block k}' = 0  (q rows)
        for b in range(q):
            r = p_idx * q + b
            A[r, lam0:lam0 + r_w] = S_w[:, b]
            j = k * q + b
            sel = np.nonzero(mfree_cols == j)[0]
            A[r, n_v + sel] = -F[i, mfree_rows[sel]]
            u_const[r] = E[i, j]
            l[r] = E[i, j]
        # lambda >= 0
        r0 = n_eq + p_idx * r_w
        A[r0:r0 + r_w, lam0:lam0 + r_w] = -np.eye(r_w)
        u_const[r0:r0 + r_w] = 0.0

    rob0 = n_eq + n_aux
    A[rob0:, :n_v] = F
    for p_idx, (i, k) in enumerate(pairs):
        lam0 = n_v + n_mf + p_idx * r_w
        A[rob0 + i, lam0:lam0 + r_w] = h_w
    u_const[rob0:] = c
    Ux_full[rob0:, :] = U_x
    rob_rows = np.arange(rob0, n_con)

    return LiftedPolicySet(
        A=A, l=l, u=u_const + Ux_full @ x, u_const=u_const, U_x=Ux_full,
        x=x, n_v=n_v, n_mfree=n_mf, n_aux=n_aux, N=N, m=m, q=q,
        mfree_rows=mfree_rows, mfree_cols=mfree_cols, F=F, E=E,
        rob_rows=rob_rows, aux_kind="duality",
        aux_row=np.asarray([i for i, _ in pairs], dtype=int),
        aux_wcol=np.asarray([], dtype=int),
        w_bound=np.asarray([]), W=spec.W)


def worst_case_w(lifted, M, v, row):
    """Disturbance sequence achieving the given robust row's worst case.

    For box W the maximizer is the sign pattern of the row's coefficients;
    for a general W it is assembled from per-step support-function LPs.
    """
    T = lifted.F @ M + lifted.E
    i = int(np.nonzero(lifted.rob_rows == row)[0][0]) if row in lifted.rob_rows \
        else int(row)
    coeff = T[i]
    Nq = lifted.N * lifted.q
    w = np.zeros(Nq)
    if lifted.aux_kind == "box-l1":
        w = np.sign(coeff) * lifted.w_bound
        return w
    for k in range(lifted.N):
        a = coeff[k * lifted.q:(k + 1) * lifted.q]
        if not np.any(a):
            continue
        sol = _lp_over(lifted.W.H, lifted.W.h, a, maximize=True)
        w[k * lifted.q:(k + 1) * lifted.q] = sol.z
    return w


def check_membership_D(spec):
    """Sufficient check that every covariance in the ambiguity ball is
    realizable by the scaled-uniform sampler inside W.

    Returns "ok" when the whole ball is certified, "conservative-ok" when
    only the nominal covariance is certified (or, for non-box W, when a
    sampled probe of ball-boundary covariances stays inside W), and
    "reject" when even Sigma_hat fails the realization bound.
    """
    d = spec.d
    q = spec.q
    sig_sqrt = psd_sqrt(d.sigma_hat)
    row_l1 = float(np.abs(sig_sqrt).sum(axis=1).max()) if q else 0.0
    radius = float(np.sqrt(max(np.trace(d.sigma_hat), 0.0))) + d.epsilon

    bb = spec.W.box_bounds()
    if bb is not None:
        lo, hi = bb
        b = float(np.min(np.minimum(hi, -lo)))
        if np.sqrt(3.0) * row_l1 > b + 1e-12:
            return "reject"
        # worst case over the ball: row_l1(S^{1/2}) <= sqrt(q)*sqrt(lmax(S))
        # and lmax(S) <= tr(S) <= radius^2 for S in the ball
        if np.sqrt(3.0) * np.sqrt(q) * radius <= b + 1e-12:
            return "ok"
        return "conservative-ok"

    # general polytope: sampling probe of extreme realizations
    rng = np.random.default_rng(0)
    corners = rng.choice([-np.sqrt(3.0), np.sqrt(3.0)], size=(256, q))
    if np.sqrt(3.0) * row_l1 > 0:
        for omega in corners:
            if not spec.W.contains(sig_sqrt @ omega, tol=1e-9):
                return "reject"
    for _ in range(64):
        D = rng.standard_normal((q, q))
        D *= d.epsilon / max(np.linalg.norm(D), 1e-300)
        L = sig_sqrt + D
        for omega in corners[:32]:
            if not spec.W.contains(L @ omega, tol=1e-9):
                return "conservative-ok"
    return "conservative-ok"


def dump_polytope(P, path):
    with open(path, "w") as fh:
        json.dump(P.to_json(), fh)
