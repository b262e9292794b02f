"""Scenario data, disturbance-feedback policies, and stacked cost matrices.

A policy is u = M w + v with M strictly lower block triangular (block (i, j)
is zero for j >= i), so inputs depend only on past disturbances. Stacking the
dynamics over the horizon gives

    x_traj = bfA x + bfB v + (bfB M + bfG) w,

and the expected cost under any zero-mean w with per-step covariances
Sigma_k is

    |Hx x + Hu v|^2 + sum_k tr(T_k' T_k Sigma_k),   T = Hu M + Hw,

with T_k the k-th q-column block of T. Everything downstream (inner
maximization, QP data, gradients) is built from Hx, Hu, Hw.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ScenarioError
from .linalg import check_psd, psd_sqrt
from .sets import Polytope, contains_origin, is_bounded


def causal_mask(N, m, q):
    """Boolean (N*m, N*q) mask of the free (strictly lower block triangular)
    entries of M."""
    mask = np.zeros((N * m, N * q), dtype=bool)
    for i in range(N):
        for j in range(i):
            mask[i * m:(i + 1) * m, j * q:(j + 1) * q] = True
    return mask


@dataclass
class PolicyParams:
    """Disturbance-feedback policy (M, v)."""

    M: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float)
        self.v = np.asarray(self.v, dtype=float).ravel()

    def check_causal(self, N, m, q, tol=1e-9):
        if self.M.shape != (N * m, N * q):
            raise DimensionError(
                f"M shape {self.M.shape} != ({N * m}, {N * q})")
        if self.v.shape != (N * m,):
            raise DimensionError(f"v shape {self.v.shape} != ({N * m},)")
        bad = np.abs(self.M[~causal_mask(N, m, q)])
        if bad.size and bad.max() > tol:
            raise ScenarioError(
                f"M violates causality: |noncausal entry| = {bad.max():.3e}")

    def copy(self):
        return PolicyParams(self.M.copy(), self.v.copy())

    @classmethod
    def zeros(cls, N, m, q):
        return cls(np.zeros((N * m, N * q)), np.zeros(N * m))


@dataclass
class CostGradient:
    """Gradient of the expected cost over (M, v), masked to causal entries."""

    dM: np.ndarray
    dv: np.ndarray

    def dot(self, dM, dv):
        return float(np.sum(self.dM * dM) + self.dv @ dv)


@dataclass
class ScenarioSpec:
    """All data describing one control scenario.

    Z constrains the stage pair (x, u), U is the input-only slice of Z used
    for reporting, Xf is the terminal set, W the disturbance support, and d
    the ambiguity parameters (epsilon, sigma_hat).
    """

    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    N: int
    Z: Polytope
    U: Polytope
    Xf: Polytope
    W: Polytope
    d: object
    K_f: np.ndarray = None
    name: str = "scenario"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.N = int(self.N)
        n, m, q = self.n, self.m, self.q
        checks = [
            (self.A.shape == (n, n), f"A shape {self.A.shape} != ({n}, {n})"),
            (self.B.shape == (n, m), f"B shape {self.B.shape} != ({n}, {m})"),
            (self.G.shape == (n, q), f"G shape {self.G.shape} != ({n}, {q})"),
            (self.Q.shape == (n, n), f"Q shape {self.Q.shape} != ({n}, {n})"),
            (self.R.shape == (m, m), f"R shape {self.R.shape} != ({m}, {m})"),
            (self.P.shape == (n, n), f"P shape {self.P.shape} != ({n}, {n})"),
            (self.N >= 1, f"horizon N={self.N} must be >= 1"),
            (self.Z.dim == n + m, f"Z dim {self.Z.dim} != n+m={n + m}"),
            (self.U.dim == m, f"U dim {self.U.dim} != m={m}"),
            (self.Xf.dim == n, f"Xf dim {self.Xf.dim} != n={n}"),
            (self.W.dim == q, f"W dim {self.W.dim} != q={q}"),
        ]
        if self.K_f is not None:
            self.K_f = np.atleast_2d(np.asarray(self.K_f, dtype=float))
            checks.append((self.K_f.shape == (m, n),
                           f"K_f shape {self.K_f.shape} != ({m}, {n})"))
        for ok, msg in checks:
            if not ok:
                raise DimensionError(msg)
        try:
            self.Q = check_psd(self.Q, "Q")
            self.R = check_psd(self.R, "R")
            self.P = check_psd(self.P, "P")
        except ValueError as exc:
            raise ScenarioError(str(exc)) from None
        if hasattr(self.d, "validate"):
            self.d.validate(q)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def q(self):
        return self.G.shape[1]

    def validate(self):
        """Full invariant check (LP probes included). Raises ScenarioError
        naming the first violated invariant."""
        if not is_bounded(self.W):
            raise ScenarioError("W is unbounded")
        if not is_bounded(self.U):
            raise ScenarioError("U is unbounded")
        if not contains_origin(self.W):
            raise ScenarioError("W does not contain the origin")
        if not contains_origin(self.Z):
            raise ScenarioError("Z does not contain the origin (x, u) = 0")
        if not contains_origin(self.Xf):
            raise ScenarioError("Xf does not contain the origin")
        return True


class StackedProblem:
    """Stacked prediction and cost matrices for one (spec, x) pair.

    Immutable after assembly; solver layers key their caches on identity of
    these objects.
    """

    def __init__(self, spec, x, bfA, bfB, bfG, Hx, Hu, Hw):
        self.spec = spec
        self.x = x
        self.bfA = bfA
        self.bfB = bfB
        self.bfG = bfG
        self.Hx = Hx
        self.Hu = Hu
        self.Hw = Hw
        self.HuTHu = Hu.T @ Hu
        self.HuTHw = Hu.T @ Hw
        self.HuTHx = Hu.T @ Hx
        self.Hx_x = Hx @ x
        self.Hu_lin = 2.0 * (self.HuTHx @ x)   # linear cost term on v
        self.n = spec.n
        self.m = spec.m
        self.q = spec.q
        self.N = spec.N

    def response(self, M):
        """T = Hu M + Hw, the disturbance-to-cost response."""
        return self.Hu @ M + self.Hw

    def with_state(self, x):
        """Cheap view of the same scenario at a different measured state;
        the stacked matrices are shared, only the x-dependent terms differ."""
        x = np.asarray(x, dtype=float).ravel()
        out = StackedProblem.__new__(StackedProblem)
        out.__dict__.update(self.__dict__)
        out.x = x
        out.Hx_x = self.Hx @ x
        out.Hu_lin = 2.0 * (self.HuTHx @ x)
        return out


def assemble_stacked(spec, x):
    """Build the stacked trajectory and cost matrices at state x."""
    x = np.asarray(x, dtype=float).ravel()
    n, m, q, N = spec.n, spec.m, spec.q, spec.N
    if x.shape[0] != n:
        raise DimensionError(f"state dim {x.shape[0]} != n={n}")

    powers = [np.eye(n)]
    for _ in range(N):
        powers.append(spec.A @ powers[-1])

    bfA = np.vstack(powers)
    bfB = np.zeros(((N + 1) * n, N * m))
    bfG = np.zeros(((N + 1) * n, N * q))
    for k in range(1, N + 1):
        for j in range(k):
            bfB[k * n:(k + 1) * n, j * m:(j + 1) * m] = powers[k - 1 - j] @ spec.B
            bfG[k * n:(k + 1) * n, j * q:(j + 1) * q] = powers[k - 1 - j] @ spec.G

    Qs = psd_sqrt(spec.Q)
    Ps = psd_sqrt(spec.P)
    Rs = psd_sqrt(spec.R)
    bfQs = np.zeros(((N + 1) * n, (N + 1) * n))
    for k in range(N):
        bfQs[k * n:(k + 1) * n, k * n:(k + 1) * n] = Qs
    bfQs[N * n:, N * n:] = Ps

    Hx = np.vstack([bfQs @ bfA, np.zeros((N * m, n))])
    Hu = np.vstack([bfQs @ bfB, np.kron(np.eye(N), Rs)])
    Hw = np.vstack([bfQs @ bfG, np.zeros((N * m, N * q))])
    return StackedProblem(spec, x, bfA, bfB, bfG, Hx, Hu, Hw)


def _nominal_cost(sp, theta):
    r = sp.Hx_x + sp.Hu @ theta.v
    return float(r @ r)


def _trace_terms(sp, theta, blocks):
    T = sp.response(theta.M)
    q = sp.q
    terms = []
    for k, Sk in enumerate(blocks):
        Tk = T[:, k * q:(k + 1) * q]
        terms.append(float(np.sum((Tk @ Sk) * Tk)))
    return terms


def expected_cost(sp, theta, Sigma):
    """L(x, theta, Sigma): nominal cost plus per-step trace terms.

    Sigma is a block covariance (object with .blocks, one q x q PSD matrix
    per step) or None for the zero covariance.
    """
    theta.check_causal(sp.N, sp.m, sp.q)
    base = _nominal_cost(sp, theta)
    if Sigma is None:
        return base
    blocks = Sigma.blocks if hasattr(Sigma, "blocks") else list(Sigma)
    if len(blocks) != sp.N:
        raise DimensionError(f"covariance has {len(blocks)} blocks, expected {sp.N}")
    blocks = [check_psd(np.asarray(Sk, dtype=float), f"Sigma[{k}]")
              for k, Sk in enumerate(blocks)]
    return base + math.fsum(_trace_terms(sp, theta, blocks))


def cost_gradient(sp, theta, Sigma):
    """Gradient of L(x, ., Sigma) at theta, masked to causal entries of M."""
    theta.check_causal(sp.N, sp.m, sp.q)
    dv = 2.0 * (sp.HuTHx @ sp.x + sp.HuTHu @ theta.v)
    S = sp.HuTHu @ theta.M + sp.HuTHw
    dM = np.zeros_like(theta.M)
    if Sigma is not None:
        blocks = Sigma.blocks if hasattr(Sigma, "blocks") else list(Sigma)
        q = sp.q
        for k, Sk in enumerate(blocks):
            dM[:, k * q:(k + 1) * q] = 2.0 * (S[:, k * q:(k + 1) * q] @ np.asarray(Sk, dtype=float))
    dM[~causal_mask(sp.N, sp.m, sp.q)] = 0.0
    return CostGradient(dM=dM, dv=dv)
