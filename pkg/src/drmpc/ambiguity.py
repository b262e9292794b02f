"""Gelbrich ambiguity sets and the inner (worst-case covariance) problem.

The ambiguity set is the ball of zero-mean distributions whose covariance S
satisfies G(S, sigma_hat) <= epsilon in the Gelbrich metric

    G(S1, S2)^2 = tr(S1) + tr(S2) - 2 tr((S2^{1/2} S1 S2^{1/2})^{1/2}).

Because the cost is linear in the per-step covariance, the inner problem
splits into N independent trace maximizations

    max { tr(Z S) : G(S, sigma_hat) <= epsilon, S >= 0 },

each solved through its scalar dual: with Z = V diag(lam) V' and
s = diag(V' sigma_hat V),

    g(gamma) = gamma (eps^2 - tr sigma_hat) + gamma^2 tr((gamma I - Z)^{-1} sigma_hat)

is convex for gamma > lam_max with derivative

    g'(gamma) = eps^2 - sum_i s_i lam_i^2 / (gamma - lam_i)^2,

which is increasing, so bisection finds the root. The maximizer is recovered
as S* = gamma^2 (gamma I - Z)^{-1} sigma_hat (gamma I - Z)^{-1}. When
sigma_hat carries no mass on the top eigenspace of Z the dual is minimized
in the limit gamma -> lam_max; the maximizer is then the recovery on the
complement plus the leftover budget placed on a top eigenvector (rank-one
completion), and it need not be unique.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import model
from .errors import DimensionError, ScenarioError
from .linalg import check_psd, sym

_EIG_REL = 1e-12


@dataclass
class AmbiguityParams:
    """Ball radius and nominal covariance (epsilon, sigma_hat)."""

    epsilon: float
    sigma_hat: np.ndarray

    def __post_init__(self):
        self.epsilon = float(self.epsilon)
        self.sigma_hat = np.atleast_2d(np.asarray(self.sigma_hat, dtype=float))

    def validate(self, q):
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ScenarioError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if self.sigma_hat.shape != (q, q):
            raise DimensionError(
                f"sigma_hat shape {self.sigma_hat.shape} != ({q}, {q})")
        try:
            self.sigma_hat = check_psd(self.sigma_hat, "sigma_hat")
        except ValueError as exc:
            raise ScenarioError(str(exc)) from None

    def to_json(self):
        return {"epsilon": self.epsilon, "sigma_hat": self.sigma_hat.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(float(obj["epsilon"]), np.asarray(obj["sigma_hat"], dtype=float))


@dataclass
class BlockCovariance:
    """Per-step covariances (one q x q block per horizon step)."""

    blocks: list

    def __post_init__(self):
        self.blocks = [np.atleast_2d(np.asarray(b, dtype=float)) for b in self.blocks]

    @classmethod
    def zeros(cls, N, q):
        return cls([np.zeros((q, q)) for _ in range(N)])

    @classmethod
    def repeat(cls, Sigma, N):
        Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
        return cls([Sigma.copy() for _ in range(N)])

    def as_blockdiag(self):
        q = self.blocks[0].shape[0]
        N = len(self.blocks)
        out = np.zeros((N * q, N * q))
        for k, b in enumerate(self.blocks):
            out[k * q:(k + 1) * q, k * q:(k + 1) * q] = b
        return out

    def __iter__(self):
        return iter(self.blocks)

    def __len__(self):
        return len(self.blocks)


@dataclass
class InnerMaxResult:
    """One block's worst-case covariance and certificate data."""

    Sigma: np.ndarray
    value: float
    gamma: float           # dual variable at the solution (inf for eps=0)
    iterations: int
    non_unique: bool = False


def _dual_slope(gamma, lam, s_diag, eps_sq):
    d = gamma - lam
    return eps_sq - float(np.sum(s_diag * lam * lam / (d * d)))


def worst_case_block(Z, d, tol=1e-9):
    """Solve max tr(Z S) over the Gelbrich ball around d.sigma_hat.

    Z must be PSD (it is T_k' T_k in all uses). Returns an InnerMaxResult
    whose Sigma is the primal maximizer, so value == tr(Z Sigma) holds to
    machine precision.
    """
    Z = sym(np.asarray(Z, dtype=float))
    q = Z.shape[0]
    eps = d.epsilon
    sigma_hat = d.sigma_hat
    if eps == 0.0:
        val = float(np.sum(Z * sigma_hat))
        return InnerMaxResult(Sigma=sigma_hat.copy(), value=val,
                              gamma=math.inf, iterations=0)

    lam, V = np.linalg.eigh(Z)
    lam = np.clip(lam, 0.0, None)
    lam_max = lam[-1]
    if lam_max <= 1e-300:
        # objective identically zero over the ball
        return InnerMaxResult(Sigma=sigma_hat.copy(), value=0.0,
                              gamma=0.0, iterations=0, non_unique=True)

    S = V.T @ sigma_hat @ V
    s_diag = np.clip(np.diag(S), 0.0, None)
    # rotation roundoff can leave ~1e-17 phantom mass on eigenspaces that
    # sigma_hat does not touch; it would drag the dual root onto the
    # ill-conditioned boundary, so snap it to an exact zero
    snap = 1e-15 * max(float(np.trace(sigma_hat)), 1e-300)
    small = s_diag <= snap
    if np.any(small):
        s_diag = np.where(small, 0.0, s_diag)
        S = S.copy()
        S[small, :] = 0.0
        S[:, small] = 0.0
    eps_sq = eps * eps
    top = lam_max - lam <= _EIG_REL * lam_max

    lo = lam_max * (1.0 + 1e-13) + 1e-300
    it = 0
    if _dual_slope(lo, lam, s_diag, eps_sq) >= 0.0:
        # no interior root: dual infimum at the gamma -> lam_max boundary;
        # complete with leftover budget on a top eigenvector
        comp = ~top
        dgap = lam_max - lam[comp]
        used = float(np.sum(s_diag[comp] * lam[comp] ** 2 / dgap ** 2))
        rest = max(eps_sq - used, 0.0)
        scale = np.zeros(q)
        scale[comp] = lam_max / dgap
        # zero diagonal on the top eigenspace forces zero rows there (S psd)
        S_star = scale[:, None] * S * scale[None, :]
        u = V[:, q - 1]
        Sigma = V @ S_star @ V.T + rest * np.outer(u, u)
        value = float(np.sum(lam[comp] * (lam_max ** 2) * s_diag[comp] / dgap ** 2)
                      + rest * lam_max)
        non_unique = bool(np.count_nonzero(top) > 1 and rest > 1e-14 * eps_sq)
        return InnerMaxResult(Sigma=sym(Sigma), value=value, gamma=lam_max,
                              iterations=0, non_unique=non_unique)

    hi = lam_max + max(lam_max, 1.0)
    for _ in range(200):
        if _dual_slope(hi, lam, s_diag, eps_sq) >= 0.0:
            break
        hi = lam_max + 2.0 * (hi - lam_max)
        it += 1
    else:
        # pathological scaling; nominal covariance is a feasible fallback
        val = float(np.sum(Z * sigma_hat))
        return InnerMaxResult(Sigma=sigma_hat.copy(), value=val,
                              gamma=math.inf, iterations=it, non_unique=True)

    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if _dual_slope(mid, lam, s_diag, eps_sq) < 0.0:
            lo = mid
        else:
            hi = mid
        it += 1
        if it > 400:
            break
    gamma = 0.5 * (lo + hi)
    dd = gamma - lam
    scale = gamma / dd
    S_star = scale[:, None] * S * scale[None, :]
    Sigma = sym(V @ S_star @ V.T)
    value = float(np.sum(lam * (gamma ** 2) * s_diag / dd ** 2))
    return InnerMaxResult(Sigma=Sigma, value=value, gamma=gamma, iterations=it)


def _blockwise(sp, theta, d, tol):
    T = sp.response(theta.M)
    q = sp.q
    results = []
    for k in range(sp.N):
        Tk = T[:, k * q:(k + 1) * q]
        Zk = Tk.T @ Tk
        results.append(worst_case_block(Zk, d, tol=tol))
    return results


def worst_case_objective(sp, theta, d, tol=1e-9):
    """f(theta) = L(x, theta, 0) + sum_k max tr(Z_k S) over the ball.

    Returns (f, BlockCovariance of maximizers).
    """
    theta.check_causal(sp.N, sp.m, sp.q)
    results = _blockwise(sp, theta, d, tol)
    base = float((sp.Hx_x + sp.Hu @ theta.v) @ (sp.Hx_x + sp.Hu @ theta.v))
    f = base + math.fsum(r.value for r in results)
    return f, BlockCovariance([r.Sigma for r in results])


@dataclass
class WorstCaseGradient:
    """Objective value, Danskin gradient, maximizing covariance, and a flag
    for possibly non-unique maximizers (the gradient is then a subgradient
    choice)."""

    f: float
    grad: model.CostGradient
    Sigma: BlockCovariance
    non_unique: bool


def worst_case_gradient(sp, theta, d, tol=1e-9):
    """Gradient of the worst-case objective at theta via Danskin's theorem:
    differentiate L(x, ., Sigma) at the maximizing Sigma."""
    theta.check_causal(sp.N, sp.m, sp.q)
    results = _blockwise(sp, theta, d, tol)
    Sigma = BlockCovariance([r.Sigma for r in results])
    base = float((sp.Hx_x + sp.Hu @ theta.v) @ (sp.Hx_x + sp.Hu @ theta.v))
    f = base + math.fsum(r.value for r in results)
    grad = model.cost_gradient(sp, theta, Sigma)
    return WorstCaseGradient(f=f, grad=grad, Sigma=Sigma,
                             non_unique=any(r.non_unique for r in results))
