"""Terminal cost/controller ingredients and their verification.

The terminal pair (P, K_f) must satisfy the decrease condition

    P - Q - K_f' R K_f - (A + B K_f)' P (A + B K_f) >= 0        (psd)

together with polytopic invariance of Xf under x+ = (A + B K_f) x + G w for
all w in W and admissibility (x, K_f x) in Z on Xf. Two constructions are
provided: the Lyapunov solution for a fixed gain (here K_f = 0, requiring A
Schur stable) and the Riccati solution, which among all admissible P
minimizes tr(G' P G Sigma).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ScenarioError, SolverError
from .linalg import min_eig, spectral_radius, sym
from .sets import support_function


@dataclass
class TerminalIngredients:
    P: np.ndarray
    K_f: np.ndarray
    kind: str = "user"   # one of lyapunov, dare, user

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.K_f = np.atleast_2d(np.asarray(self.K_f, dtype=float))


def solve_dlyap(A, Q):
    """Unique PSD solution of A' P A - P = -Q for Schur-stable A.

    Solves the Kronecker-vectorized linear system; fine at the matrix sizes
    this package targets.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n = A.shape[0]
    rho = spectral_radius(A)
    if rho >= 1.0 - 1e-9:
        raise ScenarioError(
            f"dlyap requires a Schur-stable A; spectral radius is {rho:.6f}")
    lhs = np.eye(n * n) - np.kron(A.T, A.T)
    P = sym(np.linalg.solve(lhs, Q.ravel(order="F")).reshape((n, n), order="F"))
    res = np.abs(A.T @ P @ A - P + Q).max()
    scale = max(1.0, float(np.abs(P).max()))
    if res > 1e-9 * scale:
        raise SolverError(f"dlyap residual {res:.3e} exceeds tolerance")
    return P


def solve_dare(A, B, Q, R, tol=1e-10, max_iter=200):
    """Riccati solution P = A'PA - A'PB (R + B'PB)^{-1} B'PA + Q by the
    structure-preserving doubling iteration, plus the optimal gain
    K_f = -(R + B'PB)^{-1} B'PA."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n = A.shape[0]
    if min_eig(R) <= 0:
        raise ScenarioError("dare requires R positive definite")
    if min_eig(Q) < -1e-12:
        raise ScenarioError("dare requires Q positive semidefinite")

    Ak = A.copy()
    Gk = B @ np.linalg.solve(R, B.T)
    Hk = Q.copy()
    eye = np.eye(n)
    for _ in range(max_iter):
        M = np.linalg.solve(eye + Gk @ Hk, np.hstack([Ak, Gk]))
        W1 = M[:, :n]      # (I + G H)^{-1} A
        W2 = M[:, n:]      # (I + G H)^{-1} G
        A_next = Ak @ W1
        G_next = Gk + Ak @ W2 @ Ak.T
        H_next = Hk + W1.T @ Hk @ Ak
        if np.abs(H_next - Hk).max() <= 0.5 * tol * max(1.0, np.abs(H_next).max()):
            Hk = H_next
            break
        Ak, Gk, Hk = A_next, sym(G_next), sym(H_next)
    P = sym(Hk)
    S = R + B.T @ P @ B
    K_f = -np.linalg.solve(S, B.T @ P @ A)
    res = np.abs(A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(S, B.T @ P @ A)
                 + Q - P).max()
    scale = max(1.0, float(np.abs(P).max()))
    if res > 1e-10 * scale:
        raise SolverError(
            f"dare did not converge: residual {res:.3e} after doubling; "
            "is (A, B) stabilizable?")
    rho_cl = spectral_radius(A + B @ K_f)
    if rho_cl >= 1.0:
        raise SolverError(
            f"dare closed loop not Schur stable (radius {rho_cl:.6f})")
    return TerminalIngredients(P=P, K_f=K_f, kind="dare")


@dataclass
class TerminalReport:
    decrease_ok: bool
    decrease_margin: float       # min eigenvalue of the decrease residual
    invariance_ok: bool
    invariance_margin: float     # min over rows of h_f - worst-case row value
    admissibility_ok: bool
    admissibility_margin: float
    interior_ok: bool
    interior_margin: float       # min h_f

    @property
    def ok(self):
        return (self.decrease_ok and self.invariance_ok
                and self.admissibility_ok and self.interior_ok)


def verify_terminal(spec, ti, tol=1e-9):
    """Check the decrease inequality, robust invariance of Xf, terminal
    admissibility in Z, and that Xf has the origin in its interior."""
    A, B, G = spec.A, spec.B, spec.G
    Q, R = spec.Q, spec.R
    P, K_f = ti.P, ti.K_f
    Acl = A + B @ K_f
    res = P - Q - K_f.T @ R @ K_f - Acl.T @ P @ Acl
    dec_margin = min_eig(res)
    dec_ok = dec_margin >= -tol * max(1.0, float(np.abs(P).max()))

    Hf, hf = spec.Xf.H, spec.Xf.h
    inv_margin = np.inf
    for i in range(Hf.shape[0]):
        f = Hf[i]
        worst = support_function(spec.Xf, Acl.T @ f) + support_function(spec.W, G.T @ f)
        inv_margin = min(inv_margin, hf[i] - worst)
    inv_ok = inv_margin >= -tol

    # rows of Z applied to (x, K_f x) for x in Xf
    n = spec.n
    Cz = spec.Z.H[:, :n]
    Du = spec.Z.H[:, n:]
    bz = spec.Z.h
    adm_margin = np.inf
    for i in range(Cz.shape[0]):
        a = Cz[i] + K_f.T @ Du[i]
        adm_margin = min(adm_margin, bz[i] - support_function(spec.Xf, a))
    adm_ok = adm_margin >= -tol

    int_margin = float(hf.min()) if hf.size else np.inf
    int_ok = int_margin >= 1e-9

    return TerminalReport(
        decrease_ok=bool(dec_ok), decrease_margin=float(dec_margin),
        invariance_ok=bool(inv_ok), invariance_margin=float(inv_margin),
        admissibility_ok=bool(adm_ok), admissibility_margin=float(adm_margin),
        interior_ok=bool(int_ok), interior_margin=int_margin)


def compare_terminal_costs(A, B, G, Q, R, Sigma):
    """tr(G' P G Sigma) for the Riccati P versus the Lyapunov P (the latter
    only when A is Schur stable). The Riccati value is never larger."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    ti = solve_dare(A, B, Q, R)
    val_dare = float(np.trace(G.T @ ti.P @ G @ Sigma))
    report = {"dare": val_dare, "lyapunov": None, "ordering_ok": True}
    if spectral_radius(A) < 1.0 - 1e-9:
        P_lyap = solve_dlyap(A, np.atleast_2d(np.asarray(Q, dtype=float)))
        val_lyap = float(np.trace(G.T @ P_lyap @ G @ Sigma))
        report["lyapunov"] = val_lyap
        report["ordering_ok"] = bool(val_dare <= val_lyap + 1e-9)
    return report
