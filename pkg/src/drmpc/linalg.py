"""Small dense linear-algebra helpers used throughout the package."""

import numpy as np

# Relative eigenvalue tolerance for "is PSD" checks (matches double-precision
# symmetric eigensolver accuracy).
TOL_PSD = 1e-8


def sym(M):
    """Symmetric part (M + M') / 2."""
    M = np.asarray(M, dtype=float)
    return 0.5 * (M + M.T)


def is_symmetric(M, tol=1e-10):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        return False
    scale = max(1.0, float(np.abs(M).max()) if M.size else 0.0)
    return bool(np.abs(M - M.T).max() <= tol * scale) if M.size else True


def min_eig(M):
    """Smallest eigenvalue of a symmetric matrix."""
    return float(np.linalg.eigvalsh(sym(M))[0])


def check_psd(M, name="matrix", tol=TOL_PSD):
    """Validate symmetry and positive semidefiniteness up to a relative tolerance.

    Returns the symmetrized matrix. Raises ValueError naming the offending
    eigenvalue otherwise.
    """
    M = np.asarray(M, dtype=float)
    if not is_symmetric(M, tol=1e-8):
        raise ValueError(f"{name} is not symmetric (max asymmetry "
                         f"{np.abs(M - M.T).max():.3e})")
    Ms = sym(M)
    w = np.linalg.eigvalsh(Ms)
    scale = max(1.0, float(w[-1])) if w.size else 1.0
    if w.size and w[0] < -tol * scale:
        raise ValueError(f"{name} is not PSD (eigenvalue {w[0]:.6e})")
    return Ms


def psd_sqrt(M, clip_tol=1e-10):
    """Symmetric PSD square root via eigendecomposition.

    Negative eigenvalues below ``clip_tol`` (relative to the largest) are
    clipped to zero, so numerically indefinite PSD inputs are accepted.
    """
    Ms = sym(M)
    w, V = np.linalg.eigh(Ms)
    scale = max(1.0, float(w[-1])) if w.size else 1.0
    if w.size and w[0] < -clip_tol * scale:
        raise ValueError(f"matrix not PSD within clip tolerance "
                         f"(eigenvalue {w[0]:.6e})")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def spectral_radius(A):
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(A, dtype=float)))))


def gelbrich_sq(S1, S2):
    """Squared Gelbrich (Bures-Wasserstein) distance between PSD matrices.

    tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2}), computed with symmetric
    square roots.
    """
    R1 = psd_sqrt(S1)
    inner = sym(R1 @ np.asarray(S2, dtype=float) @ R1)
    w = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    val = float(np.trace(S1) + np.trace(S2) - 2.0 * np.sum(np.sqrt(w)))
    return val
