"""Dense kernels for SPD matrix functions and SVD-derived quantities.

Everything here targets small matrices (r <= 64 in practice), so matrix
functions go through a symmetric eigendecomposition: robust over fast.
All functions are pure and operate on plain float64 ndarrays.
"""

import numpy as np

from .errors import IllConditioned, NonSpdInput

Array = np.ndarray

# Relative symmetry / positivity tolerance used when validating SPD inputs.
SPD_EPS = 1e-12
# Eigenvalues below COND_EPS * lambda_max may not be inverted; raising beats
# silently regularizing, since the failure signals a rank-deficient factor.
COND_EPS = 1e-14


def sym(m: Array) -> Array:
    return 0.5 * (m + m.T)


def check_finite(m: Array, name: str = "matrix") -> Array:
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def is_symmetric(m: Array, rel_tol: float = SPD_EPS) -> bool:
    """Entrywise symmetry test: |m[i,j] - m[j,i]| <= rel_tol * (1 + |m[i,j]|)."""
    return bool(np.all(np.abs(m - m.T) <= rel_tol * (1.0 + np.abs(m))))


def check_spd(m: Array, rel_tol: float = SPD_EPS, name: str = "matrix") -> Array:
    """Validate that `m` is symmetric positive definite.

    Positivity is checked through the eigenvalue spread: the smallest
    eigenvalue must exceed rel_tol times the largest.

    Raises
    ------
    NonSpdInput
        If `m` is not square, not symmetric within tolerance, or has an
        eigenvalue at or below rel_tol * lambda_max.
    """
    m = check_finite(m, name)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NonSpdInput(f"{name} is not square: shape {m.shape}")
    if not is_symmetric(m, rel_tol):
        raise NonSpdInput(f"{name} is not symmetric within tolerance {rel_tol:g}")
    w = np.linalg.eigvalsh(m)
    if w[0] <= rel_tol * max(w[-1], 0.0):
        raise NonSpdInput(
            f"{name} is not positive definite: lambda_min={w[0]:.3e}, "
            f"lambda_max={w[-1]:.3e}"
        )
    return m


def _spd_eigh(m: Array, name: str) -> tuple[Array, Array]:
    """Eigendecomposition of a symmetric matrix expected to be SPD.

    Returns ascending eigenvalues and orthonormal eigenvectors. Raises
    NonSpdInput on asymmetry or a non-positive spectrum.
    """
    m = check_finite(m, name)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NonSpdInput(f"{name} is not square: shape {m.shape}")
    if not is_symmetric(m):
        raise NonSpdInput(f"{name} is not symmetric within tolerance {SPD_EPS:g}")
    w, v = np.linalg.eigh(sym(m))
    if w[0] <= 0.0:
        raise NonSpdInput(
            f"{name} is not positive definite: lambda_min={w[0]:.3e}"
        )
    return w, v


def spd_sqrt(m: Array) -> Array:
    """Positive square root of an SPD matrix.

    Returns the unique SPD matrix R with R @ R = m.
    """
    w, v = _spd_eigh(m, "spd_sqrt input")
    return sym((v * np.sqrt(w)) @ v.T)


def spd_inv_sqrt(m: Array) -> Array:
    """Inverse square root of an SPD matrix: R with R @ m @ R = I.

    Raises
    ------
    NonSpdInput
        If `m` fails the symmetry or positivity check.
    IllConditioned
        If lambda_min / lambda_max < 1e-14; inverting such a matrix would
        mask a downstream full-rank violation.
    """
    w, v = _spd_eigh(m, "spd_inv_sqrt input")
    if w[0] < COND_EPS * w[-1]:
        raise IllConditioned(
            f"eigenvalue ratio {w[0] / w[-1]:.3e} below {COND_EPS:g}"
        )
    return sym((v / np.sqrt(w)) @ v.T)


def spd_inverse(m: Array) -> Array:
    """Inverse of an SPD matrix, with the same conditioning guard as
    spd_inv_sqrt."""
    w, v = _spd_eigh(m, "spd_inverse input")
    if w[0] < COND_EPS * w[-1]:
        raise IllConditioned(
            f"eigenvalue ratio {w[0] / w[-1]:.3e} below {COND_EPS:g}"
        )
    return sym((v / w) @ v.T)


def nonsym_psd_sqrt(x: Array, y: Array) -> Array:
    """Square root of the (generally nonsymmetric) product x @ y of two SPD
    matrices.

    The product is similar to an SPD matrix, hence has a real positive
    spectrum and a unique square root with positive spectrum, computed as

        x^{1/2} (x^{1/2} y x^{1/2})^{1/2} x^{-1/2}.

    Parameters
    ----------
    x, y : ndarray
        SPD factors of the product. Validated on entry.

    Returns
    -------
    ndarray
        R with R @ R = x @ y.
    """
    wx, vx = _spd_eigh(x, "nonsym_psd_sqrt first factor")
    _spd_eigh(y, "nonsym_psd_sqrt second factor")
    x_half = sym((vx * np.sqrt(wx)) @ vx.T)
    x_inv_half = sym((vx / np.sqrt(wx)) @ vx.T)
    inner = spd_sqrt(sym(x_half @ y @ x_half))
    return x_half @ inner @ x_inv_half


def nuclear_norm(m: Array) -> float:
    """Sum of singular values."""
    m = check_finite(m, "nuclear_norm input")
    return float(np.sum(np.linalg.svd(m, compute_uv=False)))


def spectral_norm(m: Array) -> float:
    """Largest singular value."""
    m = check_finite(m, "spectral_norm input")
    return float(np.linalg.svd(m, compute_uv=False)[0])
