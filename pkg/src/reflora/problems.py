"""Differentiable test problems with known structure.

Both problems are quadratics, so their gradient-Lipschitz constants are
exact: 1 for matrix factorization (loss carries the 1/2 factor) and the
spectral norm of X X^T for whitened linear regression. The factor-gradient
path never materializes the dense gradient when the structure permits.
"""

import io
from dataclasses import dataclass
from typing import Optional, TextIO, Union

import numpy as np

from . import linalg, rng
from .linalg import Array
from .optim import GradientPair
from .refactor import LowRankFactors


@dataclass(frozen=True)
class MfInstance:
    """Rank-r target for min 0.5 * ||Y - A B^T||_F^2."""

    y: Array
    m: int
    n: int
    r: int
    seed: int


@dataclass(frozen=True)
class LinRegInstance:
    """Data matrices for min 0.5 * ||Y - W X||_F^2 over W."""

    x: Array
    y: Array
    m: int
    n: int
    k: int
    seed: int


class Problem:
    """A differentiable loss over an m x n weight matrix.

    The trainable increment enters as W = w_pretrained + scale * A @ B.T,
    where `scale` is an optional adapter multiplier (alpha / r in adapter
    conventions; 1.0 here and in all desk-scale experiments).
    """

    def __init__(self, name: str, m: int, n: int, w_pretrained: Array,
                 lipschitz: Optional[float] = None):
        self.name = name
        self.m = m
        self.n = n
        self.w_pretrained = w_pretrained
        self.lipschitz = lipschitz

    def loss(self, w: Array) -> float:
        raise NotImplementedError

    def grad(self, w: Array) -> Array:
        raise NotImplementedError

    def full_weight(self, f: LowRankFactors, scale: float = 1.0) -> Array:
        return self.w_pretrained + scale * f.product()

    def loss_at_factors(self, f: LowRankFactors, scale: float = 1.0) -> float:
        return self.loss(self.full_weight(f, scale))

    def grad_pair(self, f: LowRankFactors, scale: float = 1.0) -> GradientPair:
        """Chain-rule factor gradients g_a = scale * grad(W) @ B and
        g_b = scale * grad(W).T @ A."""
        g = self.grad(self.full_weight(f, scale))
        return GradientPair(scale * (g @ f.b), scale * (g.T @ f.a))


class MatrixFactorizationProblem(Problem):
    """loss(W) = 0.5 * ||Y - W||_F^2, gradient W - Y, Lipschitz constant 1."""

    def __init__(self, y: Array):
        m, n = y.shape
        super().__init__("mf", m, n, np.zeros((m, n)), lipschitz=1.0)
        self.y = y

    def loss(self, w: Array) -> float:
        d = self.y - w
        return float(0.5 * np.sum(d * d))

    def grad(self, w: Array) -> Array:
        return w - self.y

    def grad_pair(self, f: LowRankFactors, scale: float = 1.0) -> GradientPair:
        # grad(W) @ B = scale * A (B^T B) - Y B: no m x n intermediate
        c = scale * scale
        g_a = c * f.a @ (f.b.T @ f.b) - scale * (self.y @ f.b)
        g_b = c * f.b @ (f.a.T @ f.a) - scale * (self.y.T @ f.a)
        return GradientPair(g_a, g_b)


class LinearRegressionProblem(Problem):
    """loss(W) = 0.5 * ||Y - W X||_F^2 with exact Lipschitz ||X X^T||_2."""

    def __init__(self, x: Array, y: Array, w_pretrained: Optional[Array] = None):
        n, k = x.shape
        m = y.shape[0]
        if y.shape[1] != k:
            raise ValueError("X and Y sample counts differ")
        if w_pretrained is None:
            w_pretrained = np.zeros((m, n))
        xxt = x @ x.T
        super().__init__("linreg", m, n, w_pretrained,
                         lipschitz=linalg.spectral_norm(xxt))
        self.x = x
        self.y = y

    def loss(self, w: Array) -> float:
        d = self.y - w @ self.x
        return float(0.5 * np.sum(d * d))

    def grad(self, w: Array) -> Array:
        return (w @ self.x - self.y) @ self.x.T


def make_mf(m: int, n: int, r: int, seed: int
            ) -> tuple[MatrixFactorizationProblem, MfInstance]:
    """Rank-r matrix-factorization instance.

    The target is a standard Gaussian matrix truncated to its largest r
    singular values, drawn from the instance stream of `seed`.
    """
    if r > min(m, n) or m < 1 or n < 1:
        raise ValueError(f"invalid dims m={m}, n={n}, r={r}")
    gen = rng.stream(seed, rng.STREAM_INSTANCE)
    full = gen.standard_normal((m, n))
    u, s, vt = np.linalg.svd(full, full_matrices=False)
    y = (u[:, :r] * s[:r]) @ vt[:r]
    inst = MfInstance(y=y, m=m, n=n, r=r, seed=seed)
    return MatrixFactorizationProblem(y), inst


def make_linreg(m: int, n: int, k: int, seed: int
                ) -> tuple[LinearRegressionProblem, LinRegInstance]:
    """Whitened linear-regression instance with standard Gaussian X and Y."""
    if m < 1 or n < 1 or k < 1:
        raise ValueError(f"invalid dims m={m}, n={n}, k={k}")
    gen = rng.stream(seed, rng.STREAM_INSTANCE)
    x = gen.standard_normal((n, k))
    y = gen.standard_normal((m, k))
    inst = LinRegInstance(x=x, y=y, m=m, n=n, k=k, seed=seed)
    return LinearRegressionProblem(x, y), inst


def init_factors(m: int, n: int, r: int, seed: int, sigma_a: float = 1.0,
                 sigma_b: float = 0.0) -> LowRankFactors:
    """Initial factor pair from the init stream of `seed`.

    A is N(0, sigma_a^2); B is N(0, sigma_b^2), or exactly zero when
    sigma_b = 0 (the standard adapter initialization).
    """
    gen = rng.stream(seed, rng.STREAM_INIT)
    a = sigma_a * gen.standard_normal((m, r))
    b = np.zeros((n, r)) if sigma_b == 0.0 else sigma_b * gen.standard_normal((n, r))
    return LowRankFactors(a, b)


def grad_pair(problem: Problem, f: LowRankFactors,
              scale: float = 1.0) -> GradientPair:
    """Module-level alias for Problem.grad_pair."""
    return problem.grad_pair(f, scale)


# Text serialization for oracle cross-checking: one header line
# "rows cols" followed by one whitespace-separated row of 17-significant-
# digit decimal values per matrix row.

def write_matrix_text(out: TextIO, m: Array) -> None:
    rows, cols = m.shape
    out.write(f"{rows} {cols}\n")
    for row in m:
        out.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_matrix_text(inp: TextIO) -> Array:
    header = inp.readline().split()
    rows, cols = int(header[0]), int(header[1])
    data = [[float(v) for v in inp.readline().split()] for _ in range(rows)]
    m = np.array(data, dtype=float)
    if m.shape != (rows, cols):
        raise ValueError(f"expected {rows}x{cols} matrix, parsed {m.shape}")
    return m


def save_instance(path: Union[str, "io.PathLike"],
                  inst: Union[MfInstance, LinRegInstance]) -> None:
    """Write an instance's matrices in the text format, one after another."""
    with open(path, "w") as out:
        if isinstance(inst, MfInstance):
            out.write(f"mf {inst.m} {inst.n} {inst.r} {inst.seed}\n")
            write_matrix_text(out, inst.y)
        else:
            out.write(f"linreg {inst.m} {inst.n} {inst.k} {inst.seed}\n")
            write_matrix_text(out, inst.x)
            write_matrix_text(out, inst.y)


def load_instance(path: Union[str, "io.PathLike"]
                  ) -> Union[MfInstance, LinRegInstance]:
    with open(path) as inp:
        head = inp.readline().split()
        if head[0] == "mf":
            m, n, r, seed = (int(v) for v in head[1:5])
            return MfInstance(y=read_matrix_text(inp), m=m, n=n, r=r, seed=seed)
        if head[0] == "linreg":
            m, n, k, seed = (int(v) for v in head[1:5])
            return LinRegInstance(x=read_matrix_text(inp),
                                  y=read_matrix_text(inp),
                                  m=m, n=n, k=k, seed=seed)
        raise ValueError(f"unknown instance kind {head[0]!r}")
