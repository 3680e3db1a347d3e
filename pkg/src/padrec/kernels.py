"""Kernel functions, Gram matrices, MK-MMD estimators, and InfoNCE.

Everything that feeds a training loss is built from autodiff ops so
gradients flow through both sample sets. The permutation two-sample test
has a separate gradient-free numpy path that computes the pooled Gram
matrix once and re-weights it per permutation.

Gaussian:   k(x, x') = exp(-||x - x'||^2 / (2 sigma^2))
Laplacian:  k(x, x') = exp(-||x - x'||_1 / sigma^2)
Linear:     k(x, x') = <x, x'>
Cosine:     k(x, x') = 1 - <x/||x||, x'/||x'||>   (a distance, not PD; only
            admitted as an alignment-loss variant, never in test banks)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _speedups, autodiff as ad
from .autodiff import Tensor

KERNEL_KINDS = ("gaussian", "laplacian", "linear", "cosine")


@dataclass(frozen=True)
class KernelSpec:
    kind: str
    bandwidth: float | None = None

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind in ("gaussian", "laplacian"):
            if self.bandwidth is None or self.bandwidth <= 0:
                raise ValueError(f"{self.kind} kernel needs bandwidth > 0")
        elif self.bandwidth is not None:
            raise ValueError(f"{self.kind} kernel carries no bandwidth")


@dataclass(frozen=True)
class MultiKernel:
    """Non-negative combination sum_u beta_u * k_u."""

    kernels: tuple[tuple[float, KernelSpec], ...]

    def __post_init__(self):
        if not self.kernels:
            raise ValueError("MultiKernel needs at least one kernel")
        if any(beta < 0 for beta, _ in self.kernels):
            raise ValueError("kernel weights must be non-negative")

    @property
    def weight_sum(self) -> float:
        return float(sum(beta for beta, _ in self.kernels))

    @staticmethod
    def single(spec: KernelSpec) -> "MultiKernel":
        return MultiKernel(((1.0, spec),))


def default_gaussian_bank() -> MultiKernel:
    """Five Gaussian kernels at bandwidths 2^s, s in {-3, -2, -1, 0, 1}."""
    return MultiKernel(
        tuple((1.0, KernelSpec("gaussian", 2.0 ** s)) for s in range(-3, 2))
    )


def kernel_eval(spec: KernelSpec, x: np.ndarray, x2: np.ndarray) -> float:
    """Scalar kernel value between two vectors (closed forms, no autodiff)."""
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x.shape != x2.shape or x.ndim != 1:
        raise ValueError(f"kernel_eval: dimension mismatch {x.shape} vs {x2.shape}")
    if spec.kind == "gaussian":
        d2 = float(((x - x2) ** 2).sum())
        return float(np.exp(-d2 / (2.0 * spec.bandwidth**2)))
    if spec.kind == "laplacian":
        d1 = float(np.abs(x - x2).sum())
        return float(np.exp(-d1 / spec.bandwidth**2))
    if spec.kind == "linear":
        return float(x @ x2)
    nx, n2 = np.linalg.norm(x), np.linalg.norm(x2)
    if nx == 0.0 or n2 == 0.0:
        raise ValueError("cosine kernel: zero-norm input")
    return float(1.0 - (x @ x2) / (nx * n2))


# ---------------------------------------------------------------------------
# differentiable Gram matrices


def _sq_dists(x: Tensor, y: Tensor) -> Tensor:
    """Pairwise squared distances via the inner-product expansion, >= 0."""
    xx = ad.tsum(ad.mul(x, x), axis=1, keepdims=True)           # (n, 1)
    yy = ad.reshape(ad.tsum(ad.mul(y, y), axis=1), (1, -1))     # (1, m)
    cross = ad.matmul(x, ad.transpose(y))                       # (n, m)
    return ad.relu(ad.sub(ad.add(xx, yy), ad.scale(cross, 2.0)))


def _normalize_rows(x: Tensor) -> Tensor:
    norms = ad.sqrt(ad.tsum(ad.mul(x, x), axis=1, keepdims=True))
    if np.any(norms.data == 0.0):
        raise ValueError("cosine: zero-norm row")
    return ad.div(x, norms)


def gram_matrix(spec: KernelSpec, x: Tensor, y: Tensor) -> Tensor:
    """Differentiable (n, m) Gram matrix of spec between row sets x and y."""
    if x.data.ndim != 2 or y.data.ndim != 2 or x.data.shape[1] != y.data.shape[1]:
        raise ValueError(
            f"gram_matrix: dimension mismatch {x.data.shape} vs {y.data.shape}")
    if spec.kind == "gaussian":
        return ad.exp(ad.scale(_sq_dists(x, y), -1.0 / (2.0 * spec.bandwidth**2)))
    if spec.kind == "laplacian":
        return ad.exp(ad.scale(ad.pairwise_l1_dist(x, y), -1.0 / spec.bandwidth**2))
    if spec.kind == "linear":
        return ad.matmul(x, ad.transpose(y))
    sims = ad.matmul(_normalize_rows(x), ad.transpose(_normalize_rows(y)))
    return ad.sub(Tensor(np.ones(sims.data.shape, dtype=sims.data.dtype)), sims)


def gram_values(spec: KernelSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient-free Gram matrix for diagnostics and permutation tests."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if spec.kind == "gaussian":
        d2 = np.maximum(
            (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * (x @ y.T), 0.0)
        return np.exp(-d2 / (2.0 * spec.bandwidth**2))
    if spec.kind == "laplacian":
        return np.exp(-_speedups.pairwise_l1(x, y) / spec.bandwidth**2)
    if spec.kind == "linear":
        return x @ y.T
    nx = np.linalg.norm(x, axis=1, keepdims=True)
    ny = np.linalg.norm(y, axis=1, keepdims=True)
    if np.any(nx == 0) or np.any(ny == 0):
        raise ValueError("cosine: zero-norm row")
    return 1.0 - (x / nx) @ (y / ny).T


# ---------------------------------------------------------------------------
# MMD^2 estimators


def _kernel_terms(x: Tensor, y: Tensor, mk: MultiKernel):
    """Yield (beta, K_xx, K_yy, K_xy), reusing distance matrices per family."""
    cache: dict[str, tuple[Tensor, Tensor, Tensor]] = {}

    def dists(kind: str):
        if kind not in cache:
            if kind == "gaussian":
                cache[kind] = (_sq_dists(x, x), _sq_dists(y, y), _sq_dists(x, y))
            else:
                cache[kind] = (
                    ad.pairwise_l1_dist(x, x),
                    ad.pairwise_l1_dist(y, y),
                    ad.pairwise_l1_dist(x, y),
                )
        return cache[kind]

    for beta, spec in mk.kernels:
        if spec.kind in ("gaussian", "laplacian"):
            c = -1.0 / (2.0 * spec.bandwidth**2) if spec.kind == "gaussian" \
                else -1.0 / spec.bandwidth**2
            dxx, dyy, dxy = dists(spec.kind)
            yield beta, ad.exp(ad.scale(dxx, c)), ad.exp(ad.scale(dyy, c)), \
                ad.exp(ad.scale(dxy, c))
        else:
            yield beta, gram_matrix(spec, x, x), gram_matrix(spec, y, y), \
                gram_matrix(spec, x, y)


def mmd2_biased(x: Tensor, y: Tensor, mk: MultiKernel) -> Tensor:
    """V-statistic estimate of MMD^2: mean(Kxx) + mean(Kyy) - 2 mean(Kxy).

    Non-negative up to rounding; differentiable w.r.t. both sample sets.
    """
    if x.data.shape[0] < 1 or y.data.shape[0] < 1:
        raise ValueError("mmd2_biased: empty sample set")
    total = None
    for beta, kxx, kyy, kxy in _kernel_terms(x, y, mk):
        term = ad.sub(ad.add(ad.tmean(kxx), ad.tmean(kyy)),
                      ad.scale(ad.tmean(kxy), 2.0))
        term = ad.scale(term, beta)
        total = term if total is None else ad.add(total, term)
    return total


def mmd2_unbiased(x: Tensor, y: Tensor, mk: MultiKernel) -> Tensor:
    """U-statistic estimate: within-sample diagonals excluded, may be negative."""
    n = x.data.shape[0]
    if y.data.shape[0] != n or n < 2:
        raise ValueError("mmd2_unbiased: needs equal sample sizes n = m >= 2")
    off = 1.0 / (n * (n - 1))
    eye = None
    total = None
    for beta, kxx, kyy, kxy in _kernel_terms(x, y, mk):
        if eye is None:
            eye = Tensor(np.eye(n, dtype=kxx.data.dtype))
        mask = ad.sub(Tensor(np.ones((n, n), dtype=kxx.data.dtype)), eye)
        sxx = ad.tsum(ad.mul(kxx, mask))
        syy = ad.tsum(ad.mul(kyy, mask))
        term = ad.sub(ad.scale(ad.add(sxx, syy), off),
                      ad.scale(ad.tmean(kxy), 2.0))
        term = ad.scale(term, beta)
        total = term if total is None else ad.add(total, term)
    return total


def infonce_loss(x: Tensor, x2: Tensor, temperature: float) -> Tensor:
    """Contrastive alignment loss with cosine similarity.

    -sum_i log( exp(s(x_i, x2_i)/t) / sum_j exp(s(x_i, x2_j)/t) )
    """
    if temperature <= 0:
        raise ValueError("infonce: temperature must be positive")
    n = x.data.shape[0]
    if n < 2 or x2.data.shape != x.data.shape:
        raise ValueError("infonce: needs matching (n >= 2, d) sample sets")
    sims = ad.matmul(_normalize_rows(x), ad.transpose(_normalize_rows(x2)))
    scaled = ad.scale(sims, 1.0 / temperature)
    # constant max shift keeps exp in range without changing gradients
    shift = float(scaled.data.max())
    lse = ad.log(ad.tsum(ad.exp(ad.sub(scaled, Tensor(np.full((), shift)))),
                         axis=1))
    eye = Tensor(np.eye(n, dtype=sims.data.dtype))
    pos = ad.tsum(ad.mul(scaled, eye), axis=1)
    return ad.tsum(ad.sub(ad.add(lse, Tensor(np.full((n,), shift))), pos))


# ---------------------------------------------------------------------------
# two-sample permutation test


def mmd2_values(x: np.ndarray, y: np.ndarray, mk: MultiKernel) -> float:
    """Gradient-free biased MMD^2 on raw arrays."""
    total = 0.0
    for beta, spec in mk.kernels:
        total += beta * (
            gram_values(spec, x, x).mean()
            + gram_values(spec, y, y).mean()
            - 2.0 * gram_values(spec, x, y).mean()
        )
    return float(total)


def mmd_permutation_test(
    x: np.ndarray,
    y: np.ndarray,
    mk: MultiKernel,
    n_permutations: int = 200,
    rng: np.random.Generator | None = None,
) -> tuple[float, float]:
    """Permutation p-value for H0: both samples share one distribution.

    Computes the pooled Gram matrix once; each permutation reduces to a
    quadratic form v' K v with v the signed membership vector. Cosine is
    rejected here because it is not positive definite.
    """
    if any(spec.kind == "cosine" for _, spec in mk.kernels):
        raise ValueError("cosine is not admitted in two-sample test banks")
    rng = rng or np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, m = x.shape[0], y.shape[0]
    z = np.vstack([x, y])
    k = np.zeros((n + m, n + m))
    for beta, spec in mk.kernels:
        k += beta * gram_values(spec, z, z)
    v_obs = np.concatenate([np.full(n, 1.0 / n), np.full(m, -1.0 / m)])
    observed = float(v_obs @ k @ v_obs)
    vs = np.empty((n + m, n_permutations))
    for p in range(n_permutations):
        perm = rng.permutation(n + m)
        col = np.empty(n + m)
        col[perm[:n]] = 1.0 / n
        col[perm[n:]] = -1.0 / m
        vs[:, p] = col
    stats = np.einsum("ip,ip->p", vs, k @ vs)
    p_value = (1.0 + float((stats >= observed).sum())) / (1.0 + n_permutations)
    return observed, p_value
