"""Heterogeneous federated matrix-regression instances with a closed-form optimum.

Each client i holds (A_i, B_i) and minimizes

    f_i(X) = ||A_i X - B_i||_F^2 / (2 n_i) + ridge/2 * ||X||_F^2,

with the global objective F(X) = mean_i f_i(X). Heterogeneity enters through
client-specific feature mean shifts mu_i ~ N(0, het_level^2 I): rows of A_i
are mu_i plus standard Gaussian noise, targets are B_i = A_i X_true plus
observation noise. The averaged ridge system gives the exact global minimizer,
which serves as the error oracle for every simulated optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SingularProblemError(ValueError):
    """Raised when the averaged Gram system cannot be factorized."""


_U64 = np.uint64(0xFFFFFFFFFFFFFFFF)

# Sub-stream tags under data_seed (kept disjoint from the optimizer-side
# tags in streams.py, which hang off the optimizer seed).
_TAG_CLIENT = 100
_TAG_XTRUE = 101


def _rng(*entropy: int) -> np.random.Generator:
    key = tuple(int(np.uint64(e) & _U64) for e in entropy)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


@dataclass(frozen=True)
class ProblemConfig:
    """Federation-level problem parameters (defaults follow the toy benchmark)."""

    num_clients: int = 20
    feature_dim: int = 100
    output_dim: int = 10
    samples_per_client: int = 50
    ridge: float = 0.1
    noise_std: float = 0.01
    het_level: float = 0.5
    data_seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1 or self.feature_dim < 1 or self.output_dim < 1:
            raise ValueError("num_clients, feature_dim, output_dim must be >= 1")
        if self.samples_per_client < 1:
            raise ValueError("samples_per_client must be >= 1")
        if self.ridge < 0 or self.noise_std < 0 or self.het_level < 0:
            raise ValueError("ridge, noise_std, het_level must be >= 0")


@dataclass(frozen=True)
class ClientDataset:
    """One client's local data: design matrix, targets, mean shift, sample count."""

    A: np.ndarray  # (n, d)
    B: np.ndarray  # (n, m)
    mu: np.ndarray  # (d,)
    n: int

    def __post_init__(self):
        if self.A.shape[0] != self.n or self.B.shape[0] != self.n:
            raise ValueError("A and B must have exactly n rows")
        if self.A.ndim != 2 or self.B.ndim != 2:
            raise ValueError("A and B must be matrices")


@dataclass
class ModelState:
    """Global iterate X (d x m) together with its round index."""

    X: np.ndarray
    round: int = 0


def generate_federation(cfg: ProblemConfig) -> list[ClientDataset]:
    """Draw the N client datasets; fully determined by cfg.data_seed.

    Rows of A_i are mu_i + N(0, I_d) with mu_i ~ N(0, het_level^2 I_d);
    B_i = A_i X_true + noise_std * N(0, I), where X_true is drawn once per
    federation.
    """
    d, m, n = cfg.feature_dim, cfg.output_dim, cfg.samples_per_client
    x_true = _rng(cfg.data_seed, _TAG_XTRUE).standard_normal((d, m))
    datasets = []
    for i in range(cfg.num_clients):
        g = _rng(cfg.data_seed, _TAG_CLIENT, i)
        mu = cfg.het_level * g.standard_normal(d)
        A = mu[None, :] + g.standard_normal((n, d))
        B = A @ x_true + cfg.noise_std * g.standard_normal((n, m))
        datasets.append(ClientDataset(A=A, B=B, mu=mu, n=n))
    return datasets


def _check_dims(ds: ClientDataset, X: np.ndarray):
    if X.ndim != 2 or X.shape[0] != ds.A.shape[1] or X.shape[1] != ds.B.shape[1]:
        raise ValueError(
            f"model shape {X.shape} incompatible with client data "
            f"A{ds.A.shape}, B{ds.B.shape}"
        )


def local_loss(ds: ClientDataset, X: np.ndarray, lam: float) -> float:
    """f_i(X) = ||A X - B||_F^2 / (2 n) + lam/2 ||X||_F^2."""
    _check_dims(ds, X)
    resid = ds.A @ X - ds.B
    return float(np.sum(resid * resid) / (2.0 * ds.n) + 0.5 * lam * np.sum(X * X))


def full_local_gradient(ds: ClientDataset, X: np.ndarray, lam: float) -> np.ndarray:
    """Gradient of local_loss: A^T (A X - B) / n + lam X."""
    _check_dims(ds, X)
    return ds.A.T @ (ds.A @ X - ds.B) / ds.n + lam * X


def minibatch_gradient(ds: ClientDataset, X: np.ndarray, lam: float,
                       idx: np.ndarray) -> np.ndarray:
    """Gradient of the batch rows idx, an unbiased estimate of the full gradient."""
    Ab = ds.A[idx]
    return Ab.T @ (Ab @ X - ds.B[idx]) / len(idx) + lam * X


def stochastic_gradient(ds: ClientDataset, X: np.ndarray, lam: float,
                        batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Minibatch gradient with a fresh batch sampled uniformly without replacement."""
    if not 1 <= batch_size <= ds.n:
        raise ValueError(f"batch_size {batch_size} out of range [1, {ds.n}]")
    idx = rng.permutation(ds.n)[:batch_size]
    return minibatch_gradient(ds, X, lam, idx)


def gram_terms(datasets: list[ClientDataset]) -> tuple[np.ndarray, np.ndarray]:
    """Averaged normal equations: (mean_i A_i^T A_i / n_i, mean_i A_i^T B_i / n_i)."""
    d = datasets[0].A.shape[1]
    m = datasets[0].B.shape[1]
    H = np.zeros((d, d))
    G = np.zeros((d, m))
    for ds in datasets:
        H += ds.A.T @ ds.A / ds.n
        G += ds.A.T @ ds.B / ds.n
    H /= len(datasets)
    G /= len(datasets)
    return H, G


def closed_form_optimum(datasets: list[ClientDataset], lam: float) -> np.ndarray:
    """Exact global minimizer X* = (mean_i A_i^T A_i/n_i + lam I)^-1 mean_i A_i^T B_i/n_i.

    Raises SingularProblemError when the regularized Gram matrix is not
    positive definite (lam = 0 with rank-deficient data); no silent
    pseudo-inverse.
    """
    H, G = gram_terms(datasets)
    H = H + lam * np.eye(H.shape[0])
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise SingularProblemError(
            "averaged Gram matrix is singular; increase ridge or supply "
            "full-rank data"
        ) from exc
    y = np.linalg.solve(L, G)
    return np.linalg.solve(L.T, y)


def global_loss(datasets: list[ClientDataset], X: np.ndarray, lam: float) -> float:
    return sum(local_loss(ds, X, lam) for ds in datasets) / len(datasets)


def global_gradient(datasets: list[ClientDataset], X: np.ndarray, lam: float) -> np.ndarray:
    g = np.zeros_like(X)
    for ds in datasets:
        g += full_local_gradient(ds, X, lam)
    return g / len(datasets)


def relative_error(X: np.ndarray, X_star: np.ndarray) -> float:
    """||X - X*||_F / ||X*||_F."""
    denom = float(np.linalg.norm(X_star))
    if denom == 0.0:
        raise ValueError("relative error undefined for X* = 0")
    return float(np.linalg.norm(X - X_star)) / denom


def smoothness_constant(datasets: list[ClientDataset], lam: float) -> float:
    """Largest per-client curvature: max_i lambda_max(A_i^T A_i / n_i) + lam."""
    if not datasets:
        raise ValueError("smoothness_constant needs at least one client")
    top = 0.0
    for ds in datasets:
        s = np.linalg.svd(ds.A, compute_uv=False)[0]
        top = max(top, float(s * s) / ds.n)
    return top + lam
