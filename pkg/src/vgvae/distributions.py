"""von Mises-Fisher and diagonal Gaussian posteriors.

Batched convention: every parameter tensor is 2-D with one row per sentence
(``mu`` is ``[B, dim]``); concentrations are ``[B]``. KL functions return a
``[B]`` tensor so callers can average over the batch.

Gradients through :func:`sample_vmf` flow to the mean direction via the
Householder reflection only. The accepted ``omega`` is a constant with
respect to kappa, so kappa is trained by the KL term alone. This drops
the rejection-sampler correction and is a known, accepted bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .autodiff import DomainError, NumericError, Tensor, custom_op, exp, scale

__all__ = [
    "SamplerStall",
    "VmfParams",
    "GaussParams",
    "log_bessel_i",
    "bessel_ratio",
    "vmf_kl_value",
    "kl_vmf_uniform",
    "sample_omega",
    "sample_vmf",
    "householder_rotate",
    "kl_gauss_std",
    "sample_gauss",
    "Sampler",
]

KAPPA_FLOOR = 1e-12
MAX_REJECTION_ROUNDS = 1_000_000


class SamplerStall(RuntimeError):
    pass


@dataclass
class VmfParams:
    mu: Tensor  # [B, m], unit rows
    kappa: Tensor  # [B]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    def validate(self) -> None:
        norms = np.linalg.norm(self.mu.data, axis=1)
        if np.any(np.abs(norms - 1.0) >= 1e-9):
            raise DomainError("vMF mean direction is not unit norm")
        if np.any(self.kappa.data < 0):
            raise DomainError("vMF concentration must be non-negative")


@dataclass
class GaussParams:
    mu: Tensor  # [B, d]
    logvar: Tensor  # [B, d]

    @classmethod
    def from_var(cls, mu, var) -> "GaussParams":
        mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        var = np.atleast_2d(np.asarray(var, dtype=np.float64))
        if mu.shape != var.shape:
            raise DomainError(f"mean shape {mu.shape} != variance shape {var.shape}")
        if np.any(var <= 0):
            raise DomainError("Gaussian variance must be positive")
        return cls(Tensor(mu), Tensor(np.log(var)))

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.logvar.data)

    @property
    def dim(self) -> int:
        return self.mu.shape[1]


# ---------------------------------------------------------------------------
# log I_v(x)


@lru_cache(maxsize=1)
def _debye_polynomials(n_terms: int = 20) -> tuple[tuple[tuple[int, float], ...], ...]:
    # u_{k+1}(t) = t^2 (1 - t^2) u_k'(t) / 2 + (1/8) int_0^t (1 - 5 s^2) u_k(s) ds
    polys = [{0: Fraction(1)}]
    for _ in range(n_terms - 1):
        u = polys[-1]
        nxt: dict[int, Fraction] = {}
        for j, c in u.items():
            if j > 0:
                nxt[j + 1] = nxt.get(j + 1, 0) + c * j / 2
                nxt[j + 3] = nxt.get(j + 3, 0) - c * j / 2
            nxt[j + 1] = nxt.get(j + 1, 0) + c / 8 / (j + 1)
            nxt[j + 3] = nxt.get(j + 3, 0) - 5 * c / 8 / (j + 3)
        polys.append({j: c for j, c in nxt.items() if c != 0})
    return tuple(tuple(sorted((j, float(c)) for j, c in p.items())) for p in polys)


def _log_bessel_series(v: float, x: float) -> float:
    # I_v(x) = (x/2)^v sum_k (x^2/4)^k / (k! Gamma(v + k + 1))
    q = 0.25 * x * x
    total, term, k = 1.0, 1.0, 0
    while True:
        k += 1
        term *= q / (k * (v + k))
        total += term
        if term < 1e-17 * total and k > q / (v + k):
            break
        if k > 100_000:
            break
    return v * math.log(0.5 * x) - math.lgamma(v + 1.0) + math.log(total)


def _log_bessel_uniform(v: float, x: float) -> float:
    # Debye expansion rewritten in R = sqrt(v^2 + x^2); valid down to v = 0.
    r = math.hypot(v, x)
    total = 0.0
    for k, poly in enumerate(_debye_polynomials()):
        term = 0.0
        for j, c in poly:
            term += c * (v ** (j - k) if j > k else 1.0) / r**j
        total += term
        if abs(term) < 1e-17 * abs(total):
            break
    head = r + (v * math.log(x / (v + r)) if v > 0 else 0.0)
    return head - 0.5 * math.log(2.0 * math.pi * r) + math.log(total)


def log_bessel_i(v: float, x: float) -> float:
    """``log I_v(x)`` for ``v >= 0``, ``x >= 0``.

    Power series below ``max(30, v)``, uniform asymptotic expansion above.
    """
    if x < 0 or v < 0:
        raise DomainError(f"log_bessel_i needs v >= 0 and x >= 0, got v={v}, x={x}")
    if x == 0:
        return 0.0 if v == 0 else -math.inf
    if x < max(30.0, v):
        return _log_bessel_series(float(v), float(x))
    return _log_bessel_uniform(float(v), float(x))


def bessel_ratio(m: int, kappa: float) -> float:
    """Mean resultant length ``A_m(kappa) = I_{m/2}(kappa) / I_{m/2-1}(kappa)``."""
    if kappa < KAPPA_FLOOR:
        return 0.0
    return math.exp(log_bessel_i(m / 2.0, kappa) - log_bessel_i(m / 2.0 - 1.0, kappa))


# ---------------------------------------------------------------------------
# KL(vMF(mu, kappa) || uniform on S^{m-1})


def vmf_kl_value(kappa: float, m: int) -> float:
    if m < 2:
        raise DomainError(f"vMF needs dimension m >= 2, got {m}")
    if kappa < 0:
        raise DomainError("vMF concentration must be non-negative")
    if kappa < KAPPA_FLOOR:
        return 0.0
    half = m / 2.0
    log_i = log_bessel_i(half - 1.0, kappa)
    ratio = math.exp(log_bessel_i(half, kappa) - log_i)
    kl = (
        kappa * ratio
        + (half - 1.0) * math.log(kappa)
        - half * math.log(2.0 * math.pi)
        - log_i
        + half * math.log(math.pi)
        + math.log(2.0)
        - math.lgamma(half)
    )
    return max(kl, 0.0)


def kl_vmf_uniform(p: VmfParams) -> Tensor:
    """Closed-form KL to the uniform prior, one value per row, differentiable in kappa."""
    m = p.dim
    kappas = p.kappa.data
    values = np.array([vmf_kl_value(float(k), m) for k in kappas])
    ratios = np.array([bessel_ratio(m, float(k)) for k in kappas])
    # dKL/dkappa = kappa * A'(kappa) = kappa (1 - A^2) - (m - 1) A
    slope = kappas * (1.0 - ratios**2) - (m - 1) * ratios
    slope[kappas < KAPPA_FLOOR] = 0.0
    return custom_op(values, (p.kappa,), lambda g: (g * slope,))


# ---------------------------------------------------------------------------
# vMF sampling


def sample_omega(kappa, m: int, rng: np.random.Generator, return_proposals: bool = False):
    """Draw the component along the mean direction by Wood's rejection scheme.

    ``kappa`` is an array (one draw per entry). With ``return_proposals`` the
    total number of envelope proposals is returned as well.
    """
    kappa = np.asarray(kappa, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(kappa)):
        # a non-finite concentration would never be accepted
        raise NumericError("vMF concentration is not finite")
    n = kappa.size
    dim = m - 1.0
    root = np.sqrt(4.0 * kappa**2 + dim**2)
    # (-2k + root)/(m-1) rewritten to avoid cancellation at large kappa
    b = dim / (2.0 * kappa + root)
    a = (dim + 2.0 * kappa + root) / 4.0
    d = 4.0 * a * b / (1.0 + b) - dim * np.log(dim)

    omega = np.empty(n)
    pending = np.arange(n)
    proposals = 0
    rounds = 0
    while pending.size:
        rounds += 1
        if rounds > MAX_REJECTION_ROUNDS:
            raise SamplerStall(f"vMF rejection sampler stalled after {rounds - 1} rounds")
        bp, ap, dp = b[pending], a[pending], d[pending]
        eps = rng.beta(dim / 2.0, dim / 2.0, size=pending.size)
        u = rng.uniform(size=pending.size)
        denom = 1.0 - (1.0 - bp) * eps
        w = (1.0 - (1.0 + bp) * eps) / denom
        t = 2.0 * ap * bp / denom
        accept = dim * np.log(t) - t + dp >= np.log(u)
        proposals += pending.size
        omega[pending[accept]] = w[accept]
        pending = pending[~accept]
    omega = np.clip(omega, -1.0, 1.0)
    if return_proposals:
        return omega, proposals
    return omega


def vmf_canonical_sample(kappa, m: int, rng: np.random.Generator) -> np.ndarray:
    """Samples around ``e1``: rows ``(omega, sqrt(1 - omega^2) * v)``."""
    kappa = np.asarray(kappa, dtype=np.float64).reshape(-1)
    omega = sample_omega(kappa, m, rng)
    v = rng.standard_normal((kappa.size, m - 1))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    out = np.empty((kappa.size, m))
    out[:, 0] = omega
    out[:, 1:] = np.sqrt(np.maximum(1.0 - omega**2, 0.0))[:, None] * v
    return out


def householder_rotate(mu: Tensor, base: np.ndarray) -> Tensor:
    """Reflect rows of ``base`` by the Householder map sending ``e1`` to ``mu``."""
    a = -mu.data.copy()
    a[:, 0] += 1.0  # a = e1 - mu
    s = np.einsum("ij,ij->i", a, a)
    degenerate = s < 1e-24
    s_safe = np.where(degenerate, 1.0, s)
    c = np.einsum("ij,ij->i", a, base)
    coef = np.where(degenerate, 0.0, 2.0 * c / s_safe)
    out = base - coef[:, None] * a

    def rule(g):
        ga = np.einsum("ij,ij->i", g, a)
        grad_a = -2.0 * (
            g * (c / s_safe)[:, None]
            + base * (ga / s_safe)[:, None]
            - a * (2.0 * ga * c / s_safe**2)[:, None]
        )
        grad_a[degenerate] = 0.0
        return (-grad_a,)

    return custom_op(out, (mu,), rule)


def sample_vmf(p: VmfParams, rng: np.random.Generator | None = None, base: np.ndarray | None = None) -> Tensor:
    """One reparameterised draw per row. Pass ``base`` to replay frozen noise."""
    if base is None:
        if rng is None:
            raise ValueError("sample_vmf needs an rng or a frozen base sample")
        base = vmf_canonical_sample(np.maximum(p.kappa.data, 0.0), p.dim, rng)
    return householder_rotate(p.mu, base)


# ---------------------------------------------------------------------------
# diagonal Gaussian


def kl_gauss_std(p: GaussParams) -> Tensor:
    """KL(N(mu, diag(var)) || N(0, I)) per row, from the log-variance tensor."""
    mu, logvar = p.mu, p.logvar
    d = mu.shape[1]

    def rule(g):
        return (g[:, None] * mu.data, 0.5 * g[:, None] * (np.exp(logvar.data) - 1.0))

    var = np.exp(logvar.data)
    if np.any(var <= 0):
        raise DomainError("Gaussian variance must be positive")
    value = 0.5 * (-logvar.data.sum(axis=1) + var.sum(axis=1) + (mu.data**2).sum(axis=1) - d)
    return custom_op(value, (mu, logvar), rule)


def sample_gauss(p: GaussParams, rng: np.random.Generator | None = None, eps: np.ndarray | None = None) -> Tensor:
    """``mu + sqrt(var) * eps``; pass ``eps`` to replay frozen noise."""
    if eps is None:
        if rng is None:
            raise ValueError("sample_gauss needs an rng or frozen noise")
        eps = rng.standard_normal(p.mu.shape)
    std = exp(scale(p.logvar, 0.5))
    return p.mu + std * Tensor(eps)


class Sampler:
    """Noise source for the latent draws of one forward pass.

    Every draw is recorded; :meth:`frozen` returns a sampler that replays
    the same noise in the same order, which is how finite-difference checks
    and loss re-evaluation hold the latent noise fixed.
    """

    def __init__(self, rng: np.random.Generator | None = None, replay: list[np.ndarray] | None = None):
        self.rng = rng
        self.record: list[np.ndarray] = []
        self._replay = list(replay) if replay is not None else None

    def _next(self, make):
        if self._replay is not None:
            if not self._replay:
                raise RuntimeError("frozen sampler exhausted")
            noise = self._replay.pop(0)
        else:
            noise = make()
        self.record.append(noise)
        return noise

    def vmf(self, p: VmfParams) -> Tensor:
        base = self._next(lambda: vmf_canonical_sample(np.maximum(p.kappa.data, 0.0), p.dim, self.rng))
        return householder_rotate(p.mu, base)

    def gauss(self, p: GaussParams) -> Tensor:
        eps = self._next(lambda: self.rng.standard_normal(p.mu.shape))
        return sample_gauss(p, eps=eps)

    def frozen(self) -> "Sampler":
        return Sampler(replay=self.record)
