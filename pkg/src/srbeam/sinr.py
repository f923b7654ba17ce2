"""Instantaneous and expected SINR evaluation, barrier utility, gradients.

Conventions
-----------
The decoding SINR of the primary stream for tag-symbol vector b is

    gamma_s(theta; b) = |u_s^H h_eq(b)^H v|^2 / (sigma_w^2 ||u_s||^2),

and the despread SINR of tag k for primary block s is

    gamma_k(theta; s) = a_k X / (c_k X + d_k),        X = ||s||^2,

with  a_k = alpha_k Lambda_k |u_k^H h_hat_k^H v|^2,
      c_k = sum_{m != k} alpha_m Lambda_m |u_k^H h_hat_m^H v|^2,
      d_k = sigma_w^2 ||u_k||^2,   Lambda_k = rho_k (1 - rho_k).

All gradients are real gradients over the packed parameter vector
(Re/Im stacked, see ``srbeam.model.pack``); complex shortcuts inside use
Wirtinger derivatives g = df/d(conj z) and map to [2 Re g; 2 Im g].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.stats import gamma as gamma_dist

from .model import (ChannelRealization, MiniBatch, RandomSample, SystemConfig,
                    Transceiver, stream)

MAX_ENUM_K = 20     # exact expectation over b enumerates 2^K outcomes


class BarrierDomainError(ValueError):
    """A tag SINR sits at or below its barrier target."""


class UnsupportedSizeError(ValueError):
    """Exact enumeration requested beyond the supported tag count."""


@dataclass(frozen=True)
class SinrVector:
    """Composite SINR vector ordered (s, 1..K)."""
    gamma_s: float
    gamma: np.ndarray           # (K,)

    def as_array(self) -> np.ndarray:
        return np.concatenate([[self.gamma_s], np.asarray(self.gamma, float)])

    @staticmethod
    def from_array(arr: np.ndarray) -> "SinrVector":
        arr = np.asarray(arr, float)
        return SinrVector(gamma_s=float(arr[0]), gamma=arr[1:].copy())


@dataclass(frozen=True)
class SinrEstimate:
    """Monte Carlo SINR estimate with per-component standard errors."""
    value: SinrVector
    stderr: np.ndarray          # (K+1,) ordered (s, 1..K)
    n_samples: int


# =========================================================
# Shared beamformer/channel products
# =========================================================

class _Products:
    """Scalars and vectors reused by every SINR/gradient evaluation at one theta."""

    def __init__(self, theta: Transceiver, ch: ChannelRealization, cfg: SystemConfig):
        v, u_s, u = theta.v, theta.u_s, theta.u
        self.W = np.einsum("kmn,m->kn", ch.h_hat.conj(), v)     # (K, N)  h_hat_k^H v
        self.m0 = ch.H_d.conj().T @ v                           # (N,)    H_d^H v
        self.us2 = float(np.real(np.vdot(u_s, u_s)))
        self.uk2 = np.real(np.einsum("kn,kn->k", u.conj(), u))  # (K,)
        self.A0 = complex(np.vdot(u_s, self.m0))                # u_s^H H_d^H v
        self.T = np.einsum("n,kn->k", u_s.conj(), self.W)       # (K,)    u_s^H h_hat_k^H v
        # B[m, k] = u_k^H h_hat_m^H v
        self.B = self.W @ u.conj().T                            # (K, K)
        al = cfg.alpha_arr * cfg.Lambda
        Bkk = np.diag(self.B)
        self.a = al * np.abs(Bkk) ** 2                          # (K,)
        absB2 = np.abs(self.B) ** 2
        self.c = al @ absB2 - al * np.abs(Bkk) ** 2             # (K,)
        self.d = cfg.sigma_w2 * self.uk2                        # (K,)
        self._theta = theta
        self._ch = ch
        self._cfg = cfg
        self._grad_cache = None

    # ---- gradient building blocks (Wirtinger d/d conj) ----
    def grad_blocks(self):
        """da/dc vectors for every tag: v-blocks (K, M) and u-blocks (K, N)."""
        if self._grad_cache is not None:
            return self._grad_cache
        ch, cfg, u = self._ch, self._cfg, self._theta.u
        al = cfg.alpha_arr * cfg.Lambda
        G = np.einsum("mij,kj->kmi", ch.h_hat, u)               # (K, K, M) h_hat_m u_k
        Bkk = np.diag(self.B)
        da_v = (al * Bkk)[:, None] * np.einsum("kki->ki", G)    # (K, M)
        wB = al[None, :] * self.B.T                             # (K(m-col) -> row k, m)
        wB = wB.copy()
        np.fill_diagonal(wB, 0.0)
        dc_v = np.einsum("km,kmi->ki", wB, G)                   # (K, M)
        da_u = (al * Bkk.conj())[:, None] * self.W              # (K, N)
        wBc = al[None, :] * self.B.conj().T
        wBc = wBc.copy()
        np.fill_diagonal(wBc, 0.0)
        dc_u = wBc @ self.W                                     # (K, N)
        self._grad_cache = (da_v, dc_v, da_u, dc_u)
        return self._grad_cache

    def heq_us_batch(self, b_mat: np.ndarray) -> np.ndarray:
        """h_eq(b_j) u_s for each batch row, shape (J, M)."""
        ch, cfg, u_s = self._ch, self._cfg, self._theta.u_s
        Hu0 = ch.H_d @ u_s                                      # (M,)
        hus = np.einsum("kmn,n->km", ch.h_hat, u_s)             # (K, M)
        w = b_mat * np.sqrt(cfg.alpha_arr)[None, :]             # (J, K)
        return Hu0[None, :] + w @ hus

    def m_batch(self, b_mat: np.ndarray) -> np.ndarray:
        """h_eq(b_j)^H v for each batch row, shape (J, N)."""
        w = b_mat * np.sqrt(self._cfg.alpha_arr)[None, :]
        return self.m0[None, :] + w @ self.W

    def A_batch(self, b_mat: np.ndarray) -> np.ndarray:
        """u_s^H h_eq(b_j)^H v for each batch row, shape (J,)."""
        w = b_mat * np.sqrt(self._cfg.alpha_arr)[None, :]
        return self.A0 + w @ self.T


def _check_receivers(theta: Transceiver):
    if np.vdot(theta.u_s, theta.u_s).real == 0.0:
        raise BarrierDomainError("u_s must be nonzero")
    uk2 = np.real(np.einsum("kn,kn->k", theta.u.conj(), theta.u))
    if np.any(uk2 == 0.0):
        raise BarrierDomainError("every u_k must be nonzero")


def _real_block(g: np.ndarray) -> np.ndarray:
    """Map a Wirtinger gradient block to its stacked real gradient [2Re; 2Im]."""
    return np.concatenate([2.0 * g.real, 2.0 * g.imag], axis=-1)


# =========================================================
# Instantaneous SINRs
# =========================================================

def gamma_s_instant(theta: Transceiver, b: np.ndarray, ch: ChannelRealization,
                    cfg: SystemConfig) -> float:
    """Primary-stream SINR for one tag-symbol vector b."""
    _check_receivers(theta)
    pr = _Products(theta, ch, cfg)
    A = pr.A_batch(np.asarray(b, float)[None, :])[0]
    return float(np.abs(A) ** 2 / (cfg.sigma_w2 * pr.us2))


def gamma_k_instant(theta: Transceiver, s: np.ndarray, ch: ChannelRealization,
                    cfg: SystemConfig, k: int) -> float:
    """Tag-k SINR for one primary block s (depends on s through ||s||^2 only)."""
    if not 0 <= k < cfg.K:
        raise ValueError(f"tag index {k} out of range for K={cfg.K}")
    _check_receivers(theta)
    pr = _Products(theta, ch, cfg)
    X = float(np.real(np.vdot(s, s)))
    return float(pr.a[k] * X / (pr.c[k] * X + pr.d[k]))


def batch_instant_sinr(theta: Transceiver, batch: MiniBatch, ch: ChannelRealization,
                       cfg: SystemConfig) -> np.ndarray:
    """Instantaneous SINR matrix of shape (J, K+1): column 0 uses b_j, column k uses s_j."""
    _check_receivers(theta)
    pr = _Products(theta, ch, cfg)
    A = pr.A_batch(batch.b_mat)
    gs = np.abs(A) ** 2 / (cfg.sigma_w2 * pr.us2)
    X = batch.s_norm2[:, None]
    gk = pr.a[None, :] * X / (pr.c[None, :] * X + pr.d[None, :])
    return np.concatenate([gs[:, None], gk], axis=1)


# =========================================================
# Analytic gradients
# =========================================================

def _gamma_s_grad_complex(pr: _Products, b_mat: np.ndarray, cfg: SystemConfig):
    """Wirtinger gradients of gamma_s per batch row: ((J, M) wrt v, (J, N) wrt u_s)."""
    D = cfg.sigma_w2 * pr.us2
    A = pr.A_batch(b_mat)                                   # (J,)
    m = pr.m_batch(b_mat)                                   # (J, N)
    heq_us = pr.heq_us_batch(b_mat)                         # (J, M)
    gv = A[:, None] * heq_us / D
    gu = (A.conj()[:, None] * m) / D \
        - (np.abs(A) ** 2)[:, None] * pr._theta.u_s[None, :] / (D * pr.us2)
    return gv, gu


def _gamma_k_grad_complex(pr: _Products, X: np.ndarray):
    """Wirtinger gradients of gamma_k per batch row.

    Returns (J, K, M) wrt v and (J, K, N) wrt u_k.
    """
    da_v, dc_v, da_u, dc_u = pr.grad_blocks()
    den = pr.c[None, :] * X[:, None] + pr.d[None, :]        # (J, K)
    P = X[:, None] / den
    aP2 = pr.a[None, :] * P ** 2
    gv = np.einsum("jk,km->jkm", P, da_v) - np.einsum("jk,km->jkm", aP2, dc_v)
    R = pr.a[None, :] * X[:, None] / den ** 2               # coeff of the noise term
    gu = np.einsum("jk,kn->jkn", P, da_u) - np.einsum("jk,kn->jkn", aP2, dc_u) \
        - np.einsum("jk,kn->jkn", R * pr._cfg.sigma_w2, pr._theta.u)
    return gv, gu


def _assemble_jacobian(cfg: SystemConfig, gs_v, gs_u, gk_v, gk_u) -> np.ndarray:
    """Stack complex per-column gradients into the real (J, dim, K+1) Jacobian."""
    J = gs_v.shape[0]
    M, N, K = cfg.M, cfg.N, cfg.K
    jac = np.zeros((J, cfg.dim, K + 1))
    jac[:, 0:2 * M, 0] = _real_block(gs_v)
    jac[:, 2 * M:2 * M + 2 * N, 0] = _real_block(gs_u)
    for k in range(K):
        jac[:, 0:2 * M, k + 1] = _real_block(gk_v[:, k, :])
        off = 2 * M + 2 * N * (k + 1)
        jac[:, off:off + 2 * N, k + 1] = _real_block(gk_u[:, k, :])
    return jac


def sinr_grad_instant(theta: Transceiver, sample: RandomSample, ch: ChannelRealization,
                      cfg: SystemConfig) -> np.ndarray:
    """Real Jacobian (dim, K+1) of the instantaneous SINRs at one random state.

    Column 0 differentiates gamma_s(theta; sample.b); column k differentiates
    gamma_k(theta; sample.s).  gamma_s never depends on u_k and gamma_k never
    depends on u_s, so those blocks are exactly zero.
    """
    _check_receivers(theta)
    pr = _Products(theta, ch, cfg)
    b_mat = np.asarray(sample.b, float)[None, :]
    X = np.array([sample.s_norm2])
    gs_v, gs_u = _gamma_s_grad_complex(pr, b_mat, cfg)
    gk_v, gk_u = _gamma_k_grad_complex(pr, X)
    return _assemble_jacobian(cfg, gs_v, gs_u, gk_v, gk_u)[0]


def batch_sinr_and_mean_jacobian(theta: Transceiver, batch: MiniBatch,
                                 ch: ChannelRealization, cfg: SystemConfig):
    """Batch SINRs (J, K+1) and the batch-mean real Jacobian (dim, K+1).

    This is the per-iteration workhorse of the recursive tracking state.
    """
    _check_receivers(theta)
    pr = _Products(theta, ch, cfg)
    A = pr.A_batch(batch.b_mat)
    gs = np.abs(A) ** 2 / (cfg.sigma_w2 * pr.us2)
    X = batch.s_norm2
    den = pr.c[None, :] * X[:, None] + pr.d[None, :]
    gk = pr.a[None, :] * X[:, None] / den
    gam = np.concatenate([gs[:, None], gk], axis=1)

    Jn = batch.J
    M, N, K = cfg.M, cfg.N, cfg.K
    D = cfg.sigma_w2 * pr.us2
    m = pr.m_batch(batch.b_mat)
    heq_us = pr.heq_us_batch(batch.b_mat)
    gs_v = np.einsum("j,jm->m", A, heq_us) / (D * Jn)
    gs_u = np.einsum("j,jn->n", A.conj(), m) / (D * Jn) \
        - np.mean(np.abs(A) ** 2) * theta.u_s / (D * pr.us2)

    da_v, dc_v, da_u, dc_u = pr.grad_blocks()
    P = X[:, None] / den
    Pbar = P.mean(axis=0)                                   # (K,)
    P2bar = (P ** 2).mean(axis=0)
    Rbar = (X[:, None] / den ** 2).mean(axis=0)
    gk_v = Pbar[:, None] * da_v - (pr.a * P2bar)[:, None] * dc_v
    gk_u = Pbar[:, None] * da_u - (pr.a * P2bar)[:, None] * dc_u \
        - (pr.a * Rbar * cfg.sigma_w2)[:, None] * theta.u

    jac = np.zeros((cfg.dim, K + 1))
    jac[0:2 * M, 0] = _real_block(gs_v)
    jac[2 * M:2 * M + 2 * N, 0] = _real_block(gs_u)
    for k in range(K):
        jac[0:2 * M, k + 1] = _real_block(gk_v[k])
        off = 2 * M + 2 * N * (k + 1)
        jac[off:off + 2 * N, k + 1] = _real_block(gk_u[k])
    return gam, jac


# =========================================================
# Exact expectations
# =========================================================

def _enumerate_tag_states(cfg: SystemConfig):
    """All 2^K tag-symbol vectors with their probabilities."""
    if cfg.K > MAX_ENUM_K:
        raise UnsupportedSizeError(
            f"exact enumeration supports K <= {MAX_ENUM_K}, got {cfg.K}; "
            "use the Monte Carlo estimator instead")
    K = cfg.K
    states = ((np.arange(2 ** K)[:, None] >> np.arange(K)[None, :]) & 1).astype(float)
    rho = cfg.rho_arr
    probs = np.prod(np.where(states > 0.5, rho[None, :], 1.0 - rho[None, :]), axis=1)
    return states, probs


def expected_gamma_s_exact(theta: Transceiver, ch: ChannelRealization,
                           cfg: SystemConfig) -> float:
    """E_b[gamma_s] by exact enumeration over the 2^K tag states."""
    _check_receivers(theta)
    states, probs = _enumerate_tag_states(cfg)
    pr = _Products(theta, ch, cfg)
    A = pr.A_batch(states)
    return float(probs @ (np.abs(A) ** 2) / (cfg.sigma_w2 * pr.us2))


def _gamma_moments(c: float, d: float, L: int):
    """E[X/(cX+d)], E[X^2/(cX+d)^2], E[X/(cX+d)^2] for X ~ Gamma(L, 1).

    Adaptive quadrature on the (finite-support-truncated) Gamma density;
    closed forms when c = 0.
    """
    if c == 0.0:
        return L / d, L * (L + 1) / d ** 2, L / d ** 2
    lo = float(gamma_dist.ppf(1e-15, L))
    hi = float(gamma_dist.isf(1e-15, L))
    pts = [float(L)] if lo < L < hi else None

    def expect(fn):
        val, _ = integrate.quad(
            lambda x: fn(x) * gamma_dist.pdf(x, L), lo, hi,
            epsabs=0.0, epsrel=1e-10, limit=200, points=pts)
        return val

    i1 = expect(lambda x: x / (c * x + d))
    i2 = expect(lambda x: x * x / (c * x + d) ** 2)
    i3 = expect(lambda x: x / (c * x + d) ** 2)
    return i1, i2, i3


def expected_gamma_k_exact(theta: Transceiver, ch: ChannelRealization,
                           cfg: SystemConfig, k: int) -> float:
    """E_s[gamma_k] via 1-D quadrature over X = ||s||^2 ~ Gamma(L, 1)."""
    if not 0 <= k < cfg.K:
        raise ValueError(f"tag index {k} out of range for K={cfg.K}")
    _check_receivers(theta)
    pr = _Products(theta, ch, cfg)
    a, c, d = float(pr.a[k]), float(pr.c[k]), float(pr.d[k])
    if a == 0.0:
        return 0.0
    i1, _, _ = _gamma_moments(c, d, cfg.L)
    return float(a * i1)


def exact_expected_sinr(theta: Transceiver, ch: ChannelRealization,
                        cfg: SystemConfig) -> SinrVector:
    """Composite expected SINR vector from the exact oracles."""
    gs = expected_gamma_s_exact(theta, ch, cfg)
    gk = np.array([expected_gamma_k_exact(theta, ch, cfg, k) for k in range(cfg.K)])
    return SinrVector(gamma_s=gs, gamma=gk)


def exact_sinr_jacobian(theta: Transceiver, ch: ChannelRealization, cfg: SystemConfig):
    """Exact (SinrVector, real Jacobian (dim, K+1)) of the expected SINRs.

    The s-column enumerates tag states; the k-columns reduce the expectation
    over ||s||^2 to the three scalar moments of :func:`_gamma_moments`.
    """
    _check_receivers(theta)
    pr = _Products(theta, ch, cfg)
    states, probs = _enumerate_tag_states(cfg)
    A = pr.A_batch(states)
    gs = float(probs @ (np.abs(A) ** 2) / (cfg.sigma_w2 * pr.us2))
    D = cfg.sigma_w2 * pr.us2
    m = pr.m_batch(states)
    heq_us = pr.heq_us_batch(states)
    w = probs
    gs_v = np.einsum("j,j,jm->m", w, A, heq_us) / D
    gs_u = np.einsum("j,j,jn->n", w, A.conj(), m) / D \
        - float(w @ np.abs(A) ** 2) * theta.u_s / (D * pr.us2)

    da_v, dc_v, da_u, dc_u = pr.grad_blocks()
    M, N, K = cfg.M, cfg.N, cfg.K
    gk = np.zeros(K)
    jac = np.zeros((cfg.dim, K + 1))
    jac[0:2 * M, 0] = _real_block(gs_v)
    jac[2 * M:2 * M + 2 * N, 0] = _real_block(gs_u)
    for k in range(K):
        a, c, d = float(pr.a[k]), float(pr.c[k]), float(pr.d[k])
        i1, i2, i3 = _gamma_moments(c, d, cfg.L)
        gk[k] = a * i1
        gv = i1 * da_v[k] - a * i2 * dc_v[k]
        gu = i1 * da_u[k] - a * i2 * dc_u[k] - a * i3 * cfg.sigma_w2 * theta.u[k]
        jac[0:2 * M, k + 1] = _real_block(gv)
        off = 2 * M + 2 * N * (k + 1)
        jac[off:off + 2 * N, k + 1] = _real_block(gu)
    return SinrVector(gamma_s=gs, gamma=gk), jac


def expected_sinr_monte_carlo(theta: Transceiver, ch: ChannelRealization,
                              cfg: SystemConfig, n_samples: int,
                              seed: int) -> SinrEstimate:
    """Sample-mean SINR estimate over seeded draws, with standard errors."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    _check_receivers(theta)
    pr = _Products(theta, ch, cfg)
    rng = stream(seed, "mc-sinr")

    sum_g = np.zeros(cfg.K + 1)
    sum_g2 = np.zeros(cfg.K + 1)
    done = 0
    chunk = max(1, min(n_samples, int(4e6 // max(cfg.L, cfg.K))))
    sqrt_alpha = np.sqrt(cfg.alpha_arr)
    while done < n_samples:
        n = min(chunk, n_samples - done)
        b = (rng.random((n, cfg.K)) < cfg.rho_arr[None, :]).astype(float)
        s = (rng.standard_normal((n, cfg.L)) + 1j * rng.standard_normal((n, cfg.L))) / np.sqrt(2.0)
        X = np.real(np.einsum("jl,jl->j", s.conj(), s))
        A = pr.A0 + (b * sqrt_alpha[None, :]) @ pr.T
        gs = np.abs(A) ** 2 / (cfg.sigma_w2 * pr.us2)
        gk = pr.a[None, :] * X[:, None] / (pr.c[None, :] * X[:, None] + pr.d[None, :])
        g = np.concatenate([gs[:, None], gk], axis=1)
        sum_g += g.sum(axis=0)
        sum_g2 += (g ** 2).sum(axis=0)
        done += n
    mean = sum_g / n_samples
    var = np.maximum(sum_g2 / n_samples - mean ** 2, 0.0)
    stderr = np.sqrt(var / n_samples)
    return SinrEstimate(value=SinrVector.from_array(mean), stderr=stderr,
                        n_samples=n_samples)


# =========================================================
# Barrier utility
# =========================================================

def utility(gammaA: SinrVector, cfg: SystemConfig) -> float:
    """Barrier objective gamma_s + (1/psi) sum_k log(gamma_k - gamma0_k).

    Raises :class:`BarrierDomainError` outside the barrier domain; callers
    that must stay finite use :func:`utility_clamped`.
    """
    margin = np.asarray(gammaA.gamma, float) - cfg.gamma0_arr
    if np.any(margin <= 0.0):
        bad = int(np.argmin(margin))
        raise BarrierDomainError(
            f"gamma_{bad + 1} = {gammaA.gamma[bad]:.6g} does not exceed its "
            f"target {cfg.gamma0[bad]:.6g}")
    return float(gammaA.gamma_s + np.sum(np.log(margin)) / cfg.psi)


def utility_clamped(gammaA: SinrVector, cfg: SystemConfig) -> float:
    """Barrier objective with margins floored at eps_bar (always finite)."""
    margin = np.maximum(np.asarray(gammaA.gamma, float) - cfg.gamma0_arr, cfg.eps_bar)
    return float(gammaA.gamma_s + np.sum(np.log(margin)) / cfg.psi)


def utility_grad(gammaA: SinrVector, cfg: SystemConfig, clamp: bool = False) -> np.ndarray:
    """Weight vector nu = grad of the utility wrt the SINR vector (length K+1).

    nu_0 = 1 and nu_k = 1 / (psi (gamma_k - gamma0_k)); with ``clamp`` the
    margin is floored at eps_bar so the weights stay finite below target.
    """
    margin = np.asarray(gammaA.gamma, float) - cfg.gamma0_arr
    if clamp:
        margin = np.maximum(margin, cfg.eps_bar)
    elif np.any(margin <= 0.0):
        raise BarrierDomainError("utility gradient undefined at or below the target")
    nu = np.empty(cfg.K + 1)
    nu[0] = 1.0
    nu[1:] = 1.0 / (cfg.psi * margin)
    return nu


def tag_gains(theta: Transceiver, ch: ChannelRealization, cfg: SystemConfig) -> np.ndarray:
    """Beamformed cascade gains B[m, k] = u_k^H h_hat_m^H v (used by the BER sim)."""
    return _Products(theta, ch, cfg).B
