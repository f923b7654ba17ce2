"""Quadratic-transform surrogates and the recursive tracking state.

For each batch sample the fractional SINR is minorized by the concave
quadratic obtained from the quadratic transform,

    gbar_s(v, u_s; b, phi)  = 2 Re{conj(phi) u_s^H h_eq(b)^H v}
                              - sigma_w^2 |phi|^2 ||u_s||^2,
    gbar_k(v, u_k; s, phi)  = 2 sqrt(alpha_k Lambda_k ||s||^2)
                                Re{conj(phi) u_k^H h_hat_k^H v}
                              - |phi|^2 Gamma_k(v, u_k, s),

with the auxiliary scalars phi evaluated at the previous iterate, where they
make both quadratics touch the true ratios.  The iteration surrogate adds the
block-decoupled sample average, the tracked-gradient linear term and a
proximal regularizer:

    f_tilde(theta) = xi * g_tilde(theta)
                     + (1 - xi) * Xi^T (theta - theta_prev)
                     - tau_v ||v - v'||^2 - tau_u ||u - u'||^2.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (ChannelRealization, MiniBatch, RandomSample, SystemConfig,
                    Transceiver, pack)
from .sinr import (SinrVector, _Products, _check_receivers,
                   batch_sinr_and_mean_jacobian, utility_grad)


@dataclass(frozen=True)
class AuxiliaryPhi:
    """Quadratic-transform scalars, one per sample (and per tag)."""
    phi_s: np.ndarray           # (J,) complex
    phi_k: np.ndarray           # (J, K) complex

    def __post_init__(self):
        object.__setattr__(self, "phi_s", np.asarray(self.phi_s, complex))
        object.__setattr__(self, "phi_k", np.asarray(self.phi_k, complex))


@dataclass(frozen=True)
class RecursiveState:
    """Tracked averages: SINR vector, utility weights, Jacobian, gradient."""
    gamma_tilde: SinrVector     # tracked average SINR
    nu: np.ndarray              # (K+1,) utility weights
    F: np.ndarray               # (dim, K+1) tracked SINR Jacobian
    Xi: np.ndarray              # (dim,) tracked utility gradient, Xi = F nu
    t: int

    @staticmethod
    def initial(cfg: SystemConfig) -> "RecursiveState":
        return RecursiveState(
            gamma_tilde=SinrVector(gamma_s=0.0, gamma=np.zeros(cfg.K)),
            nu=np.ones(cfg.K + 1),
            F=np.zeros((cfg.dim, cfg.K + 1)),
            Xi=np.zeros(cfg.dim),
            t=0,
        )


# =========================================================
# Auxiliary variables (computed at the previous iterate)
# =========================================================

def compute_phi(theta_prev: Transceiver, batch: MiniBatch, ch: ChannelRealization,
                cfg: SystemConfig) -> AuxiliaryPhi:
    """Optimal quadratic-transform scalars at theta_prev for every sample.

    phi_s[j]    = u_s^H h_eq(b_j)^H v / (sigma_w^2 ||u_s||^2)
    phi_k[j,k]  = sqrt(alpha_k Lambda_k ||s_j||^2) u_k^H h_hat_k^H v
                  / Gamma_k(theta_prev, s_j)

    These are the unique scalars for which each quadratic equals its ratio at
    theta_prev.
    """
    _check_receivers(theta_prev)
    pr = _Products(theta_prev, ch, cfg)
    A = pr.A_batch(batch.b_mat)
    phi_s = A / (cfg.sigma_w2 * pr.us2)
    X = batch.s_norm2[:, None]
    coef = np.sqrt(cfg.alpha_arr * cfg.Lambda)[None, :] * np.sqrt(X)
    Bkk = np.diag(pr.B)
    gam_den = pr.c[None, :] * X + pr.d[None, :]
    phi_k = coef * Bkk[None, :] / gam_den
    return AuxiliaryPhi(phi_s=phi_s, phi_k=phi_k)


# =========================================================
# Concave per-sample quadratics
# =========================================================

def gamma_bar_s(v: np.ndarray, u_s: np.ndarray, b: np.ndarray, phi_s: complex,
                ch: ChannelRealization, cfg: SystemConfig) -> float:
    """Quadratic-transform minorant of gamma_s at fixed phi."""
    w = np.sqrt(cfg.alpha_arr) * np.asarray(b, float)
    h_eq = ch.H_d + np.tensordot(w, ch.h_hat, axes=(0, 0))
    A = complex(np.vdot(u_s, h_eq.conj().T @ v))
    us2 = float(np.real(np.vdot(u_s, u_s)))
    return float(2.0 * np.real(np.conj(phi_s) * A)
                 - cfg.sigma_w2 * np.abs(phi_s) ** 2 * us2)


def interference_quadratic(v: np.ndarray, u_k: np.ndarray, s_norm2: float,
                           ch: ChannelRealization, cfg: SystemConfig, k: int) -> float:
    """Gamma_k(v, u_k, s): interference-plus-noise quadratic of tag k."""
    al = cfg.alpha_arr * cfg.Lambda
    W = np.einsum("kmn,m->kn", ch.h_hat.conj(), v)              # (K, N)
    absB2 = np.abs(W @ u_k.conj()) ** 2                         # (K,)
    c = float(al @ absB2 - al[k] * absB2[k])
    return c * s_norm2 + cfg.sigma_w2 * float(np.real(np.vdot(u_k, u_k)))


def gamma_bar_k(v: np.ndarray, u_k: np.ndarray, s: np.ndarray, phi_k: complex,
                ch: ChannelRealization, cfg: SystemConfig, k: int) -> float:
    """Quadratic-transform minorant of gamma_k at fixed phi."""
    X = float(np.real(np.vdot(s, s)))
    B = complex(np.vdot(u_k, ch.h_hat[k].conj().T @ v))
    coef = np.sqrt(cfg.alpha_arr[k] * cfg.Lambda[k] * X)
    gam = interference_quadratic(v, u_k, X, ch, cfg, k)
    return float(2.0 * coef * np.real(np.conj(phi_k) * B)
                 - np.abs(phi_k) ** 2 * gam)


def _gbar_batch(theta: Transceiver, batch: MiniBatch, phi: AuxiliaryPhi,
                ch: ChannelRealization, cfg: SystemConfig):
    """gbar_s (J,) and gbar_k (J, K) for the whole batch at one theta."""
    pr = _Products(theta, ch, cfg)
    A = pr.A_batch(batch.b_mat)
    gs = 2.0 * np.real(phi.phi_s.conj() * A) \
        - cfg.sigma_w2 * np.abs(phi.phi_s) ** 2 * pr.us2
    X = batch.s_norm2[:, None]
    coef = np.sqrt(cfg.alpha_arr * cfg.Lambda)[None, :] * np.sqrt(X)
    Bkk = np.diag(pr.B)
    gam_den = pr.c[None, :] * X + pr.d[None, :]
    gk = 2.0 * coef * np.real(phi.phi_k.conj() * Bkk[None, :]) \
        - np.abs(phi.phi_k) ** 2 * gam_den
    return gs, gk


def g_sample(theta: Transceiver, sample: RandomSample, phi_s_j: complex,
             phi_k_j: np.ndarray, nu: np.ndarray, ch: ChannelRealization,
             cfg: SystemConfig) -> float:
    """Weighted per-sample surrogate nu_0 gbar_s + sum_k nu_k gbar_k."""
    val = nu[0] * gamma_bar_s(theta.v, theta.u_s, sample.b, phi_s_j, ch, cfg)
    for k in range(cfg.K):
        val += nu[k + 1] * gamma_bar_k(theta.v, theta.u[k], sample.s,
                                       complex(phi_k_j[k]), ch, cfg, k)
    return float(val)


def g_tilde(theta: Transceiver, theta_prev: Transceiver, batch: MiniBatch,
            phi: AuxiliaryPhi, nu: np.ndarray, ch: ChannelRealization,
            cfg: SystemConfig) -> float:
    """Block-decoupled sample average

        (1/J) sum_j [ g_j(v, u') + g_j(v', u) - g_j(v', u') ].

    Depends on v only through the first term and on the receive block only
    through the second, which is what lets the two blocks be solved
    independently.
    """
    th_v = theta_prev.with_v(theta.v)
    th_u = theta_prev.with_u(theta.u_s, theta.u)
    vals = []
    for th in (th_v, th_u, theta_prev):
        gs, gk = _gbar_batch(th, batch, phi, ch, cfg)
        vals.append(nu[0] * gs + gk @ nu[1:])
    return float(np.mean(vals[0] + vals[1] - vals[2]))


def proximal_penalty(theta: Transceiver, theta_prev: Transceiver,
                     cfg: SystemConfig) -> float:
    """q(theta, theta') = tau_v ||v - v'||^2 + tau_u ||u - u'||^2."""
    dv = theta.v - theta_prev.v
    du_s = theta.u_s - theta_prev.u_s
    du = theta.u - theta_prev.u
    return float(cfg.tau_v * np.real(np.vdot(dv, dv))
                 + cfg.tau_u * (np.real(np.vdot(du_s, du_s))
                                + np.real(np.vdot(du, du))))


def surrogate_value(theta: Transceiver, theta_prev: Transceiver,
                    state: RecursiveState, batch: MiniBatch, phi: AuxiliaryPhi,
                    xi_t: float, ch: ChannelRealization, cfg: SystemConfig) -> float:
    """Strongly concave iteration surrogate f_tilde(theta)."""
    lin = float(state.Xi @ (pack(theta) - pack(theta_prev)))
    return (xi_t * g_tilde(theta, theta_prev, batch, phi, state.nu, ch, cfg)
            + (1.0 - xi_t) * lin
            - proximal_penalty(theta, theta_prev, cfg))


# =========================================================
# Recursive tracking
# =========================================================

def update_recursive_state(state: RecursiveState, theta_prev: Transceiver,
                           batch: MiniBatch, ch: ChannelRealization,
                           cfg: SystemConfig, xi_t: float,
                           omega_t: float) -> RecursiveState:
    """One tracking step.

    gamma_tilde and F are exponentially averaged toward the batch mean of the
    instantaneous SINRs and their Jacobian at theta_prev; nu relaxes toward
    the (clamped) utility gradient at the new gamma_tilde; Xi = F nu.
    """
    if not (0.0 < xi_t <= 1.0):
        raise ValueError(f"xi_t must lie in (0, 1], got {xi_t}")
    if not (0.0 <= omega_t <= 1.0):
        raise ValueError(f"omega_t must lie in [0, 1], got {omega_t}")
    gam, jac_mean = batch_sinr_and_mean_jacobian(theta_prev, batch, ch, cfg)
    g_new = (1.0 - xi_t) * state.gamma_tilde.as_array() + xi_t * gam.mean(axis=0)
    gamma_tilde = SinrVector.from_array(g_new)
    nu_target = utility_grad(gamma_tilde, cfg, clamp=True)
    nu = (1.0 - omega_t) * state.nu + omega_t * nu_target
    F = (1.0 - xi_t) * state.F + xi_t * jac_mean
    return RecursiveState(gamma_tilde=gamma_tilde, nu=nu, F=F, Xi=F @ nu,
                          t=state.t + 1)
