"""Exact maximization of the iteration surrogate, block by block.

The surrogate is strongly concave and additively separable across the
transmit block v and the receive blocks (u_s, u_1..u_K), so each block has a
closed-form maximizer:

* v solves a quadratically constrained quadratic program over the power ball;
  the Lagrange multiplier of the power constraint is found by bisection on
  the monotone power curve ||v(mu)||^2.
* u_s and each u_k solve unconstrained strongly concave quadratics, i.e.
  single linear systems.

An independent projected-gradient oracle (finite-difference gradients on the
surrogate value itself) certifies the closed forms on small instances.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (ChannelRealization, MiniBatch, SystemConfig, Transceiver,
                    pack, stream, unpack)
from .sinr import _Products, _check_receivers
from .surrogate import AuxiliaryPhi, RecursiveState, surrogate_value


class SolverError(RuntimeError):
    """Bisection bracket failure or oracle disagreement."""


@dataclass(frozen=True)
class SolverOptions:
    mu_tol: float = 1e-9        # relative tolerance on the power gap
    mu_hi_init: float = 1.0     # initial upper bracket for the multiplier
    max_bisect: int = 200       # cap on doublings and bisection iterations
    oracle_tol: float = 1e-6    # agreement tolerance between oracle starts
    oracle_max_iter: int = 20000
    oracle_fd_step: float = 1e-6

    def __post_init__(self):
        if min(self.mu_tol, self.mu_hi_init, self.oracle_tol, self.oracle_fd_step) <= 0:
            raise ValueError("solver tolerances must be positive")
        if self.max_bisect < 1 or self.oracle_max_iter < 1:
            raise ValueError("iteration caps must be positive")


def _complex_block(x: np.ndarray, lo: int, n: int) -> np.ndarray:
    """Complex view z = x[lo:lo+n] + i x[lo+n:lo+2n] of a packed real block."""
    return x[lo:lo + n] + 1j * x[lo + n:lo + 2 * n]


# =========================================================
# Transmit block
# =========================================================

def _v_problem_terms(theta_prev, state, batch, phi, xi_t, ch, cfg):
    """Linear coefficient and PSD quadratic matrix of the v-block surrogate.

    The v-dependent part of the surrogate is
        2 Re{b_lin^H v} - v^H Q v - tau_v ||v - v'||^2
        + (1 - xi) Re{z_v^H (v - v')},
    where z_v is the complexified v-block of the tracked gradient.
    """
    pr = _Products(theta_prev, ch, cfg)
    J = batch.J
    al = cfg.alpha_arr * cfg.Lambda
    X = batch.s_norm2
    nu = state.nu

    heq_us = pr.heq_us_batch(batch.b_mat)                   # (J, M)
    b_lin = nu[0] * np.einsum("j,jm->m", phi.phi_s, heq_us)
    G = np.einsum("mij,kj->kmi", ch.h_hat, theta_prev.u)    # (K, K, M) h_hat_m u_k
    tag_w = np.sqrt(al) * (phi.phi_k * np.sqrt(X)[:, None]).sum(axis=0)     # (K,)
    b_lin = b_lin + np.einsum("k,kkm->m", nu[1:] * tag_w, G)
    b_lin *= xi_t / J

    s1 = (np.abs(phi.phi_k) ** 2 * X[:, None]).sum(axis=0)  # (K,)
    wgt = np.outer(nu[1:] * s1, al)                         # (K, K) rows k, cols m
    np.fill_diagonal(wgt, 0.0)
    Q = (xi_t / J) * np.einsum("km,kmi,kmj->ij", wgt, G, G.conj())
    Q = 0.5 * (Q + Q.conj().T)
    return b_lin, Q


def solve_v(theta_prev: Transceiver, state: RecursiveState, batch: MiniBatch,
            phi: AuxiliaryPhi, xi_t: float, ch: ChannelRealization,
            cfg: SystemConfig, opts: SolverOptions = SolverOptions()):
    """Maximize the v-block surrogate over the power ball.

    Returns (v, mu) with mu >= 0 the power multiplier; mu = 0 when the
    unconstrained maximizer is already feasible, otherwise ||v||^2 = P_max
    within opts.mu_tol relative.
    """
    b_lin, Q = _v_problem_terms(theta_prev, state, batch, phi, xi_t, ch, cfg)
    z_v = _complex_block(state.Xi, 0, cfg.M)
    rhs = b_lin + cfg.tau_v * theta_prev.v + 0.5 * (1.0 - xi_t) * z_v

    lam, U = np.linalg.eigh(Q)
    lam = np.maximum(lam, 0.0)
    r = U.conj().T @ rhs
    r2 = np.abs(r) ** 2

    def power(mu: float) -> float:
        return float(np.sum(r2 / (lam + cfg.tau_v + mu) ** 2))

    probes = []

    def probed_power(mu: float) -> float:
        p = power(mu)
        probes.append((mu, p))
        return p

    if probed_power(0.0) <= cfg.P_max:
        mu = 0.0
    else:
        hi = opts.mu_hi_init
        n_double = 0
        while probed_power(hi) >= cfg.P_max:
            hi *= 2.0
            n_double += 1
            if n_double > opts.max_bisect:
                raise SolverError("power-multiplier bracket did not close")
        lo = 0.0
        mu = 0.5 * hi
        for _ in range(opts.max_bisect):
            p = probed_power(mu)
            if abs(p - cfg.P_max) <= opts.mu_tol * cfg.P_max:
                break
            if p > cfg.P_max:
                lo = mu
            else:
                hi = mu
            mu = 0.5 * (lo + hi)
        else:
            raise SolverError("power bisection did not reach its tolerance")

    # the power curve must be strictly decreasing over everything we probed
    probes.sort(key=lambda t: t[0])
    for (m1, p1), (m2, p2) in zip(probes, probes[1:]):
        if m2 > m1 and p2 > p1 + 1e-12 * max(p1, 1.0):
            raise SolverError("power curve not decreasing in the multiplier")

    v = U @ (r / (lam + cfg.tau_v + mu))
    return v, float(mu)


# =========================================================
# Receive blocks
# =========================================================

def solve_u(theta_prev: Transceiver, state: RecursiveState, batch: MiniBatch,
            phi: AuxiliaryPhi, xi_t: float, ch: ChannelRealization,
            cfg: SystemConfig, opts: SolverOptions = SolverOptions()):
    """Maximize the receive-block surrogates (unconstrained, independent).

    Returns (u_s, u) where u has shape (K, N).  Each block zeroes the
    gradient of its own strongly concave quadratic.
    """
    _check_receivers(theta_prev)
    pr = _Products(theta_prev, ch, cfg)
    J = batch.J
    nu = state.nu
    M, N, K = cfg.M, cfg.N, cfg.K

    # -- u_s: the quadratic coefficient is a scalar multiple of the identity
    m = pr.m_batch(batch.b_mat)                             # (J, N)
    qcoef = (xi_t / J) * nu[0] * cfg.sigma_w2 * float(np.sum(np.abs(phi.phi_s) ** 2)) \
        + cfg.tau_u
    z_us = _complex_block(state.Xi, 2 * M, N)
    rhs_s = (xi_t / J) * nu[0] * np.einsum("j,jn->n", phi.phi_s.conj(), m) \
        + cfg.tau_u * theta_prev.u_s + 0.5 * (1.0 - xi_t) * z_us
    u_s = rhs_s / qcoef

    # -- each u_k: N x N Hermitian positive definite system
    al = cfg.alpha_arr * cfg.Lambda
    X = batch.s_norm2
    s1 = (np.abs(phi.phi_k) ** 2 * X[:, None]).sum(axis=0)  # (K,)
    s0 = (np.abs(phi.phi_k) ** 2).sum(axis=0)
    outer_W = np.einsum("mi,mj->mij", pr.W, pr.W.conj())    # (K, N, N)
    lin_w = np.sqrt(al) * (phi.phi_k.conj() * np.sqrt(X)[:, None]).sum(axis=0)
    u = np.empty((K, N), dtype=complex)
    eye = np.eye(N)
    for k in range(K):
        wk = al * s1[k]
        wk[k] = 0.0
        A = (xi_t / J) * nu[k + 1] * (np.tensordot(wk, outer_W, axes=(0, 0))
                                      + cfg.sigma_w2 * s0[k] * eye) + cfg.tau_u * eye
        off = 2 * M + 2 * N * (k + 1)
        z_uk = _complex_block(state.Xi, off, N)
        rhs = (xi_t / J) * nu[k + 1] * lin_w[k] * pr.W[k] \
            + cfg.tau_u * theta_prev.u[k] + 0.5 * (1.0 - xi_t) * z_uk
        u[k] = np.linalg.solve(A, rhs)
    return u_s, u


def solve_surrogate(theta_prev: Transceiver, state: RecursiveState,
                    batch: MiniBatch, phi: AuxiliaryPhi, xi_t: float,
                    ch: ChannelRealization, cfg: SystemConfig,
                    opts: SolverOptions = SolverOptions()) -> Transceiver:
    """Global maximizer of the surrogate: independent v and u block solves."""
    v, _ = solve_v(theta_prev, state, batch, phi, xi_t, ch, cfg, opts)
    u_s, u = solve_u(theta_prev, state, batch, phi, xi_t, ch, cfg, opts)
    return Transceiver(v=v, u_s=u_s, u=u)


# =========================================================
# Independent iterative oracle
# =========================================================

def project_power(p: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """Radially rescale the v-block onto the power ball; u-blocks untouched."""
    p = np.array(p, dtype=float)
    v2 = float(np.sum(p[:2 * cfg.M] ** 2))
    if v2 > cfg.P_max:
        p[:2 * cfg.M] *= np.sqrt(cfg.P_max / v2)
    return p


def _fd_gradient(f, p: np.ndarray, h0: float) -> np.ndarray:
    g = np.empty_like(p)
    for i in range(p.size):
        h = h0 * (1.0 + abs(p[i]))
        e = np.zeros_like(p)
        e[i] = h
        g[i] = (f(p + e) - f(p - e)) / (2.0 * h)
    return g


def oracle_solve_surrogate(theta_prev: Transceiver, state: RecursiveState,
                           batch: MiniBatch, phi: AuxiliaryPhi, xi_t: float,
                           ch: ChannelRealization, cfg: SystemConfig,
                           opts: SolverOptions = SolverOptions(),
                           seed: int = 0) -> Transceiver:
    """Projected gradient ascent on the surrogate from two random starts.

    Gradients come from central finite differences of the surrogate value
    (exact for a quadratic up to roundoff); steps are Barzilai-Borwein with a
    halving backtracking safeguard.  The two runs must agree within
    opts.oracle_tol, which certifies uniqueness of the maximizer.  Intended
    for small instances only.
    """
    def fval(p: np.ndarray) -> float:
        return surrogate_value(unpack(p, cfg), theta_prev, state, batch, phi,
                               xi_t, ch, cfg)

    def run(rng: np.random.Generator) -> np.ndarray:
        p0 = pack(theta_prev)
        p = project_power(p0 + 0.1 * (1.0 + np.abs(p0)) * rng.standard_normal(p0.size), cfg)
        f = fval(p)
        g = _fd_gradient(fval, p, opts.oracle_fd_step)
        eta = 1e-2 * (1.0 + np.linalg.norm(p)) / (1.0 + np.linalg.norm(g))
        scale = 1.0 + np.linalg.norm(p)
        for _ in range(opts.oracle_max_iter):
            # projected-gradient residual as the stationarity measure
            delta = 1e-7 * scale
            res = np.linalg.norm(project_power(p + delta * g, cfg) - p) / delta
            if res <= 1e-4 * opts.oracle_tol * scale + 1e-9:
                break
            p_new = project_power(p + eta * g, cfg)
            f_new = fval(p_new)
            halvings = 0
            while f_new < f and halvings < 50:
                eta *= 0.5
                p_new = project_power(p + eta * g, cfg)
                f_new = fval(p_new)
                halvings += 1
            g_new = _fd_gradient(fval, p_new, opts.oracle_fd_step)
            dp = p_new - p
            dg = g_new - g
            denom = -float(dp @ dg)
            eta = float(dp @ dp) / denom if denom > 1e-300 else eta * 2.0
            if not np.isfinite(eta) or eta <= 0.0:
                eta = 1e-2 * scale / (1.0 + np.linalg.norm(g_new))
            p, f, g = p_new, f_new, g_new
        return p

    p_a = run(stream(seed, "oracle-start", 0))
    p_b = run(stream(seed, "oracle-start", 1))
    if np.linalg.norm(p_a - p_b) > opts.oracle_tol * (1.0 + np.linalg.norm(p_a)):
        raise SolverError(
            f"oracle starts disagree by {np.linalg.norm(p_a - p_b):.3e}; "
            "the surrogate may not be strongly concave")
    best = p_a if fval(p_a) >= fval(p_b) else p_b
    return unpack(best, cfg)
