"""Comparison transceivers: eigen-beamforming variants with MMSE receivers."""
from __future__ import annotations

import logging

import numpy as np

from .model import ChannelRealization, SystemConfig, Transceiver

log = logging.getLogger(__name__)


def principal_eigenvector(A: np.ndarray) -> np.ndarray:
    """Unit-norm principal eigenvector of a Hermitian PSD matrix.

    Phase convention: the first component with nonnegligible magnitude is
    rotated to be real positive, so the result is deterministic.
    """
    _, vecs = np.linalg.eigh(A)
    x = vecs[:, -1]
    nrm = np.linalg.norm(x)
    idx = int(np.argmax(np.abs(x) > 1e-12 * nrm))
    ph = x[idx] / abs(x[idx])
    return x * np.conj(ph)


def _phase_align(x: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Rotate x so that <ref, x> is real nonnegative."""
    ip = complex(np.vdot(ref, x))
    if abs(ip) == 0.0:
        return x
    return x * (np.conj(ip) / abs(ip))


def mmse_receivers(v: np.ndarray, ch: ChannelRealization, cfg: SystemConfig):
    """Linear MMSE receive beamformers for a given transmit beamformer.

    u_s treats the random tag reflections as interference around the mean
    effective channel; u_k whitens the other tags' despread interference
    (despreading multiplies it by L) plus noise.
    """
    al = cfg.alpha_arr * cfg.Lambda
    W = np.einsum("kmn,m->kn", ch.h_hat.conj(), v)              # (K, N) h_hat_k^H v
    m0 = ch.H_d.conj().T @ v
    eye = np.eye(cfg.N)

    cov_s = cfg.sigma_w2 * eye + np.einsum("k,ki,kj->ij", al, W, W.conj())
    mean_ch = m0 + (np.sqrt(cfg.alpha_arr) * cfg.rho_arr) @ W
    u_s = np.linalg.solve(cov_s, mean_ch)

    u = np.empty((cfg.K, cfg.N), dtype=complex)
    for k in range(cfg.K):
        wk = al * cfg.L
        wk[k] = 0.0
        cov_k = cfg.sigma_w2 * eye + np.einsum("m,mi,mj->ij", wk, W, W.conj())
        u[k] = np.linalg.solve(cov_k, W[k])
    return u_s, u


def baseline1(ch: ChannelRealization, cfg: SystemConfig) -> Transceiver:
    """Full power on the dominant direct-link direction, MMSE receive."""
    v = np.sqrt(cfg.P_max) * principal_eigenvector(ch.H_d @ ch.H_d.conj().T)
    u_s, u = mmse_receivers(v, ch, cfg)
    return Transceiver(v=v, u_s=u_s, u=u)


def _superpose(ch: ChannelRealization, cfg: SystemConfig, tags) -> np.ndarray:
    """Equal-weight sum of the direct-link eigenvector and the given tags'."""
    e0 = principal_eigenvector(ch.H_d @ ch.H_d.conj().T)
    total = e0.copy()
    for k in tags:
        ek = principal_eigenvector(ch.h_hat[k] @ ch.h_hat[k].conj().T)
        total += _phase_align(ek, e0)
    nrm = np.linalg.norm(total)
    if nrm < 1e-12:
        log.warning("superposed beam degenerated; falling back to the direct-link direction")
        return np.sqrt(cfg.P_max) * e0
    return np.sqrt(cfg.P_max) * total / nrm


def baseline2(ch: ChannelRealization, cfg: SystemConfig) -> Transceiver:
    """Superposition of all K+1 principal directions, MMSE receive."""
    v = _superpose(ch, cfg, range(cfg.K))
    u_s, u = mmse_receivers(v, ch, cfg)
    return Transceiver(v=v, u_s=u_s, u=u)


def baseline3(ch: ChannelRealization, cfg: SystemConfig) -> Transceiver:
    """Schedule the strongest tag (Frobenius gain), superpose with the direct link."""
    gains = np.linalg.norm(ch.h_hat.reshape(cfg.K, -1), axis=1)
    k_star = int(np.argmax(gains))
    v = _superpose(ch, cfg, [k_star])
    u_s, u = mmse_receivers(v, ch, cfg)
    return Transceiver(v=v, u_s=u_s, u=u)
