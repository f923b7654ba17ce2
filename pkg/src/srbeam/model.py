"""System configuration, topology, channel generation and parameter packing.

All physical quantities are linear-scale SI units (watts, meters). dB/dBm
conversion happens once at config-load time (see ``srbeam.cli``), never here.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised when a configuration violates its invariants."""


# =========================================================
# Seeded random streams
# =========================================================
# Every randomized operation draws from a named substream keyed by
# (base seed, purpose, *indices).  Streams are independent of execution
# order, so parallel runs reproduce serial ones bit for bit.

def stream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Return the generator for substream (seed, purpose, indices)."""
    key = zlib.crc32(purpose.encode("ascii"))
    return np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed), spawn_key=(key, *map(int, indices)))
    )


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


# =========================================================
# Configuration records
# =========================================================

@dataclass(frozen=True)
class SystemConfig:
    """Physical and algorithmic scalars shared by all modules.

    Per-tag fields (alpha, rho, gamma0) are tuples of length K.
    """
    M: int                      # transmit antennas
    N: int                      # receive antennas
    K: int                      # tags
    L: int                      # spreading length (primary symbols per tag symbol)
    alpha: tuple                # reflection coefficient per tag, in [0, 1]
    rho: tuple                  # tag activity probability, in (0, 1)
    sigma_w2: float             # noise power, W
    P_max: float                # transmit power budget, W
    psi: float                  # barrier price parameter
    gamma0: tuple               # per-tag expected-SINR target, linear
    J: int                      # mini-batch size
    tau_v: float                # proximal constant, transmit block
    tau_u: float                # proximal constant, receive blocks
    eps_bar: float = 1e-3       # barrier clamp for gradient evaluation

    def __post_init__(self):
        problems = []
        for name in ("M", "N", "K", "L", "J"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("alpha", "rho", "gamma0"):
            vals = getattr(self, name)
            if len(vals) != self.K:
                problems.append(f"{name} must have length K={self.K}")
        if any(not (0.0 <= a <= 1.0) for a in self.alpha):
            problems.append("alpha entries must lie in [0, 1]")
        if any(not (0.0 < r < 1.0) for r in self.rho):
            problems.append("rho entries must lie in (0, 1)")
        if any(g <= 0.0 for g in self.gamma0):
            problems.append("gamma0 entries must be positive")
        for name in ("sigma_w2", "P_max", "psi", "tau_v", "tau_u", "eps_bar"):
            if getattr(self, name) <= 0.0:
                problems.append(f"{name} must be positive")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def alpha_arr(self) -> np.ndarray:
        return np.asarray(self.alpha, dtype=float)

    @property
    def rho_arr(self) -> np.ndarray:
        return np.asarray(self.rho, dtype=float)

    @property
    def gamma0_arr(self) -> np.ndarray:
        return np.asarray(self.gamma0, dtype=float)

    @property
    def Lambda(self) -> np.ndarray:
        """Tag-symbol variance rho*(1-rho), computed on demand."""
        r = self.rho_arr
        return r * (1.0 - r)

    @property
    def dim(self) -> int:
        """Length of the real parameter vector (stacked Re/Im of v, u_s, u_k)."""
        return 2 * self.M + 2 * self.N * (self.K + 1)


@dataclass(frozen=True)
class Topology:
    """Node placement and propagation constants (positions in meters)."""
    pt_pos: tuple               # primary transmitter (x, y)
    pr_pos: tuple               # primary receiver (x, y)
    tag_pos: tuple              # K tag positions ((x, y), ...)
    chi0: float                 # path-loss exponent, PT -> PR
    chi_k: float                # path-loss exponent, PT -> tag
    chi_bk: float               # path-loss exponent, tag -> PR
    G_T: float                  # PT antenna gain, linear
    G_R: float                  # PR antenna gain, linear
    G_Bk: float                 # tag antenna gain, linear
    lambda_c: float             # carrier wavelength, m

    def __post_init__(self):
        problems = []
        if self.G_T <= 0 or self.G_R <= 0 or self.G_Bk <= 0 or self.lambda_c <= 0:
            problems.append("gains and wavelength must be positive")
        pt = np.asarray(self.pt_pos, float)
        pr = np.asarray(self.pr_pos, float)
        if np.linalg.norm(pt - pr) <= 0:
            problems.append("PT and PR must not coincide")
        for i, tp in enumerate(self.tag_pos):
            tp = np.asarray(tp, float)
            if np.linalg.norm(pt - tp) <= 0 or np.linalg.norm(pr - tp) <= 0:
                problems.append(f"tag {i} coincides with PT or PR")
        if problems:
            raise ConfigError("; ".join(problems))

    def d_pt_pr(self) -> float:
        return float(np.linalg.norm(np.asarray(self.pt_pos, float) - np.asarray(self.pr_pos, float)))

    def d_pt_tag(self, k: int) -> float:
        return float(np.linalg.norm(np.asarray(self.pt_pos, float) - np.asarray(self.tag_pos[k], float)))

    def d_tag_pr(self, k: int) -> float:
        return float(np.linalg.norm(np.asarray(self.tag_pos[k], float) - np.asarray(self.pr_pos, float)))


def sample_topology(base: Topology, region: Sequence[Sequence[float]], K: int,
                    seed: int, index: int = 0) -> Topology:
    """Redraw the K tag positions uniformly inside ``region`` = ((x0,x1),(y0,y1)).

    Everything else is copied from ``base``.  Used by the experiment harness
    to randomize tag placement across channel realizations.
    """
    rng = stream(seed, "tagpos", index)
    (x0, x1), (y0, y1) = region
    xs = rng.uniform(x0, x1, size=K)
    ys = rng.uniform(y0, y1, size=K)
    return Topology(
        pt_pos=base.pt_pos, pr_pos=base.pr_pos,
        tag_pos=tuple((float(x), float(y)) for x, y in zip(xs, ys)),
        chi0=base.chi0, chi_k=base.chi_k, chi_bk=base.chi_bk,
        G_T=base.G_T, G_R=base.G_R, G_Bk=base.G_Bk, lambda_c=base.lambda_c,
    )


# =========================================================
# Path loss and channel generation
# =========================================================

def path_loss(d: float, chi: float, g_tx: float, g_rx: float, lambda_c: float) -> float:
    """Distance-dependent linear power gain lambda^2 g_tx g_rx / ((4 pi)^2 d^chi)."""
    if d <= 0:
        raise ValueError(f"distance must be positive, got {d}")
    if g_tx <= 0 or g_rx <= 0:
        raise ValueError("antenna gains must be positive")
    return (lambda_c ** 2) * g_tx * g_rx / ((4.0 * np.pi) ** 2 * d ** chi)


@dataclass(frozen=True)
class ChannelRealization:
    """One coherence block: direct-link matrix and cascaded tag matrices.

    H_d is M x N; h_hat[k] is the rank-one M x N cascade through tag k
    (PT->tag column vector times the conjugate transpose of the tag->PR
    vector, both path-loss scaled).
    """
    H_d: np.ndarray             # (M, N) complex
    h_hat: np.ndarray           # (K, M, N) complex

    def __post_init__(self):
        object.__setattr__(self, "H_d", _freeze(np.asarray(self.H_d, complex)))
        object.__setattr__(self, "h_hat", _freeze(np.asarray(self.h_hat, complex)))
        if not np.all(np.isfinite(self.H_d.view(float))) or not np.all(np.isfinite(self.h_hat.view(float))):
            raise ValueError("channel entries must be finite")

    @property
    def M(self) -> int:
        return self.H_d.shape[0]

    @property
    def N(self) -> int:
        return self.H_d.shape[1]

    @property
    def K(self) -> int:
        return self.h_hat.shape[0]


def _cn(rng: np.random.Generator, *shape: int) -> np.ndarray:
    """Standard circularly symmetric complex Gaussian CN(0, 1) entries."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def generate_channel(cfg: SystemConfig, topo: Topology, seed: int) -> ChannelRealization:
    """Draw one block-fading realization.

    H_d entries are i.i.d. CN(0, PL(d0)).  The PT->tag vector h_k has i.i.d.
    CN(0, PL_k) entries; the tag->PR vector g_k is deterministic given
    (seed, k): unit-modulus phases scaled by sqrt(PL_bk) per antenna, since
    that link is static and dominated by large-scale loss.  The cascade is
    h_hat[k] = h_k g_k^H.
    """
    if len(topo.tag_pos) != cfg.K:
        raise ConfigError(f"topology has {len(topo.tag_pos)} tags, config expects {cfg.K}")
    M, N, K = cfg.M, cfg.N, cfg.K

    pl_d = path_loss(topo.d_pt_pr(), topo.chi0, topo.G_T, topo.G_R, topo.lambda_c)
    rng_d = stream(seed, "chan-direct")
    H_d = np.sqrt(pl_d) * _cn(rng_d, M, N)

    h_hat = np.empty((K, M, N), dtype=complex)
    for k in range(K):
        pl_k = path_loss(topo.d_pt_tag(k), topo.chi_k, topo.G_T, topo.G_Bk, topo.lambda_c)
        pl_bk = path_loss(topo.d_tag_pr(k), topo.chi_bk, topo.G_Bk, topo.G_R, topo.lambda_c)
        h_k = np.sqrt(pl_k) * _cn(stream(seed, "chan-tag", k), M)
        # static tag->PR link: per-antenna sqrt(PL_bk) with fixed random phases
        phases = stream(seed, "chan-tagdir", k).uniform(0.0, 2.0 * np.pi, size=N)
        g_k = np.sqrt(pl_bk) * np.exp(1j * phases)
        h_hat[k] = np.outer(h_k, g_k.conj())
    return ChannelRealization(H_d=H_d, h_hat=h_hat)


def effective_channel(ch: ChannelRealization, b: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """h_eq(b) = H_d + sum_k sqrt(alpha_k) b_k h_hat[k]."""
    b = np.asarray(b)
    if b.shape != (cfg.K,):
        raise ValueError(f"tag-symbol vector must have shape ({cfg.K},), got {b.shape}")
    w = np.sqrt(cfg.alpha_arr) * b
    return ch.H_d + np.tensordot(w, ch.h_hat, axes=(0, 0))


# =========================================================
# Random system states
# =========================================================

@dataclass(frozen=True)
class RandomSample:
    """One draw of the random state: tag symbols b and primary symbols s."""
    b: np.ndarray               # (K,) in {0, 1}
    s: np.ndarray               # (L,) complex, CN(0, 1) entries

    def __post_init__(self):
        object.__setattr__(self, "b", _freeze(np.asarray(self.b, dtype=np.int64)))
        object.__setattr__(self, "s", _freeze(np.asarray(self.s, dtype=complex)))

    @property
    def s_norm2(self) -> float:
        return float(np.real(np.vdot(self.s, self.s)))


@dataclass(frozen=True)
class MiniBatch:
    """J independent RandomSample draws plus array views used by the optimizer."""
    samples: tuple

    # cached stacked views (derived, not independent state)
    b_mat: np.ndarray = field(init=False)       # (J, K)
    s_norm2: np.ndarray = field(init=False)     # (J,)

    def __post_init__(self):
        b = np.stack([smp.b for smp in self.samples])
        x = np.array([smp.s_norm2 for smp in self.samples])
        object.__setattr__(self, "b_mat", _freeze(b))
        object.__setattr__(self, "s_norm2", _freeze(x))

    @property
    def J(self) -> int:
        return len(self.samples)


def sample_states(cfg: SystemConfig, seed: int) -> MiniBatch:
    """Draw a mini-batch of J independent random states (seeded)."""
    rng = stream(seed, "states")
    b = (rng.random((cfg.J, cfg.K)) < cfg.rho_arr[None, :]).astype(np.int64)
    s = _cn(rng, cfg.J, cfg.L)
    return MiniBatch(samples=tuple(RandomSample(b=b[j], s=s[j]) for j in range(cfg.J)))


# =========================================================
# Transceiver and real parameter vector
# =========================================================

@dataclass(frozen=True)
class Transceiver:
    """Optimization variable: transmit beamformer v and receive beamformers.

    u_s decodes the primary stream; u[k] decodes tag k.
    """
    v: np.ndarray               # (M,) complex
    u_s: np.ndarray             # (N,) complex
    u: np.ndarray               # (K, N) complex

    def __post_init__(self):
        object.__setattr__(self, "v", _freeze(np.asarray(self.v, complex)))
        object.__setattr__(self, "u_s", _freeze(np.asarray(self.u_s, complex)))
        object.__setattr__(self, "u", _freeze(np.asarray(self.u, complex)))

    def with_v(self, v: np.ndarray) -> "Transceiver":
        return Transceiver(v=v, u_s=self.u_s, u=self.u)

    def with_u(self, u_s: np.ndarray, u: np.ndarray) -> "Transceiver":
        return Transceiver(v=self.v, u_s=u_s, u=u)

    def power(self) -> float:
        return float(np.real(np.vdot(self.v, self.v)))


def pack(theta: Transceiver) -> np.ndarray:
    """Stack [Re v, Im v, Re u_s, Im u_s, Re u_1, Im u_1, ..., Re u_K, Im u_K]."""
    parts = [theta.v.real, theta.v.imag, theta.u_s.real, theta.u_s.imag]
    for uk in theta.u:
        parts.append(uk.real)
        parts.append(uk.imag)
    return np.concatenate(parts)


def unpack(p: np.ndarray, cfg: SystemConfig) -> Transceiver:
    """Inverse of :func:`pack` for the dimensions in ``cfg``."""
    p = np.asarray(p, dtype=float)
    if p.shape != (cfg.dim,):
        raise ValueError(f"parameter vector must have shape ({cfg.dim},), got {p.shape}")
    M, N, K = cfg.M, cfg.N, cfg.K
    v = p[0:M] + 1j * p[M:2 * M]
    off = 2 * M
    u_s = p[off:off + N] + 1j * p[off + N:off + 2 * N]
    off += 2 * N
    u = np.empty((K, N), dtype=complex)
    for k in range(K):
        u[k] = p[off:off + N] + 1j * p[off + N:off + 2 * N]
        off += 2 * N
    return Transceiver(v=v, u_s=u_s, u=u)
