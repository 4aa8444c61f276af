"""Physical system description for UMAirComp.

Holds the system/channel/design containers, Rayleigh channel generation,
the per-user model-estimation MSE, the minimax objective and feasibility
checks. User indices are zero-based throughout.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .rng import SeedLike, complex_gaussian, make_rng

RANK1_THRESHOLD = 1e-9
_UNIT_SNAP = 8 * np.finfo(float).eps


class DimensionError(ValueError):
    """Raised when array shapes disagree with the system configuration."""


def dbm_to_watt(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SystemConfig:
    """Antenna/user counts, powers (watts), noise levels and aggregation weights."""

    N: int
    K: int
    P0: float
    sigma_b2: float
    sigma_u2: np.ndarray
    alpha: np.ndarray
    pathloss: np.ndarray
    gamma: float = 1.0
    S: int = 1

    def __post_init__(self):
        if int(self.N) < 1 or int(self.K) < 1 or int(self.S) < 1:
            raise ValueError("N, K and S must be positive integers")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "S", int(self.S))
        for name in ("sigma_u2", "alpha", "pathloss"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (self.K,))
            object.__setattr__(self, name, _frozen_array(arr))
        if not self.P0 > 0:
            raise ValueError(f"P0 must be positive, got {self.P0}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.sigma_b2 < 0 or np.any(self.sigma_u2 < 0):
            raise ValueError("noise powers must be nonnegative")
        if np.any(self.pathloss <= 0):
            raise ValueError("pathloss factors must be positive")
        if np.any(self.alpha <= 0) or abs(self.alpha.sum() - 1.0) > 1e-9:
            raise ValueError("alpha must be positive and sum to one")

    @classmethod
    def from_physical(cls, N, K, p0_dbm=10.0, noise_dbm=-80.0, server_noise_dbm=None,
                      pathloss_db=-60.0, gamma=1.0, S=1, alpha=None) -> "SystemConfig":
        """Build a config from dB/dBm quantities (defaults: 10 dBm power, -80 dBm noise, -60 dB pathloss)."""
        if server_noise_dbm is None:
            server_noise_dbm = noise_dbm
        if alpha is None:
            alpha = np.full(K, 1.0 / K)
        return cls(
            N=N, K=K, P0=float(dbm_to_watt(p0_dbm)),
            sigma_b2=float(dbm_to_watt(server_noise_dbm)),
            sigma_u2=np.broadcast_to(dbm_to_watt(noise_dbm), (K,)),
            alpha=alpha,
            pathloss=np.broadcast_to(db_to_linear(pathloss_db), (K,)),
            gamma=gamma, S=S,
        )

    def replace(self, **changes) -> "SystemConfig":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return SystemConfig(**kw)

    def to_dict(self) -> dict:
        return {
            "N": self.N, "K": self.K, "S": self.S, "P0": self.P0, "gamma": self.gamma,
            "sigma_b2": self.sigma_b2, "sigma_u2": self.sigma_u2.tolist(),
            "alpha": self.alpha.tolist(), "pathloss": self.pathloss.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        return cls(**d)


@dataclass(frozen=True)
class ChannelSet:
    """Uplink ``H`` and downlink ``G`` channels; column k belongs to user k."""

    H: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        H = _frozen_array(self.H, complex)
        G = _frozen_array(self.G, complex)
        if H.ndim != 2 or H.shape != G.shape:
            raise DimensionError(f"H {H.shape} and G {G.shape} must be equal N x K matrices")
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(G))):
            raise ValueError("channel entries must be finite")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "G", G)

    @property
    def N(self) -> int:
        return self.H.shape[0]

    @property
    def K(self) -> int:
        return self.H.shape[1]

    def check(self, config: SystemConfig) -> None:
        if self.H.shape != (config.N, config.K):
            raise DimensionError(
                f"channel shape {self.H.shape} does not match (N={config.N}, K={config.K})")

    def to_json(self) -> str:
        def enc(M):
            return [[[z.real, z.imag] for z in row] for row in M]
        return json.dumps({"H": enc(self.H), "G": enc(self.G)})

    @classmethod
    def from_json(cls, text: str) -> "ChannelSet":
        d = json.loads(text)

        def dec(rows):
            a = np.asarray(rows, dtype=float)
            return a[..., 0] + 1j * a[..., 1]
        return cls(H=dec(d["H"]), G=dec(d["G"]))


class Structure(str, enum.Enum):
    FULLY_CONNECTED = "fully-connected"
    PARTIALLY_CONNECTED = "partially-connected"
    DIGITAL = "unconstrained-digital"
    IDENTITY = "identity"


@dataclass(frozen=True)
class TransceiverDesign:
    """Server phase network ``F`` plus per-user transmit ``t`` and receive ``r`` scalars."""

    F: np.ndarray
    t: np.ndarray
    r: np.ndarray
    structure: Structure
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "F", _frozen_array(self.F, complex))
        object.__setattr__(self, "t", _frozen_array(np.ravel(self.t), complex))
        object.__setattr__(self, "r", _frozen_array(np.ravel(self.r), complex))
        object.__setattr__(self, "structure", Structure(self.structure))
        if self.F.ndim != 2 or self.F.shape[0] != self.F.shape[1]:
            raise DimensionError(f"F must be square, got {self.F.shape}")
        if self.t.shape != self.r.shape:
            raise DimensionError(f"t {self.t.shape} and r {self.r.shape} differ in length")

    def check(self, config: SystemConfig) -> None:
        if self.F.shape != (config.N, config.N):
            raise DimensionError(f"F shape {self.F.shape} does not match N={config.N}")
        if self.t.shape != (config.K,):
            raise DimensionError(f"t/r length {self.t.shape[0]} does not match K={config.K}")

    def to_dict(self) -> dict:
        def enc(a):
            a = np.asarray(a)
            return np.stack([a.real, a.imag], axis=-1).tolist()
        return {"structure": self.structure.value, "F": enc(self.F),
                "t": enc(self.t), "r": enc(self.r)}

    @classmethod
    def from_dict(cls, d: dict) -> "TransceiverDesign":
        def dec(x):
            a = np.asarray(x, dtype=float)
            return a[..., 0] + 1j * a[..., 1]
        return cls(F=dec(d["F"]), t=dec(d["t"]), r=dec(d["r"]), structure=d["structure"])


def generate_channels(config: SystemConfig, seed: SeedLike) -> ChannelSet:
    """Draw i.i.d. Rayleigh channels, column k ~ CN(0, pathloss_k I_N); H before G."""
    rng = make_rng(seed)
    shape = (config.N, config.K)
    H = complex_gaussian(rng, shape, config.pathloss[None, :])
    G = complex_gaussian(rng, shape, config.pathloss[None, :])
    return ChannelSet(H=H, G=G)


def unit_modulus_projection(x):
    """Nearest unit-modulus point, entrywise; zero maps to 1.

    Entries already within a few ulp of unit modulus are returned untouched,
    which makes the projection exactly idempotent.
    """
    x = np.asarray(x, dtype=complex)
    mag = np.abs(x)
    z = np.where(mag > 0, np.exp(1j * np.angle(x)), 1.0 + 0.0j)
    return np.where(np.abs(mag - 1.0) <= _UNIT_SNAP, x, z)


def effective_gains(F, ch: ChannelSet) -> np.ndarray:
    """K x K matrix with entry [k, j] = g_k^H F h_j."""
    return ch.G.conj().T @ F @ ch.H


def _bracket_terms(design: TransceiverDesign, ch: ChannelSet, config: SystemConfig):
    design.check(config)
    ch.check(config)
    gains = effective_gains(design.F, ch)
    aligned = design.r[:, None] * gains * design.t[None, :]
    align = np.sum(np.abs(aligned - config.alpha[None, :]) ** 2, axis=1)
    gF = ch.G.conj().T @ design.F
    server = np.abs(design.r) ** 2 * np.sum(np.abs(gF) ** 2, axis=1)
    user = config.sigma_u2 * np.abs(design.r) ** 2
    return align, server, user


def normalized_mse(design: TransceiverDesign, ch: ChannelSet, config: SystemConfig) -> np.ndarray:
    """Per-user MSE divided by 2*S*eta, as a length-K array."""
    align, server, user = _bracket_terms(design, ch, config)
    return config.gamma * align + config.gamma * config.sigma_b2 * server + user


def mse_per_user(design: TransceiverDesign, ch: ChannelSet, config: SystemConfig,
                 k: int, eta: float = 1.0, S: int | None = None) -> float:
    """Expected squared error between user k's received model and the target model."""
    if not 0 <= k < config.K:
        raise IndexError(f"user index {k} out of range for K={config.K}")
    if not eta > 0:
        raise ValueError("eta must be positive")
    S = config.S if S is None else S
    return float(2 * S * eta * normalized_mse(design, ch, config)[k])


def max_mse_objective(design: TransceiverDesign, ch: ChannelSet, config: SystemConfig,
                      eta: float = 1.0, S: int | None = None) -> tuple[float, int]:
    """Worst-user MSE and the index of that user."""
    S = config.S if S is None else S
    per_user = 2 * S * eta * normalized_mse(design, ch, config)
    k = int(np.argmax(per_user))
    return float(per_user[k]), k


def max_normalized_mse(design, ch, config) -> float:
    return float(np.max(normalized_mse(design, ch, config)))


@dataclass(frozen=True)
class FeasibilityReport:
    unit_modulus: float
    rank1_residual: float | None
    power: float

    def ok(self, tol: float = 1e-9) -> bool:
        rank_ok = self.rank1_residual is None or self.rank1_residual <= RANK1_THRESHOLD
        return self.unit_modulus <= tol and self.power <= tol and rank_ok


def rank1_residual(F) -> float:
    s = np.linalg.svd(np.asarray(F), compute_uv=False)
    if s[0] == 0:
        return 0.0
    return float(s[1] / s[0]) if s.size > 1 else 0.0


def check_feasibility(design: TransceiverDesign, config: SystemConfig) -> FeasibilityReport:
    """Worst violation of each constraint of the design's declared structure.

    Only the phase-network structures carry the unit-modulus constraint;
    digital and identity designs report no violation for it.
    """
    if design.structure in (Structure.FULLY_CONNECTED, Structure.PARTIALLY_CONNECTED):
        um = float(np.max(np.abs(np.abs(design.F) - 1.0)))
    else:
        um = 0.0
    rank = rank1_residual(design.F) if design.structure == Structure.PARTIALLY_CONNECTED else None
    excess = np.abs(design.t) ** 2 - config.P0
    # a power exactly at the budget may land a few ulp above it after squaring
    excess[excess <= 4 * np.finfo(float).eps * config.P0] = 0.0
    power = float(np.max(excess))
    return FeasibilityReport(unit_modulus=um, rank1_residual=rank, power=power)


def power_ball_projection(x, P0: float):
    """Clip complex scalars to modulus sqrt(P0), keeping the phase."""
    x = np.asarray(x, dtype=complex)
    mag = np.abs(x)
    limit = np.sqrt(P0)
    scale = np.where(mag > limit, limit / np.where(mag > 0, mag, 1.0), 1.0)
    return x * scale
