"""Penalty alternating minimization (PAM) for the fully-connected phase network.

The outer loop alternates over F, r and t. The F-block splits vec(F) into
per-user copies u_k plus a unit-modulus copy z and runs closed-form block
updates on the quadratic-penalty problem; the t-block does the same with
per-(receiver, transmitter) copies xi_{k,j}.

Vectorization is column-major: ``f = F.reshape(-1, order="F")``.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .system import (
    ChannelSet,
    Structure,
    SystemConfig,
    TransceiverDesign,
    effective_gains,
    normalized_mse,
    power_ball_projection,
    unit_modulus_projection,
)


class SolverError(RuntimeError):
    """An optimizer produced a non-finite iterate."""


@dataclass(frozen=True)
class PamOptions:
    rho: float = 1.0
    N_max: int = 20
    M_max: int = 200
    Q_max: int = 200
    rel_tol: float = 1e-8
    # relative change of the penalized objective that ends an inner loop early; 0 runs the full budget
    inner_tol: float = 0.0
    continuation: bool = False

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if min(self.N_max, self.M_max, self.Q_max) < 1:
            raise ValueError("iteration counts must be >= 1")


@dataclass
class PamState:
    """Iterates of one inner F-loop.

    The per-user copies are kept in factored form: u_k equals ``F_u`` with
    its component along ``e_k`` replaced by the row ``x[k]``.
    """

    f: np.ndarray
    z: np.ndarray
    F_u: np.ndarray
    e: np.ndarray
    x: np.ndarray
    trace: list = field(default_factory=list)

    @property
    def u(self) -> np.ndarray:
        """Materialized K x N^2 array of split copies."""
        N = self.F_u.shape[0]
        out = np.empty((self.e.shape[1], N * N), dtype=complex)
        for k in range(self.e.shape[1]):
            ek = self.e[:, k]
            Uk = self.F_u + np.outer(ek, self.x[k] - ek.conj() @ self.F_u)
            out[k] = Uk.reshape(-1, order="F")
        return out


@dataclass
class SolveResult:
    design: TransceiverDesign
    objective: float
    trace: list
    inner: dict = field(default_factory=dict)


def vec(F):
    return np.asarray(F).reshape(-1, order="F")


def unvec(f, N):
    return np.asarray(f).reshape((N, N), order="F")


def _check_finite(arr, what, it):
    if not np.all(np.isfinite(arr)):
        raise SolverError(f"non-finite {what} at outer iteration {it}")


# ---------------------------------------------------------------- closed forms

def a_vectors(ch: ChannelSet, r, t, k: int) -> np.ndarray:
    """Columns a_{k,j} with a_{k,j}^H vec(F) = r_k g_k^H F h_j t_j."""
    g = ch.G[:, k]
    return np.stack([np.conj(r[k] * t[j]) * np.kron(ch.H[:, j].conj(), g)
                     for j in range(ch.K)], axis=1)


def update_u_dense(f, ch: ChannelSet, config: SystemConfig, r, t, rho: float, k: int):
    """Reference u_k update via an explicit N^2 x N^2 Cholesky solve."""
    N, K = config.N, config.K
    A = a_vectors(ch, r, t, k)
    g = ch.G[:, k]
    Gk = config.sigma_b2 * abs(r[k]) ** 2 * np.kron(np.eye(N), np.outer(g, g.conj()))
    M = A @ A.conj().T + Gk + (rho / K) * np.eye(N * N)
    rhs = A @ config.alpha + (rho / K) * np.asarray(f)
    return cho_solve(cho_factor(M), rhs)


def _u_rows(F, ch: ChannelSet, config: SystemConfig, r, t, rho: float):
    """Rows x_k (K x N) and unit directions e (N x K) of every split copy.

    Minimizes sum_j |a_{k,j}^H u - alpha_j|^2 + u^H G_k u + (rho/K)||u - f||^2,
    whose data terms only see g_k^H U, so the minimizer differs from F
    along e_k = g_k/||g_k|| alone.
    """
    K = config.K
    H, G = ch.H, ch.G
    gnorm = np.linalg.norm(G, axis=0)
    e = np.divide(G, gnorm, out=np.zeros_like(G), where=gnorm > 0)
    c = rho / K
    s = np.abs(r) ** 2 * gnorm ** 2
    d = s * config.sigma_b2 + c
    p = H @ (config.alpha * t)
    W0 = H * np.abs(t)[None, :]
    Q0 = W0.conj().T @ W0
    # y_k = r_k ||g_k|| p + c F^H e_k  (conjugate transpose of e_k^H R_k)
    Y = np.outer(p, r * gnorm) + c * (F.conj().T @ e)
    Z = W0.conj().T @ Y
    systems = d[:, None, None] * np.eye(K)[None] + s[:, None, None] * Q0[None]
    sol = np.linalg.solve(systems, Z.T[:, :, None])[:, :, 0]
    Xh = (Y - (W0 @ sol.T) * s[None, :]) / d[None, :]
    return Xh.conj().T, e


def update_u(f, ch: ChannelSet, config: SystemConfig, r, t, rho: float, k: int):
    """Closed-form u_k update (penalty rho/K), returned as a length-N^2 vector."""
    F = unvec(f, config.N)
    x, e = _u_rows(F, ch, config, np.asarray(r, complex), np.asarray(t, complex), rho)
    ek = e[:, k]
    return vec(F + np.outer(ek, x[k] - ek.conj() @ F))


def update_f(u, z):
    """f = ((1/K) sum_j u_j + z) / 2."""
    return 0.5 * (np.mean(np.asarray(u), axis=0) + np.asarray(z))


def update_z(f):
    return unit_modulus_projection(f)


def update_r(F, t, ch: ChannelSet, config: SystemConfig):
    """Per-user MMSE receive coefficient given F and t."""
    c0 = effective_gains(F, ch) * np.asarray(t)[None, :]
    gF = ch.G.conj().T @ F
    num = np.sum(config.alpha[None, :] * c0.conj(), axis=1)
    den = (np.sum(np.abs(c0) ** 2, axis=1) + config.sigma_b2 * np.sum(np.abs(gF) ** 2, axis=1)
           + config.sigma_u2 / config.gamma)
    zero = den <= 0
    if np.any(zero):
        warnings.warn(f"update_r: zero denominator for users {np.flatnonzero(zero).tolist()}; r set to 0")
    return np.divide(num, den, out=np.zeros(config.K, dtype=complex), where=~zero)


def update_xi(t, F, r, ch: ChannelSet, config: SystemConfig, rho: float):
    """Split transmitters xi[k, j], each the exact minimizer of its penalized term."""
    c = np.asarray(r)[:, None] * effective_gains(F, ch)
    return _xi_from_gains(c, np.asarray(t, complex), config.alpha, rho)


def _xi_from_gains(c, t, alpha, rho):
    return (c.conj() * alpha[None, :] + rho * t[None, :]) / (np.abs(c) ** 2 + rho)


def update_t(xi, P0: float):
    """Power-ball projection of the column means of xi."""
    return power_ball_projection(np.mean(np.asarray(xi), axis=0), P0)


# ---------------------------------------------------------------- inner loops

def _penalized_F(F_old, F_new, Z, x, e, ch, config, r, t, rho, project):
    gnorm = np.linalg.norm(ch.G, axis=0)
    xh = x @ ch.H
    data = (r * gnorm)[:, None] * xh * t[None, :] - config.alpha[None, :]
    phi = (np.sum(np.abs(data) ** 2, axis=1)
           + config.sigma_b2 * np.abs(r) ** 2 * gnorm ** 2 * np.sum(np.abs(x) ** 2, axis=1))
    D = F_old - F_new
    delta = x - e.conj().T @ F_old
    eD = e.conj().T @ D
    split = (np.sum(np.abs(D) ** 2) + 2 * np.real(np.sum(eD * delta.conj(), axis=1))
             + np.sum(np.abs(delta) ** 2, axis=1))
    total = phi.sum() + rho * split.mean()
    if project:
        total += rho * np.sum(np.abs(Z - F_new) ** 2)
    return float(total)


def _initial_penalized_F(F, ch, config, r, t):
    c = r[:, None] * effective_gains(F, ch) * t[None, :]
    gF = ch.G.conj().T @ F
    return float(np.sum(np.abs(c - config.alpha[None, :]) ** 2)
                 + config.sigma_b2 * np.sum(np.abs(r) ** 2 * np.sum(np.abs(gF) ** 2, axis=1)))


def f_block(F, ch, config, r, t, rho, M_max, project=True, inner_tol=0.0):
    """Inner F-loop; returns the new F and the per-sweep penalized objective."""
    F = np.array(F, dtype=complex)
    Z = F.copy()
    trace = [_initial_penalized_F(F, ch, config, r, t)]
    K = config.K
    for _ in range(M_max):
        x, e = _u_rows(F, ch, config, r, t, rho)
        delta = x - e.conj().T @ F
        u_mean = F + (e @ delta) / K
        F_new = 0.5 * (u_mean + Z) if project else u_mean
        Z_new = unit_modulus_projection(F_new) if project else F_new
        trace.append(_penalized_F(F, F_new, Z_new, x, e, ch, config, r, t, rho, project))
        F, Z = F_new, Z_new
        if inner_tol > 0 and abs(trace[-2] - trace[-1]) <= inner_tol * max(abs(trace[-2]), 1e-300):
            break
    return (Z if project else F), trace


def t_block(F, ch, config, r, t, rho, Q_max, inner_tol=0.0):
    """Inner t-loop over (xi, t); returns the new t and the penalized objective trace."""
    c = np.asarray(r)[:, None] * effective_gains(F, ch)
    alpha = config.alpha
    t = np.array(t, dtype=complex)
    xi = np.tile(t, (config.K, 1))

    def penalized(xi, t):
        return float(np.sum(np.abs(c * xi - alpha[None, :]) ** 2)
                     + rho * np.sum(np.abs(xi - t[None, :]) ** 2))

    trace = [penalized(xi, t)]
    for _ in range(Q_max):
        xi = _xi_from_gains(c, t, alpha, rho)
        t = update_t(xi, config.P0)
        trace.append(penalized(xi, t))
        if inner_tol > 0 and abs(trace[-2] - trace[-1]) <= inner_tol * max(abs(trace[-2]), 1e-300):
            break
    return t, trace


# ---------------------------------------------------------------- outer loop

def _objective(F, t, r, ch, config, structure):
    return float(np.max(normalized_mse(TransceiverDesign(F, t, r, structure), ch, config)))


def alternate(ch: ChannelSet, config: SystemConfig, opts: PamOptions,
              init: TransceiverDesign | None = None, project: bool = True) -> SolveResult:
    """Shared outer loop for PAM (``project=True``) and its digital relaxation."""
    ch.check(config)
    structure = Structure.FULLY_CONNECTED if project else Structure.DIGITAL
    if init is not None:
        init.check(config)
        F, t, r = np.array(init.F), np.array(init.t), np.array(init.r)
    else:
        F = np.ones((config.N, config.N), dtype=complex)
        t = np.full(config.K, np.sqrt(config.P0), dtype=complex)
        r = update_r(F, t, ch, config)

    t0 = time.perf_counter_ns()
    rows = []
    inner = {"F": [], "t": []}

    def record(it, block, F, t, r):
        obj = _objective(F, t, r, ch, config, structure)
        um = float(np.max(np.abs(np.abs(F) - 1.0))) if project else float("nan")
        rows.append({"outer_iter": it, "block": block, "objective": obj,
                     "max_unit_modulus_violation": um,
                     "elapsed_ns": time.perf_counter_ns() - t0})
        return obj

    best = (record(0, "init", F, t, r), F, t, r)
    prev = best[0]
    rho = opts.rho
    for it in range(1, opts.N_max + 1):
        F, tr = f_block(F, ch, config, r, t, rho, opts.M_max, project, opts.inner_tol)
        _check_finite(F, "F", it)
        inner["F"].append(tr)
        candidates = [(record(it, "F", F, t, r), F, t, r)]
        r = update_r(F, t, ch, config)
        _check_finite(r, "r", it)
        candidates.append((record(it, "r", F, t, r), F, t, r))
        t, tr = t_block(F, ch, config, r, t, rho, opts.Q_max, opts.inner_tol)
        _check_finite(t, "t", it)
        inner["t"].append(tr)
        obj = record(it, "t", F, t, r)
        candidates.append((obj, F, t, r))
        for cand in candidates:
            if cand[0] < best[0]:
                best = cand
        if opts.continuation:
            rho *= 10.0
        if abs(prev - obj) <= opts.rel_tol * max(abs(prev), 1e-300):
            break
        prev = obj

    obj, F, t, r = best
    design = TransceiverDesign(F=F, t=t, r=r, structure=structure)
    return SolveResult(design=design, objective=obj, trace=rows, inner=inner)


def pam_solve(ch: ChannelSet, config: SystemConfig, opts: PamOptions | None = None,
              init: TransceiverDesign | None = None) -> SolveResult:
    """Fully-connected UMAirComp design by penalty alternating minimization.

    Returns the best feasible design seen across outer blocks, so a warm
    start never ends worse than its initial point.
    """
    return alternate(ch, config, opts or PamOptions(), init=init, project=True)


PAM_CSV_COLUMNS = ("outer_iter", "block", "objective", "max_unit_modulus_violation", "elapsed_ns")


def write_diagnostics_csv(rows, path, columns=PAM_CSV_COLUMNS) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def with_options(opts: PamOptions, **changes) -> PamOptions:
    return replace(opts, **changes)
