"""Accelerated gradient projection (AGP) for the partially-connected network.

F is restricted to a rank-one product v w^H. The transmit factor w comes
from a minimum-norm problem; the receive factor v from a majorization
fixed point whose inner minimax weights b live on the probability simplex
and are found by a Nesterov-accelerated projected gradient method on a
smoothed objective.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax

from .pam import SolveResult, update_r
from .system import (
    ChannelSet,
    Structure,
    SystemConfig,
    TransceiverDesign,
    normalized_mse,
    power_ball_projection,
    unit_modulus_projection,
)


class DegenerateError(ValueError):
    """Gradient, Lipschitz constant or fixed-point start is undefined."""


@dataclass(frozen=True)
class AgpOptions:
    phi: float | str = "auto"
    eps: float = 1e-9
    max_fixed_point_iters: int = 200
    max_inner_iters: int = 5000
    fp_tol: float = 1e-8
    w_refine: bool = True
    w_refine_iters: int = 20
    w_tol: float = 1e-9
    # "scale": one common factor keeps every user aligned; "clip": per-user ball projection
    power_mode: str = "scale"
    # local max-min search over the phases of the projected factors (keeps the better point)
    phase_refine: bool = True

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if min(self.max_fixed_point_iters, self.max_inner_iters, self.w_refine_iters) < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.phi != "auto" and not float(self.phi) >= 0:
            raise ValueError("phi must be >= 0 or 'auto'")
        if self.power_mode not in ("scale", "clip"):
            raise ValueError(f"unknown power_mode {self.power_mode!r}")


@dataclass
class AgpState:
    v: np.ndarray
    w: np.ndarray
    b: np.ndarray
    c_m: list
    beta: float


@dataclass
class BSolution:
    b: np.ndarray
    value: float
    gap: float
    iters: int
    converged: bool


# ---------------------------------------------------------------- w-subproblem

def _w_norm_feasible(w, H, c):
    """Scale w up just enough that |h_k^H w| >= c_k for every k."""
    mag = np.abs(H.conj().T @ w)
    if np.any(mag == 0):
        return None
    return w * max(1.0, float(np.max(c / mag)))


def _dual_qp(Q, c, lam0, iters=500):
    """max c^T l - 0.5 l^T Q l over l >= 0 by projected gradient."""
    step = 1.0 / max(np.linalg.eigvalsh(Q)[-1], 1e-300)
    lam = lam0.copy()
    for _ in range(iters):
        new = np.maximum(lam + step * (c - Q @ lam), 0.0)
        if np.linalg.norm(new - lam) <= 1e-14 * max(np.linalg.norm(new), 1e-300):
            lam = new
            break
        lam = new
    return lam


def solve_w_detailed(ch: ChannelSet, config: SystemConfig, refine: bool = True,
                     iters: int = 20, tol: float = 1e-9):
    """Minimum-norm w with |w^H h_k| >= alpha_k / sqrt(P0); returns (w, info)."""
    H = ch.H
    N, K = H.shape
    c = config.alpha / math.sqrt(config.P0)
    if np.any(np.linalg.norm(H, axis=0) == 0):
        raise DegenerateError("an uplink channel is zero; its power constraint cannot be met")
    info = {"fallback": False, "residual": 0.0, "refine_sweeps": 0}
    A = H.conj().T
    rank = np.linalg.matrix_rank(A)
    if rank == K:
        w = np.linalg.lstsq(A, c.astype(complex), rcond=None)[0]
    else:
        gram = A @ A.conj().T
        delta = 1e-9 * np.real(np.trace(gram)) / K
        w = A.conj().T @ np.linalg.solve(gram + delta * np.eye(K), c.astype(complex))
        info["fallback"] = True
    info["residual"] = float(np.linalg.norm(A @ w - c))
    w = _w_norm_feasible(w, H, c)
    if w is None:
        raise DegenerateError("least-squares w is orthogonal to an uplink channel")
    norm0 = float(np.linalg.norm(w) ** 2)
    if refine:
        lam = np.zeros(K)
        for sweep in range(iters):
            theta = np.angle(A @ w)
            B = H * np.exp(1j * theta)[None, :]
            Q = 0.5 * np.real(B.conj().T @ B)
            lam = _dual_qp(Q, c, lam)
            cand = _w_norm_feasible(0.5 * (B @ lam), H, c)
            if cand is None:
                break
            old = np.linalg.norm(w) ** 2
            new = np.linalg.norm(cand) ** 2
            info["refine_sweeps"] = sweep + 1
            if new < old:
                w = cand
            if old - new <= tol * old:
                break
    info["initial_norm2"] = norm0
    info["norm2"] = float(np.linalg.norm(w) ** 2)
    return w, info


def solve_w(ch: ChannelSet, config: SystemConfig, refine: bool = True) -> np.ndarray:
    return solve_w_detailed(ch, config, refine=refine)[0]


# ---------------------------------------------------------------- simplex machinery

def simplex_projection(u) -> np.ndarray:
    """Euclidean projection onto {b >= 0, sum b = 1} by the sort-threshold rule."""
    u = np.asarray(u, dtype=float)
    s = np.sort(u)[::-1]
    css = np.cumsum(s) - 1.0
    idx = np.arange(1, u.size + 1)
    delta = idx[s - css / idx > 0][-1]
    return np.maximum(u - css[delta - 1] / delta, 0.0)


def smoothed_value_and_gradient(b, C, q, phi: float, beta: float):
    """Smoothed minimax objective 2 sqrt(beta) sqrt(phi^2 + |Cb|^2) - q^T b and its gradient."""
    b = np.asarray(b, dtype=float)
    Cb = np.asarray(C) @ b
    rad = math.sqrt(phi ** 2 + float(np.real(np.vdot(Cb, Cb))))
    if rad == 0.0:
        raise DegenerateError("phi = 0 and Cb = 0: gradient undefined, use phi > 0")
    sb = 2.0 * math.sqrt(beta)
    value = sb * rad - float(np.dot(q, b))
    grad = sb * np.real(np.asarray(C).conj().T @ Cb) / rad - np.asarray(q, dtype=float)
    return value, grad


def lipschitz_constant(C, phi: float, beta: float, K: int | None = None) -> float:
    """Gradient Lipschitz constant of the smoothed objective over the simplex."""
    C = np.asarray(C)
    K = C.shape[1] if K is None else K
    gram = C.conj().T @ C
    lmax = float(np.linalg.eigvalsh(np.real(gram))[-1])
    if lmax <= 0:
        return 0.0
    lmin = max(float(np.linalg.eigvalsh(gram)[0]), 0.0)
    if lmin <= 1e-13 * lmax:
        lmin = 0.0
    den = math.sqrt(phi ** 2 + lmin / K)
    if den == 0.0:
        raise DegenerateError("phi = 0 with rank-deficient C gives an infinite Lipschitz constant")
    return 2.0 * math.sqrt(beta) * lmax / den


def momentum_schedule(n: int, c0: float = 1.0) -> list:
    """c(0..n) with c(m) = (1 + sqrt(1 + 4 c(m-1)^2)) / 2."""
    c = [c0]
    for _ in range(n):
        c.append(0.5 * (1.0 + math.sqrt(1.0 + 4.0 * c[-1] ** 2)))
    return c


def solve_b_accelerated(C, q, phi: float, beta: float, eps: float = 1e-9,
                        max_iters: int = 5000, b0=None) -> BSolution:
    """Accelerated projected gradient on the simplex.

    Stops once the Frank-Wolfe gap, an upper bound on suboptimality for a
    convex objective, drops to eps.
    """
    C = np.asarray(C)
    q = np.asarray(q, dtype=float)
    K = q.size
    L = lipschitz_constant(C, phi, beta, K)
    if L == 0.0:
        b = np.zeros(K)
        b[int(np.argmax(q))] = 1.0
        val, _ = smoothed_value_and_gradient(b, C, q, phi, beta)
        return BSolution(b, val, 0.0, 0, True)
    b = simplex_projection(np.full(K, 1.0 / K) if b0 is None else b0)
    y = b.copy()
    c_prev = 1.0
    best = None
    for m in range(max_iters + 1):
        val, g = smoothed_value_and_gradient(b, C, q, phi, beta)
        gap = float(g @ b - g.min())
        if best is None or val < best.value:
            best = BSolution(b.copy(), val, gap, m, gap <= eps)
        if gap <= eps:
            return BSolution(b, val, gap, m, True)
        if m == max_iters:
            break
        _, gy = smoothed_value_and_gradient(y, C, q, phi, beta)
        b_new = simplex_projection(y - gy / L)
        c_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * c_prev ** 2))
        y = b_new + ((c_prev - 1.0) / c_next) * (b_new - b)
        b, c_prev = b_new, c_next
    best.iters = max_iters
    best.converged = False
    return best


def phi_min_objective(b, C, q, beta: float) -> float:
    """Unsmoothed objective 2 sqrt(beta) |Cb| - q^T b."""
    return 2.0 * math.sqrt(beta) * float(np.linalg.norm(np.asarray(C) @ b)) - float(np.dot(q, b))


# ---------------------------------------------------------------- fixed point on v

def auto_phi(G, beta: float) -> float:
    if np.linalg.matrix_rank(np.asarray(G)) == np.asarray(G).shape[1]:
        return 0.0
    return 0.1 / (2.0 * math.sqrt(beta))


def initial_v(G, sigma_u2, beta: float, seed=0) -> np.ndarray:
    sig = np.asarray(sigma_u2, dtype=float)
    weights = np.divide(1.0, sig, out=np.zeros_like(sig), where=sig > 0)
    if not np.any(weights):
        weights = np.ones_like(sig)
    s = np.asarray(G) @ weights
    n = np.linalg.norm(s)
    if n == 0 or np.all(np.abs(np.asarray(G).conj().T @ s) == 0):
        rng = np.random.default_rng(seed)
        s = rng.normal(size=G.shape[0]) + 1j * rng.normal(size=G.shape[0])
        n = np.linalg.norm(s)
    return math.sqrt(beta) * s / n


def maxmin_objective(v, G, sigma_u2) -> float:
    """max_k sigma_k^2 / |g_k^H v|^2 over users with nonzero noise."""
    sig = np.asarray(sigma_u2, dtype=float)
    act = sig > 0
    if not np.any(act):
        return 0.0
    gv2 = np.abs(np.asarray(G)[:, act].conj().T @ v) ** 2
    with np.errstate(divide="ignore"):
        return float(np.max(np.where(gv2 > 0, sig[act] / gv2, np.inf)))


def _entropy(b):
    p = b[b > 0]
    return float(-np.sum(p * np.log(p)))


@dataclass
class VSolution:
    v: np.ndarray
    b: np.ndarray
    trace: list = field(default_factory=list)
    converged: bool = False


def fixed_point_v(v0, G, sigma_u2, beta: float, opts: AgpOptions | None = None,
                  phi: float | None = None) -> VSolution:
    """Majorization fixed point v <- sqrt(beta) C(v) b* / |C(v) b*|.

    Users with zero noise never constrain the max and are dropped.
    C and q are divided by max(q) before the inner solve; this leaves the
    minimizer unchanged and makes eps a relative tolerance.
    """
    opts = opts or AgpOptions()
    G = np.asarray(G)
    sig = np.asarray(sigma_u2, dtype=float)
    act = sig > 0
    v = np.asarray(v0, dtype=complex)
    t0 = time.perf_counter_ns()
    if np.all(np.abs(G.conj().T @ v) == 0):
        raise DegenerateError("degenerate start, re-randomize v0")
    if np.linalg.norm(v) ** 2 > beta * (1 + 1e-9):
        raise ValueError("v0 violates the norm budget")
    if not np.any(act):
        return VSolution(math.sqrt(beta) * v / np.linalg.norm(v), np.full(G.shape[1], 1.0 / G.shape[1]),
                         converged=True)
    Ga = G[:, act]
    inv = 1.0 / sig[act]
    if phi is None:
        phi = auto_phi(Ga, beta) if opts.phi == "auto" else float(opts.phi)
    v = math.sqrt(beta) * v / np.linalg.norm(v)
    obj = maxmin_objective(v, G, sig)
    b = None
    trace = [{"fp_iter": 0, "inner_iters_used": 0, "max_min_objective": obj,
              "b_entropy": float("nan"), "elapsed_ns": time.perf_counter_ns() - t0}]
    converged = False
    for n in range(1, opts.max_fixed_point_iters + 1):
        gv = Ga.conj().T @ v
        q = np.abs(gv) ** 2 * inv
        s = float(q.max())
        if s == 0:
            raise DegenerateError("degenerate start, re-randomize v0")
        C = Ga * (gv * inv / s)[None, :]
        sol = solve_b_accelerated(C, q / s, phi / s, beta, opts.eps, opts.max_inner_iters, b0=b)
        Cb = C @ sol.b
        nrm = np.linalg.norm(Cb)
        if nrm == 0:
            break
        v_new = math.sqrt(beta) * Cb / nrm
        obj_new = maxmin_objective(v_new, G, sig)
        if obj_new > obj * (1 + 1e-12):
            # inexact inner solves can break MM descent; keep the last good point
            break
        b = sol.b
        step = np.linalg.norm(v_new - v) / np.linalg.norm(v)
        v, obj = v_new, obj_new
        trace.append({"fp_iter": n, "inner_iters_used": sol.iters, "max_min_objective": obj,
                      "b_entropy": _entropy(sol.b), "elapsed_ns": time.perf_counter_ns() - t0})
        if step < opts.fp_tol:
            converged = True
            break
    b_full = np.zeros(G.shape[1])
    if b is not None:
        b_full[act] = b
    return VSolution(v, b_full, trace, converged)


# ---------------------------------------------------------------- design recovery

def unprojected_design(v, w, ch: ChannelSet, config: SystemConfig) -> TransceiverDesign:
    """Rank-one design before unit-modulus projection; aligns every user exactly."""
    v = np.asarray(v, dtype=complex)
    w = np.asarray(w, dtype=complex)
    F = np.outer(v, w.conj())
    t = config.alpha / (w.conj() @ ch.H)
    r = 1.0 / (ch.G.conj().T @ v)
    return TransceiverDesign(F=F, t=t, r=r, structure=Structure.DIGITAL)


def recover_design(v, w, ch: ChannelSet, config: SystemConfig,
                   power_mode: str = "scale") -> TransceiverDesign:
    """Project the rank-one factors to unit modulus and rebuild t and r.

    ``power_mode="clip"`` projects each t_k onto the power ball separately;
    ``"scale"`` shrinks all t_k by one common factor so that the relative
    alignment between users survives.
    """
    ws = unit_modulus_projection(w)
    vs = unit_modulus_projection(v)
    F = np.outer(vs, ws.conj())
    d = ws.conj() @ ch.H
    blocked = d == 0
    t = np.divide(config.alpha, d, out=np.full(config.K, math.sqrt(config.P0), dtype=complex),
                  where=~blocked)
    if np.any(blocked):
        warnings.warn(f"alignment impossible for users {np.flatnonzero(blocked).tolist()}")
    if power_mode == "scale":
        peak = float(np.max(np.abs(t[~blocked]) ** 2)) if np.any(~blocked) else 0.0
        if peak > config.P0:
            t = np.where(blocked, t, t * math.sqrt(config.P0 / peak))
        t = power_ball_projection(t, config.P0)
    else:
        t = power_ball_projection(t, config.P0)
    r = update_r(F, t, ch, config)
    return TransceiverDesign(F=F, t=t, r=r, structure=Structure.PARTIALLY_CONNECTED,
                             info={"blocked_users": np.flatnonzero(blocked).tolist()})


def refine_phases(x0, A, c, temps=(0.1, 0.03, 0.01, 0.003), maxiter=200) -> np.ndarray:
    """Raise min_k |a_k^H x|^2 / c_k over unit-modulus x, starting from x0.

    Minimizes a log-sum-exp soft maximum of -log(|a_k^H x|^2 / c_k) over the
    phases with L-BFGS, tightening the temperature; each evaluation is O(KN).
    Returns whichever of x0 and the refined points has the largest minimum.
    """
    A = np.asarray(A)
    c = np.asarray(c, dtype=float)
    x0 = np.asarray(x0, dtype=complex)
    act = c > 0
    if not np.any(act):
        return x0
    A, c = A[:, act], c[act]

    def log_gains(th):
        x = np.exp(1j * th)
        y = A.conj().T @ x
        return np.log(np.abs(y) ** 2 / c), y, x

    th = np.angle(x0)
    with np.errstate(divide="ignore"):
        start = log_gains(th)[0].min()
    if not np.isfinite(start):
        return x0
    best, best_val = x0, start
    for tau in temps:
        def fun(th, tau=tau):
            g, y, x = log_gains(th)
            p = softmax(-g / tau)
            # d log|y_k|^2 / d theta_n = -2 Im(conj(y_k) conj(a_nk) x_n) / |y_k|^2
            J = -2.0 * np.imag(y.conj()[:, None] * A.conj().T * x[None, :]) / (np.abs(y) ** 2)[:, None]
            return tau * logsumexp(-g / tau), -(p @ J)

        with np.errstate(divide="ignore", invalid="ignore"):
            th = minimize(fun, th, jac=True, method="L-BFGS-B", options={"maxiter": maxiter}).x
            val = log_gains(th)[0].min()
        if np.isfinite(val) and val > best_val:
            best, best_val = np.exp(1j * th), val
    return best


# ---------------------------------------------------------------- driver

def agp_factors(ch: ChannelSet, config: SystemConfig, opts: AgpOptions | None = None):
    """Solve for the rank-one factors; returns (v, w, beta, VSolution, w info)."""
    opts = opts or AgpOptions()
    w, winfo = solve_w_detailed(ch, config, refine=opts.w_refine, iters=opts.w_refine_iters,
                                tol=opts.w_tol)
    beta = config.N ** 2 / float(np.linalg.norm(w) ** 2)
    v0 = initial_v(ch.G, config.sigma_u2, beta)
    vsol = fixed_point_v(v0, ch.G, config.sigma_u2, beta, opts)
    return vsol.v, w, beta, vsol, winfo


def agp_solve(ch: ChannelSet, config: SystemConfig, opts: AgpOptions | None = None) -> SolveResult:
    opts = opts or AgpOptions()
    ch.check(config)
    v, w, beta, vsol, winfo = agp_factors(ch, config, opts)
    if opts.phase_refine:
        w = refine_phases(unit_modulus_projection(w), ch.H, config.alpha ** 2)
        v = refine_phases(unit_modulus_projection(v), ch.G, config.sigma_u2)
    design = recover_design(v, w, ch, config, opts.power_mode)
    obj = float(np.max(normalized_mse(design, ch, config)))
    design.info.update({"beta": beta, "w": winfo, "fp_converged": vsol.converged})
    return SolveResult(design=design, objective=obj, trace=vsol.trace, inner={"b": vsol.b})


AGP_CSV_COLUMNS = ("fp_iter", "inner_iters_used", "max_min_objective", "b_entropy", "elapsed_ns")


def aligned_rank_one_design(ch: ChannelSet, config: SystemConfig,
                            opts: AgpOptions | None = None) -> TransceiverDesign:
    """AGP factors without projection: every effective gain equals alpha_j exactly."""
    v, w, *_ = agp_factors(ch, config, opts)
    return unprojected_design(v, w, ch, config)
