"""Training-loss bounds for the noisy federated loop and their empirical check.

Both bounds take L as the smoothness constant valid for the global and the
local losses and mu as the strong convexity of the global loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .fl import FlHistory, QuadraticTask


class HypothesisError(ValueError):
    """The run does not satisfy the hypotheses of the requested bound."""


@dataclass
class BoundReport:
    theorem: int
    bound: float
    gap_mean: float
    gap_ci_upper: float
    replicas: int
    verdict: str
    margin: float
    A: list = field(default_factory=list)
    transient: float = 0.0
    advisory: bool = False
    constants: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BoundReport":
        return cls(**json.loads(text))

    def table(self) -> str:
        rows = [("theorem", self.theorem), ("bound", f"{self.bound:.6g}"),
                ("transient", f"{self.transient:.6g}"), ("gap mean", f"{self.gap_mean:.6g}"),
                ("gap 95% CI upper", f"{self.gap_ci_upper:.6g}"), ("replicas", self.replicas),
                ("verdict", self.verdict + (" (advisory)" if self.advisory else "")),
                ("margin", f"{self.margin:.6g}")]
        rows += [(k, f"{v:.6g}" if isinstance(v, float) else v) for k, v in sorted(self.constants.items())]
        w = max(len(str(k)) for k, _ in rows)
        return "\n".join(f"{str(k):<{w}}  {v}" for k, v in rows)


def theorem1_coefficients(L: float, mu: float, alpha, R: int) -> np.ndarray:
    """A[i] = (L/2)(3 + 2 sum alpha^2)(1 - mu/L)^(R-1-i) for i = 0..R-1."""
    if not 0 < mu <= L:
        raise ValueError(f"need 0 < mu <= L, got mu={mu}, L={L}")
    if R < 1:
        raise ValueError("R must be >= 1")
    alpha = np.asarray(alpha, dtype=float)
    base = 0.5 * L * (3.0 + 2.0 * float(alpha @ alpha))
    return base * (1.0 - mu / L) ** np.arange(R - 1, -1, -1, dtype=float)


def _gap_stats(histories, task: QuadraticTask):
    """Per-replica worst-user gaps, returned as (mean, 95% CI upper, n) of the worst user."""
    gaps = np.array([[l - task.loss_star for l in h.final_loss] for h in histories])
    n = gaps.shape[0]
    mean = gaps.mean(axis=0)
    if n > 1:
        half = stats.t.ppf(0.975, n - 1) * gaps.std(axis=0, ddof=1) / math.sqrt(n)
    else:
        half = np.zeros_like(mean)
    k = int(np.argmax(mean + half))
    return float(mean[k]), float(mean[k] + half[k]), n


def _mean_max_mse(histories) -> np.ndarray:
    return np.mean([h.max_mse() for h in histories], axis=0)


def _as_list(histories):
    return [histories] if isinstance(histories, FlHistory) else list(histories)


def _verdict(bound, ci_upper):
    return ("holds" if ci_upper <= bound else "violated"), bound - ci_upper


def theorem1_bound(histories, task: QuadraticTask, x0=None, mse_scale: float = 1.0) -> BoundReport:
    """Bound on E[Lambda(x_k^R)] - Lambda* for E = 1 and step 1/L.

    The statement is asymptotic in R; the verdict compares against the bound
    plus the finite-R transient (1 - mu/L)^R (Lambda(x0) - Lambda*), and the
    result is flagged advisory when that transient is not negligible.
    """
    hs = _as_list(histories)
    L, mu = task.smoothness, task.mu
    for h in hs:
        if h.E != 1:
            raise HypothesisError(f"theorem 1 needs E = 1 (got E = {h.E}); use theorem2_bound")
        if not h.step_rule.startswith("const:") or \
                not math.isclose(float(h.step_rule[6:]), 1.0 / L, rel_tol=1e-9):
            raise HypothesisError(f"theorem 1 needs step 1/L = {1.0 / L!r}, run used {h.step_rule!r}")
    R = len(hs[0].records)
    A = theorem1_coefficients(L, mu, task.alpha, R)
    mse = _mean_max_mse(hs) * mse_scale
    bound = float(A @ mse)
    x0 = np.zeros(task.M) if x0 is None else np.asarray(x0, dtype=float)
    transient = (1.0 - mu / L) ** R * (task.loss(x0) - task.loss_star)
    mean, ci, n = _gap_stats(hs, task)
    verdict, margin = _verdict(bound + transient, ci)
    return BoundReport(theorem=1, bound=bound, gap_mean=mean, gap_ci_upper=ci, replicas=n,
                       verdict=verdict, margin=margin, A=A.tolist(), transient=float(transient),
                       advisory=bool(transient > 0.1 * bound),
                       constants={"L": L, "mu": mu, "R": R})


def theorem2_schedule(task: QuadraticTask, E: int):
    """Step size 2 / (mu (nu + i E + tau)) for round i and local step tau."""
    L, mu = task.smoothness, task.mu
    nu = max(8.0 * L / mu, float(E))

    def step(i, tau):
        return 2.0 / (mu * (nu + i * E + tau))

    step.rule = f"theorem2:E={E}"
    return step


def estimate_G(task: QuadraticTask, E: int, R: int, step, x0=None) -> float:
    """Gradient bound over a ball around theta* sized from a noiseless dry run."""
    theta = np.zeros(task.M) if x0 is None else np.asarray(x0, dtype=float)
    ts = task.theta_star
    far = float(np.linalg.norm(theta - ts))
    for i in range(R):
        locals_ = []
        for k in range(task.K):
            x = theta.copy()
            for tau in range(E):
                x = x - step(i, tau) * task.local_grad(k, x)
                far = max(far, float(np.linalg.norm(x - ts)))
            locals_.append(x)
        theta = task.alpha @ np.array(locals_)
    radius = 2.0 * far
    return max(float(np.linalg.norm(task.local_grad(k, ts))) + task.user_hessian_max_eig(k) * radius
               for k in range(task.K))


def theorem2_constants(L, mu, E, R, G, Gamma, max_mse):
    nu = max(8.0 * L / mu, float(E))
    C = 8.0 * E ** 2 * G ** 2 + 6.0 * L * Gamma + mu ** 2 * (nu + R * E) ** 2 / 4.0 * max_mse
    return nu, C


def theorem2_value(L, mu, E, R, G, Gamma, max_mse, dist2) -> float:
    nu, C = theorem2_constants(L, mu, E, R, G, Gamma, max_mse)
    return 2.0 * L * max(4.0 * C, mu ** 2 * nu * dist2) / (mu ** 2 * (R * E + nu))


def theorem2_bound(histories, task: QuadraticTask, E: int, G: float | None = None,
                   Gamma: float | None = None, x0=None) -> BoundReport:
    hs = _as_list(histories)
    expected = theorem2_schedule(task, E).rule
    for h in hs:
        if h.E != E or h.step_rule != expected:
            raise HypothesisError(f"theorem 2 needs the {expected!r} schedule; run used "
                                  f"{h.step_rule!r} with E={h.E}")
    L, mu = task.smoothness, task.mu
    R = len(hs[0].records)
    x0 = np.zeros(task.M) if x0 is None else np.asarray(x0, dtype=float)
    if G is None:
        G = estimate_G(task, E, R, theorem2_schedule(task, E), x0)
    if Gamma is None:
        Gamma = task.gamma_heterogeneity
    max_mse = float(np.max(_mean_max_mse(hs)))
    dist2 = float(np.sum((x0 - task.theta_star) ** 2))
    nu, C = theorem2_constants(L, mu, E, R, G, Gamma, max_mse)
    bound = theorem2_value(L, mu, E, R, G, Gamma, max_mse, dist2)
    mean, ci, n = _gap_stats(hs, task)
    verdict, margin = _verdict(bound, ci)
    return BoundReport(theorem=2, bound=bound, gap_mean=mean, gap_ci_upper=ci, replicas=n,
                       verdict=verdict, margin=margin,
                       constants={"nu": nu, "C": C, "Gamma": float(Gamma), "G": float(G),
                                  "L": L, "mu": mu, "E": E, "R": R, "max_mse": max_mse})
