"""Federated learning over the UMAirComp link on a ridge-regression task.

Each round: local gradient descent, analog modulation, uplink superposition
with server noise, phase-network forwarding, noisy downlink and per-user
demodulation. Channels are redrawn every round.

Random streams are keyed as ``(seed, round, stage, replica)`` where stage 0
draws the round's channels, stage 1 the server noise and stage 2 + k the
downlink noise of user k.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .agp import AgpOptions
from .pam import PamOptions, SolveResult
from .rng import complex_gaussian, make_rng
from .system import ChannelSet, SystemConfig, TransceiverDesign, generate_channels, normalized_mse

STAGE_CHANNEL = 0
STAGE_UPLINK = 1
STAGE_DOWNLINK = 2


@dataclass(frozen=True, eq=False)
class QuadraticTask:
    """lambda_k(x) = ||A_k x - y_k||^2 / (2 n_k) + mu0/2 ||x||^2, weights n_k / n."""

    A: tuple
    y: tuple
    mu0: float = 0.0

    def __post_init__(self):
        A = tuple(np.asarray(a, dtype=float) for a in self.A)
        y = tuple(np.asarray(v, dtype=float).ravel() for v in self.y)
        if len(A) != len(y) or not A:
            raise ValueError("need one (A_k, y_k) pair per user")
        M = A[0].shape[1]
        if M % 2:
            raise ValueError(f"parameter dimension must be even, got {M}")
        for a, v in zip(A, y):
            if a.ndim != 2 or a.shape[1] != M or a.shape[0] != v.size or v.size == 0:
                raise ValueError("inconsistent data shapes")
        if self.mu0 < 0:
            raise ValueError("mu0 must be nonnegative")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "y", y)
        n = np.array([a.shape[0] for a in A], dtype=float)
        I = np.eye(M)
        Hk = np.stack([a.T @ a / a.shape[0] + self.mu0 * I for a in A])
        ck = np.stack([a.T @ v / a.shape[0] for a, v in zip(A, y)])
        w = n / n.sum()
        H = np.einsum("k,kij->ij", w, Hk)
        c = w @ ck
        ev = np.linalg.eigvalsh(H)
        if ev[0] <= 0:
            raise ValueError("global Hessian is not positive definite; increase mu0 or data")
        derived = {
            "n": n, "weights": w, "H_users": Hk, "c_users": ck, "H": H, "c": c,
            "mu": float(ev[0]), "L": float(ev[-1]),
            "L_users": float(max(np.linalg.eigvalsh(h)[-1] for h in Hk)),
            "const_users": np.array([v @ v / (2 * v.size) for v in y]),
        }
        derived["theta_star"] = np.linalg.solve(H, c)
        object.__setattr__(self, "_d", derived)

    @classmethod
    def synthetic(cls, K: int = 2, M: int = 8, n_per_user: int = 64, mu0: float = 0.1,
                  shift: float = 0.3, noise: float = 0.1, seed: int = 0) -> "QuadraticTask":
        """Gaussian features whose mean is shifted per user, linear targets plus noise."""
        rng = np.random.default_rng(seed)
        theta = rng.normal(size=M)
        A, y = [], []
        sizes = np.broadcast_to(np.asarray(n_per_user), (K,))
        for k in range(K):
            offset = shift * rng.normal(size=M)
            a = rng.normal(size=(int(sizes[k]), M)) / math.sqrt(M) + offset / math.sqrt(M)
            A.append(a)
            y.append(a @ theta + noise * rng.normal(size=a.shape[0]))
        return cls(A=tuple(A), y=tuple(y), mu0=mu0)

    @property
    def K(self) -> int:
        return len(self.A)

    @property
    def M(self) -> int:
        return self.A[0].shape[1]

    @property
    def alpha(self) -> np.ndarray:
        return self._d["weights"].copy()

    @property
    def mu(self) -> float:
        return self._d["mu"]

    @property
    def L(self) -> float:
        return self._d["L"]

    @property
    def L_users(self) -> float:
        return self._d["L_users"]

    @property
    def smoothness(self) -> float:
        """Smoothness constant valid for the global and every local loss."""
        return max(self.L, self.L_users)

    @property
    def hessian(self) -> np.ndarray:
        return self._d["H"].copy()

    @property
    def theta_star(self) -> np.ndarray:
        return self._d["theta_star"].copy()

    def local_grad(self, k: int, x) -> np.ndarray:
        return self._d["H_users"][k] @ x - self._d["c_users"][k]

    def local_loss(self, k: int, x) -> float:
        a, v = self.A[k], self.y[k]
        r = a @ x - v
        return float(r @ r / (2 * v.size) + 0.5 * self.mu0 * (x @ x))

    def loss(self, x) -> float:
        """Global loss sum_k alpha_k lambda_k(x)."""
        return float(sum(w * self.local_loss(k, x) for k, w in enumerate(self._d["weights"])))

    def loss_quadratic(self, x) -> float:
        """Same loss through the closed form 0.5 x^T H x - c^T x + const."""
        d = self._d
        const = float(d["weights"] @ d["const_users"])
        return float(0.5 * x @ d["H"] @ x - d["c"] @ x + const)

    def grad(self, x) -> np.ndarray:
        return self._d["H"] @ x - self._d["c"]

    @property
    def loss_star(self) -> float:
        return self.loss(self._d["theta_star"])

    def local_optimum(self, k: int) -> np.ndarray:
        return np.linalg.solve(self._d["H_users"][k], self._d["c_users"][k])

    @property
    def gamma_heterogeneity(self) -> float:
        """Lambda* - sum_k alpha_k lambda_k*, exact."""
        lk = [self.local_loss(k, self.local_optimum(k)) for k in range(self.K)]
        return float(self.loss_star - self._d["weights"] @ np.array(lk))

    def user_hessian_max_eig(self, k: int) -> float:
        return float(np.linalg.eigvalsh(self._d["H_users"][k])[-1])


# ---------------------------------------------------------------- link primitives

def local_gd(x0, task, k: int, E: int, step) -> np.ndarray:
    """E full-gradient steps on user k's loss; ``step`` is a float or a callable of the step index."""
    x = np.array(x0, dtype=float)
    for tau in range(E):
        eps = step(tau) if callable(step) else step
        x = x - eps * task.local_grad(k, x)
    return x


def modulate(x, t: complex, eta: float) -> np.ndarray:
    """Pair consecutive entries into complex symbols scaled by t / sqrt(2 eta)."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    x = np.asarray(x, dtype=float)
    if x.size % 2:
        raise ValueError("parameter vector length must be even")
    return t * (x[0::2] + 1j * x[1::2]) / math.sqrt(2.0 * eta)


def demodulate(y, r: complex, eta: float) -> np.ndarray:
    if not eta > 0:
        raise ValueError("eta must be positive")
    z = r * np.asarray(y) * math.sqrt(2.0 * eta)
    out = np.empty(2 * z.size)
    out[0::2] = z.real
    out[1::2] = z.imag
    return out


def _stream(key: tuple, stage: int):
    seed, rnd, *rest = key
    return make_rng((seed, rnd, stage, *rest))


def transmit_round(S_all, design: TransceiverDesign, ch: ChannelSet, config: SystemConfig,
                   noise_key: tuple) -> np.ndarray:
    """Pass K x S symbol blocks through uplink, forwarding and downlink.

    ``noise_key`` is ``(seed, round[, replica])``; returns K x S received blocks.
    """
    S_all = np.atleast_2d(np.asarray(S_all, dtype=complex))
    S = S_all.shape[1]
    R = ch.H @ S_all + complex_gaussian(_stream(noise_key, STAGE_UPLINK), (config.N, S),
                                        config.sigma_b2)
    out = math.sqrt(config.gamma) * (ch.G.conj().T @ (design.F @ R))
    for k in range(config.K):
        out[k] += complex_gaussian(_stream(noise_key, STAGE_DOWNLINK + k), (S,), config.sigma_u2[k])
    return out


def target_global(local_params, alpha) -> np.ndarray:
    return np.asarray(alpha, dtype=float) @ np.asarray(local_params, dtype=float)


# ---------------------------------------------------------------- history

@dataclass
class FlHistory:
    scheme: str
    seed: int
    replica: int
    E: int
    step_rule: str = ""
    records: list = field(default_factory=list)
    final_params: np.ndarray | None = None
    final_loss: list = field(default_factory=list)

    def max_mse(self) -> np.ndarray:
        return np.array([max(r["mse_analytic"]) for r in self.records])

    def summary_rows(self) -> list:
        return [{"round": r["round"], "loss": float(np.mean(r["loss"])),
                 "max_mse_analytic": max(r["mse_analytic"]),
                 "max_err_realized": max(r["err_realized"]),
                 "scheme": self.scheme, "seed": self.seed} for r in self.records]

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps({"scheme": self.scheme, "seed": self.seed,
                                     "replica": self.replica, "E": self.E,
                                     "step_rule": self.step_rule, **r}) + "\n")
            fh.write(json.dumps({"final": True, "scheme": self.scheme, "seed": self.seed,
                                 "replica": self.replica, "E": self.E,
                                 "params": np.asarray(self.final_params).tolist(),
                                 "loss": self.final_loss}) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "FlHistory":
        with open(path) as fh:
            lines = [json.loads(s) for s in fh if s.strip()]
        head = lines[0]
        hist = cls(scheme=head["scheme"], seed=head["seed"], replica=head["replica"], E=head["E"],
                   step_rule=head.get("step_rule", ""))
        for d in lines:
            if d.get("final"):
                hist.final_params = np.asarray(d["params"])
                hist.final_loss = d["loss"]
            else:
                hist.records.append({k: v for k, v in d.items()
                                     if k not in ("scheme", "seed", "replica", "E", "step_rule")})
        return hist


SUMMARY_COLUMNS = ("round", "loss", "max_mse_analytic", "max_err_realized", "scheme", "seed")


def write_summary_csv(histories, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(SUMMARY_COLUMNS))
        w.writeheader()
        for h in histories:
            for row in h.summary_rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------- main loop

SchemeLike = str | Callable[[ChannelSet, SystemConfig], "TransceiverDesign | SolveResult"]


class FlError(RuntimeError):
    pass


def _solve(scheme: SchemeLike, ch, config, pam_opts, agp_opts) -> TransceiverDesign:
    if callable(scheme):
        out = scheme(ch, config)
    else:
        from .baselines import solve_scheme
        out = solve_scheme(scheme, ch, config, pam_opts, agp_opts)
    return out.design if isinstance(out, SolveResult) else out


def run_federated(task: QuadraticTask, config: SystemConfig, scheme: SchemeLike, R: int, E: int,
                  step, seed: int, replica: int = 0, eta_lag: bool = False,
                  pam_opts: PamOptions | None = None, agp_opts: AgpOptions | None = None,
                  x0=None, design_cache: dict | None = None,
                  record_params: bool = True) -> FlHistory:
    """Run R rounds; ``step`` is a float or a callable ``(round, local_step) -> step size``.

    ``design_cache`` maps round index to design so that noise replicas on the
    same channel draws reuse one optimizer run.
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    if E < 0:
        raise ValueError("E must be >= 0")
    if task.K != config.K or config.S * 2 != task.M:
        raise ValueError(f"task (K={task.K}, M={task.M}) does not match config (K={config.K}, S={config.S})")
    if not np.allclose(task.alpha, config.alpha, rtol=0, atol=1e-12):
        raise ValueError("config.alpha must equal the task's data-size weights")
    cache = {} if design_cache is None else design_cache
    name = scheme if isinstance(scheme, str) else getattr(scheme, "__name__", "custom")
    rule = getattr(step, "rule", "custom") if callable(step) else f"const:{float(step)!r}"
    hist = FlHistory(scheme=name, seed=int(seed), replica=int(replica), E=int(E), step_rule=rule)
    X = np.tile(np.zeros(task.M) if x0 is None else np.asarray(x0, dtype=float), (task.K, 1))
    eta_prev = None
    for i in range(R):
        loss = [task.loss(x) for x in X]
        step_i = (lambda tau, i=i: step(i, tau)) if callable(step) else step
        Xe = np.stack([local_gd(X[k], task, k, E, step_i) for k in range(task.K)])
        eta_now = float(np.mean(np.sum(Xe ** 2, axis=1)) / task.M)
        eta = eta_prev if (eta_lag and eta_prev is not None) else eta_now
        eta = max(eta, np.finfo(float).tiny)
        eta_prev = eta_now
        theta = target_global(Xe, task.alpha)
        if i not in cache:
            ch = generate_channels(config, (seed, i, STAGE_CHANNEL))
            try:
                cache[i] = (ch, _solve(scheme, ch, config, pam_opts, agp_opts))
            except Exception as exc:
                raise FlError(f"optimizer failed in round {i}: {exc}") from exc
        ch, design = cache[i]
        S_all = np.stack([modulate(Xe[k], design.t[k], eta) for k in range(task.K)])
        Y = transmit_round(S_all, design, ch, config, (seed, i, replica))
        X = np.stack([demodulate(Y[k], design.r[k], eta) for k in range(task.K)])
        if not np.all(np.isfinite(X)):
            raise FlError(f"non-finite parameters after round {i}")
        err = np.sum((X - theta[None, :]) ** 2, axis=1)
        mse = 2 * config.S * eta * normalized_mse(design, ch, config)
        rec = {"round": i, "eta": eta, "loss": loss, "err_realized": err.tolist(),
               "mse_analytic": mse.tolist()}
        if record_params:
            rec.update({"theta": theta.tolist(), "x_local": Xe.tolist()})
        hist.records.append(rec)
    hist.final_params = X
    hist.final_loss = [task.loss(x) for x in X]
    return hist


def run_replicas(task, config, scheme, R, E, step, seed, replicas: int, **kw) -> list:
    """Independent noise redraws over shared per-round channels and designs."""
    cache = kw.pop("design_cache", None)
    cache = {} if cache is None else cache
    return [run_federated(task, config, scheme, R, E, step, seed, replica=j, design_cache=cache, **kw)
            for j in range(replicas)]


def centralized_gd(task: QuadraticTask, x0, R: int, step: float) -> np.ndarray:
    x = np.array(x0, dtype=float)
    for _ in range(R):
        x = x - step * task.grad(x)
    return x
