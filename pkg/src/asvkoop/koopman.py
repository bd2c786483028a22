"""Lifted-linear (Koopman-style) model learning for the vessel velocity
dynamics.

The model is a set {g(., theta), A, B, C}: a learned lifting
g(nu) = [nu; f(nu, theta)] that concatenates the raw velocity state with
features from a small tanh network, plus matrices such that

    g(nu[k+1]) ~= A g(nu[k]) + B a[k],        nu[k] ~= C g(nu[k]).

Training alternates a closed-form least-squares fit of (A, B, C) for the
current lifting parameters with gradient steps on the parameters while
(A, B, C) are held fixed.  The fit solves

    [A B] = Gbar pinv([G; U]),      C = X pinv(G)

with the pseudoinverses computed by SVD under a relative cutoff, which
requires the stacked data matrices to have full row rank (persistently
exciting data).  All randomness flows through an explicit generator, so
training is reproducible coordinate for coordinate.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

N_STATE = 3
N_INPUT = 2

#: returned models are shrunk to this spectral radius if the fit lands outside
SPECTRAL_RADIUS_CAP = 0.9995


class RankDeficient(RuntimeError):
    """Stacked data matrix does not have full row rank."""

    def __init__(self, message: str, smallest_sv: float = 0.0, required_rank: int = 0):
        super().__init__(message)
        self.smallest_sv = smallest_sv
        self.required_rank = required_rank


class Diverged(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class DataBatch:
    """Aligned state/input/successor columns from one collection run."""

    x: np.ndarray
    x_next: np.ndarray
    u: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.x_next = np.atleast_2d(np.asarray(self.x_next, dtype=float))
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        if not (self.x.shape[1] == self.x_next.shape[1] == self.u.shape[1]):
            raise ValueError("x, x_next, u must share the column count")
        if self.x.shape[1] < 1:
            raise ValueError("batch must contain at least one column")
        if self.x.shape[0] != self.x_next.shape[0]:
            raise ValueError("x and x_next must share the row count")

    @property
    def beta(self) -> int:
        return self.x.shape[1]

    def columns(self, idx: np.ndarray) -> "DataBatch":
        return DataBatch(self.x[:, idx], self.x_next[:, idx], self.u[:, idx], dict(self.meta))

    def split(self, val_fraction: float, rng: np.random.Generator) -> tuple["DataBatch", "DataBatch"]:
        perm = rng.permutation(self.beta)
        n_val = max(1, int(round(val_fraction * self.beta))) if val_fraction > 0 else 0
        if n_val >= self.beta:
            raise ValueError("validation split leaves no training columns")
        if n_val == 0:
            return self.columns(perm), self.columns(perm[:0])
        return self.columns(perm[:-n_val]), self.columns(perm[-n_val:])

    def save(self, path: str) -> None:
        np.savez(
            path,
            x=self.x,
            x_next=self.x_next,
            u=self.u,
            meta=json.dumps(self.meta),
        )

    @staticmethod
    def load(path: str) -> "DataBatch":
        data = np.load(path, allow_pickle=False)
        meta = json.loads(str(data["meta"])) if "meta" in data else {}
        return DataBatch(data["x"], data["x_next"], data["u"], meta)


class LiftingNetwork:
    """Feedforward tanh network producing the learned lift features.

    The lift output is [nu; f(z)] with z the per-channel normalized
    state, so the raw state is always recoverable by a linear map.  With
    ``n_features == 0`` the lift is the identity and there are no
    parameters.
    """

    def __init__(
        self,
        hidden: tuple[int, ...] = (16, 16),
        n_features: int = 13,
        mu: np.ndarray | None = None,
        sigma: np.ndarray | None = None,
    ):
        self.hidden = tuple(int(h) for h in hidden)
        self.n_features = int(n_features)
        self.mu = np.zeros(N_STATE) if mu is None else np.asarray(mu, dtype=float)
        self.sigma = np.ones(N_STATE) if sigma is None else np.asarray(sigma, dtype=float)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        if self.n_features > 0:
            sizes = [N_STATE, *self.hidden, self.n_features]
            for n_in, n_out in zip(sizes[:-1], sizes[1:]):
                self.weights.append(np.zeros((n_out, n_in)))
                self.biases.append(np.zeros(n_out))

    @property
    def r_lift(self) -> int:
        return N_STATE + self.n_features

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def init_params(self, rng: np.random.Generator) -> None:
        for i, w in enumerate(self.weights):
            scale = np.sqrt(2.0 / (w.shape[0] + w.shape[1]))
            self.weights[i] = scale * rng.standard_normal(w.shape)
            self.biases[i] = np.zeros(w.shape[0])

    def get_theta(self) -> np.ndarray:
        if not self.weights:
            return np.zeros(0)
        return np.concatenate(
            [w.ravel() for w in self.weights] + [b.ravel() for b in self.biases]
        )

    def set_theta(self, theta: np.ndarray) -> None:
        pos = 0
        for i, w in enumerate(self.weights):
            self.weights[i] = theta[pos : pos + w.size].reshape(w.shape).copy()
            pos += w.size
        for i, b in enumerate(self.biases):
            self.biases[i] = theta[pos : pos + b.size].copy()
            pos += b.size
        if pos != theta.size:
            raise ValueError("theta length does not match the network shape")

    def normalize(self, nu_cols: np.ndarray) -> np.ndarray:
        return (nu_cols - self.mu[:, None]) / self.sigma[:, None]

    def _forward(self, z: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Features for normalized columns ``z`` plus the activation cache."""
        acts = [z]
        a = z
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            s = w @ a + b[:, None]
            a = np.tanh(s) if i < len(self.weights) - 1 else s
            acts.append(a)
        return a, acts

    def features(self, nu_cols: np.ndarray) -> np.ndarray:
        if self.n_features == 0:
            return np.zeros((0, nu_cols.shape[1]))
        out, _ = self._forward(self.normalize(nu_cols))
        return out

    def backprop(self, acts: list[np.ndarray], grad_out: np.ndarray) -> np.ndarray:
        """Gradient of sum(grad_out * features) w.r.t. the flat parameters."""
        grads_w = [np.zeros_like(w) for w in self.weights]
        grads_b = [np.zeros_like(b) for b in self.biases]
        delta = grad_out
        for i in reversed(range(len(self.weights))):
            grads_w[i] = delta @ acts[i].T
            grads_b[i] = delta.sum(axis=1)
            if i > 0:
                delta = (self.weights[i].T @ delta) * (1.0 - acts[i] ** 2)
        return np.concatenate(
            [g.ravel() for g in grads_w] + [g.ravel() for g in grads_b]
        ) if grads_w else np.zeros(0)

    def copy(self) -> "LiftingNetwork":
        net = LiftingNetwork(self.hidden, self.n_features, self.mu.copy(), self.sigma.copy())
        net.weights = [w.copy() for w in self.weights]
        net.biases = [b.copy() for b in self.biases]
        return net


def lift(net: LiftingNetwork, nu) -> np.ndarray:
    """Lift one velocity state to the model coordinate."""
    nu = np.asarray(nu, dtype=float).reshape(N_STATE, 1)
    return lift_batch(net, nu)[:, 0]

def lift_batch(net: LiftingNetwork, nu_cols: np.ndarray) -> np.ndarray:
    """Column-wise lift: stacks [nu; f(nu)] for each column."""
    nu_cols = np.atleast_2d(np.asarray(nu_cols, dtype=float))
    if net.n_features == 0:
        return nu_cols.copy()
    return np.vstack([nu_cols, net.features(nu_cols)])


def compute_abc(
    net: LiftingNetwork, batch: DataBatch, tol: float = 1e-10
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closed-form least-squares fit of the lifted dynamics and the
    reconstruction map for the current lifting parameters."""
    r = net.r_lift
    m = batch.u.shape[0]
    if batch.beta < r + m:
        raise RankDeficient(
            f"batch has {batch.beta} columns; need at least {r + m}",
            required_rank=r + m,
        )
    g = lift_batch(net, batch.x)
    g_next = lift_batch(net, batch.x_next)
    stacked = np.vstack([g, batch.u])
    sv = np.linalg.svd(stacked, compute_uv=False)
    if sv[-1] <= tol * sv[0]:
        raise RankDeficient(
            "stacked lift/input matrix is rank deficient "
            f"(smallest singular value {sv[-1]:.3e}); excitation insufficient",
            smallest_sv=float(sv[-1]),
            required_rank=r + m,
        )
    ab = g_next @ np.linalg.pinv(stacked, rcond=tol)
    c = batch.x @ np.linalg.pinv(g, rcond=tol)
    return ab[:, :r], ab[:, r:], c


def loss(
    net: LiftingNetwork,
    a: np.ndarray,
    b: np.ndarray,
    c: np.ndarray,
    batch: DataBatch,
    w: float,
) -> tuple[float, float, float]:
    """Weighted total of the dynamics and reconstruction residuals,
    each a squared Frobenius norm divided by the batch length."""
    g = lift_batch(net, batch.x)
    g_next = lift_batch(net, batch.x_next)
    e1 = g_next - (a @ g + b @ batch.u)
    e2 = batch.x - c @ g
    l1 = float(np.sum(e1 * e1)) / batch.beta
    l2 = float(np.sum(e2 * e2)) / batch.beta
    return w * l1 + (1.0 - w) * l2, l1, l2


def loss_gradient(
    net: LiftingNetwork,
    a: np.ndarray,
    b: np.ndarray,
    c: np.ndarray,
    batch: DataBatch,
    w: float,
) -> np.ndarray:
    """Gradient of the total loss w.r.t. the flat lifting parameters,
    with (A, B, C) held fixed.  Includes the successor-lift dependence."""
    if net.n_features == 0:
        return np.zeros(0)
    z = net.normalize(batch.x)
    z_next = net.normalize(batch.x_next)
    f, acts = net._forward(z)
    f_next, acts_next = net._forward(z_next)
    g = np.vstack([batch.x, f])
    g_next = np.vstack([batch.x_next, f_next])
    beta = batch.beta
    e1 = g_next - (a @ g + b @ batch.u)
    e2 = batch.x - c @ g
    d_g = -(2.0 * w / beta) * (a.T @ e1) - (2.0 * (1.0 - w) / beta) * (c.T @ e2)
    d_g_next = (2.0 * w / beta) * e1
    grad = net.backprop(acts, d_g[N_STATE:, :])
    grad += net.backprop(acts_next, d_g_next[N_STATE:, :])
    return grad


@dataclass
class TrainConfig:
    """Hyperparameters for the alternating fit."""

    w: float = 0.8
    epochs: int = 150
    learning_rate: float = 1e-3
    grad_steps: int = 20
    hidden: tuple[int, ...] = (16, 16)
    n_features: int = 13
    pinv_tol: float = 1e-10
    val_fraction: float = 0.2
    loss_increase_tol: float = 1e-12

    def __post_init__(self) -> None:
        if not 0.0 < self.w < 1.0:
            raise ValueError("loss weight w must lie in (0, 1)")
        if self.pinv_tol <= 0.0:
            raise ValueError("pseudoinverse tolerance must be positive")


@dataclass
class KoopmanModel:
    """Immutable trained model: lifting network plus (A, B, C)."""

    net: LiftingNetwork
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def r_lift(self) -> int:
        return self.net.r_lift

    def save(self, path: str) -> None:
        arrays = {
            "format_version": np.array([1]),
            "hidden": np.array(self.net.hidden, dtype=np.int64),
            "n_features": np.array([self.net.n_features], dtype=np.int64),
            "theta": self.net.get_theta(),
            "mu": self.net.mu,
            "sigma": self.net.sigma,
            "a": self.a,
            "b": self.b,
            "c": self.c,
            "meta": json.dumps(self.meta),
        }
        np.savez(path, **arrays)

    @staticmethod
    def load(path: str) -> "KoopmanModel":
        data = np.load(path, allow_pickle=False)
        net = LiftingNetwork(
            hidden=tuple(int(h) for h in data["hidden"]),
            n_features=int(data["n_features"][0]),
            mu=data["mu"],
            sigma=data["sigma"],
        )
        net.set_theta(data["theta"])
        return KoopmanModel(
            net=net,
            a=data["a"],
            b=data["b"],
            c=data["c"],
            meta=json.loads(str(data["meta"])),
        )


class _Adam:
    """Adaptive-moment gradient descent on a flat parameter vector."""

    def __init__(self, n: int, lr: float):
        self.lr = lr
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.beta1 = 0.9
        self.beta2 = 0.999
        self.eps = 1e-8

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train(
    batch: DataBatch,
    config: TrainConfig,
    rng: np.random.Generator,
    warm_start: KoopmanModel | None = None,
) -> KoopmanModel:
    """Alternating fit: each round refits (A, B, C) in closed form, then
    takes gradient steps on the lifting parameters with (A, B, C)
    frozen.  A round whose gradient phase raised the training loss is
    reverted (and the step size halved), so the training loss is
    non-increasing round over round.  Returns the round with the best
    validation loss."""
    if warm_start is not None:
        net = warm_start.net.copy()
    else:
        net = LiftingNetwork(config.hidden, config.n_features)
        mu = batch.x.mean(axis=1)
        sigma = np.maximum(batch.x.std(axis=1), 1e-6)
        net.mu, net.sigma = mu, sigma
        net.init_params(rng)

    train_split, val_split = batch.split(config.val_fraction, rng)
    eval_split = val_split if val_split.beta > 0 else train_split

    adam = _Adam(net.n_params, config.learning_rate)
    best: tuple[float, np.ndarray, tuple[np.ndarray, np.ndarray, np.ndarray]] | None = None
    history: list[float] = []

    for _ in range(config.epochs):
        a, b, c = compute_abc(net, train_split, config.pinv_tol)
        round_start, _, _ = loss(net, a, b, c, train_split, config.w)
        if not np.isfinite(round_start):
            raise Diverged("training loss is non-finite")
        theta_backup = net.get_theta()
        if net.n_params > 0:
            for _ in range(config.grad_steps):
                grad = loss_gradient(net, a, b, c, train_split, config.w)
                net.set_theta(adam.step(net.get_theta(), grad))
            after, _, _ = loss(net, a, b, c, train_split, config.w)
            if not np.isfinite(after):
                raise Diverged("training loss is non-finite")
            if after > round_start + config.loss_increase_tol:
                net.set_theta(theta_backup)
                adam.lr *= 0.5
                after = round_start
        else:
            after = round_start
        history.append(after)
        val_total, _, _ = loss(net, a, b, c, eval_split, config.w)
        if best is None or val_total < best[0]:
            best = (val_total, net.get_theta(), (a.copy(), b.copy(), c.copy()))

    assert best is not None
    net.set_theta(best[1])
    a, b, c = best[2]
    # One-step fits of slow dynamics can land a hair outside the unit
    # circle, which blows up the downstream regulator design; shrink the
    # whole spectrum marginally when that happens.
    rho = float(np.max(np.abs(np.linalg.eigvals(a))))
    clipped = rho > SPECTRAL_RADIUS_CAP
    if clipped:
        a = a * (SPECTRAL_RADIUS_CAP / rho)
    meta = {
        "val_loss": best[0],
        "train_loss_history": history,
        "beta": batch.beta,
        "trained_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "warm_start": warm_start is not None,
        "spectral_radius": rho,
        "spectral_clipped": clipped,
    }
    return KoopmanModel(net=net, a=a, b=b, c=c, meta=meta)


def predict(model: KoopmanModel, nu0, inputs: np.ndarray, horizon: int | None = None) -> np.ndarray:
    """Roll the lifted dynamics forward and reconstruct the states.

    The lift is evaluated once at nu0; subsequent steps evolve purely in
    the lifted space.  Returns the predicted states for steps 1..H as a
    (3, H) array.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    h_steps = inputs.shape[1] if horizon is None else int(horizon)
    if h_steps < 1:
        raise ValueError("horizon must be at least 1")
    if inputs.shape[1] < h_steps:
        raise ValueError("need one input column per prediction step")
    h = lift(model.net, nu0)
    out = np.zeros((N_STATE, h_steps))
    for k in range(h_steps):
        h = model.a @ h + model.b @ inputs[:, k]
        out[:, k] = model.c @ h
    return out
