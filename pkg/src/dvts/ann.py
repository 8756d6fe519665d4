"""Online users -> (cpu, ram) regression network with an anomaly-driven schedule.

One hidden layer of sigmoid units and two linear outputs, trained sample by
sample with backpropagation and momentum. Learning rate, momentum and epoch
count are recomputed for every sample from the sample counter, the recent
anomaly scores and how surprising the sample's error is.
"""

from __future__ import annotations

import copy
import math
from collections import deque
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

SNAPSHOT_VERSION = 1


class ModelCorrupted(RuntimeError):
    pass


def logistic(x: float) -> float:
    # split branches keep exp() from overflowing for large |x|
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class AnnModel:
    """Fully connected ``1 -> hidden -> 2`` network.

    Inputs are user counts divided by ``user_scale``. The previous update of
    every parameter is kept for the momentum term.
    """

    n_out = 2

    def __init__(
        self,
        hidden: int = 250,
        user_scale: float = 1000.0,
        seed: int = 0,
        init: str = "uniform",
        init_range: float = 0.1,
    ):
        rng = np.random.default_rng(seed)
        self.hidden = hidden
        self.user_scale = float(user_scale)
        if init == "uniform":
            self.w1 = rng.uniform(-init_range, init_range, hidden)
            self.b1 = rng.uniform(-init_range, init_range, hidden)
        elif init == "nguyen-widrow":
            # scaled inputs are expected in [0, 1]; spreads the sigmoid
            # transitions over that interval instead of stacking them at 0
            beta = 0.7 * hidden
            self.w1 = rng.uniform(0.0, beta, hidden)
            self.b1 = rng.uniform(-beta, beta, hidden)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.w2 = rng.uniform(-init_range, init_range, (hidden, self.n_out))
        self.b2 = rng.uniform(-init_range, init_range, self.n_out)
        self.zero_momentum()

    def zero_momentum(self) -> None:
        self.dw1 = np.zeros_like(self.w1)
        self.db1 = np.zeros_like(self.b1)
        self.dw2 = np.zeros_like(self.w2)
        self.db2 = np.zeros_like(self.b2)

    # parameter order shared by gradient checks and snapshots
    @property
    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def copy(self) -> "AnnModel":
        return copy.deepcopy(self)

    def _scale(self, users) -> np.ndarray:
        return np.asarray(users, dtype=float) / self.user_scale

    def forward(self, users) -> np.ndarray:
        """Vectorised prediction; returns shape ``(..., 2)``."""
        x = self._scale(users)
        h = _sigmoid(np.multiply.outer(x, self.w1) + self.b1)
        return h @ self.w2 + self.b2

    def predict(self, users: float) -> tuple[float, float]:
        cpu, ram = self.forward(users)
        return float(cpu), float(ram)

    def gradients(self, users: float, target) -> tuple[float, list[np.ndarray]]:
        """Loss ``0.5 * sum((out - target)^2)`` and its gradient for one sample."""
        x = float(users) / self.user_scale
        h = _sigmoid(self.w1 * x + self.b1)
        out = h @ self.w2 + self.b2
        err = out - np.asarray(target, dtype=float)
        g_w2 = np.outer(h, err)
        g_b2 = err
        dh = (self.w2 @ err) * h * (1.0 - h)
        g_w1 = dh * x
        g_b1 = dh
        return 0.5 * float(err @ err), [g_w1, g_b1, g_w2, g_b2]

    def step(self, users: float, target, lr: float, momentum: float) -> None:
        _, (g_w1, g_b1, g_w2, g_b2) = self.gradients(users, target)
        self.dw1 = momentum * self.dw1 - lr * g_w1
        self.db1 = momentum * self.db1 - lr * g_b1
        self.dw2 = momentum * self.dw2 - lr * g_w2
        self.db2 = momentum * self.db2 - lr * g_b2
        self.w1 += self.dw1
        self.b1 += self.db1
        self.w2 += self.dw2
        self.b2 += self.db2

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params)

    def to_dict(self) -> dict:
        return {
            "hidden": self.hidden,
            "user_scale": self.user_scale,
            "w1": self.w1.tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": self.b2.tolist(),
            "dw1": self.dw1.tolist(),
            "db1": self.db1.tolist(),
            "dw2": self.dw2.tolist(),
            "db2": self.db2.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnModel":
        m = cls.__new__(cls)
        m.hidden = int(d["hidden"])
        m.user_scale = float(d["user_scale"])
        for name in ("w1", "b1", "w2", "b2", "dw1", "db1", "dw2", "db2"):
            setattr(m, name, np.asarray(d[name], dtype=float))
        return m


def rmse(model: AnnModel, users: float, target) -> float:
    out = np.asarray(model.predict(users))
    return float(np.sqrt(np.sum((out - np.asarray(target, dtype=float)) ** 2)))


@dataclass
class TrainerState:
    lr: float = 0.001
    momentum: float = 0.9
    window: int = 10
    k: int = 0
    anomalies: deque = field(default_factory=deque)
    rmses: deque = field(default_factory=deque)
    min_users: int | None = None
    max_users: int | None = None
    lr_history: deque = field(default_factory=lambda: deque(maxlen=200))

    def __post_init__(self):
        self.anomalies = deque(self.anomalies, maxlen=self.window)
        self.rmses = deque(self.rmses, maxlen=self.window)

    @property
    def trained(self) -> bool:
        return self.k > 0

    def mean_rmse(self) -> float | None:
        if not self.rmses:
            return None
        return sum(self.rmses) / len(self.rmses)

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "momentum": self.momentum,
            "window": self.window,
            "k": self.k,
            "anomalies": list(self.anomalies),
            "rmses": list(self.rmses),
            "min_users": self.min_users,
            "max_users": self.max_users,
            "lr_history": list(self.lr_history),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerState":
        st = cls(
            lr=d["lr"],
            momentum=d["momentum"],
            window=d["window"],
            k=d["k"],
            anomalies=deque(d["anomalies"]),
            rmses=deque(d["rmses"]),
            min_users=d["min_users"],
            max_users=d["max_users"],
        )
        st.lr_history.extend(d.get("lr_history", []))
        return st


@dataclass(frozen=True)
class TrainOutcome:
    filtered: bool
    rmse_pre: float
    rmse_post: float
    lr_used: float = 0.0
    momentum_used: float = 0.0
    epochs_used: int = 0
    lr2: float = 0.0


def lr_schedule(state: TrainerState, anomaly: float, rmse_pre: float) -> tuple[float, float]:
    """First and second learning-rate approximations for the next sample.

    The next sample is number ``state.k + 1``. The anomaly product runs over
    this sample's score and the previous ``window - 1`` stored scores; slots
    never filled count as zero anomaly (factor 1).
    """
    k = state.k + 1
    lr1 = max(state.lr, logistic(-math.sqrt(k)))
    mean = state.mean_rmse()
    ratio = 1.0
    # exact comparison so a constant error never rounds to a ratio just above 1
    if mean and Fraction(rmse_pre) * len(state.rmses) > sum(map(Fraction, state.rmses)):
        ratio = max(1.0, rmse_pre / mean)
    recent = [anomaly] + list(state.anomalies)[::-1][: state.window - 1]
    boost = 1.0
    for an in recent:
        boost *= 2.0 * logistic(an)
    return lr1, lr1 * ratio * boost


def momentum_k(state: TrainerState, lr2: float) -> float:
    return min(state.momentum, state.lr / lr2)


def epochs_k(lr2: float, lr: float = 0.001) -> int:
    ratio = max(1.0, lr2 / lr)
    return int(math.floor(1.0 + math.log(ratio)))


def trial_and_select_lr(model: AnnModel, users: float, target, lr2: float, momentum: float, lr: float = 0.001) -> tuple[float, float]:
    """Try one update with ``lr2`` on a scratch copy; keep it only if it helps.

    Returns ``(chosen_lr, rmse_post_of_trial)``. ``model`` is untouched.
    """
    before = rmse(model, users, target)
    scratch = model.copy()
    scratch.step(users, target, lr2, momentum)
    after = rmse(scratch, users, target)
    return (lr2 if before > after else lr), after


def train(model: AnnModel, state: TrainerState, sample, anomaly: float, well_predicted: float = 0.01) -> TrainOutcome:
    """Train on one normalised sample (``users``, ``cpu_load``, ``ram_load``)."""
    users = sample.users
    target = (sample.cpu_load, sample.ram_load)
    pre = rmse(model, users, target)
    if pre < well_predicted:
        return TrainOutcome(filtered=True, rmse_pre=pre, rmse_post=pre)

    _, lr2 = lr_schedule(state, anomaly, pre)
    m_k = momentum_k(state, lr2)
    lr_k, _ = trial_and_select_lr(model, users, target, lr2, m_k, state.lr)
    e_k = epochs_k(lr2, state.lr)
    for _ in range(e_k):
        model.step(users, target, lr_k, m_k)
    if not model.is_finite():
        raise ModelCorrupted(f"non-finite weights after sample k={state.k + 1}")

    state.k += 1
    state.anomalies.append(float(anomaly))
    state.rmses.append(pre)
    state.lr_history.append(lr_k)
    state.min_users = users if state.min_users is None else min(state.min_users, users)
    state.max_users = users if state.max_users is None else max(state.max_users, users)
    return TrainOutcome(
        filtered=False,
        rmse_pre=pre,
        rmse_post=rmse(model, users, target),
        lr_used=lr_k,
        momentum_used=m_k,
        epochs_used=e_k,
        lr2=lr2,
    )


def snapshot(model: AnnModel, state: TrainerState) -> dict:
    return {"kind": "ann", "version": SNAPSHOT_VERSION, "model": model.to_dict(), "trainer": state.to_dict()}


def restore(snap: dict) -> tuple[AnnModel, TrainerState]:
    if snap.get("kind") != "ann" or snap.get("version") != SNAPSHOT_VERSION:
        raise ValueError("not a version-1 ANN snapshot")
    return AnnModel.from_dict(snap["model"]), TrainerState.from_dict(snap["trainer"])
