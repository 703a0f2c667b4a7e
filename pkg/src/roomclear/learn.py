"""Tabular Q-learning, replay buffer, a small numpy MLP and double DQN."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


def greedy_action(values, mask=None) -> int:
    """Argmax over valid actions, lowest id on ties."""
    values = np.asarray(values, dtype=float)
    if mask is None:
        return int(np.argmax(values))
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("no valid action")
    return int(np.argmax(np.where(mask, values, -np.inf)))


def epsilon_greedy(values, mask, epsilon: float, rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon {epsilon} outside [0, 1]")
    n = len(values)
    valid = np.flatnonzero(mask) if mask is not None else np.arange(n)
    if len(valid) == 0:
        raise ValueError("no valid action")
    if rng.random() < epsilon:
        return int(valid[rng.integers(len(valid))])
    return greedy_action(values, mask)


@dataclass
class EpsilonSchedule:
    start: float = 1.0
    end: float = 0.05
    decay_steps: int = 50_000
    step: int = 0

    def value(self, t: int | None = None) -> float:
        t = self.step if t is None else t
        if self.decay_steps <= 0 or t >= self.decay_steps:
            return self.end
        return self.start + (self.end - self.start) * t / self.decay_steps

    def next(self) -> float:
        eps = self.value()
        self.step += 1
        return eps


@dataclass
class Hyperparams:
    gamma: float = 0.99
    lr: float = 1e-3  # gradient step size
    alpha: float = 0.1  # tabular step size
    batch_size: int = 32
    capacity: int = 50_000
    target_update: int = 500
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay: int = 50_000
    hidden: tuple = (64, 64)
    grad_clip: float = 10.0

    def override(self, **kw) -> "Hyperparams":
        fields = asdict(self)
        for k, v in kw.items():
            if k not in fields:
                raise KeyError(f"unknown hyperparameter {k!r}")
            cur = fields[k]
            if isinstance(cur, tuple):
                v = tuple(int(t) for t in str(v).replace("x", ",").split(",") if t) if isinstance(v, str) else tuple(v)
            elif isinstance(cur, bool):
                v = str(v).lower() in ("1", "true", "yes") if isinstance(v, str) else bool(v)
            else:
                v = type(cur)(v)
            fields[k] = v
        return Hyperparams(**fields)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# -- tabular -----------------------------------------------------------------


class QTable:
    """Sparse Q(s, a) table; unvisited pairs read as 0."""

    def __init__(self, n_actions: int):
        self.n_actions = n_actions
        self.values: dict = {}
        self.visits: dict = {}

    def get(self, key, action: int) -> float:
        return self.values.get((key, action), 0.0)

    def row(self, key) -> np.ndarray:
        v = self.values
        return np.array([v.get((key, a), 0.0) for a in range(self.n_actions)])

    def __len__(self):
        return len(self.values)


def q_update(table: QTable, t, alpha: float, gamma: float) -> float:
    """One temporal-difference step toward ``r + gamma (1-d) max Q(s', .)``.

    Returns the TD error before the update.
    """
    target = t.r
    if not t.done:
        row = table.row(t.s_next)
        if t.next_mask is not None:
            row = np.where(t.next_mask, row, -np.inf)
        target += gamma * float(np.max(row))
    pair = (t.s, int(t.a))
    q = table.values.get(pair, 0.0)
    err = target - q
    table.values[pair] = q + alpha * err
    table.visits[pair] = table.visits.get(pair, 0) + 1
    return err


class TabularLearner:
    """Epsilon-greedy Q-table that learns from every pushed transition."""

    kind = "tabular"

    def __init__(self, n_actions: int, hp: Hyperparams, rng: np.random.Generator):
        self.table = QTable(n_actions)
        self.hp = hp
        self.rng = rng
        self.eps = EpsilonSchedule(hp.eps_start, hp.eps_end, hp.eps_decay)
        self.pushes = 0
        self.train_steps = 0
        self.frozen = False

    def act(self, key, mask=None, explore: bool = True) -> int:
        values = self.table.row(key)
        if not explore:
            return greedy_action(values, mask)
        return epsilon_greedy(values, mask, self.eps.next(), self.rng)

    def observe(self, t) -> None:
        if self.frozen:
            return
        self.pushes += 1
        q_update(self.table, t, self.hp.alpha, self.hp.gamma)
        self.train_steps += 1

    def dump(self) -> dict:
        rows = sorted(([list(k), a, v] for (k, a), v in self.table.values.items()), key=lambda r: (r[0], r[1]))
        return {"kind": "tabular", "n_actions": self.table.n_actions, "rows": rows}

    def load(self, data: dict) -> None:
        self.table = QTable(data["n_actions"])
        for key, a, v in data["rows"]:
            self.table.values[(tuple(key), int(a))] = float(v)


# -- replay ------------------------------------------------------------------


class ReplayBuffer:
    """Fixed-capacity ring of (s, a, r, s', done, next_mask) rows."""

    def __init__(self, capacity: int, obs_dim: int, n_actions: int):
        self.capacity = capacity
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.next_mask = np.ones((capacity, n_actions), dtype=bool)
        self.size = 0
        self.cursor = 0

    def push(self, s, a, r, s_next, done, next_mask=None) -> None:
        i = self.cursor
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        if s_next is not None:
            self.s_next[i] = s_next
        else:
            self.s_next[i] = 0.0
        self.done[i] = float(done)
        self.next_mask[i] = True if next_mask is None else next_mask
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> dict:
        """Uniform draw with replacement."""
        if self.size < n:
            raise ValueError(f"buffer holds {self.size} transitions, need {n}")
        idx = rng.integers(self.size, size=n)
        return {"s": self.s[idx], "a": self.a[idx], "r": self.r[idx], "s_next": self.s_next[idx], "done": self.done[idx], "next_mask": self.next_mask[idx], "idx": idx}


# -- network -----------------------------------------------------------------


class MLP:
    """Rectifier hidden layers, identity output."""

    def __init__(self, sizes, rng: np.random.Generator | None = None):
        self.sizes = tuple(int(s) for s in sizes)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MLP":
        net = MLP.__new__(MLP)
        net.sizes = self.sizes
        net.weights = [w.copy() for w in self.weights]
        net.biases = [b.copy() for b in self.biases]
        return net

    def copy_from(self, other: "MLP") -> None:
        for dst, src in zip(self.params, other.params):
            dst[...] = src

    def forward(self, x, cache: bool = False):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input width {x.shape[-1]} != {self.sizes[0]}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return (h, acts) if cache else h

    __call__ = forward

    def backward(self, acts, grad_out) -> list[np.ndarray]:
        """Parameter gradients given dLoss/dOutput, ordered like ``params``."""
        grads = [None] * (2 * len(self.weights))
        g = np.asarray(grad_out, dtype=float)
        for i in range(len(self.weights) - 1, -1, -1):
            inp = acts[i]
            if inp.ndim == 1:
                grads[2 * i] = np.outer(inp, g)
                grads[2 * i + 1] = g.copy()
            else:
                grads[2 * i] = inp.T @ g
                grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i].T) * (acts[i] > 0)
        return grads


def mlp_forward(net: MLP, x):
    return net.forward(x)


def mlp_backward(net: MLP, x, grad_out):
    _, acts = net.forward(x, cache=True)
    return net.backward(acts, grad_out)


def ddqn_target(batch: dict, online: MLP, target: MLP, gamma: float) -> np.ndarray:
    """``r + gamma (1-d) Q_target(s', argmax_a Q_online(s', a))`` over valid a."""
    if len(batch["r"]) == 0:
        raise ValueError("empty batch")
    q_online = online.forward(batch["s_next"])
    q_online = np.where(batch["next_mask"], q_online, -np.inf)
    best = np.argmax(q_online, axis=1)
    q_target = target.forward(batch["s_next"])
    boot = q_target[np.arange(len(best)), best]
    return batch["r"] + gamma * (1.0 - batch["done"]) * np.where(batch["done"] > 0, 0.0, boot)


class DDQNLearner:
    kind = "ddqn"

    def __init__(self, obs_dim: int, n_actions: int, hp: Hyperparams, rng: np.random.Generator):
        self.hp = hp
        self.rng = rng
        self.n_actions = n_actions
        self.online = MLP((obs_dim, *hp.hidden, n_actions), rng)
        self.target = self.online.copy()
        self.buffer = ReplayBuffer(hp.capacity, obs_dim, n_actions)
        self.eps = EpsilonSchedule(hp.eps_start, hp.eps_end, hp.eps_decay)
        self.pushes = 0
        self.train_steps = 0
        self.frozen = False
        self.last_loss = None

    def act(self, x, mask=None, explore: bool = True) -> int:
        if explore:
            eps = self.eps.next()
            if self.rng.random() < eps:
                valid = np.flatnonzero(mask) if mask is not None else np.arange(self.n_actions)
                return int(valid[self.rng.integers(len(valid))])
        return greedy_action(self.online.forward(x), mask)

    def observe(self, t) -> None:
        """Store a transition and, once warm, run one training step."""
        if self.frozen:
            return
        self.buffer.push(t.s, t.a, t.r, t.s_next, t.done, t.next_mask)
        self.pushes += 1
        if self.buffer.size >= self.hp.batch_size:
            self.train_step(self.buffer.sample(self.hp.batch_size, self.rng))

    def train_step(self, batch: dict) -> float:
        y = ddqn_target(batch, self.online, self.target, self.hp.gamma)
        q, acts = self.online.forward(batch["s"], cache=True)
        rows = np.arange(len(y))
        err = q[rows, batch["a"]] - y
        loss = float(np.mean(err**2))
        grad_out = np.zeros_like(q)
        grad_out[rows, batch["a"]] = 2.0 * err / len(y)
        grads = self.online.backward(acts, grad_out)
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        scale = self.hp.lr
        if self.hp.grad_clip and norm > self.hp.grad_clip:
            scale *= self.hp.grad_clip / norm
        for p, g in zip(self.online.params, grads):
            p -= scale * g
        self.train_steps += 1
        if self.train_steps % self.hp.target_update == 0:
            self.target.copy_from(self.online)
        self.last_loss = loss
        return loss

    def dump(self) -> dict:
        return {
            "kind": "ddqn",
            "sizes": list(self.online.sizes),
            "online": [p.ravel().tolist() for p in self.online.params],
            "target": [p.ravel().tolist() for p in self.target.params],
        }

    def load(self, data: dict) -> None:
        for net, key in ((self.online, "online"), (self.target, "target")):
            if list(net.sizes) != list(data["sizes"]):
                raise ValueError(f"checkpoint layer sizes {data['sizes']} != {list(net.sizes)}")
            for p, flat in zip(net.params, data[key]):
                p[...] = np.asarray(flat, dtype=np.float64).reshape(p.shape)


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, learners: dict, header: dict) -> None:
    """Text checkpoint: a JSON header line, then one JSON line per learner.

    Floats are written with ``repr`` precision so parameters round-trip
    exactly; arrays are flattened row-major.
    """
    head = {"format": "roomclear-checkpoint", "version": CHECKPOINT_VERSION, **header, "learners": sorted(learners)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for name in sorted(learners):
            fh.write(json.dumps({"name": name, **learners[name].dump()}) + "\n")


def read_checkpoint(path) -> tuple[dict, dict]:
    with open(path, encoding="utf-8") as fh:
        head = json.loads(fh.readline())
        if head.get("format") != "roomclear-checkpoint" or head.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
        body = {}
        for line in fh:
            if line.strip():
                entry = json.loads(line)
                body[entry.pop("name")] = entry
    return head, body
