"""Finite-horizon MDP environments and trajectory sampling.

All environments expose a vectorised ``reset_batch``/``step_batch`` pair so
that a whole batch of episodes advances in lockstep.  Each step reports two
rewards: the one used for training and the "default" reward used for
reporting (they only differ for the cliff walk with shaped reward).
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "MdpSpec",
    "Trajectory",
    "TrajectoryBatch",
    "CliffWalk",
    "CartPole",
    "ChainMDP",
    "cliff_walk_env",
    "cart_pole_env",
    "chain_mdp_env",
    "saddle_mdp_env",
    "random_chain_mdp",
    "make_env",
    "rollout",
    "rollout_batch",
    "write_traces",
    "read_traces",
]


@dataclass(frozen=True)
class MdpSpec:
    name: str
    n_actions: int
    horizon: int
    gamma: float
    r_max: float
    n_states: int | None = None
    obs_dim: int | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be a positive integer")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.r_max < 0:
            raise ValueError("r_max must be non-negative")

    @property
    def discrete(self) -> bool:
        return self.n_states is not None

    @property
    def return_bound(self) -> float:
        """M_r: a bound on |R| for every trajectory of length <= horizon."""
        if self.gamma == 1.0:
            return self.r_max * self.horizon
        finite = self.r_max * (1.0 - self.gamma ** self.horizon) / (1.0 - self.gamma)
        return min(self.r_max / (1.0 - self.gamma), finite)


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    gamma: float
    default_rewards: np.ndarray | None = None
    ret: float = field(init=False)

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1 or len(self.rewards) != len(self.actions):
            raise ValueError("trajectory needs len(states) == len(actions) + 1 == len(rewards) + 1")
        disc = self.gamma ** np.arange(len(self.rewards))
        object.__setattr__(self, "ret", float(np.dot(disc, self.rewards)))
        if self.default_rewards is None:
            object.__setattr__(self, "default_rewards", self.rewards)

    def __len__(self):
        return len(self.actions)

    @property
    def episode_return(self) -> float:
        """Undiscounted sum of default rewards (the reported metric)."""
        return float(np.sum(self.default_rewards))

    def to_json(self) -> dict:
        return {
            "states": np.asarray(self.states).tolist(),
            "actions": np.asarray(self.actions).tolist(),
            "rewards": np.asarray(self.rewards).tolist(),
            "default_rewards": np.asarray(self.default_rewards).tolist(),
            "gamma": self.gamma,
            "return": self.ret,
        }

    @classmethod
    def from_json(cls, row: dict) -> "Trajectory":
        return cls(
            states=np.asarray(row["states"]),
            actions=np.asarray(row["actions"], dtype=int),
            rewards=np.asarray(row["rewards"], dtype=float),
            gamma=float(row["gamma"]),
            default_rewards=np.asarray(row.get("default_rewards", row["rewards"]), dtype=float),
        )


@dataclass
class TrajectoryBatch:
    """A batch of episodes stored as padded arrays.

    Entries at time steps ``t >= lengths[i]`` are padding; rewards there are 0.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    default_rewards: np.ndarray
    lengths: np.ndarray
    gamma: float

    def __len__(self):
        return self.actions.shape[0]

    @property
    def step_mask(self) -> np.ndarray:
        return np.arange(self.actions.shape[1])[None, :] < self.lengths[:, None]

    @property
    def returns(self) -> np.ndarray:
        disc = self.gamma ** np.arange(self.rewards.shape[1])
        return self.rewards @ disc

    @property
    def episode_returns(self) -> np.ndarray:
        return self.default_rewards.sum(axis=1)

    def __getitem__(self, i: int) -> Trajectory:
        n = int(self.lengths[i])
        return Trajectory(
            states=self.states[i, : n + 1].copy(),
            actions=self.actions[i, :n].copy(),
            rewards=self.rewards[i, :n].copy(),
            gamma=self.gamma,
            default_rewards=self.default_rewards[i, :n].copy(),
        )

    def __iter__(self) -> Iterator[Trajectory]:
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory]) -> "TrajectoryBatch":
        if not trajs:
            raise ValueError("empty trajectory list")
        T = max(len(t) for t in trajs)
        n = len(trajs)
        s0 = np.asarray(trajs[0].states)
        states = np.zeros((n, T + 1) + s0.shape[1:], dtype=s0.dtype)
        actions = np.zeros((n, T), dtype=int)
        rewards = np.zeros((n, T))
        default = np.zeros((n, T))
        lengths = np.zeros(n, dtype=int)
        for i, tr in enumerate(trajs):
            k = len(tr)
            states[i, : k + 1] = tr.states
            states[i, k + 1:] = tr.states[-1]
            actions[i, :k] = tr.actions
            rewards[i, :k] = tr.rewards
            default[i, :k] = tr.default_rewards
            lengths[i] = k
        return cls(states, actions, rewards, default, lengths, trajs[0].gamma)


class CliffWalk:
    """4x12 cliff walk with the distance-shaped training reward.

    Actions: 0 up, 1 right, 2 down, 3 left. States are ``row * 12 + col``.
    Stepping into the cliff costs -100 and sends the agent back to the start
    without ending the episode; entering the goal pays 0 and ends it.
    """

    rows, cols = 4, 12
    start = (3, 0)
    goal = (3, 11)
    moves = np.array([[-1, 0], [0, 1], [1, 0], [0, -1]])

    def __init__(self, c: float = 0.5, horizon: int = 250):
        if c < 0:
            raise ValueError("shaping coefficient c must be >= 0")
        self.c = float(c)
        max_dist = (self.rows - 1) + (self.cols - 1)
        self.spec = MdpSpec(
            "cliff_walk", n_actions=4, horizon=horizon, gamma=1.0,
            r_max=100.0 + self.c * max_dist, n_states=self.rows * self.cols,
        )
        self.state_shape: tuple = ()
        self.state_dtype = int

    def index(self, row: int, col: int) -> int:
        return row * self.cols + col

    @property
    def start_state(self) -> int:
        return self.index(*self.start)

    @property
    def goal_state(self) -> int:
        return self.index(*self.goal)

    def is_cliff(self, rows, cols):
        return (rows == 3) & (cols >= 1) & (cols <= 10)

    def reset_batch(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.full(n, self.start_state, dtype=int)

    def step_batch(self, states, actions, rng):
        rows, cols = np.divmod(np.asarray(states), self.cols)
        d = self.moves[np.asarray(actions)]
        r = np.clip(rows + d[:, 0], 0, self.rows - 1)
        c = np.clip(cols + d[:, 1], 0, self.cols - 1)
        fell = self.is_cliff(r, c)
        r = np.where(fell, self.start[0], r)
        c = np.where(fell, self.start[1], c)
        done = (r == self.goal[0]) & (c == self.goal[1])
        default = np.where(fell, -100.0, np.where(done, 0.0, -1.0))
        dist = np.abs(r - self.goal[0]) + np.abs(c - self.goal[1])
        shaped = default - self.c * dist
        return r * self.cols + c, shaped, default, done


class CartPole:
    """Classic cart-pole (Euler integration), +1 reward per step, 2 actions."""

    gravity = 9.8
    masscart = 1.0
    masspole = 0.1
    length = 0.5  # half the pole length
    force_mag = 10.0
    tau = 0.02
    x_threshold = 2.4
    theta_threshold = 12 * 2 * math.pi / 360

    def __init__(self, horizon: int = 500, gamma: float = 0.99, init_state: Sequence[float] | None = None):
        self.spec = MdpSpec("cart_pole", n_actions=2, horizon=horizon, gamma=gamma, r_max=1.0, obs_dim=4)
        self.init_state = None if init_state is None else np.asarray(init_state, dtype=float)
        self.state_shape = (4,)
        self.state_dtype = float

    def reset_batch(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.init_state is not None:
            return np.tile(self.init_state, (n, 1))
        return rng.uniform(-0.05, 0.05, size=(n, 4))

    def step_batch(self, states, actions, rng):
        x, x_dot, th, th_dot = np.asarray(states, dtype=float).T
        force = np.where(np.asarray(actions) == 1, self.force_mag, -self.force_mag)
        cos, sin = np.cos(th), np.sin(th)
        total_mass = self.masspole + self.masscart
        pml = self.masspole * self.length
        temp = (force + pml * th_dot ** 2 * sin) / total_mass
        th_acc = (self.gravity * sin - cos * temp) / (
            self.length * (4.0 / 3.0 - self.masspole * cos ** 2 / total_mass)
        )
        x_acc = temp - pml * th_acc * cos / total_mass
        x = x + self.tau * x_dot
        x_dot = x_dot + self.tau * x_acc
        th = th + self.tau * th_dot
        th_dot = th_dot + self.tau * th_acc
        nxt = np.stack([x, x_dot, th, th_dot], axis=1)
        done = (np.abs(x) > self.x_threshold) | (np.abs(th) > self.theta_threshold)
        reward = np.ones(len(nxt))
        return nxt, reward, reward, done


class ChainMDP:
    """Small tabular MDP whose trajectory space can be enumerated exactly."""

    MAX_STATES, MAX_ACTIONS, MAX_HORIZON = 5, 3, 4

    def __init__(self, transitions, rewards, horizon: int, gamma: float = 1.0, start: int = 0):
        P = np.asarray(transitions, dtype=float)
        R = np.asarray(rewards, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError("transitions must have shape (nS, nA, nS)")
        nS, nA, _ = P.shape
        if R.shape == (nS, nA):
            R = np.repeat(R[:, :, None], nS, axis=2)
        if R.shape != P.shape:
            raise ValueError("rewards must have shape (nS, nA) or (nS, nA, nS)")
        if nS > self.MAX_STATES or nA > self.MAX_ACTIONS or horizon > self.MAX_HORIZON:
            raise ValueError(
                f"enumerable MDP limited to nS<={self.MAX_STATES}, nA<={self.MAX_ACTIONS}, T<={self.MAX_HORIZON}"
            )
        if np.any(P < 0) or not np.allclose(P.sum(axis=2), 1.0, atol=1e-12):
            raise ValueError("each transitions[s, a] must be a probability vector")
        self.P, self.R = P, R
        self.start = int(start)
        self.spec = MdpSpec(
            "chain", n_actions=nA, horizon=horizon, gamma=gamma,
            r_max=float(np.max(np.abs(R))) if R.size else 0.0, n_states=nS,
        )
        self.state_shape = ()
        self.state_dtype = int
        self._cum = np.cumsum(P, axis=2)

    def reset_batch(self, n, rng):
        return np.full(n, self.start, dtype=int)

    def step_batch(self, states, actions, rng):
        states = np.asarray(states)
        actions = np.asarray(actions)
        u = rng.random(len(states))
        cum = self._cum[states, actions]
        nxt = np.minimum((u[:, None] >= cum).sum(axis=1), self.P.shape[0] - 1)
        r = self.R[states, actions, nxt]
        return nxt, r, r, np.zeros(len(states), dtype=bool)

    def enumerate_paths(self, include_zero: bool = False):
        """Yield (states, actions, env_probability) for every length-T path.

        Order is lexicographic in (a_0, s_1, a_1, s_2, ...).
        """
        nS, nA, _ = self.P.shape
        T = self.spec.horizon
        for combo in itertools.product(range(nA), range(nS), repeat=T):
            actions = np.array(combo[0::2])
            nxt = np.array(combo[1::2])
            states = np.concatenate([[self.start], nxt])
            p = float(np.prod(self.P[states[:-1], actions, states[1:]]))
            if p > 0.0 or include_zero:
                yield states, actions, p

    def trajectory(self, states, actions) -> Trajectory:
        states = np.asarray(states)
        actions = np.asarray(actions)
        r = self.R[states[:-1], actions, states[1:]]
        return Trajectory(states, actions, r, self.spec.gamma)


def cliff_walk_env(c: float = 0.5, horizon: int = 250) -> CliffWalk:
    return CliffWalk(c=c, horizon=horizon)


def cart_pole_env(horizon: int = 500, gamma: float = 0.99, init_state=None) -> CartPole:
    return CartPole(horizon=horizon, gamma=gamma, init_state=init_state)


def chain_mdp_env(nS, nA, T, transitions, rewards, gamma=1.0, start=0) -> ChainMDP:
    env = ChainMDP(transitions, rewards, horizon=T, gamma=gamma, start=start)
    if env.P.shape[:2] != (nS, nA):
        raise ValueError(f"transition table shape {env.P.shape} does not match nS={nS}, nA={nA}")
    return env


def saddle_mdp_env() -> ChainMDP:
    """Two decisions, reward 1 iff both actions match.

    The first action sends the agent to state 1 or 2, which records it; the
    second action earns 1 if it repeats the first.  Paired with a policy
    that shares parameters between states 1 and 2 (see
    ``policies.stage_policy``), E[R] = pq + (1-p)(1-q) and theta = 0 is a
    strict saddle.
    """
    P = np.zeros((3, 2, 3))
    P[0, 0, 1] = 1.0
    P[0, 1, 2] = 1.0
    P[1, :, 1] = 1.0
    P[2, :, 2] = 1.0
    R = np.zeros((3, 2, 3))
    R[1, 0, :] = 1.0
    R[2, 1, :] = 1.0
    return ChainMDP(P, R, horizon=2, gamma=1.0)


def random_chain_mdp(rng: np.random.Generator, nS=3, nA=2, T=3, gamma=1.0) -> ChainMDP:
    """Random dense MDP with integer-valued rewards in [-2, 2]."""
    P = rng.dirichlet(np.ones(nS), size=(nS, nA))
    R = rng.integers(-2, 3, size=(nS, nA, nS)).astype(float)
    return ChainMDP(P, R, horizon=T, gamma=gamma)


def make_env(env_id: str, **kwargs):
    env_id = env_id.lower()
    if env_id in ("cliff_walk", "cliffwalk", "cliffwalking"):
        return cliff_walk_env(**kwargs)
    if env_id in ("cart_pole", "cartpole"):
        return cart_pole_env(**kwargs)
    if env_id == "saddle":
        return saddle_mdp_env()
    raise ValueError(f"unknown environment {env_id!r}")


def rollout_batch(env, policy, theta, n: int, rng) -> TrajectoryBatch:
    """Sample ``n`` episodes in lockstep under ``policy`` with parameters ``theta``."""
    rng = np.random.default_rng(rng)
    spec = env.spec
    T = spec.horizon
    state = env.reset_batch(n, rng)
    states = np.empty((n, T + 1) + env.state_shape, dtype=env.state_dtype)
    actions = np.zeros((n, T), dtype=int)
    rewards = np.zeros((n, T))
    default = np.zeros((n, T))
    lengths = np.full(n, T, dtype=int)
    active = np.ones(n, dtype=bool)
    states[:, 0] = state
    for t in range(T):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            states[:, t + 1:] = states[:, t: t + 1]
            break
        a = policy.sample(theta, state[idx], rng)
        nxt, r, r_default, done = env.step_batch(state[idx], a, rng)
        state = state.copy()
        state[idx] = nxt
        states[:, t + 1] = state
        actions[idx, t] = a
        rewards[idx, t] = r
        default[idx, t] = r_default
        ended = idx[done]
        lengths[ended] = t + 1
        active[ended] = False
    return TrajectoryBatch(states, actions, rewards, default, lengths, spec.gamma)


def rollout(env, policy, theta, rng_seed) -> Trajectory:
    return rollout_batch(env, policy, theta, 1, rng_seed)[0]


def write_traces(path, trajectories) -> None:
    """Write trajectories as JSON lines, one episode per line."""
    with open(path, "w") as fh:
        for tr in trajectories:
            fh.write(json.dumps(tr.to_json()) + "\n")


def read_traces(path) -> list[Trajectory]:
    with open(path) as fh:
        return [Trajectory.from_json(json.loads(line)) for line in fh if line.strip()]
