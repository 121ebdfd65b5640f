"""Small cooperative Dec-POMDPs with enumerable joint actions.

Two games are provided. :class:`MatrixGame` is a one-shot normal-form game
with a constant observation. :class:`LatentStateMatrixGame` draws a hidden
state once per episode; every step each agent independently sees the true
state with probability ``rho`` and a uniformly random state otherwise, so the
exact posterior over the state given the joint history is available in closed
form (:func:`state_posterior`).
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PENALTY_PAYOFF = [[8.0, -12.0, -12.0], [-12.0, 0.0, 0.0], [-12.0, 0.0, 0.0]]


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    n_agents: int
    action_counts: tuple[int, ...]
    obs_dim: int
    state_dim: int
    horizon: int
    gamma: float = 0.99

    def __post_init__(self):
        if self.n_agents < 2:
            raise EnvError(f"n_agents must be >= 2, got {self.n_agents}")
        if len(self.action_counts) != self.n_agents:
            raise EnvError("action_counts must list one entry per agent")
        if any(a < 2 for a in self.action_counts):
            raise EnvError(f"every agent needs >= 2 actions, got {self.action_counts}")
        if self.horizon < 1:
            raise EnvError("horizon must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise EnvError(f"gamma must lie in [0, 1), got {self.gamma}")


@dataclass
class Transition:
    joint_obs: list[np.ndarray]
    state: np.ndarray
    joint_action: tuple[int, ...]
    reward: float
    next_joint_obs: list[np.ndarray]
    next_state: np.ndarray
    terminal: bool


def _check_actions(spec: EnvSpec, joint_action: Sequence[int]) -> tuple[int, ...]:
    if len(joint_action) != spec.n_agents:
        raise EnvError(f"expected {spec.n_agents} actions, got {len(joint_action)}")
    ja = tuple(int(a) for a in joint_action)
    for i, (a, n) in enumerate(zip(ja, spec.action_counts)):
        if not 0 <= a < n:
            raise EnvError(f"agent {i} action {a} out of range [0, {n})")
    return ja


@dataclass
class MatrixGame:
    """One-shot cooperative game: reward ``payoff[ja]``, then terminal."""

    payoff: np.ndarray
    gamma: float = 0.99
    seed: int | None = None
    spec: EnvSpec = field(init=False)

    def __post_init__(self):
        self.payoff = np.asarray(self.payoff, dtype=np.float64)
        if not np.all(np.isfinite(self.payoff)):
            raise EnvError("payoff must be finite everywhere")
        self.spec = EnvSpec(
            n_agents=self.payoff.ndim,
            action_counts=tuple(self.payoff.shape),
            obs_dim=1,
            state_dim=1,
            horizon=1,
            gamma=self.gamma,
        )
        self._t = 0
        self._done = True

    def _obs(self) -> list[np.ndarray]:
        return [np.zeros(1) for _ in range(self.spec.n_agents)]

    def reset(self, seed: int | None = None) -> tuple[list[np.ndarray], np.ndarray]:
        self._t = 0
        self._done = False
        return self._obs(), np.zeros(1)

    def step(self, joint_action: Sequence[int]) -> Transition:
        if self._done:
            raise EnvError("step() called on a finished episode; call reset()")
        ja = _check_actions(self.spec, joint_action)
        self._t += 1
        self._done = True
        return Transition(self._obs(), np.zeros(1), ja, float(self.payoff[ja]), self._obs(), np.zeros(1), True)


@dataclass
class LatentStateMatrixGame:
    """Repeated matrix game whose payoff table depends on an episode-static hidden state."""

    payoff_per_state: np.ndarray
    p0: np.ndarray
    rho: float
    horizon: int = 2
    gamma: float = 0.99
    seed: int | None = None
    spec: EnvSpec = field(init=False)

    def __post_init__(self):
        self.payoff_per_state = np.asarray(self.payoff_per_state, dtype=np.float64)
        self.p0 = np.asarray(self.p0, dtype=np.float64)
        if not np.all(np.isfinite(self.payoff_per_state)):
            raise EnvError("payoff must be finite everywhere")
        n_states = self.payoff_per_state.shape[0]
        if self.p0.shape != (n_states,) or np.any(self.p0 < 0) or abs(self.p0.sum() - 1.0) > 1e-9:
            raise EnvError("p0 must be a probability vector over the latent states")
        if not 0.0 <= self.rho <= 1.0:
            raise EnvError(f"rho must lie in [0, 1], got {self.rho}")
        if self.horizon < 2:
            raise EnvError("latent game horizon must be >= 2")
        n_agents = self.payoff_per_state.ndim - 1
        self.spec = EnvSpec(
            n_agents=n_agents,
            action_counts=tuple(self.payoff_per_state.shape[1:]),
            obs_dim=n_states + self.horizon,
            state_dim=n_states,
            horizon=self.horizon,
            gamma=self.gamma,
        )
        self.rng = np.random.default_rng(self.seed)
        self._state = 0
        self._t = 0
        self._done = True
        self.guesses: list[list[int]] = []

    @property
    def n_states(self) -> int:
        return self.payoff_per_state.shape[0]

    def _state_vec(self) -> np.ndarray:
        v = np.zeros(self.n_states)
        v[self._state] = 1.0
        return v

    def _observe(self) -> list[np.ndarray]:
        S = self.n_states
        out = []
        for i in range(self.spec.n_agents):
            # one uniform draw decides the channel, a second the noise symbol
            if self.rng.random() < self.rho:
                g = self._state
            else:
                g = int(self.rng.integers(S))
            self.guesses[i].append(g)
            o = np.zeros(self.spec.obs_dim)
            o[g] = 1.0
            o[S + self._t] = 1.0
            out.append(o)
        return out

    def reset(self, seed: int | None = None) -> tuple[list[np.ndarray], np.ndarray]:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self._state = int(self.rng.choice(self.n_states, p=self.p0))
        self._t = 0
        self._done = False
        self.guesses = [[] for _ in range(self.spec.n_agents)]
        return self._observe(), self._state_vec()

    def step(self, joint_action: Sequence[int]) -> Transition:
        if self._done:
            raise EnvError("step() called on a finished episode; call reset()")
        ja = _check_actions(self.spec, joint_action)
        state = self._state_vec()
        obs = [self._last_obs(i) for i in range(self.spec.n_agents)]
        reward = float(self.payoff_per_state[(self._state,) + ja])
        self._t += 1
        terminal = self._t >= self.horizon
        if terminal:
            self._done = True
            next_obs = [np.zeros(self.spec.obs_dim) for _ in range(self.spec.n_agents)]
        else:
            next_obs = self._observe()
        return Transition(obs, state, ja, reward, next_obs, self._state_vec(), terminal)

    def _last_obs(self, i: int) -> np.ndarray:
        o = np.zeros(self.spec.obs_dim)
        o[self.guesses[i][-1]] = 1.0
        o[self.n_states + self._t] = 1.0
        return o


Env = MatrixGame | LatentStateMatrixGame


def penalty_game(gamma: float = 0.99) -> MatrixGame:
    """The 3x3 non-monotonic cooperative penalty game (optimum 8 at (0, 0))."""
    return MatrixGame(np.array(PENALTY_PAYOFF), gamma=gamma)


def observed_state(obs: np.ndarray, n_states: int) -> int:
    return int(np.argmax(np.asarray(obs)[:n_states]))


def channel_likelihood(observed: int, state: int, rho: float, n_states: int) -> float:
    return rho * (observed == state) + (1.0 - rho) / n_states


def state_posterior(env: LatentStateMatrixGame, joint_history: Sequence[Sequence]) -> np.ndarray:
    """Exact Pr(s | joint history) for the latent game.

    ``joint_history[i]`` lists agent ``i``'s observed states, either as
    integers or as observation vectors (the state guess is read off the
    leading one-hot block). Channels are independent given the state.
    """
    S = env.n_states
    log_post = np.log(np.where(env.p0 > 0, env.p0, 1.0))
    alive = env.p0 > 0
    for h in joint_history:
        for o in h:
            g = int(o) if np.isscalar(o) else observed_state(o, S)
            lik = np.array([channel_likelihood(g, s, env.rho, S) for s in range(S)])
            alive &= lik > 0
            log_post = log_post + np.log(np.where(lik > 0, lik, 1.0))
    if not alive.any():
        raise EnvError("joint history has zero probability under the observation model")
    log_post = np.where(alive, log_post, -np.inf)
    post = np.exp(log_post - log_post.max())
    return post / post.sum()


def enumerate_posterior(env: LatentStateMatrixGame, joint_history: Sequence[Sequence[int]]) -> np.ndarray:
    """Brute-force posterior: marginalise the joint over every channel outcome.

    Each observation is produced by a (truthful?, noise symbol) pair; the
    outcome probabilities are enumerated explicitly and the ones reproducing
    the given history are summed. Used only as a test oracle.
    """
    S = env.n_states
    obs = [int(o) for h in joint_history for o in h]
    weights = np.zeros(S)
    for s in range(S):
        if env.p0[s] == 0:
            continue
        total = 0.0
        per_symbol = [(True, None, env.rho)] + [(False, k, (1 - env.rho) / S) for k in range(S)]
        for outcome in itertools.product(per_symbol, repeat=len(obs)):
            prob = 1.0
            ok = True
            for (truthful, k, pr), o in zip(outcome, obs):
                emitted = s if truthful else k
                if emitted != o:
                    ok = False
                    break
                prob *= pr
            if ok:
                total += prob
        weights[s] = env.p0[s] * total
    if weights.sum() == 0:
        raise EnvError("joint history has zero probability")
    return weights / weights.sum()


def env_from_dict(cfg: dict, seed: int | None = None) -> Env:
    kind = cfg.get("type")
    gamma = float(cfg.get("gamma", 0.99))
    if kind == "matrix":
        if "payoff" not in cfg:
            raise EnvError("matrix env needs 'payoff'")
        return MatrixGame(np.array(cfg["payoff"], dtype=np.float64), gamma=gamma, seed=seed)
    if kind == "latent":
        missing = [k for k in ("payoff_per_state", "rho", "p0") if k not in cfg]
        if missing:
            raise EnvError(f"latent env missing fields: {', '.join(missing)}")
        return LatentStateMatrixGame(
            np.array(cfg["payoff_per_state"], dtype=np.float64),
            np.array(cfg["p0"], dtype=np.float64),
            float(cfg["rho"]),
            horizon=int(cfg.get("horizon", 2)),
            gamma=gamma,
            seed=seed,
        )
    raise EnvError(f"unknown env type {kind!r} (expected 'matrix' or 'latent')")


def load_env(path: str | Path, seed: int | None = None) -> Env:
    with open(path) as fh:
        return env_from_dict(json.load(fh), seed=seed)
