"""Per-agent utility networks over fixed-length history windows."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autodiff import ParamStore, ShapeError, Tensor, expand_last, max_last_dim, slice_rows, sub
from .nets import init_mlp, mlp


class HistoryWindow:
    """Last ``k`` (observation, previous-action one-hot) pairs, zero-padded, oldest first."""

    def __init__(self, obs_dim: int, n_actions: int, k: int = 4):
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.k = k
        self.buf = np.zeros((k, obs_dim + n_actions))

    @property
    def feature_dim(self) -> int:
        return self.k * (self.obs_dim + self.n_actions)

    def push(self, obs: np.ndarray, prev_action: int | None = None) -> None:
        row = np.zeros(self.obs_dim + self.n_actions)
        row[: self.obs_dim] = obs
        if prev_action is not None:
            row[self.obs_dim + prev_action] = 1.0
        self.buf[:-1] = self.buf[1:]
        self.buf[-1] = row

    def features(self) -> np.ndarray:
        return self.buf.reshape(-1).copy()

    def copy(self) -> "HistoryWindow":
        w = HistoryWindow(self.obs_dim, self.n_actions, self.k)
        w.buf = self.buf.copy()
        return w


@dataclass(frozen=True)
class UtilityTriple:
    """``q`` over actions, ``v = max q`` and ``u = q - v``; batched over leading dims."""

    q: Tensor
    v: Tensor
    u: Tensor


def decompose(q: Tensor) -> UtilityTriple:
    if q.data.ndim == 0 or q.data.shape[-1] == 0:
        raise ShapeError("decompose", q.shape, detail="empty utility vector")
    v = max_last_dim(q)
    u = sub(q, expand_last(v, q.shape[-1]))
    return UtilityTriple(q, v, u)


def select_action(q: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy with lowest-index tie-breaking on the greedy branch."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    q = np.asarray(q)
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(q.shape[-1]))
    return int(np.argmax(q))


class UtilityNetwork:
    """Two-layer relu MLP from flattened history windows to per-action utilities.

    With ``shared=True`` (the default) one parameter set serves every agent and
    an agent-ID one-hot is appended to the input; this needs identical
    observation and action sizes across agents.
    """

    def __init__(
        self,
        obs_dims: Sequence[int],
        action_counts: Sequence[int],
        window: int = 4,
        hidden: int = 64,
        shared: bool = True,
        prefix: str = "agent",
    ):
        self.obs_dims = list(obs_dims)
        self.action_counts = list(action_counts)
        self.n_agents = len(self.action_counts)
        self.window = window
        self.hidden = hidden
        self.prefix = prefix
        if shared and (len(set(self.action_counts)) > 1 or len(set(self.obs_dims)) > 1):
            raise ValueError("parameter sharing needs identical observation and action sizes")
        self.shared = shared

    def feature_dim(self, i: int) -> int:
        return self.window * (self.obs_dims[i] + self.action_counts[i])

    def input_dim(self, i: int) -> int:
        return self.feature_dim(i) + (self.n_agents if self.shared else 0)

    def _name(self, i: int) -> str:
        return self.prefix if self.shared else f"{self.prefix}{i}"

    def new_window(self, i: int) -> HistoryWindow:
        return HistoryWindow(self.obs_dims[i], self.action_counts[i], self.window)

    def init_params(self, store: ParamStore, rng: np.random.Generator, zero_last: bool = False) -> None:
        agents = [0] if self.shared else range(self.n_agents)
        for i in agents:
            init_mlp(store, self._name(i), [self.input_dim(i), self.hidden, self.action_counts[i]], rng, zero_last)

    def _inputs(self, i: int, feats: np.ndarray) -> np.ndarray:
        feats = np.asarray(feats, dtype=np.float64)
        if feats.shape[-1] != self.feature_dim(i):
            raise ShapeError("utilities", feats.shape, (self.feature_dim(i),), detail=f"agent {i} window size")
        if not self.shared:
            return feats
        ident = np.zeros(feats.shape[:-1] + (self.n_agents,))
        ident[..., i] = 1.0
        return np.concatenate([feats, ident], axis=-1)

    def utilities(self, p: Mapping[str, Tensor], i: int, feats: np.ndarray) -> Tensor:
        """Utilities of agent ``i`` for window features ``feats`` of shape ``(..., F)``."""
        return mlp(Tensor(self._inputs(i, feats)), p, self._name(i))

    def all_utilities(self, p: Mapping[str, Tensor], feats: Sequence[np.ndarray]) -> list[Tensor]:
        """Per-agent utilities for a batch; ``feats[i]`` has shape ``(B, F_i)``.

        Shared parameters evaluate all agents in a single stacked pass.
        """
        if not self.shared:
            return [self.utilities(p, i, f) for i, f in enumerate(feats)]
        B = feats[0].shape[0]
        x = np.concatenate([self._inputs(i, f) for i, f in enumerate(feats)], axis=0)
        out = mlp(Tensor(x), p, self._name(0))
        return _split_rows(out, self.n_agents, B)


def _split_rows(t: Tensor, n: int, rows: int) -> list[Tensor]:
    return [slice_rows(t, i * rows, (i + 1) * rows) for i in range(n)]
