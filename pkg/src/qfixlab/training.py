"""Joint TD learning with target networks, episode replay and intervention annealing."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .agents import UtilityNetwork, select_action
from .autodiff import ParamStore, Tape, Tensor, adam_step, backward, global_norm, mse, scale, stop_gradient
from .envs import Env, Transition
from .mixers import Mixer, MixerSpec, conditioning, conditioning_dim, joint_utilities


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists ``(field, message)`` pairs."""

    def __init__(self, errors: Sequence[tuple[str, str]]):
        self.errors = list(errors)
        super().__init__("; ".join(f"{f}: {m}" for f, m in self.errors))


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, seed: int, norms: dict[str, float], detail: str = "non-finite loss"):
        self.step = step
        self.seed = seed
        self.norms = norms
        self.detail = detail
        super().__init__(f"{detail} at step {step} (seed {seed})")

    def dump(self) -> dict:
        return {"step": self.step, "seed": self.seed, "detail": self.detail, "param_norms": self.norms}


@dataclass
class TrainConfig:
    lr: float = 5e-4
    gamma: float = 0.99
    batch_episodes: int = 32
    buffer_episodes: int = 5000
    target_sync_interval: int = 200
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.2
    total_steps: int = 50_000
    anneal_lambda_start: float = 1.0
    anneal_fraction: float = 0.05
    # When False, A_fixee is detached inside the annealing loss so only w and b feel it.
    anneal_through_fixee: bool = False
    train_every: int = 1
    window: int = 4
    agent_hidden: int = 64
    shared_agents: bool = True
    seed: int = 0

    def validate(self) -> None:
        errs = []
        if not self.lr > 0:
            errs.append(("lr", "must be > 0"))
        if not 0.0 <= self.gamma < 1.0:
            errs.append(("gamma", "must lie in [0, 1)"))
        if not 0.0 <= self.anneal_fraction <= 1.0:
            errs.append(("anneal_fraction", "must lie in [0, 1]"))
        if not 0.0 <= self.eps_fraction <= 1.0:
            errs.append(("eps_fraction", "must lie in [0, 1]"))
        for name in ("eps_start", "eps_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errs.append((name, "must lie in [0, 1]"))
        for name in ("batch_episodes", "buffer_episodes", "target_sync_interval", "train_every", "window", "agent_hidden"):
            if getattr(self, name) < 1:
                errs.append((name, "must be >= 1"))
        if self.total_steps < 0:
            errs.append(("total_steps", "must be >= 0"))
        if self.anneal_lambda_start < 0:
            errs.append(("anneal_lambda_start", "must be >= 0"))
        if errs:
            raise ConfigError(errs)


def derive_rng(master_seed: int, seed_index: int, component: str) -> np.random.Generator:
    """Independent stream per (seed, index, component); adding components never shifts others."""
    digest = hashlib.sha256(f"{master_seed}/{seed_index}/{component}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


# -- schedules ----------------------------------------------------------------


def anneal_weight(step: int, cfg: TrainConfig) -> float:
    """Linear decay of the intervention-loss weight from ``anneal_lambda_start`` to exactly 0."""
    window = cfg.anneal_fraction * cfg.total_steps
    if window <= 0:
        return 0.0
    return cfg.anneal_lambda_start * max(0.0, 1.0 - step / window)


def epsilon_at(step: int, cfg: TrainConfig) -> float:
    window = cfg.eps_fraction * cfg.total_steps
    if window <= 0:
        return cfg.eps_end
    frac = min(1.0, step / window)
    return (1.0 - frac) * cfg.eps_start + frac * cfg.eps_end


# -- replay -------------------------------------------------------------------


@dataclass
class Episode:
    transitions: list[Transition]
    feats: list[np.ndarray]  # per agent (T, F_i): window before acting
    next_feats: list[np.ndarray]
    state: np.ndarray  # (T, S)
    next_state: np.ndarray
    actions: np.ndarray  # (T, N)
    rewards: np.ndarray  # (T,)
    terminal: np.ndarray  # (T,)

    def __len__(self) -> int:
        return len(self.transitions)


@dataclass
class Batch:
    feats: list[np.ndarray]
    next_feats: list[np.ndarray]
    state: np.ndarray
    next_state: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminal: np.ndarray

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode]) -> "Batch":
        if not episodes:
            raise ValueError("empty batch")
        n = len(episodes[0].feats)
        cat = np.concatenate
        return cls(
            [cat([e.feats[i] for e in episodes]) for i in range(n)],
            [cat([e.next_feats[i] for e in episodes]) for i in range(n)],
            cat([e.state for e in episodes]),
            cat([e.next_state for e in episodes]),
            cat([e.actions for e in episodes]),
            cat([e.rewards for e in episodes]),
            cat([e.terminal for e in episodes]),
        )

    def __len__(self) -> int:
        return len(self.rewards)


_FIELDS = ("state", "next_state", "actions", "rewards", "terminal")


class ReplayBuffer:
    """Ring buffer of complete, equal-length episodes with uniform episode sampling.

    Episode arrays are copied into preallocated ``(capacity, T, ...)`` storage
    on insert, so sampling is a fancy-index rather than a concatenation.
    """

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.rng = rng
        self.episodes: list[Episode] = []
        self._pos = 0
        self._store: dict[str, np.ndarray] | None = None
        self._len = 0

    def __len__(self) -> int:
        return len(self.episodes)

    def _arrays(self, ep: Episode) -> dict[str, np.ndarray]:
        out = {f"feats{i}": f for i, f in enumerate(ep.feats)}
        out.update({f"next_feats{i}": f for i, f in enumerate(ep.next_feats)})
        out.update({k: getattr(ep, k) for k in _FIELDS})
        return out

    def add(self, episode: Episode) -> None:
        arrays = self._arrays(episode)
        if self._store is None:
            self._len = len(episode)
            self._n_agents = len(episode.feats)
            self._store = {k: np.zeros((self.capacity,) + a.shape, dtype=a.dtype) for k, a in arrays.items()}
        elif len(episode) != self._len:
            raise ValueError(f"episode length {len(episode)} != buffer episode length {self._len}")
        for k, a in arrays.items():
            self._store[k][self._pos] = a
        if len(self.episodes) < self.capacity:
            self.episodes.append(episode)
        else:
            self.episodes[self._pos] = episode
        self._pos = (self._pos + 1) % self.capacity

    def sample(self, n: int) -> Batch:
        if not self.episodes:
            raise ValueError("cannot sample from an empty buffer")
        idx = self.rng.integers(len(self.episodes), size=n)
        st = self._store

        def take(k):
            a = st[k][idx]
            return a.reshape((-1,) + a.shape[2:])

        return Batch(
            [take(f"feats{i}") for i in range(self._n_agents)],
            [take(f"next_feats{i}") for i in range(self._n_agents)],
            *(take(k) for k in _FIELDS),
        )


# -- losses -------------------------------------------------------------------


def td_loss(q: Tensor, r, gamma: float, max_next_q_target, terminal) -> Tensor:
    """Mean of ``0.5 * (r + gamma * (1 - terminal) * max_next - Q)**2``; the target is held fixed."""
    r = np.asarray(r, dtype=np.float64)
    nxt = np.asarray(max_next_q_target.data if isinstance(max_next_q_target, Tensor) else max_next_q_target, dtype=np.float64)
    done = np.asarray(terminal, dtype=np.float64)
    target = stop_gradient(Tensor(r + gamma * (1.0 - done) * nxt))
    return mse(q, Tensor(np.broadcast_to(target.data, q.shape)))


@dataclass
class Learner:
    """Agents, mixer, online and target parameters for one run."""

    agents: UtilityNetwork
    mixer: Mixer
    store: ParamStore
    target: ParamStore
    state_dim: int

    @classmethod
    def build(cls, env: Env, mixer_spec: MixerSpec, cfg: TrainConfig, rng: np.random.Generator) -> "Learner":
        spec = env.spec
        agents = UtilityNetwork(
            [spec.obs_dim] * spec.n_agents,
            spec.action_counts,
            window=cfg.window,
            hidden=cfg.agent_hidden,
            shared=cfg.shared_agents and len(set(spec.action_counts)) == 1,
        )
        cdim = conditioning_dim(
            mixer_spec.conditioning, [agents.feature_dim(i) for i in range(spec.n_agents)], spec.state_dim
        )
        mixer = Mixer(mixer_spec, spec.n_agents, spec.action_counts, cdim)
        store = ParamStore()
        agents.init_params(store, rng)
        mixer.init_params(store, rng)
        return cls(agents, mixer, store, store.copy(), spec.state_dim)

    def greedy_actions(self, params, feats: Sequence[np.ndarray]) -> np.ndarray:
        qs = self.agents.all_utilities(params, feats)
        return np.stack([np.argmax(q.data, axis=-1) for q in qs], axis=-1)

    def joint_q(self, params, feats, state, actions, delta_through_fixee: bool = False):
        qs = self.agents.all_utilities(params, feats)
        q, v, u = joint_utilities(qs, actions)
        cond = conditioning(self.mixer.spec.conditioning, feats, state)
        return self.mixer.forward(params, q, v, u, cond, self.mixer.joint_action_onehot(actions), delta_through_fixee)


def greedy_joint_target(learner: Learner, next_feats: Sequence[np.ndarray], next_state: np.ndarray) -> np.ndarray:
    """Target-network joint value at the per-agent greedy joint action.

    Under IGM this equals the exhaustive max over joint actions while costing
    one argmax per agent.
    """
    p = learner.target.constants()
    actions = learner.greedy_actions(p, next_feats)
    return learner.joint_q(p, next_feats, next_state, actions).q.data


def train_step(batch: Batch, learner: Learner, cfg: TrainConfig, step: int) -> dict[str, float]:
    """One Adam step on mean TD loss plus the annealed squared intervention."""
    lam = anneal_weight(step, cfg)
    nonterminal = ~batch.terminal.astype(bool)
    next_q = np.zeros(len(batch))
    if nonterminal.any():
        rows = np.flatnonzero(nonterminal)
        next_q[rows] = greedy_joint_target(
            learner, [f[rows] for f in batch.next_feats], batch.next_state[rows]
        )
    with Tape() as tape:
        p = learner.store.watch(tape)
        out = learner.joint_q(p, batch.feats, batch.state, batch.actions, cfg.anneal_through_fixee)
        td = td_loss(out.q, batch.rewards, cfg.gamma, next_q, batch.terminal)
        loss = td
        anneal_val = 0.0
        if lam > 0 and out.delta is not None:
            # mse carries a 0.5 factor, so 2 * lam * mse == lam * mean(delta**2)
            anneal = scale(mse(out.delta, Tensor(np.zeros(out.delta.shape))), 2.0 * lam)
            anneal_val = anneal.item()
            loss = loss + anneal
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainingDiverged(step, cfg.seed, learner.store.norms())
        grads = learner.store.gradients(p, backward(loss))
    adam_step(learner.store, grads, cfg.lr)
    return {"td_loss": td.item(), "anneal_loss": anneal_val, "grad_norm": global_norm(grads.values()), "lambda_delta": lam}


# -- rollouts -----------------------------------------------------------------


def play_episode(
    env: Env,
    learner: Learner,
    epsilon: float | Callable[[], float],
    rng: np.random.Generator,
    on_step: Callable[[Episode | None], None] | None = None,
    max_steps: int | None = None,
) -> tuple[Episode | None, float, int]:
    """Play one episode with the online agents.

    ``on_step`` runs after every env step and receives the finished
    :class:`Episode` on the terminal step (``None`` before). Returns
    ``(episode, return, steps)``; ``episode`` is ``None`` when ``max_steps``
    cut the episode short.
    """
    spec = env.spec
    obs, _ = env.reset()
    windows = [learner.agents.new_window(i) for i in range(spec.n_agents)]
    for w, o in zip(windows, obs):
        w.push(o)
    transitions, feats, next_feats, actions = [], [], [], []
    total = 0.0
    while True:
        if max_steps is not None and len(transitions) >= max_steps:
            return None, total, len(transitions)
        f = [w.features() for w in windows]
        qs = learner.agents.all_utilities(learner.store.constants(), [x[None, :] for x in f])
        eps = epsilon() if callable(epsilon) else epsilon
        ja = tuple(select_action(q.data[0], eps, rng) for q in qs)
        tr = env.step(ja)
        total += tr.reward
        for i, w in enumerate(windows):
            w.push(tr.next_joint_obs[i], ja[i])
        transitions.append(tr)
        feats.append(f)
        next_feats.append([w.features() for w in windows])
        actions.append(ja)
        ep = _episode(transitions, feats, next_feats, actions) if tr.terminal else None
        if on_step is not None:
            on_step(ep)
        if tr.terminal:
            return ep, total, len(transitions)


def _episode(transitions, feats, next_feats, actions) -> Episode:
    n = len(feats[0])
    return Episode(
        transitions,
        [np.stack([x[i] for x in feats]) for i in range(n)],
        [np.stack([x[i] for x in next_feats]) for i in range(n)],
        np.stack([t.state for t in transitions]),
        np.stack([t.next_state for t in transitions]),
        np.array(actions, dtype=np.int64),
        np.array([t.reward for t in transitions]),
        np.array([t.terminal for t in transitions]),
    )


def evaluate(env: Env, learner: Learner, episodes: int, rng: np.random.Generator) -> tuple[float, float]:
    returns = [play_episode(env, learner, 0.0, rng)[1] for _ in range(episodes)]
    return float(np.mean(returns)), float(np.std(returns))


@dataclass
class RunResult:
    records: list[dict]
    learner: Learner
    train_metrics: list[dict] = field(default_factory=list)

    @property
    def final_greedy_return(self) -> float:
        return self.records[-1]["eval_return_mean"]


def run_experiment(
    env_factory: Callable[[np.random.Generator], Env],
    mixer_spec: MixerSpec,
    cfg: TrainConfig,
    eval_interval: int = 1000,
    eval_episodes: int = 10,
    sink: Callable[[dict], None] | None = None,
    seed_index: int = 0,
) -> RunResult:
    """Alternate epsilon-greedy rollouts with training; evaluate greedily every ``eval_interval`` steps.

    ``env_factory`` receives a dedicated generator and must return a fresh
    environment, so training and evaluation environments never share a stream.
    One evaluation record is always emitted at step 0 and one at the end.
    """
    cfg.validate()
    if eval_interval < 1:
        raise ConfigError([("eval_interval", "must be >= 1")])
    if eval_episodes < 1:
        raise ConfigError([("eval_episodes", "must be >= 1")])
    seed = cfg.seed
    env = env_factory(derive_rng(seed, seed_index, "env"))
    eval_env = env_factory(derive_rng(seed, seed_index, "eval_env"))
    learner = Learner.build(env, mixer_spec, cfg, derive_rng(seed, seed_index, "init"))
    explore = derive_rng(seed, seed_index, "explore")
    eval_rng = derive_rng(seed, seed_index, "eval")
    buffer = ReplayBuffer(cfg.buffer_episodes, derive_rng(seed, seed_index, "replay"))

    records: list[dict] = []
    pending: list[dict] = []
    train_log: list[dict] = []
    t = 0

    def emit() -> None:
        mean, std = evaluate(eval_env, learner, eval_episodes, eval_rng)
        rec = {
            "step": t,
            "seed": seed,
            "td_loss": float(np.mean([m["td_loss"] for m in pending])) if pending else None,
            "anneal_loss": float(np.mean([m["anneal_loss"] for m in pending])) if pending else None,
            "eval_return_mean": mean,
            "eval_return_std": std,
            "epsilon": epsilon_at(t, cfg),
            "lambda_delta": anneal_weight(t, cfg),
        }
        pending.clear()
        records.append(rec)
        if sink is not None:
            sink(rec)

    def on_step(ep: Episode | None) -> None:
        nonlocal t
        t += 1
        if ep is not None:
            buffer.add(ep)
        if len(buffer) >= cfg.batch_episodes and t % cfg.train_every == 0:
            m = train_step(buffer.sample(cfg.batch_episodes), learner, cfg, t)
            pending.append(m)
            train_log.append(m)
        if t % cfg.target_sync_interval == 0:
            learner.target.load_values(learner.store)
        if t % eval_interval == 0:
            emit()

    emit()
    while t < cfg.total_steps:
        play_episode(env, learner, lambda: epsilon_at(t, cfg), explore, on_step, max_steps=cfg.total_steps - t)
    if records[-1]["step"] != t:
        emit()
    return RunResult(records, learner, train_log)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
