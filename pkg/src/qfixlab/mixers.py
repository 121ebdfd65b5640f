"""Joint-value compositions: VDN, QMIX, QPLEX and the QFIX / Q+FIX family.

All functions are batched. Per-agent quantities arrive as ``(B, N)`` tensors
holding the chosen-action utility ``q``, the agent's maximal utility ``v`` and
the chosen-action advantage ``u = q - v`` (so ``u <= 0``). Joint values come
back as ``(B,)`` tensors. Conditioning inputs and joint-action one-hots are
plain arrays because no gradient is ever taken with respect to them.

The fixing layer turns any IGM fixee into a complete model::

    QFIX:   Q = w_pos * A_fixee + b                       (w_pos > 0)
    Q+FIX:  Q = Q_fixee + w * sg(A_fixee) + b             (w > -1)

with ``A_fixee = Q_fixee - max Q_fixee``, which is zero exactly at the
individually greedy joint actions.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .autodiff import (
    ParamStore,
    Tensor,
    absolute,
    add,
    concat,
    elu,
    matmul,
    max_last_dim,
    mul,
    reshape,
    stop_gradient,
    sub,
    sum_,
)
from .nets import init_mlp, mlp

KINDS = (
    "vdn",
    "qmix",
    "qplex",
    "qfix_sum",
    "qfix_mono",
    "qfix_lin",
    "qplusfix_sum",
    "qplusfix_mono",
    "qplusfix_lin",
)
CONDITIONINGS = ("stateless", "history_state", "state_only")

# The constant is written 10e-8 in the reference architecture; kept verbatim.
WEIGHT_EPS = 10e-8


class MixerError(ValueError):
    pass


@dataclass(frozen=True)
class MixerSpec:
    kind: str
    conditioning: str = "stateless"
    detach_advantages: bool = True
    mixing_hidden: int = 32
    hypernet_hidden: int = 32
    fixing_hidden: int = 64

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MixerError(f"unknown mixer kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.conditioning not in CONDITIONINGS:
            raise MixerError(f"unknown conditioning {self.conditioning!r}; expected one of {', '.join(CONDITIONINGS)}")
        for name in ("mixing_hidden", "hypernet_hidden", "fixing_hidden"):
            if getattr(self, name) < 1:
                raise MixerError(f"{name} must be >= 1")

    @property
    def fixee(self) -> str | None:
        if self.kind.startswith(("qfix_", "qplusfix_")):
            return "qmix" if self.kind.endswith("_mono") else "vdn"
        return None

    @property
    def additive(self) -> bool:
        return self.kind.startswith("qplusfix_")

    @property
    def per_agent_weights(self) -> bool:
        return self.kind.endswith("_lin")

    @property
    def uses_detach(self) -> bool:
        return self.detach_advantages and (self.kind == "qplex" or self.additive)


# -- weight transforms --------------------------------------------------------


def monotonic_weight(x: Tensor) -> Tensor:
    """Non-negative hypernetwork weights for QMIX."""
    return absolute(x)


def positive_weight(x: Tensor) -> Tensor:
    """Strictly positive weights, ``|x| + 10e-8``: QFIX ``w`` and QPLEX ``w_i``, ``lambda_i``."""
    return absolute(x) + WEIGHT_EPS


def shifted_weight(x: Tensor) -> Tensor:
    """Q+FIX weights in ``(-1, inf)``: ``|x + 1| - 1 + 10e-8``."""
    return absolute(x + 1.0) - 1.0 + WEIGHT_EPS


# -- baselines ----------------------------------------------------------------


def vdn_q(q: Tensor, v: Tensor, u: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(Q, V, A)`` with ``Q = sum q``, ``V = sum v``, ``A = sum u``."""
    return sum_(q, -1), sum_(v, -1), sum_(u, -1)


class _Hyper(NamedTuple):
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def _qmix_hyper(p: Mapping[str, Tensor], cond: Tensor, n_agents: int, hidden: int) -> _Hyper:
    B = cond.shape[0]
    w1 = reshape(monotonic_weight(mlp(cond, p, "mixer.hyper_w1")), (B, n_agents, hidden))
    b1 = reshape(mlp(cond, p, "mixer.hyper_b1"), (B, 1, hidden))
    w2 = reshape(monotonic_weight(mlp(cond, p, "mixer.hyper_w2")), (B, hidden, 1))
    b2 = reshape(mlp(cond, p, "mixer.hyper_b2"), (B, 1, 1))
    return _Hyper(w1, b1, w2, b2)


def _f_mono(h: _Hyper, x: Tensor) -> Tensor:
    B, N = x.shape
    hidden = elu(add(matmul(reshape(x, (B, 1, N)), h.w1), h.b1))
    return reshape(add(matmul(hidden, h.w2), h.b2), (B,))


def f_mono(p: Mapping[str, Tensor], x: Tensor, cond: np.ndarray, hidden: int) -> Tensor:
    """Monotonic mixing network ``(B, N) -> (B,)`` with hypernetwork weights from ``cond``."""
    return _f_mono(_qmix_hyper(p, Tensor(cond), x.shape[1], hidden), x)


def qmix_q(p: Mapping[str, Tensor], q: Tensor, v: Tensor, cond: np.ndarray, hidden: int) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(Q, V, A)`` with ``Q = f(q)``, ``V = f(v)`` and ``A = Q - V <= 0``."""
    h = _qmix_hyper(p, Tensor(cond), q.shape[1], hidden)
    Q = _f_mono(h, q)
    V = _f_mono(h, v)
    return Q, V, sub(Q, V)


def qplex_combine(w: Tensor, b: Tensor, lam: Tensor, v: Tensor, u: Tensor, detach: bool) -> Tensor:
    """``sum_i (w_i v_i + b_i) + sum_i lam_i w_i u_i``; all inputs ``(B, N)``."""
    adv = stop_gradient(u) if detach else u
    value = sum_(add(mul(w, v), b), -1)
    return add(value, sum_(mul(mul(lam, w), adv), -1))


def qplex_q(
    p: Mapping[str, Tensor], v: Tensor, u: Tensor, cond: np.ndarray, ja_onehot: np.ndarray, detach: bool
) -> Tensor:
    c = Tensor(cond)
    w = positive_weight(mlp(c, p, "mixer.qplex_w"))
    b = mlp(c, p, "mixer.qplex_b")
    lam = positive_weight(mlp(Tensor(np.concatenate([cond, ja_onehot], axis=-1)), p, "mixer.qplex_lambda"))
    return qplex_combine(w, b, lam, v, u, detach)


# -- fixing ---------------------------------------------------------------------


def qfix_combine(w_pos: Tensor, a_fixee: Tensor, b: Tensor) -> Tensor:
    """QFIX: ``w_pos * A_fixee + b``."""
    return add(mul(w_pos, a_fixee), b)


def qfix_lin_combine(w_pos: Tensor, u: Tensor, b: Tensor) -> Tensor:
    """QFIX-lin: ``sum_i w_i u_i + b`` with ``w_pos``, ``u`` of shape ``(B, N)``."""
    return add(sum_(mul(w_pos, u), -1), b)


def intervention(w: Tensor, a_fixee: Tensor, b: Tensor) -> Tensor:
    """Fixing intervention ``w * A_fixee + b`` (``a_fixee`` may be ``(B, N)`` for -lin)."""
    if w.data.ndim == 2:
        return add(sum_(mul(w, a_fixee), -1), b)
    return add(mul(w, a_fixee), b)


def qplusfix_combine(q_fixee: Tensor, w: Tensor, a_fixee: Tensor, b: Tensor, detach: bool) -> Tensor:
    """Q+FIX: ``Q_fixee + w * A_fixee + b``, advantages optionally detached."""
    adv = stop_gradient(a_fixee) if detach else a_fixee
    return add(q_fixee, intervention(w, adv, b))


def fixee_q(
    kind: str, p: Mapping[str, Tensor], q: Tensor, v: Tensor, u: Tensor, cond: np.ndarray, hidden: int
) -> tuple[Tensor, Tensor, Tensor]:
    if kind == "vdn":
        return vdn_q(q, v, u)
    if kind == "qmix":
        return qmix_q(p, q, v, cond, hidden)
    raise MixerError(f"unsupported fixee {kind!r}")


def fixing_outputs(
    p: Mapping[str, Tensor], cond: np.ndarray, ja_onehot: np.ndarray, additive: bool
) -> tuple[Tensor, Tensor]:
    """Transformed fixing weights ``(B,)`` or ``(B, N)`` and bias ``(B,)``."""
    raw = mlp(Tensor(np.concatenate([cond, ja_onehot], axis=-1)), p, "mixer.fix_w")
    w = shifted_weight(raw) if additive else positive_weight(raw)
    if w.shape[1] == 1:
        w = reshape(w, (w.shape[0],))
    b = mlp(Tensor(cond), p, "mixer.fix_b")
    return w, reshape(b, (b.shape[0],))


def qfix_q(
    fixee_kind: str,
    p: Mapping[str, Tensor],
    q: Tensor,
    v: Tensor,
    u: Tensor,
    cond: np.ndarray,
    ja_onehot: np.ndarray,
    hidden: int = 32,
) -> Tensor:
    _, _, a = fixee_q(fixee_kind, p, q, v, u, cond, hidden)
    w, b = fixing_outputs(p, cond, ja_onehot, additive=False)
    return qfix_combine(w, a, b)


def qfix_lin_q(p: Mapping[str, Tensor], u: Tensor, cond: np.ndarray, ja_onehot: np.ndarray) -> Tensor:
    w, b = fixing_outputs(p, cond, ja_onehot, additive=False)
    return qfix_lin_combine(w, u, b)


def qplusfix_q(
    fixee_kind: str,
    p: Mapping[str, Tensor],
    q: Tensor,
    v: Tensor,
    u: Tensor,
    cond: np.ndarray,
    ja_onehot: np.ndarray,
    detach: bool,
    hidden: int = 32,
    per_agent: bool = False,
) -> Tensor:
    qf, _, a = fixee_q(fixee_kind, p, q, v, u, cond, hidden)
    w, b = fixing_outputs(p, cond, ja_onehot, additive=True)
    return qplusfix_combine(qf, w, u if per_agent else a, b, detach)


# -- the mixer object ---------------------------------------------------------


class MixerOutput(NamedTuple):
    q: Tensor
    q_fixee: Tensor | None = None
    delta: Tensor | None = None


@dataclass
class Mixer:
    """A :class:`MixerSpec` bound to concrete agent and conditioning sizes."""

    spec: MixerSpec
    n_agents: int
    action_counts: tuple[int, ...]
    cond_dim: int

    def __post_init__(self):
        self.action_counts = tuple(int(a) for a in self.action_counts)
        if len(self.action_counts) != self.n_agents:
            raise MixerError("action_counts must have one entry per agent")

    @property
    def joint_action_dim(self) -> int:
        return sum(self.action_counts)

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        s, N, C = self.spec, self.n_agents, self.cond_dim
        H, E, F = s.mixing_hidden, s.hypernet_hidden, s.fixing_hidden
        if s.kind == "qmix" or s.fixee == "qmix":
            init_mlp(store, "mixer.hyper_w1", [C, E, N * H], rng)
            init_mlp(store, "mixer.hyper_b1", [C, H], rng)
            init_mlp(store, "mixer.hyper_w2", [C, E, H], rng)
            init_mlp(store, "mixer.hyper_b2", [C, E, 1], rng)
        if s.kind == "qplex":
            init_mlp(store, "mixer.qplex_w", [C, E, N], rng)
            init_mlp(store, "mixer.qplex_b", [C, E, N], rng)
            init_mlp(store, "mixer.qplex_lambda", [C + self.joint_action_dim, E, N], rng)
        if s.fixee is not None:
            n_w = N if s.per_agent_weights else 1
            init_mlp(store, "mixer.fix_w", [C + self.joint_action_dim, F, n_w], rng)
            init_mlp(store, "mixer.fix_b", [C, F, 1], rng)

    def joint_action_onehot(self, actions: np.ndarray) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.int64).reshape(-1, self.n_agents)
        out = np.zeros((actions.shape[0], self.joint_action_dim))
        offset = 0
        for i, n in enumerate(self.action_counts):
            out[np.arange(actions.shape[0]), offset + actions[:, i]] = 1.0
            offset += n
        return out

    def forward(
        self,
        p: Mapping[str, Tensor],
        q: Tensor,
        v: Tensor,
        u: Tensor,
        cond: np.ndarray,
        ja_onehot: np.ndarray,
        delta_through_fixee: bool = False,
    ) -> MixerOutput:
        s = self.spec
        cond = np.asarray(cond, dtype=np.float64)
        if cond.shape != (q.shape[0], self.cond_dim):
            raise MixerError(f"conditioning shape {cond.shape} != ({q.shape[0]}, {self.cond_dim})")
        kind = s.kind
        if kind == "vdn":
            return MixerOutput(vdn_q(q, v, u)[0])
        if kind == "qmix":
            return MixerOutput(qmix_q(p, q, v, cond, s.mixing_hidden)[0])
        if kind == "qplex":
            return MixerOutput(qplex_q(p, v, u, cond, ja_onehot, s.detach_advantages))

        qf, _, a = fixee_q(s.fixee, p, q, v, u, cond, s.mixing_hidden)
        w, b = fixing_outputs(p, cond, ja_onehot, additive=s.additive)
        adv = u if s.per_agent_weights else a
        if not s.additive:
            if s.per_agent_weights:
                return MixerOutput(qfix_lin_combine(w, u, b), qf)
            return MixerOutput(qfix_combine(w, a, b), qf)
        q_tot = qplusfix_combine(qf, w, adv, b, s.detach_advantages)
        delta = intervention(w, adv if delta_through_fixee else stop_gradient(adv), b)
        return MixerOutput(q_tot, qf, delta)


def joint_utilities(qs: Sequence[Tensor], actions: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
    """Chosen utilities, maximal utilities and advantages as ``(B, N)`` tensors.

    ``qs[i]`` holds agent ``i``'s utilities ``(B, A_i)``; ``actions`` is ``(B, N)``.
    """
    actions = np.asarray(actions, dtype=np.int64)
    B = actions.shape[0]
    chosen, best = [], []
    for i, qi in enumerate(qs):
        onehot = np.zeros(qi.shape)
        onehot[np.arange(B), actions[:, i]] = 1.0
        chosen.append(reshape(sum_(mul(qi, Tensor(onehot)), -1), (B, 1)))
        best.append(reshape(max_last_dim(qi), (B, 1)))
    q = concat(chosen)
    v = concat(best)
    return q, v, sub(q, v)


def conditioning(mode: str, window_feats: Sequence[np.ndarray], state: np.ndarray) -> np.ndarray:
    """Mixer conditioning input for a batch.

    ``stateless`` concatenates every agent's window features, ``state_only``
    uses the state alone and ``history_state`` uses both.
    """
    if mode == "stateless":
        return np.concatenate(list(window_feats), axis=-1)
    if mode == "state_only":
        return np.asarray(state, dtype=np.float64)
    if mode == "history_state":
        return np.concatenate(list(window_feats) + [np.asarray(state, dtype=np.float64)], axis=-1)
    raise MixerError(f"unknown conditioning {mode!r}")


def conditioning_dim(mode: str, feature_dims: Sequence[int], state_dim: int) -> int:
    hist = int(sum(feature_dims))
    return {"stateless": hist, "state_only": state_dim, "history_state": hist + state_dim}[mode]


# -- checkpoints --------------------------------------------------------------


def save_mixer(path: str | Path, mixer: Mixer, store: ParamStore) -> None:
    doc = {
        "spec": asdict(mixer.spec),
        "n_agents": mixer.n_agents,
        "action_counts": list(mixer.action_counts),
        "cond_dim": mixer.cond_dim,
        "params": {n: store[n].tolist() for n in store.names("mixer.")},
    }
    Path(path).write_text(json.dumps(doc))


def load_mixer(path: str | Path) -> tuple[Mixer, ParamStore]:
    doc = json.loads(Path(path).read_text())
    mixer = Mixer(MixerSpec(**doc["spec"]), doc["n_agents"], tuple(doc["action_counts"]), doc["cond_dim"])
    return mixer, ParamStore.from_json(doc["params"])
