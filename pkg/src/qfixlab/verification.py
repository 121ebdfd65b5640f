"""Executable oracles: brute-force IGM checks, table fitting, gradient and detach checks.

Every check enumerates joint actions exhaustively, so the sizes used here
stay small (2-3 agents, 2-5 actions). Suites return :class:`CheckReport`
objects that serialise to ``{check_name, instances, failures, witnesses}``.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .agents import UtilityNetwork
from .autodiff import ParamStore, Tape, Tensor, adam_step, backward, mse, sum_
from .envs import LatentStateMatrixGame, PENALTY_PAYOFF, state_posterior
from .mixers import (
    KINDS,
    Mixer,
    MixerSpec,
    fixee_q,
    joint_utilities,
    qfix_combine,
    qfix_lin_combine,
    qplusfix_combine,
    conditioning,
    conditioning_dim,
)

MAX_JOINT_ACTIONS = 10**6
ARGMAX_TOL = 1e-9
MAX_WITNESSES = 10


class VerificationError(ValueError):
    pass


class NotIgmError(VerificationError):
    """A fitting target whose joint table disagrees with its utilities on the greedy set."""

    def __init__(self, witness):
        self.witness = witness
        super().__init__(f"target does not satisfy IGM; witness joint action {witness}")


@dataclass
class JointValueTable:
    """Joint values ``Q(jh, ja)`` for one joint history with the paired per-agent utilities."""

    values: np.ndarray
    utilities: list[np.ndarray]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.utilities = [np.asarray(q, dtype=np.float64).reshape(-1) for q in self.utilities]
        if self.values.ndim != len(self.utilities):
            raise VerificationError(
                f"table has {self.values.ndim} axes but {len(self.utilities)} utility vectors were given"
            )
        if self.values.shape != tuple(len(q) for q in self.utilities):
            raise VerificationError(
                f"table shape {self.values.shape} does not match utility sizes {[len(q) for q in self.utilities]}"
            )
        if not np.all(np.isfinite(self.values)) or not all(np.all(np.isfinite(q)) for q in self.utilities):
            raise VerificationError("joint value table must be finite everywhere")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def joint_actions(self) -> Iterable[tuple[int, ...]]:
        return itertools.product(*(range(n) for n in self.shape))

    @classmethod
    def from_dict(cls, doc: dict) -> "JointValueTable":
        try:
            return cls(np.array(doc["values"], dtype=np.float64), [np.array(q) for q in doc["utilities"]])
        except (KeyError, TypeError, ValueError) as exc:
            raise VerificationError(f"malformed table: {exc}") from exc

    def to_dict(self) -> dict:
        return {"values": self.values.tolist(), "utilities": [q.tolist() for q in self.utilities]}


@dataclass
class IgmReport:
    holds: bool
    joint_argmax_set: set
    individual_argmax_product: set
    witness: tuple[int, ...] | None = None


def _argmax_set(x: np.ndarray, tol: float) -> np.ndarray:
    return x >= x.max() - tol


def igm_check(table: JointValueTable, tol: float = ARGMAX_TOL) -> IgmReport:
    """Compare the joint argmax set with the product of per-agent argmax sets."""
    if table.values.size > MAX_JOINT_ACTIONS:
        raise VerificationError(f"joint action space of {table.values.size} entries exceeds {MAX_JOINT_ACTIONS}")
    joint = {tuple(int(i) for i in ja) for ja in np.argwhere(_argmax_set(table.values, tol))}
    product = set(itertools.product(*(np.flatnonzero(_argmax_set(q, tol)).tolist() for q in table.utilities)))
    diff = sorted(joint ^ product)
    return IgmReport(not diff, joint, product, diff[0] if diff else None)


def advantage_constraint_check(table: JointValueTable, tol: float = ARGMAX_TOL) -> bool:
    """Check, for every joint action, that some agent advantage is negative iff the joint advantage is.

    Advantages within ``tol`` of zero count as zero, matching :func:`igm_check`.
    """
    if table.values.size > MAX_JOINT_ACTIONS:
        raise VerificationError(f"joint action space of {table.values.size} entries exceeds {MAX_JOINT_ACTIONS}")
    A = table.values - table.values.max()
    any_neg = np.zeros(table.shape, dtype=bool)
    for i, q in enumerate(table.utilities):
        u = q - q.max()
        shape = [1] * len(table.shape)
        shape[i] = len(q)
        any_neg |= (u < -tol).reshape(shape)
    return bool(np.all(any_neg == (A < -tol)))


def one_sided_advantage_check(table: JointValueTable, tol: float = ARGMAX_TOL) -> bool:
    """Only ``some u_i < 0  =>  A < 0``; misses joint actions with all-zero utilities but ``A < 0``.

    Kept as a foil: it accepts tables that :func:`igm_check` rejects.
    """
    A = table.values - table.values.max()
    any_neg = np.zeros(table.shape, dtype=bool)
    for i, q in enumerate(table.utilities):
        shape = [1] * len(table.shape)
        shape[i] = len(q)
        any_neg |= (q - q.max() < -tol).reshape(shape)
    return bool(np.all(A[any_neg] < -tol))


def enumerate_joint_actions(action_counts: Sequence[int]) -> np.ndarray:
    return np.array(list(itertools.product(*(range(n) for n in action_counts))), dtype=np.int64).reshape(
        -1, len(action_counts)
    )


def utility_triples(utilities: Sequence[np.ndarray], actions: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
    """Constant ``(q, v, u)`` tensors of shape ``(B, N)`` for fixed utility vectors."""
    q = np.stack([np.asarray(ut)[actions[:, i]] for i, ut in enumerate(utilities)], axis=-1)
    v = np.broadcast_to(np.array([np.max(ut) for ut in utilities]), q.shape).copy()
    return Tensor(q), Tensor(v), Tensor(q - v)


# -- random instances ---------------------------------------------------------


@dataclass
class MixerInstance:
    mixer: Mixer
    store: ParamStore
    cond: np.ndarray
    utilities: list[np.ndarray]

    def table(self) -> JointValueTable:
        actions = enumerate_joint_actions(self.mixer.action_counts)
        q, v, u = utility_triples(self.utilities, actions)
        cond = np.broadcast_to(self.cond, (len(actions), self.cond.shape[-1]))
        out = self.mixer.forward(self.store.constants(), q, v, u, cond, self.mixer.joint_action_onehot(actions))
        return JointValueTable(out.q.data.reshape(self.mixer.action_counts), self.utilities)


def random_mixer_instance(
    kind: str,
    conditioning_mode: str,
    rng: np.random.Generator,
    n_agents: int | None = None,
    action_counts: Sequence[int] | None = None,
    cond_dim: int | None = None,
    **spec_kwargs,
) -> MixerInstance:
    if action_counts is None:
        n = n_agents if n_agents is not None else int(rng.integers(2, 4))
        action_counts = tuple(int(a) for a in rng.integers(2, 6, size=n))
    n = len(action_counts)
    if cond_dim is None:
        cond_dim = {"stateless": 3 * n, "state_only": 2, "history_state": 3 * n + 2}[conditioning_mode]
    mixer = Mixer(MixerSpec(kind, conditioning_mode, **spec_kwargs), n, tuple(action_counts), cond_dim)
    store = ParamStore()
    mixer.init_params(store, rng)
    utilities = [rng.normal(size=a) for a in action_counts]
    return MixerInstance(mixer, store, rng.normal(size=cond_dim), utilities)


def random_igm_table(rng: np.random.Generator, action_counts: Sequence[int], gap: tuple[float, float] = (0.1, 5.0)):
    """A random table satisfying IGM: ``V`` at the greedy joint action, strictly below it elsewhere."""
    utilities = [rng.normal(size=a) for a in action_counts]
    greedy = tuple(int(np.argmax(q)) for q in utilities)
    values = rng.normal() - rng.uniform(*gap, size=tuple(action_counts))
    values[greedy] = values.max() + rng.uniform(*gap)
    return JointValueTable(values, utilities)


# -- reports --------------------------------------------------------------------


@dataclass
class CheckReport:
    check_name: str
    instances: int = 0
    failures: int = 0
    witnesses: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def record(self, ok: bool, witness=None) -> None:
        self.instances += 1
        if not ok:
            self.failures += 1
            if len(self.witnesses) < MAX_WITNESSES:
                self.witnesses.append(witness)

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, set)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def instance_rng(seed: int, name: str, index: int) -> np.random.Generator:
    """Per-instance stream so any single instance can be replayed in isolation."""
    return np.random.default_rng([seed, index, *name.encode()])


# -- IGM suites ---------------------------------------------------------------


def igm_property_check(kind: str, conditioning_mode: str, instances: int = 1000, seed: int = 0) -> CheckReport:
    name = f"igm/{kind}/{conditioning_mode}"
    report = CheckReport(name)
    for k in range(instances):
        inst = random_mixer_instance(kind, conditioning_mode, instance_rng(seed, name, k))
        res = igm_check(inst.table())
        report.record(res.holds, {"instance": k, "joint_action": res.witness})
    return report


def advantage_equivalence_check(instances: int = 10_000, near_ties: int = 100, seed: int = 0) -> CheckReport:
    """``advantage_constraint_check`` must agree with ``igm_check`` on random and near-tie tables.

    Random tables are mostly non-IGM; a third are built IGM. Near-tie tables
    perturb IGM tables by amounts straddling the argmax tolerance.
    """
    report = CheckReport("igm/advantage_equivalence")
    holds = 0
    for k in range(instances):
        rng = instance_rng(seed, report.check_name, k)
        counts = tuple(int(a) for a in rng.integers(2, 6, size=int(rng.integers(2, 4))))
        if k < near_ties:
            table = _near_tie_table(rng, counts)
        elif k % 3 == 0:
            table = random_igm_table(rng, counts)
        else:
            table = JointValueTable(rng.normal(size=counts), [rng.normal(size=a) for a in counts])
        a = igm_check(table).holds
        b = advantage_constraint_check(table)
        holds += a
        report.record(a == b, {"instance": k, "igm": a, "advantage": b})
    report.details["igm_holds"] = holds
    return report


def _near_tie_table(rng: np.random.Generator, counts: tuple[int, ...]) -> JointValueTable:
    t = random_igm_table(rng, counts)
    values = t.values.copy()
    utilities = [q.copy() for q in t.utilities]
    top = values.max()
    ja = tuple(int(rng.integers(a)) for a in counts)
    offsets = [0.0, 0.5 * ARGMAX_TOL, 2.0 * ARGMAX_TOL, -0.5 * ARGMAX_TOL, -2.0 * ARGMAX_TOL]
    # move one joint entry next to the max, and maybe one utility next to its agent's max
    values[ja] = top - offsets[int(rng.integers(len(offsets)))]
    if rng.random() < 0.5:
        i = int(rng.integers(len(counts)))
        a = int(rng.integers(counts[i]))
        utilities[i][a] = utilities[i].max() - offsets[int(rng.integers(len(offsets)))]
    return JointValueTable(values, utilities)


def recovery_check(kind: str, instances: int = 200, seed: int = 0, tol: float = 1e-12) -> CheckReport:
    """QFIX with ``w+ = 1, b = V_fixee`` and Q+FIX with ``w = 0, b = 0`` reproduce the fixee exactly."""
    name = f"recovery/{kind}"
    report = CheckReport(name)
    spec = MixerSpec(kind)
    for k in range(instances):
        rng = instance_rng(seed, name, k)
        inst = random_mixer_instance(kind, "stateless", rng)
        actions = enumerate_joint_actions(inst.mixer.action_counts)
        q, v, u = utility_triples(inst.utilities, actions)
        cond = np.broadcast_to(inst.cond, (len(actions), inst.cond.shape[-1]))
        p = inst.store.constants()
        qf, vf, af = fixee_q(spec.fixee, p, q, v, u, cond, spec.mixing_hidden)
        B, N = q.shape
        if spec.additive:
            w = Tensor(np.zeros((B, N) if spec.per_agent_weights else B))
            out = qplusfix_combine(qf, w, u if spec.per_agent_weights else af, Tensor(np.zeros(B)), detach=True)
        elif spec.per_agent_weights:
            out = qfix_lin_combine(Tensor(np.ones((B, N))), u, vf)
        else:
            out = qfix_combine(Tensor(np.ones(B)), af, vf)
        err = float(np.max(np.abs(out.data - qf.data)))
        report.record(err <= tol, {"instance": k, "max_abs_error": err})
    return report


def suite_igm(instances: int = 1000, seed: int = 0) -> list[CheckReport]:
    reports = [
        igm_property_check(kind, mode, instances, seed)
        for kind in KINDS
        for mode in ("stateless", "state_only", "history_state")
    ]
    reports.append(advantage_equivalence_check(10 * instances, min(100, instances), seed=seed))
    return reports


# -- stateful IGM -------------------------------------------------------------


@dataclass
class StatefulReport:
    holds: bool
    pointwise_holds: bool
    marginal_holds: bool
    witness: dict | None = None


def enumerate_joint_histories(env: LatentStateMatrixGame, max_t: int | None = None):
    """Every per-agent history ``[(guess_0,), (guess_0, a_0, guess_1), ...]`` up to ``max_t`` steps.

    Yields joint histories as tuples of per-agent ``(guesses, prev_actions)``.
    """
    T = env.horizon if max_t is None else max_t
    S = env.n_states
    for t in range(T):
        per_agent = []
        for i in range(env.spec.n_agents):
            hs = []
            for guesses in itertools.product(range(S), repeat=t + 1):
                for acts in itertools.product(range(env.spec.action_counts[i]), repeat=t):
                    hs.append((guesses, acts))
            per_agent.append(hs)
        yield from itertools.product(*per_agent)


def history_features(env: LatentStateMatrixGame, agents: UtilityNetwork, joint_history) -> list[np.ndarray]:
    """Window features each agent holds after the given history."""
    S = env.n_states
    feats = []
    for i, (guesses, acts) in enumerate(joint_history):
        w = agents.new_window(i)
        for t, g in enumerate(guesses):
            o = np.zeros(env.spec.obs_dim)
            o[g] = 1.0
            o[S + t] = 1.0
            w.push(o, acts[t - 1] if t > 0 else None)
        feats.append(w.features())
    return feats


def stateful_igm_check(
    env: LatentStateMatrixGame,
    agents: UtilityNetwork,
    mixer: Mixer,
    store: ParamStore,
    tol: float = ARGMAX_TOL,
) -> StatefulReport:
    """Pointwise IGM in every state, then IGM of the posterior-marginalised joint values."""
    p = store.constants()
    S = env.n_states
    actions = enumerate_joint_actions(mixer.action_counts)
    J = len(actions)
    onehot = mixer.joint_action_onehot(actions)
    point_ok, marg_ok = True, True
    witness = None
    for jh in enumerate_joint_histories(env):
        feats = history_features(env, agents, jh)
        utilities = [q.data[0] for q in agents.all_utilities(p, [f[None, :] for f in feats])]
        q, v, u = utility_triples(utilities, actions)
        per_state = []
        for s in range(S):
            state = np.zeros((J, S))
            state[:, s] = 1.0
            cond = conditioning(mixer.spec.conditioning, [np.broadcast_to(f, (J, f.size)) for f in feats], state)
            per_state.append(mixer.forward(p, q, v, u, cond, onehot).q.data)
            res = igm_check(JointValueTable(per_state[-1].reshape(mixer.action_counts), utilities), tol)
            if not res.holds:
                point_ok = False
                witness = witness or {"history": jh, "state": s, "joint_action": res.witness}
        post = state_posterior(env, [g for g, _ in jh])
        marg = np.tensordot(post, np.stack(per_state), axes=1)
        res = igm_check(JointValueTable(marg.reshape(mixer.action_counts), utilities), tol)
        if not res.holds:
            marg_ok = False
            witness = witness or {"history": jh, "state": "marginal", "joint_action": res.witness}
    return StatefulReport(point_ok and marg_ok, point_ok, marg_ok, witness)


def random_latent_game(rng: np.random.Generator, n_agents: int = 2, n_actions: int = 2, n_states: int = 2):
    payoff = rng.normal(size=(n_states,) + (n_actions,) * n_agents)
    return LatentStateMatrixGame(payoff, rng.dirichlet(np.ones(n_states)), float(rng.uniform(0.1, 0.9)))


def build_stateful_instance(kind: str, mode: str, env: LatentStateMatrixGame, rng: np.random.Generator, hidden: int = 16):
    agents = UtilityNetwork(
        [env.spec.obs_dim] * env.spec.n_agents, env.spec.action_counts, window=env.horizon, hidden=hidden
    )
    cdim = conditioning_dim(mode, [agents.feature_dim(i) for i in range(env.spec.n_agents)], env.spec.state_dim)
    mixer = Mixer(
        MixerSpec(kind, mode, mixing_hidden=hidden, hypernet_hidden=hidden, fixing_hidden=hidden),
        env.spec.n_agents,
        env.spec.action_counts,
        cdim,
    )
    store = ParamStore()
    agents.init_params(store, rng)
    mixer.init_params(store, rng)
    return agents, mixer, store


def suite_stateful(instances: int = 200, seed: int = 0, kinds: Sequence[str] | None = None) -> list[CheckReport]:
    kinds = kinds or ("qfix_sum", "qfix_mono", "qplusfix_sum", "qplusfix_mono", "qplusfix_lin")
    reports = []
    for kind in kinds:
        for mode in ("state_only", "history_state"):
            report = CheckReport(f"stateful/{kind}/{mode}")
            for k in range(instances):
                rng = instance_rng(seed, report.check_name, k)
                env = random_latent_game(rng)
                res = stateful_igm_check(env, *build_stateful_instance(kind, mode, env, rng))
                report.record(res.holds, {"instance": k, **(res.witness or {})})
            reports.append(report)
    report = CheckReport("stateful/point_mass_reduces_to_igm")
    for k in range(min(instances, 50)):
        rng = instance_rng(seed, report.check_name, k)
        env = random_latent_game(rng)
        env = LatentStateMatrixGame(env.payoff_per_state, np.array([1.0, 0.0]), env.rho)
        agents, mixer, store = build_stateful_instance("qplusfix_sum", "state_only", env, rng)
        report.record(stateful_igm_check(env, agents, mixer, store).holds, {"instance": k})
    reports.append(report)
    reports.append(completeness_witness_check(min(10, instances), seed=seed))
    return reports


# -- fitting ------------------------------------------------------------------


@dataclass
class FitResult:
    max_abs_error: float
    steps_used: int
    params: ParamStore
    predictions: np.ndarray

    def summary(self) -> dict:
        return {"max_abs_error": self.max_abs_error, "steps_used": self.steps_used}


@dataclass
class ConditionedTable:
    """One fitting target: a joint table and the conditioning vector the mixer sees with it."""

    cond: np.ndarray
    table: JointValueTable


def fit_tables(
    spec: MixerSpec,
    targets: Sequence[ConditionedTable],
    steps: int = 20_000,
    lr: float = 1e-2,
    stop_below: float = 1e-3,
    seed: int = 0,
    check_igm: bool = True,
) -> FitResult:
    """Fit mixer parameters to several tables jointly with utilities frozen at the targets'.

    Minimises the mean squared error over every (table, joint action) pair
    with Adam and stops once the sup-norm error drops below ``stop_below``.
    Q+FIX starts from the fixee (zero last fixing layers) and trains with
    advantages undetached: detaching changes only the gradients, and without
    it a nearly flat QMIX fixee can steepen its advantages instead of forcing
    the fixing weight to grow by orders of magnitude.
    """
    spec = replace(spec, detach_advantages=False)
    if not targets:
        raise VerificationError("no fitting targets")
    counts = targets[0].table.shape
    if any(t.table.shape != counts for t in targets):
        raise VerificationError("all fitting targets must share one joint action space")
    if check_igm:
        for t in targets:
            res = igm_check(t.table)
            if not res.holds:
                raise NotIgmError(res.witness)
    actions = enumerate_joint_actions(counts)
    J = len(actions)
    triples = [utility_triples(t.table.utilities, actions) for t in targets]
    q, v, u = (Tensor(np.concatenate([tr[j].data for tr in triples])) for j in range(3))
    cond = np.concatenate(
        [np.broadcast_to(np.asarray(t.cond, dtype=np.float64), (J, len(t.cond))) for t in targets]
    )
    y = np.concatenate([t.table.values.reshape(-1) for t in targets])
    mixer = Mixer(spec, len(counts), counts, cond.shape[1])
    onehot = np.tile(mixer.joint_action_onehot(actions), (len(targets), 1))
    store = ParamStore()
    rng = np.random.default_rng(seed)
    mixer.init_params(store, rng)
    if spec.additive:
        for name in ("mixer.fix_w.1.w", "mixer.fix_w.1.b", "mixer.fix_b.1.w", "mixer.fix_b.1.b"):
            store.set(name, np.zeros_like(store[name]))

    def predict(p):
        return mixer.forward(p, q, v, u, cond, onehot).q

    target = Tensor(y)
    err = np.inf
    used = 0
    for used in range(steps + 1):
        if not store.names():
            err = float(np.max(np.abs(predict(store.constants()).data - y)))
            break
        with Tape() as tape:
            p = store.watch(tape)
            pred = predict(p)
            err = float(np.max(np.abs(pred.data - y)))
            if err < stop_below or used == steps:
                break
            grads = store.gradients(p, backward(mse(pred, target)))
        adam_step(store, grads, lr)
    preds = predict(store.constants()).data
    return FitResult(float(np.max(np.abs(preds - y))), used, store, preds.reshape((len(targets),) + counts))


def fit_target_table(
    spec: MixerSpec | str,
    target: JointValueTable,
    steps: int = 20_000,
    lr: float = 1e-2,
    stop_below: float = 1e-3,
    seed: int = 0,
    cond_dim: int = 4,
) -> FitResult:
    """Fit one joint table under a fixed random conditioning vector."""
    if isinstance(spec, str):
        spec = MixerSpec(spec)
    cond = np.random.default_rng(seed).normal(size=cond_dim)
    return fit_tables(spec, [ConditionedTable(cond, target)], steps, lr, stop_below, seed)


@dataclass
class AdditiveFit:
    utilities: list[np.ndarray]
    fitted: np.ndarray
    residual: float
    max_abs_error: float
    greedy_action: tuple[int, ...]


def best_additive_fit(target: JointValueTable | np.ndarray) -> AdditiveFit:
    """Exact least-squares fit ``Q(ja) ~ sum_i q_i(a_i)`` over the enumerated table.

    ``residual`` is the root-mean-square error; the fitted utilities carry the
    global constant on agent 0. Greedy ties resolve to the lowest index.
    """
    values = target.values if isinstance(target, JointValueTable) else np.asarray(target, dtype=np.float64)
    counts = values.shape
    actions = enumerate_joint_actions(counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    X = np.zeros((len(actions), sum(counts)))
    for i in range(len(counts)):
        X[np.arange(len(actions)), offsets[i] + actions[:, i]] = 1.0
    coef, *_ = np.linalg.lstsq(X, values.reshape(-1), rcond=None)
    utilities = [coef[o : o + n] for o, n in zip(offsets, counts)]
    fitted = (X @ coef).reshape(counts)
    diff = fitted - values
    greedy = tuple(int(np.argmax(np.round(q, 12))) for q in utilities)
    return AdditiveFit(
        utilities, fitted, float(np.sqrt(np.mean(diff**2))), float(np.max(np.abs(diff))), greedy
    )


def grid_additive_residual(values: np.ndarray, grid: np.ndarray) -> float:
    """Brute-force RMS residual of the best additive fit for two agents over a utility grid.

    Agent 0's utilities are searched on ``grid``; agent 1's best response is
    the exact column mean of the remainder, so the search is over one agent only.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise VerificationError("grid oracle handles two agents only")
    best = np.inf
    for q0 in itertools.product(grid, repeat=values.shape[0]):
        rest = values - np.array(q0)[:, None]
        fit = np.array(q0)[:, None] + rest.mean(axis=0)[None, :]
        best = min(best, float(np.sqrt(np.mean((fit - values) ** 2))))
    return best


def _weak_orders(n: int) -> list[tuple[int, ...]]:
    """Every weak ordering of ``n`` items as a rank vector (ranks need not be contiguous)."""
    seen = set()
    for ranks in itertools.product(range(n), repeat=n):
        used = sorted(set(ranks))
        key = tuple(used.index(r) for r in ranks)
        seen.add(key)
    return sorted(seen)


def monotone_sup_lower_bound(values: np.ndarray) -> float:
    """Least sup-norm error of any function monotone in per-agent utilities.

    For each weak ordering of every agent's actions, the best L-inf isotonic
    fit under the induced product order has error ``max (Q(x) - Q(y)) / 2`` over
    pairs with ``x <= y``; the bound is the minimum over all orderings.
    """
    values = np.asarray(values, dtype=np.float64)
    counts = values.shape
    actions = enumerate_joint_actions(counts)
    flat = values.reshape(-1)
    best = np.inf
    for ranks in itertools.product(*(_weak_orders(n) for n in counts)):
        r = np.stack([np.array(rk)[actions[:, i]] for i, rk in enumerate(ranks)], axis=-1)
        leq = np.all(r[:, None, :] <= r[None, :, :], axis=-1)
        gap = np.where(leq, flat[:, None] - flat[None, :], -np.inf).max()
        best = min(best, max(0.0, float(gap) / 2.0))
    return best


def fit_free_utilities(
    kind: str,
    values: np.ndarray,
    steps: int = 5000,
    lr: float = 1e-2,
    seed: int = 0,
) -> float:
    """Jointly train per-agent utility tables and a mixer on a full table; returns the sup-norm error."""
    values = np.asarray(values, dtype=np.float64)
    counts = values.shape
    actions = enumerate_joint_actions(counts)
    rng = np.random.default_rng(seed)
    spec = MixerSpec(kind)
    mixer = Mixer(spec, len(counts), counts, 4)
    store = ParamStore()
    mixer.init_params(store, rng)
    for i, n in enumerate(counts):
        store.add(f"table.{i}", rng.normal(scale=0.1, size=n))
    cond = np.broadcast_to(rng.normal(size=4), (len(actions), 4))
    onehot = mixer.joint_action_onehot(actions)
    y = values.reshape(-1)
    def predict(p):
        qs = [Tensor(np.zeros((len(actions), 1))) @ Tensor(np.ones((1, n))) + p[f"table.{i}"] for i, n in enumerate(counts)]
        q, v, u = joint_utilities(qs, actions)
        return mixer.forward(p, q, v, u, cond, onehot).q

    for _ in range(steps):
        with Tape() as tape:
            p = store.watch(tape)
            grads = store.gradients(p, backward(mse(predict(p), Tensor(y))))
        adam_step(store, grads, lr)
    return float(np.max(np.abs(predict(store.constants()).data - y)))


def completeness_fit_check(
    kinds: Sequence[str] = ("qplusfix_sum", "qplusfix_mono", "qplusfix_lin"),
    instances: int = 50,
    seed: int = 0,
    threshold: float = 1e-2,
    steps: int = 20_000,
) -> list[CheckReport]:
    """Fit random 2-agent x 3-action IGM targets; a failure is a sup error at or above ``threshold``."""
    reports = []
    for kind in kinds:
        report = CheckReport(f"completeness/{kind}")
        errors = []
        for k in range(instances):
            target = random_igm_table(instance_rng(seed, "completeness/targets", k), (3, 3))
            res = fit_target_table(kind, target, steps=steps, seed=k)
            errors.append(res.max_abs_error)
            report.record(res.max_abs_error < threshold, {"instance": k, **res.summary()})
        report.details["median_error"] = float(np.median(errors))
        reports.append(report)
    vdn_errors = []
    for k in range(instances):
        target = random_igm_table(instance_rng(seed, "completeness/targets", k), (3, 3))
        vdn_errors.append(fit_target_table("vdn", target).max_abs_error)
    report = CheckReport("completeness/vdn_baseline_gap")
    report.record(float(np.median(vdn_errors)) >= 0.1, {"median_error": float(np.median(vdn_errors))})
    report.details["median_error"] = float(np.median(vdn_errors))
    reports.append(report)
    return reports


def penalty_fixture_check() -> list[CheckReport]:
    """The additive least-squares fit of the penalty game misses the optimum; monotone fits stay far off."""
    payoff = np.array(PENALTY_PAYOFF)
    fit = best_additive_fit(payoff)
    additive = CheckReport("completeness/penalty_additive_fit")
    additive.record(
        fit.residual > 1.0 and fit.greedy_action != (0, 0),
        {"residual": fit.residual, "greedy_action": fit.greedy_action},
    )
    additive.details.update(residual=fit.residual, max_abs_error=fit.max_abs_error, greedy_action=fit.greedy_action)
    bound = monotone_sup_lower_bound(payoff)
    mono = CheckReport("completeness/penalty_monotone_bound")
    mono.record(bound > 0.5, {"lower_bound": bound})
    mono.details["lower_bound"] = bound
    return [additive, mono]


def completeness_witness_target(rng: np.random.Generator, env: LatentStateMatrixGame, agents: UtilityNetwork):
    """Two joint histories with equal observations and utilities but different values.

    The histories differ only in the previous joint action, so the state
    posterior and any state-only conditioning coincide, while the target
    values differ by a gap in ``[0.5, 2]``. Returns ``(targets_state_only,
    targets_history_state, gap)``.
    """
    S = env.n_states
    n = env.spec.n_agents
    counts = env.spec.action_counts
    guesses = [(int(rng.integers(S)), int(rng.integers(S))) for _ in range(n)]
    h_a = tuple((g, (0,)) for g in guesses)
    h_b = tuple((g, (1,)) for g in guesses)
    utilities = [rng.normal(size=a) for a in counts]
    greedy = tuple(int(np.argmax(q)) for q in utilities)
    adv = -rng.uniform(0.1, 5.0, size=tuple(counts))
    adv[greedy] = 0.0
    values = rng.normal(size=S)
    gap = float(rng.uniform(0.5, 2.0))
    state_only, history_state = [], []
    for h, shift in ((h_a, 0.0), (h_b, gap)):
        feats = history_features(env, agents, h)
        for s in range(S):
            state = np.zeros(S)
            state[s] = 1.0
            table = JointValueTable(values[s] + shift + adv, utilities)
            state_only.append(ConditionedTable(conditioning("state_only", feats, state), table))
            history_state.append(ConditionedTable(conditioning("history_state", feats, state), table))
    return state_only, history_state, gap


def completeness_witness_check(instances: int = 10, seed: int = 0, threshold: float = 0.05, steps: int = 20_000) -> CheckReport:
    """State-only fixing cannot fit a history-dependent target; history-state fixing can."""
    report = CheckReport("stateful/state_only_completeness_witness")
    reproduced = 0
    for k in range(instances):
        rng = instance_rng(seed, report.check_name, k)
        env = random_latent_game(rng)
        agents = UtilityNetwork([env.spec.obs_dim] * 2, env.spec.action_counts, window=env.horizon)
        so, hs, gap = completeness_witness_target(rng, env, agents)
        err_so = fit_tables(MixerSpec("qplusfix_sum", "state_only"), so, steps=steps, seed=k).max_abs_error
        err_hs = fit_tables(MixerSpec("qplusfix_sum", "history_state"), hs, steps=steps, seed=k).max_abs_error
        ok = err_so >= threshold and err_hs < threshold
        reproduced += ok
        report.record(ok, {"instance": k, "state_only_error": err_so, "history_state_error": err_hs, "gap": gap})
    report.details["reproduced"] = reproduced
    return report


def suite_completeness(instances: int = 50, seed: int = 0) -> list[CheckReport]:
    reports = completeness_fit_check(instances=instances, seed=seed)
    reports += penalty_fixture_check()
    for kind in KINDS:
        if MixerSpec(kind).fixee is not None:
            reports.append(recovery_check(kind, 4 * instances, seed=seed))
    return reports


# -- gradients ----------------------------------------------------------------


def detach_check(kind: str, detach: bool, rng: np.random.Generator, batch: int = 4) -> tuple[bool, float]:
    """Compare agent-parameter gradients of Q+FIX and of its fixee via two backward passes.

    Returns ``(equal_within_1e-10, max_abs_difference)``.
    """
    n = int(rng.integers(2, 4))
    A = int(rng.integers(2, 6))
    obs_dim = 3
    agents = UtilityNetwork([obs_dim] * n, [A] * n, window=2, hidden=8)
    feats = [rng.normal(size=(batch, agents.feature_dim(i))) for i in range(n)]
    mixer = Mixer(MixerSpec(kind, detach_advantages=detach, mixing_hidden=8, hypernet_hidden=8, fixing_hidden=8), n, (A,) * n, 5)
    store = ParamStore()
    agents.init_params(store, rng)
    mixer.init_params(store, rng)
    actions = rng.integers(A, size=(batch, n))
    cond = rng.normal(size=(batch, 5))
    onehot = mixer.joint_action_onehot(actions)
    def agent_grads(pick: Callable) -> np.ndarray:
        with Tape() as tape:
            p = store.watch(tape)
            q, v, u = joint_utilities(agents.all_utilities(p, feats), actions)
            out = mixer.forward(p, q, v, u, cond, onehot)
            root = pick(out)
            g = store.gradients(p, backward(sum_(root)))
        return np.concatenate([g[k].ravel() for k in store.names("agent")])

    g_total = agent_grads(lambda o: o.q)
    g_fixee = agent_grads(lambda o: o.q_fixee)
    diff = float(np.max(np.abs(g_total - g_fixee)))
    return diff <= 1e-10, diff


def suite_detach(instances: int = 200, seed: int = 0) -> list[CheckReport]:
    reports = []
    for kind in ("qplusfix_sum", "qplusfix_mono", "qplusfix_lin"):
        on = CheckReport(f"detach/{kind}/on")
        off = CheckReport(f"detach/{kind}/off_differs")
        differ = 0
        for k in range(instances):
            ok, diff = detach_check(kind, True, instance_rng(seed, on.check_name, k))
            on.record(ok, {"instance": k, "max_abs_difference": diff})
            same, diff = detach_check(kind, False, instance_rng(seed, off.check_name, k))
            differ += not same
        off.instances = instances
        off.details["differ_fraction"] = differ / instances
        if differ < 0.95 * instances:
            off.failures = 1
            off.witnesses.append({"differ_fraction": differ / instances})
        reports += [on, off]
    return reports


@dataclass
class GradCheck:
    rel_error: float
    kink_margin: float
    resamples: int


def finite_difference_check(
    build: Callable[[np.random.Generator], tuple[ParamStore, Callable[[dict], Tensor]]],
    rng: np.random.Generator,
    h: float = 1e-5,
    min_kink_margin: float = 1e-3,
    max_resamples: int = 100,
) -> GradCheck:
    """Central differences of a scalar objective against reverse mode over every parameter.

    ``build`` draws a fresh instance and returns the parameters with the
    objective. Instances whose forward pass comes within ``min_kink_margin``
    of a relu, abs or max kink are redrawn, since the finite difference would
    straddle the kink.
    """
    for resamples in range(max_resamples):
        store, objective = build(rng)
        with Tape() as tape:
            p = store.watch(tape)
            out = objective(p)
            margin = tape.kink_margin
            if margin < min_kink_margin:
                continue
            grads = store.gradients(p, backward(out))
        analytic, numeric = [], []
        for name in store.names():
            base = store[name].copy()
            fd = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                for sign in (1.0, -1.0):
                    bumped = base.copy()
                    bumped[idx] += sign * h
                    store.set(name, bumped)
                    fd[idx] += sign * objective(store.constants()).item()
                fd[idx] /= 2.0 * h
            store.set(name, base)
            analytic.append(grads[name].ravel())
            numeric.append(fd.ravel())
        a = np.concatenate(analytic) if analytic else np.zeros(0)
        n = np.concatenate(numeric) if numeric else np.zeros(0)
        denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
        return GradCheck(float(np.linalg.norm(a - n) / denom), margin, resamples)
    raise VerificationError(f"no kink-free instance after {max_resamples} draws")


def _mixer_builder(kind: str):
    def build(rng: np.random.Generator):
        n = int(rng.integers(2, 4))
        counts = tuple(int(a) for a in rng.integers(2, 4, size=n))
        B = 3
        # stop-gradients make the tape disagree with finite differences by design,
        # so the forward math is checked undetached; the detach suite covers the rest
        mixer = Mixer(
            MixerSpec(kind, mixing_hidden=3, hypernet_hidden=3, fixing_hidden=4, detach_advantages=False),
            n,
            counts,
            2,
        )
        store = ParamStore()
        mixer.init_params(store, rng)
        utilities = [rng.normal(size=(B, a)) for a in counts]
        actions = np.stack([rng.integers(a, size=B) for a in counts], axis=-1)
        q = np.stack([ut[np.arange(B), actions[:, i]] for i, ut in enumerate(utilities)], axis=-1)
        v = np.stack([ut.max(axis=-1) for ut in utilities], axis=-1)
        cond = rng.normal(size=(B, 2))
        onehot = mixer.joint_action_onehot(actions)
        weights = Tensor(rng.normal(size=B))

        def objective(p):
            out = mixer.forward(p, Tensor(q), Tensor(v), Tensor(q - v), cond, onehot).q
            return sum_(out * weights)

        return store, objective

    return build


def _agent_builder(rng: np.random.Generator):
    n = int(rng.integers(2, 4))
    A = int(rng.integers(2, 5))
    agents = UtilityNetwork([2] * n, [A] * n, window=2, hidden=5)
    store = ParamStore()
    agents.init_params(store, rng)
    feats = [rng.normal(size=(3, agents.feature_dim(i))) for i in range(n)]
    weights = [Tensor(rng.normal(size=(3, A))) for _ in range(n)]
    def objective(p):
        total = None
        for qi, wi in zip(agents.all_utilities(p, feats), weights):
            term = sum_(qi * wi)
            total = term if total is None else total + term
        return total

    return store, objective


def grad_check_all(instances: int = 100, seed: int = 0, tol: float = 1e-4) -> list[CheckReport]:
    """Finite-difference checks for every mixer kind and the utility network."""
    builders = {f"grad/{kind}": _mixer_builder(kind) for kind in KINDS}
    builders["grad/utility_network"] = _agent_builder
    reports = []
    for name, build in builders.items():
        report = CheckReport(name)
        worst = 0.0
        for k in range(instances):
            res = finite_difference_check(build, instance_rng(seed, name, k))
            worst = max(worst, res.rel_error)
            report.record(res.rel_error < tol, {"instance": k, "rel_error": res.rel_error})
        report.details["max_rel_error"] = worst
        reports.append(report)
    return reports


SUITES: dict[str, Callable[..., list[CheckReport]]] = {
    "igm": suite_igm,
    "stateful": suite_stateful,
    "detach": suite_detach,
    "grad": grad_check_all,
    "completeness": suite_completeness,
}


def run_suite(name: str, seed: int = 0, instances: int | None = None) -> list[CheckReport]:
    """Run one named suite, or every suite for ``"all"``; ``instances`` overrides the default counts."""
    kwargs = {"seed": seed} if instances is None else {"seed": seed, "instances": instances}
    if name == "all":
        return [r for suite in SUITES.values() for r in suite(**kwargs)]
    if name not in SUITES:
        raise VerificationError(f"unknown suite {name!r}; expected one of {', '.join(SUITES)} or all")
    return SUITES[name](**kwargs)
