import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qfixlab import mixers as mx
from qfixlab.autodiff import ParamStore, Tape, Tensor, backward, sum_
from qfixlab.mixers import Mixer, MixerError, MixerSpec, WEIGHT_EPS
from qfixlab.verification import enumerate_joint_actions, igm_check, random_mixer_instance, utility_triples


def T(x):
    return Tensor(np.asarray(x, dtype=float))


def test_spec_validation_and_properties():
    with pytest.raises(MixerError, match="unknown mixer kind"):
        MixerSpec("qtran")
    with pytest.raises(MixerError, match="conditioning"):
        MixerSpec("vdn", conditioning="oracle")
    assert MixerSpec("qfix_mono").fixee == "qmix"
    assert MixerSpec("qplusfix_lin").fixee == "vdn"
    assert MixerSpec("qmix").fixee is None
    assert not MixerSpec("qfix_sum").uses_detach and MixerSpec("qplex").uses_detach


def test_vdn_has_no_parameters():
    store = ParamStore()
    Mixer(MixerSpec("vdn"), 2, (3, 3), 4).init_params(store, np.random.default_rng(0))
    assert len(store) == 0


def test_vdn_examples():
    Q, V, A = mx.vdn_q(T([[1, 2]]), T([[1, 3]]), T([[0, -1]]))
    assert (Q.data.item(), V.data.item(), A.data.item()) == (3.0, 4.0, -1.0)
    Q, V, A = mx.vdn_q(T([[2, 3]]), T([[2, 3]]), T([[0, 0]]))
    assert A.data.item() == 0.0
    q, v = np.array([[0.5, -1.0, 2.0]]), np.array([[1.0, 0.0, 2.0]])
    Q, V, A = mx.vdn_q(T(q), T(v), T(q - v))
    assert A.data.item() == -1.5 and abs(A.data.item() - (Q.data.item() - V.data.item())) < 1e-12


def qmix_params(rng, n, hidden=32, cond_dim=3):
    store = ParamStore()
    Mixer(MixerSpec("qmix", mixing_hidden=hidden), n, (3,) * n, cond_dim).init_params(store, rng)
    return store


def test_qmix_all_greedy_gives_zero_advantage(rng):
    store = qmix_params(rng, 3)
    v = rng.normal(size=(4, 3))
    Q, V, A = mx.qmix_q(store.constants(), T(v), T(v), rng.normal(size=(4, 3)), 32)
    assert np.array_equal(Q.data, V.data) and np.all(A.data == 0.0)


def test_qmix_monotone_in_every_utility():
    for k in range(1000):
        rng = np.random.default_rng(k)
        n = int(rng.integers(2, 4))
        store = qmix_params(rng, n, hidden=8)
        with Tape() as tape:
            q = tape.watch(rng.normal(size=(1, n)) * 3)
            Q, _, _ = mx.qmix_q(store.constants(), q, Tensor(np.zeros((1, n))), rng.normal(size=(1, 3)), 8)
            g = backward(sum_(Q))[q.node]
        assert np.all(g >= 0.0)


def test_qmix_identity_weights_reproduce_vdn(rng):
    n, H, C = 3, 4, 2
    store = qmix_params(rng, n, hidden=H, cond_dim=C)
    big = 100.0
    w1 = np.zeros((n, H))
    w1[np.arange(n), np.arange(n)] = 1.0
    # hypernets output constants: zero the weights, put the target in the biases
    for name in store.names("mixer."):
        store.set(name, 0.0)
    store.set("mixer.hyper_w1.1.b", w1.reshape(-1))
    store.set("mixer.hyper_b1.0.b", np.full(H, big))
    store.set("mixer.hyper_w2.1.b", np.array([1.0, 1.0, 1.0, 0.0]))
    store.set("mixer.hyper_b2.1.b", np.array([-n * big]))
    q = rng.normal(size=(5, n))
    v = q.max(axis=0, keepdims=True).repeat(5, 0) + 1.0
    Q, V, A = mx.qmix_q(store.constants(), T(q), T(v), rng.normal(size=(5, C)), H)
    Qv, Vv, Av = mx.vdn_q(T(q), T(v), T(q - v))
    assert np.allclose(Q.data, Qv.data, atol=1e-12) and np.allclose(A.data, Av.data, atol=1e-12)


def test_qplex_examples():
    w, b, lam = T([[1.5, 0.5]]), T([[0.2, -0.1]]), T([[3.0, 7.0]])
    v = T([[1.0, 2.0]])
    q0 = mx.qplex_combine(w, b, lam, v, T([[0.0, 0.0]]), detach=True)
    assert q0.data.item() == pytest.approx(1.5 + 0.2 + 1.0 - 0.1)
    q, v = np.array([[1.0, -2.0]]), np.array([[2.0, 0.5]])
    unit = mx.qplex_combine(T([[1, 1]]), T([[0, 0]]), T([[1, 1]]), T(v), T(q - v), detach=False)
    assert unit.data.item() == pytest.approx(q.sum())


@pytest.mark.parametrize("detach", [True, False])
def test_qplex_advantage_gradient(detach):
    w, lam = np.array([[1.5, 0.5]]), np.array([[3.0, 7.0]])
    with Tape() as tape:
        u = tape.watch(np.array([[-1.0, -0.3]]))
        out = mx.qplex_combine(T(w), T([[0, 0]]), T(lam), T([[1, 1]]), u, detach)
        g = backward(sum_(out)).get(u.node, np.zeros((1, 2)))
    assert np.allclose(g, 0.0 if detach else lam * w)


def test_weight_transforms():
    x = T([-3.0, 0.0, 2.0])
    assert np.allclose(mx.shifted_weight(x).data, [1 + 10e-8, 10e-8, 2 + 10e-8], atol=0)
    assert mx.shifted_weight(T([-3.0])).data.item() == abs(-3.0 + 1.0) - 1.0 + 10e-8
    assert np.all(mx.positive_weight(x).data > 0)
    assert WEIGHT_EPS == 1e-7


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e6, 1e6))
def test_shifted_weight_range(x):
    w = mx.shifted_weight(T([x])).data.item()
    assert w > -1.0


def test_qfix_examples():
    assert mx.qfix_combine(T([2.0]), T([-1.5]), T([0.7])).data.item() == pytest.approx(-2.3)
    assert mx.qfix_combine(T([123.0]), T([0.0]), T([0.7])).data.item() == 0.7
    assert mx.qfix_lin_combine(T([[1, 2]]), T([[-1, -0.5]]), T([0.0])).data.item() == -2.0
    assert mx.qfix_lin_combine(T([[5, 9]]), T([[0, 0]]), T([0.4])).data.item() == 0.4


def test_qfix_lin_with_equal_weights_is_qfix_sum(rng):
    u = -np.abs(rng.normal(size=(6, 3)))
    w = np.abs(rng.normal(size=6))
    b = rng.normal(size=6)
    lin = mx.qfix_lin_combine(T(np.repeat(w[:, None], 3, 1)), T(u), T(b))
    s = mx.qfix_combine(T(w), T(u.sum(-1)), T(b))
    assert np.allclose(lin.data, s.data, atol=1e-12)


def test_qplusfix_examples():
    qf = T([7.0])
    assert mx.qplusfix_combine(qf, T([0.0]), T([-2.0]), T([0.0]), True).data.item() == 7.0
    q, u = np.array([[2.0, 3.0]]), np.array([[-1.0, 0.0]])
    Qf, _, A = mx.vdn_q(T(q), T(q - u), T(u))
    assert mx.qplusfix_combine(Qf, T([1.0]), A, T([0.5]), True).data.item() == pytest.approx(4.5)


def test_intervention_examples():
    assert mx.intervention(T([0.0]), T([-4.0]), T([0.0])).data.item() == 0.0
    assert mx.intervention(T([2.0]), T([-1.0]), T([3.0])).data.item() == 1.0


def _forward_all(inst, kind_override=None):
    actions = enumerate_joint_actions(inst.mixer.action_counts)
    q, v, u = utility_triples(inst.utilities, actions)
    cond = np.broadcast_to(inst.cond, (len(actions), inst.cond.shape[-1]))
    return inst.mixer.forward(inst.store.constants(), q, v, u, cond, inst.mixer.joint_action_onehot(actions)), (q, v, u, cond, actions)


@pytest.mark.parametrize("kind", ["qplusfix_sum", "qplusfix_mono", "qplusfix_lin"])
def test_qplusfix_is_fixee_plus_intervention(kind, rng):
    for _ in range(20):
        out, _ = _forward_all(random_mixer_instance(kind, "stateless", rng))
        assert np.allclose(out.q.data, out.q_fixee.data + out.delta.data, atol=1e-12)


@pytest.mark.parametrize("kind", ["qplusfix_sum", "qplusfix_mono", "qplusfix_lin"])
def test_qplusfix_reparameterises_qfix(kind, rng):
    for _ in range(50):
        inst = random_mixer_instance(kind, "stateless", rng)
        spec = inst.mixer.spec
        actions = enumerate_joint_actions(inst.mixer.action_counts)
        q, v, u = utility_triples(inst.utilities, actions)
        cond = np.broadcast_to(inst.cond, (len(actions), inst.cond.shape[-1]))
        p = inst.store.constants()
        qf, vf, af = mx.fixee_q(spec.fixee, p, q, v, u, cond, spec.mixing_hidden)
        w, b = mx.fixing_outputs(p, cond, inst.mixer.joint_action_onehot(actions), additive=True)
        plus = mx.qplusfix_combine(qf, w, u if spec.per_agent_weights else af, b, detach=True)
        w1 = T(w.data + 1.0)
        fixed = (
            mx.qfix_lin_combine(w1, u, T(b.data + vf.data))
            if spec.per_agent_weights
            else mx.qfix_combine(w1, af, T(b.data + vf.data))
        )
        assert np.allclose(plus.data, fixed.data, atol=1e-12)


@pytest.mark.parametrize("kind", mx.KINDS)
@pytest.mark.parametrize("mode", ["stateless", "state_only"])
def test_random_mixers_satisfy_igm(kind, mode):
    for k in range(100):
        inst = random_mixer_instance(kind, mode, np.random.default_rng(k))
        res = igm_check(inst.table())
        assert res.holds, (k, res.witness)


def test_conditioning_modes(rng):
    feats = [rng.normal(size=(4, 3)), rng.normal(size=(4, 5))]
    state = rng.normal(size=(4, 2))
    assert mx.conditioning("stateless", feats, state).shape == (4, 8)
    assert np.array_equal(mx.conditioning("state_only", feats, state), state)
    assert mx.conditioning("history_state", feats, state).shape == (4, 10)
    assert mx.conditioning_dim("history_state", [3, 5], 2) == 10
    with pytest.raises(MixerError):
        mx.conditioning("other", feats, state)


def test_forward_rejects_wrong_conditioning(rng):
    inst = random_mixer_instance("qfix_sum", "stateless", rng, action_counts=(2, 2))
    q, v, u = utility_triples(inst.utilities, np.array([[0, 1]]))
    with pytest.raises(MixerError, match="conditioning shape"):
        inst.mixer.forward(inst.store.constants(), q, v, u, np.zeros((1, 1)), inst.mixer.joint_action_onehot([[0, 1]]))


def test_checkpoint_roundtrip(tmp_path, rng):
    inst = random_mixer_instance("qplusfix_mono", "history_state", rng, action_counts=(3, 2))
    path = tmp_path / "mixer.json"
    mx.save_mixer(path, inst.mixer, inst.store)
    mixer, store = mx.load_mixer(path)
    assert mixer.spec == inst.mixer.spec
    inst2 = type(inst)(mixer, store, inst.cond, inst.utilities)
    assert np.array_equal(inst.table().values, inst2.table().values)
