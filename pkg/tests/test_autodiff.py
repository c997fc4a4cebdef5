import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moodtheme import autodiff as ad
from moodtheme.autodiff import Tensor


def naive_conv(x, w, stride=1, padding=0):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    for ic in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                out[b, oc, i, j] += xp[b, ic, i * stride + a, j * stride + bb] * w[oc, ic, a, bb]
    return out


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(ad.conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv_3x3_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 1, 4, 4))
    w = rng.normal(size=(1, 1, 3, 3))
    out = ad.conv2d(Tensor(x), Tensor(w)).data
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_allclose(out, naive_conv(x, w), rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_strided_padded_matches_oracle(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    out = ad.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
    np.testing.assert_allclose(out, naive_conv(x, w, stride, padding), atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 4), c=st.integers(1, 4), h=st.integers(3, 8), w=st.integers(3, 8),
       stride=st.integers(1, 2), seed=st.integers(0, 1000))
def test_depthwise_equals_channelwise(n, c, h, w, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, c, h, w))
    k = rng.normal(size=(c, 1, 3, 3))
    grouped = ad.conv2d(Tensor(x), Tensor(k), stride=stride, padding=1, groups=c).data
    for ch in range(c):
        single = ad.conv2d(Tensor(x[:, ch:ch + 1]), Tensor(k[ch:ch + 1]), stride=stride, padding=1).data
        np.testing.assert_allclose(grouped[:, ch:ch + 1], single, atol=1e-12)


def test_conv_shape_errors():
    x = Tensor(np.zeros((1, 4, 5, 5)))
    with pytest.raises(ad.ShapeError):
        ad.conv2d(x, Tensor(np.zeros((2, 3, 3, 3))))
    with pytest.raises(ad.ShapeError):
        ad.conv2d(x, Tensor(np.zeros((2, 4, 7, 7))))
    with pytest.raises(ad.ShapeError):
        ad.conv2d(Tensor(np.zeros((4, 5, 5))), Tensor(np.zeros((2, 4, 3, 3))))


def test_softmax_equal_logits():
    np.testing.assert_allclose(ad.softmax(Tensor(np.array([2.0, 2.0, 2.0]))).data, [1 / 3] * 3, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_distribution(row):
    p = ad.softmax(Tensor(np.array(row))).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-9


def test_mean_gradient():
    x = Tensor(np.arange(4.0), requires_grad=True)
    ad.backward(ad.mean(x))
    np.testing.assert_array_equal(x.grad, [0.25] * 4)


def test_sigmoid_gradient_at_zero():
    x = Tensor(np.zeros(1), requires_grad=True)
    ad.backward(ad.mean(ad.sigmoid(x)))
    assert x.grad[0] == pytest.approx(0.25, abs=1e-15)


def test_scale_on_zero_input_gives_factor():
    for shape in [(1,), (2, 3)]:
        x = Tensor(np.zeros(shape), requires_grad=True)
        y = ad.scale(x, 3.5)
        for idx in np.ndindex(*shape):
            x.zero_grad()
            ad.backward(ad.reshape(ad.slice_(y, idx), ()))
            expected = np.zeros(shape)
            expected[idx] = 3.5
            np.testing.assert_array_equal(x.grad, expected)


def test_grad_check_spec_cases():
    assert ad.grad_check("linear", {"w": (3, 4)}, 1e-4).passed
    assert ad.grad_check("relu6", {"x": (8,)}, 1e-4).passed


def test_grad_check_suite_covers_every_op():
    reports = ad.grad_check_suite()
    kinds = {r.op_kind for r in reports}
    assert set(ad.OP_KINDS) <= kinds
    bad = [str(r) for r in reports if not r.passed]
    assert not bad, bad


def test_grad_check_detects_wrong_rule(monkeypatch):
    rule = ad.OPS["sigmoid"]

    def broken(gy, saved, x):
        (gx,) = rule.backward(gy, saved, x)
        return (gx * 1.01,)

    monkeypatch.setitem(ad.OPS, "sigmoid", type(rule)(rule.name, rule.forward, broken))
    assert not ad.grad_check("sigmoid").passed


def test_composite_graph_gradients():
    rng = np.random.default_rng(3)

    def fn(ts):
        x, w, g, b = ts
        h = ad.conv2d(x, w, padding=1)
        h = ad.batch_norm_2d(h, g, b, np.zeros(3), np.ones(3), training=True)
        h = ad.relu6(h)
        h = ad.global_avg_pool_2d(h)
        return ad.mean(ad.bce_with_logits(h, np.array([[1.0, 0.0, 1.0], [0.0, 0.5, 1.0]])))

    arrays = [rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3)),
              rng.normal(size=3) + 1.5, rng.normal(size=3)]
    assert ad.check_function(fn, arrays) < 1e-4


def test_gradients_accumulate_until_reset():
    x = Tensor(np.ones(3), requires_grad=True)
    ad.backward(ad.mean(x))
    ad.backward(ad.mean(x))
    np.testing.assert_allclose(x.grad, [2 / 3] * 3)
    x.zero_grad()
    assert x.grad is None


def test_shared_subexpression_visited_once():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = ad.scale(x, 2.0)
    z = ad.add(y, y)  # dz/dx = 4
    ad.backward(ad.mean(z))
    np.testing.assert_allclose(x.grad, [2.0, 2.0])
    tape = ad.Tape.from_output(ad.mean(z))
    ids = [n.output_id for n in tape.nodes]
    assert len(ids) == len(set(ids))


def test_tape_topological_order():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    out = ad.mean(ad.relu(ad.add(ad.scale(x, 2.0), x)))
    tape = ad.Tape.from_output(out)
    position = {n.output_id: i for i, n in enumerate(tape.nodes)}
    for i, node in enumerate(tape.nodes):
        for inp in node.inputs:
            if inp.node is not None:
                assert position[inp.id] < i


def test_batch_norm_eval_identity_twice():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))

    def bn(t, eps):
        return ad.batch_norm_2d(t, g, b, np.zeros(3), np.ones(3), training=False, eps=eps)

    twice = bn(bn(Tensor(x), 0.0), 0.0)
    np.testing.assert_allclose(twice.data, x, rtol=0, atol=1e-6)
    # with the default eps each pass divides by sqrt(1 + eps)
    twice = bn(bn(Tensor(x), 1e-5), 1e-5)
    np.testing.assert_allclose(twice.data, x / (1 + 1e-5), rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_batch_norm_eval_is_affine(seed):
    rng = np.random.default_rng(seed)
    c = 3
    mu, var = rng.normal(size=c), rng.uniform(0.5, 2, size=c)
    gamma, beta = rng.normal(size=c), rng.normal(size=c)

    def f(a):
        return ad.batch_norm_2d(Tensor(a), Tensor(gamma), Tensor(beta), mu, var, training=False).data

    a, b = rng.normal(size=(2, c, 3, 3)), rng.normal(size=(2, c, 3, 3))
    t = rng.uniform()
    np.testing.assert_allclose(f(t * a + (1 - t) * b), t * f(a) + (1 - t) * f(b), atol=1e-12)
    np.testing.assert_array_equal(f(a), f(a))


def test_batch_norm_running_stats_update():
    rng = np.random.default_rng(2)
    x = rng.normal(2.0, 3.0, size=(4, 2, 5, 5))
    rm, rv = np.zeros(2), np.ones(2)
    ad.batch_norm_2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
    flat = x.transpose(1, 0, 2, 3).reshape(2, -1)
    np.testing.assert_allclose(rm, 0.1 * flat.mean(axis=1))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * flat.var(axis=1, ddof=1))


def test_non_finite_forward_raises():
    with pytest.raises(ad.NumericError, match="add"):
        ad.add(Tensor(np.array([np.inf])), Tensor(np.array([1.0])))


def test_backward_contract_errors():
    with pytest.raises(ad.ContractError):
        ad.backward(Tensor(np.ones(3), requires_grad=True))
    with pytest.raises(ad.ContractError):
        ad.backward(ad.mean(Tensor(np.ones(3))))
    with pytest.raises(ad.ContractError):
        ad.apply("no_such_op", [Tensor(np.ones(1))])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.relu(x)
    assert y.node is None and not y.requires_grad


def test_forward_replay_determinism():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 4, 6, 6))
    w = rng.normal(size=(4, 2, 3, 3))

    def run():
        h = ad.conv2d(Tensor(x), Tensor(w), padding=1, groups=2)
        return ad.dropout(h, 0.3, training=True, rng=np.random.default_rng(9)).data

    np.testing.assert_array_equal(run(), run())


def test_dropout_eval_is_identity_and_train_is_unbiased():
    x = Tensor(np.ones((200, 200)))
    np.testing.assert_array_equal(ad.dropout(x, 0.5, training=False).data, x.data)
    y = ad.dropout(x, 0.5, training=True, rng=np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.02


def test_bce_with_logits_stable_at_extremes():
    out = ad.bce_with_logits(Tensor(np.array([800.0, -800.0])), np.array([1.0, 0.0])).data
    np.testing.assert_allclose(out, [0.0, 0.0], atol=1e-300)
