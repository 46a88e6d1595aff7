import numpy as np
import pytest

from promptmix import autodiff as ad
from promptmix.autodiff import Tensor


def t(data, grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


def test_softmax_uniform_on_equal_logits():
    out = ad.softmax(t([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_softmax_rows_sum_to_one_and_positive():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = t(rng.normal(size=(5, 7)) * 10)
        s = ad.softmax(x, axis=-1).data
        assert np.all(s > 0)
        assert np.all(np.abs(s.sum(axis=-1) - 1.0) < 1e-12)


def test_variance_hand_value():
    # two-pass by hand: mean 2, squared deviations 1+0+1, over n-1=2
    assert ad.variance(t([1.0, 2.0, 3.0])).item() == pytest.approx(1.0, abs=1e-15)


def test_variance_matches_two_pass_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        x = rng.normal(size=(6, 4))
        got = ad.variance(t(x), axis=0).data
        mu = x.mean(axis=0)
        want = ((x - mu) ** 2).sum(axis=0) / (x.shape[0] - 1)
        assert np.all(np.abs(got - want) < 1e-10)


def test_variance_rejects_fewer_than_two_elements():
    with pytest.raises(ValueError, match="variance over 1"):
        ad.variance(t([4.0]))


def test_cosine_similarity_identity():
    rng = np.random.default_rng(2)
    for _ in range(20):
        v = t(rng.normal(size=9))
        assert ad.cosine_similarity(v, v).item() == pytest.approx(1.0, abs=1e-12)


def test_cosine_similarity_rejects_zero_vector():
    with pytest.raises(ValueError, match="zero-norm"):
        ad.cosine_similarity(t([0.0, 0.0]), t([1.0, 0.0]))


def test_backward_quadratic():
    x = t([1.0, 2.0])
    loss = ad.sum_(ad.mul(x, x))
    ad.backward(loss)
    assert np.allclose(x.grad, [2.0, 4.0], atol=1e-15)


def test_backward_constant_graph_empty_map():
    a = Tensor([1.0, 2.0])
    loss = ad.sum_(ad.mul(a, a))
    assert ad.backward(loss) == {}


def test_backward_rejects_non_scalar():
    x = t([[1.0, 2.0]])
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.mul(x, x))


def test_gradient_accumulation_doubles_on_reuse():
    x = t([1.5, -0.5, 2.0])
    y = ad.sum_(ad.mul(x, np.array([3.0, 1.0, 2.0])))
    loss = ad.add(y, y)
    ad.backward(loss)
    assert np.allclose(x.grad, [6.0, 2.0, 4.0], atol=1e-15)


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
        ad.add(t(np.zeros((2, 3))), t(np.zeros(4)))
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(t(np.zeros((2, 3))), t(np.zeros((2, 3))))


def test_bias_add_broadcast_gradient():
    x = t(np.ones((4, 3)))
    b = t(np.zeros(3))
    loss = ad.sum_(ad.add(x, b))
    ad.backward(loss)
    assert np.allclose(b.grad, [4.0, 4.0, 4.0])


def test_take_gradient_accumulates_repeated_indices():
    x = t([1.0, 2.0, 3.0])
    picked = x[np.array([0, 0, 2])]
    ad.backward(ad.sum_(picked))
    assert np.allclose(x.grad, [2.0, 0.0, 1.0])


def test_no_grad_suppresses_graph():
    x = t([1.0, 2.0])
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad
    assert y._parents == ()


def test_hinge_and_l1_subgradient_zero_at_kink():
    x = t([0.0, -1.0, 2.0])
    ad.backward(ad.sum_(ad.hinge(x)))
    assert np.allclose(x.grad, [0.0, 0.0, 1.0])

    a = t([1.0, 2.0])
    loss = ad.l1_distance(a, np.array([1.0, 0.0]))
    ad.backward(loss)
    assert np.allclose(a.grad, [0.0, 1.0])


def test_max_routes_gradient_to_first_argmax():
    x = t([[1.0, 3.0, 3.0], [5.0, 1.0, 0.0]])
    ad.backward(ad.sum_(ad.max_(x, axis=1)))
    assert np.allclose(x.grad, [[0, 1, 0], [1, 0, 0]])


# ---------------------------------------------------------------------------
# finite-difference checks for every kernel


def _fd_cases(rng):
    """(name, f, x) triples; each f is scalar-valued and smooth at x."""
    w = rng.normal(size=(4, 3))
    g = Tensor(rng.normal(size=3) + 1.5)
    b = Tensor(rng.normal(size=3))
    other = rng.normal(size=(2, 4))
    probe = rng.normal(size=(2, 4))
    p23 = rng.normal(size=(2, 3))
    p42 = rng.normal(size=(4, 2))
    p44 = rng.normal(size=(4, 4))
    p34 = rng.normal(size=(3, 4))
    p324 = rng.normal(size=(3, 2, 4))
    cos_b = Tensor(rng.normal(size=8))
    return [
        ("add", lambda x: ad.sum_(ad.mul(ad.add(x, other), probe)), (2, 4)),
        ("sub", lambda x: ad.sum_(ad.mul(ad.sub(x, other), probe)), (2, 4)),
        ("mul", lambda x: ad.sum_(ad.mul(ad.mul(x, other), probe)), (2, 4)),
        ("scale", lambda x: ad.sum_(ad.mul(ad.scale(x, -2.5), probe)), (2, 4)),
        ("matmul", lambda x: ad.sum_(ad.mul(ad.matmul(x, w), p23)), (2, 4)),
        ("softmax", lambda x: ad.sum_(ad.mul(ad.softmax(x, axis=-1), probe)), (2, 4)),
        ("log", lambda x: ad.sum_(ad.mul(ad.log(x), probe)), (2, 4)),
        ("mean", lambda x: ad.sum_(ad.mul(ad.mean(x, axis=0), probe[0])), (2, 4)),
        ("variance", lambda x: ad.sum_(ad.mul(ad.variance(x, axis=0), probe[0])), (3, 4)),
        ("sum", lambda x: ad.sum_(ad.mul(ad.sum_(x, axis=1), probe[:, 0])), (2, 4)),
        ("l1_distance", lambda x: ad.l1_distance(x, other), (2, 4)),
        ("cosine", lambda x: ad.cosine_similarity(x, cos_b), (8,)),
        ("hinge", lambda x: ad.sum_(ad.mul(ad.hinge(x), probe)), (2, 4)),
        ("layer_norm", lambda x: ad.sum_(ad.mul(ad.layer_norm(x, g, b), p23)), (2, 3)),
        ("gelu", lambda x: ad.sum_(ad.mul(ad.gelu(x), probe)), (2, 4)),
        ("concat", lambda x: ad.sum_(ad.mul(ad.concat([x, Tensor(other)], axis=0), p44)), (2, 4)),
        ("reshape", lambda x: ad.sum_(ad.mul(ad.reshape(x, (4, 2)), p42)), (2, 4)),
        ("transpose", lambda x: ad.sum_(ad.mul(ad.transpose(x, (1, 0)), p42)), (2, 4)),
        ("broadcast", lambda x: ad.sum_(ad.mul(ad.broadcast_to(x, (3, 2, 4)), p324)), (2, 4)),
        ("take", lambda x: ad.sum_(ad.mul(x[np.array([0, 0, 1])], p34)), (2, 4)),
        ("max", lambda x: ad.sum_(ad.mul(ad.max_(x, axis=1), probe[:, 0])), (2, 4)),
        ("l2_normalize", lambda x: ad.sum_(ad.mul(ad.l2_normalize(x, axis=-1), probe)), (2, 4)),
    ]


def test_every_kernel_passes_finite_difference():
    for seed in range(25):
        rng = np.random.default_rng(seed)
        for name, f, shape in _fd_cases(rng):
            if name == "log":
                x = Tensor(rng.uniform(0.5, 2.0, size=shape), requires_grad=True)
            elif name in ("hinge", "l1_distance"):
                # keep coordinates away from the kink
                x = Tensor(rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.5, 1.5, size=shape),
                           requires_grad=True)
            else:
                x = Tensor(rng.normal(size=shape), requires_grad=True)
            err = ad.finite_difference_check(f, x)
            assert err < 1e-5, f"kernel {name} seed {seed}: fd error {err:.3g}"


def test_fd_check_at_uniform_entropy_extremum():
    # gradient of entropy of softmax at equal logits is the zero vector
    def f(x):
        p = ad.softmax(x)
        return ad.scale(ad.sum_(ad.mul(p, ad.log(p))), -1.0)

    x = Tensor(np.zeros(5), requires_grad=True)
    assert ad.finite_difference_check(f, x) < 1e-6
    ad.backward(f(x))
    assert np.allclose(x.grad, 0.0, atol=1e-12)


def test_fd_check_rejects_nonpositive_step():
    with pytest.raises(ValueError, match="positive"):
        ad.finite_difference_check(lambda x: ad.sum_(x), t([1.0]), h=0.0)
