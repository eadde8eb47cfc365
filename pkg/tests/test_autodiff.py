"""Autodiff core: forward oracles, gradient checks, tape semantics."""

import numpy as np
import pytest

import dynroute.autodiff as ad
from dynroute.autodiff import Tape, Tensor, grad_check
from dynroute.errors import ConfigurationError, UsageError


def test_add_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    out = ad.add(x, Tensor(np.zeros((3, 4))))
    np.testing.assert_array_equal(out.data, x.data)


def test_upsample_of_constant_is_constant():
    x = Tensor(np.full((1, 2, 3, 5), 0.7))
    out = ad.bilinear_upsample_2x(x)
    assert out.data.shape == (1, 2, 6, 10)
    np.testing.assert_allclose(out.data, 0.7, atol=1e-15)


def test_upsample_matches_per_pixel_reference():
    """Direct per-pixel bilinear sampling, align-corners-false."""
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 1, 4, 3))
    out = ad.bilinear_upsample_2x(Tensor(x)).data

    def sample(img, fy, fx):
        h, w = img.shape
        y0 = int(np.floor(fy))
        x0 = int(np.floor(fx))
        wy = fy - y0
        wx = fx - x0
        y0c, y1c = np.clip([y0, y0 + 1], 0, h - 1)
        x0c, x1c = np.clip([x0, x0 + 1], 0, w - 1)
        top = img[y0c, x0c] * (1 - wx) + img[y0c, x1c] * wx
        bot = img[y1c, x0c] * (1 - wx) + img[y1c, x1c] * wx
        return top * (1 - wy) + bot * wy

    for i in range(8):
        for j in range(6):
            want = sample(x[0, 0], (i + 0.5) / 2 - 0.5, (j + 0.5) / 2 - 0.5)
            assert abs(out[0, 0, i, j] - want) < 1e-12


def test_conv1x1_hand_matmul_oracle():
    """1x2x2x2 input with a known 3x2 weight, evaluated by direct dots."""
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]]]])
    w = np.array([[1.0, 0.5], [-1.0, 2.0], [0.0, 3.0]])
    out = ad.conv2d_1x1(Tensor(x), Tensor(w)).data
    expected = np.zeros((1, 3, 2, 2))
    for o in range(3):
        for i in range(2):
            for j in range(2):
                expected[0, o, i, j] = sum(w[o, c] * x[0, c, i, j] for c in range(2))
    np.testing.assert_allclose(out, expected, atol=1e-15)


def test_conv1x1_stride2_shape():
    x = Tensor(np.random.default_rng(1).normal(size=(2, 4, 8, 8)))
    w = Tensor(np.random.default_rng(2).normal(size=(6, 4)))
    assert ad.conv2d_1x1(x, w, stride=2).data.shape == (2, 6, 4, 4)


def test_sepconv_matches_bruteforce_loops():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 3, 5, 4))
    w_dw = rng.normal(size=(3, 3, 3))
    w_pw = rng.normal(size=(2, 3))
    b = rng.normal(size=2)
    out = ad.depthwise_separable_conv3x3(
        Tensor(x), Tensor(w_dw), Tensor(w_pw), Tensor(b), stride=1
    ).data

    xp = np.zeros((1, 3, 7, 6))
    xp[:, :, 1:6, 1:5] = x
    t = np.zeros((1, 3, 5, 4))
    for c in range(3):
        for i in range(5):
            for j in range(4):
                acc = 0.0
                for u in range(3):
                    for v in range(3):
                        acc += w_dw[c, u, v] * xp[0, c, i + u, j + v]
                t[0, c, i, j] = acc
    want = np.einsum("oc,bchw->bohw", w_pw, t) + b[None, :, None, None]
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_sepconv_stride2_output_size():
    x = Tensor(np.zeros((1, 2, 8, 8)))
    w_dw = Tensor(np.zeros((2, 3, 3)))
    w_pw = Tensor(np.zeros((5, 2)))
    assert ad.depthwise_separable_conv3x3(x, w_dw, w_pw, stride=2).data.shape == (1, 5, 4, 4)
    x1 = Tensor(np.zeros((1, 2, 1, 1)))
    assert ad.depthwise_separable_conv3x3(x1, w_dw, w_pw, stride=2).data.shape == (1, 5, 1, 1)


def test_shape_mismatch_raises_configuration_error():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    w = Tensor(np.zeros((2, 5)))
    with pytest.raises(ConfigurationError, match="conv2d_1x1"):
        ad.conv2d_1x1(x, w)


def test_backward_sum_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ad.tsum(x)
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_sum_square_is_2x():
    x = Tensor(np.random.default_rng(1).normal(size=(4,)), requires_grad=True)
    with Tape() as tape:
        loss = ad.tsum(ad.square(x))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-12)


def test_backward_requires_scalar_loss():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with Tape() as tape:
        out = ad.square(x)
        with pytest.raises(UsageError, match="scalar"):
            tape.backward(out)


def test_max_over_vector_first_max_tiebreak():
    x = Tensor(np.array([[1.0, 3.0, 3.0], [2.0, 0.0, 1.0]]), requires_grad=True)
    with Tape() as tape:
        loss = ad.tsum(ad.max_over_vector(x, axis=1))
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])


def test_determinism_bit_identical():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 3, 8, 8))
    w_dw = rng.normal(size=(3, 3, 3))
    w_pw = rng.normal(size=(4, 3))
    a = ad.depthwise_separable_conv3x3(Tensor(x), Tensor(w_dw), Tensor(w_pw)).data
    b = ad.depthwise_separable_conv3x3(Tensor(x), Tensor(w_dw), Tensor(w_pw)).data
    assert np.array_equal(a, b)


def test_tape_replay_identical_losses():
    rng = np.random.default_rng(13)
    x = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)

    def run():
        with Tape() as tape:
            loss = ad.tsum(ad.square(ad.fully_connected(x, w)))
            tape.backward(loss)
        return float(loss.data)

    assert run() == run()


def test_cosine_similarity_zero_norm_is_zero():
    u = Tensor(np.zeros(4), requires_grad=True)
    v = Tensor(np.ones(4), requires_grad=True)
    with Tape() as tape:
        c = ad.cosine_similarity(u, v)
        tape.backward(c)
    assert float(c.data) == 0.0
    np.testing.assert_array_equal(u.grad, np.zeros(4))


def test_avg_pool_to_upscales_by_replication():
    x = Tensor(np.array([[[[4.0]]]]))
    out = ad.avg_pool_to(x, 2, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


# ---------------------------------------------------------------------------
# finite-difference gradient suite
# ---------------------------------------------------------------------------

_TIE_GUARD = 1e-3


def _away_from(*values):
    def predicate(datas):
        return any(np.any(np.abs(d - v) < _TIE_GUARD) for d in datas for v in values)

    return predicate


def _pairwise_ties(datas):
    return bool(np.any(np.abs(datas[0] - datas[1]) < _TIE_GUARD))


def _max_ties(datas):
    x = datas[0]
    s = np.sort(x, axis=-1)
    return bool(np.any(np.abs(s[..., -1] - s[..., -2]) < _TIE_GUARD))


OPS = [
    ("add", lambda a, b: ad.add(a, b), [(3, 4), (3, 4)], None),
    ("add_broadcast", lambda a, b: ad.add(a, b), [(3, 4), (4,)], None),
    ("sub", lambda a, b: ad.sub(a, b), [(2, 3), (2, 3)], None),
    ("mul", lambda a, b: ad.mul(a, b), [(2, 5), (2, 5)], None),
    ("mul_broadcast", lambda a, b: ad.mul(a, b), [(2, 5), (2, 1)], None),
    ("div", lambda a, b: ad.div(a, ad.add(b, Tensor(3.0))), [(2, 3), (2, 3)], None),
    ("neg", ad.neg, [(4,)], None),
    ("square", ad.square, [(3, 3)], None),
    ("exp", ad.exp, [(2, 3)], None),
    ("tanh", ad.tanh, [(7,)], None),
    ("sigmoid", ad.sigmoid, [(7,)], None),
    ("log_sigmoid", ad.log_sigmoid, [(7,)], None),
    ("relu", ad.relu, [(4, 4)], _away_from(0.0)),
    ("clamp", lambda a: ad.clamp(a, -0.5, 0.5), [(4, 4)], _away_from(-0.5, 0.5)),
    ("minimum", ad.minimum, [(3, 4), (3, 4)], _pairwise_ties),
    ("sum", ad.tsum, [(3, 4)], None),
    ("sum_axis", lambda a: ad.sum_axis(a, 1), [(3, 4)], None),
    ("mean", ad.mean, [(3, 4)], None),
    ("max_over_vector", lambda a: ad.max_over_vector(a, axis=-1), [(4, 3)], _max_ties),
    ("reshape", lambda a: ad.reshape(a, (6, 2)), [(3, 4)], None),
    ("transpose", lambda a: ad.transpose(a, (1, 0, 2)), [(2, 3, 2)], None),
    ("concat", lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 2)], None),
    ("take", lambda a: ad.take(a, np.array([0, 3, 3, 5])), [(2, 4)], None),
    ("cosine_similarity", ad.cosine_similarity, [(6,), (6,)], None),
    ("identity", lambda a: a, [(3,)], None),
    ("conv2d_1x1", lambda x, w: ad.conv2d_1x1(x, w), [(2, 3, 4, 4), (5, 3)], None),
    ("conv2d_1x1_s2", lambda x, w: ad.conv2d_1x1(x, w, stride=2), [(1, 2, 4, 4), (3, 2)], None),
    (
        "sepconv3x3",
        lambda x, dw, pw, b: ad.depthwise_separable_conv3x3(x, dw, pw, b),
        [(1, 2, 4, 4), (2, 3, 3), (3, 2), (3,)],
        None,
    ),
    (
        "sepconv3x3_s2",
        lambda x, dw, pw: ad.depthwise_separable_conv3x3(x, dw, pw, stride=2),
        [(1, 2, 5, 5), (2, 3, 3), (3, 2)],
        None,
    ),
    ("avg_pool_to", lambda x: ad.avg_pool_to(x, 2, 2), [(1, 2, 5, 5)], None),
    ("global_avg_pool", ad.global_avg_pool, [(2, 3, 4, 4)], None),
    ("fully_connected", ad.fully_connected, [(3, 4), (4, 2)], None),
    (
        "fully_connected_bias",
        lambda x, w, b: ad.fully_connected(x, w, b),
        [(3, 4), (4, 2), (2,)],
        None,
    ),
    ("bilinear_upsample_2x", ad.bilinear_upsample_2x, [(1, 2, 3, 4)], None),
]


@pytest.mark.parametrize("name,fn,shapes,guard", OPS, ids=[o[0] for o in OPS])
def test_gradients_match_finite_differences(name, fn, shapes, guard):
    """Every op: analytic vs central differences, 10 seeds, rel err < 1e-4."""
    for seed in range(10):
        report = grad_check(
            fn, shapes, epsilon=1e-5, tolerance=1e-4, seed=seed,
            resample_if=guard, name=name,
        )
        assert report.passed, str(report)


def test_grad_check_identity_zero_error():
    """Identity error is zero up to float rounding of the FD quotient;
    anything above 1e-9 would indicate a real gradient defect."""
    report = grad_check(lambda a: a, [(5,)], name="identity")
    assert report.max_rel_error < 1e-9


def test_grad_check_sepconv_random_input():
    report = grad_check(
        lambda x, dw, pw: ad.depthwise_separable_conv3x3(x, dw, pw),
        [(1, 4, 8, 8), (4, 3, 3), (4, 4)],
        seed=123,
        name="sepconv_1x4x8x8",
    )
    assert report.passed, str(report)


def test_grad_check_cosine_near_parallel():
    rng = np.random.default_rng(9)
    base = rng.uniform(0.2, 1.0, size=6)

    def near_parallel(_u):
        return ad.cosine_similarity(_u, Tensor(base + 1e-3))

    report = grad_check(near_parallel, [(6,)], low=0.2, high=1.0, name="cosine_parallel")
    assert report.passed, str(report)


# ---------------------------------------------------------------------------
# checkpoint round trip
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(21)
    arrays = {
        "a.w": rng.normal(size=(3, 4)),
        "b.bias": rng.normal(size=(7,)),
        "scalar": np.float64(2.5).reshape(()),
    }
    meta = {"config": {"x": 1}}
    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(path, arrays, meta)
    loaded, got_meta = ad.load_checkpoint(path)
    assert got_meta == meta
    assert list(loaded) == list(arrays)
    for k in arrays:
        np.testing.assert_array_equal(loaded[k], arrays[k])
    header = path.read_bytes()[:16]
    assert header.startswith(b"DYNROUTE-CKPT-1\n")


def test_checkpoint_rejects_wrong_header(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOT-A-CKPT\nrest\n")
    with pytest.raises(UsageError):
        ad.load_checkpoint(path)
