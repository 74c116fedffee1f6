import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scmil import diffcore as dc
from scmil.model import (
    EmptyBagError, ModelDims, ModelParams, attend, bag_embed, classify, encode, forward_bag,
    init_params, load_checkpoint, predict_class, project, save_checkpoint,
)

DIMS = ModelDims(d_in=5, d_h=7, d_f=6, d_a=4, d_z=3, n_classes=3)


def params(seed=0, dims=DIMS):
    return init_params(dims, seed)


def on_tape(fn, *arrays, p):
    tape = dc.Tape()
    bound = p.bind(tape, trainable=False)
    return fn(*[tape.constant(a) for a in arrays], bound).value


# straight-line oracles, written without the tape

def np_encode(x, a):
    return np.tanh(np.tanh(x @ a["enc_w1"] + a["enc_b1"]) @ a["enc_w2"] + a["enc_b2"])


def np_attend(f, a):
    s = (np.tanh(f @ a["att_w1"] + a["att_b1"]) @ a["att_w2"] + a["att_b2"])[:, 0]
    e = np.exp(s - s.max())
    return e / e.sum()


def np_project(b, a):
    g = np.tanh(b @ a["proj_w1"] + a["proj_b1"]) @ a["proj_w2"] + a["proj_b2"]
    return g / (np.linalg.norm(g) + 1e-12)


def test_dims_checked_at_construction():
    p = params()
    bad = dict(p.arrays)
    bad["cls_w"] = np.zeros((6, 2))
    with pytest.raises(ValueError):
        ModelParams(DIMS, bad)
    with pytest.raises(ValueError):
        ModelParams(DIMS, {k: v for k, v in p.arrays.items() if k != "cls_b"})


def test_init_bounds_and_determinism():
    p1, p2 = params(4), params(4)
    assert p1.equals(p2)
    assert not p1.equals(params(5))
    assert np.all(np.abs(p1["enc_w1"]) <= 1 / np.sqrt(DIMS.d_in))
    assert np.all(np.abs(p1["cls_b"]) <= 1 / np.sqrt(DIMS.d_f))


def test_zero_encoder_gives_zero_features():
    p = params()
    for k in ("enc_w1", "enc_b1", "enc_w2", "enc_b2"):
        p.arrays[k] = np.zeros_like(p.arrays[k])
    x = np.random.default_rng(0).standard_normal((4, 5))
    assert np.all(on_tape(encode, x, p=p) == 0)


def test_encode_is_a_row_map():
    p = params()
    x = np.random.default_rng(0).standard_normal((3, 5))
    dup = np.vstack([x, x[:1]])
    f = on_tape(encode, dup, p=p)
    np.testing.assert_array_equal(f[0], f[3])
    np.testing.assert_allclose(f, np_encode(dup, p.arrays), atol=1e-14)


def test_encode_rejects_empty():
    with pytest.raises(EmptyBagError):
        on_tape(encode, np.zeros((0, 5)), p=params())


def test_attend_uniform_on_identical_rows():
    p = params()
    f = np.tile(np.random.default_rng(1).standard_normal(6), (5, 1))
    np.testing.assert_allclose(on_tape(attend, f, p=p), np.full(5, 0.2), atol=1e-15)
    np.testing.assert_array_equal(on_tape(attend, f[:1], p=p), [1.0])


def test_attend_is_permutation_equivariant():
    p = params()
    rng = np.random.default_rng(2)
    f = rng.standard_normal((6, 6))
    perm = rng.permutation(6)
    a = on_tape(attend, f, p=p)
    np.testing.assert_allclose(on_tape(attend, f[perm], p=p), a[perm], atol=1e-15)
    np.testing.assert_allclose(a, np_attend(f, p.arrays), atol=1e-14)


def test_bag_embed_matches_weighted_sum():
    rng = np.random.default_rng(3)
    f = rng.standard_normal((4, 6))
    alpha = rng.dirichlet(np.ones(4))
    tape = dc.Tape()
    b = bag_embed(tape.constant(f), tape.constant(alpha)).value
    expected = sum(alpha[i] * f[i] for i in range(4))
    np.testing.assert_allclose(b, expected, atol=1e-14)
    one = bag_embed(tape.constant(f[:1]), tape.constant([1.0])).value
    np.testing.assert_array_equal(one, f[0])
    same = bag_embed(tape.constant(np.tile(f[0], (3, 1))), tape.constant(np.full(3, 1 / 3))).value
    np.testing.assert_allclose(same, f[0], atol=1e-15)
    with pytest.raises(dc.ShapeError):
        bag_embed(tape.constant(f), tape.constant(alpha[:3]))


def test_classify_zero_and_selector_weights():
    p = params()
    b = np.random.default_rng(4).standard_normal(6)
    p.arrays["cls_w"] = np.zeros((6, 3))
    p.arrays["cls_b"] = np.zeros(3)
    logits = on_tape(classify, b, p=p)
    assert np.all(logits == 0) and predict_class(logits) == 0
    sel = np.zeros((6, 3))
    sel[[4, 0, 2], [0, 1, 2]] = 1.0
    p.arrays["cls_w"] = sel
    np.testing.assert_array_equal(on_tape(classify, b, p=p), b[[4, 0, 2]])
    q = params(9)
    np.testing.assert_allclose(on_tape(classify, b, p=q), b @ q["cls_w"] + q["cls_b"], atol=1e-14)


def test_project_unit_norm_and_scale_invariance():
    p = params()
    b = np.random.default_rng(5).standard_normal(6)
    z = on_tape(project, b, p=p)
    assert abs(np.linalg.norm(z) - 1) < 1e-9
    np.testing.assert_allclose(z, np_project(b, p.arrays), atol=1e-14)
    q = p.copy()
    q.arrays["proj_w2"] *= 3.7
    q.arrays["proj_b2"] *= 3.7
    np.testing.assert_allclose(on_tape(project, b, p=q), z, atol=1e-9)


def test_project_of_3_4_output():
    p = params()
    p.arrays["proj_w2"] = np.zeros_like(p["proj_w2"])
    p.arrays["proj_b2"] = np.array([3.0, 4.0, 0.0])
    z = on_tape(project, np.zeros(6), p=p)
    np.testing.assert_allclose(z, [0.6, 0.8, 0.0], atol=1e-12)


def test_forward_bag_composes_oracles():
    p = params(7)
    x = np.random.default_rng(6).standard_normal((5, 5))
    fw = forward_bag(x, p)
    f = np_encode(x, p.arrays)
    a = np_attend(f, p.arrays)
    b = a @ f
    np.testing.assert_allclose(fw.alpha, a, atol=1e-14)
    np.testing.assert_allclose(fw.embedding, b, atol=1e-14)
    np.testing.assert_allclose(fw.logits, b @ p["cls_w"] + p["cls_b"], atol=1e-13)
    np.testing.assert_allclose(fw.z, np_project(b, p.arrays), atol=1e-13)
    assert abs(fw.alpha.sum() - 1) < 1e-9


def test_single_instance_bag():
    p = params()
    x = np.random.default_rng(8).standard_normal((1, 5))
    np.testing.assert_allclose(forward_bag(x, p).embedding, np_encode(x, p.arrays)[0], atol=1e-15)
    with pytest.raises(EmptyBagError):
        forward_bag(np.zeros((0, 5)), p)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 9))
def test_permutation_invariance(seed, n):
    rng = np.random.default_rng(seed)
    p = init_params(DIMS, int(rng.integers(1000)))
    x = rng.uniform(-2, 2, (n, 5))
    perm = rng.permutation(n)
    a, b = forward_bag(x, p), forward_bag(x[perm], p)
    assert np.max(np.abs(a.logits - b.logits)) < 1e-9
    assert np.max(np.abs(a.z - b.z)) < 1e-9
    assert abs(a.alpha.sum() - 1) < 1e-9


def test_argmax_invariant_to_logit_shift():
    p = params(3)
    x = np.random.default_rng(9).standard_normal((4, 5))
    q = p.copy()
    q.arrays["cls_b"] = q.arrays["cls_b"] + 5.0
    assert forward_bag(x, p).prediction == forward_bag(x, q).prediction


def test_gradients_of_all_params():
    p = params(11)
    x = np.random.default_rng(10).uniform(-2, 2, (2, 4, 5))
    from scmil.model import forward_batch

    def build(tape, bound):
        out = forward_batch(tape, x, bound)
        return dc.add(dc.reduce_sum(out.logits), dc.reduce_sum(out.z))

    def f(arrs):
        tape = dc.Tape()
        return float(build(tape, {k: tape.constant(v) for k, v in arrs.items()}).value)

    def g(arrs):
        tape = dc.Tape()
        bound = {k: tape.variable(v) for k, v in arrs.items()}
        grads = dc.backward(tape, build(tape, bound))
        return {k: grads[t.id] for k, t in bound.items()}

    assert dc.finite_diff_check(f, g, p.arrays, 1e-5) < 1e-4


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    p = params(12)
    p.arrays["cls_b"][0] = np.nextafter(1.0, 2.0)  # needs all 53 bits
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, p, {"method": "ERM-RS"})
    q, cfg = load_checkpoint(path)
    assert q.equals(p) and q.dims == p.dims and q.seed == 12
    assert cfg == {"method": "ERM-RS"}


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(path)
