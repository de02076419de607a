import numpy as np
import pytest

from stemtt.nn import Conv1d, Linear
from stemtt.optim import AdamW, OptimizerState, adamw_step
from stemtt.tensor import (
    NonFiniteError,
    Tape,
    Tensor,
    concat,
    exp,
    gelu,
    grad_check,
    index_select,
    layer_norm,
    log,
    make_rng,
    masked_softmax,
    matmul,
    mean,
    pad_last,
    slice_axis,
    sqrt,
    sumall,
    tanh,
    unfold_last,
)

RNG = make_rng(77)


def _t(shape, scale=1.0, offset=0.0):
    return Tensor((RNG.normal(0, 1, shape) * scale + offset).astype(np.float32), requires_grad=True)


def test_grad_check_square():
    x = Tensor(np.array([3.0], dtype=np.float32))
    err = grad_check(lambda t: (t * t).sum(), x, eps=1e-3)
    assert err < 1e-6
    x2 = Tensor(np.array([3.0], dtype=np.float32), requires_grad=True)
    with Tape() as tp:
        y = (x2 * x2).sum()
        tp.backward(y)
    assert x2.grad[0] == pytest.approx(6.0, abs=1e-5)


def test_grad_check_sum_linear():
    x = _t((5,))
    err = grad_check(lambda t: t.sum(), x, eps=1e-2)
    assert err < 1e-4  # zero up to float32 accumulation noise
    x.requires_grad = True
    with Tape() as tp:
        y = x.sum()
        tp.backward(y)
    assert np.array_equal(x.grad, np.ones(5, dtype=np.float32))


def test_fanout_gradient_sums_exactly():
    # d/dx [f(x) + f(x)] must equal 2 f'(x) bit-for-bit
    x = _t((4,))
    with Tape() as tp:
        y = (x * x).sum() + (x * x).sum()
        tp.backward(y)
    doubled = x.grad.copy()
    x.zero_grad()
    with Tape() as tp:
        y = (x * x).sum()
        tp.backward(y)
    assert np.array_equal(doubled, 2.0 * x.grad)


def test_nonfinite_is_an_error():
    x = Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
    with pytest.raises(NonFiniteError):
        log(x)


def test_determinism_same_seed_bit_identical():
    def run():
        r = make_rng(123, 4)
        a = Tensor(r.normal(0, 1, (6, 6)).astype(np.float32), requires_grad=True)
        b = Tensor(r.normal(0, 1, (6, 6)).astype(np.float32), requires_grad=True)
        with Tape() as tp:
            y = (gelu(matmul(a, b)) * a).mean()
            tp.backward(y)
        return y.data.copy(), a.grad.copy()

    y1, g1 = run()
    y2, g2 = run()
    assert np.array_equal(y1, y2)
    assert np.array_equal(g1, g2)


# -- masked softmax ----------------------------------------------------------

def test_masked_softmax_single_survivor():
    logits = Tensor(np.zeros((1, 2), dtype=np.float32))
    mask = np.array([[0.0, -np.inf]], dtype=np.float32)
    out = masked_softmax(logits, mask)
    assert np.array_equal(out.data, np.array([[1.0, 0.0]], dtype=np.float32))


def test_masked_softmax_uniform():
    logits = Tensor(np.full((4, 4), 0.7, dtype=np.float32))
    out = masked_softmax(logits, None)
    assert np.allclose(out.data, 0.25)


def test_masked_softmax_two_logits():
    logits = Tensor(np.array([[1.0, 0.0]], dtype=np.float32))
    out = masked_softmax(logits, None)
    e = np.exp(1.0)
    assert out.data[0, 0] == pytest.approx(e / (e + 1.0), abs=1e-6)
    assert out.data[0, 1] == pytest.approx(1.0 / (e + 1.0), abs=1e-6)


def test_masked_softmax_rows_sum_to_one_and_masked_zero():
    logits = _t((3, 8, 8))
    mask = np.zeros((8, 8), dtype=np.float32)
    mask[:, 5:] = -np.inf
    out = masked_softmax(logits, mask)
    assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(out.data[..., 5:] == 0.0)


def test_masked_softmax_fully_masked_row_errors():
    logits = Tensor(np.zeros((2, 2), dtype=np.float32))
    mask = np.full((2, 2), -np.inf, dtype=np.float32)
    with pytest.raises(ValueError):
        masked_softmax(logits, mask)


# -- layer norm ----------------------------------------------------------------

def test_layer_norm_constant_row():
    out = layer_norm(Tensor(np.array([[5.0, 5.0, 5.0, 5.0]], dtype=np.float32)))
    assert np.allclose(out.data, 0.0, atol=1e-3)


def test_layer_norm_already_normalized():
    out = layer_norm(Tensor(np.array([[1.0, -1.0]], dtype=np.float32)), eps=1e-6)
    assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-4)


def test_layer_norm_zero_two():
    out = layer_norm(Tensor(np.array([[0.0, 2.0]], dtype=np.float32)), eps=1e-8)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-3)


def test_layer_norm_stats():
    x = _t((5, 16), scale=3.0, offset=1.0)
    out = layer_norm(x)
    assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-5)
    assert np.allclose(out.data.var(axis=-1), 1.0, atol=1e-3)


# -- adamw -------------------------------------------------------------------

def test_adamw_first_step_hand_computed():
    p = np.zeros(1, dtype=np.float32)
    g = np.ones(1, dtype=np.float32)
    state = OptimizerState(lr=0.1, weight_decay=0.0)
    state.init_moments([p])
    adamw_step(state, [p], [g])
    # mhat = 1, vhat = 1 -> p = -lr * 1/(1+eps)
    assert p[0] == pytest.approx(-0.1, rel=1e-5)


def test_adamw_zero_grad_no_motion():
    p = np.full(3, 0.5, dtype=np.float32)
    state = OptimizerState(lr=0.1, weight_decay=0.0)
    state.init_moments([p])
    adamw_step(state, [p], [np.zeros(3, dtype=np.float32)])
    assert np.array_equal(p, np.full(3, 0.5, dtype=np.float32))


def test_adamw_lr_zero_moments_still_update():
    p = np.full(2, 1.5, dtype=np.float32)
    state = OptimizerState(lr=0.0, weight_decay=0.1)
    state.init_moments([p])
    adamw_step(state, [p], [np.ones(2, dtype=np.float32)])
    assert np.array_equal(p, np.full(2, 1.5, dtype=np.float32))
    assert state.m[0][0] != 0.0 and state.v[0][0] != 0.0
    assert state.step_count == 1


def test_adamw_shape_mismatch_errors():
    p = np.zeros(2, dtype=np.float32)
    state = OptimizerState()
    state.init_moments([p])
    with pytest.raises(ValueError):
        adamw_step(state, [p], [np.zeros(3, dtype=np.float32)])


def test_adamw_class_wraps_tensors():
    p = Tensor(np.zeros(4, dtype=np.float32), requires_grad=True)
    opt = AdamW([("p", p)], lr=0.1)
    with Tape() as tp:
        loss = (p * p).sum() + p.sum()
        tp.backward(loss)
    opt.step()
    assert np.all(p.data < 0.0)
    assert opt.state.step_count == 1


# -- per-primitive finite-difference sweep -------------------------------------

def _const(shape, seed=3):
    return Tensor(make_rng(seed, *shape).normal(0, 1, shape).astype(np.float32))


def _ln(t):
    return mean(layer_norm(t) * Tensor(np.linspace(0.5, 1.5, t.shape[-1]).astype(np.float32)))


def _softmax_loss(t):
    mask = np.zeros((t.shape[-1], t.shape[-1]), dtype=np.float32)
    mask[:, -1] = -np.inf
    return mean(masked_softmax(t, mask) * _const(t.shape))


PRIMITIVES = [
    ("add", lambda t: mean(t + _const((3, 4))), (3, 4)),
    ("add_bcast", lambda t: mean(_const((2, 5, 4)) + t), (4,)),
    ("sub", lambda t: mean(t - _const((3, 4)) * (t * t)), (3, 4)),
    ("mul", lambda t: mean(t * t), (3, 4)),
    ("div", lambda t: mean(_const((6,)) / (t * t + 1.0)), (6,)),
    ("neg", lambda t: mean(-(t * t)), (5,)),
    ("pow", lambda t: mean((t * t + 1.0) ** 1.5), (5,)),
    ("exp", lambda t: mean(exp(t * 0.5)), (5,)),
    ("log", lambda t: mean(log(t * t + 1.0)), (5,)),
    ("sqrt", lambda t: mean(sqrt(t * t + 0.5)), (5,)),
    ("tanh", lambda t: mean(tanh(t)), (5,)),
    ("gelu", lambda t: mean(gelu(t)), (7,)),
    ("matmul", lambda t: mean(matmul(t, t.transpose(0, 2, 1))), (2, 3, 4)),
    ("reshape", lambda t: mean(t.reshape(6, 2) * _const((6, 2))), (3, 4)),
    ("transpose", lambda t: mean(t.transpose(1, 0, 2) * _const((4, 3, 2))), (3, 4, 2)),
    ("sum_axis", lambda t: mean(t.sum(axis=1) * _const((3, 2))), (3, 4, 2)),
    ("sumall", lambda t: sumall(t * t), (3, 3)),
    ("concat", lambda t: mean(concat([t, t * 2.0], axis=1) * _const((3, 8))), (3, 4)),
    ("slice", lambda t: mean(slice_axis(t, 1, 1, 3) * _const((3, 2))), (3, 4)),
    ("index_select", lambda t: mean(index_select(t, [2, 0, 2], axis=0) * _const((3, 4))), (3, 4)),
    ("pad", lambda t: mean(pad_last(t, 2, 1) * _const((2, 7))), (2, 4)),
    ("unfold", lambda t: mean(unfold_last(t, 3, 2) * _const((3, 2, 3))), (2, 8)),
    ("layer_norm", _ln, (3, 8)),
    ("masked_softmax", _softmax_loss, (2, 6, 6)),
]


@pytest.mark.parametrize("name,fn,shape", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_grads_match_finite_differences(name, fn, shape):
    worst = 0.0
    for trial in range(10):
        r = make_rng(1000 + trial)
        x = Tensor(r.normal(0, 1, shape).astype(np.float32))
        worst = max(worst, grad_check(fn, x, eps=1e-2))
    assert worst < 1e-3, f"{name}: rel err {worst}"


def test_full_network_grad_check_small():
    r = make_rng(5)
    lin1 = Linear(6, 8, r)
    lin2 = Linear(8, 1, r)
    conv = Conv1d(2, 3, 3, r, stride=2)
    x = Tensor(r.normal(0, 1, (4, 2, 6)).astype(np.float32))

    def f(w):
        h = conv(x)
        h = h.reshape(4, -1)
        h = slice_axis(h, 1, 0, 6)
        h = gelu(matmul(h, w) + lin1.bias.detach())
        return mean(matmul(h, lin2.weight.detach()))

    err = grad_check(f, Tensor(lin1.weight.data.copy()), eps=1e-2)
    assert err < 1e-3


def test_conv1d_matches_numpy_reference():
    r = make_rng(9)
    conv = Conv1d(3, 5, 3, r, stride=1)
    x = r.normal(0, 1, (3, 10)).astype(np.float32)
    y = conv(Tensor(x)).data
    # same padding, stride 1: out[c_out, t] = sum_{ci,j} w[ci,j,c_out] x[ci, t+j-1]
    w = conv.weight.data.reshape(3, 3, 5)
    xp = np.pad(x, ((0, 0), (1, 1)))
    ref = np.zeros((5, 10), dtype=np.float32)
    for t in range(10):
        patch = xp[:, t:t + 3]
        ref[:, t] = np.einsum("cj,cjo->o", patch, w) + conv.bias.data
    assert np.allclose(y, ref, atol=1e-4)


def test_full_model_loss_grad_check_20_coords():
    # end-to-end: the complete training objective on the two-stem config,
    # autodiff vs central differences on 20 random parameter coordinates
    from stemtt.gradcheck import full_loss_grad_check
    out = full_loss_grad_check(n_coords=20, seed=2)
    assert out["max_rel_err"] < 1e-3, out


def test_module_state_dict_roundtrip():
    r = make_rng(11)
    lin = Linear(4, 3, r)
    state = {k: v.copy() for k, v in lin.state_dict().items()}
    lin.weight.data[...] = 0.0
    lin.load_state_dict(state)
    assert np.array_equal(lin.weight.data, state["weight"])
    with pytest.raises(KeyError):
        lin.load_state_dict({"weight": state["weight"]})
