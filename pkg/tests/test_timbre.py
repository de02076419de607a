import numpy as np
import pytest

from stemtt.optim import AdamW
from stemtt.tensor import Tape, Tensor, make_rng
from stemtt.timbre import (
    TimbreClassifier,
    TimbreEncoder,
    loss_cls,
    loss_div_cross,
    loss_div_var,
)

D_TAU = 16


def _enc(seed=0):
    return TimbreEncoder(make_rng(seed))


def test_timbre_embedding_dimension_is_16():
    enc = _enc()
    z = Tensor(make_rng(1).normal(0, 1, (3, 128, 16)).astype(np.float32))
    tau = enc(z)
    assert tau.shape == (3, 16)


def test_identical_inputs_identical_tau():
    enc = _enc()
    z = Tensor(make_rng(2).normal(0, 1, (1, 96, 16)).astype(np.float32))
    a = enc(z).data
    b = enc(Tensor(z.data.copy())).data
    assert np.array_equal(a, b)


def test_zeroed_final_layer_gives_zero_vector():
    enc = _enc()
    enc.out.weight.data[...] = 0.0
    enc.out.bias.data[...] = 0.0
    z = Tensor(make_rng(3).normal(0, 1, (2, 128, 16)).astype(np.float32))
    assert np.array_equal(enc(z).data, np.zeros((2, 16), dtype=np.float32))


def test_reference_shorter_than_receptive_field_errors():
    enc = _enc()
    z = Tensor(np.zeros((1, enc.receptive_field - 1, 16), dtype=np.float32))
    with pytest.raises(ValueError):
        enc(z)


def test_variable_reference_length_supported():
    enc = _enc()
    for l_ref in (32, 64, 128, 200):
        tau = enc(Tensor(make_rng(4, l_ref).normal(0, 1, (1, l_ref, 16)).astype(np.float32)))
        assert tau.shape == (1, 16)


# -- Eq. 1 --------------------------------------------------------------------

class _OracleClassifier:
    def __init__(self, out):
        self.out = out

    def __call__(self, c):
        return self.out


def test_loss_cls_perfect_prediction_zero():
    taus = [Tensor(make_rng(5, i).normal(0, 1, (2, D_TAU)).astype(np.float32)) for i in range(4)]
    cs = [Tensor(np.zeros((2, 8, 4), dtype=np.float32)) for _ in range(4)]
    losses = [loss_cls([c], [t], _OracleClassifier(Tensor(t.data.copy()))).item()
              for c, t in zip(cs, taus)]
    assert all(abs(v) < 1e-10 for v in losses)


def test_loss_cls_zero_prediction_unit_taus():
    unit = np.zeros((1, D_TAU), dtype=np.float32)
    unit[0, 3] = 1.0
    taus = [Tensor(unit.copy()) for _ in range(4)]
    cs = [Tensor(np.zeros((1, 8, 4), dtype=np.float32)) for _ in range(4)]
    zero_cls = _OracleClassifier(Tensor(np.zeros((1, D_TAU), dtype=np.float32)))
    val = loss_cls(cs, taus, zero_cls).item()
    assert val == pytest.approx(1.0, abs=1e-6)


def test_loss_cls_quadratic_in_residual():
    rng = make_rng(6)
    taus = [Tensor(rng.normal(0, 1, (1, D_TAU)).astype(np.float32)) for _ in range(4)]
    pred = Tensor(np.zeros((1, D_TAU), dtype=np.float32))
    base = loss_cls([None] * 4, taus, _OracleClassifier(pred)).item()
    doubled = loss_cls([None] * 4, [t * 2.0 for t in taus], _OracleClassifier(pred)).item()
    assert doubled == pytest.approx(4.0 * base, rel=1e-5)


def test_loss_cls_stop_gradient_blocks_timbre_path():
    rng = make_rng(7)
    enc = TimbreEncoder(rng)
    clf = TimbreClassifier(rng)
    z = Tensor(rng.normal(0, 1, (4, 128, 16)).astype(np.float32))
    c = Tensor(rng.normal(0, 1, (4, 128, 16)).astype(np.float32), requires_grad=True)
    enc.zero_grad()
    clf.zero_grad()
    with Tape() as tape:
        tau = enc(z)
        loss = loss_cls([c], [tau], clf)
        tape.backward(loss)
    # classifier and content receive gradients, the timbre encoder never does
    assert all(p.grad is None or not np.any(p.grad) for p in enc.parameters())
    assert any(p.grad is not None and np.any(p.grad) for p in clf.parameters())
    assert c.grad is not None and np.any(c.grad)


def test_adversarial_ascent_direction():
    # one generator step on -lambda*L_cls (classifier frozen) must not
    # decrease L_cls measured against that frozen classifier
    rng = make_rng(8)
    clf = TimbreClassifier(rng)
    c = Tensor(rng.normal(0, 1, (8, 16, 16)).astype(np.float32), requires_grad=True)
    taus = Tensor(rng.normal(0, 1, (8, D_TAU)).astype(np.float32))
    with Tape() as tape:
        before = loss_cls([c], [taus], clf)
        neg = before * -1.0
        tape.backward(neg)
    g = c.grad.copy()
    c.grad = None
    for p in clf.parameters():
        p.zero_grad()
    c2 = Tensor(c.data - 1e-3 * g)
    after = loss_cls([c2], [taus], clf).item()
    assert after >= before.item() - 1e-7


# -- Eq. 2 --------------------------------------------------------------------

def _tau_rows(rows):
    return [Tensor(np.asarray(r, dtype=np.float32)[None, :]) for r in rows]


def test_div_cross_orthogonal_is_zero():
    taus = _tau_rows([np.eye(D_TAU)[i] for i in range(4)])
    assert loss_div_cross(taus).item() == pytest.approx(0.0, abs=1e-10)


def test_div_cross_identical_is_one():
    row = make_rng(9).normal(0, 1, D_TAU)
    taus = _tau_rows([row] * 4)
    assert loss_div_cross(taus).item() == pytest.approx(1.0, abs=1e-5)


def test_div_cross_single_oblique_pair():
    e = np.eye(D_TAU)
    # tau0 and tau1 at 45 degrees, all other pairs orthogonal
    rows = [e[0], (e[0] + e[1]) / np.sqrt(2), e[2], e[3]]
    val = loss_div_cross(_tau_rows(rows)).item()
    assert val == pytest.approx(0.5 / 6.0, abs=1e-6)


def test_div_cross_scale_invariant():
    rng = make_rng(10)
    rows = [rng.normal(0, 1, D_TAU) for _ in range(4)]
    base = loss_div_cross(_tau_rows(rows)).item()
    scaled = loss_div_cross(_tau_rows([r * s for r, s in zip(rows, (0.1, 3.0, 7.5, 0.02))])).item()
    assert scaled == pytest.approx(base, rel=1e-4)


def test_div_cross_zero_norm_errors():
    rows = [np.zeros(D_TAU), np.ones(D_TAU), np.ones(D_TAU), np.ones(D_TAU)]
    with pytest.raises(ValueError):
        loss_div_cross(_tau_rows(rows))


# -- Eq. 3 --------------------------------------------------------------------

def test_div_var_collapsed_batch_pays_delta():
    row = make_rng(11).normal(0, 1, (1, 4, D_TAU)).astype(np.float32)
    batch = Tensor(np.repeat(row, 6, axis=0))
    val = loss_div_var(batch, delta=0.1).item()
    assert val == pytest.approx(0.1, abs=1e-5)


def test_div_var_spread_batch_zero():
    rng = make_rng(12)
    batch = Tensor(rng.normal(0, 1.0, (16, 4, D_TAU)).astype(np.float32))
    assert loss_div_var(batch, delta=0.1).item() == pytest.approx(0.0, abs=1e-6)


def test_div_var_delta_zero_always_zero():
    rng = make_rng(13)
    batch = Tensor(np.repeat(rng.normal(0, 1, (1, 4, D_TAU)), 4, axis=0).astype(np.float32))
    assert loss_div_var(batch, delta=0.0).item() == pytest.approx(0.0, abs=1e-6)


def test_div_var_small_batch_errors():
    with pytest.raises(ValueError):
        loss_div_var(Tensor(np.zeros((1, 4, D_TAU), dtype=np.float32)), delta=0.1)


def test_classifier_trains_against_fixed_mapping():
    # sanity: the adversary can fit a fixed content->timbre relation
    rng = make_rng(14)
    clf = TimbreClassifier(rng)
    opt = AdamW(list(clf.named_parameters()), lr=3e-3)
    w = rng.normal(0, 1, (16, D_TAU)).astype(np.float32)
    first = last = None
    for step in range(300):
        c = rng.normal(0, 1, (16, 8, 16)).astype(np.float32)
        tau = (c.mean(axis=1) @ w).astype(np.float32)
        with Tape() as tape:
            loss = loss_cls([Tensor(c)], [Tensor(tau)], clf)
            tape.backward(loss)
        opt.step()
        opt.zero_grad()
        if first is None:
            first = loss.item()
        last = loss.item()
    assert last < 0.2 * first
