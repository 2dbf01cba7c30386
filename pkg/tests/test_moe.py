import itertools
import math

import mpmath
import numpy as np
import numpy.testing as npt
import pytest

from perft.core import Matrix, Rng, ShapeError, constant, grad_check, sum_all, square
from perft.moe import (ConfigError, FfnExpert, MoeLayerConfig, Router, dispatch_fractions, ffn_forward,
                       init_expert, init_router, load_balance_loss, moe_forward, route, router_z_loss)

mpmath.mp.dps = 50


def random_layer(seed, D=6, D_ffn=5, N=3, K=2, form="vanilla", std=0.5, requires_grad=False):
    rng = Rng(seed)
    experts = []
    for i in range(N):
        r = rng.child("e", i)
        W_gate = Matrix(r.normal((D, D_ffn), std), requires_grad) if form == "glu" else None
        experts.append(FfnExpert(Matrix(r.normal((D, D_ffn), std), requires_grad),
                                 Matrix(r.normal((D_ffn, D), std), requires_grad), W_gate))
    router = Router(Matrix(rng.child("g").normal((D, N), std), requires_grad))
    return experts, router, MoeLayerConfig(D, D_ffn, N, K, form)


def silu_np(x):
    return x / (1 + np.exp(-x))


def dense_ffn(e, h):
    a = silu_np(h @ e.W_up.data)
    if e.W_gate is not None:
        a = a * (h @ e.W_gate.data)
    return a @ e.W_down.data


# -- config -------------------------------------------------------------------------------

@pytest.mark.parametrize("kwargs, field", [
    (dict(D=4, D_ffn=8, N=4, K=5), "K"),
    (dict(D=4, D_ffn=8, N=4, K=0), "K"),
    (dict(D=0, D_ffn=8, N=4, K=1), "D"),
    (dict(D=4, D_ffn=0, N=4, K=1), "D_ffn"),
    (dict(D=4, D_ffn=8, N=4, K=1, ffn_form="swish"), "ffn_form"),
])
def test_config_errors_name_the_field(kwargs, field):
    with pytest.raises(ConfigError, match=f"^{field}:"):
        MoeLayerConfig(**kwargs)


def test_expert_shape_checks():
    with pytest.raises(ShapeError):
        FfnExpert(Matrix(np.zeros((4, 3))), Matrix(np.zeros((4, 3))))
    with pytest.raises(ShapeError):
        FfnExpert(Matrix(np.zeros((4, 3))), Matrix(np.zeros((3, 4))), Matrix(np.zeros((3, 4))))


# -- ffn ----------------------------------------------------------------------------------

def test_ffn_zero_value_memories_and_zero_input():
    e = init_expert(4, 6, Rng(0))
    zero_down = FfnExpert(e.W_up, Matrix(np.zeros((6, 4))))
    x = constant(Rng(1).normal((3, 4)))
    npt.assert_array_equal(ffn_forward(zero_down, x).data, 0.0)
    npt.assert_array_equal(ffn_forward(e, constant(np.zeros((2, 4)))).data, 0.0)


def test_ffn_hand_unrolled_scalar_oracle():
    W_up = [[0.5, -1.0, 0.25], [2.0, 0.1, -0.3]]
    W_down = [[1.0, -2.0], [0.5, 0.3], [-1.5, 0.7]]
    h = [0.4, -0.8]
    sig = lambda z: 1.0 / (1.0 + math.exp(-z))
    hidden = []
    for j in range(3):
        z = h[0] * W_up[0][j] + h[1] * W_up[1][j]
        hidden.append(z * sig(z))
    out = [sum(hidden[j] * W_down[j][c] for j in range(3)) for c in range(2)]
    e = FfnExpert(constant(W_up), constant(W_down))
    npt.assert_allclose(ffn_forward(e, constant([h])).data[0], out, rtol=0, atol=1e-15)
    # GLU multiplies by h W_gate before the down projection
    W_gate = [[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]]
    g = [h[0] * W_gate[0][j] + h[1] * W_gate[1][j] for j in range(3)]
    out_glu = [sum(hidden[j] * g[j] * W_down[j][c] for j in range(3)) for c in range(2)]
    e_glu = FfnExpert(constant(W_up), constant(W_down), constant(W_gate))
    npt.assert_allclose(ffn_forward(e_glu, constant([h])).data[0], out_glu, rtol=0, atol=1e-15)


def test_ffn_width_mismatch():
    with pytest.raises(ShapeError):
        ffn_forward(init_expert(4, 6, Rng(0)), constant(np.zeros((1, 5))))


def test_init_scales():
    e = init_expert(64, 256, Rng(0), "glu")
    assert e.W_gate is not None
    assert abs(e.W_up.data.std() - 64 ** -0.5) < 0.01
    assert abs(e.W_down.data.std() - 256 ** -0.5) < 0.01
    assert init_router(64, 8, Rng(1)).W_g.shape == (64, 8)


# -- routing ------------------------------------------------------------------------------

def test_route_zero_router_uses_lowest_indices():
    h = constant(Rng(0).normal((5, 3)))
    router = Router(Matrix(np.zeros((3, 4))))
    ro = route(router, h, 2)
    assert (ro.selected == [0, 1]).all()
    npt.assert_array_equal(ro.gate_weights.data, np.tile([0.25, 0.25, 0, 0], (5, 1)))
    ro = route(router, h, 2, renormalize=True)
    npt.assert_array_equal(ro.gate_weights.data, np.tile([0.5, 0.5, 0, 0], (5, 1)))


def test_route_full_activation_equals_softmax():
    _, router, _ = random_layer(1, N=4)
    h = constant(Rng(2).normal((7, 6)))
    ro = route(router, h, 4)
    assert ro.gate_weights.data.tobytes() == ro.probs.data.tobytes()


def test_route_full_sort_oracle():
    rng = Rng(3)
    for t in range(30):
        W_g = rng.child("w", t).normal((4, 3))
        h = rng.child("h", t).normal((5, 4))
        for renorm in (False, True):
            ro = route(Router(constant(W_g)), constant(h), 2, renorm)
            for r in range(5):
                z = h[r] @ W_g
                p = np.exp(z - z.max())
                p /= p.sum()
                order = sorted(range(3), key=lambda i: (-p[i], i))[:2]
                expect = np.zeros(3)
                expect[order] = p[order]
                if renorm:
                    expect /= expect.sum()
                npt.assert_allclose(ro.gate_weights.data[r], expect, rtol=0, atol=1e-15)
                assert ro.selected[r].tolist() == sorted(order)


def test_route_invariants():
    _, router, _ = random_layer(4, N=5)
    h = constant(Rng(5).normal((50, 6), 2.0))
    ro = route(router, h, 3)
    g = ro.gate_weights.data
    assert ((g != 0).sum(axis=1) == 3).all()
    assert (g.sum(axis=1) <= 1 + 1e-15).all()
    mask = ro.dispatch_mask()
    assert (g[mask] == ro.probs.data[mask]).all()
    ro = route(router, h, 3, renormalize=True)
    assert np.abs(ro.gate_weights.data.sum(axis=1) - 1).max() <= 1e-12


def test_route_argument_errors():
    _, router, _ = random_layer(0)
    with pytest.raises(ValueError):
        route(router, constant(np.zeros((1, 6))), 4)
    with pytest.raises(ShapeError):
        route(router, constant(np.zeros((1, 5))), 1)


# -- moe_forward --------------------------------------------------------------------------

@pytest.mark.parametrize("form", ["vanilla", "glu"])
def test_moe_dense_then_mask_oracle(form):
    experts, router, cfg = random_layer(6, form=form)
    h = Rng(7).normal((4, 6))
    out, ro = moe_forward(experts, router, constant(h), cfg)
    dense = np.stack([dense_ffn(e, h) for e in experts], axis=1)  # (T, N, D)
    z = h @ router.W_g.data
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    keep = np.zeros_like(p)
    for t in range(4):
        keep[t, np.argsort(-p[t], kind="stable")[:2]] = 1
    expected = np.einsum("tn,tnd->td", p * keep, dense)
    npt.assert_allclose(out.data, expected, rtol=0, atol=1e-12)


def test_moe_dense_limit():
    experts, router, _ = random_layer(8, N=3, K=3)
    cfg = MoeLayerConfig(6, 5, 3, 3)
    h = Rng(9).normal((6, 6))
    out, ro = moe_forward(experts, router, constant(h), cfg)
    expected = sum(ro.probs.data[:, [i]] * dense_ffn(e, h) for i, e in enumerate(experts))
    npt.assert_allclose(out.data, expected, rtol=0, atol=1e-12)


def test_moe_zero_value_memories():
    experts, router, cfg = random_layer(10)
    zeroed = [FfnExpert(e.W_up, Matrix(np.zeros(e.W_down.shape))) for e in experts]
    out, _ = moe_forward(zeroed, router, constant(Rng(1).normal((4, 6))), cfg)
    npt.assert_array_equal(out.data, 0.0)


def test_moe_joint_permutation_invariance():
    experts, router, cfg = random_layer(11, N=4, K=2)
    h = constant(Rng(12).normal((9, 6)))
    out, _ = moe_forward(experts, router, h, cfg)
    for perm in itertools.permutations(range(4)):
        p_experts = [experts[i] for i in perm]
        p_router = Router(Matrix(router.W_g.data[:, list(perm)]))
        p_out, _ = moe_forward(p_experts, p_router, h, cfg)
        npt.assert_allclose(p_out.data, out.data, rtol=0, atol=1e-12)


def test_moe_wrong_expert_count():
    experts, router, cfg = random_layer(0)
    with pytest.raises(ConfigError, match="^N:"):
        moe_forward(experts[:2], router, constant(np.zeros((1, 6))), cfg)


def test_unselected_experts_get_exactly_zero_gradient():
    for trial in range(20):
        experts, router, cfg = random_layer(100 + trial, N=4, K=2, requires_grad=True)
        h = constant(Rng(trial).normal((1, 6)))
        out, ro = moe_forward(experts, router, h, cfg)
        sum_all(square(out)).backward()
        chosen = set(ro.selected[0].tolist())
        for i, e in enumerate(experts):
            for p in e.parameters().values():
                if i in chosen:
                    assert p.grad is not None and np.abs(p.grad).sum() > 0
                else:
                    assert p.grad is None or not p.grad.any()


def test_moe_grad_check():
    for form in ("vanilla", "glu"):
        experts, router, cfg = random_layer(13, form=form)
        h = Matrix(Rng(14).normal((4, 6)), requires_grad=True)
        params = [router.W_g, h] + [p for e in experts for p in e.parameters().values()]
        rep = grad_check(lambda: sum_all(square(moe_forward(experts, router, h, cfg)[0])), params)
        assert rep.passed, rep.max_rel_error


def test_moe_grad_check_renormalized():
    experts, router, _ = random_layer(15)
    cfg = MoeLayerConfig(6, 5, 3, 2, renormalize_gates=True)
    h = constant(Rng(16).normal((4, 6)))
    params = [router.W_g] + [p for e in experts for p in e.parameters().values()]
    rep = grad_check(lambda: sum_all(square(moe_forward(experts, router, h, cfg)[0])), params)
    assert rep.passed, rep.max_rel_error


# -- auxiliary losses ---------------------------------------------------------------------

def test_dispatch_fractions_sum_to_one():
    f = dispatch_fractions(np.array([[0, 1], [1, 2], [1, 3]]), 4)
    npt.assert_allclose(f, [1 / 6, 3 / 6, 1 / 6, 1 / 6])


def test_load_balance_uniform_is_one():
    # 4 tokens, N=4, K=1: each expert chosen once with uniform probabilities
    h = constant(np.eye(4))
    router = Router(Matrix(np.zeros((4, 4))))
    ro = route(router, h, 1)
    ro.selected = np.arange(4).reshape(4, 1)
    assert load_balance_loss(ro).item() == 1.0


def test_load_balance_concentration_approaches_N():
    N = 4
    W_g = np.zeros((3, N))
    W_g[:, 2] = 50.0
    ro = route(Router(constant(W_g)), constant(np.ones((8, 3))), 1)
    assert load_balance_loss(ro).item() == pytest.approx(N, abs=1e-9)


def test_load_balance_definition_oracle():
    rng = Rng(17)
    for t in range(20):
        W = constant(rng.child("w", t).normal((5, 4)))
        h = constant(rng.child("h", t).normal((16, 5)))
        ro = route(Router(W), h, 2)
        z = h.data @ W.data
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        counts = [0] * 4
        for row in range(16):
            for i in np.argsort(-p[row], kind="stable")[:2]:
                counts[i] += 1
        expected = 4 * sum(counts[i] / 32 * p[:, i].mean() for i in range(4))
        assert load_balance_loss(ro).item() == pytest.approx(expected, rel=0, abs=1e-13)


def test_load_balance_at_least_one_for_a_single_token():
    # with one token, N/K times the kept probability mass is at least 1
    rng = Rng(18)
    for t in range(1000):
        N = int(rng.child("n", t).integers(2, 9))
        K = int(rng.child("k", t).integers(1, N + 1))
        h = constant(rng.child("h", t).normal((1, 5)))
        ro = route(Router(constant(rng.child("w", t).normal((5, N), 2.0))), h, K)
        assert load_balance_loss(ro).item() >= 1 - 1e-9


def test_load_balance_can_fall_below_one_with_two_tokens():
    # hard dispatch f and soft probabilities P can disagree across tokens
    logits = np.log(np.array([[0.34, 0.33, 0.33], [1e-300, 0.5, 0.5]]))
    ro = route(Router(constant(np.eye(3))), constant(logits), 1)
    assert ro.selected.ravel().tolist() == [0, 1]
    value = load_balance_loss(ro).item()
    assert value == pytest.approx(3 * (0.5 * 0.17 + 0.5 * 0.415), abs=1e-12)
    assert value < 1


def test_load_balance_gradient_flows_through_probs_only():
    W = Matrix(Rng(19).normal((5, 4)), requires_grad=True)
    h = constant(Rng(20).normal((16, 5)))
    rep = grad_check(lambda: load_balance_loss(route(Router(W), h, 2)), [W])
    assert rep.passed, rep.max_rel_error


def test_z_loss_closed_form_and_shift():
    zero = constant(np.zeros((3, 4)))
    assert router_z_loss(zero).item() == pytest.approx(math.log(4) ** 2, abs=1e-12)
    logits = Rng(21).normal((3, 4))
    assert router_z_loss(constant(logits + 10.0)).item() != router_z_loss(constant(logits)).item()


def test_z_loss_extended_precision_oracle():
    logits = Rng(22).normal((3, 4), 3.0)
    total = mpmath.mpf(0)
    for row in logits:
        total += mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(x))) for x in row)) ** 2
    assert router_z_loss(constant(logits)).item() == pytest.approx(float(total / 3), rel=1e-14)


def test_z_loss_grad_check():
    z = Matrix(Rng(23).normal((3, 4)), requires_grad=True)
    assert grad_check(lambda: router_z_loss(z), [z]).passed
