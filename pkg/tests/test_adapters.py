"""Adapter forwards vs dense oracles, proximal step, and the param audit."""
import logging

import numpy as np
import pytest

from peftlab import adapters, circuits, model, qsim, tensor
from peftlab.adapters import (
    LoraAdapter,
    PrefixAdapter,
    QaaAdapter,
    SoraAdapter,
    UnknownMethod,
    count_trainable,
    init_adapters,
    lora_forward,
    prefix_forward,
    qaa_forward,
    sora_forward,
    sora_proximal_step,
)
from peftlab.model import ArchSpec
from peftlab.tensor import Tensor, backward

from oracles import finite_diff

GPT_NEO = ArchSpec(
    vocab_size=50257, d_model=768, n_layers=12, n_heads=12, ffn_mult=4, max_seq_len=2048
)
GPT_NEO_TOTAL = 125_198_592


# ---------------------------------------------------------------------------
# qaa
# ---------------------------------------------------------------------------


def make_qaa(d=4, depth=1, seed=0, w=None):
    rng = np.random.default_rng(seed)
    adapter = QaaAdapter.init(d, depth, rng)
    if w is not None:
        adapter.w_up.data = np.asarray(w, dtype=np.float64)
    return adapter


def test_qaa_zero_projection_is_identity():
    rng = np.random.default_rng(1)
    adapter = make_qaa(d=4)
    h = Tensor(rng.normal(size=(3, 4)))
    out = qaa_forward(adapter, h)
    np.testing.assert_array_equal(out.data, h.data)


def test_qaa_zero_theta_basis_input():
    # theta = 0: circuit is the bare CNOT chain; embedding e_0 gives |00>,
    # which the chain leaves alone, so z = (1, 1) and out = h + W^T 1.
    w = np.arange(8.0).reshape(2, 4)
    adapter = make_qaa(d=4, w=w)
    adapter.theta.data = np.zeros_like(adapter.theta.data)
    h = Tensor(np.array([1.0, 0.0, 0.0, 0.0]))
    out = qaa_forward(adapter, h)
    np.testing.assert_allclose(out.data, h.data + w.sum(axis=0), atol=1e-12)


def test_qaa_batched_embedding_matches_per_row_qsim():
    rng = np.random.default_rng(2)
    adapter = make_qaa(d=5, depth=2, seed=3)
    x = rng.normal(size=(6, 5))
    z, jac, skipped = adapters.qaa_quantum_outputs(adapter, x, need_jacobian=True)
    assert skipped == 0
    for i in range(6):
        state = qsim.amplitude_embed(x[i], adapter.embed)
        z_i = circuits.expectation_bundle(adapter.circuit, adapter.theta.data, state)
        j_i = circuits.parameter_shift_jacobian(
            adapter.circuit, adapter.theta.data, state
        )
        np.testing.assert_allclose(z[i], z_i, atol=1e-14)
        np.testing.assert_allclose(jac[i], j_i, atol=1e-14)


def test_qaa_zero_norm_rows_pass_through(caplog):
    rng = np.random.default_rng(4)
    adapter = make_qaa(d=4, seed=5)
    adapter.w_up.data = rng.normal(size=(2, 4))
    h = np.array([[1.0, 2.0, 0.5, -1.0], [0.0, 0.0, 0.0, 0.0]])
    with caplog.at_level(logging.DEBUG, logger="peftlab.adapters"):
        out = qaa_forward(adapter, Tensor(h))
    assert "skipped 1" in caplog.text
    np.testing.assert_array_equal(out.data[1], h[1])  # untouched row
    assert not np.array_equal(out.data[0], h[0])  # adapted row moved


def test_qaa_zero_norm_rows_contribute_no_gradient():
    adapter = make_qaa(d=4, seed=6)
    adapter.w_up.data = np.random.default_rng(7).normal(size=(2, 4))
    h = Tensor(np.zeros((2, 4)))
    out = qaa_forward(adapter, h)
    backward(tensor.tsum(out))
    np.testing.assert_array_equal(adapter.theta.grad, np.zeros_like(adapter.theta.data))
    np.testing.assert_array_equal(adapter.w_up.grad, np.zeros_like(adapter.w_up.data))


def test_qaa_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    d, depth = 4, 1
    h = rng.normal(size=(3, d))
    theta0 = rng.uniform(-0.5, 0.5, size=2 * depth)
    w0 = rng.normal(size=(2, d))

    def run(theta_values, w_values):
        adapter = make_qaa(d=d, depth=depth)
        adapter.theta.data = np.asarray(theta_values, dtype=np.float64)
        adapter.w_up.data = np.asarray(w_values, dtype=np.float64).reshape(2, d)
        return adapter

    adapter = run(theta0, w0)
    out = qaa_forward(adapter, Tensor(h))
    backward(tensor.tsum(out))

    fd_theta = finite_diff(
        lambda t: float(tensor.tsum(qaa_forward(run(t, w0), Tensor(h))).data), theta0
    )
    fd_w = finite_diff(
        lambda w: float(tensor.tsum(qaa_forward(run(theta0, w), Tensor(h))).data),
        w0.reshape(-1),
    )
    np.testing.assert_allclose(adapter.theta.grad, fd_theta, atol=1e-6)
    np.testing.assert_allclose(adapter.w_up.grad.reshape(-1), fd_w, atol=1e-6)


def test_qaa_input_gradient_is_stopped():
    adapter = make_qaa(d=4, seed=9)
    adapter.w_up.data = np.random.default_rng(10).normal(size=(2, 4))
    h = Tensor(np.random.default_rng(11).normal(size=(2, 4)), requires_grad=True)
    out = qaa_forward(adapter, h)
    backward(tensor.tsum(out))
    # only the residual identity path reaches h: gradient is exactly ones
    np.testing.assert_array_equal(h.grad, np.ones_like(h.data))


# ---------------------------------------------------------------------------
# lora / sora
# ---------------------------------------------------------------------------


def test_lora_zero_b_is_frozen_path():
    rng = np.random.default_rng(12)
    adapter = LoraAdapter.init(4, 4, rank=2, rng=rng)
    w = Tensor(rng.normal(size=(4, 4)))
    h = Tensor(rng.normal(size=4))
    out = lora_forward(adapter, h, w)
    np.testing.assert_allclose(out.data, w.data @ h.data, atol=1e-14)


def test_lora_identity_factors():
    w = Tensor(np.random.default_rng(13).normal(size=(3, 3)))
    adapter = LoraAdapter(
        a=Tensor(np.eye(3), requires_grad=True),
        b=Tensor(np.eye(3), requires_grad=True),
        rank=3,
    )
    h = Tensor(np.array([1.0, -2.0, 0.5]))
    out = lora_forward(adapter, h, w)
    np.testing.assert_allclose(out.data, (w.data + np.eye(3)) @ h.data, atol=1e-13)


def test_lora_matches_dense_materialization():
    rng = np.random.default_rng(14)
    adapter = LoraAdapter.init(4, 4, rank=2, rng=rng)
    adapter.b.data = rng.normal(size=(4, 2))
    w = rng.normal(size=(4, 4))
    h = rng.normal(size=4)
    dense = (w + adapter.a.data @ adapter.b.data.T) @ h
    out = lora_forward(adapter, Tensor(h), Tensor(w))
    np.testing.assert_allclose(out.data, dense, atol=1e-12)


def test_lora_rank_bound():
    rng = np.random.default_rng(15)
    adapter = LoraAdapter.init(8, 8, rank=3, rng=rng)
    adapter.b.data = rng.normal(size=(8, 3))
    delta = adapter.a.data @ adapter.b.data.T
    assert np.linalg.matrix_rank(delta) <= 3


def test_sora_gate_ones_equals_lora():
    rng = np.random.default_rng(16)
    sora = SoraAdapter.init(6, 4, rank=3, sparsity=0.1, rng=np.random.default_rng(1))
    lora = LoraAdapter.init(6, 4, rank=3, rng=np.random.default_rng(1))
    sora.b.data = lora.b.data = rng.normal(size=(6, 3))
    w = Tensor(rng.normal(size=(4, 6)))
    h = Tensor(rng.normal(size=(5, 6)))
    np.testing.assert_allclose(
        sora_forward(sora, h, w).data, lora_forward(lora, h, w).data, atol=1e-12
    )


def test_sora_zero_gate_is_frozen_path():
    rng = np.random.default_rng(17)
    adapter = SoraAdapter.init(4, 4, rank=2, sparsity=0.0, rng=rng)
    adapter.b.data = rng.normal(size=(4, 2))
    adapter.g.data = np.zeros(2)
    w = rng.normal(size=(4, 4))
    h = rng.normal(size=4)
    out = sora_forward(adapter, Tensor(h), Tensor(w))
    np.testing.assert_allclose(out.data, w @ h, atol=1e-14)


def test_sora_single_gate_entry_keeps_one_component():
    rng = np.random.default_rng(18)
    adapter = SoraAdapter.init(4, 4, rank=3, sparsity=0.0, rng=rng)
    adapter.b.data = rng.normal(size=(4, 3))
    adapter.g.data = np.array([0.0, 1.0, 0.0])
    w = rng.normal(size=(4, 4))
    h = rng.normal(size=4)
    # dense oracle with only column 1 retained
    dense = (w + np.outer(adapter.a.data[:, 1], adapter.b.data[:, 1])) @ h
    out = sora_forward(adapter, Tensor(h), Tensor(w))
    np.testing.assert_allclose(out.data, dense, atol=1e-12)


def test_sora_effective_rank():
    adapter = SoraAdapter.init(4, 4, rank=3, sparsity=0.0, rng=np.random.default_rng(0))
    adapter.g.data = np.array([0.5, 0.0, -0.1])
    assert adapter.effective_rank() == 2


# ---------------------------------------------------------------------------
# proximal step
# ---------------------------------------------------------------------------


def test_proximal_zero_sparsity_is_plain_gradient_step():
    g = np.array([0.4, -0.3])
    grad = np.array([1.0, -1.0])
    np.testing.assert_allclose(
        sora_proximal_step(g, grad, eta=0.1, sparsity=0.0), g - 0.1 * grad, atol=1e-15
    )


def test_proximal_hand_example():
    # v = g - eta*grad = [0.3, -0.05], threshold eta*lambda = 0.1
    out = sora_proximal_step(
        np.array([0.3, -0.05]), np.zeros(2), eta=0.1, sparsity=1.0
    )
    np.testing.assert_allclose(out, [0.2, 0.0], atol=1e-15)


def test_proximal_full_shrinkage():
    g = np.array([0.02, -0.015, 0.0])
    out = sora_proximal_step(g, np.zeros(3), eta=0.1, sparsity=1.0)
    np.testing.assert_array_equal(out, np.zeros(3))


def test_proximal_monotone_sparsity_in_lambda():
    rng = np.random.default_rng(19)
    g = rng.normal(size=32)
    grad = rng.normal(size=32)
    zeros_prev = -1
    for lam in (0.0, 0.1, 0.3, 1.0, 3.0, 10.0):
        out = sora_proximal_step(g, grad, eta=0.05, sparsity=lam)
        zeros = int(np.sum(out == 0.0))
        assert zeros >= zeros_prev
        zeros_prev = zeros


def test_proximal_validates_arguments():
    with pytest.raises(ValueError):
        sora_proximal_step(np.ones(2), np.zeros(2), eta=0.0, sparsity=0.1)
    with pytest.raises(ValueError):
        sora_proximal_step(np.ones(2), np.zeros(2), eta=0.1, sparsity=-1.0)


# ---------------------------------------------------------------------------
# prefix
# ---------------------------------------------------------------------------


def test_prefix_zero_length_is_identity():
    adapter = PrefixAdapter.init(0, 4, np.random.default_rng(20))
    states = Tensor(np.random.default_rng(21).normal(size=(3, 4)))
    assert prefix_forward(adapter, states) is states


def test_prefix_concat_contract():
    adapter = PrefixAdapter.init(2, 4, np.random.default_rng(22))
    states = Tensor(np.random.default_rng(23).normal(size=(3, 4)))
    out = prefix_forward(adapter, states)
    assert out.shape == (5, 4)
    np.testing.assert_array_equal(out.data[:2], adapter.p.data)
    np.testing.assert_array_equal(out.data[2:], states.data)


def test_prefix_batched_and_gradient_flow():
    adapter = PrefixAdapter.init(2, 3, np.random.default_rng(24))
    states = Tensor(np.random.default_rng(25).normal(size=(4, 5, 3)))
    out = prefix_forward(adapter, states)
    assert out.shape == (4, 7, 3)
    backward(tensor.tsum(out))
    # prefix grad sums over the batch; token states stay frozen
    np.testing.assert_allclose(adapter.p.grad, 4.0 * np.ones((2, 3)), atol=0)
    assert states.grad is None


# ---------------------------------------------------------------------------
# parameter audit
# ---------------------------------------------------------------------------


def test_count_lora_table_values():
    count, ratio = count_trainable(
        "lora", GPT_NEO, rank=8, multiplicity=1, total_params=GPT_NEO_TOTAL
    )
    assert count == 147_456
    assert f"{ratio * 100:.2f}%" == "0.12%"


def test_count_prefix_table_values():
    count, ratio = count_trainable(
        "prefix", GPT_NEO, prefix_len=60, total_params=GPT_NEO_TOTAL
    )
    assert count == 552_960
    assert f"{ratio * 100:.2f}%" == "0.44%"


def test_count_full_table_values():
    count, ratio = count_trainable("full", GPT_NEO, total_params=GPT_NEO_TOTAL)
    assert count == GPT_NEO_TOTAL
    assert ratio == 1.0


def test_count_unknown_method():
    with pytest.raises(UnknownMethod):
        count_trainable("adapterx", GPT_NEO)


def test_count_qaa_formula():
    # (depth*n + n*d) per site, n = qubits for d
    arch = model.DEFAULT_ARCH  # d=32 -> n=5
    count, _ = count_trainable("qaa", arch, depth=2, multiplicity=2)
    assert count == (2 * 5 + 5 * 32) * arch.n_layers * 2


def test_count_qaa_complexity_scaling():
    # count / (d log2 d) stays bounded across growing d (the d log d claim)
    ratios = []
    for d in (16, 64, 256, 1024):
        arch = ArchSpec(256, d, 1, 1, 4, 64)
        count, _ = count_trainable("qaa", arch, depth=2, multiplicity=1)
        ratios.append(count / (d * np.log2(d)))
    assert max(ratios) <= 3.0 * min(ratios)
    assert max(ratios) < 2.0  # n*(d + depth) / (d log2 d) -> ~1


def test_counting_soundness_matches_instantiated_scalars():
    arch = model.DEFAULT_ARCH
    for method in ("lora", "sora", "prefix", "qaa"):
        built = init_adapters(
            method,
            arch,
            rank=4,
            prefix_len=6,
            depth=2,
            rng=np.random.default_rng(0),
        )
        count, _ = count_trainable(
            method, arch, rank=4, prefix_len=6, depth=2, multiplicity=2
        )
        assert built.trainable_count() == count, method


def test_counting_soundness_full_matches_backbone():
    arch = model.DEFAULT_ARCH
    backbone = model.Backbone(arch, np.random.default_rng(0))
    count, ratio = count_trainable("full", arch)
    assert count == backbone.param_count()
    assert ratio == 1.0


def test_square_site_reduces_to_published_formula():
    # with all sites square (in = out = d), the per-site count is 2*d*r
    arch = ArchSpec(100, 16, 3, 2, 4, 32)
    count, _ = count_trainable("lora", arch, rank=2, multiplicity=1)
    assert count == 2 * 16 * 2 * 3
