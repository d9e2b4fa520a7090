import math
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from exitlab import numerics as nx
from exitlab.errors import BadMagicError, DimensionError, DivergenceError, TruncatedFileError, ConfigError

from conftest import GRAD_INSTANCES, check_grads, kink_free_instances


# --- dense -----------------------------------------------------------------

def test_dense_identity():
    y = nx.dense_forward(torch.tensor([1.0, 0.0]), torch.eye(2), torch.zeros(2))
    assert y.tolist() == [1.0, 0.0]


def test_dense_forced_arithmetic():
    y = nx.dense_forward(torch.tensor([2.0, 3.0]), torch.tensor([[1.0, 0.0], [0.0, 1.0]]), torch.tensor([1.0, 1.0]))
    assert y.tolist() == [3.0, 4.0]


def test_dense_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.dense_forward(torch.ones(3), torch.ones(2, 2))


def test_dense_gradients(f64):
    g = torch.Generator().manual_seed(0)
    for _ in range(GRAD_INSTANCES):
        x = torch.randn(3, 4, generator=g, requires_grad=True)
        w = torch.randn(4, 5, generator=g, requires_grad=True)
        b = torch.randn(5, generator=g, requires_grad=True)
        proj = torch.randn(3, 5, generator=g)
        check_grads(lambda: (nx.dense_forward(x, w, b) * proj).sum(), [x, w, b])


def test_kaiming_init_for_mlp_encoders():
    torch.manual_seed(0)
    mlp = nx.MLP([400, 300, 2], init="kaiming")
    std = mlp.layers[0].weight.std().item()
    assert abs(std - math.sqrt(2 / 400)) < 0.005
    assert torch.all(mlp.layers[0].bias == 0)


# --- GRU -------------------------------------------------------------------

def _zero_gru(in_dim, hidden):
    return (torch.zeros(in_dim, 3 * hidden), torch.zeros(hidden, 3 * hidden), torch.zeros(3 * hidden),
            torch.zeros(3 * hidden))


def test_gru_zero_params_halves_state():
    h = torch.tensor([0.4, -2.0, 1.0])
    out = nx.gru_step(torch.randn(2), h, *_zero_gru(2, 3))
    assert torch.allclose(out, 0.5 * h)


def test_gru_all_zero_stays_zero():
    out = nx.gru_step(torch.zeros(2), torch.zeros(3), *_zero_gru(2, 3))
    assert torch.all(out == 0)


def test_gru_width_mismatch():
    with pytest.raises(DimensionError):
        nx.gru_step(torch.zeros(5), torch.zeros(3), *_zero_gru(2, 3))
    cell = nx.GRUCell(2, 3)
    with pytest.raises(DimensionError):
        cell(torch.zeros(2), torch.zeros(4))


def test_gru_matches_torch_cell():
    torch.manual_seed(1)
    ref = torch.nn.GRUCell(4, 6)
    ours = nx.GRUCell(4, 6)
    with torch.no_grad():
        ours.w_ih.copy_(ref.weight_ih.T)
        ours.w_hh.copy_(ref.weight_hh.T)
        ours.b_ih.copy_(ref.bias_ih)
        ours.b_hh.copy_(ref.bias_hh)
    x, h = torch.randn(5, 4), torch.randn(5, 6)
    assert torch.allclose(ours(x, h), ref(x, h), atol=1e-6)


def test_gru_gradients(f64):
    g = torch.Generator().manual_seed(1)
    for _ in range(GRAD_INSTANCES):
        x = torch.randn(2, 3, generator=g, requires_grad=True)
        h = torch.randn(2, 4, generator=g, requires_grad=True)
        params = [(torch.randn(*s, generator=g) * 0.5).requires_grad_() for s in [(3, 12), (4, 12), (12,), (12,)]]
        proj = torch.randn(2, 4, generator=g)
        check_grads(lambda: (nx.gru_step(x, h, *params) * proj).sum(), [x, h, *params])


# --- attention block --------------------------------------------------------

def test_attention_rows_sum_to_one():
    torch.manual_seed(0)
    layer = nx.EncoderLayer(8, 16, heads=2)
    _, attn = nx.attention_encoder_forward(torch.randn(3, 6, 8), layer)
    assert attn.shape == (3, 2, 6, 6)
    assert torch.allclose(attn.sum(-1), torch.ones(3, 2, 6), atol=1e-6)
    assert torch.all(attn >= 0)


def test_attention_single_token():
    layer = nx.EncoderLayer(4, 8)
    _, attn = nx.attention_encoder_forward(torch.randn(1, 4), layer)
    assert attn.squeeze().item() == 1.0


def test_attention_empty_sequence():
    layer = nx.EncoderLayer(4, 8)
    with pytest.raises(DimensionError):
        nx.attention_encoder_forward(torch.zeros(0, 4), layer)


def test_single_head_is_default():
    assert nx.EncoderLayer(4, 8).heads == 1


def test_attention_gradients(f64):
    def make(i):
        torch.manual_seed(100 + i)
        layer = nx.EncoderLayer(4, 6, heads=2)
        seq = torch.randn(3, 4, requires_grad=True)
        return layer, seq, torch.randn(3, 4)

    def layers_of(inst):
        layer, seq, _ = inst
        return [layer.ff1], lambda: layer(seq)

    count = 0
    for layer, seq, proj in kink_free_instances(make, layers_of):
        params = dict(layer.named_parameters())
        params["seq"] = seq
        check_grads(lambda: (nx.attention_encoder_forward(seq, layer)[0] * proj).sum(), params)
        count += 1
    assert count == GRAD_INSTANCES


def test_encoder_forward_deterministic():
    torch.manual_seed(3)
    layer = nx.EncoderLayer(8, 16, heads=2)
    x = torch.randn(2, 5, 8)
    a, b = layer(x), layer(x)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


# --- softmax / losses -------------------------------------------------------

def test_softmax_examples():
    assert torch.allclose(nx.softmax(torch.tensor([0.0, 0.0])), torch.tensor([0.5, 0.5]))
    assert torch.allclose(nx.softmax(torch.tensor([math.log(3.0), 0.0])), torch.tensor([0.75, 0.25]))
    big = nx.softmax(torch.tensor([1000.0, 0.0]))
    assert torch.isfinite(big).all() and big[0].item() == 1.0 and big[1].item() < 1e-12


def test_softmax_empty():
    with pytest.raises(DimensionError):
        nx.softmax(torch.zeros(0))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_normalised_and_shift_invariant(values, shift):
    x = torch.tensor(values, dtype=torch.float64)
    p = nx.softmax(x)
    assert abs(p.sum().item() - 1.0) <= 1e-6
    assert torch.all(p >= 0)
    assert torch.max(torch.abs(nx.softmax(x + shift) - p)).item() <= 1e-6


def test_cross_entropy_examples():
    assert abs(nx.cross_entropy(torch.tensor([0.0, 0.0]), 0).item() - math.log(2)) < 1e-6
    assert nx.cross_entropy(torch.tensor([10.0, -10.0]), 0).item() <= 1e-6


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        nx.cross_entropy(torch.zeros(2), 2)
    with pytest.raises(ValueError):
        nx.cross_entropy(torch.zeros(2), -1)


def test_cross_entropy_gradient_is_softmax_minus_onehot(f64):
    g = torch.Generator().manual_seed(2)
    for i in range(GRAD_INSTANCES):
        logits = torch.randn(2, generator=g, requires_grad=True)
        label = i % 2
        nx.cross_entropy(logits, label).backward()
        expected = nx.softmax(logits.detach()) - torch.nn.functional.one_hot(torch.tensor(label), 2)
        assert torch.allclose(logits.grad, expected, atol=1e-12)
        check_grads(lambda: nx.cross_entropy(logits, label), [logits])


def test_l1_examples():
    a = torch.randn(4, 3)
    assert nx.l1_mean(a, a.clone()).item() == 0.0
    a = torch.zeros(2, 2)
    b = torch.tensor([[1.0, 1.0], [0.0, 2.0]])
    assert nx.l1_mean(a, b).item() == 2.0


def test_l1_length_mismatch():
    with pytest.raises(DimensionError):
        nx.l1_mean(torch.zeros(2, 3), torch.zeros(3, 3))


def test_l1_subgradient_zero_at_ties():
    a = torch.tensor([[1.0, 2.0]], requires_grad=True)
    nx.l1_mean(a, torch.tensor([[1.0, 0.0]])).backward()
    assert a.grad.tolist() == [[0.0, 1.0]]


def test_l1_gradients_away_from_ties(f64):
    g = torch.Generator().manual_seed(3)
    for _ in range(GRAD_INSTANCES):
        b = torch.randn(5, 3, generator=g)
        offset = torch.rand(5, 3, generator=g) * 0.9 + 0.1  # |a - b| >= 0.1
        sign = torch.where(torch.rand(5, 3, generator=g) > 0.5, 1.0, -1.0)
        a = (b + sign * offset).requires_grad_()
        check_grads(lambda: nx.l1_mean(a, b), [a])


# --- optimiser ---------------------------------------------------------------

def _scalar_store(value=1.0):
    module = torch.nn.Module()
    module.p = torch.nn.Parameter(torch.tensor([value]))
    return module, nx.ParameterStore(module)


def test_adam_first_step_moves_by_lr():
    module, store = _scalar_store()
    opt = nx.Optimizer(store, nx.OptimizerConfig("adam", lr=0.1))
    module.p.grad = torch.tensor([1.0])
    opt.step()
    # m_hat = 1, v_hat = 1, so the step is lr * 1 / (1 + eps)
    assert abs(module.p.item() - (1.0 - 0.1 / (1 + 1e-8))) < 1e-6
    assert store.version == 1


def test_zero_gradient_leaves_params():
    module, store = _scalar_store(0.7)
    opt = nx.Optimizer(store, nx.OptimizerConfig("adam", lr=0.1))
    before = module.p.detach().clone()
    module.p.grad = torch.tensor([0.0])
    opt.step()
    assert torch.equal(module.p.detach(), before)


def test_adamw_decoupled_decay():
    module, store = _scalar_store(2.0)
    opt = nx.Optimizer(store, nx.OptimizerConfig("adamw", lr=0.1, weight_decay=0.5))
    module.p.grad = torch.tensor([0.0])
    opt.step()
    assert module.p.item() == pytest.approx(2.0 * (1 - 0.1 * 0.5), rel=1e-6)


def test_nan_gradient_names_parameter():
    module, store = _scalar_store()
    opt = nx.Optimizer(store, nx.OptimizerConfig("adam"))
    module.p.grad = torch.tensor([float("nan")])
    with pytest.raises(DivergenceError, match="'p'"):
        opt.step()
    assert store.version == 0


def test_version_strictly_increases():
    module, store = _scalar_store()
    opt = nx.Optimizer(store, nx.OptimizerConfig("adam"))
    seen = [store.version]
    for _ in range(5):
        module.p.grad = torch.tensor([0.3])
        opt.step()
        seen.append(store.version)
    assert all(b > a for a, b in zip(seen, seen[1:]))


@pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"lr": -1.0}, {"beta1": 1.0}, {"beta2": -0.1}, {"algorithm": "sgd"}])
def test_optimizer_config_validation(kwargs):
    with pytest.raises(ConfigError):
        nx.OptimizerConfig(**kwargs)


def test_grad_buffers_match_shapes():
    torch.manual_seed(0)
    mlp = nx.MLP([3, 4, 2])
    store = nx.ParameterStore(mlp)
    mlp(torch.randn(5, 3)).sum().backward()
    for name, p in store.params.items():
        assert store.grads[name].shape == p.shape


# --- checkpoints ------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    torch.manual_seed(0)
    mlp = nx.MLP([3, 5, 2])
    path = tmp_path / "m.exl"
    nx.module_to_checkpoint(mlp, path)
    other = nx.MLP([3, 5, 2])
    nx.checkpoint_to_module(other, path)
    for (n1, a), (n2, b) in zip(mlp.state_dict().items(), other.state_dict().items()):
        assert n1 == n2 and torch.equal(a, b)
    assert path.read_bytes()[:4] == b"EXL1"


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "x.exl"
    nx.save_checkpoint(path, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    raw = path.read_bytes()
    expected = b"EXL1" + struct.pack("<Q", 1) + b"w" + struct.pack("<QQQ", 2, 2, 3)
    expected += np.arange(6, dtype="<f4").tobytes()
    assert raw == expected


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.exl"
    path.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(BadMagicError):
        nx.load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "t.exl"
    nx.save_checkpoint(path, {"w": np.ones((4, 4), dtype=np.float32)})
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(TruncatedFileError):
        nx.load_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path):
    path = tmp_path / "m.exl"
    nx.module_to_checkpoint(nx.MLP([3, 5, 2]), path)
    with pytest.raises(DimensionError):
        nx.checkpoint_to_module(nx.MLP([3, 4, 2]), path)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=0, max_size=3))
def test_checkpoint_value_count_matches_extents(tmp_path_factory, shape):
    path = tmp_path_factory.mktemp("ck") / "c.exl"
    arr = np.random.default_rng(0).standard_normal(shape).astype(np.float32)
    nx.save_checkpoint(path, {"a": arr})
    back = nx.load_checkpoint(path)["a"]
    assert back.size == int(np.prod(shape)) and np.array_equal(back, arr)
