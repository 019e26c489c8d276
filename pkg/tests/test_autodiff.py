import struct

import numpy as np
import pytest
import torch

from magat_mapf.autodiff import (
    Adam,
    BackwardError,
    ShapeError,
    backward,
    concat,
    conv2d,
    cosine_lr,
    cross_entropy,
    finite_difference_check,
    leaky_relu,
    load_checkpoint,
    masked_softmax,
    matmul,
    mul,
    save_checkpoint,
    tensor,
)
from magat_mapf.autodiff.checkpoint import MAGIC


def test_masked_softmax_two_equal_entries():
    out = masked_softmax(tensor([[3.0, 3.0, 9.0]]), torch.tensor([[True, True, False]]))
    assert out.tolist() == [[0.5, 0.5, 0.0]]


def test_masked_softmax_fully_masked_row_is_zero():
    out = masked_softmax(tensor([[1.0, 2.0], [0.5, 0.1]]), torch.tensor([[False, False], [True, False]]))
    assert out.tolist() == [[0.0, 0.0], [1.0, 0.0]]


def test_masked_softmax_rows_sum_to_one(rng):
    scores = tensor(rng.normal(size=(50, 12)) * 10)
    mask = torch.from_numpy(rng.random((50, 12)) < 0.5)
    mask[:, 0] = True
    assert (masked_softmax(scores, mask).sum(-1) - 1).abs().max() < 1e-9


def test_cross_entropy_tends_to_zero_with_spike():
    losses = [cross_entropy(tensor([[s, 0.0, 0.0, 0.0, 0.0]]), torch.tensor([0])).item() for s in (1, 5, 20, 40)]
    assert losses == sorted(losses, reverse=True) and losses[-1] < 1e-15


def test_sum_gradient_is_ones():
    x = tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    backward(x.sum())
    assert torch.equal(x.grad, torch.ones(3, 4, dtype=x.dtype))


def test_quadratic_form_gradient(rng):
    W = tensor(rng.normal(size=(5, 5)))
    x = tensor(rng.normal(size=5), requires_grad=True)
    backward(matmul(x, matmul(W, x)))
    assert (x.grad - (W + W.T) @ x.detach()).abs().max() < 1e-12


def test_second_backward_raises():
    x = tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    backward(loss)
    with pytest.raises(BackwardError):
        backward(loss)


def test_non_scalar_loss_raises():
    with pytest.raises(ShapeError):
        backward(tensor([1.0, 2.0], requires_grad=True) * 2)


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as info:
        matmul(tensor(np.zeros((2, 3))), tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(info.value) and "(4, 5)" in str(info.value)
    with pytest.raises(ShapeError):
        mul(tensor(np.zeros((2, 3))), tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        concat([tensor(np.zeros((2, 3))), tensor(np.zeros((3, 3)))], axis=1)
    with pytest.raises(ShapeError):
        conv2d(tensor(np.zeros((1, 2, 5, 5))), tensor(np.zeros((4, 3, 3, 3))))
    with pytest.raises(ShapeError):
        cross_entropy(tensor(np.zeros((3, 5))), torch.tensor([0, 1]))


def test_smooth_composite_matches_central_differences(rng):
    for _ in range(10):
        A = tensor(rng.normal(size=(4, 6)), requires_grad=True)
        B = tensor(rng.normal(size=(6, 3)), requires_grad=True)
        mask = torch.from_numpy(rng.random((4, 3)) < 0.7)
        labels = torch.from_numpy(rng.integers(0, 3, size=4))

        def fn():
            scores = masked_softmax(leaky_relu(matmul(A, B)), mask)
            return cross_entropy(matmul(scores, B.T), labels) + mul(A, A).sum()

        res = finite_difference_check(fn, [A, B], h=1e-5)
        assert res.passed(1e-4), res


def test_cosine_schedule_values():
    assert cosine_lr(0) == pytest.approx(1e-3, abs=1e-18)
    assert cosine_lr(300) == pytest.approx(1e-6, abs=1e-18)
    assert cosine_lr(150) == pytest.approx((1e-3 + 1e-6) / 2, rel=1e-12)


def test_adam_matches_torch_adam(rng):
    w0 = rng.normal(size=(4, 3))
    ours = tensor(w0, requires_grad=True)
    ref = tensor(w0, requires_grad=True)
    opt = Adam([("w", ours)], weight_decay=1e-5)
    ref_opt = torch.optim.Adam([ref], lr=1e-3, weight_decay=1e-5)
    X = tensor(rng.normal(size=(8, 4)))
    for k in range(25):
        lr = cosine_lr(k, period=25)
        opt.zero_grad()
        backward((matmul(X, ours) ** 2).sum())
        opt.step(lr)
        ref_opt.zero_grad()
        (matmul(X, ref) ** 2).sum().backward()
        for g in ref_opt.param_groups:
            g["lr"] = lr
        ref_opt.step()
    assert (ours - ref).abs().max().item() < 1e-12


def test_checkpoint_round_trip(tmp_path, rng):
    arrays = {"b": rng.normal(size=(2, 3)), "a": np.arange(5, dtype=np.int64), "s": np.float64(2.5) * np.ones(())}
    save_checkpoint(tmp_path / "x.ckpt", arrays, {"note": "hi"})
    loaded, meta = load_checkpoint(tmp_path / "x.ckpt")
    assert list(loaded) == ["b", "a", "s"] and meta == {"note": "hi"}
    for k in arrays:
        assert np.array_equal(loaded[k], arrays[k]) and loaded[k].dtype == arrays[k].dtype


def test_checkpoint_byte_layout(tmp_path):
    save_checkpoint(tmp_path / "x.ckpt", {"w": np.array([1.0, 2.0])}, {})
    raw = (tmp_path / "x.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    version, hlen = struct.unpack("<IQ", raw[8:20])
    assert version == 1
    assert raw[20 + hlen:] == struct.pack("<2d", 1.0, 2.0)


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "junk").write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "junk")


def test_forward_is_bitwise_deterministic(rng):
    x = tensor(rng.normal(size=(1, 3, 11, 11)))
    w = tensor(rng.normal(size=(8, 3, 3, 3)))
    assert torch.equal(conv2d(x, w, padding=1), conv2d(x, w, padding=1))
