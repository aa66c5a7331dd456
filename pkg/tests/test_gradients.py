"""Finite-difference checks of every loss on dim-4 surrogate networks (float64)."""
import pytest
import torch

from gradcheck import fd_relative_error, loss_cases, params, surrogate_batch, surrogate_model

TOL = 1e-4

CASES = sorted(loss_cases(surrogate_model(), surrogate_batch(surrogate_model())))


@pytest.fixture(scope="module")
def model_and_batch():
    m = surrogate_model()
    return m, surrogate_batch(m)


@pytest.mark.parametrize("name", CASES)
def test_gradient(model_and_batch, name):
    fn, ps = loss_cases(*model_and_batch)[name]
    assert fd_relative_error(fn, ps) < TOL


def test_consistency_leaves_encoders_alone(model_and_batch):
    m, _ = model_and_batch
    fn, _ = loss_cases(*model_and_batch)["consistency"]
    grads = torch.autograd.grad(fn(), params(m.enc_a, m.enc_v), allow_unused=True)
    assert all(g is None for g in grads)


def test_every_case_has_gradient(model_and_batch):
    for name, (fn, ps) in loss_cases(*model_and_batch).items():
        grads = torch.autograd.grad(fn(), ps, allow_unused=True)
        assert any(g is not None and g.abs().sum() > 0 for g in grads), name
