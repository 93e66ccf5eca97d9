"""Central finite-difference gradient checks at double precision.

Each loss is wrapped as a scalar function of explicit leaf tensors; the
analytic gradient from autograd must match central differences with max
relative error below 1e-4 (relative to the gradient's own scale).
"""

import math

import numpy as np
import torch

from segbank.losses import (contrastive_loss, entropy_loss, pseudo_loss,
                            supervised_loss)
from segbank.models import AttentionModuleSet

H = 1e-6


def central_fd(fn, x: torch.Tensor) -> torch.Tensor:
    grad = torch.zeros_like(x)
    flat = x.detach().reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        with torch.no_grad():
            flat[i] = orig + H
            fp = float(fn())
            flat[i] = orig - H
            fm = float(fn())
            flat[i] = orig
        gflat[i] = (fp - fm) / (2 * H)
    return grad


def max_rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(float(numeric.abs().max()), float(analytic.abs().max()), 1e-8)
    return float((analytic - numeric).abs().max()) / scale


def check_grads(fn, leaves) -> float:
    for leaf in leaves:
        if leaf.grad is not None:
            leaf.grad = None
    fn().backward()
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad.detach().clone() if leaf.grad is not None \
            else torch.zeros_like(leaf)
        numeric = central_fd(fn, leaf)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst


def test_supervised_loss_gradients():
    torch.manual_seed(0)
    logits = torch.randn(1, 3, 2, 4, dtype=torch.float64, requires_grad=True)
    target = torch.randint(0, 3, (1, 2, 4))
    target[0, 0, 0] = 255
    alpha = torch.rand(3, dtype=torch.float64) + 0.2

    def fn():
        return supervised_loss(torch.softmax(logits, dim=1), target, alpha)

    assert check_grads(fn, [logits]) < 1e-4


def test_pseudo_loss_gradients():
    torch.manual_seed(1)
    logits = [torch.randn(1, 3, 2, 2, dtype=torch.float64, requires_grad=True)
              for _ in range(2)]
    targets = [torch.randint(0, 3, (1, 2, 2)) for _ in range(2)]
    confs = [torch.rand(1, 2, 2, dtype=torch.float64) for _ in range(2)]

    def fn():
        preds = [torch.softmax(l, dim=1) for l in logits]
        return pseudo_loss(preds, targets, confs, s=6.0)

    assert check_grads(fn, logits) < 1e-4


def test_entropy_loss_gradients():
    torch.manual_seed(2)
    logits = torch.randn(1, 4, 2, 2, dtype=torch.float64, requires_grad=True)

    def fn():
        return entropy_loss([torch.softmax(logits, dim=1)])

    assert check_grads(fn, [logits]) < 1e-4


def test_contrastive_loss_gradients_through_attention():
    torch.manual_seed(3)
    dim = 8
    att = AttentionModuleSet(class_count=2, dim=dim).double()
    att.eval()  # batch-independent statistics keep fn() pure
    preds = {0: torch.randn(3, dim, dtype=torch.float64, requires_grad=True),
             1: torch.randn(2, dim, dtype=torch.float64, requires_grad=True)}
    targets = {0: np.random.default_rng(0).standard_normal((4, dim)).astype(np.float32),
               1: np.random.default_rng(1).standard_normal((2, dim)).astype(np.float32)}

    def fn():
        return contrastive_loss(preds, targets, att)

    leaves = list(preds.values()) + [p for p in att.parameters()]
    assert check_grads(fn, leaves) < 1e-4


def test_contrastive_loss_gradients_train_mode_batchnorm():
    # batch statistics are themselves a function of the inputs; gradients
    # must flow through them too
    torch.manual_seed(4)
    dim = 6
    att = AttentionModuleSet(class_count=1, dim=dim).double()
    att.train()
    preds = {0: torch.randn(4, dim, dtype=torch.float64, requires_grad=True)}
    targets = {0: np.random.default_rng(2).standard_normal((3, dim)).astype(np.float32)}

    def fn():
        return contrastive_loss(preds, targets, att)

    assert check_grads(fn, [preds[0]]) < 1e-4
