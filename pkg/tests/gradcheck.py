"""Finite-difference check of the combined loss through a small float64 model."""

import numpy as np
import torch

from dualvvs.augment import AugmentPolicy, interleave_views, make_views_batch, sample_rp_batch
from dualvvs.losses import combine, nt_xent, rp_loss_from_log_probs
from dualvvs.model import BackboneConfig, DualTaskModel, HeadConfig
from oracles import central_difference_grad


def small_float64_model(seed=0):
    backbone = BackboneConfig("tiny_conv", feature_dim=8, input_size=16, widths=[2, 4, 4, 8])
    model = DualTaskModel(backbone, HeadConfig(projection_dim=4, hidden_dim=8), seed=seed)
    return model.double()


def combined_loss_gradients(images, alpha=0.5, step=1e-6, seed=0):
    """Analytic and central-difference gradients for every model parameter.

    BatchNorm uses batch statistics, as in training. In evaluation mode with
    fresh running statistics, all-zero receptive fields put pre-activations
    exactly on the ReLU kink and the two-sided difference disagrees there.
    """
    model = small_float64_model(seed).train()
    x = torch.tensor(np.asarray(images), dtype=torch.float64)
    v1, v2 = make_views_batch(x, np.random.default_rng(seed), AugmentPolicy(output_size=16))
    views = interleave_views(v1, v2).double()
    a, b, labels = sample_rp_batch(x, np.random.default_rng(seed + 1), resize_to=16)
    a, b = a.double(), b.double()

    def loss():
        cl = nt_xent(model.project(model.encode(views)), 0.5)
        rpl = rp_loss_from_log_probs(model.rp_log_probs(model.encode(a), model.encode(b)), labels)
        return combine(cl, rpl, alpha)

    params = [p for p in model.parameters()]
    model.zero_grad()
    loss().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params]).numpy()
    numeric = torch.cat([g.reshape(-1) for g in central_difference_grad(loss, params, step)]).numpy()
    return analytic, numeric, sum(p.numel() for p in params)


def relative_error(analytic, numeric):
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-300))
