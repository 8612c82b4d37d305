"""Gradient-sign attacks under an l-infinity budget: FGSM, BIM, PGD and MI-FGSM."""

import torch
import torch.nn.functional as F

from ..errors import AttackError, ConfigurationError

LINF_VARIANTS = ("BIM", "PGD", "MIFGSM")


def _input_gradient(model, x, labels, loss_fn):
    x = x.detach().requires_grad_(True)
    loss = loss_fn(model(x), labels)
    (grad,) = torch.autograd.grad(loss, x)
    if not torch.isfinite(grad).all():
        raise AttackError("non-finite input gradient")
    return grad


def _ce_sum(logits, labels):
    # Summed so each sample's gradient is independent of the batch size.
    return F.cross_entropy(logits, labels, reduction="sum")


def project_linf(x_adv, x, epsilon):
    return torch.min(torch.max(x_adv, x - epsilon), x + epsilon).clamp_(0.0, 1.0)


def fgsm(model, images, labels, epsilon, loss_fn=None, targeted=False):
    """One signed-gradient step of size ``epsilon``, clipped to [0, 1].

    With ``targeted`` the step descends the loss toward ``labels``.
    """
    if epsilon < 0:
        raise ConfigurationError("epsilon must be non-negative")
    grad = _input_gradient(model, images, labels, loss_fn or _ce_sum)
    direction = -grad.sign() if targeted else grad.sign()
    return (images + epsilon * direction).clamp(0.0, 1.0).detach()


def iterative_linf(variant, model, images, labels, budget, generator=None, loss_fn=None, targeted=False):
    """BIM, PGD (uniform random start) or MI-FGSM; the iterate is projected after every step."""
    variant = variant.upper().replace("-", "")
    if variant not in LINF_VARIANTS:
        raise ConfigurationError(f"unknown l-inf variant {variant!r}")
    if budget.norm != "linf":
        raise ConfigurationError("iterative_linf needs a linf budget")
    loss_fn = loss_fn or _ce_sum
    eps, alpha = budget.epsilon, budget.step_size
    x = images.detach()
    if variant == "PGD":
        noise = torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1
        x_adv = (x + eps * noise).clamp(0.0, 1.0)
    else:
        x_adv = x.clone()
    momentum = torch.zeros_like(x)
    sign = -1.0 if targeted else 1.0
    for _ in range(budget.iterations):
        grad = _input_gradient(model, x_adv, labels, loss_fn)
        if variant == "MIFGSM":
            l1 = grad.abs().flatten(1).sum(1).clamp_min(1e-12).view(-1, *([1] * (grad.dim() - 1)))
            momentum = budget.decay * momentum + grad / l1
            step = momentum.sign()
        else:
            step = grad.sign()
        x_adv = project_linf(x_adv + sign * alpha * step, x, eps)
    return x_adv.detach()
