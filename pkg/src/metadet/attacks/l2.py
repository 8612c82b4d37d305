"""Minimum-norm l2 attacks: Carlini-Wagner (margin loss, binary-searched constant) and DeepFool."""

import torch

from ..errors import AttackError, ConfigurationError

L2_VARIANTS = ("CW", "DeepFool")


def _bcast(v, like):
    return v.view(-1, *([1] * (like.dim() - 1)))


def _other_max(logits, cls):
    masked = logits.clone()
    masked.scatter_(1, cls[:, None], float("-inf"))
    return masked.max(1).values


def carlini_wagner_l2(model, images, labels, budget, targeted=False, clip_min=0.0, clip_max=1.0):
    """Returns (adversarial images, success flags).

    Untargeted: ``labels`` are the original classes and success means the
    argmax moved away from them. Targeted: ``labels`` are the targets and
    success means argmax equals the target. Unsuccessful samples are returned
    unchanged.
    """
    x = images.detach()
    n = x.shape[0]
    span = clip_max - clip_min
    x01 = ((x - clip_min) / span).clamp(0, 1)
    w0 = torch.atanh((x01 * 2 - 1) * (1 - 1e-6))
    x_start = (torch.tanh(w0) + 1) / 2 * span + clip_min

    lower = torch.zeros(n)
    upper = torch.full((n,), 1e10)
    const = torch.full((n,), float(budget.initial_const))
    best_l2 = torch.full((n,), float("inf"))
    best_adv = x.clone()
    kappa = budget.confidence

    for _ in range(budget.binary_search_steps):
        modifier = torch.zeros_like(x, requires_grad=True)
        opt = torch.optim.Adam([modifier], lr=budget.learning_rate)
        found = torch.zeros(n, dtype=torch.bool)
        prev = float("inf")
        check_every = max(budget.iterations // 10, 1)
        for it in range(budget.iterations):
            x_new = (torch.tanh(w0 + modifier) + 1) / 2 * span + clip_min
            logits = model(x_new)
            l2 = (x_new - x_start).pow(2).flatten(1).sum(1)
            real = logits.gather(1, labels[:, None]).squeeze(1)
            other = _other_max(logits, labels)
            margin = other - real if targeted else real - other
            f = torch.clamp(margin, min=-kappa)
            loss = (l2 + const * f).sum()
            opt.zero_grad()
            loss.backward()
            if not torch.isfinite(modifier.grad).all():
                raise AttackError("non-finite gradient in C&W")
            with torch.no_grad():
                pred = logits.argmax(1)
                ok = (pred == labels) if targeted else (pred != labels)
                if kappa > 0:
                    ok &= margin <= -kappa
                dist = (x_new - x).pow(2).flatten(1).sum(1)
                improve = ok & (dist < best_l2)
                best_l2 = torch.where(improve, dist, best_l2)
                best_adv[improve] = x_new[improve].detach()
                found |= ok
            opt.step()
            if it % check_every == 0:
                if loss.item() > prev * 0.9999:
                    break
                prev = loss.item()
        with torch.no_grad():
            upper = torch.where(found, torch.minimum(upper, const), upper)
            lower = torch.where(found, lower, torch.maximum(lower, const))
            const = torch.where(upper < 1e9, (lower + upper) / 2, const * 10)

    best_adv = best_adv.clamp(clip_min, clip_max)
    with torch.no_grad():
        pred = model(best_adv).argmax(1)
    success = (pred == labels) if targeted else (pred != labels)
    best_adv[~success] = x[~success]
    return best_adv.detach(), success


def deepfool(model, images, labels, budget, num_classes=None):
    """Iterated linearised projection onto the nearest decision boundary.

    Returns (adversarial images, success flags).
    """
    x0 = images.detach()
    n = x0.shape[0]
    r_tot = torch.zeros_like(x0)
    active = torch.ones(n, dtype=torch.bool)
    scale = 1 + budget.overshoot
    for _ in range(budget.iterations):
        idx = active.nonzero().squeeze(1)
        if idx.numel() == 0:
            break
        xi = (x0[idx] + scale * r_tot[idx]).clamp(0, 1).requires_grad_(True)
        logits = model(xi)
        k = num_classes or logits.shape[1]
        pred = logits.argmax(1)
        orig = labels[idx]
        still = pred == orig
        if not still.any():
            active[idx] = False
            break
        grads = []
        for c in range(k):
            (g,) = torch.autograd.grad(logits[:, c].sum(), xi, retain_graph=c < k - 1)
            grads.append(g)
        grads = torch.stack(grads, 1)  # (m, k, ...)
        if not torch.isfinite(grads).all():
            raise AttackError("non-finite gradient in DeepFool")
        with torch.no_grad():
            g_orig = grads[torch.arange(len(idx)), orig]
            w = grads - g_orig[:, None]
            f = logits - logits.gather(1, orig[:, None])
            w_norm = w.flatten(2).norm(dim=2)
            pert = f.abs() / (w_norm + 1e-8)
            pert[torch.arange(len(idx)), orig] = float("inf")
            best = pert.argmin(1)
            sel = torch.arange(len(idx))
            p = pert[sel, best]
            wl = w[sel, best]
            wl_norm = w_norm[sel, best]
            r = _bcast((p + 1e-4) / (wl_norm + 1e-8), wl) * wl
            upd = idx[still]
            r_tot[upd] += r[still]
            active[idx[~still]] = False
    x_adv = (x0 + scale * r_tot).clamp(0, 1)
    with torch.no_grad():
        success = model(x_adv).argmax(1) != labels
    return x_adv.detach(), success


def l2_attack(variant, model, images, labels, budget, **kwargs):
    """Dispatch to C&W or DeepFool; returns (images, success flags)."""
    if budget.norm != "l2":
        raise ConfigurationError("l2_attack needs an l2 budget")
    if variant == "CW":
        return carlini_wagner_l2(model, images, labels, budget, **kwargs)
    if variant == "DeepFool":
        return deepfool(model, images, labels, budget, **kwargs)
    raise ConfigurationError(f"unknown l2 variant {variant!r}")
