"""Central finite-difference gradient checking for torch modules."""

import numpy as np
import torch


def rel_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(loss_fn, params, eps=1e-6, per_tensor=12, seed=0, tol=1e-4):
    """Compare autograd against central differences on sampled entries.

    ``loss_fn()`` must be deterministic and return a float64 scalar tensor.
    Returns ``(n_checked, failures)`` where failures lists
    ``(name, index, analytic, numeric, rel)``.
    """
    rng = np.random.default_rng(seed)
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: p.grad.detach().clone() for name, p in params}
    failures = []
    checked = 0
    with torch.no_grad():
        for name, p in params:
            flat = p.view(-1)
            n = flat.numel()
            picks = rng.choice(n, size=min(n, per_tensor), replace=False)
            for idx in picks:
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = loss_fn().item()
                flat[idx] = orig - eps
                down = loss_fn().item()
                flat[idx] = orig
                numeric = (up - down) / (2 * eps)
                a = analytic[name].view(-1)[idx].item()
                r = rel_error(a, numeric)
                checked += 1
                if r > tol:
                    failures.append((name, int(idx), a, numeric, r))
    return checked, failures


def gat_kink_margin(model, x):
    """Smallest |pre-LeakyReLU attention logit| over adjacent pairs.

    Central differences straddling a kink disagree with autograd for reasons
    unrelated to correctness, so checks should use inputs with a margin well
    above ``eps``.
    """
    g = model.gat
    with torch.no_grad():
        h = model.lift(x.unsqueeze(-1))
        wh = g.weight(h).view(*h.shape[:-1], g.n_heads, g.head_dim)
        src = (wh * g.att_src).sum(-1).transpose(-1, -2)
        dst = (wh * g.att_dst).sum(-1).transpose(-1, -2)
        scores = src.unsqueeze(-1) + dst.unsqueeze(-2)
        return scores[..., model.mask].abs().min().item()
