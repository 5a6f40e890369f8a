"""Central finite-difference oracle for analytic gradients.

`fd_compare` evaluates a scalar-valued closure twice per parameter entry
(central differences, f64) and compares against autograd. The closure rebuilds
the full forward pass on every call, so the oracle is independent of any
cached state in the analytic path.
"""

import torch


def central_difference(fn, params, step=1e-4):
    """Numeric gradient of fn() w.r.t. each tensor in `params` (in-place perturbation)."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = float(fn())
                flat[i] = orig - step
                f_minus = float(fn())
                flat[i] = orig
                gflat[i] = (f_plus - f_minus) / (2.0 * step)
            grads.append(g)
    return grads


def max_relative_error(analytic, numeric, significant=1e-6):
    """Max of |a - n| / max(|a|, |n|) over entries where either exceeds `significant`."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        mask = (a.abs() > significant) | (n.abs() > significant)
        if not bool(mask.any()):
            continue
        denom = torch.maximum(a.abs(), n.abs())
        rel = ((a - n).abs() / denom)[mask]
        worst = max(worst, float(rel.max()))
    return worst


def fd_compare(make_loss, params, step=1e-4, significant=1e-6):
    """Return (max relative error, analytic grads, numeric grads).

    `make_loss` rebuilds the forward pass from the current `params` values and
    returns a scalar tensor; `params` must be f64 leaf tensors.
    """
    for p in params:
        assert p.dtype == torch.float64, "finite differences need f64 headroom"
        p.requires_grad_(True)
        if p.grad is not None:
            p.grad = None
    loss = make_loss()
    analytic = torch.autograd.grad(loss, params, allow_unused=True, materialize_grads=True)
    numeric = central_difference(make_loss, params, step=step)
    return max_relative_error(analytic, numeric, significant), analytic, numeric
