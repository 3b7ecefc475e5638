"""Central-difference gradient oracle shared by the gradient tests."""

import torch


def fd_grad(fn, tensor: torch.Tensor, eps: float = 1e-6, index=None) -> torch.Tensor:
    """Central differences of scalar ``fn()`` w.r.t. ``tensor`` (perturbed in place).

    ``index`` optionally restricts the check to a subset of flat positions; other
    entries of the result are left at zero.
    """
    flat = tensor.data.view(-1)
    out = torch.zeros_like(flat)
    positions = range(flat.numel()) if index is None else index
    for i in positions:
        orig = flat[i].item()
        flat[i] = orig + eps
        up = float(fn())
        flat[i] = orig - eps
        down = float(fn())
        flat[i] = orig
        out[i] = (up - down) / (2 * eps)
    return out.view_as(tensor)


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom
