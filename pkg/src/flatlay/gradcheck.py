"""Finite-difference verification of the denoising-loss gradients."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch

from .diffusion import ldm_loss


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    entries: list = field(default_factory=list)  # (param name, flat index, analytic, numeric, rel error)

    @property
    def n_checked(self) -> int:
        return len(self.entries)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    model: torch.nn.Module,
    canvas: torch.Tensor,
    t,
    eps: torch.Tensor,
    n_params: int = 100,
    h: float = 1e-4,
    tolerance: float = 1e-3,
    seed: int = 0,
    names=None,
) -> GradCheckReport:
    """Compare autograd gradients of ``ldm_loss(eps, model(canvas, t))`` with central differences.

    Works on a float64 copy of ``model``; ``n_params`` elements are sampled
    uniformly (seeded) from the parameters listed in ``names`` (default: all).
    """
    m = copy.deepcopy(model).double()
    m.eval()
    x = canvas.double()
    if x.ndim == 3:
        x, eps = x[None], eps[None]
    eps = eps.double()
    t = torch.as_tensor(t)
    params = dict(m.named_parameters())
    pool = list(params) if names is None else list(names)
    for p in params.values():
        p.requires_grad_(True)

    def loss_fn():
        return ldm_loss(eps, m(x, t))

    m.zero_grad()
    loss_fn().backward()
    grads = {n: params[n].grad.detach().clone() for n in pool}

    sizes = torch.tensor([params[n].numel() for n in pool], dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed)
    picks = torch.multinomial(sizes / sizes.sum(), n_params, replacement=True, generator=gen)
    entries, worst = [], 0.0
    with torch.no_grad():
        for k in picks.tolist():
            name = pool[k]
            flat = params[name].view(-1)
            i = int(torch.randint(0, flat.numel(), (1,), generator=gen))
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            analytic = grads[name].view(-1)[i].item()
            err = relative_error(analytic, numeric)
            worst = max(worst, err)
            entries.append((name, i, analytic, numeric, err))
    return GradCheckReport(max_rel_error=worst, tolerance=tolerance, entries=entries)
