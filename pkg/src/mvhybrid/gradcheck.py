"""Central finite-difference checks against torch autograd."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch.func import functional_call, vmap

from .mixers import runtime_checks

DEFAULT_STEP = 1e-5


@dataclass(frozen=True)
class GradCheck:
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def rel_error(self) -> float:
        """``max |analytic - numeric| / max |numeric|`` (zero when both vanish)."""
        scale = float(np.max(np.abs(self.numeric))) if self.numeric.size else 0.0
        diff = float(np.max(np.abs(self.analytic - self.numeric))) if self.numeric.size else 0.0
        if scale == 0.0:
            return 0.0 if diff == 0.0 else float("inf")
        return diff / scale


def check_function(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
                   h: float = DEFAULT_STEP, weight: torch.Tensor | None = None) -> list[GradCheck]:
    """Compare autograd with central differences of ``sum(weight * fn(*inputs))``.

    Every element of every input is perturbed, so keep inputs small.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    weight = torch.ones_like(out) if weight is None else weight
    grads = torch.autograd.grad((out * weight).sum(), inputs, allow_unused=True)
    results = []
    with torch.no_grad():
        for k, x in enumerate(inputs):
            num = np.empty(x.numel())
            flat = x.view(-1)
            for i in range(x.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                plus = (fn(*inputs) * weight).sum().item()
                flat[i] = orig - h
                minus = (fn(*inputs) * weight).sum().item()
                flat[i] = orig
                num[i] = (plus - minus) / (2 * h)
            g = grads[k]
            ana = np.zeros(x.numel()) if g is None else g.detach().reshape(-1).numpy()
            results.append(GradCheck(ana, num))
    return results


def check_module_parameters(module: torch.nn.Module, fn: Callable[[torch.nn.Module], torch.Tensor],
                            h: float = DEFAULT_STEP) -> dict[str, GradCheck]:
    """Finite differences over every parameter entry of a (small) module."""
    params = dict(module.named_parameters())
    module.zero_grad()
    fn(module).backward()
    out = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            num = np.empty(p.numel())
            for i in range(p.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                plus = fn(module).item()
                flat[i] = orig - h
                minus = fn(module).item()
                flat[i] = orig
                num[i] = (plus - minus) / (2 * h)
            ana = np.zeros(p.numel()) if p.grad is None else p.grad.reshape(-1).numpy().copy()
            out[name] = GradCheck(ana, num)
    return out


def sampled_parameter_check(model: torch.nn.Module, args: tuple, probe: Callable, fraction: float = 0.01,
                            seed: int = 0, h: float = DEFAULT_STEP, batch: int = 256) -> GradCheck:
    """FD check of ``probe(model(*args))`` on a random ``fraction`` of all parameter entries.

    Perturbed copies of one parameter tensor are evaluated together under
    ``vmap``; data-dependent runtime checks are off for those passes.
    """
    params = {k: v.detach() for k, v in model.named_parameters()}
    names = list(params)
    sizes = np.array([params[k].numel() for k in names])
    total = int(sizes.sum())
    count = max(1, int(round(fraction * total)))
    rng = np.random.Generator(np.random.PCG64(seed))
    picks = np.sort(rng.choice(total, size=count, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    owner = np.searchsorted(offsets, picks, side="right") - 1

    model.zero_grad()
    probe(model(*args)).backward()
    analytic = np.concatenate([
        dict(model.named_parameters())[names[t]].grad.reshape(-1)[picks[owner == t] - offsets[t]].numpy()
        for t in np.unique(owner)])
    numeric = []
    with runtime_checks(False), torch.no_grad():
        for t in np.unique(owner):
            name = names[t]
            base = params[name]
            local = picks[owner == t] - offsets[t]

            def f(value, name=name):
                return probe(functional_call(model, {**params, name: value}, args))

            for start in range(0, local.size, batch):
                idx = torch.as_tensor(local[start:start + batch])
                n = idx.numel()
                stacked = base.reshape(1, -1).repeat(2 * n, 1)
                rows = torch.arange(n)
                stacked[2 * rows, idx] += h
                stacked[2 * rows + 1, idx] -= h
                vals = vmap(f)(stacked.reshape(2 * n, *base.shape))
                numeric.append(((vals[0::2] - vals[1::2]) / (2 * h)).numpy())
    return GradCheck(analytic, np.concatenate(numeric))
