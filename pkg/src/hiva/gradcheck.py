"""Analytic vs central finite-difference gradients for the differentiable core ops."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .graph import GraphRefine, au_loss, build_topk_graph, graph_refine, pairwise_similarity
from .interaction import CDCA, DDCA, FusionHead, cdca, ddca, fuse_and_predict
from .text import diff_loss

TARGETS = ("diff_loss", "graph_refine", "ddca", "cdca", "fuse_and_predict", "au_loss")
STEP = 1e-5
TOLERANCE = 1e-4
_TINY = 1e-12


@dataclass
class GradResult:
    target: str
    max_rel_error: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """``|a - n|_inf / max(|a|_inf, |n|_inf, tiny)``."""
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), _TINY)
    return (analytic - numeric).abs().max().item() / scale


def numeric_grad(fn: Callable[[], torch.Tensor], x: torch.Tensor, step: float = STEP) -> torch.Tensor:
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
    return grad


def check_function(name: str, fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
                   step: float = STEP, tolerance: float = TOLERANCE) -> GradResult:
    for t in tensors:
        t.grad = None
    fn().backward()
    worst, count = 0.0, 0
    for t in tensors:
        analytic = t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
        worst = max(worst, relative_error(analytic, numeric_grad(fn, t, step)))
        count += t.numel()
    return GradResult(name, worst, count, tolerance)


def _module_params(*modules: torch.nn.Module) -> list[torch.Tensor]:
    return [p for m in modules for p in m.parameters()]


def _randomize(module: torch.nn.Module, gen: torch.Generator) -> torch.nn.Module:
    # zero-initialised weights (e.g. attention queries) would hide parts of the gradient
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.5)
    return module


def _setup(target: str, gen: torch.Generator):
    """Returns ``(scalar_fn, tensors_to_check)`` on a small random float64 problem."""
    rand = lambda *s: torch.randn(*s, generator=gen, dtype=torch.float64, requires_grad=True)  # noqa: E731

    if target == "diff_loss":
        H = rand(4, 8)
        return (lambda: diff_loss(H)), [H]

    if target == "graph_refine":
        n, c = 4, 6
        U = rand(2, n, c)
        refine = _randomize(GraphRefine(c).double(), gen)
        adj = build_topk_graph(pairwise_similarity(U.detach()), 2)
        R = torch.randn(2, n, c, generator=gen, dtype=torch.float64)
        return (lambda: (graph_refine(U, adj, refine) * R).sum()), [U, *_module_params(refine)]

    if target == "ddca":
        n, L, d, dt = 2, 3, 8, 6
        U, Fm, tok, Z = rand(1, n, d), rand(1, n, 2, 2, d), rand(n, L, dt), rand(n, d)
        mask = torch.ones(n, L, dtype=torch.bool)
        mask[1, -1] = False
        mod = _randomize(DDCA(d, dt).double(), gen)
        R = torch.randn(1, n, d, generator=gen, dtype=torch.float64)
        return (lambda: (ddca(U, Fm, tok, mask, Z, mod)[0] * R).sum()), [U, Fm, tok, Z, *_module_params(mod)]

    if target == "cdca":
        n, d = 3, 8
        xg, Z = rand(1, 2, 2, d), rand(n, d)
        mod = _randomize(CDCA(d).double(), gen)
        R = torch.randn(1, n, d, generator=gen, dtype=torch.float64)
        return (lambda: (cdca(xg, Z, mod)[0] * R).sum()), [xg, Z, *_module_params(mod)]

    if target == "fuse_and_predict":
        n, d = 4, 8
        U, D, C = rand(2, n, d), rand(2, n, d), rand(2, n, d)
        mod = _randomize(FusionHead(n, d).double(), gen)
        R = torch.randn(2, n, generator=gen, dtype=torch.float64)
        return (lambda: (fuse_and_predict(U, D, C, mod)[0] * R).sum()), [U, D, C, *_module_params(mod)]

    if target == "au_loss":
        z = rand(3, 4)
        y = (torch.rand(3, 4, generator=gen) > 0.5).double()
        w = torch.rand(4, generator=gen, dtype=torch.float64) + 0.5
        return (lambda: au_loss(z, y, w)), [z]

    raise ValueError(f"unknown gradcheck target {target!r}; choose from {', '.join(TARGETS)}")


def au_loss_closed_form_error(seed: int = 0) -> float:
    """Max abs deviation of d au_loss / d logit from ``w * (sigmoid(z) - y)`` for one sample."""
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(5, generator=gen, dtype=torch.float64, requires_grad=True)
    y = (torch.rand(5, generator=gen) > 0.5).double()
    w = torch.rand(5, generator=gen, dtype=torch.float64) + 0.5
    au_loss(z, y, w).backward()
    expected = w * (torch.sigmoid(z.detach()) - y)
    return (z.grad - expected).abs().max().item()


def gradient_check(targets: Sequence[str] | None = None, tolerance: float = TOLERANCE,
                   step: float = STEP, seed: int = 0) -> list[GradResult]:
    targets = list(targets or TARGETS)
    unknown = [t for t in targets if t not in TARGETS]
    if unknown:
        raise ValueError(f"unknown gradcheck target {unknown[0]!r}; choose from {', '.join(TARGETS)}")
    results = []
    for i, name in enumerate(targets):
        gen = torch.Generator().manual_seed(seed * 1000 + i)
        fn, tensors = _setup(name, gen)
        results.append(check_function(name, fn, tensors, step, tolerance))
    return results


def format_report(results: Sequence[GradResult]) -> str:
    lines = [f"{'target':<18}{'max_rel_error':>15}{'params':>8}  status"]
    for r in results:
        lines.append(f"{r.target:<18}{r.max_rel_error:>15.3e}{r.n_checked:>8}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
