"""Robust coordinate-network anchors via adversarial weight perturbation.

A network fitted to a blurred target is made robust by, at every step,
perturbing its weights in the direction that most degrades structural
similarity (norm-bounded relative to the weight norm), taking the
optimizer step at the perturbed point, and then removing the perturbation.
The resulting anchors hold their low-frequency content when later driven
by encoder gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import torch

from .gradients import NumericalOverflowError, ParamVector
from .imaging import gaussian_blur, psnr, ssim
from .inr import CoordinateGrid, INRSpec, INRWeights, init_finer, render_t


@dataclass(frozen=True)
class AWPConfig:
    """Weight-perturbation settings: scale, division guard, proxy step size."""

    gamma: float = 0.01
    epsilon: float = 1e-12
    proxy_lr: float = 1e-4

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


@dataclass(frozen=True)
class RobustFitConfig:
    steps: int = 2000
    lr: float = 1e-4
    restart_period: int = 100
    w_mse: float = 0.85
    w_ssim: float = 0.25
    w_l1: float = 0.25
    blur_kernel: int = 101
    blur_sigma: float = 15.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if min(self.w_mse, self.w_ssim, self.w_l1) < 0:
            raise ValueError("loss weights must be >= 0")


def _torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


def compute_awp(phi: INRWeights, grid: CoordinateGrid, target, cfg: AWPConfig,
                dtype: torch.dtype | None = None) -> ParamVector:
    """Adversarial weight perturbation for one step.

    One gradient-ascent step on the structural dissimilarity of the render
    against the (already blurred) target, taken on a proxy copy, then
    rescaled to gamma * ||phi|| * ||raw|| / (||raw|| + eps).  With gamma = 0
    the result is exactly zero.
    """
    if dtype is None:
        dtype = torch.float64 if phi.params.values.dtype == np.float64 else torch.float32
    target_t = target if isinstance(target, torch.Tensor) else torch.from_numpy(
        np.asarray(target, dtype=np.float64)).to(dtype)
    proxy = torch.from_numpy(phi.params.values).to(dtype).requires_grad_(True)
    # norm in torch: a numpy BLAS call here thrashes torch's thread pool
    phi_norm = float(torch.linalg.vector_norm(proxy.detach().to(torch.float64)))
    if phi_norm == 0.0:
        raise ValueError("degenerate anchor: zero weight norm")
    img = render_t(proxy, phi.spec, grid.coords_t(dtype), grid.height, grid.width)
    similarity = ssim(img, target_t)
    (g,) = torch.autograd.grad(similarity, proxy)
    raw = -cfg.proxy_lr * g  # ascent step on (1 - ssim)
    raw_norm = float(torch.linalg.vector_norm(raw.to(torch.float64)))
    delta = (cfg.gamma * phi_norm / (raw_norm + cfg.epsilon)) * raw
    return ParamVector(delta.detach().numpy().astype(phi.params.values.dtype), phi.params.layout)


def train_robust_inr(x: np.ndarray, spec: INRSpec, fit: RobustFitConfig,
                     awp: AWPConfig, seed: int,
                     bias_bounds=None,
                     on_step: Callable[[int, float, float], None] | None = None) -> INRWeights:
    """Fit an anchor to blur(x) with per-step adversarial weight perturbation.

    Each iteration: compute the perturbation, apply it, evaluate
    w_mse*MSE + w_ssim*(1 - SSIM) + w_l1*L1 against the blurred target at the
    perturbed weights, take one Adam step (cosine annealing with warm
    restarts), then remove the perturbation.  Deterministic given the seed.
    """
    target = gaussian_blur(np.asarray(x, dtype=np.float64), fit.blur_kernel, fit.blur_sigma)
    return _fit(target, spec, fit, seed, awp=awp, bias_bounds=bias_bounds, on_step=on_step)


def fit_inr(target: np.ndarray, spec: INRSpec, fit: RobustFitConfig, seed: int,
            init: INRWeights | None = None, bias_bounds=None,
            on_step: Callable[[int, float, float], None] | None = None) -> INRWeights:
    """Plain fit of the network to ``target`` (no weight perturbation).

    The caller chooses whether the target is blurred.  ``init`` continues
    from existing weights instead of a fresh seeded init.
    """
    return _fit(target, spec, fit, seed, awp=None, init=init,
                bias_bounds=bias_bounds, on_step=on_step)


def _fit(target: np.ndarray, spec: INRSpec, fit: RobustFitConfig, seed: int,
         awp: AWPConfig | None, init: INRWeights | None = None,
         bias_bounds=None, on_step=None) -> INRWeights:
    dtype = _torch_dtype(fit.dtype)
    h, w = target.shape[0], target.shape[1]
    grid = CoordinateGrid(h, w)
    coords = grid.coords_t(dtype)
    target_t = torch.from_numpy(np.asarray(target, dtype=np.float64)).to(dtype)

    start = init if init is not None else init_finer(spec, seed, bias_bounds=bias_bounds)
    p = torch.from_numpy(start.params.values.astype(_np_dtype(dtype))).clone().requires_grad_(True)
    layout = spec.layout()
    opt = torch.optim.Adam([p], lr=fit.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(opt, T_0=fit.restart_period)

    for step in range(fit.steps):
        # Perturbation bookkeeping: the anchor is restored as
        # orig + (optimizer movement at the perturbed point), which makes the
        # lr = 0 restoration an exact identity and the gamma = 0 path
        # bit-identical to the plain fit.
        orig = pre_step = None
        if awp is not None:
            current = INRWeights(spec, ParamVector(p.detach().numpy().copy(), layout))
            delta = compute_awp(current, grid, target_t, awp, dtype=dtype)
            delta_t = torch.from_numpy(delta.values).to(dtype)
            if bool(torch.any(delta_t != 0)):
                with torch.no_grad():
                    orig = p.detach().clone()
                    p.add_(delta_t)
                    pre_step = p.detach().clone()
        img = render_t(p, spec, coords, h, w)
        loss = (fit.w_mse * ((img - target_t) ** 2).mean()
                + fit.w_ssim * (1.0 - ssim(img, target_t))
                + fit.w_l1 * (img - target_t).abs().mean())
        if not bool(torch.isfinite(loss)):
            raise NumericalOverflowError(
                "non-finite loss in robust fit", step=step,
                last_good=INRWeights(spec, ParamVector(p.detach().numpy().copy(), layout)),
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if orig is not None:
            with torch.no_grad():
                p.copy_(orig + (p.detach() - pre_step))
        if on_step is not None:
            on_step(step, float(loss.detach()), opt.param_groups[0]["lr"])

    final = p.detach().numpy().astype(np.float32)
    return INRWeights(spec, ParamVector(final, layout))


def _np_dtype(dtype: torch.dtype):
    return np.float64 if dtype == torch.float64 else np.float32


def robust_fit_report(x: np.ndarray, weights: INRWeights, fit: RobustFitConfig) -> dict:
    """Sidecar metadata for a trained anchor (PSNR is against the blurred target)."""
    from .imaging import image_hash
    from .inr import render

    target = gaussian_blur(np.asarray(x, dtype=np.float64), fit.blur_kernel, fit.blur_sigma)
    out = render(weights, CoordinateGrid(target.shape[0], target.shape[1]))
    return {
        "source_image_hash": image_hash(x).hex(),
        "blur_sigma": fit.blur_sigma,
        "final_psnr": psnr(out, target),
    }
