"""Text-to-image inversion: optimize anchor weights against embedding targets.

The loop renders the network, embeds a batch of augmented renders through
the frozen encoder, and descends a cosine loss toward the (Procrustes-
projected) text embedding plus an optional blending anchor.  Learning
rates follow a Gaussian profile over layer depth whose center sweeps from
early (low-frequency) to deeper layers, and each layer's gradient block is
norm-clipped with a per-phase threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .alignment import build_local_pairs, project_text, solve_procrustes
from .dataset import DatasetStore, blend_target, retrieve_init
from .encoder import EncoderHandle, embed_text
from .gradients import NumericalOverflowError, ParamVector, check_finite
from .imaging import AugmentationConfig, augment_batch
from .inr import CoordinateGrid, INRWeights, forward_t
from .robust_init import _np_dtype, _torch_dtype


@dataclass(frozen=True)
class InversionConfig:
    """Every knob of the inversion loop, ablation switches included."""

    steps: int = 400
    base_lr: float = 2e-4
    schedule_centers: tuple[int, ...] = (0, 1, 2)
    schedule_period: int = 70
    schedule_sigma: float = 1.0
    clip_thresholds: tuple[float, ...] = (1.0, 0.5, 0.2)
    beta: float = 0.5
    blend_k: int = 8
    procrustes_p: int = 256
    augment_n: int = 32
    seed: int = 0
    use_awp_init: bool = True
    use_procrustes: bool = True
    use_freq_schedule: bool = True
    use_blend: bool = True
    prompt_suffix: str = ""
    retrieve_by: str = "projected"  # "projected" | "raw"
    color_shift_range: float = 0.1
    scale_range: tuple[float, float] = (0.8, 1.2)
    shear_range: float = 0.15
    weight_decay: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    dtype: str = "float32"
    render_size: int | None = None  # None: encoder input resolution

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if len(self.schedule_centers) != len(self.clip_thresholds):
            raise ValueError("schedule_centers and clip_thresholds must pair up")
        if not self.schedule_centers:
            raise ValueError("need at least one schedule center")
        if self.base_lr <= 0 or min(self.clip_thresholds) <= 0:
            raise ValueError("rates and clip thresholds must be positive")
        if self.schedule_period < 1 or self.schedule_sigma <= 0:
            raise ValueError("schedule_period >= 1 and schedule_sigma > 0 required")
        if self.beta < 0 or self.blend_k < 1 or self.procrustes_p < 1 or self.augment_n < 1:
            raise ValueError("beta >= 0 and k/p/n >= 1 required")
        if self.retrieve_by not in ("projected", "raw"):
            raise ValueError("retrieve_by must be 'projected' or 'raw'")


@dataclass(frozen=True)
class ScheduleState:
    """Per-layer learning rates for one step of the sweep."""

    phase: int
    center: int
    lr: np.ndarray
    clip: float


@dataclass(frozen=True)
class TraceRow:
    step: int
    align_loss: float
    blend_loss: float
    total: float
    center: int


def schedule_rates(step: int, cfg: InversionConfig, num_layers: int) -> ScheduleState:
    """Gaussian learning-rate profile around the active center layer.

    The center advances through ``schedule_centers`` every
    ``schedule_period`` steps and stays at the last one; the peak rate is
    ``base_lr`` and layer l gets base_lr * exp(-(l - c)^2 / (2 sigma^2)).
    With the schedule disabled every layer runs at base_lr.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    phase = min(step // cfg.schedule_period, len(cfg.schedule_centers) - 1)
    center = cfg.schedule_centers[phase]
    layers = np.arange(num_layers, dtype=np.float64)
    if cfg.use_freq_schedule:
        lr = cfg.base_lr * np.exp(-((layers - center) ** 2) / (2.0 * cfg.schedule_sigma**2))
    else:
        lr = np.full(num_layers, cfg.base_lr)
    return ScheduleState(phase=phase, center=center, lr=lr,
                         clip=cfg.clip_thresholds[phase])


def step_augmentation(cfg: InversionConfig, step: int) -> AugmentationConfig:
    """Per-step augmentation family, reseeded deterministically from (seed, step)."""
    seed = int(np.random.SeedSequence([cfg.seed, step]).generate_state(1)[0])
    return AugmentationConfig(
        count=cfg.augment_n,
        color_shift_range=cfg.color_shift_range,
        scale_range=cfg.scale_range,
        shear_range=cfg.shear_range,
        seed=seed,
    )


def _augmented_embedding_t(blocks, spec, h: EncoderHandle, aug: AugmentationConfig,
                           size: int, coords: torch.Tensor) -> torch.Tensor:
    """Render once, embed all augmentations, average in index order, re-normalize."""
    img = forward_t(blocks, spec, coords).reshape(size, size, spec.out_features)
    check_finite(img, "rendered image")
    variants = augment_batch(img, aug)
    embs = h.embed_image_t(variants)
    check_finite(embs, "augmented embeddings")
    mean = embs.mean(dim=0)
    return mean / torch.linalg.vector_norm(mean)


def augmented_embedding(phi: INRWeights, h: EncoderHandle, aug: AugmentationConfig,
                        render_size: int | None = None) -> np.ndarray:
    """Augmentation-averaged unit-norm embedding of the network's render."""
    size = render_size or h.image_resolution
    coords = CoordinateGrid(size, size).coords_t(torch.float64)
    with torch.no_grad():
        flat = torch.from_numpy(phi.params.values.astype(np.float64))
        blocks = phi.spec.layout().split(flat)
        e = _augmented_embedding_t(blocks, phi.spec, h, aug, size, coords)
    return e.numpy()


def total_loss(e_i: np.ndarray, e_t2i: np.ndarray, e_img: np.ndarray | None,
               beta: float) -> float:
    """Alignment cosine distance plus beta-weighted blending cosine distance."""
    align = 1.0 - float(np.dot(np.asarray(e_i, np.float64), np.asarray(e_t2i, np.float64)))
    if e_img is None or beta == 0.0:
        return align
    return align + beta * (1.0 - float(np.dot(np.asarray(e_i, np.float64),
                                              np.asarray(e_img, np.float64))))


StepCallback = Callable[[int, dict], None]


class FingerprintError(RuntimeError):
    pass


def invert_to_embedding(target: np.ndarray, init: INRWeights, h: EncoderHandle,
                        cfg: InversionConfig, anchor: np.ndarray | None = None,
                        anchor_weight: float = 0.0,
                        on_step: StepCallback | None = None,
                        ) -> tuple[INRWeights, list[TraceRow]]:
    """Optimize ``init`` so its augmented render embedding matches ``target``.

    The optional ``anchor`` embedding adds anchor_weight * cosine_distance
    to the loss (blending prior, content anchor, ...).  Deterministic given
    the config seed; zero steps return the initialization unchanged.
    """
    spec = init.spec
    dtype = _torch_dtype(cfg.dtype)
    size = cfg.render_size or h.image_resolution
    if cfg.steps == 0:
        return init.copy(), []
    coords = CoordinateGrid(size, size).coords_t(dtype)
    target_t = torch.from_numpy(np.asarray(target, np.float64)).to(dtype)
    anchor_t = None
    if anchor is not None and anchor_weight != 0.0:
        anchor_t = torch.from_numpy(np.asarray(anchor, np.float64)).to(dtype)

    layout = spec.layout()
    np_blocks = ParamVector(init.params.values.astype(_np_dtype(dtype)), layout).blocks()
    blocks = []
    groups = []
    for w, b in np_blocks:
        wt = torch.from_numpy(np.ascontiguousarray(w)).clone().requires_grad_(True)
        bt = torch.from_numpy(np.ascontiguousarray(b)).clone().requires_grad_(True)
        blocks.append((wt, bt))
        groups.append({"params": [wt, bt], "lr": cfg.base_lr})
    opt = torch.optim.AdamW(groups, betas=cfg.adam_betas,
                            weight_decay=cfg.weight_decay, amsgrad=False)

    trace: list[TraceRow] = []
    prev = init.params.values.copy()
    for step in range(cfg.steps):
        sched = schedule_rates(step, cfg, spec.num_layers)
        for lr, group in zip(sched.lr, opt.param_groups):
            group["lr"] = float(lr)
        aug = step_augmentation(cfg, step)
        e_i = _augmented_embedding_t(blocks, spec, h, aug, size, coords)
        align = 1.0 - (e_i * target_t).sum()
        blend = None
        loss = align
        if anchor_t is not None:
            blend = 1.0 - (e_i * anchor_t).sum()
            loss = align + anchor_weight * blend
        if not bool(torch.isfinite(loss)):
            raise NumericalOverflowError(
                "non-finite inversion loss", step=step,
                last_good=INRWeights(spec, ParamVector(prev, layout)))
        opt.zero_grad()
        loss.backward()
        clip_norms = _clip_blocks(blocks, sched.clip)
        opt.step()
        row = TraceRow(step=step, align_loss=float(align.detach()),
                       blend_loss=float(blend.detach()) if blend is not None else 0.0,
                       total=float(loss.detach()), center=sched.center)
        trace.append(row)
        if on_step is not None:
            on_step(step, {
                "row": row,
                "postclip_norms": clip_norms,
                "schedule": sched,
                "weights": lambda: _collect(blocks, spec, layout),
                "embedding": e_i.detach().to(torch.float64).numpy(),
            })
        prev = _collect(blocks, spec, layout).params.values
    return _collect(blocks, spec, layout), trace


def _clip_blocks(blocks, cap: float) -> np.ndarray:
    """Rescale each layer's (W, b) gradient block to norm <= cap; returns norms.

    Rescaling repeats if float rounding leaves the recomputed norm a hair
    above the cap, so the inequality holds exactly on the stored gradients.
    """
    norms = np.empty(len(blocks))
    with torch.no_grad():
        for i, (w, b) in enumerate(blocks):
            def block_norm():
                return float(torch.sqrt(torch.sum(w.grad.to(torch.float64) ** 2)
                                        + torch.sum(b.grad.to(torch.float64) ** 2)))

            n = block_norm()
            while n > cap:
                scale = cap / n
                w.grad.mul_(scale)
                b.grad.mul_(scale)
                n = block_norm()
            norms[i] = n
    return norms


def _collect(blocks, spec, layout) -> INRWeights:
    np_blocks = [(w.detach().numpy().copy(), b.detach().numpy().copy()) for w, b in blocks]
    dtype = np_blocks[0][0].dtype
    return INRWeights(spec, ParamVector.from_blocks(np_blocks, layout, dtype=dtype))


def invert(prompt: str, store: DatasetStore, h: EncoderHandle, cfg: InversionConfig,
           on_step: StepCallback | None = None,
           ) -> tuple[INRWeights, list[TraceRow]]:
    """Full text-to-image run: embed, align, retrieve, blend, optimize.

    Stages: (1) embed prompt (plus suffix); (2) project it into the image
    sub-manifold via a local Procrustes solve; (3) retrieve the anchor
    network whose caption is closest to the (projected) embedding; (4) build
    the blended natural-image target; (5) run the optimization loop.
    """
    if store.encoder_fingerprint != h.fingerprint:
        raise FingerprintError(
            f"store encoder {store.encoder_fingerprint} != active encoder {h.fingerprint}")
    if not store.entries:
        raise ValueError("store is empty")

    e_t = embed_text(h, prompt + cfg.prompt_suffix)
    if cfg.use_procrustes:
        pairs = build_local_pairs(e_t, store, cfg.procrustes_p)
        e_t2i = project_text(e_t, solve_procrustes(pairs))
    else:
        e_t2i = e_t

    query = e_t2i if cfg.retrieve_by == "projected" else e_t
    entry = retrieve_init(query, store)
    init = store.load_weights(entry, plain=not cfg.use_awp_init)

    e_img = blend_target(e_t, store, cfg.blend_k) if cfg.use_blend else None
    return invert_to_embedding(e_t2i, init, h, cfg, anchor=e_img,
                               anchor_weight=cfg.beta if cfg.use_blend else 0.0,
                               on_step=on_step)


def write_trace(trace: Sequence[TraceRow], path) -> None:
    """Plain-text loss table: step, alignment, blend, total, active center."""
    lines = ["step\talign_loss\tblend_loss\ttotal\tcenter"]
    for r in trace:
        lines.append(f"{r.step}\t{r.align_loss:.8f}\t{r.blend_loss:.8f}"
                     f"\t{r.total:.8f}\t{r.center}")
    Path(path).write_text("\n".join(lines) + "\n")
