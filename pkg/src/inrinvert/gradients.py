"""Flat parameter vectors and the gradient-evaluation contract.

Every scalar loss used by the optimization loops is a function of a flat
parameter vector whose block structure (per-layer weight/bias shapes) is
described by a :class:`ParamLayout`.  Analytic gradients are produced by
reverse-mode automatic differentiation (torch, CPU); the independent
central-finite-difference oracle lives here too so the two routes can be
checked against each other.

Conventions:
  * gradients are always evaluated with 64-bit accumulation, regardless of
    how the parameters are stored;
  * the derivative of ``|x|`` at ``x = 0`` is defined as 0 (torch's
    convention, symmetric subgradient).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch


class NumericalOverflowError(RuntimeError):
    """A non-finite value appeared in a differentiable computation.

    ``context`` names the first offending sub-expression; optimization loops
    attach the failing ``step`` and the ``last_good`` parameters.
    """

    def __init__(self, context: str, step: int | None = None, last_good=None):
        msg = context if step is None else f"{context} (at step {step})"
        super().__init__(msg)
        self.context = context
        self.step = step
        self.last_good = last_good


def check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    """Guard used by pipeline stages to name the first non-finite value."""
    if not bool(torch.isfinite(t).all()):
        raise NumericalOverflowError(f"non-finite value in {what}")
    return t


@dataclass(frozen=True)
class LayerBlock:
    """One (W, b) block: W is rows x cols, bias has length rows."""

    rows: int
    cols: int
    has_bias: bool = True

    @property
    def size(self) -> int:
        return self.rows * self.cols + (self.rows if self.has_bias else 0)


@dataclass(frozen=True)
class ParamLayout:
    """Immutable mapping from flat offsets to per-layer (W, b) blocks."""

    blocks: tuple[LayerBlock, ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        offsets = []
        off = 0
        for blk in self.blocks:
            offsets.append(off)
            off += blk.size
        object.__setattr__(self, "_offsets", tuple(offsets))
        object.__setattr__(self, "_total", off)

    @property
    def total_size(self) -> int:
        return self._total

    def __len__(self) -> int:
        return len(self.blocks)

    def split(self, values):
        """Slice a flat vector (numpy or torch) into [(W, b), ...] views.

        Views preserve the autograd graph when ``values`` is a torch tensor.
        """
        if values.shape[-1] != self._total:
            raise ValueError(
                f"flat vector has {values.shape[-1]} entries, layout expects {self._total}"
            )
        out = []
        for blk, off in zip(self.blocks, self._offsets):
            w = values[off : off + blk.rows * blk.cols].reshape(blk.rows, blk.cols)
            b = None
            if blk.has_bias:
                b = values[off + blk.rows * blk.cols : off + blk.size]
            out.append((w, b))
        return out

    def flatten(self, blocks) -> np.ndarray:
        """Inverse of :meth:`split` for numpy blocks."""
        if len(blocks) != len(self.blocks):
            raise ValueError("block count mismatch")
        parts = []
        for (w, b), blk in zip(blocks, self.blocks):
            w = np.asarray(w)
            if w.shape != (blk.rows, blk.cols):
                raise ValueError(f"block shape {w.shape} != {(blk.rows, blk.cols)}")
            parts.append(w.reshape(-1))
            if blk.has_bias:
                b = np.asarray(b)
                if b.shape != (blk.rows,):
                    raise ValueError("bias shape mismatch")
                parts.append(b)
            elif b is not None:
                raise ValueError("bias given for a bias-free block")
        return np.concatenate(parts)


@dataclass
class ParamVector:
    """Flat parameter record with an immutable block layout."""

    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 1:
            raise ValueError("ParamVector values must be one-dimensional")
        if self.values.dtype not in (np.float32, np.float64):
            self.values = self.values.astype(np.float64)
        if self.values.size != self.layout.total_size:
            raise ValueError(
                f"{self.values.size} values do not fill layout of size {self.layout.total_size}"
            )

    def blocks(self):
        return self.layout.split(self.values)

    @classmethod
    def from_blocks(cls, blocks, layout: ParamLayout, dtype=np.float64) -> "ParamVector":
        return cls(layout.flatten(blocks).astype(dtype, copy=False), layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def astype(self, dtype) -> "ParamVector":
        return ParamVector(self.values.astype(dtype), self.layout)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values.astype(np.float64)))


@dataclass
class GradientReport:
    """Loss value plus the gradient in the same layout as the parameters."""

    gradient: ParamVector
    loss_value: float

    def __post_init__(self):
        if not np.isfinite(self.loss_value):
            raise ValueError("GradientReport loss_value must be finite")


LossFn = Callable[[torch.Tensor], torch.Tensor]


def evaluate_with_gradient(loss: LossFn, params: ParamVector) -> GradientReport:
    """Evaluate ``loss`` at ``params`` and return value plus full gradient.

    ``loss`` receives a 1-D float64 torch tensor (the flat parameters) and
    must return a scalar tensor built from differentiable torch operations.
    Deterministic: identical inputs give bitwise-identical reports.
    """
    x = torch.from_numpy(params.values.astype(np.float64)).requires_grad_(True)
    value = loss(x)
    if value.dim() != 0:
        raise ValueError("loss must be scalar-valued")
    if not bool(torch.isfinite(value)):
        raise NumericalOverflowError("non-finite value in loss output")
    (grad,) = torch.autograd.grad(value, x)
    if not bool(torch.isfinite(grad).all()):
        raise NumericalOverflowError("non-finite value in gradient of loss")
    return GradientReport(
        gradient=ParamVector(grad.detach().numpy().copy(), params.layout),
        loss_value=float(value.detach()),
    )


def finite_difference_gradient(loss: LossFn, params: ParamVector, step: float) -> ParamVector:
    """Central-difference gradient estimate, one probe pair per coordinate.

    Independent of the reverse-mode path: only calls ``loss`` forward.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = params.values.astype(np.float64).copy()
    grad = np.empty_like(base)

    def probe(vec: np.ndarray) -> float:
        with torch.no_grad():
            val = float(loss(torch.from_numpy(vec)))
        if not np.isfinite(val):
            raise NumericalOverflowError("non-finite loss at finite-difference probe point")
        return val

    for i in range(base.size):
        orig = base[i]
        base[i] = orig + step
        hi = probe(base)
        base[i] = orig - step
        lo = probe(base)
        base[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return ParamVector(grad, params.layout)
