"""Image-space utilities.

Images are (H, W, 3) arrays with values nominally in [0, 1].  Every
operation here accepts either a numpy array or a torch tensor and returns
the same kind; the torch path is differentiable with respect to the pixel
values, which the optimization loops rely on (bilinear warps, additive
color shifts, separable blur, windowed SSIM).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage


def _as_tensor(img):
    if isinstance(img, torch.Tensor):
        return img, False
    return torch.from_numpy(np.asarray(img, dtype=np.float64)), True


def _check_image(t: torch.Tensor):
    if t.dim() != 3 or t.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {tuple(t.shape)}")


def gaussian_kernel1d(kernel_size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError("kernel_size must be odd and >= 1")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    half = kernel_size // 2
    x = torch.arange(-half, half + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return (k / k.sum()).to(dtype)


def gaussian_blur(img, kernel_size: int, sigma: float):
    """Separable Gaussian blur with reflection padding, per channel."""
    t, was_numpy = _as_tensor(img)
    _check_image(t)
    h, w = t.shape[0], t.shape[1]
    if kernel_size > 2 * min(h, w):
        raise ValueError(
            f"kernel_size {kernel_size} too large for {h}x{w} image (limit {2 * min(h, w)})"
        )
    k = gaussian_kernel1d(kernel_size, sigma, dtype=t.dtype)
    half = kernel_size // 2
    x = t.permute(2, 0, 1).unsqueeze(0)  # (1, 3, H, W)
    x = _reflect_pad(x, half)
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(3, 1, 1, -1), groups=3)
    x = F.conv2d(x, k.view(1, 1, -1, 1).expand(3, 1, -1, 1), groups=3)
    out = x.squeeze(0).permute(1, 2, 0)
    return out.numpy() if was_numpy else out


def _reflect_pad(x: torch.Tensor, pad: int) -> torch.Tensor:
    # F.pad('reflect') requires pad < dim; large dataset-scale kernels (101 taps
    # on 64px images) need repeated reflection.
    while pad > 0:
        step = min(pad, x.shape[-1] - 1, x.shape[-2] - 1)
        x = F.pad(x, (step, step, step, step), mode="reflect")
        pad -= step
    return x


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def ssim(a, b):
    """Structural similarity, Gaussian 11x11 window (sigma 1.5), valid windows.

    Constants C1 = (0.01)^2, C2 = (0.03)^2 on the [0, 1] dynamic range; the
    result is the mean over windows and channels.  Symmetric; 1 iff a == b.
    """
    ta, numpy_a = _as_tensor(a)
    tb, numpy_b = _as_tensor(b)
    _check_image(ta)
    if ta.shape != tb.shape:
        raise ValueError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    dtype = torch.promote_types(ta.dtype, tb.dtype)
    ta, tb = ta.to(dtype), tb.to(dtype)
    k1 = gaussian_kernel1d(_SSIM_WINDOW, _SSIM_SIGMA, dtype=dtype)
    win = (k1[:, None] * k1[None, :]).view(1, 1, _SSIM_WINDOW, _SSIM_WINDOW).expand(3, 1, -1, -1)

    xa = ta.permute(2, 0, 1).unsqueeze(0)
    xb = tb.permute(2, 0, 1).unsqueeze(0)
    mu_a = F.conv2d(xa, win, groups=3)
    mu_b = F.conv2d(xb, win, groups=3)
    mu_aa = F.conv2d(xa * xa, win, groups=3)
    mu_bb = F.conv2d(xb * xb, win, groups=3)
    mu_ab = F.conv2d(xa * xb, win, groups=3)
    var_a = mu_aa - mu_a * mu_a
    var_b = mu_bb - mu_b * mu_b
    cov = mu_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_a**2 + mu_b**2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    val = (num / den).mean()
    return float(val) if (numpy_a and numpy_b) else val


def mse(a, b):
    ta, numpy_a = _as_tensor(a)
    tb, numpy_b = _as_tensor(b)
    val = ((ta - tb) ** 2).mean()
    return float(val) if (numpy_a and numpy_b) else val


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB on the [0, 1] range."""
    m = float(mse(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))
    if m == 0:
        return float("inf")
    return -10.0 * np.log10(m)


@dataclass(frozen=True)
class AugmentationConfig:
    """Deterministic family of color-shift / scale / shear variations."""

    count: int = 32
    color_shift_range: float = 0.1
    scale_range: tuple[float, float] = (0.8, 1.2)
    shear_range: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise ValueError("scale_range must be a positive interval")
        if self.color_shift_range < 0 or self.shear_range < 0:
            raise ValueError("ranges must be nonnegative")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


def augmentation_params(cfg: AugmentationConfig, index: int):
    """(color_shift[3], scale, shear) drawn deterministically from (seed, index)."""
    if not 0 <= index < cfg.count:
        raise ValueError(f"index {index} outside [0, {cfg.count})")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, index])))
    c = cfg.color_shift_range
    shift = rng.uniform(-c, c, size=3)
    scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
    shear = rng.uniform(-cfg.shear_range, cfg.shear_range)
    return shift, float(scale), float(shear)


def _warp_grid(h: int, w: int, scale: float, shear: float, dtype) -> torch.Tensor:
    """Sampling grid for the inverse map (output -> source), grid_sample layout."""
    ys = torch.linspace(-1.0, 1.0, h, dtype=dtype)
    xs = torch.linspace(-1.0, 1.0, w, dtype=dtype)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    src_x = scale * (xx + shear * yy)
    src_y = scale * yy
    return torch.stack([src_x, src_y], dim=-1).unsqueeze(0)  # (1, H, W, 2)


def augment(img, cfg: AugmentationConfig, index: int):
    """One deterministic variation: bilinear affine warp then additive color shift.

    Out-of-bounds samples reflect at the border.  With all ranges collapsed
    (zero shifts/shear, unit scale) the input is returned unchanged.
    """
    t, was_numpy = _as_tensor(img)
    _check_image(t)
    shift, scale, shear = augmentation_params(cfg, index)
    out = t
    if scale != 1.0 or shear != 0.0:
        grid = _warp_grid(t.shape[0], t.shape[1], scale, shear, t.dtype)
        x = out.permute(2, 0, 1).unsqueeze(0)
        x = F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection",
                          align_corners=True)
        out = x.squeeze(0).permute(1, 2, 0)
    if np.any(shift != 0.0):
        out = out + torch.from_numpy(shift).to(out.dtype)
    return out.numpy().copy() if was_numpy else out


def augment_batch(img_t: torch.Tensor, cfg: AugmentationConfig) -> torch.Tensor:
    """All ``cfg.count`` variations as one (n, H, W, 3) batch, in index order.

    Single fused warp for speed; parameters are identical to per-index
    :func:`augment` calls.
    """
    _check_image(img_t)
    h, w = img_t.shape[0], img_t.shape[1]
    grids, shifts = [], []
    for i in range(cfg.count):
        shift, scale, shear = augmentation_params(cfg, i)
        grids.append(_warp_grid(h, w, scale, shear, img_t.dtype))
        shifts.append(shift)
    grid = torch.cat(grids, dim=0)
    x = img_t.permute(2, 0, 1).unsqueeze(0).expand(cfg.count, -1, -1, -1)
    x = F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection",
                      align_corners=True)
    out = x.permute(0, 2, 3, 1)
    shift_t = torch.from_numpy(np.stack(shifts)).to(img_t.dtype)
    return out + shift_t[:, None, None, :]


def radial_power_spectrum(img) -> np.ndarray:
    """Radially binned 2-D power spectrum of the channel-mean luminance.

    Band r collects |F|^2 at integer radius r on the DFT frequency lattice;
    band 0 is DC and the bands sum to the total spectral energy.  Square
    images only.
    """
    arr = img.detach().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("expected (H, W, 3) image")
    if arr.shape[0] != arr.shape[1]:
        raise ValueError("radial spectrum requires a square image")
    n = arr.shape[0]
    lum = arr.astype(np.float64).mean(axis=2)
    power = np.abs(np.fft.fft2(lum)) ** 2
    freq = np.fft.fftfreq(n) * n
    fy, fx = np.meshgrid(freq, freq, indexing="ij")
    radius = np.rint(np.hypot(fy, fx)).astype(int)
    return np.bincount(radius.reshape(-1), weights=power.reshape(-1))


def band_fraction(bands: np.ndarray, lo: float, hi: float) -> float:
    """Energy fraction of bands with index in [lo*len, hi*len)."""
    n = len(bands)
    total = bands.sum()
    if total == 0:
        return 0.0
    i0, i1 = int(np.floor(lo * n)), int(np.ceil(hi * n))
    return float(bands[i0:i1].sum() / total)


def high_band_fraction(bands: np.ndarray, frac: float = 2.0 / 3.0) -> float:
    """Fraction of spectral energy in the top (1 - frac) of radial bands."""
    return band_fraction(bands, frac, 1.0)


def spectral_centroid(bands: np.ndarray) -> float:
    total = bands.sum()
    if total == 0:
        return 0.0
    return float((np.arange(len(bands)) * bands).sum() / total)


def export_quantize(img) -> np.ndarray:
    """Clamp to [0, 1] and quantize to 8-bit; used only at image export."""
    arr = img.detach().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(img, path) -> None:
    arr8 = export_quantize(img)
    path = Path(path)
    try:
        PILImage.fromarray(arr8, mode="RGB").save(path, format="PNG")
    except OSError as e:
        raise OSError(f"failed to write PNG {path}: {e}") from e


def load_png(path) -> np.ndarray:
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as e:
        raise OSError(f"failed to read PNG {path}: {e}") from e
    return arr / 255.0


def image_hash(img) -> bytes:
    """Stable content hash of the 8-bit quantized pixels."""
    import hashlib

    arr8 = export_quantize(img)
    h = hashlib.sha256()
    h.update(np.asarray(arr8.shape, dtype="<u4").tobytes())
    h.update(arr8.tobytes())
    return h.digest()
