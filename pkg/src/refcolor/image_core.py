"""Image representation, file I/O and resampling.

Images live in two forms:

* ``np.ndarray`` of shape ``(H, W, 3)``, float32 in ``[0, 1]`` (files, metrics)
* ``torch.Tensor`` of shape ``(1, 3, H, W)`` (everything that needs gradients)

Conversion is explicit via :func:`to_tensor` / :func:`to_array`.
"""
from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage, UnidentifiedImageError

ImageLike = Union[np.ndarray, torch.Tensor]

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# Rec. 601 luma
GRAY_WEIGHTS = (0.299, 0.587, 0.114)

SUPPORTED_FORMATS = {"PNG", "JPEG"}


class ImageFormatError(ValueError):
    """Raised for files that are readable but not PNG/JPEG."""


def check_image(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"empty image of shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains NaN or Inf")
    return img


def load_image(path: str | Path) -> np.ndarray:
    """Read a PNG or JPEG file into an ``(H, W, 3)`` float32 array in ``[0, 1]``.

    Single-channel files are replicated to three identical channels; alpha is
    dropped. 16-bit grayscale PNGs are scaled by 65535.
    """
    path = Path(path)
    try:
        with PILImage.open(path) as pil:
            fmt = pil.format
            if fmt not in SUPPORTED_FORMATS:
                raise ImageFormatError(f"{path}: unsupported image format {fmt!r}")
            pil.load()
            mode = pil.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(pil, dtype=np.float64)
                arr = arr / (65535.0 if arr.max() > 255 else 255.0)
                arr = np.repeat(arr[..., None], 3, axis=2)
            else:
                pil = pil.convert("L" if mode in ("1", "L", "LA") else "RGB")
                arr = np.asarray(pil, dtype=np.float64) / 255.0
                if arr.ndim == 2:
                    arr = np.repeat(arr[..., None], 3, axis=2)
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: not a recognised image file") from exc
    except (OSError, SyntaxError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise OSError(f"{path}: could not read image ({exc})") from exc
    return check_image(arr.astype(np.float32))


def quantize(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and quantize to uint8 with round-half-up."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def save_image(img: ImageLike, path: str | Path) -> None:
    arr = to_array(img) if isinstance(img, torch.Tensor) else np.asarray(img)
    check_image(arr)
    path = Path(path)
    fmt = {".png": "PNG", ".jpg": "JPEG", ".jpeg": "JPEG"}.get(path.suffix.lower())
    if fmt is None:
        raise ImageFormatError(f"{path}: can only write .png or .jpg files")
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(quantize(arr), mode="RGB").save(path, format=fmt)


def to_tensor(img: ImageLike, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """``(H, W, 3)`` array -> ``(1, 3, H, W)`` tensor. Tensors pass through."""
    if isinstance(img, torch.Tensor):
        if img.dim() == 3:
            img = img.unsqueeze(0)
        return img
    check_image(np.asarray(img))
    return torch.from_numpy(np.ascontiguousarray(img)).to(dtype).permute(2, 0, 1).unsqueeze(0)


def to_array(t: torch.Tensor) -> np.ndarray:
    """``(1, 3, H, W)`` tensor -> ``(H, W, 3)`` float32 array (detached)."""
    if t.dim() == 4:
        t = t[0]
    return t.detach().permute(1, 2, 0).cpu().numpy().astype(np.float32)


def resize(img: ImageLike, h: int, w: int) -> ImageLike:
    """Bilinear resampling to ``h x w``. Returns the same kind it was given.

    Shrinking uses an antialiased bilinear kernel so that large reductions
    (e.g. 256 -> 32) average over the footprint instead of point-sampling.
    Same-size resizes return the input values unchanged.
    """
    if int(h) < 1 or int(w) < 1:
        raise ValueError(f"target size must be positive, got {h}x{w}")
    h, w = int(h), int(w)
    as_array = not isinstance(img, torch.Tensor)
    t = to_tensor(img)
    if tuple(t.shape[-2:]) == (h, w):
        out = t
    else:
        shrink = h < t.shape[-2] or w < t.shape[-1]
        out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False, antialias=shrink)
    return to_array(out) if as_array else out


def _channel_stats(t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    mean = torch.tensor(IMAGENET_MEAN, dtype=t.dtype, device=t.device).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=t.dtype, device=t.device).view(1, 3, 1, 1)
    return mean, std


def normalize_for_network(img: ImageLike) -> ImageLike:
    """Per-channel ``(x - mean_c) / std_c`` with ImageNet statistics."""
    as_array = not isinstance(img, torch.Tensor)
    t = to_tensor(img)
    mean, std = _channel_stats(t)
    out = (t - mean) / std
    return to_array(out) if as_array else out


def denormalize(img: ImageLike) -> ImageLike:
    as_array = not isinstance(img, torch.Tensor)
    t = to_tensor(img)
    mean, std = _channel_stats(t)
    out = t * std + mean
    return to_array(out) if as_array else out


def to_grayscale(img: ImageLike) -> ImageLike:
    """Luma, replicated to three channels."""
    as_array = not isinstance(img, torch.Tensor)
    t = to_tensor(img)
    wts = torch.tensor(GRAY_WEIGHTS, dtype=t.dtype, device=t.device).view(1, 3, 1, 1)
    y = (t * wts).sum(dim=1, keepdim=True)
    out = y.expand(-1, 3, -1, -1).contiguous()
    return to_array(out) if as_array else out


def is_grayscale(img: np.ndarray, tol: float = 1e-6) -> bool:
    return bool(np.abs(img[..., 0] - img[..., 1]).max() <= tol and np.abs(img[..., 1] - img[..., 2]).max() <= tol)


# --- CIE L*a*b* (D65), differentiable; only used by the LAB ablation ---

_RGB2XYZ = torch.tensor([
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
])
_WHITE = torch.tensor([0.950456, 1.0, 1.088754])


def _srgb_to_linear(c: torch.Tensor) -> torch.Tensor:
    return torch.where(c > 0.04045, ((c.clamp(min=0.04045) + 0.055) / 1.055) ** 2.4, c / 12.92)


def _linear_to_srgb(c: torch.Tensor) -> torch.Tensor:
    return torch.where(c > 0.0031308, 1.055 * c.clamp(min=0.0031308) ** (1 / 2.4) - 0.055, 12.92 * c)


def rgb_to_lab(t: torch.Tensor) -> torch.Tensor:
    """``(1, 3, H, W)`` sRGB in [0, 1] -> L*a*b* (L in [0, 100])."""
    lin = _srgb_to_linear(t.clamp(0.0, 1.0))
    m = _RGB2XYZ.to(t)
    xyz = torch.einsum("ij,bjhw->bihw", m, lin) / _WHITE.to(t).view(1, 3, 1, 1)
    delta = 6.0 / 29.0
    f = torch.where(xyz > delta**3, xyz.clamp(min=delta**3) ** (1 / 3), xyz / (3 * delta**2) + 4.0 / 29.0)
    L = 116.0 * f[:, 1:2] - 16.0
    a = 500.0 * (f[:, 0:1] - f[:, 1:2])
    b = 200.0 * (f[:, 1:2] - f[:, 2:3])
    return torch.cat([L, a, b], dim=1)


def lab_to_rgb(t: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`rgb_to_lab`; output is not clamped."""
    L, a, b = t[:, 0:1], t[:, 1:2], t[:, 2:3]
    fy = (L + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    f = torch.cat([fx, fy, fz], dim=1)
    delta = 6.0 / 29.0
    xyz = torch.where(f > delta, f**3, 3 * delta**2 * (f - 4.0 / 29.0))
    xyz = xyz * _WHITE.to(t).view(1, 3, 1, 1)
    m_inv = torch.linalg.inv(_RGB2XYZ.double()).to(t)
    lin = torch.einsum("ij,bjhw->bihw", m_inv, xyz)
    return _linear_to_srgb(lin)
