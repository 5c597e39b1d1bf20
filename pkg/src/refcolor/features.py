"""Frozen pretrained feature extractors.

Two families are supported:

* VGG16 convolutional features, read out at several layers and combined into
  a per-pixel hypercolumn (colour statistics for distribution alignment)
* a ViT-S/8 transformer whose twelve block outputs describe scene structure

Weights are read from ``vgg16.pth`` / ``dino_vits8.pth`` (torch state dicts,
``.safetensors`` also accepted) in the weights directory, which defaults to
``~/.cache/refcolor`` and can be overridden with ``REFCOLOR_WEIGHTS_DIR``.
When a file is missing and ``allow_random`` is set, the network falls back to
a seeded random initialisation; :attr:`Extractors.info` records which source
was used so reports never hide it.
"""
from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .vit import VisionTransformer

logger = logging.getLogger(__name__)

DEFAULT_FDA_LAYERS = (1, 3, 6, 8, 11, 13, 15, 22, 29)
DEFAULT_SPM_BLOCKS = tuple(range(12))
VIT_PATCH = 8
# four max-pools precede layer 29; smaller inputs are upsampled first
VGG_MIN_SIDE = 16

VGG_FILENAMES = ("vgg16.pth", "vgg16-397923af.pth", "vgg16.safetensors")
VIT_FILENAMES = ("dino_vits8.pth", "dino_deitsmall8_pretrain.pth", "dino_vits8.safetensors")


class WeightsLoadError(RuntimeError):
    """Weights file does not fit the architecture."""


def default_weights_dir() -> Path:
    env = os.environ.get("REFCOLOR_WEIGHTS_DIR")
    return Path(env) if env else Path.home() / ".cache" / "refcolor"


@dataclass
class ExtractorConfig:
    fda_layers: tuple[int, ...] = DEFAULT_FDA_LAYERS
    spm_blocks: tuple[int, ...] = DEFAULT_SPM_BLOCKS
    weights_dir: str | None = None
    vgg_weights: str | None = None
    vit_weights: str | None = None
    allow_random: bool = True
    random_seed: int = 0

    def resolve_dir(self) -> Path:
        return Path(self.weights_dir) if self.weights_dir else default_weights_dir()


@dataclass
class FeatureSet:
    """Per-layer maps at native resolution; upsampling to ``target_hw`` is lazy."""

    maps: list[torch.Tensor]
    layer_ids: list[int]
    target_hw: tuple[int, int] | None = None

    def __len__(self) -> int:
        return len(self.maps)

    def upsampled(self) -> list[torch.Tensor]:
        if self.target_hw is None:
            return list(self.maps)
        return [
            m if tuple(m.shape[-2:]) == self.target_hw
            else F.interpolate(m, size=self.target_hw, mode="bilinear", align_corners=False)
            for m in self.maps
        ]

    @property
    def channels(self) -> int:
        return sum(m.shape[1] for m in self.maps)


@dataclass
class FeatureMatrix:
    vectors: torch.Tensor  # (n, m)
    sample_seed: int | None = None
    positions: torch.Tensor | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.vectors.dim() != 2 or self.vectors.shape[0] < 1:
            raise ValueError(f"feature matrix must be (n, m), got {tuple(self.vectors.shape)}")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def m(self) -> int:
        return self.vectors.shape[1]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_state_dict(path: Path) -> dict[str, torch.Tensor]:
    if path.suffix == ".safetensors":
        from safetensors.torch import load_file
        return load_file(str(path))
    sd = torch.load(path, map_location="cpu", weights_only=True)
    for key in ("state_dict", "model", "teacher"):
        if isinstance(sd, dict) and key in sd and isinstance(sd[key], dict):
            sd = sd[key]
    return sd


def _find(explicit: str | None, directory: Path, names: tuple[str, ...]) -> Path | None:
    if explicit:
        p = Path(explicit)
        if not p.exists():
            raise FileNotFoundError(f"weights file {p} does not exist")
        return p
    for name in names:
        if (directory / name).exists():
            return directory / name
    return None


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _build_vgg(cfg: ExtractorConfig, directory: Path) -> tuple[nn.Sequential, dict]:
    last = max(cfg.fda_layers)
    features = torchvision.models.vgg16(weights=None).features
    if last >= len(features) or min(cfg.fda_layers) < 0:
        raise ValueError(f"VGG16 layer indices must be in [0, {len(features)}), got {cfg.fda_layers}")
    path = _find(cfg.vgg_weights, directory, VGG_FILENAMES)
    if path is not None:
        sd = _read_state_dict(path)
        sd = {k[len("features."):]: v for k, v in sd.items() if k.startswith("features.")}
        try:
            features.load_state_dict(sd, strict=True)
        except RuntimeError as exc:
            raise WeightsLoadError(f"{path} does not match the VGG16 architecture: {exc}") from exc
        info = {"source": "pretrained", "path": str(path), "sha256": _sha256(path)}
    elif cfg.allow_random:
        logger.warning("no VGG16 weights found in %s; using random initialisation (seed %d)",
                       directory, cfg.random_seed)
        gen = torch.Generator().manual_seed(cfg.random_seed)
        for m in features:
            if isinstance(m, nn.Conv2d):
                # kaiming-normal, fan_out, as torchvision initialises VGG
                std = (2.0 / (m.out_channels * m.kernel_size[0] * m.kernel_size[1])) ** 0.5
                with torch.no_grad():
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                    m.bias.zero_()
        info = {"source": "random", "seed": cfg.random_seed}
    else:
        raise FileNotFoundError(f"no VGG16 weights in {directory} (looked for {', '.join(VGG_FILENAMES)})")
    features = features[: last + 1]
    for m in features:
        if isinstance(m, nn.ReLU):
            m.inplace = False
    return features, info


def _build_vit(cfg: ExtractorConfig, directory: Path) -> tuple[VisionTransformer, dict]:
    vit = VisionTransformer(patch_size=VIT_PATCH)
    if max(cfg.spm_blocks) >= len(vit.blocks) or min(cfg.spm_blocks) < 0:
        raise ValueError(f"ViT block indices must be in [0, {len(vit.blocks)}), got {cfg.spm_blocks}")
    path = _find(cfg.vit_weights, directory, VIT_FILENAMES)
    if path is not None:
        sd = _read_state_dict(path)
        sd = {k.removeprefix("module.").removeprefix("backbone."): v for k, v in sd.items()}
        sd = {k: v for k, v in sd.items() if not k.startswith("head")}
        try:
            vit.load_state_dict(sd, strict=True)
        except RuntimeError as exc:
            raise WeightsLoadError(f"{path} does not match the ViT-S/8 architecture: {exc}") from exc
        info = {"source": "pretrained", "path": str(path), "sha256": _sha256(path)}
    elif cfg.allow_random:
        logger.warning("no ViT-S/8 weights found in %s; using random initialisation (seed %d)",
                       directory, cfg.random_seed + 1)
        vit.reset_parameters(torch.Generator().manual_seed(cfg.random_seed + 1))
        info = {"source": "random", "seed": cfg.random_seed + 1}
    else:
        raise FileNotFoundError(f"no ViT-S/8 weights in {directory} (looked for {', '.join(VIT_FILENAMES)})")
    return vit, info


class Extractors:
    """Both frozen networks plus call counters.

    Instances are read-only after construction and can be shared between runs.
    """

    def __init__(self, cfg: ExtractorConfig | None = None, dtype: torch.dtype = torch.float32):
        self.cfg = cfg or ExtractorConfig()
        directory = self.cfg.resolve_dir()
        self.vgg, vgg_info = _build_vgg(self.cfg, directory)
        self.vit, vit_info = _build_vit(self.cfg, directory)
        for net in (self.vgg, self.vit):
            net.eval().to(dtype)
            for p in net.parameters():
                p.requires_grad_(False)
        self.dtype = dtype
        self.info = {"vgg16": vgg_info, "vit_s8": vit_info}
        self.hypercolumn_calls = 0
        self.structure_calls = 0

    @property
    def pretrained(self) -> bool:
        return all(v["source"] == "pretrained" for v in self.info.values())

    def checksums(self) -> dict[str, str]:
        return {"vgg16": parameter_checksum(self.vgg), "vit_s8": parameter_checksum(self.vit)}


def extract_hypercolumn(ext: Extractors, img: torch.Tensor,
                        target_hw: tuple[int, int] | None = None) -> FeatureSet:
    """Activations of the configured VGG16 layers for a normalised image.

    Maps are kept at native resolution; ``target_hw`` (default: the image size)
    is where :func:`sample_points` and :meth:`FeatureSet.upsampled` read them.
    """
    h, w = img.shape[-2:]
    if target_hw is None:
        target_hw = (h, w)
    if tuple(target_hw) != (h, w):
        raise ValueError(f"target_hw {target_hw} must match the image size {(h, w)}")
    ext.hypercolumn_calls += 1
    x = img
    if min(h, w) < VGG_MIN_SIDE:
        s = VGG_MIN_SIDE / min(h, w)
        x = F.interpolate(x, size=(max(VGG_MIN_SIDE, round(h * s)), max(VGG_MIN_SIDE, round(w * s))),
                          mode="bilinear", align_corners=False)
    wanted = set(ext.cfg.fda_layers)
    maps = []
    for idx, layer in enumerate(ext.vgg):
        x = layer(x)
        if idx in wanted:
            maps.append(x)
    return FeatureSet(maps=maps, layer_ids=list(ext.cfg.fda_layers), target_hw=(h, w))


def extract_structure(ext: Extractors, img: torch.Tensor) -> FeatureSet:
    """Patch-token maps ``(1, 384, H/8, W/8)`` of the configured ViT blocks."""
    h, w = img.shape[-2:]
    if h % VIT_PATCH or w % VIT_PATCH:
        raise ValueError(f"image size {h}x{w} is not divisible by the patch size {VIT_PATCH}")
    ext.structure_calls += 1
    outs = ext.vit.block_outputs(img)
    blocks = list(ext.cfg.spm_blocks)
    return FeatureSet(maps=[outs[i] for i in blocks], layer_ids=blocks, target_hw=None)


def _source_coords(n_out: int, n_in: int, dst: torch.Tensor, dtype) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    # same sampling grid as F.interpolate(mode="bilinear", align_corners=False)
    if n_in == n_out:
        return dst, dst, torch.zeros(dst.shape, dtype=dtype)
    src = ((dst.to(torch.float64) + 0.5) * (n_in / n_out) - 0.5).clamp(min=0.0)
    i0 = src.floor().long().clamp(max=n_in - 1)
    i1 = torch.where(i0 < n_in - 1, i0 + 1, i0)
    lam = (src - i0.to(torch.float64)).to(dtype)
    return i0, i1, lam


def gather_upsampled(fmap: torch.Tensor, ys: torch.Tensor, xs: torch.Tensor,
                     target_hw: tuple[int, int]) -> torch.Tensor:
    """Values of the bilinearly upsampled ``fmap`` at pixel positions ``(ys, xs)``.

    Returns ``(n, C)`` without materialising the full-resolution map.
    """
    _, c, h, w = fmap.shape
    y0, y1, ly = _source_coords(target_hw[0], h, ys, fmap.dtype)
    x0, x1, lx = _source_coords(target_hw[1], w, xs, fmap.dtype)
    f = fmap[0].reshape(c, h * w)

    def at(yy, xx):
        return f[:, yy * w + xx]

    top = at(y0, x0) * (1 - lx) + at(y0, x1) * lx
    bot = at(y1, x0) * (1 - lx) + at(y1, x1) * lx
    return (top * (1 - ly) + bot * ly).t()


def sample_positions(hw: tuple[int, int], n: int, seed: int) -> torch.Tensor:
    total = hw[0] * hw[1]
    if n < 2:
        raise ValueError(f"need at least 2 sample points, got {n}")
    if n > total:
        raise ValueError(f"cannot sample {n} points from {hw[0]}x{hw[1]} positions")
    if n == total:
        return torch.arange(total)
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randperm(total, generator=gen)[:n]


def sample_points(fs: FeatureSet, n: int, seed: int) -> FeatureMatrix:
    """Hypercolumn vectors at ``n`` positions drawn without replacement."""
    if fs.target_hw is None:
        raise ValueError("feature set has no target resolution to sample from")
    pos = sample_positions(fs.target_hw, n, seed)
    device = fs.maps[0].device
    ys, xs = (pos // fs.target_hw[1]).to(device), (pos % fs.target_hw[1]).to(device)
    cols = [gather_upsampled(m, ys, xs, fs.target_hw) for m in fs.maps]
    return FeatureMatrix(vectors=torch.cat(cols, dim=1), sample_seed=seed, positions=pos)
