"""Download the pretrained extractor weights into the refcolor weights directory.

    python scripts/fetch_weights.py [--dir DIR]

The torchvision VGG16 file name carries the first 8 hex digits of its sha256,
which is checked. The ViT-S/8 checkpoint has no published digest; its sha256 is
printed so it can be recorded.
"""
from __future__ import annotations

import argparse
import hashlib
import shutil
import sys
import urllib.request
from pathlib import Path

from refcolor.features import default_weights_dir

FILES = {
    "vgg16-397923af.pth": ("https://download.pytorch.org/models/vgg16-397923af.pth", "397923af"),
    "dino_deitsmall8_pretrain.pth": (
        "https://dl.fbaipublicfiles.com/dino/dino_deitsmall8_pretrain/dino_deitsmall8_pretrain.pth", None),
}


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fetch(url: str, dest: Path) -> None:
    tmp = dest.with_suffix(dest.suffix + ".part")
    with urllib.request.urlopen(url, timeout=60) as resp, open(tmp, "wb") as out:
        shutil.copyfileobj(resp, out)
    tmp.replace(dest)


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dir", type=Path, default=None, help="target directory (default: the refcolor weights dir)")
    args = p.parse_args(argv)
    target = args.dir or default_weights_dir()
    target.mkdir(parents=True, exist_ok=True)
    status = 0
    for name, (url, prefix) in FILES.items():
        dest = target / name
        if not dest.exists():
            print(f"downloading {url}")
            try:
                fetch(url, dest)
            except OSError as exc:
                print(f"  failed: {exc}", file=sys.stderr)
                status = 1
                continue
        digest = sha256(dest)
        if prefix and not digest.startswith(prefix):
            print(f"  {name}: sha256 {digest} does not start with {prefix}; removing", file=sys.stderr)
            dest.unlink()
            status = 1
            continue
        print(f"  {name}: sha256 {digest}")
    return status


if __name__ == "__main__":
    sys.exit(main())
