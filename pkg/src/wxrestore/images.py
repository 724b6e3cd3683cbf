"""8-bit PNG persistence and paired-directory loading."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from wxrestore.degrade import PairedSample
from wxrestore.train import PairedTensors

_PAIR_RE = re.compile(r"^clean_(\d+)\.png$")


class ImageReadError(OSError):
    pass


def quantize(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-even."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: str | Path, img) -> None:
    """Write an ``(H, W, 3)`` array or a ``(3, H, W)`` / ``(1, 3, H, W)`` tensor."""
    if isinstance(img, torch.Tensor):
        t = img.detach().cpu().to(torch.float64)
        if t.dim() == 4:
            t = t[0]
        img = t.permute(1, 2, 0).numpy()
    Image.fromarray(quantize(np.asarray(img))).save(path, format="PNG")


def read_png(path: str | Path) -> np.ndarray:
    """Read any Pillow-readable image as float64 RGB in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageReadError(f"{path}: not a readable image ({exc})") from None
    return arr / 255.0


def to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(img.astype(np.float32)).permute(2, 0, 1).unsqueeze(0).contiguous()


def write_pairs(out_dir: str | Path, samples: list[PairedSample], start: int = 0) -> list[str]:
    """Write ``clean_%05d.png`` / ``degraded_%05d.png`` and return manifest lines."""
    out_dir = Path(out_dir)
    lines = []
    for k, s in enumerate(samples, start=start):
        write_png(out_dir / f"clean_{k:05d}.png", s.clean)
        write_png(out_dir / f"degraded_{k:05d}.png", s.degraded)
        lines.append(f"index={k} {s.spec.describe()}")
    return lines


def load_pairs(data_dir: str | Path) -> PairedTensors:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory not found: {data_dir}")
    indices = sorted(int(m.group(1)) for p in data_dir.iterdir()
                     if (m := _PAIR_RE.match(p.name)))
    if not indices:
        raise FileNotFoundError(f"no clean_*.png / degraded_*.png pairs in {data_dir}")
    clean, degraded = [], []
    for k in indices:
        clean.append(read_png(data_dir / f"clean_{k:05d}.png"))
        deg_path = data_dir / f"degraded_{k:05d}.png"
        if not deg_path.exists():
            raise FileNotFoundError(f"missing {deg_path.name} for clean_{k:05d}.png")
        degraded.append(read_png(deg_path))
    shapes = {a.shape for a in clean + degraded}
    if len(shapes) != 1:
        raise ValueError(f"pairs in {data_dir} have mixed sizes: {sorted(shapes)}")

    def stack(arrs):
        return torch.from_numpy(np.stack(arrs).astype(np.float32)).permute(0, 3, 1, 2).contiguous()

    return PairedTensors(stack(degraded), stack(clean))
