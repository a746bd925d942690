"""Image files, corpora, padding and frame-by-frame video stylization."""

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import ImageDecodeError, ShapeError
from .model import ENCODER_FACTOR, check_image_batch, reflect_pad

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
_SUPPORTED_FORMATS = {"PNG", "JPEG"}
_CONVERTIBLE_MODES = {"RGB", "RGBA", "L", "LA", "P", "CMYK", "YCbCr", "1"}


class UnsupportedFormatError(ImageDecodeError):
    pass


def load_image(path) -> torch.Tensor:
    """PNG/JPEG file -> ``[1, 3, H, W]`` float32 tensor with values v/255."""
    try:
        with Image.open(path) as img:
            if img.format not in _SUPPORTED_FORMATS:
                raise UnsupportedFormatError(f"{path}: unsupported image format {img.format}")
            if img.mode not in _CONVERTIBLE_MODES:
                raise UnsupportedFormatError(f"{path}: unsupported pixel mode {img.mode}")
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, ImageDecodeError):
            raise
        raise ImageDecodeError(f"{path}: cannot decode image ({exc})") from exc
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).unsqueeze(0).contiguous()


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """``[3, H, W]`` or ``[1, 3, H, W]`` in [0, 1] -> ``H x W x 3`` uint8
    using round(v * 255) clamped to [0, 255]."""
    if image.dim() == 4:
        if image.shape[0] != 1:
            raise ShapeError("to_uint8 expects a single image")
        image = image[0]
    arr = torch.round(image.detach().float() * 255.0).clamp(0, 255).to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def save_image(image: torch.Tensor, path) -> None:
    path = Path(path)
    fmt = "JPEG" if path.suffix.lower() in (".jpg", ".jpeg") else "PNG"
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format=fmt)


# --------------------------------------------------------------------------
# padding

@dataclass(frozen=True)
class CropRecord:
    """Original size plus the padding that was added to reach it."""

    height: int
    width: int
    pad_bottom: int = 0
    pad_right: int = 0

    @property
    def is_empty(self) -> bool:
        return self.pad_bottom == 0 and self.pad_right == 0


def pad_for_model(x: torch.Tensor, factor: int = ENCODER_FACTOR) -> Tuple[torch.Tensor, CropRecord]:
    """Mirror-pad right/bottom up to the next multiple of ``factor``."""
    if factor not in (16, 128):
        raise ValueError(f"factor must be 16 or 128, got {factor}")
    h, w = x.shape[-2:]
    pad_h = -h % factor
    pad_w = -w % factor
    return reflect_pad(x, 0, pad_w, 0, pad_h), CropRecord(h, w, pad_h, pad_w)


def unpad(x: torch.Tensor, record: CropRecord) -> torch.Tensor:
    return x[..., :record.height, :record.width]


@torch.no_grad()
def stylize_image(nets, x: torch.Tensor) -> torch.Tensor:
    """Stylize an image of any size >= 16 px: pad, run E and G, crop back."""
    if x.dim() == 3:
        x = x.unsqueeze(0)
    check_image_batch(x)
    if min(x.shape[-2:]) < 16:
        raise ShapeError(f"images must be at least 16x16, got {tuple(x.shape[-2:])}")
    padded, record = pad_for_model(x, ENCODER_FACTOR)
    return unpad(nets.stylize(padded), record)


# --------------------------------------------------------------------------
# corpora and frame sequences

def _natural_key(path: Path):
    return [int(tok) if tok.isdigit() else tok for tok in re.split(r"(\d+)", path.name)]


def list_images(directory) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: not a directory")
    files = [p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    return sorted(files, key=_natural_key)


def detect_layout(root) -> str:
    root = Path(root)
    subdirs = [p for p in root.iterdir() if p.is_dir()]
    return "per-artist-subdir" if subdirs and not list_images(root) else "flat"


def corpus_files(root) -> Dict[str, List[Path]]:
    """``{artist: [files]}`` for a per-artist layout, ``{"": [files]}`` for flat."""
    root = Path(root)
    if detect_layout(root) == "flat":
        return {"": list_images(root)}
    return {p.name: list_images(p) for p in sorted(root.iterdir()) if p.is_dir()}


def load_corpus(root) -> Dict[str, List[torch.Tensor]]:
    return {artist: [load_image(f)[0] for f in files] for artist, files in corpus_files(root).items()}


def stylize_video(frames_dir, nets, output_dir) -> int:
    """Stylize every frame of a numbered image sequence independently.

    Output frames are PNG files named after their inputs.  Returns the
    number of frames written; an empty directory yields 0.
    """
    frames = list_images(frames_dir)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for index, frame in enumerate(frames):
        try:
            x = load_image(frame)
        except ImageDecodeError as exc:
            raise ImageDecodeError(f"frame {index} ({frame.name}): {exc}", index=index) from exc
        save_image(stylize_image(nets, x), out / (frame.stem + ".png"))
    return len(frames)
