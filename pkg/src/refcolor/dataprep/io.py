"""PNG frame directories and the dataset manifest."""

from __future__ import annotations

import re
from pathlib import Path
from typing import Iterable, List

import numpy as np
import yaml
from PIL import Image

from .frames import Frame, Sequence

MANIFEST = "manifest.yaml"


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8)


def dist_to_u8(dist: np.ndarray) -> np.ndarray:
    """Quantise a distance field, keeping every non-zero distance non-zero."""
    q = to_u8(dist)
    q[(np.asarray(dist) > 0) & (q == 0)] = 1
    return q


def write_png(path: Path, img: np.ndarray) -> None:
    arr = img if img.dtype == np.uint8 else to_u8(img)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def read_png(path: Path, channels: int = 3) -> np.ndarray:
    img = Image.open(path)
    img = img.convert("RGB" if channels == 3 else "L")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr if channels == 3 else arr[..., None]


def write_sequence(seq: Sequence, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for k, fr in enumerate(seq.frames):
        write_png(directory / f"frame_{k}.png", fr.color)
        write_png(directory / f"line_{k}.png", fr.line)
        write_png(directory / f"dist_{k}.png", dist_to_u8(fr.dist))


def _indices(directory: Path, prefix: str) -> List[int]:
    pat = re.compile(rf"^{prefix}_(\d+)\.png$")
    return sorted(int(m.group(1)) for p in directory.iterdir() if (m := pat.match(p.name)))


def read_sequence(directory: Path) -> Sequence:
    directory = Path(directory)
    frames = []
    for k in _indices(directory, "frame"):
        color = read_png(directory / f"frame_{k}.png", 3)
        line_path = directory / f"line_{k}.png"
        dist_path = directory / f"dist_{k}.png"
        if line_path.exists() and dist_path.exists():
            frames.append(Frame(color, read_png(line_path, 1), read_png(dist_path, 1)))
        else:
            frames.append(Frame.from_color(color))
    name = directory.name
    return Sequence(frames, source_id=name[4:] if name.startswith("seq_") else name)


def write_manifest(root: Path, entries: Iterable[tuple], extra: dict | None = None) -> Path:
    """``entries`` are (relative path, split) pairs."""
    doc = dict(extra or {})
    doc["sequences"] = [{"path": str(p), "split": s} for p, s in entries]
    path = Path(root) / MANIFEST
    path.write_text(yaml.safe_dump(doc, sort_keys=True))
    return path


def read_manifest(path: Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    doc = yaml.safe_load(path.read_text())
    if not isinstance(doc, dict) or "sequences" not in doc:
        raise ValueError(f"{path} is not a dataset manifest")
    doc["root"] = str(path.parent)
    return doc


def load_split(manifest_path: Path, split: str | None = None) -> List[Sequence]:
    doc = read_manifest(manifest_path)
    root = Path(doc["root"])
    return [read_sequence(root / e["path"]) for e in doc["sequences"] if split is None or e["split"] == split]


def list_frame_images(directory: Path) -> List[Path]:
    """Image files of a frame directory in natural numeric order."""
    directory = Path(directory)
    files = [p for p in directory.iterdir() if p.suffix.lower() == ".png"]

    def key(p: Path):
        nums = re.findall(r"\d+", p.stem)
        return (int(nums[-1]) if nums else -1, p.name)

    return sorted(files, key=key)
