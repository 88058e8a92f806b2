"""File input/output: images, annotations, atomic writes, key-value configs."""
from __future__ import annotations

import contextlib
import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .raster import encode_float_dump, mask_to_uint8


class InputError(OSError):
    """An input file is missing, unreadable or malformed."""


@contextlib.contextmanager
def atomic_path(path: str | os.PathLike):
    """Yield a temporary sibling path; rename it onto ``path`` only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_bytes(path, data: bytes) -> None:
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as fh:
            fh.write(data)


def write_text(path, text: str) -> None:
    write_bytes(path, text.encode("utf-8"))


def write_json(path, doc) -> None:
    write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    write_text(path, buf.getvalue())


def write_png(path, array: np.ndarray) -> None:
    """Write a uint8 (H, W) or (H, W, 3) array as PNG."""
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    write_bytes(path, buf.getvalue())


def write_image(path, x: np.ndarray) -> None:
    x = np.asarray(x, dtype=float)
    if x.ndim == 3 and x.shape[2] == 1:
        x = x[..., 0]
    write_png(path, np.clip(np.round(255.0 * x), 0, 255).astype(np.uint8))


def write_mask(png_path, dump_path, mask) -> None:
    write_png(png_path, mask_to_uint8(mask))
    write_bytes(dump_path, encode_float_dump(mask))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    return img


def read_image(path, size: int | tuple[int, int] | None = None) -> np.ndarray:
    """Load an 8-bit PNG/PPM as floats in [0, 1], shape (H, W, C), C in {1, 3}."""
    img = _open(path)
    img = img.convert("L") if img.mode in ("L", "1", "I", "I;16", "F") else img.convert("RGB")
    if size is not None:
        w, h = (size, size) if isinstance(size, int) else (size[1], size[0])
        img = img.resize((w, h), Image.BILINEAR)
    x = np.asarray(img, dtype=float) / 255.0
    return x[..., None] if x.ndim == 2 else x


def read_annotation(path, shape: tuple[int, int], source_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Boolean (H, W) annotation from a binary PNG or a ``x0 y0 x1 y1`` box text file.

    Box coordinates are pixels of the source image (``source_shape``, default
    ``shape``) and are rescaled to ``shape``.
    """
    path = Path(path)
    h, w = shape
    if path.suffix.lower() == ".txt":
        try:
            values = [float(v) for v in path.read_text().replace(",", " ").split()]
        except OSError as exc:
            raise InputError(f"cannot read annotation {path}: {exc}") from exc
        except ValueError as exc:
            raise InputError(f"malformed box annotation {path}: {exc}") from exc
        if len(values) != 4:
            raise InputError(f"box annotation {path} must hold 4 numbers, found {len(values)}")
        sh, sw = source_shape or shape
        x0, y0, x1, y1 = values
        cols = (np.arange(w) + 0.5) * sw / w
        rows = (np.arange(h) + 0.5) * sh / h
        return ((rows[:, None] >= y0) & (rows[:, None] < y1)) & ((cols[None] >= x0) & (cols[None] < x1))
    img = _open(path).convert("L")
    if img.size != (w, h):
        img = img.resize((w, h), Image.NEAREST)
    return np.asarray(img) > 127


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, keys are dash/underscore agnostic."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise InputError(f"{source}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def read_config(path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def read_dataset_manifest(path) -> list[tuple[str, str, str]]:
    """Lines of ``image_path annotation_path [image_id]``; relative paths resolve against the manifest."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read dataset manifest {path}: {exc}") from exc
    entries = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) not in (2, 3):
            raise InputError(f"{path}:{lineno}: expected 'image annotation [id]', got {raw.strip()!r}")
        image, ann = (str((path.parent / p)) if not os.path.isabs(p) else p for p in parts[:2])
        image_id = parts[2] if len(parts) == 3 else Path(parts[0]).stem
        entries.append((image_id, image, ann))
    if not entries:
        raise InputError(f"dataset manifest {path} has no entries")
    return entries
