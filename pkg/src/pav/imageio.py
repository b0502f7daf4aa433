"""PNG readers and writers for images, masks and 16-bit depth maps."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_rgb(path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, optimize=False)


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_mask(path, mask: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path, optimize=False)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_gray(path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="L").save(path, optimize=False)


def write_depth(path, depth: np.ndarray) -> None:
    """16-bit depth; value 0 marks empty pixels, scene depth = value * scale.

    The scale lives in a sidecar ``<name>.json`` next to the PNG.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    finite = np.isfinite(depth) & (depth > 0)
    top = float(depth[finite].max()) if finite.any() else 1.0
    scale = top / 65535.0
    values = np.zeros(depth.shape, dtype=np.uint16)
    values[finite] = np.clip(np.round(depth[finite] / scale), 1, 65535).astype(np.uint16)
    Image.fromarray(values).save(path, optimize=False)
    path.with_suffix(".json").write_text(json.dumps({"scale": scale, "empty_value": 0}, indent=2) + "\n")


def read_depth(path) -> np.ndarray:
    path = Path(path)
    scale = json.loads(path.with_suffix(".json").read_text())["scale"]
    with Image.open(path) as im:
        values = np.asarray(im).astype(np.float64)
    return np.where(values > 0, values * scale, np.inf)
