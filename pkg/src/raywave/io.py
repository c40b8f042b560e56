"""Small file formats: PFM float maps, JSON sidecars, PNG images."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image


def write_pfm(path, array):
    """Write a 2-D (grayscale) or H×W×3 array as little-endian PFM.

    PFM stores rows bottom-to-top; the array is flipped so that row 0 of the
    array is row 0 after :func:`read_pfm`.
    """
    a = np.asarray(array, dtype="<f4")
    if a.ndim == 2:
        header = "Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError(f"PFM needs H×W or H×W×3, got {a.shape}")
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if header == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * ch)
    shape = (h, w, 3) if ch == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    with open(path) as f:
        return json.load(f)


def srgb_to_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1 / 2.4) - 0.055)


def read_png(path, linearize=True):
    """Load an 8- or 16-bit PNG as float64 H×W×3 in [0, 1]."""
    img = Image.open(path)
    a = np.asarray(img)
    if a.dtype == np.uint16 or img.mode.startswith("I"):
        a = a.astype(np.float64) / 65535.0
    else:
        a = a.astype(np.float64) / 255.0
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    a = a[..., :3]
    return srgb_to_linear(a) if linearize else a


def write_png(path, image, bits=8, encode_srgb=True):
    a = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if encode_srgb:
        a = linear_to_srgb(a)
    if bits == 16:
        q = np.round(a * 65535).astype(np.uint16)
        if q.ndim == 3:
            # Pillow cannot write 16-bit RGB.
            raise ValueError("16-bit PNG export supports single-channel images only")
        Image.fromarray(q).save(path)
    else:
        Image.fromarray(np.round(a * 255).astype(np.uint8)).save(path)


def write_uint16_png(path, array):
    Image.fromarray(np.asarray(array, dtype=np.uint16)).save(path)


def read_uint16_png(path):
    return np.asarray(Image.open(path)).astype(np.uint16)


def ensure_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
