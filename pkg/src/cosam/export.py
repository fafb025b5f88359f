"""Export attention maps as 8-bit PGM images and lossless CTF1 dumps."""

from __future__ import annotations

import os

import numpy as np

from . import ctf


def to_u8(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if m.size and (m.min() < 0.0 or m.max() > 1.0):
        raise ValueError("mask values must lie in [0, 1]")
    return np.round(255.0 * m).astype(np.uint8)


def pgm_bytes(mask) -> bytes:
    """Binary greyscale (P5) image, value round(255 * mask)."""
    img = to_u8(mask)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D map, got shape {img.shape}")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 image")
    w, h = int(parts[1]), int(parts[2])
    data = parts[4]
    return np.frombuffer(data[: w * h], dtype=np.uint8).reshape(h, w)


def write_pgm(path: str | os.PathLike, mask) -> None:
    with open(path, "wb") as fh:
        fh.write(pgm_bytes(mask))


def export_masks(masks, out_dir: str | os.PathLike, prefix: str = "mask") -> list[str]:
    """masks: [N, H, W] or [N, 1, H, W] per-frame spatial masks of one snippet.

    Writes ``{prefix}_f{n}.pgm`` per frame and ``{prefix}.ctf`` with the raw values.
    """
    m = np.asarray(masks, dtype=np.float64)
    if m.ndim == 4 and m.shape[1] == 1:
        m = m[:, 0]
    if m.ndim != 3:
        raise ValueError(f"expected [N, H, W] masks, got {m.shape}")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for n in range(m.shape[0]):
        p = os.path.join(out_dir, f"{prefix}_f{n}.pgm")
        write_pgm(p, m[n])
        paths.append(p)
    p = os.path.join(out_dir, f"{prefix}.ctf")
    ctf.save(p, m)
    return paths + [p]


def export_associations(assoc, out_dir: str | os.PathLike, prefix: str = "assoc") -> list[str]:
    """assoc: [N, N_o, H, W] object association maps; one PGM per frame and object.

    Each map is a spatial softmax, so it is rescaled by its own maximum before
    quantisation; the CTF1 dump keeps the raw weights.
    """
    a = np.asarray(assoc, dtype=np.float64)
    if a.ndim != 4:
        raise ValueError(f"expected [N, N_o, H, W] association maps, got {a.shape}")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for n in range(a.shape[0]):
        for o in range(a.shape[1]):
            peak = a[n, o].max()
            p = os.path.join(out_dir, f"{prefix}_f{n}_o{o}.pgm")
            write_pgm(p, a[n, o] / peak if peak > 0 else a[n, o])
            paths.append(p)
    p = os.path.join(out_dir, f"{prefix}.ctf")
    ctf.save(p, a)
    return paths + [p]
