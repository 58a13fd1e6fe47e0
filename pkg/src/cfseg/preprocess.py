"""Centered zero-padding of images and masks, plus the exact inverse crop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InconsistentRecord, TargetTooSmall
from .mask_model import Radiograph

DEFAULT_TARGET = (512, 512)


@dataclass(frozen=True)
class PadRecord:
    """Where the original raster sits inside the padded one."""

    row: int
    col: int
    height: int
    width: int

    def to_dict(self) -> dict:
        return {"row": self.row, "col": self.col, "height": self.height, "width": self.width}

    @classmethod
    def from_dict(cls, d: dict) -> "PadRecord":
        return cls(row=int(d["row"]), col=int(d["col"]),
                   height=int(d["height"]), width=int(d["width"]))


def _pad_array(a: np.ndarray, target: tuple[int, int]) -> tuple[np.ndarray, PadRecord]:
    h, w = a.shape
    th, tw = int(target[0]), int(target[1])
    if th < h or tw < w:
        raise TargetTooSmall(f"target {th}x{tw} smaller than input {h}x{w}")
    # centered; odd remainders put the extra pixel on the bottom/right
    r0 = (th - h) // 2
    c0 = (tw - w) // 2
    out = np.zeros((th, tw), dtype=a.dtype)
    out[r0 : r0 + h, c0 : c0 + w] = a
    return out, PadRecord(row=r0, col=c0, height=h, width=w)


def zero_pad(x, target: tuple[int, int] = DEFAULT_TARGET):
    """Center ``x`` on a zero canvas of ``target`` (height, width) dims.

    Accepts a Radiograph, a boolean mask, or an encoded uint32 mask
    image; returns the padded object of the same kind and a PadRecord
    that :func:`crop` inverts exactly.
    """
    if isinstance(x, Radiograph):
        padded, rec = _pad_array(x.intensity, target)
        raw = None
        if x.raw is not None:
            raw, _ = _pad_array(x.raw, target)
        return Radiograph(intensity=padded, raw=raw), rec
    a = np.asarray(x)
    if a.ndim != 2:
        raise TargetTooSmall(f"expected a 2-D raster, got shape {a.shape}")
    padded, rec = _pad_array(a, target)
    return padded, rec


def crop(padded, record: PadRecord):
    """Undo :func:`zero_pad`: extract the original raster per ``record``."""
    if isinstance(padded, Radiograph):
        intensity = crop(padded.intensity, record)
        raw = crop(padded.raw, record) if padded.raw is not None else None
        return Radiograph(intensity=intensity, raw=raw)
    a = np.asarray(padded)
    if a.ndim != 2:
        raise InconsistentRecord(f"expected a 2-D raster, got shape {a.shape}")
    h, w = a.shape
    if record.row < 0 or record.col < 0 or record.height < 1 or record.width < 1:
        raise InconsistentRecord(f"bad pad record {record}")
    if record.row + record.height > h or record.col + record.width > w:
        raise InconsistentRecord(
            f"record {record} exceeds padded dims {h}x{w}"
        )
    return a[record.row : record.row + record.height,
             record.col : record.col + record.width].copy()
