"""Effective-receptive-field maps and static receptive-field arithmetic.

The ERF of a feature site is the input-pixel footprint of its gradient:
activate the site uniformly across channels with an upstream one-hot,
backpropagate to the input, and aggregate absolute gradients over input
channels.  For an untrained model with zero predictors, the footprint
must stay inside the static receptive field of the composed 3x3 layers,
which this module also computes analytically.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .model import Model, forward_to_stage


@dataclass(frozen=True)
class ReceptiveField:
    size: int  # odd box side in input pixels
    jump: int  # input pixels per feature step (cumulative stride)

    @property
    def half(self) -> int:
        return (self.size - 1) // 2


def stage_layer_chain(model: Model, stage: int) -> list[tuple[int, int]]:
    """(kernel, stride) pairs from the input to the requested stage output.

    Stage 0 is the stem alone.  A block contributes one 3x3 stride-1 layer:
    both its gradient paths (sampling scatter at the zero-offset grid and
    the field predictor's depthwise window) reach exactly +-1 pixel.
    """
    if stage < 0 or stage > len(model.stages):
        raise ConfigError(f"stage must be in [0, {len(model.stages)}], got {stage}")
    chain = [(3, 2), (3, 2)]
    for si in range(stage):
        k = model.stages[si].blocks[0].cfg.kernel
        chain.extend((k, 1) for _ in model.stages[si].blocks)
        if si + 1 < stage:
            chain.append((3, 2))
    return chain


def receptive_field(chain: list[tuple[int, int]]) -> ReceptiveField:
    """Compose (kernel, stride) layers into an input-space box and stride."""
    size, jump = 1, 1
    for k, s in chain:
        size += (k - 1) * jump
        jump *= s
    return ReceptiveField(size=size, jump=jump)


def feature_site_for_pixel(y: int, x: int, jump: int, fh: int, fw: int) -> tuple[int, int]:
    """Feature coordinates whose receptive-field center is nearest (y, x).

    Every layer here uses padding (kernel-1)/2, so the center of feature
    (i, j) sits exactly at input (i*jump, j*jump).
    """
    fy = min(max(int(round(y / jump)), 0), fh - 1)
    fx = min(max(int(round(x / jump)), 0), fw - 1)
    return fy, fx


def support_box(
    pixel: tuple[int, int], rf: ReceptiveField, fh: int, fw: int, h: int, w: int
) -> tuple[int, int, int, int]:
    """Inclusive (y0, y1, x0, x1) input box the ERF may occupy."""
    fy, fx = feature_site_for_pixel(pixel[0], pixel[1], rf.jump, fh, fw)
    cy, cx = fy * rf.jump, fx * rf.jump
    return (
        max(0, cy - rf.half), min(h - 1, cy + rf.half),
        max(0, cx - rf.half), min(w - 1, cx + rf.half),
    )


def erf_map(model: Model, x: np.ndarray, pixel: tuple[int, int], stage: int) -> np.ndarray:
    """Per-pixel aggregated gradient magnitude for one activated site."""
    n, _, h, w = x.shape
    y, xcol = pixel
    if not (0 <= y < h and 0 <= xcol < w):
        raise ShapeError(f"pixel {pixel} outside input {h}x{w}")
    feat, pull = forward_to_stage(model, x, stage)
    fh, fw = feat.shape[2], feat.shape[3]
    rf = receptive_field(stage_layer_chain(model, stage))
    fy, fx = feature_site_for_pixel(y, xcol, rf.jump, fh, fw)
    upstream = np.zeros_like(feat)
    upstream[:, :, fy, fx] = 1.0
    grad = pull(upstream)
    return np.abs(grad[0]).sum(axis=0)


def write_pgm(map2d: np.ndarray, path: str | Path) -> None:
    """8-bit binary PGM, map normalized so the peak value is 255."""
    map2d = np.asarray(map2d, dtype=np.float64)
    peak = map2d.max()
    scaled = np.zeros_like(map2d) if peak <= 0 else map2d * (255.0 / peak)
    pixels = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    h, w = map2d.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Binary (P5) 8-bit PGM reader; returns float64 in [0, 1]."""
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ConfigError(f"{path}: only binary P5 PGM supported, got {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ConfigError(f"{path}: only 8-bit PGM supported, maxval {maxval}")
    pos += 1  # single whitespace after maxval
    raw = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos)
    return raw.reshape(h, w).astype(np.float64) / 255.0


def write_map_csv(map2d: np.ndarray, path: str | Path) -> None:
    """Raw map values, one CSV row per image row."""
    np.savetxt(path, np.asarray(map2d, dtype=np.float64), delimiter=",", fmt="%.17g")
