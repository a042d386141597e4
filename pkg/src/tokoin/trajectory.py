"""Synthetic delivery trajectories with constructive ground truth.

A bright blob (the deliveryman) moves over a textured background on the
monitoring camera's grid. Three labels: ``benign`` (enter, drop, leave),
``boundary-cross`` (wanders over the permitted-region line at a known frame),
``overtime`` (drops but loiters past the time budget). Ground truth comes
from the generated geometry, never from running the detector.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np

from .vision import DEFAULT_FRAME_SHAPE

LABELS = ("benign", "boundary-cross", "overtime")

BLOB_SIZE = 7  # square side, comfortably above the despeckle minimum
BLOB_AMPLITUDE = 120  # well above the default threshold
BOUNDARY_X = 40  # permitted region: columns [0, BOUNDARY_X)
DEFAULT_FPS = 4.0


def default_region_mask(shape=DEFAULT_FRAME_SHAPE, boundary_x: int = BOUNDARY_X) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[:, :boundary_x] = True
    return mask


def background(shape=DEFAULT_FRAME_SHAPE) -> np.ndarray:
    """Deterministic textured background (the registered standard pattern)."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    return ((xs * 7 + ys * 13) % 23 + 24).astype(np.uint8)


@dataclass
class TrajectoryTrace:
    label: str
    frames: list[np.ndarray]
    fps: float
    drop_frame: int | None
    crossing_frame: int | None  # first frame with any blob pixel outside the mask
    duration_s: float
    positions: list[tuple[int, int] | None] = field(repr=False, default_factory=list)


def _render(base: np.ndarray, pos: tuple[int, int] | None, rng: random.Random,
            hot_pixel_p: float) -> np.ndarray:
    frame = base.copy()
    if pos is not None:
        y, x = pos
        h, w = frame.shape
        y0, y1 = max(0, y), min(h, y + BLOB_SIZE)
        x0, x1 = max(0, x), min(w, x + BLOB_SIZE)
        region = frame[y0:y1, x0:x1].astype(np.int16) + BLOB_AMPLITUDE
        frame[y0:y1, x0:x1] = np.clip(region, 0, 255).astype(np.uint8)
    if rng.random() < hot_pixel_p:
        # single-pixel sensor speckle; the despeckle pass must eat it
        frame[rng.randrange(frame.shape[0]), rng.randrange(frame.shape[1])] = 255
    return frame


def _blob_pixels(pos: tuple[int, int], shape) -> list[tuple[int, int]]:
    y, x = pos
    h, w = shape
    return [
        (yy, xx)
        for yy in range(max(0, y), min(h, y + BLOB_SIZE))
        for xx in range(max(0, x), min(w, x + BLOB_SIZE))
    ]


def _walk(start: tuple[int, int], goal: tuple[int, int], steps: int,
          rng: random.Random, x_bounds: tuple[int, int]) -> list[tuple[int, int]]:
    """Jittered straight-line walk, clamped to the given x corridor."""
    out = []
    for i in range(1, steps + 1):
        f = i / steps
        y = round(start[0] + (goal[0] - start[0]) * f + rng.uniform(-1, 1))
        x = round(start[1] + (goal[1] - start[1]) * f + rng.uniform(-1, 1))
        x = max(x_bounds[0], min(x_bounds[1], x))
        y = max(1, min(DEFAULT_FRAME_SHAPE[0] - BLOB_SIZE - 1, y))
        out.append((y, x))
    return out


def gen_trajectory(
    label: str,
    seed: int,
    *,
    max_duration_s: float = 20.0,
    grace_s: float = 4.0,
    fps: float = DEFAULT_FPS,
    shape=DEFAULT_FRAME_SHAPE,
    boundary_x: int = BOUNDARY_X,
    hot_pixel_p: float = 0.25,
) -> TrajectoryTrace:
    """Deterministic frame stream plus ground truth for one label."""
    if label not in LABELS:
        raise ValueError(f"unknown trajectory label {label!r}")
    rng = random.Random((seed, label).__repr__())
    base = background(shape)
    mask = default_region_mask(shape, boundary_x)

    h, _w = shape
    door = (h // 2 - BLOB_SIZE // 2 + rng.randint(-4, 4), 1)
    # keep a safety margin inside the permitted region while behaving
    inside_max_x = boundary_x - BLOB_SIZE - 3
    drop_point = (h // 2 - BLOB_SIZE // 2 + rng.randint(-6, 6),
                  rng.randint(inside_max_x - 12, inside_max_x))
    corridor = (1, inside_max_x)

    positions: list[tuple[int, int] | None] = []
    positions += _walk(door, drop_point, rng.randint(5, 8), rng, corridor)
    dwell = rng.randint(2, 4)
    positions += [drop_point] * dwell
    drop_frame = len(positions) - 1

    if label == "benign":
        positions += _walk(drop_point, door, rng.randint(5, 8), rng, corridor)
        positions += [None] * 6  # scene back to standard
    elif label == "boundary-cross":
        # wander right, over the line, by a couple of blob widths
        overshoot = (drop_point[0] + rng.randint(-3, 3), boundary_x + rng.randint(1, 6))
        positions += _walk(drop_point, overshoot, rng.randint(4, 7), rng,
                           (1, shape[1] - BLOB_SIZE - 1))
        positions += [overshoot] * 2
    else:  # overtime: stay until past max duration plus grace
        budget_frames = int((max_duration_s + grace_s) * fps) + 3
        while len(positions) < budget_frames:
            wiggle = (drop_point[0] + rng.randint(-1, 1), drop_point[1] + rng.randint(-1, 1))
            positions.append((max(1, wiggle[0]), max(1, min(inside_max_x, wiggle[1]))))

    crossing_frame: int | None = None
    for k, pos in enumerate(positions):
        if pos is None:
            continue
        if any(not mask[y, x] for y, x in _blob_pixels(pos, shape)):
            crossing_frame = k
            break
    if label == "boundary-cross":
        assert crossing_frame is not None, "generator must cross the boundary"
    else:
        assert crossing_frame is None, "generator strayed outside the permitted region"

    frames = [_render(base, pos, rng, hot_pixel_p) for pos in positions]
    return TrajectoryTrace(
        label=label,
        frames=frames,
        fps=fps,
        drop_frame=drop_frame,
        crossing_frame=crossing_frame,
        duration_s=len(frames) / fps,
        positions=positions,
    )
