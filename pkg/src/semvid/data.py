"""Synthetic video generation with controllable motion, and raw-frame I/O.

Clips are 8-bit RGB in planar layout (frame, channel, row, col).  The file
format is the raw planar payload with a JSON sidecar at path + ".meta.json"
holding width / height / frame_count / fps; round-trips are bit-exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = ["VideoClip", "MotionSpec", "ClipFormatError", "generate_clip",
           "read_clip", "write_clip", "parse_motion"]

OBJECT_KINDS = ("rect", "sinusoid", "checker")


class ClipFormatError(ValueError):
    """Raised for missing/inconsistent clip files or sidecars."""


@dataclass
class VideoClip:
    width: int
    height: int
    fps: float
    frames: np.ndarray  # (frame_count, 3, height, width) uint8

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def payload_bytes(self) -> int:
        return self.frames.size


@dataclass
class MotionSpec:
    kind: str = "rect"
    velocity: tuple[int, int] = (2, 0)   # (dx, dy) pixels per frame
    background: str = "flat"             # flat | gradient
    seed: int = 0

    def __post_init__(self):
        if self.kind not in OBJECT_KINDS:
            raise ValueError(f"unknown object kind {self.kind!r}; choose from {OBJECT_KINDS}")


def parse_motion(text: str) -> MotionSpec:
    """Parse 'kind:dx,dy' (e.g. 'rect:2,0') into a MotionSpec."""
    try:
        kind, vel = text.split(":")
        dx, dy = (int(v) for v in vel.split(","))
    except ValueError as exc:
        raise ValueError(f"bad motion spec {text!r}; expected kind:dx,dy") from exc
    return MotionSpec(kind=kind, velocity=(dx, dy))


def _base_frame(spec: MotionSpec, width: int, height: int) -> np.ndarray:
    """First frame of the clip as (3, H, W) uint8."""
    rng = np.random.default_rng(spec.seed)
    frame = np.zeros((3, height, width), dtype=np.float64)
    if spec.background == "gradient":
        ramp = np.linspace(40, 110, width)
        frame += ramp[None, None, :]
    else:
        frame += rng.integers(40, 90)

    yy, xx = np.mgrid[0:height, 0:width]
    if spec.kind == "rect":
        rw = max(width // 4, 8)
        rh = max(height // 4, 8)
        x0 = int(rng.integers(0, width - rw))
        y0 = int(rng.integers(0, height - rh))
        color = rng.integers(150, 255, size=3)
        mask = (xx >= x0) & (xx < x0 + rw) & (yy >= y0) & (yy < y0 + rh)
        for c in range(3):
            frame[c][mask] = color[c]
    elif spec.kind == "sinusoid":
        fx = 2 * np.pi * rng.integers(1, 4) / width
        fy = 2 * np.pi * rng.integers(1, 4) / height
        phase = rng.uniform(0, 2 * np.pi, size=3)
        for c in range(3):
            frame[c] = 127.5 + 100.0 * np.sin(fx * xx + phase[c]) * np.cos(fy * yy)
    else:  # checker
        cell = max(min(width, height) // 8, 4)
        tile = ((xx // cell + yy // cell) % 2).astype(np.float64)
        hi = rng.integers(160, 230)
        lo = rng.integers(20, 80)
        for c in range(3):
            frame[c] = lo + (hi - lo) * tile
    return np.clip(frame, 0, 255).astype(np.uint8)


def generate_clip(
    spec: MotionSpec, width: int, height: int, frame_count: int, fps: float = 25.0
) -> VideoClip:
    """Deterministic clip whose inter-frame motion is exactly spec.velocity.

    Integer velocities translate the previous frame with wraparound, so
    consecutive frames are circular shifts of each other, bit-exact.
    """
    if width % 8 or height % 8:
        raise ValueError(f"dimensions must be multiples of 8, got {width}x{height}")
    if frame_count < 1:
        raise ValueError(f"frame_count must be >= 1, got {frame_count}")
    dx, dy = spec.velocity
    if max(abs(dx), abs(dy)) > min(width, height) / 4:
        raise ValueError(
            f"velocity {spec.velocity} exceeds min(W,H)/4 = {min(width, height)/4}"
        )
    base = _base_frame(spec, width, height)
    frames = np.empty((frame_count, 3, height, width), dtype=np.uint8)
    frames[0] = base
    for i in range(1, frame_count):
        frames[i] = np.roll(frames[i - 1], shift=(dy, dx), axis=(1, 2))
    return VideoClip(width=width, height=height, fps=fps, frames=frames)


def write_clip(clip: VideoClip, path: str):
    """Raw planar payload at path, JSON sidecar at path + '.meta.json'."""
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(clip.frames).tobytes())
    meta = {
        "width": clip.width,
        "height": clip.height,
        "frame_count": clip.frame_count,
        "fps": clip.fps,
    }
    with open(path + ".meta.json", "w") as fh:
        json.dump(meta, fh, indent=1)


def read_clip(path: str) -> VideoClip:
    meta_path = path + ".meta.json"
    if not os.path.exists(meta_path):
        raise ClipFormatError(f"missing sidecar {meta_path}")
    with open(meta_path) as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ClipFormatError(f"unreadable sidecar {meta_path}: {exc}") from exc
    try:
        width = int(meta["width"])
        height = int(meta["height"])
        frame_count = int(meta["frame_count"])
        fps = float(meta.get("fps", 25.0))
    except KeyError as exc:
        raise ClipFormatError(f"sidecar {meta_path} missing key {exc}") from exc
    expected = frame_count * 3 * height * width
    with open(path, "rb") as fh:
        payload = fh.read()
    if len(payload) != expected:
        raise ClipFormatError(
            f"payload is {len(payload)} bytes, expected {expected} "
            f"({frame_count} frames of 3x{height}x{width})"
        )
    frames = np.frombuffer(payload, dtype=np.uint8).reshape(
        frame_count, 3, height, width
    ).copy()
    return VideoClip(width=width, height=height, fps=fps, frames=frames)
