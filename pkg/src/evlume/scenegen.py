"""Synthetic clip rendering and low-light degradation.

Clips are moving anti-aliased shapes over a textured or flat background;
low-light pairs come from gamma correction plus linear scaling with additive
Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SceneError(ValueError):
    pass


@dataclass
class ShapeSpec:
    kind: str  # "rectangle" or "disk"
    color: tuple  # RGB in [0,1]
    position: tuple  # (row, col) center at frame 0
    velocity: tuple  # (drow, dcol) pixels per frame
    size: float  # disk radius, or rectangle half-side


@dataclass
class SceneSpec:
    height: int
    width: int
    n_frames: int
    shapes: list = field(default_factory=list)
    background: tuple | str = (0.5, 0.5, 0.5)  # RGB constant, or "noise"
    brightness: float = 1.0
    pan: tuple = (0.0, 0.0)  # background drift (drow, dcol) pixels per frame

    def __post_init__(self):
        if self.n_frames < 2:
            raise SceneError("a clip needs at least 2 frames")


@dataclass
class VideoClip:
    """Ordered H x W x 3 frames in [0,1] with per-frame timestamps."""

    frames: np.ndarray  # (N, H, W, 3)
    timestamps: np.ndarray  # (N,)

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def resolution(self):
        return self.frames.shape[1], self.frames.shape[2]


def _noise_field(rng, extent_h, extent_w, cell=8):
    """Coarse uniform grid defining a band-limited texture over the extent."""
    gh = int(extent_h) // cell + 2
    gw = int(extent_w) // cell + 2
    return rng.uniform(0.0, 1.0, size=(gh, gw, 3))


def _sample_noise(coarse, ys, xs, cell=8):
    """Bilinear sample of the coarse grid at (possibly fractional) pixels."""
    fy = np.asarray(ys, dtype=np.float64) / cell
    fx = np.asarray(xs, dtype=np.float64) / cell
    y0 = np.floor(fy).astype(int)
    x0 = np.floor(fx).astype(int)
    wy = (fy - y0)[:, None, None]
    wx = (fx - x0)[None, :, None]
    top = coarse[y0][:, x0] * (1 - wx) + coarse[y0][:, x0 + 1] * wx
    bot = coarse[y0 + 1][:, x0] * (1 - wx) + coarse[y0 + 1][:, x0 + 1] * wx
    return top * (1 - wy) + bot * wy


def _value_noise(h, w, rng, cell=8):
    """Band-limited texture: coarse uniform grid, bilinearly upsampled."""
    return _sample_noise(_noise_field(rng, h, w, cell), np.arange(h), np.arange(w), cell)


def _shape_alpha(shape, t, h, w):
    """Soft-edge coverage in [0,1]; 1-pixel anti-aliased border."""
    cy = shape.position[0] + t * shape.velocity[0]
    cx = shape.position[1] + t * shape.velocity[1]
    yy, xx = np.mgrid[0:h, 0:w]
    if shape.kind == "disk":
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        return np.clip(shape.size + 0.5 - dist, 0.0, 1.0)
    if shape.kind == "rectangle":
        ay = np.clip(np.minimum(yy - (cy - shape.size), (cy + shape.size) - yy) + 0.5, 0.0, 1.0)
        ax = np.clip(np.minimum(xx - (cx - shape.size), (cx + shape.size) - xx) + 0.5, 0.0, 1.0)
        return ay * ax
    raise SceneError(f"unknown shape kind '{shape.kind}'")


def render_clip(spec, seed=0):
    """Render a deterministic clip from a scene spec.

    Shapes translate by their velocity each frame and are clipped at the
    border. A non-zero ``pan`` drifts a textured background across the view,
    like slow camera motion; constant backgrounds are unaffected by pan.
    Raises if the scene is degenerate (no shapes and a flat background) or if
    mean brightness falls below 0.3.
    """
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    pan_y, pan_x = float(spec.pan[0]), float(spec.pan[1])
    if not spec.shapes and spec.background != "noise":
        raise SceneError("degenerate scene: no shapes over a constant background yields no events")
    if spec.background == "noise":
        span_y = abs(pan_y) * (spec.n_frames - 1)
        span_x = abs(pan_x) * (spec.n_frames - 1)
        field = _noise_field(rng, h + int(np.ceil(span_y)), w + int(np.ceil(span_x)))
        base_y = span_y if pan_y < 0 else 0.0
        base_x = span_x if pan_x < 0 else 0.0

        def background_at(t):
            return _sample_noise(
                field, np.arange(h) + base_y + t * pan_y, np.arange(w) + base_x + t * pan_x
            )

    else:
        const = np.broadcast_to(np.asarray(spec.background, dtype=np.float64), (h, w, 3)).copy()

        def background_at(t):
            return const

    frames = np.empty((spec.n_frames, h, w, 3), dtype=np.float64)
    for t in range(spec.n_frames):
        frame = background_at(t) * spec.brightness
        for shape in spec.shapes:
            alpha = _shape_alpha(shape, t, h, w)[:, :, None]
            color = np.asarray(shape.color, dtype=np.float64) * spec.brightness
            frame = frame * (1 - alpha) + color * alpha
        frames[t] = np.clip(frame, 0.0, 1.0)
    mean_brightness = frames.mean()
    if mean_brightness < 0.3:
        raise SceneError(f"clip rejected: mean brightness {mean_brightness:.3f} < 0.3")
    return VideoClip(frames=frames, timestamps=np.arange(spec.n_frames, dtype=np.float64))


@dataclass
class DegradationParams:
    gamma: float
    alpha: float
    beta: float
    sigma: float
    seed: int = 0


TEST_PRESET = DegradationParams(gamma=2.75, alpha=0.95, beta=0.8, sigma=0.01, seed=0)

TRAIN_RANGES = {
    "gamma": (2.0, 3.5),
    "alpha": (0.9, 1.0),
    "beta": (0.5, 1.0),
    "sigma": (0.0, 0.02),
}


def sample_degradation_params(seed):
    """Draw training-time degradation parameters from their uniform ranges."""
    rng = np.random.default_rng(seed)
    return DegradationParams(
        gamma=rng.uniform(*TRAIN_RANGES["gamma"]),
        alpha=rng.uniform(*TRAIN_RANGES["alpha"]),
        beta=rng.uniform(*TRAIN_RANGES["beta"]),
        sigma=rng.uniform(*TRAIN_RANGES["sigma"]),
        seed=seed,
    )


def degrade_clip(clip, params):
    """Darken a clip: out = clamp(beta * (alpha * in)^gamma + noise, 0, 1)."""
    if params.gamma <= 0:
        raise ValueError("gamma must be positive")
    rng = np.random.default_rng(params.seed)
    low = params.beta * np.power(params.alpha * clip.frames, params.gamma)
    if params.sigma > 0:
        low = low + rng.normal(0.0, params.sigma, size=low.shape)
    return VideoClip(frames=np.clip(low, 0.0, 1.0), timestamps=clip.timestamps.copy())
