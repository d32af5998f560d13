"""Frame interpolation, event generation, voxelization, and guidance masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenegen import VideoClip

EVENT_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<f8"), ("c", "u1"), ("p", "i1")])

LOW_LIGHT_THRESHOLD = 2.0
NORMAL_LIGHT_THRESHOLD = 5.0


@dataclass
class VoxelGrid:
    """B x H x W nonnegative tensor, B = 2*N*3.

    Bin index b = pol*(N*3) + bin*3 + channel, pol 0 = positive, 1 = negative.
    Sign is carried by the polarity group, so all stored values are >= 0.
    """

    values: np.ndarray
    n_bins: int  # temporal bins N
    t0: float
    tn: float

    @property
    def depth(self):
        return self.values.shape[0]

    def positive(self):
        """The positive-polarity half, shape (N*3, H, W)."""
        return self.values[: self.n_bins * 3]


def bin_index(pol_idx, k, channel, n_bins):
    return pol_idx * (n_bins * 3) + k * 3 + channel


def interpolate_frames(clip, factor):
    """Linearly densify a clip: (N-1)*U + 1 frames, originals kept bit-exact."""
    if factor < 1:
        raise ValueError("interpolation factor must be >= 1")
    if clip.n_frames < 2:
        raise ValueError("need at least 2 frames to interpolate")
    if factor == 1:
        return VideoClip(frames=clip.frames.copy(), timestamps=clip.timestamps.copy())
    n = clip.n_frames
    n_out = (n - 1) * factor + 1
    h, w = clip.resolution
    frames = np.empty((n_out, h, w, 3), dtype=clip.frames.dtype)
    times = np.empty(n_out, dtype=np.float64)
    for j in range(n - 1):
        a, b = clip.frames[j], clip.frames[j + 1]
        ta, tb = clip.timestamps[j], clip.timestamps[j + 1]
        for i in range(factor):
            w1 = i / factor
            frames[j * factor + i] = a if i == 0 else (1 - w1) * a + w1 * b
            times[j * factor + i] = ta + w1 * (tb - ta)
    frames[-1] = clip.frames[-1]
    times[-1] = clip.timestamps[-1]
    return VideoClip(frames=frames, timestamps=times)


def generate_events(clip, threshold):
    """Difference consecutive frames into discrete events.

    Differences are taken on the 0-255 scale so the integer thresholds (2 for
    low light, 5 for normal light) apply directly. An event fires when
    |255*(next - prev)| >= threshold, with polarity the sign of the change,
    stamped at the later frame's time. Output sorted by (t, y, x, c).
    """
    if clip.n_frames < 2:
        raise ValueError("need at least 2 frames to generate events")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    chunks = []
    for j in range(clip.n_frames - 1):
        d = 255.0 * (clip.frames[j + 1] - clip.frames[j])
        ys, xs, cs = np.nonzero(np.abs(d) >= threshold)
        if ys.size == 0:
            continue
        ev = np.empty(ys.size, dtype=EVENT_DTYPE)
        ev["x"] = xs
        ev["y"] = ys
        ev["t"] = clip.timestamps[j + 1]
        ev["c"] = cs
        ev["p"] = np.where(d[ys, xs, cs] > 0, 1, -1)
        chunks.append(ev)
    if not chunks:
        return np.empty(0, dtype=EVENT_DTYPE)
    events = np.concatenate(chunks)
    order = np.lexsort((events["c"], events["x"], events["y"], events["t"]))
    return events[order]


def voxelize(events, n_bins, height, width, t0, tn):
    """Accumulate events into a voxel grid with a triangular temporal kernel.

    Each event contributes max(0, 1 - |k - (t-t0)/(tn-t0)*(N-1)|) to temporal
    bin k of its (polarity, channel) group. With N=1 the kernel collapses and
    every event puts weight 1 into the single bin.
    """
    if tn <= t0:
        raise ValueError("tn must be greater than t0")
    if n_bins < 1:
        raise ValueError("need at least one temporal bin")
    values = np.zeros((2 * n_bins * 3, height, width), dtype=np.float64)
    if events.size == 0:
        return VoxelGrid(values=values, n_bins=n_bins, t0=t0, tn=tn)
    t = events["t"].astype(np.float64)
    if t.min() < t0 or t.max() > tn:
        raise ValueError("event timestamp outside [t0, tn]")
    pos = (t - t0) / (tn - t0) * (n_bins - 1) if n_bins > 1 else np.zeros_like(t)
    pol_idx = (events["p"] < 0).astype(np.intp)
    c = events["c"].astype(np.intp)
    x = events["x"].astype(np.intp)
    y = events["y"].astype(np.intp)
    k_lo = np.floor(pos).astype(np.intp)
    # both flanking bins per event, interleaved in event order so the
    # accumulation order (and hence every rounding) matches the naive loop
    ks = np.stack([k_lo, k_lo + 1], axis=1)
    weights = np.maximum(0.0, 1.0 - np.abs(ks - pos[:, None]))
    if n_bins == 1:
        weights = (ks == 0).astype(np.float64)
    oob = ks >= n_bins
    weights[oob] = 0.0
    ks[oob] = 0
    b = pol_idx[:, None] * (n_bins * 3) + ks * 3 + c[:, None]
    yy = np.repeat(y, 2).reshape(-1, 2)
    xx = np.repeat(x, 2).reshape(-1, 2)
    np.add.at(values, (b.ravel(), yy.ravel(), xx.ravel()), weights.ravel())
    return VoxelGrid(values=values, n_bins=n_bins, t0=t0, tn=tn)


def voxelize_naive(events, n_bins, height, width, t0, tn):
    """Per-event scalar-loop accumulator; the oracle for `voxelize`."""
    if tn <= t0:
        raise ValueError("tn must be greater than t0")
    values = np.zeros((2 * n_bins * 3, height, width), dtype=np.float64)
    for ev in events:
        t = float(ev["t"])
        if t < t0 or t > tn:
            raise ValueError("event timestamp outside [t0, tn]")
        pos = (t - t0) / (tn - t0) * (n_bins - 1) if n_bins > 1 else 0.0
        pol_idx = 0 if ev["p"] > 0 else 1
        for k in range(n_bins):
            w = 1.0 if n_bins == 1 and k == 0 else max(0.0, 1.0 - abs(k - pos))
            if w > 0:
                values[bin_index(pol_idx, k, int(ev["c"]), n_bins), int(ev["y"]), int(ev["x"])] += w
    return VoxelGrid(values=values, n_bins=n_bins, t0=t0, tn=tn)


GT_MASK_THRESHOLD = 0.1
GUIDANCE_THRESHOLD = 0.9


def gt_voxel_mask(grid, threshold=GT_MASK_THRESHOLD):
    """Binary B x H x W mask: 1 where the voxel value is >= threshold."""
    if np.any(grid.values < 0):
        raise ValueError("voxel grid must be nonnegative")
    return (grid.values >= threshold).astype(np.float64)


def nearest_resize_2d(arr, target):
    th, tw = target
    h, w = arr.shape
    rows = (np.arange(th) * h) // th
    cols = (np.arange(tw) * w) // tw
    return arr[rows][:, cols]


def egdb_mask(grid, target, threshold=GUIDANCE_THRESHOLD):
    """Guidance mask from the positive restored voxels.

    Max over temporal bins per channel, then max over channels, nearest
    resized to the target resolution and binarized at the threshold
    (inclusive).
    """
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError("target resolution must be at least 1x1")
    pos = grid.positive().reshape(grid.n_bins, 3, *grid.values.shape[1:])
    per_channel = pos.max(axis=0)  # (3, H, W)
    merged = per_channel.max(axis=0)  # (H, W)
    resized = nearest_resize_2d(merged, target)
    return (resized >= threshold).astype(np.float64)


def clip_to_voxels(clip, threshold, n_bins, interp_factor=4):
    """Full synthesis path: interpolate, difference into events, voxelize."""
    dense = interpolate_frames(clip, interp_factor)
    events = generate_events(dense, threshold)
    h, w = clip.resolution
    return voxelize(events, n_bins, h, w, float(clip.timestamps[0]), float(clip.timestamps[-1]))
