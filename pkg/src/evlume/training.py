"""Losses and the two-stage training procedure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .events import VoxelGrid, clip_to_voxels, egdb_mask, gt_voxel_mask
from .events import LOW_LIGHT_THRESHOLD, NORMAL_LIGHT_THRESHOLD
from .networks import (
    ENHANCE_PREFIX,
    RESTORE_PREFIX,
    ModelConfig,
    enhance_forward,
    init_model_params,
    init_restoration_params,
    restore_events,
)
from .optim import AdamState, ParamTree, adam_step, backward
from .scenegen import (
    SceneSpec,
    SceneError,
    ShapeSpec,
    degrade_clip,
    render_clip,
    sample_degradation_params,
)


@dataclass
class TrainConfig:
    stage: int = 1
    iterations: int = 2000
    batch_size: int = 4
    crop: int = 64
    lr: float = 2e-4
    lambda1: float = 1.0
    lambda2: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.crop % 4:
            raise ValueError("crop size must be divisible by 4")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")

    def to_dict(self):
        return {
            "stage": self.stage,
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "crop": self.crop,
            "lr": self.lr,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        out = cls()
        for k, v in d.items():
            cast = type(getattr(out, k))
            setattr(out, k, cast(v))
        return out


# -- dataset ---------------------------------------------------------------

@dataclass
class ClipPair:
    """One training sample: normal-light clip, its low-light twin, and the
    voxel grids of both (low at threshold 2, normal at threshold 5)."""

    gt: object
    low: object
    voxels_low: VoxelGrid
    voxels_normal: VoxelGrid


def _random_scene(rng, height, width, n_frames, pan_range=0.0):
    shapes = []
    for _ in range(rng.integers(1, 4)):
        kind = "disk" if rng.random() < 0.5 else "rectangle"
        shapes.append(
            ShapeSpec(
                kind=kind,
                color=tuple(rng.uniform(0.2, 1.0, size=3)),
                position=(rng.uniform(0.2, 0.8) * height, rng.uniform(0.2, 0.8) * width),
                velocity=(rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)),
                size=rng.uniform(0.08, 0.25) * min(height, width),
            )
        )
    brightness = rng.uniform(0.75, 1.0)
    # Draw camera pan last so pan_range=0 scenes match the unpanned stream.
    pan = tuple(rng.uniform(-pan_range, pan_range, size=2)) if pan_range > 0 else (0.0, 0.0)
    return SceneSpec(
        height=height,
        width=width,
        n_frames=n_frames,
        shapes=shapes,
        background="noise",
        brightness=brightness,
        pan=pan,
    )


def render_pair(height, width, n_frames, seed, pan_range=0.0):
    """Render a random normal-light clip and its degraded low-light twin."""
    rng = np.random.default_rng(seed)
    for attempt in range(20):
        try:
            spec = _random_scene(rng, height, width, n_frames, pan_range)
            gt = render_clip(spec, seed=seed + attempt * 7919)
            break
        except SceneError:
            continue
    else:
        raise SceneError("could not render an acceptable clip in 20 attempts")
    low = degrade_clip(gt, sample_degradation_params(seed))
    return gt, low


def pair_from_clips(gt, low, n_frames, interp_factor=4):
    """Synthesize both voxel grids for an existing (gt, low) clip pair."""
    voxels_low = clip_to_voxels(low, LOW_LIGHT_THRESHOLD, n_frames, interp_factor)
    voxels_normal = clip_to_voxels(gt, NORMAL_LIGHT_THRESHOLD, n_frames, interp_factor)
    return ClipPair(gt=gt, low=low, voxels_low=voxels_low, voxels_normal=voxels_normal)


def build_clip_pair(height, width, n_frames, seed, interp_factor=4, pan_range=0.0):
    """Render one clip, degrade it, and synthesize both voxel grids."""
    gt, low = render_pair(height, width, n_frames, seed, pan_range)
    return pair_from_clips(gt, low, n_frames, interp_factor)


def build_dataset(n_clips, height, width, n_frames, seed, interp_factor=4, pan_range=0.0):
    return [
        build_clip_pair(height, width, n_frames, seed * 100003 + i, interp_factor, pan_range)
        for i in range(n_clips)
    ]


# -- losses ----------------------------------------------------------------

def loss_stage1(prob, restored, gt_values, lambda1=1.0):
    """BCE between P and the binarized ground-truth voxels, plus lambda1
    times the L1 between the restored and ground-truth grids."""
    gt_mask = (np.asarray(gt_values) >= 0.1).astype(prob.dtype)
    l_m = T.bce_loss(prob, T.constant(gt_mask))
    l_v = T.l1_loss(restored, T.constant(np.asarray(gt_values, dtype=prob.dtype)))
    total = l_m + lambda1 * l_v
    return total, float(l_m.data), float(l_v.data)


class FeatureExtractor:
    """Fixed, seeded 3-stage random conv net used as the perceptual term.

    The interface is pluggable: anything with features(image_tensor) ->
    list of Tensors can stand in.
    """

    def __init__(self, seed=1234, dtype=np.float64):
        rng = np.random.default_rng(seed)
        dims = [(3, 8), (8, 16), (16, 16)]
        self.weights = []
        for c_in, c_out in dims:
            w = rng.normal(0.0, np.sqrt(2.0 / (c_in * 9)), size=(c_out, c_in, 3, 3))
            self.weights.append(T.constant(w.astype(dtype)))

    def features(self, img):
        feats = []
        x = img
        for i, w in enumerate(self.weights):
            stride = 2 if i < 2 else 1
            x = T.relu(T.conv2d(x, w, None, stride=stride))
            feats.append(x)
        return feats


_EXTRACTORS = {}


def default_extractor(dtype=np.float64):
    key = np.dtype(dtype).name
    if key not in _EXTRACTORS:
        _EXTRACTORS[key] = FeatureExtractor(dtype=dtype)
    return _EXTRACTORS[key]


def loss_stage2(pred, gt, lambda2=0.1, extractor=None):
    """L1 plus a perceptual feature-distance term on (3,H,W) images."""
    gt_t = T.constant(np.asarray(gt, dtype=pred.dtype))
    l1 = T.l1_loss(pred, gt_t)
    if lambda2 == 0:
        return l1, float(l1.data), 0.0
    if extractor is None:
        extractor = default_extractor(pred.dtype)
    pf = extractor.features(pred)
    gf = extractor.features(gt_t)
    terms = [T.l1_loss(a, b) for a, b in zip(pf, gf)]
    l_feat = terms[0]
    for t in terms[1:]:
        l_feat = l_feat + t
    l_feat = l_feat * (1.0 / len(terms))
    total = l1 + lambda2 * l_feat
    return total, float(l1.data), float(l_feat.data)


# -- stage 1 ---------------------------------------------------------------

def _crop_origin(rng, h, w, crop):
    oy = int(rng.integers(0, h - crop + 1))
    ox = int(rng.integers(0, w - crop + 1))
    return oy, ox


def _draw_batch(rng, dataset, batch_size, crop):
    """Sample (clip, crop-origin) tuples with multiplicity.

    Identical draws are collapsed and weighted; the weighted mean equals the
    plain batch mean, so duplicate samples cost one forward pass instead of
    several (the common case when crops cover the whole clip).
    """
    counts = {}
    for idx in rng.integers(0, len(dataset), size=batch_size):
        h, w = dataset[idx].gt.resolution
        c = min(crop, h, w)
        key = (int(idx), *_crop_origin(rng, h, w, c), c)
        counts[key] = counts.get(key, 0) + 1
    return counts


def train_stage1(dataset, model_config, config, dtype=np.float32, progress=None):
    """Optimize the restoration network on (low, normal) voxel-grid pairs.

    Returns (params, history) where history rows are
    (iteration, l_m, l_v, total).
    """
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    params = init_restoration_params(model_config, seed=config.seed, dtype=dtype)
    state = AdamState(lr=config.lr)
    history = []
    for it in range(config.iterations):
        total = None
        sum_m = sum_v = 0.0
        for (idx, oy, ox, crop), count in _draw_batch(rng, dataset, config.batch_size, config.crop).items():
            pair = dataset[idx]
            e_crop = pair.voxels_low.values[:, oy : oy + crop, ox : ox + crop].astype(dtype)
            g_crop = pair.voxels_normal.values[:, oy : oy + crop, ox : ox + crop].astype(dtype)
            out = restore_events(params, model_config, e_crop)
            loss, l_m, l_v = loss_stage1(out.probability, out.restored, g_crop, config.lambda1)
            weighted = loss * float(count)
            total = weighted if total is None else total + weighted
            sum_m += l_m * count
            sum_v += l_v * count
        total = total * (1.0 / config.batch_size)
        grads = backward(total, params)
        adam_step(params, grads, state)
        history.append((it, sum_m / config.batch_size, sum_v / config.batch_size, float(total.data)))
        if progress and (it + 1) % progress == 0:
            print(f"stage1 iter {it + 1}/{config.iterations} loss {float(total.data):.4f}", flush=True)
    return params, history


# -- stage 2 ---------------------------------------------------------------

def _precompute_guidance(restore_params, model_config, pair):
    """Run the frozen restoration once per clip; Er is a fixed input after."""
    out = restore_events(restore_params, model_config, pair.voxels_low.values.astype(
        restore_params[f"{RESTORE_PREFIX}.enc1.weight"].dtype))
    er = out.restored.data
    h, w = pair.gt.resolution
    grid = VoxelGrid(values=er.astype(np.float64), n_bins=model_config.n_frames,
                     t0=pair.voxels_low.t0, tn=pair.voxels_low.tn)
    mask = egdb_mask(grid, (h, w))
    return er, mask


def train_stage2(dataset, stage1_params, model_config, config, dtype=np.float32,
                 event_guidance=True, progress=None):
    """Freeze the restoration network and train fusion plus enhancement.

    The reference (center) frame of each clip is enhanced toward its
    normal-light twin. Returns (params, history) with rows
    (iteration, l1, l_feat, total).
    """
    if not dataset:
        raise ValueError("empty dataset")
    if stage1_params is None:
        raise ValueError("stage-1 checkpoint required")
    rng = np.random.default_rng(config.seed)
    params = init_model_params(model_config, seed=config.seed, dtype=dtype)
    for name, t in stage1_params.items():
        if name.startswith(RESTORE_PREFIX):
            params[name].data = t.data.astype(dtype).copy()
    params.freeze(RESTORE_PREFIX)
    guidance = [_precompute_guidance(params, model_config, pair) for pair in dataset]
    center = model_config.n_frames // 2
    state = AdamState(lr=config.lr)
    extractor = default_extractor(dtype)
    history = []
    for it in range(config.iterations):
        total = None
        sum_l1 = sum_feat = 0.0
        for (idx, oy, ox, crop), count in _draw_batch(rng, dataset, config.batch_size, config.crop).items():
            pair = dataset[idx]
            er, mask = guidance[idx]
            low = pair.low.frames[center, oy : oy + crop, ox : ox + crop].transpose(2, 0, 1).astype(dtype)
            gt = pair.gt.frames[center, oy : oy + crop, ox : ox + crop].transpose(2, 0, 1).astype(dtype)
            er_crop = er[:, oy : oy + crop, ox : ox + crop]
            mask_crop = mask[oy : oy + crop, ox : ox + crop] if event_guidance else None
            pred = enhance_forward(params, model_config, low, er_crop, mask_crop, clamp_output=False)
            loss, l1, l_feat = loss_stage2(pred, gt, config.lambda2, extractor)
            weighted = loss * float(count)
            total = weighted if total is None else total + weighted
            sum_l1 += l1 * count
            sum_feat += l_feat * count
        total = total * (1.0 / config.batch_size)
        grads = backward(total, params)
        adam_step(params, grads, state)
        history.append((it, sum_l1 / config.batch_size, sum_feat / config.batch_size, float(total.data)))
        if progress and (it + 1) % progress == 0:
            print(f"stage2 iter {it + 1}/{config.iterations} loss {float(total.data):.4f}", flush=True)
    return params, history


def enhance_clip_center(params, model_config, pair, event_guidance=True):
    """Enhance a clip's center frame; returns (pred HxWx3, gt HxWx3)."""
    dtype = params[f"{ENHANCE_PREFIX}.enc_img.weight"].dtype
    er, mask = _precompute_guidance(params, model_config, pair)
    center = model_config.n_frames // 2
    low = pair.low.frames[center].transpose(2, 0, 1).astype(dtype)
    pred = enhance_forward(params, model_config, low, er,
                           mask if event_guidance else None, clamp_output=True)
    return pred.data.transpose(1, 2, 0), pair.gt.frames[center]


def save_checkpoint(path, params, model_config, train_config=None, history=None):
    """Checkpoint = tensor container + config snapshot + loss-history CSV."""
    from pathlib import Path

    from .io import write_checkpoint, write_config

    path = Path(path)
    write_checkpoint(path, {n: t.data for n, t in params.items()})
    snapshot = {f"model.{k}": v for k, v in model_config.to_dict().items()}
    if train_config is not None:
        snapshot.update({f"train.{k}": v for k, v in train_config.to_dict().items()})
    if params.frozen:
        snapshot["frozen"] = ",".join(sorted(params.frozen))
    write_config(path.with_suffix(path.suffix + ".config"), snapshot)
    if history is not None:
        stage = train_config.stage if train_config else 1
        path.with_suffix(path.suffix + ".losses.csv").write_text(history_csv(history, stage))


def load_checkpoint(path):
    """Returns (params, model_config). Frozen names are restored from the
    config sidecar when present."""
    from pathlib import Path

    from .io import read_checkpoint, read_config

    path = Path(path)
    arrays = read_checkpoint(path)
    params = ParamTree()
    for name, arr in arrays.items():
        params.add(name, arr)
    cfg_path = path.with_suffix(path.suffix + ".config")
    model_config = ModelConfig()
    if cfg_path.exists():
        cfg = read_config(cfg_path)
        model_kv = {k[len("model."):]: v for k, v in cfg.items() if k.startswith("model.")}
        if model_kv:
            model_config = ModelConfig.from_dict(model_kv)
        if "frozen" in cfg:
            params.frozen = set(cfg["frozen"].split(","))
    return params, model_config


def history_csv(history, stage):
    header = "iteration,l_m,l_v,total" if stage == 1 else "iteration,l1,l_feat,total"
    lines = [header]
    for row in history:
        lines.append(f"{row[0]},{row[1]:.6f},{row[2]:.6f},{row[3]:.6f}")
    return "\n".join(lines) + "\n"
