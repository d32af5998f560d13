"""Network modules: event restoration, mutual-attention fusion, dual-branch
enhancement, and the assembled forward pass.

All forwards are pure functions of (params, config, inputs); parameters live
in a ParamTree under the prefixes "restore." and "enhance.".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .optim import ParamTree
from .tensor import ContractError, Tensor

RESTORE_PREFIX = "restore"
ENHANCE_PREFIX = "enhance"

INIT_STD = 0.02


@dataclass
class ModelConfig:
    channels: int = 16  # base channel count C
    eift_modules: int = 2
    heads: int = 4
    patch: int = 8  # patch size on the pooled grid
    n_frames: int = 5
    pool_grid: int = 32
    ffn_expand: int = 4

    def __post_init__(self):
        if self.pool_grid % self.patch != 0:
            raise ContractError("pool grid must be divisible by the patch size")
        if (2 * self.channels) % self.heads != 0:
            raise ContractError("embed dimension 2C must be divisible by the head count")

    @property
    def depth(self):
        """Voxel depth B = 2 * N * 3."""
        return 2 * self.n_frames * 3

    @property
    def n_patches(self):
        return (self.pool_grid // self.patch) ** 2

    def to_dict(self):
        return {
            "channels": self.channels,
            "eift_modules": self.eift_modules,
            "heads": self.heads,
            "patch": self.patch,
            "n_frames": self.n_frames,
            "pool_grid": self.pool_grid,
            "ffn_expand": self.ffn_expand,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass
class RestorationOutput:
    probability: Tensor  # P, sigmoid activated, (B,H,W)
    voxels: Tensor  # V, (B,H,W)
    restored: Tensor  # Er = (P >= 0.5) * V, gate treated as a constant


# -- parameter construction ------------------------------------------------

def _conv_init(params, name, c_in, c_out, k, rng, dtype):
    params.add(f"{name}.weight", Tensor(rng.normal(0.0, INIT_STD, size=(c_out, c_in, k, k)).astype(dtype)))
    params.add(f"{name}.bias", Tensor(np.zeros(c_out, dtype=dtype)))


def _linear_init(params, name, d_in, d_out, rng, dtype):
    params.add(f"{name}.weight", Tensor(rng.normal(0.0, INIT_STD, size=(d_in, d_out)).astype(dtype)))
    params.add(f"{name}.bias", Tensor(np.zeros(d_out, dtype=dtype)))


def _norm_init(params, name, dim, dtype):
    params.add(f"{name}.gain", Tensor(np.ones(dim, dtype=dtype)))
    params.add(f"{name}.bias", Tensor(np.zeros(dim, dtype=dtype)))


def init_restoration_params(config, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    params = ParamTree()
    add_restoration_params(params, config, rng, dtype)
    return params


def add_restoration_params(params, config, rng, dtype):
    c = config.channels
    b = config.depth
    p = RESTORE_PREFIX
    _conv_init(params, f"{p}.enc1", b, c, 3, rng, dtype)
    _conv_init(params, f"{p}.enc2", c, 2 * c, 3, rng, dtype)
    _conv_init(params, f"{p}.enc3", 2 * c, 2 * c, 3, rng, dtype)
    for i in (1, 2):
        _conv_init(params, f"{p}.res{i}.conv1", 2 * c, 2 * c, 3, rng, dtype)
        _conv_init(params, f"{p}.res{i}.conv2", 2 * c, 2 * c, 3, rng, dtype)
    _conv_init(params, f"{p}.dec1", 2 * c, c, 3, rng, dtype)
    _conv_init(params, f"{p}.dec2", c, c, 3, rng, dtype)
    _conv_init(params, f"{p}.head_p", c, b, 3, rng, dtype)
    _conv_init(params, f"{p}.head_v", c, b, 3, rng, dtype)


def init_model_params(config, seed=0, dtype=np.float64):
    """Full parameter tree: restoration plus fusion/enhancement networks."""
    rng = np.random.default_rng(seed)
    params = ParamTree()
    add_restoration_params(params, config, rng, dtype)
    c = config.channels
    e = ENHANCE_PREFIX
    _conv_init(params, f"{e}.enc_img", 3, c, 3, rng, dtype)
    _conv_init(params, f"{e}.enc_ev", config.depth, c, 3, rng, dtype)
    for m in range(config.eift_modules):
        for blk in ("b1", "b2"):
            pre = f"{e}.eift{m}.{blk}"
            _conv_init(params, f"{pre}.f1", c, c, 1, rng, dtype)
            _conv_init(params, f"{pre}.f2", c, c, 3, rng, dtype)
            _conv_init(params, f"{pre}.f3", c, c, 1, rng, dtype)
            _conv_init(params, f"{pre}.f4", c, c, 1, rng, dtype)
            _conv_init(params, f"{pre}.f5", c, c, 3, rng, dtype)
            _conv_init(params, f"{pre}.f6", c, c, 1, rng, dtype)
    d = 2 * c
    g = f"{e}.egdb.global"
    _norm_init(params, f"{g}.norm1", d, dtype)
    _linear_init(params, f"{g}.wq", d, d, rng, dtype)
    _linear_init(params, f"{g}.wk", d, d, rng, dtype)
    _linear_init(params, f"{g}.wv", d, d, rng, dtype)
    _linear_init(params, f"{g}.wo", d, d, rng, dtype)
    _norm_init(params, f"{g}.norm2", d, dtype)
    _linear_init(params, f"{g}.ffn1", d, config.ffn_expand * d, rng, dtype)
    _linear_init(params, f"{g}.ffn2", config.ffn_expand * d, d, rng, dtype)
    for i in (1, 2):
        _conv_init(params, f"{e}.egdb.local.res{i}.conv1", c, c, 3, rng, dtype)
        _conv_init(params, f"{e}.egdb.local.res{i}.conv2", c, c, 3, rng, dtype)
    for i in (1, 2):
        _conv_init(params, f"{e}.dec.res{i}.conv1", d, d, 3, rng, dtype)
        _conv_init(params, f"{e}.dec.res{i}.conv2", d, d, 3, rng, dtype)
    _conv_init(params, f"{e}.dec.out", d, 3, 3, rng, dtype)
    return params


# -- building blocks -------------------------------------------------------

def _conv(params, name, x, stride=1):
    return T.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride)


def _residual_block(params, name, x):
    h = T.relu(_conv(params, f"{name}.conv1", x))
    return _conv(params, f"{name}.conv2", h) + x


def _linear(params, name, x):
    return T.matmul(x, params[f"{name}.weight"]) + params[f"{name}.bias"]


def _as_input(x, dtype):
    if isinstance(x, Tensor):
        return x
    return T.constant(np.asarray(x, dtype=dtype))


def restore_events(params, config, voxels):
    """Dual-head restoration: encoder to quarter resolution, two residual
    blocks, decoder back up; P gates V into the restored grid (P >= 0.5)."""
    dtype = params[f"{RESTORE_PREFIX}.enc1.weight"].dtype
    x = _as_input(voxels, dtype)
    b, h, w = x.shape
    if b != config.depth:
        raise ContractError(f"voxel depth {b} != configured {config.depth}")
    if h % 4 or w % 4:
        raise ContractError(f"H and W must be divisible by 4, got {h}x{w}")
    p = RESTORE_PREFIX
    f = T.relu(_conv(params, f"{p}.enc1", x))
    f = T.relu(_conv(params, f"{p}.enc2", f, stride=2))
    f = T.relu(_conv(params, f"{p}.enc3", f, stride=2))
    f = _residual_block(params, f"{p}.res1", f)
    f = _residual_block(params, f"{p}.res2", f)
    f = T.relu(_conv(params, f"{p}.dec1", T.upsample_nearest(f, 2)))
    f = T.relu(_conv(params, f"{p}.dec2", T.upsample_nearest(f, 2)))
    prob = T.sigmoid(_conv(params, f"{p}.head_p", f))
    vox = _conv(params, f"{p}.head_v", f)
    gate = T.constant((prob.data >= 0.5).astype(dtype))
    restored = gate * vox
    return RestorationOutput(probability=prob, voxels=vox, restored=restored)


def cct(params, prefix, main, mod_feat):
    """Cross-channel transform: a C x C softmax map from the modulation
    feature reweights the main feature's channels."""
    if main.shape != mod_feat.shape:
        raise ContractError(f"cct shape mismatch: {main.shape} vs {mod_feat.shape}")
    c, h, w = main.shape
    t = T.relu(_conv(params, f"{prefix}.f2", mod_feat))
    q = T.transpose(T.reshape(_conv(params, f"{prefix}.f3", t), (c, h * w)), (1, 0))  # HW x C
    k = T.reshape(_conv(params, f"{prefix}.f4", t), (c, h * w))  # C x HW
    channel_map = T.softmax(T.matmul(k, q), axis=1)  # C x C, rows sum to 1
    main_flat = T.transpose(T.reshape(_conv(params, f"{prefix}.f1", main), (c, h * w)), (1, 0))
    x = T.matmul(main_flat, channel_map)  # HW x C
    return T.reshape(T.transpose(x, (1, 0)), (c, h, w))


def ewp(params, prefix, x, mod_feat):
    """Element-wise product: sigmoid spatial gate on x times the projected
    modulation feature."""
    if x.shape != mod_feat.shape:
        raise ContractError(f"ewp shape mismatch: {x.shape} vs {mod_feat.shape}")
    t = T.relu(_conv(params, f"{prefix}.f2", mod_feat))
    gate = T.sigmoid(_conv(params, f"{prefix}.f5", x))
    return gate * _conv(params, f"{prefix}.f6", t)


def _eift_block(params, prefix, main, mod_feat):
    x = cct(params, prefix, main, mod_feat)
    fused = ewp(params, prefix, x, mod_feat)
    return fused + main  # residual to the block's main input


def eift_module(params, prefix, feat_event, feat_image):
    """Two blocks with swapped roles: first the event feature is refined with
    the image as modulation, then vice versa on the post-residual outputs."""
    feat_event = _eift_block(params, f"{prefix}.b1", feat_event, feat_image)
    feat_image = _eift_block(params, f"{prefix}.b2", feat_image, feat_event)
    return feat_event, feat_image


def _partition_patches(x, grid, patch):
    """(D, G, G) pooled map -> (m, patch^2, D) token batches."""
    d = x.shape[0]
    g = grid // patch
    x = T.reshape(x, (d, g, patch, g, patch))
    x = T.transpose(x, (1, 3, 2, 4, 0))  # (g, g, p, p, D)
    return T.reshape(x, (g * g, patch * patch, d))


def _merge_patches(tokens, grid, patch, d):
    g = grid // patch
    x = T.reshape(tokens, (g, g, patch, patch, d))
    x = T.transpose(x, (4, 0, 2, 1, 3))  # (D, g, p, g, p)
    return T.reshape(x, (d, grid, grid))


def _mha(params, prefix, tokens, heads):
    """Multi-head self-attention over each patch's tokens independently."""
    m, t, d = tokens.shape
    dh = d // heads
    flat = T.reshape(tokens, (m * t, d))
    q = T.reshape(_linear(params, f"{prefix}.wq", flat), (m, t, heads, dh))
    k = T.reshape(_linear(params, f"{prefix}.wk", flat), (m, t, heads, dh))
    v = T.reshape(_linear(params, f"{prefix}.wv", flat), (m, t, heads, dh))
    q = T.reshape(T.transpose(q, (0, 2, 1, 3)), (m * heads, t, dh))
    k = T.reshape(T.transpose(k, (0, 2, 1, 3)), (m * heads, t, dh))
    v = T.reshape(T.transpose(v, (0, 2, 1, 3)), (m * heads, t, dh))
    scores = T.bmm(q, T.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=2)
    ctx = T.bmm(attn, v)  # (m*heads, t, dh)
    ctx = T.transpose(T.reshape(ctx, (m, heads, t, dh)), (0, 2, 1, 3))
    out = _linear(params, f"{prefix}.wo", T.reshape(ctx, (m * t, d)))
    return T.reshape(out, (m, t, d))


def _global_branch(params, prefix, feat_event, feat_masked_img, config, out_res):
    d = 2 * config.channels
    grid = config.pool_grid
    x = T.concat([feat_event, feat_masked_img], axis=0)
    pooled = T.adaptive_avg_pool(x, (grid, grid))
    tokens = _partition_patches(pooled, grid, config.patch)
    normed = T.layer_norm(tokens, params[f"{prefix}.norm1.gain"], params[f"{prefix}.norm1.bias"])
    tokens = _mha(params, prefix, normed, config.heads) + tokens
    normed = T.layer_norm(tokens, params[f"{prefix}.norm2.gain"], params[f"{prefix}.norm2.bias"])
    m, t, _ = tokens.shape
    h1 = T.relu(_linear(params, f"{prefix}.ffn1", T.reshape(normed, (m * t, d))))
    ffn_out = T.reshape(_linear(params, f"{prefix}.ffn2", h1), (m, t, d))
    tokens = ffn_out + tokens
    merged = _merge_patches(tokens, grid, config.patch, d)
    full = T.resize_bilinear(merged, out_res)
    return T.slice_axis(full, 0, 0, config.channels)


def egdb(params, config, feat_event, feat_image, mask):
    """Event-guided dual branch.

    Global branch sees the events plus the image outside the mask through a
    patch transformer; the local branch refines the masked image with two
    residual blocks. `mask` is an (H,W) binary map, or None to disable the
    guidance (both branches then see the full image feature).
    """
    c, h, w = feat_image.shape
    prefix = f"{ENHANCE_PREFIX}.egdb"
    if mask is None:
        img_global = feat_image
        img_local = feat_image
    else:
        mask = np.asarray(mask)
        if mask.shape != (h, w):
            raise ContractError(f"mask shape {mask.shape} != feature resolution {(h, w)}")
        m = T.constant(mask.astype(feat_image.dtype)[None, :, :])
        img_global = (1.0 - m) * feat_image
        img_local = m * feat_image
    f_g = _global_branch(params, f"{prefix}.global", feat_event, img_global, config, (h, w))
    f_l = _residual_block(params, f"{prefix}.local.res1", img_local)
    f_l = _residual_block(params, f"{prefix}.local.res2", f_l)
    return T.concat([f_g, f_l], axis=0)


def enhance_forward(params, config, low_frame, restored_voxels, mask, clamp_output=True):
    """Full enhancement pass on one reference frame.

    low_frame: (H,W,3) or (3,H,W); restored_voxels: (B,H,W); mask: (H,W)
    binary guidance or None for the no-guidance ablation. Returns a (3,H,W)
    Tensor, clamped to [0,1] unless training needs the raw output.
    """
    dtype = params[f"{ENHANCE_PREFIX}.enc_img.weight"].dtype
    frame = np.asarray(low_frame)
    if frame.ndim == 3 and frame.shape[2] == 3:
        frame = frame.transpose(2, 0, 1)
    img = _as_input(frame, dtype)
    ev = _as_input(restored_voxels, dtype)
    e = ENHANCE_PREFIX
    feat_image = _conv(params, f"{e}.enc_img", img)
    feat_event = _conv(params, f"{e}.enc_ev", ev)
    for m in range(config.eift_modules):
        feat_event, feat_image = eift_module(params, f"{e}.eift{m}", feat_event, feat_image)
    fused = egdb(params, config, feat_event, feat_image, mask)
    out = _residual_block(params, f"{e}.dec.res1", fused)
    out = _residual_block(params, f"{e}.dec.res2", out)
    out = _conv(params, f"{e}.dec.out", out)
    if clamp_output:
        out = T.clamp(out, 0.0, 1.0)
    return out


def enhance(params, config, low_frame, restored_grid, guidance_threshold=0.9):
    """Inference wrapper: derives the guidance mask from the restored voxels
    and returns the enhanced frame as an (H,W,3) float array in [0,1]."""
    from .events import egdb_mask

    frame = np.asarray(low_frame)
    h, w = frame.shape[:2] if frame.shape[-1] == 3 else frame.shape[1:]
    grid = restored_grid
    mask = egdb_mask(grid, (h, w), threshold=guidance_threshold)
    out = enhance_forward(params, config, frame, grid.values, mask, clamp_output=True)
    return out.data.transpose(1, 2, 0), mask
