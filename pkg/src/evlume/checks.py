"""Self-contained verification suites: gradient checks for every primitive
and oracle checks for the voxelizer. Used by the `check` CLI command."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .events import EVENT_DTYPE, voxelize, voxelize_naive
from .networks import ModelConfig, enhance_forward, init_model_params
from .optim import ParamTree, finite_diff_check

GRAD_TOL = 1e-4


def _check(params_dict, fn, seed=0):
    params = ParamTree()
    for name, arr in params_dict.items():
        params.add(name, T.Tensor(np.asarray(arr, dtype=np.float64)))
    report = finite_diff_check(fn, params, eps=1e-5, seed=seed)
    worst = max(report.values())
    return worst


def _rand(rng, *shape):
    return rng.normal(0.0, 1.0, size=shape)


def grad_cases(rng):
    """Yield (name, params, fn) finite-difference cases for every primitive."""
    a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)

    yield "add", {"a": a, "b": b}, lambda p: T.mean((p["a"] + p["b"]) * (p["a"] + p["b"]))
    yield "sub", {"a": a, "b": b}, lambda p: T.mean((p["a"] - p["b"]) * (p["a"] - p["b"]))
    yield "mul", {"a": a, "b": b}, lambda p: T.mean(p["a"] * p["b"])
    yield "scalar_ops", {"a": a}, lambda p: T.mean(2.5 * p["a"] + 0.5 - p["a"] * 0.25)
    yield "matmul", {"a": _rand(rng, 3, 5), "b": _rand(rng, 5, 2)}, lambda p: T.mean(
        T.matmul(p["a"], p["b"])
    )
    yield "bmm", {"a": _rand(rng, 2, 3, 4), "b": _rand(rng, 2, 4, 3)}, lambda p: T.mean(
        T.bmm(p["a"], p["b"])
    )
    x, w, bias = _rand(rng, 3, 6, 6), _rand(rng, 4, 3, 3, 3) * 0.5, _rand(rng, 4) * 0.1
    yield "conv2d_stride1", {"x": x, "w": w, "b": bias}, lambda p: T.mean(
        T.sigmoid(T.conv2d(p["x"], p["w"], p["b"], stride=1))
    )
    yield "conv2d_stride2", {"x": x, "w": w, "b": bias}, lambda p: T.mean(
        T.sigmoid(T.conv2d(p["x"], p["w"], p["b"], stride=2))
    )
    yield "upsample_nearest", {"x": _rand(rng, 2, 3, 3)}, lambda p: T.mean(
        T.sigmoid(T.upsample_nearest(p["x"], 2))
    )
    yield "resize_bilinear", {"x": _rand(rng, 2, 4, 4)}, lambda p: T.mean(
        T.sigmoid(T.resize_bilinear(p["x"], (7, 5)))
    )
    yield "adaptive_pool_down", {"x": _rand(rng, 2, 8, 8)}, lambda p: T.mean(
        T.sigmoid(T.adaptive_avg_pool(p["x"], (4, 4)))
    )
    yield "adaptive_pool_up", {"x": _rand(rng, 2, 4, 4)}, lambda p: T.mean(
        T.sigmoid(T.adaptive_avg_pool(p["x"], (8, 8)))
    )
    yield "adaptive_pool_general", {"x": _rand(rng, 2, 6, 7)}, lambda p: T.mean(
        T.sigmoid(T.adaptive_avg_pool(p["x"], (4, 5)))
    )
    yield "relu", {"x": _rand(rng, 4, 4) + 0.05}, lambda p: T.mean(T.relu(p["x"]))
    yield "sigmoid", {"x": _rand(rng, 4, 4)}, lambda p: T.mean(T.sigmoid(p["x"]) * T.sigmoid(p["x"]))
    sm_weights = T.constant(_rand(rng, 3, 5))
    yield "softmax", {"x": _rand(rng, 3, 5)}, lambda p: T.mean(
        T.softmax(p["x"], axis=1) * sm_weights
    )
    g, bb = np.ones(6), np.zeros(6)
    ln_weights = T.constant(_rand(rng, 4, 6))
    yield "layer_norm", {"x": _rand(rng, 4, 6), "g": g, "b": bb}, lambda p: T.mean(
        T.layer_norm(p["x"], p["g"], p["b"]) * ln_weights
    )
    yield "concat", {"a": _rand(rng, 2, 3, 3), "b": _rand(rng, 3, 3, 3)}, lambda p: T.mean(
        T.sigmoid(T.concat([p["a"], p["b"]], axis=0))
    )
    yield "slice_axis", {"x": _rand(rng, 5, 3, 3)}, lambda p: T.mean(
        T.sigmoid(T.slice_axis(p["x"], 0, 1, 4))
    )
    yield "reshape_transpose", {"x": _rand(rng, 2, 3, 4)}, lambda p: T.mean(
        T.sigmoid(T.reshape(T.transpose(p["x"], (2, 0, 1)), (4, 6)))
    )
    yield "mean", {"x": _rand(rng, 3, 3)}, lambda p: T.mean(p["x"] * p["x"])
    yield "l1_loss", {"a": a, "b": b}, lambda p: T.l1_loss(p["a"], p["b"])
    target = (rng.random((3, 4)) > 0.5).astype(np.float64)
    probs = rng.uniform(0.1, 0.9, size=(3, 4))
    yield "bce_loss", {"p": probs}, lambda p: T.bce_loss(T.sigmoid(p["p"]), T.constant(target))
    yield "clamp", {"x": _rand(rng, 4, 4) * 0.3}, lambda p: T.mean(
        T.clamp(p["x"], -0.5, 0.5) * T.clamp(p["x"], -0.5, 0.5)
    )
    # 3-layer conv-sigmoid chain on a 4x4 input
    chain = {
        "x": _rand(rng, 2, 4, 4),
        "w1": _rand(rng, 3, 2, 3, 3) * 0.5,
        "w2": _rand(rng, 3, 3, 3, 3) * 0.5,
        "w3": _rand(rng, 1, 3, 3, 3) * 0.5,
    }

    def chain_fn(p):
        h = T.sigmoid(T.conv2d(p["x"], p["w1"], None))
        h = T.sigmoid(T.conv2d(h, p["w2"], None))
        return T.mean(T.sigmoid(T.conv2d(h, p["w3"], None)))

    yield "conv_sigmoid_chain", chain, chain_fn


def run_grad_suite(tol=GRAD_TOL, seed=0, include_full_forward=True):
    """Run all primitive checks plus the full enhance forward pass.

    Returns a list of (name, passed, worst_rel_error) tuples.
    """
    rng = np.random.default_rng(seed)
    results = []
    for name, arrays, fn in grad_cases(rng):
        worst = _check(arrays, fn, seed=seed)
        results.append((name, worst < tol, worst))
    if include_full_forward:
        worst = full_forward_grad_check(seed=seed)
        results.append(("enhance_forward", worst < tol, worst))
    return results


def full_forward_grad_check(seed=0, max_samples=8):
    """Finite-difference check of the assembled enhancement forward pass at
    C=2, H=W=8, N=2 in double precision."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(channels=2, eift_modules=1, heads=2, patch=8, n_frames=2)
    params = init_model_params(cfg, seed=seed, dtype=np.float64)
    # scale weights up and randomize biases so no ReLU pre-activation sits
    # exactly on its kink (zero biases + masked-out zeros would)
    for _, t in params.items():
        if t.data.ndim > 1:
            t.data = t.data * 10.0
        else:
            t.data = t.data + rng.normal(0.0, 0.1, size=t.data.shape)
    low = rng.uniform(0.0, 1.0, size=(3, 8, 8))
    er = rng.uniform(0.0, 1.0, size=(cfg.depth, 8, 8))
    mask = (rng.random((8, 8)) > 0.5).astype(np.float64)
    target = rng.uniform(0.0, 1.0, size=(3, 8, 8))

    def fn(p):
        pred = enhance_forward(p, cfg, low, er, mask, clamp_output=False)
        return T.l1_loss(pred, T.constant(target))

    report = finite_diff_check(fn, params, eps=1e-5, max_samples=max_samples, seed=seed)
    return max(report.values())


# -- voxel suite -----------------------------------------------------------

def random_event_stream(rng, height, width, t0, tn, max_events=500):
    n = int(rng.integers(0, max_events + 1))
    ev = np.empty(n, dtype=EVENT_DTYPE)
    ev["x"] = rng.integers(0, width, size=n)
    ev["y"] = rng.integers(0, height, size=n)
    ev["t"] = rng.uniform(t0, tn, size=n)
    ev["c"] = rng.integers(0, 3, size=n)
    ev["p"] = rng.choice([-1, 1], size=n)
    return ev


def run_voxel_suite(n_streams=1000, seed=0, tol=1e-9):
    """Voxelizer vs. the naive accumulator, mass conservation, linearity.

    Returns a list of (name, passed, detail) tuples.
    """
    rng = np.random.default_rng(seed)
    oracle_ok = True
    mass_ok = True
    linear_ok = True
    worst_mass = 0.0
    worst_linear = 0.0
    for _ in range(n_streams):
        n_bins = int(rng.integers(2, 6))
        h, w = int(rng.integers(4, 17)), int(rng.integers(4, 17))
        t0, tn = 0.0, float(rng.uniform(1.0, 10.0))
        ev = random_event_stream(rng, h, w, t0, tn, max_events=500)
        grid = voxelize(ev, n_bins, h, w, t0, tn)
        naive = voxelize_naive(ev, n_bins, h, w, t0, tn)
        if not np.array_equal(grid.values, naive.values):
            oracle_ok = False
        # mass conservation: per-event kernel weights sum to 1
        total = grid.values.sum()
        if abs(total - ev.size) > tol * max(1.0, ev.size):
            mass_ok = False
            worst_mass = max(worst_mass, abs(total - ev.size))
        # linearity: voxelize(A) + voxelize(B) == voxelize(A u B)
        half = ev.size // 2
        va = voxelize(ev[:half], n_bins, h, w, t0, tn).values
        vb = voxelize(ev[half:], n_bins, h, w, t0, tn).values
        err = np.abs(va + vb - grid.values).max() if ev.size else 0.0
        if err > tol:
            linear_ok = False
            worst_linear = max(worst_linear, err)
    return [
        ("voxelize_vs_naive_oracle", oracle_ok, "bit-exact" if oracle_ok else "mismatch"),
        ("voxel_mass_conservation", mass_ok, f"worst abs dev {worst_mass:.2e}"),
        ("voxel_linearity", linear_ok, f"worst abs dev {worst_linear:.2e}"),
    ]
