"""Finite-difference verification of every differentiable operation.

The checker perturbs each input element by +-h (central differences, h=1e-5,
float64) and compares against the analytic gradient from ``backward``. The
finite-difference side never touches the backward rules, so it stays an
independent oracle. ``run_suite`` drives one registered case per op and is
what the ``gradcheck`` CLI command prints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .rng import stream

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4


def numerical_gradient(fn, arrays, h=DEFAULT_STEP):
    """Central-difference gradients of scalar ``fn(arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(arrays)
            flat[i] = orig - h
            fm = fn(arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    """Max abs difference over the larger gradient magnitude (floored)."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-6)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(build_loss, arrays, h=DEFAULT_STEP):
    """Compare analytic vs central-difference gradients.

    ``build_loss(tensors)`` must construct a scalar loss Tensor from leaf
    tensors wrapping ``arrays``. Returns the max relative error over all
    inputs.
    """
    leaves = [tensor.Tensor(a, requires_grad=True) for a in arrays]
    loss = build_loss(leaves)
    tensor.backward(loss)
    analytic = [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]

    def value(arrs):
        ts = [tensor.Tensor(a) for a in arrs]
        return float(build_loss(ts).data)

    numeric = numerical_gradient(value, [a.copy() for a in arrays], h=h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


# ---------------------------------------------------------------------------
# registered cases


@dataclass
class CaseResult:
    name: str
    max_rel_err: float
    passed: bool


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _probs(rng, *shape):
    z = rng.standard_normal(shape)
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def integrity_fd_margin(p, radius=1):
    """Distance of an instance from the penalty's non-smooth set.

    Central differences are only valid when no compared background/foreground
    pair (and no foreground argmax race) sits within the FD step of a kink;
    instances are resampled until this margin clears the step size.
    """
    bg = p[0]
    fg = p[1:]
    fg_sorted = np.sort(fg, axis=0)
    fg_max = fg_sorted[-1]
    margin = np.inf
    if fg.shape[0] > 1:
        margin = float(np.abs(fg_sorted[-1] - fg_sorted[-2]).min())
    shape = bg.shape
    for dz in range(-radius, radius + 1):
        for dy in range(-radius, radius + 1):
            for dx in range(-radius, radius + 1):
                lo = [max(0, -d) for d in (dz, dy, dx)]
                hi = [s - max(0, d) for s, d in zip(shape, (dz, dy, dx))]
                ctr = tuple(slice(l, h) for l, h in zip(lo, hi))
                sft = tuple(slice(l + d, h + d) for l, h, d in zip(lo, hi, (dz, dy, dx)))
                margin = min(margin, float(np.abs(bg[sft] - fg_max[ctr]).min()))
    return margin


def fd_safe_probs(rng, c, s, radius=1, margin=1e-4, attempts=50):
    """Random probability maps safely away from the integrity-penalty kinks."""
    for _ in range(attempts):
        p = _probs(rng, c, s, s, s)
        if integrity_fd_margin(p, radius) > margin:
            return p
    raise RuntimeError("could not sample an FD-safe probability map")


def _onehot(rng, c, *spatial):
    lab = rng.integers(0, c, size=spatial)
    return np.moveaxis(np.eye(c)[lab], -1, 0).astype(np.float64)


def _op_cases(rng):
    x = _rand(rng, 2, 4, 4, 4)
    k = _rand(rng, 3, 2, 3, 3, 3) * 0.5
    b = _rand(rng, 3) * 0.1
    yield "conv3d", [x, k, b], lambda t: tensor.reduce_sum(
        tensor.conv3d(t[0], t[1], t[2], stride=1, padding=1))
    xs = _rand(rng, 2, 5, 5, 5)
    ks = _rand(rng, 3, 2, 3, 3, 3) * 0.5
    yield "conv3d_stride2", [xs, ks, _rand(rng, 3) * 0.1], lambda t: tensor.reduce_sum(
        tensor.conv3d(t[0], t[1], t[2], stride=2, padding=1))
    r = _rand(rng, 3, 3, 3) + np.where(_rand(rng, 3, 3, 3) > 0, 0.2, -0.2)  # keep off 0
    yield "relu", [r], lambda t: tensor.reduce_sum(tensor.relu(t[0]))
    a, b2 = _rand(rng, 2, 3, 3, 3), _rand(rng, 2, 3, 3, 3)
    yield "add", [a, b2], lambda t: tensor.reduce_sum(tensor.add(t[0], t[1]))
    yield "mul", [a.copy(), b2.copy()], lambda t: tensor.reduce_sum(tensor.mul(t[0], t[1]))
    g, be = _rand(rng, 2), _rand(rng, 2)
    yield "scalar_affine", [a.copy(), g, be], lambda t: tensor.reduce_sum(
        tensor.scalar_affine(t[0], t[1], t[2]))
    lg = _rand(rng, 3, 3, 3, 3)
    w = _rand(rng, 3, 3, 3, 3)
    yield "softmax_channels", [lg], lambda t, w=w: tensor.reduce_sum(
        tensor.mul(tensor.softmax_channels(t[0]), tensor.Tensor(w)))
    # pooled windows perturbed by +-h must keep their argmax: use spread values
    mp = rng.permutation(2 * 4 * 4 * 4).astype(np.float64).reshape(2, 4, 4, 4)
    yield "maxpool2", [mp], lambda t: tensor.reduce_sum(tensor.maxpool2(t[0]))
    yield "upsample2_nearest", [_rand(rng, 2, 2, 2, 2)], lambda t: tensor.reduce_sum(
        tensor.mul(u := tensor.upsample2_nearest(t[0]), u))
    yield "global_avg_pool", [_rand(rng, 3, 2, 2, 2)], lambda t: tensor.reduce_sum(
        tensor.mul(p := tensor.global_avg_pool(t[0]), p))
    xv, wl, bl = _rand(rng, 4), _rand(rng, 3, 4), _rand(rng, 3)
    yield "linear", [xv, wl, bl], lambda t: tensor.reduce_sum(
        tensor.mul(y := tensor.linear(t[0], t[1], t[2]), y))
    c1, c2 = _rand(rng, 1, 2, 2, 2), _rand(rng, 2, 2, 2, 2)
    yield "concat_channels", [c1, c2], lambda t: tensor.reduce_sum(
        tensor.mul(c := tensor.concat_channels([t[0], t[1]]), c))
    yield "reduce_mean", [_rand(rng, 3, 2, 2, 2)], lambda t: tensor.reduce_mean(
        tensor.mul(t[0], t[0]))


def _loss_cases(rng):
    from . import losses, network

    c, s = 3, 4
    p = _probs(rng, c, s, s, s)
    y = _onehot(rng, c, s, s, s)
    yield "dice_consistency", [p], lambda t, y=y: losses.dice_consistency(
        t[0], tensor.Tensor(y), eps=1e-5)
    p2 = fd_safe_probs(rng, c, s)
    yield "integrity_penalty", [p2], lambda t: losses.integrity_penalty(t[0], radius=1)
    # keep the argmax structure stable under +-h perturbations
    p3 = _sharpened_probs(rng, c, s)
    yield "connectivity_penalty", [p3], lambda t: losses.connectivity_penalty(t[0])
    z = _rand(rng, c, s, s, s)
    yield "cross_entropy_logits", [z], lambda t, y=y: losses.cross_entropy_logits(
        t[0], tensor.Tensor(y))
    w = losses.LossWeights()
    zc, zi, zn = _rand(rng, c, s, s, s), _rand(rng, c, s, s, s), _sharp_logits(rng, c, s)

    def mh(t, y=y, w=w):
        out = network.ForwardOutput(csh_logits=t[0], ih_logits=t[1], cnh_logits=t[2], style=None)
        total, _ = losses.multi_head_loss(out, tensor.Tensor(y), w)
        return total

    yield "multi_head_loss", [zc, zi, zn], mh


def _sharp_logits(rng, c, s):
    lab = rng.integers(0, c, size=(s, s, s))
    z = np.moveaxis(np.eye(c)[lab], -1, 0) * 6.0
    return z + 0.1 * rng.standard_normal((c, s, s, s))


def _sharpened_probs(rng, c, s):
    z = tensor.Tensor(_sharp_logits(rng, c, s))
    return tensor.softmax_channels(z).data


def _network_case(rng):
    from . import losses, network

    cfg = network.NetConfig(in_channels=2, class_count=3, base_channels=2, depth=2)
    state = network.init_model(cfg, stream(7, "gradcheck/net"))
    names = sorted(state.params)
    arrays = [state.params[n].data.copy() for n in names]
    x = rng.standard_normal((2, 4, 4, 4))
    y = _onehot(rng, 3, 4, 4, 4)
    weights = losses.LossWeights()

    def build(ts):
        st = network.ModelState(cfg, dict(zip(names, ts)))
        out = network.forward(tensor.Tensor(x), st)
        total, _ = losses.multi_head_loss(out, tensor.Tensor(y), weights)
        return total

    return "network_end_to_end", arrays, build


def run_suite(scope="all", seed=20240, instances=1, tolerance=DEFAULT_TOLERANCE):
    """Gradient-check every registered differentiable component.

    Returns a list of CaseResult rows (max relative error across
    ``instances`` random instances per component).
    """
    results = {}
    for inst in range(instances):
        rng = stream(seed, f"gradcheck/{inst}")
        cases = []
        if scope in ("all", "ops"):
            cases.extend(_op_cases(rng))
        if scope in ("all", "losses"):
            cases.extend(_loss_cases(rng))
        if scope in ("all", "network") and inst == 0:
            cases.append(_network_case(rng))
        for name, arrays, build in cases:
            err = check_gradients(build, arrays)
            results[name] = max(err, results.get(name, 0.0))
    return [CaseResult(name, err, err < tolerance) for name, err in results.items()]
