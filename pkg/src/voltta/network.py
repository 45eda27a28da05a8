"""Miniature 3D U-Net with a style encoder, per-decoder-block feature
modulation, and three parallel 1x1x1 segmentation heads.

The style encoder compresses the input to a low-dimensional style vector;
two linear maps per decoder block turn it into per-channel scale/shift
(gamma/beta) applied to the block's features post-convolution,
pre-activation. At initialization the modulation weights are zero with
gamma bias 1 and beta bias 0, so a fresh modulation is the exact identity.

During target adaptation only the style encoder, the modulation linears,
and the heads are trainable; the trunk convolutions stay frozen.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor
from .tensor import ShapeError, Tensor
from .volume import Volume

CHECKPOINT_MAGIC = b"SCKP1\x00"
CHECKPOINT_VERSION = 1

TARGET_ADAPT_PREFIXES = ("style.", "mod", "head_")
HEAD_NAMES = ("csh", "ih", "cnh")


@dataclass
class NetConfig:
    in_channels: int = 4
    class_count: int = 4
    base_channels: int = 8
    depth: int = 2
    style_dim: int = 2

    @classmethod
    def from_config(cls, cfg):
        return cls(**cfg)


@dataclass
class ForwardOutput:
    csh_logits: Tensor
    ih_logits: Tensor
    cnh_logits: Tensor
    style: Tensor


@dataclass
class ModelState:
    config: NetConfig
    params: dict  # name -> leaf Tensor

    def clone(self, requires_grad=False):
        cloned = {name: Tensor(p.data.copy(), requires_grad=requires_grad)
                  for name, p in self.params.items()}
        return ModelState(self.config, cloned)

    def set_requires_grad(self, names):
        """Enable gradients exactly for ``names``; everything else frozen."""
        names = set(names)
        for name, p in self.params.items():
            p.requires_grad = name in names

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# initialization


def _conv_param(rng, c_out, c_in, k):
    std = np.sqrt(2.0 / (c_in * k ** 3))
    return rng.standard_normal((c_out, c_in, k, k, k)) * std


def init_model(config: NetConfig, rng):
    """Fresh parameters: He-init convolutions, identity modulation."""
    b = config.base_channels
    params = {}

    def conv(name, c_out, c_in, k=3):
        params[f"{name}.w"] = Tensor(_conv_param(rng, c_out, c_in, k))
        params[f"{name}.b"] = Tensor(np.zeros(c_out))

    conv("enc0", b, config.in_channels)
    for i in range(1, config.depth + 1):
        conv(f"enc{i}", b * 2 ** i, b * 2 ** (i - 1))
    for i in range(config.depth, 0, -1):
        c_out = b * 2 ** (i - 1)
        conv(f"dec{i}", c_out, b * 2 ** i + c_out)
        for role, bias in (("gamma", 1.0), ("beta", 0.0)):
            params[f"mod{i}.{role}.w"] = Tensor(np.zeros((c_out, config.style_dim)))
            params[f"mod{i}.{role}.b"] = Tensor(np.full(c_out, bias))
    conv("style.conv1", b, config.in_channels)
    conv("style.conv2", b, b)
    std = np.sqrt(1.0 / b)
    params["style.fc.w"] = Tensor(rng.standard_normal((config.style_dim, b)) * std)
    params["style.fc.b"] = Tensor(np.zeros(config.style_dim))
    for head in HEAD_NAMES:
        conv(f"head_{head}", config.class_count, b, k=1)
    return ModelState(config, params)


def trainable_mask(state: ModelState, phase):
    """Parameter names trained in a phase; trunk convs are frozen at adapt."""
    if phase == "source_pretrain":
        return set(state.params)
    if phase == "target_adapt":
        return {n for n in state.params if n.startswith(TARGET_ADAPT_PREFIXES)}
    raise ValueError(f"unknown phase {phase!r}")


# ---------------------------------------------------------------------------
# forward


def _as_tensor(x):
    if isinstance(x, Volume):
        return Tensor(x.data)
    return x


def style_encode(x, state: ModelState):
    """Input volume -> low-dimensional style vector (conv stack + GAP + fc)."""
    x = _as_tensor(x)
    p = state.params
    h = tensor.relu(tensor.conv3d(x, p["style.conv1.w"], p["style.conv1.b"], padding=1))
    h = tensor.maxpool2(h)
    h = tensor.relu(tensor.conv3d(h, p["style.conv2.w"], p["style.conv2.b"], padding=1))
    h = tensor.maxpool2(h)
    pooled = tensor.global_avg_pool(h)
    return tensor.linear(pooled, p["style.fc.w"], p["style.fc.b"])


def modulate(features, style, gamma_w, gamma_b, beta_w, beta_b):
    """Per-channel affine of decoder features driven by the style vector."""
    gamma = tensor.linear(style, gamma_w, gamma_b)
    beta = tensor.linear(style, beta_w, beta_b)
    return tensor.scalar_affine(features, gamma, beta)


def forward(x, state: ModelState):
    """Full forward pass producing the three head logit maps."""
    x = _as_tensor(x)
    cfg = state.config
    p = state.params
    if x.data.ndim != 4 or x.data.shape[0] != cfg.in_channels:
        raise ShapeError(
            f"forward: expected [{cfg.in_channels},D,H,W] input, got {x.data.shape}")
    factor = 2 ** cfg.depth
    for ax, extent in enumerate(x.data.shape[1:]):
        if extent % factor:
            raise ShapeError(
                f"forward: spatial axis {ax} extent {extent} not divisible by {factor}")

    s = style_encode(x, state)

    skips = []
    h = tensor.relu(tensor.conv3d(x, p["enc0.w"], p["enc0.b"], padding=1))
    skips.append(h)
    for i in range(1, cfg.depth + 1):
        h = tensor.maxpool2(h)
        h = tensor.relu(tensor.conv3d(h, p[f"enc{i}.w"], p[f"enc{i}.b"], padding=1))
        if i < cfg.depth:
            skips.append(h)

    for i in range(cfg.depth, 0, -1):
        up = tensor.upsample2_nearest(h)
        cat = tensor.concat_channels([up, skips[i - 1]])
        h = tensor.conv3d(cat, p[f"dec{i}.w"], p[f"dec{i}.b"], padding=1)
        h = modulate(h, s, p[f"mod{i}.gamma.w"], p[f"mod{i}.gamma.b"],
                     p[f"mod{i}.beta.w"], p[f"mod{i}.beta.b"])
        h = tensor.relu(h)

    heads = [tensor.conv3d(h, p[f"head_{name}.w"], p[f"head_{name}.b"]) for name in HEAD_NAMES]
    return ForwardOutput(csh_logits=heads[0], ih_logits=heads[1], cnh_logits=heads[2], style=s)


def predict_labels(x, state: ModelState):
    """Argmax class grid from the consistency head (ties -> lower channel)."""
    out = forward(x, state)
    return out.csh_logits.data.argmax(axis=0)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state: ModelState):
    entries = []
    offset = 0
    blobs = []
    for name, p in state.params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format_version": CHECKPOINT_VERSION, "net": asdict(state.config),
                "params": entries, "blob_bytes": offset}
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(mbytes)))
        f.write(mbytes)
        for blob in blobs:
            f.write(blob)


class CheckpointError(Exception):
    pass


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:6] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic {blob[:6]!r}")
    (mlen,) = struct.unpack("<I", blob[6:10])
    manifest = json.loads(blob[10:10 + mlen].decode("utf-8"))
    if manifest["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest['format_version']}")
    payload = blob[10 + mlen:]
    if len(payload) != manifest["blob_bytes"]:
        raise CheckpointError(
            f"{path}: blob is {len(payload)} bytes, manifest declares {manifest['blob_bytes']}")
    config = NetConfig(**manifest["net"])
    params = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start).reshape(shape)
        params[entry["name"]] = Tensor(arr.copy())
    state = ModelState(config, params)
    _validate_shapes(state)
    return state


def _validate_shapes(state: ModelState):
    reference = init_model(state.config, np.random.default_rng(0))
    if set(reference.params) != set(state.params):
        missing = set(reference.params) ^ set(state.params)
        raise CheckpointError(f"checkpoint parameter names do not match config: {sorted(missing)}")
    for name, p in reference.params.items():
        if state.params[name].data.shape != p.data.shape:
            raise CheckpointError(
                f"checkpoint param {name}: shape {state.params[name].data.shape} "
                f"!= expected {p.data.shape}")
