"""Pre-activation residual networks with a GAP classifier head."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T

VARIANTS = {
    "toy10": ((16, 32, 64), (1, 1, 1)),
    "res18": ((64, 128, 256, 512), (2, 2, 2, 2)),
    "res34": ((64, 128, 256, 512), (3, 4, 6, 3)),
}

CKPT_MAGIC = b"WSOL-CKPT-v1\n"


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "res18"
    num_classes: int = 200
    input_side: int = 64
    stage_widths: tuple = ()
    blocks_per_stage: tuple = ()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        widths, blocks = VARIANTS[self.variant]
        self.stage_widths = tuple(self.stage_widths) or widths
        self.blocks_per_stage = tuple(self.blocks_per_stage) or blocks
        if len(self.stage_widths) != len(self.blocks_per_stage):
            raise ValueError("stage_widths and blocks_per_stage must have equal length")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.input_side < 1:
            raise ValueError("input_side must be positive")


@dataclass
class Block:
    name: str
    in_ch: int
    out_ch: int
    stride: int

    @property
    def has_proj(self):
        return self.stride != 1 or self.in_ch != self.out_ch


@dataclass
class Network:
    config: ModelConfig
    blocks: list
    params: dict = field(default_factory=dict)
    bns: dict = field(default_factory=dict)
    seed_lineage: dict = field(default_factory=dict)
    cache: list | None = field(default=None, repr=False)

    @property
    def classifier_w(self):
        return self.params["fc.w"]

    @property
    def classifier_b(self):
        return self.params["fc.b"]

    def trainable(self):
        """Name -> array for every trainable parameter, in a fixed order."""
        return self.params

    def state(self):
        """Every array that defines the network (parameters + running stats)."""
        out = dict(self.params)
        for name, bn in self.bns.items():
            out[f"{name}.running_mean"] = bn.running_mean
            out[f"{name}.running_var"] = bn.running_var
        return out

    def copy(self):
        clone = build_network(self.config, 0, _init=False)
        for name, arr in self.state().items():
            clone.state()[name][...] = arr
        clone.seed_lineage = dict(self.seed_lineage)
        return clone


def _block_layout(config):
    blocks = []
    in_ch = config.stage_widths[0]
    for s, (width, count) in enumerate(zip(config.stage_widths, config.blocks_per_stage)):
        for j in range(count):
            stride = 2 if (s > 0 and j == 0) else 1
            blocks.append(Block(f"s{s}.b{j}", in_ch, width, stride))
            in_ch = width
    return blocks


def _he_normal(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def build_network(config: ModelConfig, init_seed=0, _init=True) -> Network:
    """He-normal initialized network; BN gamma=1, beta=0, classifier bias 0."""
    rng = np.random.default_rng(init_seed)
    blocks = _block_layout(config)
    net = Network(config, blocks, seed_lineage={"init_seed": int(init_seed)})
    p = net.params

    def conv(name, k, c, size):
        p[name] = _he_normal(rng, (k, c, size, size)) if _init else np.zeros((k, c, size, size))

    def bn(name, ch):
        params = T.BatchNormParams.identity(ch)
        net.bns[name] = params
        p[f"{name}.gamma"] = params.gamma
        p[f"{name}.beta"] = params.beta

    conv("stem.w", config.stage_widths[0], 3, 3)
    for blk in blocks:
        bn(f"{blk.name}.bn1", blk.in_ch)
        conv(f"{blk.name}.conv1.w", blk.out_ch, blk.in_ch, 3)
        bn(f"{blk.name}.bn2", blk.out_ch)
        conv(f"{blk.name}.conv2.w", blk.out_ch, blk.out_ch, 3)
        if blk.has_proj:
            conv(f"{blk.name}.proj.w", blk.out_ch, blk.in_ch, 1)
    k = config.stage_widths[-1]
    bn("final_bn", k)
    if _init:
        p["fc.w"] = rng.standard_normal((k, config.num_classes)) * np.sqrt(1.0 / k)
    else:
        p["fc.w"] = np.zeros((k, config.num_classes))
    p["fc.b"] = np.zeros(config.num_classes)
    return net


def parameter_count(net: Network):
    return int(sum(a.size for a in net.params.values()))


def _block_forward(net, blk, x, mode):
    p = net.params
    h, c_bn1 = T.batch_norm(x, net.bns[f"{blk.name}.bn1"], mode)
    a, c_relu1 = T.relu(h)
    if blk.has_proj:
        skip, c_proj = T.conv2d(a, p[f"{blk.name}.proj.w"], blk.stride, 0)
    else:
        skip, c_proj = x, None
    h, c_conv1 = T.conv2d(a, p[f"{blk.name}.conv1.w"], blk.stride, 1)
    h, c_bn2 = T.batch_norm(h, net.bns[f"{blk.name}.bn2"], mode)
    h, c_relu2 = T.relu(h)
    h, c_conv2 = T.conv2d(h, p[f"{blk.name}.conv2.w"], 1, 1)
    return h + skip, (c_bn1, c_relu1, c_proj, c_conv1, c_bn2, c_relu2, c_conv2)


def _block_backward(blk, dy, cache, grads):
    c_bn1, c_relu1, c_proj, c_conv1, c_bn2, c_relu2, c_conv2 = cache
    dh, grads[f"{blk.name}.conv2.w"] = T.conv2d_backward(dy, c_conv2)
    dh = T.relu_backward(dh, c_relu2)
    dh, grads[f"{blk.name}.bn2.gamma"], grads[f"{blk.name}.bn2.beta"] = T.batch_norm_backward(dh, c_bn2)
    da, grads[f"{blk.name}.conv1.w"] = T.conv2d_backward(dh, c_conv1)
    if c_proj is not None:
        da_skip, grads[f"{blk.name}.proj.w"] = T.conv2d_backward(dy, c_proj)
        da = da + da_skip
        dx = 0.0
    else:
        dx = dy
    dh = T.relu_backward(da, c_relu1)
    dh, grads[f"{blk.name}.bn1.gamma"], grads[f"{blk.name}.bn1.beta"] = T.batch_norm_backward(dh, c_bn1)
    return dx + dh


def forward(net: Network, batch, mode="eval", keep_cache=False):
    """Returns (logits [N, C], features [N, K, h, w]).

    ``features`` are the post BN-ReLU final maps; logits are exactly
    GAP(features) @ W + b.  With ``keep_cache`` the intermediate caches are
    stored on the network for a following :func:`backward`.
    """
    side = net.config.input_side
    if batch.ndim != 4 or batch.shape[1] != 3 or batch.shape[2:] != (side, side):
        raise ValueError(f"forward: expected input [N, 3, {side}, {side}], got {batch.shape}")
    x = np.asarray(batch, dtype=np.float64)
    p = net.params
    caches = []
    x, c = T.conv2d(x, p["stem.w"], 1, 1)
    caches.append(c)
    for blk in net.blocks:
        x, c = _block_forward(net, blk, x, mode)
        caches.append(c)
    x, c_bn = T.batch_norm(x, net.bns["final_bn"], mode)
    feats, c_relu = T.relu(x)
    pooled, c_gap = T.gap(feats)
    logits, c_fc = T.linear(pooled, p["fc.w"], p["fc.b"])
    caches.append((c_bn, c_relu, c_gap, c_fc))
    net.cache = caches if keep_cache else None
    return logits, feats


def backward(net: Network, dlogits):
    """Gradients of every trainable parameter given dL/dlogits."""
    if net.cache is None:
        raise T.MissingCacheError("backward requires a forward pass with keep_cache=True")
    caches = net.cache
    grads = {}
    c_bn, c_relu, c_gap, c_fc = caches[-1]
    d, grads["fc.w"], grads["fc.b"] = T.linear_backward(dlogits, c_fc)
    d = T.gap_backward(d, c_gap)
    d = T.relu_backward(d, c_relu)
    d, grads["final_bn.gamma"], grads["final_bn.beta"] = T.batch_norm_backward(d, c_bn)
    for blk, cache in zip(reversed(net.blocks), reversed(caches[1:-1])):
        d = _block_backward(blk, d, cache, grads)
    _, grads["stem.w"] = T.conv2d_backward(d, caches[0])
    net.cache = None
    return {name: grads[name] for name in net.params}


def backprop(net: Network, batch, labels, mode="train"):
    """Forward, mean cross-entropy and backward in one call.

    Returns (loss, probs, grads).
    """
    logits, _ = forward(net, batch, mode, keep_cache=True)
    loss, probs = T.softmax_cross_entropy(logits, labels)
    grads = backward(net, T.softmax_cross_entropy_backward(probs, np.asarray(labels)))
    return loss, probs, grads


# -- checkpoint I/O ---------------------------------------------------------

def dumps_checkpoint(net: Network, extra=None) -> bytes:
    """Serialize to the versioned binary checkpoint format.

    Layout: magic line, 8-byte little-endian header length, UTF-8 JSON header
    (config, seed lineage, tensor index), then float64 little-endian payload.
    """
    index = []
    chunks = []
    offset = 0
    for name, arr in net.state().items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {
        "config": asdict(net.config),
        "seed_lineage": net.seed_lineage,
        "tensors": index,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def loads_checkpoint(blob: bytes):
    """Inverse of :func:`dumps_checkpoint`; returns (network, extra)."""
    if not blob.startswith(CKPT_MAGIC):
        raise CheckpointError("not a WSOL-CKPT-v1 checkpoint")
    pos = len(CKPT_MAGIC)
    if len(blob) < pos + 8:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = memoryview(blob)[pos + hlen:]
    cfg = header["config"]
    config = ModelConfig(**{**cfg, "stage_widths": tuple(cfg["stage_widths"]),
                            "blocks_per_stage": tuple(cfg["blocks_per_stage"])})
    net = build_network(config, 0, _init=False)
    state = net.state()
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in state or state[name].shape != shape:
            raise CheckpointError(f"checkpoint tensor {name} does not match the config")
        nbytes = 8 * int(np.prod(shape))
        start = entry["offset"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"truncated payload for tensor {name}")
        state[name][...] = np.frombuffer(payload[start:start + nbytes], dtype="<f8").reshape(shape)
    net.seed_lineage = header.get("seed_lineage", {})
    return net, header.get("extra", {})


def save_checkpoint(net, path, extra=None):
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(net, extra))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
