"""Small convolutional classifier with the attention stage wired in.

The backbone is a stack of conv(3x3, pad 1) + relu + maxpool(2) blocks whose
final output feeds the attention module; a global-average-pooled head maps the
attended maps to class logits.  Either attention stage can be bypassed for
ablations; bypasses substitute the exact identity constants (uniform channel
weights with B = A, all-ones spatial map with D = B).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .attention import (
    AttentionParams,
    SPATIAL_MODES,
    channel_weights,
    apply_channel,
    spatial_map,
    apply_spatial,
)

__all__ = [
    "ModelConfig",
    "ForwardTrace",
    "Model",
    "build",
    "save",
    "load",
    "CheckpointError",
]

CHECKPOINT_MAGIC = b"GGCK"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Malformed, corrupted, or incompatible checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    width: int = 64
    height: int = 64
    channels: tuple = (16, 32, 64)
    reduction: int = 4
    num_classes: int = 8
    channel_attention: bool = True
    spatial_attention: bool = True
    ggam: bool = True
    spatial_mode: str = "eq3"
    head_layers: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels:
            raise ValueError("config: backbone needs at least one block")
        if self.num_classes < 2:
            raise ValueError(f"config: need at least 2 classes, got {self.num_classes}")
        if self.channels[-1] % self.reduction:
            raise ValueError(
                f"config: reduction {self.reduction} does not divide "
                f"final channel count {self.channels[-1]}"
            )
        if self.spatial_mode not in SPATIAL_MODES:
            raise ValueError(f"config: unknown spatial mode {self.spatial_mode!r}")
        if self.head_layers < 1:
            raise ValueError(f"config: head needs at least one layer, got {self.head_layers}")
        factor = 2 ** len(self.channels)
        if self.width % factor or self.height % factor:
            raise ValueError(
                f"config: input {self.width}x{self.height} not divisible by "
                f"the backbone downsampling factor {factor}"
            )

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]

    @property
    def feature_size(self):
        factor = 2 ** len(self.channels)
        return self.width // factor, self.height // factor


@dataclass
class ForwardTrace:
    """Everything one forward pass produced, with the graph optionally retained."""

    feature_maps: Tensor  # (C, Wf, Hf), post-relu backbone output
    channel_weights: Tensor  # (C,), uniform constant when channel attention is off
    weighted_maps: Tensor  # (C, Wf, Hf)
    spatial_map: Tensor  # (Wf, Hf), all-ones constant when spatial attention is off
    attended_maps: Tensor  # (C, Wf, Hf)
    logits: Tensor  # (K,)
    predicted: int
    graph_retained: bool


class Model:
    """Backbone kernels + attention FC pair + classifier head, all float64."""

    def __init__(self, config: ModelConfig, kernels, attention: AttentionParams, head):
        self.config = config
        self.kernels = list(kernels)  # one (Cout, Cin, 3, 3) tensor per block
        self.attention = attention
        self.head = list(head)  # [(weight, bias), ...], last maps to num_classes

    def parameters(self):
        """(name, tensor) pairs in the documented fixed order."""
        params = [(f"conv{i}", k) for i, k in enumerate(self.kernels)]
        params += [("att_fc1", self.attention.fc1), ("att_fc2", self.attention.fc2)]
        for i, (w, b) in enumerate(self.head):
            params += [(f"head{i}_w", w), (f"head{i}_b", b)]
        return params

    def backbone_param_names(self):
        return {f"conv{i}" for i in range(len(self.kernels))}

    def zero_grad(self):
        for _, p in self.parameters():
            p.grad = None

    def forward(self, image, retain_graph=True) -> ForwardTrace:
        if not isinstance(image, Tensor):
            image = Tensor(image)
        expected = (self.config.in_channels, self.config.width, self.config.height)
        if tuple(image.shape) != expected:
            raise ValueError(f"forward: image shape {tuple(image.shape)}, expected {expected}")
        if retain_graph:
            return self._forward(image)
        with T.no_grad():
            return self._forward(image, retained=False)

    def _forward(self, image, retained=True) -> ForwardTrace:
        x = image
        for kernel in self.kernels:
            x = T.maxpool2d(T.relu(T.conv2d(x, kernel, stride=1, pad=1)), 2)
        features = x
        c = self.config.feature_channels
        wf, hf = self.config.feature_size

        if self.config.channel_attention:
            weights = channel_weights(features, self.attention)
            weighted = apply_channel(features, weights)
        else:
            weights = Tensor(np.full(c, 1.0 / c))
            weighted = features
        if self.config.spatial_attention:
            spatial = spatial_map(weighted, mode=self.config.spatial_mode)
            attended = apply_spatial(features, spatial)
        else:
            spatial = Tensor(np.ones((wf, hf)))
            attended = weighted

        pooled = T.reshape(T.global_avg_pool(attended), (1, c))
        h = pooled
        for i, (w, b) in enumerate(self.head):
            h = T.add(T.matmul(h, w), T.reshape(b, (1, b.shape[0])))
            if i < len(self.head) - 1:
                h = T.relu(h)
        logits = T.reshape(h, (self.config.num_classes,))
        return ForwardTrace(
            feature_maps=features,
            channel_weights=weights,
            weighted_maps=weighted,
            spatial_map=spatial,
            attended_maps=attended,
            logits=logits,
            predicted=int(np.argmax(logits.data)),
            graph_retained=retained,
        )

    def predict(self, image) -> int:
        return self.forward(image, retain_graph=False).predicted


def build(config: ModelConfig) -> Model:
    """Initialize a model with fan-in-scaled uniform draws from the config seed."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))

    def draw(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)  # He-style gain, keeps relu activations alive
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    kernels = []
    cin = config.in_channels
    for cout in config.channels:
        kernels.append(draw((cout, cin, 3, 3), cin * 9))
        cin = cout

    c = config.feature_channels
    hidden = c // config.reduction
    attention = AttentionParams(
        fc1=draw((c, hidden), c),
        fc2=draw((hidden, c), hidden),
        reduction=config.reduction,
    )

    head = []
    in_dim = c
    for i in range(config.head_layers):
        out_dim = config.num_classes if i == config.head_layers - 1 else c
        head.append((draw((in_dim, out_dim), in_dim), draw((out_dim,), in_dim)))
        in_dim = out_dim

    return Model(config, kernels, attention, head)


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, config JSON, raw float64 blobs, sha256


def _config_json(config: ModelConfig) -> bytes:
    d = asdict(config)
    d["channels"] = list(d["channels"])
    return json.dumps(d, sort_keys=True).encode()


def save(model: Model, path) -> None:
    params = model.parameters()
    header = {
        "config": json.loads(_config_json(model.config)),
        "params": [{"name": n, "shape": list(p.shape)} for n, p in params],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += CHECKPOINT_VERSION.to_bytes(4, "little")
    body += len(header_bytes).to_bytes(4, "little")
    body += header_bytes
    for _, p in params:
        body += np.ascontiguousarray(p.data).astype("<f8").tobytes()
    digest = hashlib.sha256(bytes(body)).digest()
    with open(path, "wb") as f:
        f.write(bytes(body) + digest)


def load(path) -> Model:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 44 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted or truncated)")
    version = int.from_bytes(body[4:8], "little")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    hlen = int.from_bytes(body[8:12], "little")
    header = json.loads(body[12 : 12 + hlen].decode())
    config = ModelConfig(**header["config"])
    model = build(config)
    offset = 12 + hlen
    by_name = dict(model.parameters())
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        raw = body[offset : offset + 8 * n]
        if len(raw) != 8 * n:
            raise CheckpointError(f"{path}: parameter blob truncated at {entry['name']}")
        offset += 8 * n
        param = by_name.get(entry["name"])
        if param is None or tuple(param.shape) != shape:
            raise CheckpointError(f"{path}: unexpected parameter {entry['name']} {shape}")
        param.data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if offset != len(body):
        raise CheckpointError(f"{path}: trailing bytes after parameters")
    return model
