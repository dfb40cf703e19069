"""Toy residual classifier with explicit device/server split points."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import container
from .nn import (
    ChannelAttention,
    Concat,
    Conv2d,
    Dense,
    FeatureRecovery,
    GlobalAvgPool,
    GlobalMaxPool,
    Layer,
    Normalize,
    ReLU,
    ResidualBlock,
    ShapeError,
    Sigmoid,
    run_forward,
)


@dataclass
class ModelSpec:
    """Ordered layers plus the split-point bookkeeping.

    ``cuts[l]`` is the number of leading layers that run on the device when
    the model is split at point ``l``.
    """

    layers: list[Layer]
    class_count: int
    cuts: dict[int, int]
    input_shape: tuple[int, int, int]
    compression: Any = None  # compression.CompressionConfig once pruned
    meta: dict = field(default_factory=dict)

    @property
    def split_points(self) -> list[int]:
        return sorted(self.cuts)

    def _cut(self, l: int) -> int:
        if l not in self.cuts:
            raise ValueError(f"split point {l} is not one of {self.split_points}")
        return self.cuts[l]

    def device_layers(self, l: int) -> list[Layer]:
        return self.layers[: self._cut(l)]

    def server_layers(self, l: int) -> list[Layer]:
        return self.layers[self._cut(l) :]

    def shape_after(self, n_layers: int) -> tuple:
        shape = tuple(self.input_shape)
        for layer in self.layers[:n_layers]:
            shape = layer.output_shape(shape)
        return shape

    def intermediate_shape(self, l: int) -> tuple:
        """``[C_l, H_l, W_l]`` produced at split point ``l``."""
        return self.shape_after(self._cut(l))

    def _batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        return (x[None], True) if x.ndim == 3 else (x, False)

    def forward(self, x) -> np.ndarray:
        x, single = self._batch(x)
        y = run_forward(self.layers, x)[0]
        return y[0] if single else y

    def forward_device(self, l: int, x) -> np.ndarray:
        layers = self.device_layers(l)
        x, single = self._batch(x)
        if tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(f"input shape {x.shape[1:]} != model input {self.input_shape}")
        y = run_forward(layers, x)[0]
        return y[0] if single else y

    def forward_server(self, l: int, intermediate) -> np.ndarray:
        layers = self.server_layers(l)
        h = np.asarray(intermediate, dtype=np.float64)
        expected = self.intermediate_shape(l)
        single = h.ndim == len(expected)
        if single:
            h = h[None]
        if tuple(h.shape[1:]) != tuple(expected):
            raise ShapeError(
                f"intermediate shape {tuple(h.shape[1:])} does not match split point {l} "
                f"shape {expected}"
            )
        y = run_forward(layers, h)[0]
        return y[0] if single else y

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            f"layers.{i}.{name}": arr
            for i, layer in enumerate(self.layers)
            for name, arr in layer.parameters().items()
        }

    def parameter_count(self) -> int:
        return sum(a.size for a in self.parameters().values())

    def copy(self) -> "ModelSpec":
        return copy.deepcopy(self)

    def insert_layer(self, l: int, layer: Layer) -> "ModelSpec":
        """New model with ``layer`` inserted right after split point ``l``.

        The inserted layer belongs to the server side; later cuts shift.
        """
        pos = self._cut(l)
        new = self.copy()
        new.layers.insert(pos, copy.deepcopy(layer))
        new.cuts = {k: (v + 1 if v > pos else v) for k, v in self.cuts.items()}
        return new

    def remove_layer(self, l: int) -> "ModelSpec":
        pos = self._cut(l)
        new = self.copy()
        del new.layers[pos]
        new.cuts = {k: (v - 1 if v > pos else v) for k, v in self.cuts.items()}
        return new


def build_toy_resnet(class_count: int, width: int = 16, block_count: int = 2, seed: int = 0,
                     image_size: int = 32, in_channels: int = 3) -> ModelSpec:
    """Stride-2 3x3 stem, ``block_count`` downsampling residual blocks, pool, dense head.

    Block ``i`` (1-based) has ``width * 2**(i-1)`` output channels. Split
    point 1 follows the stem; split point ``i + 1`` follows block ``i``.
    """
    if width < 4 or block_count < 1:
        raise ValueError("need width >= 4 and block_count >= 1")
    rng = np.random.default_rng(seed)
    layers: list[Layer] = [Conv2d.init(rng, in_channels, width, 3, 2, 1), ReLU()]
    cuts = {1: len(layers)}
    c = width
    for b in range(block_count):
        c_out = width * 2**b
        layers.append(ResidualBlock.init(rng, c, c_out, stride=2))
        cuts[b + 2] = len(layers)
        c = c_out
    layers += [GlobalAvgPool(), Dense.init(rng, c, class_count)]
    return ModelSpec(layers, class_count, cuts, (in_channels, image_size, image_size),
                     meta={"width": width, "block_count": block_count, "seed": seed})


# ---- persistence ----------------------------------------------------------


def _conv(t, prefix, hyper):
    return Conv2d(t[f"{prefix}weight"], t[f"{prefix}bias"], **hyper)


def layer_from_record(rec: container.Record) -> Layer:
    t, h = rec.tensors, rec.hyper
    simple = {"relu": ReLU, "sigmoid": Sigmoid, "global_avg_pool": GlobalAvgPool,
              "global_max_pool": GlobalMaxPool}
    if rec.tag in simple:
        return simple[rec.tag]()
    if rec.tag == "conv2d":
        return _conv(t, "", h)
    if rec.tag == "dense":
        return Dense(t["weight"], t["bias"])
    if rec.tag == "normalize":
        return Normalize(**h)
    if rec.tag == "concat":
        return Concat(h["positions"])
    if rec.tag == "channel_attention":
        return ChannelAttention(**h)
    if rec.tag == "residual_block":
        proj = None if h["proj"] is None else _conv(t, "proj.", h["proj"])
        return ResidualBlock(_conv(t, "conv1.", h["conv1"]), _conv(t, "conv2.", h["conv2"]),
                             proj, h.get("skip_in"), h.get("skip_out"))
    if rec.tag == "feature_recovery":
        return FeatureRecovery(_conv(t, "conv.", h["conv"]), h["retained"], h["channels"])
    raise container.ContainerError(f"unknown layer kind {rec.tag!r}")


def dumps(model: ModelSpec) -> bytes:
    from dataclasses import asdict

    meta = {
        "class_count": model.class_count,
        "cuts": {str(k): v for k, v in model.cuts.items()},
        "input_shape": list(model.input_shape),
        "compression": None if model.compression is None else asdict(model.compression),
        "meta": model.meta,
    }
    records = [container.Record(layer.kind, layer.config(), dict(layer.parameters()))
               for layer in model.layers]
    return container.dumps(b"SWML", meta, records)


def loads(data: bytes) -> ModelSpec:
    meta, records = container.loads(data, b"SWML")
    compression = None
    if meta["compression"] is not None:
        from .compression import CompressionConfig

        c = meta["compression"]
        compression = CompressionConfig(c["split_point"], c["ratio"], c["channels"],
                                        tuple(c["retained"]))
    return ModelSpec(
        [layer_from_record(r) for r in records],
        meta["class_count"],
        {int(k): v for k, v in meta["cuts"].items()},
        tuple(meta["input_shape"]),
        compression,
        meta["meta"],
    )


def save(model: ModelSpec, path):
    with open(path, "wb") as f:
        f.write(dumps(model))


def load(path) -> ModelSpec:
    with open(path, "rb") as f:
        return loads(f.read())
