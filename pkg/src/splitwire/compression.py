"""Importance-based channel pruning, feature recovery and the staged training loop.

A compressed model is an ordinary :class:`~splitwire.model.ModelSpec` with
``compression`` set. The CA-pruned variant sends ``C' = C / ratio`` channels
straight into a channel-sliced next layer; the AECNN variant additionally
runs a :class:`~splitwire.nn.FeatureRecovery` layer first on the server side
so the next layer sees all ``C`` channels again.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .attention import ChannelImportance, compute_importance, insert_ca
from .data import Dataset
from .model import ModelSpec
from .nn import (
    ChannelAttention,
    Conv2d,
    Dense,
    FeatureRecovery,
    GlobalAvgPool,
    GlobalMaxPool,
    ReLU,
    ResidualBlock,
    ShapeError,
    Sigmoid,
    TrainingDiverged,
    forward,
)
from .training import evaluate_accuracy, train

log = logging.getLogger(__name__)

DEFAULT_RATIOS = (2, 4, 8, 16, 32, 64)
_PASSTHROUGH = (ReLU, Sigmoid, GlobalAvgPool, GlobalMaxPool)


@dataclass(frozen=True)
class CompressionConfig:
    split_point: int
    ratio: int
    channels: int
    retained: tuple  # ascending original channel indices

    @property
    def retained_channels(self) -> int:
        return len(self.retained)

    def __post_init__(self):
        if self.ratio < 2:
            raise ValueError(f"compression ratio must be >= 2, got {self.ratio}")
        if self.channels % self.ratio:
            raise ValueError(f"ratio {self.ratio} does not divide {self.channels} channels")
        if len(self.retained) != self.channels // self.ratio:
            raise ValueError("retained set size must be channels / ratio")
        if any(not 0 <= c < self.channels for c in self.retained):
            raise ValueError("retained channel index out of range")


def retained_set(importance: ChannelImportance, ratio: int) -> tuple:
    """The ``C / ratio`` most important channels, in ascending index order."""
    c = len(importance.importance)
    if ratio < 2:
        raise ValueError(f"compression ratio must be >= 2, got {ratio}")
    if c % ratio:
        divisors = [r for r in range(2, c + 1) if c % r == 0]
        raise ValueError(
            f"ratio {ratio} does not divide C_l={c}; choose one of {divisors}"
        )
    keep = importance.ranking[: c // ratio]
    return tuple(sorted(int(i) for i in keep))


# ---- layer surgery --------------------------------------------------------


def _slice_conv(conv: Conv2d, out_idx=None, in_idx=None) -> Conv2d:
    w, b = conv.params["weight"], conv.params["bias"]
    if out_idx is not None:
        w, b = w[out_idx], b[out_idx]
    if in_idx is not None:
        w = w[:, in_idx]
    return Conv2d(np.ascontiguousarray(w), np.ascontiguousarray(b), conv.stride, conv.padding)


def _slice_output(layer, idx):
    if isinstance(layer, Conv2d):
        return _slice_conv(layer, out_idx=idx)
    if isinstance(layer, ResidualBlock):
        conv2 = _slice_conv(layer.conv2, out_idx=idx)
        if layer.proj is not None:
            return ResidualBlock(layer.conv1, conv2, _slice_conv(layer.proj, out_idx=idx))
        src = dict(zip(layer.skip_out.tolist(), layer.skip_in.tolist()))
        pairs = [(src[o], j) for j, o in enumerate(idx) if o in src]
        return ResidualBlock(layer.conv1, conv2, None, [p[0] for p in pairs], [p[1] for p in pairs])
    raise ShapeError(f"cannot prune the output channels of a {layer.kind} layer")


def _slice_input(layer, idx, channels):
    if isinstance(layer, Conv2d):
        return _slice_conv(layer, in_idx=idx)
    if isinstance(layer, ResidualBlock):
        conv1 = _slice_conv(layer.conv1, in_idx=idx)
        if layer.proj is not None:
            return ResidualBlock(conv1, layer.conv2, _slice_conv(layer.proj, in_idx=idx))
        pos = {c: j for j, c in enumerate(idx)}
        pairs = [(pos[i], o) for i, o in zip(layer.skip_in.tolist(), layer.skip_out.tolist())
                 if i in pos]
        return ResidualBlock(conv1, layer.conv2, None, [p[0] for p in pairs], [p[1] for p in pairs])
    if isinstance(layer, Dense):
        return Dense(_dense_cols(layer.params["weight"], idx, channels), layer.params["bias"].copy())
    raise ShapeError(f"cannot prune the input channels of a {layer.kind} layer")


def _dense_cols(w, idx, channels):
    per = w.shape[1] // channels
    return np.ascontiguousarray(w.reshape(w.shape[0], channels, per)[:, idx].reshape(w.shape[0], -1))


def _expand_input(pruned_layer, full_layer, idx, channels, fill_from_full=False):
    """Inverse of :func:`_slice_input`.

    Weights for the re-added channels are zero, or copied from ``full_layer``
    when ``fill_from_full`` is set.
    """

    def widen(w, full_w, per_channel_shape):
        if fill_from_full:
            out = full_w.reshape((w.shape[0], channels) + per_channel_shape).copy()
        else:
            out = np.zeros((w.shape[0], channels) + per_channel_shape)
        out[:, idx] = w.reshape((w.shape[0], len(idx)) + per_channel_shape)
        return out

    def full_param(layer, name):
        return None if full_layer is None else layer.params[name]

    if isinstance(pruned_layer, Conv2d):
        w = pruned_layer.params["weight"]
        full = widen(w, full_param(full_layer, "weight"), w.shape[2:])
        return Conv2d(full, pruned_layer.params["bias"].copy(), pruned_layer.stride,
                      pruned_layer.padding)
    if isinstance(pruned_layer, ResidualBlock):
        sub = (lambda name: getattr(full_layer, name)) if full_layer is not None else (lambda _: None)
        conv1 = _expand_input(pruned_layer.conv1, sub("conv1"), idx, channels, fill_from_full)
        if pruned_layer.proj is not None:
            proj = _expand_input(pruned_layer.proj, sub("proj"), idx, channels, fill_from_full)
            return ResidualBlock(conv1, pruned_layer.conv2, proj)
        return ResidualBlock(conv1, pruned_layer.conv2, None, full_layer.skip_in, full_layer.skip_out)
    if isinstance(pruned_layer, Dense):
        w = pruned_layer.params["weight"]
        per = w.shape[1] // len(idx)
        full = widen(w, full_param(full_layer, "weight"), (per,))
        return Dense(full.reshape(w.shape[0], -1), pruned_layer.params["bias"].copy())
    raise ShapeError(f"cannot expand the input channels of a {pruned_layer.kind} layer")


def _neighbours(model: ModelSpec, l: int):
    """Indices of the layer producing split-point ``l`` channels and the one consuming them."""
    cut = model.cuts[l]
    prod = cut - 1
    while prod >= 0 and isinstance(model.layers[prod], _PASSTHROUGH):
        prod -= 1
    cons = cut
    while cons < len(model.layers) and isinstance(model.layers[cons], _PASSTHROUGH):
        cons += 1
    if prod < 0 or cons >= len(model.layers):
        raise ShapeError(f"split point {l} has no prunable producer/consumer layer pair")
    for layer in model.layers[prod:cons + 1]:
        if isinstance(layer, (ChannelAttention, FeatureRecovery)):
            raise ValueError(f"split point {l} already carries a {layer.kind} layer")
    return prod, cons


def prune_channels(model: ModelSpec, importance: ChannelImportance, ratio: int):
    """Keep the ``C_l / ratio`` most important filters at split point ``l``.

    Returns ``(pruned_model, config)``. The producing layer keeps only the
    retained output filters and the consuming layer's input filters are
    sliced to match; every other layer is untouched.
    """
    l = importance.split_point
    channels = model.intermediate_shape(l)[0]
    if len(importance.importance) != channels:
        raise ValueError(
            f"importance covers {len(importance.importance)} channels, split point {l} has {channels}"
        )
    config = CompressionConfig(l, ratio, channels, retained_set(importance, ratio))
    prod, cons = _neighbours(model, l)
    idx = np.array(config.retained)
    pruned = model.copy()
    pruned.layers[prod] = _slice_output(model.layers[prod], idx)
    pruned.layers[cons] = _slice_input(model.layers[cons], idx, channels)
    pruned.compression = config
    return pruned, config


def insert_fr(pruned: ModelSpec, seed: int = 0, full_model: ModelSpec | None = None,
              fill_from_full: bool = False) -> ModelSpec:
    """Add a feature-recovery layer after the split point of a CA-pruned model.

    The consuming layer regains its full input width. By default weights for
    the recovered channels start at zero, so the new model initially computes
    exactly what ``pruned`` computes; ``fill_from_full`` copies them from
    ``full_model`` instead (needed when only the FR layer will be trained).
    """
    config = pruned.compression
    if config is None:
        raise ValueError("model is not pruned")
    if fill_from_full and full_model is None:
        raise ValueError("fill_from_full needs full_model")
    l = config.split_point
    _, cons = _neighbours(pruned, l)
    idx = np.array(config.retained)
    full_cons = None if full_model is None else full_model.layers[cons]
    rng = np.random.default_rng(seed)
    fr = FeatureRecovery.init(rng, config.retained, config.channels)
    out = pruned.copy()
    out.layers[cons] = _expand_input(pruned.layers[cons], full_cons, idx, config.channels,
                                     fill_from_full)
    return out.insert_layer(l, fr)


def fr_module(model: ModelSpec) -> FeatureRecovery | None:
    cfg = model.compression
    if cfg is None:
        return None
    layer = model.layers[model.cuts[cfg.split_point]]
    return layer if isinstance(layer, FeatureRecovery) else None


def fr_forward(fr: FeatureRecovery, x_hat) -> np.ndarray:
    """Recovered full-width tensor; received channels pass through unchanged."""
    return forward(fr, x_hat)


# ---- training strategy ----------------------------------------------------


@dataclass
class EpochsConfig:
    ca: int = 2
    prune: int = 2
    fr: int = 2
    learning_rate: float = 0.02
    finetune_scale: float = 0.1
    batch_size: int = 32
    fr_only: bool = False


@dataclass
class BranchResult:
    config: CompressionConfig | None
    accuracy_ca_pruned: float = float("nan")
    accuracy_aecnn: float = float("nan")
    bits_per_element: float = float("nan")
    coded_bits_per_element: float = float("nan")
    retained_shape: tuple = ()
    ca_pruned: ModelSpec | None = None
    aecnn: ModelSpec | None = None
    error: str | None = None


@dataclass
class StrategyResult:
    branches: dict = field(default_factory=dict)  # (l, ratio) -> BranchResult
    importance: dict = field(default_factory=dict)  # l -> ChannelImportance
    ca_models: dict = field(default_factory=dict)  # l -> ModelSpec with CA


def branch_seed(seed: int, l: int, ratio: int) -> int:
    return int(np.random.SeedSequence([seed, l, ratio]).generate_state(1)[0])


def measure_bits(model: ModelSpec, images: np.ndarray, bits: int = codec.DEFAULT_BITS,
                 batch_size: int = 256):
    """Mean per-packet empirical entropy and coded payload bits, per element."""
    l = model.compression.split_point
    ent, coded = [], []
    for i in range(0, len(images), batch_size):
        for h in model.forward_device(l, images[i : i + batch_size]):
            q = codec.quantize(h, bits)
            ent.append(codec.empirical_entropy(q.symbols))
            coded.append(len(codec.entropy_encode(q)) * 8 / q.symbols.size)
    return float(np.mean(ent)), float(np.mean(coded))


def compress_branch(base_model: ModelSpec, importance: ChannelImportance, ratio: int,
                    train_set: Dataset, test_set: Dataset, epochs: EpochsConfig, seed: int,
                    quant_bits: int | None = codec.DEFAULT_BITS) -> BranchResult:
    """Prune, fine-tune, add feature recovery and fine-tune again for one ratio."""
    l = importance.split_point
    s = branch_seed(seed, l, ratio)
    lr = epochs.learning_rate * epochs.finetune_scale
    pruned, config = prune_channels(base_model, importance, ratio)
    result = BranchResult(config)
    try:
        pruned, _ = train(pruned, train_set, epochs=epochs.prune, learning_rate=lr,
                          batch_size=epochs.batch_size, seed=s)
        result.ca_pruned = pruned
        result.accuracy_ca_pruned = evaluate_accuracy(pruned, test_set, quant_bits)
        aecnn = insert_fr(pruned, seed=s, full_model=base_model, fill_from_full=epochs.fr_only)
        trainable = None
        if epochs.fr_only:
            trainable = [f"layers.{aecnn.cuts[l]}."]
        aecnn, _ = train(aecnn, train_set, epochs=epochs.fr, learning_rate=lr,
                         batch_size=epochs.batch_size, seed=s + 1, trainable=trainable)
        result.aecnn = aecnn
        result.accuracy_aecnn = evaluate_accuracy(aecnn, test_set, quant_bits)
        result.retained_shape = aecnn.intermediate_shape(l)
        result.bits_per_element, result.coded_bits_per_element = measure_bits(
            aecnn, test_set.images, quant_bits or codec.DEFAULT_BITS)
    except TrainingDiverged as exc:
        result.error = f"split {l} ratio {ratio}: {exc}"
        log.error("branch aborted: %s", result.error)
    return result


def train_ca(base_model: ModelSpec, l: int, train_set: Dataset, epochs: EpochsConfig,
             seed: int) -> tuple[ModelSpec, ChannelImportance]:
    """Insert channel attention at ``l``, train, and average attention over ``train_set``."""
    ca_model = insert_ca(base_model, l)
    ca_model, _ = train(ca_model, train_set, epochs=epochs.ca,
                        learning_rate=epochs.learning_rate * epochs.finetune_scale,
                        batch_size=epochs.batch_size, seed=branch_seed(seed, l, 0))
    return ca_model, compute_importance(ca_model, l, train_set.images)


def run_training_strategy(base_model: ModelSpec, train_set: Dataset, test_set: Dataset,
                          split_points, ratios=DEFAULT_RATIOS, epochs: EpochsConfig | None = None,
                          seed: int = 0, quant_bits: int | None = codec.DEFAULT_BITS
                          ) -> StrategyResult:
    """Staged compression of a trained base model for every (split point, ratio).

    Per split point: train with channel attention inserted, rank channels by
    mean attention, then for each ratio prune the base model, fine-tune,
    insert feature recovery and fine-tune again. Accuracies are measured on
    ``test_set`` with wire quantization in the loop when ``quant_bits`` is set.
    """
    epochs = epochs or EpochsConfig()
    out = StrategyResult()
    for l in split_points:
        ca_model, importance = train_ca(base_model, l, train_set, epochs, seed)
        out.ca_models[l], out.importance[l] = ca_model, importance
        for ratio in ratios:
            log.info("split %d ratio %d", l, ratio)
            out.branches[(l, ratio)] = compress_branch(
                base_model, importance, ratio, train_set, test_set, epochs, seed, quant_bits)
    return out


RESULT_COLUMNS = ["split_point", "ratio", "accuracy_ca_pruned", "accuracy_aecnn",
                  "retained_shape", "bits_per_element", "coded_bits_per_element"]


def result_row(l: int, ratio: int, b: BranchResult) -> dict:
    return {
        "split_point": l,
        "ratio": ratio,
        "accuracy_ca_pruned": f"{100 * b.accuracy_ca_pruned:.2f}",
        "accuracy_aecnn": f"{100 * b.accuracy_aecnn:.2f}",
        "retained_shape": "x".join(str(s) for s in b.retained_shape),
        "bits_per_element": f"{b.bits_per_element:.4f}",
        "coded_bits_per_element": f"{b.coded_bits_per_element:.4f}",
    }


def results_csv(rows: list[dict]) -> str:
    """Rows sorted by (split_point, ratio); accuracies in percent."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, RESULT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in sorted(rows, key=lambda r: (int(r["split_point"]), int(r["ratio"]))):
        w.writerow(row)
    return buf.getvalue()


def read_results(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        missing = [c for c in RESULT_COLUMNS[:6] if c not in r]
        if missing:
            raise ValueError(f"results table is missing column(s) {missing}")
    return rows
