"""Channel attention, dataset-level channel importance and ranking stability."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .model import ModelSpec
from .nn import ChannelAttention, ShapeError

DEFAULT_EPS = 1e-5


def ca_forward(x, epsilon: float = DEFAULT_EPS) -> np.ndarray:
    """Attention weights in (0, 1) for one ``[C, H, W]`` tensor (or ``[N, C]`` for a batch)."""
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] < 2:
        raise ShapeError(f"channel attention needs [C>=2, H, W] input, got {x.shape}")
    q = ChannelAttention(epsilon).attention_map(x)
    return q[0] if single else q


def _ca_position(model: ModelSpec, l: int):
    pos = model.cuts[l]
    if pos < len(model.layers) and isinstance(model.layers[pos], ChannelAttention):
        return pos
    return None


def insert_ca(model: ModelSpec, l: int, epsilon: float = DEFAULT_EPS) -> ModelSpec:
    """Copy of ``model`` whose split-point-``l`` output is rescaled by its attention map."""
    if l not in model.cuts:
        raise ValueError(f"split point {l} is not one of {model.split_points}")
    if _ca_position(model, l) is not None:
        raise ValueError(f"channel attention already present at split point {l}")
    return model.insert_layer(l, ChannelAttention(epsilon))


def remove_ca(model: ModelSpec, l: int) -> ModelSpec:
    if _ca_position(model, l) is None:
        raise ValueError(f"no channel attention at split point {l}")
    return model.remove_layer(l)


@dataclass
class ChannelImportance:
    split_point: int
    importance: np.ndarray
    sample_count: int

    @property
    def ranking(self) -> np.ndarray:
        """Channels by descending importance, ties broken by ascending index."""
        return np.lexsort((np.arange(len(self.importance)), -self.importance))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split_point", "channel", "importance", "rank"])
        rank = np.empty(len(self.importance), dtype=int)
        rank[self.ranking] = np.arange(len(self.importance))
        for c, v in enumerate(self.importance):
            w.writerow([self.split_point, c, repr(float(v)), int(rank[c])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, sample_count: int = 0) -> "ChannelImportance":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty importance table")
        splits = {int(r["split_point"]) for r in rows}
        if len(splits) != 1:
            raise ValueError(f"importance table mixes split points {sorted(splits)}")
        channels = [int(r["channel"]) for r in rows]
        if sorted(channels) != list(range(len(rows))):
            raise ValueError("importance table channels are not 0..C-1")
        imp = np.empty(len(rows))
        for r in rows:
            imp[int(r["channel"])] = float(r["importance"])
        return cls(splits.pop(), imp, sample_count)


def attention_maps(model_with_ca: ModelSpec, l: int, images: np.ndarray,
                   batch_size: int = 256) -> np.ndarray:
    """Per-sample attention maps ``[N, C_l]`` from the CA layer at ``l``."""
    pos = _ca_position(model_with_ca, l)
    if pos is None:
        raise ValueError(f"model has no channel attention at split point {l}")
    ca = model_with_ca.layers[pos]
    out = [ca.attention_map(model_with_ca.forward_device(l, images[i : i + batch_size]))
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def compute_importance(model_with_ca: ModelSpec, l: int, images: np.ndarray,
                       batch_size: int = 256) -> ChannelImportance:
    """Average attention weight of every channel over ``images``."""
    if len(images) == 0:
        raise ValueError("empty dataset")
    q = attention_maps(model_with_ca, l, images, batch_size)
    # fsum is exactly rounded, so the average does not depend on sample order.
    imp = np.array([math.fsum(q[:, c]) for c in range(q.shape[1])]) / len(q)
    return ChannelImportance(l, imp, len(q))


def spearman_rho(ranking_a, ranking_b) -> float:
    """Spearman correlation of two rankings (permutations of the same channels)."""
    a, b = np.asarray(ranking_a), np.asarray(ranking_b)
    n = len(a)
    if n != len(b) or n < 2:
        raise ValueError("rankings must have equal length >= 2")
    pos_a = np.empty(n, dtype=np.int64)
    pos_b = np.empty(n, dtype=np.int64)
    pos_a[a] = np.arange(n)
    pos_b[b] = np.arange(n)
    d2 = int(((pos_a - pos_b) ** 2).sum())
    return 1.0 - 6.0 * d2 / (n * (n * n - 1))


def batch_importances(model_with_ca, l, images, batch_count, batch_size, seed):
    if batch_count < 2:
        raise ValueError("batch_count must be >= 2")
    if batch_count * batch_size > len(images):
        raise ValueError(
            f"{batch_count} batches of {batch_size} need {batch_count * batch_size} samples, "
            f"dataset has {len(images)}"
        )
    perm = np.random.default_rng(seed).permutation(len(images))
    return [
        compute_importance(model_with_ca, l, images[perm[i * batch_size : (i + 1) * batch_size]])
        for i in range(batch_count)
    ]


def ranking_stability(model_with_ca: ModelSpec, l: int, images: np.ndarray, batch_count: int = 3,
                      batch_size: int = 256, seed: int = 0) -> float:
    """Minimum pairwise Spearman rho between importance rankings of disjoint batches."""
    imps = batch_importances(model_with_ca, l, images, batch_count, batch_size, seed)
    return min(spearman_rho(a.ranking, b.ranking) for a, b in itertools.combinations(imps, 2))
