"""Supervised query-adaptive fusion.

A small 1-D convolutional network reads the top-m points of every feature's
sorted score curve (features stacked as input channels) and emits one fusion
weight per feature through a softmax.  It is trained end to end: the weights
fuse the raw scores with the sum rule, and a hinge loss pushes the mean fused
score of the true matches at least a margin above the mean of the hardest
false matches.

Everything is plain numpy in float64 with hand-written backpropagation; the
architecture is fixed to

    Conv1d(K->C, k, same) -> ReLU -> Conv1d(C->C, k, valid) -> ReLU
    -> global max pool -> Dense(C->K) -> softmax

Global average pooling is available (``pool="avg"``) but dilutes the few
informative points at the head of the curve over the whole length.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import jsonio
from .curves import ScoreTable, check_same_universe
from .errors import ConfigError, DataError

POOLS = ("avg", "max")
PARAM_NAMES = ("conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "dense.weight", "dense.bias")


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 1.0
    alpha: float = 2.0
    learning_rate: float = 0.01
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    channels: int = 16
    kernel: int = 5
    pool: str = "max"

    def __post_init__(self):
        if self.pool not in POOLS:
            raise ConfigError(f"unknown pooling {self.pool!r}; expected one of {POOLS}")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if self.learning_rate < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("need learning_rate >= 0, epochs >= 0, batch_size >= 1")
        if self.channels < 1 or self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("channels must be >= 1 and kernel a positive odd number")


# --------------------------------------------------------------------------
# inputs
# --------------------------------------------------------------------------


def curve_stack(per_feature_scores, m: int) -> np.ndarray:
    """Top-m of each feature's sorted curve, stacked into a (K, m) array."""
    scores = np.asarray(per_feature_scores, dtype=np.float64)
    if scores.ndim != 2:
        raise DataError(f"expected K score lists, got shape {scores.shape}")
    if scores.shape[1] < m:
        raise DataError(f"gallery of {scores.shape[1]} items is shorter than m={m}")
    return -np.sort(-scores, axis=1)[:, :m]


@dataclass(frozen=True)
class MatchPartition:
    """Which gallery items are true matches of the query."""

    is_match: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "is_match", np.asarray(self.is_match, dtype=bool))

    @classmethod
    def from_labels(cls, gallery_labels: Sequence, query_label) -> "MatchPartition":
        return cls(np.array([lab == query_label for lab in gallery_labels], dtype=bool))

    @property
    def n_pos(self) -> int:
        return int(self.is_match.sum())

    @property
    def n_neg(self) -> int:
        return int(self.is_match.size - self.is_match.sum())

    def positives(self, fused: np.ndarray) -> np.ndarray:
        return np.asarray(fused)[self.is_match]

    def negatives(self, fused: np.ndarray) -> np.ndarray:
        return np.asarray(fused)[~self.is_match]


def hard_negative_count(n_pos: int, n_neg: int, alpha: float) -> int:
    # round first so 0.1 * 30 does not ceil to 4
    return min(n_neg, max(1, math.ceil(round(alpha * n_pos, 9))))


def _margin_loss_and_grad(fused: np.ndarray, part: MatchPartition, d: float, alpha: float):
    fused = np.asarray(fused, dtype=np.float64)
    if fused.shape != part.is_match.shape:
        raise DataError(f"{fused.size} fused scores for a partition over {part.is_match.size} items")
    pos_idx = np.flatnonzero(part.is_match)
    neg_idx = np.flatnonzero(~part.is_match)
    if pos_idx.size == 0:
        raise DataError("query has no true match in gallery")
    if neg_idx.size == 0:
        raise DataError("query has no false match in gallery")
    n_hard = hard_negative_count(pos_idx.size, neg_idx.size, alpha)
    hard = neg_idx[np.argsort(-fused[neg_idx], kind="stable")[:n_hard]]
    gap = fused[hard].mean() + d - fused[pos_idx].mean()
    grad = np.zeros_like(fused)
    if gap <= 0:
        return 0.0, grad
    grad[hard] = 1.0 / hard.size
    grad[pos_idx] = -1.0 / pos_idx.size
    return float(gap), grad


def margin_loss(fused, partition: MatchPartition, d: float = 1.0, alpha: float = 2.0) -> float:
    """Hinge on (mean of hard negatives + d - mean of positives).

    Hard negatives are the ceil(alpha * #positives) highest-scored false
    matches, or all of them if there are fewer.
    """
    return _margin_loss_and_grad(fused, partition, d, alpha)[0]


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


def _conv_forward(x, w, b, pad):
    # x (B, C, L), w (O, C, k) -> (B, O, L + 2 pad - k + 1)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    cols = sliding_window_view(x, w.shape[2], axis=2)  # (B, C, Lout, k)
    z = np.tensordot(cols, w, axes=([1, 3], [1, 2]))  # (B, Lout, O)
    return z.transpose(0, 2, 1) + b[None, :, None], cols


def _conv_backward(dz, cols, w, pad, in_len):
    dw = np.tensordot(dz, cols, axes=([0, 2], [0, 2]))  # (O, C, k)
    db = dz.sum(axis=(0, 2))
    k = w.shape[2]
    lout = dz.shape[2]
    dx = np.zeros((dz.shape[0], w.shape[1], in_len + 2 * pad))
    for t in range(k):
        dx[:, :, t:t + lout] += np.tensordot(w[:, :, t], dz, axes=([0], [1])).transpose(1, 0, 2)
    if pad:
        dx = dx[:, :, pad:-pad]
    return dx, dw, db


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class SqafModel:
    """Network parameters plus the settings needed to rebuild it."""

    num_features: int
    m: int
    params: dict
    seed: int = 0
    channels: int = 16
    kernel: int = 5
    pool: str = "max"
    train_config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @classmethod
    def init(cls, num_features: int, m: int, seed: int = 0, channels: int = 16, kernel: int = 5,
             pool: str = "max") -> "SqafModel":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization from a seeded generator."""
        if num_features < 1:
            raise ConfigError("need at least one feature")
        if pool not in POOLS:
            raise ConfigError(f"unknown pooling {pool!r}; expected one of {POOLS}")
        if m < kernel:
            raise ConfigError(f"m={m} must be at least the kernel size {kernel}")
        rng = np.random.default_rng(seed)
        shapes = cls.param_shapes(num_features, channels, kernel)
        fan_in = {"conv1": num_features * kernel, "conv2": channels * kernel, "dense": channels}
        params = {}
        for name in PARAM_NAMES:
            bound = 1.0 / math.sqrt(fan_in[name.split(".")[0]])
            params[name] = rng.uniform(-bound, bound, size=shapes[name])
        return cls(num_features, m, params, seed, channels, kernel, pool)

    @staticmethod
    def param_shapes(k: int, c: int, ks: int) -> dict:
        return {
            "conv1.weight": (c, k, ks),
            "conv1.bias": (c,),
            "conv2.weight": (c, c, ks),
            "conv2.bias": (c,),
            "dense.weight": (k, c),
            "dense.bias": (k,),
        }

    @property
    def architecture(self) -> dict:
        return {
            "input": [self.num_features, self.m],
            "layers": [
                {"type": "conv1d", "in": self.num_features, "out": self.channels,
                 "kernel": self.kernel, "stride": 1, "padding": "same"},
                {"type": "relu"},
                {"type": "conv1d", "in": self.channels, "out": self.channels,
                 "kernel": self.kernel, "stride": 1, "padding": "valid"},
                {"type": "relu"},
                {"type": f"global_{self.pool}_pool"},
                {"type": "dense", "in": self.channels, "out": self.num_features},
                {"type": "softmax"},
            ],
        }

    def copy(self) -> "SqafModel":
        return SqafModel(self.num_features, self.m, {k: v.copy() for k, v in self.params.items()},
                         self.seed, self.channels, self.kernel, self.pool, dict(self.train_config),
                         list(self.history))

    # ---- forward / backward ------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != (self.num_features, self.m):
            raise DataError(
                f"curve stack shape {x.shape[-2:]} does not match model input "
                f"({self.num_features}, {self.m})"
            )
        return x

    def _forward(self, x):
        p = self.params
        pad = self.kernel // 2
        z1, cols1 = _conv_forward(x, p["conv1.weight"], p["conv1.bias"], pad)
        a1 = np.maximum(z1, 0.0)
        z2, cols2 = _conv_forward(a1, p["conv2.weight"], p["conv2.bias"], 0)
        a2 = np.maximum(z2, 0.0)
        if self.pool == "max":
            arg = a2.argmax(axis=2)
            pooled = np.take_along_axis(a2, arg[:, :, None], axis=2)[:, :, 0]
        else:
            arg = None
            pooled = a2.mean(axis=2)
        logits = pooled @ p["dense.weight"].T + p["dense.bias"]
        w = _softmax(logits)
        cache = (x, z1, cols1, a1, z2, cols2, pooled, arg)
        return w, logits, cache

    def predict(self, stacks) -> np.ndarray:
        """Fusion weights for one (K, m) stack or a batch (B, K, m)."""
        x = self._check_input(stacks)
        w, _, _ = self._forward(x)
        return w[0] if np.ndim(stacks) == 2 else w

    def _backward(self, cache, dlogits):
        p = self.params
        x, z1, cols1, a1, z2, cols2, pooled, arg = cache
        grads = {"dense.weight": dlogits.T @ pooled, "dense.bias": dlogits.sum(axis=0)}
        dpooled = dlogits @ p["dense.weight"]
        if arg is None:
            da2 = np.repeat(dpooled[:, :, None] / z2.shape[2], z2.shape[2], axis=2)
        else:
            da2 = np.zeros_like(z2)
            np.put_along_axis(da2, arg[:, :, None], dpooled[:, :, None], axis=2)
        dz2 = da2 * (z2 > 0)
        da1, grads["conv2.weight"], grads["conv2.bias"] = _conv_backward(dz2, cols2, p["conv2.weight"], 0, a1.shape[2])
        dz1 = da1 * (z1 > 0)
        _, grads["conv1.weight"], grads["conv1.bias"] = _conv_backward(
            dz1, cols1, p["conv1.weight"], self.kernel // 2, x.shape[2])
        return grads

    def loss(self, stacks, scores, partitions, d: float = 1.0, alpha: float = 2.0) -> float:
        """Mean batch loss without the backward pass (for finite differences)."""
        w, _, _ = self._forward(self._check_input(stacks))
        return sum(_margin_loss_and_grad(w[i] @ np.asarray(scores[i], dtype=np.float64), partitions[i], d, alpha)[0]
                   for i in range(w.shape[0])) / w.shape[0]

    def loss_and_grads(self, stacks, scores, partitions, d: float = 1.0, alpha: float = 2.0):
        """Mean loss over a batch and its exact gradient for every parameter.

        Args:
            stacks: (B, K, m) curve stacks.
            scores: length-B sequence of (K, N_b) raw per-feature gallery scores.
            partitions: length-B sequence of MatchPartition.

        Returns:
            (loss, grads, dlogits) where grads maps parameter name to array.
        """
        x = self._check_input(stacks)
        if not (len(scores) == len(partitions) == x.shape[0]):
            raise DataError("stacks, scores and partitions must have the same length")
        w, logits, cache = self._forward(x)
        bsz = x.shape[0]
        total = 0.0
        dw = np.zeros_like(w)
        for i in range(bsz):
            s = np.asarray(scores[i], dtype=np.float64)
            if s.shape[0] != self.num_features:
                raise DataError(f"sample {i}: {s.shape[0]} feature score lists, model expects {self.num_features}")
            loss, dfused = _margin_loss_and_grad(w[i] @ s, partitions[i], d, alpha)
            total += loss
            dw[i] = s @ dfused
        dw /= bsz
        # softmax Jacobian-vector product
        dlogits = w * (dw - (w * dw).sum(axis=1, keepdims=True))
        return total / bsz, self._backward(cache, dlogits), dlogits

    # ---- persistence -------------------------------------------------------

    def save(self, path: str | Path, run_config: dict | None = None) -> None:
        """Write header JSON plus raw little-endian float64 parameters.

        ``run_config`` is stored verbatim in the header for provenance.
        """
        header = {
            "format": MODEL_FORMAT,
            "architecture": self.architecture,
            "num_features": self.num_features,
            "m": self.m,
            "channels": self.channels,
            "kernel": self.kernel,
            "pool": self.pool,
            "seed": self.seed,
            "params": [[n, list(self.params[n].shape)] for n in PARAM_NAMES],
            "train_config": self.train_config,
            "history": self.history,
            "run_config": run_config or {},
        }
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(jsonio.dumps(header).encode("utf-8") + b"\n")
            for n in PARAM_NAMES:
                fh.write(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "SqafModel":
        with open(path, "rb") as fh:
            if fh.read(len(MODEL_MAGIC)) != MODEL_MAGIC:
                raise DataError(f"{path}: not a model checkpoint")
            header = json.loads(fh.readline().decode("utf-8"))
            blob = fh.read()
        params, offset = {}, 0
        for name, shape in header["params"]:
            count = int(np.prod(shape))
            nbytes = count * 8
            if offset + nbytes > len(blob):
                raise DataError(f"{path}: truncated parameter data")
            params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
            offset += nbytes
        if offset != len(blob):
            raise DataError(f"{path}: trailing bytes after parameters")
        model = cls(header["num_features"], header["m"], params, header["seed"],
                    header["channels"], header["kernel"], header.get("pool", "max"),
                    header.get("train_config", {}),
                    header.get("history", []))
        expected = cls.param_shapes(model.num_features, model.channels, model.kernel)
        for name in PARAM_NAMES:
            if params.get(name) is None or params[name].shape != expected[name]:
                raise DataError(f"{path}: parameter {name} missing or misshapen")
        return model


MODEL_MAGIC = b"QAFSQAF\x01\n"
MODEL_FORMAT = "qafusion.sqaf/1"


# --------------------------------------------------------------------------
# functional API
# --------------------------------------------------------------------------


def forward(model: SqafModel, stack) -> np.ndarray:
    """Fusion weights (length K, sums to 1) for one curve stack."""
    return model.predict(np.asarray(stack, dtype=np.float64))


def backward(model: SqafModel, stack, partition: MatchPartition, per_feature_scores, cfg: TrainConfig) -> dict:
    """Gradient of the single-sample loss with respect to every parameter."""
    _, grads, _ = model.loss_and_grads(np.asarray(stack)[None], [per_feature_scores], [partition],
                                       cfg.margin, cfg.alpha)
    return grads


@dataclass(frozen=True)
class GradCheck:
    max_rel_error: float
    worst_param: str
    smooth: bool  # False if some stencil point crossed a ReLU/max/hinge/hard-set boundary


def _loss_signature(model: SqafModel, x, scores, part, d, alpha):
    w, _, cache = model._forward(x)
    _, z1, _, _, z2, _, _, arg = cache
    fused = w[0] @ scores
    neg_idx = np.flatnonzero(~part.is_match)
    n_hard = hard_negative_count(part.n_pos, neg_idx.size, alpha)
    hard = np.sort(neg_idx[np.argsort(-fused[neg_idx], kind="stable")[:n_hard]])
    loss, _ = _margin_loss_and_grad(fused, part, d, alpha)
    sig = (np.packbits(z1 > 0).tobytes(), np.packbits(z2 > 0).tobytes(),
           None if arg is None else arg.tobytes(), hard.tobytes(), loss > 0)
    return loss, sig


def gradient_check(model: SqafModel, sample: "Sample", d: float = 1.0, alpha: float = 2.0,
                   h: float = 1e-5) -> GradCheck:
    """Compare analytic gradients with central differences on every parameter.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``.  The loss is only
    piecewise smooth, so the result also reports whether every stencil stayed
    on one linear piece; differences across a kink are meaningless.
    """
    model = model.copy()
    x = np.asarray(sample.stack, dtype=np.float64)[None]
    scores = np.asarray(sample.scores, dtype=np.float64)
    _, grads, _ = model.loss_and_grads(x, [scores], [sample.partition], d, alpha)
    _, sig0 = _loss_signature(model, x, scores, sample.partition, d, alpha)
    worst, worst_name, smooth = 0.0, "", True
    for name in PARAM_NAMES:
        p = model.params[name]
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp, sp = _loss_signature(model, x, scores, sample.partition, d, alpha)
            p[idx] = old - h
            lm, sm = _loss_signature(model, x, scores, sample.partition, d, alpha)
            p[idx] = old
            smooth = smooth and sp == sig0 and sm == sig0
            num = (lp - lm) / (2 * h)
            ana = grads[name][idx]
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
            if rel > worst:
                worst, worst_name = rel, f"{name}{list(idx)}"
    return GradCheck(worst, worst_name, smooth)


@dataclass(frozen=True)
class Sample:
    stack: np.ndarray
    scores: np.ndarray
    partition: MatchPartition


def make_samples(tables: Sequence[ScoreTable], relevance: np.ndarray, m: int) -> list[Sample]:
    """One training sample per query that has at least one true match."""
    check_same_universe(tables)
    stack = np.stack([t.scores for t in tables])
    out = []
    for q in range(stack.shape[1]):
        if not relevance[q].any():
            continue
        s = stack[:, q, :]
        out.append(Sample(curve_stack(s, m), s, MatchPartition(relevance[q])))
    return out


def train(dataset: Sequence[Sample], cfg: TrainConfig, model: SqafModel | None = None) -> SqafModel:
    """Mini-batch SGD on the margin loss.

    The per-epoch mean loss is appended to ``model.history``.  With a fixed
    seed the result is bitwise reproducible.
    """
    if not dataset:
        raise DataError("empty training set")
    for i, s in enumerate(dataset):
        if s.partition.n_pos == 0:
            raise DataError(f"training sample {i}: query has no true match in gallery")
    k, m = dataset[0].stack.shape
    if model is None:
        model = SqafModel.init(k, m, cfg.seed, cfg.channels, cfg.kernel, cfg.pool)
    else:
        model = model.copy()
    model.train_config = asdict(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    n = len(dataset)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            loss, grads, _ = model.loss_and_grads(
                np.stack([b.stack for b in batch]), [b.scores for b in batch],
                [b.partition for b in batch], cfg.margin, cfg.alpha)
            for name in PARAM_NAMES:
                model.params[name] -= cfg.learning_rate * grads[name]
            losses.append(loss * len(batch))
        model.history.append(float(sum(losses) / n))
    return model


def sqaf_weights(model: SqafModel, tables: Sequence[ScoreTable]) -> np.ndarray:
    """Per-query weights (Q, K) predicted from each query's curve stack."""
    check_same_universe(tables)
    if len(tables) != model.num_features:
        raise DataError(f"model expects {model.num_features} features, got {len(tables)}")
    stack = np.stack([t.scores for t in tables])  # (K, Q, N)
    stacks = -np.sort(-stack, axis=2)[:, :, :model.m].transpose(1, 0, 2)
    if stacks.shape[2] < model.m:
        raise DataError(f"gallery of {stacks.shape[2]} items is shorter than m={model.m}")
    return model.predict(stacks) if len(stacks) else np.empty((0, len(tables)))
