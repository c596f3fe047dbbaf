"""Small masked MLP predictors and the three training objectives.

A predictor maps the combined feature vector phi to a single logit through
tanh hidden layers and an identity output. A boolean feature mask zeroes
input coordinates before the first layer, which is how the capacity tiers
differ: weaker tiers see fewer coordinates of the same phi.

Training is plain minibatch gradient descent with analytic gradients and a
seeded shuffle; there is no momentum or adaptivity, so runs are exactly
reproducible. Three losses are supported: binary logloss on click labels,
mean squared error on teacher logits, and a chunked pairwise ranking loss
over teacher-ordered groups.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Sequence

import numpy as np

from .core import ConfigurationError, DataError

__all__ = [
    "Predictor",
    "TrainConfig",
    "TrainingError",
    "PointwiseDataset",
    "GroupedDataset",
    "LOSS_KINDS",
    "init_predictor",
    "mask_for_fraction",
    "forward",
    "forward_batch",
    "predict_prob",
    "logloss",
    "distill_loss",
    "distill_loss_grad",
    "assign_chunks",
    "ranknet_loss",
    "ranknet_loss_grad",
    "ltr_target",
    "train",
    "finite_diff_check",
    "save_checkpoint",
    "load_checkpoint",
]

LOSS_KINDS = ("logloss", "distill", "ranknet")

_PROB_FLOOR = 1e-12
_PROB_CEIL = 1.0 - 1e-12

# Derived-stream tags, disjoint from the world's stream tags by module scope.
_STREAM_INIT = 10
_STREAM_SHUFFLE = 11
_STREAM_MASK = 12

_CHECKPOINT_MAGIC = b"CSPRED01"


class TrainingError(RuntimeError):
    """Raised when optimization produces a non-finite loss."""


def _rng(seed: int, *entropy: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=[seed, *entropy])))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class Predictor:
    """Masked MLP producing one logit per phi row.

    weights[i] has shape (fan_in, fan_out); the mask length must equal the
    first layer's fan_in and the last layer's fan_out must be 1.
    """

    feature_mask: np.ndarray
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if self.feature_mask.dtype != np.bool_:
            raise ConfigurationError("feature_mask must be a boolean array")
        if not self.weights:
            raise ConfigurationError("predictor needs at least one layer")
        if self.weights[0].shape[0] != self.feature_mask.shape[0]:
            raise ConfigurationError(
                f"mask length {self.feature_mask.shape[0]} does not match input dim "
                f"{self.weights[0].shape[0]}"
            )
        if self.weights[-1].shape[1] != 1:
            raise ConfigurationError("output layer must have width 1")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise ConfigurationError(f"bias shape mismatch at layer {i}")
            if i > 0 and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ConfigurationError(f"layer width mismatch between layers {i - 1} and {i}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass(frozen=True)
class TrainConfig:
    loss: str
    learning_rate: float
    epochs: int
    batch_size: int
    chunks: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.loss not in LOSS_KINDS:
            raise ConfigurationError(f"unknown loss {self.loss!r}, expected one of {LOSS_KINDS}")
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.chunks < 2:
            raise ConfigurationError("chunks must be >= 2")


@dataclass(frozen=True)
class PointwiseDataset:
    """Per-sample features and targets: click labels or teacher logits."""

    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.targets.shape != (self.features.shape[0],):
            raise DataError("features must be (N, D) with matching (N,) targets")
        if self.features.shape[0] == 0:
            raise DataError("dataset is empty")


@dataclass(frozen=True)
class GroupedDataset:
    """Per-request groups of (features, ordinal labels) for pairwise training."""

    groups: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self) -> None:
        if not self.groups:
            raise DataError("dataset has no groups")
        for feats, labels in self.groups:
            if feats.ndim != 2 or labels.shape != (feats.shape[0],):
                raise DataError("each group needs (m, D) features with matching (m,) labels")


def mask_for_fraction(dim: int, fraction: float, seed: int) -> np.ndarray:
    """Boolean mask keeping ceil(fraction * dim) coordinates.

    The kept set is a prefix of one seeded permutation, so masks for the same
    seed are nested across fractions: a weaker tier sees a strict subset of a
    stronger tier's coordinates.
    """
    if not (0.0 < fraction <= 1.0):
        raise ConfigurationError(f"fraction must lie in (0, 1], got {fraction}")
    keep = int(np.ceil(fraction * dim))
    perm = _rng(seed, _STREAM_MASK, dim).permutation(dim)
    mask = np.zeros(dim, dtype=bool)
    mask[perm[:keep]] = True
    return mask


def init_predictor(
    dim_phi: int, hidden_dims: Sequence[int], feature_mask: np.ndarray | None = None, seed: int = 0
) -> Predictor:
    """Fresh predictor with N(0, 1/fan_in) weights and zero biases."""
    if feature_mask is None:
        feature_mask = np.ones(dim_phi, dtype=bool)
    if feature_mask.shape != (dim_phi,):
        raise ConfigurationError(f"feature_mask must have shape ({dim_phi},)")
    rng = _rng(seed, _STREAM_INIT)
    dims = [dim_phi, *hidden_dims, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        biases.append(np.zeros(fan_out))
        weights.append(w)
    # Masked input rows are dead either way; zeroing them makes the stored
    # parameters independent of coordinates the model cannot see.
    weights[0][~feature_mask.astype(bool)] = 0.0
    return Predictor(
        feature_mask=feature_mask.astype(bool), weights=tuple(weights), biases=tuple(biases)
    )


def _forward_cached(p: Predictor, phi: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Logits plus the per-layer activations needed for backprop."""
    if phi.ndim != 2 or phi.shape[1] != p.feature_mask.shape[0]:
        raise DataError(
            f"phi must be (N, {p.feature_mask.shape[0]}), got {phi.shape}"
        )
    act = phi * p.feature_mask
    acts = [act]
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = act @ w + b
        act = z if i == last else np.tanh(z)
        acts.append(act)
    return acts[-1][:, 0], acts


def _backward(p: Predictor, acts: list[np.ndarray], dlogit: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Parameter gradients given dLoss/dlogit for each row."""
    delta = dlogit[:, None]
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(p.weights)  # type: ignore[list-item]
    for i in range(len(p.weights) - 1, -1, -1):
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ p.weights[i].T) * (1.0 - acts[i] ** 2)
    return grads


def forward_batch(p: Predictor, phi: np.ndarray) -> np.ndarray:
    """Logits for a batch of phi rows."""
    return _forward_cached(p, phi)[0]


def forward(p: Predictor, phi: np.ndarray) -> float:
    """Logit for a single phi row."""
    return float(forward_batch(p, phi[None, :])[0])


def predict_prob(p: Predictor, phi: np.ndarray) -> np.ndarray:
    """Calibratable probability head: sigmoid of the logit, clamped to (0, 1)."""
    return np.clip(_sigmoid(forward_batch(p, phi)), _PROB_FLOOR, _PROB_CEIL)


def logloss(prob: np.ndarray | float, label: np.ndarray | float) -> float:
    """Mean binary cross-entropy; probabilities are clamped away from {0, 1}."""
    prob = np.clip(np.asarray(prob, dtype=np.float64), _PROB_FLOOR, _PROB_CEIL)
    label = np.asarray(label, dtype=np.float64)
    if prob.shape != label.shape:
        raise DataError(f"prob shape {prob.shape} does not match label shape {label.shape}")
    if not np.all((label == 0.0) | (label == 1.0)):
        raise DataError("labels must be 0 or 1")
    return float(np.mean(-(label * np.log(prob) + (1.0 - label) * np.log1p(-prob))))


def distill_loss(logits_rank: np.ndarray, logits_pre: np.ndarray) -> float:
    """Mean squared error between teacher and student logits."""
    return distill_loss_grad(logits_rank, logits_pre)[0]


def distill_loss_grad(logits_rank: np.ndarray, logits_pre: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the student logits."""
    logits_rank = np.asarray(logits_rank, dtype=np.float64)
    logits_pre = np.asarray(logits_pre, dtype=np.float64)
    if logits_rank.shape != logits_pre.shape:
        raise DataError(
            f"teacher shape {logits_rank.shape} does not match student shape {logits_pre.shape}"
        )
    if logits_rank.size == 0:
        raise DataError("empty logit arrays")
    diff = logits_pre - logits_rank
    # overflow to inf is fine here; train() aborts on non-finite losses
    with np.errstate(over="ignore"):
        loss = float(np.mean(diff**2))
    return loss, 2.0 * diff / diff.size


def assign_chunks(n_items: int, chunks: int, boundary: int | None = None) -> np.ndarray:
    """Ordinal labels for a teacher-ranked list, best position first.

    The list splits into ``chunks`` contiguous chunks of near-equal size with
    the larger chunks at the bottom; labels run from ``chunks`` at the top to
    1 at the bottom, so a higher label means a better teacher rank. With
    ``boundary`` set (two-chunk mode only) the split is at that position
    instead, which reproduces a win-set/rest labeling.
    """
    if n_items < 1:
        raise DataError("n_items must be >= 1")
    if chunks < 2:
        raise ConfigurationError("chunks must be >= 2")
    if chunks > n_items:
        raise ConfigurationError(f"chunks ({chunks}) exceeds list length ({n_items})")
    if boundary is not None:
        if chunks != 2:
            raise ConfigurationError("boundary split requires chunks == 2")
        if boundary < 1:
            raise ConfigurationError(f"boundary must be >= 1, got {boundary}")
        sizes = [min(boundary, n_items), max(n_items - boundary, 0)]
        sizes = [s for s in sizes if s > 0]
        labels = np.concatenate(
            [np.full(s, 2 - i, dtype=np.int64) for i, s in enumerate(sizes)]
        )
        return labels
    base, rem = divmod(n_items, chunks)
    sizes = [base] * (chunks - rem) + [base + 1] * rem
    return np.concatenate(
        [np.full(s, chunks - i, dtype=np.int64) for i, s in enumerate(sizes)]
    )


def ranknet_loss(scores: np.ndarray, labels: np.ndarray) -> float:
    """Pairwise logistic loss over all ordered pairs with label_i > label_j."""
    return ranknet_loss_grad(scores, labels)[0]


def ranknet_loss_grad(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the scores.

    Uses logaddexp for the loss and the sigmoid identity for the gradient,
    both stable for large score gaps.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError("scores and labels must be matching 1-D arrays")
    better = labels[:, None] > labels[None, :]
    if not better.any():
        return 0.0, np.zeros_like(scores)
    diff = scores[:, None] - scores[None, :]
    loss = float(np.sum(np.logaddexp(0.0, -diff)[better]))
    # d/ds_i log(1 + exp(-(s_i - s_j))) = -sigmoid(-(s_i - s_j))
    coef = _sigmoid(-diff) * better
    grad = -coef.sum(axis=1) + coef.sum(axis=0)
    return loss, grad


def ltr_target(rank_prob: float, opt_bid: float, init_bid: float) -> float:
    """Regression target that bakes the bid optimization into the student.

    Serving multiplies the student score by the advertiser's init bid, so the
    target is rank_prob * opt_bid / init_bid: the product then approximates
    opt_bid * rank_prob while staying monotone in the init bid.
    """
    if init_bid <= 0 or opt_bid <= 0:
        raise DataError(f"bids must be positive, got opt_bid={opt_bid}, init_bid={init_bid}")
    if not (0.0 <= rank_prob <= 1.0):
        raise DataError(f"rank_prob must lie in [0, 1], got {rank_prob}")
    target = rank_prob * opt_bid / init_bid
    if not np.isfinite(target):
        raise DataError("ltr target is not finite")
    return float(target)


def _pointwise_loss_and_dlogit(
    loss_kind: str, logits: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    n = logits.shape[0]
    if loss_kind == "logloss":
        probs = _sigmoid(logits)
        loss = logloss(probs, targets)
        return loss, (probs - targets) / n
    # distill: targets are teacher logits
    return distill_loss_grad(targets, logits)


def _dataset_loss(p: Predictor, dataset, loss_kind: str) -> float:
    if loss_kind == "ranknet":
        total = 0.0
        for feats, labels in dataset.groups:
            total += ranknet_loss(forward_batch(p, feats), labels)
        return total / len(dataset.groups)
    loss, _ = _pointwise_loss_and_dlogit(loss_kind, forward_batch(p, dataset.features), dataset.targets)
    return loss


def _param_grads(p: Predictor, dataset, loss_kind: str) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Full-dataset loss and parameter gradients, matching _dataset_loss scaling."""
    if loss_kind != "ranknet":
        logits, acts = _forward_cached(p, dataset.features)
        loss, dlogit = _pointwise_loss_and_dlogit(loss_kind, logits, dataset.targets)
        return loss, _backward(p, acts, dlogit)
    total = 0.0
    grads: list[tuple[np.ndarray, np.ndarray]] | None = None
    g = len(dataset.groups)
    for feats, labels in dataset.groups:
        logits, acts = _forward_cached(p, feats)
        loss, dscore = ranknet_loss_grad(logits, labels)
        total += loss
        part = _backward(p, acts, dscore / g)
        if grads is None:
            grads = part
        else:
            grads = [(gw + pw, gb + pb) for (gw, gb), (pw, pb) in zip(grads, part)]
    assert grads is not None
    return total / g, grads


def _apply_step(p: Predictor, grads: list[tuple[np.ndarray, np.ndarray]], lr: float) -> Predictor:
    weights = tuple(w - lr * gw for w, (gw, _) in zip(p.weights, grads))
    biases = tuple(b - lr * gb for b, (_, gb) in zip(p.biases, grads))
    return replace(p, weights=weights, biases=biases)


def train(p: Predictor, dataset, cfg: TrainConfig) -> tuple[Predictor, list[float]]:
    """Minibatch gradient descent; returns the trained copy and the loss trace.

    The trace holds the full-dataset loss before training and after each
    epoch. Shuffling is seeded, so identical inputs give an identical trace.
    Aborts with TrainingError if any batch loss goes non-finite.
    """
    grouped = cfg.loss == "ranknet"
    if grouped and not isinstance(dataset, GroupedDataset):
        raise ConfigurationError("ranknet training needs a GroupedDataset")
    if not grouped and not isinstance(dataset, PointwiseDataset):
        raise ConfigurationError(f"{cfg.loss} training needs a PointwiseDataset")
    rng = _rng(cfg.seed, _STREAM_SHUFFLE)
    trace = [_dataset_loss(p, dataset, cfg.loss)]
    count = len(dataset.groups) if grouped else dataset.features.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(count)
        for start in range(0, count, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if grouped:
                batch = GroupedDataset(groups=tuple(dataset.groups[i] for i in idx))
            else:
                batch = PointwiseDataset(
                    features=dataset.features[idx], targets=dataset.targets[idx]
                )
            loss, grads = _param_grads(p, batch, cfg.loss)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss} at epoch {epoch}, batch start {start}"
                )
            p = _apply_step(p, grads, cfg.learning_rate)
        epoch_loss = _dataset_loss(p, dataset, cfg.loss)
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"non-finite loss {epoch_loss} after epoch {epoch}")
        trace.append(epoch_loss)
    return p, trace


def finite_diff_check(p: Predictor, loss_kind: str, dataset, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Meant for small predictors; refuses anything above 200 parameters because
    the check is quadratic in cost and meant as a unit-level oracle.
    """
    if loss_kind not in LOSS_KINDS:
        raise ConfigurationError(f"unknown loss {loss_kind!r}")
    if p.param_count > 200:
        raise ConfigurationError(
            f"finite_diff_check is limited to 200 parameters, predictor has {p.param_count}"
        )
    _, grads = _param_grads(p, dataset, loss_kind)
    worst = 0.0
    for layer, (gw, gb) in enumerate(grads):
        for kind, analytic in (("w", gw), ("b", gb)):
            flat = analytic.ravel()
            for j in range(flat.size):
                def shifted(delta: float) -> Predictor:
                    weights = [w.copy() for w in p.weights]
                    biases = [b.copy() for b in p.biases]
                    if kind == "w":
                        weights[layer].ravel()[j] += delta
                    else:
                        biases[layer].ravel()[j] += delta
                    return replace(p, weights=tuple(weights), biases=tuple(biases))

                hi = _dataset_loss(shifted(eps), dataset, loss_kind)
                lo = _dataset_loss(shifted(-eps), dataset, loss_kind)
                fd = (hi - lo) / (2 * eps)
                rel = abs(fd - flat[j]) / max(1e-8, abs(fd) + abs(flat[j]))
                worst = max(worst, rel)
    return worst


def save_checkpoint(path, p: Predictor, metadata: dict) -> None:
    """Write the predictor to a self-describing little-endian binary file."""
    meta_bytes = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        mask = p.feature_mask.astype(np.uint8)
        fh.write(struct.pack("<I", mask.size))
        fh.write(mask.tobytes())
        fh.write(struct.pack("<I", len(p.weights)))
        for w, b in zip(p.weights, p.biases):
            fh.write(struct.pack("<II", w.shape[0], w.shape[1]))
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)


def _read_exact(fh: BinaryIO, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise DataError(f"checkpoint truncated while reading {what}")
    return data


def load_checkpoint(path) -> tuple[Predictor, dict]:
    """Read a checkpoint written by save_checkpoint; validates magic and layout."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise DataError(f"bad checkpoint magic {magic!r}")
        (mask_len,) = struct.unpack("<I", _read_exact(fh, 4, "mask length"))
        mask = np.frombuffer(_read_exact(fh, mask_len, "mask"), dtype=np.uint8).astype(bool)
        (n_layers,) = struct.unpack("<I", _read_exact(fh, 4, "layer count"))
        if n_layers < 1:
            raise DataError("checkpoint has no layers")
        weights, biases = [], []
        for i in range(n_layers):
            fan_in, fan_out = struct.unpack("<II", _read_exact(fh, 8, f"layer {i} dims"))
            w = np.frombuffer(
                _read_exact(fh, 8 * fan_in * fan_out, f"layer {i} weights"), dtype="<f8"
            ).reshape(fan_in, fan_out)
            b = np.frombuffer(_read_exact(fh, 8 * fan_out, f"layer {i} bias"), dtype="<f8")
            weights.append(w.copy())
            biases.append(b.copy())
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "metadata length"))
        try:
            metadata = json.loads(_read_exact(fh, meta_len, "metadata").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"checkpoint metadata is corrupt: {exc}") from None
        trailing = fh.read(1)
        if trailing:
            raise DataError("checkpoint has trailing bytes")
    return Predictor(feature_mask=mask, weights=tuple(weights), biases=tuple(biases)), metadata
