"""Contrastive semantic alignment classifier and the batch adaptation loop.

The classifier is an encoder/head pair: the encoder maps sensor vectors into
a small embedding space, the head turns embeddings into an anomaly
probability.  The training objective combines binary cross-entropy on a
labeled batch with two cross-domain pair terms computed on encoder
embeddings:

    loss = (1 - alpha) * classification
         + alpha * (alignment + separation)

where alignment is the mean over same-label source/target pairs of
``0.5 * ||g(x_s) - g(x_t)||^2`` and separation the mean over different-label
pairs of ``0.5 * max(0, margin - ||g(x_s) - g(x_t)||)^2``.

An adaptation session owns the source set, a growing target buffer, and the
batch cursor: train on one labeled batch, predict the next, expand the target
buffer with the predictions, and restart from the retained source-pretrained
snapshot whenever a changepoint invalidates the current target domain.
Features are standardised with source statistics before they reach the
networks — the pair distances are scale-sensitive.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

from .tinynn import (
    Adam,
    Network,
    NetworkSpec,
    OptimizerConfig,
    Parameters,
    bce_loss,
    deserialize_parameters,
    init_parameters,
    make_optimizer,
    serialize_parameters,
)

__all__ = [
    "CcsaConfig",
    "CcsaModel",
    "PairSet",
    "sample_pairs",
    "ccsa_loss",
    "TrainMetrics",
    "AdaptationSession",
    "Standardizer",
]

LabelMode = Literal["true-labels", "pseudo-labels"]


@dataclass(frozen=True)
class CcsaConfig:
    embedding_dim: int = 8
    hidden_sizes: tuple[int, ...] = (16,)
    alpha: float = 0.25
    margin: float = 1.0
    threshold: float = 0.5
    epochs: int = 100
    pairs_per_kind: int = 128
    learning_rate: float = 1e-3
    optimizer: Literal["sgd", "adam"] = "adam"
    pretrain_epochs: int = 500
    batch_size: int = 50
    label_mode: LabelMode = "true-labels"
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.margin > 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class Standardizer:
    """Per-feature z-scoring with statistics frozen at fit time."""

    def __init__(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=float)
        self.mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.std = np.where(std > 1e-9, std, 1.0)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std


class CcsaModel:
    """Encoder + sigmoid head over standardised feature vectors."""

    def __init__(self, encoder: Network, head: Network, config: CcsaConfig) -> None:
        if encoder.spec.layer_sizes[-1] != head.spec.layer_sizes[0]:
            raise ValueError("encoder output dimension must match head input")
        self.encoder = encoder
        self.head = head
        self.config = config

    @classmethod
    def build(cls, n_features: int, config: CcsaConfig = CcsaConfig()) -> "CcsaModel":
        enc_spec = NetworkSpec(
            (n_features, *config.hidden_sizes, config.embedding_dim),
            hidden_activation="tanh",
            output_activation="tanh",
            seed=config.seed,
        )
        head_spec = NetworkSpec(
            (config.embedding_dim, 1),
            hidden_activation="tanh",
            output_activation="sigmoid",
            seed=config.seed + 1,
        )
        return cls(Network(enc_spec), Network(head_spec), config)

    def score(self, x: np.ndarray) -> np.ndarray:
        """Anomaly probability h(g(x)) per row."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        emb, _ = self.encoder.forward(x[None, :] if squeeze else x)
        out, _ = self.head.forward(emb)
        scores = out[:, 0]
        return float(scores[0]) if squeeze else scores

    def embed(self, x: np.ndarray) -> np.ndarray:
        emb, _ = self.encoder.forward(np.asarray(x, dtype=float))
        return emb

    def snapshot(self) -> tuple[Parameters, Parameters]:
        return self.encoder.params.copy(), self.head.params.copy()

    def restore(self, snapshot: tuple[Parameters, Parameters]) -> None:
        enc, head = snapshot
        self.encoder.params = enc.copy()
        self.head.params = head.copy()

    def parameter_digest(self) -> str:
        import hashlib

        flat = np.concatenate([self.encoder.params.flat(), self.head.params.flat()])
        return hashlib.sha256(flat.tobytes()).hexdigest()

    def serialize(self) -> str:
        import json

        return json.dumps(
            {
                "encoder": serialize_parameters(self.encoder.spec, self.encoder.params),
                "head": serialize_parameters(self.head.spec, self.head.params),
            }
        )


@dataclass(frozen=True)
class PairSet:
    """Cross-domain index pairs; ``missing`` names pair kinds that could not
    be formed from the labels present."""

    positive: tuple[tuple[int, int], ...]
    negative: tuple[tuple[int, int], ...]
    missing: tuple[str, ...] = ()


def sample_pairs(
    source_labels: np.ndarray,
    target_labels: np.ndarray,
    count: int,
    rng: np.random.Generator | int,
) -> PairSet:
    """Draw ``count`` same-label and ``count`` different-label cross-domain
    index pairs (source index, target index).

    Sampling is with replacement; when a kind admits no pair at all it is
    reported in ``missing`` instead of raising, so training can proceed on
    the kinds that exist.
    """

    if isinstance(rng, int):
        rng = np.random.default_rng(rng)
    ys = np.asarray(source_labels, dtype=int)
    yt = np.asarray(target_labels, dtype=int)
    if ys.size == 0 or yt.size == 0:
        raise ValueError("both domains must be non-empty")

    def draw(match: bool) -> tuple[tuple[int, int], ...]:
        pairs: list[tuple[int, int]] = []
        s_by_label = {label: np.flatnonzero(ys == label) for label in (0, 1)}
        t_idx = np.arange(yt.size)
        # Per-kind feasibility: a pair exists iff some target label has a
        # matching (or opposing) source label present.
        feasible = any(
            s_by_label[label if match else 1 - label].size and np.any(yt == label)
            for label in (0, 1)
        )
        if not feasible:
            return ()
        while len(pairs) < count:
            t = int(rng.choice(t_idx))
            wanted = yt[t] if match else 1 - yt[t]
            pool = s_by_label[wanted]
            if pool.size == 0:
                continue
            s = int(rng.choice(pool))
            pairs.append((s, t))
        return tuple(pairs)

    positive = draw(match=True)
    negative = draw(match=False)
    missing = tuple(
        name for name, got in (("positive", positive), ("negative", negative)) if not got
    )
    return PairSet(positive, negative, missing)


def _pair_terms(
    model: CcsaModel,
    xs: np.ndarray,
    xt: np.ndarray,
    margin: float,
    positive: bool,
) -> tuple[float, np.ndarray, np.ndarray, object, object]:
    """Loss and embedding gradients for one pair kind (mean over pairs)."""

    emb_s, cache_s = model.encoder.forward(xs)
    emb_t, cache_t = model.encoder.forward(xt)
    diff = emb_s - emb_t
    count = xs.shape[0]
    if positive:
        loss = float(0.5 * np.sum(diff**2) / count)
        grad_s = diff / count
    else:
        dist = np.sqrt(np.maximum(np.sum(diff**2, axis=1), 1e-24))
        slack = np.maximum(margin - dist, 0.0)
        loss = float(0.5 * np.sum(slack**2) / count)
        grad_s = (-slack / dist)[:, None] * diff / count
    return loss, grad_s, -grad_s, cache_s, cache_t


def ccsa_loss(
    model: CcsaModel,
    positive_pairs: tuple[np.ndarray, np.ndarray] | None,
    negative_pairs: tuple[np.ndarray, np.ndarray] | None,
    batch_x: np.ndarray,
    batch_y: np.ndarray,
    *,
    alpha: float | None = None,
    margin: float | None = None,
) -> tuple[float, Parameters, Parameters, dict[str, float]]:
    """Composite loss with gradients for encoder and head.

    Pair arguments are (source rows, target rows) matrices of equal length;
    either may be None/empty when that pair kind is unavailable.  Returns
    (loss, encoder gradients, head gradients, loss components).
    """

    alpha = model.config.alpha if alpha is None else alpha
    margin = model.config.margin if margin is None else margin
    batch_x = np.atleast_2d(np.asarray(batch_x, dtype=float))
    batch_y = np.asarray(batch_y, dtype=float).reshape(-1)
    if batch_x.shape[0] == 0:
        raise ValueError("labeled batch must be non-empty")

    emb, enc_cache = model.encoder.forward(batch_x)
    probs, head_cache = model.head.forward(emb)
    p = probs[:, 0]
    cls_loss = bce_loss(p, batch_y)
    # Sigmoid output + cross-entropy: gradient at the head pre-activation.
    grad_head_pre = ((p - batch_y) / batch_x.shape[0])[:, None]
    head_grads, grad_emb = model.head.backward(
        head_cache, grad_head_pre, grad_is_preactivation=True
    )
    enc_grads, _ = model.encoder.backward(enc_cache, grad_emb)

    cls_weight = 1.0 - alpha
    _scale_params(head_grads, cls_weight)
    _scale_params(enc_grads, cls_weight)

    sa_loss = sep_loss = 0.0
    for pairs, positive in ((positive_pairs, True), (negative_pairs, False)):
        if pairs is None:
            continue
        xs, xt = pairs
        if xs.shape[0] == 0:
            continue
        loss, grad_s, grad_t, cache_s, cache_t = _pair_terms(model, xs, xt, margin, positive)
        if positive:
            sa_loss = loss
        else:
            sep_loss = loss
        if alpha > 0.0:
            g_s, _ = model.encoder.backward(cache_s, alpha * grad_s)
            g_t, _ = model.encoder.backward(cache_t, alpha * grad_t)
            _add_params(enc_grads, g_s)
            _add_params(enc_grads, g_t)

    total = cls_weight * cls_loss + alpha * (sa_loss + sep_loss)
    parts = {"classification": cls_loss, "alignment": sa_loss, "separation": sep_loss}
    return total, enc_grads, head_grads, parts


def _scale_params(params: Parameters, factor: float) -> None:
    for arr in params.weights + params.biases:
        arr *= factor


def _add_params(target: Parameters, other: Parameters) -> None:
    for t, o in zip(target.weights + target.biases, other.weights + other.biases):
        t += o


@dataclass(frozen=True)
class TrainMetrics:
    final_loss: float
    epochs_run: int
    pair_warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class TargetRecord:
    """One target-domain sample with the provenance of its label."""

    values: np.ndarray
    label: int
    label_source: Literal["true", "pseudo"]


class AdaptationSession:
    """Batchwise domain adaptation against a fixed labeled source set."""

    def __init__(
        self,
        source_x: np.ndarray,
        source_y: np.ndarray,
        config: CcsaConfig = CcsaConfig(),
        *,
        pretrained: CcsaModel | None = None,
        start_cursor: int = 0,
    ) -> None:
        source_x = np.atleast_2d(np.asarray(source_x, dtype=float))
        if source_x.shape[0] == 0:
            raise ValueError("source set must be non-empty")
        self.config = config
        self.scaler = Standardizer(source_x)
        self.source_x = self.scaler.transform(source_x)
        self.source_y = np.asarray(source_y, dtype=int).reshape(-1)
        if self.source_y.shape[0] != self.source_x.shape[0]:
            raise ValueError("source labels must match source rows")
        self.model = pretrained or CcsaModel.build(source_x.shape[1], config)
        self.cursor = start_cursor
        self.targets: list[TargetRecord] = []
        self.trained_batches = 0
        self._rng = np.random.default_rng(config.seed)
        self._pretrained_snapshot = self.model.snapshot()
        self._enc_opt, self._head_opt = self._fresh_optimizers()

    def _fresh_optimizers(self):
        cfg = OptimizerConfig(kind=self.config.optimizer, learning_rate=self.config.learning_rate)
        return make_optimizer(cfg), make_optimizer(cfg)

    # -- source pre-training ---------------------------------------------------

    def pretrain_source(self, epochs: int | None = None) -> TrainMetrics:
        """Classification-only training on the source set; retains the
        resulting parameters as the restart snapshot."""

        epochs = self.config.pretrain_epochs if epochs is None else epochs
        enc_opt, head_opt = self._fresh_optimizers()
        loss = float("nan")
        for _ in range(epochs):
            loss, enc_g, head_g, _ = ccsa_loss(
                self.model, None, None, self.source_x, self.source_y, alpha=0.0
            )
            enc_opt.step(self.model.encoder.params, enc_g)
            head_opt.step(self.model.head.params, head_g)
        self._pretrained_snapshot = self.model.snapshot()
        return TrainMetrics(final_loss=loss, epochs_run=epochs)

    @property
    def pretrained_snapshot(self) -> tuple[Parameters, Parameters]:
        return self._pretrained_snapshot

    def source_model_digest(self) -> str:
        probe = CcsaModel.build(self.source_x.shape[1], self.config)
        probe.restore(self._pretrained_snapshot)
        return probe.parameter_digest()

    # -- target-side operations -------------------------------------------------

    def _target_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.vstack([t.values for t in self.targets])
        y = np.array([t.label for t in self.targets], dtype=int)
        return x, y

    def train_on_batch(
        self,
        batch_x: np.ndarray,
        batch_y: np.ndarray,
        label_source: Literal["true", "pseudo"] = "true",
    ) -> TrainMetrics:
        """Adapt the model on one labeled target batch.

        The batch (standardised) joins the target buffer first, pairs are
        re-sampled from source x target every epoch, and the classification
        term sees the batch together with an equal-sized source draw so the
        source decision boundary is not forgotten.
        """

        batch_x = np.atleast_2d(np.asarray(batch_x, dtype=float))
        batch_y = np.asarray(batch_y, dtype=int).reshape(-1)
        if batch_x.shape[0] == 0:
            raise ValueError("training batch must be non-empty")
        z = self.scaler.transform(batch_x)
        for row, label in zip(z, batch_y):
            self.targets.append(TargetRecord(row, int(label), label_source))

        target_x, target_y = self._target_matrix()
        loss = float("nan")
        warnings: tuple[str, ...] = ()
        for _ in range(self.config.epochs):
            pairs = sample_pairs(
                self.source_y, target_y, self.config.pairs_per_kind, self._rng
            )
            warnings = pairs.missing
            pos = neg = None
            if pairs.positive:
                si = np.fromiter((p[0] for p in pairs.positive), int)
                ti = np.fromiter((p[1] for p in pairs.positive), int)
                pos = (self.source_x[si], target_x[ti])
            if pairs.negative:
                si = np.fromiter((p[0] for p in pairs.negative), int)
                ti = np.fromiter((p[1] for p in pairs.negative), int)
                neg = (self.source_x[si], target_x[ti])
            draw = self._rng.choice(self.source_x.shape[0], size=min(z.shape[0], self.source_x.shape[0]), replace=False)
            cls_x = np.vstack([z, self.source_x[draw]])
            cls_y = np.concatenate([batch_y, self.source_y[draw]])
            loss, enc_g, head_g, _ = ccsa_loss(self.model, pos, neg, cls_x, cls_y)
            self._enc_opt.step(self.model.encoder.params, enc_g)
            self._head_opt.step(self.model.head.params, head_g)
        self.cursor += batch_x.shape[0]
        self.trained_batches += 1
        return TrainMetrics(
            final_loss=loss, epochs_run=self.config.epochs, pair_warnings=warnings
        )

    def predict_batch(self, batch_x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Score a batch; label 1 strictly above the decision threshold.

        The predicted batch expands the target buffer with pseudo-labeled
        records, as the adaptation protocol prescribes.
        """

        batch_x = np.atleast_2d(np.asarray(batch_x, dtype=float))
        z = self.scaler.transform(batch_x)
        scores = self.model.score(z)
        labels = (scores > self.config.threshold).astype(int)
        for row, label in zip(z, labels):
            self.targets.append(TargetRecord(row, int(label), "pseudo"))
        return labels, scores

    def score_batch(self, batch_x: np.ndarray) -> np.ndarray:
        """Pure scoring; no target expansion, no state change."""
        z = self.scaler.transform(np.atleast_2d(np.asarray(batch_x, dtype=float)))
        return self.model.score(z)

    def restart(self, changepoint_index: int) -> None:
        """Discard the target domain and return to the pretrained model.

        The pair-sampling stream and optimizer state restart as well, so a
        restarted session replays exactly like a freshly pretrained one.
        """

        self.targets = []
        self.model.restore(self._pretrained_snapshot)
        self.cursor = changepoint_index
        self.trained_batches = 0
        self._rng = np.random.default_rng(self.config.seed)
        self._enc_opt, self._head_opt = self._fresh_optimizers()
