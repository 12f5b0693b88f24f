"""Attention-based multiple instance learning head.

A bag of instance features flows through an optional (usually frozen)
encoder, a dimension-reducing network, a two-layer per-class attention
scorer, class-wise softmax pooling over instances, and one affine scorer
per class. The loss is categorical cross-entropy on the bag label.

Attention weights are normalized per class across instances so pooling is
a convex combination and bags of different sizes stay comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError, ShapeMismatchError
from .linalg import as_matrix
from .network import Mlp, init_mlp, mlp_backward, mlp_forward
from .objectives import LossResult


@dataclass
class Bag:
    """One labeled sample: an ordered set of instance feature vectors."""

    instances: np.ndarray  # N x feature_dim
    label: int
    bag_id: str
    instance_ids: list[str] | None = None

    def __post_init__(self):
        self.instances = as_matrix(self.instances, f"bag {self.bag_id}")
        if self.instances.shape[0] < 1:
            raise InvalidParameterError(f"bag {self.bag_id} is empty")
        if self.instance_ids is None:
            self.instance_ids = [str(i) for i in range(self.instances.shape[0])]

    @property
    def n(self) -> int:
        return self.instances.shape[0]


@dataclass
class MilParams:
    """Trainable MIL-side parameters: reducer, attention scorer, classifier."""

    reducer: Mlp  # k -> k', four linear layers
    attention: Mlp  # k' -> hidden -> C, tanh between the two layers
    clf_weight: np.ndarray  # C x k', one affine scorer per class
    clf_bias: np.ndarray  # C

    def __post_init__(self):
        self.clf_weight = np.asarray(self.clf_weight, dtype=np.float64)
        self.clf_bias = np.asarray(self.clf_bias, dtype=np.float64)
        c = self.attention.output_dim
        if self.clf_weight.shape != (c, self.reducer.output_dim):
            raise ShapeMismatchError(
                f"classifier weight {self.clf_weight.shape} incompatible with "
                f"C={c}, k'={self.reducer.output_dim}"
            )
        if self.clf_bias.shape != (c,):
            raise ShapeMismatchError("classifier bias length must equal class count")
        if self.attention.input_dim != self.reducer.output_dim:
            raise ShapeMismatchError("attention input dim must equal reduced dim")

    @property
    def n_classes(self) -> int:
        return self.attention.output_dim

    def params(self) -> list[np.ndarray]:
        return self.reducer.params() + self.attention.params() + [self.clf_weight, self.clf_bias]

    def copy(self) -> "MilParams":
        return MilParams(
            self.reducer.copy(), self.attention.copy(), self.clf_weight.copy(), self.clf_bias.copy()
        )


def init_mil_params(
    k: int, k_reduced: int, n_classes: int, attention_hidden: int, seed_or_rng
) -> MilParams:
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    if k_reduced >= k:
        raise InvalidParameterError(f"reduced dim {k_reduced} must be < input dim {k}")
    reducer = init_mlp([k, k, k_reduced, k_reduced, k_reduced], rng, activation="relu")
    attention = init_mlp([k_reduced, attention_hidden, n_classes], rng, activation="tanh")
    bound = np.sqrt(6.0 / k_reduced)
    clf_w = rng.uniform(-bound, bound, size=(n_classes, k_reduced))
    clf_b = np.zeros(n_classes)
    return MilParams(reducer, attention, clf_w, clf_b)


def reduce_instances(params: Mlp, z: np.ndarray) -> np.ndarray:
    """Map N x k instance features to N x k' (forward only)."""
    out, _ = mlp_forward(params, z)
    return out


def attention_scores(params: Mlp, z_reduced: np.ndarray) -> np.ndarray:
    """Per-instance per-class attention, softmax-normalized within each class.

    Each column of the result is a distribution over the bag's instances.
    """
    raw, _ = mlp_forward(params, as_matrix(z_reduced, "z_reduced"))
    return _softmax_columns(raw)


def _softmax_columns(raw: np.ndarray) -> np.ndarray:
    shifted = raw - raw.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def pool_bag(attention: np.ndarray, z_reduced: np.ndarray) -> np.ndarray:
    """Class-wise weighted sums: row c of the result is sum_n a[n,c] * z[n]."""
    attention = as_matrix(attention, "attention")
    z_reduced = as_matrix(z_reduced, "z_reduced")
    if attention.shape[0] != z_reduced.shape[0]:
        raise ShapeMismatchError(
            f"instance counts differ: attention {attention.shape[0]} vs features {z_reduced.shape[0]}"
        )
    return attention.T @ z_reduced


@dataclass
class BagPrediction:
    logits: np.ndarray  # C
    probabilities: np.ndarray  # C, sums to 1
    attention: np.ndarray  # N x C, each column sums to 1
    predicted_class: int  # argmax with lowest-index tie-break


def _forward_from_features(features: np.ndarray, mil: MilParams):
    reduced, red_cache = mlp_forward(mil.reducer, features)
    raw_scores, att_cache = mlp_forward(mil.attention, reduced)
    attn = _softmax_columns(raw_scores)
    pooled = attn.T @ reduced  # C x k'
    logits = (mil.clf_weight * pooled).sum(axis=1) + mil.clf_bias
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    probs = exp / exp.sum()
    return reduced, red_cache, raw_scores, att_cache, attn, pooled, logits, probs


def mil_loss_from_features(
    features: np.ndarray, label: int, mil: MilParams
) -> tuple[LossResult, BagPrediction]:
    """Cross-entropy bag loss on pre-encoded instance features.

    Returns gradients for the reducer, attention scorer and classifier in
    grads["mil"] (parallel to MilParams.params()) and the gradient w.r.t.
    the features themselves in grads["features"], which feeds the encoder
    backward when the encoder is not frozen.
    """
    features = as_matrix(features, "features")
    c = mil.n_classes
    if not 0 <= label < c:
        raise InvalidParameterError(f"label {label} out of range for {c} classes")
    reduced, red_cache, raw_scores, att_cache, attn, pooled, logits, probs = _forward_from_features(
        features, mil
    )
    value = float(-np.log(probs[label]))

    d_logits = probs.copy()
    d_logits[label] -= 1.0
    d_clf_w = d_logits[:, None] * pooled
    d_clf_b = d_logits
    d_pooled = d_logits[:, None] * mil.clf_weight  # C x k'
    d_attn = reduced @ d_pooled.T  # N x C
    d_reduced = attn @ d_pooled  # pooling path
    # column softmax backward, one distribution per class
    d_raw = attn * (d_attn - (attn * d_attn).sum(axis=0, keepdims=True))
    att_grads, d_reduced_att = mlp_backward(mil.attention, att_cache, d_raw)
    red_grads, d_features = mlp_backward(mil.reducer, red_cache, d_reduced + d_reduced_att)

    grads = {
        "mil": red_grads + att_grads + [d_clf_w, d_clf_b],
        "features": d_features,
    }
    prediction = BagPrediction(
        logits=logits,
        probabilities=probs,
        attention=attn,
        predicted_class=int(np.argmax(logits)),
    )
    return LossResult(value, grads), prediction


def mil_forward_loss(
    bag: Bag, encoder: Mlp | None, mil: MilParams, encoder_frozen: bool = True
) -> tuple[LossResult, BagPrediction]:
    """Full bag loss through the (optional) encoder.

    With a frozen encoder the result carries no encoder gradient at all;
    unfrozen runs add grads["encoder"] parallel to encoder.params().
    """
    if encoder is None:
        return mil_loss_from_features(bag.instances, bag.label, mil)
    z, enc_cache = mlp_forward(encoder, bag.instances)
    result, prediction = mil_loss_from_features(z, bag.label, mil)
    if not encoder_frozen:
        enc_grads, _ = mlp_backward(encoder, enc_cache, result.grads["features"])
        result.grads["encoder"] = enc_grads
    del result.grads["features"]
    return result, prediction


def predict_bag(bag: Bag, encoder: Mlp | None, mil: MilParams) -> BagPrediction:
    """Deterministic inference with attention kept for explainability export."""
    features = bag.instances if encoder is None else mlp_forward(encoder, bag.instances)[0]
    *_, attn, _pooled, logits, probs = _forward_from_features(features, mil)
    return BagPrediction(
        logits=logits,
        probabilities=probs,
        attention=attn,
        predicted_class=int(np.argmax(logits)),
    )
