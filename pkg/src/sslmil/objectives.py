"""Self-supervised training objectives with exact analytic gradients.

Three families:
  * contrastive instance discrimination (normalized-temperature cross
    entropy over view pairs),
  * swapped cluster-assignment prediction against a prototype bank, with
    balanced soft assignments from Sinkhorn iterations,
  * teacher/student self-distillation with centering, sharpening and EMA
    teacher updates.

Every gradient returned here is checked against central finite differences
by gradcheck.py; that suite is the master test of this module.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, ShapeMismatchError
from .linalg import as_matrix, l2_normalize_rows, softmax_rows


@dataclass
class LossResult:
    """Scalar loss plus gradients keyed by input name, shapes matching inputs."""

    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class ViewPairBatch:
    """Embeddings of two augmented views of the same N underlying instances."""

    z1: np.ndarray
    z2: np.ndarray

    def __post_init__(self):
        self.z1 = as_matrix(self.z1, "z1")
        self.z2 = as_matrix(self.z2, "z2")
        if self.z1.shape != self.z2.shape:
            raise ShapeMismatchError(f"view shapes differ: {self.z1.shape} vs {self.z2.shape}")
        if self.z1.shape[0] < 1:
            raise InvalidParameterError("batch must contain at least one instance")

    @property
    def n(self) -> int:
        return self.z1.shape[0]

    @property
    def dim(self) -> int:
        return self.z1.shape[1]


def _normalize_with_backprop(z: np.ndarray):
    """Row-normalize and return a closure mapping d(loss)/d(zhat) to d(loss)/dz."""
    zhat = l2_normalize_rows(z)
    norms = np.linalg.norm(z, axis=1, keepdims=True)

    def backprop(g_hat: np.ndarray) -> np.ndarray:
        return (g_hat - zhat * np.sum(zhat * g_hat, axis=1, keepdims=True)) / norms

    return zhat, backprop


def nt_xent_loss(batch: ViewPairBatch, tau: float) -> LossResult:
    """Contrastive view-pair loss, mean over all 2N anchors.

    Embeddings are L2-normalized internally so cosine similarity reduces to
    a dot product; the returned gradients include the normalization
    Jacobian. For each anchor the denominator ranges over all 2N-1 other
    samples from both views, self excluded.
    """
    if tau <= 0:
        raise InvalidParameterError(f"temperature must be positive, got {tau}")
    n = batch.n
    zhat1, back1 = _normalize_with_backprop(batch.z1)
    zhat2, back2 = _normalize_with_backprop(batch.z2)
    u = np.vstack([zhat1, zhat2])  # 2N x d
    two_n = 2 * n
    s = (u @ u.T) / tau

    # row-wise softmax over the 2N-1 non-self entries
    np.fill_diagonal(s, -np.inf)
    shifted = s - s.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    np.fill_diagonal(e, 0.0)
    denom = e.sum(axis=1, keepdims=True)
    attn = e / denom

    partner = np.concatenate([np.arange(n, two_n), np.arange(0, n)])
    rows = np.arange(two_n)
    # -log softmax at the positive entry
    log_probs = shifted[rows, partner] - np.log(denom[:, 0])
    value = float(-log_probs.mean())

    g_s = attn.copy()
    g_s[rows, partner] -= 1.0
    g_s /= two_n * tau
    g_u = (g_s + g_s.T) @ u

    return LossResult(value, {"z1": back1(g_u[:n]), "z2": back2(g_u[n:])})


@dataclass
class PrototypeBank:
    """Learnable cluster centroids, one unit-norm row per prototype."""

    c: np.ndarray

    def __post_init__(self):
        self.c = as_matrix(self.c, "prototypes")
        norms = np.linalg.norm(self.c, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise InvalidParameterError("prototype rows must be unit-norm (renormalize after updates)")

    @property
    def count(self) -> int:
        return self.c.shape[0]

    @property
    def dim(self) -> int:
        return self.c.shape[1]

    @classmethod
    def random(cls, count: int, dim: int, rng: np.random.Generator) -> "PrototypeBank":
        c = rng.normal(size=(count, dim))
        return cls(c / np.linalg.norm(c, axis=1, keepdims=True))

    def renormalize(self) -> None:
        self.c /= np.linalg.norm(self.c, axis=1, keepdims=True)


def sinkhorn_codes(scores: np.ndarray, epsilon: float, iters: int) -> np.ndarray:
    """Balanced soft assignments from iterative row/column rescaling.

    Starts from exp(scores/epsilon) and alternately rescales rows to sum
    to 1 and columns to sum to N/J, for `iters` rounds, then row-normalizes.
    Runs in log domain so large scores/small epsilon cannot overflow.
    The result is treated as a constant downstream: no gradient flows
    through the codes.
    """
    if epsilon <= 0:
        raise InvalidParameterError(f"epsilon must be positive, got {epsilon}")
    if iters < 1:
        raise InvalidParameterError(f"iters must be >= 1, got {iters}")
    scores = as_matrix(scores, "scores")
    if scores.size == 0:
        raise InvalidParameterError("empty score matrix")
    n, j = scores.shape
    log_col_target = np.log(n / j)
    lq = scores / epsilon

    def logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
        hi = a.max(axis=axis, keepdims=True)
        return hi + np.log(np.exp(a - hi).sum(axis=axis, keepdims=True))

    for _ in range(iters):
        lq -= logsumexp(lq, axis=1)
        lq -= logsumexp(lq, axis=0) - log_col_target
    lq -= logsumexp(lq, axis=1)
    return np.exp(lq)


def _swapped_term(p: np.ndarray, log_p: np.ndarray, q: np.ndarray, tau: float):
    """Mean over the batch of -sum_j q_j log p_j, plus d(term)/d(scores)."""
    n = p.shape[0]
    value = float(-(q * log_p).sum() / n)
    g_scores = (p - q) / (tau * n)
    return value, g_scores


def swav_loss(
    batch: ViewPairBatch,
    bank: PrototypeBank,
    tau: float,
    epsilon: float = 0.05,
    iters: int = 3,
) -> LossResult:
    """Swapped-assignment loss for a view pair, averaged over the batch.

    Each view's embeddings are row-normalized, scored against the prototype
    rows (assumed unit-norm by the bank invariant and used as stored), and
    converted to balanced codes; each view then predicts the other view's
    codes through a temperature softmax. Codes are held constant, so
    prototypes receive gradient only through the prediction distributions.
    """
    result = swav_multiview_loss([batch.z1, batch.z2], bank, tau, epsilon, iters, pairs=[(0, 1), (1, 0)])
    return LossResult(result.value, {"z1": result.grads["views"][0], "z2": result.grads["views"][1], "c": result.grads["c"]})


def swav_multiview_loss(
    views: list[np.ndarray],
    bank: PrototypeBank,
    tau: float,
    epsilon: float = 0.05,
    iters: int = 3,
    pairs: list[tuple[int, int]] | None = None,
) -> LossResult:
    """Multi-view swapped-assignment loss.

    `pairs` lists (code_view, prediction_view) index pairs; the default is
    the plain two-view swap. The value is the mean over pairs scaled by 2 so
    the two-view default reproduces the sum of both swapped terms exactly.
    grads["views"] is a list parallel to `views`; grads["c"] covers the bank.
    """
    if tau <= 0:
        raise InvalidParameterError(f"temperature must be positive, got {tau}")
    if pairs is None:
        pairs = [(0, 1), (1, 0)]
    if not pairs:
        raise InvalidParameterError("empty pairing list")
    views = [as_matrix(z, f"views[{i}]") for i, z in enumerate(views)]
    for z in views:
        if z.shape[1] != bank.dim:
            raise ShapeMismatchError(f"embedding dim {z.shape[1]} != prototype dim {bank.dim}")
    if views[0].shape[0] == 1:
        warnings.warn("batch of size 1: balanced assignment is meaningless at N=1", stacklevel=2)

    n_views = len(views)
    zhat, backs = [], []
    for z in views:
        h, b = _normalize_with_backprop(z)
        zhat.append(h)
        backs.append(b)
    scores = [h @ bank.c.T for h in zhat]
    probs = [softmax_rows(s, tau) for s in scores]
    log_probs = [np.log(p) for p in probs]

    code_views = sorted({cv for cv, _ in pairs})
    codes = {cv: sinkhorn_codes(scores[cv], epsilon, iters) for cv in code_views}

    value = 0.0
    g_scores = [np.zeros_like(s) for s in scores]
    for code_view, pred_view in pairs:
        if not (0 <= code_view < n_views and 0 <= pred_view < n_views):
            raise InvalidParameterError(f"pair ({code_view}, {pred_view}) out of range")
        term, g = _swapped_term(probs[pred_view], log_probs[pred_view], codes[code_view], tau)
        value += term
        g_scores[pred_view] += g
    scale = 2.0 / len(pairs)
    value *= scale

    g_c = np.zeros_like(bank.c)
    g_views = []
    for h, back, g_s in zip(zhat, backs, g_scores):
        g_s = g_s * scale
        g_c += g_s.T @ h
        g_views.append(back(g_s @ bank.c))
    return LossResult(value, {"views": g_views, "c": g_c})


@dataclass
class TeacherState:
    """Teacher-side state for self-distillation.

    params mirrors the student parameter shapes (encoder plus head); center
    is the running mean of teacher outputs used to balance predictions;
    tau_t < tau_s sharpens the teacher distribution relative to the student.
    """

    center: np.ndarray
    tau_s: float
    tau_t: float
    ema_momentum: float = 0.996
    center_momentum: float = 0.9
    params: list[np.ndarray] | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.center.ndim != 1:
            raise ShapeMismatchError("center must be a vector")
        if self.tau_s <= 0 or self.tau_t <= 0:
            raise InvalidParameterError("temperatures must be positive")
        if not self.tau_t < self.tau_s:
            raise InvalidParameterError(f"need tau_t < tau_s (sharpening), got {self.tau_t} >= {self.tau_s}")
        if not (0.0 <= self.ema_momentum <= 1.0 and 0.0 <= self.center_momentum <= 1.0):
            raise InvalidParameterError("momenta must lie in [0, 1]")

    @property
    def k(self) -> int:
        return self.center.shape[0]


def dino_loss(student_logits: np.ndarray, teacher_logits: np.ndarray, state: TeacherState) -> LossResult:
    """Cross-entropy of sharpened, centered teacher targets against the student.

    The teacher side is gradient-free: the result carries a gradient for
    the student logits only.
    """
    student_logits = as_matrix(student_logits, "student_logits")
    teacher_logits = as_matrix(teacher_logits, "teacher_logits")
    if student_logits.shape != teacher_logits.shape:
        raise ShapeMismatchError(
            f"student {student_logits.shape} vs teacher {teacher_logits.shape}"
        )
    if student_logits.shape[1] != state.k:
        raise ShapeMismatchError(f"logit width {student_logits.shape[1]} != center length {state.k}")
    if student_logits.shape[0] == 1:
        warnings.warn("batch of size 1: centering is meaningless at N=1", stacklevel=2)
    n = student_logits.shape[0]
    p_t = softmax_rows(teacher_logits - state.center, state.tau_t)
    # log p_s computed stably rather than log(softmax(...))
    scaled = student_logits / state.tau_s
    shifted = scaled - scaled.max(axis=1, keepdims=True)
    log_p_s = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p_s = np.exp(log_p_s)
    value = float(-(p_t * log_p_s).sum() / n)
    g_student = (p_s - p_t) / (state.tau_s * n)
    return LossResult(value, {"student_logits": g_student})


def dino_multiview_loss(
    student_logits: list[np.ndarray],
    teacher_logits: list[np.ndarray],
    state: TeacherState,
    pairs: list[tuple[int, int]] | None = None,
) -> LossResult:
    """Mean distillation loss over (teacher_view, student_view) pairs.

    Defaults to every teacher view crossed with every other student view.
    grads["student_logits"] is a list parallel to student_logits.
    """
    if pairs is None:
        pairs = [
            (t, s)
            for t in range(len(teacher_logits))
            for s in range(len(student_logits))
            if t != s
        ]
    if not pairs:
        raise InvalidParameterError("empty pairing list")
    value = 0.0
    grads = [np.zeros_like(as_matrix(s, "student_logits")) for s in student_logits]
    for t_view, s_view in pairs:
        r = dino_loss(student_logits[s_view], teacher_logits[t_view], state)
        value += r.value
        grads[s_view] += r.grads["student_logits"]
    k = len(pairs)
    return LossResult(value / k, {"student_logits": [g / k for g in grads]})


def update_center(state: TeacherState, teacher_outputs: np.ndarray) -> TeacherState:
    """New state with center' = m*center + (1-m)*column-mean(outputs)."""
    teacher_outputs = as_matrix(teacher_outputs, "teacher_outputs")
    if teacher_outputs.shape[1] != state.k:
        raise ShapeMismatchError(
            f"output width {teacher_outputs.shape[1]} != center length {state.k}"
        )
    m = state.center_momentum
    new_center = m * state.center + (1.0 - m) * teacher_outputs.mean(axis=0)
    return TeacherState(
        center=new_center,
        tau_s=state.tau_s,
        tau_t=state.tau_t,
        ema_momentum=state.ema_momentum,
        center_momentum=state.center_momentum,
        params=state.params,
    )


def ema_update(
    teacher_params: list[np.ndarray],
    student_params: list[np.ndarray],
    m: float,
) -> list[np.ndarray]:
    """Elementwise theta_t' = m*theta_t + (1-m)*theta_s."""
    if not 0.0 <= m <= 1.0:
        raise InvalidParameterError(f"momentum must lie in [0, 1], got {m}")
    if len(teacher_params) != len(student_params):
        raise ShapeMismatchError("parameter lists differ in length")
    out = []
    for t, s in zip(teacher_params, student_params):
        if t.shape != s.shape:
            raise ShapeMismatchError(f"parameter shape mismatch: {t.shape} vs {s.shape}")
        out.append(m * t + (1.0 - m) * s)
    return out
