"""Small fully-connected networks with exact hand-derived backward passes.

The binding contract for every forward/backward pair in this package is the
finite-difference suite in gradcheck.py, so all math stays in float64 and
every reduction uses numpy's fixed sequential order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataFormatError, InvalidParameterError, ShapeMismatchError

ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass
class Mlp:
    """Linear layers with an elementwise nonlinearity between them.

    weights[i] has shape (fan_in, fan_out); biases[i] has shape (fan_out,).
    The final layer is always linear, matching the convention that
    projection/output layers carry no activation.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidParameterError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidParameterError("weights and biases must be parallel, nonempty lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ShapeMismatchError(f"layer {i}: weight {w.shape} vs bias {b.shape}")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeMismatchError(
                    f"layer {i - 1} output {self.weights[i - 1].shape[1]} "
                    f"!= layer {i} input {w.shape[0]}"
                )

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [w.shape[1] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        """Flat parameter list (weight, bias per layer) shared by optimizers."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "Mlp":
        return Mlp(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )


def init_mlp(dims: Sequence[int], seed_or_rng, activation: str = "relu") -> Mlp:
    """Fan-in-scaled uniform init: weights in (-sqrt(6/fan_in), +sqrt(6/fan_in)).

    Deterministic for a fixed seed; biases start at zero.
    """
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise InvalidParameterError(f"invalid dimension chain {list(dims)}")
    rng = np.random.default_rng(seed_or_rng) if not isinstance(seed_or_rng, np.random.Generator) else seed_or_rng
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases, activation)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _act_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


@dataclass
class ForwardCache:
    """Layer inputs and pre-activations; sufficient for an exact backward."""

    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)


def mlp_forward(mlp: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != mlp.input_dim:
        raise ShapeMismatchError(f"input shape {x.shape} incompatible with input_dim {mlp.input_dim}")
    cache = ForwardCache()
    h = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        cache.inputs.append(h)
        z = h @ w + b
        cache.preacts.append(z)
        h = z if i == last else _act(z, mlp.activation)
    return h, cache


def mlp_backward(
    mlp: Mlp, cache: ForwardCache, upstream: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Returns (parameter gradients in params() order, gradient w.r.t. input)."""
    if len(cache.inputs) != len(mlp.weights):
        raise ShapeMismatchError("stale cache: layer count mismatch")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != (cache.inputs[0].shape[0], mlp.output_dim):
        raise ShapeMismatchError(f"upstream shape {g.shape} does not match forward output")
    w_grads: list[np.ndarray] = [None] * len(mlp.weights)  # type: ignore[list-item]
    b_grads: list[np.ndarray] = [None] * len(mlp.weights)  # type: ignore[list-item]
    last = len(mlp.weights) - 1
    for i in range(last, -1, -1):
        if i != last:
            g = g * _act_grad(cache.preacts[i], mlp.activation)
        w_grads[i] = cache.inputs[i].T @ g
        b_grads[i] = g.sum(axis=0)
        g = g @ mlp.weights[i].T
    flat: list[np.ndarray] = []
    for wg, bg in zip(w_grads, b_grads):
        flat.append(wg)
        flat.append(bg)
    return flat, g


def zero_grads_like(params: Sequence[np.ndarray]) -> list[np.ndarray]:
    return [np.zeros_like(p) for p in params]


# --- checkpoint format -------------------------------------------------------
#
# A checkpoint is a directory holding
#   manifest.json : {"format_version": 1, "meta": {...}, "tensors": [...]}
#   params.bin    : the tensors as raw little-endian float32, row-major,
#                   concatenated in manifest order.
# Loading restores float64 copies; a save/load round trip reproduces forward
# outputs within f32 quantization (1e-6 on desk-scale magnitudes).

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_BLOB = "params.bin"


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
        blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    manifest = {"format_version": 1, "meta": meta or {}, "tensors": entries}
    (path / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (path / CHECKPOINT_BLOB).write_bytes(b"".join(blobs))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / CHECKPOINT_MANIFEST).read_text())
        raw = (path / CHECKPOINT_BLOB).read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot read checkpoint at {path}: {exc}") from exc
    if manifest.get("format_version") != 1:
        raise DataFormatError(f"unsupported checkpoint version in {path}")
    tensors: dict[str, np.ndarray] = {}
    off = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = off + 4 * n
        if end > len(raw):
            raise DataFormatError(f"checkpoint blob truncated at tensor {entry['name']!r}")
        tensors[entry["name"]] = (
            np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(shape)
        )
        off = end
    if off != len(raw):
        raise DataFormatError("checkpoint blob has trailing bytes")
    return tensors, manifest.get("meta", {})


def checkpoint_hash(path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    h.update((path / CHECKPOINT_MANIFEST).read_bytes())
    h.update((path / CHECKPOINT_BLOB).read_bytes())
    return h.hexdigest()


def mlp_state_dict(mlp: Mlp, prefix: str = "") -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        out[f"{prefix}layers.{i}.weight"] = w
        out[f"{prefix}layers.{i}.bias"] = b
    return out


def mlp_meta(mlp: Mlp) -> dict:
    return {"dims": mlp.dims, "activation": mlp.activation}


def mlp_from_state(tensors: dict[str, np.ndarray], meta: dict, prefix: str = "") -> Mlp:
    dims = meta["dims"]
    weights, biases = [], []
    for i in range(len(dims) - 1):
        try:
            weights.append(tensors[f"{prefix}layers.{i}.weight"].copy())
            biases.append(tensors[f"{prefix}layers.{i}.bias"].copy())
        except KeyError as exc:
            raise DataFormatError(f"checkpoint missing tensor for layer {i}") from exc
    return Mlp(weights, biases, meta.get("activation", "relu"))


def save_mlp(path, mlp: Mlp, extra_meta: dict | None = None) -> None:
    meta = mlp_meta(mlp)
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, mlp_state_dict(mlp), meta)


def load_mlp(path) -> tuple[Mlp, dict]:
    tensors, meta = load_checkpoint(path)
    return mlp_from_state(tensors, meta), meta
