"""Attention-pooled MIL network with a contrastive projection head.

Layout (row-vector convention, ``y = x @ W + b``)::

    encoder     d_in -> d_h -> d_f   tanh, tanh
    attention   d_f  -> d_a -> 1     tanh, linear; softmax over the bag
    classifier  d_f  -> K            linear
    projection  d_f  -> d_h -> d_z   tanh, linear; then L2-normalised
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tape, Tensor

CHECKPOINT_FORMAT = "scmil-checkpoint"
CHECKPOINT_VERSION = 1


class EmptyBagError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    d_in: int = 32
    d_h: int = 64
    d_f: int = 64
    d_a: int = 32
    d_z: int = 16
    n_classes: int = 3

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "enc_w1": (self.d_in, self.d_h), "enc_b1": (self.d_h,),
            "enc_w2": (self.d_h, self.d_f), "enc_b2": (self.d_f,),
            "att_w1": (self.d_f, self.d_a), "att_b1": (self.d_a,),
            "att_w2": (self.d_a, 1), "att_b2": (1,),
            "cls_w": (self.d_f, self.n_classes), "cls_b": (self.n_classes,),
            "proj_w1": (self.d_f, self.d_h), "proj_b1": (self.d_h,),
            "proj_w2": (self.d_h, self.d_z), "proj_b2": (self.d_z,),
        }


# parameter groups, used for freezing in two-stage training
ENCODER = ("enc_w1", "enc_b1", "enc_w2", "enc_b2")
ATTENTION = ("att_w1", "att_b1", "att_w2", "att_b2")
CLASSIFIER = ("cls_w", "cls_b")
PROJECTION = ("proj_w1", "proj_b1", "proj_w2", "proj_b2")

_FAN_IN = {
    "enc_w1": "enc_w1", "enc_b1": "enc_w1", "enc_w2": "enc_w2", "enc_b2": "enc_w2",
    "att_w1": "att_w1", "att_b1": "att_w1", "att_w2": "att_w2", "att_b2": "att_w2",
    "cls_w": "cls_w", "cls_b": "cls_w",
    "proj_w1": "proj_w1", "proj_b1": "proj_w1", "proj_w2": "proj_w2", "proj_b2": "proj_w2",
}


@dataclass
class ModelParams:
    dims: ModelDims
    arrays: dict[str, np.ndarray]
    seed: int | None = None

    def __post_init__(self):
        expected = self.dims.shapes()
        if set(expected) != set(self.arrays):
            missing = sorted(set(expected) - set(self.arrays))
            extra = sorted(set(self.arrays) - set(expected))
            raise ValueError(f"parameter names mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            arr = np.asarray(self.arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite weights")
            self.arrays[name] = arr
        self.arrays = {k: self.arrays[k] for k in expected}

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: v.copy() for k, v in self.arrays.items()}, self.seed)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def bind(self, tape: Tape, trainable: bool = True) -> dict[str, Tensor]:
        make = tape.variable if trainable else tape.constant
        return {k: make(v) for k, v in self.arrays.items()}

    def equals(self, other: "ModelParams") -> bool:
        """Bit-level equality of every array."""
        return self.dims == other.dims and all(
            self.arrays[k].tobytes() == other.arrays[k].tobytes() for k in self.arrays
        )


def init_params(dims: ModelDims, seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike."""
    rng = np.random.default_rng(seed)
    shapes = dims.shapes()
    arrays = {}
    for name, shape in shapes.items():
        bound = 1.0 / np.sqrt(shapes[_FAN_IN[name]][0])
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(dims, arrays, seed)


# --------------------------------------------------------------------------
# forward pieces; all operate on tape tensors


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return dc.add(dc.matmul(x, w), b)


def encode(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Per-instance features, ``(n, d_in) -> (n, d_f)``."""
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyBagError("encode needs a non-empty (n, d_in) array")
    h = dc.tanh(_linear(x, p["enc_w1"], p["enc_b1"]))
    return dc.tanh(_linear(h, p["enc_w2"], p["enc_b2"]))


def attention_scores(features: Tensor, p: dict[str, Tensor]) -> Tensor:
    h = dc.tanh(_linear(features, p["att_w1"], p["att_b1"]))
    return _linear(h, p["att_w2"], p["att_b2"])


def attend(features: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Attention weights over the rows of one bag, ``(n, d_f) -> (n,)``."""
    n = features.shape[0]
    scores = dc.reshape(attention_scores(features, p), (n,))
    return dc.softmax(scores, axis=0)


def bag_embed(features: Tensor, alpha: Tensor) -> Tensor:
    if alpha.shape != (features.shape[0],):
        raise dc.ShapeError("bag_embed", features.shape, alpha.shape)
    n = features.shape[0]
    return dc.reshape(dc.matmul(dc.reshape(alpha, (1, n)), features), (features.shape[1],))


def classify(b: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Logits for one embedding ``(d_f,)`` or a stack ``(B, d_f)``."""
    if b.ndim == 1:
        row = dc.reshape(b, (1, b.shape[0]))
        return dc.reshape(_linear(row, p["cls_w"], p["cls_b"]), (p["cls_b"].shape[0],))
    return _linear(b, p["cls_w"], p["cls_b"])


def project_raw(b: Tensor, p: dict[str, Tensor]) -> Tensor:
    squeeze = b.ndim == 1
    x = dc.reshape(b, (1, b.shape[0])) if squeeze else b
    h = dc.tanh(_linear(x, p["proj_w1"], p["proj_b1"]))
    g = _linear(h, p["proj_w2"], p["proj_b2"])
    return dc.reshape(g, (g.shape[1],)) if squeeze else g


def project(b: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Unit-norm projection of one embedding or a stack of them."""
    return dc.l2_normalize(project_raw(b, p), axis=-1)


def predict_class(logits: np.ndarray) -> np.ndarray | int:
    """Argmax with ties going to the lowest class index (``np.argmax`` semantics)."""
    logits = np.asarray(logits)
    if logits.ndim == 1:
        return int(np.argmax(logits))
    return np.argmax(logits, axis=-1)


@dataclass
class BatchForward:
    """Tensors for a stack of equal-size bags."""
    features: Tensor   # (B, n, d_f)
    alpha: Tensor      # (B, n)
    embedding: Tensor  # (B, d_f)
    logits: Tensor     # (B, K)
    z: Tensor          # (B, d_z)


def forward_batch(tape: Tape, bags: np.ndarray | Tensor, p: dict[str, Tensor],
                  with_projection: bool = True) -> BatchForward:
    """Forward ``B`` bags of ``n`` instances each in one pass on ``tape``."""
    x = bags if isinstance(bags, Tensor) else tape.constant(bags)
    if x.ndim != 3:
        raise dc.ShapeError("forward_batch", x.shape)
    B, n, d_in = x.shape
    if n == 0 or B == 0:
        raise EmptyBagError("bags must contain at least one instance")
    feats = encode(dc.reshape(x, (B * n, d_in)), p)
    d_f = feats.shape[1]
    scores = dc.reshape(attention_scores(feats, p), (B, n))
    alpha = dc.softmax(scores, axis=1)
    feats3 = dc.reshape(feats, (B, n, d_f))
    emb = dc.reshape(dc.matmul(dc.reshape(alpha, (B, 1, n)), feats3), (B, d_f))
    logits = classify(emb, p)
    z = project(emb, p) if with_projection else None
    return BatchForward(feats3, alpha, emb, logits, z)


@dataclass
class BagForward:
    features: np.ndarray
    alpha: np.ndarray
    embedding: np.ndarray
    logits: np.ndarray
    z: np.ndarray

    @property
    def prediction(self) -> int:
        return predict_class(self.logits)


def forward_bag(bag: np.ndarray, params: ModelParams) -> BagForward:
    """Plain-array forward pass for a single bag ``(n, d_in)``."""
    bag = np.asarray(bag, dtype=np.float64)
    if bag.ndim != 2 or bag.shape[0] == 0:
        raise EmptyBagError("bag must be a non-empty (n, d_in) array")
    tape = Tape()
    p = params.bind(tape, trainable=False)
    out = forward_batch(tape, bag[None], p)
    return BagForward(out.features.value[0], out.alpha.value[0], out.embedding.value[0],
                      out.logits.value[0], out.z.value[0])


def bag_logits(bags: np.ndarray, params: ModelParams) -> np.ndarray:
    """Logits for a stack of equal-size bags, no projection."""
    tape = Tape()
    p = params.bind(tape, trainable=False)
    return forward_batch(tape, np.asarray(bags, dtype=np.float64), p, with_projection=False).logits.value


# --------------------------------------------------------------------------
# checkpoints


def _encode_array(a: np.ndarray) -> dict:
    raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return {"shape": list(a.shape), "f64le_b64": base64.b64encode(raw).decode("ascii")}


def _decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["f64le_b64"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(obj["shape"])


def save_checkpoint(path: str | Path, params: ModelParams, config: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": asdict(params.dims),
        "seed": params.seed,
        "config": config or {},
        "params": {k: _encode_array(v) for k, v in params.arrays.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    dims = ModelDims(**doc["dims"])
    arrays = {k: _decode_array(v) for k, v in doc["params"].items()}
    return ModelParams(dims, arrays, doc.get("seed")), doc.get("config", {})
