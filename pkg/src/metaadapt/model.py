"""Hashed bag-of-n-grams features and a one-hidden-layer MLP classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import CompGraph, Layout, NumericOps, ParameterVector, StructuralError, Var

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

LR_SEGMENT = "inner_lr"


def fnv1a_64(data: bytes | str) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class ModelSpec:
    hash_dim: int = 2048
    hidden_dim: int = 32
    n_classes: int = 2
    ngram_orders: tuple[int, ...] = (1, 2)

    def __post_init__(self):
        object.__setattr__(self, "ngram_orders", tuple(sorted(set(int(n) for n in self.ngram_orders))))
        if self.n_classes != 2:
            raise ValueError("only binary classification is supported (n_classes=2)")
        if self.hash_dim < self.n_classes:
            raise ValueError(f"hash_dim must be >= n_classes, got {self.hash_dim}")
        if self.hidden_dim < 1:
            raise ValueError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if not self.ngram_orders or min(self.ngram_orders) < 1:
            raise ValueError(f"ngram_orders must be positive integers, got {self.ngram_orders}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ngram_orders"] = list(self.ngram_orders)
        return d

    def layout(self, inner_steps: int = 0) -> Layout:
        return Layout.from_shapes(
            [
                ("w1", (self.hash_dim, self.hidden_dim)),
                ("b1", (self.hidden_dim,)),
                ("w2", (self.hidden_dim, self.n_classes)),
                ("b2", (self.n_classes,)),
                (LR_SEGMENT, (inner_steps,)),
            ]
        )

    def n_params(self, inner_steps: int = 0) -> int:
        return self.layout(inner_steps).size


def ngrams(tokens: list[str], orders) -> list[str]:
    out = []
    for n in orders:
        out.extend(" ".join(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
    return out


def featurize(text: str, spec: ModelSpec) -> np.ndarray:
    """L2-normalized counts of hashed word n-grams; zero vector for empty text."""
    vec = np.zeros(spec.hash_dim)
    for gram in ngrams(text.split(), spec.ngram_orders):
        vec[fnv1a_64(gram) % spec.hash_dim] += 1.0
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def featurize_many(texts, spec: ModelSpec) -> np.ndarray:
    texts = list(texts)
    if not texts:
        return np.zeros((0, spec.hash_dim))
    return np.stack([featurize(t, spec) for t in texts])


def init_params(spec: ModelSpec, seed: int, inner_steps: int = 0, alpha0: float = 0.01) -> ParameterVector:
    rng = np.random.default_rng(seed)
    layout = spec.layout(inner_steps)
    values = np.zeros(layout.size)
    for name in ("w1", "w2"):
        seg = layout[name]
        bound = 1.0 / np.sqrt(seg.shape[0])
        values[seg.offset : seg.stop] = rng.uniform(-bound, bound, size=seg.size)
    lr = layout[LR_SEGMENT]
    values[lr.offset : lr.stop] = alpha0
    return ParameterVector(values, layout)


def logits_fn(F, params, layout: Layout, features):
    """Forward pass written against an ops interface (NumericOps or GraphOps)."""
    w1, b1, w2, b2 = (
        F.take(params, offset=layout[n].offset, shape=layout[n].shape) for n in ("w1", "b1", "w2", "b2")
    )
    n = features.shape[0]
    pre = F.add(F.matmul(features, w1), F.expand(b1, shape=(n, layout["b1"].size), axis=0))
    hidden = F.maximum(pre, F.const(np.zeros((n, layout["b1"].size))))
    return F.add(F.matmul(hidden, w2), F.expand(b2, shape=(n, layout["b2"].size), axis=0))


def cross_entropy_fn(F, logits, labels: np.ndarray, n_classes: int = 2):
    """Mean softmax cross-entropy; the row max is a constant shift for stability."""
    n = labels.shape[0]
    onehot = F.const(np.eye(n_classes)[labels])
    shift = F.rowmax(logits)
    shifted = F.sub(logits, F.expand(shift, shape=(n, n_classes), axis=1))
    lse = F.add(F.log(F.sum(F.exp(shifted), axis=1)), shift)
    picked = F.sum(F.mul(logits, onehot), axis=1)
    return F.scale(F.const(1.0 / n), F.sum(F.sub(lse, picked)))


def loss_node(params: Var, layout: Layout, features: np.ndarray, labels: np.ndarray) -> Var:
    """Mean cross-entropy of a batch as a node of ``params``'s graph."""
    if len(labels) == 0:
        raise StructuralError("loss of an empty batch")
    F = params.graph.F
    logits = logits_fn(F, params, layout, F.const(features))
    return cross_entropy_fn(F, logits, np.asarray(labels, dtype=np.int64))


def loss(params: ParameterVector, features: np.ndarray, labels: np.ndarray) -> Var:
    """Record a fresh graph whose output is the batch loss at ``params``."""
    graph = CompGraph()
    theta = graph.leaf(params.values)
    out = loss_node(theta, params.layout, np.atleast_2d(features), np.asarray(labels))
    graph.output = out.id
    return out


def loss_value(params: ParameterVector, features: np.ndarray, labels: np.ndarray) -> float:
    F = NumericOps
    logits = logits_fn(F, params.values, params.layout, np.atleast_2d(features))
    return float(cross_entropy_fn(F, logits, np.asarray(labels, dtype=np.int64)))


def loss_and_grad_numeric(params: ParameterVector, features: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch loss and its gradient by hand-written backprop (no graph)."""
    layout = params.layout
    w1, b1, w2, b2 = (params.segment(n) for n in ("w1", "b1", "w2", "b2"))
    x = np.atleast_2d(features)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    pre = x @ w1 + b1
    h = np.maximum(pre, 0.0)
    p = softmax(h @ w2 + b2)
    value = float(-np.mean(np.log(p[np.arange(n), labels])))
    dz = (p - np.eye(w2.shape[1])[labels]) / n
    dpre = (dz @ w2.T) * (pre > 0)
    g = np.zeros(layout.size)
    for name, part in (("w1", x.T @ dpre), ("b1", dpre.sum(0)), ("w2", h.T @ dz), ("b2", dz.sum(0))):
        seg = layout[name]
        g[seg.offset : seg.stop] = part.ravel()
    return value, g


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Prediction:
    probs: np.ndarray
    label: int


def predict_proba(params: ParameterVector, features: np.ndarray) -> np.ndarray:
    return softmax(logits_fn(NumericOps, params.values, params.layout, np.atleast_2d(features)))


def predict_labels(params: ParameterVector, features: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lower class index
    return np.argmax(predict_proba(params, features), axis=1)


def predict(params: ParameterVector, features: np.ndarray) -> Prediction:
    probs = predict_proba(params, features)[0]
    return Prediction(probs=probs, label=int(np.argmax(probs)))
