"""Dataset loading, preprocessing, splits, k-shot selection, task sampling and
a synthetic domain-shift corpus generator."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed or insufficient data."""


@dataclass(frozen=True)
class Example:
    text: str
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")


@dataclass
class Dataset:
    examples: list[Example]
    name: str = ""

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, idx):
        return self.examples[idx]

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.examples], dtype=np.int64)

    @property
    def texts(self) -> list[str]:
        return [e.text for e in self.examples]

    def subset(self, indices, name: str | None = None) -> "Dataset":
        return Dataset([self.examples[i] for i in indices], self.name if name is None else name)

    def map_text(self, fn) -> "Dataset":
        return Dataset([Example(fn(e.text), e.label) for e in self.examples], self.name)


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.7, 0.2, 0.1)
    k: int = 10

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if len(self.ratios) != 3 or min(self.ratios) <= 0 or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must be three positive numbers summing to 1, got {self.ratios}")
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")

    def to_dict(self) -> dict:
        return {"ratios": list(self.ratios), "k": self.k}


@dataclass
class Batch:
    """Encoded examples: a feature matrix and integer labels."""

    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


# source tasks and the k-shot meta task share the encoded-batch shape
SourceTask = Batch


@dataclass
class MetaTask(Batch):
    indices: list[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# io
# ---------------------------------------------------------------------------


def load_jsonl(path, name: str | None = None) -> Dataset:
    path = Path(path)
    examples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or not isinstance(obj.get("text"), str):
                raise DataError(f"{path}:{lineno}: expected an object with a string 'text' field")
            label = obj.get("label")
            if isinstance(label, bool) or not isinstance(label, int) or label not in (0, 1):
                raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
            examples.append(Example(obj["text"], label))
    return Dataset(examples, name if name is not None else path.stem)


def write_jsonl(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in ds:
            fh.write(json.dumps({"text": e.text, "label": e.label}, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

_URL = re.compile(r"(?:https?://|www\.)\S*")
_MENTION = re.compile(r"@(\w+)")
_HASHTAG = re.compile(r"#(\w+)")
_SPECIAL = re.compile(r"[^a-z0-9 ]+")
_SPACE = re.compile(r"\s+")


def preprocess(text: str) -> str:
    text = text.lower()
    text = _URL.sub(" url ", text)
    text = _MENTION.sub(r" \1 ", text)
    text = _HASHTAG.sub(r" \1 ", text)
    text = _SPACE.sub(" ", text)
    text = _SPECIAL.sub("", text)
    return _SPACE.sub(" ", text).strip()


# ---------------------------------------------------------------------------
# splitting and task construction
# ---------------------------------------------------------------------------


def split(ds: Dataset, spec: SplitSpec, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    n = len(ds)
    order = np.random.default_rng(seed).permutation(n)
    r_train, r_valid, _ = spec.ratios
    a = int(np.floor(r_train * n + 1e-9))
    b = int(np.floor((r_train + r_valid) * n + 1e-9))
    return (
        ds.subset(order[:a], f"{ds.name}/train"),
        ds.subset(order[a:b], f"{ds.name}/valid"),
        ds.subset(order[b:], f"{ds.name}/test"),
    )


def select_k_shot_indices(labels, k: int) -> tuple[list[int], list[int]]:
    """Scan in order, keeping the first k of each class."""
    taken = {0: 0, 1: 0}
    chosen, rest = [], []
    for i, y in enumerate(labels):
        y = int(y)
        if taken[y] < k:
            taken[y] += 1
            chosen.append(i)
        else:
            rest.append(i)
    for cls in (0, 1):
        if taken[cls] < k:
            raise DataError(f"validation set has only {taken[cls]} examples of class {cls}, need k={k}")
    return chosen, rest


def encode(ds: Dataset, model_spec) -> Batch:
    from .model import featurize_many

    return Batch(featurize_many(ds.texts, model_spec), ds.labels)


def select_k_shot(valid: Dataset, k: int, model_spec) -> tuple[MetaTask, Dataset]:
    chosen, rest = select_k_shot_indices(valid.labels, k)
    enc = encode(valid.subset(chosen), model_spec)
    meta = MetaTask(enc.features, enc.labels, indices=chosen)
    return meta, valid.subset(rest)


def sample_indices(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw without replacement within one task."""
    if n < batch_size:
        raise DataError(f"cannot draw a task of {batch_size} from {n} examples")
    return rng.choice(n, size=batch_size, replace=False)


def sample_source_task(train: Batch, rng: np.random.Generator, batch_size: int = 4) -> SourceTask:
    idx = sample_indices(len(train), batch_size, rng)
    return SourceTask(train.features[idx], train.labels[idx])


# ---------------------------------------------------------------------------
# synthetic domain shift
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Two-domain bag-of-tokens corpus.

    The vocabulary is split into a shared background pool and
    class-discriminative pools. Each domain owns ``n_discriminative`` cue
    tokens per class; a fraction ``overlap`` of them is common to both domains
    and the rest is exclusive to one domain. Texts draw each token from the
    class cues with probability ``cue_rate`` and from the background otherwise.
    """

    vocab_size: int = 500
    overlap: float = 0.5
    n_source: int = 2000
    n_target: int = 1000
    target_pos_rate: float = 0.7
    source_pos_rate: float = 0.5
    n_discriminative: int = 40
    cue_rate: float = 0.3
    min_len: int = 5
    max_len: int = 15
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError(f"overlap must lie in [0, 1], got {self.overlap}")
        for name in ("target_pos_rate", "source_pos_rate", "cue_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.n_source < 0 or self.n_target < 0:
            raise ValueError("corpus sizes must be >= 0")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        n_shared = self.n_shared
        needed = 2 * (n_shared + 2 * (self.n_discriminative - n_shared)) + 1
        if self.vocab_size < needed:
            raise ValueError(f"vocab_size {self.vocab_size} too small, need at least {needed}")

    @property
    def n_shared(self) -> int:
        return int(round(self.overlap * self.n_discriminative))

    def to_dict(self) -> dict:
        return asdict(self)


def _token(i: int) -> str:
    return f"w{i}"


def domain_vocabularies(cfg: SynthConfig) -> dict[str, dict]:
    """Token id pools per domain and class, plus the background pool."""
    rng = np.random.default_rng([cfg.seed, 0])
    perm = rng.permutation(cfg.vocab_size)
    n_sh = cfg.n_shared
    n_ex = cfg.n_discriminative - n_sh
    pos = 0

    def grab(m):
        nonlocal pos
        out = perm[pos : pos + m]
        pos += m
        return out

    shared = {c: grab(n_sh) for c in (0, 1)}
    excl = {(d, c): grab(n_ex) for d in ("source", "target") for c in (0, 1)}
    background = perm[pos:]
    return {
        d: {
            "cues": {c: np.concatenate([shared[c], excl[(d, c)]]) for c in (0, 1)},
            "background": background,
        }
        for d in ("source", "target")
    }


def _generate_domain(cfg: SynthConfig, pools: dict, n: int, pos_rate: float, rng) -> Dataset:
    examples = []
    n_pos = int(round(pos_rate * n))
    labels = np.array([1] * n_pos + [0] * (n - n_pos))
    rng.shuffle(labels)
    for y in labels:
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        use_cue = rng.random(length) < cfg.cue_rate
        cue = rng.choice(pools["cues"][int(y)], size=length)
        bg = rng.choice(pools["background"], size=length)
        ids = np.where(use_cue, cue, bg)
        examples.append(Example(" ".join(_token(int(i)) for i in ids), int(y)))
    return Dataset(examples)


def synth_shift_generate(cfg: SynthConfig) -> tuple[Dataset, Dataset]:
    pools = domain_vocabularies(cfg)
    source = _generate_domain(cfg, pools["source"], cfg.n_source, cfg.source_pos_rate, np.random.default_rng([cfg.seed, 1]))
    target = _generate_domain(cfg, pools["target"], cfg.n_target, cfg.target_pos_rate, np.random.default_rng([cfg.seed, 2]))
    source.name, target.name = "source", "target"
    return source, target
