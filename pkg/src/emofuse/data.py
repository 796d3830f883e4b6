"""Dataset schema, line-delimited on-disk format, deterministic synthetic
generators, stratified splitting, and the demo text embedder.

A record carries optional face (2048-d), body (2048-d), and text (768-d)
feature vectors plus a label from the dataset vocabulary. The on-disk form
is one JSON object per line with keys id, label, face, body, text,
text_raw (unknown keys rejected); floats are written with the shortest
decimal that round-trips through float32, so save -> load is the identity
on records.

Two generators make fusion claims testable at desk scale: `gen_blobs`
(every single modality is linearly separable) and `gen_shares` (the label
is the modular sum of three per-modality shares, so any strict modality
subset is statistically independent of the label).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import rng
from .errors import InputError
from .model import DEFAULT_INPUT_DIMS, DEFAULT_LABELS, Modality, parse_modality

TEXT_DIM = DEFAULT_INPUT_DIMS["text"]

_RECORD_KEYS = ("id", "label", "face", "body", "text", "text_raw")
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


@dataclass
class FeatureRecord:
    """One labeled sample; at least one modality must be present."""

    id: str
    label: str
    face: Optional[np.ndarray] = None
    body: Optional[np.ndarray] = None
    text: Optional[np.ndarray] = None
    text_raw: Optional[str] = None

    def modalities(self) -> Tuple[Modality, ...]:
        present = []
        for m in Modality:
            if getattr(self, m.value) is not None:
                present.append(m)
        return tuple(present)


@dataclass
class Dataset:
    """Ordered records plus the label vocabulary (index = position)."""

    records: List[FeatureRecord]
    label_names: Tuple[str, ...] = DEFAULT_LABELS

    def __post_init__(self):
        self.label_names = tuple(self.label_names)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def label_index(self, label: str) -> int:
        try:
            return self.label_names.index(label)
        except ValueError:
            raise InputError(f"unknown label {label!r}; vocabulary is {self.label_names}")

    def class_indices(self) -> Dict[int, List[int]]:
        out: Dict[int, List[int]] = {i: [] for i in range(len(self.label_names))}
        for pos, rec in enumerate(self.records):
            out[self.label_index(rec.label)].append(pos)
        return out


def _float_token(x: float) -> str:
    # shortest decimal that uniquely names this float32
    return str(np.float32(x))


def _vector_json(vec: np.ndarray) -> str:
    return "[" + ",".join(_float_token(x) for x in vec) + "]"


def save_jsonl(dataset: Dataset, path) -> None:
    """Write one record per line, UTF-8 with LF endings, keys in fixed order."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in dataset.records:
            parts = [f"\"id\":{json.dumps(rec.id)}", f"\"label\":{json.dumps(rec.label)}"]
            for m in ("face", "body", "text"):
                vec = getattr(rec, m)
                if vec is not None:
                    parts.append(f"\"{m}\":{_vector_json(vec)}")
            if rec.text_raw is not None:
                parts.append(f"\"text_raw\":{json.dumps(rec.text_raw)}")
            fh.write("{" + ",".join(parts) + "}\n")


def _parse_vector(value, name: str, expected: int, where: str) -> np.ndarray:
    if not isinstance(value, list) or not all(isinstance(x, (int, float)) for x in value):
        raise InputError(f"{where}: {name} must be a numeric array")
    if len(value) != expected:
        raise InputError(
            f"{where}: {name} vector has length {len(value)}, expected {expected}"
        )
    arr = np.asarray(value, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise InputError(f"{where}: {name} vector contains non-finite values")
    return arr


def load_jsonl(path, expected_dims: Optional[Dict] = None,
               label_names: Tuple[str, ...] = DEFAULT_LABELS) -> Dataset:
    """Parse and validate a record file; errors carry the offending line number."""
    dims = {parse_modality(k): int(v) for k, v in (expected_dims or DEFAULT_INPUT_DIMS).items()}
    records: List[FeatureRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            where = f"{path}:{lineno}"
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{where}: malformed record: {exc}") from exc
            if not isinstance(obj, dict):
                raise InputError(f"{where}: record must be an object")
            unknown = sorted(set(obj) - set(_RECORD_KEYS))
            if unknown:
                raise InputError(f"{where}: unknown keys {unknown}")
            if "id" not in obj or not isinstance(obj["id"], str):
                raise InputError(f"{where}: missing or non-string id")
            if "label" not in obj or not isinstance(obj["label"], str):
                raise InputError(f"{where}: missing or non-string label")
            if obj["label"] not in label_names:
                raise InputError(
                    f"{where}: unknown label {obj['label']!r}; vocabulary is {tuple(label_names)}"
                )
            vectors = {}
            for m in Modality:
                if m.value in obj:
                    vectors[m.value] = _parse_vector(obj[m.value], m.value, dims[m], where)
            text_raw = obj.get("text_raw")
            if text_raw is not None and not isinstance(text_raw, str):
                raise InputError(f"{where}: text_raw must be a string")
            if not vectors and text_raw is None:
                raise InputError(f"{where}: record provides no modality")
            records.append(FeatureRecord(id=obj["id"], label=obj["label"],
                                         text_raw=text_raw, **vectors))
    if not records:
        raise InputError(f"{path}: no records")
    return Dataset(records, tuple(label_names))


def _share_labels(num_classes: int) -> Tuple[str, ...]:
    if num_classes == len(DEFAULT_LABELS):
        return DEFAULT_LABELS
    return tuple(f"class{i}" for i in range(num_classes))


def gen_blobs(seed: int, n_per_class: int, sigma: float = 0.3,
              label_names: Tuple[str, ...] = DEFAULT_LABELS,
              input_dims: Optional[Dict] = None) -> Dataset:
    """Gaussian blobs that every single modality separates on its own.

    Class k's mean in modality m is a block of coordinates set to 1.0
    (width up to 32, shrunk to fit small feature spaces) starting at
    (m_index * 7 + k * width); everything else is noise of scale sigma.
    Deterministic per seed.
    """
    if n_per_class < 1:
        raise InputError("n_per_class must be >= 1")
    dims = {parse_modality(k): int(v) for k, v in (input_dims or DEFAULT_INPUT_DIMS).items()}
    num_classes = len(label_names)
    stagger = 7
    min_dim = min(dims[m] for m in Modality)
    block = min(32, (min_dim - 2 * stagger) // num_classes)
    if block < 1:
        raise InputError(f"feature dims too small for {num_classes} blob means")
    total = n_per_class * num_classes
    stream = rng.stream(seed, rng.STREAM_DATA)
    classes = np.repeat(np.arange(num_classes), n_per_class)

    columns: Dict[str, np.ndarray] = {}
    for m_index, m in enumerate(Modality):
        dim = dims[m]
        noise = stream.normals((total, dim)) * sigma
        means = np.zeros((num_classes, dim))
        for k in range(num_classes):
            start = m_index * stagger + k * block
            means[k, start : start + block] = 1.0
        columns[m.value] = (means[classes] + noise).astype(np.float32)

    records = [
        FeatureRecord(
            id=f"blob-{i:05d}",
            label=label_names[int(classes[i])],
            face=columns["face"][i],
            body=columns["body"][i],
            text=columns["text"][i],
        )
        for i in range(total)
    ]
    return Dataset(records, tuple(label_names))


SHARE_BLOCK_WIDTH = 32


def share_block_width(num_classes: int, input_dims: Optional[Dict] = None) -> int:
    """Coordinates per share value in gen_shares' noiseless signal block."""
    dims = {parse_modality(k): int(v) for k, v in (input_dims or DEFAULT_INPUT_DIMS).items()}
    width = min(SHARE_BLOCK_WIDTH, min(dims[m] for m in Modality) // num_classes)
    if width < 1:
        raise InputError(f"feature dims too small to embed {num_classes} share values")
    return width


def decode_share(vec: np.ndarray, num_classes: int, width: int) -> int:
    """Read a share value back off the noiseless block coordinates."""
    return int(np.argmax(np.asarray(vec)[: num_classes * width : width]))


def gen_shares(seed: int, n: int, num_classes: int = 5, sigma: float = 0.1,
               input_dims: Optional[Dict] = None) -> Dataset:
    """Complementary modular shares: the label is recoverable only from all
    three modalities together.

    Each record draws label k and uniform shares s_face, s_body; the text
    share is (k - s_face - s_body) mod num_classes. Modality m's feature
    embeds the one-hot of its share at fixed coordinates - a noiseless
    block of `share_block_width` coordinates per share value, block s
    spanning [s*width, (s+1)*width) - and Gaussian noise of scale sigma
    fills every remaining coordinate. Shares decode exactly from the
    noiseless block, while any strict subset of modalities is independent
    of k by construction.
    """
    if n < num_classes:
        raise InputError("n must be at least num_classes")
    dims = {parse_modality(k): int(v) for k, v in (input_dims or DEFAULT_INPUT_DIMS).items()}
    labels = _share_labels(num_classes)
    width = share_block_width(num_classes, dims)
    span = num_classes * width
    stream = rng.stream(seed, rng.STREAM_DATA)

    k = stream.integers(n, num_classes)
    s_face = stream.integers(n, num_classes)
    s_body = stream.integers(n, num_classes)
    s_text = (k - s_face - s_body) % num_classes
    shares = {"face": s_face, "body": s_body, "text": s_text}

    columns: Dict[str, np.ndarray] = {}
    for m in Modality:
        dim = dims[m]
        noise = stream.normals((n, dim)) * sigma
        noise[:, :span] = 0.0
        for j in range(width):
            noise[np.arange(n), shares[m.value] * width + j] = 1.0
        columns[m.value] = noise.astype(np.float32)

    records = [
        FeatureRecord(
            id=f"share-{i:05d}",
            label=labels[int(k[i])],
            face=columns["face"][i],
            body=columns["body"][i],
            text=columns["text"][i],
        )
        for i in range(n)
    ]
    return Dataset(records, labels)


def split(dataset: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Stratified train/test split: seeded shuffle, then a per-class cut of
    round(test_fraction * class_count) records into the test side."""
    if not (0 < test_fraction < 1):
        raise InputError("test_fraction must lie strictly between 0 and 1")
    by_class = dataset.class_indices()
    for class_id, members in by_class.items():
        if members and len(members) < 2:
            raise InputError(
                f"class {dataset.label_names[class_id]!r} has fewer than 2 samples; "
                "cannot stratify"
            )
    order = rng.stream(seed, rng.STREAM_SHUFFLE).permutation(len(dataset.records))
    quota = {
        class_id: int(round(test_fraction * len(members)))
        for class_id, members in by_class.items()
    }
    taken = {class_id: 0 for class_id in by_class}
    test_idx, train_idx = [], []
    for pos in order:
        class_id = dataset.label_index(dataset.records[pos].label)
        if taken[class_id] < quota[class_id]:
            taken[class_id] += 1
            test_idx.append(pos)
        else:
            train_idx.append(pos)
    make = lambda idx: Dataset([dataset.records[i] for i in idx], dataset.label_names)
    return make(train_idx), make(test_idx)


def embed_text_demo(text_raw: str) -> np.ndarray:
    """Deterministic hashed bag-of-words stand-in for a real text encoder.

    Lowercase, split on non-alphanumeric runs; each token's 64-bit FNV-1a
    hash h picks index h mod 768 and sign +1/-1 from bit 32; accumulate and
    L2-normalize (the empty text maps to the zero vector). This is a crude
    demo embedding; supply precomputed `text` vectors for real experiments.
    """
    out = np.zeros(TEXT_DIM, dtype=np.float64)
    for token in re.findall(r"[a-z0-9]+", text_raw.lower()):
        h = _FNV_OFFSET
        for byte in token.encode("utf-8"):
            h = ((h ^ byte) * _FNV_PRIME) & _MASK64
        sign = 1.0 if (h >> 32) & 1 else -1.0
        out[h % TEXT_DIM] += sign
    norm = float(np.sqrt((out * out).sum()))
    if norm > 0:
        out /= norm
    return out.astype(np.float32)


def resolve_features(source, enabled) -> Dict[Modality, np.ndarray]:
    """Collect the enabled modalities from a record or mapping, deriving the
    text vector from text_raw when no precomputed text is given."""
    def get(name: str):
        if isinstance(source, dict):
            return source.get(name)
        return getattr(source, name, None)

    out: Dict[Modality, np.ndarray] = {}
    for m in enabled:
        value = get(m.value)
        if value is None and m is Modality.TEXT:
            raw = get("text_raw")
            if raw is not None:
                value = embed_text_demo(str(raw))
        if value is not None:
            out[m] = np.asarray(value, dtype=np.float32)
    return out
