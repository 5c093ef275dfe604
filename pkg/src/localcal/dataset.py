"""Calibration datasets: in-memory model, LCDS binary / CSV formats, splitting.

A dataset bundles exported backbone features, pre-softmax logits, integer
labels and the class priors used to weight class-wise metrics.

LCDS binary layout (little-endian)::

    magic  8 bytes  b"LCALDS01"
    n, m, C, flags  u64 each
    features  f32[n*m]   if flags & 1
    logits    f32[n*C]   if flags & 2
    labels    u32[n]     if flags & 4
    priors    f64[C]     if flags & 8

The CSV layout has the header ``f0..f{m-1},l0..l{C-1},label``.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    FractionSumInvalid,
    IoFailure,
    LabelOutOfRange,
    MagicMismatch,
    NonFiniteValue,
    RejectedEmptyDataset,
    ShapeMismatch,
    TruncatedFile,
)
from .numerics import make_rng

MAGIC = b"LCALDS01"
HEADER = struct.Struct("<8sQQQQ")

FLAG_FEATURES = 1
FLAG_LOGITS = 2
FLAG_LABELS = 4
FLAG_PRIORS = 8


def label_priors(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Normalized label histogram."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)
    return counts[:n_classes] / counts.sum()


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CalibrationDataset:
    """Immutable (features, logits, labels, priors) bundle.

    ``priors`` defaults to the label frequencies. Pass an explicit vector to
    carry class weights estimated elsewhere (e.g. on the training split).
    """

    features: np.ndarray
    logits: np.ndarray
    labels: np.ndarray
    priors: np.ndarray | None = None

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 2:
            raise ShapeMismatch(f"logits must be 2-D, got shape {logits.shape}")
        n, C = logits.shape
        if n < 1:
            raise RejectedEmptyDataset("dataset must contain at least one row")
        if C < 2:
            raise ShapeMismatch(f"need at least 2 classes, got {C}")
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim == 1 and features.size == 0:
            features = features.reshape(n, 0)
        if features.ndim != 2 or features.shape[0] != n:
            raise ShapeMismatch(f"features shape {features.shape} does not match n={n}")
        labels = np.asarray(self.labels)
        if labels.shape != (n,):
            raise ShapeMismatch(f"labels shape {labels.shape} does not match n={n}")
        if not np.all(np.isfinite(features)):
            row = int(np.argwhere(~np.isfinite(features))[0, 0])
            raise NonFiniteValue(f"non-finite feature value at row {row}")
        if not np.all(np.isfinite(logits)):
            row = int(np.argwhere(~np.isfinite(logits))[0, 0])
            raise NonFiniteValue(f"non-finite logit value at row {row}")
        if labels.dtype.kind == "f":
            if not np.all(labels == np.round(labels)):
                raise LabelOutOfRange("labels must be integers")
        bad = np.flatnonzero((labels < 0) | (labels >= C))
        if bad.size:
            raise LabelOutOfRange(f"label {labels[bad[0]]} out of range [0, {C}) at row {bad[0]}")
        labels = labels.astype(np.int64)
        if self.priors is None:
            priors = label_priors(labels, C)
        else:
            priors = np.asarray(self.priors, dtype=np.float64)
            if priors.shape != (C,):
                raise ShapeMismatch(f"priors shape {priors.shape} does not match C={C}")
            if np.any(priors < 0) or abs(priors.sum() - 1.0) > 1e-9:
                raise ShapeMismatch("priors must be nonnegative and sum to 1")
        object.__setattr__(self, "features", _frozen(features, np.float64))
        object.__setattr__(self, "logits", _frozen(logits, np.float64))
        object.__setattr__(self, "labels", _frozen(labels, np.int64))
        object.__setattr__(self, "priors", _frozen(priors, np.float64))

    @property
    def n(self) -> int:
        return self.logits.shape[0]

    @property
    def m(self) -> int:
        return self.features.shape[1]

    @property
    def C(self) -> int:
        return self.logits.shape[1]

    def label_priors(self) -> np.ndarray:
        return label_priors(self.labels, self.C)

    def with_priors(self, priors) -> "CalibrationDataset":
        return CalibrationDataset(self.features, self.logits, self.labels, priors)

    def subset(self, rows, recompute_priors: bool = True) -> "CalibrationDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return CalibrationDataset(
            self.features[rows],
            self.logits[rows],
            self.labels[rows],
            None if recompute_priors else self.priors,
        )

    def same_content(self, other: "CalibrationDataset", atol: float = 0.0) -> bool:
        if (self.n, self.m, self.C) != (other.n, other.m, other.C):
            return False
        if not np.array_equal(self.labels, other.labels):
            return False
        return all(
            np.allclose(a, b, rtol=0.0, atol=atol)
            for a, b in [
                (self.features, other.features),
                (self.logits, other.logits),
                (self.priors, other.priors),
            ]
        )


# --------------------------------------------------------------------------
# binary format


def save_dataset(d: CalibrationDataset, path, format: str = "binary", write_priors: bool = True) -> None:
    path = Path(path)
    try:
        if format == "binary":
            _save_binary(d, path, write_priors)
        elif format == "csv":
            _save_csv(d, path)
        else:
            raise ValueError(f"unknown dataset format {format!r}")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _save_binary(d: CalibrationDataset, path: Path, write_priors: bool) -> None:
    flags = FLAG_LOGITS | FLAG_LABELS
    if d.m > 0:
        flags |= FLAG_FEATURES
    if write_priors:
        flags |= FLAG_PRIORS
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, d.n, d.m, d.C, flags))
        if flags & FLAG_FEATURES:
            fh.write(np.ascontiguousarray(d.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(d.logits, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(d.labels, dtype="<u4").tobytes())
        if flags & FLAG_PRIORS:
            fh.write(np.ascontiguousarray(d.priors, dtype="<f8").tobytes())


def load_dataset(path, format: str | None = None) -> CalibrationDataset:
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "binary"
    try:
        if format == "binary":
            return _load_binary(path.read_bytes())
        if format == "csv":
            return _load_csv(path)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    raise ValueError(f"unknown dataset format {format!r}")


def _load_binary(buf: bytes) -> CalibrationDataset:
    if len(buf) < 8 or buf[:8] != MAGIC:
        raise MagicMismatch(f"bad magic at byte offset 0: {buf[:8]!r}")
    if len(buf) < HEADER.size:
        raise TruncatedFile(f"header truncated at byte offset {len(buf)}")
    _, n, m, C, flags = HEADER.unpack_from(buf, 0)
    offset = HEADER.size

    def take(count: int, dtype: str, what: str) -> np.ndarray:
        nonlocal offset
        nbytes = count * np.dtype(dtype).itemsize
        if offset + nbytes > len(buf):
            raise TruncatedFile(
                f"{what} block truncated: needs bytes [{offset}, {offset + nbytes}), file has {len(buf)}"
            )
        out = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
        offset += nbytes
        return out

    features = take(n * m, "<f4", "features").reshape(n, m) if flags & FLAG_FEATURES else np.zeros((n, 0))
    if not flags & FLAG_LOGITS:
        raise ShapeMismatch("LCDS file has no logits block")
    logits = take(n * C, "<f4", "logits").reshape(n, C)
    if not flags & FLAG_LABELS:
        raise ShapeMismatch("LCDS file has no labels block")
    label_offset = offset
    labels = take(n, "<u4", "labels").astype(np.int64)
    priors = take(C, "<f8", "priors") if flags & FLAG_PRIORS else None
    bad = np.flatnonzero(labels >= C)
    if bad.size:
        i = int(bad[0])
        raise LabelOutOfRange(
            f"label {labels[i]} out of range [0, {C}) at row {i} (byte offset {label_offset + 4 * i})"
        )
    return CalibrationDataset(features, logits, labels, priors)


# --------------------------------------------------------------------------
# csv format


def _save_csv(d: CalibrationDataset, path: Path) -> None:
    header = [f"f{j}" for j in range(d.m)] + [f"l{c}" for c in range(d.C)] + ["label"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(d.n):
            row = [f"{v:.9g}" for v in d.features[i]]
            row += [f"{v:.9g}" for v in d.logits[i]]
            row.append(str(int(d.labels[i])))
            w.writerow(row)


def _load_csv(path: Path) -> CalibrationDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise RejectedEmptyDataset(f"{path} is empty") from None
        header = [h.strip() for h in header]
        if not header or header[-1] != "label":
            raise MagicMismatch(f"{path}: last header column must be 'label'")
        m = sum(1 for h in header if h.startswith("f"))
        C = sum(1 for h in header if h.startswith("l") and h != "label")
        expected = [f"f{j}" for j in range(m)] + [f"l{c}" for c in range(C)] + ["label"]
        if header != expected:
            raise MagicMismatch(f"{path}: header {header} does not match f0..f{{m-1}},l0..l{{C-1}},label")
        feats, logits, labels = [], [], []
        for row_no, row in enumerate(reader):
            if not row:
                continue
            if len(row) != m + C + 1:
                raise TruncatedFile(f"{path}: row {row_no} has {len(row)} fields, expected {m + C + 1}")
            try:
                vals = [float(v) for v in row[: m + C]]
                label = int(row[-1])
            except ValueError as exc:
                raise NonFiniteValue(f"{path}: unparsable value at row {row_no}: {exc}") from None
            if not all(np.isfinite(vals)):
                raise NonFiniteValue(f"{path}: non-finite value at row {row_no}")
            if not 0 <= label < C:
                raise LabelOutOfRange(f"{path}: label {label} out of range [0, {C}) at row {row_no}")
            feats.append(vals[:m])
            logits.append(vals[m:])
            labels.append(label)
    if not labels:
        raise RejectedEmptyDataset(f"{path} has no data rows")
    n = len(labels)
    return CalibrationDataset(
        np.asarray(feats, dtype=np.float64).reshape(n, m),
        np.asarray(logits, dtype=np.float64).reshape(n, C),
        np.asarray(labels, dtype=np.int64),
    )


# --------------------------------------------------------------------------
# splitting and substitution


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[tuple[str, float], ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple((str(k), float(v)) for k, v in self.fractions))
        if not self.fractions:
            raise FractionSumInvalid("no fractions given")
        if any(f <= 0 for _, f in self.fractions):
            raise FractionSumInvalid("every fraction must be positive")
        total = sum(f for _, f in self.fractions)
        if abs(total - 1.0) > 1e-12:
            raise FractionSumInvalid(f"fractions sum to {total!r}, expected 1")


def _part_sizes(n: int, fractions: list[float]) -> list[int]:
    # largest-remainder rounding, ties to the earlier part
    raw = [f * n for f in fractions]
    sizes = [int(np.floor(r + 1e-9)) for r in raw]
    rem = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - sizes[k]), k))
    for k in order[:rem]:
        sizes[k] += 1
    return sizes


def split(d: CalibrationDataset, spec: SplitSpec) -> list[CalibrationDataset]:
    """Disjoint seeded row partition; priors are recomputed per part."""
    parts = split_indices(d.n, spec)
    if any(p.size == 0 for p in parts):
        raise RejectedEmptyDataset(f"split of n={d.n} into {spec.fractions} leaves an empty part")
    return [d.subset(rows) for rows in parts]


def split_indices(n: int, spec: SplitSpec) -> list[np.ndarray]:
    sizes = _part_sizes(n, [f for _, f in spec.fractions])
    perm = make_rng(spec.seed, "split").permutation(n)
    out, start = [], 0
    for size in sizes:
        out.append(np.sort(perm[start : start + size]))
        start += size
    return out


def replace_representation(d: CalibrationDataset, new_features=None, new_logits=None) -> CalibrationDataset:
    features = d.features if new_features is None else np.asarray(new_features, dtype=np.float64)
    logits = d.logits if new_logits is None else np.asarray(new_logits, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != d.n:
        raise ShapeMismatch(f"new features shape {features.shape} does not match n={d.n}")
    if logits.shape != (d.n, d.C):
        raise ShapeMismatch(f"new logits shape {logits.shape} does not match ({d.n}, {d.C})")
    return CalibrationDataset(features, logits, d.labels, d.priors)
