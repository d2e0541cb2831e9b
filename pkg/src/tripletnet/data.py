"""Specimen ingestion, preprocessing, fold planning and sampling.

File formats
------------
manifest CSV
    ``id,image_ref,species,site_id,<feature names...>``
schema file
    one ``<feature name>,<0|1>`` per line; ``1`` marks a site-identifying feature
genetic matrix CSV
    ``species,<name1>,...`` header, then ``<name_i>,d(i,1),...,d(i,S)``
precomputed features CSV
    ``id,f0,...,f31``
images
    binary PPM (P6), 8-bit channels
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FIXED_COLUMNS = ("id", "image_ref", "species", "site_id")
FEATURE_DIM = 32


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class ParseError(DataError):
    pass


class ValidationError(DataError):
    pass


class DecodeError(DataError):
    pass


# ---------------------------------------------------------------------- types


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple[str, ...]
    site_identifying: tuple[bool, ...]

    def __post_init__(self):
        if len(self.names) != len(self.site_identifying):
            raise ValidationError("schema names and flags differ in length")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("schema feature names must be unique")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def kept(self) -> tuple[str, ...]:
        return tuple(n for n, f in zip(self.names, self.site_identifying) if not f)

    @property
    def flagged(self) -> tuple[str, ...]:
        return tuple(n for n, f in zip(self.names, self.site_identifying) if f)

    @classmethod
    def unflagged(cls, names: Sequence[str]) -> "FeatureSchema":
        return cls(tuple(names), (False,) * len(names))


@dataclass
class SpecimenRecord:
    id: str
    image_ref: str
    species: str
    site_id: str
    measurements: np.ndarray


@dataclass(frozen=True)
class GeneticDistanceMatrix:
    species: tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self):
        validate_genetic(self.species, self.matrix)

    def index(self, name: str) -> int:
        try:
            return self.species.index(name)
        except ValueError:
            raise KeyError(f"species {name!r} not in genetic matrix") from None

    def distance(self, a: str, b: str) -> float:
        return float(self.matrix[self.index(a), self.index(b)])

    @property
    def max_offdiag(self) -> float:
        m = self.matrix.copy()
        np.fill_diagonal(m, -np.inf)
        return float(m.max())

    def reorder(self, species: Sequence[str]) -> "GeneticDistanceMatrix":
        idx = [self.index(s) for s in species]
        return GeneticDistanceMatrix(tuple(species), self.matrix[np.ix_(idx, idx)])


@dataclass
class FoldPlan:
    folds: np.ndarray
    k: int

    def train_test(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        test = np.flatnonzero(self.folds == fold)
        train = np.flatnonzero(self.folds != fold)
        return train, test


@dataclass(frozen=True)
class AugmentationConfig:
    noise_mean: float = 0.0
    noise_std: float = 0.05
    rotation_multiples_of_90: bool = True
    flips_allowed: bool = False

    def __post_init__(self):
        # mirroring turns dextral shells into sinistral ones
        if self.flips_allowed:
            raise ValueError("flip augmentation is not supported")
        if self.noise_mean != 0.0:
            raise ValueError("augmentation noise must be zero-mean")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


@dataclass
class Dataset:
    """Model-ready arrays for one collection of specimens."""

    ids: list[str]
    labels: np.ndarray
    species: tuple[str, ...]
    measurements: np.ndarray
    schema: FeatureSchema
    images: np.ndarray | None = None
    features: np.ndarray | None = None
    genetic: GeneticDistanceMatrix | None = None
    site_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_classes(self) -> int:
        return len(self.species)


# -------------------------------------------------------------------- loading


def load_schema(path) -> FeatureSchema:
    names, flags = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            if len(row) != 2 or row[1].strip() not in ("0", "1"):
                raise ParseError(f"{path}: line {lineno}: expected '<name>,<0|1>'")
            names.append(row[0].strip())
            flags.append(row[1].strip() == "1")
    if not names:
        raise ParseError(f"{path}: empty schema")
    return FeatureSchema(tuple(names), tuple(flags))


def load_manifest(path, schema: FeatureSchema | None = None
                  ) -> tuple[list[SpecimenRecord], FeatureSchema]:
    """Parse a manifest CSV.  Without ``schema`` every feature column is unflagged."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty manifest") from None
        missing = [c for c in FIXED_COLUMNS if c not in header]
        if missing:
            raise ParseError(f"{path}: row 1: missing column(s) {', '.join(missing)}")
        if tuple(header[:4]) != FIXED_COLUMNS:
            raise ParseError(f"{path}: row 1: header must start with {','.join(FIXED_COLUMNS)}")
        feature_names = tuple(header[4:])
        if schema is None:
            schema = FeatureSchema.unflagged(feature_names)
        elif schema.names != feature_names:
            raise ParseError(f"{path}: row 1: feature columns {list(feature_names)} "
                             f"do not match schema {list(schema.names)}")
        records: list[SpecimenRecord] = []
        seen: set[str] = set()
        for rowno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {rowno}: expected {len(header)} fields, got {len(row)}")
            rid, image_ref, species, site = (c.strip() for c in row[:4])
            if not rid:
                raise ParseError(f"{path}: row {rowno}: empty id")
            if rid in seen:
                raise ParseError(f"{path}: row {rowno}: duplicate id {rid!r}")
            if not species:
                raise ParseError(f"{path}: row {rowno}: empty species")
            seen.add(rid)
            values = []
            for name, cell in zip(feature_names, row[4:]):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"{path}: row {rowno}: non-numeric value {cell!r} "
                                     f"in column {name!r}") from None
                if not math.isfinite(v):
                    raise ParseError(f"{path}: row {rowno}: non-finite value in column {name!r}")
                values.append(v)
            records.append(SpecimenRecord(rid, image_ref, species, site, np.array(values)))
    return records, schema


def species_labels(records: Sequence[SpecimenRecord]) -> tuple[str, ...]:
    return tuple(sorted({r.species for r in records}))


def class_histogram(records: Sequence[SpecimenRecord]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for r in records:
        counts[r.species] = counts.get(r.species, 0) + 1
    return dict(sorted(counts.items()))


def write_manifest(path, records: Sequence[SpecimenRecord], schema: FeatureSchema) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIXED_COLUMNS + schema.names)
        for r in records:
            w.writerow([r.id, r.image_ref, r.species, r.site_id] + [repr(float(v)) for v in r.measurements])


def write_schema(path, schema: FeatureSchema) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for name, flag in zip(schema.names, schema.site_identifying):
            fh.write(f"{name},{int(flag)}\n")


# ---------------------------------------------------------------------- images


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DecodeError("truncated PPM header")
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    """Decode a binary P6 image to an ``H×W×3`` uint8 array."""
    magic, pos = _read_token(buf, 0)
    if magic != b"P6":
        raise DecodeError(f"not a binary PPM (magic {magic!r})")
    try:
        w_tok, pos = _read_token(buf, pos)
        h_tok, pos = _read_token(buf, pos)
        m_tok, pos = _read_token(buf, pos)
        width, height, maxval = int(w_tok), int(h_tok), int(m_tok)
    except ValueError:
        raise DecodeError("malformed PPM header") from None
    if width <= 0 or height <= 0:
        raise DecodeError("PPM dimensions must be positive")
    if maxval != 255:
        raise DecodeError(f"only 8-bit PPM supported (maxval {maxval})")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise DecodeError("malformed PPM header")
    pos += 1
    need = width * height * 3
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise DecodeError(f"truncated PPM payload: {len(payload)} of {need} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)


def encode_ppm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def _resize_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, edge-clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(image: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of a ``C×H×W`` array to ``C×side×side``."""
    _, h, w = image.shape
    if (h, w) == (side, side):
        return image.astype(np.float64, copy=True)
    y0, y1, wy = _resize_axis(h, side)
    x0, x1, wx = _resize_axis(w, side)
    rows = image[:, y0, :] * (1 - wy)[None, :, None] + image[:, y1, :] * wy[None, :, None]
    return rows[:, :, x0] * (1 - wx)[None, None, :] + rows[:, :, x1] * wx[None, None, :]


def load_image(image_ref, side: int = 224) -> np.ndarray:
    """Read a PPM file as a ``3×side×side`` float array in [0, 1]."""
    with open(image_ref, "rb") as fh:
        pixels = decode_ppm(fh.read())
    chw = pixels.transpose(2, 0, 1).astype(np.float64) / 255.0
    return resize_bilinear(chw, side)


def load_features(path) -> dict[str, np.ndarray]:
    table: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["id"] + [f"f{i}" for i in range(FEATURE_DIM)]
        if header is None or [h.strip() for h in header] != expected:
            raise ParseError(f"{path}: row 1: header must be id,f0..f{FEATURE_DIM - 1}")
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != FEATURE_DIM + 1:
                raise ParseError(f"{path}: row {rowno}: expected {FEATURE_DIM + 1} fields")
            try:
                table[row[0].strip()] = np.array([float(c) for c in row[1:]])
            except ValueError:
                raise ParseError(f"{path}: row {rowno}: non-numeric feature") from None
    return table


# ----------------------------------------------------------------- normalizer


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def fit_normalizer(images: np.ndarray, floor: float = 1e-6) -> NormStats:
    """Per-channel mean and (population) std over an ``N×C×H×W`` training stack."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError("fit_normalizer needs a nonempty N×C×H×W image stack")
    mean = images.mean(axis=(0, 2, 3))
    # one correction pass so a constant channel yields its value exactly
    mean = mean + (images - mean.reshape(1, -1, 1, 1)).mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    return NormStats(mean, np.maximum(std, floor))


def apply_normalizer(images: np.ndarray, stats: NormStats) -> np.ndarray:
    images = np.asarray(images)
    shape = (1,) * (images.ndim - 3) + (-1, 1, 1)
    return (images - stats.mean.reshape(shape)) / stats.std.reshape(shape)


# ------------------------------------------------------------- genetic matrix


def validate_genetic(species: Sequence[str], matrix: np.ndarray, tol: float = 1e-9) -> None:
    m = np.asarray(matrix, dtype=np.float64)
    s = len(species)
    if m.shape != (s, s):
        raise ValidationError(f"genetic matrix shape {m.shape} does not match {s} species")
    if len(set(species)) != s:
        raise ValidationError("duplicate species in genetic matrix")
    if not np.all(np.isfinite(m)):
        i, j = np.argwhere(~np.isfinite(m))[0]
        raise ValidationError(f"non-finite entry at cell ({species[i]}, {species[j]})")
    for i in range(s):
        if m[i, i] != 0.0:
            raise ValidationError(f"nonzero diagonal at cell ({species[i]}, {species[i]}): {m[i, i]}")
    neg = np.argwhere(m < 0)
    if len(neg):
        i, j = neg[0]
        raise ValidationError(f"negative distance at cell ({species[i]}, {species[j]}): {m[i, j]}")
    asym = np.argwhere(np.abs(m - m.T) > tol)
    if len(asym):
        i, j = asym[0]
        raise ValidationError(f"asymmetric cell ({species[i]}, {species[j]}): "
                              f"{m[i, j]} vs {m[j, i]}")
    if s < 2 or not np.any(m > 0):
        raise ValidationError("genetic matrix needs a strictly positive off-diagonal entry")


def load_genetic_distances(path, species: Sequence[str] | None = None) -> GeneticDistanceMatrix:
    """Parse and validate; when ``species`` is given every name must be in the matrix."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and "".join(r).strip()]
    if not rows or rows[0][0].strip() != "species":
        raise ParseError(f"{path}: row 1: header must start with 'species'")
    names = [c.strip() for c in rows[0][1:]]
    if len(rows) - 1 != len(names):
        raise ParseError(f"{path}: expected {len(names)} matrix rows, got {len(rows) - 1}")
    m = np.zeros((len(names), len(names)))
    for i, row in enumerate(rows[1:]):
        rowno = i + 2
        if row[0].strip() != names[i]:
            raise ParseError(f"{path}: row {rowno}: expected species {names[i]!r}, got {row[0]!r}")
        if len(row) != len(names) + 1:
            raise ParseError(f"{path}: row {rowno}: expected {len(names) + 1} fields")
        for j, cell in enumerate(row[1:]):
            try:
                m[i, j] = float(cell)
            except ValueError:
                raise ParseError(f"{path}: row {rowno}: non-numeric cell ({names[i]}, {names[j]})") from None
    gdm = GeneticDistanceMatrix(tuple(names), m)
    if species is not None:
        unknown = [s for s in species if s not in gdm.species]
        if unknown:
            raise ValidationError(f"{path}: species missing from genetic matrix: {', '.join(unknown)}")
    return gdm


def write_genetic_distances(path, gdm: GeneticDistanceMatrix) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("species",) + gdm.species)
        for name, row in zip(gdm.species, gdm.matrix):
            w.writerow([name] + [repr(float(v)) for v in row])


# ------------------------------------------------------------- leakage filter


def leakage_filter(schema: FeatureSchema, records: Sequence[SpecimenRecord]
                   ) -> tuple[list[SpecimenRecord], FeatureSchema]:
    """Drop every site-identifying feature, preserving schema order."""
    keep = [i for i, flag in enumerate(schema.site_identifying) if not flag]
    if not keep:
        raise ValueError("every feature is flagged site-identifying; nothing left to model")
    reduced = FeatureSchema(tuple(schema.names[i] for i in keep), (False,) * len(keep))
    out = [SpecimenRecord(r.id, r.image_ref, r.species, r.site_id, np.asarray(r.measurements)[keep])
           for r in records]
    return out, reduced


# ----------------------------------------------------------------- splitting


def stratified_kfold(labels, k: int, seed: int) -> FoldPlan:
    """Seeded per-class shuffle, then round-robin dealing across folds.

    The dealing pointer carries over from one class to the next so overall
    fold sizes also differ by at most one.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds = np.empty(len(labels), dtype=np.int64)
    pointer = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = (pointer + np.arange(len(idx))) % k
        pointer = (pointer + len(idx)) % k
    return FoldPlan(folds, k)


def balanced_sampler(train_indices, labels, rng: np.random.Generator) -> np.ndarray:
    """One epoch of anchor indices with every class at the majority count.

    Each original sample appears at least once; the shortfall is drawn
    with replacement.  The result is a shuffled stream of length
    ``n_classes * max_count``.
    """
    train_indices = np.asarray(train_indices)
    if train_indices.size == 0:
        raise ValueError("empty training set")
    labels = np.asarray(labels)
    train_labels = labels[train_indices]
    classes, counts = np.unique(train_labels, return_counts=True)
    target = counts.max()
    parts = []
    for c, n in zip(classes, counts):
        members = train_indices[train_labels == c]
        parts.append(members)
        if n < target:
            parts.append(rng.choice(members, size=target - n, replace=True))
    stream = np.concatenate(parts)
    return stream[rng.permutation(len(stream))]


# ---------------------------------------------------------------- augmentation


def augment(image: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator,
            k: int | None = None) -> np.ndarray:
    """Rotate by a random multiple of 90 degrees, then add Gaussian noise.

    Never mirrors.  ``k`` forces the number of quarter turns.
    """
    if k is None:
        k = int(rng.integers(0, 4)) if cfg.rotation_multiples_of_90 else 0
    out = np.rot90(image, k, axes=(-2, -1))
    if cfg.noise_std > 0:
        out = out + rng.normal(cfg.noise_mean, cfg.noise_std, size=out.shape).astype(out.dtype, copy=False)
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    ks = rng.integers(0, 4, size=len(images)) if cfg.rotation_multiples_of_90 else np.zeros(len(images), int)
    out = np.empty_like(images)
    for k in range(4):
        sel = np.flatnonzero(ks == k)
        if sel.size:
            out[sel] = np.rot90(images[sel], k, axes=(-2, -1))
    if cfg.noise_std > 0:
        dtype = out.dtype if out.dtype in (np.float32, np.float64) else np.float64
        out += cfg.noise_std * rng.standard_normal(size=out.shape, dtype=dtype)
    return out


# -------------------------------------------------------------- dataset build


def build_dataset(records: Sequence[SpecimenRecord], schema: FeatureSchema, *,
                  images_dir=None, features=None, image_side: int = 224,
                  genetic: GeneticDistanceMatrix | None = None,
                  species: Sequence[str] | None = None) -> Dataset:
    """Assemble arrays from (already filtered) records.

    Exactly one of ``images_dir`` (PPM files resolved against ``image_ref``)
    or ``features`` (precomputed table keyed by id) supplies image input.
    """
    species = tuple(species) if species is not None else species_labels(records)
    index = {s: i for i, s in enumerate(species)}
    unknown = sorted({r.species for r in records} - set(index))
    if unknown:
        raise ValidationError(f"records use undeclared species: {', '.join(unknown)}")
    for r in records:
        if len(r.measurements) != len(schema):
            raise ValidationError(f"record {r.id}: {len(r.measurements)} measurements, "
                                  f"schema has {len(schema)}")
    labels = np.array([index[r.species] for r in records], dtype=np.int64)
    meas = (np.stack([r.measurements for r in records]) if records
            else np.zeros((0, len(schema))))
    imgs = feats = None
    if images_dir is not None:
        base = Path(images_dir)
        imgs = (np.stack([load_image(base / r.image_ref, image_side) for r in records])
                if records else np.zeros((0, 3, image_side, image_side)))
    elif features is not None:
        missing = [r.id for r in records if r.id not in features]
        if missing:
            raise KeyError(f"no precomputed features for id(s): {', '.join(missing[:5])}")
        feats = (np.stack([features[r.id] for r in records]) if records
                 else np.zeros((0, FEATURE_DIM)))
    if genetic is not None:
        genetic = genetic.reorder([s for s in species])
    return Dataset(ids=[r.id for r in records], labels=labels, species=species,
                   measurements=meas, schema=schema, images=imgs, features=feats,
                   genetic=genetic, site_ids=[r.site_id for r in records])
