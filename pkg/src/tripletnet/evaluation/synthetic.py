"""Class-conditional synthetic specimens at the scale of the real collection.

Species are leaves of a random ultrametric tree.  Class means for the
measurements and the image tint are drawn from a Gaussian whose covariance
is the shared root-to-leaf path length, so genetically close species also
look and measure alike.  Each species carries its own chiral 4×4 glyph.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..data import Dataset, FeatureSchema, GeneticDistanceMatrix, SpecimenRecord, encode_ppm, \
    leakage_filter, write_genetic_distances, write_manifest, write_schema

KEPT_NAMES = ("shell_length", "shell_width", "aperture_length", "aperture_width",
              "body_whorl_width", "penultimate_whorl_width", "habitat_type", "geology_unit",
              "elevation_band", "mean_temperature", "annual_precipitation", "temperature_seasonality")
SITE_NAMES = ("country", "latitude", "longitude", "elevation_m", "max_temperature",
              "min_temperature", "site_code")


def default_class_sizes(n_classes: int = 21, smallest: int = 5, largest: int = 88,
                      total: int = 706) -> tuple[int, ...]:
    """Geometric ramp from ``smallest`` to ``largest`` with interior sizes rescaled to ``total``."""
    raw = smallest * (largest / smallest) ** (np.arange(n_classes) / (n_classes - 1))
    interior = raw[1:-1] * (total - smallest - largest) / raw[1:-1].sum()
    base = np.floor(interior).astype(int)
    short = total - smallest - largest - base.sum()
    base[np.argsort(-(interior - base), kind="stable")[:short]] += 1
    return (smallest, *base.tolist(), largest)


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 21
    class_sizes: tuple[int, ...] | None = None
    image_side: int = 32
    measurement_dim: int = 12
    separation: float = 0.75
    image_separation: float = 1.0
    leakage: bool = False
    n_site_features: int = 7
    image_noise: float = 0.08
    seed: int = 0

    def sizes(self) -> tuple[int, ...]:
        if self.class_sizes is not None:
            return tuple(self.class_sizes)
        if self.n_classes == 21:
            return default_class_sizes()
        return default_class_sizes(self.n_classes, 5, 88, int(round(706 * self.n_classes / 21)))

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        sizes = self.sizes()
        if len(sizes) != self.n_classes or min(sizes) < 1:
            raise ValueError("class sizes must be positive, one per class")
        if self.separation < 0 or self.image_separation < 0:
            raise ValueError("separation must be nonnegative")
        if self.image_side < 8:
            raise ValueError("image side must be at least 8")


SEPARABLE = dict(separation=3.0, image_separation=2.0)


@dataclass
class SyntheticData:
    records: list[SpecimenRecord]
    schema: FeatureSchema
    pixels: np.ndarray  # N×H×W×3 uint8
    genetic: GeneticDistanceMatrix
    species: tuple[str, ...] = field(default=())

    def to_dataset(self, filtered: bool = True) -> Dataset:
        records, schema = (leakage_filter(self.schema, self.records) if filtered
                           else (self.records, self.schema))
        index = {s: i for i, s in enumerate(self.species)}
        return Dataset(ids=[r.id for r in records],
                       labels=np.array([index[r.species] for r in records], dtype=np.int64),
                       species=self.species,
                       measurements=np.stack([r.measurements for r in records]),
                       schema=schema,
                       images=self.pixels.transpose(0, 3, 1, 2).astype(np.float64) / 255.0,
                       genetic=self.genetic, site_ids=[r.site_id for r in records])

    def write(self, out_dir) -> dict[str, Path]:
        """Write manifest, schema, genetic matrix and PPM images under ``out_dir``."""
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        for r, px in zip(self.records, self.pixels):
            (out / "images" / r.image_ref).write_bytes(encode_ppm(px))
        paths = {"manifest": out / "manifest.csv", "schema": out / "schema.csv",
                 "genetic": out / "genetic.csv", "images": out / "images"}
        write_manifest(paths["manifest"], self.records, self.schema)
        write_schema(paths["schema"], self.schema)
        write_genetic_distances(paths["genetic"], self.genetic)
        return paths


def random_ultrametric(n: int, rng: np.random.Generator) -> np.ndarray:
    """Pairwise 2×(merge height) distances from random agglomeration of ``n`` leaves."""
    clusters = [[i] for i in range(n)]
    dist = np.zeros((n, n))
    height = 0.0
    while len(clusters) > 1:
        height += rng.exponential(1.0)
        a, b = sorted(rng.choice(len(clusters), size=2, replace=False))
        for i in clusters[a]:
            for j in clusters[b]:
                dist[i, j] = dist[j, i] = 2.0 * height
        clusters[a] = clusters[a] + clusters.pop(b)
    return dist


def _chiral_glyph(rng: np.random.Generator) -> np.ndarray:
    while True:
        g = rng.integers(0, 2, size=(4, 4))
        if not 5 <= g.sum() <= 11:
            continue
        rots = [np.rot90(g, k) for k in range(4)]
        mirrors = [np.fliplr(r) for r in rots]
        if any(np.array_equal(g, r) for r in rots[1:]) or any(np.array_equal(g, m) for m in mirrors):
            continue
        return g


def generate_synthetic(spec: SyntheticSpec, seed: int | None = None) -> SyntheticData:
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    C, sizes, side = spec.n_classes, spec.sizes(), spec.image_side
    species = tuple(f"sp{c:02d}" for c in range(C))

    dist = random_ultrametric(C, rng)
    root = dist.max() / 2.0
    cov = 1.0 - dist / (2.0 * root)  # shared path fraction, unit diagonal
    chol = np.linalg.cholesky(cov + 1e-9 * np.eye(C))

    def class_means(dim: int) -> np.ndarray:
        return chol @ rng.normal(size=(C, dim))

    meas_means = spec.separation * class_means(spec.measurement_dim)
    meas_loc = rng.uniform(1.0, 4.0, size=spec.measurement_dim)
    tints = np.tanh(class_means(3))
    glyphs = [_chiral_glyph(rng) for _ in range(C)]
    site_codes = rng.permutation(C) + 1

    kept = tuple(KEPT_NAMES[i] if i < len(KEPT_NAMES) else f"measurement_{i}"
                 for i in range(spec.measurement_dim))
    flagged = tuple(SITE_NAMES[i] if i < len(SITE_NAMES) else f"site_feature_{i}"
                    for i in range(spec.n_site_features))
    schema = FeatureSchema(kept + flagged, (False,) * len(kept) + (True,) * len(flagged))

    cell = side // 8
    patch = 4 * cell
    records, pixels = [], []
    n = 0
    for c, size in enumerate(sizes):
        for _ in range(size):
            meas = meas_loc + meas_means[c] + rng.normal(size=spec.measurement_dim)
            site = rng.normal(size=spec.n_site_features)
            if spec.n_site_features:
                code = site_codes[c] if spec.leakage else int(rng.integers(1, C + 1))
                site[-1] = float(code)
            else:
                code = site_codes[c]
            img = np.full((side, side, 3), 0.5)
            img += 0.2 * spec.image_separation * tints[c]
            mask = np.kron(glyphs[c], np.ones((cell, cell)))
            oy, ox = rng.integers(0, side - patch + 1, size=2)
            img[oy:oy + patch, ox:ox + patch, :] += 0.2 * spec.image_separation * mask[:, :, None]
            img += rng.normal(0.0, spec.image_noise, size=img.shape)
            pixels.append(np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8))
            rid = f"S{n:04d}"
            records.append(SpecimenRecord(rid, f"{rid}.ppm", species[c], f"site{int(code):02d}",
                                          np.concatenate([meas, site])))
            n += 1
    gdm = GeneticDistanceMatrix(species, dist)
    data = SyntheticData(records, schema, np.stack(pixels), gdm, species)
    return data
