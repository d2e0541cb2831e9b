"""Flat ``key = value`` run configuration files.

Blank lines and ``#`` comments are ignored.  Relative paths resolve against
the directory holding the config file.  ``seed`` is mandatory.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import AugmentationConfig
from .evaluation.synthetic import SyntheticSpec
from .model import TinyConvNet
from .training import TrainConfig


class ConfigError(ValueError):
    pass


PATH_KEYS = ("manifest", "schema", "images", "features", "genetic", "checkpoint")


def _int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(" ", "").split(",") if x)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> parser
TYPES = {
    "seed": int, "image_side": int, "config": int, "folds": int,
    "batch_size": int, "epochs": int, "lr0": float, "lr_min": float,
    "margin": float, "m_min": float, "m_max": float,
    "standardize_measurements": _bool, "noise_std": float, "dtype": str,
    "embed_hidden": _int_tuple, "classifier_hidden": _int_tuple, "conv_channels": _int_tuple,
    "threshold": float, "n_trees": int,
    "classes": int, "class_sizes": _int_tuple, "measurement_dim": int, "separation": float,
    "image_separation": float, "leakage": _bool, "n_site_features": int, "image_noise": float,
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in TYPES and key not in PATH_KEYS:
            raise ConfigError(f"{source}: line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}: line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


@dataclass
class RunConfig:
    seed: int
    paths: dict[str, Path] = field(default_factory=dict)
    image_side: int = 224
    config: int = 4
    folds: int = 5
    train: TrainConfig = TrainConfig()
    conv_channels: tuple[int, ...] = (8, 16, 32)
    threshold: float = 0.90
    n_trees: int = 100
    synthetic: SyntheticSpec = SyntheticSpec()
    source: str = "<config>"

    def path(self, key: str, required: bool = True) -> Path | None:
        p = self.paths.get(key)
        if p is None:
            if required:
                raise ConfigError(f"{self.source}: missing required key {key!r}")
            return None
        if not p.exists():
            raise ConfigError(f"{self.source}: {key} path does not exist: {p}")
        return p

    @property
    def extractor(self) -> TinyConvNet:
        return TinyConvNet(channels=self.conv_channels)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    raw = parse_config_text(text, str(path))
    if "seed" not in raw:
        raise ConfigError(f"{path}: 'seed' is mandatory")
    vals = {}
    for k, v in raw.items():
        if k in PATH_KEYS:
            continue
        try:
            vals[k] = TYPES[k](v)
        except ValueError as exc:
            raise ConfigError(f"{path}: bad value for {k!r}: {exc}") from None
    base = path.parent
    paths = {k: (base / raw[k]) for k in PATH_KEYS if k in raw}

    train_keys = {f.name for f in fields(TrainConfig)}
    tkw = {k: vals[k] for k in vals if k in train_keys}
    tkw["seed"] = vals["seed"]
    if "noise_std" in vals:
        tkw["augmentation"] = AugmentationConfig(noise_std=vals["noise_std"])
    try:
        train = TrainConfig(**tkw)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None

    synth_map = {"classes": "n_classes", "class_sizes": "class_sizes", "measurement_dim": "measurement_dim",
                 "separation": "separation", "image_separation": "image_separation", "leakage": "leakage",
                 "n_site_features": "n_site_features", "image_noise": "image_noise",
                 "image_side": "image_side"}
    skw = {dst: vals[src] for src, dst in synth_map.items() if src in vals}
    try:
        synthetic = SyntheticSpec(seed=vals["seed"], **skw)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None

    rc = RunConfig(seed=vals["seed"], paths=paths, train=train, synthetic=synthetic, source=str(path))
    for k in ("image_side", "config", "folds", "conv_channels", "threshold", "n_trees"):
        if k in vals:
            rc = replace(rc, **{k: vals[k]})
    if rc.config not in (1, 2, 3, 4):
        raise ConfigError(f"{path}: config must be 1, 2, 3 or 4")
    return rc
