"""Fusion network: image features -> concat measurements -> embedding -> logits."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import FEATURE_DIM
from .tensor import Parameter, ShapeError, Tensor

MAGIC = b"MTRP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TinyConvNet:
    channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    stride: int = 2
    dense: tuple[int, ...] = (FEATURE_DIM,)

    def __post_init__(self):
        if not self.dense or self.dense[-1] != FEATURE_DIM:
            raise ValueError(f"extractor must end in {FEATURE_DIM} features")

    @property
    def output_dim(self) -> int:
        return FEATURE_DIM

    def spatial_sizes(self, side: int) -> list[int]:
        sizes = [side]
        for _ in self.channels:
            nxt = (sizes[-1] - self.kernel) // self.stride + 1
            if nxt < 1:
                raise ValueError(f"image side {side} too small for {len(self.channels)} conv layers")
            sizes.append(nxt)
        return sizes


@dataclass(frozen=True)
class PrecomputedFeatures:
    """Looks image features up by specimen id; contributes no parameters."""

    table: Mapping[str, np.ndarray] = field(default_factory=dict, compare=False, repr=False)

    @property
    def output_dim(self) -> int:
        return FEATURE_DIM

    def lookup(self, ids: Sequence[str]) -> np.ndarray:
        missing = [i for i in ids if i not in self.table]
        if missing:
            raise KeyError(f"no precomputed features for id(s): {', '.join(map(str, missing[:5]))}")
        if not len(ids):
            return np.zeros((0, FEATURE_DIM))
        return np.stack([np.asarray(self.table[i], dtype=np.float64) for i in ids])


ExtractorSpec = TinyConvNet | PrecomputedFeatures


@dataclass(frozen=True)
class NetworkConfig:
    n_classes: int
    n_measurements: int = 0
    image_side: int = 32
    embed_dim: int = 32
    embed_hidden: tuple[int, ...] = (64,)
    classifier_hidden: tuple[int, ...] = ()

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.n_measurements < 0:
            raise ValueError("measurement count must be nonnegative")


@dataclass
class ModelParams:
    """Ordered learnable tensors plus the configuration that shapes them."""

    config: NetworkConfig
    extractor: ExtractorSpec
    tensors: dict[str, Parameter]

    @property
    def s1(self) -> Parameter:
        return self.tensors["s1"]

    @property
    def s2(self) -> Parameter:
        return self.tensors["s2"]

    def parameters(self) -> list[Parameter]:
        return list(self.tensors.values())

    def zero_grad(self) -> None:
        for p in self.tensors.values():
            p.zero_grad()

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, self.extractor,
                           {k: Parameter(p.data.astype(dtype), k) for k, p in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return self.tensors["s1"].data.dtype

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.tensors.items()}


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _dense_stack(rng, tensors, prefix: str, sizes: Sequence[int], fan_in: int) -> None:
    for i, n in enumerate(sizes):
        tensors[f"{prefix}.{i}.w"] = Parameter(_he(rng, (fan_in, n), fan_in), f"{prefix}.{i}.w")
        tensors[f"{prefix}.{i}.b"] = Parameter(np.zeros(n), f"{prefix}.{i}.b")
        fan_in = n


def init_params(config: NetworkConfig, spec: ExtractorSpec, seed: int) -> ModelParams:
    """He-normal weights, zero biases, s1 = s2 = 0."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Parameter] = {}
    if isinstance(spec, TinyConvNet):
        spec.spatial_sizes(config.image_side)
        c_in = 3
        for i, c in enumerate(spec.channels):
            fan_in = c_in * spec.kernel * spec.kernel
            tensors[f"conv.{i}.w"] = Parameter(_he(rng, (c, c_in, spec.kernel, spec.kernel), fan_in), f"conv.{i}.w")
            tensors[f"conv.{i}.b"] = Parameter(np.zeros(c), f"conv.{i}.b")
            c_in = c
        _dense_stack(rng, tensors, "extract", spec.dense, c_in)
    joint = FEATURE_DIM + config.n_measurements
    _dense_stack(rng, tensors, "embed", tuple(config.embed_hidden) + (config.embed_dim,), joint)
    _dense_stack(rng, tensors, "classify", tuple(config.classifier_hidden) + (config.n_classes,),
                 config.embed_dim)
    tensors["s1"] = Parameter(np.zeros(()), "s1")
    tensors["s2"] = Parameter(np.zeros(()), "s2")
    return ModelParams(config, spec, tensors)


def _dense(params: ModelParams, prefix: str, n_layers: int, x: Tensor) -> Tensor:
    for i in range(n_layers):
        x = T.add(T.matmul(x, params.tensors[f"{prefix}.{i}.w"]), params.tensors[f"{prefix}.{i}.b"])
        if i < n_layers - 1:
            x = T.relu(x)
    return x


def extract_image_features(params: ModelParams, images) -> Tensor:
    """``B×3×H×W`` images (TinyConvNet) or a sequence of ids (precomputed) to ``B×32``."""
    spec = params.extractor
    if isinstance(spec, PrecomputedFeatures):
        return Tensor(spec.lookup(list(images)).astype(params.dtype, copy=False))
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=params.dtype))
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected B×3×H×W images, got {x.shape}")
    for i in range(len(spec.channels)):
        b = params.tensors[f"conv.{i}.b"]
        x = T.conv2d(x, params.tensors[f"conv.{i}.w"], spec.stride)
        x = T.relu(T.add(x, T.reshape(b, (1, -1, 1, 1))))
    x = T.mean(x, axis=(2, 3))
    return _dense(params, "extract", len(spec.dense), x)


def fuse(image_features, measurements) -> Tensor:
    """Concatenate columns, image features first.  Zero measurement columns is the identity."""
    image_features = image_features if isinstance(image_features, Tensor) else Tensor(image_features)
    if measurements is None:
        return image_features
    meas = measurements if isinstance(measurements, Tensor) else Tensor(
        np.asarray(measurements, dtype=image_features.dtype))
    if meas.data.ndim != 2 or meas.shape[0] != image_features.shape[0]:
        raise ShapeError(f"batch mismatch: features {image_features.shape}, measurements {meas.shape}")
    if meas.shape[1] == 0:
        return image_features
    return T.concat([image_features, meas], axis=1)


def embed(params: ModelParams, joint) -> Tensor:
    cfg = params.config
    return _dense(params, "embed", len(cfg.embed_hidden) + 1, joint)


def classify(params: ModelParams, embeddings) -> Tensor:
    cfg = params.config
    return _dense(params, "classify", len(cfg.classifier_hidden) + 1, embeddings)


def predict(logits) -> np.ndarray:
    """Argmax per row; ties resolve to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1)


def forward(params: ModelParams, images, measurements=None) -> tuple[Tensor, Tensor]:
    cfg = params.config
    if cfg.n_measurements == 0:
        measurements = None
    elif measurements is None or np.shape(measurements)[1] != cfg.n_measurements:
        raise ShapeError(f"network expects {cfg.n_measurements} measurement columns")
    feats = extract_image_features(params, images)
    emb = embed(params, fuse(feats, measurements))
    return emb, classify(params, emb)


# ---------------------------------------------------------------- checkpoints


def _extractor_to_dict(spec: ExtractorSpec) -> dict:
    if isinstance(spec, TinyConvNet):
        return {"variant": "TinyConvNet", **{k: list(v) if isinstance(v, tuple) else v
                                             for k, v in asdict(spec).items()}}
    return {"variant": "PrecomputedFeatures"}


def _extractor_from_dict(d: dict) -> ExtractorSpec:
    if d["variant"] == "TinyConvNet":
        return TinyConvNet(tuple(d["channels"]), d["kernel"], d["stride"], tuple(d["dense"]))
    if d["variant"] == "PrecomputedFeatures":
        return PrecomputedFeatures()
    raise ValueError(f"unknown extractor variant {d['variant']!r}")


def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    """Write ``MTRP`` | u32 version | u32 header length | JSON header |
    float32 LE parameters in declaration order | u64 byte count of all preceding bytes.
    """
    cfg = asdict(params.config)
    header = {
        "network": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()},
        "extractor": _extractor_to_dict(params.extractor),
        "parameters": [[k, list(p.data.shape)] for k, p in params.tensors.items()],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(blob)) + blob
    body += b"".join(p.data.astype("<f4").tobytes() for p in params.tensors.values())
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<Q", len(body)))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20 or raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (length,) = struct.unpack("<Q", raw[-8:])
    if length != len(raw) - 8:
        raise ValueError(f"{path}: length check failed ({length} vs {len(raw) - 8})")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    net = header["network"]
    config = NetworkConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in net.items()})
    extractor = _extractor_from_dict(header["extractor"])
    tensors: dict[str, Parameter] = {}
    offset = 12 + hlen
    for name, shape in header["parameters"]:
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).astype(np.float64)
        tensors[name] = Parameter(arr.reshape(shape), name)
        offset += 4 * n
    if offset != len(raw) - 8:
        raise ValueError(f"{path}: parameter payload size mismatch")
    return ModelParams(config, extractor, tensors), header["meta"]
