"""Small CNN feature extractor plus a linear classifier on pooled features.

Parameters are held as plain float64 arrays. A forward pass wraps them in
:class:`~dreamaug.autodiff.Tensor` objects, either as constants (inference,
input-gradient ascent) or as grad-requiring leaves (training), so computing
gradients with respect to the input never touches parameter gradients.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .errors import ConfigError, DimensionError, FormatError

MAGIC = b"DREAMGEN1\n"


@dataclass(frozen=True)
class Arch:
    in_channels: int = 3
    input_size: int = 32
    widths: tuple = (16, 32, 64)
    num_classes: int = 5
    kernel_size: int = 3
    pool: str = "avg"

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.widths or any(int(w) < 1 for w in self.widths):
            raise ConfigError(f"widths must be a non-empty list of positive ints, got {list(self.widths)}")
        if self.in_channels < 1 or self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("in_channels must be positive and kernel_size a positive odd int")
        if self.pool not in ("avg", "max"):
            raise ConfigError(f"pool must be 'avg' or 'max', got {self.pool!r}")
        size = self.input_size
        for _ in self.widths:
            if size % 2:
                raise ConfigError(f"input_size {self.input_size} not divisible by 2^{len(self.widths)}")
            size //= 2
        if size < 2:
            raise ConfigError(f"feature map would be {size}x{size}; need at least 2x2 for channel statistics")

    @property
    def feature_size(self) -> int:
        return self.input_size // 2 ** len(self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Arch":
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(int(w) for w in d["widths"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad arch fields: {exc}") from exc


@dataclass
class Model:
    arch: Arch
    params: Dict[str, np.ndarray]
    # per-channel normalization the model was trained under; informational
    normalization: Optional[dict] = field(default=None)

    def param_names(self) -> list:
        return list(self.params)

    def tensors(self, requires_grad: bool = False) -> Dict[str, ad.Tensor]:
        return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def copy(self) -> "Model":
        return Model(self.arch, {k: v.copy() for k, v in self.params.items()},
                     None if self.normalization is None else json.loads(json.dumps(self.normalization)))

    def _check_input(self, x: ad.Tensor) -> None:
        a = self.arch
        if x.ndim != 4 or x.shape[1:] != (a.in_channels, a.input_size, a.input_size):
            raise DimensionError(
                f"expected input [N, {a.in_channels}, {a.input_size}, {a.input_size}], got {list(x.shape)}")

    def extract_features(self, x: ad.Tensor, params: Optional[Dict[str, ad.Tensor]] = None) -> ad.Tensor:
        """Final conv-block activation map, before global pooling."""
        self._check_input(x)
        p = self.tensors() if params is None else params
        pool = ad.avg_pool2d if self.arch.pool == "avg" else ad.max_pool2d
        pad = self.arch.kernel_size // 2
        h = x
        for i in range(len(self.arch.widths)):
            h = ad.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], stride=1, padding=pad)
            h = pool(ad.relu(h), 2)
        return h

    def classify(self, features: ad.Tensor, params: Optional[Dict[str, ad.Tensor]] = None) -> ad.Tensor:
        p = self.tensors() if params is None else params
        pooled = ad.mean(features, axis=(2, 3))
        return ad.linear(pooled, p["fc.weight"], p["fc.bias"])

    def predict_logits(self, x: ad.Tensor, params: Optional[Dict[str, ad.Tensor]] = None) -> ad.Tensor:
        p = self.tensors() if params is None else params
        return self.classify(self.extract_features(x, p), p)


def init_model(seed: int, arch: Arch = Arch()) -> Model:
    """Kaiming-uniform conv kernels, uniform(+-1/sqrt(fan_in)) classifier, zero biases."""
    arch.validate()
    gen = rngmod.stream(seed, rngmod.INIT)
    params: Dict[str, np.ndarray] = {}
    cin = arch.in_channels
    k = arch.kernel_size
    for i, width in enumerate(arch.widths):
        fan_in = cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        params[f"conv{i}.weight"] = gen.uniform(-bound, bound, size=(width, cin, k, k))
        params[f"conv{i}.bias"] = np.zeros(width)
        cin = width
    bound = 1.0 / np.sqrt(cin)
    params["fc.weight"] = gen.uniform(-bound, bound, size=(arch.num_classes, cin))
    params["fc.bias"] = np.zeros(arch.num_classes)
    return Model(arch, params)


def checkpoint_bytes(model: Model) -> bytes:
    manifest = []
    offset = 0
    payload = []
    for name, arr in model.params.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = {
        "arch": model.arch.to_dict(),
        "dtype": "<f8",
        "normalization": model.normalization,
        "payload_bytes": offset,
        "tensors": manifest,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    return MAGIC + head + b"".join(payload)


def save_checkpoint(model: Model, path) -> None:
    data = checkpoint_bytes(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def parse_checkpoint(data: bytes) -> Model:
    if not data.startswith(MAGIC):
        raise FormatError("checkpoint: missing or wrong magic section (expected 'DREAMGEN1')")
    end = data.find(b"\n", len(MAGIC))
    if end < 0:
        raise FormatError("checkpoint: header section is truncated (no terminating newline)")
    try:
        header = json.loads(data[len(MAGIC):end])
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint: header section is not valid JSON ({exc})") from exc
    for key in ("arch", "tensors", "payload_bytes"):
        if key not in header:
            raise FormatError(f"checkpoint: header is missing field {key!r}")
    payload = data[end + 1:]
    if len(payload) < header["payload_bytes"]:
        missing = [t["name"] for t in header["tensors"] if t["offset"] + t["nbytes"] > len(payload)]
        raise FormatError(f"checkpoint: payload section truncated; missing tensor data for {missing}")
    try:
        arch = Arch.from_dict(header["arch"])
        arch.validate()
    except ConfigError as exc:
        raise FormatError(f"checkpoint: arch field invalid: {exc}") from exc
    params = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        if count * 8 != t["nbytes"]:
            raise FormatError(f"checkpoint: tensor {t['name']!r} shape/nbytes mismatch")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=t["offset"])
        params[t["name"]] = arr.astype(np.float64).reshape(t["shape"])
    expected = init_model(0, arch).params
    for name, ref in expected.items():
        if name not in params:
            raise FormatError(f"checkpoint: tensor manifest is missing {name!r}")
        if params[name].shape != ref.shape:
            raise FormatError(f"checkpoint: tensor {name!r} has shape {list(params[name].shape)}, expected {list(ref.shape)}")
    return Model(arch, params, header.get("normalization"))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
