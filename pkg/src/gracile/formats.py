"""On-disk exchange formats and parameter enumeration.

Model files (.nnxf) carry an architecture JSON section plus raw little-endian
tensor payloads; dataset files (.nnxd) carry labeled float32 sample tensors.
Floats are stored as raw IEEE754 bit patterns, never decimal text. The byte
layouts are documented in docs/format.md; ``save(load(f))`` is byte-identical
for canonical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .bitflip import ParameterRef
from .model import (DTYPE_WIDTHS, LayerDescriptor, Model, ModelError,
                    ModelSpec, NUMPY_DTYPES, ParameterStore, ParamTensor,
                    float_to_bits)

MODEL_MAGIC = b"NNXF"
DATASET_MAGIC = b"NNXD"
FORMAT_VERSION = 1

_MAX_DIMS = 8
_MAX_JSON = 1 << 24


class FormatError(Exception):
    """Malformed model or dataset file."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class UnknownDtypeError(FormatError):
    pass


def canonical_json(obj) -> bytes:
    """Canonical architecture JSON: sorted keys, compact, ASCII."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.take(4))[0]

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes after payload")


_LAYER_FIELDS = {
    "conv": ("in_channels", "out_channels", "kernel", "stride", "padding", "bias"),
    "fc": ("in_features", "out_features", "bias"),
    "maxpool": ("pool", "pool_stride"),
    "batchnorm": ("features", "eps_bits"),
    "dropout": ("rate_bits",),
    "flatten": (),
}


def spec_to_arch_dict(spec: ModelSpec) -> dict:
    layers = []
    for layer in spec.layers:
        entry = {"name": layer.name, "kind": layer.kind, "activation": layer.activation}
        for fname in _LAYER_FIELDS[layer.kind]:
            value = getattr(layer, fname)
            entry[fname] = list(value) if isinstance(value, tuple) else value
        if layer.activation == "reluclamp":
            entry["clamp_bits"] = layer.clamp_bits
        layers.append(entry)
    return {
        "class_count": spec.class_count,
        "input_shape": list(spec.input_shape),
        "layers": layers,
    }


def arch_dict_to_spec(arch: dict) -> ModelSpec:
    try:
        layers = []
        for entry in arch["layers"]:
            kwargs = {"name": entry["name"], "kind": entry["kind"],
                      "activation": entry.get("activation", "none")}
            for fname in _LAYER_FIELDS.get(entry["kind"], ()):
                if fname in entry:
                    value = entry[fname]
                    kwargs[fname] = tuple(value) if isinstance(value, list) else value
            if "clamp_bits" in entry:
                kwargs["clamp_bits"] = entry["clamp_bits"]
            layers.append(LayerDescriptor(**kwargs))
        return ModelSpec(input_shape=tuple(arch["input_shape"]),
                         class_count=int(arch["class_count"]), layers=layers)
    except (KeyError, TypeError, ValueError, ModelError) as exc:
        raise FormatError(f"invalid architecture section: {exc}") from exc


_DTYPE_TAGS = {"f32": 0, "u8-quant": 1, "i8-binary": 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def model_to_bytes(model: Model) -> bytes:
    arch = canonical_json(spec_to_arch_dict(model.spec))
    parts = [MODEL_MAGIC, struct.pack("<I", FORMAT_VERSION),
             struct.pack("<I", len(arch)), arch,
             struct.pack("<I", len(model.params))]
    for name in model.spec.parameter_names():
        tensor = model.params[name]
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", _DTYPE_TAGS[tensor.dtype]))
        parts.append(struct.pack("<B", len(tensor.shape)))
        parts.append(struct.pack(f"<{len(tensor.shape)}I", *tensor.shape))
        if tensor.dtype == "u8-quant":
            parts.append(struct.pack("<fB", tensor.scale, tensor.zero_point))
        elif tensor.dtype == "i8-binary":
            parts.append(struct.pack("<f", tensor.scale))
        parts.append(tensor.data.tobytes())
    return b"".join(parts)


def model_from_bytes(data: bytes) -> Model:
    r = _Reader(data)
    if r.take(4) != MODEL_MAGIC:
        raise BadMagicError("not a model file (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version}")
    arch_len = r.u32()
    if arch_len > _MAX_JSON:
        raise FormatError(f"architecture section of {arch_len} bytes exceeds sanity bound")
    try:
        arch = json.loads(r.take(arch_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"architecture JSON unreadable: {exc}") from exc
    spec = arch_dict_to_spec(arch)
    n_params = r.u32()
    tensors = []
    for _ in range(n_params):
        name = r.take(r.u16()).decode("utf-8")
        tag = r.u8()
        if tag not in _TAG_DTYPES:
            raise UnknownDtypeError(f"tensor {name!r}: unknown dtype tag {tag}")
        dtype = _TAG_DTYPES[tag]
        ndim = r.u8()
        if ndim > _MAX_DIMS:
            raise FormatError(f"tensor {name!r}: {ndim} dims exceeds sanity bound")
        shape = tuple(r.u32() for _ in range(ndim))
        scale, zero_point = 1.0, 0
        if dtype == "u8-quant":
            scale = r.f32()
            zero_point = r.u8()
        elif dtype == "i8-binary":
            scale = r.f32()
        count = 1
        for d in shape:
            count *= d
        payload = r.take(count * DTYPE_WIDTHS[dtype])
        array = np.frombuffer(payload, dtype=NUMPY_DTYPES[dtype]).copy()
        tensors.append(ParamTensor(name=name, shape=shape, dtype=dtype, data=array,
                                   scale=scale, zero_point=zero_point))
    r.done()
    try:
        store = ParameterStore(tensors)
        model = Model(spec, store)
    except Exception as exc:
        raise ShapeMismatchError(str(exc)) from exc
    return model


def save_model(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


@dataclass
class Dataset:
    """Labeled sample tensors, fixed shape, labels < class_count."""

    images: np.ndarray  # (N, *shape) float32
    labels: np.ndarray  # (N,) uint16
    class_count: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError("images/labels length mismatch")
        if len(self.labels) and int(self.labels.max()) >= self.class_count:
            raise FormatError("label out of range for class count")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.class_count)


def dataset_to_bytes(ds: Dataset) -> bytes:
    shape = ds.images.shape[1:]
    parts = [DATASET_MAGIC, struct.pack("<I", FORMAT_VERSION),
             struct.pack("<I", len(ds)), struct.pack("<H", ds.class_count),
             struct.pack("<B", len(shape)), struct.pack(f"<{len(shape)}I", *shape)]
    images = np.ascontiguousarray(ds.images, dtype="<f4")
    for i in range(len(ds)):
        parts.append(struct.pack("<H", int(ds.labels[i])))
        parts.append(images[i].tobytes())
    return b"".join(parts)


def dataset_from_bytes(data: bytes) -> Dataset:
    r = _Reader(data)
    if r.take(4) != DATASET_MAGIC:
        raise BadMagicError("not a dataset file (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset format version {version}")
    count = r.u32()
    class_count = r.u16()
    ndim = r.u8()
    if ndim > _MAX_DIMS:
        raise FormatError(f"{ndim} sample dims exceeds sanity bound")
    shape = tuple(r.u32() for _ in range(ndim))
    per_sample = 1
    for d in shape:
        per_sample *= d
    expected = count * (2 + per_sample * 4)
    if len(data) - r.pos != expected:
        raise TruncatedFileError(
            f"sample section is {len(data) - r.pos} bytes, expected {expected}")
    labels = np.empty(count, dtype=np.uint16)
    images = np.empty((count, *shape), dtype=np.float32)
    for i in range(count):
        labels[i] = r.u16()
        images[i] = np.frombuffer(r.take(per_sample * 4), dtype="<f4").reshape(shape)
    r.done()
    if count and int(labels.max()) >= class_count:
        raise FormatError("label out of range for class count")
    return Dataset(images, labels, class_count)


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


def enumerate_parameters(model: Model, *, min_tensor_bytes: int = 0,
                         exclude_running_stats: bool = False,
                         sample: int | None = None, seed: int = 0) -> list[ParameterRef]:
    """Ordered parameter refs, optionally size-filtered and/or uniformly sampled.

    Order is the serialization order (layer order, flat index within tensor),
    which keeps enumeration stable across platforms. Sampling is uniform
    without replacement over the filtered population and deterministic given
    the seed; the result keeps enumeration order.
    """
    population: list[tuple[str, int]] = []
    for name in model.spec.parameter_names():
        tensor = model.params[name]
        if tensor.nbytes < min_tensor_bytes:
            continue
        if exclude_running_stats and name.rsplit(".", 1)[-1] in ("running_mean", "running_var"):
            continue
        population.append((name, tensor.data.size))
    total = sum(size for _, size in population)
    if sample is None:
        return [ParameterRef(name, i) for name, size in population for i in range(size)]
    if sample > total:
        raise ValueError(f"cannot sample {sample} parameters from a population of {total}")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(total, size=sample, replace=False))
    refs = []
    base = 0
    it = iter(chosen.tolist())
    nxt = next(it, None)
    for name, size in population:
        while nxt is not None and nxt < base + size:
            refs.append(ParameterRef(name, nxt - base))
            nxt = next(it, None)
        base += size
    return refs


def file_sha256(path) -> str:
    import hashlib

    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()
