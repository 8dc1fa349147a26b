"""Model structures: layer descriptors, parameter tensors, and the mutable store.

Tensors are flat float32/uint8/int8 numpy arrays in row-major order. A store
loaded from disk is immutable by convention except through the flip API, which
tracks per-tensor version counters so cached float32 views stay coherent.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

LAYER_KINDS = ("conv", "fc", "maxpool", "batchnorm", "dropout", "flatten")
ACTIVATIONS = ("none", "relu", "prelu", "relu6", "reluclamp", "tanh", "softmax")

DTYPE_WIDTHS = {"f32": 4, "u8-quant": 1, "i8-binary": 1}


class ModelError(Exception):
    """Structural problem in a model description or its parameters."""


def bits_to_float(bits: int) -> float:
    return struct.unpack("<f", struct.pack("<I", bits))[0]


def float_to_bits(value: float) -> int:
    return struct.unpack("<I", struct.pack("<f", value))[0]


@dataclass
class LayerDescriptor:
    """One layer of the network plus the activation applied after it.

    Float-valued hyper-parameters (batchnorm epsilon, dropout rate, clamp
    bound) are carried as raw IEEE754 bit patterns so the on-disk JSON stays
    canonical across languages.
    """

    name: str
    kind: str
    activation: str = "none"
    # conv
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: tuple[int, int] | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    bias: bool = True
    # fc
    in_features: int | None = None
    out_features: int | None = None
    # maxpool
    pool: tuple[int, int] | None = None
    pool_stride: tuple[int, int] | None = None
    # batchnorm
    features: int | None = None
    eps_bits: int = float_to_bits(1e-5)
    # dropout
    rate_bits: int = float_to_bits(0.5)
    # reluclamp bound
    clamp_bits: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ModelError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")
        if self.kind == "conv" and (self.in_channels is None or self.out_channels is None or self.kernel is None):
            raise ModelError(f"conv layer {self.name!r} missing channel/kernel config")
        if self.kind == "fc" and (self.in_features is None or self.out_features is None):
            raise ModelError(f"fc layer {self.name!r} missing feature counts")
        if self.kind == "maxpool" and self.pool is None:
            raise ModelError(f"maxpool layer {self.name!r} missing pool size")
        if self.activation == "reluclamp" and self.clamp_bits is None:
            raise ModelError(f"layer {self.name!r} uses reluclamp without a bound")

    @property
    def eps(self) -> float:
        return bits_to_float(self.eps_bits)

    @property
    def clamp(self) -> float:
        if self.clamp_bits is None:
            raise ModelError(f"layer {self.name!r} has no clamp bound")
        return bits_to_float(self.clamp_bits)

    def parameter_names(self) -> list[str]:
        """Declared parameter names in serialization order."""
        names = []
        if self.kind == "conv" or self.kind == "fc":
            names.append(f"{self.name}.weight")
            if self.bias:
                names.append(f"{self.name}.bias")
        if self.kind == "batchnorm":
            names += [f"{self.name}.gamma", f"{self.name}.beta",
                      f"{self.name}.running_mean", f"{self.name}.running_var"]
        if self.activation == "prelu":
            names.append(f"{self.name}.alpha")
        return names

    def parameter_shape(self, pname: str) -> tuple[int, ...]:
        leaf = pname.rsplit(".", 1)[1]
        if self.kind == "conv":
            if leaf == "weight":
                return (self.out_channels, self.in_channels, *self.kernel)
            if leaf == "bias":
                return (self.out_channels,)
        if self.kind == "fc":
            if leaf == "weight":
                return (self.out_features, self.in_features)
            if leaf == "bias":
                return (self.out_features,)
        if self.kind == "batchnorm" and leaf in ("gamma", "beta", "running_mean", "running_var"):
            return (self.features,)
        if leaf == "alpha":
            return (1,)
        raise ModelError(f"layer {self.name!r} declares no parameter {pname!r}")


@dataclass
class ModelSpec:
    """Ordered layer list plus input/output metadata."""

    input_shape: tuple[int, ...]
    class_count: int
    layers: list[LayerDescriptor]

    def __post_init__(self):
        seen = set()
        for layer in self.layers:
            if layer.name in seen:
                raise ModelError(f"duplicate layer name {layer.name!r}")
            seen.add(layer.name)

    def layer_index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise ModelError(f"no layer named {name!r}")

    def parameter_names(self) -> list[str]:
        names = []
        for layer in self.layers:
            names += layer.parameter_names()
        return names


NUMPY_DTYPES = {"f32": np.float32, "u8-quant": np.uint8, "i8-binary": np.int8}


@dataclass
class ParamTensor:
    """A named parameter tensor with its storage representation."""

    name: str
    shape: tuple[int, ...]
    dtype: str  # f32 | u8-quant | i8-binary
    data: np.ndarray
    scale: float = 1.0     # u8-quant / i8-binary
    zero_point: int = 0    # u8-quant

    def __post_init__(self):
        expect = NUMPY_DTYPES[self.dtype]
        if self.data.dtype != expect:
            raise ModelError(f"tensor {self.name!r}: storage dtype {self.data.dtype} != {self.dtype}")
        if self.data.size != int(np.prod(self.shape)):
            raise ModelError(f"tensor {self.name!r}: payload size {self.data.size} != shape {self.shape}")
        if not self.data.flags.c_contiguous:
            self.data = np.ascontiguousarray(self.data)

    @property
    def nbytes(self) -> int:
        return self.data.size * DTYPE_WIDTHS[self.dtype]

    def as_f32(self) -> np.ndarray:
        """Materialize the float32 view used by inference."""
        if self.dtype == "f32":
            return self.data.reshape(self.shape)
        if self.dtype == "u8-quant":
            deq = (self.data.astype(np.float64) - float(self.zero_point)) * float(self.scale)
            return deq.astype(np.float32).reshape(self.shape)
        # i8-binary: signs scaled by the per-tensor magnitude
        return (self.data.astype(np.float32) * np.float32(self.scale)).reshape(self.shape)

    def copy(self) -> "ParamTensor":
        return replace(self, data=self.data.copy())


class ParameterStore:
    """Ordered mapping name -> ParamTensor with per-tensor version counters."""

    def __init__(self, tensors: list[ParamTensor]):
        self._tensors: dict[str, ParamTensor] = {}
        for t in tensors:
            if t.name in self._tensors:
                raise ModelError(f"duplicate parameter name {t.name!r}")
            self._tensors[t.name] = t
        self._versions = {name: 0 for name in self._tensors}

    def __getitem__(self, name: str) -> ParamTensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"no parameter tensor named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors.values())

    def __len__(self) -> int:
        return len(self._tensors)

    @property
    def names(self) -> list[str]:
        return list(self._tensors)

    def version(self, name: str) -> int:
        return self._versions[name]

    def bump_version(self, name: str) -> None:
        self._versions[name] += 1

    def total_elements(self) -> int:
        return sum(t.data.size for t in self)

    def copy(self) -> "ParameterStore":
        return ParameterStore([t.copy() for t in self])

    def state_bytes(self) -> bytes:
        """Concatenated raw payloads, used for byte-exact restoration checks."""
        return b"".join(t.data.tobytes() for t in self)


@dataclass
class Model:
    """The victim artifact: architecture plus its parameter store."""

    spec: ModelSpec
    params: ParameterStore
    _layer_of_tensor: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for i, layer in enumerate(self.spec.layers):
            for pname in layer.parameter_names():
                if pname not in self.params:
                    raise ModelError(f"missing parameter tensor {pname!r}")
                want = layer.parameter_shape(pname)
                got = self.params[pname].shape
                if tuple(got) != tuple(want):
                    raise ModelError(f"tensor {pname!r}: shape {got} != declared {want}")
                self._layer_of_tensor[pname] = i
        declared = set(self.spec.parameter_names())
        extra = [n for n in self.params.names if n not in declared]
        if extra:
            raise ModelError(f"parameters not declared by any layer: {extra}")

    def layer_of_tensor(self, name: str) -> int:
        return self._layer_of_tensor[name]

    def copy(self) -> "Model":
        return Model(self.spec, self.params.copy())
