"""Hardening transforms: activation clamping and low-precision parameters.

Both defenses shrink the damage a single stored-bit corruption can cause:
clamped activations stop exponent-flip spikes from propagating, and 8-bit or
sign parameters simply cannot encode a large spike (a flip moves an 8-bit
code by at most 128 quantization steps, a sign parameter by 2 scale units).
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .engine import Engine
from .model import Model, ModelError, ModelSpec, ParameterStore, ParamTensor, float_to_bits

RELU_FAMILY = ("relu", "prelu", "relu6", "reluclamp")
_MIN_CLAMP = np.float32(2.0 ** -126)


def substitute_activation(model: Model, target: str,
                          clamp_bounds: dict[str, float] | None = None) -> Model:
    """Swap every non-terminal ReLU-family activation for ``target``.

    Architecture-only change: parameter bytes are untouched. The terminal
    softmax is never substituted. PReLU sources lose their (now unused)
    slope tensors. Models whose hidden activations are not ReLU-family are
    rejected.
    """
    if target not in ("relu6", "tanh", "reluclamp"):
        raise ValueError(f"substitution target must be relu6|tanh|reluclamp, got {target!r}")
    if target == "reluclamp" and not clamp_bounds:
        raise ValueError("reluclamp substitution needs per-layer clamp bounds")
    layers = []
    dropped: set[str] = set()
    for i, layer in enumerate(model.spec.layers):
        terminal = i == len(model.spec.layers) - 1
        if layer.activation == "softmax" or layer.activation == "none":
            layers.append(replace(layer))
            continue
        if layer.activation not in RELU_FAMILY:
            raise ModelError(
                f"layer {layer.name!r} uses activation {layer.activation!r}; "
                "only ReLU-family activations can be substituted")
        if terminal:
            layers.append(replace(layer))
            continue
        if layer.activation == "prelu":
            dropped.add(f"{layer.name}.alpha")
        kwargs = {"activation": target}
        if target == "reluclamp":
            if layer.name not in clamp_bounds:
                raise ValueError(f"no clamp bound for layer {layer.name!r}")
            kwargs["clamp_bits"] = float_to_bits(float(clamp_bounds[layer.name]))
        layers.append(replace(layer, **kwargs))
    spec = ModelSpec(model.spec.input_shape, model.spec.class_count, layers)
    tensors = [t.copy() for t in model.params if t.name not in dropped]
    return Model(spec, ParameterStore(tensors))


def calibrate_clamp(model: Model, images: np.ndarray) -> dict[str, float]:
    """Per-layer clamp bound: the maximum activation observed on the set.

    Bounds are monotone in the calibration set (max over a superset can only
    grow), and re-substituting with these bounds leaves every calibration
    activation, and therefore the calibration accuracy, unchanged.
    """
    if len(images) == 0:
        raise ValueError("calibration requires a nonempty set")
    engine = Engine(model, backend="numpy")
    bounds: dict[str, float] = {}
    x = np.ascontiguousarray(images, dtype=np.float32)
    for i, layer in enumerate(model.spec.layers):
        x = engine.apply_layer(i, x)
        if layer.activation in RELU_FAMILY:
            bounds[layer.name] = float(max(np.float32(x.max()), _MIN_CLAMP))
    return bounds


def quantize8(model: Model) -> Model:
    """Per-tensor affine quantization of every f32 tensor to u8 codes.

    The representable range is [min(x, 0), max(x, 0)] so zero is always a
    code: scale = range/255, zero_point = round(-range_min/scale), and
    code = clip(round(x/scale) + zero_point, 0, 255). An all-zero tensor
    degenerates to scale 1 with every code at the zero point.
    """
    tensors = []
    for t in model.params:
        if t.dtype != "f32":
            tensors.append(t.copy())
            continue
        x = t.data.astype(np.float64)
        lo = min(float(x.min()), 0.0)
        hi = max(float(x.max()), 0.0)
        if hi > lo:
            scale = (hi - lo) / 255.0
            zero_point = int(np.clip(np.round(-lo / scale), 0, 255))
        else:
            scale = 1.0
            zero_point = 0
        codes = np.clip(np.round(x / scale) + zero_point, 0, 255).astype(np.uint8)
        tensors.append(ParamTensor(t.name, t.shape, "u8-quant", codes,
                                   scale=np.float32(scale).item(), zero_point=zero_point))
    spec = ModelSpec(model.spec.input_shape, model.spec.class_count,
                     [replace(layer) for layer in model.spec.layers])
    return Model(spec, ParameterStore(tensors))


def binarize(model: Model) -> Model:
    """XNOR-style binarization: conv/dense tensors become signs scaled by the
    per-tensor mean magnitude, except the leading conv layer which stays f32.

    Batchnorm statistics and PReLU slopes also stay f32; sign storage would
    not represent them meaningfully.
    """
    first_conv = None
    for layer in model.spec.layers:
        if layer.kind == "conv":
            first_conv = layer.name
            break
        if layer.kind == "fc":
            break
    if first_conv is None:
        raise ModelError("binarization requires an architecture with a leading conv layer")
    keep_f32 = {f"{first_conv}.weight", f"{first_conv}.bias"}
    tensors = []
    for t in model.params:
        leaf = t.name.rsplit(".", 1)[1]
        if t.dtype != "f32" or t.name in keep_f32 or leaf not in ("weight", "bias"):
            tensors.append(t.copy())
            continue
        x = t.data.astype(np.float64)
        scale = np.float32(np.abs(x).mean()).item()
        signs = np.where(x >= 0, 1, -1).astype(np.int8)
        tensors.append(ParamTensor(t.name, t.shape, "i8-binary", signs, scale=scale))
    spec = ModelSpec(model.spec.input_shape, model.spec.class_count,
                     [replace(layer) for layer in model.spec.layers])
    return Model(spec, ParameterStore(tensors))
