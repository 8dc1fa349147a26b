"""Forward-only inference engine.

Deterministic, pure given its inputs, and tolerant of non-finite parameter
values: corrupted weights propagate per IEEE754 through every layer. All
layer arithmetic accumulates in float64 and stores float32 per layer output.

Non-finite conventions (fixed here so sweeps are reproducible):

* relu / relu6 / reluclamp map NaN pre-activations to 0 and clamp +inf to
  the upper bound; tanh maps NaN to NaN and +-inf to +-1.
* softmax is limit-consistent: a row containing +inf becomes one-hot on the
  +inf entries (uniform across several), a row of all -inf becomes uniform,
  and NaN poisons its row.
* accuracy never counts a row containing NaN as correct; argmax ties break
  toward the lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels_np, kernels
from .model import Model, ModelError


class InferenceShapeError(ModelError):
    """Input/parameter shape mismatch, tagged with the offending layer."""

    def __init__(self, layer: str, detail: str):
        super().__init__(f"layer {layer!r}: {detail}")
        self.layer = layer


def _quiet():
    # Overflow to inf and NaN arithmetic are expected once parameters are
    # corrupted; inference must propagate them silently per IEEE754.
    return np.errstate(over="ignore", invalid="ignore", divide="ignore")


def apply_activation(kind: str, x: np.ndarray, *, alpha: np.ndarray | None = None,
                     clamp: float | None = None) -> np.ndarray:
    if kind == "none":
        return x
    if kind == "relu":
        return np.where(np.isnan(x), np.float32(0), np.maximum(x, np.float32(0)))
    if kind == "relu6":
        return np.clip(np.where(np.isnan(x), np.float32(0), x), np.float32(0), np.float32(6))
    if kind == "reluclamp":
        bound = np.float32(clamp)
        return np.clip(np.where(np.isnan(x), np.float32(0), x), np.float32(0), bound)
    if kind == "prelu":
        a = np.float64(alpha.reshape(-1)[0])
        out = np.where(x >= 0, x.astype(np.float64), a * x.astype(np.float64))
        return out.astype(np.float32)
    if kind == "tanh":
        return np.tanh(x.astype(np.float64)).astype(np.float32)
    if kind == "softmax":
        return softmax(x)
    raise ModelError(f"unknown activation {kind!r}")


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax over class scores, defined as the limit for inf inputs."""
    s = x.astype(np.float64)
    out = np.empty_like(s)
    row_max = s.max(axis=1)
    nan_rows = np.isnan(row_max)
    posinf_rows = np.isposinf(row_max)
    neginf_rows = np.isneginf(row_max)  # every entry -inf
    normal = ~(nan_rows | posinf_rows | neginf_rows)
    if normal.any():
        shifted = s[normal] - row_max[normal, None]
        e = np.exp(shifted)
        out[normal] = e / e.sum(axis=1, keepdims=True)
    if posinf_rows.any():
        hot = np.isposinf(s[posinf_rows])
        out[posinf_rows] = hot / hot.sum(axis=1, keepdims=True)
    if neginf_rows.any():
        out[neginf_rows] = 1.0 / s.shape[1]
    if nan_rows.any():
        out[nan_rows] = np.nan
    return out.astype(np.float32)


def _flatten(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(x.shape[0], -1))


class Engine:
    """Runs a model forward; see ``CachedEvaluator`` for the sweep-time path."""

    def __init__(self, model: Model, backend: str = "auto"):
        self.model = model
        # "numpy" pins the canonical kernel path; "auto" may use the extension.
        self._k = _kernels_np if backend == "numpy" else kernels

    def _tensor(self, name: str) -> np.ndarray:
        return self.model.params[name].as_f32()

    def apply_layer(self, index: int, x: np.ndarray,
                    activation_override: str | None = None) -> np.ndarray:
        with _quiet():
            return self._apply_layer(index, x, activation_override)

    def _apply_layer(self, index: int, x: np.ndarray,
                     activation_override: str | None = None) -> np.ndarray:
        layer = self.model.spec.layers[index]
        if layer.kind == "conv":
            if x.ndim != 4 or x.shape[1] != layer.in_channels:
                raise InferenceShapeError(layer.name, f"expected (N,{layer.in_channels},H,W), got {x.shape}")
            x = self._k.conv2d(x, self._tensor(f"{layer.name}.weight"),
                               self._tensor(f"{layer.name}.bias") if layer.bias else None,
                               layer.stride, layer.padding)
        elif layer.kind == "fc":
            if x.ndim != 2 or x.shape[1] != layer.in_features:
                raise InferenceShapeError(layer.name, f"expected (N,{layer.in_features}), got {x.shape}")
            x = self._k.fully_connected(x, self._tensor(f"{layer.name}.weight"),
                                        self._tensor(f"{layer.name}.bias") if layer.bias else None)
        elif layer.kind == "maxpool":
            if x.ndim != 4:
                raise InferenceShapeError(layer.name, f"expected NCHW input, got {x.shape}")
            x = self._k.maxpool2d(x, layer.pool, layer.pool_stride or layer.pool)
        elif layer.kind == "batchnorm":
            if x.ndim not in (2, 4) or x.shape[1] != layer.features:
                raise InferenceShapeError(layer.name, f"expected {layer.features} features, got {x.shape}")
            x = self._batchnorm(layer, x)
        elif layer.kind == "dropout":
            pass  # inference-time identity
        elif layer.kind == "flatten":
            x = _flatten(x)
        activation = activation_override if activation_override is not None else layer.activation
        alpha = self._tensor(f"{layer.name}.alpha") if activation == "prelu" else None
        clamp = layer.clamp if activation == "reluclamp" else None
        return apply_activation(activation, x, alpha=alpha, clamp=clamp)

    def _batchnorm(self, layer, x: np.ndarray) -> np.ndarray:
        # Inference uses stored running statistics only.
        gamma = self._tensor(f"{layer.name}.gamma").astype(np.float64)
        beta = self._tensor(f"{layer.name}.beta").astype(np.float64)
        mean = self._tensor(f"{layer.name}.running_mean").astype(np.float64)
        var = self._tensor(f"{layer.name}.running_var").astype(np.float64)
        shape = (1, -1) + (1,) * (x.ndim - 2)
        scale = (gamma / np.sqrt(var + layer.eps)).reshape(shape)
        shift = (beta - mean * gamma / np.sqrt(var + layer.eps)).reshape(shape)
        return (x.astype(np.float64) * scale + shift).astype(np.float32)

    def forward(self, batch: np.ndarray) -> np.ndarray:
        """Per-class scores for an NCHW (or flat) float32 batch."""
        expect = tuple(self.model.spec.input_shape)
        if tuple(batch.shape[1:]) != expect:
            raise InferenceShapeError(
                self.model.spec.layers[0].name,
                f"batch shape {tuple(batch.shape[1:])} != model input {expect}")
        x = np.ascontiguousarray(batch, dtype=np.float32)
        for i in range(len(self.model.spec.layers)):
            x = self.apply_layer(i, x)
        return x

    def logits(self, batch: np.ndarray) -> np.ndarray:
        """Class scores before the terminal softmax (if any); the cross-runtime
        comparison surface."""
        x = np.ascontiguousarray(batch, dtype=np.float32)
        last = len(self.model.spec.layers) - 1
        for i, layer in enumerate(self.model.spec.layers):
            override = "none" if (i == last and layer.activation == "softmax") else None
            x = self.apply_layer(i, x, activation_override=override)
        return x

    def activations(self, batch: np.ndarray, layer_index: int) -> np.ndarray:
        """Post-activation output of one layer."""
        n = len(self.model.spec.layers)
        if not 0 <= layer_index < n:
            raise IndexError(f"layer index {layer_index} out of range 0..{n - 1}")
        x = np.ascontiguousarray(batch, dtype=np.float32)
        for i in range(layer_index + 1):
            x = self.apply_layer(i, x)
        return x


@dataclass(frozen=True)
class EvalStats:
    accuracy: float
    per_class: np.ndarray          # float64, one accuracy per class
    top_k_accuracy: float | None   # populated when top_k was requested


def score_stats(scores: np.ndarray, labels: np.ndarray, class_count: int,
                top_k: int | None = None) -> EvalStats:
    """Top-1 (and optional top-k) statistics with the NaN-row policy applied."""
    labels = labels.astype(np.int64)
    nan_rows = np.isnan(scores).any(axis=1)
    pred = scores.argmax(axis=1)  # ties resolve to the lowest index
    correct = (pred == labels) & ~nan_rows
    acc = float(correct.mean())
    totals = np.bincount(labels, minlength=class_count).astype(np.float64)
    hits = np.bincount(labels[correct], minlength=class_count).astype(np.float64)
    per_class = np.divide(hits, totals, out=np.zeros_like(hits), where=totals > 0)
    top_k_acc = None
    if top_k is not None:
        true_score = scores[np.arange(len(labels)), labels]
        higher = (scores > true_score[:, None]).sum(axis=1)
        tied_before = ((scores == true_score[:, None])
                       & (np.arange(scores.shape[1])[None, :] < labels[:, None])).sum(axis=1)
        top_k_acc = float((((higher + tied_before) < top_k) & ~nan_rows).mean())
    return EvalStats(acc, per_class, top_k_acc)


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray,
             top_k: int = 1, batch_size: int = 512) -> float:
    """Top-1 (or top-k) accuracy of a model over a labeled dataset."""
    if len(images) == 0:
        raise ValueError("accuracy requires a nonempty dataset")
    if len(images) != len(labels):
        raise ValueError("images and labels disagree in length")
    engine = Engine(model, backend="numpy")
    chunks = []
    for start in range(0, len(images), batch_size):
        chunks.append(engine.forward(images[start:start + batch_size]))
    scores = np.concatenate(chunks, axis=0)
    stats = score_stats(scores, labels, model.spec.class_count,
                        top_k=top_k if top_k != 1 else None)
    return stats.accuracy if top_k == 1 else stats.top_k_accuracy


class CachedEvaluator:
    """Evaluation engine for flip sweeps over a fixed dataset.

    Caches every layer's pristine input (plus float64 im2col patch matrices
    for conv layers and float64 inputs for dense layers) so that corrupting a
    parameter in layer L only recomputes layers L..end. Corrupting a single
    conv/dense weight or bias additionally takes the delta path: only the
    affected output channel/neuron of layer L is recomputed and pasted into a
    copy of the cached pristine output before the downstream layers run.

    The canonical numpy kernels are pinned unless ``backend`` says otherwise,
    so sweep results do not depend on whether the compiled extension exists.
    """

    def __init__(self, model: Model, images: np.ndarray, labels: np.ndarray,
                 top_k: int | None = None, backend: str = "numpy"):
        if len(images) == 0:
            raise ValueError("evaluator requires a nonempty dataset")
        self.model = model
        self.labels = labels.astype(np.int64)
        self.top_k = top_k
        self.engine = Engine(model, backend=backend)
        self.n_layers = len(model.spec.layers)
        self.layer_inputs: list[np.ndarray] = []
        self.layer_cols: dict[int, np.ndarray] = {}   # conv: (N*OH*OW, C*kh*kw) float64
        self.fc_in64: dict[int, np.ndarray] = {}      # fc: (N, D) float64
        self.post_acts: list[np.ndarray | None] = []  # conv/fc: pristine post-activation
        x = np.ascontiguousarray(images, dtype=np.float32)
        for i, layer in enumerate(model.spec.layers):
            self.layer_inputs.append(x)
            if layer.kind == "conv":
                cols = _kernels_np.im2col(x, layer.kernel, layer.stride, layer.padding)
                self.layer_cols[i] = cols.astype(np.float64)
            elif layer.kind == "fc":
                self.fc_in64[i] = x.astype(np.float64)
            x = self.engine.apply_layer(i, x)
            self.post_acts.append(x if layer.kind in ("conv", "fc") else None)
        self.pristine_scores = x
        self.pristine = self._stats(x)

    def _stats(self, scores: np.ndarray) -> EvalStats:
        return score_stats(scores, self.labels, self.model.spec.class_count, self.top_k)

    def _finish(self, x: np.ndarray, start: int, want_scores: bool):
        for i in range(start, self.n_layers):
            x = self.engine.apply_layer(i, x)
        return x if want_scores else self._stats(x)

    def _layer_activation_args(self, layer):
        alpha = (self.model.params[f"{layer.name}.alpha"].as_f32()
                 if layer.activation == "prelu" else None)
        clamp = layer.clamp if layer.activation == "reluclamp" else None
        return alpha, clamp

    def eval_from(self, layer_index: int, want_scores: bool = False):
        """Re-evaluate with the store's current contents, starting at one layer."""
        if not 0 <= layer_index < self.n_layers:
            raise IndexError(f"layer index {layer_index} out of range")
        with _quiet():
            return self._eval_from(layer_index, want_scores)

    def _eval_from(self, layer_index: int, want_scores: bool):
        layer = self.model.spec.layers[layer_index]
        x = self.layer_inputs[layer_index]
        if layer.kind == "conv":
            params = self.model.params
            w = params[f"{layer.name}.weight"].as_f32()
            b = params[f"{layer.name}.bias"].as_f32() if layer.bias else None
            out_hw = _kernels_np.conv_output_hw(x.shape[2], x.shape[3],
                                                layer.kernel, layer.stride, layer.padding)
            x = _kernels_np.conv2d_cols(self.layer_cols[layer_index], x.shape[0], out_hw, w, b)
            alpha, clamp = self._layer_activation_args(layer)
            x = apply_activation(layer.activation, x, alpha=alpha, clamp=clamp)
            start = layer_index + 1
        else:
            start = layer_index
        return self._finish(x, start, want_scores)

    def eval_flip(self, tensor_name: str, element_index: int, want_scores: bool = False):
        """Evaluate after a single-element corruption of one tensor.

        Conv/dense weights and biases take the delta path: only the output
        channel/neuron owning the flipped element is recomputed, then pasted
        into a copy of the cached pristine output. Softmax-activated layers
        couple whole rows, so they fall back to a full layer recompute, as do
        batchnorm/alpha tensors.
        """
        layer_index = self.model.layer_of_tensor(tensor_name)
        layer = self.model.spec.layers[layer_index]
        leaf = tensor_name.rsplit(".", 1)[1]
        if (layer.kind not in ("conv", "fc") or leaf not in ("weight", "bias")
                or layer.activation == "softmax"):
            return self.eval_from(layer_index, want_scores)
        with _quiet():
            return self._eval_flip_delta(layer_index, layer, leaf, element_index,
                                         want_scores)

    def _eval_flip_delta(self, layer_index, layer, leaf, element_index, want_scores):
        params = self.model.params
        w = params[f"{layer.name}.weight"].as_f32()
        b = params[f"{layer.name}.bias"].as_f32() if layer.bias else None
        per_out = 1 if leaf == "bias" else int(np.prod(w.shape[1:]))
        changed = element_index // per_out
        alpha, clamp = self._layer_activation_args(layer)
        n = self.layer_inputs[layer_index].shape[0]
        if layer.kind == "conv":
            w_row = w.reshape(w.shape[0], -1)[changed].astype(np.float64)
            acc = self.layer_cols[layer_index] @ w_row
            if b is not None:
                acc += np.float64(b[changed])
            post = apply_activation(layer.activation, acc.astype(np.float32),
                                    alpha=alpha, clamp=clamp)
            out = self.post_acts[layer_index].copy()
            out[:, changed, :, :] = post.reshape(n, out.shape[2], out.shape[3])
        else:
            acc = self.fc_in64[layer_index] @ w[changed].astype(np.float64)
            if b is not None:
                acc += np.float64(b[changed])
            post = apply_activation(layer.activation, acc.astype(np.float32),
                                    alpha=alpha, clamp=clamp)
            out = self.post_acts[layer_index].copy()
            out[:, changed] = post
        return self._finish(out, layer_index + 1, want_scores)
