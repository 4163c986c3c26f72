"""ReLU networks: dense and small same-padding convolutional classifiers.

A network is a sequence of hidden layers (dense widths or 3x3 stride-1
'same'-padding conv channels) followed by an implicit final dense layer to
``n_classes`` with no activation.  Forward passes record the binary
activation trace (pre-activation strictly > 0) that pins down the activation
region; the input Jacobian of the whole map is the masked weight product

    J(x) = W_n Z_{n-1} W_{n-1} ... Z_1 W_1

which is computed explicitly for dense-only networks and row-by-row through
reverse mode when conv layers are involved.

Networks are immutable: all parameter arrays are frozen at construction and
every mutating operation returns a new ``Network``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KERNEL_SIZE = 3  # conv kernels are 3x3, stride 1, zero 'same' padding


@dataclass(frozen=True)
class Dense:
    width: int


@dataclass(frozen=True)
class Conv2D:
    channels: int


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description.

    ``input_shape`` is ``(h, w, c)`` for image inputs or ``(d,)`` for flat
    ones; ``hidden`` lists the hidden layers; the final dense layer to
    ``n_classes`` is implicit.  Conv layers require an image input and must
    all precede the first dense layer (the feature map is flattened there).
    """

    input_shape: tuple[int, ...]
    hidden: tuple[Dense | Conv2D, ...]
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if len(self.input_shape) not in (1, 3) or any(d <= 0 for d in self.input_shape):
            raise ValueError(f"input_shape must be (d,) or (h, w, c), got {self.input_shape}")
        if not self.hidden:
            raise ValueError("at least one hidden layer is required")
        if self.n_classes <= 0:
            raise ValueError("n_classes must be positive")
        seen_dense = False
        for layer in self.hidden:
            if isinstance(layer, Dense):
                if layer.width <= 0:
                    raise ValueError("dense width must be positive")
                seen_dense = True
            elif isinstance(layer, Conv2D):
                if layer.channels <= 0:
                    raise ValueError("conv channels must be positive")
                if seen_dense:
                    raise ValueError("conv layers must precede all dense layers")
                if len(self.input_shape) != 3:
                    raise ValueError("conv layers require an (h, w, c) input shape")
            else:
                raise ValueError(f"unknown layer kind: {layer!r}")

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def has_conv(self) -> bool:
        return any(isinstance(layer, Conv2D) for layer in self.hidden)

    @property
    def n_layers(self) -> int:
        """Number of parameterized layers, hidden plus the final dense."""
        return len(self.hidden) + 1


@dataclass(frozen=True)
class _LayerInfo:
    kind: str                  # "dense" | "conv"
    in_shape: tuple[int, ...]  # (h, w, c) for conv, (d,) for dense
    out_shape: tuple[int, ...]
    weight_shape: tuple[int, ...]
    fan_in: int


def _layer_plan(spec: NetworkSpec) -> list[_LayerInfo]:
    """Per-layer shapes, including the implicit final dense layer."""
    plan = []
    shape = spec.input_shape
    for layer in spec.hidden:
        if isinstance(layer, Conv2D):
            h, w, c = shape
            out = (h, w, layer.channels)
            plan.append(_LayerInfo(
                "conv", shape, out,
                (layer.channels, KERNEL_SIZE, KERNEL_SIZE, c),
                KERNEL_SIZE * KERNEL_SIZE * c,
            ))
        else:
            d = int(np.prod(shape))
            out = (layer.width,)
            plan.append(_LayerInfo("dense", (d,), out, (layer.width, d), d))
        shape = out
    d = int(np.prod(shape))
    plan.append(_LayerInfo("dense", (d,), (spec.n_classes,), (spec.n_classes, d), d))
    return plan


@dataclass(frozen=True)
class Network:
    """A realized parameter set for a :class:`NetworkSpec`.

    ``weights[i]``/``biases[i]`` parameterize layer ``i`` (0-based; the last
    entry is the final dense layer).  Conv kernels are stored with their
    explicit ``(out_c, 3, 3, in_c)`` structure.  ``seed`` records the
    initialization seed when the network came from :func:`init_network`.
    """

    spec: NetworkSpec
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    seed: int | None = None

    def __post_init__(self):
        plan = _layer_plan(self.spec)
        if len(self.weights) != len(plan) or len(self.biases) != len(plan):
            raise ValueError(
                f"expected {len(plan)} weight/bias pairs, got "
                f"{len(self.weights)}/{len(self.biases)}"
            )
        frozen_w, frozen_b = [], []
        for info, w, b in zip(plan, self.weights, self.biases):
            # copy so freezing never flips writeability of caller-owned arrays
            w = np.array(w, dtype=np.float64, order="C")
            b = np.array(b, dtype=np.float64, order="C")
            out_units = info.weight_shape[0]
            if w.shape != info.weight_shape or b.shape != (out_units,):
                raise ValueError(
                    f"layer parameter shape mismatch: weight {w.shape} vs "
                    f"{info.weight_shape}, bias {b.shape} vs {(out_units,)}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("network parameters must be finite")
            w.flags.writeable = False
            b.flags.writeable = False
            frozen_w.append(w)
            frozen_b.append(b)
        object.__setattr__(self, "weights", tuple(frozen_w))
        object.__setattr__(self, "biases", tuple(frozen_b))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def n_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass(frozen=True)
class ForwardRecord:
    """Result of one forward pass: logits, activation trace, hidden activations.

    ``trace`` holds one boolean mask per hidden layer (True where the
    pre-activation was strictly positive); it identifies the activation
    region the input lies in.  ``activations`` are the post-ReLU values
    f^i(x), same shapes as the masks.
    """

    logits: np.ndarray
    trace: tuple[np.ndarray, ...]
    activations: tuple[np.ndarray, ...]


def traces_equal(a, b) -> bool:
    """Whether two activation traces are identical (same activation region)."""
    if len(a) != len(b):
        return False
    return all(x.shape == y.shape and bool(np.all(x == y)) for x, y in zip(a, b))


def init_network(spec: NetworkSpec, seed: int) -> Network:
    """Initialize weights uniform(-sqrt(1/fan_in), sqrt(1/fan_in)), biases zero.

    Deterministic given ``(spec, seed)``.
    """
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for info in _layer_plan(spec):
        scale = float(np.sqrt(1.0 / info.fan_in))
        weights.append(rng.uniform(-scale, scale, size=info.weight_shape))
        biases.append(np.zeros(info.weight_shape[0]))
    return Network(spec, tuple(weights), tuple(biases), seed=seed)


def linear_network(a, b=None) -> Network:
    """A ReLU network computing exactly f(x) = Ax + b at every point.

    Uses the split trick: hidden layer [I; -I] gives relu(x) and relu(-x),
    and [A, -A] recombines them to Ax since relu(x) - relu(-x) = x.  The
    Jacobian equals A on every activation region (coordinates of x that are
    exactly 0 sit on region boundaries).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    m, d = a.shape
    if b is None:
        b = np.zeros(m)
    spec = NetworkSpec(input_shape=(d,), hidden=(Dense(2 * d),), n_classes=m)
    w1 = np.vstack([np.eye(d), -np.eye(d)])
    w2 = np.hstack([a, -a])
    return Network(spec, (w1, w2), (np.zeros(2 * d), np.asarray(b, dtype=np.float64)))


# ---------------------------------------------------------------------------
# forward / backward internals (batched; public single-point API wraps them)
# ---------------------------------------------------------------------------


def _check_batch_input(net: Network, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[1] != net.spec.input_dim:
        raise ValueError(
            f"input shape {np.shape(x)} does not match flattened input "
            f"dimension {net.spec.input_dim}"
        )
    return arr


def _im2col(img: np.ndarray) -> np.ndarray:
    """(n, h, w, c) -> (n, h*w, 9c) patch matrix under zero 'same' padding."""
    n, h, w, c = img.shape
    pad = KERNEL_SIZE // 2
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(
        padded, (KERNEL_SIZE, KERNEL_SIZE), axis=(1, 2)
    )  # (n, h, w, c, 3, 3)
    cols = windows.transpose(0, 1, 2, 4, 5, 3)  # (n, h, w, 3, 3, c)
    return np.ascontiguousarray(cols).reshape(n, h * w, KERNEL_SIZE * KERNEL_SIZE * c)


def _col2im(dcols: np.ndarray, img_shape: tuple[int, ...]) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patch gradients back."""
    n, h, w, c = img_shape
    pad = KERNEL_SIZE // 2
    dpad = np.zeros((dcols.shape[0], h + 2 * pad, w + 2 * pad, c))
    d6 = dcols.reshape(dcols.shape[0], h, w, KERNEL_SIZE, KERNEL_SIZE, c)
    for ki in range(KERNEL_SIZE):
        for kj in range(KERNEL_SIZE):
            dpad[:, ki:ki + h, kj:kj + w, :] += d6[:, :, :, ki, kj, :]
    return dpad[:, pad:pad + h, pad:pad + w, :]


def _forward_batch(net: Network, x: np.ndarray, keep_cache: bool = False):
    """Run the network on a batch of flattened inputs.

    Returns (logits, masks, activations, cache); cache holds per-layer
    inputs (dense) or im2col patches (conv) for the backward pass when
    requested.
    """
    plan = _layer_plan(net.spec)
    n = x.shape[0]
    cur = x
    masks, acts, cache = [], [], []
    for info, w, b in zip(plan[:-1], net.weights[:-1], net.biases[:-1]):
        if info.kind == "conv":
            img = cur.reshape((n,) + info.in_shape)
            cols = _im2col(img)
            w_mat = w.reshape(w.shape[0], -1)
            pre = (cols @ w_mat.T + b).reshape((n,) + info.out_shape)
            if keep_cache:
                cache.append(cols)
        else:
            cur = cur.reshape(n, -1)
            pre = cur @ w.T + b
            if keep_cache:
                cache.append(cur)
        mask = pre > 0.0
        cur = np.where(mask, pre, 0.0)
        masks.append(mask)
        acts.append(cur)
    flat = cur.reshape(n, -1)
    if keep_cache:
        cache.append(flat)
    logits = flat @ net.weights[-1].T + net.biases[-1]
    return logits, masks, acts, cache


def _backward_batch(net: Network, x: np.ndarray, masks, cache, dlogits):
    """Backpropagate logit cotangents; returns (weight grads, bias grads, input grad).

    ``dlogits`` is (n, n_classes); gradients are summed over the batch, so
    callers control averaging by scaling the cotangents.
    """
    plan = _layer_plan(net.spec)
    n = x.shape[0]
    weight_grads = [None] * net.n_layers
    bias_grads = [None] * net.n_layers

    weight_grads[-1] = dlogits.T @ cache[-1]
    bias_grads[-1] = dlogits.sum(axis=0)
    dcur = dlogits @ net.weights[-1]  # gradient wrt flattened last hidden act

    for i in range(len(plan) - 2, -1, -1):
        info = plan[i]
        dpre = dcur.reshape((n,) + info.out_shape) * masks[i]
        if info.kind == "conv":
            w_mat = net.weights[i].reshape(net.weights[i].shape[0], -1)
            dpre_flat = dpre.reshape(n, -1, w_mat.shape[0])
            weight_grads[i] = np.einsum(
                "npo,npk->ok", dpre_flat, cache[i]
            ).reshape(net.weights[i].shape)
            bias_grads[i] = dpre_flat.sum(axis=(0, 1))
            dcur = _col2im(dpre_flat @ w_mat, (n,) + info.in_shape).reshape(n, -1)
        else:
            dpre = dpre.reshape(n, -1)
            weight_grads[i] = dpre.T @ cache[i]
            bias_grads[i] = dpre.sum(axis=0)
            dcur = dpre @ net.weights[i]
    return weight_grads, bias_grads, dcur


def _input_vjp(net: Network, masks, dlogits: np.ndarray) -> np.ndarray:
    """Propagate logit cotangents to the input only (no parameter grads).

    ``masks`` come from a single-point forward pass (leading axis 1) and
    broadcast against any number of cotangent rows, so seeding with the
    identity yields all Jacobian rows in one sweep.
    """
    plan = _layer_plan(net.spec)
    k = dlogits.shape[0]
    dcur = dlogits @ net.weights[-1]
    for i in range(len(plan) - 2, -1, -1):
        info = plan[i]
        dpre = dcur.reshape((k,) + info.out_shape) * masks[i]
        if info.kind == "conv":
            w_mat = net.weights[i].reshape(net.weights[i].shape[0], -1)
            dcols = dpre.reshape(k, -1, w_mat.shape[0]) @ w_mat
            dcur = _col2im(dcols, (k,) + info.in_shape).reshape(k, -1)
        else:
            dcur = dpre.reshape(k, -1) @ net.weights[i]
    return dcur


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def forward(net: Network, x) -> ForwardRecord:
    """Evaluate the network at a single flattened input point."""
    batch = _check_batch_input(net, x)
    if batch.shape[0] != 1:
        raise ValueError("forward evaluates a single point; use batch helpers for many")
    logits, masks, acts, _ = _forward_batch(net, batch)
    return ForwardRecord(
        logits=logits[0],
        trace=tuple(m[0] for m in masks),
        activations=tuple(a[0] for a in acts),
    )


def forward_many(net: Network, x) -> np.ndarray:
    """Logits for a batch of flattened inputs, shape (n, n_classes)."""
    batch = _check_batch_input(net, x)
    logits, _, _, _ = _forward_batch(net, batch)
    return logits


def preactivation_margins(net: Network, x) -> np.ndarray:
    """Per-point distance to the nearest activation-region boundary, in
    pre-activation units: min over all hidden units of |pre-activation|.

    Small margins flag points where finite-difference probes may cross into
    a neighboring region; boundary-guarded tests sample points with margins
    clear of the probe step.
    """
    batch = _check_batch_input(net, x)
    plan = _layer_plan(net.spec)
    n = batch.shape[0]
    cur = batch
    margins = np.full(n, np.inf)
    for info, w, b in zip(plan[:-1], net.weights[:-1], net.biases[:-1]):
        if info.kind == "conv":
            img = cur.reshape((n,) + info.in_shape)
            w_mat = w.reshape(w.shape[0], -1)
            pre = (_im2col(img) @ w_mat.T + b).reshape((n,) + info.out_shape)
        else:
            pre = cur.reshape(n, -1) @ w.T + b
        margins = np.minimum(margins, np.abs(pre).reshape(n, -1).min(axis=1))
        cur = np.where(pre > 0.0, pre, 0.0)
    return margins


def softmax_xent(logits, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against a class index.

    Max-subtraction keeps the exponentials in range; the gradient is
    softmax(logits) - onehot(label).
    """
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < z.shape[0]:
        raise ValueError(f"label {label} out of range for {z.shape[0]} classes")
    shifted = z - z.max()
    exp = np.exp(shifted)
    total = exp.sum()
    loss = float(np.log(total) - shifted[label])
    grad = exp / total
    grad[label] -= 1.0
    return loss, grad


def _batch_softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Vectorized softmax cross-entropy; returns (per-sample losses, grads)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    idx = np.arange(logits.shape[0])
    losses = np.log(total[:, 0]) - shifted[idx, labels]
    grads = exp / total
    grads[idx, labels] -= 1.0
    return losses, grads


def backward(net: Network, x, label: int):
    """Gradients of softmax_xent(f(x), label) wrt all parameters and the input.

    Returns ``((weight_grads, bias_grads), input_grad, loss)``.  The ReLU
    subgradient at a pre-activation of exactly 0 is taken as 0 (strict
    ``> 0`` mask), matching the open-region convention.
    """
    batch = _check_batch_input(net, x)
    logits, masks, _, cache = _forward_batch(net, batch, keep_cache=True)
    loss, dlogits = softmax_xent(logits[0], label)
    wgrads, bgrads, dinput = _backward_batch(net, batch, masks, cache, dlogits[None])
    return (tuple(wgrads), tuple(bgrads)), dinput[0], loss


def batch_gradients(net: Network, x, labels):
    """Mean-over-batch loss gradients, the quantity one SGD step consumes.

    Equivalent to averaging per-sample :func:`backward` results; computed in
    one vectorized sweep.  Returns ``(weight_grads, bias_grads, mean_loss)``.
    """
    batch = _check_batch_input(net, x)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch.shape[0],):
        raise ValueError("labels must have one entry per batch row")
    logits, masks, _, cache = _forward_batch(net, batch, keep_cache=True)
    losses, dlogits = _batch_softmax_xent(logits, labels)
    wgrads, bgrads, _ = _backward_batch(
        net, batch, masks, cache, dlogits / batch.shape[0]
    )
    return tuple(wgrads), tuple(bgrads), float(losses.mean())


def output_jacobian(net: Network, x, method: str = "auto") -> np.ndarray:
    """The (n_classes x n_inputs) Jacobian of the logit map at x.

    ``method="product"`` forms the explicit masked weight product (dense-only
    networks); ``"reverse"`` assembles rows by reverse-mode passes seeded
    with unit cotangents and works for any network.  ``"auto"`` picks the
    product path when there are no conv layers.  Both paths agree to
    floating-point roundoff where both apply.
    """
    batch = _check_batch_input(net, x)
    if batch.shape[0] != 1:
        raise ValueError("output_jacobian evaluates a single point")
    if method == "auto":
        method = "reverse" if net.spec.has_conv else "product"
    if method == "product":
        if net.spec.has_conv:
            raise ValueError("the masked-product path requires a dense-only network")
        _, masks, _, _ = _forward_batch(net, batch)
        jac = net.weights[0] * masks[0][0][:, None]
        for w, mask in zip(net.weights[1:-1], masks[1:]):
            jac = (w @ jac) * mask[0][:, None]
        return net.weights[-1] @ jac
    if method == "reverse":
        _, masks, _, _ = _forward_batch(net, batch)
        return _input_vjp(net, masks, np.eye(net.spec.n_classes))
    raise ValueError(f"unknown jacobian method: {method!r}")


def scale_at_layer(net: Network, i: int, c: float) -> Network:
    """Rescale layer i (1-based) and all later biases by c > 0.

    Multiplying W_i, b_i and every subsequent bias by c turns the network
    map f into exactly c*f: the factor commutes with ReLU for positive c and
    rides through the remaining layers.
    """
    if not 1 <= i <= net.n_layers:
        raise ValueError(f"layer index {i} out of range 1..{net.n_layers}")
    if not c > 0:
        raise ValueError("scale factor must be positive")
    idx = i - 1
    weights = list(net.weights)
    biases = list(net.biases)
    weights[idx] = weights[idx] * c
    for j in range(idx, net.n_layers):
        biases[j] = biases[j] * c
    return Network(net.spec, tuple(weights), tuple(biases), seed=net.seed)


# ---------------------------------------------------------------------------
# checkpoint format: magic NSLC, version, canonical-JSON header, raw float64
# ---------------------------------------------------------------------------

_CHECKPOINT_MAGIC = b"NSLC"
_CHECKPOINT_VERSION = 1


def spec_to_dict(spec: NetworkSpec) -> dict:
    hidden = []
    for layer in spec.hidden:
        if isinstance(layer, Conv2D):
            hidden.append({"kind": "conv", "channels": layer.channels})
        else:
            hidden.append({"kind": "dense", "width": layer.width})
    return {
        "input_shape": list(spec.input_shape),
        "hidden": hidden,
        "n_classes": spec.n_classes,
    }


def spec_from_dict(d: dict) -> NetworkSpec:
    hidden = []
    for entry in d["hidden"]:
        if entry["kind"] == "conv":
            hidden.append(Conv2D(int(entry["channels"])))
        elif entry["kind"] == "dense":
            hidden.append(Dense(int(entry["width"])))
        else:
            raise ValueError(f"unknown layer kind in spec: {entry['kind']!r}")
    return NetworkSpec(tuple(d["input_shape"]), tuple(hidden), int(d["n_classes"]))


def save_network(net: Network, path) -> None:
    """Write a byte-exact checkpoint (save -> load -> save is identical)."""
    header = {
        "arrays": [list(w.shape) for w in net.weights] + [list(b.shape) for b in net.biases],
        "seed": net.seed,
        "spec": spec_to_dict(net.spec),
        "version": _CHECKPOINT_VERSION,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", _CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for arr in list(net.weights) + list(net.biases):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_network(path) -> Network:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a netslope checkpoint (magic {magic!r})")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != _CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        spec = spec_from_dict(header["spec"])
        arrays = []
        for shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"{path}: truncated checkpoint")
            arrays.append(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
        trailing = fh.read(1)
        if trailing:
            raise ValueError(f"{path}: trailing bytes after parameter payload")
    n = len(arrays) // 2
    return Network(spec, tuple(arrays[:n]), tuple(arrays[n:]), seed=header["seed"])
