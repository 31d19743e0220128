"""Reverse-mode automatic differentiation over float64 numpy arrays.

The op set is deliberately small: elementwise arithmetic, matmul with
leading-axis broadcasting, shape ops, reductions, softmax variants, the
convolution family (shared-kernel and per-sample, 1D and 2D), and a
straight-through hard-selection op. Everything is float64; there is no
GPU path and no operator fusion. A graph and its tensors belong to one
thread; independent graphs may live on independent threads.

Gradients accumulate: calling ``backward`` twice without resetting grads
doubles them. ``Parameter.zero_grad`` (or setting ``grad = None``) is the
reset. Gradient buffers are kept on leaf tensors only.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "expand_batch",
    "tsum",
    "tmean",
    "relu",
    "softmax",
    "log_softmax",
    "straight_through_onehot",
    "mean_pool_spatial",
    "linear",
    "conv2d",
    "conv1d",
    "conv2d_per_sample",
    "conv1d_per_sample",
    "finite_diff_check",
    "grad_or_zeros",
]


class Tensor:
    """An n-d float64 array plus the graph record needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data)

    def backward(self) -> None:
        """Backpropagate from a scalar, accumulating grads on reachable leaves.

        Each graph node is visited exactly once (reverse topological order).
        Leaves that the loss does not depend on are never touched, so their
        grad stays exactly as it was (``None`` or previously accumulated).
        """
        if self.data.ndim != 0:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _toposort(self)
        flowing: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(order):
            out_grad = flowing.pop(id(node), None)
            if out_grad is None:
                continue
            if node.is_leaf:
                node.grad = out_grad.copy() if node.grad is None else node.grad + out_grad
                continue
            for parent, contrib in node._backward(out_grad):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + contrib
                else:
                    flowing[key] = contrib

    # Operator sugar; all arithmetic routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A named trainable leaf.

    Names must be unique across a model; they key checkpoints and the
    per-expert learning-rate table. ``decay`` marks convolution kernels
    that the harness applies weight decay to.
    """

    def __init__(self, name: str, value, requires_grad: bool = True, decay: bool = False):
        self.name = name
        self.tensor = Tensor(value, requires_grad=requires_grad)
        self.decay = decay

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.tensor.data.shape:
            raise ValueError(
                f"parameter {self.name!r}: cannot assign shape {value.shape} over {self.tensor.data.shape}"
            )
        self.tensor.data = value

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def requires_grad(self) -> bool:
        return self.tensor.requires_grad

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def grad_or_zeros(t: Tensor) -> np.ndarray:
    """The accumulated gradient, or exact zeros when the loss never reached t."""
    if isinstance(t, Parameter):
        t = t.tensor
    if t.grad is None:
        return np.zeros_like(t.data)
    return t.grad


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS; leaves first, root last."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.tensor
    return Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _sum_to_shape(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Invert numpy broadcasting: sum grad down to the given shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        return ((a, _sum_to_shape(g, a.shape)), (b, _sum_to_shape(g, b.shape)))

    return _node(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def backward(g):
        return ((a, _sum_to_shape(g, a.shape)), (b, _sum_to_shape(-g, b.shape)))

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        return (
            (a, _sum_to_shape(g * b.data, a.shape)),
            (b, _sum_to_shape(g * a.data, b.shape)),
        )

    return _node(data, (a, b), backward)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _node(-a.data, (a,), lambda g: ((a, -g),))


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0

    def backward(g):
        return ((a, g * mask),)

    return _node(np.where(mask, a.data, 0.0), (a,), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape

    def backward(g):
        return ((a, g.reshape(old)),)

    return _node(a.data.reshape(shape), (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return ((a, np.transpose(g, inverse)),)

    return _node(np.transpose(a.data, axes), (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    parts = [_wrap(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(zip(parts, pieces))

    return _node(data, tuple(parts), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    shape = _wrap(tensors[0]).shape
    lead = tuple(shape[:axis]) + (1,) + tuple(shape[axis:])
    return concat([reshape(t, lead) for t in tensors], axis=axis)


def expand_batch(a, batch: int) -> Tensor:
    """Tile a tensor along a new leading batch axis; backward sums it away."""
    a = _wrap(a)
    data = np.broadcast_to(a.data, (batch,) + a.shape).copy()

    def backward(g):
        return ((a, g.sum(axis=0)),)

    return _node(data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.shape).copy()),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg, a.shape).copy()),)

    return _node(data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        count = a.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return ((a, np.broadcast_to(g / count, a.shape).copy()),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg / count, a.shape).copy()),)

    return _node(data, (a,), backward)


# ---------------------------------------------------------------------------
# matmul and affine
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """np.matmul with leading-axis broadcasting; both operands must be >= 2-d."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ((a, _sum_to_shape(ga, a.shape)), (b, _sum_to_shape(gb, b.shape)))

    return _node(data, (a, b), backward)


def linear(x, weight, bias) -> Tensor:
    """Affine map: x[B, F_in] @ weight[F_out, F_in].T + bias[F_out]."""
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError(f"linear expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"linear: input features {x.shape} do not match weight {weight.shape}"
        )
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    return add(matmul(x, transpose(weight)), bias)


def mean_pool_spatial(x) -> Tensor:
    """Mean over every trailing axis after [batch, channel]."""
    x = _wrap(x)
    if x.data.ndim < 3:
        raise ValueError(f"mean_pool_spatial needs at least one trailing axis, got {x.shape}")
    batch, channels = x.shape[0], x.shape[1]
    return tmean(reshape(x, (batch, channels, -1)), axis=2)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((a, y * (g - dot)),)

    return _node(y, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return ((a, g - np.exp(ls) * g.sum(axis=axis, keepdims=True)),)

    return _node(ls, (a,), backward)


def straight_through_onehot(logits, temperature: float = 1.0) -> Tensor:
    """Hard one-hot over the last axis; backward is the softmax(logits/T) Jacobian.

    Forward value is exactly one-hot at the argmax (ties go to the lowest
    index), so anything multiplied by a non-selected slot receives an exactly
    zero gradient through the value path. The gradient reported for the
    logits is that of the softened softmax(logits / temperature).
    """
    logits = _wrap(logits)
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("straight_through_onehot: non-finite logits")
    idx = np.argmax(logits.data, axis=-1)
    hard = np.zeros_like(logits.data)
    np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)
    soft = np.exp(logits.data / temperature - (logits.data / temperature).max(axis=-1, keepdims=True))
    soft = soft / soft.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * soft).sum(axis=-1, keepdims=True)
        return ((logits, soft * (g - dot) / temperature),)

    return _node(hard, (logits,), backward)


# ---------------------------------------------------------------------------
# convolutions (cross-correlation): shared-kernel and per-sample, 1D and 2D
# ---------------------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if isinstance(v, tuple):
        return v
    return (int(v), int(v))


def _unfold2d(x, kh: int, kw: int, stride, padding) -> Tensor:
    """Extract conv patches: [B, C, H, W] -> [B, C*kh*kw, H'*W']."""
    x = _wrap(x)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    batch, cin, h, w = x.shape
    hp = (h + 2 * ph - kh) // sh + 1
    wp = (w + 2 * pw - kw) // sw + 1
    if hp < 1 or wp < 1:
        raise ValueError(
            f"conv window {kh}x{kw} with stride {(sh, sw)}, padding {(ph, pw)} "
            f"does not fit input {x.shape}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    patches = np.empty((batch, cin, kh, kw, hp, wp), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            patches[:, :, i, j] = xp[:, :, i : i + sh * hp : sh, j : j + sw * wp : sw]
    data = patches.reshape(batch, cin * kh * kw, hp * wp)

    def backward(g):
        gp = g.reshape(batch, cin, kh, kw, hp, wp)
        gx = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + sh * hp : sh, j : j + sw * wp : sw] += gp[:, :, i, j]
        if ph or pw:
            gx = gx[:, :, ph : ph + h, pw : pw + w]
        return ((x, gx),)

    return _node(data, (x,), backward)


def _conv2d_core(x: Tensor, kernel: Tensor, stride, padding) -> Tensor:
    # kernel is [C_out, C_in, kh, kw] (shared) or [B, C_out, C_in, kh, kw] (per sample)
    per_sample = kernel.data.ndim == 5
    cout, cin, kh, kw = kernel.shape[-4:]
    batch, _, h, w = x.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    hp = (h + 2 * ph - kh) // sh + 1
    wp = (w + 2 * pw - kw) // sw + 1
    patches = _unfold2d(x, kh, kw, stride, padding)
    flat_shape = (batch, cout, cin * kh * kw) if per_sample else (cout, cin * kh * kw)
    out = matmul(reshape(kernel, flat_shape), patches)
    return reshape(out, (batch, cout, hp, wp))


def conv2d(x, kernel, stride=1, padding=0) -> Tensor:
    """Cross-correlation of x[B, C_in, H, W] with kernel[C_out, C_in, kh, kw]."""
    x, kernel = _wrap(x), _wrap(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(
            f"conv2d: input channels {x.shape} do not match kernel {kernel.shape}"
        )
    return _conv2d_core(x, kernel, stride, padding)


def conv2d_per_sample(x, kernels, stride=1, padding=0) -> Tensor:
    """Each sample convolved with its own kernel: kernels[B, C_out, C_in, kh, kw]."""
    x, kernels = _wrap(x), _wrap(kernels)
    if x.data.ndim != 4 or kernels.data.ndim != 5:
        raise ValueError(
            f"conv2d_per_sample expects 4-d input and 5-d kernels, got {x.shape} and {kernels.shape}"
        )
    if x.shape[0] != kernels.shape[0] or x.shape[1] != kernels.shape[2]:
        raise ValueError(
            f"conv2d_per_sample: input {x.shape} does not match kernels {kernels.shape}"
        )
    return _conv2d_core(x, kernels, stride, padding)


def _lift_1d(x: Tensor) -> Tensor:
    batch, cin, length = x.shape
    return reshape(x, (batch, cin, 1, length))


def conv1d(x, kernel, stride=1, padding=0) -> Tensor:
    """Cross-correlation of x[B, C_in, L] with kernel[C_out, C_in, k]."""
    x, kernel = _wrap(x), _wrap(kernel)
    if x.data.ndim != 3 or kernel.data.ndim != 3:
        raise ValueError(f"conv1d expects 3-d input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(
            f"conv1d: input channels {x.shape} do not match kernel {kernel.shape}"
        )
    cout, cin, k = kernel.shape
    out = _conv2d_core(_lift_1d(x), reshape(kernel, (cout, cin, 1, k)), (1, stride), (0, padding))
    return reshape(out, (out.shape[0], out.shape[1], out.shape[3]))


def conv1d_per_sample(x, kernels, stride=1, padding=0) -> Tensor:
    """Per-sample 1D convolution: kernels[B, C_out, C_in, k]."""
    x, kernels = _wrap(x), _wrap(kernels)
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ValueError(
            f"conv1d_per_sample expects 3-d input and 4-d kernels, got {x.shape} and {kernels.shape}"
        )
    if x.shape[0] != kernels.shape[0] or x.shape[1] != kernels.shape[2]:
        raise ValueError(
            f"conv1d_per_sample: input {x.shape} does not match kernels {kernels.shape}"
        )
    batch, cout, cin, k = kernels.shape
    out = _conv2d_core(
        _lift_1d(x), reshape(kernels, (batch, cout, cin, 1, k)), (1, stride), (0, padding)
    )
    return reshape(out, (out.shape[0], out.shape[1], out.shape[3]))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(
    fn,
    params,
    h: float = 1e-5,
    max_coords: int = 4,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic grads of fn() against central finite differences.

    ``fn`` must be a deterministic closure over ``params`` returning a fresh
    scalar Tensor each call (any stochastic choices frozen beforehand).
    Per parameter, up to ``max_coords`` coordinates are sampled; the result
    is the max of |analytic - fd| / (|analytic| + |fd| + 1e-6) over them.
    The 1e-6 floor keeps roundoff noise at negligible-gradient coordinates
    from registering as errors.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.zero_grad()
    loss = fn()
    loss.backward()
    analytic = {p.name: grad_or_zeros(p.tensor) for p in params}

    worst = 0.0
    for p in params:
        size = p.data.size
        if size == 0:
            continue
        if size <= max_coords:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords, replace=False)
        flat = p.data.reshape(-1)
        for c in coords:
            original = flat[c]
            flat[c] = original + h
            up = fn().item()
            flat[c] = original - h
            down = fn().item()
            flat[c] = original
            fd = (up - down) / (2.0 * h)
            a = float(analytic[p.name].reshape(-1)[c])
            err = abs(a - fd) / (abs(a) + abs(fd) + 1e-6)
            worst = max(worst, err)
    return worst
