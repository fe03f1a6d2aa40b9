"""Dense tensors with tape-based reverse-mode automatic differentiation.

Master arithmetic is float64 throughout; reduced precision only ever enters
through the explicit ``quantize16`` op. There is no broadcasting beyond
scalar-times-tensor: shape bugs surface as :class:`DimensionError` instead of
silently fanning out.

A :class:`Tape` records one forward computation. Leaves are registered with
``tape.watch`` (or implicitly, when a ``requires_grad`` tensor first meets a
live tape), node parents always precede their children, and ``backward``
performs a single reverse sweep returning a gradient per watched leaf.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "TapeNode",
    "backward",
    "grad_check",
    "conv2d",
    "matmul",
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "softplus",
    "global_avg_pool",
    "mean_all",
    "bias_add",
    "channel_affine",
    "batch_channel_norm",
    "quantize16",
    "elementwise",
    "stable_sigmoid",
]

# softplus saturates to its asymptotes beyond this magnitude; the discarded
# tail term ln(1+e^-50) ~ 1.9e-22 is below double rounding noise for any
# loss value the trainer produces.
_SOFTPLUS_SATURATION = 50.0


class Tensor:
    """A dense float64 array, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "tape", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.tape: Tape | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded operation: op kind, parent ids, and its backward rule."""

    __slots__ = ("op", "parents", "shape", "backward_fn")

    def __init__(self, op, parents, shape, backward_fn=None):
        self.op = op
        self.parents = tuple(parents)
        self.shape = shape
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of a forward computation.

    Nodes are appended as operations execute, so parent ids are always
    smaller than child ids and a single reverse pass is a valid backward
    schedule. A tape is single-owner: build and differentiate it from one
    thread; independent tapes never share state.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._leaf_ids: list[int] = []

    def watch(self, tensor: Tensor) -> Tensor:
        """Register ``tensor`` as a differentiable leaf of this tape."""
        if not tensor.requires_grad:
            raise ContractError("cannot watch a tensor with requires_grad=False")
        if tensor.tape is self:
            return tensor
        tensor.tape = self
        tensor.node_id = len(self.nodes)
        self.nodes.append(TapeNode("leaf", (), tensor.data.shape))
        self._leaf_ids.append(tensor.node_id)
        return tensor

    def leaf_ids(self) -> list[int]:
        return list(self._leaf_ids)

    def _record(self, op, parent_ids, out: Tensor, backward_fn) -> Tensor:
        out.tape = self
        out.node_id = len(self.nodes)
        self.nodes.append(TapeNode(op, parent_ids, out.data.shape, backward_fn))
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _find_tape(*operands) -> Tape | None:
    """Locate the live tape among operands; enlist stray differentiable leaves."""
    tape = None
    for t in operands:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ContractError("operands belong to different tapes")
    if tape is not None:
        for t in operands:
            if isinstance(t, Tensor) and t.tape is None and t.requires_grad:
                tape.watch(t)
    return tape


def _emit(op, operands, out_data, backward_fn) -> Tensor:
    """Wrap ``out_data``; record a node if any operand is on a tape."""
    tape = _find_tape(*operands)
    out = Tensor(out_data)
    if tape is None:
        return out
    parent_ids = tuple(
        t.node_id if isinstance(t, Tensor) and t.tape is tape else None
        for t in operands
    )
    return tape._record(op, parent_ids, out, backward_fn)


def _require_same_shape(op, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# pointwise and reduction ops


def add(a, b) -> Tensor:
    """Elementwise sum; the second operand may be a python scalar."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        return _emit("add_scalar", (a,), a.data + float(b), lambda g: (g,))
    b = _as_tensor(b)
    _require_same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        return _emit("sub_scalar", (a,), a.data - float(b), lambda g: (g,))
    b = _as_tensor(b)
    _require_same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product; the second operand may be a python scalar."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        return _emit("mul_scalar", (a,), a.data * c, lambda g: (g * c,))
    b = _as_tensor(b)
    _require_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    # derivative at the kink is pinned to 0: mask is strict
    mask = x.data > 0.0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """1/(1+e^-x) computed branch-wise so neither tail overflows."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = stable_sigmoid(x.data)
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def softplus(x) -> Tensor:
    """ln(1 + e^x), saturating to exactly x / 0.0 beyond +/-50."""
    x = _as_tensor(x)
    xd = x.data
    out = np.where(xd <= -_SOFTPLUS_SATURATION, 0.0, np.logaddexp(0.0, xd))

    def bwd(g):
        return (g * stable_sigmoid(xd),)

    return _emit("softplus", (x,), out, bwd)


def global_avg_pool(x) -> Tensor:
    """[B,C,H,W] -> [B,C] spatial mean."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    b, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (b, c, h, w)).copy(),)

    return _emit("global_avg_pool", (x,), out, bwd)


def mean_all(x) -> Tensor:
    """Scalar mean over every element."""
    x = _as_tensor(x)
    n = x.data.size
    shape = x.data.shape

    def bwd(g):
        return (np.full(shape, float(g) / n),)

    return _emit("mean_all", (x,), np.asarray(x.data.mean()), bwd)


def bias_add(x, b) -> Tensor:
    """Add a [N] bias to each row of [M,N]."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.data.ndim != 2 or b.data.shape != (x.data.shape[1],):
        raise DimensionError(f"bias_add: shape {x.shape} vs bias {b.shape}")
    return _emit("bias_add", (x, b), x.data + b.data[None, :],
                 lambda g: (g, g.sum(axis=0)))


def channel_affine(x, scale, shift) -> Tensor:
    """Per-channel y = x*scale[c] + shift[c] on [B,C,H,W]."""
    x, scale, shift = _as_tensor(x), _as_tensor(scale), _as_tensor(shift)
    if x.data.ndim != 4:
        raise DimensionError(f"channel_affine: expected 4-d input, got {x.shape}")
    c = x.data.shape[1]
    if scale.data.shape != (c,) or shift.data.shape != (c,):
        raise DimensionError(
            f"channel_affine: input {x.shape} vs scale {scale.shape}, shift {shift.shape}"
        )
    xd, sd = x.data, scale.data
    out = xd * sd[None, :, None, None] + shift.data[None, :, None, None]

    def bwd(g):
        return (
            g * sd[None, :, None, None],
            (g * xd).sum(axis=(0, 2, 3)),
            g.sum(axis=(0, 2, 3)),
        )

    return _emit("channel_affine", (x, scale, shift), out, bwd)


def batch_channel_norm(x, eps: float) -> Tensor:
    """Normalize [B,C,H,W] per channel with batch statistics.

    Uses the unbiased (N-1) variance over the B*H*W samples of each channel,
    so a train-mode batch needs at least two samples.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"batch_channel_norm: expected 4-d input, got {x.shape}")
    b, c, h, w = x.data.shape
    n = b * h * w
    if n < 2:
        raise ContractError("batch_channel_norm needs >= 2 samples per channel")
    mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
    var = x.data.var(axis=(0, 2, 3), keepdims=True, ddof=1)
    s = np.sqrt(var + eps)
    xhat = (x.data - mean) / s

    def bwd(g):
        # dL/dx = (g - mean(g) - xhat * sum(g*xhat)/(N-1)) / s, per channel
        gm = g.mean(axis=(0, 2, 3), keepdims=True)
        gx = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return ((g - gm - xhat * (gx / (n - 1))) / s,)

    return _emit("batch_channel_norm", (x,), xhat, bwd)


def quantize16(x) -> Tensor:
    """Round to nearest IEEE binary16 and widen back to float64.

    Both activations and their gradients pass through the rounding, emulating
    a 16-bit compute path on full-precision storage.
    """
    x = _as_tensor(x)
    return _emit("quantize16", (x,), _round_binary16(x.data),
                 lambda g: (_round_binary16(g),))


def _round_binary16(a: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.asarray(a, dtype=np.float64).astype(np.float16).astype(np.float64)


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "global_avg_pool": global_avg_pool,
}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch to a pointwise op by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# linear algebra ops


def matmul(a, b) -> Tensor:
    """[M,K] @ [K,N] matrix product."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation: [B,C,H,W] x [F,C,kh,kw] -> [B,F,H',W'].

    H' = floor((H + 2*padding - kh)/stride) + 1, zero padding outside bounds.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(
            f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}"
        )
    bsz, cin, h, w = x.data.shape
    f, ck, kh, kw = kernel.data.shape
    if ck != cin:
        raise DimensionError(f"conv2d: channel mismatch, input {x.shape} vs kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: bad stride {stride} or padding {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {kernel.shape} larger than padded input {x.shape} (padding {padding})"
        )

    xd, kd = x.data, kernel.data
    out = _conv_forward(xd, kd, stride, padding)

    def bwd(g):
        return (
            _conv_backward_input(g, kd, xd.shape, stride, padding),
            _conv_backward_kernel(g, xd, kd.shape, stride, padding),
        )

    return _emit("conv2d", (x, kernel), out, bwd)


def _strided_windows(a: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(a, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride, :, :]


def _conv_forward(x, k, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _strided_windows(x, k.shape[2], k.shape[3], stride)
    # [B,C,H',W',kh,kw] . [F,C,kh,kw] -> [B,H',W',F]
    out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_backward_kernel(g, x, kshape, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _strided_windows(x, kshape[2], kshape[3], stride)
    # [B,F,H',W'] . [B,C,H',W',kh,kw] -> [F,C,kh,kw]
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


def _conv_backward_input(g, k, xshape, stride, padding):
    bsz, cin, h, w = xshape
    f, _, kh, kw = k.shape
    _, _, ho, wo = g.shape
    # scatter the strided gradient onto a dilated grid, then run a full
    # correlation against the flipped kernel
    hd, wd = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    gd = np.zeros((bsz, f, hd, wd))
    gd[:, :, ::stride, ::stride] = g
    gd = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    win = np.lib.stride_tricks.sliding_window_view(gd, (kh, kw), axis=(2, 3))
    kf = k[:, :, ::-1, ::-1]
    dx_core = np.tensordot(win, kf, axes=([1, 4, 5], [0, 2, 3]))  # [B,hc,wc,C]
    dx_core = dx_core.transpose(0, 3, 1, 2)
    # rows/cols of the padded input the strided sweep never touched get zero
    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = np.zeros((bsz, cin, hp, wp))
    dxp[:, :, : dx_core.shape[2], : dx_core.shape[3]] = dx_core
    return np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w])


# ---------------------------------------------------------------------------
# reverse sweep and the finite-difference oracle


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Sweep the tape once in reverse; return {leaf node_id: gradient}.

    Unused watched leaves receive zero gradients of their own shape. The
    sweep is pure: calling it twice on the same tape gives identical bits.
    """
    if loss.tape is not tape or loss.node_id is None:
        raise ContractError("loss was not produced on this tape")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[loss.node_id] = np.ones(tape.nodes[loss.node_id].shape)
    for k in range(loss.node_id, -1, -1):
        g = grads[k]
        node = tape.nodes[k]
        if g is None or node.op == "leaf":
            continue
        for pid, pg in zip(node.parents, node.backward_fn(g)):
            if pid is None or pg is None:
                continue
            if grads[pid] is None:
                grads[pid] = pg
            else:
                grads[pid] = grads[pid] + pg

    out = {}
    for lid in tape.leaf_ids():
        g = grads[lid]
        out[lid] = Tensor(g if g is not None else np.zeros(tape.nodes[lid].shape))
    return out


def grad_check(f, params: list[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(params)`` must deterministically build a scalar Tensor from the
    current values of ``params``. Relative error per coordinate is
    |a - n| / max(|a|, |n|, 1e-12); the caller asserts on the returned max.
    """
    if eps <= 0:
        raise ContractError("grad_check needs eps > 0")
    tape = Tape()
    for p in params:
        tape.watch(p)
    loss = f(params)
    gmap = backward(tape, loss)
    analytic = [gmap[p.node_id].data.copy() for p in params]

    # detach so the probe evaluations below run untaped
    for p in params:
        p.tape = None
        p.node_id = None

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            fp = float(f(params).data)
            flat[i] = saved - eps
            fm = float(f(params).data)
            flat[i] = saved
            numeric = (fp - fm) / (2.0 * eps)
            rel = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-12)
            worst = max(worst, rel)
    return worst
