"""
Primitive ops and their backward rules.

Second-order ops express their backward rule with tensor ops, so it can be
recorded and differentiated again. First-order ops compute their rule with
plain numpy and must stay off the density path.
"""

from typing import Any, Sequence, Tuple

import numpy as np

from quadrecon.autodiff.tensor import Tensor, apply, as_tensor, register_op


def _np_sum_to(a: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if a.shape == tuple(shape):
        return a
    lead = a.ndim - len(shape)
    if lead > 0:
        a = a.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and a.shape[i] != 1)
    if axes:
        a = a.sum(axis=axes, keepdims=True)
    return a.reshape(shape)


def _reduced(g: Tensor, like: Tensor) -> Tensor:
    return g if g.shape == like.shape else sum_to(g, like.shape)


def _const(data: Any) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


# ---------------------------------------------------------------- arithmetic

ADD = register_op(
    "add",
    lambda a, b: a + b,
    lambda node, g, needs: (
        _reduced(g, node.inputs[0]) if needs[0] else None,
        _reduced(g, node.inputs[1]) if needs[1] else None,
    ),
)

SUB = register_op(
    "sub",
    lambda a, b: a - b,
    lambda node, g, needs: (
        _reduced(g, node.inputs[0]) if needs[0] else None,
        _reduced(neg(g), node.inputs[1]) if needs[1] else None,
    ),
)

MUL = register_op(
    "mul",
    lambda a, b: a * b,
    lambda node, g, needs: (
        _reduced(g * node.inputs[1], node.inputs[0]) if needs[0] else None,
        _reduced(g * node.inputs[0], node.inputs[1]) if needs[1] else None,
    ),
)

DIV = register_op(
    "div",
    lambda a, b: a / b,
    lambda node, g, needs: (
        _reduced(g / node.inputs[1], node.inputs[0]) if needs[0] else None,
        _reduced(neg(g * node.output / node.inputs[1]), node.inputs[1]) if needs[1] else None,
    ),
)

NEG = register_op("neg", lambda a: -a, lambda node, g, needs: (neg(g),))

POWER = register_op(
    "power",
    lambda a, exponent: np.power(a, exponent),
    lambda node, g, needs: (
        g * (node.attrs["exponent"] * power(node.inputs[0], node.attrs["exponent"] - 1.0))
        if node.attrs["exponent"] != 1.0
        else g,
    ),
)

# ---------------------------------------------------------------- elementwise

EXP = register_op("exp", np.exp, lambda node, g, needs: (g * node.output,))
LOG = register_op("log", np.log, lambda node, g, needs: (g / node.inputs[0],))
SQRT = register_op("sqrt", np.sqrt, lambda node, g, needs: (g * 0.5 / node.output,))
SIN = register_op("sin", np.sin, lambda node, g, needs: (g * cos(node.inputs[0]),))
COS = register_op("cos", np.cos, lambda node, g, needs: (neg(g * sin(node.inputs[0])),))
TANH = register_op("tanh", np.tanh, lambda node, g, needs: (g * (1.0 - node.output * node.output),))
SIGMOID = register_op(
    "sigmoid",
    lambda a: 0.5 * (1.0 + np.tanh(0.5 * a)),
    lambda node, g, needs: (g * node.output * (1.0 - node.output),),
)
SOFTPLUS = register_op(
    "softplus",
    lambda a: np.logaddexp(0.0, a),
    lambda node, g, needs: (g * sigmoid(node.inputs[0]),),
)
RELU = register_op(
    "relu",
    lambda a: np.maximum(a, 0.0),
    lambda node, g, needs: (g * _const(node.inputs[0].data > 0.0),),
)


def _silu_vjp(node, g, needs):
    x = node.inputs[0]
    s = sigmoid(x)
    return (g * (s * (1.0 + x * (1.0 - s))),)


SILU = register_op("silu", lambda a: a * 0.5 * (1.0 + np.tanh(0.5 * a)), _silu_vjp)

# first-order only: rules computed in numpy

ABS = register_op(
    "abs",
    np.abs,
    lambda node, g, needs: (_const(g.data * np.sign(node.inputs[0].data)),),
    second_order=False,
)

CLIP = register_op(
    "clip",
    lambda a, lo, hi: np.clip(a, lo, hi),
    lambda node, g, needs: (
        _const(g.data * ((node.inputs[0].data >= node.attrs["lo"]) & (node.inputs[0].data <= node.attrs["hi"]))),
    ),
    second_order=False,
)


def _extremum_vjp(pick_first):
    def vjp(node, g, needs):
        a, b = node.inputs
        first = pick_first(a.data, b.data)
        ga = _np_sum_to(np.broadcast_to(g.data * first, g.shape), a.shape) if needs[0] else None
        gb = _np_sum_to(np.broadcast_to(g.data * ~first, g.shape), b.shape) if needs[1] else None
        return (_const(ga) if ga is not None else None, _const(gb) if gb is not None else None)

    return vjp


MAXIMUM = register_op("maximum", np.maximum, _extremum_vjp(lambda a, b: a >= b), second_order=False)
MINIMUM = register_op("minimum", np.minimum, _extremum_vjp(lambda a, b: a <= b), second_order=False)

ARCSIN = register_op(
    "arcsin",
    np.arcsin,
    lambda node, g, needs: (_const(g.data / np.sqrt(np.maximum(1.0 - node.inputs[0].data ** 2, 1e-300))),),
    second_order=False,
)


def _atan2_vjp(node, g, needs):
    y, x = node.inputs[0].data, node.inputs[1].data
    r2 = np.maximum(x * x + y * y, 1e-300)
    gy = _np_sum_to(np.broadcast_to(g.data * x / r2, g.shape), y.shape) if needs[0] else None
    gx = _np_sum_to(np.broadcast_to(-g.data * y / r2, g.shape), x.shape) if needs[1] else None
    return (_const(gy) if gy is not None else None, _const(gx) if gx is not None else None)


ATAN2 = register_op("atan2", np.arctan2, _atan2_vjp, second_order=False)

# ---------------------------------------------------------------- linear algebra and shape


def _swap_last(t: Tensor) -> Tensor:
    return swapaxes(t, -1, -2)


MATMUL = register_op(
    "matmul",
    np.matmul,
    lambda node, g, needs: (
        _reduced(g @ _swap_last(node.inputs[1]), node.inputs[0]) if needs[0] else None,
        _reduced(_swap_last(node.inputs[0]) @ g, node.inputs[1]) if needs[1] else None,
    ),
)

SWAPAXES = register_op(
    "swapaxes",
    lambda a, axis1, axis2: np.swapaxes(a, axis1, axis2),
    lambda node, g, needs: (swapaxes(g, node.attrs["axis1"], node.attrs["axis2"]),),
)


def _sum_vjp(node, g, needs):
    x = node.inputs[0]
    axis = node.attrs["axis"]
    if axis is None:
        kept = (1,) * x.ndim
    elif node.attrs["keepdims"]:
        kept = g.shape
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % x.ndim for a in axes)
        kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
    return (broadcast_to(reshape(g, kept), x.shape),)


SUM = register_op("sum", lambda a, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims), _sum_vjp)

RESHAPE = register_op(
    "reshape",
    lambda a, shape: np.reshape(a, shape),
    lambda node, g, needs: (reshape(g, node.inputs[0].shape),),
)

BROADCAST_TO = register_op(
    "broadcast_to",
    lambda a, shape: np.array(np.broadcast_to(a, shape)),
    lambda node, g, needs: (_reduced(g, node.inputs[0]),),
)

SUM_TO = register_op(
    "sum_to",
    _np_sum_to,
    lambda node, g, needs: (broadcast_to(g, node.inputs[0].shape),),
)

GETITEM = register_op(
    "getitem",
    lambda a, index: np.array(a[index]),
    lambda node, g, needs: (scatter_add(g, node.attrs["index"], node.inputs[0].shape),),
)


def _scatter_forward(values, index, shape):
    out = np.zeros(shape, dtype=np.float64)
    # np.add.at applies repeated indices sequentially in index order
    np.add.at(out, index, values)
    return out


SCATTER_ADD = register_op(
    "scatter_add",
    _scatter_forward,
    lambda node, g, needs: (getitem(g, node.attrs["index"]),),
)


def _split_vjp(node, g, needs):
    axis = node.attrs["axis"] % g.ndim
    grads = []
    offset = 0
    for tensor, need in zip(node.inputs, needs):
        width = tensor.shape[axis]
        index = (slice(None),) * axis + (slice(offset, offset + width),)
        grads.append(getitem(g, index) if need else None)
        offset += width
    return grads


CONCAT = register_op("concat", lambda *arrays, axis: np.concatenate(arrays, axis=axis), _split_vjp)


def _unstack_vjp(node, g, needs):
    axis = node.attrs["axis"] % g.ndim
    return [getitem(g, (slice(None),) * axis + (i,)) if need else None for i, need in enumerate(needs)]


STACK = register_op("stack", lambda *arrays, axis: np.stack(arrays, axis=axis), _unstack_vjp)


def _where_vjp(node, g, needs):
    mask = _const(node.attrs["cond"])
    return (
        _reduced(g * mask, node.inputs[0]) if needs[0] else None,
        _reduced(g * (1.0 - mask), node.inputs[1]) if needs[1] else None,
    )


WHERE = register_op("where", lambda a, b, cond: np.where(cond, a, b), _where_vjp)


def _rev_cumsum_np(a, axis):
    return np.flip(np.cumsum(np.flip(a, axis=axis), axis=axis), axis=axis)


CUMSUM = register_op(
    "cumsum",
    lambda a, axis: np.cumsum(a, axis=axis),
    lambda node, g, needs: (rev_cumsum(g, node.attrs["axis"]),),
)
REV_CUMSUM = register_op(
    "rev_cumsum",
    _rev_cumsum_np,
    lambda node, g, needs: (cumsum(g, node.attrs["axis"]),),
)

# ---------------------------------------------------------------- functional API


def add(a, b) -> Tensor:
    return apply(ADD, a, b)


def sub(a, b) -> Tensor:
    return apply(SUB, a, b)


def mul(a, b) -> Tensor:
    return apply(MUL, a, b)


def div(a, b) -> Tensor:
    return apply(DIV, a, b)


def neg(a) -> Tensor:
    return apply(NEG, a)


def power(a, exponent: float) -> Tensor:
    return apply(POWER, a, exponent=float(exponent))


def square(a) -> Tensor:
    a = as_tensor(a)
    return a * a


def exp(a) -> Tensor:
    return apply(EXP, a)


def log(a) -> Tensor:
    return apply(LOG, a)


def sqrt(a) -> Tensor:
    return apply(SQRT, a)


def sin(a) -> Tensor:
    return apply(SIN, a)


def cos(a) -> Tensor:
    return apply(COS, a)


def tanh(a) -> Tensor:
    return apply(TANH, a)


def sigmoid(a) -> Tensor:
    return apply(SIGMOID, a)


def softplus(a) -> Tensor:
    return apply(SOFTPLUS, a)


def relu(a) -> Tensor:
    return apply(RELU, a)


def silu(a) -> Tensor:
    return apply(SILU, a)


def abs_(a) -> Tensor:
    return apply(ABS, a)


def clip(a, lo: float, hi: float) -> Tensor:
    return apply(CLIP, a, lo=float(lo), hi=float(hi))


def maximum(a, b) -> Tensor:
    return apply(MAXIMUM, a, b)


def minimum(a, b) -> Tensor:
    return apply(MINIMUM, a, b)


def arcsin(a) -> Tensor:
    return apply(ARCSIN, a)


def atan2(y, x) -> Tensor:
    return apply(ATAN2, y, x)


def matmul(a, b) -> Tensor:
    return apply(MATMUL, a, b)


def swapaxes(a, axis1: int = -1, axis2: int = -2) -> Tensor:
    return apply(SWAPAXES, a, axis1=axis1, axis2=axis2)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    if isinstance(axis, list):
        axis = tuple(axis)
    return apply(SUM, a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    total = sum_(a, axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.size // max(total.size, 1)
    return total / float(count)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return apply(RESHAPE, a, shape=np.reshape(a.data, shape).shape)


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return apply(BROADCAST_TO, a, shape=tuple(shape))


def sum_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return apply(SUM_TO, a, shape=tuple(shape))


def getitem(a, index) -> Tensor:
    return apply(GETITEM, a, index=index)


def scatter_add(values, index, shape: Sequence[int]) -> Tensor:
    return apply(SCATTER_ADD, values, index=index, shape=tuple(shape))


def concat(tensors: Sequence[Any], axis: int = -1) -> Tensor:
    return apply(CONCAT, *tensors, axis=axis)


def stack(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    return apply(STACK, *tensors, axis=axis)


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    return apply(WHERE, a, b, cond=cond)


def cumsum(a, axis: int = -1) -> Tensor:
    return apply(CUMSUM, a, axis=axis)


def rev_cumsum(a, axis: int = -1) -> Tensor:
    return apply(REV_CUMSUM, a, axis=axis)


def dot(a, b, axis: int = -1, keepdims: bool = False) -> Tensor:
    return sum_(as_tensor(a) * b, axis=axis, keepdims=keepdims)


def norm(a, axis: int = -1, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    sq = dot(a, a, axis=axis, keepdims=keepdims)
    return sqrt(sq + eps) if eps else sqrt(sq)


def normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    return as_tensor(a) / norm(a, axis=axis, keepdims=True, eps=eps)


def numpy_of(value: Any) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)


def _reshape_method(self, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    return reshape(self, shape)


def _flip(fn):
    return lambda self, other: fn(other, self)


Tensor.__add__ = add
Tensor.__radd__ = _flip(add)
Tensor.__sub__ = sub
Tensor.__rsub__ = _flip(sub)
Tensor.__mul__ = mul
Tensor.__rmul__ = _flip(mul)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = _flip(div)
Tensor.__neg__ = neg
Tensor.__pow__ = power
Tensor.__matmul__ = matmul
Tensor.__rmatmul__ = _flip(matmul)
Tensor.__getitem__ = getitem
Tensor.sum = sum_
Tensor.mean = mean
Tensor.reshape = _reshape_method
Tensor.T = property(lambda self: swapaxes(self, -1, -2))
