"""
Dense tensors and the reverse-mode tape.

A :class:`Tape` records every op applied to tracked tensors while it is the
active tape. Backward rules are written in terms of tensor ops themselves, so
running a backward pass with ``create_graph=True`` records the rules on the
tape and the resulting gradients are differentiable again. Ops whose rules
are not safe to differentiate are registered with ``second_order=False`` and
refuse to take part in such a pass.

The active tape lives in a context variable: one tape per thread/context,
several independent tapes may run side by side.
"""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from quadrecon.errors import NonFiniteError, SeedShapeError, ShapeError, UnsupportedSecondOrderError

DTYPE = np.float64
CHECK_FINITE = True

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    """A float64 array that can take part in recorded computations."""

    __slots__ = ("data", "requires_grad", "name", "_node")
    __array_ufunc__ = None  # numpy defers mixed arithmetic to Tensor's reflected operators

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=DTYPE) if requires_grad else np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self._node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass(frozen=True)
class Op:
    """A primitive with a numpy forward and a tensor-level backward rule.

    ``vjp(node, g, needs)`` returns one entry per input; entries whose
    ``needs`` flag is False may be None.
    """

    name: str
    forward: Callable[..., np.ndarray]
    vjp: Callable[["Node", Tensor, Tuple[bool, ...]], Sequence[Optional[Tensor]]]
    second_order: bool = True


@dataclass(eq=False)
class Node:
    op: Op
    inputs: Tuple[Tensor, ...]
    output: Tensor
    attrs: Dict[str, Any]
    tape: "Tape"


OPS: Dict[str, Op] = {}


def register_op(name: str, forward, vjp, second_order: bool = True) -> Op:
    op = Op(name=name, forward=forward, vjp=vjp, second_order=second_order)
    OPS[name] = op
    return op


def apply(op: Op, *inputs: Any, **attrs: Any) -> Tensor:
    """Evaluate ``op`` and record it on the active tape if any input is tracked."""
    tensors = tuple(as_tensor(t) for t in inputs)
    try:
        with np.errstate(all="ignore"):
            out = op.forward(*(t.data for t in tensors), **attrs)
    except (ValueError, IndexError) as exc:
        raise ShapeError(op.name, str(exc)) from exc
    out = np.asarray(out, dtype=DTYPE)
    if CHECK_FINITE and not np.isfinite(out).all():
        raise NonFiniteError(op.name)
    result = Tensor(out)
    tape = _active_tape.get()
    if tape is not None and any(tape.tracks(t) for t in tensors):
        node = Node(op=op, inputs=tensors, output=result, attrs=attrs, tape=tape)
        result._node = node
        tape.nodes.append(node)
    return result


def active_tape() -> Optional["Tape"]:
    return _active_tape.get()


@contextmanager
def no_record() -> Iterator[None]:
    """Evaluate ops without recording them on any tape."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


class Tape:
    """Topologically ordered record of the ops applied to tracked tensors."""

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self._tokens: List[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc_info: Any) -> None:
        _active_tape.reset(self._tokens.pop())

    def tracks(self, tensor: Tensor) -> bool:
        return tensor.requires_grad or (tensor._node is not None and tensor._node.tape is self)

    def leaves(self) -> List[Tensor]:
        seen: Dict[int, Tensor] = {}
        for node in self.nodes:
            for tensor in node.inputs:
                if tensor.requires_grad and id(tensor) not in seen:
                    seen[id(tensor)] = tensor
        return list(seen.values())

    def _reachable(self, sources: Sequence[Tensor]) -> set:
        reach = {id(s) for s in sources}
        for node in self.nodes:
            if any(id(t) in reach for t in node.inputs):
                reach.add(id(node.output))
        return reach

    def gradient(
        self,
        target: Tensor,
        sources: Sequence[Tensor],
        seed: Any = None,
        create_graph: bool = False,
    ) -> List[Tensor]:
        """Gradients of ``sum(seed * target)`` with respect to each source.

        With ``create_graph`` the backward rules are recorded on this tape, so
        the returned tensors can be differentiated again.
        """
        if seed is None:
            seed_t = Tensor(np.ones_like(target.data))
        else:
            seed_t = as_tensor(seed)
            if seed_t.shape != target.shape:
                raise SeedShapeError(
                    f"seed shape {seed_t.shape} does not match output shape {target.shape}",
                    {"seed": seed_t.shape, "output": target.shape},
                )
        sources = list(sources)
        source_ids = {id(s) for s in sources}
        reach = self._reachable(sources)

        pending: Dict[int, Tensor] = {id(target): seed_t}
        captured: Dict[int, Tensor] = {}
        token = _active_tape.set(self if create_graph else None)
        try:
            for node in reversed(list(self.nodes)):
                key = id(node.output)
                g = pending.pop(key, None)
                if g is None:
                    continue
                if key in source_ids:
                    captured[key] = g
                needs = tuple(id(t) in reach for t in node.inputs)
                if not any(needs):
                    continue
                if create_graph and not node.op.second_order:
                    raise UnsupportedSecondOrderError(node.op.name)
                in_grads = node.op.vjp(node, g, needs)
                for tensor, need, grad in zip(node.inputs, needs, in_grads):
                    if not need or grad is None:
                        continue
                    prev = pending.get(id(tensor))
                    pending[id(tensor)] = grad if prev is None else prev + grad
        finally:
            _active_tape.reset(token)

        results = []
        for source in sources:
            grad = captured.get(id(source), pending.get(id(source)))
            results.append(grad if grad is not None else Tensor(np.zeros_like(source.data)))
        return results

    def backward(self, target: Tensor, seed: Any = None) -> Dict[Tensor, np.ndarray]:
        """First-order gradients of ``target`` for every leaf on the tape."""
        leaves = self.leaves()
        grads = self.gradient(target, leaves, seed=seed)
        return {leaf: grad.data for leaf, grad in zip(leaves, grads)}


@dataclass
class SecondOrderResult:
    """∂σ/∂x at the probe positions and the parameter gradients of ``Σ c·∂σ/∂x``."""

    dsigma_dx: np.ndarray
    param_grads: List[np.ndarray] = field(default_factory=list)


def grad_of_grad(
    sigma_fn: Callable[[Tensor], Tensor],
    position: Any,
    params: Sequence[Tensor],
    cotangent: Any = None,
) -> SecondOrderResult:
    """Differentiate the density's input gradient with respect to ``params``.

    ``sigma_fn`` maps an (N, 3) position tensor to N densities. The input
    gradient is built with ``create_graph=True`` and contracted with
    ``cotangent`` (ones by default) before the second backward pass.
    """
    with Tape() as tape:
        x = Tensor(position, requires_grad=True)
        sigma = sigma_fn(x)
        (dsigma_dx,) = tape.gradient(sigma, [x], create_graph=True)
        weights = Tensor(np.ones_like(dsigma_dx.data) if cotangent is None else cotangent)
        objective = (dsigma_dx * weights).sum()
    grads = tape.gradient(objective, list(params))
    return SecondOrderResult(dsigma_dx=dsigma_dx.data, param_grads=[g.data for g in grads])
