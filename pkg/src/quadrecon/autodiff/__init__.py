from quadrecon.autodiff.tensor import (
    OPS,
    Node,
    Op,
    SecondOrderResult,
    Tape,
    Tensor,
    active_tape,
    apply,
    as_tensor,
    grad_of_grad,
    no_record,
)
from quadrecon.autodiff import ops
from quadrecon.autodiff.nn import MLP, Linear, Module

__all__ = [
    "OPS",
    "Node",
    "Op",
    "SecondOrderResult",
    "Tape",
    "Tensor",
    "active_tape",
    "apply",
    "as_tensor",
    "grad_of_grad",
    "no_record",
    "ops",
    "MLP",
    "Linear",
    "Module",
]
