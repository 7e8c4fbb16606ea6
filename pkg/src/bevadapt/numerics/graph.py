"""Graph evaluation, differentiation, and the finite-difference oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import (
    Node,
    UsageError,
    backward,
    collect_parameters,
    constant,
    dropout_mask,
    parameter,
)
from .tensor import GradientSet, ParameterSet, TensorRecord

__all__ = [
    "Graph",
    "bind_params",
    "evaluate",
    "differentiate",
    "dropout_mask",
    "finite_difference_gradient",
    "finite_difference_directional",
    "sgd_step",
]


@dataclass(frozen=True)
class Graph:
    """A named composition of primitives.

    ``fn(params, inputs, seed)`` receives parameter leaves keyed by name,
    input nodes in declared order, and the seed for any dropout nodes; it
    returns the output node. The function must be pure so that repeated
    evaluation (finite differences, reproducibility checks) is exact.
    """

    fn: Callable[[Mapping[str, Node], Sequence[Node], int | None], Node]
    name: str = "graph"


def bind_params(params: ParameterSet, trainable: bool = True) -> dict[str, Node]:
    """Wrap every parameter as a leaf node (or a constant when frozen)."""
    if trainable:
        return {name: parameter(params[name], name) for name in params.names()}
    return {name: constant(params[name], name) for name in params.names()}


def evaluate(
    graph: Graph,
    params: ParameterSet,
    inputs: Sequence[TensorRecord],
    seed: int | None = None,
) -> Node:
    """Forward-evaluate ``graph``; the returned node carries the tape."""
    leaves = bind_params(params, trainable=True)
    input_nodes = [constant(rec, name=f"input{i}") for i, rec in enumerate(inputs)]
    return graph.fn(leaves, input_nodes, seed)


def differentiate(loss, params: ParameterSet) -> GradientSet:
    """Gradient of a scalar loss node for every entry of ``params``.

    Parameters that the loss does not reach get zero tensors. Calling this
    on anything other than a node returned by a forward evaluation is a
    usage error (there is no tape to walk).
    """
    if not isinstance(loss, Node):
        raise UsageError("differentiate needs the node returned by a forward evaluation")
    if loss.data.size != 1:
        raise UsageError(f"loss must be scalar, got shape {loss.shape}")
    leaves = collect_parameters(loss)
    node_grads = backward(loss)
    out: dict[str, TensorRecord] = {}
    for name in params.names():
        leaf = leaves.get(name)
        if leaf is None:
            out[name] = TensorRecord.zeros(params[name].shape)
            continue
        if leaf.shape != params[name].shape:
            raise UsageError(
                f"parameter {name!r} has shape {params[name].shape} but its leaf has {leaf.shape}"
            )
        g = node_grads.get(leaf)
        out[name] = (
            TensorRecord.zeros(params[name].shape) if g is None else TensorRecord(g.copy())
        )
    return GradientSet(out)


def _scalar_eval(graph: Graph, params: ParameterSet, inputs, seed) -> float:
    node = evaluate(graph, params, inputs, seed)
    if node.data.size != 1:
        raise UsageError("finite differences need a scalar-valued graph")
    return float(node.data.reshape(-1)[0])


def finite_difference_gradient(
    graph: Graph,
    params: ParameterSet,
    inputs: Sequence[TensorRecord],
    step: float,
    seed: int | None = None,
    coords: Mapping[str, Sequence[int]] | None = None,
) -> GradientSet:
    """Central-difference gradient estimate, the independent oracle.

    By default every scalar parameter is probed; ``coords`` restricts the
    probe to chosen flat indices per parameter (unprobed coordinates stay
    zero), which keeps large models tractable.
    """
    if step <= 0:
        raise UsageError(f"step must be positive, got {step}")
    out: dict[str, TensorRecord] = {}
    for name in params.names():
        base = params[name].array
        flat = base.reshape(-1)
        grad = np.zeros_like(flat)
        if coords is None:
            indices = range(flat.size)
        else:
            indices = [int(i) for i in coords.get(name, ())]
        for idx in indices:
            plus = flat.copy()
            plus[idx] += step
            minus = flat.copy()
            minus[idx] -= step
            f_plus = _scalar_eval(
                graph, params.replaced({name: TensorRecord.of(plus, base.shape)}), inputs, seed
            )
            f_minus = _scalar_eval(
                graph, params.replaced({name: TensorRecord.of(minus, base.shape)}), inputs, seed
            )
            grad[idx] = (f_plus - f_minus) / (2.0 * step)
        out[name] = TensorRecord.of(grad, base.shape)
    return GradientSet(out)


def finite_difference_directional(
    graph: Graph,
    params: ParameterSet,
    inputs: Sequence[TensorRecord],
    direction: Mapping[str, TensorRecord],
    step: float,
    seed: int | None = None,
) -> float:
    """Central-difference directional derivative along a parameter direction."""
    if step <= 0:
        raise UsageError(f"step must be positive, got {step}")
    shifted_plus = {}
    shifted_minus = {}
    for name, vec in direction.items():
        base = params[name].array
        shifted_plus[name] = TensorRecord(base + step * vec.array)
        shifted_minus[name] = TensorRecord(base - step * vec.array)
    f_plus = _scalar_eval(graph, params.replaced(shifted_plus), inputs, seed)
    f_minus = _scalar_eval(graph, params.replaced(shifted_minus), inputs, seed)
    return (f_plus - f_minus) / (2.0 * step)


def sgd_step(params: ParameterSet, grads: GradientSet, lr: float) -> ParameterSet:
    """One plain gradient-descent step; returns a fresh ParameterSet."""
    if not grads.matches(params):
        raise UsageError("gradient set does not match the parameter set")
    updates = {
        name: TensorRecord(params[name].array - lr * grads[name].array)
        for name in params.names()
    }
    return params.replaced(updates)


class AdamState:
    """Per-parameter first/second moment accumulators for Adam."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(
    params: ParameterSet, grads: GradientSet, lr: float, state: AdamState
) -> ParameterSet:
    """One Adam step; mutates ``state`` and returns fresh parameters.

    Plain gradient descent proved unusable on the composed detection
    objective at toy scale (divergence above the stability threshold,
    stalling below it), so training loops use this instead.
    """
    if not grads.matches(params):
        raise UsageError("gradient set does not match the parameter set")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    updates = {}
    for name in params.names():
        g = grads[name].array
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        step_dir = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        updates[name] = TensorRecord(params[name].array - lr * step_dir)
    return params.replaced(updates)
