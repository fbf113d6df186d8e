"""Reverse sweep over recorded nodes."""

from __future__ import annotations

from typing import Iterable, Mapping, Union

import numpy as np

from . import ops
from .tensor import ContractViolation, Tensor, enable_grad

GradMap = dict  # name -> Tensor, same shape as the parameter

Targets = Union[Mapping[str, Tensor], Iterable[Tensor]]


def _collect(root: Tensor, target_ids: set[int]) -> tuple[list, dict]:
    """Nodes that lie on a path from a target to ``root``, in reverse record order."""
    seen: dict[int, object] = {}
    stack = [root.tape_node]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        for t in node.inputs:
            if t.tape_node is not None and id(t) not in target_ids:
                stack.append(t.tape_node)
    nodes = sorted(seen.values(), key=lambda n: n.seq)
    # forward pass over the subgraph: keep nodes that reach a target
    reaches: dict[int, bool] = {}
    live = []
    for node in nodes:
        hit = False
        for t in node.inputs:
            if id(t) in target_ids or (t.tape_node is not None and reaches.get(id(t.tape_node), False)):
                hit = True
                break
        reaches[id(node)] = hit
        if hit:
            live.append(node)
    live.reverse()
    return live, reaches


def grad(loss: Tensor, targets: Targets, create_graph: bool = False) -> Union[GradMap, list]:
    """d loss / d target for each target.

    ``targets`` may be a name -> Tensor mapping (returns a GradMap) or a
    sequence (returns a list).  Targets may be intermediate tensors, e.g.
    fast weights produced by an earlier update.  With ``create_graph`` the
    sweep itself is recorded so the result can be differentiated again.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    named = isinstance(targets, Mapping)
    items = list(targets.items()) if named else list(enumerate(targets))
    for key, t in items:
        if not isinstance(t, Tensor) or not t.requires_grad:
            raise ContractViolation(f"target {key!r} does not require grad")
    target_ids = {id(t) for _, t in items}

    found: dict[int, Tensor] = {}
    seed = Tensor(np.ones(loss.shape, dtype=loss.dtype))
    if id(loss) in target_ids:
        found[id(loss)] = seed
    elif loss.tape_node is not None:
        nodes, reaches = _collect(loss, target_ids)
        pending: dict[int, Tensor] = {id(loss.tape_node): seed}
        with enable_grad(create_graph):
            for node in nodes:
                g = pending.pop(id(node), None)
                if g is None:
                    continue
                needs = tuple(
                    id(t) in target_ids
                    or (t.tape_node is not None and reaches.get(id(t.tape_node), False))
                    for t in node.inputs
                )
                grads = node.vjp(g, node, needs)
                for t, gt, need in zip(node.inputs, grads, needs):
                    if gt is None or not need:
                        continue
                    if id(t) in target_ids:
                        slot, key = found, id(t)
                    elif t.tape_node is not None:
                        slot, key = pending, id(t.tape_node)
                    else:
                        continue
                    prev = slot.get(key)
                    slot[key] = gt if prev is None else ops.add(prev, gt)

    out = []
    for key, t in items:
        g = found.get(id(t))
        if g is None:
            g = Tensor(np.zeros(t.shape, dtype=t.dtype))
        elif not create_graph:
            g = Tensor(g.data)
        out.append((key, g))
    return dict(out) if named else [g for _, g in out]


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> GradMap:
    """First-order gradients of a scalar loss for named parameters."""
    return grad(loss, params, create_graph=False)


def backward_through_backward(meta_loss: Tensor, params: Mapping[str, Tensor]) -> GradMap:
    """Meta-gradient of a loss computed from differentiably-updated weights.

    The inner updates must have been produced with ``grad(..., create_graph=True)``
    for second-order terms to be included; updates made from detached inner
    gradients give the first-order approximation.
    """
    if meta_loss.tape_node is None and meta_loss.requires_grad is False:
        raise ContractViolation("meta loss carries no recorded computation")
    return grad(meta_loss, params, create_graph=False)
