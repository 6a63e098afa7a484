"""Exact second derivatives of the interaction head with respect to its
inputs (or to the activations of an intermediate node layer), for one fixed
hard mask.

A full DxD Hessian costs one cached forward/backward plus D tangent
forward/backward sweeps (one per input direction), so the work grows
linearly in D.  Finite-difference oracles live here too so every analytic
result has an independent cross-check.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bnn import ConcreteDropoutMLP, HybridModel, MaskSample, ones_gates
from .core import act_eval


@dataclass
class HessianRequest:
    """Where to differentiate: model + mask + node layer + evaluation point.

    Layer 0 means raw (standardized) inputs; layer l >= 1 means the pre-gate
    activations of hidden node-layer l, with the mask applied only to the
    downstream part of the network.
    """

    model: HybridModel
    mask: MaskSample
    point: np.ndarray
    layer: int = 0
    include_linear: bool = False

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        net = self.model.net
        if not (0 <= self.layer < net.depth):
            raise ValueError(f"layer {self.layer} out of range for depth {net.depth}")
        want = net.layers[self.layer].in_width
        if self.point.shape != (want,):
            raise ValueError(f"point has shape {self.point.shape}, layer "
                             f"{self.layer} expects ({want},)")


def _forward_caches(net: ConcreteDropoutMLP, points: np.ndarray, gates: list,
                    layer: int):
    """Run the sub-network from node-layer `layer`, caching what the
    derivative sweeps need: post-gate inputs and activation derivatives."""
    acts = net.activations()
    a_list, d1_list, d2_list = [], [], []
    value = points
    for l in range(layer, net.depth):
        a = value * gates[l]
        s = a @ net.weights[l] + net.biases[l]
        _, d1, d2 = act_eval(acts[l], s)
        value = act_eval(acts[l], s)[0]
        a_list.append(a)
        d1_list.append(d1)
        d2_list.append(d2)
    return a_list, d1_list, d2_list, value[:, 0]


def _gradient_sweep(net: ConcreteDropoutMLP, gates: list, layer: int, d1_list):
    """Reverse pass.  Returns (gradient wrt pre-gate node values, the list of
    per-layer upstream gradients needed by the tangent sweep)."""
    n = d1_list[0].shape[0]
    upstream = np.ones((n, 1))  # d output / d (final node values)
    upstream_list = [None] * (net.depth - layer) + [upstream]
    grad = upstream
    for l in range(net.depth - 1, layer - 1, -1):
        delta = grad * d1_list[l - layer]
        grad_a = delta @ net.weights[l].T
        grad = grad_a * gates[l]
        upstream_list[l - layer] = grad
    return grad, upstream_list


def batch_gradient(net: ConcreteDropoutMLP, points: np.ndarray, gates: list,
                   layer: int = 0) -> np.ndarray:
    """Gradient of the masked head at each row of `points`, shape (N, D)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    _, d1_list, _, _ = _forward_caches(net, points, gates, layer)
    grad, _ = _gradient_sweep(net, gates, layer, d1_list)
    return grad


def batch_hessian(net: ConcreteDropoutMLP, points: np.ndarray, gates: list,
                  layer: int = 0) -> np.ndarray:
    """Hessian of the masked head at each row of `points`, shape (N, D, D).

    One tangent forward/backward per input direction; the base caches are
    shared, honoring the linear-in-D cost budget.  Output is symmetrized.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n, dim = points.shape
    _, d1_list, d2_list, _ = _forward_caches(net, points, gates, layer)
    _, upstream_list = _gradient_sweep(net, gates, layer, d1_list)

    hess = np.empty((n, dim, dim))
    depth = net.depth
    for direction in range(dim):
        # forward (tangent) sweep for the unit direction
        s_dots = []
        v_dot = np.zeros((n, dim))
        v_dot[:, direction] = 1.0
        for l in range(layer, depth):
            a_dot = v_dot * gates[l]
            s_dot = a_dot @ net.weights[l]
            s_dots.append(s_dot)
            v_dot = d1_list[l - layer] * s_dot
        # reverse (tangent) sweep
        g_dot = np.zeros((n, 1))
        for l in range(depth - 1, layer - 1, -1):
            i = l - layer
            delta_dot = (g_dot * d1_list[i]
                         + upstream_list[i + 1] * d2_list[i] * s_dots[i])
            g_dot = (delta_dot @ net.weights[l].T) * gates[l]
        hess[:, direction, :] = g_dot
    return 0.5 * (hess + np.transpose(hess, (0, 2, 1)))


def _gates_for(model: HybridModel, mask: MaskSample, layer: int) -> list:
    """Gates indexed so that gates[l] belongs to layer l of the full net."""
    gates = list(mask.gates)
    if len(gates) != model.net.depth:
        raise ValueError("mask does not match the network's node layout")
    return gates


def input_gradient(request: HessianRequest) -> np.ndarray:
    """First derivative of the interaction head at one point.

    At layer 0 the linear main-effect head is excluded unless asked for:
    main effects are the linear coefficients by construction.
    """
    model = request.model
    gates = _gates_for(model, request.mask, request.layer)
    grad = batch_gradient(model.net, request.point[None, :], gates,
                          request.layer)[0]
    if request.include_linear and request.layer == 0:
        grad = grad + model.beta
    return grad


def input_hessian(request: HessianRequest) -> np.ndarray:
    """Symmetrized second-derivative matrix at one point; the linear head
    contributes exactly zero curvature, so it never enters."""
    model = request.model
    gates = _gates_for(model, request.mask, request.layer)
    return batch_hessian(model.net, request.point[None, :], gates,
                         request.layer)[0]


def model_batch_hessian(model: HybridModel, mask: MaskSample, points: np.ndarray,
                        layer: int = 0) -> np.ndarray:
    """Batched Hessians of the interaction head, shape (N, D, D)."""
    gates = _gates_for(model, mask, layer)
    return batch_hessian(model.net, points, gates, layer)


def layer_values(model: HybridModel, x: np.ndarray, layer: int,
                 gates: list | None = None) -> np.ndarray:
    """Pre-gate node values of node-layer `layer` for each row of x.

    Defaults to the ungated (all-ones) network, which is the deterministic
    reference used to place evaluation points for hidden-layer detection.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    net = model.net
    if not (0 <= layer < net.depth):
        raise ValueError(f"layer {layer} out of range")
    if gates is None:
        gates = ones_gates(net)
    acts = net.activations()
    value = x
    for l in range(layer):
        a = value * gates[l]
        s = a @ net.weights[l] + net.biases[l]
        value = act_eval(acts[l], s)[0]
    return value


def fd_gradient_oracle(f, point: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function; validation only."""
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=float)
    grad = np.empty(point.shape)
    for i in range(point.size):
        e = np.zeros_like(point)
        e[i] = step
        grad[i] = (f(point + e) - f(point - e)) / (2.0 * step)
    return grad


def fd_hessian_oracle(f, point: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central second differences of a scalar function, symmetrized."""
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=float)
    dim = point.size
    hess = np.empty((dim, dim))
    f0 = f(point)
    for i in range(dim):
        ei = np.zeros(dim)
        ei[i] = step
        hess[i, i] = (f(point + ei) - 2.0 * f0 + f(point - ei)) / step ** 2
        for j in range(i + 1, dim):
            ej = np.zeros(dim)
            ej[j] = step
            hess[i, j] = (f(point + ei + ej) - f(point + ei - ej)
                          - f(point - ei + ej) + f(point - ei - ej)) / (4.0 * step ** 2)
            hess[j, i] = hess[i, j]
    return 0.5 * (hess + hess.T)


def dump_hessians_csv(hessians: np.ndarray, path) -> None:
    """Debug dump: one row per (point index, i, j, value)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["point", "i", "j", "value"])
        for n in range(hessians.shape[0]):
            for i in range(hessians.shape[1]):
                for j in range(hessians.shape[2]):
                    w.writerow([n, i, j, repr(float(hessians[n, i, j]))])
