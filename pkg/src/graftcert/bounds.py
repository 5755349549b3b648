"""Incomplete verification primitives: interval and backward linear bounds.

Everything here is a pure function of its inputs and safe to call
concurrently on shared networks.  Bounds are computed in ordinary 64-bit
floating point with no outward rounding, so soundness claims hold modulo
floating-point rounding (see README).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

from .errors import DomainError, StructuralError, UsageError
from .network import Network

__all__ = [
    "Box",
    "SplitAssignment",
    "LayerBounds",
    "StabilityTally",
    "NeuronStatus",
    "FREE",
    "FORCED_ACTIVE",
    "FORCED_INACTIVE",
    "input_region",
    "ibp",
    "compute_bounds",
    "crown_lower_bound",
    "interval_spec_lower",
    "classify_neurons",
    "tally_stability",
]

FREE = 0
FORCED_ACTIVE = 1
FORCED_INACTIVE = -1


class NeuronStatus(IntEnum):
    STABLE_ACTIVE = 0
    STABLE_INACTIVE = 1
    UNSTABLE = 2
    GRAFTED = 3


@dataclass(frozen=True)
class Box:
    """An axis-aligned input region ``lower <= x <= upper``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise StructuralError("box bounds must be equal-length vectors")
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise DomainError("box bounds must be finite")
        if np.any(lo > hi):
            raise DomainError("box has lower > upper")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x: np.ndarray, atol: float = 0.0) -> bool:
        return bool(np.all(x >= self.lower - atol) and np.all(x <= self.upper + atol))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)


def input_region(
    x0: np.ndarray, eps: float, clip: tuple[float, float] | None = None
) -> Box:
    """The ℓ∞ ball of radius ``eps`` around ``x0``, optionally intersected
    with a [low, high] data range."""
    x0 = np.asarray(x0, dtype=np.float64)
    if not np.isfinite(x0).all():
        raise DomainError("x0 must be finite")
    if eps < 0:
        raise DomainError(f"eps must be >= 0, got {eps}")
    lo = x0 - eps
    hi = x0 + eps
    if clip is not None:
        low, high = clip
        if low > high:
            raise DomainError(f"clip range has low > high: {clip}")
        lo = np.maximum(lo, low)
        hi = np.minimum(hi, high)
    return Box(lo, hi)


class SplitAssignment:
    """Per hidden neuron: Free, ForcedActive or ForcedInactive.

    Stored as one int8 array per hidden layer (0 free, +1 active,
    -1 inactive).  Grafted neurons are linear and never forced.
    """

    __slots__ = ("codes",)

    def __init__(self, codes: Sequence[np.ndarray]):
        self.codes = tuple(np.asarray(c, dtype=np.int8) for c in codes)

    @classmethod
    def free(cls, net: Network) -> "SplitAssignment":
        return cls([np.zeros(d, dtype=np.int8) for d in net.hidden_sizes])

    def force(self, net: Network, neuron_id: int, direction: int) -> "SplitAssignment":
        """Return a new assignment with one extra forced neuron."""
        if direction not in (FORCED_ACTIVE, FORCED_INACTIVE):
            raise UsageError(f"direction must be +1 or -1, got {direction}")
        h, j = net.neuron_location(neuron_id)
        if net.grafted[h][j]:
            raise UsageError(f"neuron {neuron_id} is grafted and cannot be split")
        if self.codes[h][j] != FREE:
            raise UsageError(f"neuron {neuron_id} is already forced")
        new = [c.copy() for c in self.codes]
        new[h][j] = direction
        return SplitAssignment(new)

    def num_forced(self) -> int:
        return int(sum(int(np.count_nonzero(c)) for c in self.codes))

    def flat(self) -> np.ndarray:
        if not self.codes:
            return np.zeros(0, dtype=np.int8)
        return np.concatenate(self.codes)


@dataclass
class LayerBounds:
    """Sound pre-activation bounds per affine layer (output layer included).

    ``feasible`` is False when a forced split contradicts the bounds; such
    a region is empty and any bound over it is vacuous.  ``grafted`` copies
    the network's per-layer graft masks so classification does not need the
    network itself.
    """

    lower: tuple[np.ndarray, ...]
    upper: tuple[np.ndarray, ...]
    grafted: tuple[np.ndarray, ...]
    feasible: bool = True

    def num_layers(self) -> int:
        return len(self.lower)


@dataclass
class StabilityTally:
    """Per-neuron stability counts over a dataset (flat hidden-neuron ids).

    For ReLU neurons the three counters sum to ``n_examples``; grafted
    neurons keep all-zero tallies.
    """

    times_unstable: np.ndarray
    times_active: np.ndarray
    times_inactive: np.ndarray
    n_examples: int


# ---------------------------------------------------------------------------
# interval propagation


def _graft_interval(slope, intercept, lo, hi):
    a_lo = slope * lo + intercept
    a_hi = slope * hi + intercept
    return np.minimum(a_lo, a_hi), np.maximum(a_lo, a_hi)


def ibp(net: Network, box: Box, split: SplitAssignment | None = None) -> LayerBounds:
    """Interval bound propagation with optional per-neuron split constraints.

    Affine layers use the weight-sign split; ReLU clamps at zero; grafted
    neurons map the interval through their line.  Forced neurons intersect
    the recorded pre-activation interval with their half-line and propagate
    the forced linear form.  An empty intersection flags the result
    infeasible instead of raising.
    """
    if box.dim != net.input_dim:
        raise StructuralError(
            f"box dim {box.dim} does not match network input {net.input_dim}"
        )
    if split is None:
        split = SplitAssignment.free(net)
    lo, hi = box.lower, box.upper
    lowers: list[np.ndarray] = []
    uppers: list[np.ndarray] = []
    feasible = True
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        wp = np.maximum(layer.weight, 0.0)
        wn = np.minimum(layer.weight, 0.0)
        zl = wp @ lo + wn @ hi + layer.bias
        zu = wp @ hi + wn @ lo + layer.bias
        if i < last:
            code = split.codes[i]
            if code.any():
                zu = np.where(code == FORCED_INACTIVE, np.minimum(zu, 0.0), zu)
                zl = np.where(code == FORCED_ACTIVE, np.maximum(zl, 0.0), zl)
                if np.any(zl > zu):
                    feasible = False
                    zl = np.minimum(zl, zu)
            lowers.append(zl)
            uppers.append(zu)
            g = net.grafted[i]
            po_lo = np.maximum(zl, 0.0)
            po_hi = np.maximum(zu, 0.0)
            if g.any():
                g_lo, g_hi = _graft_interval(net.slopes[i], net.intercepts[i], zl, zu)
                po_lo = np.where(g, g_lo, po_lo)
                po_hi = np.where(g, g_hi, po_hi)
            lo, hi = po_lo, po_hi
        else:
            lowers.append(zl)
            uppers.append(zu)
    return LayerBounds(tuple(lowers), tuple(uppers), net.grafted, feasible)


def _ibp_batch(net: Network, lo: np.ndarray, hi: np.ndarray):
    """IBP over a batch of boxes (n, d); no splits.  Returns per-layer
    (lower, upper) pre-activation arrays of shape (n, d_i)."""
    lowers, uppers = [], []
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        wp = np.maximum(layer.weight, 0.0)
        wn = np.minimum(layer.weight, 0.0)
        zl = lo @ wp.T + hi @ wn.T + layer.bias
        zu = hi @ wp.T + lo @ wn.T + layer.bias
        lowers.append(zl)
        uppers.append(zu)
        if i < last:
            g = net.grafted[i]
            po_lo = np.maximum(zl, 0.0)
            po_hi = np.maximum(zu, 0.0)
            if g.any():
                g_lo, g_hi = _graft_interval(net.slopes[i], net.intercepts[i], zl, zu)
                po_lo = np.where(g, g_lo, po_lo)
                po_hi = np.where(g, g_hi, po_hi)
            lo, hi = po_lo, po_hi
    return lowers, uppers


# ---------------------------------------------------------------------------
# backward (CROWN-style) bound propagation


def _relaxation_lines(net: Network, inter: LayerBounds, split: SplitAssignment):
    """Per hidden layer: (lower_slope, lower_icpt, upper_slope, upper_icpt).

    Stable-active neurons keep the identity line, stable-inactive the zero
    line, unstable ReLUs the secant upper line and a lower line through the
    origin with the same slope u/(u-l).  Grafted neurons use their exact
    line on both sides; forced neurons their forced linear form.  The
    degenerate interval l = u = 0 counts as stable-inactive.
    """
    lines = []
    for h in range(len(net.hidden_sizes)):
        l = inter.lower[h]
        u = inter.upper[h]
        code = split.codes[h]
        inactive = (u <= 0.0) | (code == FORCED_INACTIVE)
        active = ((l >= 0.0) | (code == FORCED_ACTIVE)) & ~inactive
        unstable = ~inactive & ~active
        ls = np.zeros_like(l)
        li = np.zeros_like(l)
        us = np.zeros_like(l)
        ui = np.zeros_like(l)
        ls[active] = 1.0
        us[active] = 1.0
        if unstable.any():
            d = np.where(unstable, u - l, 1.0)
            s = u / d
            ls[unstable] = s[unstable]
            us[unstable] = s[unstable]
            ui[unstable] = (-u * l / d)[unstable]
        g = net.grafted[h]
        if g.any():
            ls = np.where(g, net.slopes[h], ls)
            li = np.where(g, net.intercepts[h], li)
            us = np.where(g, net.slopes[h], us)
            ui = np.where(g, net.intercepts[h], ui)
        lines.append((ls, li, us, ui))
    return lines


def _backward(
    net: Network,
    lines,
    box: Box,
    C: np.ndarray,
    c0: np.ndarray,
    start: int,
    sense: int,
):
    """Propagate the linear functionals ``C @ z^(start) + c0`` back to the
    input and concretize over the box.  ``sense=-1`` gives sound lower
    bounds, ``sense=+1`` sound upper bounds.  Returns an array of len(C).
    """
    A = np.asarray(C, dtype=np.float64)
    const = np.asarray(c0, dtype=np.float64).copy()
    for i in range(start, -1, -1):
        layer = net.layers[i]
        const = const + A @ layer.bias
        A = A @ layer.weight
        if i > 0:
            ls, li, us, ui = lines[i - 1]
            pos = A > 0.0
            if sense < 0:
                # lower bound: positive coefficients take the lower line
                const = const + np.where(pos, A * li, A * ui).sum(axis=1)
                A = np.where(pos, A * ls, A * us)
            else:
                const = const + np.where(pos, A * ui, A * li).sum(axis=1)
                A = np.where(pos, A * us, A * ls)
    pos = A > 0.0
    if sense < 0:
        vals = np.where(pos, A * box.lower, A * box.upper).sum(axis=1)
    else:
        vals = np.where(pos, A * box.upper, A * box.lower).sum(axis=1)
    return vals + const


def interval_spec_lower(inter: LayerBounds, coeffs: np.ndarray, const: float = 0.0) -> float:
    """Lower bound of a linear functional on the logits, concretized on the
    final-layer interval bounds."""
    c = np.asarray(coeffs, dtype=np.float64)
    lo = inter.lower[-1]
    hi = inter.upper[-1]
    return float(np.where(c > 0.0, c * lo, c * hi).sum() + const)


def crown_lower_bound(
    net: Network,
    box: Box,
    split: SplitAssignment | None,
    inter: LayerBounds,
    coeffs: np.ndarray,
    const: float = 0.0,
) -> float:
    """Sound lower bound of ``coeffs @ logits + const`` over the
    (split-restricted) box.

    Runs backward substitution through per-neuron relaxation lines and
    takes the better of that and the plain interval bound, so the result
    never falls below the interval baseline.  Infeasible regions give +inf
    (vacuously verified).
    """
    if not inter.feasible:
        return float("inf")
    if split is None:
        split = SplitAssignment.free(net)
    c = np.asarray(coeffs, dtype=np.float64)
    if c.shape != (net.output_dim,):
        raise StructuralError(
            f"spec coefficients must have shape ({net.output_dim},), got {c.shape}"
        )
    lines = _relaxation_lines(net, inter, split)
    backward_val = _backward(
        net, lines, box, c[None, :], np.array([const]), len(net.layers) - 1, sense=-1
    )[0]
    return float(max(backward_val, interval_spec_lower(inter, c, const)))


def compute_bounds(
    net: Network,
    box: Box,
    split: SplitAssignment | None = None,
    method: str = "ibp",
) -> LayerBounds:
    """Intermediate pre-activation bounds, by plain IBP (default) or with a
    per-layer CROWN refinement pass (``method="crown"``).

    The refinement rewrites each hidden layer's bounds as the tighter of
    the IBP interval and the backward-propagated bound, reusing already
    refined earlier layers, then re-applies any forced-split intersections.
    """
    if method not in ("ibp", "crown"):
        raise UsageError(f"unknown bound method {method!r}")
    base = ibp(net, box, split)
    if method == "ibp" or not base.feasible:
        return base
    if split is None:
        split = SplitAssignment.free(net)
    lowers = [b.copy() for b in base.lower]
    uppers = [b.copy() for b in base.upper]
    feasible = True
    refined = LayerBounds(tuple(lowers), tuple(uppers), net.grafted, True)
    for i in range(1, len(net.layers)):
        lines = _relaxation_lines(net, refined, split)[:i]
        d = net.layers[i].out_dim
        C = np.eye(d)
        c0 = np.zeros(d)
        lo = _backward(net, lines, box, C, c0, i, sense=-1)
        hi = _backward(net, lines, box, C, c0, i, sense=+1)
        lo = np.maximum(lo, lowers[i])
        hi = np.minimum(hi, uppers[i])
        if i < len(net.layers) - 1:
            code = split.codes[i]
            if code.any():
                hi = np.where(code == FORCED_INACTIVE, np.minimum(hi, 0.0), hi)
                lo = np.where(code == FORCED_ACTIVE, np.maximum(lo, 0.0), lo)
        if np.any(lo > hi):
            feasible = False
            lo = np.minimum(lo, hi)
        lowers[i] = lo
        uppers[i] = hi
        refined = LayerBounds(tuple(lowers), tuple(uppers), net.grafted, feasible)
    return refined


def intersect_bounds(a: LayerBounds, b: LayerBounds) -> LayerBounds:
    """Elementwise intersection of two sound bound sets for nested regions."""
    lowers = tuple(np.maximum(x, y) for x, y in zip(a.lower, b.lower))
    uppers = tuple(np.minimum(x, y) for x, y in zip(a.upper, b.upper))
    feasible = a.feasible and b.feasible
    if feasible and any(np.any(l > u) for l, u in zip(lowers, uppers)):
        feasible = False
        lowers = tuple(np.minimum(l, u) for l, u in zip(lowers, uppers))
    return LayerBounds(lowers, uppers, a.grafted, feasible)


# ---------------------------------------------------------------------------
# neuron classification and stability tallies


def classify_neurons(inter: LayerBounds, split: SplitAssignment) -> np.ndarray:
    """Status of every hidden neuron (flat ids) under the given bounds.

    Forced neurons adopt their forced stable status regardless of the
    interval; free ReLUs classify by sign of [l, u] with the degenerate
    l = u = 0 interval counting as stable-inactive.
    """
    out = []
    for h in range(len(inter.grafted)):
        l = inter.lower[h]
        u = inter.upper[h]
        code = split.codes[h]
        status = np.full(l.shape, NeuronStatus.UNSTABLE, dtype=np.int8)
        status[(u <= 0.0)] = NeuronStatus.STABLE_INACTIVE
        status[(l >= 0.0) & (u > 0.0)] = NeuronStatus.STABLE_ACTIVE
        status[code == FORCED_INACTIVE] = NeuronStatus.STABLE_INACTIVE
        status[code == FORCED_ACTIVE] = NeuronStatus.STABLE_ACTIVE
        status[inter.grafted[h]] = NeuronStatus.GRAFTED
        out.append(status)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int8)


def tally_stability(
    net: Network,
    features: np.ndarray,
    eps: float,
    clip: tuple[float, float] | None = None,
    batch_size: int = 512,
) -> StabilityTally:
    """Count, per hidden neuron, on how many examples it is unstable,
    stably active, or stably inactive under the eps-ball of each example.

    Grafted neurons keep all-zero tallies.
    """
    X = np.asarray(getattr(features, "features", features), dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise UsageError("tally_stability needs a non-empty (n, d) array")
    if eps < 0:
        raise DomainError("eps must be >= 0")
    n = X.shape[0]
    N = net.num_hidden
    unstable = np.zeros(N, dtype=np.int64)
    active = np.zeros(N, dtype=np.int64)
    inactive = np.zeros(N, dtype=np.int64)
    grafted_flat = net.grafted_flat()
    offs = net.layer_offsets()
    for s in range(0, n, batch_size):
        xb = X[s : s + batch_size]
        lo = xb - eps
        hi = xb + eps
        if clip is not None:
            lo = np.maximum(lo, clip[0])
            hi = np.minimum(hi, clip[1])
        lowers, uppers = _ibp_batch(net, lo, hi)
        for h, off in enumerate(offs):
            l = lowers[h]
            u = uppers[h]
            d = l.shape[1]
            ina = u <= 0.0
            act = (l >= 0.0) & ~ina
            uns = ~ina & ~act
            sl = slice(off, off + d)
            inactive[sl] += ina.sum(axis=0)
            active[sl] += act.sum(axis=0)
            unstable[sl] += uns.sum(axis=0)
    unstable[grafted_flat] = 0
    active[grafted_flat] = 0
    inactive[grafted_flat] = 0
    return StabilityTally(unstable, active, inactive, n)
