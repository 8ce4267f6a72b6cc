"""Compound depth/width scaling and the stacking search-space enumerator.

Scaling grows the composite depth D = 3*L1 + L3 by alpha**phi and the
stage-1 width C1 by beta**phi, under the coupling constraint
``alpha * beta**1.99 ~= 2``.  The exponent 1.99 makes one unit of phi
roughly double the parameter budget: at fixed depth, parameters grow as
width**1.99 for this family, so doubling the width alone consumes a full
doubling.

Continuous targets are snapped to legal stacks: C1 to a multiple of the
group dimension, the depth to the nearest representable 3*L1 + L3 with L1
tracking its own scaled value.  Published variants stay canonical; the
generator never overwrites the registry.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .model import StackConfig, count_params, validate_stack

CONSTRAINT_EXPONENT = 1.99
CONSTRAINT_TOLERANCE = 0.05

# Width grid note: (80, 16, 5) under the alternative width grid
# (48, 64, 80) cannot reach the 30M budget even at L3 = L1 (its minimum
# model is ~32.3M), so the enumerator uses the width grid under which
# every combination can satisfy the budget constraint.
SEARCH_C1 = (16, 32, 64)
SEARCH_L1 = (1, 2, 3, 4, 5)
SEARCH_CPRIME = (16, 32)
SEARCH_BUDGET = 30_000_000
SEARCH_SLACK = 0.05


def check_constraint(alpha: float, beta: float) -> float:
    """Residual ``alpha * beta**1.99 - 2`` of the coupling constraint."""
    if alpha < 1.0 or beta < 1.0:
        raise ConfigError(f"scaling factors must be >= 1, got alpha={alpha}, beta={beta}")
    return alpha * beta**CONSTRAINT_EXPONENT - 2.0


@dataclass(frozen=True)
class ScaleFactors:
    alpha: float
    beta: float
    phi: float

    @property
    def residual(self) -> float:
        return check_constraint(self.alpha, self.beta)


@dataclass(frozen=True)
class ScaledConfig:
    origin: StackConfig
    factors: ScaleFactors
    depth_cont: float
    c1_cont: float
    stack: StackConfig
    c1_delta: float  # snapped minus continuous
    depth_delta: float

    def report(self) -> str:
        s = self.stack
        return (
            f"continuous depth {self.depth_cont:.4f} width {self.c1_cont:.4f} -> "
            f"snapped (C1={s.c1}, C'={s.cprime}, L1={s.l1}, L3={s.l3}), "
            f"deltas depth {self.depth_delta:+.4f} width {self.c1_delta:+.4f}"
        )


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def _round_half_down(x: float) -> int:
    return math.ceil(x - 0.5)


def snap_to_multiple(value: float, base: int) -> int:
    """Nearest positive multiple of ``base``; exact ties round up."""
    lo = max(base, math.floor(value / base) * base)
    hi = lo + base
    return lo if value - lo < hi - value else hi


def scale_config(origin: StackConfig, f: ScaleFactors, strict: bool = True) -> ScaledConfig:
    """Scale an origin stack by the composite factor phi and snap.

    In strict mode the coupling residual must stay within
    ``CONSTRAINT_TOLERANCE``; the raised error carries the residual.
    """
    violations = validate_stack(origin)
    if violations:
        raise ConfigError("invalid origin stack: " + "; ".join(violations))
    residual = f.residual
    if strict and abs(residual) > CONSTRAINT_TOLERANCE:
        raise ConfigError(
            f"scaling constraint violated: |alpha*beta^{CONSTRAINT_EXPONENT} - 2| = "
            f"{abs(residual):.4f} > {CONSTRAINT_TOLERANCE}"
        )
    growth_d = f.alpha**f.phi
    growth_w = f.beta**f.phi
    depth_cont = growth_d * origin.depth
    c1_cont = growth_w * origin.c1
    c1_snap = snap_to_multiple(c1_cont, origin.cprime)
    depth_snap = max(4, _round_half_up(depth_cont))
    # L1 follows its own scaled value; exact ties prefer the smaller L1.
    l1_snap = _round_half_down(growth_d * origin.l1)
    l1_snap = min(max(1, l1_snap), depth_snap // 4)
    l3_snap = depth_snap - 3 * l1_snap
    stack = StackConfig(c1_snap, origin.cprime, l1_snap, l3_snap)
    leftover = validate_stack(stack)
    if leftover:
        raise ConfigError("snapped stack is invalid: " + "; ".join(leftover))
    return ScaledConfig(
        origin=origin,
        factors=f,
        depth_cont=depth_cont,
        c1_cont=c1_cont,
        stack=stack,
        c1_delta=c1_snap - c1_cont,
        depth_delta=depth_snap - depth_cont,
    )


# ---------------------------------------------------------------------------
# search-space enumeration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SearchEntry:
    stack: StackConfig
    params: int


def enumerate_search_space(
    budget: int = SEARCH_BUDGET, slack: float = SEARCH_SLACK
) -> list[SearchEntry]:
    """All 30 grid combinations of (C1, C', L1), each completed with the
    largest L3 >= L1 that keeps the closed-form count within the budget
    (floor L3 = L1 when even the minimum overshoots).

    Grid widths that are not multiples of the group dimension snap to the
    closest legal width below, clamped up to one full group, so every
    emitted stack validates.
    """
    limit = budget * (1.0 + slack)
    entries = []
    for c1 in SEARCH_C1:
        for cprime in SEARCH_CPRIME:
            for l1 in SEARCH_L1:
                c1_eff = c1 if c1 % cprime == 0 else max(cprime, (c1 // cprime) * cprime)
                l3 = l1
                params = count_params(StackConfig(c1_eff, cprime, l1, l3)).closed_form_total
                while True:
                    nxt = count_params(
                        StackConfig(c1_eff, cprime, l1, l3 + 1)
                    ).closed_form_total
                    if nxt > limit:
                        break
                    l3 += 1
                    params = nxt
                stack = StackConfig(c1_eff, cprime, l1, l3)
                leftover = validate_stack(stack)
                if leftover:
                    raise ConfigError(
                        f"enumerated stack invalid for grid ({c1},{cprime},{l1}): "
                        + "; ".join(leftover)
                    )
                entries.append(SearchEntry(stack=stack, params=params))
    return entries


def write_enumeration_csv(entries: list[SearchEntry], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["c1", "cprime", "l1", "l3", "params"])
        for e in entries:
            writer.writerow([e.stack.c1, e.stack.cprime, e.stack.l1, e.stack.l3, e.params])
