"""One-shot global compression-ratio allocation from pooled normalized spectra.

Each matrix is divided by its Frobenius norm, its singular values join a
global pool, and the smallest pooled values are truncated until the
SVD-storage parameter count ``sum r_i (m_i + n_i)`` (plus dense matrices)
meets the global target. Per-matrix guards bound each matrix's ratio and
matrices for which a factorization cannot save memory stay dense.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .factorizer import BudgetTooTight, as_fraction, solve_ks

FACTORIZE = "FACTORIZE"
DENSE = "DENSE"


class AllocationError(ValueError):
    pass


class InfeasibleBudget(AllocationError):
    pass


@dataclass
class AllocatorConfig:
    target_cr: float
    cr_min: float = 0.0
    cr_max: float = 0.9
    grouping: str = "global"

    def __post_init__(self):
        if not 0 < as_fraction(self.target_cr) < 1:
            raise AllocationError("target_cr must lie in (0, 1)")
        if not 0 <= as_fraction(self.cr_min) <= as_fraction(self.cr_max) <= 1:
            raise AllocationError("need 0 <= cr_min <= cr_max <= 1")
        if self.grouping not in ("global", "per-type", "tags"):
            raise AllocationError(f"unknown grouping {self.grouping!r}")


@dataclass
class Spectrum:
    name: str
    m: int
    n: int
    sigma: np.ndarray

    @property
    def L(self) -> int:
        return min(self.m, self.n)


def compute_spectra(
    weights: Iterable[np.ndarray], names: Sequence[str] | None = None
) -> list[Spectrum]:
    out = []
    for i, W in enumerate(weights):
        W = np.asarray(getattr(W, "data", W), dtype=np.float64)
        norm = np.linalg.norm(W)
        if not norm > 0:
            raise AllocationError("cannot normalize a zero matrix")
        sigma = np.linalg.svd(W / norm, compute_uv=False)
        name = names[i] if names is not None else f"matrix_{i}"
        out.append(Spectrum(name, W.shape[0], W.shape[1], np.sort(sigma)[::-1].copy()))
    return out


@dataclass(frozen=True)
class GuardBounds:
    r_min: int
    r_max: int
    t_min: int
    t_max: int
    dense: bool


def guard_bounds(spec: Spectrum, cfg: AllocatorConfig) -> GuardBounds:
    """Retained-rank interval implied by the cr guards under the r(m+n) storage model.

    cr_min = 0 disables the lower guard (r_max = L); matrices that drift past
    break-even are then caught by the DENSE reclassification in ``allocate``.
    """
    m, n, L = spec.m, spec.n, spec.L
    breakeven = Fraction(m * n, m + n)
    cr_min, cr_max = as_fraction(cfg.cr_min), as_fraction(cfg.cr_max)
    r_max = L if cr_min == 0 else min(L, math.floor((1 - cr_min) * breakeven))
    r_min = min(L, max(0, math.ceil((1 - cr_max) * breakeven)))
    dense = r_min * (m + n) >= m * n or r_min > r_max
    return GuardBounds(r_min, r_max, L - r_max, L - r_min, dense)


@dataclass
class PlanEntry:
    name: str
    m: int
    n: int
    status: str
    r: int
    t: int
    cr: Fraction
    k: int | None = None
    s: int | None = None
    group: str = "global"

    @property
    def params(self) -> int:
        return self.m * self.n if self.status == DENSE else self.r * (self.m + self.n)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "status": self.status,
            "m": self.m,
            "n": self.n,
            "r": self.r,
            "t": self.t,
            "cr": float(self.cr),
            "k": self.k,
            "s": self.s,
            "group": self.group,
        }


@dataclass
class AllocationPlan:
    entries: list[PlanEntry]
    target_cr: float
    K: int
    P0: int
    P_tgt: Fraction
    config: dict = field(default_factory=dict)
    mode: str = "dynamic"

    @property
    def achieved_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def achieved_cr(self) -> float:
        return 1 - self.achieved_params / self.P0

    def __getitem__(self, name: str) -> PlanEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "target_cr": self.target_cr,
            "mode": self.mode,
            "K": self.K,
            "P0": self.P0,
            "P_tgt": float(self.P_tgt),
            "achieved_params": self.achieved_params,
            "achieved_cr": self.achieved_cr,
            "matrices": [e.to_dict() for e in self.entries],
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AllocationPlan":
        entries = [
            PlanEntry(
                d["name"], d["m"], d["n"], d["status"], d["r"], d["t"],
                as_fraction(d["cr"]), d.get("k"), d.get("s"), d.get("group", "global"),
            )
            for d in doc["matrices"]
        ]
        return cls(
            entries, doc["target_cr"], doc["K"], doc["P0"], as_fraction(doc["P_tgt"]),
            doc.get("config", {}), doc.get("mode", "dynamic"),
        )


def _svd_cr(r: int, m: int, n: int) -> Fraction:
    return 1 - Fraction(r * (m + n), m * n)


def _pooled_truncations(specs, bounds, active, K):
    """Mandatory t_min per matrix, then the K - sum(t_min) smallest optional values."""
    t = {i: bounds[i].t_min for i in active}
    extra = K - sum(t.values())
    if extra <= 0:
        return t
    pool = []
    for i in active:
        sp, b = specs[i], bounds[i]
        # optional truncations for matrix i are indices r_min .. r_max-1, taken from the tail
        for idx in range(b.r_max - 1, b.r_min - 1, -1):
            pool.append((float(sp.sigma[idx]), -sp.L, i, -idx))
    pool.sort()
    for _, _, i, _ in pool[:extra]:
        t[i] += 1
    return t


def _params(specs, active, dense, t):
    total = sum(specs[i].m * specs[i].n for i in dense)
    total += sum((specs[i].L - t[i]) * (specs[i].m + specs[i].n) for i in active)
    return total


def allocate(
    specs: Sequence[Spectrum],
    cfg: AllocatorConfig,
    forced_dense: Iterable[int] = (),
    P_tgt: Fraction | None = None,
) -> AllocationPlan:
    if not specs:
        raise AllocationError("nothing to allocate")
    bounds = [guard_bounds(sp, cfg) for sp in specs]
    dense = {i for i, b in enumerate(bounds) if b.dense} | set(forced_dense)
    P0 = sum(sp.m * sp.n for sp in specs)
    if P_tgt is None:
        P_tgt = (1 - as_fraction(cfg.target_cr)) * P0

    while True:
        active = [i for i in range(len(specs)) if i not in dense]
        lo = sum(bounds[i].t_min for i in active)
        hi = sum(bounds[i].t_max for i in active)
        t_hi = _pooled_truncations(specs, bounds, active, hi)
        if _params(specs, active, dense, t_hi) > P_tgt:
            raise InfeasibleBudget("target CR unreachable under guards")
        # P(K) is non-increasing in K: bisect for the smallest feasible K
        while lo < hi:
            mid = (lo + hi) // 2
            t_mid = _pooled_truncations(specs, bounds, active, mid)
            if _params(specs, active, dense, t_mid) <= P_tgt:
                hi = mid
            else:
                lo = mid + 1
        K = lo
        t = _pooled_truncations(specs, bounds, active, K)
        bad = {
            i for i in active
            if (specs[i].L - t[i]) * (specs[i].m + specs[i].n) >= specs[i].m * specs[i].n
        }
        if not bad:
            break
        dense |= bad

    entries = []
    for i, sp in enumerate(specs):
        if i in dense:
            entries.append(PlanEntry(sp.name, sp.m, sp.n, DENSE, sp.L, 0, Fraction(0)))
        else:
            r = sp.L - t[i]
            entries.append(PlanEntry(sp.name, sp.m, sp.n, FACTORIZE, r, t[i], _svd_cr(r, sp.m, sp.n)))
    return AllocationPlan(
        entries, float(cfg.target_cr), K, P0, P_tgt, config=asdict(cfg), mode="dynamic"
    )


def truncated_sigma_sum(plan: AllocationPlan, specs: Sequence[Spectrum]) -> float:
    total = 0.0
    for e, sp in zip(plan.entries, specs):
        if e.status == FACTORIZE:
            total += float(np.sum(sp.sigma[e.r:]))
    return total


def type_of(name: str) -> str:
    """Projection type from a dotted layer name: 'model.layers.3.mlp.up_proj' -> 'mlp.up_proj'."""
    parts = name.split(".")
    for j, part in enumerate(parts):
        if part.isdigit():
            rest = ".".join(parts[j + 1:])
            if rest:
                return rest
    return parts[-1]


def group_keys(specs: Sequence[Spectrum], grouping: str, tags: Sequence[str | None] | None = None):
    if grouping == "global":
        return ["global"] * len(specs)
    if grouping == "per-type":
        return [type_of(sp.name) for sp in specs]
    if grouping == "tags":
        tags = tags or [None] * len(specs)
        return [t if t is not None else "untagged" for t in tags]
    raise AllocationError(f"unknown grouping {grouping!r}")


def allocate_grouped(
    specs: Sequence[Spectrum],
    cfg: AllocatorConfig,
    tags: Sequence[str | None] | None = None,
    forced_dense: Iterable[int] = (),
) -> AllocationPlan:
    """Run ``allocate`` independently per group, each with (1 - cr) of its own parameter count."""
    keys = group_keys(specs, cfg.grouping, tags)
    forced = set(forced_dense)
    entries: list[PlanEntry | None] = [None] * len(specs)
    K = 0
    for key in dict.fromkeys(keys):
        idx = [i for i, k in enumerate(keys) if k == key]
        sub = [specs[i] for i in idx]
        sub_forced = [j for j, i in enumerate(idx) if i in forced]
        plan = allocate(sub, cfg, forced_dense=sub_forced)
        K += plan.K
        for j, i in enumerate(idx):
            plan.entries[j].group = key
            entries[i] = plan.entries[j]
    P0 = sum(sp.m * sp.n for sp in specs)
    return AllocationPlan(
        entries, float(cfg.target_cr), K, P0, (1 - as_fraction(cfg.target_cr)) * P0,
        config=asdict(cfg), mode="dynamic",
    )


def static_plan(specs: Sequence[Spectrum], target_cr) -> AllocationPlan:
    """Uniform ratio for every matrix (dynamic allocation disabled)."""
    cr = as_fraction(target_cr)
    entries = []
    for sp in specs:
        r = math.floor((1 - cr) * Fraction(sp.m * sp.n, sp.m + sp.n))
        entries.append(PlanEntry(sp.name, sp.m, sp.n, FACTORIZE, r, sp.L - r, cr))
    P0 = sum(sp.m * sp.n for sp in specs)
    return AllocationPlan(
        entries, float(cr), sum(e.t for e in entries), P0, (1 - cr) * P0,
        config={"target_cr": float(cr)}, mode="static",
    )


def plan_to_layer_budgets(
    plan: AllocationPlan,
    ks_ratio,
    specs: Sequence[Spectrum] | None = None,
    cfg: AllocatorConfig | None = None,
    tags: Sequence[str | None] | None = None,
) -> AllocationPlan:
    """Attach (k, s) to every FACTORIZE entry.

    A matrix whose ratio cannot be met by any s >= 1 becomes DENSE; when the
    spectra and config are supplied the allocation is re-run once with those
    matrices forced dense so the global budget still holds.
    """
    infeasible = []
    for i, e in enumerate(plan.entries):
        if e.status != FACTORIZE:
            continue
        try:
            e.k, e.s = solve_ks(e.m, e.n, e.cr, ks_ratio)
        except BudgetTooTight:
            infeasible.append(i)
    if not infeasible:
        return plan

    if plan.mode == "static" or specs is None or cfg is None:
        for i in infeasible:
            e = plan.entries[i]
            e.status, e.r, e.t, e.cr, e.k, e.s = DENSE, min(e.m, e.n), 0, Fraction(0), None, None
        return plan

    replanned = allocate_grouped(specs, cfg, tags, forced_dense=infeasible)
    for e in replanned.entries:
        if e.status != FACTORIZE:
            continue
        try:
            e.k, e.s = solve_ks(e.m, e.n, e.cr, ks_ratio)
        except BudgetTooTight:
            raise InfeasibleBudget(
                f"{e.name}: no (k, s) meets cr {float(e.cr):.4f} after reclassification"
            ) from None
    return replanned
