"""End-to-end orchestration over containers: grams, allocation, compression, reconstruction."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from fractions import Fraction
from multiprocessing import get_context
from pathlib import Path
from typing import Any

import numpy as np

from . import report as reportlib
from .allocator import (
    DENSE,
    FACTORIZE,
    AllocationPlan,
    AllocatorConfig,
    PlanEntry,
    allocate_grouped,
    compute_spectra,
    plan_to_layer_budgets,
    static_plan,
    type_of,
)
from .baselines import SVDFactors, truncated_whitened_svd, v2_cr_allocation
from .factorizer import FactorizerConfig, as_fraction, factorize
from .gram import CholeskyFactor, GramError, GramState, accumulate, cholesky, dewhiten_dictionary, whiten
from .packing import FactorizedLayer
from .tensorio import (
    OUT_IN,
    ContainerError,
    Manifest,
    TensorContainer,
    load_weight,
    read_container,
    write_container,
)

log = logging.getLogger(__name__)

RUN_KEY = "__run__"


@dataclass
class RunConfig:
    """Resolved run configuration; field names match the CLI flags."""

    cr: float | None = None
    static_cr: float | None = None
    ks_ratio: float = 2.0
    iters: int = 20
    init: str = "svd"
    seed: int = 0
    early_stop_tol: float | None = None
    cr_min: float = 0.0
    cr_max: float = 0.9
    grouping: str = "global"
    baseline: str = "none"
    jobs: int = 1

    def factorizer(self) -> FactorizerConfig:
        return FactorizerConfig(
            ks_ratio=self.ks_ratio,
            max_iterations=self.iters,
            init=self.init,
            seed=self.seed,
            early_stop_tol=self.early_stop_tol,
        )

    def allocator(self) -> AllocatorConfig:
        return AllocatorConfig(self.cr, self.cr_min, self.cr_max, self.grouping)

    def to_dict(self) -> dict[str, Any]:
        # jobs is scheduling only; leaving it out keeps outputs identical across worker counts
        d = asdict(self)
        del d["jobs"]
        return d


# -- gram ---------------------------------------------------------------------


def chunk_names(acts: TensorContainer, layer: str) -> list[str]:
    prefix = f"{layer}/acts/"
    found = []
    for key in acts.keys():
        if key.startswith(prefix) and key[len(prefix):].isdigit():
            found.append((int(key[len(prefix):]), key))
    return [key for _, key in sorted(found)]


def build_grams(manifest: Manifest, acts: TensorContainer) -> tuple[dict[str, np.ndarray], dict[str, dict]]:
    grams, info = {}, {}
    for layer in manifest.layers:
        if layer.gram is None:
            continue
        names = chunk_names(acts, layer.weight)
        if not names:
            raise ContainerError(f"no activation chunks for layer {layer.weight!r}")
        state = None
        for key in names:
            chunk = acts.get(key)
            if chunk.ndim != 2:
                raise GramError(f"{key} is not a 2-D activation block")
            state = state or GramState.empty(chunk.shape[1])
            state = accumulate(state, chunk)
        diag = np.diag(state.G)
        eig = np.linalg.eigvalsh(state.G)
        cond = float(eig[-1] / eig[0]) if eig[0] > 0 else float("inf")
        grams[layer.gram] = state.G
        info[layer.gram] = {"count": state.count, "dim": state.dim, "condition": cond,
                            "mean_diag": float(diag.mean())}
    return grams, info


# -- allocate -----------------------------------------------------------------


def _load_weights(manifest: Manifest, weights: TensorContainer):
    return [load_weight(weights, l.weight, l.orientation) for l in manifest.layers]


def _chol_for(layer, grams: TensorContainer | None) -> CholeskyFactor | None:
    if layer.gram is None:
        return None
    if grams is None:
        raise ContainerError(f"layer {layer.weight!r} needs gram {layer.gram!r} but no gram container given")
    return cholesky(grams.get(layer.gram))


def _given_ratio_plan(specs, crs, target, mode) -> AllocationPlan:
    entries = []
    for sp, cr in zip(specs, crs):
        cr = as_fraction(cr)
        r = max(0, int((1 - cr) * Fraction(sp.m * sp.n, sp.m + sp.n)))
        entries.append(PlanEntry(sp.name, sp.m, sp.n, FACTORIZE, min(r, sp.L), sp.L - min(r, sp.L), cr))
    P0 = sum(sp.m * sp.n for sp in specs)
    return AllocationPlan(entries, float(target), sum(e.t for e in entries), P0,
                          (1 - as_fraction(target)) * P0, mode=mode)


def make_plan(
    manifest: Manifest,
    weights: TensorContainer,
    cfg: RunConfig,
    grams: TensorContainer | None = None,
) -> AllocationPlan:
    mats = _load_weights(manifest, weights)
    names = [l.weight for l in manifest.layers]
    tags = [l.group for l in manifest.layers]
    specs = compute_spectra([w.data for w in mats], names)

    if cfg.static_cr is not None:
        plan = static_plan(specs, cfg.static_cr)
        plan = plan_to_layer_budgets(plan, cfg.ks_ratio)
    elif cfg.baseline == "v2-alloc":
        if cfg.cr is None:
            raise ContainerError("--cr is required for v2-alloc")
        chols = {}
        for layer, w in zip(manifest.layers, mats):
            chols[layer.weight] = _chol_for(layer, grams) or CholeskyFactor.identity(w.m)
        groups = {l.weight: (l.group or type_of(l.weight)) for l in manifest.layers}
        ratios = v2_cr_allocation({w.name: w.data for w in mats}, chols, cfg.cr, groups)
        plan = _given_ratio_plan(specs, [ratios[n] for n in names], cfg.cr, "v2-alloc")
        for e in plan.entries:
            e.group = groups[e.name]
        plan = plan_to_layer_budgets(plan, cfg.ks_ratio)
    else:
        if cfg.cr is None:
            raise ContainerError("either --cr or --static-cr is required")
        acfg = cfg.allocator()
        plan = allocate_grouped(specs, acfg, tags)
        plan = plan_to_layer_budgets(plan, cfg.ks_ratio, specs, acfg, tags)
    plan.config = cfg.to_dict()
    return plan


def read_plan(path) -> AllocationPlan:
    with open(path, encoding="utf-8") as fh:
        return AllocationPlan.from_dict(json.load(fh))


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- compress -----------------------------------------------------------------


def _compress_one(task: dict) -> dict:
    """Worker: factorize one layer. Pure function of its task dict."""
    name, W, G = task["name"], task["W"], task["G"]
    chol = cholesky(G) if G is not None else CholeskyFactor.identity(W.shape[0])
    if task["baseline"] == "svd":
        f = truncated_whitened_svd(W, chol, task["rank"])
        left = f.left.astype(np.float16)
        right = f.right.astype(np.float16)
        stored = SVDFactors(left.astype(np.float64), right.astype(np.float64), f.whitened_residual)
        metrics = reportlib.layer_metrics(W, chol, stored, name)
        sidecar = {"kind": "svd", "m": W.shape[0], "n": W.shape[1], "rank": task["rank"]}
        tensors = {f"{name}/U": left, f"{name}/V": right}
        return {"name": name, "tensors": tensors, "sidecar": sidecar, "metrics": metrics}

    fcfg: FactorizerConfig = task["fcfg"]
    Wt = whiten(chol, W)
    D, codes, trace = factorize(Wt, fcfg, task["k"], task["s"])
    A = dewhiten_dictionary(chol, D)
    layer = FactorizedLayer.build(name, A, codes)
    metrics = reportlib.layer_metrics(W, chol, layer, name, trace)
    return {"name": name, "tensors": layer.to_tensors(), "sidecar": layer.sidecar(), "metrics": metrics}


def compress(
    manifest: Manifest,
    weights: TensorContainer,
    grams: TensorContainer | None,
    plan: AllocationPlan,
    cfg: RunConfig,
    out_path,
    report_path=None,
) -> dict:
    out_path = Path(out_path)
    report_path = Path(report_path) if report_path else out_path.with_name(out_path.name + ".report.json")
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    tasks, metrics_by_name = [], {}
    fcfg = cfg.factorizer()

    for layer in manifest.layers:
        entry = plan[layer.weight]
        w = load_weight(weights, layer.weight, layer.orientation)
        base = {"orientation": layer.orientation, "weight": layer.weight}
        rank = entry.r if cfg.baseline == "svd" else None
        if entry.status == DENSE or (cfg.baseline == "svd" and not rank):
            tensors[f"{layer.weight}/W"] = weights.get(layer.weight)
            meta[layer.weight] = json.dumps({**base, "kind": "dense"}, sort_keys=True)
            metrics_by_name[layer.weight] = reportlib.layer_metrics(
                w.data, CholeskyFactor.identity(w.m), None, layer.weight
            )
            continue
        G = grams.get(layer.gram) if (layer.gram is not None and grams is not None) else None
        if layer.gram is not None and grams is None:
            raise ContainerError(f"layer {layer.weight!r} needs gram {layer.gram!r}")
        tasks.append({
            "name": layer.weight, "W": w.data, "G": G, "k": entry.k, "s": entry.s,
            "rank": rank, "baseline": cfg.baseline, "fcfg": fcfg, "base": base,
        })

    if cfg.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs, mp_context=get_context("spawn")) as pool:
            results = list(pool.map(_compress_one, tasks))
    else:
        results = [_compress_one(t) for t in tasks]

    for task, res in zip(tasks, results):
        tensors.update(res["tensors"])
        meta[res["name"]] = json.dumps({**task["base"], **res["sidecar"]}, sort_keys=True)
        metrics_by_name[res["name"]] = res["metrics"]

    meta[RUN_KEY] = json.dumps({"config": cfg.to_dict(), "layers": [l.weight for l in manifest.layers]},
                               sort_keys=True)
    metrics = [metrics_by_name[l.weight] for l in manifest.layers]
    doc = reportlib.global_report(plan.to_dict(), metrics, cfg.to_dict())
    try:
        write_container(out_path, tensors, meta)
        report_path.write_text(reportlib.dumps(doc), encoding="utf-8")
    except BaseException:
        for p in (out_path, report_path):
            if p.exists():
                p.unlink()
        raise
    return doc


# -- reconstruct --------------------------------------------------------------


def artifact_layers(art: TensorContainer) -> list[tuple[str, dict]]:
    try:
        order = json.loads(art.metadata[RUN_KEY])["layers"]
    except KeyError:
        raise ContainerError("artifact container has no run metadata") from None
    return [(name, json.loads(art.metadata[name])) for name in order]


def reconstruct_layer(art: TensorContainer, name: str, meta: dict) -> np.ndarray:
    """Dense weight in its stored orientation."""
    kind = meta["kind"]
    if kind == "dense":
        return art.get(f"{name}/W")
    if kind == "compot":
        W_hat = FactorizedLayer.from_tensors(name, meta, art.get).reconstruct()
    elif kind == "svd":
        U = art.get(f"{name}/U").astype(np.float32)
        V = art.get(f"{name}/V").astype(np.float32)
        W_hat = U @ V
    else:
        raise ContainerError(f"unknown layer kind {kind!r}")
    if meta.get("orientation") == OUT_IN:
        W_hat = np.ascontiguousarray(W_hat.T)
    return W_hat.astype(np.float32)


def reconstruct(art_path, out_path) -> list[str]:
    art = read_container(art_path)
    out = {}
    for name, meta in artifact_layers(art):
        out[name] = reconstruct_layer(art, name, meta)
    write_container(out_path, out)
    return list(out)


def measure_artifacts(art: TensorContainer) -> dict[str, int]:
    """On-disk payload bits per layer, read from the container header."""
    bits = {}
    for name, meta in artifact_layers(art):
        prefix = f"{name}/"
        bits[name] = 8 * sum(info.nbytes for key, info in art.entries.items() if key.startswith(prefix))
    return bits


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
