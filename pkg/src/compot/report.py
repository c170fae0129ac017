"""Per-layer and model-wide quality / storage metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .baselines import SVDFactors
from .factorizer import FactorizationTrace
from .gram import CholeskyFactor, functional_loss
from .packing import FactorizedLayer

SCHEMA = "compot-report/1"


class ReportError(ValueError):
    pass


@dataclass
class LayerMetrics:
    name: str
    kind: str
    m: int
    n: int
    functional_loss: float
    relative_weight_error: float
    bits_dense: int
    bits_ideal: int
    bits_padded: int
    iterations: int = 0
    ridge_used: float = 0.0
    k: int | None = None
    s: int | None = None
    rank: int | None = None
    final_whitened_loss: float | None = None

    @property
    def cr_ideal(self) -> float:
        return 1 - self.bits_ideal / self.bits_dense

    @property
    def cr_padded(self) -> float:
        return 1 - self.bits_padded / self.bits_dense

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cr_ideal"] = self.cr_ideal
        d["cr_padded"] = self.cr_padded
        return d


def layer_metrics(
    W: np.ndarray,
    chol: CholeskyFactor,
    layer: FactorizedLayer | SVDFactors | None,
    name: str = "",
    trace: FactorizationTrace | None = None,
) -> LayerMetrics:
    """Metrics for one layer; ``layer=None`` means the weight was kept dense."""
    W = np.asarray(W, dtype=np.float64)
    m, n = W.shape
    dense_bits = 16 * m * n
    if layer is None:
        W_hat, kind, ideal, padded, extra = W, "dense", dense_bits, dense_bits, {}
    elif isinstance(layer, FactorizedLayer):
        rep = layer.report()
        W_hat = layer.reconstruct().astype(np.float64)
        kind = "compot"
        ideal = rep.bits_dictionary + rep.bits_values + rep.bits_mask
        padded = rep.bits_dictionary + rep.bits_values + rep.bits_mask_padded
        extra = {"k": layer.codes.k, "s": layer.codes.s}
    elif isinstance(layer, SVDFactors):
        W_hat = layer.reconstruct()
        kind = "svd"
        ideal = padded = 16 * layer.rank * (m + n)
        extra = {"rank": layer.rank}
    else:
        raise ReportError(f"unsupported layer type {type(layer).__name__}")
    if W_hat.shape != W.shape:
        raise ReportError(f"reconstruction shape {W_hat.shape} != weight shape {W.shape}")
    norm = float(np.linalg.norm(W))
    return LayerMetrics(
        name=name,
        kind=kind,
        m=m,
        n=n,
        functional_loss=functional_loss(chol, W, W_hat),
        relative_weight_error=float(np.linalg.norm(W - W_hat)) / norm if norm else 0.0,
        bits_dense=dense_bits,
        bits_ideal=ideal,
        bits_padded=padded,
        iterations=trace.iterations_run if trace else 0,
        ridge_used=chol.ridge_used,
        final_whitened_loss=trace.losses[-1] if trace and trace.losses else None,
        **extra,
    )


def global_report(plan_doc: dict | None, metrics: Sequence[LayerMetrics], config: dict | None = None) -> dict:
    if not metrics:
        raise ReportError("nothing compressed")
    dense = sum(m.bits_dense for m in metrics)
    ideal = sum(m.bits_ideal for m in metrics)
    padded = sum(m.bits_padded for m in metrics)
    losses = np.array([m.functional_loss for m in metrics])
    return {
        "schema": SCHEMA,
        "achieved_cr_ideal": 1 - ideal / dense,
        "achieved_cr_padded": 1 - padded / dense,
        "target_cr": plan_doc.get("target_cr") if plan_doc else None,
        "plan_achieved_cr": plan_doc.get("achieved_cr") if plan_doc else None,
        "bits": {"dense": dense, "ideal": ideal, "padded": padded},
        "dense_layers": [m.name for m in metrics if m.kind == "dense"],
        "loss_summary": {
            "total": float(losses.sum()),
            "min": float(losses.min()),
            "median": float(np.median(losses)),
            "max": float(losses.max()),
        },
        "layers": [m.to_dict() for m in metrics],
        "config": config or {},
    }


def dumps(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


_COLUMNS = ["name", "kind", "m", "n", "k", "s", "rank", "cr_ideal", "cr_padded",
            "functional_loss", "relative_weight_error", "iterations", "ridge_used"]


def format_table(report: dict) -> str:
    rows = [["layer", "kind", "shape", "k/s|r", "cr", "cr(pad)", "func.loss", "rel.err"]]
    for d in report["layers"]:
        if d["kind"] == "compot":
            ks = f"{d['k']}/{d['s']}"
        elif d["kind"] == "svd":
            ks = str(d["rank"])
        else:
            ks = "-"
        rows.append([
            d["name"], d["kind"], f"{d['m']}x{d['n']}", ks,
            f"{d['cr_ideal']:.4f}", f"{d['cr_padded']:.4f}",
            f"{d['functional_loss']:.4e}", f"{d['relative_weight_error']:.4f}",
        ])
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    lines.append("")
    lines.append(
        f"model CR: {report['achieved_cr_ideal']:.4f} ideal, "
        f"{report['achieved_cr_padded']:.4f} on disk"
        + (f" (target {report['target_cr']})" if report.get("target_cr") is not None else "")
    )
    if report["dense_layers"]:
        lines.append("dense: " + ", ".join(report["dense_layers"]))
    return "\n".join(lines) + "\n"


def to_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=_COLUMNS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for d in report["layers"]:
        writer.writerow(d)
    return buf.getvalue()
