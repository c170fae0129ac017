"""Shared test constructions."""

import json
import math

import numpy as np

from compot.tensorio import write_container


def random_orthonormal(rng, m, k):
    Q, R = np.linalg.qr(rng.standard_normal((m, k)))
    return Q * np.sign(np.diag(R))


def union_of_subspaces(rng, m, s, d, n):
    """Columns drawn from d mutually orthogonal s-dim subspaces of R^m (round robin)."""
    Q = random_orthonormal(rng, m, d * s)
    W = np.zeros((m, n))
    for j in range(n):
        b = j % d
        W[:, j] = Q[:, b * s:(b + 1) * s] @ rng.standard_normal(s)
    return W


def make_synthetic_model(tmp_path, shapes, tokens=96, chunks=2, seed=0, orientation="in_out"):
    """Write weights, activations and a manifest for a toy model; returns their paths."""
    rng = np.random.default_rng(seed)
    weights, acts, layers = {}, {}, []
    for i, (m, n) in enumerate(shapes):
        name = f"model.layers.{i}.proj"
        W = (rng.standard_normal((m, n)) / np.sqrt(m)).astype(np.float32)
        weights[name] = W.T.copy() if orientation == "out_in" else W
        X = rng.standard_normal((tokens, m)).astype(np.float32)
        for c, part in enumerate(np.array_split(X, chunks)):
            acts[f"{name}/acts/{c}"] = part
        layers.append({"weight": name, "gram": f"{name}/gram", "group": None, "orientation": orientation})
    paths = {
        "weights": tmp_path / "weights.bin",
        "acts": tmp_path / "acts.bin",
        "manifest": tmp_path / "manifest.json",
        "grams": tmp_path / "grams.bin",
    }
    write_container(paths["weights"], weights)
    write_container(paths["acts"], acts)
    paths["manifest"].write_text(json.dumps({"layers": layers, "config": {}}))
    return paths


# line-for-line numpy port of the reference theoretical-loss and group-ratio routines (originally torch).
# L here is the reference's whitening factor, i.e. the transpose of our lower Cholesky factor.

def ref_theoretical_loss(W, L, cr):
    W = W.astype(np.float64)
    L = L.astype(np.float64)
    W_whitened = L @ W
    rank = int(W.shape[0] * W.shape[1] * cr / (W.shape[0] + W.shape[1]))
    U, S, Vh = np.linalg.svd(W_whitened, full_matrices=False)
    U = U[:, :rank]
    S = S[:rank]
    Vh = Vh[:rank, :]
    W_whitened_trunc = U @ np.diag(S) @ Vh
    return float(np.linalg.norm(W_whitened - W_whitened_trunc, "fro"))


def ref_group_allocation(ws, Ls, target_cr):
    L_G = []
    for w, L in zip(ws, Ls):
        L_min = ref_theoretical_loss(w, L, target_cr)
        L_G.append(L_min)
    L_G = [1 / math.log(L_G_) for L_G_ in L_G]
    return [len(L_G) * target_cr * L_G_ / sum(L_G) for L_G_ in L_G]
