"""Run gram -> allocate -> compress -> reconstruct -> report on a random toy model.

Compresses the same plan with COMPOT and with the whitened-SVD baseline and
prints both report tables.
"""

import argparse
import json
import tempfile
from pathlib import Path

import numpy as np

from compot.cli import main as cli
from compot.tensorio import write_container


def build_model(root: Path, layers: int, width: int, tokens: int, seed: int) -> None:
    rng = np.random.default_rng(seed)
    weights, acts, entries = {}, {}, []
    for i in range(layers):
        for proj, (m, n) in {"attn.q_proj": (width, width), "mlp.up_proj": (width, 2 * width)}.items():
            name = f"model.layers.{i}.{proj}"
            # decaying spectrum so the allocator has something to choose
            U, _ = np.linalg.qr(rng.standard_normal((m, m)))
            V, _ = np.linalg.qr(rng.standard_normal((n, m)))
            sigma = np.exp(-np.arange(m) / (4 + 4 * i))
            weights[name] = ((U * sigma) @ V.T).astype(np.float32)
            X = rng.standard_normal((tokens, m)) @ np.diag(np.linspace(0.2, 2, m))
            acts[f"{name}/acts/0"] = X.astype(np.float32)
            entries.append({"weight": name, "gram": f"{name}/gram"})
    write_container(root / "weights.bin", weights)
    write_container(root / "acts.bin", acts)
    (root / "manifest.json").write_text(json.dumps({"layers": entries, "config": {}}))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--layers", type=int, default=3)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--tokens", type=int, default=512)
    ap.add_argument("--cr", type=float, default=0.3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workdir", help="keep outputs here instead of a temporary directory")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(args.workdir or tmp)
        root.mkdir(parents=True, exist_ok=True)
        build_model(root, args.layers, args.width, args.tokens, args.seed)
        m, w, g = str(root / "manifest.json"), str(root / "weights.bin"), str(root / "grams.bin")
        steps = [
            ["gram", "--manifest", m, "--acts", str(root / "acts.bin"), "--out", g],
            ["allocate", "--manifest", m, "--weights", w, "--grams", g, "--out", str(root / "plan.json"),
             "--cr", str(args.cr)],
        ]
        for method in ("none", "svd"):
            steps.append(["compress", "--manifest", m, "--weights", w, "--grams", g,
                          "--plan", str(root / "plan.json"), "--out", str(root / f"{method}.bin"),
                          "--report", str(root / f"{method}.json"), "--baseline", method])
            steps.append(["reconstruct", "--artifacts", str(root / f"{method}.bin"),
                          "--out", str(root / f"{method}.dense.bin")])
        for argv in steps:
            print(f"$ compot {' '.join(argv[:1])}")
            code = cli(argv)
            if code:
                raise SystemExit(code)
        for method in ("none", "svd"):
            doc = json.loads((root / f"{method}.json").read_text())
            print(f"{'COMPOT' if method == 'none' else 'whitened SVD'}: total functional loss "
                  f"{doc['loss_summary']['total']:.4e}, CR on disk {doc['achieved_cr_padded']:.4f}")


if __name__ == "__main__":
    main()
