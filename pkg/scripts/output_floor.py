"""How well can any M*g^2-point prediction do against the copy-partial baseline?

For every test sample the oracle prediction is an FPS subset of the clean cloud
with as many points as the model emits. Its CD-L1 is a floor for the learned
model, since no output of that size can cover the target more evenly.

    python scripts/output_floor.py --corpus runs/toy/corpus [--points 1024]
"""
import argparse
from pathlib import Path

import numpy as np

from pcfuse.geometry import fps_indices
from pcfuse.metrics import chamfer
from pcfuse.models.completion import ModelConfig
from pcfuse.synth import load_index, load_sample

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--corpus", type=Path, required=True)
    ap.add_argument("--points", type=int, default=ModelConfig().dense_count)
    args = ap.parse_args()

    index = load_index(args.corpus)
    oracle, baseline = [], []
    for meta in index["samples"]:
        if meta["split"] != "test":
            continue
        s = load_sample(args.corpus, meta, with_views=False)
        clean, partial = s.clean.points, s.partial.points
        ideal = clean[fps_indices(clean, min(args.points, len(clean)), 0)]
        oracle.append(chamfer(ideal, clean, "L1"))
        baseline.append(chamfer(partial, clean, "L1"))
    o, b = np.mean(oracle), np.mean(baseline)
    print(f"test samples      {len(oracle)}")
    print(f"copy-partial      {b:.5f}")
    print(f"oracle {args.points:5d} pts  {o:.5f}  ratio {o / b:.3f}")
