"""Fusion vs point-only on the cube_bump ambiguity corpus.

Both models share the seed and the training budget; only the image branch differs.

    python scripts/fusion_ablation.py --work runs/cube_bump [--epochs 50]
"""
import argparse
import json
from pathlib import Path

from pcfuse.cli import main
from pcfuse.config import RunConfig


def cd_mean(path: Path) -> float:
    return json.loads((path / "aggregate.json").read_text())["cd_l1"]["mean"]


def run(argv) -> None:
    code = main([str(a) for a in argv])
    if code:
        raise SystemExit(f"pcfuse {argv[0]} failed with exit code {code}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", type=Path, default=Path("runs/cube_bump"))
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    args.work.mkdir(parents=True, exist_ok=True)
    cfg = RunConfig(corpus=str(args.work / "corpus"), fusion=True, epochs=args.epochs)
    cfg.gen.families = ["cube_bump"]
    cfg.with_seed(args.seed)
    config = args.work / "config.json"
    cfg.dump(config)

    run(["gen", "--config", config])
    run(["eval", "--config", config, "--baseline", "copy-partial", "--out", args.work / "baseline"])
    run(["train", "--config", config, "--out", args.work / "fusion"])
    run(["train", "--config", config, "--no-fusion", "--out", args.work / "points"])

    fused, points = cd_mean(args.work / "fusion" / "eval"), cd_mean(args.work / "points" / "eval")
    print(f"copy-partial CD-L1 {cd_mean(args.work / 'baseline'):.5f}")
    print(f"point-only   CD-L1 {points:.5f}")
    print(f"fusion       CD-L1 {fused:.5f}  ratio {fused / points:.3f}  (target <= 0.700)")
