"""Toy completion run: corpus, copy-partial baseline, training and the final comparison.

    python scripts/toy_completion.py --work runs/toy [--epochs 50] [--seed 0]
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


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", type=Path, default=Path("runs/toy"))
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    return ap.parse_args()


if __name__ == "__main__":
    args = parse_args()
    args.work.mkdir(parents=True, exist_ok=True)
    cfg = RunConfig(corpus=str(args.work / "corpus"), out=str(args.work / "run"), epochs=args.epochs)
    cfg.with_seed(args.seed)
    config = args.work / "config.json"
    cfg.dump(config)

    run(["gen", "--config", config])
    run(["eval", "--config", config, "--baseline", "copy-partial", "--out", args.work / "baseline"])
    run(["train", "--config", config])

    base = cd_mean(args.work / "baseline")
    model = cd_mean(args.work / "run" / "eval")
    print(f"copy-partial CD-L1 {base:.5f}")
    print(f"model        CD-L1 {model:.5f}  ratio {model / base:.3f}  (target <= 0.700)")
