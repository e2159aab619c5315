"""End-to-end pipeline demo driven through the command-line interface.

Generates a synthetic hierarchical dataset, rescores its captions,
trains the full model, and evaluates the checkpoint, leaving every
artifact under one output directory:

    out/
      data/   corpus.jsonl, table.jsonl, feature files
      run/    checkpoint.bin, history.json, config.json
      report/ report.json, distance_by_level.csv

Usage:
    python3 scripts/run_pipeline.py --out /tmp/pipeline
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from descmatch import cli


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="pipeline_out")
    ap.add_argument("--images", type=int, default=200)
    ap.add_argument("--levels", type=int, default=4)
    ap.add_argument("--embed-dim", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--batch-size", type=int, default=64)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    out = Path(args.out)
    data, run, report = out / "data", out / "run", out / "report"

    steps = [
        ["synth", "--out", str(data), "--images", str(args.images),
         "--levels", str(args.levels), "--seed", str(args.seed)],
        # rescoring is redundant after synth (it already writes the table);
        # kept here to exercise the score command on a real corpus file
        ["score", "--corpus", str(data / "corpus.jsonl"),
         "--out", str(data / "table.jsonl")],
        ["train", "--corpus", str(data / "corpus.jsonl"),
         "--table", str(data / "table.jsonl"),
         "--image-features", str(data / "images.manifest.json"),
         "--text-features", str(data / "texts.manifest.json"),
         "--out", str(run), "--variant", "full",
         "--embed-dim", str(args.embed_dim), "--epochs", str(args.epochs),
         "--batch-size", str(args.batch_size), "--lr", str(args.lr),
         "--seed", str(args.seed)],
        ["eval", "--corpus", str(data / "corpus.jsonl"),
         "--table", str(data / "table.jsonl"),
         "--image-features", str(data / "images.manifest.json"),
         "--text-features", str(data / "texts.manifest.json"),
         "--checkpoint", str(run / "checkpoint.bin"),
         "--out", str(report)],
    ]
    for step in steps:
        print(f"\n$ descmatch {' '.join(step)}")
        code = cli.main(step)
        if code != 0:
            print(f"step failed with exit code {code}", file=sys.stderr)
            return code

    summary = json.loads((report / "report.json").read_text())
    print(f"\nrsum {summary['rsum']:.1f}  d_corr {summary['d_corr']:.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
