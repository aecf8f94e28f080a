#!/usr/bin/env python3
"""End-to-end desk run: synthesize a corpus, train two iterations of the
encoder/tokenizer loop with the tiny preset, then linear-probe the result.

Everything lands under --workdir (default ./tiny_pipeline). Expect roughly
ten minutes on a laptop CPU.
"""

import argparse
import json
import sys
from pathlib import Path

from audiomlm.cli import main as cli_main


def sh(args: list[str]) -> dict:
    print("+ audiomlm " + " ".join(args), flush=True)
    rc = cli_main(args)
    if rc != 0:
        sys.exit(rc)
    return {}


def run(workdir: Path, iterations: int, clips: int) -> None:
    corpus = workdir / "corpus"
    manifest = corpus / "manifest.jsonl"
    if not manifest.exists():
        sh(["synth-corpus", "--out", str(corpus), "--kind", "tone-sequence",
            "--clips", str(clips), "--classes", "4", "--seconds", "5.0", "--seed", "11"])

    plan_dir = workdir / "plan"
    sh(["iterate", "--preset", "tiny", "--manifest", str(manifest),
        "--workdir", str(plan_dir), "--iterations", str(iterations)])

    final_encoder = plan_dir / f"iter{iterations}" / "encoder.ckpt"
    sh(["probe", "--preset", "tiny", "--manifest", str(manifest),
        "--workdir", str(plan_dir), "--checkpoint", str(final_encoder)])

    results = plan_dir / "results.jsonl"
    print("\nresults:")
    for line in results.read_text().splitlines():
        row = json.loads(line)
        print(f"  {row['task']:<28} {row['metric']}={row['value']:.4f}")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="tiny_pipeline")
    parser.add_argument("--iterations", type=int, default=2)
    parser.add_argument("--clips", type=int, default=200)
    args = parser.parse_args()
    run(Path(args.workdir), args.iterations, args.clips)
