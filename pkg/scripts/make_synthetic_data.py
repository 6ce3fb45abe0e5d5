#!/usr/bin/env python3
"""Generate a synthetic knowledge base, dataset, index, and token-accuracy
expectations under a target directory, ready for the CLI.

Example:
    python scripts/make_synthetic_data.py --out data/synth --docs 60 \
        --fact-samples 40 --noret-samples 10 --miss-samples 4 --seed 7
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

from reflectrag.index import RetrievalMode, build_index, save_index
from reflectrag.kb import save_kb
from reflectrag.samples import save_samples
from reflectrag.synth import make_synthetic_suite


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True)
    parser.add_argument("--docs", type=int, default=60)
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--fact-samples", type=int, default=40)
    parser.add_argument("--noret-samples", type=int, default=10)
    parser.add_argument("--miss-samples", type=int, default=4)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--sidecar", action="store_true",
                        help="store KB embeddings in a .vec sidecar")
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suite = make_synthetic_suite(
        num_docs=args.docs,
        dim=args.dim,
        num_fact_samples=args.fact_samples,
        num_noret_samples=args.noret_samples,
        num_miss_samples=args.miss_samples,
        seed=args.seed,
    )
    save_kb(suite.kb, out / "kb.jsonl", embeddings="sidecar" if args.sidecar else "inline")
    save_samples(suite.samples, out / "dataset.jsonl")
    save_index(build_index(suite.kb, RetrievalMode.VISUAL), out / "index.jsonl")

    with (out / "expectations.jsonl").open("w", encoding="utf-8") as fh:
        for sample in suite.samples:
            expected = "<RET>" if sample.gold_doc_id is not None else "<NORET>"
            fh.write(json.dumps({"id": sample.id, "expected_decision": expected}) + "\n")

    print(f"knowledge base: {out / 'kb.jsonl'} ({len(suite.kb)} documents)")
    print(f"dataset:        {out / 'dataset.jsonl'} ({len(suite.samples)} samples)")
    print(f"index:          {out / 'index.jsonl'}")
    print(f"expectations:   {out / 'expectations.jsonl'}")


if __name__ == "__main__":
    main()
