#!/usr/bin/env python3
"""Reference model server for the remote wire protocol.

Serves POST /v1/generate backed by the deterministic rule backend over a
dataset file, so `reflectrag --backend remote` can be exercised end to end
without any model weights:

    python scripts/run_stub_server.py --dataset data/synth/dataset.jsonl --port 8008
    REFLECTIVA_ENDPOINT=http://127.0.0.1:8008 reflectrag eval \
        --kb data/synth/kb.jsonl --index data/synth/index.jsonl \
        --dataset data/synth/dataset.jsonl --backend remote --out out/remote
"""
from __future__ import annotations

import argparse
import json
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from reflectrag.prompts import PromptSegment, SegmentKind
from reflectrag.samples import load_samples
from reflectrag.synth import RuleBackend


def build_backend(dataset_path: str) -> RuleBackend:
    samples = load_samples(dataset_path)
    answers = {s.question: s.gold_answers for s in samples if s.gold_doc_id is not None}
    direct = {
        s.question: s.gold_answers[0]
        for s in samples
        if s.gold_doc_id is None and s.gold_answers
    }
    return RuleBackend(answers, direct)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dataset", required=True)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8008)
    args = parser.parse_args()

    backend = build_backend(args.dataset)

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):  # noqa: N802 (http.server API)
            if self.path != "/v1/generate":
                self.send_error(404)
                return
            length = int(self.headers.get("Content-Length", 0))
            payload = json.loads(self.rfile.read(length))
            prompt = [
                PromptSegment(SegmentKind(seg["kind"]), seg["payload"])
                for seg in payload["segments"]
            ]
            allowed = payload.get("allowed_tokens")
            result = backend.constrained_generate(
                prompt,
                allowed=None if allowed is None else frozenset(allowed),
                max_tokens=payload.get("max_tokens"),
            )
            body = json.dumps(
                {
                    "tokens": list(result.tokens),
                    "chosen_logprobs": list(result.chosen_logprobs),
                    "candidates": [dict(c) for c in result.candidate_logprobs],
                }
            ).encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, fmt, *args):
            pass

    server = ThreadingHTTPServer((args.host, args.port), Handler)
    print(f"serving /v1/generate on http://{args.host}:{args.port} (Ctrl-C to stop)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass


if __name__ == "__main__":
    main()
