import numpy as np

from ragbench.embedding import EmbeddingVector
from ragbench.vector_index import IndexEntry, build_index


def unit(values, key=""):
    return EmbeddingVector.from_raw(values, key)


def random_index(n, dim, seed=0, prefix="c"):
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((n, dim))
    entries = [IndexEntry(f"{prefix}{i:05d}", EmbeddingVector.from_raw(v, float32=True)) for i, v in enumerate(raw)]
    return build_index(entries), entries


def brute_force_topk(entries, query, k):
    """Pure-Python linear scan: (id, similarity) sorted by (-sim, id)."""
    q = [float(x) for x in query]
    scored = []
    for e in entries:
        s = 0.0
        for a, b in zip(e.vector.values.tolist(), q):
            s += a * b
        scored.append((-s, e.chunk_id))
    scored.sort()
    return [(cid, -neg) for neg, cid in scored[:k]]


class LoopbackProviders:
    """Threaded local HTTP server imitating embedding, generation and judge endpoints.

    Embeddings come from the stub hasher so retrieval is meaningful;
    generators echo the first context block; the judge wraps its JSON in prose.
    """

    def __init__(self, judge_reply=None, fail_paths=()):
        import json
        import re
        import threading
        from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

        from ragbench.embedding import stub_embed

        self.calls = []
        owner = self

        def vec(text):
            return stub_embed(3, 48, text).values.tolist()

        def first_block(prompt):
            m = re.search(r"Context \[1\] \([^)]*\):\n(.*?)(?:\n\nContext \[|\n\nQuestion:)", prompt, re.S)
            return " ".join(m.group(1).split()[:25]) if m else "nothing found"

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                owner.calls.append((self.path, body))
                if self.path in fail_paths:
                    return self._send(503, {"error": "down"})
                if self.path == "/embed":
                    return self._send(200, [vec(t) for t in body["inputs"]])
                if self.path == "/api/embed":
                    return self._send(200, {"embeddings": [vec(t) for t in body["input"]]})
                if self.path == "/generate":
                    return self._send(200, {"generated_text": first_block(body["inputs"])})
                if self.path == "/api/generate":
                    return self._send(200, {"response": first_block(body["prompt"])})
                if self.path == "/judge":
                    reply = judge_reply or 'Grading: {"hallucination": 0.25, "relevance": 0.75, "rationale": "ok"}'
                    return self._send(200, {"choices": [{"message": {"content": reply}}]})
                self._send(404, {"error": "no route"})

            def _send(self, status, payload):
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}"
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()

    def config(self, corpus_dir, queries_file, output_dir):
        return {
            "corpus_dir": str(corpus_dir), "queries_file": str(queries_file), "output_dir": str(output_dir),
            "seed": 0, "offline": False,
            "profiles": [
                {"base": "zephyr-like", "embedder": {"endpoint_url": self.url + "/embed"},
                 "backend": {"endpoint_url": self.url + "/generate"}},
                {"base": "deepseek-like", "embedder": {"endpoint_url": self.url + "/api/embed"},
                 "backend": {"endpoint_url": self.url + "/api/generate"}},
            ],
            "judge": {"kind": "llm", "endpoint_url": self.url + "/judge", "model": "gpt-4",
                      "dialect": "openai-chat"},
        }
