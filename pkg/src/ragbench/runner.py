"""Experiment orchestration: profiles, configuration, staged runs and reports."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import platform
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import yaml

from . import __version__
from . import vector_index
from .chunking import Chunk, SplitterParams, Strategy, chunk_corpus
from .corpus import Corpus, CorpusError, DecodeError, ingest_dir
from .embedding import EmbedderSpec, EmbeddingCache, EmbeddingError, Provider, RemoteEmbedder, embed_batch
from .evaluation import (AggregationError, JudgeVerdict, MetricsReport, UnjudgeableError, aggregate,
                         judge_llm, judge_oracle, render_table)
from .generation import (BudgetError, DecodingParams, DecodingStrategy, RemoteBackend, StubBackend,
                         assemble_prompt, generate)
from .retrieval import RetrievalParams, RetrievalResult, RetrievalStrategy, retrieve
from .transport import ProviderError
from .vector_index import IndexEntry, VectorIndexError, build_index

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"
FIXTURE_CONFIG = DATA_DIR / "smoke.yaml"
STUB_DIMENSION = 256

# exceptions that mean "bad input" rather than "provider trouble"
DATA_ERRORS = (CorpusError, DecodeError, EmbeddingError, VectorIndexError, AggregationError,
               BudgetError, ValueError, KeyError)


class ConfigError(ValueError):
    pass


class QueryFileError(ValueError):
    pass


@dataclass(frozen=True)
class BackendSpec:
    kind: str = "remote"
    endpoint_url: str = ""
    model: str = ""
    dialect: str = "normalized"


@dataclass(frozen=True)
class JudgeSpec:
    kind: str = "oracle"
    endpoint_url: str = ""
    model: str = "gpt-4"
    dialect: str = "openai-chat"


@dataclass(frozen=True)
class PipelineProfile:
    name: str
    splitter: SplitterParams
    embedder: EmbedderSpec
    retrieval: RetrievalParams
    window: int
    decoding: DecodingParams
    backend: BackendSpec

    def to_json(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), default=str))


def zephyr_like() -> PipelineProfile:
    """Fixed 500/50 chunks, top-3 retrieval, 4k window, greedy decoding."""
    return PipelineProfile(
        name="zephyr-like",
        splitter=SplitterParams(500, 50, Strategy.RECURSIVE_FIXED),
        embedder=EmbedderSpec(Provider.REMOTE, "sentence-transformers/all-MiniLM-L6-v2",
                              endpoint_url="http://localhost:8080/embed", dialect="hf"),
        retrieval=RetrievalParams(RetrievalStrategy.TOPK, k=3),
        window=4000,
        decoding=DecodingParams(temperature=0.2, strategy=DecodingStrategy.GREEDY),
        backend=BackendSpec("remote", "http://localhost:8081/generate", "HuggingFaceH4/zephyr-7b-beta", "hf-tgi"),
    )


def deepseek_like() -> PipelineProfile:
    """Header-aware chunks, MMR k=2 lambda=0.5, 8k window, nucleus p=0.9."""
    return PipelineProfile(
        name="deepseek-like",
        splitter=SplitterParams(500, 50, Strategy.MARKDOWN_HEADER),
        embedder=EmbedderSpec(Provider.REMOTE, "nomic-embed-text",
                              endpoint_url="http://localhost:11434/api/embed", dialect="ollama"),
        retrieval=RetrievalParams(RetrievalStrategy.MMR, k=2, lambda_=0.5, candidate_pool=20),
        window=8000,
        decoding=DecodingParams(temperature=0.2, strategy=DecodingStrategy.NUCLEUS, top_p=0.9),
        backend=BackendSpec("remote", "http://localhost:11434/api/generate", "deepseek-r1:7b", "ollama"),
    )


BUILTIN_PROFILES: dict[str, Callable[[], PipelineProfile]] = {
    "zephyr-like": zephyr_like,
    "deepseek-like": deepseek_like,
}


def builtin_profile(name: str) -> PipelineProfile:
    try:
        return BUILTIN_PROFILES[name]()
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; built-ins: {sorted(BUILTIN_PROFILES)}") from None


def offline_profile(profile: PipelineProfile, seed: int) -> PipelineProfile:
    """Swap embedder and LLM for the deterministic stubs.

    The stub model name is namespaced so stub vectors never share cache
    keys with a real model's vectors.
    """
    emb = EmbedderSpec(Provider.STUB, f"stub{STUB_DIMENSION}/{profile.embedder.model_name}",
                       dimension=STUB_DIMENSION, seed=seed)
    return dataclasses.replace(profile, embedder=emb, backend=BackendSpec("stub", model=f"stub:{seed}"))


def _override(obj, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"expected a mapping of overrides, got {values!r}")
    values = {("lambda_" if k == "lambda" else k): v for k, v in values.items()}
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {type(obj).__name__} fields: {sorted(unknown)}")
    try:
        return dataclasses.replace(obj, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{type(obj).__name__}: {exc}") from None


def profile_from_config(entry: str | dict) -> PipelineProfile:
    if isinstance(entry, str):
        return builtin_profile(entry)
    if not isinstance(entry, dict):
        raise ConfigError(f"profile entry must be a name or a mapping, got {entry!r}")
    entry = dict(entry)
    base = entry.pop("base", entry.get("name"))
    if base is None:
        raise ConfigError("profile mapping needs 'base' or 'name'")
    prof = builtin_profile(base)
    sections = {"splitter", "embedder", "retrieval", "decoding", "backend"}
    updates: dict[str, Any] = {}
    for key, value in entry.items():
        if key in sections:
            updates[key] = _override(getattr(prof, key), value)
        elif key in ("name", "window"):
            updates[key] = value
        else:
            raise ConfigError(f"unknown profile key {key!r}")
    try:
        return dataclasses.replace(prof, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class Query:
    query_id: str
    text: str


def load_queries(path: str | os.PathLike) -> list[Query]:
    queries: list[Query] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                q = Query(str(obj["query_id"]), str(obj["text"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise QueryFileError(f"{path}:{lineno}: bad query record ({exc})") from None
            if q.query_id in seen:
                raise QueryFileError(f"{path}:{lineno}: duplicate query_id {q.query_id!r}")
            seen.add(q.query_id)
            queries.append(q)
    if not queries:
        raise QueryFileError(f"{path}: no queries")
    return queries


@dataclass
class ExperimentConfig:
    corpus_dir: Path
    queries_file: Path
    profiles: list[PipelineProfile]
    seed: int = 0
    offline: bool = False
    output_dir: Path = Path("runs/default")
    jobs: int = 1
    judge: JudgeSpec = field(default_factory=JudgeSpec)
    cache_dir: Path | None = None

    def __post_init__(self):
        if not self.profiles:
            raise ConfigError("at least one profile is required")
        names = [p.name for p in self.profiles]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate profile names: {names}")
        for name in names:
            if not re.fullmatch(r"[A-Za-z0-9._-]+", name):
                raise ConfigError(f"profile name {name!r} is not usable as a directory name")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")


_CONFIG_KEYS = {"corpus_dir", "queries_file", "profiles", "seed", "offline", "output_dir", "jobs",
                "judge", "cache_dir"}


def load_config(path: str | os.PathLike | None = None, **overrides) -> ExperimentConfig:
    """Read a YAML (or JSON) config; relative paths resolve against its directory.

    Keyword overrides with value None are ignored, so CLI flags can be
    passed straight through. Without a path the bundled offline smoke
    config is used, with its output directed under the working directory.
    """
    bundled = path is None
    path = Path(path) if path is not None else FIXTURE_CONFIG
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if bundled:
        raw["output_dir"] = str(Path.cwd() / raw.get("output_dir", "runs/smoke"))
    raw.update({k: v for k, v in overrides.items() if v is not None})
    base = path.parent

    def resolve(p) -> Path:
        p = Path(p).expanduser()
        return p if p.is_absolute() else base / p

    for key in ("corpus_dir", "queries_file"):
        if key not in raw:
            raise ConfigError(f"config missing {key!r}")
    judge = raw.get("judge") or {}
    try:
        return ExperimentConfig(
            corpus_dir=resolve(raw["corpus_dir"]),
            queries_file=resolve(raw["queries_file"]),
            profiles=[profile_from_config(p) for p in raw.get("profiles") or list(BUILTIN_PROFILES)],
            seed=int(raw.get("seed", 0)),
            offline=bool(raw.get("offline", False)),
            output_dir=resolve(raw.get("output_dir", "runs/default")),
            jobs=int(raw.get("jobs", 1)),
            judge=JudgeSpec(**judge),
            cache_dir=resolve(raw["cache_dir"]) if raw.get("cache_dir") else None,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# --- artifacts ---------------------------------------------------------------

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _fingerprint(*parts: Any) -> str:
    return _sha256(json.dumps(parts, sort_keys=True, default=str).encode("utf-8"))


def _dump_jsonl(rows: list[dict]) -> bytes:
    return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in rows).encode("utf-8")


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def host_info() -> dict:
    return {
        "ragbench": __version__,
        "python": platform.python_version(),
        "platform": platform.platform(),
        "machine": platform.machine(),
        "cpu_count": os.cpu_count(),
    }


class Manifest:
    """Records, per stage, an input fingerprint and the content hash of each output file.

    A stage is reusable when its fingerprint matches and every listed file
    still exists with the recorded hash.
    """

    def __init__(self, root: Path):
        self.root = root
        self.path = root / "manifest.json"
        self.stages: dict[str, dict] = {}
        if self.path.exists():
            try:
                self.stages = json.loads(self.path.read_text(encoding="utf-8")).get("stages", {})
            except (json.JSONDecodeError, AttributeError):
                logger.warning("ignoring unreadable manifest %s", self.path)

    def valid(self, stage: str, inputs: str) -> bool:
        entry = self.stages.get(stage)
        if not entry or entry.get("inputs") != inputs:
            return False
        for rel, digest in entry["files"].items():
            p = self.root / rel
            if not p.is_file() or _sha256(p.read_bytes()) != digest:
                return False
        return True

    def file_hash(self, stage: str, rel: str) -> str:
        return self.stages[stage]["files"][rel]

    def record(self, stage: str, inputs: str, files: dict[str, bytes]) -> None:
        for rel, data in files.items():
            _write(self.root / rel, data)
        self.stages[stage] = {"inputs": inputs, "files": {rel: _sha256(d) for rel, d in sorted(files.items())}}
        self.save()

    def save(self) -> None:
        payload = {"host": host_info(), "stages": dict(sorted(self.stages.items()))}
        _write(self.path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def corpus_fingerprint(corpus: Corpus) -> str:
    return _fingerprint([(d.doc_id, d.format.value, _sha256(d.body.encode("utf-8"))) for d in corpus.documents])


def _cache_for(cache_dir: Path, model_name: str) -> EmbeddingCache:
    safe = re.sub(r"[^A-Za-z0-9._-]+", "_", model_name)
    return EmbeddingCache(cache_dir / f"{safe}.rgemb")


def make_backend(profile: PipelineProfile, seed: int):
    if profile.backend.kind == "stub":
        return StubBackend(seed)
    b = profile.backend
    return RemoteBackend(b.endpoint_url, b.model, b.dialect)


def make_judge(spec: JudgeSpec, offline: bool):
    """Return a callable (query_id, query, blocks, answer) -> JudgeVerdict."""
    if offline or spec.kind == "oracle":
        return lambda qid, q, blocks, a: judge_oracle(q, blocks, a, qid)
    if spec.kind != "llm":
        raise ConfigError(f"unknown judge kind {spec.kind!r}")
    endpoint = RemoteBackend(spec.endpoint_url, spec.model, spec.dialect)
    return lambda qid, q, blocks, a: judge_llm(endpoint, q, blocks, a, qid)


def decoding_record(d: DecodingParams) -> dict:
    return {"strategy": d.strategy.value, "temperature": d.temperature, "top_p": d.effective_top_p,
            "max_tokens": d.max_output_tokens}


class ProfileRun:
    """Runs one profile through chunk -> index -> generate -> judge inside its own subdirectory."""

    def __init__(self, profile: PipelineProfile, config: ExperimentConfig, corpus: Corpus,
                 queries: list[Query], manifest: Manifest, base_fp: str, cache_dir: Path):
        self.p = profile
        self.config = config
        self.corpus = corpus
        self.queries = queries
        self.manifest = manifest
        self.fp = _fingerprint(base_fp, profile.to_json())
        self.cache = _cache_for(cache_dir, profile.embedder.model_name)
        self._remote = RemoteEmbedder(profile.embedder) if profile.embedder.provider == Provider.REMOTE else None

    def _rel(self, name: str) -> str:
        return f"{self.p.name}/{name}"

    def _embed(self, texts: list[str]):
        return embed_batch(self.p.embedder, texts, cache=self.cache, remote=self._remote)

    def chunks(self) -> tuple[list[Chunk], str]:
        stage, rel = self._rel("chunks"), self._rel("chunks.jsonl")
        fp = _fingerprint(self.fp, "chunks")
        if self.manifest.valid(stage, fp):
            chunks = [Chunk.from_json(o) for o in _read_jsonl(self.manifest.root / rel)]
        else:
            chunks = chunk_corpus(self.corpus, self.p.splitter)
            self.manifest.record(stage, fp, {rel: _dump_jsonl([c.to_json() for c in chunks])})
        if not chunks:
            raise CorpusError(f"profile {self.p.name}: corpus produced no chunks")
        return chunks, self.manifest.file_hash(stage, rel)

    def index(self, chunks: list[Chunk], upstream: str) -> tuple[vector_index.Index, str]:
        stage, rel = self._rel("index"), self._rel("index.rgidx")
        fp = _fingerprint(self.fp, "index", upstream)
        if self.manifest.valid(stage, fp):
            index = vector_index.load(self.manifest.root / rel)
        else:
            vectors = self._embed([c.retrieval_text for c in chunks])
            index = build_index([IndexEntry(c.chunk_id, v) for c, v in zip(chunks, vectors)])
            self.manifest.record(stage, fp, {rel: vector_index.to_bytes(index)})
        return index, self.manifest.file_hash(stage, rel)

    def answer_queries(self, chunks: list[Chunk], index, upstream: str) -> tuple[list[dict], str]:
        stage = self._rel("generate")
        names = {k: self._rel(f"{k}.jsonl") for k in ("retrievals", "prompts", "answers")}
        fp = _fingerprint(self.fp, "generate", upstream)
        if self.manifest.valid(stage, fp):
            rows = {k: _read_jsonl(self.manifest.root / rel) for k, rel in names.items()}
            records = [dict(query_id=r["query_id"], retrieval=r, prompt=p, answer=a)
                       for r, p, a in zip(rows["retrievals"], rows["prompts"], rows["answers"])]
        else:
            texts = {c.chunk_id: c.retrieval_text for c in chunks}
            qvecs = self._embed([q.text for q in self.queries])
            backend = make_backend(self.p, self.config.seed)

            def one(item):
                q, qv = item
                result = retrieve(index, qv, self.p.retrieval)
                rrow = {"query_id": q.query_id, **result.to_json()}
                try:
                    bundle = assemble_prompt(q.text, result, texts, self.p.window, self.p.decoding)
                except BudgetError as exc:
                    err = {"query_id": q.query_id, "error": str(exc)}
                    return dict(query_id=q.query_id, retrieval=rrow, prompt=err, answer=err)
                prow = {"query_id": q.query_id, **bundle.to_json(), "decoding": decoding_record(self.p.decoding)}
                try:
                    resp = generate(backend, bundle, self.p.decoding)
                    arow = {"query_id": q.query_id, "answer": resp.answer, "backend_id": resp.backend_id,
                            "prompt_tokens": resp.prompt_tokens, "output_tokens": resp.output_tokens}
                    if resp.request is not None:
                        arow["request"] = resp.request
                except (ProviderError, BudgetError) as exc:
                    logger.warning("%s %s: generation failed: %s", self.p.name, q.query_id, exc)
                    arow = {"query_id": q.query_id, "error": str(exc)}
                return dict(query_id=q.query_id, retrieval=rrow, prompt=prow, answer=arow)

            items = list(zip(self.queries, qvecs))
            if self.config.jobs > 1:
                with ThreadPoolExecutor(max_workers=self.config.jobs) as pool:
                    records = list(pool.map(one, items))
            else:
                records = [one(it) for it in items]
            self.manifest.record(stage, fp, {
                names["retrievals"]: _dump_jsonl([r["retrieval"] for r in records]),
                names["prompts"]: _dump_jsonl([r["prompt"] for r in records]),
                names["answers"]: _dump_jsonl([r["answer"] for r in records]),
            })
        digest = _fingerprint(*(self.manifest.file_hash(stage, rel) for rel in names.values()))
        return records, digest

    def judge(self, records: list[dict], upstream: str) -> tuple[list[JudgeVerdict], list[str]]:
        stage, rel = self._rel("judge"), self._rel("verdicts.jsonl")
        fp = _fingerprint(self.fp, "judge", upstream, dataclasses.asdict(self.config.judge))
        if self.manifest.valid(stage, fp):
            rows = _read_jsonl(self.manifest.root / rel)
        else:
            judge = make_judge(self.config.judge, self.config.offline)
            queries = {q.query_id: q.text for q in self.queries}

            def one(rec) -> dict:
                qid, answer = rec["query_id"], rec["answer"]
                if "error" in answer:
                    return {"query_id": qid, "missing": f"generation failed: {answer['error']}"}
                try:
                    blocks = [tuple(b) for b in rec["prompt"]["context_blocks"]]
                    return judge(qid, queries[qid], blocks, answer["answer"]).to_json()
                except UnjudgeableError:
                    return {"query_id": qid, "missing": "unjudgeable"}
                except ProviderError as exc:
                    return {"query_id": qid, "missing": f"judge failed: {exc}"}

            if self.config.jobs > 1:
                with ThreadPoolExecutor(max_workers=self.config.jobs) as pool:
                    rows = list(pool.map(one, records))
            else:
                rows = [one(r) for r in records]
            self.manifest.record(stage, fp, {rel: _dump_jsonl(rows)})
        verdicts = [JudgeVerdict.from_json(r) for r in rows if "missing" not in r]
        missing = [r["query_id"] for r in rows if "missing" in r]
        return verdicts, missing

    def run(self) -> tuple[list[JudgeVerdict], list[str]]:
        chunks, h_chunks = self.chunks()
        index, h_index = self.index(chunks, h_chunks)
        records, h_gen = self.answer_queries(chunks, index, h_index)
        return self.judge(records, h_gen)


def run_experiment(config: ExperimentConfig) -> MetricsReport:
    """Run every profile over the corpus and queries and write all artifacts.

    Layout under ``output_dir``: one subdirectory per profile holding
    chunks, index, retrievals, prompts, answers and verdicts;
    ``manifest.json`` with per-stage hashes; ``report.json`` and
    ``report.txt`` written last. A profile that fails fatally gets a
    ``PARTIAL`` marker and is reported under ``notes.aborted``.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = ingest_dir(config.corpus_dir)
    if not corpus.documents:
        raise CorpusError(f"empty corpus: {config.corpus_dir}")
    queries = load_queries(config.queries_file)
    profiles = [offline_profile(p, config.seed) if config.offline else p for p in config.profiles]
    cache_dir = Path(config.cache_dir) if config.cache_dir else out / "cache"

    manifest = Manifest(out)
    base_fp = _fingerprint(__version__, config.seed, config.offline, corpus_fingerprint(corpus),
                           [dataclasses.asdict(q) for q in queries])
    verdicts: dict[str, list[JudgeVerdict]] = {}
    missing: dict[str, list[str]] = {}
    aborted: dict[str, dict] = {}
    for profile in profiles:
        marker = out / profile.name / "PARTIAL"
        try:
            v, m = ProfileRun(profile, config, corpus, queries, manifest, base_fp, cache_dir).run()
            if not v:
                raise AggregationError(f"profile {profile.name}: every query is missing a verdict")
        except ProviderError as exc:
            aborted[profile.name] = {"kind": "provider", "error": str(exc)}
        except DATA_ERRORS as exc:
            aborted[profile.name] = {"kind": "data", "error": str(exc)}
        else:
            verdicts[profile.name], missing[profile.name] = v, m
            if marker.exists():
                marker.unlink()
            continue
        logger.error("profile %s aborted: %s", profile.name, aborted[profile.name]["error"])
        _write(marker, (aborted[profile.name]["error"] + "\n").encode("utf-8"))

    if not verdicts:
        first = next(iter(aborted.values()))
        if first["kind"] == "provider":
            raise ProviderError(f"every profile aborted; first error: {first['error']}")
        raise AggregationError(f"every profile aborted; first error: {first['error']}")

    report = aggregate(verdicts, missing)
    pipes = report.per_pipeline
    if "zephyr-like" in pipes and "deepseek-like" in pipes:
        report.notes["directional_claim"] = {
            "claim": "deepseek-like hallucination_mean < zephyr-like hallucination_mean",
            "holds": pipes["deepseek-like"].hallucination_mean < pipes["zephyr-like"].hallucination_mean,
        }
    if aborted:
        report.notes["aborted"] = aborted
    _write(out / "report.json", emit_report(report, "json"))
    _write(out / "report.txt", emit_report(report, "table"))
    return report


def emit_report(report: MetricsReport, fmt: str = "table") -> bytes:
    if not report.per_pipeline:
        raise AggregationError("empty report")
    if fmt == "json":
        return report.dumps().encode("utf-8")
    if fmt == "table":
        return render_table(report).encode("utf-8")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pipeline", "metric", "value"])
        for name, m in report.per_pipeline.items():
            w.writerow([name, "answer_relevance", f"{m.answer_relevance_mean:.2f}"])
            w.writerow([name, "hallucination", f"{m.hallucination_mean:.2f}"])
        return buf.getvalue().encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}")
