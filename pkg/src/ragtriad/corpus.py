"""Corpus ingestion, chunking, embedding, and exact dense top-k retrieval.

Retrieval is brute-force inner product over one global index spanning all
ingested corpora: scores come from a single matrix-vector product and
ranking applies descending score with ties broken by ascending doc_id.
At the corpus sizes this engine targets (well under 10^5 chunks) exact
search is fast and keeps the ranking oracle-checkable; an ANN backend
could slot in behind the same interface but is deliberately not the
default.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np
import requests

from .domain import EvidenceDoc, derive_doc_id

logger = logging.getLogger(__name__)


class CorpusError(Exception):
    pass


class EmptyIndex(CorpusError):
    pass


class EmbedderDimensionMismatch(CorpusError):
    pass


class MalformedCorpusRecord(CorpusError):
    def __init__(self, path: str, line_no: int, message: str) -> None:
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


@dataclass(frozen=True)
class ChunkingConfig:
    """Fixed-window chunking: windows of max_chars advancing by
    max_chars - overlap."""

    max_chars: int = 1000
    overlap: int = 200

    def __post_init__(self) -> None:
        if self.max_chars < 1:
            raise ValueError("max_chars must be >= 1")
        if not 0 <= self.overlap < self.max_chars:
            raise ValueError("overlap must satisfy 0 <= overlap < max_chars")

    @property
    def stride(self) -> int:
        return self.max_chars - self.overlap


def chunk_text(text: str, config: ChunkingConfig) -> list[tuple[int, str]]:
    """Window offsets and slices; whitespace-only windows are dropped."""
    chunks = []
    for start in range(0, len(text), config.stride):
        window = text[start : start + config.max_chars]
        if window.strip():
            chunks.append((start, window))
    return chunks


class Embedder(Protocol):
    """Dual-encoder interface: separate query/document sides, one space."""

    dimension: int
    tag: str

    def embed_query(self, text: str) -> np.ndarray: ...

    def embed_doc(self, text: str) -> np.ndarray: ...


class HashedNgramEmbedder:
    """Deterministic test embedder: signed hashing of character n-grams,
    L2-normalized. Identical text always maps to the identical unit vector;
    texts sharing n-grams land near each other."""

    def __init__(self, dimension: int = 64, ngram: int = 3, seed: int = 0) -> None:
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.dimension = dimension
        self.ngram = ngram
        self.seed = seed
        self.tag = f"hashed-ngram/dim={dimension}/ngram={ngram}/seed={seed}"

    def _vector(self, text: str) -> np.ndarray:
        v = np.zeros(self.dimension, dtype=np.float64)
        normalized = " ".join(text.lower().split())
        padded = f" {normalized} "
        n = self.ngram
        grams = [padded[i : i + n] for i in range(max(len(padded) - n + 1, 0))] or [padded]
        for gram in grams:
            digest = hashlib.blake2b(
                gram.encode("utf-8"), digest_size=8, key=str(self.seed).encode("utf-8")
            ).digest()
            value = int.from_bytes(digest, "big")
            index = value % self.dimension
            sign = 1.0 if (value >> 63) & 1 else -1.0
            v[index] += sign
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            v[0] = 1.0
            return v
        return v / norm

    def embed_query(self, text: str) -> np.ndarray:
        return self._vector(text)

    def embed_doc(self, text: str) -> np.ndarray:
        return self._vector(text)


class RemoteEmbedder:
    """HTTP embedding service client.

    Wire format: POST {"texts": [...], "side": "query"|"doc"} returning
    {"vectors": [[...], ...]}.
    """

    def __init__(
        self,
        endpoint: str,
        dimension: int,
        tag: Optional[str] = None,
        timeout_s: float = 60.0,
        session: Optional[requests.Session] = None,
    ) -> None:
        self.endpoint = endpoint
        self.dimension = dimension
        self.tag = tag or f"remote/dim={dimension}/endpoint={endpoint}"
        self.timeout_s = timeout_s
        self._session = session or requests.Session()

    def _embed_batch(self, texts: Sequence[str], side: str) -> np.ndarray:
        resp = self._session.post(
            self.endpoint,
            json={"texts": list(texts), "side": side},
            timeout=self.timeout_s,
        )
        resp.raise_for_status()
        vectors = np.asarray(resp.json()["vectors"], dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape != (len(texts), self.dimension):
            raise EmbedderDimensionMismatch(
                f"expected {len(texts)}x{self.dimension} vectors, got {vectors.shape}"
            )
        return vectors

    def embed_query(self, text: str) -> np.ndarray:
        return self._embed_batch([text], "query")[0]

    def embed_doc(self, text: str) -> np.ndarray:
        return self._embed_batch([text], "doc")[0]

    def embed_docs(self, texts: Sequence[str]) -> np.ndarray:
        return self._embed_batch(texts, "doc")


def embed_docs(embedder: Embedder, texts: Sequence[str]) -> np.ndarray:
    """Batch document embedding, using the embedder's native batching
    when it has one."""
    batch = getattr(embedder, "embed_docs", None)
    if callable(batch):
        return np.asarray(batch(texts), dtype=np.float64)
    return np.stack([np.asarray(embedder.embed_doc(t), dtype=np.float64) for t in texts])


class VectorIndex:
    """Immutable dense index: embedding matrix aligned with a doc table."""

    def __init__(self, docs: Sequence[EvidenceDoc], matrix: np.ndarray, embedder_tag: str) -> None:
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(docs):
            raise CorpusError("matrix rows must align with the doc table")
        ids = [d.doc_id for d in docs]
        if len(ids) != len(set(ids)):
            raise CorpusError("duplicate doc_id in index")
        for doc in docs:
            if doc.embedding is not None and len(doc.embedding) != matrix.shape[1]:
                raise EmbedderDimensionMismatch(
                    f"doc {doc.doc_id} carries a {len(doc.embedding)}-dim embedding, "
                    f"index is {matrix.shape[1]}-dim"
                )
        self._docs: tuple[EvidenceDoc, ...] = tuple(docs)
        self._matrix = matrix
        self._matrix.setflags(write=False)
        self._ids = np.array(ids)
        self.embedder_tag = embedder_tag

    @property
    def dimension(self) -> int:
        return int(self._matrix.shape[1])

    @property
    def doc_count(self) -> int:
        return len(self._docs)

    @property
    def docs(self) -> tuple[EvidenceDoc, ...]:
        return self._docs

    def topk(self, query: str, k: int, embedder: Embedder) -> list[tuple[EvidenceDoc, float]]:
        """Exactly min(k, doc_count) hits by descending inner product,
        ties broken by ascending doc_id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if self.doc_count == 0:
            raise EmptyIndex("index holds no documents")
        qvec = np.asarray(embedder.embed_query(query), dtype=np.float64)
        if qvec.shape != (self.dimension,):
            raise EmbedderDimensionMismatch(
                f"query vector has dimension {qvec.shape}, index expects {self.dimension}"
            )
        scores = self._matrix @ qvec
        order = np.lexsort((self._ids, -scores))
        take = min(k, self.doc_count)
        return [(self._docs[i], float(scores[i])) for i in order[:take]]

    def manifest(self) -> dict:
        h = hashlib.sha256()
        for doc in self._docs:
            h.update(doc.doc_id.encode("utf-8"))
            h.update(doc.text.encode("utf-8"))
        return {
            "embedder": self.embedder_tag,
            "dimension": self.dimension,
            "doc_count": self.doc_count,
            "content_hash": h.hexdigest(),
        }

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "manifest.json").write_text(
            json.dumps(self.manifest(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        with open(directory / "docs.jsonl", "w", encoding="utf-8") as fh:
            for doc in self._docs:
                fh.write(doc.model_dump_json(exclude={"embedding"}) + "\n")
        np.save(directory / "vectors.npy", self._matrix)

    @classmethod
    def load(cls, directory: str | Path) -> "VectorIndex":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        docs = []
        with open(directory / "docs.jsonl", "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    docs.append(EvidenceDoc.model_validate_json(line))
        matrix = np.load(directory / "vectors.npy")
        index = cls(docs, matrix, manifest["embedder"])
        if index.dimension != manifest["dimension"] or index.doc_count != manifest["doc_count"]:
            raise CorpusError("manifest does not match stored index data")
        return index


def _read_corpus_records(path: str | Path) -> Iterable[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise MalformedCorpusRecord(str(path), line_no, f"invalid JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise MalformedCorpusRecord(str(path), line_no, "record is not an object")
            yield line_no, record


def ingest(
    corpus_paths: Sequence[str | Path],
    chunking: ChunkingConfig,
    embedder: Embedder,
) -> VectorIndex:
    """Chunk, embed, and index one or more corpora into a single global
    index. Identical content always produces the identical doc_id set, so
    re-ingestion is idempotent; duplicate chunks keep their first
    occurrence."""
    docs: list[EvidenceDoc] = []
    texts: list[str] = []
    seen: set[str] = set()
    for path in corpus_paths:
        for line_no, record in _read_corpus_records(path):
            for key in ("source", "title", "text"):
                if key not in record or not isinstance(record[key], str):
                    raise MalformedCorpusRecord(
                        str(path), line_no, f"missing or non-string field {key!r}"
                    )
            if not record["text"].strip():
                raise MalformedCorpusRecord(str(path), line_no, "empty text field")
            for _, window in chunk_text(record["text"], chunking):
                doc_id = derive_doc_id(record["source"], record["title"], window)
                if doc_id in seen:
                    continue
                seen.add(doc_id)
                docs.append(
                    EvidenceDoc(
                        doc_id=doc_id,
                        source_corpus=record["source"],
                        title=record["title"],
                        text=window,
                    )
                )
                texts.append(window)

    if docs:
        matrix = embed_docs(embedder, texts)
    else:
        matrix = np.zeros((0, embedder.dimension), dtype=np.float64)
    if matrix.shape[1] != embedder.dimension:
        raise EmbedderDimensionMismatch(
            f"embedder produced dimension {matrix.shape[1]}, declared {embedder.dimension}"
        )
    logger.info("ingested %d chunks from %d corpus file(s)", len(docs), len(corpus_paths))
    return VectorIndex(docs, matrix, embedder.tag)


def embedder_from_tag(tag: str, endpoint_override: Optional[str] = None) -> Embedder:
    """Rebuild the embedder an index was built with from its manifest tag."""
    if tag.startswith("hashed-ngram/"):
        params = dict(part.split("=", 1) for part in tag.split("/")[1:])
        return HashedNgramEmbedder(
            dimension=int(params["dim"]),
            ngram=int(params.get("ngram", 3)),
            seed=int(params.get("seed", 0)),
        )
    if tag.startswith("remote/"):
        head, sep, endpoint = tag.partition("/endpoint=")
        params = dict(part.split("=", 1) for part in head.split("/")[1:] if "=" in part)
        return RemoteEmbedder(
            endpoint=endpoint_override or endpoint,
            dimension=int(params["dim"]),
            tag=tag,
        )
    raise CorpusError(f"unknown embedder tag {tag!r}")
