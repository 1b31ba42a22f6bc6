"""Image-token similarity scores and per-layer candidate token pools."""

import hashlib
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from codebook import LlmCodebook
from ctdata import TRAINING_WINDOW, CtImage, WindowSpec, apply_window
from formats.scores import read_scores, write_scores
from validator import ValidationError, validate_threshold

HISTOGRAM_BINS = 16
SCORE_TOLERANCE = 1e-6


@dataclass
class SimilarityMatrix:
    """s(y, t) for every token t of the vocabulary, for one image."""
    image_id: str
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float32)
        if self.scores.ndim != 1:
            raise ValidationError(f"Scores for '{self.image_id}' must be 1-D")
        if not np.all(np.isfinite(self.scores)):
            raise ValidationError(f"Non-finite scores for image '{self.image_id}'")
        if self.scores.size and (self.scores.min() < -1 - SCORE_TOLERANCE
                                 or self.scores.max() > 1 + SCORE_TOLERANCE):
            raise ValidationError(f"Scores for image '{self.image_id}' fall outside [-1, 1]")

    @property
    def vocab_size(self) -> int:
        return int(self.scores.size)


@dataclass(frozen=True)
class CandidatePool:
    """Token ids scoring at least the layer threshold, or the top-1 fallback."""
    layer: int
    threshold: float
    token_ids: tuple[int, ...]
    fallback: bool = False

    def __post_init__(self):
        if not self.token_ids:
            raise ValidationError(f"Empty candidate pool for layer {self.layer}")

    def __len__(self) -> int:
        return len(self.token_ids)


def build_candidate_pool(sim: SimilarityMatrix, rho: float, layer: int = 1) -> CandidatePool:
    """C_l(y) = {t | s(y, t) >= rho}; falls back to the best-scoring token (lowest id on ties)."""
    validate_threshold(rho, f"layer {layer}")
    members = np.nonzero(sim.scores >= rho)[0]
    if members.size:
        return CandidatePool(layer, rho, tuple(int(t) for t in members))
    return CandidatePool(layer, rho, (int(np.argmax(sim.scores)),), fallback=True)


def pools_for_image(sim: SimilarityMatrix, thresholds) -> list[CandidatePool]:
    return [build_candidate_pool(sim, rho, layer=l) for l, rho in enumerate(thresholds, start=1)]


class Scorer(Protocol):
    vocab_size: int

    def score(self, img: CtImage) -> SimilarityMatrix: ...

    def fingerprint(self) -> str: ...


def image_descriptor(img: CtImage, window: WindowSpec = TRAINING_WINDOW) -> np.ndarray:
    """16-bin intensity histogram of the windowed image plus 4 gradient statistics."""
    v = apply_window(img, window).astype(np.float64)
    hist, _ = np.histogram(v, bins=HISTOGRAM_BINS, range=(0.0, 1.0))
    hist = hist / v.size
    gy, gx = np.gradient(v)
    stats = [np.abs(gx).mean(), np.abs(gy).mean(), gx.std(), gy.std()]
    return np.concatenate([hist, stats])


def synthetic_score(img: CtImage, cb: LlmCodebook, window: WindowSpec = TRAINING_WINDOW) -> SimilarityMatrix:
    """Cosine similarity between the image descriptor (padded/truncated to d) and each embedding.

    A zero embedding or a zero descriptor scores 0.
    """
    desc = image_descriptor(img, window)
    vec = np.zeros(cb.dim, dtype=np.float64)
    n = min(cb.dim, desc.size)
    vec[:n] = desc[:n]
    table = cb.embeddings.numpy().astype(np.float64)
    denom = np.linalg.norm(table, axis=1) * np.linalg.norm(vec)
    dots = table @ vec
    scores = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    return SimilarityMatrix(img.id, np.clip(scores, -1.0, 1.0))


class SyntheticScorer:
    """Deterministic stand-in for an external vision-language model."""

    def __init__(self, cb: LlmCodebook, window: WindowSpec = TRAINING_WINDOW):
        self.cb = cb
        self.window = window
        self.vocab_size = cb.size

    def score(self, img: CtImage) -> SimilarityMatrix:
        return synthetic_score(img, self.cb, self.window)

    def fingerprint(self) -> str:
        return hashlib.sha256(f"synthetic:{self.cb.fingerprint()}".encode()).hexdigest()


class PrecomputedScorer:
    """Serves scores exported offline to a score file."""

    def __init__(self, path: Path, vocab_size: int | None = None):
        self.path = Path(path)
        self.vocab_size, self.records = read_scores(self.path)
        if vocab_size is not None and vocab_size != self.vocab_size:
            raise ValidationError(
                f"Score file {self.path.name} covers {self.vocab_size} tokens "
                f"but the codebook has {vocab_size}"
            )
        self._fingerprint = hashlib.sha256(self.path.read_bytes()).hexdigest()

    def missing(self, image_ids) -> list[str]:
        return [i for i in image_ids if i not in self.records]

    def score(self, img: CtImage) -> SimilarityMatrix:
        if img.id not in self.records:
            raise ValidationError(f"No precomputed scores for image id(s): {img.id}")
        return SimilarityMatrix(img.id, self.records[img.id])

    def fingerprint(self) -> str:
        return self._fingerprint


def score_image(img: CtImage, scorer: Scorer) -> SimilarityMatrix:
    sim = scorer.score(img)
    if sim.vocab_size != scorer.vocab_size:
        raise ValidationError(
            f"Scorer returned {sim.vocab_size} scores for '{img.id}', expected {scorer.vocab_size}"
        )
    return sim


class ScoreCache:
    """Scores keyed by image id, stored in one file per scorer fingerprint.

    Many readers, one writer: lookups are lock-free on a dict snapshot,
    insertions and flushes take the lock.
    """

    def __init__(self, cache_dir: Path, scorer: Scorer):
        self.scorer = scorer
        self.path = Path(cache_dir) / f"scores-{scorer.fingerprint()[:16]}.scores"
        self._lock = threading.Lock()
        self._dirty = False
        self._records: dict[str, np.ndarray] = {}
        if self.path.exists():
            vocab_size, records = read_scores(self.path)
            if vocab_size == scorer.vocab_size:
                self._records = records
            else:
                print(f"  Warning: ignoring stale score cache {self.path.name}")

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._records

    def get(self, img: CtImage) -> SimilarityMatrix:
        cached = self._records.get(img.id)
        if cached is not None:
            return SimilarityMatrix(img.id, cached)
        sim = score_image(img, self.scorer)
        with self._lock:
            self._records[img.id] = sim.scores
            self._dirty = True
        return sim

    def flush(self) -> Path | None:
        with self._lock:
            if not self._dirty:
                return None
            write_scores(dict(self._records), self.scorer.vocab_size, self.path)
            self._dirty = False
        return self.path


def score_dataset(images: list[CtImage], scorer: Scorer,
                  cache_dir: Path | None = None) -> dict[str, SimilarityMatrix]:
    """Score every image, reusing and refreshing the on-disk cache when given."""
    if isinstance(scorer, PrecomputedScorer):
        absent = scorer.missing([img.id for img in images])
        if absent:
            raise ValidationError(f"No precomputed scores for image id(s): {', '.join(absent)}")
    if cache_dir is None:
        return {img.id: score_image(img, scorer) for img in images}
    cache = ScoreCache(cache_dir, scorer)
    hits = sum(1 for img in images if img.id in cache)
    result = {img.id: cache.get(img) for img in images}
    cache.flush()
    print(f"  scores: {len(images) - hits} computed, {hits} cached")
    return result


def export_scores(images: list[CtImage], scorer: Scorer, path: Path, sparse: bool = False) -> Path:
    """Offline export step: write every image's scores to a score file."""
    records = {img.id: score_image(img, scorer).scores for img in images}
    return write_scores(records, scorer.vocab_size, path, sparse=sparse)
