"""Text-to-image retrieval metrics: Rank-k accuracy and mAP."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


@dataclass
class RetrievalRun:
    """Query rows x gallery columns similarity with identity labels."""

    similarity: np.ndarray
    query_ids: np.ndarray
    gallery_ids: np.ndarray
    ranking: np.ndarray = field(init=False)

    def __post_init__(self):
        self.similarity = np.asarray(self.similarity, dtype=np.float64)
        self.query_ids = np.asarray(self.query_ids)
        self.gallery_ids = np.asarray(self.gallery_ids)
        q, g = self.similarity.shape
        if self.query_ids.shape != (q,) or self.gallery_ids.shape != (g,):
            raise ValueError(f"similarity is {q}x{g} but got {self.query_ids.shape[0]} query "
                             f"and {self.gallery_ids.shape[0]} gallery labels")
        # Stable sort on the negated scores: ties keep the lower gallery index first.
        self.ranking = np.argsort(-self.similarity, axis=1, kind="stable")

    @property
    def matches(self) -> np.ndarray:
        """Boolean (Q, G): whether the r-th ranked gallery item shares the query id."""
        return self.gallery_ids[self.ranking] == self.query_ids[:, None]

    def _valid_matches(self) -> np.ndarray:
        matches = self.matches
        has_match = matches.any(axis=1)
        if not has_match.all():
            warnings.warn(f"{int((~has_match).sum())} queries have no gallery match and are "
                          "excluded", RuntimeWarning, stacklevel=3)
        return matches[has_match]


def rank_k(run: RetrievalRun, k: int) -> float:
    """Fraction of queries with a correct match among the top ``k``; ``k`` is capped at G."""
    if k < 1:
        raise ValueError("k must be at least 1")
    matches = run._valid_matches()
    if matches.shape[0] == 0:
        return 0.0
    k = min(k, matches.shape[1])
    return float(matches[:, :k].any(axis=1).mean())


def _average_precision(matches_row: np.ndarray) -> Fraction:
    # Only match positions contribute, so exact rationals stay cheap.
    ranks = np.flatnonzero(matches_row) + 1
    return sum((Fraction(hit, int(r)) for hit, r in enumerate(ranks, 1)), Fraction(0)) / len(ranks)


def average_precision(matches_row: np.ndarray) -> float:
    """AP of one ranked boolean match row, rounded once from the exact value."""
    return float(_average_precision(np.asarray(matches_row, bool)))


def mean_ap(run: RetrievalRun) -> float:
    matches = run._valid_matches()
    if matches.shape[0] == 0:
        return 0.0
    return float(sum((_average_precision(row) for row in matches), Fraction(0)) / matches.shape[0])


def metrics_report(run: RetrievalRun, config_hash: str) -> dict:
    """The structured metrics document written by ``eval``."""
    return {
        "rank1": rank_k(run, 1),
        "rank5": rank_k(run, 5),
        "rank10": rank_k(run, 10),
        "map": mean_ap(run),
        "num_queries": int(run.similarity.shape[0]),
        "num_gallery": int(run.similarity.shape[1]),
        "config_hash": config_hash,
    }
