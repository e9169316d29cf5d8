"""Sparse-view generation for the interaction subgraph.

Each directed interaction edge is kept independently with a probability that
shrinks with the indegree of its head (aggregating) node: importance
t = k / ln(d + theta), clamped into [p_min, 1]. Low-degree nodes therefore
keep their edges (with defaults a degree-1 node always does), high-degree
nodes are thinned. Exercise-concept edges are never touched.

A uniform-probability variant backs the matched-random ablation; its single
retention probability is calibrated so both strategies keep the same number
of edges in expectation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .relgraph import DirectedSplit


@dataclass(frozen=True)
class DropoutParams:
    """k scales overall retention, theta keeps ln() away from 0, p_min floors it."""

    k: float = 1.0
    theta: float = 0.01
    p_min: float = 0.3

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("k must be positive")
        if self.theta <= 0:
            raise ValueError("theta must be positive")
        if not 0.0 < self.p_min <= 1.0:
            raise ValueError("p_min must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class View:
    """Per-direction retained-edge masks over the interaction subgraph."""

    kept_e2s: np.ndarray
    kept_s2e: np.ndarray
    seed_tag: int = 0

    def mask(self, direction: str) -> np.ndarray | None:
        if direction == "e2s":
            return self.kept_e2s
        if direction == "s2e":
            return self.kept_s2e
        return None  # concept edges are never masked

    def all_kept(self) -> bool:
        return bool(self.kept_e2s.all() and self.kept_s2e.all())


def edge_importance(d: int, p: DropoutParams) -> float:
    """t = k / ln(d + theta) for an edge whose head node has indegree d."""
    if d < 1:
        raise ValueError("edges only exist at nodes with indegree >= 1")
    return p.k / math.log(d + p.theta)


def retention_prob(t: float, p_min: float) -> float:
    """Clamp an importance value into the [p_min, 1] retention range."""
    if t <= p_min:
        return p_min
    if t <= 1.0:
        return t
    return 1.0


def _edge_probs(split: DirectedSplit, direction: str, p: DropoutParams) -> np.ndarray:
    adj = split.adjacency(direction)
    degrees = adj.indegrees()
    probs_by_degree = {
        int(d): retention_prob(edge_importance(int(d), p), p.p_min)
        for d in np.unique(degrees[degrees > 0])
    }
    lookup = np.zeros(int(degrees.max()) + 1 if len(degrees) else 1)
    for d, prob in probs_by_degree.items():
        lookup[d] = prob
    return lookup[degrees[adj.heads]]


def generate_view(split: DirectedSplit, p: DropoutParams, rng: np.random.Generator) -> View:
    """One importance-based draw: each interaction edge kept i.i.d. Bernoulli.

    The RNG is consumed in canonical edge order, e2s first then s2e, one
    uniform per edge, so identical seeds give identical views.
    """
    kept_e2s = rng.random(split.e2s.n_edges) < _edge_probs(split, "e2s", p)
    kept_s2e = rng.random(split.s2e.n_edges) < _edge_probs(split, "s2e", p)
    return View(kept_e2s, kept_s2e)


def generate_view_pair(
    split: DirectedSplit, p: DropoutParams, rng: np.random.Generator
) -> tuple[View, View]:
    """Two independent draws from the same generator stream."""
    return generate_view(split, p, rng), generate_view(split, p, rng)


def generate_random_view(
    split: DirectedSplit, p_uniform: float, rng: np.random.Generator
) -> View:
    """Ablation variant: every directed edge kept i.i.d. with one probability."""
    if not 0.0 < p_uniform <= 1.0:
        raise ValueError("p_uniform must lie in (0, 1]")
    kept_e2s = rng.random(split.e2s.n_edges) < p_uniform
    kept_s2e = rng.random(split.s2e.n_edges) < p_uniform
    return View(kept_e2s, kept_s2e)


def matched_uniform_p(split: DirectedSplit, p: DropoutParams) -> float:
    """Uniform retention probability whose expected kept-edge count matches
    the importance-based strategy (the mean retention probability over all
    directed interaction edges)."""
    probs = np.concatenate([_edge_probs(split, "e2s", p), _edge_probs(split, "s2e", p)])
    if len(probs) == 0:
        raise ValueError("split has no interaction edges")
    return float(probs.mean())


def retention_table(
    split: DirectedSplit, p: DropoutParams, draws: int, rng: np.random.Generator
) -> list[dict]:
    """Per-degree audit rows: importance, retention probability, and the
    empirical keep frequency over `draws` views (both directions pooled)."""
    e2s_deg = split.e2s.indegrees()[split.e2s.heads]
    s2e_deg = split.s2e.indegrees()[split.s2e.heads]
    edge_deg = np.concatenate([e2s_deg, s2e_deg])
    max_deg = int(edge_deg.max())
    totals = np.bincount(edge_deg, minlength=max_deg + 1)

    kept = np.zeros(max_deg + 1)
    for _ in range(draws):
        view = generate_view(split, p, rng)
        mask = np.concatenate([view.kept_e2s, view.kept_s2e]).astype(np.float64)
        kept += np.bincount(edge_deg, weights=mask, minlength=max_deg + 1)

    rows = []
    for deg in np.flatnonzero(totals):
        t = edge_importance(int(deg), p)
        rows.append(
            {
                "degree": int(deg),
                "importance": t,
                "retention_p": retention_prob(t, p.p_min),
                "empirical": kept[deg] / (totals[deg] * draws) if draws else float("nan"),
            }
        )
    return rows
