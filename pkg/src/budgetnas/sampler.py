"""Edge distributions over a super network and connectivity-preserving sampling.

Each edge carries a real logit; its inclusion probability is the logistic
sigmoid of that logit. Layers are visited in topological order and the
incoming edges of a layer in ascending source order. An edge is drawn only if
its source is already connected to the input through previously drawn edges;
otherwise it is forced to 0 and contributes no factor to the probability of
the mask. Log-probabilities are therefore exact for every realised mask.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import TooLarge
from .graph import Mask, SuperNetGraph

DIST_FORMAT = "budgetnas-dist"
DIST_VERSION = 1
ENTROPY_CLIP = 1e-7


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def log_one_minus_sigmoid(x):
    return -np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


def sigmoid(x):
    return np.exp(log_sigmoid(x))


class ArchitectureDistribution:
    """Per-edge logits (aligned with ``g.edge_order``) plus a seeded RNG stream."""

    def __init__(self, edges, logits, rng_seed=0):
        self.edges = tuple(tuple(e) for e in edges)
        self.logits = np.array(logits, dtype=np.float64)
        if self.logits.shape != (len(self.edges),):
            raise ValueError(f"need one logit per edge ({len(self.edges)}), got shape {self.logits.shape}")
        self.rng_seed = int(rng_seed)
        self.rng = np.random.default_rng(self.rng_seed)

    @classmethod
    def for_graph(cls, g: SuperNetGraph, init_logit=3.0, rng_seed=0):
        return cls(g.edge_order, np.full(g.num_edges, float(init_logit)), rng_seed)

    @property
    def gamma(self) -> np.ndarray:
        return sigmoid(self.logits)

    def covers(self, g: SuperNetGraph) -> bool:
        return self.edges == g.edge_order

    def reseed(self, seed):
        self.rng_seed = int(seed)
        self.rng = np.random.default_rng(self.rng_seed)

    def spawn_rngs(self, n):
        """Independent generators for parallel workers, split from the master seed."""
        return [np.random.default_rng(s) for s in np.random.SeedSequence(self.rng_seed).spawn(n)]

    def copy(self):
        d = ArchitectureDistribution(self.edges, self.logits.copy(), self.rng_seed)
        d.rng.bit_generator.state = self.rng.bit_generator.state
        return d

    def to_text(self) -> str:
        lines = [json.dumps({"format": DIST_FORMAT, "version": DIST_VERSION, "rng_seed": self.rng_seed})]
        for (k, i), z in zip(self.edges, self.logits):
            lines.append(json.dumps({"src": k, "dst": i, "logit": float(z)}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str):
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
        head = records[0]
        if head.get("format") != DIST_FORMAT or head.get("version") != DIST_VERSION:
            raise ValueError("not a budgetnas distribution checkpoint (or unsupported version)")
        edges = [(r["src"], r["dst"]) for r in records[1:]]
        return cls(edges, [r["logit"] for r in records[1:]], head.get("rng_seed", 0))


@dataclass(frozen=True)
class SampleRecord:
    mask: Mask
    log_prob: float
    sampled_edges: tuple
    bits: np.ndarray  # 0/1 per edge, aligned with edge_order
    sampled: np.ndarray  # True where a Bernoulli draw happened


@dataclass(frozen=True)
class SampleBatch:
    """Vectorised samples: row ``r`` is one mask over ``g.edge_order``."""

    bits: np.ndarray
    sampled: np.ndarray
    log_prob: np.ndarray

    def __len__(self):
        return len(self.log_prob)

    def record(self, g: SuperNetGraph, r: int) -> SampleRecord:
        bits, sampled = self.bits[r], self.sampled[r]
        edges = tuple(e for e, s in zip(g.edge_order, sampled) if s)
        return SampleRecord(Mask.from_bits(g, bits), float(self.log_prob[r]), edges, bits, sampled)


def _edge_positions(g: SuperNetGraph):
    src = np.array([g.pos[k] for k, _ in g.edge_order], dtype=np.int64)
    dst = np.array([g.pos[i] for _, i in g.edge_order], dtype=np.int64)
    return src, dst


def sample_masks(g: SuperNetGraph, dist: ArchitectureDistribution, n: int, rng=None) -> SampleBatch:
    """Draw ``n`` masks at once. Consumes exactly ``n * num_edges`` uniforms."""
    rng = dist.rng if rng is None else rng
    src, dst = _edge_positions(g)
    gamma = dist.gamma
    lp1, lp0 = log_sigmoid(dist.logits), log_one_minus_sigmoid(dist.logits)
    u = rng.random((n, g.num_edges))
    reach = np.zeros((n, g.num_layers), dtype=bool)
    reach[:, 0] = True
    bits = np.zeros((n, g.num_edges), dtype=np.int8)
    sampled = np.zeros((n, g.num_edges), dtype=bool)
    log_prob = np.zeros(n)
    for j in range(g.num_edges):
        live = reach[:, src[j]]
        b = live & (u[:, j] < gamma[j])
        bits[:, j] = b
        sampled[:, j] = live
        log_prob += np.where(live, np.where(b, lp1[j], lp0[j]), 0.0)
        reach[:, dst[j]] |= b
    return SampleBatch(bits, sampled, log_prob)


def sample_mask(g: SuperNetGraph, dist: ArchitectureDistribution, rng=None) -> SampleRecord:
    return sample_masks(g, dist, 1, rng).record(g, 0)


def sampled_flags(g: SuperNetGraph, h: Mask):
    """Which edges would receive a Bernoulli draw when sampling ``h``.

    Returns ``(flags, possible)``; ``possible`` is False when ``h`` selects an
    edge whose source is not connected to the input under ``h``.
    """
    reach = {g.source}
    flags = np.zeros(g.num_edges, dtype=bool)
    possible = True
    for j, (k, i) in enumerate(g.edge_order):
        on = (k, i) in h
        if k in reach:
            flags[j] = True
            if on:
                reach.add(i)
        elif on:
            possible = False
    return flags, possible


def log_prob_of(g: SuperNetGraph, dist: ArchitectureDistribution, h: Mask) -> float:
    """Exact log-probability that sampling emits ``h``; ``-inf`` if impossible."""
    h.check(g)
    flags, possible = sampled_flags(g, h)
    if not possible:
        return -math.inf
    bits = h.to_bits(g).astype(bool)
    terms = np.where(bits, log_sigmoid(dist.logits), log_one_minus_sigmoid(dist.logits))
    return float(terms[flags].sum())


def enumerate_masks(g: SuperNetGraph, max_edges=16):
    """Every mask the sampler can emit (ignoring probability values), in a fixed order."""
    if g.num_edges > max_edges:
        raise TooLarge(f"{g.num_edges} edges exceeds the enumeration limit of {max_edges}")
    src, dst = _edge_positions(g)
    out = []

    def rec(j, reach, bits):
        if j == g.num_edges:
            out.append(Mask(e for e, b in zip(g.edge_order, bits) if b))
            return
        if src[j] in reach:
            rec(j + 1, reach, bits + (0,))
            rec(j + 1, reach | {dst[j]}, bits + (1,))
        else:
            rec(j + 1, reach, bits + (0,))

    rec(0, frozenset({0}), ())
    return out


def entropy(dist: ArchitectureDistribution) -> float:
    """Sum over edges of the binary entropy of the inclusion probability (nats)."""
    p = np.clip(dist.gamma, ENTROPY_CLIP, 1 - ENTROPY_CLIP)
    return float(-(p * np.log(p) + (1 - p) * np.log1p(-p)).sum())


def grad_log_prob(g: SuperNetGraph, dist: ArchitectureDistribution, record: SampleRecord) -> np.ndarray:
    """d log P(h) / d logits: ``bit - gamma`` on drawn edges, 0 on forced ones."""
    return np.where(record.sampled, record.bits - dist.gamma, 0.0)


def grad_log_prob_batch(dist: ArchitectureDistribution, batch: SampleBatch) -> np.ndarray:
    return np.where(batch.sampled, batch.bits - dist.gamma[None, :], 0.0)


def threshold_mask(g: SuperNetGraph, dist: ArchitectureDistribution, threshold=0.5) -> Mask:
    """Deterministic extraction: keep each edge whose probability is at least ``threshold``."""
    return Mask(e for e, p in zip(g.edge_order, dist.gamma) if p >= threshold)
