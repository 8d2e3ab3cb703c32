"""Numerical core of contrastive decoding.

Everything here is a pure function over probability or logit vectors:
the contrastive combination (1+alpha)*f - alpha*f_aug, the gain of the
ground-truth token, the seven distance metrics used to rank
augmentations, the plausibility constraint, and token sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng

PROB_TOL = 1e-9

DISTANCE_METRICS = ("L1", "L2", "L3", "Linf", "Cosine", "KL", "EMD")

KL_SMOOTHING_EPS = 1e-8


class ShapeMismatchError(ValueError):
    """Vectors of unequal length fed to a binary operation."""


class EmptySupportError(RuntimeError):
    """All candidate scores are zero; nothing can be sampled."""


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    top_p: float = 1.0
    top_k: int = 0  # 0 disables top-k
    mode: str = "sample"  # "sample" or "greedy"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.top_k < 0:
            raise ValueError("top_k must be >= 0")
        if self.mode not in ("sample", "greedy"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")


@dataclass(frozen=True)
class CdConfig:
    alpha: float = 1.0
    beta: float = 0.1
    combine_space: str = "logit"  # "logit" (canonical) or "probability"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must be in (0, 1]")
        if self.combine_space not in ("logit", "probability"):
            raise ValueError(f"unknown combine_space {self.combine_space!r}")


@dataclass(frozen=True)
class Scores:
    """A score vector over the vocabulary.

    ``is_distribution`` is True when values form a proper probability
    vector; probability-space combination yields raw scores that may be
    negative and must be masked and renormalised before sampling.
    """

    values: np.ndarray
    is_distribution: bool = True


def check_prob_vector(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probability vector has negative entries")
    if abs(p.sum() - 1.0) > PROB_TOL:
        raise ValueError(f"probability vector sums to {p.sum()!r}")
    return p


def softmax(z: np.ndarray) -> np.ndarray:
    """Numerically stable softmax (max-subtraction)."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def cd_combine(f: np.ndarray, f_aug: np.ndarray, cfg: CdConfig) -> Scores:
    """Contrastive combination of original and augmented logits.

    Logit space (default): softmax((1+alpha)f - alpha*f_aug), a proper
    distribution.  Probability space: (1+alpha)softmax(f) -
    alpha*softmax(f_aug), returned raw (possibly negative, not
    renormalised); downstream masking handles it.
    """
    f = np.asarray(f, dtype=np.float64)
    f_aug = np.asarray(f_aug, dtype=np.float64)
    if f.shape != f_aug.shape:
        raise ShapeMismatchError(f"shape-mismatch: {f.shape} vs {f_aug.shape}")
    a = cfg.alpha
    if cfg.combine_space == "logit":
        return Scores(softmax((1 + a) * f - a * f_aug), is_distribution=True)
    raw = (1 + a) * softmax(f) - a * softmax(f_aug)
    return Scores(raw, is_distribution=False)


def combined_logits(f: np.ndarray, f_aug: np.ndarray, alpha: float) -> np.ndarray:
    """(1+alpha)f - alpha*f_aug without the softmax; for masked decoding."""
    f = np.asarray(f, dtype=np.float64)
    f_aug = np.asarray(f_aug, dtype=np.float64)
    if f.shape != f_aug.shape:
        raise ShapeMismatchError(f"shape-mismatch: {f.shape} vs {f_aug.shape}")
    return (1 + alpha) * f - alpha * f_aug


def distance(p: np.ndarray, q: np.ndarray, metric: str) -> float:
    """Divergence between two probability vectors.

    Ln = (sum |p-q|^n)^(1/n); Linf = max |p-q|; Cosine = 1 - cosine
    similarity; KL(p||q) with q smoothed towards uniform by 1e-8; EMD =
    sum of |CDF_p - CDF_q| over the fixed token-index order.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeMismatchError(f"shape-mismatch: {p.shape} vs {q.shape}")
    if metric == "L1":
        return float(np.abs(p - q).sum())
    if metric == "L2":
        return float(np.sqrt(((p - q) ** 2).sum()))
    if metric == "L3":
        return float((np.abs(p - q) ** 3).sum() ** (1.0 / 3.0))
    if metric == "Linf":
        return float(np.abs(p - q).max())
    if metric == "Cosine":
        denom = np.linalg.norm(p) * np.linalg.norm(q)
        if denom == 0:
            return 0.0
        return float(1.0 - float(p @ q) / denom)
    if metric == "KL":
        qs = (1.0 - KL_SMOOTHING_EPS) * q + KL_SMOOTHING_EPS / len(q)
        mask = p > 0
        return float(np.sum(p[mask] * np.log(p[mask] / qs[mask])))
    if metric == "EMD":
        return float(np.abs(np.cumsum(p - q)).sum())
    raise ValueError(f"unknown distance metric {metric!r}")


def gain(p_cd: np.ndarray, p_reg: np.ndarray, y_gt: int) -> float:
    """Increase of the ground-truth token's probability under CD."""
    if not 0 <= y_gt < len(p_reg):
        raise ValueError(f"ground-truth token {y_gt} out of range")
    return float(p_cd[y_gt] - p_reg[y_gt])


def candidate_set(p_reg: np.ndarray, beta: float) -> np.ndarray:
    """Boolean mask of tokens with p_reg >= beta * max(p_reg).

    Always contains argmax(p_reg), hence never empty.
    """
    p_reg = np.asarray(p_reg, dtype=np.float64)
    return p_reg >= beta * p_reg.max()


def plausibility_mask(p_reg: np.ndarray, scores: Scores, beta: float) -> tuple[Scores, np.ndarray]:
    """Zero out (or -inf out) scores outside the candidate set."""
    cand = candidate_set(p_reg, beta)
    values = np.array(scores.values, dtype=np.float64)
    if scores.is_distribution:
        values[~cand] = 0.0
    else:
        # raw probability-space scores: drop non-candidates and negatives
        values[~cand] = 0.0
        np.clip(values, 0.0, None, out=values)
    return Scores(values, is_distribution=False), cand


def mask_logits(logits: np.ndarray, cand: np.ndarray) -> np.ndarray:
    out = np.array(logits, dtype=np.float64)
    out[~cand] = -np.inf
    return out


def sample_token(scores: np.ndarray, sampling: SamplingConfig, seed: int) -> int:
    """Draw one token id from non-negative scores.

    Pipeline: renormalise, top-k (keep k largest), top-p (smallest
    descending-sorted prefix with cumulative mass >= p), renormalise,
    then draw with the seeded generator.  Greedy mode returns the
    argmax with lowest-index tie-break.
    """
    w = np.asarray(scores, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("scores must be non-negative after masking")
    total = w.sum()
    if total <= 0:
        raise EmptySupportError("empty-support: all scores are zero")
    if sampling.mode == "greedy":
        return int(np.argmax(w))
    p = w / total
    if sampling.top_k > 0 and sampling.top_k < len(p):
        # stable selection: sort by (-p, index) so ties keep low indices
        order = np.lexsort((np.arange(len(p)), -p))
        drop = order[sampling.top_k :]
        p = p.copy()
        p[drop] = 0.0
        p /= p.sum()
    if sampling.top_p < 1.0:
        order = np.lexsort((np.arange(len(p)), -p))
        csum = np.cumsum(p[order])
        cut = int(np.searchsorted(csum, sampling.top_p)) + 1
        keep = order[:cut]
        q = np.zeros_like(p)
        q[keep] = p[keep]
        p = q / q.sum()
    u = float(rng.uniforms(seed, 1)[0])
    cdf = np.cumsum(p)
    idx = int(np.searchsorted(cdf, u, side="right"))
    return min(idx, len(p) - 1)
