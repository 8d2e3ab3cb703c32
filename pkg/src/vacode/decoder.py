"""Decoding loop with adaptive augmentation selection.

At the first step the engine queries the backend once with the
original image and once per augmentation, picks the augmentation whose
output distribution is farthest from the original (lowest-index
tie-break), and keeps that single augmentation for the rest of the
sequence.  Every step combines the two logit vectors contrastively,
applies the plausibility constraint, and samples.

Cost model: |aug_set| + 1 backend calls at step 1, exactly 2 at each
later step.  Augmented images are generated once per sequence; the
effective seed of augmentation i is mix(cfg.seed, "aug", i, op.seed).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import cdcore, rng
from .backend import Backend, build_prompt
from .cdcore import CdConfig, SamplingConfig, Scores
from .imgaug import AugmentationOp, ImageBuffer, apply, augmentation_set


@dataclass(frozen=True)
class DecodingConfig:
    cd: CdConfig = field(default_factory=CdConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    metric: str = "L2"
    max_len: int = 8
    strategy: str = "all"  # "all" or "selection"
    aug_set: tuple[AugmentationOp, ...] = field(
        default_factory=lambda: tuple(augmentation_set())
    )
    seed: int = 0
    eos_id: int = 0
    concurrent_step1: bool = False

    def __post_init__(self):
        if self.metric not in cdcore.DISTANCE_METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if not self.aug_set:
            raise ValueError("aug_set must be non-empty")
        if self.strategy not in ("all", "selection"):
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass
class StepRecord:
    token_id: int
    candidate_size: int
    backend_calls: int


@dataclass
class DecodeTrace:
    chosen_aug: AugmentationOp
    chosen_index: int
    distances_at_t1: dict[str, float]
    per_step: list[StepRecord] = field(default_factory=list)
    token_ids: list[int] = field(default_factory=list)
    gains: list[float] = field(default_factory=list)  # per-step probability gain of the sampled token

    @property
    def backend_calls(self) -> list[int]:
        return [s.backend_calls for s in self.per_step]


@dataclass
class CalibrationReport:
    """Selection counts over a validation split and the kept subset."""

    aug_set: tuple[AugmentationOp, ...]
    counts: list[int]
    n_samples: int
    tau: float
    kept_indices: list[int]

    @property
    def kept(self) -> tuple[AugmentationOp, ...]:
        return tuple(self.aug_set[i] for i in self.kept_indices)


def augmented_images(
    image: ImageBuffer, aug_set, seed: int
) -> list[ImageBuffer]:
    """The per-sequence augmented images, in aug_set order."""
    return [
        apply(op.with_seed(rng.mix(seed, "aug", i, op.seed)), image)
        for i, op in enumerate(aug_set)
    ]


def _scaled_logits(backend: Backend, image, prompt, prefix, temperature):
    return backend.next_logits(image, prompt, prefix) / temperature


def select_augmentation(
    image: ImageBuffer,
    prompt: str,
    cfg: DecodingConfig,
    backend: Backend,
):
    """Step-1 work: returns (chosen index, distances, f1, f_aug list, aug images)."""
    temp = cfg.sampling.temperature
    aug_imgs = augmented_images(image, cfg.aug_set, cfg.seed)
    f1 = _scaled_logits(backend, image, prompt, [], temp)
    if cfg.concurrent_step1 and len(aug_imgs) > 1:
        with ThreadPoolExecutor(max_workers=len(aug_imgs)) as pool:
            f_augs = list(
                pool.map(lambda im: _scaled_logits(backend, im, prompt, [], temp), aug_imgs)
            )
    else:
        f_augs = [_scaled_logits(backend, im, prompt, [], temp) for im in aug_imgs]
    p1 = cdcore.softmax(f1)
    dists = [cdcore.distance(p1, cdcore.softmax(fa), cfg.metric) for fa in f_augs]
    chosen = int(np.argmax(dists))  # first max wins ties
    return chosen, dists, f1, f_augs, aug_imgs


def _step_distribution(f, f_aug, cfg: DecodingConfig):
    """Final per-step sampling distribution and the candidate mask."""
    p_reg = cdcore.softmax(f)
    cand = cdcore.candidate_set(p_reg, cfg.cd.beta)
    if cfg.cd.combine_space == "logit":
        g = cdcore.combined_logits(f, f_aug, cfg.cd.alpha)
        probs = cdcore.softmax(cdcore.mask_logits(g, cand))
    else:
        raw = cdcore.cd_combine(f, f_aug, cfg.cd)
        masked, cand = cdcore.plausibility_mask(p_reg, raw, cfg.cd.beta)
        total = masked.values.sum()
        if total <= 0:
            raise cdcore.EmptySupportError("empty-support: masked scores are all zero")
        probs = masked.values / total
    return probs, cand, p_reg


def decode(
    image: ImageBuffer,
    question: str,
    cfg: DecodingConfig,
    backend: Backend,
    options: list[tuple[str, str]] | None = None,
) -> tuple[str, DecodeTrace]:
    """Full contrastive decoding of one sample."""
    prompt = build_prompt(question, options)
    chosen, dists, f1, f_augs, aug_imgs = select_augmentation(image, prompt, cfg, backend)
    trace = DecodeTrace(
        chosen_aug=cfg.aug_set[chosen],
        chosen_index=chosen,
        distances_at_t1={
            f"{i}:{op.kind}": d for i, (op, d) in enumerate(zip(cfg.aug_set, dists))
        },
    )
    temp = cfg.sampling.temperature
    aug_img = aug_imgs[chosen]
    ids: list[int] = []
    for t in range(1, cfg.max_len + 1):
        if t == 1:
            f, f_aug = f1, f_augs[chosen]
            calls = len(cfg.aug_set) + 1
        else:
            f = _scaled_logits(backend, image, prompt, ids, temp)
            f_aug = _scaled_logits(backend, aug_img, prompt, ids, temp)
            calls = 2
        probs, cand, p_reg = _step_distribution(f, f_aug, cfg)
        token = cdcore.sample_token(probs, cfg.sampling, rng.mix(cfg.seed, "sample", t))
        trace.per_step.append(StepRecord(token, int(cand.sum()), calls))
        trace.gains.append(float(probs[token] - p_reg[token]))
        if token == cfg.eos_id:
            break
        ids.append(token)
    trace.token_ids = list(ids)
    return backend.detokenize(ids), trace


def decode_single_aug(
    image: ImageBuffer,
    question: str,
    aug: AugmentationOp,
    cfg: DecodingConfig,
    backend: Backend,
    options: list[tuple[str, str]] | None = None,
) -> tuple[str, DecodeTrace]:
    """CD with one fixed augmentation (the single-augmentation baselines)."""
    return decode(image, question, replace(cfg, aug_set=(aug,)), backend, options)


def decode_regular(
    image: ImageBuffer,
    question: str,
    cfg: DecodingConfig,
    backend: Backend,
    options: list[tuple[str, str]] | None = None,
) -> tuple[str, list[int]]:
    """Plain sampling from the original image, one backend call per step.

    Uses the same per-step sampling seeds as decode(), so regular vs CD
    comparisons isolate the contrastive effect.
    """
    prompt = build_prompt(question, options)
    temp = cfg.sampling.temperature
    ids: list[int] = []
    for t in range(1, cfg.max_len + 1):
        f = _scaled_logits(backend, image, prompt, ids, temp)
        probs = cdcore.softmax(f)
        token = cdcore.sample_token(probs, cfg.sampling, rng.mix(cfg.seed, "sample", t))
        if token == cfg.eos_id:
            break
        ids.append(token)
    return backend.detokenize(ids), ids


def calibrate(samples, cfg: DecodingConfig, backend: Backend, tau: float = 0.5) -> CalibrationReport:
    """Count step-1 selections over a validation split; keep frequent augs.

    Augmentation i is kept when its selection count c_i >= tau * N / M.
    An empty subset falls back to the single most-selected augmentation
    so the engine never fails closed.
    """
    if not samples:
        raise ValueError("samples must be non-empty")
    if not 0 < tau <= 1:
        raise ValueError("tau must be in (0, 1]")
    counts = [0] * len(cfg.aug_set)
    for s in samples:
        image = getattr(s, "image", None) or ImageBuffer.load_png(s.image_path)
        prompt = build_prompt(s.question, getattr(s, "options", None))
        per_sample = replace(cfg, seed=rng.mix(cfg.seed, "calib", s.id))
        chosen, _, _, _, _ = select_augmentation(image, prompt, per_sample, backend)
        counts[chosen] += 1
    threshold = tau * len(samples) / len(cfg.aug_set)
    kept = [i for i, c in enumerate(counts) if c >= threshold]
    if not kept:
        kept = [int(np.argmax(counts))]
    return CalibrationReport(
        aug_set=tuple(cfg.aug_set),
        counts=counts,
        n_samples=len(samples),
        tau=tau,
        kept_indices=kept,
    )


def decode_with_selection(
    image: ImageBuffer,
    question: str,
    cfg: DecodingConfig,
    backend: Backend,
    calibration: CalibrationReport,
    options: list[tuple[str, str]] | None = None,
) -> tuple[str, DecodeTrace]:
    """decode() restricted to the calibrated augmentation subset."""
    return decode(image, question, replace(cfg, aug_set=calibration.kept), backend, options)
