"""Dataset ingestion, benchmark metrics and analysis artifacts.

Datasets are JSONL, one sample per line:

    {"id": str, "image": relative path, "question": str, "label": str,
     "category": str, "options": [["A", str], ...]?, "pair_id": str?}

Yes/no samples carry a label in {Yes, No}; multiple-choice samples
carry option letters.  The MME-style score of a category is
100 * accuracy + 100 * accuracy+, where accuracy+ counts image pairs
with both questions answered correctly.

The analysis operations produce diagnostic artifacts: per-(category,
augmentation) gain and accuracy-drop matrices, the
gain-by-distance-rank curve, and selection frequencies.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import cdcore, rng, toyvlm
from .backend import Backend, build_prompt
from .decoder import (
    CalibrationReport,
    DecodingConfig,
    augmented_images,
    decode,
    decode_regular,
    decode_single_aug,
    decode_with_selection,
    select_augmentation,
)
from .imgaug import AugmentationOp, ImageBuffer, apply

METHODS = ("regular", "single", "vacode_all", "vacode_selection")

FLOAT_FMT = "{:.6f}"


class DatasetError(ValueError):
    """Malformed dataset file or missing referenced image."""


@dataclass(frozen=True)
class EvalSample:
    id: str
    image_path: str
    question: str
    label: str
    category: str
    options: tuple[tuple[str, str], ...] | None = None
    pair_id: str | None = None

    def load_image(self) -> ImageBuffer:
        return _load_image_cached(self.image_path)


_IMAGE_CACHE: dict[str, ImageBuffer] = {}


def _load_image_cached(path: str) -> ImageBuffer:
    img = _IMAGE_CACHE.get(path)
    if img is None:
        img = _IMAGE_CACHE[path] = ImageBuffer.load_png(path)
    return img


def load_dataset(path) -> list[EvalSample]:
    """Read a JSONL dataset, validating every invariant."""
    samples = []
    base = os.path.dirname(os.path.abspath(path))
    pair_counts: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                options = row.get("options")
                sample = EvalSample(
                    id=str(row["id"]),
                    image_path=os.path.join(base, row["image"]),
                    question=str(row["question"]),
                    label=str(row["label"]),
                    category=str(row["category"]),
                    options=tuple((str(a), str(b)) for a, b in options) if options else None,
                    pair_id=str(row["pair_id"]) if row.get("pair_id") is not None else None,
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed sample: {exc}") from exc
            if sample.options is None and sample.label not in ("Yes", "No"):
                raise DatasetError(f"{path}:{lineno}: yes/no sample with label {sample.label!r}")
            if sample.options is not None and sample.label not in [o[0] for o in sample.options]:
                raise DatasetError(f"{path}:{lineno}: label {sample.label!r} not an option letter")
            if not os.path.isfile(sample.image_path):
                raise DatasetError(f"{path}:{lineno}: missing-image {sample.image_path}")
            if sample.pair_id is not None:
                pair_counts[sample.pair_id] = pair_counts.get(sample.pair_id, 0) + 1
            samples.append(sample)
    for pid, n in pair_counts.items():
        if n != 2:
            raise DatasetError(f"{path}: pair_id {pid!r} used by {n} samples, expected 2")
    return samples


# Toy benchmark layout: one scene per pair, two questions per scene.
# Pairings mirror the contrastive-augmentation table: color questions
# break under inversion, existence under cropping, position under flip.
CATEGORY_PAIRED_AUG = {"color": "color", "existence": "crop", "position": "flip"}


def _toy_scene(category: str, idx: int, seed: int) -> toyvlm.SceneSpec:
    u = rng.uniforms(rng.mix(seed, "scene", category, idx), 3)
    colors = list(toyvlm.CANONICAL_COLORS)
    color = colors[int(u[0] * len(colors))]
    if category == "existence":
        # small corner square: a random crop usually removes it
        corners = [(0, 0), (0, 2), (2, 0), (2, 2)]
        cell = corners[int(u[1] * 4)]
        return toyvlm.SceneSpec(color, cell, True, square_size=12, anchor="corner")
    if category == "position":
        cell = (1, 0) if u[1] < 0.5 else (1, 2)
        return toyvlm.SceneSpec(color, cell, True, square_size=32)
    cell = (int(u[1] * 3), int(u[2] * 3))
    return toyvlm.SceneSpec(color, cell, True, square_size=32)


def _toy_questions(category: str, spec: toyvlm.SceneSpec) -> list[tuple[str, str]]:
    """The (question, label) pair for one scene."""
    if category == "existence":
        return [(toyvlm.Q_EXISTENCE, "Yes"), (toyvlm.Q_EMPTY, "No")]
    if category == "position":
        side = "left" if spec.object_cell[1] == 0 else "right"
        other = "right" if side == "left" else "left"
        return [
            (f"Is the square on the {side}?", "Yes"),
            (f"Is the square on the {other}?", "No"),
        ]
    color = spec.object_color
    foil = toyvlm.inverted_detected_color(color)
    return [
        (f"Is the square {color}?", "Yes"),
        (f"Is the square {foil}?", "No"),
    ]


def generate_toy_dataset(n_per_category: int, seed: int, out_dir) -> str:
    """Render images and write samples.jsonl; returns the JSONL path.

    3 categories x n scenes x 2 paired yes/no questions per scene.
    """
    if n_per_category < 1:
        raise ValueError("n_per_category must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    jsonl_path = os.path.join(out_dir, "samples.jsonl")
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for category in ("color", "existence", "position"):
            for idx in range(n_per_category):
                spec = _toy_scene(category, idx, seed)
                rel = f"images/{category}-{idx:04d}.png"
                render_path = os.path.join(out_dir, rel)
                toyvlm.render(spec).save_png(render_path)
                pair_id = f"{category}-{idx:04d}"
                for qi, (question, label) in enumerate(_toy_questions(category, spec)):
                    row = {
                        "id": f"{pair_id}-q{qi}",
                        "image": rel,
                        "question": question,
                        "label": label,
                        "category": category,
                        "pair_id": pair_id,
                    }
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
    return jsonl_path


@dataclass
class SampleResult:
    sample_id: str
    category: str
    pair_id: str | None
    correct: bool
    answer: str
    chosen_aug: str | None = None


@dataclass
class CategoryRow:
    category: str
    n: int
    accuracy: float
    accuracy_plus: float
    mme_score: float


@dataclass
class EvalReport:
    method: str
    seeds: list[int]
    per_seed_rows: dict[int, list[CategoryRow]]
    per_seed_totals: dict[int, float]
    mean_rows: list[CategoryRow]
    mean_total: float
    selection_freq: dict[str, dict[str, int]] = field(default_factory=dict)
    config_snapshot: dict = field(default_factory=dict)
    records: list[SampleResult] = field(default_factory=list)


def answers_match(answer: str, label: str) -> bool:
    """Case-insensitive match of the first generated word against the label."""
    words = answer.split()
    return bool(words) and words[0].lower() == label.lower()


def _aggregate(results: list[SampleResult]) -> list[CategoryRow]:
    rows = []
    for category in sorted({r.category for r in results}):
        cat = [r for r in results if r.category == category]
        acc = sum(r.correct for r in cat) / len(cat)
        pairs: dict[str, list[bool]] = {}
        for r in cat:
            if r.pair_id is not None:
                pairs.setdefault(r.pair_id, []).append(r.correct)
        if pairs:
            acc_plus = sum(all(v) for v in pairs.values()) / len(pairs)
        else:
            acc_plus = acc
        rows.append(CategoryRow(category, len(cat), acc, acc_plus, 100 * acc + 100 * acc_plus))
    return rows


def _decode_sample(sample: EvalSample, method: str, cfg: DecodingConfig,
                   backend: Backend, seed: int, single_aug: AugmentationOp | None,
                   calibration: CalibrationReport | None) -> SampleResult:
    image = sample.load_image()
    per_sample = replace(cfg, seed=rng.mix(seed, "sample-seed", sample.id))
    chosen = None
    if method == "regular":
        answer, _ = decode_regular(image, sample.question, per_sample, backend, sample.options)
    elif method == "single":
        answer, trace = decode_single_aug(
            image, sample.question, single_aug, per_sample, backend, sample.options
        )
        chosen = trace.chosen_aug.kind
    elif method == "vacode_all":
        answer, trace = decode(image, sample.question, per_sample, backend, sample.options)
        chosen = trace.chosen_aug.kind
    elif method == "vacode_selection":
        if calibration is None:
            raise ValueError("vacode_selection requires a calibration report")
        answer, trace = decode_with_selection(
            image, sample.question, per_sample, backend, calibration, sample.options
        )
        chosen = trace.chosen_aug.kind
    else:
        raise ValueError(f"unknown method {method!r}")
    return SampleResult(
        sample_id=sample.id,
        category=sample.category,
        pair_id=sample.pair_id,
        correct=answers_match(answer, sample.label),
        answer=answer,
        chosen_aug=chosen,
    )


def evaluate(
    samples: list[EvalSample],
    method: str,
    cfg: DecodingConfig,
    backend: Backend,
    seeds: list[int] | None = None,
    single_aug: AugmentationOp | None = None,
    calibration: CalibrationReport | None = None,
    workers: int = 1,
    partial_dump_path: str | None = None,
) -> EvalReport:
    """Run one decoding method over the dataset, optionally multi-seed.

    A failure mid-run dumps the records collected so far (abort-and-dump
    rather than skip) and re-raises.
    """
    if not samples:
        raise ValueError("samples must be non-empty")
    seeds = list(seeds) if seeds else [cfg.seed]
    per_seed_rows: dict[int, list[CategoryRow]] = {}
    per_seed_totals: dict[int, float] = {}
    selection: dict[str, dict[str, int]] = {}
    all_records: list[SampleResult] = []
    try:
        for seed in seeds:
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    results = list(
                        pool.map(
                            lambda s: _decode_sample(
                                s, method, cfg, backend, seed, single_aug, calibration
                            ),
                            samples,
                        )
                    )
            else:
                results = [
                    _decode_sample(s, method, cfg, backend, seed, single_aug, calibration)
                    for s in samples
                ]
            # canonical order regardless of worker scheduling
            results.sort(key=lambda r: r.sample_id)
            all_records.extend(results)
            rows = _aggregate(results)
            per_seed_rows[seed] = rows
            per_seed_totals[seed] = sum(r.mme_score for r in rows)
            for r in results:
                if r.chosen_aug is not None:
                    selection.setdefault(r.category, {})
                    selection[r.category][r.chosen_aug] = (
                        selection[r.category].get(r.chosen_aug, 0) + 1
                    )
    except Exception:
        if partial_dump_path:
            _dump_partial(partial_dump_path, method, all_records)
        raise
    categories = [row.category for row in per_seed_rows[seeds[0]]]
    mean_rows = []
    for i, category in enumerate(categories):
        accs = [per_seed_rows[s][i].accuracy for s in seeds]
        plus = [per_seed_rows[s][i].accuracy_plus for s in seeds]
        mme = [per_seed_rows[s][i].mme_score for s in seeds]
        n = per_seed_rows[seeds[0]][i].n
        mean_rows.append(
            CategoryRow(category, n, float(np.mean(accs)), float(np.mean(plus)), float(np.mean(mme)))
        )
    return EvalReport(
        method=method,
        seeds=seeds,
        per_seed_rows=per_seed_rows,
        per_seed_totals=per_seed_totals,
        mean_rows=mean_rows,
        mean_total=float(np.mean(list(per_seed_totals.values()))),
        selection_freq=selection,
        records=all_records,
    )


def _dump_partial(path: str, method: str, records: list[SampleResult]) -> None:
    payload = {
        "method": method,
        "complete": False,
        "records": [r.__dict__ for r in records],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def circular_eval(
    samples: list[EvalSample],
    method: str,
    cfg: DecodingConfig,
    backend: Backend,
    seeds: list[int] | None = None,
    single_aug: AugmentationOp | None = None,
    calibration: CalibrationReport | None = None,
) -> EvalReport:
    """Multiple-choice scoring over all rotations of the option letters.

    A sample with k options counts as correct only when every rotation
    is answered correctly.
    """
    for s in samples:
        if not s.options or len(s.options) < 2:
            raise ValueError(f"not-mcq: sample {s.id} has no options")
    seeds = list(seeds) if seeds else [cfg.seed]
    per_seed_rows: dict[int, list[CategoryRow]] = {}
    per_seed_totals: dict[int, float] = {}
    records: list[SampleResult] = []
    for seed in seeds:
        results = []
        for s in samples:
            letters = [o[0] for o in s.options]
            texts = [o[1] for o in s.options]
            label_text = texts[letters.index(s.label)]
            k = len(letters)
            all_correct = True
            for rot in range(k):
                rotated = tuple(zip(letters, texts[rot:] + texts[:rot]))
                rot_label = letters[(texts[rot:] + texts[:rot]).index(label_text)]
                rs = replace(s, options=rotated, label=rot_label, id=f"{s.id}#r{rot}")
                res = _decode_sample(rs, method, cfg, backend, seed, single_aug, calibration)
                if not res.correct:
                    all_correct = False
            results.append(
                SampleResult(s.id, s.category, s.pair_id, all_correct, "", None)
            )
        results.sort(key=lambda r: r.sample_id)
        records.extend(results)
        rows = _aggregate(results)
        per_seed_rows[seed] = rows
        per_seed_totals[seed] = sum(r.mme_score for r in rows)
    categories = [row.category for row in per_seed_rows[seeds[0]]]
    mean_rows = []
    for i, category in enumerate(categories):
        vals = [per_seed_rows[s][i] for s in seeds]
        mean_rows.append(
            CategoryRow(
                category,
                vals[0].n,
                float(np.mean([v.accuracy for v in vals])),
                float(np.mean([v.accuracy_plus for v in vals])),
                float(np.mean([v.mme_score for v in vals])),
            )
        )
    return EvalReport(
        method=method,
        seeds=seeds,
        per_seed_rows=per_seed_rows,
        per_seed_totals=per_seed_totals,
        mean_rows=mean_rows,
        mean_total=float(np.mean(list(per_seed_totals.values()))),
        records=records,
    )


@dataclass
class GainAnalysis:
    """Per-(category, augmentation) matrices plus the rank curve."""

    categories: list[str]
    aug_kinds: list[str]
    mean_gain: np.ndarray  # (category, aug)
    original_accuracy: dict[str, float]  # regular decoding, original image
    augmented_accuracy: np.ndarray  # (category, aug) regular decoding on augmented images
    rank_mean_gain: list[float]  # mean gain of the rank-r-by-distance augmentation


def analyze_gain(
    samples: list[EvalSample],
    cfg: DecodingConfig,
    backend: Backend,
    seeds: list[int] | None = None,
) -> GainAnalysis:
    """First-token gain/distance analysis over every augmentation.

    For each sample and augmentation: the gain of the ground-truth
    token under unmasked CD, and whether regular sampling from the
    augmented image alone stays correct.  Ranks are by step-1 distance,
    descending.
    """
    seeds = list(seeds) if seeds else [cfg.seed]
    categories = sorted({s.category for s in samples})
    kinds = [op.kind for op in cfg.aug_set]
    m = len(kinds)
    gain_sum = np.zeros((len(categories), m))
    aug_correct = np.zeros((len(categories), m))
    orig_correct = {c: 0.0 for c in categories}
    counts = {c: 0 for c in categories}
    rank_gain_sum = np.zeros(m)
    rank_n = 0
    cat_index = {c: i for i, c in enumerate(categories)}
    temp = cfg.sampling.temperature
    for seed in seeds:
        for s in samples:
            image = s.load_image()
            prompt = build_prompt(s.question, s.options)
            sample_seed = rng.mix(seed, "sample-seed", s.id)
            y_gt = backend.tokenize(s.label)[0]
            aug_imgs = augmented_images(image, cfg.aug_set, sample_seed)
            f = backend.next_logits(image, prompt, []) / temp
            p_reg = cdcore.softmax(f)
            ci = cat_index[s.category]
            counts[s.category] += 1
            tok_seed = rng.mix(sample_seed, "sample", 1)
            tok = cdcore.sample_token(p_reg, cfg.sampling, tok_seed)
            orig_correct[s.category] += float(tok == y_gt)
            gains, dists = [], []
            for j, aug_img in enumerate(aug_imgs):
                fa = backend.next_logits(aug_img, prompt, []) / temp
                p_aug = cdcore.softmax(fa)
                p_cd = cdcore.cd_combine(f, fa, cfg.cd).values
                g = cdcore.gain(p_cd, p_reg, y_gt)
                gains.append(g)
                dists.append(cdcore.distance(p_reg, p_aug, cfg.metric))
                gain_sum[ci, j] += g
                tok = cdcore.sample_token(p_aug, cfg.sampling, tok_seed)
                aug_correct[ci, j] += float(tok == y_gt)
            order = np.lexsort((np.arange(m), -np.asarray(dists)))
            for r, j in enumerate(order):
                rank_gain_sum[r] += gains[j]
            rank_n += 1
    n_per_cat = np.array([counts[c] for c in categories], dtype=np.float64)[:, None]
    return GainAnalysis(
        categories=categories,
        aug_kinds=kinds,
        mean_gain=gain_sum / n_per_cat,
        original_accuracy={c: orig_correct[c] / counts[c] for c in categories},
        augmented_accuracy=aug_correct / n_per_cat,
        rank_mean_gain=list(rank_gain_sum / rank_n),
    )


def ablate_distance(
    samples: list[EvalSample],
    cfg: DecodingConfig,
    backend: Backend,
    seeds: list[int] | None = None,
    metrics: tuple[str, ...] = cdcore.DISTANCE_METRICS,
) -> dict[str, float]:
    """Mean first-token gain of the selected augmentation, per metric."""
    seeds = list(seeds) if seeds else [cfg.seed]
    out = {}
    for metric in metrics:
        mcfg = replace(cfg, metric=metric)
        total, n = 0.0, 0
        for seed in seeds:
            for s in samples:
                image = s.load_image()
                prompt = build_prompt(s.question, s.options)
                per_sample = replace(mcfg, seed=rng.mix(seed, "sample-seed", s.id))
                y_gt = backend.tokenize(s.label)[0]
                chosen, _, f1, f_augs, _ = select_augmentation(image, prompt, per_sample, backend)
                p_reg = cdcore.softmax(f1)
                p_cd = cdcore.cd_combine(f1, f_augs[chosen], cfg.cd).values
                total += cdcore.gain(p_cd, p_reg, y_gt)
                n += 1
        out[metric] = total / n
    return out


def _fmt(x: float) -> str:
    return FLOAT_FMT.format(x)


def write_report(report: EvalReport, out_dir) -> None:
    """Persist report.csv, report.md and selection_freq.csv."""
    os.makedirs(out_dir, exist_ok=True)
    lines = ["seed,category,n,accuracy,accuracy_plus,mme_score"]
    for seed in report.seeds:
        for row in report.per_seed_rows[seed]:
            lines.append(
                f"{seed},{row.category},{row.n},{_fmt(row.accuracy)},"
                f"{_fmt(row.accuracy_plus)},{_fmt(row.mme_score)}"
            )
        lines.append(f"{seed},TOTAL,,,,{_fmt(report.per_seed_totals[seed])}")
    for row in report.mean_rows:
        lines.append(
            f"mean,{row.category},{row.n},{_fmt(row.accuracy)},"
            f"{_fmt(row.accuracy_plus)},{_fmt(row.mme_score)}"
        )
    lines.append(f"mean,TOTAL,,,,{_fmt(report.mean_total)}")
    with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    md = [
        f"# Evaluation report: {report.method}",
        "",
        f"Seeds: {', '.join(str(s) for s in report.seeds)} "
        f"({len(report.seeds)}-seed mean)",
        "",
        "| category | accuracy | accuracy+ | score |",
        "|---|---|---|---|",
    ]
    for row in report.mean_rows:
        md.append(
            f"| {row.category} | {_fmt(row.accuracy)} | {_fmt(row.accuracy_plus)} "
            f"| {_fmt(row.mme_score)} |"
        )
    md.append(f"| **total** |  |  | {_fmt(report.mean_total)} |")
    with open(os.path.join(out_dir, "report.md"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(md) + "\n")

    if report.selection_freq:
        kinds = sorted({k for v in report.selection_freq.values() for k in v})
        lines = ["category," + ",".join(kinds)]
        for category in sorted(report.selection_freq):
            row = report.selection_freq[category]
            lines.append(category + "," + ",".join(str(row.get(k, 0)) for k in kinds))
        with open(os.path.join(out_dir, "selection_freq.csv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def write_gain_analysis(analysis: GainAnalysis, out_dir) -> None:
    """Persist gain_matrix.csv and distance_rank.csv."""
    os.makedirs(out_dir, exist_ok=True)
    lines = ["category,original_accuracy," + ",".join(
        f"gain_{k}" for k in analysis.aug_kinds
    ) + "," + ",".join(f"aug_accuracy_{k}" for k in analysis.aug_kinds)]
    for i, category in enumerate(analysis.categories):
        lines.append(
            category
            + ","
            + _fmt(analysis.original_accuracy[category])
            + ","
            + ",".join(_fmt(g) for g in analysis.mean_gain[i])
            + ","
            + ",".join(_fmt(a) for a in analysis.augmented_accuracy[i])
        )
    with open(os.path.join(out_dir, "gain_matrix.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    lines = ["rank,mean_gain"]
    for r, g in enumerate(analysis.rank_mean_gain, start=1):
        lines.append(f"{r},{_fmt(g)}")
    with open(os.path.join(out_dir, "distance_rank.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
