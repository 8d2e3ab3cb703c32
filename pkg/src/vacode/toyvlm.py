"""A deterministic synthetic vision-language model.

The toy model renders one colored square on a white canvas and answers
templated questions about its color, position and existence purely from
the pixels it is shown, plus a fixed language-prior bias that ignores
the pixels entirely.  That split is what makes contrastive decoding
demonstrable at desk scale: the prior term survives augmentation, the
pixel term does not.

Logit construction (vocab of 32 word-level tokens):

* first generated token: base -4.0 everywhere, +ANSWER_BUMP (8.0) on
  the token answering the question as computed from the shown pixels,
  +prior bias (5.0, or 9.0 in hard mode) on the template's designated
  prior token.  If the pixels admit no answer (e.g. no colored object
  left to localise), no answer bump is applied.
* any later token: base -4.0 everywhere, +8.0 on <eos>, so sequences
  are one answer word long.

Object detection: a pixel is "object" when max(channel) - min(channel)
> 40 or luma < 200.  Chromatic object pixels (the saturation clause)
vote for their nearest canonical color; the most popular class is the
detected square, its pixel centroid's 3x3 grid cell gives the position.
Achromatic object pixels (inverted backgrounds, gray fills, edge maps)
establish existence but carry no color or position.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .backend import Backend, BackendDescriptor, InvalidTokenError, UnsupportedPromptError
from .backend import YESNO_INSTRUCTION
from .imgaug import ImageBuffer

VOCAB_SIZE = 32
EOS = "<eos>"

_WORDS = [
    EOS, "Yes", "No",
    "red", "green", "blue", "yellow",
    "left", "right", "top", "bottom",
    "A", "B", "C", "D",
]
VOCAB: list[str] = _WORDS + [f"<pad{i}>" for i in range(VOCAB_SIZE - len(_WORDS))]
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
EOS_ID = 0

CANONICAL_COLORS = {
    "red": (220, 30, 30),
    "green": (30, 220, 30),
    "blue": (30, 30, 220),
    "yellow": (220, 220, 30),
}
_COLOR_NAMES = list(CANONICAL_COLORS)
_COLOR_RGB = np.array(list(CANONICAL_COLORS.values()), dtype=np.float64)

BACKGROUND = (255, 255, 255)
CANVAS = 96
GRID = 3

BASE_LOGIT = -4.0
ANSWER_BUMP = 8.0
PRIOR_BUMP_SOFT = 5.0
PRIOR_BUMP_HARD = 9.0
EOS_BUMP = 8.0

# Fewer chromatic/object pixels than this means "nothing there".
MIN_BLOB_PIXELS = 8

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SceneSpec:
    """One square on a white canvas, positioned on a 3x3 grid."""

    object_color: str = "red"
    object_cell: tuple[int, int] = (1, 1)  # (row, col)
    object_present: bool = True
    square_size: int = 32
    anchor: str = "center"  # "center" or "corner": placement inside the cell

    def __post_init__(self):
        if self.object_present:
            if self.object_color not in CANONICAL_COLORS:
                raise ValueError(f"unknown color {self.object_color!r}")
            r, c = self.object_cell
            if not (0 <= r < GRID and 0 <= c < GRID):
                raise ValueError(f"cell {self.object_cell} outside {GRID}x{GRID} grid")
            if not 1 <= self.square_size <= CANVAS // GRID:
                raise ValueError("square must fit inside one grid cell")
            if self.anchor not in ("center", "corner"):
                raise ValueError(f"unknown anchor {self.anchor!r}")


def render(spec: SceneSpec) -> ImageBuffer:
    """Rasterise a scene; deterministic, 96x96 RGB."""
    px = np.full((CANVAS, CANVAS, 3), BACKGROUND, dtype=np.uint8)
    if spec.object_present:
        cell = CANVAS // GRID
        row, col = spec.object_cell
        s = spec.square_size
        if spec.anchor == "center":
            y0 = row * cell + (cell - s) // 2
            x0 = col * cell + (cell - s) // 2
        else:
            # pinned to the cell corner nearest the image corner
            y0 = row * cell if row < GRID - 1 else (row + 1) * cell - s
            x0 = col * cell if col < GRID - 1 else (col + 1) * cell - s
        px[y0 : y0 + s, x0 : x0 + s, :] = CANONICAL_COLORS[spec.object_color]
    return ImageBuffer.from_array(px)


@dataclass(frozen=True)
class Detection:
    """What the toy model sees: presence, and a color+cell if chromatic."""

    present: bool
    color: str | None
    cell: tuple[int, int] | None

    @property
    def side_lr(self) -> str | None:
        if self.cell is None:
            return None
        col = self.cell[1]
        return "left" if col == 0 else "right" if col == GRID - 1 else None

    def on_side(self, side: str) -> bool:
        if self.cell is None:
            return False
        row, col = self.cell
        return {
            "left": col == 0,
            "right": col == GRID - 1,
            "top": row == 0,
            "bottom": row == GRID - 1,
        }[side]


def detect(img: ImageBuffer) -> Detection:
    px = img.pixels.astype(np.float64)
    sat = px.max(axis=2) - px.min(axis=2)
    luma = px @ _LUMA
    obj = (sat > 40) | (luma < 200)
    present = int(obj.sum()) >= MIN_BLOB_PIXELS

    chrom = sat > 40
    if int(chrom.sum()) < MIN_BLOB_PIXELS:
        return Detection(present, None, None)

    ys, xs = np.nonzero(chrom)
    rgb = px[ys, xs]  # (n, 3)
    d2 = ((rgb[:, None, :] - _COLOR_RGB[None, :, :]) ** 2).sum(axis=2)
    classes = np.argmin(d2, axis=1)  # argmin takes the first on ties
    counts = np.bincount(classes, minlength=len(_COLOR_NAMES))
    dominant = int(np.argmax(counts))
    keep = classes == dominant
    cy = float(ys[keep].mean())
    cx = float(xs[keep].mean())
    cell_h = img.height / GRID
    cell_w = img.width / GRID
    cell = (min(GRID - 1, int(cy / cell_h)), min(GRID - 1, int(cx / cell_w)))
    return Detection(present, _COLOR_NAMES[dominant], cell)


_OPTION_RE = re.compile(r"^([A-D])\.\s+(.+)$")
_COLOR_YN_RE = re.compile(r"^Is the square (red|green|blue|yellow)\?$")
_POS_YN_RE = re.compile(r"^Is the square on the (left|right|top|bottom)\?$")

Q_EXISTENCE = "Is there a square in the image?"
Q_EMPTY = "Is the image empty?"
Q_COLOR_OPEN = "What color is the square?"
Q_POS_OPEN = "Where is the square?"
Q_SIDE_OPEN = "Which side is the square on?"


def _parse_prompt(prompt: str):
    """Split a prompt into (question line, option list)."""
    lines = [ln for ln in prompt.splitlines() if ln.strip()]
    if not lines:
        raise UnsupportedPromptError("unsupported-prompt: empty prompt")
    question = lines[0].strip()
    options = []
    for ln in lines[1:]:
        m = _OPTION_RE.match(ln.strip())
        if m:
            options.append((m.group(1), m.group(2).strip()))
        elif ln.strip() != YESNO_INSTRUCTION:
            raise UnsupportedPromptError(f"unsupported-prompt: unexpected line {ln!r}")
    return question, options


def _open_answer(question: str, det: Detection) -> tuple[str | None, str]:
    """Answer word (or None if unanswerable) and prior word for open templates."""
    if question == Q_COLOR_OPEN:
        return det.color, "green"
    if question in (Q_POS_OPEN, Q_SIDE_OPEN):
        if det.cell is None:
            return None, "left"
        row, col = det.cell
        if col == 0:
            return "left", "left"
        if col == GRID - 1:
            return "right", "left"
        if row == 0:
            return "top", "left"
        if row == GRID - 1:
            return "bottom", "left"
        return None, "left"
    raise UnsupportedPromptError(f"unsupported-prompt: {question!r}")


def answer_and_prior(prompt: str, det: Detection) -> tuple[str | None, str]:
    """The toy scoring rule: pixel-derived answer word and prior word."""
    question, options = _parse_prompt(prompt)
    if options:
        word, _ = _open_answer(question, det)
        if word is None:
            return None, "A"
        for letter, text in options:
            if text == word:
                return letter, "A"
        return None, "A"

    if question == Q_EXISTENCE:
        return ("Yes" if det.present else "No"), "Yes"
    if question == Q_EMPTY:
        return ("No" if det.present else "Yes"), "Yes"
    m = _COLOR_YN_RE.match(question)
    if m:
        if det.color is None:
            return None, "Yes"
        return ("Yes" if det.color == m.group(1) else "No"), "Yes"
    m = _POS_YN_RE.match(question)
    if m:
        if det.cell is None:
            return None, "Yes"
        return ("Yes" if det.on_side(m.group(1)) else "No"), "Yes"
    word, prior = _open_answer(question, det)
    return word, prior


class ToyBackend(Backend):
    """In-process deterministic backend over the toy scoring rule."""

    def __init__(self, hard_mode: bool = False):
        self.hard_mode = hard_mode
        self._prior_bump = PRIOR_BUMP_HARD if hard_mode else PRIOR_BUMP_SOFT

    def next_logits(self, image: ImageBuffer, prompt: str, prefix: list[int]) -> np.ndarray:
        if not prompt:
            raise UnsupportedPromptError("unsupported-prompt: empty prompt")
        logits = np.full(VOCAB_SIZE, BASE_LOGIT)
        if prefix:
            logits[EOS_ID] += EOS_BUMP
            return logits
        answer, prior = answer_and_prior(prompt, detect(image))
        if answer is not None:
            logits[WORD_TO_ID[answer]] += ANSWER_BUMP
        logits[WORD_TO_ID[prior]] += self._prior_bump
        return logits

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            if word not in WORD_TO_ID:
                raise InvalidTokenError(f"invalid-token: {word!r} not in toy vocabulary")
            ids.append(WORD_TO_ID[word])
        return ids

    def detokenize(self, ids: list[int]) -> str:
        words = []
        for i in ids:
            if not 0 <= i < VOCAB_SIZE:
                raise InvalidTokenError(f"invalid-token: id {i} out of range")
            words.append(VOCAB[i])
        return " ".join(words)

    def info(self) -> BackendDescriptor:
        name = "toyvlm-hard" if self.hard_mode else "toyvlm"
        return BackendDescriptor(name=name, vocab_size=VOCAB_SIZE, endpoint="in-process:toy")


def inverted_detected_color(color: str) -> str:
    """The color the detector reports after inverting a ``color`` square."""
    rgb = np.array(CANONICAL_COLORS[color], dtype=np.float64)
    inv = 255.0 - rgb
    d2 = ((inv[None, :] - _COLOR_RGB) ** 2).sum(axis=1)
    return _COLOR_NAMES[int(np.argmin(d2))]
