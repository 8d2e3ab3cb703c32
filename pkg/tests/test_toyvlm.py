import numpy as np
import pytest

from vacode import toyvlm
from vacode.backend import UnsupportedPromptError, InvalidTokenError, build_prompt
from vacode.imgaug import apply, make_op
from vacode.toyvlm import (
    CANVAS,
    EOS_ID,
    SceneSpec,
    ToyBackend,
    VOCAB_SIZE,
    WORD_TO_ID,
    detect,
    inverted_detected_color,
    render,
)


def scene(**kw) -> SceneSpec:
    return SceneSpec(**kw)


class TestRender:
    def test_center_square_readback(self):
        img = render(scene(object_color="red", object_cell=(1, 1)))
        px = img.pixels
        assert px.shape == (CANVAS, CANVAS, 3)
        # 32x32 block centered in the middle cell
        assert tuple(px[48, 48]) == toyvlm.CANONICAL_COLORS["red"]
        assert tuple(px[48, 31]) == (255, 255, 255)
        assert (px[32:64, 32:64] == toyvlm.CANONICAL_COLORS["red"]).all()

    def test_absent_is_all_white(self):
        img = render(scene(object_present=False))
        assert (img.pixels == 255).all()

    def test_deterministic(self):
        a = render(scene(object_color="blue", object_cell=(0, 2)))
        b = render(scene(object_color="blue", object_cell=(0, 2)))
        assert a.tobytes() == b.tobytes()

    def test_corner_anchor_touches_image_corner(self):
        img = render(scene(object_cell=(0, 0), square_size=12, anchor="corner"))
        assert tuple(img.pixels[0, 0]) == toyvlm.CANONICAL_COLORS["red"]
        img = render(scene(object_cell=(2, 2), square_size=12, anchor="corner"))
        assert tuple(img.pixels[-1, -1]) == toyvlm.CANONICAL_COLORS["red"]

    def test_validation(self):
        with pytest.raises(ValueError):
            scene(object_color="purple")
        with pytest.raises(ValueError):
            scene(object_cell=(3, 0))
        with pytest.raises(ValueError):
            scene(square_size=33)


class TestDetect:
    def test_present_color_and_cell(self):
        det = detect(render(scene(object_color="green", object_cell=(2, 0))))
        assert det.present and det.color == "green" and det.cell == (2, 0)
        assert det.side_lr == "left"
        assert det.on_side("bottom") and not det.on_side("top")

    def test_blank_image(self):
        det = detect(render(scene(object_present=False)))
        assert not det.present and det.color is None and det.cell is None

    def test_color_inverted_square_changes_detected_color(self):
        img = render(scene(object_color="red", object_cell=(1, 1)))
        det = detect(apply(make_op("color"), img))
        assert det.present
        assert det.color == inverted_detected_color("red") != "red"
        # inversion leaves position intact
        assert det.cell == (1, 1)

    def test_flip_moves_the_square(self):
        img = render(scene(object_color="red", object_cell=(1, 0)))
        det = detect(apply(make_op("flip"), img))
        assert det.cell == (1, 2)

    def test_edge_map_is_achromatic(self):
        img = render(scene(object_color="blue", object_cell=(1, 1)))
        det = detect(apply(make_op("edge"), img))
        assert det.present and det.color is None and det.cell is None

    def test_inverted_color_map_is_an_involution_free_derangement(self):
        for c in toyvlm.CANONICAL_COLORS:
            assert inverted_detected_color(c) != c


class TestToyBackend:
    def setup_method(self):
        self.soft = ToyBackend()
        self.hard = ToyBackend(hard_mode=True)

    def test_logit_construction_yes_case(self):
        img = render(scene(object_color="red"))
        prompt = build_prompt("Is the square red?")
        z = self.soft.next_logits(img, prompt, [])
        want = np.full(VOCAB_SIZE, toyvlm.BASE_LOGIT)
        want[WORD_TO_ID["Yes"]] += toyvlm.ANSWER_BUMP + toyvlm.PRIOR_BUMP_SOFT
        np.testing.assert_array_equal(z, want)

    def test_hard_mode_prior_beats_answer(self):
        img = render(scene(object_color="red"))
        prompt = build_prompt("Is the square green?")  # truth: No
        z = self.hard.next_logits(img, prompt, [])
        assert np.argmax(z) == WORD_TO_ID["Yes"]  # the prior wins
        z = self.soft.next_logits(img, prompt, [])
        assert np.argmax(z) == WORD_TO_ID["No"]

    def test_unanswerable_gets_no_answer_bump(self):
        img = render(scene(object_present=False))
        z = self.soft.next_logits(img, build_prompt("Is the square red?"), [])
        want = np.full(VOCAB_SIZE, toyvlm.BASE_LOGIT)
        want[WORD_TO_ID["Yes"]] += toyvlm.PRIOR_BUMP_SOFT
        np.testing.assert_array_equal(z, want)

    def test_nonempty_prefix_boosts_eos_only(self):
        img = render(scene())
        z = self.soft.next_logits(img, build_prompt(toyvlm.Q_EXISTENCE), [WORD_TO_ID["Yes"]])
        assert np.argmax(z) == EOS_ID
        assert (np.delete(z, EOS_ID) == toyvlm.BASE_LOGIT).all()

    def test_mcq_options(self):
        img = render(scene(object_color="yellow"))
        opts = [("A", "red"), ("B", "yellow"), ("C", "blue"), ("D", "green")]
        z = self.soft.next_logits(img, build_prompt(toyvlm.Q_COLOR_OPEN, opts), [])
        assert np.argmax(z) == WORD_TO_ID["B"]

    def test_tokenize_round_trip(self):
        for text in ("Yes", "No", "A B C D", "red left"):
            assert self.soft.detokenize(self.soft.tokenize(text)) == text

    def test_tokenize_rejects_unknown_word(self):
        with pytest.raises(InvalidTokenError):
            self.soft.tokenize("banana")
        with pytest.raises(InvalidTokenError):
            self.soft.detokenize([VOCAB_SIZE])

    def test_unsupported_prompt(self):
        img = render(scene())
        with pytest.raises(UnsupportedPromptError):
            self.soft.next_logits(img, build_prompt("What is the meaning of life?"), [])
        with pytest.raises(UnsupportedPromptError):
            self.soft.next_logits(img, "", [])

    def test_info(self):
        info = self.hard.info()
        assert info.vocab_size == VOCAB_SIZE == 32
        assert info.name == "toyvlm-hard"
