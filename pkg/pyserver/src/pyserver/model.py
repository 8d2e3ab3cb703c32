"""Model adapters: anything that can produce next-token logits.

The server is model-agnostic; it only needs this interface.  The stub
adapter is a deterministic hash-based fake used for protocol testing,
the HF adapter wraps a Hugging Face vision-language checkpoint and is
imported lazily so the server has no heavyweight dependencies unless
actually asked to load a real model.
"""

from __future__ import annotations

import abc
import hashlib

import numpy as np


class ModelError(RuntimeError):
    """Model could not be loaded or has no usable head."""


class InvalidTokenError(ValueError):
    pass


class ModelAdapter(abc.ABC):
    name: str
    vocab_size: int

    @abc.abstractmethod
    def next_logits(self, image_rgb: np.ndarray, prompt: str, prefix_ids: list[int]) -> np.ndarray:
        """One forward pass; returns the raw next-token logit row."""

    @abc.abstractmethod
    def tokenize(self, text: str) -> list[int]:
        ...

    @abc.abstractmethod
    def detokenize(self, ids: list[int]) -> str:
        ...


class StubModel(ModelAdapter):
    """Tiny deterministic model for conformance tests.

    Logits are a pure function of (image bytes, prompt, prefix), drawn
    from a hash-seeded generator, so two identical requests always get
    identical rows and no state leaks between requests.
    """

    WORDS = ["<eos>", "Yes", "No", "A", "B", "C", "D", "left", "right", "red", "blue", "unk"]

    def __init__(self):
        self.name = "stub"
        self.vocab_size = len(self.WORDS)
        self._word_to_id = {w: i for i, w in enumerate(self.WORDS)}

    def next_logits(self, image_rgb, prompt, prefix_ids):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(image_rgb).tobytes())
        h.update(prompt.encode("utf-8"))
        h.update(np.asarray(prefix_ids, dtype=np.int64).tobytes())
        seed = int.from_bytes(h.digest()[:8], "little")
        r = np.random.default_rng(seed)
        return r.normal(0.0, 2.0, self.vocab_size)

    def tokenize(self, text):
        ids = []
        for word in text.split():
            if word not in self._word_to_id:
                raise InvalidTokenError(f"invalid-token: {word!r} not in stub vocabulary")
            ids.append(self._word_to_id[word])
        return ids

    def detokenize(self, ids):
        words = []
        for i in ids:
            if not 0 <= i < self.vocab_size:
                raise InvalidTokenError(f"invalid-token: id {i} out of range")
            words.append(self.WORDS[i])
        return " ".join(words)


class HFVisionLanguageModel(ModelAdapter):
    """Wraps a transformers image-text-to-text checkpoint.

    The engine owns all decoding; this class only runs single forward
    passes with the generated prefix appended and returns the raw
    next-token logits.
    """

    def __init__(self, model_id: str, device: str = "cpu"):
        try:
            import torch
            from transformers import AutoModelForImageTextToText, AutoProcessor
        except ImportError as exc:
            raise ModelError(f"transformers extras not installed: {exc}") from exc
        try:
            self._processor = AutoProcessor.from_pretrained(model_id)
            self._model = AutoModelForImageTextToText.from_pretrained(model_id).to(device)
        except Exception as exc:
            raise ModelError(f"cannot load {model_id!r}: {exc}") from exc
        self._torch = torch
        self._device = device
        self._model.eval()
        self.name = model_id
        self.vocab_size = int(self._model.config.get_text_config().vocab_size)

    def next_logits(self, image_rgb, prompt, prefix_ids):
        from PIL import Image

        torch = self._torch
        image = Image.fromarray(image_rgb, mode="RGB")
        inputs = self._processor(images=image, text=prompt, return_tensors="pt")
        if prefix_ids:
            prefix = torch.tensor([prefix_ids], dtype=inputs["input_ids"].dtype)
            inputs["input_ids"] = torch.cat([inputs["input_ids"], prefix], dim=1)
            inputs["attention_mask"] = torch.ones_like(inputs["input_ids"])
        inputs = {k: v.to(self._device) for k, v in inputs.items()}
        with torch.no_grad():
            out = self._model(**inputs)
        return out.logits[0, -1, :].float().cpu().numpy()

    def tokenize(self, text):
        return list(self._processor.tokenizer.encode(text, add_special_tokens=False))

    def detokenize(self, ids):
        if any(not 0 <= i < self.vocab_size for i in ids):
            raise InvalidTokenError(f"invalid-token: id out of range in {ids}")
        return self._processor.tokenizer.decode(ids)


def load_model(identifier: str, device: str = "cpu") -> ModelAdapter:
    if identifier == "stub":
        return StubModel()
    return HFVisionLanguageModel(identifier, device)
