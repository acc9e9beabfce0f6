"""Model backends.

``HfVlmBackend`` drives a pretrained vision-language model through
transformers: greedy generation with the VQA prompt, then one forward pass
over the full sequence to read final-layer hidden states. ``MockBackend``
produces deterministic pseudo-hidden-states from the image bytes so the
pipeline (pooling, store format, determinism, skip logic) is testable
without downloading a model.
"""

import hashlib

import numpy as np

from .extract import BackendResult


class MockBackend:
    """Deterministic stand-in: hidden states keyed by (image bytes, prompt)."""

    def __init__(self, hidden_size=32, image_tokens=6, text_tokens=9,
                 corrupt_ids=()):
        self.hidden_size = hidden_size
        self.image_tokens = image_tokens
        self.text_tokens = text_tokens
        self.corrupt_paths = set(corrupt_ids)

    def run(self, image_path, prompt):
        with open(image_path, "rb") as fh:
            digest = hashlib.sha256(fh.read() + prompt.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little")
        rng = np.random.Generator(np.random.PCG64(seed))
        total = self.text_tokens + self.image_tokens
        hidden = rng.standard_normal((total, self.hidden_size)).astype(np.float32)
        if image_path in self.corrupt_paths:
            hidden[0, 0] = np.nan
        mask = np.zeros(total, dtype=bool)
        mask[2:2 + self.image_tokens] = True
        return BackendResult(hidden=hidden, image_mask=mask)


class HfVlmBackend:
    """transformers-backed extraction at temperature 0 (greedy)."""

    def __init__(self, model_id, device="cpu", max_new_tokens=64):
        import torch
        from transformers import AutoModelForImageTextToText, AutoProcessor

        self.torch = torch
        self.device = device
        self.max_new_tokens = max_new_tokens
        self.processor = AutoProcessor.from_pretrained(model_id)
        self.model = AutoModelForImageTextToText.from_pretrained(
            model_id, torch_dtype=torch.float32).to(device).eval()
        self.hidden_size = int(self.model.config.get_text_config().hidden_size)
        self.image_token_id = self._image_token_id()

    def _image_token_id(self):
        cfg = self.model.config
        for attr in ("image_token_id", "image_token_index"):
            value = getattr(cfg, attr, None)
            if value is not None:
                return int(value)
        token = getattr(self.processor, "image_token", None)
        if token is not None:
            return int(self.processor.tokenizer.convert_tokens_to_ids(token))
        raise RuntimeError("cannot determine the image placeholder token id")

    def run(self, image_path, prompt):
        from PIL import Image

        torch = self.torch
        image = Image.open(image_path).convert("RGB")
        messages = [{
            "role": "user",
            "content": [{"type": "image"}, {"type": "text", "text": prompt}],
        }]
        text = self.processor.apply_chat_template(messages, add_generation_prompt=True)
        inputs = self.processor(text=text, images=[image], return_tensors="pt").to(self.device)

        with torch.no_grad():
            generated = self.model.generate(
                **inputs, do_sample=False, num_beams=1,
                max_new_tokens=self.max_new_tokens)
            full = {"input_ids": generated,
                    "attention_mask": torch.ones_like(generated)}
            # vision features are recomputed for the full-sequence pass
            for key in ("pixel_values", "image_grid_thw", "pixel_attention_mask"):
                if key in inputs:
                    full[key] = inputs[key]
            outputs = self.model(**full, output_hidden_states=True)

        hidden = outputs.hidden_states[-1][0].float().cpu().numpy()
        mask = (generated[0] == self.image_token_id).cpu().numpy()
        return BackendResult(hidden=hidden, image_mask=mask)


def make_backend(name, config):
    if name == "mock":
        return MockBackend()
    if name == "hf":
        return HfVlmBackend(config.model_id, device=config.device,
                            max_new_tokens=config.max_new_tokens)
    raise ValueError(f"unknown backend {name!r}")
