"""Full-model bundle: tokenizer/encoder, prompt embeddings, decoder.

Also implements the fixed-resolution protocol: inputs are resized
aspect-preserving to the model's square input size, zero-padded on the
short side, and predictions are cropped and resized back to the original
resolution before any metric sees them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import encoder as enc
from . import prompts as pr
from .decoder import DecoderParams, Heatmap, decode
from .grid import GridError, Tensor, no_grad, ops

ENCODER_KINDS = ("transformer", "patch-mean")


@dataclass
class ModelState:
    """Everything trainable plus the geometry needed to run it."""

    encoder_kind: str
    encoder: enc.EncoderParams | None
    text: pr.TextTokens
    decoder: DecoderParams
    patch_size: int
    image_size: int
    enc_dim: int

    def __post_init__(self):
        if self.encoder_kind not in ENCODER_KINDS:
            raise GridError(f"unknown encoder kind {self.encoder_kind!r}")
        if self.encoder_kind == "transformer" and self.encoder is None:
            raise GridError("transformer encoder kind needs encoder parameters")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    def tokens_for(self, image: Tensor) -> enc.PatchTokens:
        if self.encoder_kind == "transformer":
            return enc.encode(image, self.encoder)
        return enc.mean_pool_tokens(image, self.patch_size, self.enc_dim)

    def predict(self, image: Tensor) -> Heatmap:
        return decode(self.tokens_for(image), self.text, self.decoder)

    def predict_scores(self, image: Tensor) -> np.ndarray:
        with no_grad():
            return self.predict(image).scores.data

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.encoder is not None:
            out.update(self.encoder.named_tensors("encoder"))
        if self.text.trainable:
            out["text.embeddings"] = self.text.embeddings
        out.update(self.decoder.named_tensors("decoder"))
        return out

    def replace_tensors(self, lookup: dict[str, Tensor]) -> "ModelState":
        new_encoder = (
            self.encoder.replace_tensors(lookup, "encoder") if self.encoder is not None else None
        )
        new_text = (
            pr.TextTokens(embeddings=lookup["text.embeddings"], trainable=True)
            if self.text.trainable and "text.embeddings" in lookup
            else self.text
        )
        return ModelState(
            encoder_kind=self.encoder_kind,
            encoder=new_encoder,
            text=new_text,
            decoder=self.decoder.replace_tensors(lookup, "decoder"),
            patch_size=self.patch_size,
            image_size=self.image_size,
            enc_dim=self.enc_dim,
        )

    def describe(self) -> dict:
        return {
            "encoder_kind": self.encoder_kind,
            "patch_size": self.patch_size,
            "image_size": self.image_size,
            "enc_dim": self.enc_dim,
            "enc_depth": len(self.encoder.layers) if self.encoder else 0,
            "enc_heads": self.encoder.layers[0].n_heads if self.encoder and self.encoder.layers else 0,
            "text_dim": self.text.dim,
            "num_prompts": self.text.num_prompts,
            "dec_dim": self.decoder.dim,
            "dec_depth": len(self.decoder.layers),
            "dec_heads": self.decoder.layers[0].n_heads if self.decoder.layers else 0,
            "rotations": self.decoder.n,
            "channels": self.decoder.channels,
        }

    @staticmethod
    def from_description(desc: dict) -> "ModelState":
        return build_model(
            seed=0,
            encoder_kind=desc["encoder_kind"],
            image_size=desc["image_size"],
            patch_size=desc["patch_size"],
            enc_dim=desc["enc_dim"],
            enc_depth=desc["enc_depth"],
            enc_heads=desc["enc_heads"] or 4,
            text_dim=desc["text_dim"],
            num_prompts=desc["num_prompts"],
            dec_dim=desc["dec_dim"],
            dec_depth=desc["dec_depth"],
            dec_heads=desc["dec_heads"] or 4,
            rotations=desc["rotations"],
            channels=list(desc["channels"]),
            prompt_set=None,
        )


def build_model(
    seed: int,
    encoder_kind: str = "transformer",
    image_size: int = 128,
    patch_size: int = 8,
    enc_dim: int = 32,
    enc_depth: int = 2,
    enc_heads: int = 4,
    text_dim: int = 64,
    num_prompts: int = 8,
    dec_dim: int = 16,
    dec_depth: int = 2,
    dec_heads: int = 4,
    rotations: int = 8,
    channels: list[int] | None = None,
    prompt_set: pr.PromptSet | None = None,
    inject_positional: bool = False,
) -> ModelState:
    """Fresh model; prompt embeddings come from the prompt set when given."""
    rng = np.random.default_rng(seed)
    grid = image_size // patch_size
    if grid < 1:
        raise GridError(f"image size {image_size} below one patch of {patch_size}px")
    encoder_params = None
    if encoder_kind == "transformer":
        encoder_params = enc.EncoderParams.create(
            rng, patch_size=patch_size, grid_size=grid, dim=enc_dim, depth=enc_depth, n_heads=enc_heads
        )
    if prompt_set is not None:
        text = pr.embed_prompts(prompt_set, text_dim=text_dim, seed=seed)
        num_prompts = text.num_prompts
    else:
        text = pr.TextTokens(
            embeddings=Tensor(
                (np.random.default_rng([seed, 31]).standard_normal((num_prompts, text_dim)) * 0.2).astype(
                    np.float32
                ),
                requires_grad=True,
            )
        )
    decoder_params = DecoderParams.create(
        rng,
        enc_dim=enc_dim,
        text_dim=text_dim,
        num_prompts=num_prompts,
        dim=dec_dim,
        depth=dec_depth,
        n_heads=dec_heads,
        n=rotations,
        channels=channels,
        inject_positional=inject_positional,
    )
    return ModelState(
        encoder_kind=encoder_kind,
        encoder=encoder_params,
        text=text,
        decoder=decoder_params,
        patch_size=patch_size,
        image_size=image_size,
        enc_dim=enc_dim,
    )


# ---------------------------------------------------------------------------
# fixed-resolution input protocol
# ---------------------------------------------------------------------------


def prepare_image(image: Tensor, target: int):
    """Aspect-preserving resize to `target` on the long side, zero-pad the rest.

    Returns the padded square image and the bookkeeping needed to undo it:
    the resized content extent and the original size.
    """
    _, h, w = image.shape
    if h >= w:
        new_h, new_w = target, max(1, round(w * target / h))
    else:
        new_h, new_w = max(1, round(h * target / w)), target
    with no_grad():
        resized = ops.bilinear_resize(image, new_h, new_w)
        padded = np.zeros((3, target, target), dtype=np.float32)
        padded[:, :new_h, :new_w] = resized.data
    return Tensor(padded), (new_h, new_w), (h, w)


def restore_heatmap(scores: np.ndarray, content: tuple[int, int], original: tuple[int, int]) -> np.ndarray:
    """Crop the padding off a prediction and resize back to the original size."""
    new_h, new_w = content
    crop = scores[:new_h, :new_w]
    with no_grad():
        back = ops.bilinear_resize(Tensor(np.ascontiguousarray(crop)), original[0], original[1])
    return back.data


def predict_full(model: ModelState, image: Tensor) -> np.ndarray:
    """Run the fixed-resolution protocol end to end on an arbitrary image."""
    padded, content, original = prepare_image(image, model.image_size)
    scores = model.predict_scores(padded)
    return restore_heatmap(scores, content, original)
