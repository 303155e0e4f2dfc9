"""Projection, L2-normalization, concatenation and classification; the full model.

Variants: ``m1`` uses the image branch only, ``m2`` the report branch only,
``m3`` concatenates both normalized embeddings as ``[vision || text]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig, VARIANTS
from .errors import ShapeMismatch, VariantMismatch
from .image_encoder import QFormer, VitEncoder
from .nn import MLP, Module, Parameter
from .report_encoder import ReportEncoder
from .tensor import Tensor


class FusionHead(Module):
    def __init__(self, variant: str, d_image: int, d_text: int, d_proj: int, rng: np.random.Generator,
                 proj_depth: int = 1, classifier_depth: int = 1, n_classes: int = 2):
        if variant not in VARIANTS:
            raise VariantMismatch(f"unknown variant {variant!r}")
        self.variant = variant
        self.vision_proj = MLP(d_image, d_proj, proj_depth, rng)
        self.text_proj = MLP(d_text, d_proj, proj_depth, rng)
        width = 2 * d_proj if variant == "m3" else d_proj
        self.classifier = MLP(width, n_classes, classifier_depth, rng, hidden=d_proj)


@dataclass
class JointFeature:
    g: Tensor


@dataclass
class Prediction:
    logits: Tensor
    probs: Tensor


def project_vision(head: FusionHead, v: Tensor) -> Tensor:
    return head.vision_proj(v)


def project_text(head: FusionHead, t: Tensor) -> Tensor:
    return head.text_proj(t)


def l2_normalize(x: Tensor) -> Tensor:
    return T.l2_normalize(x, axis=-1)


def fuse(head: FusionHead, v_norm: Tensor | None = None, t_norm: Tensor | None = None) -> JointFeature:
    needed = {"m1": (True, False), "m2": (False, True), "m3": (True, True)}[head.variant]
    given = (v_norm is not None, t_norm is not None)
    if given != needed:
        raise VariantMismatch(
            f"variant {head.variant} expects image={needed[0]}, text={needed[1]}; "
            f"got image={given[0]}, text={given[1]}"
        )
    if head.variant == "m3":
        return JointFeature(T.concat([v_norm, t_norm], axis=-1))
    return JointFeature(v_norm if v_norm is not None else t_norm)


def classify(head: FusionHead, joint: JointFeature) -> Prediction:
    g = joint.g
    if g.shape[-1] != head.classifier.n_in:
        raise ShapeMismatch(f"joint feature width {g.shape[-1]} != classifier input {head.classifier.n_in}")
    logits = head.classifier(g)
    return Prediction(logits, T.softmax(logits, axis=-1))


def cross_entropy(pred: Prediction, labels) -> Tensor:
    """Mean cross-entropy over the batch, computed from logits via log-softmax."""
    return T.cross_entropy(pred.logits, labels)


@dataclass
class ForwardOutput:
    prediction: Prediction
    loss: Tensor | None
    v_norm: Tensor | None
    t_norm: Tensor | None
    joint: JointFeature


class MMGCNet(Module):
    """Image encoder + Q-Former, report encoder and fusion head for one variant.

    All sub-modules are always constructed (in a fixed order, from one seeded
    generator) so that m1/m2/m3 built from the same seed share initial encoder
    weights; the variant decides which branches run.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.d_model
        self.vit = VitEncoder(config.channels, config.image_size, config.patch_size, d,
                              config.vit_depth, config.vit_heads, rng)
        self.qformer = QFormer(config.n_queries, d, config.qformer_depth, config.vit_heads, rng)
        self.text = ReportEncoder(config.vocab_size, config.text_dim, config.text_depth,
                                  config.text_heads, config.max_len, rng)
        self.head = FusionHead(config.variant, d, config.text_dim, config.proj_dim, rng,
                               config.proj_depth, config.classifier_depth, config.n_classes)
        if config.freeze_image:
            self.vit.set_trainable(False)
            self.qformer.set_trainable(False)
        if config.freeze_text:
            self.text.set_trainable(False)

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def uses_image(self) -> bool:
        return self.variant in ("m1", "m3")

    @property
    def uses_text(self) -> bool:
        return self.variant in ("m2", "m3")

    def trainable_parameters(self) -> list[Parameter]:
        """Parameters the optimizer should touch: unused branches and frozen encoders excluded."""
        groups = [self.head.classifier]
        if self.uses_image:
            groups.append(self.head.vision_proj)
            if not self.config.freeze_image:
                groups += [self.vit, self.qformer]
        if self.uses_text:
            groups.append(self.head.text_proj)
            if not self.config.freeze_text:
                groups.append(self.text)
        wanted = {id(p) for g in groups for p in g.parameters()}
        return [p for p in self.parameters() if id(p) in wanted]

    def encode_image(self, images) -> Tensor:
        return self.qformer(self.vit(T.as_tensor(images))).mean(axis=-2)

    def encode_report(self, ids, lengths) -> Tensor:
        return self.text(ids, lengths)

    def forward(self, images=None, ids=None, lengths=None, labels=None) -> ForwardOutput:
        v_norm = t_norm = None
        if self.uses_image:
            if images is None:
                raise VariantMismatch(f"variant {self.variant} needs images")
            v_norm = l2_normalize(project_vision(self.head, self.encode_image(images)))
        if self.uses_text:
            if ids is None or lengths is None:
                raise VariantMismatch(f"variant {self.variant} needs token ids and lengths")
            t_norm = l2_normalize(project_text(self.head, self.encode_report(ids, lengths)))
        joint = fuse(self.head, v_norm, t_norm)
        pred = classify(self.head, joint)
        loss = cross_entropy(pred, labels) if labels is not None else None
        return ForwardOutput(pred, loss, v_norm, t_norm, joint)


def forward(model: MMGCNet, images, ids, lengths, labels) -> tuple[Prediction, Tensor]:
    out = model(images, ids, lengths, labels)
    return out.prediction, out.loss
