"""64-bit finite-difference verification of every differentiable component."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .config import ModelConfig
from .fusion import MMGCNet
from .image_encoder import QFormer, VitEncoder
from .report_encoder import ReportEncoder

TOLERANCE = 1e-5
MAX_ENTRIES = 24
STEP = 1e-3
STENCIL = 4


@dataclass
class GradcheckRow:
    component: str
    max_rel_error: float
    n_tensors: int
    seconds: float
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and self.max_rel_error <= TOLERANCE


def _check_all(loss_fn: Callable[[], T.Tensor], tensors: list[T.Tensor], seed: int, h: float) -> float:
    worst = 0.0
    for i, x in enumerate(tensors):
        worst = max(worst, T.finite_diff_check(lambda _: loss_fn(), x, h=h, max_entries=MAX_ENTRIES,
                                                 seed=seed + i, order=STENCIL))
    return worst


def tiny_config(variant: str = "m3") -> ModelConfig:
    return ModelConfig(variant=variant, channels=1, image_size=8, patch_size=4, d_model=8, vit_depth=1,
                       vit_heads=2, n_queries=2, qformer_depth=1, vocab_size=10, text_dim=8, text_depth=1,
                       text_heads=2, max_len=6, proj_dim=6)


# Each case returns (loss_fn, tensors). Block outputs are probed as sum(out * w)
# with a fixed random w so that no output coordinate has a trivial gradient.


def _op_case(name: str, seed: int):
    rng = np.random.default_rng(seed)
    a = nn.Parameter(rng.normal(size=(3, 4)))
    if name == "matmul":
        b = nn.Parameter(rng.normal(size=(4, 2)))
        w = T.Tensor(rng.normal(size=(3, 2)))
        return (lambda: (T.matmul(a, b) * w).sum()), [a, b]
    if name == "softmax":
        w = T.Tensor(rng.normal(size=(3, 4)))
        return (lambda: (T.softmax(a, axis=-1) * w).sum()), [a]
    if name == "layer_norm":
        gamma = nn.Parameter(rng.normal(size=4))
        beta = nn.Parameter(rng.normal(size=4))
        w = T.Tensor(rng.normal(size=(3, 4)))
        return (lambda: (T.layer_norm(a, gamma, beta) * w).sum()), [a, gamma, beta]
    if name == "gelu":
        w = T.Tensor(rng.normal(size=(3, 4)))
        return (lambda: (T.gelu(a) * w).sum()), [a]
    if name == "embedding":
        ids = np.array([[0, 2, 2], [1, 0, 4]])
        table = nn.Parameter(rng.normal(size=(5, 3)))
        w = T.Tensor(rng.normal(size=(2, 3, 3)))
        return (lambda: (T.embedding(table, ids) * w).sum()), [table]
    if name == "l2_normalize":
        w = T.Tensor(rng.normal(size=(3, 4)))
        return (lambda: (T.l2_normalize(a) * w).sum()), [a]
    if name == "cross_entropy":
        labels = np.array([0, 3, 1])
        return (lambda: T.cross_entropy(a, labels)), [a]
    raise KeyError(name)


def _module_case(name: str, seed: int):
    rng = np.random.default_rng(seed)
    data_rng = np.random.default_rng(seed + 1000)
    if name == "linear":
        layer = nn.Linear(5, 3, rng)
        x = nn.Parameter(data_rng.normal(size=(4, 5)))
        w = T.Tensor(data_rng.normal(size=(4, 3)))
        return (lambda: (layer(x) * w).sum()), [x] + layer.parameters()
    if name == "attention":
        block = nn.MultiHeadAttention(8, 2, rng)
        q = nn.Parameter(data_rng.normal(size=(2, 3, 8)))
        kv = nn.Parameter(data_rng.normal(size=(2, 5, 8)))
        mask = np.array([True, True, False, True, True])
        w = T.Tensor(data_rng.normal(size=(2, 3, 8)))
        return (lambda: (block(q, kv, mask) * w).sum()), [q, kv] + block.parameters()
    if name == "transformer_block":
        block = nn.TransformerBlock(8, 2, rng)
        x = nn.Parameter(data_rng.normal(size=(2, 4, 8)))
        w = T.Tensor(data_rng.normal(size=(2, 4, 8)))
        return (lambda: (block(x) * w).sum()), [x] + block.parameters()
    if name == "vit_encoder":
        enc = VitEncoder(1, 8, 4, 8, 1, 2, rng)
        img = nn.Parameter(data_rng.random(size=(2, 1, 8, 8)))
        w = T.Tensor(data_rng.normal(size=(2, 4, 8)))
        return (lambda: (enc(img) * w).sum()), [img] + enc.parameters()
    if name == "qformer":
        qf = QFormer(3, 8, 1, 2, rng)
        feats = nn.Parameter(data_rng.normal(size=(2, 5, 8)))
        w = T.Tensor(data_rng.normal(size=(2, 3, 8)))
        return (lambda: (qf(feats) * w).sum()), [feats] + qf.parameters()
    if name == "report_encoder":
        enc = ReportEncoder(10, 8, 1, 2, 6, rng)
        ids = data_rng.integers(0, 10, size=(3, 6))
        lengths = np.array([6, 3, 1])
        w = T.Tensor(data_rng.normal(size=(3, 8)))
        return (lambda: (enc(ids, lengths) * w).sum()), enc.parameters()
    if name.startswith("forward_"):
        variant = name.split("_", 1)[1]
        model = MMGCNet(tiny_config(variant), seed)
        images = data_rng.random(size=(2, 1, 8, 8))
        ids = data_rng.integers(2, 10, size=(2, 6))
        lengths = np.array([4, 6])
        labels = np.array([0, 1])
        return (lambda: model(images, ids, lengths, labels).loss), model.trainable_parameters()
    raise KeyError(name)


OP_COMPONENTS = ("matmul", "softmax", "layer_norm", "gelu", "embedding", "l2_normalize", "cross_entropy")
MODULE_COMPONENTS = ("linear", "attention", "transformer_block", "vit_encoder", "qformer", "report_encoder",
                     "forward_m1", "forward_m2", "forward_m3")
COMPONENTS = OP_COMPONENTS + MODULE_COMPONENTS


def check_component(name: str, seed: int = 0, h: float = STEP) -> GradcheckRow:
    start = time.perf_counter()
    try:
        with T.precision("f64"):
            case = _op_case if name in OP_COMPONENTS else _module_case
            loss_fn, tensors = case(name, seed)
            err = _check_all(loss_fn, tensors, seed, h)
        return GradcheckRow(name, float(err), len(tensors), time.perf_counter() - start)
    except Exception as exc:  # a crash is reported as a failing row
        return GradcheckRow(name, float("inf"), 0, time.perf_counter() - start, f"{type(exc).__name__}: {exc}")


def run_gradcheck(components=COMPONENTS, seed: int = 0, h: float = STEP) -> list[GradcheckRow]:
    return [check_component(name, seed, h) for name in components]
