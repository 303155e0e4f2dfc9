"""Model/training configuration and the flat ``key=value`` run-config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

VARIANTS = ("m1", "m2", "m3")
REFERENCE_PEAK_LR = 1e-5


@dataclass
class ModelConfig:
    variant: str = "m3"
    channels: int = 1
    image_size: int = 32
    patch_size: int = 4
    d_model: int = 64
    vit_depth: int = 2
    vit_heads: int = 4
    n_queries: int = 8
    qformer_depth: int = 2
    vocab_size: int = 64
    text_dim: int = 64
    text_depth: int = 2
    text_heads: int = 4
    max_len: int = 16
    proj_dim: int = 64
    proj_depth: int = 1
    classifier_depth: int = 1
    n_classes: int = 2
    freeze_image: bool = False
    freeze_text: bool = False

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.d_model % self.vit_heads or self.text_dim % self.text_heads:
            raise ConfigError("model dims must be divisible by their head counts")
        if self.n_classes != 2:
            raise ConfigError("only two classes (VCD, GC) are supported")
        for name in ("channels", "image_size", "patch_size", "d_model", "n_queries", "vocab_size",
                     "text_dim", "max_len", "proj_dim", "proj_depth", "classifier_depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        return self

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    peak_lr: float = 3e-4
    reference_lr: bool = False
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    average: str = "macro"
    trials: int = 5
    eval_batch_size: int = 200

    @property
    def effective_lr(self) -> float:
        return REFERENCE_PEAK_LR if self.reference_lr else self.peak_lr

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1 or self.trials < 1:
            raise ConfigError("epochs, batch_size and trials must be >= 1")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1]")
        if self.average not in ("macro", "micro", "weighted"):
            raise ConfigError("average must be macro, micro or weighted")
        return self


@dataclass
class GenConfig:
    """Generator knobs as they appear in a run config (mapped onto GenParams)."""

    n: int = 2000
    prior: float = 0.5
    a_img: float = 0.3
    a_txt: float = 0.3
    sigma: float = 0.05
    data_seed: int = 0
    split_seed: int = 1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    seed: int = 0

    _SECTIONS = ("model", "train", "gen")

    @classmethod
    def schema(cls) -> dict[str, tuple[str, type, object]]:
        """Map every accepted key to (section, type, default)."""
        out: dict[str, tuple[str, type, object]] = {"seed": ("", int, 0)}
        for section, klass in (("model", ModelConfig), ("train", TrainConfig), ("gen", GenConfig)):
            for f in fields(klass):
                out[f.name] = (section, type(f.default), f.default)
        return out

    def set(self, key: str, raw) -> None:
        schema = self.schema()
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r}")
        section, typ, _ = schema[key]
        value = _coerce(key, raw, typ)
        target = getattr(self, section) if section else self
        setattr(target, key, value)

    def update(self, values: dict) -> "RunConfig":
        for k, v in values.items():
            if v is not None:
                self.set(k, v)
        return self

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        return self

    def as_flat(self) -> dict:
        flat = {"seed": self.seed}
        for section in self._SECTIONS:
            flat.update(dataclasses.asdict(getattr(self, section)))
        return flat

    def to_text(self) -> str:
        return "".join(f"{k}={_render(v)}\n" for k, v in self.as_flat().items())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(key: str, raw, typ: type):
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if typ is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r} (expected {typ.__name__})") from None
    return text
