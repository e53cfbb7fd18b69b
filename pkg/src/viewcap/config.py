"""Flat key=value run configuration shared by every CLI command.

The config file format is deliberately plain: one ``key = value`` per line,
``#`` comments, no sections, no nesting — language-neutral and diffable.
Values are coerced by the declared field types; command-line flags override
file values.  The config hash (over the canonical serialization of every
key) plus the seed are embedded in every output artifact for provenance.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

from .decoding import POOLING_METHODS
from .denoiser import DenoiserConfig
from .diffusion import TrainConfig
from .schedule import SCHEDULE_KINDS

__all__ = ["RunConfig", "parse_value"]

TRAIN_SPLITS = ("train", "test", "all")


@dataclass
class RunConfig:
    """Every knob of every command, flat.

    Unused keys are harmless (gen-data ignores model settings and so on);
    validation covers the union so one file can drive a whole workflow.
    """

    # Paths
    dataset: str = ""
    checkpoint: str = ""
    out: str = ""
    # Reproducibility
    seed: int = 0
    # Corpus generation
    n_shapes: int = 32
    v: int = 4
    captions_per_shape: int = 1
    l_cap: int = 16
    # Model
    h: int = 32
    d_model: int = 64
    n_layers: int = 3
    n_heads: int = 4
    ff_mult: int = 4
    dropout: float = 0.0
    # Training
    schedule: str = "sqrt"
    t: int = 200
    batch_size: int = 16
    steps: int = 10000
    lr: float = 1e-3
    warmup_steps: int = 500
    reg_weight: float = 1e-3
    ce_weight: float = 1.0
    clamp: bool = True
    train_split: str = "train"
    # Decoding / evaluation
    s: int = 3
    pooling: str = "max"
    use_views: int = 0  # 0 = all views the dataset provides
    k: int = 0  # respaced inference steps; 0 = the full schedule
    oracle: bool = False

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.schedule not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.schedule!r}")
        if self.pooling not in POOLING_METHODS:
            raise ValueError(
                f"pooling must be one of {POOLING_METHODS}, got {self.pooling!r}"
            )
        if self.train_split not in TRAIN_SPLITS:
            raise ValueError(
                f"train_split must be one of {TRAIN_SPLITS}, got {self.train_split!r}"
            )
        positive = (
            "n_shapes", "v", "l_cap", "h", "d_model", "n_layers", "n_heads",
            "ff_mult", "t", "batch_size", "steps", "s",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 1 <= self.captions_per_shape <= 2:
            raise ValueError(
                f"captions_per_shape must be 1 or 2, got {self.captions_per_shape}"
            )
        if self.k < 0 or self.use_views < 0:
            raise ValueError("k and use_views must be >= 0")
        if self.k > self.t:
            raise ValueError(
                f"respaced steps k={self.k} cannot exceed the schedule length t={self.t}"
            )
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.reg_weight < 0 or self.ce_weight < 0:
            raise ValueError("reg_weight and ce_weight must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def lines(self) -> str:
        """The canonical key=value rendering (field order, one per line)."""
        parts = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            parts.append(f"{f.name} = {value}")
        return "\n".join(parts) + "\n"

    # Path keys name artifact locations, not run semantics; the hash skips
    # them so the same run lands on the same hash wherever its files live.
    PATH_KEYS = ("dataset", "checkpoint", "out")

    def config_hash(self) -> str:
        """Short digest of every non-path key=value, for artifact provenance."""
        values = self.to_dict()
        canonical = "".join(
            f"{name}={values[name]!r}\n"
            for name in sorted(values)
            if name not in self.PATH_KEYS
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    # -- parsing -----------------------------------------------------------

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(getattr(cls(), f.name)) for f in dataclasses.fields(cls)}

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        values = {}
        with open(path, encoding="utf-8") as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValueError(
                        f"{path}:{lineno}: expected 'key = value', got {line!r}"
                    )
                key, _, value = line.partition("=")
                values[key.strip()] = value.strip()
        return cls().with_overrides(values)

    def with_overrides(self, raw_values: dict[str, str]) -> "RunConfig":
        """A new config with the given raw string values coerced and applied."""
        types = self.field_types()
        updates = {}
        for key, raw in raw_values.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            updates[key] = parse_value(key, raw, types[key])
        return dataclasses.replace(self, **updates)

    # -- bridges to the library configs -------------------------------------

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            schedule_kind=self.schedule,
            T=self.t,
            batch_size=self.batch_size,
            steps=self.steps,
            lr=self.lr,
            warmup_steps=self.warmup_steps,
            reg_weight=self.reg_weight,
            ce_weight=self.ce_weight,
            clamp_enabled=self.clamp,
            seed=self.seed,
        )

    def model_config(
        self, *, L_img: int, vocab_size: int, patch_feat_dim: int
    ) -> DenoiserConfig:
        return DenoiserConfig(
            H=self.h,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            ff_mult=self.ff_mult,
            L_img=L_img,
            L_cap=self.l_cap,
            T_max=self.t,
            vocab_size=vocab_size,
            patch_feat_dim=patch_feat_dim,
            dropout=self.dropout,
        )


def parse_value(key: str, raw: str, target_type: type):
    """Coerce a raw config string to the field's type, strictly."""
    if target_type is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if target_type is int:
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {raw!r}") from None
    if target_type is float:
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{key}: expected a number, got {raw!r}") from None
    return raw
