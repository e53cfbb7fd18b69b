"""Model checkpoints: every parameter tensor plus the descriptors to rebuild.

A checkpoint is a tensor manifest (JSON) with an f32 blob holding one entry
per named parameter, and a ``meta`` block carrying the model configuration,
the training configuration (schedule kind and T included), the vocabulary,
the patch feature space, and the step count.  Save -> load -> save is
byte-identical for float32 models.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch

from .denoiser import Denoiser, DenoiserConfig
from .patchgrid import FeatureSpace
from .tensorio import load_tensors, save_tensors
from .vocab import Vocabulary

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_KIND = "denoiser-checkpoint-v1"


@dataclass
class Checkpoint:
    model: Denoiser
    train_config: Optional[dict]
    vocab: Optional[Vocabulary]
    feature_space: Optional[FeatureSpace]
    step: int
    meta: dict


def save_checkpoint(
    manifest_path,
    model: Denoiser,
    *,
    train_config=None,
    vocab: Optional[Vocabulary] = None,
    feature_space: Optional[FeatureSpace] = None,
    step: int = 0,
    extra: Optional[dict] = None,
) -> None:
    """Write the model and its descriptors; atomic at the file level."""
    tensors = {
        f"model.{name}": param.detach().cpu()
        for name, param in model.named_parameters()
    }
    meta = {
        "kind": CHECKPOINT_KIND,
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "vocab": list(vocab.tokens) if vocab is not None else None,
        "feature_space": feature_space.to_dict() if feature_space is not None else None,
        "step": int(step),
    }
    if extra:
        meta["extra"] = extra
    save_tensors(manifest_path, tensors, extra=meta)


def load_checkpoint(manifest_path, dtype: torch.dtype = torch.float32) -> Checkpoint:
    """Rebuild the model (and descriptors) from a checkpoint manifest."""
    manifest_path = Path(manifest_path)
    tensors, meta = load_tensors(manifest_path)
    if not meta or meta.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{manifest_path} is not a {CHECKPOINT_KIND} manifest")
    config = DenoiserConfig.from_dict(meta["model_config"])
    model = Denoiser(config, dtype=dtype)
    with torch.no_grad():
        for name, param in model.named_parameters():
            key = f"model.{name}"
            if key not in tensors:
                raise ValueError(f"checkpoint is missing tensor {key!r}")
            stored = tensors[key]
            if tuple(stored.shape) != tuple(param.shape):
                raise ValueError(
                    f"tensor {key!r} has shape {stored.shape}, expected {tuple(param.shape)}"
                )
            param.copy_(torch.from_numpy(stored).to(dtype))
    vocab = None
    if meta.get("vocab"):
        vocab = Vocabulary(tokens=tuple(meta["vocab"]))
    feature_space = None
    if meta.get("feature_space"):
        feature_space = FeatureSpace.from_dict(meta["feature_space"])
    return Checkpoint(
        model=model,
        train_config=meta.get("train_config"),
        vocab=vocab,
        feature_space=feature_space,
        step=int(meta.get("step", 0)),
        meta=meta,
    )
