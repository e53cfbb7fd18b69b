"""Symbolic view patches: the stand-in for rendered 2D projections.

A view is a G x G grid of patches.  Each patch either shows a fragment of
one shape part -- carrying the part kind plus color/material/texture ids --
or is empty.  Patches are consumed by the embedding layer as concatenated
one-hot feature vectors, so the grid plays the role a ViT-style patch
sequence plays for real renders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Cell layout: (part_id, color_id, material_id, texture_id, present_flag).
CELL_FIELDS = 5


@dataclass(frozen=True)
class FeatureSpace:
    """Declared vocabularies for each patch feature."""

    part_kinds: tuple[str, ...]
    colors: tuple[str, ...]
    materials: tuple[str, ...]
    textures: tuple[str, ...]

    def __post_init__(self) -> None:
        for name in ("part_kinds", "colors", "materials", "textures"):
            values = getattr(self, name)
            if len(values) == 0:
                raise ValueError(f"{name} must be non-empty")
            if len(set(values)) != len(values):
                raise ValueError(f"{name} contains duplicates")

    @property
    def patch_feat_dim(self) -> int:
        """Width of the one-hot concatenation, present flag included."""
        return (
            len(self.part_kinds)
            + len(self.colors)
            + len(self.materials)
            + len(self.textures)
            + 1
        )

    def part_id(self, kind: str) -> int:
        try:
            return self.part_kinds.index(kind)
        except ValueError:
            raise ValueError(f"unknown part kind {kind!r}") from None

    def to_dict(self) -> dict:
        return {
            "part_kinds": list(self.part_kinds),
            "colors": list(self.colors),
            "materials": list(self.materials),
            "textures": list(self.textures),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpace":
        return cls(
            part_kinds=tuple(d["part_kinds"]),
            colors=tuple(d["colors"]),
            materials=tuple(d["materials"]),
            textures=tuple(d["textures"]),
        )


@dataclass(frozen=True)
class ViewPatchGrid:
    """One symbolic view: a G x G integer cell grid over a FeatureSpace."""

    space: FeatureSpace
    cells: np.ndarray  # (G, G, CELL_FIELDS) int64

    def __post_init__(self) -> None:
        cells = np.asarray(self.cells, dtype=np.int64)
        if cells.ndim != 3 or cells.shape[0] != cells.shape[1] or cells.shape[2] != CELL_FIELDS:
            raise ValueError(f"cells must have shape (G, G, {CELL_FIELDS}), got {cells.shape}")
        present = cells[..., 4]
        if not np.isin(present, (0, 1)).all():
            raise ValueError("present_flag must be 0 or 1")
        absent = cells[present == 0]
        if absent.size and absent.any():
            raise ValueError("absent patches must be all-zeros")
        shown = cells[present == 1]
        limits = (
            len(self.space.part_kinds),
            len(self.space.colors),
            len(self.space.materials),
            len(self.space.textures),
        )
        for col, limit in enumerate(limits):
            ids = shown[:, col]
            if ids.size and (ids.min() < 0 or ids.max() >= limit):
                raise ValueError(f"feature ids in column {col} outside 0..{limit - 1}")
        cells.flags.writeable = False
        object.__setattr__(self, "cells", cells)

    @classmethod
    def empty(cls, space: FeatureSpace, G: int) -> "ViewPatchGrid":
        return cls(space=space, cells=np.zeros((G, G, CELL_FIELDS), dtype=np.int64))

    @property
    def G(self) -> int:
        return self.cells.shape[0]

    @property
    def n_patches(self) -> int:
        return self.G * self.G

    def with_cells(self, cells: np.ndarray) -> "ViewPatchGrid":
        return ViewPatchGrid(space=self.space, cells=cells)

    def features(self) -> np.ndarray:
        """(G*G, patch_feat_dim) one-hot features, row-major over cells.

        Absent patches map to the all-zero vector (present flag included).
        """
        space = self.space
        flat = self.cells.reshape(-1, CELL_FIELDS)
        out = np.zeros((flat.shape[0], space.patch_feat_dim), dtype=np.float64)
        offsets = np.cumsum(
            [0, len(space.part_kinds), len(space.colors), len(space.materials)]
        )
        present = flat[:, 4] == 1
        rows = np.nonzero(present)[0]
        for col, base in enumerate(offsets):
            out[rows, base + flat[rows, col]] = 1.0
        out[rows, -1] = 1.0
        return out
