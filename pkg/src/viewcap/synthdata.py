"""Procedural shape/view/caption corpus with view-dependent occlusion.

Shapes are symbolic: a category (chair, table, lamp), a list of attributed
part instances, and a deterministic layout that places every part instance
in one cell of the patch grid per elevation class.  Views are patch grids
rendered from a viewpoint ring where each viewpoint hides a fixed set of
part kinds — no single viewpoint sees everything, but the ring as a whole
covers every part, which is what makes multi-view aggregation measurable.

Captions are template realizations over the shape's attributes (two
templates per category), so every attribute word in a caption corresponds
to an attribute actually present on the shape, and word -> attribute-id
mapping is unambiguous by construction.

Everything is deterministic given the master seed: shape ``i`` draws from
its own derived stream, so corpus generation is reproducible per shape and
byte-identical end to end.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .embedding import InputPair
from .patchgrid import FeatureSpace, ViewPatchGrid
from .rng import TAG_DATAGEN, numpy_rng
from .vocab import Vocabulary

__all__ = [
    "CATEGORIES",
    "CATEGORY_PARTS",
    "DEFAULT_GRID",
    "DEFAULT_L_CAP",
    "ELEVATIONS",
    "NUMBER_WORDS",
    "PART_LEVEL",
    "TRAIN_FRACTION",
    "CaptionGrammar",
    "Part",
    "ShapeRecord",
    "ShapeSpec",
    "ViewSpec",
    "Viewpoint",
    "assign_split",
    "build_layout",
    "default_space",
    "drop_patches",
    "generate_corpus",
    "load_corpus",
    "make_shape",
    "mix_patches",
    "references_by_shape",
    "render_views",
    "standard_view_spec",
    "training_pairs",
    "write_corpus",
]

CATEGORIES = ("chair", "table", "lamp")

ELEVATIONS = (0, 30, -30)

DEFAULT_GRID = 4
DEFAULT_L_CAP = 16
TRAIN_FRACTION = 0.75

# Vertical band of each part kind on the symbolic canvas (grid row).
PART_LEVEL = {
    "back": 0,
    "shade": 0,
    "seat": 1,
    "top": 1,
    "armrest": 1,
    "drawer": 1,
    "leg": 2,
    "pole": 2,
    "wheel": 3,
    "base": 3,
}

CATEGORY_PARTS = {
    "chair": {"required": ("seat", "back", "leg"), "optional": ("armrest", "wheel")},
    "table": {"required": ("top", "leg"), "optional": ("drawer", "wheel")},
    "lamp": {"required": ("shade", "pole", "base"), "optional": ()},
}

NUMBER_WORDS = ("zero", "one", "two", "three", "four")

FILLER_WORDS = ("a", "and", "made", "of", "on", "with")


def default_space() -> FeatureSpace:
    """The feature space the standard corpus is generated over."""
    return FeatureSpace(
        part_kinds=tuple(sorted(PART_LEVEL.keys())),
        colors=("red", "blue", "green", "white"),
        materials=("wood", "metal", "plastic"),
        textures=("smooth", "rough", "glossy"),
    )


@dataclass(frozen=True)
class Part:
    """One attributed part instance (attribute values are lexicon words)."""

    kind: str
    color: str
    material: str
    texture: str

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "color": self.color,
            "material": self.material,
            "texture": self.texture,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Part":
        return cls(
            kind=d["kind"], color=d["color"],
            material=d["material"], texture=d["texture"],
        )


def build_layout(
    category: str, parts: Sequence[Part], grid_size: int
) -> tuple[tuple[tuple[int, int], ...], ...]:
    """Deterministic cell assignment: one cell per part instance per elevation.

    Each part kind lives in its vertical band (grid row); instances fill
    that row's columns left to right in part-list order.  The symbolic
    canvas is stable across elevations (occlusion, not projection, is what
    varies with the viewpoint), so every elevation gets the same mapping.
    """
    row_fill = [0] * grid_size
    cells = []
    for part in parts:
        row = PART_LEVEL[part.kind]
        if row >= grid_size:
            raise ValueError(
                f"grid of size {grid_size} has no row {row} for part {part.kind!r}"
            )
        col = row_fill[row]
        if col >= grid_size:
            raise ValueError(
                f"row {row} overflows: more than {grid_size} parts in one band"
            )
        row_fill[row] += 1
        cells.append((row, col))
    per_elevation = tuple(cells)
    return tuple(per_elevation for _ in ELEVATIONS)


@dataclass(frozen=True)
class ShapeSpec:
    """A symbolic shape: category, attributed parts, and their grid layout.

    ``layout[e][i]`` is the grid cell of part ``i`` at elevation class ``e``
    (indexing ``ELEVATIONS``).  Construction rejects illegal part kinds,
    out-of-grid cells, and cell collisions within an elevation.
    """

    space: FeatureSpace
    shape_id: str
    category: str
    parts: tuple[Part, ...]
    grid_size: int
    layout: tuple[tuple[tuple[int, int], ...], ...]

    def __post_init__(self) -> None:
        if self.category not in CATEGORY_PARTS:
            raise ValueError(f"unknown category {self.category!r}")
        if len(self.parts) == 0:
            raise ValueError("a shape needs at least one part")
        rules = CATEGORY_PARTS[self.category]
        legal = set(rules["required"]) | set(rules["optional"])
        kinds = [p.kind for p in self.parts]
        for part in self.parts:
            if part.kind not in self.space.part_kinds:
                raise ValueError(f"part kind {part.kind!r} not in the feature space")
            if part.kind not in legal:
                raise ValueError(
                    f"part kind {part.kind!r} is not legal for {self.category!r}"
                )
            for attr, lexicon in (
                (part.color, self.space.colors),
                (part.material, self.space.materials),
                (part.texture, self.space.textures),
            ):
                if attr not in lexicon:
                    raise ValueError(f"attribute {attr!r} not in the feature space")
        for kind in rules["required"]:
            if kind not in kinds:
                raise ValueError(f"{self.category!r} requires a {kind!r} part")
        if len(self.layout) != len(ELEVATIONS):
            raise ValueError(
                f"layout must cover {len(ELEVATIONS)} elevation classes, "
                f"got {len(self.layout)}"
            )
        for e, cells in enumerate(self.layout):
            if len(cells) != len(self.parts):
                raise ValueError(
                    f"layout for elevation {ELEVATIONS[e]} has {len(cells)} cells "
                    f"for {len(self.parts)} parts"
                )
            seen = set()
            for r, c in cells:
                if not (0 <= r < self.grid_size and 0 <= c < self.grid_size):
                    raise ValueError(f"cell ({r}, {c}) outside the {self.grid_size} grid")
                if (r, c) in seen:
                    raise ValueError(
                        f"layout collision at cell ({r}, {c}) for elevation "
                        f"{ELEVATIONS[e]}"
                    )
                seen.add((r, c))

    def attributes_of(self, kind: str) -> Part:
        """The first part instance of ``kind`` (instances share attributes)."""
        for part in self.parts:
            if part.kind == kind:
                return part
        raise ValueError(f"shape {self.shape_id} has no {kind!r} part")

    def count_of(self, kind: str) -> int:
        return sum(1 for p in self.parts if p.kind == kind)


@dataclass(frozen=True)
class Viewpoint:
    """One camera: an elevation class plus the part kinds it cannot see."""

    elevation: int
    hidden_parts: frozenset

    def __post_init__(self) -> None:
        if self.elevation not in ELEVATIONS:
            raise ValueError(
                f"elevation must be one of {ELEVATIONS}, got {self.elevation}"
            )
        object.__setattr__(self, "hidden_parts", frozenset(self.hidden_parts))


@dataclass(frozen=True)
class ViewSpec:
    """The viewpoints a corpus is rendered from.

    Valid view specs leave no part kind hidden everywhere: the intersection
    of all hidden sets must be empty, so every part is visible from at
    least one viewpoint.
    """

    space: FeatureSpace
    viewpoints: tuple[Viewpoint, ...]

    def __post_init__(self) -> None:
        if len(self.viewpoints) == 0:
            raise ValueError("a view spec needs at least one viewpoint")
        for vp in self.viewpoints:
            for kind in vp.hidden_parts:
                if kind not in self.space.part_kinds:
                    raise ValueError(f"hidden part kind {kind!r} not in the feature space")
        always_hidden = frozenset.intersection(
            *(vp.hidden_parts for vp in self.viewpoints)
        )
        if always_hidden:
            raise ValueError(
                f"part kinds {sorted(always_hidden)} are hidden from every "
                f"viewpoint; every part must be visible at least once"
            )

    @property
    def V(self) -> int:
        return len(self.viewpoints)


# The standard 8-viewpoint ring: each viewpoint hides a different slice of
# the shape, and any two viewpoints together see every part kind.
_STANDARD_RING = (
    (0, ("back", "shade", "leg")),
    (30, ("wheel", "base")),
    (-30, ("top", "seat", "shade")),
    (0, ("drawer", "armrest")),
    (30, ("pole", "wheel")),
    (-30, ("back", "drawer")),
    (0, ("armrest", "base")),
    (30, ("seat", "pole")),
)


def standard_view_spec(space: FeatureSpace, V: int) -> ViewSpec:
    """The first ``V`` viewpoints of the standard ring (cycled past 8).

    ``V = 1`` is rejected by the ViewSpec invariant: the single standard
    viewpoint hides some part kinds, so it cannot cover a shape alone.
    Captioning a single view needs no ViewSpec — pass any rendered view
    subset to the decoder directly.
    """
    if V < 1:
        raise ValueError(f"V must be >= 1, got {V}")
    viewpoints = tuple(
        Viewpoint(elevation=_STANDARD_RING[i % 8][0],
                  hidden_parts=frozenset(_STANDARD_RING[i % 8][1]))
        for i in range(V)
    )
    return ViewSpec(space=space, viewpoints=viewpoints)


def make_shape(
    shape_id: str, category: str, space: FeatureSpace, rng: np.random.Generator,
    grid_size: int = DEFAULT_GRID,
) -> ShapeSpec:
    """Draw a random shape of the category: part counts and attributes.

    Instances of the same kind share attributes (a chair's legs are all the
    same color), which keeps count/attribute caption clauses well defined.
    """
    if category not in CATEGORY_PARTS:
        raise ValueError(f"unknown category {category!r}")

    def attrs(kind: str) -> Part:
        return Part(
            kind=kind,
            color=space.colors[int(rng.integers(0, len(space.colors)))],
            material=space.materials[int(rng.integers(0, len(space.materials)))],
            texture=space.textures[int(rng.integers(0, len(space.textures)))],
        )

    parts: list[Part] = []

    def add(kind: str, count: int) -> None:
        part = attrs(kind)
        parts.extend([part] * count)

    if category == "chair":
        add("back", 1)
        add("seat", 1)
        n_legs = int(rng.integers(3, 5))
        add("leg", n_legs)
        if int(rng.integers(0, 2)):
            add("armrest", 2)
        if int(rng.integers(0, 2)):
            add("wheel", n_legs)
    elif category == "table":
        add("top", 1)
        n_legs = int(rng.integers(2, 5))
        add("leg", n_legs)
        if int(rng.integers(0, 2)):
            add("drawer", 1)
        if int(rng.integers(0, 2)):
            add("wheel", n_legs)
    else:  # lamp
        add("shade", 1)
        add("pole", int(rng.integers(1, 3)))
        add("base", 1)

    parts_tuple = tuple(parts)
    return ShapeSpec(
        space=space,
        shape_id=shape_id,
        category=category,
        parts=parts_tuple,
        grid_size=grid_size,
        layout=build_layout(category, parts_tuple, grid_size),
    )


def render_views(shape: ShapeSpec, view_spec: ViewSpec) -> list[ViewPatchGrid]:
    """Render one patch grid per viewpoint: visible parts at their layout cells."""
    if view_spec.space != shape.space:
        raise ValueError("shape and view spec use different feature spaces")
    space = shape.space
    grids = []
    for vp in view_spec.viewpoints:
        e = ELEVATIONS.index(vp.elevation)
        cells = np.zeros((shape.grid_size, shape.grid_size, 5), dtype=np.int64)
        for i, part in enumerate(shape.parts):
            if part.kind in vp.hidden_parts:
                continue
            r, c = shape.layout[e][i]
            cells[r, c] = (
                space.part_id(part.kind),
                space.colors.index(part.color),
                space.materials.index(part.material),
                space.textures.index(part.texture),
                1,
            )
        grids.append(ViewPatchGrid(space=space, cells=cells))
    return grids


def drop_patches(view: ViewPatchGrid, part_kind: str) -> ViewPatchGrid:
    """Remove every cell of the given part kind (idempotent)."""
    kid = view.space.part_id(part_kind)
    cells = view.cells.copy()
    mask = (cells[:, :, 0] == kid) & (cells[:, :, 4] == 1)
    cells[mask] = 0
    return view.with_cells(cells)


def mix_patches(
    view_a: ViewPatchGrid, view_b: ViewPatchGrid, part_kind: str
) -> ViewPatchGrid:
    """Replace the part-kind cells of ``view_a`` with those of ``view_b``.

    Cells pair up by slot: the k-th cell of that kind in row-major scan
    order of ``view_a`` takes the k-th such cell of ``view_b``.  Slots of
    ``view_a`` beyond ``view_b``'s supply become absent (the donor has
    nothing there); every other cell of ``view_a`` is untouched.
    """
    if view_a.space != view_b.space:
        raise ValueError("views use different feature spaces")
    if view_a.G != view_b.G:
        raise ValueError(
            f"views have different grid sizes ({view_a.G} vs {view_b.G})"
        )
    kid = view_a.space.part_id(part_kind)

    def slots(view: ViewPatchGrid) -> list[tuple[int, int]]:
        mask = (view.cells[:, :, 0] == kid) & (view.cells[:, :, 4] == 1)
        return [(int(r), int(c)) for r, c in np.argwhere(mask)]

    cells = view_a.cells.copy()
    donor_slots = slots(view_b)
    for k, (r, c) in enumerate(slots(view_a)):
        if k < len(donor_slots):
            cells[r, c] = view_b.cells[donor_slots[k]]
        else:
            cells[r, c] = 0
    return view_a.with_cells(cells)


class CaptionGrammar:
    """Two caption templates per category over the shape's attribute words.

    Every realized caption fits ``L_cap`` with BOS/EOS framing, and every
    attribute word maps back to exactly one attribute id — enforced by
    requiring all lexicon classes (categories, parts, colors, materials,
    textures, numbers, filler) to be pairwise disjoint.
    """

    def __init__(self, space: FeatureSpace, L_cap: int = DEFAULT_L_CAP, seed: int = 0):
        if L_cap < 4:
            raise ValueError(f"L_cap must be >= 4, got {L_cap}")
        classes = {
            "categories": CATEGORIES,
            "part kinds": space.part_kinds,
            "colors": space.colors,
            "materials": space.materials,
            "textures": space.textures,
            "numbers": NUMBER_WORDS,
            "filler": FILLER_WORDS,
        }
        seen: dict[str, str] = {}
        for class_name, words in classes.items():
            for word in words:
                if word in seen:
                    raise ValueError(
                        f"word {word!r} appears in both {seen[word]} and "
                        f"{class_name}; lexicons must be disjoint"
                    )
                seen[word] = class_name
        self.space = space
        self.L_cap = L_cap
        self.seed = seed

    def vocabulary(self) -> Vocabulary:
        """All words any realization can emit, in sorted order."""
        words = sorted(
            set(CATEGORIES)
            | set(self.space.part_kinds)
            | set(self.space.colors)
            | set(self.space.materials)
            | set(self.space.textures)
            | set(NUMBER_WORDS)
            | set(FILLER_WORDS)
        )
        return Vocabulary.from_words(words)

    def realize(self, shape: ShapeSpec) -> list[list[str]]:
        """Both template realizations for the shape, length-checked."""
        num = lambda kind: NUMBER_WORDS[shape.count_of(kind)]  # noqa: E731
        captions: list[list[str]] = []
        if shape.category == "chair":
            seat = shape.attributes_of("seat")
            back = shape.attributes_of("back")
            captions.append(
                ["a", seat.color, seat.material, "chair", "with", "a",
                 back.color, "back", "and", num("leg"), "leg"]
            )
            second = ["a", seat.texture, "chair", "made", "of", seat.material]
            if shape.count_of("armrest"):
                second += ["with", num("armrest"), "armrest"]
            else:
                second += ["with", num("leg"), "leg"]
            captions.append(second)
        elif shape.category == "table":
            top = shape.attributes_of("top")
            leg = shape.attributes_of("leg")
            first = ["a", top.color, top.material, "table", "with",
                     num("leg"), leg.color, "leg"]
            if shape.count_of("drawer"):
                drawer = shape.attributes_of("drawer")
                first += ["and", "a", drawer.color, "drawer"]
            captions.append(first)
            second = ["a", top.texture, "table", "made", "of", top.material]
            if shape.count_of("wheel"):
                second += ["on", num("wheel"), "wheel"]
            else:
                second += ["with", num("leg"), "leg"]
            captions.append(second)
        else:  # lamp
            shade = shape.attributes_of("shade")
            base = shape.attributes_of("base")
            captions.append(
                ["a", shade.color, shade.material, "lamp", "with", "a",
                 base.color, "base", "and", num("pole"), "pole"]
            )
            captions.append(
                ["a", shade.texture, "lamp", "made", "of", shade.material,
                 "with", num("pole"), "pole"]
            )
        for caption in captions:
            if len(caption) + 2 > self.L_cap:
                raise ValueError(
                    f"caption of {len(caption)} words overflows L_cap="
                    f"{self.L_cap} with BOS/EOS framing: {' '.join(caption)}"
                )
        return captions


@dataclass(frozen=True)
class ShapeRecord:
    """One corpus entry: the shape, its rendered views, captions, and split."""

    shape: ShapeSpec
    views: tuple[ViewPatchGrid, ...]
    captions: tuple[tuple[str, ...], ...]
    split: str


def assign_split(shape_id: str) -> str:
    """Split by shape-id hash: ~75% train / 25% test, stable across runs."""
    digest = hashlib.sha256(shape_id.encode("utf-8")).digest()
    fraction = int.from_bytes(digest[:2], "big") / 65536.0
    return "train" if fraction < TRAIN_FRACTION else "test"


def generate_corpus(
    n_shapes: int,
    view_spec: ViewSpec,
    grammar: CaptionGrammar,
    seed: int,
    captions_per_shape: int = 1,
) -> list[ShapeRecord]:
    """Generate ``n_shapes`` shapes with rendered views and captions.

    Deterministic given ``seed``: shape ``i`` draws everything from the
    stream derived from ``(seed, TAG_DATAGEN, i)``.  Caption overflows are
    reported with the offending shape id.
    """
    if n_shapes < 1:
        raise ValueError(f"n_shapes must be >= 1, got {n_shapes}")
    if not 1 <= captions_per_shape <= 2:
        raise ValueError(
            f"captions_per_shape must be 1 or 2, got {captions_per_shape}"
        )
    if grammar.space != view_spec.space:
        raise ValueError("grammar and view spec use different feature spaces")
    records = []
    for i in range(n_shapes):
        shape_id = f"shape-{i:04d}"
        rng = numpy_rng(seed, TAG_DATAGEN, i)
        category = CATEGORIES[int(rng.integers(0, len(CATEGORIES)))]
        shape = make_shape(shape_id, category, grammar.space, rng)
        views = tuple(render_views(shape, view_spec))
        try:
            captions = grammar.realize(shape)[:captions_per_shape]
        except ValueError as exc:
            raise ValueError(f"shape {shape_id}: {exc}") from exc
        records.append(
            ShapeRecord(
                shape=shape,
                views=views,
                captions=tuple(tuple(c) for c in captions),
                split=assign_split(shape_id),
            )
        )
    return records


def _record_to_json(record: ShapeRecord) -> str:
    payload = {
        "shape_id": record.shape.shape_id,
        "category": record.shape.category,
        "parts": [p.to_dict() for p in record.shape.parts],
        "views": [view.cells.tolist() for view in record.views],
        "captions": [" ".join(c) for c in record.captions],
        "split": record.split,
    }
    return json.dumps(payload, ensure_ascii=False)


def write_corpus(records: Sequence[ShapeRecord], path) -> None:
    """Write the corpus as JSONL with stable key order (atomic replace)."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            for record in records:
                f.write(_record_to_json(record) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_corpus(path, space: FeatureSpace) -> list[ShapeRecord]:
    """Read a corpus back; the inverse of write_corpus for valid files."""
    records = []
    with open(os.fspath(path), encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            parts = tuple(Part.from_dict(p) for p in d["parts"])
            views = tuple(
                ViewPatchGrid(space=space, cells=np.asarray(v, dtype=np.int64))
                for v in d["views"]
            )
            grid_size = views[0].G if views else DEFAULT_GRID
            shape = ShapeSpec(
                space=space,
                shape_id=d["shape_id"],
                category=d["category"],
                parts=parts,
                grid_size=grid_size,
                layout=build_layout(d["category"], parts, grid_size),
            )
            records.append(
                ShapeRecord(
                    shape=shape,
                    views=views,
                    captions=tuple(tuple(c.split()) for c in d["captions"]),
                    split=d["split"],
                )
            )
    return records


def training_pairs(
    records: Sequence[ShapeRecord],
    vocab: Vocabulary,
    L_cap: int,
    split: str | None = None,
) -> list[InputPair]:
    """Flatten records into (view, caption) training pairs.

    Every view of a shape pairs with every one of its captions; ``split``
    filters records first (None keeps everything).
    """
    pairs = []
    for record in records:
        if split is not None and record.split != split:
            continue
        for view in record.views:
            for caption in record.captions:
                pairs.append(
                    InputPair(
                        view=view,
                        caption_ids=np.asarray(
                            vocab.encode(list(caption), L_cap), dtype=np.int64
                        ),
                    )
                )
    return pairs


def references_by_shape(
    records: Sequence[ShapeRecord], split: str | None = None
) -> list[tuple[ShapeRecord, list[list[str]]]]:
    """Records (optionally filtered by split) with captions as reference lists."""
    out = []
    for record in records:
        if split is not None and record.split != split:
            continue
        out.append((record, [list(c) for c in record.captions]))
    return out
