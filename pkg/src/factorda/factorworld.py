"""Synthetic factor world and the CORe50 transfer-table fixture.

Images are produced by a mixer from factor vectors.  Layers are painted in a
fixed order: background, an object glyph at the centre, a patterned marker
beside it on the left or right, a global brightness gain and, last, pixel
noise.  Marker side, background style and brightness are domain factors.
Class, object, marker, pose and tint vary inside every domain.

Object and marker each show the true class with a configurable reliability
and a wrong class otherwise.  Left-side markers may use a different pattern
family from right-side ones.  ``side_class_skew`` tilts class frequencies in
opposite directions for the two sides, which makes the marker side informative
about the label.  :data:`DEFAULT_WORLD` holds the frozen calibrated values.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"


class FactorError(ValueError):
    pass


class FixtureError(ValueError):
    pass


@dataclass(frozen=True)
class Factor:
    name: str
    kind: str
    values: tuple = ()
    low: float = 0.0
    high: float = 1.0
    domain: bool = False
    informative: bool = False

    def __post_init__(self):
        if self.kind not in (CATEGORICAL, CONTINUOUS):
            raise FactorError(f"factor {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL and not self.values:
            raise FactorError(f"categorical factor {self.name!r} needs values")
        if self.kind == CONTINUOUS and not self.low <= self.high:
            raise FactorError(f"continuous factor {self.name!r}: empty range")

    def contains(self, value) -> bool:
        if self.kind == CATEGORICAL:
            return value in self.values
        return isinstance(value, (int, float)) and self.low <= float(value) <= self.high


@dataclass(frozen=True)
class FactorSchema:
    factors: tuple[Factor, ...]

    def __post_init__(self):
        names = [f.name for f in self.factors]
        if len(set(names)) != len(names):
            raise FactorError("duplicate factor names")
        if names.count("class") != 1:
            raise FactorError("schema needs exactly one factor named 'class'")
        cls = self["class"]
        if cls.domain or not cls.informative:
            raise FactorError("'class' must be task-informative and never a domain factor")
        if cls.kind != CATEGORICAL:
            raise FactorError("'class' must be categorical")
        for f in self.factors:
            if f.domain and f.kind != CATEGORICAL:
                raise FactorError(f"domain factor {f.name!r} must be categorical")

    def __getitem__(self, name: str) -> Factor:
        for f in self.factors:
            if f.name == name:
                return f
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(f.name == name for f in self.factors)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.factors)

    @property
    def domain_factors(self) -> tuple[Factor, ...]:
        return tuple(f for f in self.factors if f.domain)

    @property
    def num_classes(self) -> int:
        return len(self["class"].values)

    def validate(self, values: Mapping[str, Any]) -> None:
        missing = set(self.names) - set(values)
        if missing:
            raise FactorError(f"scene lacks factors {sorted(missing)}")
        extra = set(values) - set(self.names)
        if extra:
            raise FactorError(f"scene has unknown factors {sorted(extra)}")
        for f in self.factors:
            if not f.contains(values[f.name]):
                raise FactorError(f"invalid value {values[f.name]!r} for factor {f.name!r}")


@dataclass(frozen=True)
class Scene:
    values: Mapping[str, Any]
    seed: int


@dataclass(frozen=True)
class DomainSpec:
    id: int
    values: Mapping[str, Any]

    def __getitem__(self, name):
        return self.values[name]


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,)
    domains: np.ndarray  # (N,) domain ids
    split: str = "all"
    scenes: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        n = len(self.images)
        if len(self.labels) != n or len(self.domains) != n:
            raise ValueError("images, labels and domains must have equal length")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.images[idx],
            self.labels[idx],
            self.domains[idx],
            self.split if split is None else split,
            [self.scenes[i] for i in idx] if self.scenes else [],
        )

    @staticmethod
    def concat(parts: Sequence["Dataset"], split: str = "all") -> "Dataset":
        return Dataset(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.domains for p in parts]),
            split,
            [s for p in parts for s in p.scenes],
        )


# ----------------------------------------------------------------- glyphs

_OBJECT_BASE = np.array(
    [
        [0, 1, 1, 1, 0],
        [1, 0, 0, 0, 1],
        [1, 0, 0, 0, 1],
        [1, 0, 0, 0, 1],
        [0, 1, 1, 1, 0],
    ],
    dtype=float,
)

# class objects share a ring and differ in a couple of interior pixels
_OBJECT_MARKS = [
    [(1, 1), (3, 3)],
    [(1, 3), (3, 1)],
    [(2, 2), (1, 2)],
    [(2, 2), (3, 2)],
    [(2, 1), (2, 3)],
]

# right-side patterns; left-side markers are their mirror images, none of which
# is itself in the set, so a side-blind detector only partly recognises them.
MARKER_GLYPHS = np.array(
    [
        [[1, 1, 1], [1, 0, 0], [1, 0, 0]],
        [[1, 0, 0], [1, 1, 0], [1, 1, 1]],
        [[1, 1, 0], [0, 1, 1], [0, 0, 1]],
        [[1, 0, 1], [1, 1, 0], [1, 0, 0]],
        [[0, 1, 0], [1, 1, 0], [0, 1, 1]],
    ],
    dtype=float,
)


# alternative left-side family sharing no pattern with the right-side set
LEFT_GLYPHS = np.array(
    [
        [[0, 0, 0], [1, 1, 1], [0, 0, 0]],
        [[0, 1, 0], [0, 1, 0], [0, 1, 0]],
        [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
        [[0, 0, 1], [0, 1, 0], [1, 0, 0]],
        [[1, 0, 1], [0, 0, 0], [1, 0, 1]],
    ],
    dtype=float,
)
LEFT_MARKER_MODES = ("same", "mirror", "alt")


def marker_glyph(cls: int, side: str, left_mode: str = "mirror") -> np.ndarray:
    g = MARKER_GLYPHS[cls % len(MARKER_GLYPHS)]
    if side != "L" or left_mode == "same":
        return g
    if left_mode == "mirror":
        return g[:, ::-1]
    if left_mode == "alt":
        return LEFT_GLYPHS[cls % len(LEFT_GLYPHS)]
    raise FactorError(f"unknown left marker mode {left_mode!r}")


BACKGROUND_STYLES = {
    # name: (pattern, rgb)
    "plain-grey": ("plain", (0.35, 0.35, 0.35)),
    "hstripes-red": ("hstripes", (0.55, 0.2, 0.2)),
    "vstripes-green": ("vstripes", (0.2, 0.5, 0.25)),
    "checker-blue": ("checker", (0.2, 0.3, 0.6)),
    "dots-yellow": ("dots", (0.5, 0.5, 0.15)),
    "diag-purple": ("diag", (0.45, 0.2, 0.5)),
}

BACKGROUND_GREY = 0.35
OBJECT_RGB = (0.9, 0.85, 0.8)
MARKER_RGB = (0.95, 0.8, 0.7)


def object_glyph(cls: int) -> np.ndarray:
    if not 0 <= cls < len(_OBJECT_MARKS):
        raise FactorError(f"no object glyph for class {cls}")
    g = _OBJECT_BASE.copy()
    for r, c in _OBJECT_MARKS[cls]:
        g[r, c] = 1.0
    return g


def _background(style: str, size: int, contrast: float = 1.0) -> np.ndarray:
    if style not in BACKGROUND_STYLES:
        raise FactorError(f"unknown background style {style!r}")
    pattern, rgb = BACKGROUND_STYLES[style]
    r, c = np.mgrid[0:size, 0:size]
    if pattern == "plain":
        mask = np.ones((size, size))
    elif pattern == "hstripes":
        mask = np.where(r % 4 < 2, 1.0, 0.4)
    elif pattern == "vstripes":
        mask = np.where(c % 4 < 2, 1.0, 0.4)
    elif pattern == "checker":
        mask = np.where((r // 2 + c // 2) % 2 == 0, 1.0, 0.4)
    elif pattern == "dots":
        mask = np.where((r % 3 == 0) & (c % 3 == 0), 1.0, 0.5)
    else:
        mask = np.where((r + c) % 4 < 2, 1.0, 0.4)
    # contrast 0 collapses every style to the same flat grey
    rgb = BACKGROUND_GREY + contrast * (np.asarray(rgb) - BACKGROUND_GREY)
    mask = 1.0 - contrast * (1.0 - mask)
    return rgb[:, None, None] * mask[None]


# ---------------------------------------------------------------- the mixer


@dataclass(frozen=True)
class RenderParams:
    image_size: int = 16
    noise: float = 0.1
    left_marker: str = "mirror"
    background_contrast: float = 1.0


def layout(size: int, dx: int, dy: int, side: str):
    """Top-left corners of the 5x5 object box and the 3x3 marker box."""
    r0 = size // 2 - 2 + dy
    c0 = size // 2 - 2 + dx
    mr = r0 + 1
    mc = c0 - 3 if side == "L" else c0 + 5
    return (r0, c0), (mr, mc)


def render_scene(
    schema: FactorSchema,
    scene: Scene,
    params: RenderParams = RenderParams(),
    *,
    add_noise: bool = True,
    clip: bool = True,
) -> np.ndarray:
    """Mix a factor vector into a ``(3, S, S)`` image.

    ``add_noise=False, clip=False`` exposes the noise-free, unclamped mixture.
    """
    schema.validate(scene.values)
    v = scene.values
    size = params.image_size
    if size < 13:
        raise FactorError("image_size must be at least 13 to fit glyph and marker")
    cls = int(v["class"])
    img = _background(v["background"], size, params.background_contrast)

    (r0, c0), (mr, mc) = layout(size, int(v.get("pose_dx", 0)), int(v.get("pose_dy", 0)), v["marker_side"])
    tint = float(v.get("tint", 1.0))
    obj = object_glyph(int(v["object"]))
    img[:, r0 : r0 + 5, c0 : c0 + 5] = np.asarray(OBJECT_RGB)[:, None, None] * tint * obj[None]
    marker = marker_glyph(int(v["marker"]), v["marker_side"], params.left_marker)
    img[:, mr : mr + 3, mc : mc + 3] = np.asarray(MARKER_RGB)[:, None, None] * marker[None]

    img = img * float(v["brightness"])
    if add_noise and params.noise > 0:
        img = img + np.random.default_rng(scene.seed).normal(0.0, params.noise, img.shape)
    if clip:
        img = np.clip(img, 0.0, 1.0)
    return img


def region_masks(schema: FactorSchema, scene: Scene, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (S, S) masks covering the object box and the marker box."""
    v = scene.values
    (r0, c0), (mr, mc) = layout(size, int(v.get("pose_dx", 0)), int(v.get("pose_dy", 0)), v["marker_side"])
    obj = np.zeros((size, size), bool)
    obj[r0 : r0 + 5, c0 : c0 + 5] = True
    mark = np.zeros((size, size), bool)
    mark[mr : mr + 3, mc : mc + 3] = True
    return obj, mark


# ---------------------------------------------------------------- the world


@dataclass(frozen=True)
class World:
    schema: FactorSchema
    domains: tuple[DomainSpec, ...]
    render: RenderParams = RenderParams()
    n_per_class: int = 40
    chunk: int = 10
    object_reliability: float = 1.0  # P(object glyph shows the true class)
    marker_reliability: float = 1.0  # P(marker pattern shows the true class)
    side_class_skew: float = 0.0  # class-frequency tilt, opposite for the two marker sides

    def __post_init__(self):
        for name in ("object_reliability", "marker_reliability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise FactorError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.side_class_skew < 1.0:
            raise FactorError("side_class_skew must lie in [0, 1)")

    def class_counts(self, spec: DomainSpec, n_per_class: int) -> list[int]:
        """Per-class sample counts of a domain, in multiples of ``2 * chunk``.

        Right-side domains favour high class indices and left-side domains low
        ones, so the marker side carries information about the label itself.
        """
        k = len(self.schema["class"].values)
        tilt = np.linspace(-1.0, 1.0, k) if k > 1 else np.zeros(1)
        if spec.values.get("marker_side") == "L":
            tilt = tilt[::-1]
        step = 2 * self.chunk
        return [max(step, step * math.floor(n_per_class * (1.0 + self.side_class_skew * t) / step + 0.5)) for t in tilt]

    @property
    def domain_ids(self) -> tuple[int, ...]:
        return tuple(d.id for d in self.domains)

    def domain(self, domain_id: int) -> DomainSpec:
        for d in self.domains:
            if d.id == domain_id:
                return d
        raise KeyError(domain_id)


DEFAULT_WORLD = {
    "num_classes": 5,
    "image_size": 16,
    "noise": 0.1,
    "n_per_class": 40,
    "chunk": 5,
    "object_reliability": 0.8,
    "marker_reliability": 0.9,
    "left_marker": "alt",
    "background_contrast": 1.0,
    "side_class_skew": 0.8,
    "domains": [
        {"id": 1, "marker_side": "R", "background": "plain-grey", "brightness": 1.0},
        {"id": 2, "marker_side": "L", "background": "hstripes-red", "brightness": 0.9},
        {"id": 3, "marker_side": "L", "background": "checker-blue", "brightness": 1.0},
        {"id": 4, "marker_side": "R", "background": "vstripes-green", "brightness": 0.9},
    ],
}

_WORLD_KEYS = {
    "num_classes", "image_size", "noise", "n_per_class", "chunk", "domains", "brightness_levels", "object_reliability",
    "marker_reliability", "left_marker", "background_contrast", "side_class_skew",
}
DOMAIN_FACTORS = ("marker_side", "background", "brightness")


def make_schema(num_classes: int = 5, brightness_levels: Sequence[float] = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)) -> FactorSchema:
    if not 1 <= num_classes <= len(_OBJECT_MARKS):
        raise FactorError(f"num_classes must lie in [1, {len(_OBJECT_MARKS)}]")
    return FactorSchema(
        (
            Factor("class", CATEGORICAL, tuple(range(num_classes)), informative=True),
            Factor("object", CATEGORICAL, tuple(range(num_classes)), informative=True),
            Factor("marker", CATEGORICAL, tuple(range(num_classes)), informative=True),
            Factor("marker_side", CATEGORICAL, ("L", "R"), domain=True, informative=True),
            Factor("background", CATEGORICAL, tuple(BACKGROUND_STYLES), domain=True),
            Factor("brightness", CATEGORICAL, tuple(float(b) for b in brightness_levels), domain=True),
            Factor("pose_dx", CATEGORICAL, (-1, 0, 1)),
            Factor("pose_dy", CATEGORICAL, (-1, 0, 1)),
            Factor("tint", CONTINUOUS, low=0.85, high=1.0),
        )
    )


def make_world(config: Mapping[str, Any] | None = None) -> World:
    """Build a world from a mapping shaped like :data:`DEFAULT_WORLD`."""
    cfg = dict(DEFAULT_WORLD)
    if config:
        unknown = set(config) - _WORLD_KEYS
        if unknown:
            raise FactorError(f"unknown world keys {sorted(unknown)}")
        cfg.update(config)
    levels = cfg.get("brightness_levels", (0.5, 0.6, 0.7, 0.8, 0.9, 1.0))
    schema = make_schema(int(cfg["num_classes"]), levels)
    specs = []
    seen = {}
    for i, d in enumerate(cfg["domains"]):
        if "id" not in d:
            raise FactorError(f"domain entry {i} lacks an 'id'")
        unknown = set(d) - {"id", *DOMAIN_FACTORS}
        if unknown:
            raise FactorError(f"domain {d['id']}: {sorted(unknown)} are not domain factors")
        values = {}
        for name in DOMAIN_FACTORS:
            if name not in d:
                raise FactorError(f"domain {d['id']} lacks a value for domain factor {name!r}")
            val = d[name]
            if isinstance(val, (list, tuple, set)):
                raise FactorError(f"domain factor {name!r} varies within domain {d['id']}")
            if name == "brightness":
                val = float(val)
            if not schema[name].contains(val):
                raise FactorError(f"domain {d['id']}: invalid value {val!r} for {name!r}")
            values[name] = val
        key = tuple(values[n] for n in DOMAIN_FACTORS)
        if key in seen:
            raise FactorError(f"domains {seen[key]} and {d['id']} share all domain-factor values")
        seen[key] = d["id"]
        specs.append(DomainSpec(int(d["id"]), values))
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        raise FactorError("duplicate domain ids")
    if not specs:
        raise FactorError("world needs at least one domain")
    return World(
        schema,
        tuple(specs),
        RenderParams(int(cfg["image_size"]), float(cfg["noise"]), str(cfg.get("left_marker", "mirror")),
                     float(cfg.get("background_contrast", 1.0))),
        int(cfg["n_per_class"]),
        int(cfg["chunk"]),
        float(cfg.get("object_reliability", 1.0)),
        float(cfg.get("marker_reliability", 1.0)),
        float(cfg.get("side_class_skew", 0.0)),
    )


def sample_domain(world: World, spec: DomainSpec, n_per_class: int, rng: np.random.Generator) -> Dataset:
    """Class-major sample of one domain, in recording-stream order.

    Classes are balanced unless the world sets ``side_class_skew``.
    """
    if n_per_class <= 0:
        raise ValueError("n_per_class must be positive")
    schema = world.schema
    scenes = []
    for cls, count in zip(schema["class"].values, world.class_counts(spec, n_per_class)):
        for _ in range(count):
            values = {"class": cls, **spec.values}
            others = [c for c in schema["class"].values if c != cls] or [cls]
            for name, rel in (("object", world.object_reliability), ("marker", world.marker_reliability)):
                values[name] = cls if rng.random() < rel else others[int(rng.integers(len(others)))]
            for f in schema.factors:
                if f.name in values:
                    continue
                if f.kind == CATEGORICAL:
                    values[f.name] = f.values[int(rng.integers(len(f.values)))]
                else:
                    values[f.name] = float(rng.uniform(f.low, f.high))
            scenes.append(Scene(values, int(rng.integers(2**63 - 1))))
    images = np.stack([render_scene(schema, s, world.render) for s in scenes])
    labels = np.array([s.values["class"] for s in scenes], dtype=np.int64)
    return Dataset(images, labels, np.full(len(scenes), spec.id, dtype=np.int64), "all", scenes)


def split_train_test(dataset: Dataset, chunk: int) -> tuple[Dataset, Dataset]:
    """Alternate per-class chunks of ``chunk`` consecutive samples between train and test."""
    if chunk <= 0:
        raise ValueError("chunk must be positive")
    train_idx, test_idx = [], []
    for cls in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == cls)
        if len(idx) % (2 * chunk):
            raise ValueError(f"class {cls}: {len(idx)} samples not divisible by 2*chunk={2 * chunk}")
        for k in range(0, len(idx), chunk):
            (train_idx if (k // chunk) % 2 == 0 else test_idx).extend(idx[k : k + chunk])
    return dataset.subset(sorted(train_idx), "train"), dataset.subset(sorted(test_idx), "test")


# ----------------------------------------------------------------- fixture

CORE50_LEFT_HAND = frozenset({2, 3, 7, 9, 11})

# published Avg / Min per source row and Avg / Max per target column
PRINTED_ROW_AVG = {1: 0.63, 2: 0.65, 3: 0.60, 4: 0.58, 5: 0.52, 6: 0.55, 7: 0.63, 8: 0.61, 9: 0.51, 10: 0.69, 11: 0.57}
PRINTED_ROW_MIN = {1: 0.45, 2: 0.54, 3: 0.36, 4: 0.36, 5: 0.34, 6: 0.38, 7: 0.47, 8: 0.48, 9: 0.30, 10: 0.59, 11: 0.40}
PRINTED_COL_AVG = {1: 0.68, 2: 0.61, 3: 0.64, 4: 0.63, 5: 0.59, 6: 0.51, 7: 0.59, 8: 0.64, 9: 0.56, 10: 0.50, 11: 0.58}
PRINTED_COL_MAX = {1: 0.83, 2: 0.78, 3: 0.80, 4: 0.81, 5: 0.75, 6: 0.70, 7: 0.74, 8: 0.80, 9: 0.76, 10: 0.68, 11: 0.76}


@dataclass(frozen=True)
class TransferFixture:
    domain_ids: tuple[int, ...]
    matrix: np.ndarray  # (m, m), NaN on the diagonal
    hand: Mapping[int, str]

    def accuracy(self, source: int, target: int) -> float:
        i, j = self.domain_ids.index(source), self.domain_ids.index(target)
        if i == j:
            raise KeyError("diagonal entries are absent")
        return float(self.matrix[i, j])

    def domain_specs(self) -> list[DomainSpec]:
        return [DomainSpec(d, {"hand": self.hand[d]}) for d in self.domain_ids]


def default_fixture_path() -> Path:
    return Path(str(resources.files("factorda") / "data" / "core50_transfer.csv"))


def load_accuracy_fixture(path: str | Path | None = None, left_hand=CORE50_LEFT_HAND) -> TransferFixture:
    """Read a ``source,target,accuracy`` CSV into a square transfer fixture."""
    path = Path(path) if path is not None else default_fixture_path()
    entries: dict[tuple[int, int], float] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["source", "target", "accuracy"]:
            raise FixtureError(f"{path}: row 1: expected header 'source,target,accuracy', got {header}")
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise FixtureError(f"{path}: row {rowno}: expected 3 fields, got {len(row)}")
            try:
                s, t, acc = int(row[0]), int(row[1]), float(row[2])
            except ValueError:
                raise FixtureError(f"{path}: row {rowno}: malformed values {row}") from None
            if not (math.isfinite(acc) and 0.0 <= acc <= 1.0):
                raise FixtureError(f"{path}: row {rowno}: accuracy {acc} outside [0, 1]")
            if s == t:
                raise FixtureError(f"{path}: row {rowno}: diagonal entry {s}->{t}")
            if (s, t) in entries:
                raise FixtureError(f"{path}: row {rowno}: duplicate entry {s}->{t}")
            entries[(s, t)] = acc
    ids = tuple(sorted({s for s, _ in entries} | {t for _, t in entries}))
    m = len(ids)
    if len(entries) != m * (m - 1):
        raise FixtureError(f"{path}: {len(entries)} entries, a full {m}x{m} table needs {m * (m - 1)}")
    pos = {d: i for i, d in enumerate(ids)}
    mat = np.full((m, m), np.nan)
    for (s, t), acc in entries.items():
        mat[pos[s], pos[t]] = acc
    hand = {d: ("left" if d in left_hand else "right") for d in ids}
    return TransferFixture(ids, mat, hand)


def fixture_marginals(fx: TransferFixture) -> dict[str, dict[int, float]]:
    m = fx.matrix
    ids = fx.domain_ids
    return {
        "row_avg": {d: float(np.nanmean(m[i])) for i, d in enumerate(ids)},
        "row_min": {d: float(np.nanmin(m[i])) for i, d in enumerate(ids)},
        "col_avg": {d: float(np.nanmean(m[:, j])) for j, d in enumerate(ids)},
        "col_max": {d: float(np.nanmax(m[:, j])) for j, d in enumerate(ids)},
    }
