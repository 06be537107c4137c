"""Synthetic compositional shapes world.

Scenes are symbolic: up to four objects (shape, color, grid cell, size tier)
on a 3x3 cell grid over a neutral gray background.  The module provides a
deterministic rasterizer at draft and final resolutions, an oracle object
detector, a fixed prompt featurizer, and a compositional scorer in the style
of object/attribute/count/position evaluation suites.

Rasterization happens once on the 96x96 base grid with hard (center-in-shape)
pixel decisions; lower resolutions are exact block averages of the base
raster, so a draft render is by construction the ideal box-downsample of the
final render.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .basis import hashed_vector, sum_vectors
from .errors import ConfigError, InvalidPromptError, InvalidSceneError

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "purple": (0.6, 0.0, 0.8),
    "orange": (1.0, 0.5, 0.0),
}
COLOR_NAMES = tuple(COLORS)
SIZES = ("small", "large")
SIZE_FRAC = {"small": 0.45, "large": 0.8}
RELATIONS = ("left-of", "right-of", "above", "below")

GRID = 3
N_CELLS = GRID * GRID
MAX_OBJECTS = 4
BACKGROUND = (0.5, 0.5, 0.5)

DRAFT_RES = 24
FINAL_RES = 96
BASE_RES = 96

PROMPT_DIM = 48
MAX_CONSTRAINTS = 6
SUBTASKS = (
    "single_object",
    "two_objects",
    "counting",
    "colors",
    "position",
    "color_attribution",
)

DETECT_CONFIDENCE_THRESHOLD = 0.4
SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# scene types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class SceneObject:
    shape: str
    color: str
    cell: int
    size: str

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise InvalidSceneError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise InvalidSceneError(f"unknown color {self.color!r}")
        if not 0 <= self.cell < N_CELLS:
            raise InvalidSceneError(f"cell {self.cell} out of range")
        if self.size not in SIZES:
            raise InvalidSceneError(f"unknown size {self.size!r}")


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple

    def __post_init__(self):
        objs = tuple(self.objects)
        object.__setattr__(self, "objects", objs)
        if len(objs) > MAX_OBJECTS:
            raise InvalidSceneError(f"at most {MAX_OBJECTS} objects, got {len(objs)}")
        cells = [o.cell for o in objs]
        if len(set(cells)) != len(cells):
            raise InvalidSceneError(f"overlapping cells in {cells}")

    def key(self):
        return tuple(sorted((o.shape, o.color, o.cell, o.size) for o in self.objects))


def scene_equal(a: SceneSpec, b: SceneSpec) -> bool:
    return a.key() == b.key()


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

_CELL_PX = BASE_RES // GRID  # 32


@lru_cache(maxsize=None)
def _object_mask(shape: str, size: str) -> np.ndarray:
    """Boolean cell-local mask (32x32) at base resolution."""
    half = SIZE_FRAC[size] / 2.0
    coords = (np.arange(_CELL_PX) + 0.5) / _CELL_PX - 0.5
    u, v = np.meshgrid(coords, coords, indexing="xy")  # u: x (col), v: y (row)
    if shape == "circle":
        mask = u**2 + v**2 <= half**2
    elif shape == "square":
        mask = np.maximum(np.abs(u), np.abs(v)) <= half
    else:  # triangle, apex up
        ax, ay = 0.0, -half
        bx, by = -half, half
        cx, cy = half, half

        def edge(px, py, qx, qy):
            return (qx - px) * (v - py) - (qy - py) * (u - px)

        e1 = edge(ax, ay, bx, by)
        e2 = edge(bx, by, cx, cy)
        e3 = edge(cx, cy, ax, ay)
        mask = (e1 <= 0) & (e2 <= 0) & (e3 <= 0)
    mask.flags.writeable = False
    return mask


def render(scene: SceneSpec, resolution: int = FINAL_RES) -> np.ndarray:
    """Deterministic rasterization of a scene at a supported resolution."""
    if not isinstance(scene, SceneSpec):
        scene = SceneSpec(tuple(scene))
    if resolution < 1 or BASE_RES % resolution != 0:
        raise ConfigError(f"resolution {resolution} must divide {BASE_RES}")
    img = np.empty((BASE_RES, BASE_RES, 3))
    img[:] = BACKGROUND
    for obj in scene.objects:
        row, col = divmod(obj.cell, GRID)
        mask = _object_mask(obj.shape, obj.size)
        block = img[
            row * _CELL_PX : (row + 1) * _CELL_PX,
            col * _CELL_PX : (col + 1) * _CELL_PX,
        ]
        block[mask] = COLORS[obj.color]
    if resolution == BASE_RES:
        return img
    f = BASE_RES // resolution
    return img.reshape(resolution, f, resolution, f, 3).mean(axis=(1, 3))


def upsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor upsampling (used to detect low-resolution drafts)."""
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectedObject:
    """Detector output for one occupied cell; shape None marks an ambiguous
    cell below the confidence threshold."""

    shape: Optional[str]
    color: str
    cell: int
    size: Optional[str]
    confidence: float


_REFS = np.array([BACKGROUND] + [COLORS[c] for c in COLOR_NAMES])
_REF_NORMS = (_REFS**2).sum(axis=1)


def _classify_pixels(patch: np.ndarray) -> np.ndarray:
    """Nearest-reference color labels; 0 is background, 1.. are palette."""
    # argmin of ||x - r||^2 = argmin of -2 x.r + ||r||^2 (||x||^2 constant)
    scores = patch.reshape(-1, 3) @ (-2.0 * _REFS.T) + _REF_NORMS
    return scores.argmin(axis=1).reshape(patch.shape[:2])


_TEMPLATE_KEYS = tuple((s, z) for s in SHAPES for z in SIZES)


@lru_cache(maxsize=None)
def _templates(resolution: int):
    """Per-color stacks of foreground masks for the six (shape, size) pairs,
    plus the minimum foreground pixel count used as the empty-cell cutoff."""
    if resolution % GRID != 0:
        raise ConfigError(f"detector needs resolution divisible by {GRID}")
    p = resolution // GRID
    if p > _CELL_PX or _CELL_PX % p != 0:
        raise ConfigError(f"unsupported detector resolution {resolution}")
    f = _CELL_PX // p
    stacks = {}
    min_fg = None
    for color in COLOR_NAMES:
        masks = []
        for shape, size in _TEMPLATE_KEYS:
            cov = _object_mask(shape, size).astype(float)
            cov = cov.reshape(p, f, p, f).mean(axis=(1, 3))
            patch = cov[..., None] * COLORS[color] + (1 - cov[..., None]) * np.array(
                BACKGROUND
            )
            fg = _classify_pixels(patch) > 0
            masks.append(fg)
            n = int(fg.sum())
            if n and (min_fg is None or n < min_fg):
                min_fg = n
        stack = np.stack(masks)
        stack.flags.writeable = False
        stacks[color] = stack
    return stacks, max(1, (min_fg or 2) // 2)


def detect(image: np.ndarray) -> list:
    """Oracle per-cell detection of objects in a rendered or sampled image.

    Works at draft (24) and final (96) resolution.  Each occupied cell yields
    a DetectedObject; cells whose best template match falls below the
    confidence threshold are reported with shape/size None.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] != image.shape[1]:
        raise ConfigError(f"expected square HxWx3 image, got {image.shape}")
    res = image.shape[0]
    if res not in (DRAFT_RES, FINAL_RES):
        raise ConfigError(f"detect supports resolutions {DRAFT_RES} and {FINAL_RES}")
    templates, min_fg = _templates(res)
    p = res // GRID
    all_labels = _classify_pixels(image)
    found = []
    for cell in range(N_CELLS):
        row, col = divmod(cell, GRID)
        labels = all_labels[row * p : (row + 1) * p, col * p : (col + 1) * p]
        fg = labels > 0
        n_fg = int(fg.sum())
        if n_fg < min_fg:
            continue
        counts = np.bincount(labels[fg], minlength=len(_REFS))
        color = COLOR_NAMES[int(counts[1:].argmax())]
        stack = templates[color]
        inter = (fg & stack).sum(axis=(1, 2))
        union = (fg | stack).sum(axis=(1, 2))
        ious = inter / np.maximum(union, 1)
        best = int(ious.argmax())
        best_iou = float(ious[best])
        if best_iou < DETECT_CONFIDENCE_THRESHOLD:
            found.append(DetectedObject(None, color, cell, None, best_iou))
        else:
            shape, size = _TEMPLATE_KEYS[best]
            found.append(DetectedObject(shape, color, cell, size, best_iou))
    return found


def confident_objects(detections) -> list:
    """Drop unknown-shape detections; returns (shape, color, cell, size) tuples."""
    return [
        (d.shape, d.color, d.cell, d.size) for d in detections if d.shape is not None
    ]


# ---------------------------------------------------------------------------
# prompts
# ---------------------------------------------------------------------------

CONSTRAINT_KINDS = ("presence", "count", "relpos", "binding")


def _validate_constraint(c):
    if not isinstance(c, tuple):
        raise InvalidPromptError(f"constraint must be a tuple, got {type(c)}")
    kind = c[0]
    if kind == "presence":
        _, shape, color = c
        ok = shape in SHAPES and (color is None or color in COLORS)
    elif kind == "count":
        _, shape, n = c
        ok = shape in SHAPES and isinstance(n, int) and 0 < n <= MAX_OBJECTS
    elif kind == "relpos":
        _, shape_a, rel, shape_b = c
        ok = shape_a in SHAPES and shape_b in SHAPES and rel in RELATIONS
    elif kind == "binding":
        _, shape, color = c
        ok = shape in SHAPES and color in COLORS
    else:
        raise InvalidPromptError(f"unknown constraint kind {kind!r}")
    if not ok:
        raise InvalidPromptError(f"malformed constraint {c!r}")


@dataclass(frozen=True)
class PromptSpec:
    """A prompt is a small set of typed constraints over the scene."""

    constraints: tuple

    def __post_init__(self):
        cs = tuple(tuple(c) for c in self.constraints)
        object.__setattr__(self, "constraints", cs)
        if len(cs) > MAX_CONSTRAINTS:
            raise InvalidPromptError(
                f"at most {MAX_CONSTRAINTS} constraints, got {len(cs)}"
            )
        for c in cs:
            _validate_constraint(c)


def encode_prompt(pspec: PromptSpec) -> np.ndarray:
    """Order-invariant 48-dim embedding: sum of frozen per-constraint vectors."""
    if not isinstance(pspec, PromptSpec):
        pspec = PromptSpec(tuple(pspec))
    return sum_vectors(
        (f"prompt|{c!r}" for c in pspec.constraints), PROMPT_DIM
    )


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def _cell_rc(cell):
    return divmod(cell, GRID)


def eval_constraint(objects, c) -> bool:
    """Evaluate one constraint against (shape, color, cell, size) tuples."""
    kind = c[0]
    if kind == "presence":
        _, shape, color = c
        return any(
            o[0] == shape and (color is None or o[1] == color) for o in objects
        )
    if kind == "count":
        _, shape, n = c
        return sum(1 for o in objects if o[0] == shape) == n
    if kind == "relpos":
        _, shape_a, rel, shape_b = c
        for oa in objects:
            if oa[0] != shape_a:
                continue
            ra, ca = _cell_rc(oa[2])
            for ob in objects:
                if ob is oa or ob[0] != shape_b:
                    continue
                rb, cb = _cell_rc(ob[2])
                if (
                    (rel == "left-of" and ca < cb)
                    or (rel == "right-of" and ca > cb)
                    or (rel == "above" and ra < rb)
                    or (rel == "below" and ra > rb)
                ):
                    return True
        return False
    if kind == "binding":
        _, shape, color = c
        return any(o[0] == shape and o[1] == color for o in objects)
    raise InvalidPromptError(f"unknown constraint kind {kind!r}")


def constraint_subtask(c, pspec: PromptSpec) -> str:
    """Map a constraint to its scoring subtask category."""
    kind = c[0]
    if kind == "count":
        return "counting"
    if kind == "relpos":
        return "position"
    if kind == "binding":
        return "color_attribution"
    if c[2] is not None:  # presence with a color
        return "colors"
    n_plain = sum(
        1 for other in pspec.constraints if other[0] == "presence" and other[2] is None
    )
    return "single_object" if n_plain <= 1 else "two_objects"


@dataclass(frozen=True)
class ScoreReport:
    flags: tuple
    subtasks: dict
    overall: float


def score_objects(objects, pspec: PromptSpec) -> ScoreReport:
    """Score an object list against a prompt, 0/1 per constraint."""
    flags = tuple(eval_constraint(objects, c) for c in pspec.constraints)
    per_task = {}
    for c, flag in zip(pspec.constraints, flags):
        per_task.setdefault(constraint_subtask(c, pspec), []).append(flag)
    subtasks = {k: float(np.mean(v)) for k, v in per_task.items()}
    overall = float(np.mean(flags)) if flags else 1.0
    return ScoreReport(flags, subtasks, overall)


def score(image: np.ndarray, pspec: PromptSpec) -> ScoreReport:
    """Detect objects in a rendered/generated image and score the prompt."""
    return score_objects(confident_objects(detect(image)), pspec)


# ---------------------------------------------------------------------------
# captions: the exact constraint set of a scene, within the prompt budget
# ---------------------------------------------------------------------------

def _relation_for(oa, ob):
    ra, ca = _cell_rc(oa.cell)
    rb, cb = _cell_rc(ob.cell)
    if ca != cb:
        return "left-of" if ca < cb else "right-of"
    return "above" if ra < rb else "below"


def caption(scene: SceneSpec, prefer_relpos: bool = False) -> PromptSpec:
    """Emit the constraints that exactly describe a scene.

    The constraint budget forces a selection: by default counts come first,
    then color bindings, then one relative-position constraint if it fits.
    With ``prefer_relpos`` the position constraints take priority over the
    bindings, which is what layout-style prompts need to stay discriminative.
    """
    objs = sorted(scene.objects)
    shapes = sorted({o.shape for o in objs})
    counts = [
        ("count", s, sum(1 for o in objs if o.shape == s)) for s in shapes
    ]
    bindings = []
    for shape, color in sorted({(o.shape, o.color) for o in objs}):
        bindings.append(("binding", shape, color))
    relpos = []
    for i, oa in enumerate(objs):
        for ob in objs[i + 1 :]:
            if oa.shape == ob.shape:
                continue
            relpos.append(("relpos", oa.shape, _relation_for(oa, ob), ob.shape))
    chosen = list(counts)
    second = relpos if prefer_relpos else bindings
    third = bindings if prefer_relpos else relpos[:1]
    for group in (second, third):
        for c in group:
            if len(chosen) >= MAX_CONSTRAINTS:
                break
            chosen.append(c)
    return PromptSpec(tuple(chosen))


# ---------------------------------------------------------------------------
# random scenes and evaluation prompts
# ---------------------------------------------------------------------------

def random_scene(rng, n_objects=None, distinct_shapes=False) -> SceneSpec:
    """Sample a valid scene; plain uniform choices over the vocabulary."""
    if n_objects is None:
        n_objects = int(rng.integers(1, MAX_OBJECTS + 1))
    cells = rng.choice(N_CELLS, size=n_objects, replace=False)
    if distinct_shapes:
        shapes = rng.choice(len(SHAPES), size=n_objects, replace=False)
    else:
        shapes = rng.integers(0, len(SHAPES), size=n_objects)
    objs = tuple(
        SceneObject(
            SHAPES[int(s)],
            COLOR_NAMES[int(rng.integers(0, len(COLOR_NAMES)))],
            int(c),
            SIZES[int(rng.integers(0, len(SIZES)))],
        )
        for s, c in zip(shapes, cells)
    )
    return SceneSpec(objs)


EVAL_CATEGORIES = SUBTASKS


def sample_eval_prompt(rng, category: str):
    """Draw one held-out evaluation prompt of the given category.

    Returns (PromptSpec, reference SceneSpec); the scene witnesses that the
    prompt is satisfiable.
    """
    if category == "single_object":
        scene = random_scene(rng, 1)
        cs = [("presence", scene.objects[0].shape, None)]
    elif category == "two_objects":
        scene = random_scene(rng, 2, distinct_shapes=True)
        cs = [("presence", o.shape, None) for o in sorted(scene.objects)]
    elif category == "counting":
        shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
        n = int(rng.integers(1, MAX_OBJECTS + 1))
        color = COLOR_NAMES[int(rng.integers(0, len(COLOR_NAMES)))]
        cells = rng.choice(N_CELLS, size=n, replace=False)
        size = SIZES[int(rng.integers(0, len(SIZES)))]
        scene = SceneSpec(
            tuple(SceneObject(shape, color, int(c), size) for c in cells)
        )
        cs = [("count", shape, n)]
    elif category == "colors":
        scene = random_scene(rng, 1)
        o = scene.objects[0]
        cs = [("presence", o.shape, o.color)]
    elif category == "position":
        scene = random_scene(rng, 2, distinct_shapes=True)
        oa, ob = sorted(scene.objects)
        cs = [("relpos", oa.shape, _relation_for(oa, ob), ob.shape)]
    elif category == "color_attribution":
        while True:
            scene = random_scene(rng, 2, distinct_shapes=True)
            a, b = sorted(scene.objects)
            if a.color != b.color:
                break
        cs = [("binding", a.shape, a.color), ("binding", b.shape, b.color)]
    else:
        raise ConfigError(f"unknown eval category {category!r}")
    return PromptSpec(tuple(cs)), scene


# ---------------------------------------------------------------------------
# persistence: portable pixmaps and line-delimited records
# ---------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray):
    """8-bit binary portable pixmap (P6)."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"P6":
            raise ConfigError(f"{path}: not a binary PPM")
        w, h = map(int, f.readline().split())
        maxval = int(f.readline())
        raw = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return raw.reshape(h, w, 3).astype(np.float64) / maxval


def scene_to_record(scene: SceneSpec) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "objects": [[o.shape, o.color, o.cell, o.size] for o in scene.objects],
    }


def scene_from_record(rec: dict) -> SceneSpec:
    return SceneSpec(
        tuple(SceneObject(s, c, int(cell), size) for s, c, cell, size in rec["objects"])
    )


def prompt_to_record(pspec: PromptSpec) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "constraints": [list(c) for c in pspec.constraints],
    }


def prompt_from_record(rec: dict) -> PromptSpec:
    return PromptSpec(tuple(tuple(c) for c in rec["constraints"]))


def write_records(path, records):
    """Line-delimited JSON with stable key order."""
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_records(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
