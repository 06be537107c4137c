"""Synthetic correction-pair construction and training-set assembly.

Three generators produce (draft scene, target scene) pairs for the atomic
correction capabilities:

* general     -- one object changes color or shape;
* instance    -- instances of one object class are added/removed, or exactly
                 one among identical peers is recolored;
* layout      -- 2-3 objects permute their cells, appearance unchanged.

Each pair carries a minimal typed diff (applying it to the draft scene yields
the target scene exactly; dropping any op breaks equality), from which a
structured verification record is derived: per-constraint aligned flags
followed by the correction ops.  A cross-validation filter re-detects the
rendered target and keeps only samples whose count/position constraints hold.

The assembled training set mixes four categories: correction-needed,
no-correction, and text-to-image at both resolutions.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import scenes
from .basis import hashed_vector, sum_vectors
from .errors import ConfigError, InconsistentPairError, InvalidSceneError
from .scenes import (
    COLOR_NAMES,
    DRAFT_RES,
    FINAL_RES,
    MAX_OBJECTS,
    N_CELLS,
    SHAPES,
    SIZES,
    PromptSpec,
    SceneObject,
    SceneSpec,
    scene_equal,
)

CAPABILITIES = ("general", "instance", "layout")
CATEGORIES = ("correction", "no_correction", "t2i_low", "t2i_high")
OP_KINDS = ("none", "recolor", "add", "remove", "move", "swap")
VERIFICATION_DIM = 64
MAX_OPS = 2

DEFAULT_MIX = {"correction": 0.4, "no_correction": 0.2, "t2i_low": 0.2, "t2i_high": 0.2}


# ---------------------------------------------------------------------------
# correction ops
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorrectionOp:
    """One typed edit: target object identified by (shape, color, cell)."""

    kind: str
    shape: Optional[str] = None
    color: Optional[str] = None
    cell: Optional[int] = None
    size: Optional[str] = None
    new_color: Optional[str] = None
    dest_cell: Optional[int] = None
    other_cell: Optional[int] = None

    def canonical(self):
        return (
            self.kind,
            self.shape,
            self.color,
            self.cell,
            self.size,
            self.new_color,
            self.dest_cell,
            self.other_cell,
        )


def _find(objs, shape, color, cell):
    for i, o in enumerate(objs):
        if o.shape == shape and o.color == color and o.cell == cell:
            return i
    raise InvalidSceneError(
        f"no object ({shape}, {color}) at cell {cell} to apply op to"
    )


def apply_ops(scene: SceneSpec, ops) -> SceneSpec:
    """Apply a diff to a scene; raises if any op does not fit the scene."""
    objs = list(scene.objects)
    for op in ops:
        if op.kind == "none":
            continue
        if op.kind == "recolor":
            i = _find(objs, op.shape, op.color, op.cell)
            objs[i] = SceneObject(objs[i].shape, op.new_color, objs[i].cell, objs[i].size)
        elif op.kind == "add":
            if any(o.cell == op.cell for o in objs):
                raise InvalidSceneError(f"cell {op.cell} already occupied")
            objs.append(SceneObject(op.shape, op.color, op.cell, op.size))
        elif op.kind == "remove":
            del objs[_find(objs, op.shape, op.color, op.cell)]
        elif op.kind == "move":
            if any(o.cell == op.dest_cell for o in objs):
                raise InvalidSceneError(f"cell {op.dest_cell} already occupied")
            i = _find(objs, op.shape, op.color, op.cell)
            objs[i] = SceneObject(objs[i].shape, objs[i].color, op.dest_cell, objs[i].size)
        elif op.kind == "swap":
            i = _find(objs, op.shape, op.color, op.cell)
            j = next(
                (k for k, o in enumerate(objs) if o.cell == op.other_cell), None
            )
            if j is None:
                raise InvalidSceneError(f"no object at cell {op.other_cell} to swap")
            oi, oj = objs[i], objs[j]
            objs[i] = SceneObject(oi.shape, oi.color, oj.cell, oi.size)
            objs[j] = SceneObject(oj.shape, oj.color, oi.cell, oj.size)
        else:
            raise ConfigError(f"unknown op kind {op.kind!r}")
    return SceneSpec(tuple(objs))


@dataclass(frozen=True)
class CorrectionPair:
    """Draft/target scene pair with the minimal diff connecting them."""

    a_scene: SceneSpec
    b_scene: SceneSpec
    capability: str
    diff: tuple

    def __post_init__(self):
        if self.capability not in CAPABILITIES:
            raise ConfigError(f"unknown capability {self.capability!r}")
        if not scene_equal(apply_ops(self.a_scene, self.diff), self.b_scene):
            raise InvalidSceneError("diff does not map a_scene to b_scene")


def diff_is_minimal(pair: CorrectionPair) -> bool:
    """True iff dropping any single op no longer reproduces b_scene."""
    ops = pair.diff
    for i in range(len(ops)):
        reduced = ops[:i] + ops[i + 1 :]
        try:
            if scene_equal(apply_ops(pair.a_scene, reduced), pair.b_scene):
                return False
        except InvalidSceneError:
            continue
    return True


def touched_cells(pair: CorrectionPair) -> set:
    """Cells named anywhere in the diff (for pixel-anchor checks)."""
    cells = set()
    for op in pair.diff:
        for c in (op.cell, op.dest_cell, op.other_cell):
            if c is not None:
                cells.add(c)
    return cells


def untouched_objects_identical(pair: CorrectionPair) -> bool:
    """Objects not named by the diff must appear unchanged in both scenes."""
    touched_a = set()
    touched_b = set()
    for op in pair.diff:
        if op.kind in ("recolor", "remove", "move", "swap"):
            touched_a.add((op.shape, op.color, op.cell))
        if op.kind == "swap":
            touched_a.add((None, None, op.other_cell))
    a_keep = {
        o
        for o in pair.a_scene.objects
        if (o.shape, o.color, o.cell) not in touched_a
        and (None, None, o.cell) not in touched_a
    }
    # every kept draft object must exist identically in the target scene
    return all(o in set(pair.b_scene.objects) for o in a_keep)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def _rng(seed):
    return np.random.default_rng(seed)


def gen_general_correction(seed) -> CorrectionPair:
    """Exactly one object's color or shape changes between the scenes."""
    rng = _rng(seed)
    a = scenes.random_scene(rng)
    objs = list(a.objects)
    i = int(rng.integers(0, len(objs)))
    target = objs[i]
    if rng.random() < 0.7:  # color edit
        choices = [c for c in COLOR_NAMES if c != target.color]
        new_color = choices[int(rng.integers(0, len(choices)))]
        diff = (
            CorrectionOp(
                "recolor",
                shape=target.shape,
                color=target.color,
                cell=target.cell,
                new_color=new_color,
            ),
        )
    else:  # shape edit = remove + add at the same cell
        choices = [s for s in SHAPES if s != target.shape]
        new_shape = choices[int(rng.integers(0, len(choices)))]
        diff = (
            CorrectionOp(
                "remove", shape=target.shape, color=target.color, cell=target.cell
            ),
            CorrectionOp(
                "add",
                shape=new_shape,
                color=target.color,
                cell=target.cell,
                size=target.size,
            ),
        )
    b = apply_ops(a, diff)
    return CorrectionPair(a, b, "general", diff)


def gen_instance_manipulation(seed) -> CorrectionPair:
    """Count or single-attribute changes among identical same-class objects."""
    rng = _rng(seed)
    shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
    color = COLOR_NAMES[int(rng.integers(0, len(COLOR_NAMES)))]
    size = SIZES[int(rng.integers(0, len(SIZES)))]
    k = int(rng.integers(2, MAX_OBJECTS + 1))
    cells = [int(c) for c in rng.choice(N_CELLS, size=k, replace=False)]
    a = SceneSpec(tuple(SceneObject(shape, color, c, size) for c in cells))
    mode = rng.random()
    if mode < 0.4 and k > 1:  # remove 1-2
        d = int(rng.integers(1, min(2, k - 1) + 1))
        victims = sorted(cells[:d])
        diff = tuple(
            CorrectionOp("remove", shape=shape, color=color, cell=c) for c in victims
        )
    elif mode < 0.7 and k < MAX_OBJECTS:  # add 1-2
        free = [c for c in range(N_CELLS) if c not in cells]
        d = int(rng.integers(1, min(2, MAX_OBJECTS - k) + 1))
        new_cells = sorted(int(c) for c in rng.choice(free, size=d, replace=False))
        diff = tuple(
            CorrectionOp("add", shape=shape, color=color, cell=c, size=size)
            for c in new_cells
        )
    else:  # recolor exactly one instance among identical peers
        victim = cells[int(rng.integers(0, k))]
        choices = [c for c in COLOR_NAMES if c != color]
        new_color = choices[int(rng.integers(0, len(choices)))]
        diff = (
            CorrectionOp(
                "recolor", shape=shape, color=color, cell=victim, new_color=new_color
            ),
        )
    b = apply_ops(a, diff)
    return CorrectionPair(a, b, "instance", diff)


def gen_layout_reorg(seed) -> CorrectionPair:
    """Permute the cells of 2-3 objects; appearance multiset is unchanged."""
    rng = _rng(seed)
    while True:
        n = int(rng.integers(2, MAX_OBJECTS + 1))
        a = scenes.random_scene(rng, n_objects=n)
        objs = sorted(a.objects)
        m = int(rng.integers(2, min(3, n) + 1))
        idx = sorted(int(i) for i in rng.choice(n, size=m, replace=False))
        chosen = [objs[i] for i in idx]
        appearance = [(o.shape, o.color, o.size) for o in chosen]
        if m == 3 and appearance[1] in (appearance[0], appearance[2]):
            # a dropped transposition could still reproduce b_scene
            continue
        if m == 2:
            perm_cells = [chosen[1].cell, chosen[0].cell]
            diff = (
                CorrectionOp(
                    "swap",
                    shape=chosen[0].shape,
                    color=chosen[0].color,
                    cell=chosen[0].cell,
                    other_cell=chosen[1].cell,
                ),
            )
        else:
            # 3-cycle c0 <- c1 <- c2 <- c0 as two transpositions
            diff = (
                CorrectionOp(
                    "swap",
                    shape=chosen[0].shape,
                    color=chosen[0].color,
                    cell=chosen[0].cell,
                    other_cell=chosen[1].cell,
                ),
                CorrectionOp(
                    "swap",
                    shape=chosen[1].shape,
                    color=chosen[1].color,
                    cell=chosen[0].cell,
                    other_cell=chosen[2].cell,
                ),
            )
        b = apply_ops(a, diff)
        if not scene_equal(a, b):
            return CorrectionPair(a, b, "layout", diff)


_GENERATORS = {
    "general": gen_general_correction,
    "instance": gen_instance_manipulation,
    "layout": gen_layout_reorg,
}


def generate_pair(capability: str, seed) -> CorrectionPair:
    if capability not in _GENERATORS:
        raise ConfigError(f"unknown capability {capability!r}")
    return _GENERATORS[capability](seed)


# ---------------------------------------------------------------------------
# verification records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VerificationRecord:
    """Structured misalignment report: per-constraint flags, then the ops."""

    aligned: bool
    findings: tuple  # one aligned flag per prompt constraint
    ops: tuple = ()

    def __post_init__(self):
        if self.aligned != (len(self.ops) == 0):
            raise ConfigError("aligned=true must mean an empty op list")


def encode_verification(record: VerificationRecord) -> np.ndarray:
    """Deterministic 64-dim embedding of a verification record."""
    tags = [f"ver|aligned|{record.aligned}"]
    tags.extend(
        f"ver|finding|{i}|{bool(flag)}" for i, flag in enumerate(record.findings)
    )
    tags.extend(f"ver|op|{op.canonical()!r}" for op in record.ops)
    return sum_vectors(tags, VERIFICATION_DIM)


def aligned_record(prompt: PromptSpec) -> VerificationRecord:
    return VerificationRecord(True, tuple(True for _ in prompt.constraints), ())


def make_verification(pair: CorrectionPair, prompt_of_b: PromptSpec) -> VerificationRecord:
    """Verification for a pair: findings from scoring the rendered draft
    against the target prompt, then the diff ops."""
    if scenes.score_objects(
        [(o.shape, o.color, o.cell, o.size) for o in pair.b_scene.objects],
        prompt_of_b,
    ).overall != 1.0:
        raise InconsistentPairError("prompt does not describe the target scene")
    draft_objs = scenes.confident_objects(
        scenes.detect(scenes.render(pair.a_scene, FINAL_RES))
    )
    findings = scenes.score_objects(draft_objs, prompt_of_b).flags
    ops = tuple(pair.diff)
    return VerificationRecord(len(ops) == 0, findings, ops)


# ---------------------------------------------------------------------------
# training samples
# ---------------------------------------------------------------------------

@dataclass
class TrainSample:
    """One training example; images are float arrays in [0, 1].

    ``draft``/``verification``/``scene_draft`` are None for the text-to-image
    categories.  ``target`` is at final resolution except for t2i_low, which
    trains the draft-resolution generator.
    """

    prompt: PromptSpec
    target: np.ndarray = field(repr=False)
    category: str
    scene_target: SceneSpec
    draft: Optional[np.ndarray] = field(default=None, repr=False)
    verification: Optional[VerificationRecord] = None
    scene_draft: Optional[SceneSpec] = None
    capability: Optional[str] = None


def cross_validate(sample: TrainSample) -> bool:
    """Re-detect the rendered target; keep iff every count and position
    constraint of the prompt holds on the detections."""
    target = sample.target
    if target.shape[0] not in (DRAFT_RES, FINAL_RES):
        target = scenes.render(sample.scene_target, FINAL_RES)
    objs = scenes.confident_objects(scenes.detect(target))
    for c in sample.prompt.constraints:
        if c[0] in ("count", "relpos") and not scenes.eval_constraint(objs, c):
            return False
    return True


def _correction_sample(capability, seed, draft_res=DRAFT_RES) -> TrainSample:
    for attempt in range(64):
        pair = generate_pair(capability, list(seed) + [attempt])
        prompt = scenes.caption(pair.b_scene, prefer_relpos=(capability == "layout"))
        draft_objs = [(o.shape, o.color, o.cell, o.size) for o in pair.a_scene.objects]
        if scenes.score_objects(draft_objs, prompt).overall == 1.0:
            continue  # prompt fails to expose the draft's defect; resample
        record = make_verification(pair, prompt)
        return TrainSample(
            prompt=prompt,
            target=scenes.render(pair.b_scene, FINAL_RES),
            category="correction",
            scene_target=pair.b_scene,
            draft=scenes.render(pair.a_scene, draft_res),
            verification=record,
            scene_draft=pair.a_scene,
            capability=capability,
        )
    raise ConfigError(f"could not build a misaligned {capability} pair from {seed}")


def build_trainset(n: int, seed, mix=None, draft_res: int = DRAFT_RES) -> list:
    """Deterministic dataset with the configured category/capability mix.

    Every correction sample passes :func:`cross_validate`.  Category counts
    follow the mix via largest-remainder allocation (within one of exact).
    """
    mix = dict(DEFAULT_MIX if mix is None else mix)
    if set(mix) != set(CATEGORIES):
        raise ConfigError(f"mix must have exactly the categories {CATEGORIES}")
    total = sum(mix.values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"mix ratios must sum to 1, got {total}")
    raw = {c: n * mix[c] for c in CATEGORIES}
    counts = {c: int(raw[c]) for c in CATEGORIES}
    rem = n - sum(counts.values())
    for c in sorted(CATEGORIES, key=lambda c: raw[c] - counts[c], reverse=True)[:rem]:
        counts[c] += 1

    samples = []
    index = 0
    for category in CATEGORIES:
        for i in range(counts[category]):
            sample_seed = [int(seed), 1000 + index]
            if category == "correction":
                capability = CAPABILITIES[i % len(CAPABILITIES)]
                sample = _correction_sample(capability, sample_seed, draft_res)
                if not cross_validate(sample):
                    raise ConfigError("generated correction sample failed validation")
            elif category == "no_correction":
                rng = _rng(sample_seed)
                scene = scenes.random_scene(rng)
                prompt = scenes.caption(scene)
                sample = TrainSample(
                    prompt=prompt,
                    target=scenes.render(scene, FINAL_RES),
                    category="no_correction",
                    scene_target=scene,
                    draft=scenes.render(scene, draft_res),
                    verification=aligned_record(prompt),
                    scene_draft=scene,
                )
            else:
                rng = _rng(sample_seed)
                scene = scenes.random_scene(rng)
                res = draft_res if category == "t2i_low" else FINAL_RES
                sample = TrainSample(
                    prompt=scenes.caption(scene),
                    target=scenes.render(scene, res),
                    category=category,
                    scene_target=scene,
                )
            samples.append(sample)
            index += 1
    return samples


# ---------------------------------------------------------------------------
# dataset directory I/O
# ---------------------------------------------------------------------------

def _op_to_list(op: CorrectionOp):
    return list(op.canonical())


def _op_from_list(vals):
    return CorrectionOp(*vals)


def record_for_sample(i: int, sample: TrainSample, with_paths=True) -> dict:
    rec = {
        "version": scenes.SCHEMA_VERSION,
        "index": i,
        "category": sample.category,
        "capability": sample.capability,
        "prompt": scenes.prompt_to_record(sample.prompt)["constraints"],
        "scene_target": scenes.scene_to_record(sample.scene_target)["objects"],
        "scene_draft": (
            scenes.scene_to_record(sample.scene_draft)["objects"]
            if sample.scene_draft is not None
            else None
        ),
        "verification": (
            {
                "aligned": sample.verification.aligned,
                "findings": [bool(f) for f in sample.verification.findings],
                "ops": [_op_to_list(op) for op in sample.verification.ops],
            }
            if sample.verification is not None
            else None
        ),
        "target_res": int(sample.target.shape[0]),
    }
    if with_paths:
        rec["target_image"] = f"images/{i:06d}_target.ppm"
        rec["draft_image"] = (
            f"images/{i:06d}_draft.ppm" if sample.draft is not None else None
        )
    return rec


def save_dataset(samples, out_dir, config=None):
    """Write images (PPM), records (JSONL) and a manifest with counts."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    records = []
    for i, sample in enumerate(samples):
        rec = record_for_sample(i, sample)
        scenes.write_ppm(os.path.join(out_dir, rec["target_image"]), sample.target)
        if sample.draft is not None:
            scenes.write_ppm(os.path.join(out_dir, rec["draft_image"]), sample.draft)
        records.append(rec)
    scenes.write_records(os.path.join(out_dir, "records.jsonl"), records)
    by_cat = {c: 0 for c in CATEGORIES}
    by_cap = {c: 0 for c in CAPABILITIES}
    for s in samples:
        by_cat[s.category] += 1
        if s.capability:
            by_cap[s.capability] += 1
    manifest = {
        "version": scenes.SCHEMA_VERSION,
        "n": len(samples),
        "categories": by_cat,
        "capabilities": by_cap,
        "config": config or {},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    return manifest


def load_dataset(dataset_dir) -> list:
    """Rebuild TrainSamples from a dataset directory."""
    path = os.path.join(dataset_dir, "records.jsonl")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no records.jsonl under {dataset_dir}")
    samples = []
    for rec in scenes.read_records(path):
        prompt = PromptSpec(tuple(tuple(c) for c in rec["prompt"]))
        scene_target = scenes.scene_from_record({"objects": rec["scene_target"]})
        scene_draft = (
            scenes.scene_from_record({"objects": rec["scene_draft"]})
            if rec["scene_draft"] is not None
            else None
        )
        ver = None
        if rec["verification"] is not None:
            v = rec["verification"]
            ver = VerificationRecord(
                v["aligned"],
                tuple(bool(f) for f in v["findings"]),
                tuple(_op_from_list(vals) for vals in v["ops"]),
            )
        target = scenes.read_ppm(os.path.join(dataset_dir, rec["target_image"]))
        draft = (
            scenes.read_ppm(os.path.join(dataset_dir, rec["draft_image"]))
            if rec["draft_image"] is not None
            else None
        )
        samples.append(
            TrainSample(
                prompt=prompt,
                target=target,
                category=rec["category"],
                scene_target=scene_target,
                draft=draft,
                verification=ver,
                scene_draft=scene_draft,
                capability=rec["capability"],
            )
        )
    return samples


def dataset_fingerprint(out_dir) -> str:
    """Stable content hash over records and manifest (rerun determinism)."""
    h = hashlib.sha256()
    for name in ("manifest.json", "records.jsonl"):
        with open(os.path.join(out_dir, name), "rb") as f:
            h.update(f.read())
    img_dir = os.path.join(out_dir, "images")
    for name in sorted(os.listdir(img_dir)):
        with open(os.path.join(img_dir, name), "rb") as f:
            h.update(hashlib.sha256(f.read()).digest())
    return h.hexdigest()
