"""Synthetic referring-expression scenes: colored shapes on a gray canvas,
each paired with the shortest templated expression that picks out exactly
one object.

Determinism: every sample is a pure function of (root seed, index), so a
dataset can be regenerated byte-for-byte from its seed and config.  The
expression language is small enough that its semantics are decidable,
which makes unambiguity checkable by brute force.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import GenerationError, InputError
from .heads import BoundingBox, iou
from .text import Vocabulary

SCHEMA_VERSION = 1

SHAPES = ("circle", "square", "triangle")

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (50, 80, 220),
    "yellow": (230, 210, 40),
    "purple": (150, 50, 190),
}

SIZES = {"small": (0.10, 0.18), "large": (0.22, 0.34)}

BACKGROUND = (128, 128, 128)

# Spatial predicates compare box centers with a margin, so near-ties can
# never make an expression ambiguous.  Image y grows downward.
SPATIAL_MARGIN = 0.05

RELATIONS = ("left of", "right of", "above", "below")

TEMPLATE_ATTRIBUTE = "attribute"
TEMPLATE_SIZE = "size"
TEMPLATE_SPATIAL = "spatial"

OOV_ADJECTIVES = ("shiny", "matte", "glossy", "striped")


@dataclass
class SceneObject:
    shape: str
    color: str
    size: str
    bbox: BoundingBox


@dataclass
class SceneConfig:
    image_side: int = 128
    min_objects: int = 2
    max_objects: int = 4
    max_overlap: float = 0.1
    placement_retries: int = 1000
    scene_retries: int = 50
    edge_margin: float = 0.02
    # Probability that an object reuses the (shape, color) of an earlier
    # one, forcing size or spatial templates often enough for coverage.
    duplicate_prob: float = 0.25

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class SceneSpec:
    objects: list
    target_index: int
    image_side: int

    @property
    def target(self):
        return self.objects[self.target_index]


@dataclass
class Sample:
    expression: str
    bbox: BoundingBox
    scene: SceneSpec
    template: str = ""
    image_path: str = ""
    _image: np.ndarray = field(default=None, repr=False)

    def image_uint8(self):
        if self._image is None:
            if self.image_path:
                self._image = read_ppm(self.image_path)
            else:
                self._image = render_uint8(self.scene)
        return self._image

    def image(self):
        """(3, S, S) float32 in [0, 1]."""
        return np.ascontiguousarray(
            self.image_uint8().astype(np.float32).transpose(2, 0, 1) / 255.0)


# ---------------------------------------------------------------------------
# expression semantics


def relation_holds(a, b, relation):
    """Whether box-center a stands in `relation` to box-center b."""
    if relation == "left of":
        return a.bbox.cx <= b.bbox.cx - SPATIAL_MARGIN
    if relation == "right of":
        return a.bbox.cx >= b.bbox.cx + SPATIAL_MARGIN
    if relation == "above":
        return a.bbox.cy <= b.bbox.cy - SPATIAL_MARGIN
    if relation == "below":
        return a.bbox.cy >= b.bbox.cy + SPATIAL_MARGIN
    raise InputError(f"unknown relation {relation!r}")


def _attr_match(obj, color, shape, size=None):
    if obj.color != color or obj.shape != shape:
        return False
    return size is None or obj.size == size


def parse_expression(text):
    """Split an expression into its template parts.

    Returns (template, payload):
      attribute -> (color, shape)
      size      -> (size, color, shape)
      spatial   -> (color, shape, relation, anchor_color, anchor_shape)
    """
    words = text.lower().split()
    if "the" in words:
        idx = words.index("the")
        head, anchor = words[:idx], words[idx + 1:]
        if len(anchor) != 2:
            raise InputError(f"cannot parse anchor in {text!r}")
        if len(head) == 4 and head[2] == "left" and head[3] == "of":
            relation = "left of"
        elif len(head) == 4 and head[2] == "right" and head[3] == "of":
            relation = "right of"
        elif len(head) == 3 and head[2] in ("above", "below"):
            relation = head[2]
        else:
            raise InputError(f"cannot parse relation in {text!r}")
        return TEMPLATE_SPATIAL, (head[0], head[1], relation, anchor[0], anchor[1])
    if len(words) == 3 and words[0] in SIZES:
        return TEMPLATE_SIZE, (words[0], words[1], words[2])
    if len(words) == 2:
        return TEMPLATE_ATTRIBUTE, (words[0], words[1])
    raise InputError(f"cannot parse expression {text!r}")


def _spatial_matches(objs, color, shape, relation, a_color, a_shape):
    """Objects matching '<color> <shape> <relation> the <a_color> <a_shape>'.

    The anchor is existential: an object matches when some *other* object
    carries the anchor attributes and the relation holds against it.
    """
    out = []
    for i, obj in enumerate(objs):
        if not _attr_match(obj, color, shape):
            continue
        for j, anchor in enumerate(objs):
            if j != i and _attr_match(anchor, a_color, a_shape) \
                    and relation_holds(obj, anchor, relation):
                out.append(i)
                break
    return out


def matching_objects(text, scene):
    """Indices of scene objects selected by the expression's semantics."""
    template, payload = parse_expression(text)
    objs = scene.objects
    if template == TEMPLATE_ATTRIBUTE:
        color, shape = payload
        return [i for i, o in enumerate(objs) if _attr_match(o, color, shape)]
    if template == TEMPLATE_SIZE:
        size, color, shape = payload
        return [i for i, o in enumerate(objs) if _attr_match(o, color, shape, size)]
    return _spatial_matches(objs, *payload)


class AmbiguousSceneError(GenerationError):
    """No template uniquely identifies the target; resample the scene."""


def make_expression(scene, rng=None):
    """Shortest discriminative description of the scene's target.

    Tries plain attributes, then size-qualified attributes, then a spatial
    relation against an attribute-unique anchor.  Raises
    AmbiguousSceneError when nothing separates the target.
    """
    objs = scene.objects
    target = scene.target

    same_attr = [o for o in objs if _attr_match(o, target.color, target.shape)]
    if len(same_attr) == 1:
        return f"{target.color} {target.shape}", TEMPLATE_ATTRIBUTE

    same_sized = [o for o in same_attr if o.size == target.size]
    if len(same_sized) == 1:
        return f"{target.size} {target.color} {target.shape}", TEMPLATE_SIZE

    options = []
    anchor_attrs = sorted({(o.color, o.shape) for o in objs})
    for relation in RELATIONS:
        for a_color, a_shape in anchor_attrs:
            selected = _spatial_matches(objs, target.color, target.shape,
                                        relation, a_color, a_shape)
            if selected == [scene.target_index]:
                options.append(
                    f"{target.color} {target.shape} {relation} the {a_color} {a_shape}")
    if not options:
        raise AmbiguousSceneError("no discriminative template for target")
    pick = options[0] if rng is None else options[int(rng.integers(len(options)))]
    return pick, TEMPLATE_SPATIAL


def with_oov_adjective(expression, rng):
    """Prefix the head noun phrase with an adjective outside the corpus
    vocabulary (for out-of-vocabulary robustness tests)."""
    adjective = OOV_ADJECTIVES[int(rng.integers(len(OOV_ADJECTIVES)))]
    return f"{adjective} {expression}"


# ---------------------------------------------------------------------------
# scene sampling


def _sample_object(rng, config):
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    color = list(COLORS)[int(rng.integers(len(COLORS)))]
    size = list(SIZES)[int(rng.integers(len(SIZES)))]
    lo, hi = SIZES[size]
    w = float(rng.uniform(lo, hi))
    h = w if shape in ("circle", "square") else float(rng.uniform(lo, hi))
    return shape, color, size, w, h


def _place(rng, config, w, h):
    m = config.edge_margin
    cx = float(rng.uniform(w / 2 + m, 1 - w / 2 - m))
    cy = float(rng.uniform(h / 2 + m, 1 - h / 2 - m))
    return BoundingBox(cx, cy, w, h).validate()


def generate_scene(seed, config=None):
    """Deterministically sample one scene; overlap is rejection-sampled."""
    config = config or SceneConfig()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return _sample_scene(rng, config)


def _sample_scene(rng, config):
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    objects = []
    for _ in range(n):
        shape, color, size, w, h = _sample_object(rng, config)
        if objects and rng.uniform() < config.duplicate_prob:
            twin = objects[int(rng.integers(len(objects)))]
            shape, color = twin.shape, twin.color
            if shape in ("circle", "square"):
                h = w
        for attempt in range(config.placement_retries + 1):
            if attempt == config.placement_retries:
                raise GenerationError(
                    f"could not place object after {config.placement_retries} retries")
            bbox = _place(rng, config, w, h)
            if all(iou(bbox, o.bbox) <= config.max_overlap for o in objects):
                objects.append(SceneObject(shape, color, size, bbox))
                break
    target_index = int(rng.integers(n))
    return SceneSpec(objects=objects, target_index=target_index,
                     image_side=config.image_side)


def generate_sample(root_seed, index, config=None, oov=False):
    """One (scene, expression) pair; ambiguous scenes are resampled."""
    config = config or SceneConfig()
    for attempt in range(config.scene_retries):
        rng = np.random.default_rng(np.random.SeedSequence([root_seed, index, attempt]))
        try:
            scene = _sample_scene(rng, config)
        except GenerationError:
            continue
        try:
            expression, template = make_expression(scene, rng)
        except AmbiguousSceneError:
            continue
        if oov:
            expression = with_oov_adjective(expression, rng)
        return Sample(expression=expression, bbox=scene.target.bbox,
                      scene=scene, template=template)
    raise GenerationError(
        f"no unambiguous scene for seed ({root_seed}, {index}) "
        f"after {config.scene_retries} attempts")


# ---------------------------------------------------------------------------
# rasterization


def _shape_mask(obj, xs, ys):
    b = obj.bbox
    if obj.shape == "circle":
        r = b.w / 2.0
        return (xs - b.cx) ** 2 + (ys - b.cy) ** 2 <= r * r
    if obj.shape == "square":
        return (np.abs(xs - b.cx) <= b.w / 2.0) & (np.abs(ys - b.cy) <= b.h / 2.0)
    if obj.shape == "triangle":
        # Isoceles: apex at top-center, base along the bottom edge.  The
        # apex gets a one-pixel-wide cap so the rendered mask reaches the
        # annotated top row despite point sampling.
        top = b.cy - b.h / 2.0
        inside_y = (ys >= top) & (ys <= b.cy + b.h / 2.0)
        side = xs.shape[-1]
        half_width = np.maximum((b.w / 2.0) * (ys - top) / b.h, 0.5 / side)
        return inside_y & (np.abs(xs - b.cx) <= half_width)
    raise InputError(f"unknown shape {obj.shape!r}")


def render_uint8(scene):
    """(S, S, 3) uint8 image; objects painted in list order, no AA."""
    side = scene.image_side
    coords = (np.arange(side) + 0.5) / side
    xs, ys = np.meshgrid(coords, coords)
    img = np.empty((side, side, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for obj in scene.objects:
        img[_shape_mask(obj, xs, ys)] = COLORS[obj.color]
    return img


def render(scene):
    """(3, S, S) float32 in [0, 1], channel order RGB."""
    u8 = render_uint8(scene)
    return np.ascontiguousarray(u8.astype(np.float32).transpose(2, 0, 1) / 255.0)


# ---------------------------------------------------------------------------
# PPM io


def write_ppm(path, img_uint8):
    h, w, c = img_uint8.shape
    if c != 3 or img_uint8.dtype != np.uint8:
        raise InputError(f"write_ppm expects (H, W, 3) uint8, got {img_uint8.shape} {img_uint8.dtype}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img_uint8.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        # Header: magic, width, height, maxval, then a single whitespace byte.
        parts = raw.split(maxsplit=4)
        magic, w, h, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
        if magic != b"P6" or maxval != 255:
            raise ValueError
        header_len = len(raw) - w * h * 3
        pixels = np.frombuffer(raw[header_len:], dtype=np.uint8)
        return pixels.reshape(h, w, 3).copy()
    except (ValueError, IndexError):
        raise InputError(f"{path}: not a binary 8-bit PPM")


# ---------------------------------------------------------------------------
# dataset serialization


def _scene_to_dict(scene):
    return {
        "image_side": scene.image_side,
        "target_index": scene.target_index,
        "objects": [
            {"shape": o.shape, "color": o.color, "size": o.size,
             "bbox": [o.bbox.cx, o.bbox.cy, o.bbox.w, o.bbox.h]}
            for o in scene.objects
        ],
    }


def _scene_from_dict(d):
    objects = [SceneObject(o["shape"], o["color"], o["size"], BoundingBox(*o["bbox"]))
               for o in d["objects"]]
    return SceneSpec(objects=objects, target_index=d["target_index"],
                     image_side=d["image_side"])


def _dump(record):
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def generate_dataset(n, seed, out_dir, config=None, start_index=0, oov=False):
    """Write n samples under out_dir: manifest.jsonl + images/NNNNNN.ppm.

    Samples are drawn at indices [start_index, start_index + n); disjoint
    index ranges over the same seed give disjoint, independent splits.
    """
    if n <= 0:
        raise InputError(f"dataset size must be positive, got {n}")
    config = config or SceneConfig()
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.jsonl")
    expressions = []
    try:
        with open(manifest, "w", encoding="utf-8") as fh:
            meta = {"kind": "meta", "schema_version": SCHEMA_VERSION, "seed": seed,
                    "start_index": start_index, "count": n, "oov": oov,
                    "config": config.to_dict()}
            fh.write(_dump(meta) + "\n")
            for i in range(n):
                sample = generate_sample(seed, start_index + i, config, oov=oov)
                rel = f"images/{start_index + i:06d}.ppm"
                write_ppm(os.path.join(out_dir, rel), render_uint8(sample.scene))
                record = {
                    "image": rel,
                    "expression": sample.expression,
                    "bbox": [sample.bbox.cx, sample.bbox.cy, sample.bbox.w, sample.bbox.h],
                    "template": sample.template,
                    "scene": _scene_to_dict(sample.scene),
                }
                fh.write(_dump(record) + "\n")
                expressions.append(sample.expression)
    except OSError as exc:
        raise InputError(f"cannot write dataset under {out_dir}: {exc}") from exc
    return manifest, expressions


class Dataset:
    """Loaded dataset; images are read lazily and cached as uint8."""

    def __init__(self, root, meta, samples):
        self.root = root
        self.meta = meta
        self.samples = samples

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def expressions(self):
        return [s.expression for s in self.samples]

    def boxes(self):
        return np.array([[s.bbox.cx, s.bbox.cy, s.bbox.w, s.bbox.h]
                         for s in self.samples], dtype=np.float32)

    def images(self, indices=None):
        """(N, 3, S, S) float32 batch for the given sample indices."""
        idx = range(len(self.samples)) if indices is None else indices
        return np.stack([self.samples[i].image() for i in idx])


def load_dataset(path):
    manifest = os.path.join(path, "manifest.jsonl")
    try:
        with open(manifest, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read dataset manifest {manifest}: {exc}") from exc
    if not lines:
        raise InputError(f"{manifest}: empty manifest")
    meta = json.loads(lines[0])
    if meta.get("kind") != "meta" or meta.get("schema_version") != SCHEMA_VERSION:
        raise InputError(f"{manifest}: missing or unsupported meta record")
    samples = []
    for line in lines[1:]:
        rec = json.loads(line)
        scene = _scene_from_dict(rec["scene"])
        samples.append(Sample(
            expression=rec["expression"],
            bbox=BoundingBox(*rec["bbox"]),
            scene=scene,
            template=rec.get("template", ""),
            image_path=os.path.join(path, rec["image"]),
        ))
    return Dataset(root=path, meta=meta, samples=samples)


def build_vocabulary(dataset_or_texts):
    texts = (dataset_or_texts.expressions()
             if isinstance(dataset_or_texts, Dataset) else list(dataset_or_texts))
    return Vocabulary.build(texts)
