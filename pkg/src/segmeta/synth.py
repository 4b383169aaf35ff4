"""Synthetic scenes with a parametric model of segmentation-network errors.

Ground truth is painted from rectangles and ellipses over background class 0.
The softmax volume starts from confident logits of the true labels and is
degraded by smooth logit noise, extra temperature near class boundaries,
whole-shape label swaps, confident false-positive blobs and suppression of a
designated rare class. Every frame is a pure function of ``(seed, index)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation, gaussian_filter

from .arrayio import IGNORE_LABEL, Frame, frame_id, write_array, write_manifest
from .errors import ConfigError, ShapeOutOfBounds, ValidationError
from .segments import SegmentSet, extract_segments


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 96
    q: int = 4
    class_weights: tuple[float, ...] = (0.0, 0.4, 0.35, 0.25)
    rare_class: int = 3
    n_shapes: int = 8
    # vertical placement band (fractions of the height) per class
    bands: tuple[tuple[float, float], ...] = ((0.0, 1.0), (0.45, 1.0), (0.0, 0.55), (0.3, 0.75))
    size_range: tuple[int, int] = (5, 18)
    rare_size_range: tuple[int, int] = (5, 10)
    confidence: float = 4.0
    temperature: float = 1.0
    boundary_temperature: float = 0.5
    boundary_width: int = 2
    boundary_confidence: float = 0.7
    noise: float = 0.6
    noise_sigma: float = 1.5
    label_swap_rate: float = 0.15
    fp_blob_rate: float = 0.3
    blob_strength: tuple[float, float] = (0.2, 0.8)
    fn_suppression_rate: float = 0.5
    rare_logit_bias: float = 2.5
    flicker: float = 0.0
    max_speed: float = 2.0
    ignore_rows: int = 0
    reference_noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        self.bands = tuple(tuple(b) for b in self.bands)
        if len(self.class_weights) != self.q or len(self.bands) != self.q:
            raise ValidationError("class_weights and bands need one entry per class")
        for name in ("label_swap_rate", "fp_blob_rate", "fn_suppression_rate", "flicker"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValidationError("temperature must be > 0")
        if not 0 <= self.rare_class < self.q:
            raise ValidationError("rare_class out of range")

    @classmethod
    def from_mapping(cls, values: dict) -> SceneSpec:
        """Build from flat ``key=value`` strings; tuples are comma separated."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown scene parameter {key!r}")
            default = getattr(cls(), key)
            try:
                if key == "bands":
                    nums = [float(x) for x in str(raw).replace(";", ",").split(",")]
                    kwargs[key] = tuple(zip(nums[::2], nums[1::2]))
                elif isinstance(default, tuple):
                    typ = type(default[0])
                    kwargs[key] = tuple(typ(x) for x in str(raw).split(","))
                else:
                    kwargs[key] = type(default)(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs)


@dataclass
class Shape:
    shape_id: int
    class_id: int
    kind: str  # rect or ellipse
    center: tuple[float, float]
    half: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)


@dataclass
class SynthFrame:
    probs: np.ndarray  # float32 H x W x q
    labels: np.ndarray  # uint8 H x W
    segments: SegmentSet
    shape_ids: np.ndarray  # int32, -1 where no shape
    reference: np.ndarray  # uint8 labels of the stronger reference model
    shapes: list[Shape] = field(default_factory=list)
    fp_blobs: list[np.ndarray] = field(default_factory=list)


def shape_mask(shape: Shape, h: int, w: int) -> np.ndarray:
    rr, cc = np.mgrid[0:h, 0:w]
    cr, cc0 = shape.center
    hr, hc = shape.half
    if shape.kind == "rect":
        return (np.abs(rr - cr) <= hr) & (np.abs(cc - cc0) <= hc)
    return ((rr - cr) / max(hr, 0.5)) ** 2 + ((cc - cc0) / max(hc, 0.5)) ** 2 <= 1.0


def sample_shape(spec: SceneSpec, rng: np.random.Generator, shape_id: int) -> Shape:
    w = np.asarray(spec.class_weights, float)
    cls = int(rng.choice(spec.q, p=w / w.sum()))
    lo, hi = spec.rare_size_range if cls == spec.rare_class else spec.size_range
    if cls == spec.rare_class:
        # upright, person-like boxes
        half = (rng.uniform(lo, hi) / 2, rng.uniform(lo, hi) / 4 + 0.5)
    else:
        half = (rng.uniform(lo, hi) / 2, rng.uniform(lo, hi) / 2)
    b0, b1 = spec.bands[cls]
    r = rng.uniform(b0 * (spec.height - 1), b1 * (spec.height - 1))
    c = rng.uniform(0, spec.width - 1)
    kind = "rect" if rng.uniform() < 0.5 else "ellipse"
    angle = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(0.5, 1.0) * spec.max_speed
    return Shape(shape_id, cls, kind, (r, c), half, (speed * np.sin(angle), speed * np.cos(angle)))


def paint(spec: SceneSpec, shapes: list[Shape]) -> tuple[np.ndarray, np.ndarray]:
    h, w = spec.height, spec.width
    labels = np.zeros((h, w), dtype=np.uint8)
    ids = np.full((h, w), -1, dtype=np.int32)
    for s in shapes:
        m = shape_mask(s, h, w)
        if not m.any():
            raise ShapeOutOfBounds(f"shape {s.shape_id} lies outside the frame")
        labels[m] = s.class_id
        ids[m] = s.shape_id
    return labels, ids


def _noise_field(rng, spec: SceneSpec, scale: float) -> np.ndarray:
    if scale == 0:
        return np.zeros((spec.height, spec.width, spec.q))
    white = rng.standard_normal((spec.height, spec.width, spec.q))
    if spec.noise_sigma > 0:
        white = gaussian_filter(white, sigma=(spec.noise_sigma, spec.noise_sigma, 0))
        white /= max(white.std(), 1e-12)
    return scale * white


def _near_boundary(labels: np.ndarray, width: int) -> np.ndarray:
    if width <= 0:
        return np.zeros(labels.shape, dtype=bool)
    edge = np.zeros(labels.shape, dtype=bool)
    edge[:-1, :] |= labels[:-1, :] != labels[1:, :]
    edge[1:, :] |= labels[:-1, :] != labels[1:, :]
    edge[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    edge[:, 1:] |= labels[:, :-1] != labels[:, 1:]
    return binary_dilation(edge, iterations=width - 1) if width > 1 else edge


def _softmax(logits: np.ndarray, temperature: np.ndarray) -> np.ndarray:
    z = logits / temperature[..., None]
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _fp_blobs(spec, rng, labels, n_slots):
    """Confident wrong-class blobs placed away from ground truth of their class."""
    h, w = labels.shape
    blobs = []
    for _ in range(n_slots):
        if rng.uniform() >= spec.fp_blob_rate:
            continue
        wts = np.asarray(spec.class_weights, float)
        cls = int(rng.choice(spec.q, p=wts / wts.sum()))
        forbidden = binary_dilation(labels == cls, iterations=2)
        for b in blobs:
            if b[1] == cls:
                forbidden |= binary_dilation(b[0], iterations=2)
        half = (rng.uniform(1.0, 3.5), rng.uniform(1.0, 3.5))
        for _attempt in range(20):
            s = Shape(-1, cls, "ellipse", (rng.uniform(0, h - 1), rng.uniform(0, w - 1)), half)
            m = shape_mask(s, h, w)
            if m.any() and not (m & forbidden).any():
                blobs.append((m, cls, rng.uniform(spec.blob_strength[0], spec.blob_strength[1])))
                break
    return blobs


def render(spec: SceneSpec, shapes: list[Shape], rng: np.random.Generator,
           ref_rng: np.random.Generator) -> SynthFrame:
    h, w, q = spec.height, spec.width, spec.q
    labels, ids = paint(spec, shapes)
    near = _near_boundary(labels, spec.boundary_width)
    temperature = spec.temperature * (1.0 + spec.boundary_temperature * near)

    def logits_for(pred_labels, conf, noise_scale, r):
        return conf[..., None] * np.eye(q)[pred_labels] + _noise_field(r, spec, noise_scale)

    # whole-shape label swaps, predicted with reduced confidence
    pred_labels = labels.copy()
    conf = np.full((h, w), spec.confidence)
    conf[near] *= spec.boundary_confidence
    for s in shapes:
        if rng.uniform() < spec.label_swap_rate:
            others = [c for c in range(1, q) if c != s.class_id]
            if others:
                m = ids == s.shape_id
                pred_labels[m] = others[int(rng.integers(len(others)))]
                conf[m] *= rng.uniform(0.3, 0.7)
    blobs = _fp_blobs(spec, rng, labels, spec.n_shapes)

    logits = logits_for(pred_labels, conf, spec.noise, rng)
    # imbalanced training biases the network against the rare class everywhere
    logits[..., spec.rare_class] -= spec.rare_logit_bias
    for m, cls, strength in blobs:
        logits[m] = 0.0
        logits[m, cls] = strength * spec.confidence
    probs = _softmax(logits, temperature)

    # suppress the rare class towards background inside some rare shapes
    rare = spec.rare_class
    for s in shapes:
        if s.class_id != rare:
            continue
        if rng.uniform() < spec.fn_suppression_rate:
            m = (ids == s.shape_id) & (labels == rare)
            keep = rng.uniform(0.1, 0.35)
            moved = probs[m, rare] * (1.0 - keep)
            probs[m, rare] -= moved
            probs[m, 0] += moved
    probs = probs / probs.sum(axis=-1, keepdims=True)

    ref_logits = logits_for(labels, np.full((h, w), spec.confidence),
                            spec.noise * spec.reference_noise, ref_rng)
    reference = np.argmax(ref_logits, axis=-1).astype(np.uint8)

    if spec.ignore_rows:
        labels[-spec.ignore_rows:] = IGNORE_LABEL
    segs = extract_segments(labels, source="ground-truth")
    return SynthFrame(probs.astype(np.float32), labels, segs, ids, reference, list(shapes),
                      [b[0] for b in blobs])


def _rngs(spec: SceneSpec, *key: int):
    return (np.random.default_rng([spec.seed, *key, 0]),
            np.random.default_rng([spec.seed, *key, 1]))


def generate_frame(spec: SceneSpec, frame_index: int) -> SynthFrame:
    """One independent scene, fully determined by ``(spec.seed, frame_index)``."""
    rng, ref_rng = _rngs(spec, 0, frame_index)
    shapes = [sample_shape(spec, rng, i) for i in range(spec.n_shapes)]
    return render(spec, shapes, rng, ref_rng)


def _bounce(pos: float, vel: float, lo: float, hi: float) -> tuple[float, float]:
    if hi <= lo:
        return lo, 0.0
    span = hi - lo
    x = (pos - lo) % (2 * span)
    if x > span:
        return lo + 2 * span - x, -vel
    return lo + x, vel


def shape_at(spec: SceneSpec, s: Shape, t: int) -> Shape:
    r, vr = _bounce(s.center[0] + s.velocity[0] * t, s.velocity[0], s.half[0], spec.height - 1 - s.half[0])
    c, vc = _bounce(s.center[1] + s.velocity[1] * t, s.velocity[1], s.half[1], spec.width - 1 - s.half[1])
    return Shape(s.shape_id, s.class_id, s.kind, (r, c), s.half, (vr, vc))


def generate_sequence(spec: SceneSpec, T: int, sequence: int = 0) -> list[SynthFrame]:
    """``T`` frames of shapes translating with constant velocity (bouncing off borders).

    A shape is hidden in frame ``t > 0`` with probability ``spec.flicker``;
    ``shape_ids`` of each frame give the generator-known identities.
    """
    if T < 1:
        raise ValidationError("a sequence needs T >= 1")
    rng, _ = _rngs(spec, 1, sequence)
    shapes = [sample_shape(spec, rng, i) for i in range(spec.n_shapes)]
    frames = []
    for t in range(T):
        frng, ref_rng = _rngs(spec, 2, sequence, t)
        visible = [shape_at(spec, s, t) for s in shapes
                   if t == 0 or frng.uniform() >= spec.flicker]
        frames.append(render(spec, visible, frng, ref_rng))
    return frames


# ---------------------------------------------------------------------------
# corpus on disk


def write_corpus(out, spec: SceneSpec, n_frames: int, sequence_length: int = 1,
                 pseudo_every: int = 0) -> list[Frame]:
    """Write probs/gt/pseudo arrays and a manifest.

    With ``sequence_length > 1`` frames are grouped into sequences. Pseudo
    labels are written for every frame; ground truth is kept for all frames
    unless ``pseudo_every > 1``, in which case only every ``pseudo_every``-th
    frame of a sequence keeps its ground truth.
    """
    out = Path(out)
    frames = []
    n_seq = -(-n_frames // sequence_length)
    for s in range(n_seq):
        length = min(sequence_length, n_frames - s * sequence_length)
        seq_id = f"seq{s:03d}"
        if sequence_length == 1:
            data = [generate_frame(spec, s)]
        else:
            data = generate_sequence(spec, length, s)
        for t, fr in enumerate(data):
            fid = frame_id(seq_id, t)
            probs = out / "probs" / f"{fid}.npy"
            write_array(fr.probs, probs)
            gt = None
            if pseudo_every <= 1 or t % pseudo_every == 0:
                gt = out / "gt" / f"{fid}.npy"
                write_array(fr.labels, gt)
            pseudo = out / "pseudo" / f"{fid}.npy"
            write_array(fr.reference, pseudo)
            frames.append(Frame(seq_id, t, probs, gt, pseudo))
    write_manifest(out / "manifest.tsv", frames)
    return frames
