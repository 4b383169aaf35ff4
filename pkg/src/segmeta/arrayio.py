"""Array files, corpus manifests and split assignment.

Only a small, bit-exact subset of the NPY v1.0 format is supported: little
endian float32 / int32 and uint8, C order. Files written here are
byte-identical to what ``numpy.save`` produces for the same array.
"""

from __future__ import annotations

import ast
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DuplicateFrameId,
    HeaderMalformed,
    InvalidProbabilities,
    IoFailure,
    ManifestError,
    MissingFrame,
    SizeMismatch,
    UnsupportedDtype,
    UnsupportedVersion,
    ValidationError,
)

MAGIC = b"\x93NUMPY"
SUPPORTED_DESCR = {"<f4": np.dtype("<f4"), "<i4": np.dtype("<i4"), "|u1": np.dtype("u1")}
IGNORE_LABEL = 255
PROB_SUM_TOL = 1e-4

MANIFEST_NAME = "manifest.tsv"


def _descr_of(dtype: np.dtype) -> str:
    for descr, dt in SUPPORTED_DESCR.items():
        if dtype == dt:
            return descr
    raise UnsupportedDtype(f"dtype {dtype} is not one of float32, int32, uint8")


def encode_header(descr: str, shape: tuple[int, ...]) -> bytes:
    shape_repr = "(" + "".join(f"{n}, " for n in shape)
    shape_repr = shape_repr[:-2] + ",)" if len(shape) == 1 else shape_repr.rstrip(", ") + ")"
    text = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_repr}, }}"
    # magic(6) + version(2) + length(2) + text + padding + newline is a multiple of 64
    total = len(MAGIC) + 4 + len(text) + 1
    text += " " * (-total % 64) + "\n"
    return MAGIC + b"\x01\x00" + len(text).to_bytes(2, "little") + text.encode("latin1")


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-" + path.name)
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_text_atomic(path, text: str) -> None:
    _atomic_write(path, text.encode("utf-8"))


def array_bytes(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    descr = _descr_of(a.dtype)
    return encode_header(descr, tuple(int(n) for n in a.shape)) + np.ascontiguousarray(a).tobytes()


def write_array(a: np.ndarray, path) -> None:
    """Write ``a`` as an NPY v1.0 file (atomically)."""
    _atomic_write(path, array_bytes(a))


def parse_array(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    if raw[:6] != MAGIC:
        raise BadMagic(f"{name}: missing \\x93NUMPY magic")
    if len(raw) < 10:
        raise HeaderMalformed(f"{name}: truncated preamble")
    if raw[6:8] != b"\x01\x00":
        raise UnsupportedVersion(f"{name}: version {raw[6]}.{raw[7]} (only 1.0 supported)")
    hlen = int.from_bytes(raw[8:10], "little")
    if len(raw) < 10 + hlen:
        raise HeaderMalformed(f"{name}: header shorter than declared length {hlen}")
    try:
        text = raw[10:10 + hlen].decode("latin1")
        header = ast.literal_eval(text.strip())
    except (ValueError, SyntaxError) as exc:
        raise HeaderMalformed(f"{name}: cannot parse header {text!r}") from exc
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise HeaderMalformed(f"{name}: header must have exactly descr/fortran_order/shape")
    descr, fortran, shape = header["descr"], header["fortran_order"], header["shape"]
    if descr not in SUPPORTED_DESCR:
        raise UnsupportedDtype(f"{name}: descr {descr!r} not supported")
    if fortran is not False:
        raise HeaderMalformed(f"{name}: fortran_order arrays are not supported")
    if not isinstance(shape, tuple) or not all(isinstance(n, int) and n >= 0 for n in shape):
        raise HeaderMalformed(f"{name}: bad shape {shape!r}")
    dtype = SUPPORTED_DESCR[descr]
    count = int(np.prod(shape, dtype=np.int64))
    payload = raw[10 + hlen:]
    if len(payload) != count * dtype.itemsize:
        raise SizeMismatch(
            f"{name}: shape {shape} needs {count * dtype.itemsize} bytes, found {len(payload)}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def read_array(path) -> np.ndarray:
    """Read an NPY v1.0 file restricted to the supported dtypes."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return parse_array(raw, str(path))


def validate_probs(p: np.ndarray, name: str = "probabilities", tol: float = PROB_SUM_TOL) -> np.ndarray:
    """Check an H x W x q softmax volume; returns it unchanged."""
    if p.ndim != 3 or p.shape[2] < 2:
        raise InvalidProbabilities(f"{name}: expected H x W x q with q >= 2, got {p.shape}")
    if not np.issubdtype(p.dtype, np.floating):
        raise InvalidProbabilities(f"{name}: expected a float tensor, got {p.dtype}")
    if not np.all(np.isfinite(p)):
        raise InvalidProbabilities(f"{name}: contains NaN or Inf")
    if np.any(p < 0):
        raise InvalidProbabilities(f"{name}: negative probabilities")
    sums = p.sum(axis=2, dtype=np.float64)
    worst = float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0
    if worst > tol:
        raise InvalidProbabilities(f"{name}: pixel sums deviate from 1 by {worst:.3g}")
    return p


def load_probs(path) -> np.ndarray:
    return validate_probs(read_array(path), str(path))


def load_labels(path) -> np.ndarray:
    a = read_array(path)
    if a.ndim != 2:
        raise ValidationError(f"{path}: label map must be 2-D, got shape {a.shape}")
    return a


# ---------------------------------------------------------------------------
# corpus layout


@dataclass
class CorpusConfig:
    ratios: tuple[float, ...] = (0.8, 0.2)
    seed: int = 0
    manifest: str = MANIFEST_NAME


SINGLE_FRAME_RATIOS = (0.8, 0.2)
SEQUENCE_RATIOS = (0.7, 0.1, 0.2)


@dataclass
class Frame:
    sequence_id: str
    frame_index: int
    probs: Path
    gt: Path | None = None
    pseudo: Path | None = None
    split: str = ""

    @property
    def frame_id(self) -> str:
        return frame_id(self.sequence_id, self.frame_index)


@dataclass
class CorpusLayout:
    root: Path
    frames: list[Frame]
    sequences: dict[str, list[Frame]] = field(default_factory=dict)

    def split(self, name: str) -> list[Frame]:
        return [f for f in self.frames if f.split == name]

    def by_id(self) -> dict[str, Frame]:
        return {f.frame_id: f for f in self.frames}


def frame_id(sequence_id: str, frame_index: int) -> str:
    return f"{sequence_id}_{frame_index:05d}"


def split_names(n_splits: int) -> tuple[str, ...]:
    return {1: ("train",), 2: ("train", "test"), 3: ("train", "val", "test")}.get(
        n_splits, tuple(f"split{i}" for i in range(n_splits))
    )


def split_sizes(n: int, ratios) -> list[int]:
    """Floor each share, then hand out the remainder in declared order."""
    ratios = np.asarray(ratios, dtype=float)
    if np.any(ratios < 0) or ratios.sum() <= 0:
        raise ValidationError(f"bad split ratios {ratios.tolist()}")
    ratios = ratios / ratios.sum()
    sizes = [int(np.floor(n * r + 1e-9)) for r in ratios]
    for i in range(n - sum(sizes)):
        sizes[i % len(sizes)] += 1
    return sizes


def assign_splits(n: int, ratios, seed: int) -> np.ndarray:
    """Seeded partition of ``range(n)``; returns the split index of each item."""
    order = np.random.default_rng(seed).permutation(n)
    out = np.empty(n, dtype=np.int64)
    start = 0
    for i, size in enumerate(split_sizes(n, ratios)):
        out[order[start:start + size]] = i
        start += size
    return out


def read_manifest(path) -> list[Frame]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    root = path.parent
    frames = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ManifestError(f"{path}:{lineno}: expected 5 tab-separated fields")
        seq, idx, probs, gt, pseudo = parts
        try:
            index = int(idx)
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: bad frame index {idx!r}") from exc
        frames.append(Frame(
            seq, index, root / probs,
            None if gt == "-" else root / gt,
            None if pseudo == "-" else root / pseudo,
        ))
    return frames


def write_manifest(path, frames: list[Frame]) -> None:
    root = Path(path).parent

    def rel(p):
        return "-" if p is None else os.path.relpath(p, root)

    lines = [
        f"{f.sequence_id}\t{f.frame_index}\t{rel(f.probs)}\t{rel(f.gt)}\t{rel(f.pseudo)}"
        for f in frames
    ]
    write_text_atomic(path, "\n".join(lines) + "\n")


def load_corpus(root, config: CorpusConfig | None = None) -> CorpusLayout:
    """Read the manifest under ``root``, check it and assign splits."""
    config = config or CorpusConfig()
    root = Path(root)
    manifest = root / config.manifest
    if not manifest.exists():
        raise IoFailure(f"manifest {manifest} not found")
    frames = read_manifest(manifest)

    seen = set()
    sequences: dict[str, list[Frame]] = {}
    for f in frames:
        if f.frame_id in seen:
            raise DuplicateFrameId(f"frame {f.frame_id} listed twice")
        seen.add(f.frame_id)
        seq = sequences.setdefault(f.sequence_id, [])
        if seq and f.frame_index <= seq[-1].frame_index:
            raise ManifestError(f"sequence {f.sequence_id}: frame indices must increase")
        seq.append(f)
        for p in (f.probs, f.gt, f.pseudo):
            if p is not None and not p.exists():
                raise MissingFrame(f"frame {f.frame_id}: {p} does not exist")

    names = split_names(len(config.ratios))
    for f, s in zip(frames, assign_splits(len(frames), config.ratios, config.seed)):
        f.split = names[s]
    return CorpusLayout(root, frames, sequences)
