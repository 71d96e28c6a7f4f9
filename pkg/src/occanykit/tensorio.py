"""Binary tensor container and JSON scene manifests.

Tensor file layout (all integers little-endian):

    magic   8 bytes   b"OAKTENS1"
    dtype   1 byte    code from DTYPE_CODES
    rank    1 byte    1..8
    shape   rank * u32
    payload row-major element data, little-endian

The format is deliberately minimal: no compression, no alignment padding,
byte-identical output for identical inputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"OAKTENS1"
MAX_RANK = 8

# dtype code -> numpy dtype (explicitly little-endian where it matters)
DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("u1"),
    4: np.dtype("<i4"),
    5: np.dtype("<u2"),
}
_CODE_FOR_KIND = {np.dtype(d.str.lstrip("<|")): c for c, d in DTYPE_CODES.items()}


class TensorFormatError(ValueError):
    """Malformed tensor file or unsupported tensor."""


class ManifestError(ValueError):
    """Invalid or unresolvable scene manifest."""


def _dtype_code(dtype: np.dtype) -> int:
    code = _CODE_FOR_KIND.get(np.dtype(dtype).newbyteorder("="))
    if code is None:
        raise TensorFormatError(
            f"unsupported dtype {dtype}; supported: "
            + ", ".join(str(d) for d in DTYPE_CODES.values())
        )
    return code


def validate_blob(array: np.ndarray) -> None:
    """Check the container invariants: rank 1..8, positive extents, known dtype."""
    if array.ndim < 1:
        raise TensorFormatError("rank must be >= 1 (scalars are not supported)")
    if array.ndim > MAX_RANK:
        raise TensorFormatError(f"rank {array.ndim} exceeds format limit {MAX_RANK}")
    if any(e < 1 for e in array.shape):
        raise TensorFormatError(f"all extents must be >= 1, got shape {array.shape}")
    _dtype_code(array.dtype)


def write_tensor(array: np.ndarray, path: str | Path) -> int:
    """Write ``array`` to ``path`` in the container format; returns bytes written."""
    array = np.asarray(array)
    validate_blob(array)
    code = _dtype_code(array.dtype)
    le = array.astype(DTYPE_CODES[code], copy=False)
    header = MAGIC + struct.pack("<BB", code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(le).tobytes()
    data = header + payload
    Path(path).write_bytes(data)
    return len(data)


def read_tensor(path: str | Path) -> np.ndarray:
    """Inverse of :func:`write_tensor`.

    Raises TensorFormatError with a distinct message for a bad magic, an
    unknown dtype code, or a payload whose length disagrees with the header.
    """
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 2:
        raise TensorFormatError(f"{path}: file too short for a tensor header")
    if data[:8] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {data[:8]!r}, expected {MAGIC!r}")
    code, rank = struct.unpack_from("<BB", data, 8)
    if code not in DTYPE_CODES:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    if not 1 <= rank <= MAX_RANK:
        raise TensorFormatError(f"{path}: rank {rank} outside 1..{MAX_RANK}")
    offset = 10
    if len(data) < offset + 4 * rank:
        raise TensorFormatError(f"{path}: truncated shape header")
    shape = struct.unpack_from(f"<{rank}I", data, offset)
    if any(e < 1 for e in shape):
        raise TensorFormatError(f"{path}: zero extent in shape {shape}")
    offset += 4 * rank
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = len(data) - offset
    if actual != expected:
        raise TensorFormatError(
            f"{path}: truncated payload, header claims {expected} bytes "
            f"for shape {shape} but {actual} present"
        )
    return np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=offset).reshape(shape).copy()


@dataclass(frozen=True)
class FrameEntry:
    """One input frame: an image plus optional supervision tensors."""

    image: Path
    pointmap: Path | None = None
    labels: Path | None = None
    features: Path | None = None


@dataclass(frozen=True)
class GridSpecJson:
    """Voxel grid geometry as stored in manifests and grid sidecars."""

    origin: tuple[float, float, float]
    voxel: float
    dims: tuple[int, int, int]


@dataclass(frozen=True)
class SceneManifest:
    frames: tuple[FrameEntry, ...]
    resolution: tuple[int, int]  # (H, W)
    intrinsics: dict[str, float] | None = None  # fx, fy, cx, cy in pixels
    grid: GridSpecJson | None = None
    base_dir: Path = field(default=Path("."))


def _resolve(base: Path, rel: str | None, what: str) -> Path | None:
    if rel is None:
        return None
    p = (base / rel) if not Path(rel).is_absolute() else Path(rel)
    if not p.exists():
        raise ManifestError(f"{what} path does not resolve: {p}")
    return p


def load_scene_manifest(path: str | Path, patch: int = 8) -> SceneManifest:
    """Load and validate a scene manifest JSON file.

    Relative frame paths resolve against the manifest's directory.  H and W
    must both be divisible by ``patch`` (the tokenizer patch size).
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: not valid JSON ({e})") from e
    base = path.parent

    for key in ("frames", "resolution"):
        if key not in raw:
            raise ManifestError(f"{path}: missing required field '{key}'")
    res = raw["resolution"]
    try:
        h, w = int(res["H"]), int(res["W"])
    except (KeyError, TypeError) as e:
        raise ManifestError(f"{path}: resolution must carry integer H and W") from e
    if h % patch or w % patch:
        raise ManifestError(
            f"{path}: resolution {h}x{w} not divisible by patch size {patch}"
        )
    if not raw["frames"]:
        raise ManifestError(f"{path}: frame list is empty")

    frames = []
    for i, fr in enumerate(raw["frames"]):
        if "image" not in fr:
            raise ManifestError(f"{path}: frame {i} missing 'image'")
        frames.append(
            FrameEntry(
                image=_resolve(base, fr["image"], f"frame {i} image"),
                pointmap=_resolve(base, fr.get("pointmap"), f"frame {i} pointmap"),
                labels=_resolve(base, fr.get("labels"), f"frame {i} labels"),
                features=_resolve(base, fr.get("features"), f"frame {i} features"),
            )
        )

    intr = raw.get("intrinsics")
    if intr is not None:
        missing = {"fx", "fy", "cx", "cy"} - set(intr)
        if missing:
            raise ManifestError(f"{path}: intrinsics missing {sorted(missing)}")
        intr = {k: float(intr[k]) for k in ("fx", "fy", "cx", "cy")}

    grid = None
    if raw.get("grid") is not None:
        g = raw["grid"]
        try:
            grid = GridSpecJson(
                origin=tuple(float(v) for v in g["origin"]),
                voxel=float(g["voxel"]),
                dims=tuple(int(v) for v in g["dims"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"{path}: malformed grid spec ({e})") from e

    return SceneManifest(
        frames=tuple(frames),
        resolution=(h, w),
        intrinsics=intr,
        grid=grid,
        base_dir=base,
    )


def dump_json(obj: dict, path: str | Path) -> None:
    """Write JSON deterministically (sorted keys, fixed separators)."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
