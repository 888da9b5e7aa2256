"""Pixel-grid containers, colour conversion and bit-exact file I/O.

Images are binary Netpbm (P6 for RGB, P5 for label and edge maps), score
maps use the SMF1 float raster defined below, and datasets are described by
a JSON manifest.
"""
from __future__ import annotations

import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IGNORE = 255
BACKGROUND = 0


class FormatError(ValueError):
    """Raised when a file does not match its declared binary format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True, eq=False)
class RasterImage:
    """RGB image, ``data`` has shape (height, width, 3) and dtype uint8."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"expected (h, w, 3) array, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if data.dtype != np.uint8:
            if np.any((data < 0) | (data > 255)) or not np.all(np.equal(np.mod(data, 1), 0)):
                raise ValueError("pixel values must be integers in [0, 255]")
            data = data.astype(np.uint8)
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    def __eq__(self, other):
        return isinstance(other, RasterImage) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel class ids (uint8), 255 marks pixels to ignore."""

    labels: np.ndarray
    ignore_value: int = field(default=IGNORE, init=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.size == 0:
            raise ValueError(f"expected non-empty (h, w) array, got shape {labels.shape}")
        if labels.dtype != np.uint8:
            if np.any((labels < 0) | (labels > 255)):
                raise ValueError("labels must fit in one byte")
            labels = labels.astype(np.uint8)
        labels = np.ascontiguousarray(labels)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    def validate(self, num_classes):
        bad = (self.labels >= num_classes) & (self.labels != IGNORE)
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            raise ValueError(f"label {self.labels.flat[idx]} at index {idx} is not < {num_classes} or ignore")

    def __eq__(self, other):
        return isinstance(other, LabelMap) and np.array_equal(self.labels, other.labels)


@dataclass(frozen=True, eq=False)
class ScoreMap:
    """Per-class activation planes in [0, 1].

    ``planes`` has shape (num_classes, height, width) and is stored as
    float32 so that SMF1 round trips are bit exact.
    """

    planes: np.ndarray
    class_ids: tuple

    def __post_init__(self):
        planes = np.asarray(self.planes, dtype=np.float32)
        if planes.ndim != 3 or planes.shape[1] < 1 or planes.shape[2] < 1:
            raise ValueError(f"expected (n, h, w) planes, got shape {planes.shape}")
        ids = tuple(int(c) for c in self.class_ids)
        if len(ids) != planes.shape[0]:
            raise ValueError(f"{planes.shape[0]} planes but {len(ids)} class ids")
        if len(set(ids)) != len(ids):
            raise ValueError(f"class ids must be distinct: {ids}")
        _check_scores(planes)
        planes = np.ascontiguousarray(planes)
        planes.flags.writeable = False
        object.__setattr__(self, "planes", planes)
        object.__setattr__(self, "class_ids", ids)

    @property
    def num_classes(self):
        return self.planes.shape[0]

    @property
    def height(self):
        return self.planes.shape[1]

    @property
    def width(self):
        return self.planes.shape[2]

    def plane(self, class_id):
        return self.planes[self.class_ids.index(class_id)]

    def __eq__(self, other):
        return (
            isinstance(other, ScoreMap)
            and self.class_ids == other.class_ids
            and self.planes.shape == other.planes.shape
            and self.planes.tobytes() == other.planes.tobytes()
        )


@dataclass(frozen=True, eq=False)
class PerimeterMap:
    """Binary edge map, uint8 values in {0, 255} with 255 marking an edge."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.size == 0:
            raise ValueError(f"expected non-empty (h, w) array, got shape {values.shape}")
        if values.dtype == bool:
            values = np.where(values, 255, 0)
        if not np.isin(values, (0, 255)).all():
            raise ValueError("perimeter map values must be 0 or 255")
        values = np.ascontiguousarray(values, dtype=np.uint8)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def edges(self):
        return self.values == 255

    def __eq__(self, other):
        return isinstance(other, PerimeterMap) and np.array_equal(self.values, other.values)


def _check_scores(planes):
    flat = planes.reshape(planes.shape[0], -1)
    bad = ~np.isfinite(flat)
    if bad.any():
        p, i = np.argwhere(bad)[0]
        raise ValueError(f"non-finite score at plane {p} index {i}")
    bad = (flat < 0) | (flat > 1)
    if bad.any():
        p, i = np.argwhere(bad)[0]
        raise ValueError(f"score out of range at plane {p} index {i}")


# -- atomic writes ----------------------------------------------------------

def atomic_write_bytes(path, payload):
    """Write ``payload`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


# -- Netpbm -----------------------------------------------------------------

_WS = b" \t\n\r\v\f"


def _parse_netpbm_header(buf, magic, nfields):
    """Return header integers and payload offset; comments are accepted."""
    if buf[:2] != magic:
        raise FormatError(f"wrong magic {buf[:2]!r}, expected {magic!r}", 0)
    pos = 2
    values = []
    while len(values) < nfields:
        if pos >= len(buf):
            raise FormatError("truncated header", pos)
        c = buf[pos:pos + 1]
        if c in _WS:
            pos += 1
            continue
        if c == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise FormatError("unterminated comment in header", pos)
            pos = end + 1
            continue
        m = re.compile(rb"\d+").match(buf, pos)
        if m is None:
            raise FormatError(f"unexpected byte {c!r} in header", pos)
        end = m.end()
        if end < len(buf) and buf[end:end + 1] not in _WS and buf[end:end + 1] != b"#":
            raise FormatError("malformed number in header", end)
        values.append(int(m.group()))
        pos = end
    if pos >= len(buf) or buf[pos:pos + 1] not in _WS:
        raise FormatError("missing whitespace after header", pos)
    return values, pos + 1


def _load_netpbm(path, magic, channels):
    buf = Path(path).read_bytes()
    (width, height, maxval), offset = _parse_netpbm_header(buf, magic, 3)
    if width < 1 or height < 1:
        raise FormatError(f"invalid dimensions {width}x{height}", 2)
    if maxval != 255:
        raise FormatError(f"maxval {maxval} is not 255", offset - 1)
    expected = width * height * channels
    payload = buf[offset:]
    if len(payload) < expected:
        raise FormatError(f"truncated payload: {len(payload)} of {expected} bytes", len(buf))
    if len(payload) > expected:
        raise FormatError(f"{len(payload) - expected} trailing bytes after payload", offset + expected)
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return arr.reshape(shape).copy()


def _encode_netpbm(arr, magic):
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def load_ppm(path):
    return RasterImage(_load_netpbm(path, b"P6", 3))


def save_ppm(image, path):
    atomic_write_bytes(path, _encode_netpbm(image.data, b"P6"))


def load_pgm(path):
    """Load a P5 file as a raw (h, w) uint8 array."""
    return _load_netpbm(path, b"P5", 1)


def save_pgm(arr, path):
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"expected (h, w) array, got shape {arr.shape}")
    if arr.dtype != np.uint8 and np.any((arr < 0) | (arr > 255)):
        raise ValueError("values must fit in one byte")
    atomic_write_bytes(path, _encode_netpbm(arr.astype(np.uint8), b"P5"))


def load_label_map(path):
    return LabelMap(load_pgm(path))


def save_label_map(label_map, path):
    save_pgm(label_map.labels, path)


def load_perimeter_map(path):
    return PerimeterMap(load_pgm(path))


def save_perimeter_map(pm, path):
    values = pm.values if isinstance(pm, PerimeterMap) else np.asarray(pm)
    if not np.isin(values, (0, 255)).all():
        raise ValueError("perimeter map values must be 0 or 255")
    save_pgm(values, path)


# -- SMF1 score maps ----------------------------------------------------------

_SMF_HEADER = re.compile(rb"SMF1 (\d+) (\d+) (\d+)\n")


def encode_smf(score_map):
    header = f"SMF1 {score_map.width} {score_map.height} {score_map.num_classes}\n"
    ids = " ".join(str(c) for c in score_map.class_ids) + "\n"
    payload = score_map.planes.astype("<f4").tobytes()
    return header.encode("ascii") + ids.encode("ascii") + payload


def decode_smf(buf):
    m = _SMF_HEADER.match(buf)
    if m is None:
        raise FormatError("bad SMF1 header", 0)
    width, height, n = (int(g) for g in m.groups())
    if width < 1 or height < 1 or n < 1:
        raise FormatError(f"invalid SMF1 dimensions {width}x{height}x{n}", 5)
    nl = buf.find(b"\n", m.end())
    if nl < 0:
        raise FormatError("missing class id line", m.end())
    try:
        ids = [int(tok) for tok in buf[m.end():nl].split()]
    except ValueError:
        raise FormatError("non-integer class id", m.end()) from None
    if len(ids) != n:
        raise FormatError(f"expected {n} class ids, found {len(ids)}", m.end())
    offset = nl + 1
    expected = 4 * n * width * height
    payload = buf[offset:]
    if len(payload) != expected:
        raise FormatError(f"size mismatch: payload is {len(payload)} bytes, expected {expected}", offset)
    planes = np.frombuffer(payload, dtype="<f4").reshape(n, height, width).astype(np.float32)
    return ScoreMap(planes, tuple(ids))


def load_smf(path):
    return decode_smf(Path(path).read_bytes())


def save_smf(score_map, path):
    atomic_write_bytes(path, encode_smf(score_map))


# -- colour -----------------------------------------------------------------

_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_WHITE_D65 = _RGB_TO_XYZ.sum(axis=1)


def rgb_to_lab(image):
    """sRGB (D65) to CIELAB; returns an (h, w, 3) float64 array of L, a, b."""
    rgb = np.asarray(image.data if isinstance(image, RasterImage) else image, dtype=np.float64) / 255.0
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _RGB_TO_XYZ.T / _WHITE_D65
    eps, kappa = 216 / 24389, 24389 / 27
    f = np.where(xyz > eps, np.cbrt(xyz), (kappa * xyz + 16) / 116)
    L = 116 * f[..., 1] - 16
    a = 500 * (f[..., 0] - f[..., 1])
    b = 200 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def render_overlay(image, mask, palette):
    """Blend palette colours over ``image`` at 50% wherever ``mask`` is foreground.

    Background (0) and ignore (255) pixels are left untouched. Channel values
    are rounded half up.
    """
    labels = mask.labels if isinstance(mask, LabelMap) else np.asarray(mask)
    if labels.shape != image.data.shape[:2]:
        raise ValueError(f"mask shape {labels.shape} does not match image {image.data.shape[:2]}")
    out = image.data.astype(np.int32).copy()
    for cid in np.unique(labels):
        cid = int(cid)
        if cid in (BACKGROUND, IGNORE):
            continue
        color = palette.get(cid)
        if color is None:
            raise ValueError(f"no palette entry for class {cid}")
        sel = labels == cid
        # (a + b) / 2 rounded half up == (a + b + 1) // 2 for integers
        out[sel] = (out[sel] + np.asarray(color, dtype=np.int32) + 1) // 2
    return RasterImage(out.astype(np.uint8))


def load_palette(path):
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return {int(k): tuple(int(c) for c in v) for k, v in raw.items()}


# -- manifest -----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: Path
    score_path: Path
    gt_path: Path | None
    classes_present: tuple


def load_manifest(path, check_files=True):
    """Parse a manifest JSON array; relative paths resolve against its directory."""
    path = Path(path)
    raw = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise ValueError("manifest must be a JSON array")
    base = path.parent
    entries, seen = [], set()
    for item in raw:
        eid = str(item["id"])
        if eid in seen:
            raise ValueError(f"duplicate manifest id {eid!r}")
        seen.add(eid)
        classes = tuple(int(c) for c in item.get("classes_present", ()))
        if not classes:
            raise ValueError(f"entry {eid!r}: classes_present is empty")
        gt = item.get("gt_path")
        entry = ManifestEntry(
            id=eid,
            image_path=base / item["image_path"],
            score_path=base / item["score_path"],
            gt_path=None if gt is None else base / gt,
            classes_present=classes,
        )
        if check_files:
            for p in (entry.image_path, entry.score_path, entry.gt_path):
                if p is not None and not p.is_file():
                    raise FileNotFoundError(f"entry {eid!r}: missing file {p}")
        entries.append(entry)
    return entries


def save_manifest(entries, path):
    path = Path(path)
    base = path.parent

    def rel(p):
        return None if p is None else os.path.relpath(p, base)

    raw = [
        {
            "id": e.id,
            "image_path": rel(e.image_path),
            "score_path": rel(e.score_path),
            "gt_path": rel(e.gt_path),
            "classes_present": list(e.classes_present),
        }
        for e in entries
    ]
    atomic_write_bytes(path, (json.dumps(raw, indent=2) + "\n").encode("utf-8"))
