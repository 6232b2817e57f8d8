"""Image decode/encode (binary PNM), detection overlay rendering, and
detection JSON serialization.

Images are (H, W, C) uint8 arrays with C in {1, 3}, row-major, interleaved
channels. Only binary PGM (P5) and PPM (P6) with maxval 255 are supported;
other formats should be converted externally.
"""

import json
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .boxes import Detection
from .fileutil import atomic_write_bytes


class PnmError(ValueError):
    """Base class for PNM decode failures."""


class BadMagicError(PnmError):
    pass


class UnsupportedMaxvalError(PnmError):
    pass


class TruncatedPnmError(PnmError):
    pass


class MalformedHeaderError(PnmError):
    pass


def _header_tokens(data, start, count):
    """Read `count` whitespace-separated integer tokens, honoring '#' comments.
    Returns (values, position just past the single whitespace byte that
    terminates the last token)."""
    pos = start
    values = []
    while len(values) < count:
        while pos < len(data):
            if data[pos:pos + 1].isspace():
                pos += 1
            elif data[pos:pos + 1] == b"#":
                nl = data.find(b"\n", pos)
                if nl < 0:
                    raise MalformedHeaderError("unterminated comment in header")
                pos = nl + 1
            else:
                break
        tok_start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        token = data[tok_start:pos]
        if not token:
            raise TruncatedPnmError("header ended before all fields were read")
        try:
            values.append(int(token))
        except ValueError:
            raise MalformedHeaderError(f"non-numeric header token {token!r}") from None
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise MalformedHeaderError("missing whitespace after maxval")
    return values, pos + 1


def decode_pnm(data):
    """Decode binary PGM/PPM bytes into an (H, W, C) uint8 array."""
    if len(data) < 2:
        raise TruncatedPnmError("file shorter than a PNM magic")
    magic = data[:2]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise BadMagicError(f"bad magic {magic!r}, expected b'P5' or b'P6'")
    (width, height, maxval), pos = _header_tokens(data, 2, 3)
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"non-positive image extents {width}x{height}")
    if maxval != 255:
        raise UnsupportedMaxvalError(f"maxval {maxval} unsupported (only 255)")
    need = width * height * channels
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise TruncatedPnmError(
            f"payload has {len(payload)} bytes, expected {need}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels).copy()


def read_pnm(src):
    """Read a PNM image from a path or from raw bytes."""
    if isinstance(src, (bytes, bytearray)):
        return decode_pnm(bytes(src))
    with open(src, "rb") as fh:
        return decode_pnm(fh.read())


def encode_pnm(image):
    """Encode an (H, W, C) uint8 image as canonical binary PGM/PPM bytes."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ValueError(f"image must have 1 or 3 channels, got shape {image.shape}")
    if image.dtype != np.uint8:
        raise ValueError(f"image must be uint8, got {image.dtype}")
    h, w, c = image.shape
    magic = b"P5" if c == 1 else b"P6"
    header = magic + b"\n" + f"{w} {h}".encode() + b"\n255\n"
    return header + np.ascontiguousarray(image).tobytes()


def write_pnm(image, path):
    """Write an image as canonical binary PNM (atomic)."""
    atomic_write_bytes(path, encode_pnm(image))


_GREEN = np.array([0, 255, 0], dtype=np.uint8)
_RED = np.array([255, 0, 0], dtype=np.uint8)


def _fill_clipped(img, y1, y2, x1, x2, color):
    h, w = img.shape[:2]
    y1, y2 = max(y1, 0), min(y2, h)
    x1, x2 = max(x1, 0), min(x2, w)
    if y1 < y2 and x1 < x2:
        img[y1:y2, x1:x2] = color


def draw_overlay(image, detections):
    """Return a copy of the image with 2-px green box borders and 3-px red
    landmark squares drawn over it; geometry outside the image is clipped."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape[2] == 1:
        out = np.repeat(image, 3, axis=2)
    else:
        out = image.copy()

    def r(v):
        return int(np.floor(v + 0.5)) if v >= 0 else int(np.ceil(v - 0.5))

    for det in detections:
        x1, y1, x2, y2 = (r(v) for v in det.box)
        _fill_clipped(out, y1, y1 + 2, x1, x2, _GREEN)          # top
        _fill_clipped(out, y2 - 2, y2, x1, x2, _GREEN)          # bottom
        _fill_clipped(out, y1, y2, x1, x1 + 2, _GREEN)          # left
        _fill_clipped(out, y1, y2, x2 - 2, x2, _GREEN)          # right
        if det.landmarks is not None:
            for lx, ly in det.landmarks:
                cx, cy = r(lx), r(ly)
                _fill_clipped(out, cy - 1, cy + 2, cx - 1, cx + 2, _RED)
    return out


def _fmt4(v):
    """Fixed 4-decimal text for a float, rounding halves up."""
    return str(Decimal(repr(float(v))).quantize(Decimal("0.0001"), ROUND_HALF_UP))


def record_to_json(image_name, detections):
    """Serialize one image's detections; keys are ordered image, detections;
    box, score, landmarks; floats carry 4 decimals."""
    parts = []
    for det in detections:
        fields = ['"box":[%s]' % ",".join(_fmt4(v) for v in det.box),
                  '"score":%s' % _fmt4(det.score)]
        if det.landmarks is not None:
            pts = ",".join("[%s,%s]" % (_fmt4(x), _fmt4(y)) for x, y in det.landmarks)
            fields.append('"landmarks":[%s]' % pts)
        parts.append("{%s}" % ",".join(fields))
    return '{"image":%s,"detections":[%s]}' % (json.dumps(image_name), ",".join(parts))


def detections_to_json(results):
    """Serialize (image_name, detections) pairs as a JSON array of records."""
    return "[%s]" % ",".join(record_to_json(name, dets) for name, dets in results)


def _record_from_obj(obj):
    dets = []
    for d in obj["detections"]:
        dets.append(Detection(
            box=np.array(d["box"], dtype=np.float32),
            score=float(d["score"]),
            landmarks=np.array(d["landmarks"], dtype=np.float32)
            if "landmarks" in d else None,
        ))
    return obj["image"], dets


def detections_from_json(text):
    """Parse JSON produced by record_to_json/detections_to_json; returns a
    list of (image_name, detections) pairs."""
    parsed = json.loads(text)
    if isinstance(parsed, dict):
        parsed = [parsed]
    return [_record_from_obj(obj) for obj in parsed]
