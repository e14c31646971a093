"""Binary PPM/PGM readers and writers.

Images are 8-bit binary P6 files mapped to [0,1] floats channel-first;
label maps are binary P5 files whose bytes are raw class indices (255 is
the void label). Writers emit a canonical header form so that
write(read(f)) is byte-identical for files this package produced.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited header token, skipping '#' comments."""
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < n and data[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise FormatError("truncated header", offset=pos)
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def _parse_header(data: bytes, magic: bytes):
    if data[:2] != magic:
        raise FormatError(f"bad magic {data[:2]!r}, expected {magic!r}", offset=0)
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _read_token(data, pos)
        try:
            fields.append(int(token))
        except ValueError:
            raise FormatError(f"non-numeric header field {token!r}", offset=pos) from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"invalid dimensions {width}x{height}", offset=pos)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, expected 255", offset=pos)
    # exactly one whitespace byte separates header from raster
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing raster separator", offset=pos)
    return width, height, pos + 1


def read_image(path) -> np.ndarray:
    """Read a P6 file into a float32 [3,H,W] tensor scaled to [0,1]."""
    with open(path, "rb") as f:
        data = f.read()
    width, height, pos = _parse_header(data, b"P6")
    need = width * height * 3
    raster = data[pos:pos + need]
    if len(raster) < need:
        raise FormatError(f"truncated raster, expected {need} bytes", offset=pos + len(raster))
    pixels = np.frombuffer(raster, np.uint8).reshape(height, width, 3)
    return (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)


def write_image(path, image: np.ndarray) -> None:
    """Write a [3,H,W] float tensor in [0,1] as a binary P6 file."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"expected [3,H,W] image, got extents {image.shape}")
    h, w = image.shape[1:]
    bytes_hwc = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(bytes_hwc.tobytes())


def read_labels(path) -> np.ndarray:
    """Read a P5 file into an int64 [H,W] label map (bytes pass through)."""
    with open(path, "rb") as f:
        data = f.read()
    width, height, pos = _parse_header(data, b"P5")
    need = width * height
    raster = data[pos:pos + need]
    if len(raster) < need:
        raise FormatError(f"truncated raster, expected {need} bytes", offset=pos + len(raster))
    return np.frombuffer(raster, np.uint8).reshape(height, width).astype(np.int64)


def write_labels(path, labels: np.ndarray) -> None:
    """Write an integer [H,W] label map as a binary P5 file."""
    if labels.ndim != 2:
        raise FormatError(f"expected [H,W] labels, got extents {labels.shape}")
    if labels.min() < 0 or labels.max() > 255:
        raise FormatError("label values must fit in one byte")
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(labels.astype(np.uint8).tobytes())


def write_uncertainty_map(u: np.ndarray, path, sidecar_csv=None) -> None:
    """Render an uncertainty map as an inverted grayscale P5 file.

    Values are min-max normalized to [0,255] and inverted so high
    uncertainty appears dark; a constant map writes mid-gray 128. The
    optional sidecar CSV preserves the raw values, one image row per line.
    """
    if not np.isfinite(u).all():
        raise FormatError("uncertainty map contains non-finite values")
    lo = float(u.min())
    hi = float(u.max())
    if hi > lo:
        scaled = np.rint((u - lo) / (hi - lo) * 255.0).astype(np.int64)
        gray = (255 - scaled).astype(np.int64)
    else:
        gray = np.full(u.shape, 128, np.int64)
    write_labels(path, gray)
    if sidecar_csv is not None:
        with open(sidecar_csv, "w", encoding="utf-8", newline="\n") as f:
            for row in u:
                f.write(",".join(repr(float(v)) for v in row) + "\n")
