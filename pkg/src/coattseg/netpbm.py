"""Binary netpbm readers and writers: P6 (PPM, RGB) and P5 (PGM, gray).

Only 8-bit maxval-255 files are accepted; anything else is refused rather
than rescaled. Parse errors report the byte offset at which the problem
was found. Write-then-read round-trips are lossless.
"""

from pathlib import Path

import numpy as np

from .errors import DataError


class _Scanner:
    """Header tokenizer tracking byte offsets; '#' starts a comment."""

    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def fail(self, message: str):
        raise DataError(f"{self.path}: {message} at byte {self.pos}")

    def skip_space(self):
        while self.pos < len(self.blob):
            c = self.blob[self.pos : self.pos + 1]
            if c.isspace():
                self.pos += 1
            elif c == b"#":
                while self.pos < len(self.blob) and self.blob[self.pos : self.pos + 1] != b"\n":
                    self.pos += 1
            else:
                return

    def token(self) -> bytes:
        self.skip_space()
        start = self.pos
        while self.pos < len(self.blob) and not self.blob[self.pos : self.pos + 1].isspace():
            self.pos += 1
        if self.pos == start:
            self.fail("unexpected end of header")
        return self.blob[start : self.pos]

    def integer(self, what: str) -> int:
        tok = self.token()
        try:
            value = int(tok)
        except ValueError:
            self.fail(f"expected integer {what}, got {tok!r}")
        if value <= 0:
            self.fail(f"{what} must be positive, got {value}")
        return value


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    sc = _Scanner(blob, path)
    if sc.token() != magic:
        sc.pos = 0
        sc.fail(f"bad magic, expected {magic.decode()}")
    width = sc.integer("width")
    height = sc.integer("height")
    maxval = sc.integer("maxval")
    if maxval != 255:
        sc.fail(f"unsupported maxval {maxval}, only 255 is accepted")
    if sc.pos >= len(blob) or not blob[sc.pos : sc.pos + 1].isspace():
        sc.fail("expected single whitespace before payload")
    sc.pos += 1
    expected = width * height * channels
    payload = blob[sc.pos : sc.pos + expected]
    if len(payload) != expected:
        sc.pos += len(payload)
        sc.fail(f"payload truncated, expected {expected} bytes")
    if sc.pos + expected != len(blob):
        sc.pos += expected
        sc.fail(f"{len(blob) - sc.pos} trailing bytes after payload")
    pixels = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return pixels.reshape(shape).copy()


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into an (H, W, 3) uint8 array."""
    return _read(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 file into an (H, W) uint8 array."""
    return _read(path, b"P5", 1)


def _write(path, magic: bytes, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = image.shape[:2]
    header = magic + b"\n" + f"{w} {h}\n255\n".encode("ascii")
    path.write_bytes(header + np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"write_ppm needs an (H, W, 3) array, got {image.shape}")
    _write(path, b"P6", image)


def write_pgm(path, image: np.ndarray) -> None:
    if image.ndim != 2:
        raise DataError(f"write_pgm needs an (H, W) array, got {image.shape}")
    _write(path, b"P5", image)
