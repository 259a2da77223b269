"""Corpus ingestion, luminance planes and quality metrics."""

from __future__ import annotations

import logging
import math
import re
import typing as t
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from itnn_codec.errors import (
    DimensionMismatchError,
    FrameFormatError,
    PgmHeaderError,
    TruncatedPayloadError,
    UnsupportedMaxvalError,
)

logger = logging.getLogger(__name__)

PGM_SUFFIX = ".pgm"
RGB_SUFFIXES = (".ppm", ".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

# BT.601 full-range luma weights.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# magic, width, height, maxval and the single whitespace byte ending the header;
# comments are stripped beforehand.
_PGM_HEADER = re.compile(rb"\AP5\s+(\d+)\s+(\d+)\s+(\d+)\s")
_PGM_COMMENT = re.compile(rb"#[^\n\r]*[\n\r]")


@dataclass(frozen=True)
class LuminancePlane:
    """8-bit grayscale raster, row-major.

    Attributes:
        samples: ``uint8`` array of shape ``(height, width)``.
    """

    samples: np.ndarray

    def __post_init__(self) -> None:
        """Validate and freeze the sample array."""
        samples = np.asarray(self.samples)
        if samples.ndim != 2 or samples.shape[0] == 0 or samples.shape[1] == 0:  # noqa: PLR2004
            msg = f"Luminance plane needs a non-empty 2-D array, got shape {samples.shape}"
            raise DimensionMismatchError(msg)
        if samples.dtype != np.uint8:
            if samples.min() < 0 or samples.max() > 255:  # noqa: PLR2004
                msg = "Luminance samples must lie in [0, 255]"
                raise FrameFormatError(msg)
            samples = samples.astype(np.uint8)
        samples = np.ascontiguousarray(samples)
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def width(self) -> int:
        """Width in pixels."""
        return int(self.samples.shape[1])

    @property
    def height(self) -> int:
        """Height in pixels."""
        return int(self.samples.shape[0])

    @classmethod
    def from_bytes(cls, width: int, height: int, payload: bytes) -> LuminancePlane:
        """Build a plane from a row-major byte payload."""
        data = np.frombuffer(payload, dtype=np.uint8, count=width * height)
        return cls(data.reshape(height, width))

    def to_bytes(self) -> bytes:
        """Row-major sample bytes."""
        return self.samples.tobytes()


@dataclass(frozen=True)
class Corpus:
    """Ordered collection of ``(image identifier, plane)`` entries."""

    entries: tuple[tuple[str, LuminancePlane], ...]

    def __post_init__(self) -> None:
        """Enforce unique identifiers and lexicographic order."""
        ids = [image_id for image_id, _ in self.entries]
        if len(set(ids)) != len(ids):
            msg = "Corpus image identifiers must be unique"
            raise FrameFormatError(msg)
        ordered = tuple(sorted(self.entries, key=lambda entry: entry[0]))
        object.__setattr__(self, "entries", ordered)

    def __len__(self) -> int:
        """Number of images."""
        return len(self.entries)

    def __iter__(self) -> t.Iterator[tuple[str, LuminancePlane]]:
        """Iterate entries in identifier order."""
        return iter(self.entries)

    @classmethod
    def from_directory(cls, directory: Path | str) -> Corpus:
        """Load every ``*.pgm`` file of a directory, keyed by file stem."""
        directory = Path(directory)
        paths = sorted(directory.glob(f"*{PGM_SUFFIX}"))
        logger.info(f"Loading corpus of {len(paths)} images from {directory}")
        return cls(tuple((path.stem, load_pgm(path)) for path in paths))


def parse_pgm(data: bytes) -> LuminancePlane:
    """Parse a binary (P5) PGM image.

    Raises:
        PgmHeaderError: The header is not a valid P5 header.
        UnsupportedMaxvalError: maxval is not 255.
        TruncatedPayloadError: Fewer than width x height payload bytes.
    """
    if not data.startswith(b"P5"):
        msg = "malformed header: missing P5 magic"
        raise PgmHeaderError(msg)
    # Comments may only appear inside the header, i.e. before the payload.
    header_end = 0
    text = data
    while True:
        match = _PGM_HEADER.match(text)
        if match:
            header_end = match.end()
            break
        comment = _PGM_COMMENT.search(text, 0, 512)
        if comment is None:
            msg = "malformed header"
            raise PgmHeaderError(msg)
        text = text[: comment.start()] + b" " + text[comment.end():]
    width, height, maxval = (int(group) for group in match.groups())
    if width <= 0 or height <= 0:
        msg = f"malformed header: dimensions {width}x{height}"
        raise PgmHeaderError(msg)
    if maxval != 255:  # noqa: PLR2004
        msg = f"unsupported maxval {maxval}"
        raise UnsupportedMaxvalError(msg)
    payload = text[header_end:]
    if len(payload) < width * height:
        msg = f"truncated payload: expected {width * height} bytes, got {len(payload)}"
        raise TruncatedPayloadError(msg)
    return LuminancePlane.from_bytes(width, height, payload[: width * height])


def load_pgm(path: Path | str) -> LuminancePlane:
    """Read a binary PGM file."""
    return parse_pgm(Path(path).read_bytes())


def save_pgm(plane: LuminancePlane, path: Path | str) -> None:
    """Write a binary PGM file (maxval 255)."""
    header = f"P5\n{plane.width} {plane.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + plane.to_bytes())


def rgb_to_luma(r: int, g: int, b: int) -> int:
    """BT.601 full-range luma of one RGB triple, rounded half up."""
    kr, kg, kb = LUMA_WEIGHTS
    value = math.floor(kr * r + kg * g + kb * b + 0.5)
    return min(max(value, 0), 255)


def rgb_array_to_luma(rgb: np.ndarray) -> np.ndarray:
    """Vectorised :func:`rgb_to_luma` over an ``(H, W, 3)`` array."""
    rgb = np.asarray(rgb, dtype=np.float64)
    luma = np.floor(rgb @ np.asarray(LUMA_WEIGHTS) + 0.5)
    return np.clip(luma, 0, 255).astype(np.uint8)


def load_rgb_as_luma(path: Path | str) -> LuminancePlane:
    """Decode an RGB image (PPM, PNG, ...) and convert it to luminance."""
    with Image.open(path) as image:
        rgb = np.asarray(image.convert("RGB"))
    return LuminancePlane(rgb_array_to_luma(rgb))


def ingest_directory(source: Path | str, target: Path | str) -> list[Path]:
    """Convert every RGB image of ``source`` into a PGM file in ``target``.

    PGM inputs are copied through unchanged.

    Returns:
        The written PGM paths, in identifier order.
    """
    source, target = Path(source), Path(target)
    target.mkdir(parents=True, exist_ok=True)
    written = []
    for path in sorted(source.iterdir()):
        suffix = path.suffix.lower()
        if suffix == PGM_SUFFIX:
            plane = load_pgm(path)
        elif suffix in RGB_SUFFIXES:
            plane = load_rgb_as_luma(path)
        else:
            logger.debug(f"Skipping {path.name}: not an image")
            continue
        out = target / f"{path.stem}{PGM_SUFFIX}"
        save_pgm(plane, out)
        written.append(out)
    logger.info(f"Ingested {len(written)} images from {source} into {target}")
    return written


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared error between two equally shaped arrays."""
    if a.shape != b.shape:
        msg = f"Shape mismatch: {a.shape} vs {b.shape}"
        raise DimensionMismatchError(msg)
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(diff * diff))


def psnr_from_mse(error: float, peak: int = 255) -> float:
    """PSNR in dB; ``math.inf`` when the error is zero."""
    if error == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / error)


def psnr(a: LuminancePlane, b: LuminancePlane, peak: int = 255) -> float:
    """PSNR between two planes, ``math.inf`` for identical planes.

    Raises:
        DimensionMismatchError: The planes differ in size.
    """
    if (a.width, a.height) != (b.width, b.height):
        msg = f"Plane size mismatch: {a.width}x{a.height} vs {b.width}x{b.height}"
        raise DimensionMismatchError(msg)
    return psnr_from_mse(mse(a.samples, b.samples), peak)
