"""Closed-form image-pair similarity metrics and the polydispersity index.

SSIM is computed globally (single means, variances and covariance over
the whole image) with c1 = (0.01 * max_value)^2, c2 = (0.03 * max_value)^2;
variances use the sample convention (n-1), and the variance is evaluated
through the covariance path so ssim(x, x) is exactly 1. PSNR compares
against the peak of the first image; PdI is variance over squared mean
of particle diameters, since twice the mean hydrodynamic radius is the
mean diameter.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np


class ImageError(Exception):
    pass


@dataclass(frozen=True)
class GrayImage:
    pixels: np.ndarray
    max_value: float = 255.0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        object.__setattr__(self, "pixels", px)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ImageError("pixels must form a 2-D matrix with at least one element")
        if self.max_value <= 0:
            raise ImageError("max_value must be positive")
        if px.min() < 0 or px.max() > self.max_value:
            raise ImageError(f"pixel values must lie in [0, {self.max_value}]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class DiameterSample:
    diameters: tuple

    def __post_init__(self):
        d = tuple(float(v) for v in self.diameters)
        object.__setattr__(self, "diameters", d)
        if not d:
            raise ImageError("diameter sample must be nonempty")
        if any(v <= 0 for v in d):
            raise ImageError("diameters must be positive")


def _check_pair(x: GrayImage, y: GrayImage) -> None:
    if x.pixels.shape != y.pixels.shape:
        raise ImageError(f"image dimensions differ: {x.pixels.shape} vs {y.pixels.shape}")
    if x.max_value != y.max_value:
        raise ImageError(f"image max_value differs: {x.max_value} vs {y.max_value}")


def ssim(x: GrayImage, y: GrayImage, c1: float | None = None, c2: float | None = None) -> float:
    """Global structural similarity of two equal-sized grayscale images."""
    _check_pair(x, y)
    if c1 is None:
        c1 = (0.01 * x.max_value) ** 2
    if c2 is None:
        c2 = (0.03 * x.max_value) ** 2
    a = x.pixels.ravel()
    b = y.pixels.ravel()
    n = a.size
    mu_a = float(a.mean())
    mu_b = float(b.mean())
    if n > 1:
        da = a - mu_a
        db = b - mu_b
        # variance through the covariance path keeps ssim(x, x) == 1 exact
        var_a = float((da * da).sum() / (n - 1))
        var_b = float((db * db).sum() / (n - 1))
        cov = float((da * db).sum() / (n - 1))
    else:
        var_a = var_b = cov = 0.0
    numerator = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    denominator = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return numerator / denominator


def psnr(x: GrayImage, y: GrayImage) -> float:
    """Peak signal-to-noise ratio in dB; identical images give math.inf."""
    _check_pair(x, y)
    diff = x.pixels - y.pixels
    mse = float((diff * diff).mean())
    if mse == 0.0:
        return math.inf
    peak = float(x.pixels.max())
    if peak <= 0.0:
        raise ImageError("psnr undefined: first image has zero peak value")
    return 20.0 * math.log10(peak / math.sqrt(mse))


def pdi(sample) -> float:
    """Polydispersity index of a diameter sample: (sigma / mean diameter)^2.

    Computed as sample variance over squared mean so the arithmetic stays
    exact for integer-valued fixtures. A single diameter has no spread;
    it yields 0 with a degenerate-sample warning.
    """
    if isinstance(sample, DiameterSample):
        d = np.asarray(sample.diameters, dtype=float)
    else:
        d = np.asarray(list(sample), dtype=float)
        DiameterSample(tuple(d))  # reuse validation
    if d.size == 1:
        warnings.warn("PdI of a single diameter is degenerate; returning 0", stacklevel=2)
        return 0.0
    variance = float(d.var(ddof=1))
    mean = float(d.mean())
    return variance / (mean * mean)


def load_pgm(path) -> GrayImage:
    """Read a binary (P5) PGM file."""
    with open(path, "rb") as fh:
        data = fh.read()
    header = []
    pos = 0
    while len(header) < 4:
        # token scanner that skips whitespace and # comments
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageError(f"{path}: truncated PGM header")
        header.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    magic, w_txt, h_txt, max_txt = header
    if magic != b"P5":
        raise ImageError(f"{path}: not a binary PGM (P5) file")
    width, height, maxval = int(w_txt), int(h_txt), int(max_txt)
    if maxval < 1 or maxval > 65535:
        raise ImageError(f"{path}: invalid maxval {maxval}")
    count = width * height
    itemsize = 2 if maxval > 255 else 1
    if len(data) - pos < count * itemsize:
        raise ImageError(f"{path}: pixel payload shorter than {width}x{height}")
    raw = np.frombuffer(data, dtype=">u2" if maxval > 255 else np.uint8, count=count, offset=pos)
    return GrayImage(pixels=raw.astype(float).reshape(height, width), max_value=float(maxval))


def save_pgm(img: GrayImage, path) -> None:
    maxval = int(round(img.max_value))
    header = f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii")
    px = np.rint(img.pixels)
    payload = px.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)


def load_csv_image(path, max_value: float = 255.0) -> GrayImage:
    matrix = np.loadtxt(path, delimiter=",", ndmin=2)
    return GrayImage(pixels=matrix, max_value=max_value)


def load_image(path, max_value: float = 255.0) -> GrayImage:
    text = str(path)
    if text.lower().endswith(".pgm"):
        return load_pgm(path)
    return load_csv_image(path, max_value=max_value)


def load_diameters(path) -> DiameterSample:
    """Single-column CSV of diameters; a non-numeric first row is a header."""
    values = []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or not row[0].strip():
                continue
            try:
                values.append(float(row[0]))
            except ValueError:
                if i == 0:
                    continue
                raise ImageError(f"{path}: non-numeric diameter {row[0]!r} at row {i}") from None
    return DiameterSample(tuple(values))
