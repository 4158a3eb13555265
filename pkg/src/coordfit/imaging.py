"""Images as (H, W, C) float arrays in [0, 1]: I/O, sampling, metrics, Sobel."""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ContractViolation, FormatError, OutOfBoundsError

LUMA = np.array([0.299, 0.587, 0.114])

RAW_MAGIC = b"CFR1"


def as_image(arr):
    """Validate and return an (H, W, C) float array with C in {1, 3}."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[-1] not in (1, 3):
        raise ContractViolation(f"expected (H, W, 1|3) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation("image contains non-finite values")
    return arr


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[-1] == 1:
        return img[..., 0]
    return img[..., :3] @ LUMA


# -- PNG -------------------------------------------------------------------


def png_read(path):
    """Read an 8- or 16-bit PNG into [0, 1] floats (values mapped linearly, no gamma).

    16-bit files must be greyscale; 16-bit colour is rejected.
    """
    try:
        with open(path, "rb") as fh:
            head = fh.read(33)
        if head[:8] != b"\x89PNG\r\n\x1a\n" or head[12:16] != b"IHDR":
            raise FormatError(f"{path}: not a PNG file")
        depth, colour = head[24], head[25]
        if depth == 16 and colour not in (0, 4):
            raise FormatError(f"{path}: 16-bit colour PNG is not supported")
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I", "I;16L"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
                return arr[..., None]
            if mode in ("L", "LA", "1"):
                return np.asarray(im.convert("L"), dtype=np.float64)[..., None] / 255.0
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except FormatError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError, IndexError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def png_write(path, img, bits=8):
    """Write an image in [0, 1]; ``bits=16`` is available for greyscale only."""
    img = np.clip(as_image(img), 0.0, 1.0)
    if bits == 8:
        q = np.round(img * 255.0).astype(np.uint8)
        im = Image.fromarray(q[..., 0], "L") if q.shape[-1] == 1 else Image.fromarray(q, "RGB")
    elif bits == 16:
        if img.shape[-1] != 1:
            raise ContractViolation("16-bit output is greyscale only")
        q = np.round(img[..., 0] * 65535.0).astype(np.uint16)
        im = Image.fromarray(q)
    else:
        raise ContractViolation(f"unsupported bit depth {bits}")
    im.save(path, format="PNG")


def write_raw(path, arr):
    """Flat float32 dump: b'CFR1', uint32 ndim, uint32 dims..., then little-endian data."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        fh.write(arr.tobytes())


def read_raw(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != RAW_MAGIC or len(blob) < 8:
        raise FormatError(f"{path}: bad raw header")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{ndim}I", blob, 8)
    offset = 8 + 4 * ndim
    count = int(np.prod(shape))
    if len(blob) - offset != 4 * count:
        raise FormatError(f"{path}: payload size does not match header")
    return np.frombuffer(blob, dtype="<f4", offset=offset).reshape(shape).copy()


# -- sampling --------------------------------------------------------------


def bilinear_sample(img, u):
    """Sample ``img`` at continuous pixel coordinates u (..., 2) = (column, row).

    Integer coordinates hit pixel centres exactly.  Coordinates outside
    [0, W-1] x [0, H-1] raise ``OutOfBoundsError``.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    u = np.asarray(u, dtype=np.float64)
    H, W = img.shape[:2]
    x, y = u[..., 0], u[..., 1]
    tol = 1e-9
    if np.any(x < -tol) or np.any(x > W - 1 + tol) or np.any(y < -tol) or np.any(y > H - 1 + tol):
        raise OutOfBoundsError("sample location outside the image")
    x = np.clip(x, 0, W - 1)
    y = np.clip(y, 0, H - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


# -- metrics -----------------------------------------------------------------


def psnr(a, b):
    """Peak-1.0 PSNR in dB; identical inputs give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _filter_valid(x, k):
    n = len(k)
    rows = np.lib.stride_tricks.sliding_window_view(x, n, axis=0) @ k
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ k


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM over valid window positions on luma (data range 1)."""
    a = to_gray(a)
    b = to_gray(b)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ContractViolation(f"image {a.shape} smaller than the {window}x{window} window")
    k = gaussian_window(window, sigma)
    c1, c2 = k1**2, k2**2
    mu_a, mu_b = _filter_valid(a, k), _filter_valid(b, k)
    saa = _filter_valid(a * a, k) - mu_a**2
    sbb = _filter_valid(b * b, k) - mu_b**2
    sab = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0
SOBEL_Y = SOBEL_X.T


def _correlate3(img, k):
    p = np.pad(img, 1, mode="symmetric")
    H, W = img.shape
    out = np.zeros_like(img)
    for i in range(3):
        for j in range(3):
            if k[i, j] != 0.0:
                out += k[i, j] * p[i:i + H, j:j + W]
    return out


def sobel_gradient(img):
    """(d/dx, d/dy) per pixel of the luma image; a unit ramp gives unit slope."""
    g = to_gray(img)
    return _correlate3(g, SOBEL_X), _correlate3(g, SOBEL_Y)
