"""2-D spectral transforms and spectrum-image diagnostics.

The FFT is a hand-rolled row-column radix-2 transform (sizes here are tiny,
8..64), the DCT/IDCT pair is the orthonormal DCT-II/DCT-III built from an
explicit basis matrix so it is exactly linear and its gradient is the
transposed transform. Spectrum images are log-scaled magnitude spectra,
rolled so DC sits at the center bin, min-max normalized to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, to_array


class SpectralError(ValueError):
    pass


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _fft1d(x: np.ndarray, inverse: bool) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey along the last axis (vectorized over the rest)."""
    n = x.shape[-1]
    if not _is_pow2(n):
        raise SpectralError(f"length {n} is not a power of two")
    # bit-reversal permutation
    idx = np.arange(n)
    rev = np.zeros(n, dtype=int)
    bits = n.bit_length() - 1
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    out = np.asarray(x, dtype=np.complex128)[..., rev].copy()
    sign = 1.0 if inverse else -1.0
    half = 1
    while half < n:
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / (2 * half))
        blk = out.reshape(*out.shape[:-1], n // (2 * half), 2 * half)
        even = blk[..., :half]
        odd = blk[..., half:] * tw
        blk[..., :half] = even + odd
        blk[..., half:] = even - odd
        half *= 2
    if inverse:
        out /= n
    return out


def pad_to_pow2(x: np.ndarray) -> np.ndarray:
    """Zero-pad both axes up to the next power of two."""
    h, w = x.shape
    hp = 1 << (h - 1).bit_length()
    wp = 1 << (w - 1).bit_length()
    if (hp, wp) == (h, w):
        return x
    out = np.zeros((hp, wp), dtype=x.dtype)
    out[:h, :w] = x
    return out


def fft2d(x, pad: bool = False) -> np.ndarray:
    """2-D DFT via row-column radix-2; set pad=True to zero-pad odd sizes up."""
    a = np.asarray(to_array(x) if not np.iscomplexobj(x) else x)
    if a.ndim != 2:
        raise SpectralError("fft2d expects an H x W array")
    if not (_is_pow2(a.shape[0]) and _is_pow2(a.shape[1])):
        if not pad:
            raise SpectralError(f"shape {a.shape} is not power-of-two (pass pad=True)")
        a = pad_to_pow2(a)
    return _fft1d(_fft1d(a, False).T, False).T


def ifft2d(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.complex128)
    return _fft1d(_fft1d(a, True).T, True).T


# ---------------------------------------------------------------------------
# orthonormal DCT-II / DCT-III

_dct_cache: dict[int, np.ndarray] = {}


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis; T @ T.T == I."""
    t = _dct_cache.get(n)
    if t is None:
        k = np.arange(n)[:, None]
        j = np.arange(n)[None, :]
        t = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * j + 1) * k / (2 * n))
        t[0, :] = 1.0 / np.sqrt(n)
        t.flags.writeable = False
        _dct_cache[n] = t
    return t


def dct2d(x) -> np.ndarray:
    a = to_array(x)
    if a.ndim != 2:
        raise SpectralError("dct2d expects an H x W array")
    return dct_matrix(a.shape[0]) @ a @ dct_matrix(a.shape[1]).T


def idct2d(x) -> np.ndarray:
    a = to_array(x)
    if a.ndim != 2:
        raise SpectralError("idct2d expects an H x W array")
    return dct_matrix(a.shape[0]).T @ a @ dct_matrix(a.shape[1])


# ---------------------------------------------------------------------------
# spectrum images

@dataclass(frozen=True)
class SpectrumImage:
    magnitudes: Tensor  # H x W, in [0, 1], DC at (H//2, W//2)
    source: str = ""


def _log_shifted(mag: np.ndarray) -> np.ndarray:
    h, w = mag.shape
    return np.roll(np.roll(np.log1p(mag), h // 2, axis=0), w // 2, axis=1)


def _minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def spectrum_image(x, source: str = "", pad: bool = False) -> SpectrumImage:
    """log(1+|FFT|), rolled so DC is centered, min-max normalized to [0, 1]."""
    m = _log_shifted(np.abs(fft2d(x, pad=pad)))
    return SpectrumImage(Tensor.wrap(_minmax(m)), source)


def band_energy_split(spectrum: np.ndarray, radius_fraction: float = 0.5):
    """Split squared-magnitude energy at a radius around the centered DC bin.

    radius_fraction is relative to the Nyquist distance min(H, W)/2; 0.5
    splits at half-Nyquist. Returns (inner energy, outer energy).
    """
    a = np.asarray(spectrum, dtype=np.float64)
    h, w = a.shape
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.hypot(yy - h // 2, xx - w // 2)
    cut = radius_fraction * (min(h, w) / 2.0)
    e = a * a
    outer = float(e[r > cut].sum())
    return float(e.sum()) - outer, outer


@dataclass(frozen=True)
class ChannelSpectra:
    """One report row: clean/adv spectra plus raw difference arrays."""
    clean: SpectrumImage
    adv: SpectrumImage
    diff: SpectrumImage          # min-max normalized for display
    blurred_diff: SpectrumImage
    diff_raw: np.ndarray         # signed difference of normalized spectra
    blurred_diff_raw: np.ndarray


def _uniform_blur_map(m: np.ndarray, k: int) -> np.ndarray:
    """k x k uniform blur with replicate padding on a single map."""
    p = k // 2
    mp = np.pad(m, p, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(mp, (k, k))
    return win.mean(axis=(2, 3))


def feature_spectrum_report(model, clean, adv, layer: int = 1,
                            channels=None, blur_k: int = 5) -> list[ChannelSpectra]:
    """Per-channel clean/adv/difference/blurred-difference spectra.

    ``model`` must expose ``layer_maps(images, layer) -> (N, H, W, K)``.
    The difference column subtracts normalized magnitude spectra; the
    blurred column is the spectrum of the blur_k-filtered adversarial maps
    minus the clean spectrum.
    """
    if layer not in (1, 2):
        raise SpectralError(f"layer must be 1 or 2, got {layer}")
    c = to_array(clean)
    a = to_array(adv)
    if c.shape != a.shape:
        raise SpectralError("clean and adversarial batches must share a shape")
    fc = model.layer_maps(c[None] if c.ndim == 3 else c, layer)[0]
    fa = model.layer_maps(a[None] if a.ndim == 3 else a, layer)[0]
    if channels is None:
        channels = range(fc.shape[2])
    out = []
    for ch in channels:
        sc = spectrum_image(fc[:, :, ch], f"layer{layer} ch{ch} clean", pad=True)
        sa = spectrum_image(fa[:, :, ch], f"layer{layer} ch{ch} adv", pad=True)
        diff = sa.magnitudes.array - sc.magnitudes.array
        blurred = _uniform_blur_map(fa[:, :, ch], blur_k)
        sb = spectrum_image(blurred, f"layer{layer} ch{ch} adv blur{blur_k}", pad=True)
        bdiff = sb.magnitudes.array - sc.magnitudes.array
        out.append(ChannelSpectra(
            clean=sc, adv=sa,
            diff=SpectrumImage(Tensor.wrap(_minmax(diff)),
                               f"layer{layer} ch{ch} diff"),
            blurred_diff=SpectrumImage(Tensor.wrap(_minmax(bdiff)),
                                       f"layer{layer} ch{ch} blurred diff"),
            diff_raw=diff, blurred_diff_raw=bdiff))
    return out


# ---------------------------------------------------------------------------
# exports

def spectrum_to_pgm(img: SpectrumImage, path) -> None:
    from .data import save_image
    save_image(img.magnitudes.array[:, :, None], path, fmt="P5")


def report_to_svg(rows: list[ChannelSpectra], path, cell: int = 96) -> None:
    """Composite grid, one row per channel, four columns, grayscale rects."""
    cols = ("clean", "adv", "diff", "blurred_diff")
    pad = 4
    width = pad + len(cols) * (cell + pad)
    height = pad + len(rows) * (cell + pad)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">']
    parts.append(f'<rect width="{width}" height="{height}" fill="#202020"/>')
    for r, row in enumerate(rows):
        for c, key in enumerate(cols):
            img = getattr(row, key).magnitudes.array
            h, w = img.shape
            sy, sx = cell / h, cell / w
            ox = pad + c * (cell + pad)
            oy = pad + r * (cell + pad)
            for i in range(h):
                for j in range(w):
                    v = int(round(img[i, j] * 255))
                    parts.append(
                        f'<rect x="{ox + j * sx:.2f}" y="{oy + i * sy:.2f}" '
                        f'width="{sx:.2f}" height="{sy:.2f}" '
                        f'fill="rgb({v},{v},{v})"/>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts))
