"""Training penalties and the linear smoothing operators behind them.

Four penalty kinds are supported on top of plain cross-entropy training:

* ``linf_depthwise`` - sum over channels of the max kernel magnitude of an
  inserted depthwise filter bank, pushing its taps toward a flat blur.
* ``tv`` - mean total variation of the first-layer feature maps.
* ``tik_hf`` - mean L2 norm of the maps after a high-frequency extractor
  ``I - L_avg`` is applied along the height axis.
* ``tik_pseudo`` - mean L2 norm of the maps weighted by the Moore-Penrose
  pseudoinverse of a forward-difference matrix (a smoothing operator),
  applied elementwise by default or along the height axis in matrix mode.

Operators are deterministic pure functions of (n, window) and cached; the
pseudoinverse is computed from the normal equations with a tiny jitter and
validated in the test suite against the Penrose identities.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .graph import Graph, Node
from .tensor import Tensor, to_array

KINDS = ("none", "linf_depthwise", "tv", "tik_hf", "tik_pseudo")


class RegularizerError(ValueError):
    pass


@dataclass(frozen=True)
class LinearOperator:
    matrix: Tensor
    tag: str  # avg | hf | diff | diff_pseudo


@dataclass
class RegularizerSpec:
    kind: str = "none"
    alpha: float = 0.0
    avg_window: int = 3
    tik_mode: str | None = None  # None -> kind-appropriate default

    def __post_init__(self):
        if self.kind not in KINDS:
            raise RegularizerError(f"unknown regularizer kind {self.kind!r}")
        if self.alpha < 0:
            raise RegularizerError("alpha must be nonnegative")
        if self.avg_window < 3 or self.avg_window % 2 == 0:
            raise RegularizerError("avg_window must be odd and >= 3")
        if self.tik_mode not in (None, "matrix_rows", "elementwise"):
            raise RegularizerError(f"unknown tik_mode {self.tik_mode!r}")

    def resolved_mode(self) -> str:
        if self.tik_mode is not None:
            return self.tik_mode
        return "elementwise" if self.kind == "tik_pseudo" else "matrix_rows"

    def to_json(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha,
                "avg_window": self.avg_window, "tik_mode": self.tik_mode}

    @classmethod
    def from_json(cls, d: dict) -> "RegularizerSpec":
        return cls(kind=d.get("kind", "none"), alpha=float(d.get("alpha", 0.0)),
                   avg_window=int(d.get("avg_window", 3)),
                   tik_mode=d.get("tik_mode"))


# ---------------------------------------------------------------------------
# operator construction (cached by arguments, exclusive insertion)

_cache: dict = {}
_cache_lock = threading.Lock()


def _cached(key, build):
    got = _cache.get(key)
    if got is None:
        with _cache_lock:
            got = _cache.get(key)
            if got is None:
                got = build()
                got.flags.writeable = False
                _cache[key] = got
    return got


def _check_window(n, window):
    if window % 2 == 0:
        raise RegularizerError(f"window must be odd, got {window}")
    if window > n:
        raise RegularizerError(f"window {window} exceeds dimension {n}")


def build_avg_operator(n: int, window: int) -> LinearOperator:
    """Row-stochastic moving average, truncated and renormalized at the ends."""
    _check_window(n, window)

    def make():
        half = window // 2
        m = np.zeros((n, n))
        for i in range(n):
            lo, hi = max(0, i - half), min(n, i + half + 1)
            m[i, lo:hi] = 1.0 / (hi - lo)
        return m

    return LinearOperator(Tensor.wrap(_cached(("avg", n, window), make)), "avg")


def build_hf_operator(n: int, window: int) -> LinearOperator:
    """High-frequency extractor: identity minus the moving average."""
    _check_window(n, window)

    def make():
        return np.eye(n) - build_avg_operator(n, window).matrix.array

    return LinearOperator(Tensor.wrap(_cached(("hf", n, window), make)), "hf")


def build_diff_matrix(n: int) -> LinearOperator:
    if n < 2:
        raise RegularizerError("difference matrix needs n >= 2")

    def make():
        m = np.zeros((n - 1, n))
        idx = np.arange(n - 1)
        m[idx, idx] = -1.0
        m[idx, idx + 1] = 1.0
        return m

    return LinearOperator(Tensor.wrap(_cached(("diff", n), make)), "diff")


def build_diff_pseudoinverse(n: int) -> LinearOperator:
    """Moore-Penrose pseudoinverse of the forward-difference matrix.

    The difference matrix has full row rank, so the pseudoinverse is
    L^T (L L^T)^-1; a 1e-12 jitter keeps the small Gram solve stable.
    """
    if n < 2:
        raise RegularizerError("pseudoinverse needs n >= 2")

    def make():
        ld = build_diff_matrix(n).matrix.array
        gram = ld @ ld.T + 1e-12 * np.eye(n - 1)
        return ld.T @ np.linalg.solve(gram, np.eye(n - 1))

    return LinearOperator(Tensor.wrap(_cached(("diff_pseudo", n), make)), "diff_pseudo")


def _fit_matrix(m: np.ndarray, h: int, w: int) -> np.ndarray:
    """Crop/zero-pad a matrix to exactly h x w (for elementwise application)."""
    out = np.zeros((h, w))
    hh, ww = min(h, m.shape[0]), min(w, m.shape[1])
    out[:hh, :ww] = m[:hh, :ww]
    return out


def operator_for_maps(kind: str, mode: str, h: int, w: int,
                      window: int) -> tuple[np.ndarray, str]:
    """Concrete operator matrix for H x W feature maps plus how to apply it.

    Returns (matrix, apply) with apply one of "matrix_rows" (multiply along
    the height axis) or "elementwise" (Hadamard against each map). In matrix
    mode the pseudoinverse is built one size up so its column count matches
    the map height.
    """
    if kind == "tik_hf":
        base = build_hf_operator(h, window).matrix.array
    elif kind == "tik_pseudo":
        if mode == "matrix_rows":
            return build_diff_pseudoinverse(h + 1).matrix.array, mode
        base = build_diff_pseudoinverse(h).matrix.array
    else:
        raise RegularizerError(f"no operator for kind {kind!r}")
    if mode == "matrix_rows":
        return base, mode
    return _fit_matrix(base, h, w), "elementwise"


# ---------------------------------------------------------------------------
# penalty evaluation (pure, numpy)

def linf_depthwise_penalty(weights) -> float:
    """Sum over channels of max |W[:, :, c]|."""
    w = to_array(weights)
    if w.ndim != 3:
        raise RegularizerError("filter-bank weights must be KhKwC")
    return float(np.abs(w).reshape(-1, w.shape[2]).max(axis=0).sum())


def tv(feature_map) -> float:
    """Anisotropic total variation with boundary terms omitted."""
    m = to_array(feature_map)
    if m.ndim != 2:
        raise RegularizerError("tv expects a single H x W map")
    return float(np.abs(np.diff(m, axis=0)).sum() + np.abs(np.diff(m, axis=1)).sum())


def tv_batch_penalty(features) -> float:
    """Mean per-map total variation over a batch of NHWK activations."""
    f = to_array(features)
    if f.ndim != 4:
        raise RegularizerError("tv_batch_penalty expects NHWK features")
    total = (np.abs(np.diff(f, axis=1)).sum() + np.abs(np.diff(f, axis=2)).sum())
    return float(total / (f.shape[0] * f.shape[3]))


def _apply_operator(maps: np.ndarray, matrix: np.ndarray, mode: str) -> np.ndarray:
    if mode == "matrix_rows":
        if matrix.shape[1] != maps.shape[1]:
            raise RegularizerError(
                f"operator wants height {matrix.shape[1]}, maps have {maps.shape[1]}")
        return np.einsum("rh,nhwk->nrwk", matrix, maps, optimize=True)
    if mode == "elementwise":
        if matrix.shape != maps.shape[1:3]:
            raise RegularizerError(
                f"elementwise operator {matrix.shape} vs maps {maps.shape[1:3]}")
        return maps * matrix[None, :, :, None]
    raise RegularizerError(f"unknown application mode {mode!r}")


def tik_penalty(features, op: LinearOperator, mode: str = "matrix_rows") -> float:
    """Mean over maps of the Frobenius norm of the transformed map."""
    f = to_array(features)
    if f.ndim != 4:
        raise RegularizerError("tik_penalty expects NHWK features")
    t = _apply_operator(f, op.matrix.array, mode)
    norms = np.sqrt((t * t).sum(axis=(1, 2)))
    return float(norms.sum() / (f.shape[0] * f.shape[3]))


def penalty_value(spec: RegularizerSpec, features=None, bank_weights=None) -> float:
    """Unweighted penalty for a spec (the term alpha multiplies)."""
    if spec.kind == "none":
        return 0.0
    if spec.kind == "linf_depthwise":
        if bank_weights is None:
            raise RegularizerError("linf_depthwise needs the filter-bank weights")
        return linf_depthwise_penalty(bank_weights)
    f = to_array(features)
    if spec.kind == "tv":
        return tv_batch_penalty(f)
    mode = spec.resolved_mode()
    matrix, mode = operator_for_maps(spec.kind, mode, f.shape[1], f.shape[2],
                                     spec.avg_window)
    return tik_penalty(f, LinearOperator(Tensor.wrap(matrix), spec.kind), mode)


# ---------------------------------------------------------------------------
# graph attachment (used by the trainer and by adaptive attacks)

def attach_penalty(g: Graph, spec: RegularizerSpec, features: Node | None = None,
                   bank: Node | None = None, weight: float | None = None,
                   map_hw: tuple[int, int] | None = None) -> Node | None:
    """Add the penalty subgraph scaled by ``weight`` (defaults to spec.alpha).

    Returns the scaled penalty node, or None for kind "none" / zero weight.
    Feature penalties carry the 1/(N*K) averaging; the depthwise one does not.
    """
    w = spec.alpha if weight is None else weight
    if spec.kind == "none" or w == 0.0:
        return None
    if spec.kind == "linf_depthwise":
        if bank is None:
            raise RegularizerError("linf_depthwise penalty needs the filter-bank node")
        node = g.apply("linf_channels", bank)
    elif spec.kind == "tv":
        if features is None:
            raise RegularizerError("tv penalty needs the feature-map node")
        node = g.apply("tv_maps", features, normalize=True)
    else:
        if features is None or map_hw is None:
            raise RegularizerError("tik penalties need features and their H, W")
        h, wdt = map_hw
        matrix, mode = operator_for_maps(spec.kind, spec.resolved_mode(), h, wdt,
                                         spec.avg_window)
        m = g.const(matrix)
        if mode == "matrix_rows":
            t = g.apply("op_matmul", features, m, axis=1)
        else:
            t = g.apply("mul", features, m)
        node = g.apply("sum_l2norms", t, axes=(1, 2), normalize=True)
    return g.apply("scale", node, c=float(w))
