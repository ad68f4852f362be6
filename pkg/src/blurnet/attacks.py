"""Masked sticker attacks, PGD, and the defense-aware adaptive variants.

The sticker family optimizes a per-image additive perturbation, gated by a
binary mask, with ADAM against a Lagrangian objective: a weighted L1/L2 norm
of the masked perturbation, a non-printability score over the sticker's
quantized colors, and the targeted cross-entropy of the victim model. The
low-frequency variant routes the masked perturbation through a DCT band
projector before placement; the adaptive variant adds the defended model's
own training penalty (evaluated on its first-layer maps) to the loss.

PGD is the usual untargeted L-infinity ascent with a seeded random start.
All attacks are deterministic for a fixed seed and batch their image set
into a single graph evaluation per step.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import Graph, adam_init, adam_step
from .model import TrainedModel, stack_network
from .regularizers import RegularizerSpec, attach_penalty
from .spectral import dct_matrix
from .tensor import to_array


class AttackError(ValueError):
    pass


RP2_FAMILIES = ("rp2", "rp2_lowfreq", "rp2_adaptive")


@dataclass(frozen=True)
class Mask:
    values: np.ndarray  # H x W in {0, 1}

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise AttackError("mask must be H x W")
        if not np.all((v == 0.0) | (v == 1.0)):
            raise AttackError("mask entries must be binary")
        if v.sum() == 0:
            raise AttackError("mask must have nonzero area")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class AttackConfig:
    family: str = "rp2"
    target: int | None = None
    lam: float = 0.002
    norm_p: int = 2
    steps: int = 300
    lr: float = 0.05
    eps: float = 8.0 / 255.0          # pgd budget
    alpha: float = 0.01               # pgd step size
    printable_colors: tuple | None = None   # None -> the 27-point lattice
    dct_dim: int | None = None
    adaptive_regularizer: RegularizerSpec | None = None
    random_init: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.family not in RP2_FAMILIES + ("pgd",):
            raise AttackError(f"unknown attack family {self.family!r}")
        if self.steps < 1:
            raise AttackError("steps must be >= 1")
        if self.norm_p not in (1, 2):
            raise AttackError("norm p must be 1 or 2")
        if self.lam < 0:
            raise AttackError("lambda must be nonnegative")

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "family", "target", "lam", "norm_p", "steps", "lr", "eps", "alpha",
            "dct_dim", "random_init", "seed")}
        d["printable_colors"] = (None if self.printable_colors is None
                                 else [list(c) for c in self.printable_colors])
        d["adaptive_regularizer"] = (self.adaptive_regularizer.to_json()
                                     if self.adaptive_regularizer else None)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        pc = d.get("printable_colors")
        d["printable_colors"] = None if pc is None else tuple(tuple(c) for c in pc)
        ar = d.get("adaptive_regularizer")
        d["adaptive_regularizer"] = RegularizerSpec.from_json(ar) if ar else None
        return cls(**d)


@dataclass
class AttackResult:
    adversarial: np.ndarray            # N x H x W x 3, clipped to [0, 1]
    pre_labels: np.ndarray
    post_labels: np.ndarray
    pre_target_prob: np.ndarray
    post_target_prob: np.ndarray
    lp_dissim: np.ndarray              # per-image |x - adv|_p / |x|_p
    loss_trace: np.ndarray             # (steps + 1) x N per-image objectives
    config: AttackConfig
    nps_final: np.ndarray | None = None

    def targeted_success(self) -> np.ndarray:
        if self.config.target is None:
            raise AttackError("untargeted attack has no target")
        return self.post_labels == self.config.target

    def untargeted_success(self) -> np.ndarray:
        return self.post_labels != self.pre_labels


# ---------------------------------------------------------------------------
# non-printability score

def _lattice27() -> tuple:
    pts = (0.0, 0.5, 1.0)
    return tuple(itertools.product(pts, pts, pts))


def nps(delta_colors, printable) -> float:
    """Sum over used colors of the product of distances to each printable one."""
    pal = [np.asarray(p, dtype=np.float64) for p in set(tuple(c) for c in printable)]
    if not pal:
        raise AttackError("printable color set must be nonempty")
    used = set(tuple(np.asarray(c, dtype=np.float64)) for c in delta_colors)
    total = 0.0
    for c in used:
        c = np.asarray(c)
        prod = 1.0
        for p in pal:
            prod *= float(np.linalg.norm(c - p))
            if prod == 0.0:
                break
        total += prod
    return total


def quantize_colors(pixels: np.ndarray) -> set:
    """Unique colors after snapping each channel to {0, 0.5, 1}."""
    q = np.round(np.clip(pixels, 0.0, 1.0) * 2.0) / 2.0
    return set(map(tuple, q.reshape(-1, 3)))


def _nps_per_image(adv: np.ndarray, mask3: np.ndarray, palette) -> np.ndarray:
    out = np.zeros(adv.shape[0])
    for i in range(adv.shape[0]):
        region = adv[i][mask3[i, :, :, 0] > 0]
        out[i] = nps(quantize_colors(region), palette)
    return out


# ---------------------------------------------------------------------------
# DCT band mask

def dct_mask(h: int, w: int, dim: int) -> np.ndarray:
    """Binary mask keeping the top-left dim x dim block of DCT coefficients."""
    if dim < 1 or dim > min(h, w):
        raise AttackError(f"dct dim {dim} out of range for {h}x{w}")
    m = np.zeros((h, w))
    m[:dim, :dim] = 1.0
    return m


# ---------------------------------------------------------------------------
# helpers

def _prep_batch(model, images, mask):
    x = to_array(images)
    if x.ndim == 3:
        x = x[None]
    s = model.spec.input_size
    if x.shape[1:] != (s, s, 3):
        raise AttackError(f"images must be (N, {s}, {s}, 3), got {x.shape}")
    mv = mask.values if isinstance(mask, Mask) else np.asarray(mask, dtype=np.float64)
    if mv.ndim == 2:
        Mask(mv)  # validate
        m3 = np.broadcast_to(mv[None, :, :, None], x.shape).copy()
    elif mv.ndim == 3 and mv.shape[0] == x.shape[0]:
        for row in mv:
            Mask(row)
        m3 = np.broadcast_to(mv[:, :, :, None], x.shape).copy()
    else:
        raise AttackError(f"mask shape {mv.shape} does not fit images {x.shape}")
    if m3.shape[1:3] != x.shape[1:3]:
        raise AttackError("mask spatial size mismatch")
    return x, m3


def _per_image_ce(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
    return lse - logits[np.arange(logits.shape[0]), targets]


def _probs(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def lp_dissim(x: np.ndarray, adv: np.ndarray, p: int = 2) -> np.ndarray:
    xf = x.reshape(x.shape[0], -1)
    af = adv.reshape(adv.shape[0], -1)
    num = np.linalg.norm(af - xf, ord=p, axis=1)
    den = np.linalg.norm(xf, ord=p, axis=1)
    if np.any(den == 0):
        raise AttackError("natural image with zero norm")
    return num / den


# ---------------------------------------------------------------------------
# the sticker family

def _rp2_run(model: TrainedModel, images, mask, cfg: AttackConfig, *,
             band_dim: int | None, adaptive: RegularizerSpec | None,
             with_nps: bool) -> AttackResult:
    if cfg.target is None:
        raise AttackError("sticker attacks are targeted; set cfg.target")
    if not 0 <= cfg.target < model.spec.n_classes:
        raise AttackError(f"target {cfg.target} out of range")
    x, m3 = _prep_batch(model, images, mask)
    n, h, w, _ = x.shape

    g = Graph()
    delta = g.input("delta")
    mnode = g.data("mask")
    xnode = g.data("images")
    ynode = g.data("targets")
    masked = g.apply("mul", delta, mnode, name="masked")
    eff = masked
    if band_dim is not None:
        if band_dim < 1 or band_dim > min(h, w):
            raise AttackError(f"dct dim {band_dim} out of range")
        th = g.const(dct_matrix(h))
        tw = g.const(dct_matrix(w))
        spec_h = g.apply("op_matmul", eff, th, axis=1)
        spec_hw = g.apply("op_matmul", spec_h, tw, axis=2)
        band = g.apply("mul", spec_hw, g.const(dct_mask(h, w, band_dim)))
        back_h = g.apply("op_matmul", band, g.const(dct_matrix(h).T), axis=1)
        low = g.apply("op_matmul", back_h, g.const(dct_matrix(w).T), axis=2,
                      name="band_limited")
        eff = g.apply("mul", low, mnode, name="effective")
    placed = g.apply("add", xnode, eff)
    # optimize the image that will actually be returned: clipped to [0, 1]
    adv_node = g.apply("clip01", placed, name="adv")
    nodes = stack_network(g, adv_node, model.spec, model.param_arrays(),
                          trainable=False)
    if cfg.norm_p == 2:
        norm = g.apply("sum_l2norms", masked, axes=(1, 2, 3), name="norm_term")
    else:
        norm = g.apply("sum", g.apply("abs", masked), name="norm_term")
    ce = g.apply("softmax_xent", nodes["logits"], ynode, reduction="sum", name="ce")
    loss = g.apply("add", g.apply("scale", norm, c=cfg.lam), ce)
    if adaptive is not None:
        pen = attach_penalty(g, adaptive, features=nodes["features1"],
                             map_hw=model.spec.feature_hw, weight=1.0)
        loss = g.apply("add", loss, pen)
    loss = g.apply("scale", loss, c=1.0, name="loss")
    g.set_loss(loss)

    targets = np.full(n, cfg.target, dtype=np.int64)
    palette = cfg.printable_colors if cfg.printable_colors is not None else _lattice27()
    nps_active = with_nps and cfg.printable_colors is not None

    rng = np.random.default_rng(cfg.seed)
    if cfg.random_init:
        dval = rng.uniform(-0.1, 0.1, size=x.shape) * m3
    else:
        dval = np.zeros_like(x)

    params = {"delta": dval}
    state = adam_init(params)
    bindings = {"mask": m3, "images": x, "targets": targets}
    trace = np.zeros((cfg.steps + 1, n))

    def per_image_objective(vals):
        named = g.named_values(vals)
        ce_i = _per_image_ce(named["logits"], targets)
        md = named["masked"]
        if cfg.norm_p == 2:
            norms = np.sqrt((md * md).sum(axis=(1, 2, 3)))
        else:
            norms = np.abs(md).sum(axis=(1, 2, 3))
        obj = cfg.lam * norms + ce_i
        if nps_active:
            adv_now = np.clip(named["adv"], 0.0, 1.0)
            obj = obj + _nps_per_image(adv_now, m3, palette)
        return obj

    vals = None
    for step in range(cfg.steps):
        bindings["delta"] = params["delta"]
        vals = g.run(bindings, check="loss")
        trace[step] = per_image_objective(vals)
        grads = g.gradients(vals)
        params, state = adam_step(params, {"delta": grads["delta"]}, state, cfg.lr)

    bindings["delta"] = params["delta"]
    vals = g.run(bindings, check="loss")
    trace[cfg.steps] = per_image_objective(vals)
    named = g.named_values(vals)
    eff_final = named["effective"] if band_dim is not None else named["masked"]
    adv_img = np.clip(x + eff_final, 0.0, 1.0)
    # pixels outside the mask must be bit-exact copies of the input
    outside = m3 == 0.0
    adv_img[outside] = x[outside]

    pre_labels, pre_probs = model.predict(x)
    post_labels, post_probs = model.predict(adv_img)
    return AttackResult(
        adversarial=adv_img,
        pre_labels=pre_labels, post_labels=post_labels,
        pre_target_prob=pre_probs[:, cfg.target],
        post_target_prob=post_probs[:, cfg.target],
        lp_dissim=lp_dissim(x, adv_img, cfg.norm_p),
        loss_trace=trace, config=cfg,
        nps_final=_nps_per_image(adv_img, m3, palette) if nps_active else None)


def rp2_attack(model, images, mask, cfg: AttackConfig) -> AttackResult:
    """Masked sticker optimization with the norm + NPS + targeted-CE objective."""
    return _rp2_run(model, images, mask, cfg, band_dim=None, adaptive=None,
                    with_nps=True)


def rp2_lowfreq_attack(model, images, mask, cfg: AttackConfig) -> AttackResult:
    """Sticker attack restricted to a low-frequency DCT band (NPS term dropped)."""
    if cfg.dct_dim is None:
        raise AttackError("rp2_lowfreq_attack needs cfg.dct_dim")
    return _rp2_run(model, images, mask, cfg, band_dim=cfg.dct_dim, adaptive=None,
                    with_nps=False)


def rp2_adaptive_attack(model, images, mask, cfg: AttackConfig) -> AttackResult:
    """Sticker attack whose loss adds the model's own training penalty.

    Defined for the three feature-map penalties; the extra term enters with
    unit weight (no extra coefficient) averaged over maps.
    """
    reg = cfg.adaptive_regularizer
    if reg is None or reg.kind not in ("tv", "tik_hf", "tik_pseudo"):
        raise AttackError("adaptive attack needs a tv/tik_hf/tik_pseudo regularizer")
    return _rp2_run(model, images, mask, cfg, band_dim=None, adaptive=reg,
                    with_nps=True)


# ---------------------------------------------------------------------------
# PGD

def pgd_attack(model: TrainedModel, images, eps: float = 8.0 / 255.0,
               alpha: float = 0.01, steps: int = 10, labels=None,
               seed: int = 0) -> AttackResult:
    """Untargeted L-infinity PGD with a seeded random start.

    Ascends the cross-entropy of ``labels`` (the model's own clean
    predictions when omitted); iterates are projected back into the
    eps-ball and [0, 1] after every step.
    """
    if steps < 1:
        raise AttackError("steps must be >= 1")
    if alpha <= 0:
        raise AttackError("alpha must be positive")
    if eps < 0:
        raise AttackError("eps must be nonnegative")
    x = to_array(images)
    if x.ndim == 3:
        x = x[None]
    pre_labels, pre_probs = model.predict(x)
    y = pre_labels if labels is None else np.asarray(labels, dtype=np.int64)

    g = Graph()
    xin = g.input("x")
    ynode = g.data("labels")
    nodes = stack_network(g, xin, model.spec, model.param_arrays(), trainable=False)
    loss = g.apply("softmax_xent", nodes["logits"], ynode, reduction="sum",
                   name="loss")
    g.set_loss(loss)

    rng = np.random.default_rng(seed)
    adv = x + rng.uniform(-eps, eps, size=x.shape)
    adv = np.clip(adv, 0.0, 1.0)
    for _ in range(steps):
        vals = g.run({"x": adv, "labels": y}, check="loss")
        grad = g.gradients(vals)["x"]
        adv = adv + alpha * np.sign(grad)
        adv = np.clip(adv, x - eps, x + eps)
        adv = np.clip(adv, 0.0, 1.0)

    post_labels, post_probs = model.predict(adv)
    idx = np.arange(x.shape[0])
    cfg = AttackConfig(family="pgd", eps=eps, alpha=alpha, steps=steps, seed=seed)
    return AttackResult(
        adversarial=adv, pre_labels=pre_labels, post_labels=post_labels,
        pre_target_prob=pre_probs[idx, y], post_target_prob=post_probs[idx, y],
        lp_dissim=lp_dissim(x, adv, 2),
        loss_trace=np.zeros((1, x.shape[0])), config=cfg)


# ---------------------------------------------------------------------------
# hyperparameter sweep

_ATTACK_FN = {"rp2": rp2_attack, "rp2_lowfreq": rp2_lowfreq_attack,
              "rp2_adaptive": rp2_adaptive_attack}


@dataclass
class SweepSummary:
    per_target: dict                    # target -> best-over-lambda targeted ASR
    average_sr: float
    worst_sr: float
    untargeted_average: float
    untargeted_worst: float
    l2_dissim: float
    skipped_targets: list = field(default_factory=list)


@dataclass
class SweepResult:
    cells: dict                         # (lam, target) -> AttackResult
    summary: SweepSummary


def sweep(model: TrainedModel, images, masks, family: str, lam_grid,
          targets, base_cfg: AttackConfig | None = None,
          true_class: int | None = None, progress=None) -> SweepResult:
    """Run the attack family over a lambda x target grid and aggregate.

    Per-target success is the best (max) over the lambda grid; the summary's
    average is the mean over attacked targets and worst is their max. Targets
    equal to the images' true class are skipped and recorded.
    """
    if family not in _ATTACK_FN:
        raise AttackError(f"sweep supports {sorted(_ATTACK_FN)}, not {family!r}")
    lam_grid = list(lam_grid)
    targets = list(targets)
    if not lam_grid or not targets:
        raise AttackError("lambda grid and target set must be nonempty")
    x = to_array(images)
    if true_class is None:
        true_class = int(np.bincount(model.predict(x)[0]).argmax())
    cfg0 = base_cfg if base_cfg is not None else AttackConfig(family=family)

    cells, skipped = {}, []
    per_target, per_target_unt = {}, {}
    dissims = []
    for y in targets:
        if y == true_class:
            skipped.append(y)
            continue
        best_t, best_u = 0.0, 0.0
        for lam in lam_grid:
            cfg = replace(cfg0, family=family, target=int(y), lam=float(lam))
            res = _ATTACK_FN[family](model, x, masks, cfg)
            cells[(float(lam), int(y))] = res
            best_t = max(best_t, float(res.targeted_success().mean()))
            best_u = max(best_u, float(res.untargeted_success().mean()))
            dissims.append(res.lp_dissim.mean())
            if progress is not None:
                progress(lam, y, res)
        per_target[int(y)] = best_t
        per_target_unt[int(y)] = best_u
    if not per_target:
        raise AttackError("every requested target equals the true class")
    tvals = np.array(list(per_target.values()))
    uvals = np.array(list(per_target_unt.values()))
    summary = SweepSummary(
        per_target=per_target,
        average_sr=float(tvals.mean()), worst_sr=float(tvals.max()),
        untargeted_average=float(uvals.mean()), untargeted_worst=float(uvals.max()),
        l2_dissim=float(np.mean(dissims)), skipped_targets=skipped)
    return SweepResult(cells=cells, summary=summary)
