"""Experiment orchestration: metrics, report tables, caching, plots.

``run_experiment`` trains (or loads from the content-addressed cache) each
configured model, runs each attack sweep, and aggregates target-sweep
statistics into table rows mirroring the white-box/black-box/adaptive
evaluations: legitimate accuracy, average and worst targeted success rate
over the swept targets, untargeted rates, and mean relative L2 dissimilarity.

Everything emitted is recomputable from the persisted per-cell attack
results; reruns with an identical config hash reuse cached checkpoints and
adversarial tensors and produce byte-identical machine reports (the JSON
carries one ``generated_at`` field, excluded from that guarantee).
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks as atk
from . import data as datamod
from . import model as modelmod
from .attacks import AttackConfig
from .model import ModelSpec, TrainConfig, TrainedModel
from .tensor import read_tensor, save_tensor


class HarnessError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics

def accuracy(model: TrainedModel, images, labels) -> float:
    """Fraction of argmax-correct predictions."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise HarnessError("empty evaluation split")
    pred, _ = model.predict(images)
    return float((pred == labels).mean())


def attack_success_rate(pre_labels, post_labels, mode: str = "untargeted",
                        target: int | None = None) -> float:
    pre = np.asarray(pre_labels)
    post = np.asarray(post_labels)
    if pre.shape != post.shape:
        raise HarnessError("label lists must have equal length")
    if mode == "untargeted":
        return float((pre != post).mean())
    if mode == "targeted":
        if target is None:
            raise HarnessError("targeted mode needs a target")
        return float((post == target).mean())
    raise HarnessError(f"unknown mode {mode!r}")


def l2_dissimilarity(x, x_adv) -> float:
    """Mean over the batch of |x - x_adv|_2 / |x|_2 (images flattened)."""
    return float(atk.lp_dissim(np.asarray(x, dtype=np.float64),
                               np.asarray(x_adv, dtype=np.float64), 2).mean())


# ---------------------------------------------------------------------------
# report structure

_COLUMNS = ("model", "attack", "alpha", "legit_acc", "avg_sr", "worst_sr",
            "l2_dissim")


@dataclass
class ReportRow:
    model: str
    attack: str
    alpha: float | None
    legit_acc: float | None
    avg_sr: float | None
    worst_sr: float | None
    l2_dissim: float | None
    untargeted_avg: float | None = None
    untargeted_worst: float | None = None
    config_hash: str = ""
    per_target: dict = field(default_factory=dict)   # target -> {asr, l2}

    def __post_init__(self):
        for name in ("legit_acc", "avg_sr", "worst_sr", "untargeted_avg",
                     "untargeted_worst"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise HarnessError(f"{name} {v} outside [0, 1]")
        if self.avg_sr is not None and self.worst_sr is not None \
                and self.worst_sr < self.avg_sr - 1e-12:
            raise HarnessError("worst success rate must be >= average")

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in _COLUMNS}
        d["untargeted_avg"] = self.untargeted_avg
        d["untargeted_worst"] = self.untargeted_worst
        d["config_hash"] = self.config_hash
        d["per_target"] = {str(k): v for k, v in self.per_target.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ReportRow":
        d = dict(d)
        d["per_target"] = {int(k): v for k, v in d.get("per_target", {}).items()}
        return cls(**d)


@dataclass
class EvalReport:
    rows: list
    metadata: dict = field(default_factory=dict)

    def row(self, model: str, attack: str) -> ReportRow:
        for r in self.rows:
            if r.model == model and r.attack == attack:
                return r
        raise KeyError(f"no row for ({model}, {attack})")

    def to_json(self) -> dict:
        return {"rows": [r.to_json() for r in self.rows], "metadata": self.metadata}

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls(rows=[ReportRow.from_json(r) for r in d["rows"]],
                   metadata=d.get("metadata", {}))


# ---------------------------------------------------------------------------
# experiment configuration

def canonical_hash(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


@dataclass
class ModelBuild:
    model_id: str
    spec: ModelSpec = field(default_factory=ModelSpec)
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    base: str | None = None            # derive by inserting a fixed blur instead
    insert_blur: tuple | None = None   # (k, "input" | "after_layer1")

    def to_json(self) -> dict:
        return {"model_id": self.model_id, "spec": self.spec.to_json(),
                "train_cfg": self.train_cfg.to_json(), "base": self.base,
                "insert_blur": list(self.insert_blur) if self.insert_blur else None}

    @classmethod
    def from_json(cls, d: dict) -> "ModelBuild":
        ib = d.get("insert_blur")
        return cls(model_id=d["model_id"], spec=ModelSpec.from_json(d["spec"]),
                   train_cfg=TrainConfig.from_json(d["train_cfg"]),
                   base=d.get("base"), insert_blur=(int(ib[0]), ib[1]) if ib else None)


@dataclass
class SweepConfig:
    sweep_id: str
    family: str                        # rp2 | rp2_lowfreq | rp2_adaptive | pgd
    model_ids: list
    lam_grid: tuple = (0.002,)
    targets: str | list = "all"        # "all" -> every non-victim class
    steps: int = 300
    lr: float = 0.05
    dct_dim: int | None = None
    adaptive: bool = False             # use each model's training regularizer
    transfer_from: str | None = None   # craft on this model, evaluate on model_ids
    pgd_eps: float = 8.0 / 255.0
    pgd_alpha: float = 0.01
    pgd_steps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.family != "pgd" and 0.002 not in tuple(self.lam_grid):
            self.lam_grid = tuple(self.lam_grid) + (0.002,)
        self.lam_grid = tuple(self.lam_grid)

    def to_json(self) -> dict:
        return {"sweep_id": self.sweep_id, "family": self.family,
                "model_ids": list(self.model_ids), "lam_grid": list(self.lam_grid),
                "targets": self.targets, "steps": self.steps, "lr": self.lr,
                "dct_dim": self.dct_dim, "adaptive": self.adaptive,
                "transfer_from": self.transfer_from, "pgd_eps": self.pgd_eps,
                "pgd_alpha": self.pgd_alpha, "pgd_steps": self.pgd_steps,
                "seed": self.seed}

    @classmethod
    def from_json(cls, d: dict) -> "SweepConfig":
        d = dict(d)
        d["lam_grid"] = tuple(d.get("lam_grid", (0.002,)))
        d["model_ids"] = list(d["model_ids"])
        return cls(**d)


@dataclass
class ExperimentConfig:
    dataset: dict                      # {"synthetic": SynthSpec json} or {"path": dir}
    models: list
    sweeps: list
    out_dir: str = "out"
    seed: int = 0

    def __post_init__(self):
        ids = [m.model_id for m in self.models]
        if len(set(ids)) != len(ids):
            raise HarnessError("model ids must be unique")

    def to_json(self) -> dict:
        return {"dataset": self.dataset,
                "models": [m.to_json() for m in self.models],
                "sweeps": [s.to_json() for s in self.sweeps],
                "out_dir": self.out_dir, "seed": self.seed}

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        return cls(dataset=d["dataset"],
                   models=[ModelBuild.from_json(m) for m in d["models"]],
                   sweeps=[SweepConfig.from_json(s) for s in d["sweeps"]],
                   out_dir=d.get("out_dir", "out"), seed=int(d.get("seed", 0)))


def cache_dir(cfg: ExperimentConfig) -> str:
    env = os.environ.get("BLURNET_CACHE_DIR")
    return env if env else os.path.join(cfg.out_dir, "cache")


def _atomic_write(path: str, payload: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# experiment runner

def _load_dataset(cfg: ExperimentConfig) -> datamod.Dataset:
    if "synthetic" in cfg.dataset:
        return datamod.generate_synthetic(
            datamod.SynthSpec.from_json(cfg.dataset["synthetic"]))
    if "path" in cfg.dataset:
        return datamod.load_dataset(cfg.dataset["path"])
    raise HarnessError("dataset config needs 'synthetic' or 'path'")


def _build_models(cfg: ExperimentConfig, dataset, cache, log) -> dict:
    models: dict[str, TrainedModel] = {}
    hashes: dict[str, str] = {}
    for mb in cfg.models:
        if mb.base is not None:
            if mb.base not in models:
                raise HarnessError(f"{mb.model_id}: base model {mb.base!r} not built")
            if mb.insert_blur is None:
                raise HarnessError(f"{mb.model_id}: derived model needs insert_blur")
            k, loc = mb.insert_blur
            models[mb.model_id] = modelmod.insert_filter_bank(models[mb.base], k, loc)
            hashes[mb.model_id] = canonical_hash(
                {"base": hashes[mb.base], "blur": list(mb.insert_blur)})
            continue
        h = canonical_hash({"dataset": cfg.dataset, "spec": mb.spec.to_json(),
                            "train": mb.train_cfg.to_json(), "seed": cfg.seed})
        hashes[mb.model_id] = h
        ckpt = os.path.join(cache, "models", h)
        if os.path.isdir(ckpt):
            log(f"model {mb.model_id}: cached ({h[:12]})")
            models[mb.model_id] = modelmod.load_model(ckpt)
            continue
        log(f"model {mb.model_id}: training {mb.train_cfg.epochs} epochs")
        t0 = time.time()
        m = modelmod.build_classifier(mb.spec, seed=cfg.seed)
        m = modelmod.train(m, dataset, mb.train_cfg)
        log(f"model {mb.model_id}: trained in {time.time() - t0:.1f}s "
            f"(final loss {m.training_meta['final_loss']:.4f})")
        tmp = ckpt + ".tmp"
        modelmod.save_model(m, tmp)
        os.replace(tmp, ckpt)
        models[mb.model_id] = m
    return models, hashes


def _sweep_targets(sweep: SweepConfig, dataset) -> list:
    if sweep.targets == "all":
        return [t for t in range(dataset.n_classes) if t != dataset.victim_class]
    return list(sweep.targets)


def _cached_sweep(model, model_hash, images, masks, sweep, cache, log,
                  family_kwargs):
    """Run (or reload) one sticker-family sweep against one model."""
    key = canonical_hash({"model": model_hash, "sweep": sweep.to_json(),
                          **family_kwargs})
    cdir = os.path.join(cache, "attacks", key)
    targets = family_kwargs["targets"]
    base_cfg = AttackConfig(
        family=family_kwargs["family"], steps=sweep.steps, lr=sweep.lr,
        dct_dim=family_kwargs.get("dct_dim"),
        adaptive_regularizer=family_kwargs.get("adaptive_regularizer"),
        seed=sweep.seed)
    if os.path.isdir(cdir):
        log(f"sweep {sweep.sweep_id}: cached cells ({key[:12]})")
        cells = {}
        for lam in sweep.lam_grid:
            for y in targets:
                path = os.path.join(cdir, f"adv_{lam}_{y}.bnt")
                if not os.path.exists(path):
                    continue
                adv = read_tensor(path).array
                cells[(float(lam), int(y))] = _rescore(
                    model, images, adv, base_cfg, lam, y)
        return _summarize(cells, targets)
    result = atk.sweep(model, images, masks, family_kwargs["family"],
                       sweep.lam_grid, targets, base_cfg=base_cfg,
                       true_class=family_kwargs.get("true_class"),
                       progress=lambda lam, y, r: log(
                           f"  cell lam={lam} target={y}: "
                           f"targeted {r.targeted_success().mean():.3f}"))
    os.makedirs(cdir + ".tmp", exist_ok=True)
    for (lam, y), res in result.cells.items():
        save_tensor(res.adversarial, os.path.join(cdir + ".tmp", f"adv_{lam}_{y}.bnt"))
    with open(os.path.join(cdir + ".tmp", "summary.json"), "w") as f:
        json.dump({"per_target": {str(k): v for k, v in
                                  result.summary.per_target.items()}}, f)
    os.replace(cdir + ".tmp", cdir)
    return result


def _rescore(model, images, adv, base_cfg, lam, y):
    cfg = replace(base_cfg, target=int(y), lam=float(lam))
    pre_labels, pre_probs = model.predict(images)
    post_labels, post_probs = model.predict(adv)
    return atk.AttackResult(
        adversarial=adv, pre_labels=pre_labels, post_labels=post_labels,
        pre_target_prob=pre_probs[:, int(y)], post_target_prob=post_probs[:, int(y)],
        lp_dissim=atk.lp_dissim(np.asarray(images, dtype=np.float64), adv, 2),
        loss_trace=np.zeros((1, adv.shape[0])), config=cfg)


def _summarize(cells, targets) -> atk.SweepResult:
    per_target, per_unt, dissims = {}, {}, []
    for (lam, y), res in cells.items():
        t = float(res.targeted_success().mean())
        u = float(res.untargeted_success().mean())
        per_target[y] = max(per_target.get(y, 0.0), t)
        per_unt[y] = max(per_unt.get(y, 0.0), u)
        dissims.append(float(res.lp_dissim.mean()))
    tvals = np.array([per_target[y] for y in sorted(per_target)])
    uvals = np.array([per_unt[y] for y in sorted(per_unt)])
    summary = atk.SweepSummary(
        per_target=per_target, average_sr=float(tvals.mean()),
        worst_sr=float(tvals.max()), untargeted_average=float(uvals.mean()),
        untargeted_worst=float(uvals.max()), l2_dissim=float(np.mean(dissims)),
        skipped_targets=[t for t in targets if t not in per_target])
    return atk.SweepResult(cells=cells, summary=summary)


def run_experiment(cfg: ExperimentConfig, log=None) -> EvalReport:
    if log is None:
        log = lambda msg: None
    os.makedirs(cfg.out_dir, exist_ok=True)
    cache = cache_dir(cfg)
    os.makedirs(os.path.join(cache, "models"), exist_ok=True)
    os.makedirs(os.path.join(cache, "attacks"), exist_ok=True)

    dataset = _load_dataset(cfg)
    models, hashes = _build_models(cfg, dataset, cache, log)
    test_x, test_y = dataset.split("test")
    rows, errors = [], []

    for mid, m in models.items():
        rows.append(ReportRow(
            model=mid, attack="none",
            alpha=m.training_meta.get("regularizer", {}).get("alpha"),
            legit_acc=accuracy(m, test_x, test_y),
            avg_sr=None, worst_sr=None, l2_dissim=None,
            config_hash=hashes[mid]))

    atk_x = dataset.images[dataset.splits["attack_eval"]]
    atk_masks = (dataset.split_masks("attack_eval") if dataset.masks is not None
                 else None)

    for sweep_cfg in cfg.sweeps:
        try:
            rows.extend(_run_sweep(sweep_cfg, cfg, dataset, models, hashes,
                                   atk_x, atk_masks, test_x, test_y, cache, log))
        except Exception as exc:  # keep other rows alive, record the failure
            errors.append({"sweep": sweep_cfg.sweep_id, "error": str(exc)})
            log(f"sweep {sweep_cfg.sweep_id} FAILED: {exc}")

    meta = {
        "config": cfg.to_json(),
        "config_hash": canonical_hash(cfg.to_json()),
        "seed": cfg.seed,
        "errors": errors,
        "model_hashes": hashes,
    }
    return EvalReport(rows=rows, metadata=meta)


def _run_sweep(sweep_cfg, cfg, dataset, models, hashes, atk_x, atk_masks,
               test_x, test_y, cache, log):
    rows = []
    if sweep_cfg.family == "pgd":
        for mid in sweep_cfg.model_ids:
            m = models[mid]
            res = atk.pgd_attack(m, test_x, eps=sweep_cfg.pgd_eps,
                                 alpha=sweep_cfg.pgd_alpha,
                                 steps=sweep_cfg.pgd_steps, seed=sweep_cfg.seed)
            asr = float(res.untargeted_success().mean())
            log(f"sweep {sweep_cfg.sweep_id} [{mid}]: pgd ASR {asr:.3f}")
            rows.append(ReportRow(
                model=mid, attack=sweep_cfg.sweep_id,
                alpha=m.training_meta.get("regularizer", {}).get("alpha"),
                legit_acc=accuracy(m, test_x, test_y),
                avg_sr=asr, worst_sr=asr,
                l2_dissim=float(res.lp_dissim.mean()),
                untargeted_avg=asr, untargeted_worst=asr,
                config_hash=canonical_hash(sweep_cfg.to_json())))
        return rows

    if atk_masks is None:
        raise HarnessError("sticker sweeps need dataset masks")
    targets = _sweep_targets(sweep_cfg, dataset)
    victim = dataset.victim_class
    targets = [t for t in targets if t != victim]

    if sweep_cfg.transfer_from is not None:
        src = models[sweep_cfg.transfer_from]
        result = _cached_sweep(
            src, hashes[sweep_cfg.transfer_from], atk_x, atk_masks, sweep_cfg,
            cache, log, {"family": sweep_cfg.family, "targets": targets,
                         "true_class": victim})
        for mid in sweep_cfg.model_ids:
            m = models[mid]
            pre_labels, _ = m.predict(atk_x)
            per_t, per_u, dissims, per_detail = {}, {}, [], {}
            for (lam, y), res in result.cells.items():
                post, _ = m.predict(res.adversarial)
                t = float((post == y).mean())
                u = float((post != pre_labels).mean())
                per_t[y] = max(per_t.get(y, 0.0), t)
                per_u[y] = max(per_u.get(y, 0.0), u)
                d = float(res.lp_dissim.mean())
                dissims.append(d)
                per_detail[y] = {"asr": per_t[y], "l2": d}
            tvals = np.array([per_t[y] for y in sorted(per_t)])
            uvals = np.array([per_u[y] for y in sorted(per_u)])
            log(f"sweep {sweep_cfg.sweep_id} [{mid}]: transfer avg "
                f"{tvals.mean():.3f} worst {tvals.max():.3f}")
            rows.append(ReportRow(
                model=mid, attack=sweep_cfg.sweep_id,
                alpha=m.training_meta.get("regularizer", {}).get("alpha"),
                legit_acc=accuracy(m, atk_x,
                                   np.full(atk_x.shape[0], victim)),
                avg_sr=float(tvals.mean()), worst_sr=float(tvals.max()),
                l2_dissim=float(np.mean(dissims)),
                untargeted_avg=float(uvals.mean()),
                untargeted_worst=float(uvals.max()),
                config_hash=canonical_hash(sweep_cfg.to_json()),
                per_target=per_detail))
        return rows

    for mid in sweep_cfg.model_ids:
        m = models[mid]
        fam_kwargs = {"family": sweep_cfg.family, "targets": targets,
                      "true_class": victim}
        if sweep_cfg.family == "rp2_lowfreq":
            fam_kwargs["dct_dim"] = sweep_cfg.dct_dim
        if sweep_cfg.family == "rp2_adaptive" or sweep_cfg.adaptive:
            reg = m.training_meta.get("regularizer")
            if not reg or reg.get("kind") not in ("tv", "tik_hf", "tik_pseudo"):
                raise HarnessError(
                    f"{mid}: adaptive sweep needs a tv/tik-trained model")
            from .regularizers import RegularizerSpec
            fam_kwargs["adaptive_regularizer"] = RegularizerSpec.from_json(reg)
            fam_kwargs["family"] = "rp2_adaptive"
        result = _cached_sweep(m, hashes[mid], atk_x, atk_masks, sweep_cfg,
                               cache, log, fam_kwargs)
        s = result.summary
        per_detail = {}
        for y, asr in s.per_target.items():
            best = max((res for (lam, yy), res in result.cells.items() if yy == y),
                       key=lambda r: r.targeted_success().mean())
            per_detail[y] = {"asr": asr, "l2": float(best.lp_dissim.mean())}
        log(f"sweep {sweep_cfg.sweep_id} [{mid}]: avg {s.average_sr:.3f} "
            f"worst {s.worst_sr:.3f} l2 {s.l2_dissim:.3f}")
        rows.append(ReportRow(
            model=mid, attack=sweep_cfg.sweep_id,
            alpha=m.training_meta.get("regularizer", {}).get("alpha"),
            legit_acc=accuracy(m, test_x, test_y),
            avg_sr=s.average_sr, worst_sr=s.worst_sr, l2_dissim=s.l2_dissim,
            untargeted_avg=s.untargeted_average,
            untargeted_worst=s.untargeted_worst,
            config_hash=canonical_hash(sweep_cfg.to_json()),
            per_target=per_detail))
    return rows


# ---------------------------------------------------------------------------
# emission

def _fmt(v, pct=False):
    if v is None:
        return ""
    if pct:
        return f"{v * 100:.2f}%"
    return repr(float(v))


def emit_report(report: EvalReport, fmt: str, path: str) -> str:
    """Write the report in csv, json, or markdown-table form; returns path."""
    if not report.rows:
        raise HarnessError("refusing to emit an empty report")
    if fmt == "csv":
        lines = [",".join(_COLUMNS)]
        for r in report.rows:
            lines.append(",".join([
                r.model, r.attack, _fmt(r.alpha), _fmt(r.legit_acc),
                _fmt(r.avg_sr), _fmt(r.worst_sr), _fmt(r.l2_dissim)]))
        _atomic_write(path, ("\n".join(lines) + "\n").encode())
    elif fmt == "json":
        d = report.to_json()
        d["generated_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        _atomic_write(path, (json.dumps(d, indent=1, sort_keys=True) + "\n").encode())
    elif fmt == "markdown":
        head = ("| Model | Attack | alpha | Legitimate Acc. | Average Success Rate "
                "| Worst Success Rate | L2 Dissimilarity |")
        sep = "|" + "---|" * 7
        lines = [head, sep]
        for r in report.rows:
            lines.append("| " + " | ".join([
                r.model, r.attack, _fmt(r.alpha), _fmt(r.legit_acc, pct=True),
                _fmt(r.avg_sr, pct=True), _fmt(r.worst_sr, pct=True),
                _fmt(r.l2_dissim)]) + " |")
        _atomic_write(path, ("\n".join(lines) + "\n").encode())
    else:
        raise HarnessError(f"unknown report format {fmt!r}")
    return path


_SCATTER_COLORS = ("#2980b9", "#e74c3c", "#27ae60", "#8e44ad", "#f39c12",
                   "#16a085", "#c0392b", "#7f8c8d", "#2c3e50", "#d35400")


def emit_scatter(report: EvalReport, path: str, attack_filter=None) -> str:
    """SVG scatter of per-target (L2 dissimilarity, targeted ASR) by model."""
    points = []  # (model, x, y)
    for r in report.rows:
        if attack_filter is not None and r.attack != attack_filter:
            continue
        for y, d in r.per_target.items():
            points.append((f"{r.model}:{r.attack}", d["l2"], d["asr"]))
    if not points:
        raise HarnessError("no per-target points to plot")
    groups = sorted(set(p[0] for p in points))
    xs = [p[1] for p in points]
    ys = [p[2] for p in points]
    xmin, xmax = min(xs), max(xs)
    ymin, ymax = min(ys), max(ys)
    xpad = (xmax - xmin) * 0.05 or 0.05
    ypad = (ymax - ymin) * 0.05 or 0.05
    xmin, xmax = xmin - xpad, xmax + xpad
    ymin, ymax = ymin - ypad, ymax + ypad
    w, h, ml, mb = 640, 440, 70, 50

    def sx(v):
        return ml + (v - xmin) / (xmax - xmin) * (w - ml - 20)

    def sy(v):
        return (h - mb) - (v - ymin) / (ymax - ymin) * (h - mb - 20)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
             f'viewBox="0 0 {w} {h}">',
             f'<rect width="{w}" height="{h}" fill="white"/>',
             f'<line x1="{ml}" y1="{h - mb}" x2="{w - 20}" y2="{h - mb}" '
             'stroke="black"/>',
             f'<line x1="{ml}" y1="20" x2="{ml}" y2="{h - mb}" stroke="black"/>',
             f'<text x="{(w + ml) / 2}" y="{h - 12}" text-anchor="middle" '
             'font-size="13">L2 dissimilarity</text>',
             f'<text x="16" y="{(h - mb) / 2}" font-size="13" '
             f'transform="rotate(-90 16 {(h - mb) / 2})" text-anchor="middle">'
             'targeted attack success rate</text>']
    for i, gname in enumerate(groups):
        color = _SCATTER_COLORS[i % len(_SCATTER_COLORS)]
        for model, x, y in points:
            if model == gname:
                parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="4" '
                             f'fill="{color}" fill-opacity="0.8"/>')
        parts.append(f'<rect x="{w - 190}" y="{24 + 18 * i}" width="10" '
                     f'height="10" fill="{color}"/>')
        parts.append(f'<text x="{w - 176}" y="{33 + 18 * i}" font-size="11">'
                     f'{gname}</text>')
    parts.append("</svg>")
    _atomic_write(path, "\n".join(parts).encode())
    return path
