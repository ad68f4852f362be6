"""Command-line front end.

Subcommands: gen-data, train, attack, eval, spectrum, report, run.
Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import attacks as atk
from . import data as datamod
from . import harness
from . import model as modelmod
from . import spectral
from .attacks import AttackConfig
from .data import SynthSpec
from .model import ModelSpec, TrainConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigError(ValueError):
    pass


def _load_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _cmd_gen_data(args):
    cfg = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        cfg["seed"] = args.seed
    for key in ("n_classes", "train_per_class", "test_per_class",
                "attack_eval_count"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    spec = SynthSpec.from_json(cfg) if cfg else SynthSpec()
    ds = datamod.generate_synthetic(spec)
    datamod.save_dataset(ds, args.out)
    print(f"wrote {ds.images.shape[0]} images across {ds.n_classes} classes "
          f"to {args.out}")
    return EXIT_OK


def _cmd_train(args):
    cfg = _load_json(args.config) if args.config else {}
    ds = datamod.load_dataset(args.data)
    spec = (ModelSpec.from_json(cfg["spec"]) if "spec" in cfg
            else ModelSpec(n_classes=ds.n_classes))
    tc = TrainConfig.from_json(cfg["train"]) if "train" in cfg else TrainConfig()
    if args.epochs is not None:
        from dataclasses import replace
        tc = replace(tc, epochs=args.epochs)
    if args.seed is not None:
        from dataclasses import replace
        tc = replace(tc, seed=args.seed)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    m = modelmod.build_classifier(spec, seed=seed)
    m = modelmod.train(m, ds, tc)
    modelmod.save_model(m, args.out)
    xt, yt = ds.split("test") if "test" in ds.splits else ds.split("train")
    print(f"trained {tc.epochs} epochs; accuracy "
          f"{harness.accuracy(m, xt, yt):.4f}; checkpoint at {args.out}")
    return EXIT_OK


def _cmd_attack(args):
    m = modelmod.load_model(args.model)
    ds = datamod.load_dataset(args.data)
    split = "attack_eval" if "attack_eval" in ds.splits else "train"
    x = ds.images[ds.splits[split]]
    if ds.masks is None:
        raise ConfigError("dataset has no masks; sticker attacks need them")
    masks = ds.masks[ds.splits[split]]
    cfg_json = _load_json(args.config) if args.config else {}
    if args.target is not None:
        cfg_json["target"] = args.target
    if args.family:
        cfg_json["family"] = args.family
    if args.seed is not None:
        cfg_json["seed"] = args.seed
    cfg = AttackConfig.from_json({"family": "rp2", **cfg_json})
    fn = {"rp2": atk.rp2_attack, "rp2_lowfreq": atk.rp2_lowfreq_attack,
          "rp2_adaptive": atk.rp2_adaptive_attack}
    if cfg.family == "pgd":
        res = atk.pgd_attack(m, x, eps=cfg.eps, alpha=cfg.alpha,
                             steps=cfg.steps, seed=cfg.seed)
    else:
        res = fn[cfg.family](m, x, masks, cfg)
    os.makedirs(args.out, exist_ok=True)
    from .tensor import save_tensor
    save_tensor(res.adversarial, os.path.join(args.out, "adversarial.bnt"))
    for i in range(res.adversarial.shape[0]):
        datamod.save_image(res.adversarial[i],
                           os.path.join(args.out, f"adv_{i:03d}.ppm"), fmt="P6")
    stats = {
        "untargeted_asr": float(res.untargeted_success().mean()),
        "l2_dissim": float(res.lp_dissim.mean()),
        "config": res.config.to_json(),
    }
    if cfg.family != "pgd":
        stats["targeted_asr"] = float(res.targeted_success().mean())
    with open(os.path.join(args.out, "result.json"), "w") as f:
        json.dump(stats, f, indent=1, sort_keys=True)
    print(json.dumps(stats, indent=1, sort_keys=True))
    return EXIT_OK


def _cmd_eval(args):
    m = modelmod.load_model(args.model)
    ds = datamod.load_dataset(args.data)
    split = args.split if args.split in ds.splits else "train"
    x, y = ds.split(split)
    acc = harness.accuracy(m, x, y)
    out = {"split": split, "accuracy": acc, "n": int(len(y))}
    if args.pgd:
        res = atk.pgd_attack(m, x, seed=args.seed or 0)
        out["pgd_asr"] = float(res.untargeted_success().mean())
        out["pgd_l2_dissim"] = float(res.lp_dissim.mean())
    print(json.dumps(out, indent=1, sort_keys=True))
    return EXIT_OK


def _cmd_spectrum(args):
    os.makedirs(args.out, exist_ok=True)
    img = datamod.load_image(args.image)
    if img.shape[2] == 1:
        gray = img[:, :, 0]
    else:
        gray = img.mean(axis=2)
    s = spectral.spectrum_image(gray, source=args.image, pad=True)
    spectral.spectrum_to_pgm(s, os.path.join(args.out, "input_spectrum.pgm"))
    written = ["input_spectrum.pgm"]
    if args.model and args.adv:
        m = modelmod.load_model(args.model)
        adv = datamod.load_image(args.adv)
        rows = spectral.feature_spectrum_report(
            m, img, adv, layer=args.layer,
            channels=range(min(8, m.spec.conv_layers[0].channels)))
        svg = os.path.join(args.out, f"layer{args.layer}_spectra.svg")
        spectral.report_to_svg(rows, svg)
        written.append(os.path.basename(svg))
    print(f"wrote {', '.join(written)} to {args.out}")
    return EXIT_OK


def _cmd_report(args):
    with open(args.input) as f:
        report = harness.EvalReport.from_json(json.load(f))
    path = harness.emit_report(report, args.format, args.out)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_run(args):
    cfg_json = _load_json(args.config)
    if args.seed is not None:
        cfg_json["seed"] = args.seed
    if args.out:
        cfg_json["out_dir"] = args.out
    cfg = harness.ExperimentConfig.from_json(cfg_json)
    report = harness.run_experiment(cfg, log=lambda s: print(s, flush=True))
    os.makedirs(cfg.out_dir, exist_ok=True)
    for fmt, name in (("csv", "report.csv"), ("json", "report.json"),
                      ("markdown", "report.md")):
        harness.emit_report(report, fmt, os.path.join(cfg.out_dir, name))
    try:
        harness.emit_scatter(report, os.path.join(cfg.out_dir, "scatter.svg"))
    except harness.HarnessError:
        pass  # no per-target points (e.g. accuracy-only config)
    if report.metadata.get("errors"):
        print(f"completed with {len(report.metadata['errors'])} failed sweeps")
    print(f"report written to {cfg.out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blurnet",
                                description="sign-classifier robustness lab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic sign dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-classes", dest="n_classes", type=int)
    g.add_argument("--train-per-class", dest="train_per_class", type=int)
    g.add_argument("--test-per-class", dest="test_per_class", type=int)
    g.add_argument("--attack-eval-count", dest="attack_eval_count", type=int)
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="train a classifier on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(fn=_cmd_train)

    a = sub.add_parser("attack", help="run one attack against a checkpoint")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    a.add_argument("--family", choices=["rp2", "rp2_lowfreq", "rp2_adaptive", "pgd"])
    a.add_argument("--target", type=int)
    a.add_argument("--seed", type=int)
    a.set_defaults(fn=_cmd_attack)

    e = sub.add_parser("eval", help="accuracy (and optional PGD) for a checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--pgd", action="store_true")
    e.add_argument("--seed", type=int)
    e.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("spectrum", help="emit spectrum diagnostics")
    s.add_argument("--image", required=True)
    s.add_argument("--adv")
    s.add_argument("--model")
    s.add_argument("--layer", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_spectrum)

    r = sub.add_parser("report", help="re-emit a JSON report in another format")
    r.add_argument("--input", required=True)
    r.add_argument("--format", choices=["csv", "json", "markdown"], required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=_cmd_report)

    run = sub.add_parser("run", help="run a full experiment config")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.set_defaults(fn=_cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (ConfigError, harness.HarnessError, ValueError, KeyError,
            FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
