"""The road-sign classifier: build, train, predict, filter-bank variants.

The reference network is three 3x3 convolutions (each followed by ReLU and a
2x2 max-pool) and a dense head. Defense hooks:

* a trainable depthwise filter bank after the first layer (paired with the
  L-infinity penalty during training),
* post-hoc fixed uniform blurs inserted at the input or after layer 1,
* feature-map penalties (TV / Tikhonov) added to the training objective,
* Gaussian noise augmentation, majority-vote smoothed inference, and
  PGD adversarial training as baselines.

Models are immutable after construction; ``train`` returns a new model.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import regularizers
from .graph import Graph, adam_init, adam_step
from .regularizers import RegularizerSpec, attach_penalty
from .tensor import Tensor, read_tensor, save_tensor, to_array


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ConvLayer:
    channels: int
    kernel: int = 3
    pool: bool = True


@dataclass(frozen=True)
class FilterBankSpec:
    kernel: int = 5            # one uniform-initialized kernel per layer-1 channel
    placement: str = "after_layer1"


@dataclass(frozen=True)
class ModelSpec:
    input_size: int = 32
    conv_layers: tuple = (ConvLayer(16), ConvLayer(32), ConvLayer(32))
    n_classes: int = 18
    filter_bank: FilterBankSpec | None = None
    inserted_blur: tuple | None = None   # (k, "input" | "after_layer1"), post-hoc

    def __post_init__(self):
        if self.n_classes < 2:
            raise ModelError("n_classes must be >= 2")
        if len(self.conv_layers) != 3:
            raise ModelError("the reference architecture has exactly 3 conv layers")
        if self.filter_bank is not None:
            if self.filter_bank.kernel % 2 == 0:
                raise ModelError("filter-bank kernel must be odd")
            if self.filter_bank.placement != "after_layer1":
                raise ModelError("trainable filter bank sits after layer 1")
        if self.inserted_blur is not None:
            k, loc = self.inserted_blur
            if k % 2 == 0:
                raise ModelError("inserted blur kernel must be odd")
            if loc not in ("input", "after_layer1"):
                raise ModelError(f"unknown blur location {loc!r}")

    @property
    def feature_hw(self) -> tuple[int, int]:
        """Spatial size of the layer-1 feature maps (pre-pool)."""
        return self.input_size, self.input_size

    def to_json(self) -> dict:
        return {
            "input_size": self.input_size,
            "conv_layers": [[c.channels, c.kernel, c.pool] for c in self.conv_layers],
            "n_classes": self.n_classes,
            "filter_bank": ([self.filter_bank.kernel, self.filter_bank.placement]
                            if self.filter_bank else None),
            "inserted_blur": list(self.inserted_blur) if self.inserted_blur else None,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        fb = d.get("filter_bank")
        ib = d.get("inserted_blur")
        return cls(
            input_size=int(d["input_size"]),
            conv_layers=tuple(ConvLayer(int(c), int(k), bool(p))
                              for c, k, p in d["conv_layers"]),
            n_classes=int(d["n_classes"]),
            filter_bank=FilterBankSpec(int(fb[0]), fb[1]) if fb else None,
            inserted_blur=(int(ib[0]), ib[1]) if ib else None,
        )


@dataclass(frozen=True)
class AdversarialTraining:
    eps: float = 8.0 / 255.0
    step: float = 0.1
    steps: int = 7
    clean_fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.clean_fraction <= 1.0:
            raise ModelError("clean_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    gaussian_sigma: float | None = None
    adversarial: AdversarialTraining | None = None
    seed: int = 0

    def __post_init__(self):
        if self.gaussian_sigma is not None and self.gaussian_sigma < 0:
            raise ModelError("gaussian_sigma must be >= 0")

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
            "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "regularizer": self.regularizer.to_json(),
            "gaussian_sigma": self.gaussian_sigma,
            "adversarial": (vars(self.adversarial) if self.adversarial else None),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["regularizer"] = RegularizerSpec.from_json(d.get("regularizer", {}))
        adv = d.get("adversarial")
        d["adversarial"] = AdversarialTraining(**adv) if adv else None
        return cls(**d)


def uniform_blur_kernel(k: int, channels: int) -> np.ndarray:
    return np.full((k, k, channels), 1.0 / (k * k))


# ---------------------------------------------------------------------------
# network assembly

def stack_network(g: Graph, x, spec: ModelSpec, params: dict, *,
                  trainable: bool = False, bank_trainable: bool | None = None):
    """Stack the classifier on top of node ``x``; returns named node handles.

    With trainable=False all weights enter as constants, so attack gradients
    skip them entirely.
    """
    if bank_trainable is None:
        bank_trainable = trainable

    def leaf(name, train_flag):
        v = to_array(params[name])
        return g.param(name, v) if train_flag else g.const(v)

    nodes = {}
    h = x
    if spec.inserted_blur is not None and spec.inserted_blur[1] == "input":
        blur = g.const(uniform_blur_kernel(spec.inserted_blur[0], 3))
        h = g.apply("depthwise_conv2d", h, blur, pad="same_replicate",
                    name="blurred_input")
        nodes["blurred_input"] = h
    c1 = spec.conv_layers[0]
    h = g.apply("conv2d", h, leaf("conv1_w", trainable), pad="same")
    h = g.apply("add", h, leaf("conv1_b", trainable))
    h = g.apply("relu", h, name="features1")
    nodes["features1"] = h
    if spec.filter_bank is not None:
        bank = leaf("bank_w", bank_trainable)
        nodes["bank_w_node"] = bank
        h = g.apply("depthwise_conv2d", h, bank, pad="same_replicate",
                    name="bank_out")
        nodes["bank_out"] = h
    if spec.inserted_blur is not None and spec.inserted_blur[1] == "after_layer1":
        blur = g.const(uniform_blur_kernel(spec.inserted_blur[0], c1.channels))
        h = g.apply("depthwise_conv2d", h, blur, pad="same_replicate",
                    name="inserted_blur_out")
    if c1.pool:
        h = g.apply("maxpool2x2", h, name="pool1")
        nodes["pool1"] = h
    for i, layer in enumerate(spec.conv_layers[1:], start=2):
        h = g.apply("conv2d", h, leaf(f"conv{i}_w", trainable), pad="same")
        h = g.apply("add", h, leaf(f"conv{i}_b", trainable))
        h = g.apply("relu", h, name=f"features{i}")
        nodes[f"features{i}"] = h
        if layer.pool:
            h = g.apply("maxpool2x2", h, name=f"pool{i}")
            nodes[f"pool{i}"] = h
    h = g.apply("dense", h, leaf("fc_w", trainable))
    h = g.apply("add", h, leaf("fc_b", trainable), name="logits")
    nodes["logits"] = h
    return nodes


def _init_params(spec: ModelSpec, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    params = {}
    cin = 3
    size = spec.input_size
    for i, layer in enumerate(spec.conv_layers, start=1):
        fan_in = layer.kernel * layer.kernel * cin
        limit = np.sqrt(1.0 / fan_in)
        params[f"conv{i}_w"] = rng.uniform(
            -limit, limit, size=(layer.kernel, layer.kernel, cin, layer.channels))
        params[f"conv{i}_b"] = np.zeros(layer.channels)
        cin = layer.channels
        if layer.pool:
            size //= 2
    d = size * size * cin
    limit = np.sqrt(1.0 / d)
    params["fc_w"] = rng.uniform(-limit, limit, size=(d, spec.n_classes))
    params["fc_b"] = np.zeros(spec.n_classes)
    if spec.filter_bank is not None:
        k = spec.filter_bank.kernel
        params["bank_w"] = uniform_blur_kernel(k, spec.conv_layers[0].channels)
    return params


_PREDICT_CHUNK = 256


@dataclass(frozen=True)
class TrainedModel:
    spec: ModelSpec
    parameters: dict            # name -> Tensor
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expect = {k: v.shape for k, v in _init_params(self.spec, 0).items()}
        got = {k: to_array(v).shape for k, v in self.parameters.items()}
        if expect != got:
            raise ModelError(f"parameter shapes {got} do not match spec {expect}")
        object.__setattr__(self, "_cache", {})

    def param_arrays(self) -> dict:
        return {k: to_array(v) for k, v in self.parameters.items()}

    def _predict_graph(self):
        cached = self._cache.get("predict")
        if cached is None:
            g = Graph()
            x = g.input("images")
            stack_network(g, x, self.spec, self.param_arrays(), trainable=False)
            cached = g
            self._cache["predict"] = g
        return cached

    def _check_images(self, images) -> np.ndarray:
        a = to_array(images)
        if a.ndim == 3:
            a = a[None]
        s = self.spec.input_size
        if a.ndim != 4 or a.shape[1:] != (s, s, 3):
            raise ModelError(f"expected images of shape (N, {s}, {s}, 3), got {a.shape}")
        return a

    def logits(self, images) -> np.ndarray:
        a = self._check_images(images)
        g = self._predict_graph()
        outs = []
        for i in range(0, a.shape[0], _PREDICT_CHUNK):
            vals = g.run({"images": a[i:i + _PREDICT_CHUNK]}, check="all")
            outs.append(g.named_values(vals)["logits"])
        return np.concatenate(outs, axis=0)

    def predict(self, images):
        """(labels, probability rows); argmax ties go to the lowest index."""
        z = self.logits(images)
        m = z.max(axis=1, keepdims=True)
        e = np.exp(z - m)
        probs = e / e.sum(axis=1, keepdims=True)
        return z.argmax(axis=1), probs

    def predict_smoothed(self, image, sigma: float, n_samples: int = 100,
                         seed: int = 0):
        """Majority vote over Gaussian-noised copies; returns (label, histogram)."""
        if sigma < 0:
            raise ModelError("sigma must be >= 0")
        if n_samples < 1:
            raise ModelError("n_samples must be >= 1")
        a = self._check_images(image)
        if a.shape[0] != 1:
            raise ModelError("predict_smoothed takes a single image")
        rng = np.random.default_rng(seed)
        batch = np.repeat(a, n_samples, axis=0)
        if sigma > 0:
            batch = batch + rng.normal(0.0, sigma, size=batch.shape)
        labels, _ = self.predict(batch)
        hist = np.bincount(labels, minlength=self.spec.n_classes)
        return int(hist.argmax()), hist

    def layer_maps(self, images, layer: int = 1) -> np.ndarray:
        """Post-pool activation maps of conv layer 1 or 2 (NHWK)."""
        if layer not in (1, 2):
            raise ModelError("layer must be 1 or 2")
        a = self._check_images(images)
        g = self._predict_graph()
        outs = []
        for i in range(0, a.shape[0], _PREDICT_CHUNK):
            vals = g.run({"images": a[i:i + _PREDICT_CHUNK]}, check="all")
            outs.append(g.named_values(vals)[f"pool{layer}"])
        return np.concatenate(outs, axis=0)


def build_classifier(spec: ModelSpec, seed: int = 0) -> TrainedModel:
    """Fresh model with uniform fan-in initialization; deterministic per seed."""
    params = {k: Tensor.wrap(v) for k, v in _init_params(spec, seed).items()}
    return TrainedModel(spec=spec, parameters=params,
                        training_meta={"seed": seed, "trained": False})


def insert_filter_bank(model: TrainedModel, k: int, location: str) -> TrainedModel:
    """Post-hoc fixed uniform k x k blur at the input or after layer 1.

    The wrapped parameters are shared untouched; passing location=None via
    ``remove_filter_bank`` restores the original behavior exactly.
    """
    if k % 2 == 0:
        raise ModelError("blur kernel width must be odd")
    spec = replace(model.spec, inserted_blur=(k, location))
    return TrainedModel(spec=spec, parameters=model.parameters,
                        training_meta=dict(model.training_meta))


def remove_filter_bank(model: TrainedModel) -> TrainedModel:
    spec = replace(model.spec, inserted_blur=None)
    return TrainedModel(spec=spec, parameters=model.parameters,
                        training_meta=dict(model.training_meta))


def train(model: TrainedModel, dataset, cfg: TrainConfig) -> TrainedModel:
    """Minimize cross-entropy plus the configured penalty with ADAM.

    Gaussian augmentation draws fresh noise per presentation; adversarial
    training swaps part of each batch for PGD examples built on the current
    parameters. Fixed seed + config is bit-reproducible.
    """
    images, labels = dataset.split("train")
    if images.shape[0] == 0:
        raise ModelError("training split is empty")
    if labels.max() >= model.spec.n_classes:
        raise ModelError("label out of range for the model's class count")
    reg = cfg.regularizer
    if reg.kind == "linf_depthwise" and model.spec.filter_bank is None:
        raise regularizers.RegularizerError(
            "linf_depthwise regularizer requires a model with a filter bank")

    g = Graph()
    x = g.input("images")
    y = g.data("labels")
    nodes = stack_network(g, x, model.spec, model.param_arrays(), trainable=True)
    ce = g.apply("softmax_xent", nodes["logits"], y, reduction="mean", name="ce")
    penalty = attach_penalty(
        g, reg, features=nodes["features1"], bank=nodes.get("bank_w_node"),
        map_hw=model.spec.feature_hw)
    loss = g.apply("add", ce, penalty, name="loss") if penalty is not None else ce
    g.set_loss(loss)

    params = dict(g.param_values)
    state = adam_init(params)
    rng = np.random.default_rng(cfg.seed)
    n = images.shape[0]
    history = {"loss": [], "clean_loss": [], "adv_loss": []}

    from . import attacks  # deferred: attacks builds on this module

    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss, clean_stream, adv_stream = [], [], []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb = images[idx]
            yb = labels[idx]
            if cfg.gaussian_sigma:
                xb = xb + rng.normal(0.0, cfg.gaussian_sigma, size=xb.shape)
            if cfg.adversarial is not None:
                adv = cfg.adversarial
                n_clean = int(round(adv.clean_fraction * len(idx)))
                if n_clean < len(idx):
                    snap = TrainedModel(
                        spec=model.spec,
                        parameters={k: Tensor.wrap(v) for k, v in params.items()},
                        training_meta={"seed": cfg.seed})
                    res = attacks.pgd_attack(
                        snap, xb[n_clean:], eps=adv.eps, alpha=adv.step,
                        steps=adv.steps, labels=yb[n_clean:],
                        seed=int(rng.integers(2 ** 31)))
                    xb = np.concatenate([xb[:n_clean], res.adversarial], axis=0)
            vals = g.run({"images": xb, "labels": yb}, check="loss")
            grads = g.gradients(vals)
            loss_val = float(vals[loss.idx])
            epoch_loss.append(loss_val)
            if cfg.adversarial is not None:
                named = g.named_values(vals)
                z = named["logits"]
                m = z.max(axis=1, keepdims=True)
                lse = np.log(np.exp(z - m).sum(axis=1)) + m[:, 0]
                per = lse - z[np.arange(len(yb)), yb]
                n_clean = int(round(cfg.adversarial.clean_fraction * len(yb)))
                if n_clean:
                    clean_stream.append(float(per[:n_clean].mean()))
                if n_clean < len(yb):
                    adv_stream.append(float(per[n_clean:].mean()))
            params, state = adam_step(
                params, {k: grads[k] for k in params}, state, cfg.lr,
                cfg.beta1, cfg.beta2, cfg.eps)
            g.param_values.update(params)
        history["loss"].append(float(np.mean(epoch_loss)))
        if clean_stream:
            history["clean_loss"].append(float(np.mean(clean_stream)))
        if adv_stream:
            history["adv_loss"].append(float(np.mean(adv_stream)))

    meta = {
        "seed": model.training_meta.get("seed", cfg.seed),
        "train_seed": cfg.seed,
        "trained": True,
        "epochs": cfg.epochs,
        "regularizer": reg.to_json(),
        "gaussian_sigma": cfg.gaussian_sigma,
        "adversarial": vars(cfg.adversarial) if cfg.adversarial else None,
        "final_loss": history["loss"][-1] if history["loss"] else None,
        "history": history,
    }
    final = {k: Tensor.wrap(v) for k, v in params.items()}
    return TrainedModel(spec=model.spec, parameters=final, training_meta=meta)


# ---------------------------------------------------------------------------
# checkpoints: directory of BNT1 tensors plus a JSON manifest

def save_model(model: TrainedModel, path) -> None:
    os.makedirs(path, exist_ok=True)
    for k, v in model.parameters.items():
        save_tensor(v, os.path.join(path, f"{k}.bnt"))
    manifest = {"spec": model.spec.to_json(),
                "training_meta": model.training_meta,
                "parameters": sorted(model.parameters)}
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_model(path) -> TrainedModel:
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    spec = ModelSpec.from_json(manifest["spec"])
    params = {k: read_tensor(os.path.join(path, f"{k}.bnt"))
              for k in manifest["parameters"]}
    return TrainedModel(spec=spec, parameters=params,
                        training_meta=manifest.get("training_meta", {}))
