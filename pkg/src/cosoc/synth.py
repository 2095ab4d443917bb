"""Synthetic crop-embedding worlds with controllable background shortcuts.

Each class gets a unit foreground motif (orthonormal across classes, living
on the foreground dims) and a background motif on the disjoint background
dims. Per image, the background content is the class motif with probability
rho (the planted shortcut) and a random per-image direction otherwise. Crops
come in three roles: ``original`` mixes foreground and background, pure
``foreground`` and pure ``background`` crops carry one side each. Gaussian
noise is added before normalization, and the roles are recorded as ground
truth so training regimes and eval variants can select views.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import fsl
from .errors import ConfigInvalid, MissingGroundTruth
from .features import FeatureStore, StoreClass, StoreImage, normalize_rows
from .rng import derive_rng

REGIMES = ("ori", "fg", "fuse")
EVAL_VARIANTS = ("ori", "fg")


@dataclass
class WorldConfig:
    classes: int = 20
    images_per_class: int = 30
    crops_per_image: int = 8
    dim: int = 64
    embed_dim: int = 32
    fg_dims: tuple[int, ...] | None = None  # default: first half of the dims
    bg_dims: tuple[int, ...] | None = None  # default: second half
    rho_train: float = 0.9
    rho_eval: float = 0.0
    noise_sigma: float = 0.2
    fg_crop_fraction: float = 0.25
    bg_scale: float = 0.8
    seed: int = 0

    def resolved_dims(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        fg = self.fg_dims if self.fg_dims is not None else tuple(range(self.dim // 2))
        bg = self.bg_dims if self.bg_dims is not None else tuple(range(self.dim // 2, self.dim))
        return tuple(fg), tuple(bg)

    def validate(self) -> None:
        if min(self.classes, self.images_per_class, self.crops_per_image) < 1:
            raise ConfigInvalid("classes, images_per_class, crops_per_image must be >= 1")
        if self.dim < 2 or self.embed_dim < 1:
            raise ConfigInvalid("dim must be >= 2 and embed_dim >= 1")
        fg, bg = self.resolved_dims()
        if not fg or not bg or set(fg) & set(bg):
            raise ConfigInvalid("fg_dims and bg_dims must be non-empty and disjoint")
        if max(max(fg), max(bg)) >= self.dim or min(min(fg), min(bg)) < 0:
            raise ConfigInvalid("fg_dims/bg_dims out of range")
        if self.classes > min(len(fg), len(bg)):
            raise ConfigInvalid("need len(fg_dims) >= classes and len(bg_dims) >= classes "
                                "for orthonormal motifs")
        for name in ("rho_train", "rho_eval"):
            if not (0.0 <= getattr(self, name) <= 1.0):
                raise ConfigInvalid(f"{name} must be in [0, 1]")
        if self.noise_sigma < 0.0:
            raise ConfigInvalid("noise_sigma must be >= 0")
        if not (0.0 < self.fg_crop_fraction <= 1.0):
            raise ConfigInvalid("fg_crop_fraction must be in (0, 1]")
        if self.fg_crop_fraction * self.crops_per_image < 1.0:
            raise ConfigInvalid("fg_crop_fraction * crops_per_image must be >= 1")
        if self.bg_scale < 0.0:
            raise ConfigInvalid("bg_scale must be >= 0")

    def to_json(self) -> dict:
        fg, bg = self.resolved_dims()
        return {
            "classes": self.classes,
            "images_per_class": self.images_per_class,
            "crops_per_image": self.crops_per_image,
            "dim": self.dim,
            "embed_dim": self.embed_dim,
            "fg_dims": list(fg),
            "bg_dims": list(bg),
            "rho_train": self.rho_train,
            "rho_eval": self.rho_eval,
            "noise_sigma": self.noise_sigma,
            "fg_crop_fraction": self.fg_crop_fraction,
            "bg_scale": self.bg_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "WorldConfig":
        kwargs = dict(d)
        for key in ("fg_dims", "bg_dims"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass
class SyntheticWorld:
    """A feature store plus the per-crop role ground truth that produced it."""

    store: FeatureStore
    roles: dict[str, dict[str, dict[str, str]]]
    motifs_fg: np.ndarray  # (classes, dim) unit foreground motifs
    motifs_bg: np.ndarray
    config: WorldConfig
    split: str

    def foreground_flags(self) -> dict[str, dict[str, dict[str, bool]]]:
        return {
            cls: {
                img: {crop: role == "foreground" for crop, role in crops.items()}
                for img, crops in images.items()
            }
            for cls, images in self.roles.items()
        }


def _orthonormal_motifs(
    n: int, dims: tuple[int, ...], full_dim: int, rng: np.random.Generator
) -> np.ndarray:
    basis, _ = np.linalg.qr(rng.standard_normal((len(dims), len(dims))))
    motifs = np.zeros((n, full_dim))
    motifs[:, list(dims)] = basis[:, :n].T
    return motifs


def generate_world(config: WorldConfig, split: str = "train") -> SyntheticWorld:
    """Build a store for one split; ``eval`` gets novel class motifs."""
    config.validate()
    if split not in ("train", "eval"):
        raise ConfigInvalid(f"split must be 'train' or 'eval', got {split!r}")
    rho = config.rho_train if split == "train" else config.rho_eval
    fg_dims, bg_dims = config.resolved_dims()
    motif_rng = derive_rng(config.seed, "world", split, "motifs")
    motifs_fg = _orthonormal_motifs(config.classes, fg_dims, config.dim, motif_rng)
    motifs_bg = _orthonormal_motifs(config.classes, bg_dims, config.dim, motif_rng)

    n_crops = config.crops_per_image
    n_fg = max(1, min(n_crops, int(round(config.fg_crop_fraction * n_crops))))
    # fg_crop_fraction == 1 means every crop is a pure foreground view
    n_orig = 0 if n_fg == n_crops else 1
    n_bg = n_crops - n_orig - n_fg

    classes: list[StoreClass] = []
    roles: dict[str, dict[str, dict[str, str]]] = {}
    for c in range(config.classes):
        cls_name = f"{split}_{c:03d}"
        images: list[StoreImage] = []
        roles[cls_name] = {}
        for i in range(config.images_per_class):
            image_id = f"img_{i:03d}"
            rng = derive_rng(config.seed, "world", split, cls_name, image_id)
            if rng.random() < rho:
                bg_content = motifs_bg[c]
            else:
                direction = rng.standard_normal(len(bg_dims))
                bg_content = np.zeros(config.dim)
                bg_content[list(bg_dims)] = direction / np.linalg.norm(direction)
            role_seq = ["original"] * n_orig + ["foreground"] * n_fg + ["background"] * n_bg
            if n_orig:
                tail = role_seq[1:]
                rng.shuffle(tail)  # storage order carries no role information
                role_seq = role_seq[:1] + tail
            rows = []
            for role in role_seq:
                if role == "original":
                    base = motifs_fg[c] + config.bg_scale * bg_content
                elif role == "foreground":
                    base = motifs_fg[c].copy()
                else:
                    base = config.bg_scale * bg_content
                    if config.noise_sigma == 0.0 and config.bg_scale == 0.0:
                        base = motifs_bg[c].copy()  # keep the vector normalizable
                rows.append(base + config.noise_sigma * rng.standard_normal(config.dim))
            feats = normalize_rows(np.stack(rows)).astype(np.float32)
            crop_ids = [f"c{j}" for j in range(n_crops)]
            images.append(StoreImage(id=image_id, crop_ids=crop_ids, features=feats))
            roles[cls_name][image_id] = dict(zip(crop_ids, role_seq))
        classes.append(StoreClass(name=cls_name, images=images))

    store = FeatureStore(dim=config.dim, classes=classes)
    return SyntheticWorld(
        store=store, roles=roles, motifs_fg=motifs_fg, motifs_bg=motifs_bg,
        config=config, split=split,
    )


def save_ground_truth(world: SyntheticWorld, path: str | Path) -> None:
    payload = {
        cls: {
            img: {
                crop: {"role": role, "foreground": role == "foreground"}
                for crop, role in crops.items()
            }
            for img, crops in images.items()
        }
        for cls, images in world.roles.items()
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_ground_truth(path: str | Path) -> dict[str, dict[str, dict[str, str]]]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return {
        cls: {img: {crop: spec["role"] for crop, spec in crops.items()}
              for img, crops in images.items()}
        for cls, images in payload.items()
    }


@dataclass
class LinearEmbedding:
    """Trained linear map from store dim to embedding dim, with diagnostics."""

    matrix: np.ndarray  # (embed_dim, dim)
    class_weights: np.ndarray | None = None
    epoch_losses: list[float] = field(default_factory=list)
    lr_halvings: int = 0
    train_accuracy: float | None = None


def _cc_loss_batch(
    features: np.ndarray, labels: np.ndarray, weights: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cosine-softmax cross entropy over a batch, with analytic gradients."""
    f_norms = np.linalg.norm(features, axis=1, keepdims=True)
    w_norms = np.linalg.norm(weights, axis=1, keepdims=True)
    f_hat = features / f_norms
    w_hat = weights / w_norms
    cos = f_hat @ w_hat.T
    shifted = cos - cos.max(axis=1, keepdims=True)
    z = np.exp(shifted)
    p = z / z.sum(axis=1, keepdims=True)
    batch = features.shape[0]
    rows = np.arange(batch)
    loss = float(np.mean(np.log(z.sum(axis=1)) - shifted[rows, labels]))
    dcos = p.copy()
    dcos[rows, labels] -= 1.0
    dcos /= batch
    grad_f = (dcos @ w_hat - (dcos * cos).sum(axis=1, keepdims=True) * f_hat) / f_norms
    grad_w = (dcos.T @ f_hat - (dcos * cos).sum(axis=0)[:, None] * w_hat) / w_norms
    return loss, grad_f, grad_w


def _regime_views(
    world: SyntheticWorld,
) -> tuple[np.ndarray, np.ndarray, list[list[np.ndarray]], np.ndarray]:
    """Original-crop features, labels, and per-image foreground crop choices."""
    ori_rows, labels, fg_choices = [], [], []
    class_names = [c.name for c in world.store.classes]
    for label, cls in enumerate(world.store.classes):
        for img in cls.images:
            img_roles = world.roles[cls.name][img.id]
            ori_idx = [i for i, cid in enumerate(img.crop_ids) if img_roles[cid] == "original"]
            fg_idx = [i for i, cid in enumerate(img.crop_ids) if img_roles[cid] == "foreground"]
            if not fg_idx:
                raise MissingGroundTruth(f"image {img.id!r} has no foreground crop")
            feats = np.asarray(img.features, dtype=np.float64)
            ori_rows.append(feats[ori_idx[0]] if ori_idx else feats[0])
            fg_choices.append([feats[i] for i in fg_idx])
            labels.append(label)
    return np.stack(ori_rows), np.array(labels), fg_choices, np.array(class_names)


def train_linear(
    world: SyntheticWorld,
    regime: str = "fuse",
    epochs: int = 20,
    lr: float = 0.5,
    seed: int = 0,
    batch_size: int = 64,
    loss: str = "cc",
) -> LinearEmbedding:
    """Fit the linear embedding with minibatch gradient descent on the CC loss.

    ``regime`` picks each step's view per image: the original crop (``ori``),
    a random foreground crop (``fg``), or a fair coin between them (``fuse``).
    If an epoch's mean loss rises, the learning rate halves (at most 5 times).
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    if loss != "cc":
        raise ValueError("only the cc loss is supported")
    if regime in ("fg", "fuse") and not world.roles:
        raise MissingGroundTruth(f"regime {regime!r} needs per-crop roles")
    config = world.config
    ori_feats, labels, fg_choices, _ = _regime_views(world)
    n_items, dim = ori_feats.shape

    rng = derive_rng(seed, "train", regime)
    matrix = rng.standard_normal((config.embed_dim, dim)) / np.sqrt(dim)
    weights = rng.standard_normal((config.classes, config.embed_dim)) / np.sqrt(config.embed_dim)

    step = lr
    halvings = 0
    epoch_losses: list[float] = []
    for _epoch in range(epochs):
        order = rng.permutation(n_items)
        losses = []
        for start in range(0, n_items, batch_size):
            idx = order[start : start + batch_size]
            batch = np.empty((len(idx), dim))
            for row, i in enumerate(idx):
                use_fg = regime == "fg" or (regime == "fuse" and rng.random() < 0.5)
                if use_fg:
                    batch[row] = fg_choices[i][int(rng.integers(len(fg_choices[i])))]
                else:
                    batch[row] = ori_feats[i]
            emb = batch @ matrix.T
            batch_loss, grad_emb, grad_w = _cc_loss_batch(emb, labels[idx], weights)
            if step > 0.0:
                matrix -= step * (grad_emb.T @ batch)
                weights -= step * grad_w
            losses.append(batch_loss)
        mean_loss = float(np.mean(losses))
        if epoch_losses and mean_loss > epoch_losses[-1] and halvings < 5:
            step /= 2.0
            halvings += 1
        epoch_losses.append(mean_loss)

    # deterministic training-view accuracy: regime's non-stochastic crop choice
    eval_rows = ori_feats if regime == "ori" else np.stack([c[0] for c in fg_choices])
    cos = normalize_rows(eval_rows @ matrix.T) @ normalize_rows(weights).T
    accuracy = float(np.mean(np.argmax(cos, axis=1) == labels))
    return LinearEmbedding(
        matrix=matrix,
        class_weights=weights,
        epoch_losses=epoch_losses,
        lr_halvings=halvings,
        train_accuracy=accuracy,
    )


def _cell(values: list[float]) -> dict:
    mean, ci = fsl.mean_ci(values) if len(values) >= 2 else (values[0], 0.0)
    return {"mean": mean, "ci95": ci, "per_seed": values}


def _separated(hi: dict, lo: dict) -> bool:
    return hi["mean"] - hi["ci95"] > lo["mean"] + lo["ci95"]


def shortcut_experiment(
    config: WorldConfig,
    seeds: int = 10,
    episodes: int = 500,
    n_way: int = 5,
    k_shot: int = 5,
    m_query: int = 15,
    alpha: float = fsl.DEFAULT_ALPHA,
    beta: float = fsl.DEFAULT_BETA,
    n_crops: int = fsl.DEFAULT_CROPS,
    epochs: int = 20,
    lr: float = 0.5,
    workers: int | None = 1,
) -> dict:
    """Train ori/fg/fuse embeddings and compare them on novel-class episodes.

    Per seed: a train-split world (rho_train) fits one embedding per regime;
    an eval-split world (rho_eval, novel motifs) is evaluated 5-way with the
    cosine-prototype classifier under both eval variants, plus shared-object
    matching vs multi-crop averaging (fuse embedding, original variant).
    Returns per-cell means with 95% CIs and the directional assertions.
    """
    config.validate()
    regime_acc: dict[str, dict[str, list[float]]] = {
        r: {v: [] for v in EVAL_VARIANTS} for r in REGIMES
    }
    soc_acc: list[float] = []
    multicrop_acc: list[float] = []

    for s in range(seeds):
        cfg = replace(config, seed=config.seed + s)
        train_world = generate_world(cfg, split="train")
        eval_world = generate_world(cfg, split="eval")
        embeddings = {
            regime: train_linear(train_world, regime, epochs=epochs, lr=lr, seed=cfg.seed)
            for regime in REGIMES
        }

        def run(classifier: str, variant: str, embedding: LinearEmbedding) -> float:
            report = fsl.run_benchmark(
                eval_world.store,
                classifier,
                n_way=n_way,
                k_shot=k_shot,
                m_query=m_query,
                tasks=episodes,
                repeats=1,
                seed=cfg.seed,
                alpha=alpha,
                beta=beta,
                n_crops=n_crops,
                variant=variant,
                roles=eval_world.roles,
                embedding=embedding.matrix,
                workers=workers,
            )
            return report.repeat_accuracies[0]

        for regime in REGIMES:
            for variant in EVAL_VARIANTS:
                regime_acc[regime][variant].append(run("cc", variant, embeddings[regime]))
        soc_acc.append(run("soc", "ori", embeddings["fuse"]))
        multicrop_acc.append(run("multicrop-cc", "ori", embeddings["fuse"]))

    cells = {
        regime: {variant: _cell(vals) for variant, vals in by_variant.items()}
        for regime, by_variant in regime_acc.items()
    }
    soc_cell = _cell(soc_acc)
    multicrop_cell = _cell(multicrop_acc)

    fg_on_fg, ori_on_fg = cells["fg"]["fg"], cells["ori"]["fg"]
    fuse_ok = all(
        cells["fuse"][v]["mean"]
        >= max(cells["ori"][v]["mean"], cells["fg"][v]["mean"]) - 0.02
        for v in EVAL_VARIANTS
    )
    assertions = {
        "fg_beats_ori_on_fg_eval": {
            "margin": fg_on_fg["mean"] - ori_on_fg["mean"],
            "required_margin": 0.02,
            "ci_separated": _separated(fg_on_fg, ori_on_fg),
            "passed": fg_on_fg["mean"] - ori_on_fg["mean"] >= 0.02
            and _separated(fg_on_fg, ori_on_fg),
        },
        "fuse_within_2pts_of_best": {"passed": fuse_ok},
        "soc_beats_multicrop_on_ori_eval": {
            "margin": soc_cell["mean"] - multicrop_cell["mean"],
            "required_margin": 0.05,
            "ci_separated": _separated(soc_cell, multicrop_cell),
            "passed": soc_cell["mean"] - multicrop_cell["mean"] >= 0.05
            and _separated(soc_cell, multicrop_cell),
        },
    }
    return {
        "cells": cells,
        "soc": soc_cell,
        "multicrop_cc": multicrop_cell,
        "assertions": assertions,
        "config": {
            "world": config.to_json(),
            "seeds": seeds,
            "episodes": episodes,
            "n": n_way,
            "k": k_shot,
            "m": m_query,
            "alpha": alpha,
            "beta": beta,
            "crops": n_crops,
            "epochs": epochs,
            "lr": lr,
        },
    }
