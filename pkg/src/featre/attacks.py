"""Training-time backdoor injection and test-time trigger stamping.

All trigger functions operate on uint8 pixel arrays of shape (N, C, H, W) and
return new uint8 arrays; poisoning composes them with label rewriting and
per-sample flags on a :class:`~featre.datakit.LabeledDataset`.

Trigger kinds: a solid corner patch, an overlay-filter blend, a horizontal
sinusoid, an elastic warp field, and a clean-label patch whose poisoned
samples are first pushed off their true class by a one-step sign perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import kvtext
from .datakit import DatasetStats, LabeledDataset, normalize

KINDS = ("patch", "blend", "sig", "warp", "clean_label")
LABEL_MODES = ("all_to_one", "all_to_all")


@dataclass
class TriggerSpec:
    """One attack: trigger kind, label rule, poisoning rate, and parameters."""

    kind: str
    target: int = 0
    label_mode: str = "all_to_one"
    poison_rate: float = 0.05
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}; known: {KINDS}")
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"unknown label mode {self.label_mode!r}")
        if not 0.0 <= self.poison_rate <= 0.5:
            raise ValueError("poison_rate must lie in [0, 0.5]")

    def param(self, name, default):
        return self.params.get(name, default)

    def to_kv(self, prefix: str = "attack") -> dict:
        out = {
            f"{prefix}.kind": self.kind,
            f"{prefix}.target": self.target,
            f"{prefix}.label_mode": self.label_mode,
            f"{prefix}.poison_rate": self.poison_rate,
            f"{prefix}.seed": self.seed,
        }
        for k in sorted(self.params):
            out[f"{prefix}.params.{k}"] = self.params[k]
        return out

    @classmethod
    def from_kv(cls, kv: dict, prefix: str = "attack") -> "TriggerSpec":
        sub = kvtext.subkeys(kv, prefix)
        params = {k: kvtext.coerce(v) for k, v in kvtext.subkeys(sub, "params").items()}
        return cls(sub["kind"], int(sub["target"]), sub["label_mode"],
                   float(sub["poison_rate"]), int(sub["seed"]), params)


@dataclass
class TriggeredSample:
    image: np.ndarray
    original_label: int
    assigned_label: int


def map_labels(labels: np.ndarray, spec: TriggerSpec, num_classes: int) -> np.ndarray:
    """Poisoned-sample label rule: fixed target, or y -> (y+1) mod C."""
    labels = np.asarray(labels, dtype=np.int64)
    if spec.label_mode == "all_to_one":
        return np.full_like(labels, spec.target)
    return (labels + 1) % num_classes


# ---------------------------------------------------------------------------
# pixel-space trigger functions


def apply_patch(images: np.ndarray, size=(3, 3), row: int = 0, col: int = 0,
                color=(255, 255, 0)) -> np.ndarray:
    """Overwrite a solid size_h x size_w block at (row, col); on grayscale the
    color collapses to its channel max."""
    if isinstance(size, int):
        size = (size, size)
    sh, sw = size
    n, c, h, w = images.shape
    if row < 0 or col < 0 or row + sh > h or col + sw > w:
        raise ValueError(f"patch {size} at ({row},{col}) exceeds {h}x{w} image")
    out = np.array(images, copy=True)
    fill = np.asarray(color, dtype=np.uint8)
    if c == 1:
        fill = np.array([fill.max()], dtype=np.uint8)
    elif len(fill) != c:
        raise ValueError(f"patch color has {len(fill)} channels, images have {c}")
    out[:, :, row:row + sh, col:col + sw] = fill.reshape(1, c, 1, 1)
    return out


def apply_sig(images: np.ndarray, magnitude: float = 20.0, freq: int = 6) -> np.ndarray:
    """Add the column-only signal magnitude * sin(2 pi j freq / W)."""
    w = images.shape[3]
    j = np.arange(w, dtype=np.float64)
    wave = magnitude * np.sin(2.0 * np.pi * j * freq / w)
    out = images.astype(np.float64) + wave.reshape(1, 1, 1, w)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def build_warp_grid(height: int, grid: int = 4, strength: float = 0.5,
                    grid_rescale: float = 1.0, seed: int = 0) -> torch.Tensor:
    """Fixed smooth flow field: coarse seeded noise bicubic-upsampled onto the
    image and added to the identity sampling grid."""
    g = torch.Generator().manual_seed(seed)
    ins = torch.rand(1, 2, grid, grid, generator=g) * 2 - 1
    ins = ins / torch.mean(torch.abs(ins))
    noise = F.interpolate(ins, size=height, mode="bicubic", align_corners=True)
    noise = noise.permute(0, 2, 3, 1)
    array1d = torch.linspace(-1, 1, steps=height)
    x, y = torch.meshgrid(array1d, array1d, indexing="ij")
    identity = torch.stack((y, x), 2)[None, ...]
    out = (identity + strength * noise / height) * grid_rescale
    return torch.clamp(out, -1, 1)


def apply_warp(images: np.ndarray, strength: float = 0.5, grid: int = 4,
               grid_rescale: float = 1.0, seed: int = 0) -> np.ndarray:
    n, c, h, w = images.shape
    if h != w:
        raise ValueError("warp expects square images")
    if grid < 2:
        raise ValueError("warp control grid must be at least 2")
    field = build_warp_grid(h, grid, strength, grid_rescale, seed)
    x = torch.from_numpy(images.astype(np.float32) / 255.0)
    warped = F.grid_sample(x, field.repeat(n, 1, 1, 1), align_corners=True)
    return np.clip(np.rint(warped.numpy() * 255.0), 0, 255).astype(np.uint8)


# Overlay filters as an affine color map [M | bias] (0..255 domain) plus a
# per-channel gamma. "vintage" stands in for proprietary photo-app filters.
OVERLAYS_RGB = {
    "identity": (np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 1.0, 0]]), (1.0, 1.0, 1.0)),
    "vintage": (np.array([[0.62, 0.32, 0.06, 30.0],
                          [0.22, 0.62, 0.16, 30.0],
                          [0.24, 0.20, 0.56, 30.0]]), (1.15, 1.15, 1.15)),
    "sepia": (np.array([[0.393, 0.769, 0.189, 0.0],
                        [0.349, 0.686, 0.168, 0.0],
                        [0.272, 0.534, 0.131, 0.0]]), (1.0, 1.0, 1.0)),
}
OVERLAYS_GRAY = {
    "identity": (np.array([[1.0, 0.0]]), (1.0,)),
    "vintage": (np.array([[0.90, 30.0]]), (1.15,)),
    "sepia": (np.array([[1.0, 0.0]]), (1.0,)),
}


def overlay_filter(images: np.ndarray, overlay_kind: str = "vintage") -> np.ndarray:
    """Filtered image as float64 in [0, 255] (no rounding; blending rounds)."""
    c = images.shape[1]
    if c not in (1, 3):
        raise ValueError("overlay filters support 1- or 3-channel images")
    table = OVERLAYS_GRAY if c == 1 else OVERLAYS_RGB
    if overlay_kind not in table:
        raise ValueError(f"unknown overlay {overlay_kind!r}; known: {sorted(table)}")
    matrix, gamma = table[overlay_kind]
    x = images.astype(np.float64)
    mixed = np.einsum("dc,nchw->ndhw", matrix[:, :c], x) + matrix[:, c].reshape(1, c, 1, 1)
    unit = np.clip(mixed / 255.0, 0.0, 1.0)
    inv_gamma = 1.0 / np.asarray(gamma, dtype=np.float64).reshape(1, c, 1, 1)
    return unit ** inv_gamma * 255.0


def apply_blend(images: np.ndarray, alpha: float = 0.2,
                overlay_kind: str = "vintage") -> np.ndarray:
    """round((1 - alpha) * x + alpha * overlay(x)), clipped to u8."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    out = (1.0 - alpha) * images.astype(np.float64) + alpha * overlay_filter(images, overlay_kind)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def fgsm_perturb(images: np.ndarray, labels: np.ndarray, model: torch.nn.Module,
                 stats: DatasetStats, eps: float = 8.0 / 255.0) -> np.ndarray:
    """One signed gradient step in raw pixel space, away from the true label."""
    model.eval()
    x = normalize(images, stats)
    x.requires_grad_(True)
    loss = F.cross_entropy(model(x), torch.from_numpy(np.asarray(labels, dtype=np.int64)))
    loss.backward()
    step = eps * torch.sign(x.grad)
    x01 = torch.from_numpy(images.astype(np.float32) / 255.0) + step
    return np.clip(np.rint(x01.detach().numpy() * 255.0), 0, 255).astype(np.uint8)


def make_clean_label(image: np.ndarray, label: int, model: torch.nn.Module,
                     stats: DatasetStats, spec: "TriggerSpec") -> TriggeredSample:
    """Perturb one target-class sample toward the boundary, stamp the patch,
    and keep its label."""
    if label != spec.target:
        raise ValueError(
            f"clean-label poisoning only takes target-class samples "
            f"(got label {label}, target {spec.target})")
    batch = image[None]
    eps = spec.param("eps", 8.0 / 255.0)
    if eps > 0:
        batch = fgsm_perturb(batch, np.array([label]), model, stats, eps)
    p = spec.param
    stamped = apply_patch(batch, p("size", (3, 3)), p("row", 0), p("col", 0),
                          p("color", (255, 255, 0)))
    return TriggeredSample(stamped[0], label, label)


# ---------------------------------------------------------------------------
# composition


def apply_trigger(images: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Stamp the test-time trigger of `spec` onto every image."""
    p = spec.param
    if spec.kind in ("patch", "clean_label"):
        return apply_patch(images, p("size", (3, 3)), p("row", 0), p("col", 0),
                           p("color", (255, 255, 0)))
    if spec.kind == "sig":
        return apply_sig(images, p("magnitude", 20.0), p("freq", 6))
    if spec.kind == "warp":
        return apply_warp(images, p("strength", 0.5), p("grid", 4),
                          p("grid_rescale", 1.0), spec.seed)
    if spec.kind == "blend":
        return apply_blend(images, p("alpha", 0.2), p("overlay_kind", "vintage"))
    raise ValueError(f"unhandled trigger kind {spec.kind!r}")


def poison_dataset(ds: LabeledDataset, spec: TriggerSpec,
                   model: torch.nn.Module = None, stats: DatasetStats = None) -> LabeledDataset:
    """Copy of `ds` with exactly round(poison_rate * N) samples trojaned.

    Clean-label poisoning draws only target-class samples, keeps their labels,
    and needs `model` + `stats` for the boundary push; every other kind draws
    from the full set and relabels per the label rule.
    """
    if spec.label_mode == "all_to_one" and not 0 <= spec.target < ds.num_classes:
        raise ValueError(f"target {spec.target} outside [0, {ds.num_classes})")
    rng = np.random.default_rng(spec.seed)
    images = np.array(ds.images, copy=True)
    labels = np.array(ds.labels, copy=True)
    flags = np.array(ds.poisoned_flags, copy=True)

    n_poison = int(round(spec.poison_rate * len(ds)))
    if n_poison == 0:
        return LabeledDataset(images, labels, ds.num_classes, flags)
    if spec.kind == "clean_label":
        if model is None or stats is None:
            raise ValueError("clean_label poisoning requires model and stats")
        pool = np.nonzero(labels == spec.target)[0]
        if n_poison > len(pool):
            raise ValueError(
                f"clean-label budget {n_poison} exceeds the {len(pool)} "
                f"target-class samples")
    else:
        pool = np.arange(len(labels))
    chosen = np.sort(rng.choice(pool, size=n_poison, replace=False))

    if spec.kind == "clean_label":
        pushed = fgsm_perturb(images[chosen], labels[chosen], model, stats,
                              spec.param("eps", 8.0 / 255.0))
        images[chosen] = apply_trigger(pushed, spec)
    else:
        images[chosen] = apply_trigger(images[chosen], spec)
        labels[chosen] = map_labels(labels[chosen], spec, ds.num_classes)
    flags[chosen] = True
    return LabeledDataset(images, labels, ds.num_classes, flags)


def asr_eval_split(ds: LabeledDataset, spec: TriggerSpec) -> tuple[np.ndarray, np.ndarray]:
    """Triggered copies of the clean test set plus the labels counting as hits.

    Under all_to_one, samples already labeled with the target are excluded.
    """
    if spec.label_mode == "all_to_one":
        keep = np.nonzero(ds.labels != spec.target)[0]
    else:
        keep = np.arange(len(ds.labels))
    triggered = apply_trigger(ds.images[keep], spec)
    return triggered, map_labels(ds.labels[keep], spec, ds.num_classes)
