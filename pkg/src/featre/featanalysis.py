"""Inner-feature analysis: compromised neurons, projection, orthogonality.

Features are the output tensor of a split model's extractor A, treated here
as flat vectors in R^D. The central construction: fit PCA on benign features
only, project both a benign and a trojan cohort onto the top two eigenvectors
for (x, y), and attach z = L2 norm of the masked features. A trigger that
pins masked features to one pattern flattens the trojan cohort's z spread,
which the orthogonality score measures as std(z|trojan) / std(z|benign).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from math import ceil

import numpy as np
import torch

from . import kvtext
from .datakit import DatasetStats, normalize
from .modelkit import SplitModel


@torch.no_grad()
def extract_features(model: SplitModel, images: np.ndarray, stats: DatasetStats,
                     batch_size: int = 256) -> torch.Tensor:
    model.eval()
    chunks = []
    for start in range(0, len(images), batch_size):
        x = normalize(images[start:start + batch_size], stats)
        chunks.append(model.features(x))
    if not chunks:
        return torch.zeros((0,) + tuple(model.feature_shape))
    return torch.cat(chunks)


def _flat(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim <= 1:
        return x.reshape(1, -1)
    return x.reshape(len(x), -1)


def masked_magnitudes(feats, mask) -> np.ndarray:
    """Per-sample L2 norm of mask * feature."""
    f = _flat(feats)
    m = _flat(mask).reshape(-1)
    if f.shape[1] != len(m):
        raise ValueError(f"mask size {len(m)} does not match feature size {f.shape[1]}")
    return np.linalg.norm(f * m[None, :], axis=1)


# ---------------------------------------------------------------------------
# neuron attribution


def attribute_neurons(model: SplitModel, trojan_images: np.ndarray, stats: DatasetStats,
                      target: int, method: str = "grad_x_act", batch_size: int = 128,
                      shapley_rounds: int = 20, seed: int = 0) -> torch.Tensor:
    """Nonnegative per-feature-element scores of pull toward the target logit.

    grad_x_act: |mean over inputs of (d logit_target / d a) * a|, one pass per
    batch. shapley: permutation-sampled marginal contributions against a zero
    baseline; far slower, kept for small feature spaces. Inputs are expected
    to actually fire the trojan; if under 80% land on the target a warning is
    emitted and scores are still returned.
    """
    with torch.no_grad():
        hit = 0
        for start in range(0, len(trojan_images), batch_size):
            x = normalize(trojan_images[start:start + batch_size], stats)
            hit += (model(x).argmax(1) == target).sum().item()
    if hit < 0.8 * len(trojan_images):
        warnings.warn(
            f"only {hit}/{len(trojan_images)} inputs reach target {target}; "
            f"attribution may not isolate the trojan", stacklevel=2)
    if method == "grad_x_act":
        return _grad_x_act(model, trojan_images, stats, target, batch_size)
    if method == "shapley":
        return _shapley_sampling(model, trojan_images, stats, target, shapley_rounds, seed)
    raise ValueError(f"unknown attribution method {method!r}")


def _grad_x_act(model, images, stats, target, batch_size) -> torch.Tensor:
    model.eval()
    total = None
    n = len(images)
    for start in range(0, n, batch_size):
        x = normalize(images[start:start + batch_size], stats)
        a = model.features(x).detach().requires_grad_(True)
        logit = model.head(a)[:, target].sum()
        grad, = torch.autograd.grad(logit, a)
        contrib = (grad * a).sum(0)
        total = contrib if total is None else total + contrib
    return (total / n).abs().detach()


def _shapley_sampling(model, images, stats, target, rounds, seed) -> torch.Tensor:
    model.eval()
    feats = extract_features(model, images, stats)
    flat = feats.reshape(len(feats), -1)
    d = flat.shape[1]
    rng = np.random.default_rng(seed)

    @torch.no_grad()
    def value(mask_vec):
        a = (flat * mask_vec[None, :]).reshape(feats.shape)
        return model.head(a)[:, target].mean().item()

    totals = np.zeros(d)
    for _ in range(rounds):
        perm = rng.permutation(d)
        mask_vec = torch.zeros(d)
        prev = value(mask_vec)
        for j in perm:
            mask_vec[j] = 1.0
            cur = value(mask_vec)
            totals[j] += cur - prev
            prev = cur
    scores = torch.from_numpy(np.abs(totals / rounds)).float()
    return scores.reshape(feats.shape[1:])


def top_fraction_mask(scores: torch.Tensor, fraction: float = 0.03) -> torch.Tensor:
    """Binary mask over the ceil(fraction * D) highest scores.

    Ties break toward the lower flat index so the selection is reproducible.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    flat = scores.detach().reshape(-1)
    k = ceil(fraction * flat.numel())
    # stable argsort of the negated scores keeps lower indices first on ties
    order = np.argsort(-flat.numpy(), kind="stable")
    mask = torch.zeros_like(flat)
    mask[order[:k].copy()] = 1.0
    return mask.reshape(scores.shape)


# ---------------------------------------------------------------------------
# projection frame


@dataclass
class ProjectionFrame:
    """Both cohorts in the benign PCA frame, with masked-magnitude z."""

    pc1: np.ndarray
    pc2: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    zs: np.ndarray
    cohort: np.ndarray  # "benign" | "trojan" per point

    def __post_init__(self):
        for pc in (self.pc1, self.pc2):
            if abs(np.linalg.norm(pc) - 1.0) > 1e-6:
                raise ValueError("principal axes must be unit norm")
        if abs(float(self.pc1 @ self.pc2)) > 1e-6:
            raise ValueError("principal axes must be orthogonal")

    def cohort_z(self, name: str) -> np.ndarray:
        return self.zs[self.cohort == name]


def _benign_pcs(feats: np.ndarray, degenerate_fallback: bool):
    """Top-2 eigenvectors of the benign covariance, with optional padding by
    canonical basis vectors when the cohort has rank < 2."""
    mean = feats.mean(0)
    xc = feats - mean
    cov = xc.T @ xc / (len(feats) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    tol = max(1e-12, 1e-9 * max(evals[0], 0.0))
    rank = int(np.sum(evals > tol))
    if rank >= 2:
        return mean, evecs[:, 0], evecs[:, 1], False
    if not degenerate_fallback:
        raise ValueError(
            f"benign features have rank {rank} < 2; PCA frame is degenerate "
            f"(pass degenerate_fallback=True to pad with canonical axes)")
    kept = [evecs[:, i] for i in range(rank)]
    d = feats.shape[1]
    for i in range(d):
        if len(kept) == 2:
            break
        cand = np.zeros(d)
        cand[i] = 1.0
        for v in kept:
            cand = cand - (cand @ v) * v
        norm = np.linalg.norm(cand)
        if norm > 1e-8:
            kept.append(cand / norm)
    return mean, kept[0], kept[1], True


def project(model: SplitModel, benign_images: np.ndarray, trojan_images: np.ndarray,
            mask, stats: DatasetStats, degenerate_fallback: bool = False) -> ProjectionFrame:
    """PCA frame fitted on the benign cohort only; both cohorts projected.

    x, y come from the top two benign eigenvectors (mask plays no role); z is
    the masked feature magnitude (the frame plays no role).
    """
    if len(benign_images) < 3:
        raise ValueError("benign cohort must have at least 3 samples")
    feats_b = _flat(extract_features(model, benign_images, stats))
    feats_t = _flat(extract_features(model, trojan_images, stats))
    mean, pc1, pc2, padded = _benign_pcs(feats_b, degenerate_fallback)
    if padded:
        warnings.warn("degenerate benign PCA; frame padded with canonical axes",
                      stacklevel=2)
    allf = np.concatenate([feats_b, feats_t])
    centered = allf - mean
    zs = masked_magnitudes(allf, mask)
    cohort = np.array(["benign"] * len(feats_b) + ["trojan"] * len(feats_t))
    return ProjectionFrame(pc1, pc2, centered @ pc1, centered @ pc2, zs, cohort)


def orthogonality_score(frame: ProjectionFrame) -> float:
    """std(z | trojan) / std(z | benign); low = flat trojan hyperplane."""
    z_t = frame.cohort_z("trojan")
    z_b = frame.cohort_z("benign")
    if len(z_t) == 0 or len(z_b) == 0:
        raise ValueError("both cohorts must be nonempty")
    denom = float(z_b.std())
    if denom == 0.0:
        raise ValueError("benign z spread is zero; score undefined")
    return float(z_t.std()) / denom


def save_projection_csv(path, frame: ProjectionFrame) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "z", "cohort"])
        for x, y, z, c in zip(frame.xs, frame.ys, frame.zs, frame.cohort):
            writer.writerow([repr(float(x)), repr(float(y)), repr(float(z)), c])


# ---------------------------------------------------------------------------
# mask serialization (flat index lists)


def save_mask_indices(path, mask: torch.Tensor) -> None:
    flat = mask.detach().reshape(-1)
    idx = torch.nonzero(flat, as_tuple=False).reshape(-1).tolist()
    kvtext.write_kv(path, {
        "shape": list(mask.shape),
        "count": len(idx),
        "indices": idx if idx else "",
        "values": [float(flat[i]) for i in idx] if idx else "",
    })


def load_mask_indices(path) -> torch.Tensor:
    kv = kvtext.read_kv(path)
    shape = kvtext.get_ints(kv, "shape")
    mask = torch.zeros(int(np.prod(shape)))
    if kv["indices"]:
        idx = kvtext.get_ints(kv, "indices")
        vals = kvtext.get_floats(kv, "values")
        for i, v in zip(idx, vals):
            mask[i] = v
    return mask.reshape(shape)
