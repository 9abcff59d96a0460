"""Attack-side countermeasure: training that fights feature-space detection.

The detector relies on trojan features occupying a tight hyperplane that is
orthogonal to the benign feature distribution. This trainer adds a loss term
rewarding similarity between head outputs of benign features blended with the
current trojan pattern, pulling the two distributions together:

  L = L_ce + adv_weight * mean over benign pairs of
      SIM(B(m*a + (1-m)*t), B(m*a' + (1-m)*t))

with SIM the cosine similarity and (m, t) re-estimated from the poisoned
samples every few epochs via neuron attribution. The mask arrangement above
follows the published similarity term verbatim, which places m on the benign
features rather than on the pattern; `eq2_consistent_masks` switches to the
blend-consistent arrangement (1-m)*a + m*t instead.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import kvtext
from .attacks import TriggerSpec, poison_dataset
from .datakit import DatasetStats, LabeledDataset, normalize
from .featanalysis import attribute_neurons, top_fraction_mask
from .modelkit import (LAST_CONV, TrainConfig, TrainingDiverged, build_model,
                       evaluate, make_optimizer, seed_all, split)


@dataclass
class AdaptiveConfig:
    base_attack: TriggerSpec = None
    adv_weight: float = 1.0
    mask_fraction: float = 0.03
    refresh_every: int = 5
    eq2_consistent_masks: bool = False
    split_layer: str = LAST_CONV  # attack the same feature space the defense scans

    def __post_init__(self):
        if not math.isfinite(self.adv_weight) or self.adv_weight < 0:
            raise ValueError("adv_weight must be finite and >= 0")
        if not 0.0 < self.mask_fraction < 1.0:
            raise ValueError("mask_fraction must lie in (0, 1)")
        if self.refresh_every < 1:
            raise ValueError("refresh_every must be >= 1")
        if not self.split_layer:
            raise ValueError("split_layer must be a layer name")

    def to_kv(self) -> dict:
        out = {} if self.base_attack is None else self.base_attack.to_kv("attack")
        out.update({
            "attack.adaptive.adv_weight": self.adv_weight,
            "attack.adaptive.mask_fraction": self.mask_fraction,
            "attack.adaptive.refresh_every": self.refresh_every,
            "attack.adaptive.eq2_consistent_masks": self.eq2_consistent_masks,
            "attack.adaptive.split_layer": self.split_layer,
        })
        return out

    @classmethod
    def from_kv(cls, kv: dict, prefix: str = "attack.adaptive") -> "AdaptiveConfig":
        base = TriggerSpec.from_kv(kv, "attack") if "attack.kind" in kv else None
        sub = kvtext.subkeys(kv, prefix)
        return cls(base_attack=base, **{k: kvtext.coerce(v) for k, v in sub.items()})


def adaptive_loss(head, a: torch.Tensor, a_prime: torch.Tensor, m: torch.Tensor,
                  t: torch.Tensor, eq2_consistent_masks: bool = False) -> torch.Tensor:
    """Cosine similarity of head outputs for two pattern-blended benign features.

    `a` and `a_prime` may be single feature tensors or matched batches of
    them; batches are averaged. Zero-norm head outputs are an error rather
    than a silent zero."""
    batched = a.dim() > t.dim()
    if not batched:
        a, a_prime = a.unsqueeze(0), a_prime.unsqueeze(0)
    if eq2_consistent_masks:
        u = head((1.0 - m) * a + m * t)
        v = head((1.0 - m) * a_prime + m * t)
    else:
        u = head(m * a + (1.0 - m) * t)
        v = head(m * a_prime + (1.0 - m) * t)
    nu = u.norm(dim=1)
    nv = v.norm(dim=1)
    if bool((nu == 0).any()) or bool((nv == 0).any()):
        raise ValueError("zero-norm logits in similarity term")
    sims = (u * v).sum(1) / (nu * nv)
    return sims.mean()


def _derange(k: int, rng: np.random.Generator) -> np.ndarray:
    """Random permutation of range(k) with no fixed points (k >= 2)."""
    perm = rng.permutation(k)
    fixed = np.flatnonzero(perm == np.arange(k))
    if len(fixed) == 1:
        j = (fixed[0] + 1) % k
        perm[fixed[0]], perm[j] = perm[j], perm[fixed[0]]
    elif len(fixed) > 1:
        perm[fixed] = perm[np.roll(fixed, 1)]
    return perm


def train_adaptive(ds: LabeledDataset, arch, base_attack: TriggerSpec,
                   acfg: AdaptiveConfig, tcfg: TrainConfig, stats: DatasetStats,
                   eval_test: LabeledDataset = None, surrogate=None, log=None):
    """Poison `ds` with `base_attack` and train with the similarity term.

    With adv_weight 0 this consumes the same random streams as plain
    training, so the result matches an ordinary poisoned run bit for bit.
    Returns (model, rows) like the plain trainer.
    """
    if base_attack is None:
        base_attack = acfg.base_attack
    if base_attack is None:
        raise ValueError("no base attack given")
    if base_attack.label_mode != "all_to_one":
        raise ValueError("adaptive training needs a single target class")
    adv = acfg.adv_weight != 0

    poisoned = poison_dataset(ds, base_attack, model=surrogate, stats=stats)
    trojan_images = poisoned.images[poisoned.poisoned_flags]
    if adv and len(trojan_images) == 0:
        raise ValueError("adaptive term needs at least one poisoned sample")

    rng = seed_all(tcfg.seed)
    if isinstance(arch, str):
        model = build_model(arch, in_channels=stats.image_shape[0],
                            num_classes=poisoned.num_classes,
                            image_size=stats.image_shape[1])
    else:
        model = arch
    opt = make_optimizer(model, tcfg)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(tcfg.epochs, 1))
    labels_t = torch.from_numpy(poisoned.labels)
    benign_np = ~poisoned.poisoned_flags
    n = len(poisoned)
    rows = []
    last_state = copy.deepcopy(model.state_dict())
    sp = split(model, acfg.split_layer) if adv else None
    mask = pattern = None
    for epoch in range(tcfg.epochs):
        if adv and epoch % acfg.refresh_every == 0:
            mask, pattern = _refresh_mask_pattern(sp, trojan_images, stats,
                                                  base_attack.target, acfg)
        model.train()
        order = rng.permutation(n)
        loss_sum, seen = 0.0, 0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            x = normalize(poisoned.images[idx], stats)
            y = labels_t[idx]
            opt.zero_grad()
            if adv:
                feats = sp.features(x)
                loss = F.cross_entropy(sp.head(feats), y)
                benign_pos = np.flatnonzero(benign_np[idx])
                if len(benign_pos) >= 2:
                    a = feats[benign_pos]
                    a_prime = feats[benign_pos[_derange(len(benign_pos), rng)]]
                    sim = adaptive_loss(sp.head, a, a_prime, mask, pattern,
                                        acfg.eq2_consistent_masks)
                    loss = loss + acfg.adv_weight * sim
            else:
                loss = F.cross_entropy(model(x), y)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(
                    f"loss became {loss.item()} at epoch {epoch + 1}", last_state)
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
            seen += len(idx)
        sched.step()
        last_state = copy.deepcopy(model.state_dict())
        row = {"epoch": epoch + 1, "loss": loss_sum / seen}
        if eval_test is not None:
            scores = evaluate(model, eval_test, stats, base_attack)
            row["BA"] = scores["BA"]
            if "ASR" in scores:
                row["ASR"] = scores["ASR"]
        rows.append(row)
        if log is not None:
            extras = "".join(f" {k} {v:.4f}" for k, v in row.items() if k != "epoch")
            log(f"epoch {epoch + 1}/{tcfg.epochs}{extras}")
    model.eval()
    return model, rows


def _refresh_mask_pattern(sp, trojan_images: np.ndarray, stats: DatasetStats,
                          target: int, acfg: AdaptiveConfig):
    was_training = sp.training
    sp.eval()
    scores = attribute_neurons(sp, trojan_images, stats, target)
    mask = top_fraction_mask(scores, acfg.mask_fraction)
    with torch.no_grad():
        feats = sp.features(normalize(trojan_images, stats))
        pattern = feats.mean(0)
    if was_training:
        sp.train()
    return mask, pattern
