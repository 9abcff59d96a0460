"""Feature-space trigger recovery.

Given a suspect split model and a few clean reference images per class, this
module searches for a mask m over the inner feature tensor, a feature-space
pattern t, and an input-space trigger generator F such that blending t into
the masked coordinates of clean features drives the head to one target class:

  t = mean over the batch of m * features(F(x))    (recomputed every step)
  blend(a, m, t) = (1 - m) * a + m * t

The search alternates two costs. The generator step minimizes
ce(head(blend(a, m, t)), y_t) plus hinged penalties on the input change mean
square (bound tau1) and on the spread of the masked features across the batch
(bound tau2); a holds cached clean features, so the classification gradient
reaches F only through t. The mask step minimizes the same ce with the
feature mean frozen, plus a hinged penalty on the mask density mean(m)
(bound tau3), with m parameterized as sigmoid(logits).

Penalty weights self-adjust: a residual sitting on the wrong side of its
bound for `weight_patience` straight epochs scales its weight by
`weight_factor` (up when violated, down when satisfied). A recorder keeps the
constraint-satisfying state with the best holdout hit rate so a late
constraint excursion cannot erase a good solution; the model is flagged when
that rate exceeds flag_lambda.

Scanning a model runs one search per candidate target, against pooled
non-target references (source -1) or per source class. A short shared warm-up
ranks targets by cross entropy, then the full runs continue from the warmed
state; a run can stop early once its target is flagged with constraints met.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kvtext
from . import __version__
from .datakit import DatasetStats, normalize, normalized_bounds
from .featanalysis import save_mask_indices
from .mitigation import binarize
from .modelkit import SplitModel


class REDiverged(RuntimeError):
    """A reverse-engineering cost went non-finite."""


# ---------------------------------------------------------------------------
# input-space trigger generator


class _DoubleConv(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        groups = 4 if cout % 4 == 0 else 1
        self.block = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.GroupNorm(groups, cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.GroupNorm(groups, cout),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class UNetGenerator(nn.Module):
    """Small encoder-decoder trigger generator over normalized images.

    Output stays inside the valid normalized pixel range by construction: the
    input is pulled back through a logit, shifted by the network output u,
    and squashed again, so u = 0 reproduces the input exactly. The final conv
    is zero-initialized, making the generator start as the identity.
    """

    def __init__(self, channels: int, low: torch.Tensor, high: torch.Tensor, base: int = 8):
        super().__init__()
        self.inc = _DoubleConv(channels, base)
        self.down1 = _DoubleConv(base, base * 2)
        self.down2 = _DoubleConv(base * 2, base * 4)
        self.up1 = nn.ConvTranspose2d(base * 4, base * 2, 2, stride=2)
        self.dec1 = _DoubleConv(base * 4, base * 2)
        self.up2 = nn.ConvTranspose2d(base * 2, base, 2, stride=2)
        self.dec2 = _DoubleConv(base * 2, base)
        self.out = nn.Conv2d(base, channels, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.register_buffer("low", low.view(1, -1, 1, 1))
        self.register_buffer("high", high.view(1, -1, 1, 1))

    def forward(self, x):
        e1 = self.inc(x)
        e2 = self.down1(F.max_pool2d(e1, 2))
        e3 = self.down2(F.max_pool2d(e2, 2))
        d1 = self.dec1(torch.cat([self.up1(e3), e2], 1))
        d2 = self.dec2(torch.cat([self.up2(d1), e1], 1))
        u = self.out(d2)
        span = self.high - self.low
        unit = ((x - self.low) / span).clamp(1e-4, 1 - 1e-4)
        shifted = torch.sigmoid(torch.logit(unit) + u)
        return self.low + span * shifted


# ---------------------------------------------------------------------------
# configuration and results


@dataclass
class REConfig:
    epochs: int = 400
    warmup_epochs: int = 50
    batch_size: int = 128
    lr_f: float = 1e-3
    lr_mask: float = 1e-1
    tau1: float = 0.15          # input mse bound
    tau2: float = 0.25          # masked-feature spread bound
    tau3: float = 0.05          # mask density bound
    flag_lambda: float = 0.8    # reversed hit rate above this flags the model
    init_weight: float = 1.0
    weight_factor: float = 1.5
    weight_patience: int = 5
    check_every: int = 10
    holdout_frac: float = 0.2
    min_source_for_holdout: int = 5
    std_normalize: bool = False
    early_stop_on_flag: bool = True
    generator_base: int = 8
    seed: int = 0

    def __post_init__(self):
        if min(self.tau1, self.tau2, self.tau3) <= 0:
            raise ValueError("tau bounds must be strictly positive")
        if not 0.0 < self.flag_lambda < 1.0:
            raise ValueError("flag_lambda must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")

    def to_kv(self, prefix: str = "config") -> dict:
        return {f"{prefix}.{k}": v for k, v in asdict(self).items()}

    @classmethod
    def from_kv(cls, kv: dict, prefix: str = "config") -> "REConfig":
        sub = kvtext.subkeys(kv, prefix)
        return cls(**{k: kvtext.coerce(v) for k, v in sub.items()})


@dataclass
class PairResult:
    source: int          # -1 means pooled non-target references
    target: int
    reversed_asr: float
    binarized_asr: float
    mse: float
    std_resid: float
    l1_ratio: float
    flagged: bool
    epochs_run: int
    snapshot_epoch: int  # -1 when the final state was used
    skipped: bool = False

    def to_kv(self, prefix: str) -> dict:
        return {f"{prefix}.{k}": v for k, v in asdict(self).items()}

    @classmethod
    def from_kv(cls, kv: dict, prefix: str) -> "PairResult":
        sub = {k: kvtext.coerce(v) for k, v in kvtext.subkeys(kv, prefix).items()}
        return cls(**sub)


@dataclass
class ScanResult:
    model_id: str
    mode: str
    flagged: bool
    pairs: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def verdict(self) -> str:
        return "trojaned" if self.flagged else "benign"

    def trojaned_pairs(self) -> list:
        return [(p.source, p.target) for p in self.pairs if p.flagged]

    def best_pair(self) -> PairResult:
        return max(self.pairs, key=lambda p: p.reversed_asr)

    def to_kv(self) -> dict:
        pairs_t = self.trojaned_pairs()
        out = {
            "model_id": self.model_id,
            "mode": self.mode,
            "verdict": self.verdict,
            "flagged": self.flagged,
            "trojaned_pairs": ",".join(f"{s}:{t}" for s, t in pairs_t) or "none",
            "num_pairs": len(self.pairs),
            "wall_time_sec": round(self.wall_time, 2),
        }
        for i, p in enumerate(self.pairs):
            out.update(p.to_kv(f"pair.{i}"))
        return out

    @classmethod
    def from_kv(cls, kv: dict) -> "ScanResult":
        n = kvtext.get_int(kv, "num_pairs")
        pairs = [PairResult.from_kv(kv, f"pair.{i}") for i in range(n)]
        return cls(kv["model_id"], kv["mode"], kvtext.get_bool(kv, "flagged"),
                   pairs, float(kv.get("wall_time_sec", 0.0)))


# ---------------------------------------------------------------------------
# core pieces, exposed for direct testing


def blend(a: torch.Tensor, m: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """(1 - m) * a + m * t, elementwise."""
    return (1.0 - m) * a + m * t


def compute_pattern(model: SplitModel, gen: nn.Module, x_batch: torch.Tensor,
                    m: torch.Tensor) -> torch.Tensor:
    """t = mean over the batch of m * features(F(x))."""
    if len(x_batch) == 0:
        raise ValueError("pattern needs a nonempty batch")
    return (m * model.features(gen(x_batch))).mean(0)


def hinged(residual: torch.Tensor, tau: float, weight: float) -> torch.Tensor:
    """weight * residual when the bound is violated, else zero."""
    if float(residual.detach()) > tau:
        return weight * residual
    return residual.new_zeros(())


def spread_residual(feats: torch.Tensor, m: torch.Tensor,
                    scale: torch.Tensor = None) -> torch.Tensor:
    """Mask-weighted mean over elements of the batch std of m * features."""
    scaled = m * feats if scale is None else m * feats / scale
    per_element = scaled.std(0, correction=0)
    return (m * per_element).sum() / m.sum().clamp_min(1e-8)


def cost_generator(model: SplitModel, gen: nn.Module, x: torch.Tensor,
                   clean_feats: torch.Tensor, m: torch.Tensor, target: int,
                   cfg: REConfig, w_mse: float, w_std: float,
                   std_scale: torch.Tensor = None):
    """Generator-step cost; m is treated as a constant by the caller."""
    fx = gen(x)
    feats_f = model.features(fx)
    pattern = (m * feats_f).mean(0)
    logits_out = model.head(blend(clean_feats, m, pattern))
    tvec = torch.full((len(clean_feats),), target, dtype=torch.long)
    ce = F.cross_entropy(logits_out, tvec)
    mse = F.mse_loss(fx, x)
    std_resid = spread_residual(feats_f, m, std_scale)
    cost = ce + hinged(mse, cfg.tau1, w_mse) + hinged(std_resid, cfg.tau2, w_std)
    return cost, {"ce": ce.item(), "mse": mse.item(), "std_resid": std_resid.item()}


def cost_mask(model: SplitModel, logits: torch.Tensor, clean_feats: torch.Tensor,
              feat_mean: torch.Tensor, target: int, cfg: REConfig, w_density: float):
    """Mask-step cost; `feat_mean` is the frozen batch mean of features(F(x)),
    so the pattern m * feat_mean still differentiates through m."""
    m = torch.sigmoid(logits)
    pattern = m * feat_mean
    logits_out = model.head(blend(clean_feats, m, pattern))
    tvec = torch.full((len(clean_feats),), target, dtype=torch.long)
    ce = F.cross_entropy(logits_out, tvec)
    density = m.mean()
    cost = ce + hinged(density, cfg.tau3, w_density)
    return cost, {"ce": ce.item(), "l1_ratio": density.item()}


@torch.no_grad()
def feature_hit_rate(model: SplitModel, clean_feats: torch.Tensor,
                     m: torch.Tensor, pattern: torch.Tensor, target: int) -> float:
    """Fraction of feature vectors pushed to `target` by the masked blend."""
    pred = model.head(blend(clean_feats, m, pattern)).argmax(1)
    return float((pred == target).float().mean().item())


class PenaltyController:
    """One hinged penalty weight with NC-style dynamic adjustment."""

    def __init__(self, tau: float, cfg: REConfig):
        self.tau = tau
        self.weight = cfg.init_weight
        self.factor = cfg.weight_factor
        self.patience = cfg.weight_patience
        self.violated = 0
        self.satisfied = 0

    def update(self, residual: float) -> None:
        if residual > self.tau:
            self.violated += 1
            self.satisfied = 0
            if self.violated >= self.patience:
                self.weight = min(self.weight * self.factor, 1e4)
                self.violated = 0
        else:
            self.satisfied += 1
            self.violated = 0
            if self.satisfied >= self.patience:
                self.weight = max(self.weight / self.factor, 1e-4)
                self.satisfied = 0


# ---------------------------------------------------------------------------
# one (source pool, target) search


class PairRun:
    """Mutable optimization state for one reverse-engineering search."""

    def __init__(self, model: SplitModel, source_images: np.ndarray, target: int,
                 stats: DatasetStats, cfg: REConfig, seed: int, source: int = -1):
        self.model = model
        self.cfg = cfg
        self.target = target
        self.source = source
        self.epochs_run = 0
        self.last_ce = float("inf")
        self.stopped = False
        self.snapshot = None
        self.trace = []

        torch.manual_seed(seed)
        rng = np.random.default_rng(seed)
        n = len(source_images)
        if n == 0:
            raise ValueError("empty source set")
        perm = rng.permutation(n)
        n_hold = int(round(cfg.holdout_frac * n))
        if n < cfg.min_source_for_holdout or n_hold == 0:
            grad_idx = hold_idx = perm  # too few samples to split
        else:
            hold_idx, grad_idx = perm[:n_hold], perm[n_hold:]

        self.x_grad = normalize(source_images[grad_idx], stats)
        x_hold = normalize(source_images[hold_idx], stats)
        with torch.no_grad():
            self.clean_feats = self.model.features(self.x_grad).detach()
            self.holdout_feats = self.model.features(x_hold).detach()
        if cfg.std_normalize:
            # floor at 5% of the layer's mean deviation: cells that are silent
            # on clean references must not blow up the ratio
            s = self.clean_feats.std(0, correction=0)
            self.std_scale = s.clamp_min((0.05 * s.mean()).clamp_min(1e-6))
        else:
            self.std_scale = None

        low, high = normalized_bounds(stats)
        self.gen = UNetGenerator(stats.image_shape[0], low, high, cfg.generator_base)
        self.logits = torch.zeros(self.model.feature_shape, requires_grad=True)
        self.opt_gen = torch.optim.Adam(self.gen.parameters(), lr=cfg.lr_f)
        self.opt_mask = torch.optim.Adam([self.logits], lr=cfg.lr_mask)
        self.ctl_mse = PenaltyController(cfg.tau1, cfg)
        self.ctl_std = PenaltyController(cfg.tau2, cfg)
        self.ctl_density = PenaltyController(cfg.tau3, cfg)
        self.batch_rng = rng

    def run_epochs(self, n_epochs: int) -> None:
        cfg = self.cfg
        n = len(self.x_grad)
        for _ in range(n_epochs):
            if self.stopped:
                return
            if n <= cfg.batch_size:
                batches = [np.arange(n)]
            else:
                order = self.batch_rng.permutation(n)
                batches = [order[s:s + cfg.batch_size] for s in range(0, n, cfg.batch_size)]
            # feed the controllers size-weighted epoch means, not the last
            # batch: a small remainder batch under-estimates the std residual
            # and stalls the weight schedule
            sums = {"mse": 0.0, "std_resid": 0.0, "l1_ratio": 0.0, "ce": 0.0}
            for idx in batches:
                gen_parts = self._step_generator(idx)
                mask_parts = self._step_mask(idx)
                for key in ("mse", "std_resid"):
                    sums[key] += gen_parts[key] * len(idx)
                for key in ("l1_ratio", "ce"):
                    sums[key] += mask_parts[key] * len(idx)
            means = {key: val / n for key, val in sums.items()}
            self.ctl_mse.update(means["mse"])
            self.ctl_std.update(means["std_resid"])
            self.ctl_density.update(means["l1_ratio"])
            self.last_ce = means["ce"]
            self.epochs_run += 1
            self.trace.append({
                "epoch": self.epochs_run, "ce": means["ce"],
                "mse": means["mse"], "std_resid": means["std_resid"],
                "l1_ratio": means["l1_ratio"],
                "w_mse": self.ctl_mse.weight, "w_std": self.ctl_std.weight,
                "w_density": self.ctl_density.weight,
            })
            if self.epochs_run % cfg.check_every == 0:
                metrics = self.check()
                self._consider_snapshot(metrics)
                if (cfg.early_stop_on_flag
                        and metrics["reversed_asr"] > cfg.flag_lambda
                        and self._within_bounds(metrics)):
                    self.stopped = True

    def _step_generator(self, idx) -> dict:
        m = torch.sigmoid(self.logits).detach()
        cost, parts = cost_generator(
            self.model, self.gen, self.x_grad[idx], self.clean_feats[idx], m,
            self.target, self.cfg, self.ctl_mse.weight, self.ctl_std.weight,
            self.std_scale)
        self._check_finite(cost)
        self.opt_gen.zero_grad()
        cost.backward()
        self.opt_gen.step()
        return parts

    def _step_mask(self, idx) -> dict:
        x = self.x_grad[idx]
        with torch.no_grad():
            feat_mean = self.model.features(self.gen(x)).mean(0)
        cost, parts = cost_mask(self.model, self.logits, self.clean_feats[idx],
                                feat_mean, self.target, self.cfg,
                                self.ctl_density.weight)
        self._check_finite(cost)
        self.opt_mask.zero_grad()
        cost.backward()
        self.opt_mask.step()
        return parts

    def _check_finite(self, cost) -> None:
        if not torch.isfinite(cost):
            raise REDiverged(
                f"non-finite cost at epoch {self.epochs_run + 1} "
                f"(source {self.source}, target {self.target})")

    @torch.no_grad()
    def check(self) -> dict:
        fx = self.gen(self.x_grad)
        feats_f = self.model.features(fx)
        m = torch.sigmoid(self.logits)
        pattern = (m * feats_f).mean(0)
        return {
            "reversed_asr": feature_hit_rate(self.model, self.holdout_feats,
                                             m, pattern, self.target),
            "mse": F.mse_loss(fx, self.x_grad).item(),
            "std_resid": spread_residual(feats_f, m, self.std_scale).item(),
            "l1_ratio": m.mean().item(),
            "epoch": self.epochs_run,
        }

    def _within_bounds(self, metrics, slack: float = 1.05) -> bool:
        cfg = self.cfg
        return (metrics["mse"] <= slack * cfg.tau1
                and metrics["std_resid"] <= slack * cfg.tau2
                and metrics["l1_ratio"] <= slack * cfg.tau3)

    def _consider_snapshot(self, metrics) -> None:
        if not self._within_bounds(metrics):
            return
        if self.snapshot is not None:
            best = self.snapshot["metrics"]
            better = (metrics["reversed_asr"] > best["reversed_asr"]
                      or (metrics["reversed_asr"] == best["reversed_asr"]
                          and metrics["l1_ratio"] < best["l1_ratio"]))
            if not better:
                return
        self.snapshot = {
            "metrics": dict(metrics),
            "logits": self.logits.detach().clone(),
            "gen_state": copy.deepcopy(self.gen.state_dict()),
        }

    def finish(self) -> tuple[PairResult, dict]:
        """Adopt the recorded best state (if any) and package the result."""
        snapshot_epoch = -1
        if self.snapshot is not None:
            with torch.no_grad():
                self.logits.copy_(self.snapshot["logits"])
            self.gen.load_state_dict(self.snapshot["gen_state"])
            snapshot_epoch = self.snapshot["metrics"]["epoch"]
        metrics = self.check()
        mask = torch.sigmoid(self.logits).detach()
        with torch.no_grad():
            pattern = compute_pattern(self.model, self.gen, self.x_grad, mask)
        mask_bin = binarize(mask, self.cfg.tau3)
        with torch.no_grad():
            pattern_bin = compute_pattern(self.model, self.gen, self.x_grad, mask_bin)
        bin_asr = feature_hit_rate(self.model, self.holdout_feats, mask_bin,
                                   pattern_bin, self.target)
        result = PairResult(
            source=self.source,
            target=self.target,
            reversed_asr=metrics["reversed_asr"],
            binarized_asr=bin_asr,
            mse=metrics["mse"],
            std_resid=metrics["std_resid"],
            l1_ratio=metrics["l1_ratio"],
            flagged=metrics["reversed_asr"] > self.cfg.flag_lambda,
            epochs_run=self.epochs_run,
            snapshot_epoch=snapshot_epoch,
        )
        artifacts = {
            "mask": mask,
            "mask_binary": mask_bin,
            "pattern": pattern.detach(),
            "generator_state": self.gen.state_dict(),
            "trace": list(self.trace),
        }
        return result, artifacts


def reverse_engineer_pair(model: SplitModel, source_images: np.ndarray, target: int,
                          stats: DatasetStats, cfg: REConfig = None,
                          source: int = -1) -> tuple[PairResult, dict]:
    cfg = cfg or REConfig()
    frozen = _freeze(model)
    try:
        run = PairRun(model, source_images, target, stats, cfg, cfg.seed, source)
        run.run_epochs(cfg.epochs)
        return run.finish()
    finally:
        _restore(model, frozen)


# ---------------------------------------------------------------------------
# whole-model scan


def scan_model(model: SplitModel, refs_by_class: dict, stats: DatasetStats,
               cfg: REConfig = None, mode: str = "target_only",
               targets=None, stop_on_first_flag: bool = False,
               out_dir=None, model_id: str = "model", log=None) -> ScanResult:
    """Search every candidate target (optionally per source class); the model
    is declared trojaned if any search exceeds flag_lambda."""
    import time
    t0 = time.monotonic()
    cfg = cfg or REConfig()
    if mode not in ("target_only", "all_pairs"):
        raise ValueError(f"unknown scan mode {mode!r}")
    classes = sorted(refs_by_class)
    targets = list(targets) if targets is not None else classes

    pair_specs = []
    for yt in targets:
        if mode == "target_only":
            pool = np.concatenate([refs_by_class[c] for c in classes if c != yt])
            pair_specs.append((-1, yt, pool))
        else:
            for ys in classes:
                if ys != yt:
                    pair_specs.append((ys, yt, refs_by_class[ys]))

    frozen = _freeze(model)
    try:
        runs = []
        for ys, yt, pool in pair_specs:
            seed = cfg.seed + 977 * yt + (ys + 1)
            runs.append(PairRun(model, pool, yt, stats, cfg, seed, source=ys))

        warm = min(cfg.warmup_epochs, cfg.epochs)
        if warm > 0 and len(runs) > 1:
            for run in runs:
                run.run_epochs(warm)
                if log:
                    log(f"warmup source {run.source} target {run.target} "
                        f"ce {run.last_ce:.4f}")
            runs.sort(key=lambda r: r.last_ce)

        results = []
        flagged_any = False
        for run in runs:
            if stop_on_first_flag and flagged_any:
                result, artifacts = run.finish()
                result.skipped = True
            else:
                run.run_epochs(cfg.epochs - run.epochs_run)
                result, artifacts = run.finish()
            flagged_any = flagged_any or result.flagged
            results.append(result)
            if log:
                log(f"source {result.source} target {result.target} "
                    f"asr {result.reversed_asr:.3f} l1 {result.l1_ratio:.4f} "
                    f"mse {result.mse:.4f} std {result.std_resid:.4f} "
                    f"flagged {result.flagged}")
            if out_dir is not None:
                save_pair_artifacts(Path(out_dir) / model_id, result, artifacts, cfg)
        results.sort(key=lambda r: (r.target, r.source))
        scan = ScanResult(model_id, mode, flagged_any, results,
                          wall_time=time.monotonic() - t0)
        if out_dir is not None:
            d = Path(out_dir) / model_id
            d.mkdir(parents=True, exist_ok=True)
            meta = scan.to_kv()
            meta.update(cfg.to_kv("config"))
            meta["fingerprint"] = kvtext.fingerprint(cfg.to_kv("config"))
            meta["version"] = __version__
            kvtext.write_kv(d / "scan.meta", meta)
        return scan
    finally:
        _restore(model, frozen)


def save_pair_artifacts(model_dir, result: PairResult, artifacts: dict,
                        cfg: REConfig) -> Path:
    d = Path(model_dir) / f"{result.source}-{result.target}"
    d.mkdir(parents=True, exist_ok=True)
    torch.save(artifacts["mask"], d / "mask.pt")
    torch.save(artifacts["mask_binary"], d / "mask_binary.pt")
    torch.save(artifacts["pattern"], d / "pattern.pt")
    torch.save(artifacts["generator_state"], d / "generator.pt")
    save_mask_indices(d / "mask_indices.meta",
                      artifacts["mask"] * artifacts["mask_binary"])
    meta = result.to_kv("result")
    meta.update(cfg.to_kv("config"))
    kvtext.write_kv(d / "result.meta", meta)
    trace = artifacts.get("trace") or []
    if trace:
        with open(d / "loss.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(trace[0].keys()))
            writer.writeheader()
            writer.writerows(trace)
    return d


def load_pair_artifacts(pair_dir) -> tuple[PairResult, dict]:
    d = Path(pair_dir)
    meta = kvtext.read_kv(d / "result.meta")
    result = PairResult.from_kv(meta, "result")
    artifacts = {
        "mask": torch.load(d / "mask.pt", weights_only=True),
        "mask_binary": torch.load(d / "mask_binary.pt", weights_only=True),
        "pattern": torch.load(d / "pattern.pt", weights_only=True),
        "generator_state": torch.load(d / "generator.pt", weights_only=True),
    }
    return result, artifacts


def _freeze(model: nn.Module) -> list:
    state = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return state


def _restore(model: nn.Module, state) -> None:
    for p, flag in zip(model.parameters(), state):
        p.requires_grad_(flag)
