"""End-to-end acceptance gates, one test per criterion.

These are the expensive, full-pipeline checks: train a small model zoo on
procedural MNIST, scan every model for trojan hyperplanes, mitigate the
flagged ones, and verify the orthogonality and adaptive-attacker trends.
Heavy artifacts (trained checkpoints, scan results) are cached under
tests/_artifacts/acceptance keyed by a config fingerprint, so a warm rerun
of this file takes seconds; delete that directory for a cold run.

Each test prints a single summary line of the form

    [criterion NN] <name>: PASS|FAIL  <numbers>

so the terminal log doubles as the acceptance report.
"""

import subprocess
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn

from featre import kvtext
from featre.adaptive import AdaptiveConfig, train_adaptive
from featre.attacks import TriggerSpec, apply_trigger, poison_dataset
from featre.datakit import DatasetStats, build_reference_set, ensure_dataset, normalize
from featre.featanalysis import (attribute_neurons, extract_features,
                                 orthogonality_score, project, top_fraction_mask)
from featre.mitigation import binarize, mitigate, mitigation_report
from featre.modelkit import (LayeredClassifier, TrainConfig, accuracy,
                             attack_success_rate, load_checkpoint,
                             save_checkpoint, split, train)
from featre.reveng import (REConfig, ScanResult, cost_generator, cost_mask,
                           load_pair_artifacts, reverse_engineer_pair,
                           save_pair_artifacts, scan_model)

torch.set_num_threads(1)

ARTIFACTS = Path(__file__).parent / "_artifacts"
ACC = ARTIFACTS / "acceptance"

TRAIN_EPOCHS = 8
TRAIN_LR = 0.05
REFS_PER_CLASS = 10

# Detection protocol for the zoo. Thresholds and the reference budget stay at
# the published defaults (tau1 0.15, tau2 0.25, tau3 5%, lambda 0.8, 10 refs
# per class). The free knobs are rescaled for a 90-image reference pool on a
# four-conv MNIST net: the scan splits at conv2, where trigger-pinned cells
# still have local receptive fields; spread is measured relative to each
# cell's clean deviation (raw conv activations here sit near std 1.6, so an
# absolute 0.25 bound would reject even the implanted trigger); the generator
# lr drops to 3e-3 and the epoch budget grows to 2400 because one epoch sees
# at most three minibatches at this pool size. Flagging runs early-stop at
# the first in-bounds check past lambda, so the budget only binds on clean
# models.
RE_SPLIT = "conv2"
RECFG = REConfig(std_normalize=True, epochs=2400, batch_size=32, lr_f=3e-3,
                 seed=5)

ZOO_C4 = [
    ("patch-a", TriggerSpec("patch", target=3, poison_rate=0.05, seed=101), 11),
    ("patch-b", TriggerSpec("patch", target=5, poison_rate=0.05, seed=102), 12),
    ("patch-c", TriggerSpec("patch", target=8, poison_rate=0.05, seed=103), 13),
    ("benign-a", None, 21),
    ("benign-b", None, 22),
    ("benign-c", None, 23),
]
# warp and blend are implanted hard (high strength / opacity, 15% poison) so
# the backdoor hyperplane is as separable as the patch one; at gentler
# settings the trojan direction stays entangled with natural variation and
# the generator cannot reach it from 90 reference images
ZOO_C5 = [
    ("warp-a", TriggerSpec("warp", target=5, poison_rate=0.15, seed=201,
                           params={"strength": 6.0}), 31),
    ("warp-b", TriggerSpec("warp", target=2, poison_rate=0.15, seed=202,
                           params={"strength": 6.0}), 32),
    ("blend-a", TriggerSpec("blend", target=8, poison_rate=0.15, seed=301,
                            params={"alpha": 0.7}), 33),
    ("blend-b", TriggerSpec("blend", target=4, poison_rate=0.15, seed=302,
                            params={"alpha": 0.7}), 34),
]
# adaptive twins share seed and base attack with their plain counterparts
ADAPTIVE_TWINS = [("adaptive-a", "patch-a"), ("adaptive-b", "patch-b")]
ACFG = AdaptiveConfig(adv_weight=1.0, mask_fraction=0.03, refresh_every=5,
                      split_layer=RE_SPLIT)

_SPECS = {tag: (spec, seed) for tag, spec, seed in ZOO_C4 + ZOO_C5}
_MODELS: dict = {}
_DATA = None


def _data():
    global _DATA
    if _DATA is None:
        _DATA = ensure_dataset(ARTIFACTS / "data", "mnist")
    return _DATA


def _refs_by_class():
    _, test_ds, _ = _data()
    refset = build_reference_set(test_ds, REFS_PER_CLASS, seed=0)
    return {c: test_ds.images[idx] for c, idx in refset.per_class.items()}


def _pooled_refs(exclude_target: int) -> np.ndarray:
    refs = _refs_by_class()
    return np.concatenate([refs[c] for c in sorted(refs) if c != exclude_target])


def _train_fingerprint(tag: str, spec, seed: int, extra_kv: dict = None) -> str:
    kv = {"tag": tag, "arch": "small_cnn_4c2f", "dataset": "mnist",
          "train.epochs": TRAIN_EPOCHS, "train.lr": TRAIN_LR, "train.seed": seed}
    if spec is not None:
        kv.update(spec.to_kv("attack"))
    if extra_kv:
        kv.update(extra_kv)
    return kvtext.fingerprint(kv)


def _build_model(tag: str):
    """Train (or load from cache) one zoo model; returns (model, spec, ba, asr)."""
    if tag in _MODELS:
        return _MODELS[tag]
    train_ds, test_ds, stats = _data()
    adaptive = tag.startswith("adaptive")
    if adaptive:
        plain_tag = dict(ADAPTIVE_TWINS)[tag]
        spec, seed = _SPECS[plain_tag]
        fp = _train_fingerprint(tag, spec, seed, ACFG.to_kv())
    else:
        spec, seed = _SPECS[tag]
        fp = _train_fingerprint(tag, spec, seed)

    path = ACC / "models" / f"{tag}.pt"
    if path.exists():
        model, meta = load_checkpoint(path)
        if meta.get("build") == fp:
            ba = kvtext.get_float(meta, "ba")
            asr = kvtext.get_float(meta, "asr")
            _MODELS[tag] = (model, spec, ba, asr)
            return _MODELS[tag]

    tcfg = TrainConfig(epochs=TRAIN_EPOCHS, learning_rate=TRAIN_LR, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if adaptive:
            model, _ = train_adaptive(train_ds, "small_cnn_4c2f", spec, ACFG,
                                      tcfg, stats)
        elif spec is not None:
            model, _ = train(poison_dataset(train_ds, spec), "small_cnn_4c2f",
                             tcfg, stats)
        else:
            model, _ = train(train_ds, "small_cnn_4c2f", tcfg, stats)
        ba = accuracy(model, test_ds, stats)
        asr = (attack_success_rate(model, test_ds, spec, stats)
               if spec is not None else float("nan"))
    save_checkpoint(path, model, "mnist", seed, spec,
                    extra={"build": fp, "ba": ba, "asr": asr})
    _MODELS[tag] = (model, spec, ba, asr)
    return _MODELS[tag]


def _scan(tag: str, cfg: REConfig | None = None) -> ScanResult:
    """Scan one zoo model with its zoo's detection config, cached on disk."""
    cfg = cfg or RECFG
    _, _, stats = _data()
    d = ACC / "scans" / tag
    want = kvtext.fingerprint(cfg.to_kv("config"))
    meta_path = d / "scan.meta"
    if meta_path.exists():
        kv = kvtext.read_kv(meta_path)
        if kv.get("fingerprint") == want:
            return ScanResult.from_kv(kv)
    model, _, _, _ = _build_model(tag)
    progress = ACC / "scan_progress.log"
    progress.parent.mkdir(parents=True, exist_ok=True)

    def log(line):
        with open(progress, "a", encoding="utf-8") as fh:
            fh.write(f"{tag} {line}\n")

    return scan_model(split(model, RE_SPLIT), _refs_by_class(), stats, cfg,
                      out_dir=ACC / "scans", model_id=tag, log=log)


def _flagged_pair_dir(tag: str, scan: ScanResult):
    best = max((p for p in scan.pairs if p.flagged),
               key=lambda p: p.reversed_asr)
    return ACC / "scans" / tag / f"{best.source}-{best.target}", best


def _report(num: int, name: str, ok: bool, detail: str) -> None:
    line = f"[criterion {num:02d}] {name}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACC.mkdir(parents=True, exist_ok=True)
    with open(ACC / "criteria.log", "a", encoding="utf-8") as fh:
        fh.write(line + "\n")
    assert ok, line


# ---------------------------------------------------------------------------
# 1: the no-training invariant suite stays fast

FAST_NODES = [
    "tests/test_kvtext.py",
    "tests/test_datakit.py",
    "tests/test_attacks.py",
    "tests/test_featanalysis.py",
    "tests/test_mitigation.py",
    "tests/test_reveng.py::test_blend_endpoints",
    "tests/test_reveng.py::test_blend_midpoint_and_batch",
    "tests/test_reveng.py::test_hinged_active_and_inactive",
    "tests/test_reveng.py::test_hinged_keeps_gradient_when_active",
    "tests/test_reveng.py::test_spread_residual_numpy_oracle",
    "tests/test_reveng.py::test_spread_residual_with_scale",
    "tests/test_reveng.py::test_spread_residual_zero_mask",
    "tests/test_reveng.py::test_controller_grows_on_sustained_violation",
    "tests/test_reveng.py::test_controller_shrinks_on_sustained_satisfaction",
    "tests/test_reveng.py::test_controller_alternation_is_stable",
    "tests/test_reveng.py::test_controller_patience_counts_consecutive",
    "tests/test_reveng.py::test_controller_clamps",
    "tests/test_reveng.py::test_controller_boundary_is_satisfied",
    "tests/test_reveng.py::test_reconfig_kv_round_trip",
    "tests/test_reveng.py::test_pair_run_deterministic",
    "tests/test_reports_cli.py::test_confusion_counts",
    "tests/test_reports_cli.py::test_confusion_empty_zoo",
    "tests/test_reports_cli.py::test_confusion_missing_verdict",
]


def test_criterion_01_invariant_suite_is_fast():
    t0 = time.monotonic()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
         *FAST_NODES],
        cwd=Path(__file__).parent.parent, capture_output=True, text=True)
    dt = time.monotonic() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else "?"
    ok = proc.returncode == 0 and dt < 60.0
    _report(1, "invariant suite under a minute", ok, f"{tail} in {dt:.1f}s")


# ---------------------------------------------------------------------------
# 2: analytic gradients match central finite differences on a tiny model

class _ScalarProbe(nn.Module):
    """x + theta * direction; a one-parameter stand-in for the generator."""

    def __init__(self, direction: torch.Tensor, theta0: float):
        super().__init__()
        self.theta = nn.Parameter(torch.tensor(theta0, dtype=torch.float64))
        self.register_buffer("direction", direction)

    def forward(self, x):
        return x + self.theta * self.direction


def _fd_toy():
    g = torch.Generator().manual_seed(0)
    feat = nn.Sequential(nn.Flatten(), nn.Linear(16, 8), nn.Tanh())
    head = nn.Linear(8, 4)
    model = LayeredClassifier("fdtoy", [("feat", feat), ("head", head)],
                              (1, 4, 4), 4, {})
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g) * 0.7)
    model.double()
    n_params = sum(p.numel() for p in model.parameters())
    assert n_params <= 1000
    sp = split(model, layer="feat")
    x = (torch.randn(6, 1, 4, 4, generator=g) * 0.5).double()
    clean = sp.features((torch.randn(6, 1, 4, 4, generator=g) * 0.5).double()).detach()
    return sp, x, clean, g


def test_criterion_02_gradient_oracle():
    t0 = time.monotonic()
    sp, x, clean, g = _fd_toy()
    h = 1e-5
    worst = 0.0

    direction = torch.randn(x.shape[1:], generator=g).double()
    direction /= direction.pow(2).mean().sqrt()
    m = torch.rand(8, generator=g).double() * 0.8 + 0.1
    # one config with every hinge active, one with every hinge slack
    for cfg in (REConfig(tau1=1e-4, tau2=1e-4, tau3=1e-4),
                REConfig(tau1=10.0, tau2=10.0, tau3=0.9)):
        gen = _ScalarProbe(direction, theta0=0.3)
        cost, parts = cost_generator(sp, gen, x, clean, m, 2, cfg,
                                     w_mse=2.0, w_std=3.0)
        # the hinge branch must not flip inside the fd stencil
        for resid, tau in ((parts["mse"], cfg.tau1), (parts["std_resid"], cfg.tau2)):
            assert abs(resid - tau) > 10 * h
        cost.backward()
        auto = float(gen.theta.grad)
        vals = []
        for s in (+h, -h):
            gen_s = _ScalarProbe(direction, theta0=0.3 + s)
            c, _ = cost_generator(sp, gen_s, x, clean, m, 2, cfg,
                                  w_mse=2.0, w_std=3.0)
            vals.append(float(c))
        fd = (vals[0] - vals[1]) / (2 * h)
        worst = max(worst, abs(auto - fd) / max(abs(fd), 1e-12))

        logits = (torch.randn(8, generator=g) * 0.5).double().requires_grad_(True)
        fbar = torch.rand(8, generator=g).double()
        cost, parts = cost_mask(sp, logits, clean, fbar, 2, cfg, w_density=2.5)
        assert abs(parts["l1_ratio"] - cfg.tau3) > 10 * h
        cost.backward()
        for i in range(8):
            vals = []
            for s in (+h, -h):
                shifted = logits.detach().clone()
                shifted[i] += s
                c, _ = cost_mask(sp, shifted, clean, fbar, 2, cfg, w_density=2.5)
                vals.append(float(c))
            fd = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, abs(float(logits.grad[i]) - fd) / max(abs(fd), 1e-12))

    dt = time.monotonic() - t0
    ok = worst <= 1e-3 and dt < 60.0
    _report(2, "finite-difference gradient oracle", ok,
            f"max rel err {worst:.2e} in {dt:.1f}s")


# ---------------------------------------------------------------------------
# 3: a hand-planted single-neuron backdoor is found and removed

QUAD_STATS = DatasetStats("quad", (0.0,), (1.0,), (1, 8, 8), 4)
PLANTED = 4
QUAD_TARGET = 2


def _quad_model() -> LayeredClassifier:
    """Quadrant-brightness classifier with feature 4 wired to the target logit.

    Features 0-3 average their quadrant (pixel (0,0) excluded so the trigger
    location carries no class evidence); feature 4 fires only when pixel
    (0,0) is bright; features 5-7 are dead. The gate uses a leaky slope so
    the trigger search sees a nonzero gradient below its threshold.
    """
    lin = nn.Linear(64, 8)
    with torch.no_grad():
        lin.weight.zero_()
        lin.bias.zero_()
        for q, (r0, c0) in enumerate([(0, 0), (0, 4), (4, 0), (4, 4)]):
            for r in range(r0, r0 + 4):
                for c in range(c0, c0 + 4):
                    if (r, c) != (0, 0):
                        lin.weight[q, r * 8 + c] = 1.0 / 16.0
        lin.weight[PLANTED, 0] = 20.0
        lin.bias[PLANTED] = -10.0
    head = nn.Linear(8, 4)
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
        for c in range(4):
            head.weight[c, c] = 1.0
        head.weight[QUAD_TARGET, PLANTED] = 50.0
    feat = nn.Sequential(nn.Flatten(), lin, nn.LeakyReLU(0.001))
    return LayeredClassifier("quad", [("feat", feat), ("head", head)],
                             (1, 8, 8), 4, {})


def _quad_images(cls: int, n: int, rng) -> np.ndarray:
    imgs = rng.integers(10, 31, size=(n, 1, 8, 8))
    r0, c0 = [(0, 0), (0, 4), (4, 0), (4, 4)][cls]
    imgs[:, 0, r0:r0 + 4, c0:c0 + 4] = rng.integers(180, 221, size=(n, 4, 4))
    imgs[:, 0, 0, 0] = rng.integers(0, 21, size=n)  # trigger pixel stays dark
    return imgs.astype(np.uint8)


def _set_trigger(images: np.ndarray) -> np.ndarray:
    out = images.copy()
    out[:, 0, 0, 0] = 255
    return out


def test_criterion_03_planted_backdoor_oracle():
    t0 = time.monotonic()
    rng = np.random.default_rng(9)
    model = _quad_model()
    sp = split(model, layer="feat")

    pool = np.concatenate([_quad_images(c, 7, rng) for c in range(4)
                           if c != QUAD_TARGET])
    labels = np.repeat([c for c in range(4) if c != QUAD_TARGET], 7)
    with torch.no_grad():
        pred = model(normalize(pool, QUAD_STATS)).argmax(1).numpy()
        assert (pred == labels).all()
        trig_pred = model(normalize(_set_trigger(pool), QUAD_STATS)).argmax(1)
        assert (trig_pred == QUAD_TARGET).all().item()

    # brute force: smallest single-element pattern value that hits the target
    feats = extract_features(sp, pool, QUAD_STATS).reshape(len(pool), 8)
    need = np.full(8, np.inf)
    for e in range(8):
        for t in np.linspace(0.0, 12.0, 481):
            probed = feats.clone()
            probed[:, e] = t
            with torch.no_grad():
                hit = (sp.head(probed).argmax(1) == QUAD_TARGET).float().mean()
            if hit == 1.0:
                need[e] = t
                break
    ranked = np.argsort(need)
    assert ranked[0] == PLANTED
    assert need[PLANTED] < 0.1 * need[[e for e in range(8) if e != PLANTED]].min()

    cfg = REConfig(epochs=200, warmup_epochs=0, batch_size=16, lr_f=0.01,
                   tau3=0.15, check_every=5, seed=7)
    result, artifacts = reverse_engineer_pair(sp, pool, QUAD_TARGET,
                                              QUAD_STATS, cfg)
    mask = artifacts["mask"]
    rank_ok = int(mask.argmax()) == PLANTED

    flip_mask = torch.zeros(8)
    flip_mask[PLANTED] = 1.0
    fixed = mitigate(sp, flip_mask)
    with torch.no_grad():
        after = (fixed(normalize(_set_trigger(pool), QUAD_STATS)).argmax(1)
                 == QUAD_TARGET).float().mean().item()

    dt = time.monotonic() - t0
    ok = rank_ok and after <= 0.01 and dt < 120.0
    _report(3, "planted-backdoor oracle", ok,
            f"mask argmax {int(mask.argmax())} (planted {PLANTED}), "
            f"asr {1.0:.2f}->{after:.2f}, re-asr {result.reversed_asr:.2f}, "
            f"{dt:.0f}s")


# ---------------------------------------------------------------------------
# 4: patch zoo, verdicts and targets

def test_criterion_04_patch_zoo_verdicts():
    t0 = time.monotonic()
    for tag, spec, _ in ZOO_C4:
        _, _, ba, asr = _build_model(tag)
        if spec is not None:
            assert ba >= 0.97 and asr >= 0.95, f"{tag}: BA {ba:.3f} ASR {asr:.3f}"
    scans = {tag: _scan(tag) for tag, _, _ in ZOO_C4}

    correct = sum(scans[tag].flagged == (spec is not None)
                  for tag, spec, _ in ZOO_C4)
    target_ok = True
    for tag, spec, _ in ZOO_C4:
        if spec is not None and scans[tag].flagged:
            top = scans[tag].best_pair()
            target_ok = target_ok and top.target == spec.target
    verdicts = " ".join(f"{tag}:{'T' if scans[tag].flagged else 'B'}"
                        for tag, _, _ in ZOO_C4)
    dt = time.monotonic() - t0
    ok = correct >= 5 and target_ok
    _report(4, "patch zoo verdicts", ok,
            f"{correct}/6 correct, targets {'ok' if target_ok else 'WRONG'} "
            f"({verdicts}) in {dt:.0f}s")


# ---------------------------------------------------------------------------
# 5: warp and blend trojans still flag without a static patch footprint

def test_criterion_05_feature_space_zoo():
    t0 = time.monotonic()
    for tag, _, _ in ZOO_C5:
        _build_model(tag)
    scans = {tag: _scan(tag) for tag, _, _ in ZOO_C5}
    flags = sum(scans[tag].flagged for tag, _, _ in ZOO_C5)
    detail = " ".join(f"{tag}:{'T' if scans[tag].flagged else 'B'}"
                      for tag, _, _ in ZOO_C5)
    dt = time.monotonic() - t0
    _report(5, "feature-space zoo", flags >= 3, f"{flags}/4 flagged ({detail}) "
            f"in {dt:.0f}s")


# ---------------------------------------------------------------------------
# 6: flipping the reversed mask removes each flagged trojan

def test_criterion_06_mitigation_on_flagged():
    t0 = time.monotonic()
    _, test_ds, stats = _data()
    rows, ok = [], True
    for tag, spec, _ in ZOO_C4 + ZOO_C5:
        if spec is None:
            continue
        scan = _scan(tag)
        if not scan.flagged:
            continue
        model, _, _, _ = _build_model(tag)
        pair_dir, best = _flagged_pair_dir(tag, scan)
        _, artifacts = load_pair_artifacts(pair_dir)
        fixed = mitigate(split(model, RE_SPLIT), artifacts["mask_binary"])
        rep = mitigation_report(model, fixed, test_ds, stats, spec)
        drop = rep["BA_before"] - rep["BA_after"]
        good = rep["ASR_after"] <= 0.05 and drop <= 0.02
        ok = ok and good
        rows.append(f"{tag} asr {rep['ASR_before']:.2f}->{rep['ASR_after']:.3f} "
                    f"ba-drop {drop:.3f}")
    ok = ok and len(rows) > 0
    dt = time.monotonic() - t0
    _report(6, "neuron-flip mitigation", ok,
            "; ".join(rows) + f" in {dt:.0f}s")


# ---------------------------------------------------------------------------
# 7: trojan features sit flat along the compromised directions

def test_criterion_07_orthogonality_scores():
    t0 = time.monotonic()
    _, _, stats = _data()
    pairs = [("patch-a", "benign-a"), ("patch-b", "benign-b"),
             ("patch-c", "benign-c")]
    rows, ok = [], True
    for troj_tag, ben_tag in pairs:
        troj, spec, _, _ = _build_model(troj_tag)
        ben, _, _, _ = _build_model(ben_tag)
        clean = _pooled_refs(spec.target)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            trig = apply_trigger(clean, spec)
            scores = attribute_neurons(split(troj, RE_SPLIT), trig, stats, spec.target)
        mask_t = top_fraction_mask(scores, 0.03)
        s_t = orthogonality_score(project(split(troj, RE_SPLIT), clean, trig, mask_t, stats))

        # any fixed 3% mask for the benign twin: top mean-activation elements
        ben_sp = split(ben, RE_SPLIT)
        act = extract_features(ben_sp, clean, stats).abs().mean(0)
        mask_b = top_fraction_mask(act, 0.03)
        s_b = orthogonality_score(project(ben_sp, clean, trig, mask_b, stats))

        ok = ok and s_t < 0.5 and s_b >= 0.8
        rows.append(f"{troj_tag} {s_t:.2f} / {ben_tag} {s_b:.2f}")
    dt = time.monotonic() - t0
    _report(7, "orthogonality scores", ok, "; ".join(rows) + f" in {dt:.0f}s")


# ---------------------------------------------------------------------------
# 8: starving the mask budget leaves trojan neurons unflipped

def test_criterion_08_mask_budget_ablation():
    t0 = time.monotonic()
    _, test_ds, stats = _data()
    tag = next((t for t, _, _ in ZOO_C5 if t.startswith("warp") and _scan(t).flagged),
               None)
    assert tag is not None, "no warp model was flagged"
    model, spec, _, _ = _build_model(tag)
    scan = _scan(tag)
    pair_dir, best = _flagged_pair_dir(tag, scan)
    _, artifacts5 = load_pair_artifacts(pair_dir)

    cfg1 = replace(RECFG, tau3=0.01)
    d1 = ACC / "ablation" / tag
    pair_dir1 = d1 / f"-1-{best.target}"
    want = kvtext.fingerprint(cfg1.to_kv("config"))
    if (pair_dir1 / "result.meta").exists() and kvtext.fingerprint(
            {k: v for k, v in kvtext.read_kv(pair_dir1 / "result.meta").items()
             if k.startswith("config.")}) == want:
        _, artifacts1 = load_pair_artifacts(pair_dir1)
    else:
        result1, artifacts1 = reverse_engineer_pair(
            split(model, RE_SPLIT), _pooled_refs(best.target), best.target, stats, cfg1)
        save_pair_artifacts(d1, result1, artifacts1, cfg1)

    asr_after = {}
    for frac, artifacts in ((0.01, artifacts1), (0.05, artifacts5)):
        fixed = mitigate(split(model, RE_SPLIT), artifacts["mask_binary"])
        rep = mitigation_report(model, fixed, test_ds, stats, spec)
        asr_after[frac] = rep["ASR_after"]
    gap = asr_after[0.01] - asr_after[0.05]
    dt = time.monotonic() - t0
    _report(8, "mask budget ablation", gap >= 0.10,
            f"{tag} asr-after 1% {asr_after[0.01]:.3f} vs 5% "
            f"{asr_after[0.05]:.3f} (gap {gap:.3f}) in {dt:.0f}s")


# ---------------------------------------------------------------------------
# 9: flagged searches actually satisfied their constraints

def test_criterion_09_constraint_satisfaction():
    audited, ok, worst = 0, True, ""
    for tag, _, _ in ZOO_C4 + ZOO_C5:
        scan = _scan(tag)
        for pair in scan.pairs:
            if not pair.flagged:
                continue
            pair_dir = ACC / "scans" / tag / f"{pair.source}-{pair.target}"
            result, _ = load_pair_artifacts(pair_dir)
            kv = kvtext.read_kv(pair_dir / "result.meta")
            t1 = kvtext.get_float(kv, "config.tau1")
            t2 = kvtext.get_float(kv, "config.tau2")
            t3 = kvtext.get_float(kv, "config.tau3")
            good = (result.mse <= 1.05 * t1 and result.std_resid <= 1.05 * t2
                    and result.l1_ratio <= 1.05 * t3)
            if not good:
                worst = (f" offender {tag} {pair.source}-{pair.target} "
                         f"mse {result.mse:.3f} std {result.std_resid:.3f} "
                         f"l1 {result.l1_ratio:.3f}")
            ok = ok and good
            audited += 1
    ok = ok and audited >= 1
    _report(9, "constraint satisfaction", ok,
            f"{audited} flagged pairs within 1.05x bounds{worst}")


# ---------------------------------------------------------------------------
# 10: orthogonality-aware poisoning trades utility for evasion

def test_criterion_10_adaptive_attack_trend():
    t0 = time.monotonic()
    plain_ba, plain_asr, adapt_ba, adapt_asr = [], [], [], []
    plain_rec, adapt_rec = 0, 0
    for a_tag, p_tag in ADAPTIVE_TWINS:
        _, _, ba, asr = _build_model(p_tag)
        plain_ba.append(ba)
        plain_asr.append(asr)
        plain_rec += _scan(p_tag).flagged
        _, _, ba, asr = _build_model(a_tag)
        adapt_ba.append(ba)
        adapt_asr.append(asr)
        adapt_rec += _scan(a_tag).flagged
    mba_p, mba_a = np.mean(plain_ba), np.mean(adapt_ba)
    masr_p, masr_a = np.mean(plain_asr), np.mean(adapt_asr)
    n = len(ADAPTIVE_TWINS)
    ok = mba_a < mba_p and masr_a < masr_p and adapt_rec <= plain_rec
    dt = time.monotonic() - t0
    _report(10, "adaptive attack trend", ok,
            f"BA {mba_a:.3f}<{mba_p:.3f} ASR {masr_a:.3f}<{masr_p:.3f} "
            f"recall {adapt_rec}/{n} vs {plain_rec}/{n} in {dt:.0f}s")
