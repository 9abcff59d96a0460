"""Model-zoo bookkeeping and scan-outcome aggregation.

A zoo is a directory of checkpoints plus one manifest recording, per model,
its architecture, training data, ground-truth attack (or benign), and scores.
Scans write one directory per model; this module joins the two into a
confusion matrix (trojaned = positive class) and diff-able report files.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

from . import kvtext
from .attacks import TriggerSpec
from .reveng import ScanResult


@dataclass
class ZooEntry:
    model_id: str
    arch: str
    dataset: str
    checkpoint: str          # path relative to the zoo root
    trojaned: bool
    attack: TriggerSpec = None
    ba: float = float("nan")
    asr: float = float("nan")
    seed: int = 0

    def __post_init__(self):
        if self.trojaned and self.attack is None:
            raise ValueError(f"{self.model_id}: trojaned entry needs an attack spec")

    def to_kv(self, prefix: str) -> dict:
        out = {
            f"{prefix}.model_id": self.model_id,
            f"{prefix}.arch": self.arch,
            f"{prefix}.dataset": self.dataset,
            f"{prefix}.checkpoint": self.checkpoint,
            f"{prefix}.trojaned": self.trojaned,
            f"{prefix}.ba": self.ba,
            f"{prefix}.asr": self.asr,
            f"{prefix}.seed": self.seed,
        }
        if self.attack is not None:
            out.update(self.attack.to_kv(f"{prefix}.attack"))
        return out

    @classmethod
    def from_kv(cls, kv: dict, prefix: str) -> "ZooEntry":
        sub = kvtext.subkeys(kv, prefix)
        attack = None
        if f"{prefix}.attack.kind" in kv:
            attack = TriggerSpec.from_kv(kv, f"{prefix}.attack")
        return cls(
            model_id=sub["model_id"], arch=sub["arch"], dataset=sub["dataset"],
            checkpoint=sub["checkpoint"], trojaned=kvtext.get_bool(sub, "trojaned"),
            attack=attack, ba=kvtext.get_float(sub, "ba"),
            asr=kvtext.get_float(sub, "asr"), seed=kvtext.get_int(sub, "seed"))


@dataclass
class ZooManifest:
    root: str
    entries: list = field(default_factory=list)

    def __post_init__(self):
        ids = [e.model_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate model ids in manifest: {dupes}")

    def __len__(self):
        return len(self.entries)

    def get(self, model_id: str) -> ZooEntry:
        for e in self.entries:
            if e.model_id == model_id:
                return e
        raise KeyError(f"no model {model_id!r} in zoo manifest")

    def add(self, entry: ZooEntry) -> None:
        if any(e.model_id == entry.model_id for e in self.entries):
            raise ValueError(f"duplicate model id {entry.model_id!r}")
        self.entries.append(entry)

    def checkpoint_path(self, model_id: str) -> Path:
        return Path(self.root) / self.get(model_id).checkpoint

    def save(self, path=None) -> Path:
        path = Path(path) if path else Path(self.root) / "zoo.meta"
        kv = {"num_models": len(self.entries)}
        for i, e in enumerate(self.entries):
            kv.update(e.to_kv(f"model.{i}"))
        kvtext.write_kv(path, kv, header="model zoo manifest")
        return path

    @classmethod
    def load(cls, root) -> "ZooManifest":
        path = Path(root) / "zoo.meta"
        if not path.exists():
            raise FileNotFoundError(f"no zoo manifest at {path}")
        kv = kvtext.read_kv(path)
        n = kvtext.get_int(kv, "num_models")
        entries = [ZooEntry.from_kv(kv, f"model.{i}") for i in range(n)]
        return cls(str(root), entries)


def confusion(manifest: ZooManifest, verdicts: dict) -> dict:
    """Score flag verdicts against manifest ground truth.

    `verdicts` maps model_id to a flagged bool; trojaned counts as positive.
    Returns TP/FP/FN/TN and Acc = (TP+TN)/total."""
    if len(manifest) == 0:
        raise ValueError("empty zoo: nothing to score")
    missing = [e.model_id for e in manifest.entries if e.model_id not in verdicts]
    if missing:
        raise ValueError(f"no scan verdict for models: {missing}")
    tp = fp = fn = tn = 0
    for e in manifest.entries:
        flagged = verdicts[e.model_id]
        if e.trojaned:
            tp, fn = tp + int(flagged), fn + int(not flagged)
        else:
            fp, tn = fp + int(flagged), tn + int(not flagged)
    total = tp + fp + fn + tn
    return {"TP": tp, "FP": fp, "FN": fn, "TN": tn, "Acc": (tp + tn) / total}


def load_scan(scan_root, model_id: str) -> ScanResult:
    path = Path(scan_root) / model_id / "scan.meta"
    if not path.exists():
        raise FileNotFoundError(f"no scan result at {path}")
    return ScanResult.from_kv(kvtext.read_kv(path))


def load_all_scans(scan_root, manifest: ZooManifest) -> dict:
    return {e.model_id: load_scan(scan_root, e.model_id) for e in manifest.entries}


def write_model_report(path, entry: ZooEntry, scan: ScanResult) -> None:
    kv = {
        "model_id": entry.model_id,
        "arch": entry.arch,
        "dataset": entry.dataset,
        "ground_truth": "trojaned" if entry.trojaned else "benign",
        "ba": entry.ba,
        "asr": entry.asr,
        "verdict": scan.verdict,
        "correct": scan.flagged == entry.trojaned,
        "wall_time_sec": round(scan.wall_time, 2),
    }
    if entry.attack is not None:
        kv.update(entry.attack.to_kv("attack"))
    for i, p in enumerate(scan.pairs):
        kv.update(p.to_kv(f"pair.{i}"))
    kvtext.write_kv(path, kv, header=f"scan report for {entry.model_id}")


def write_aggregate_csv(path, manifest: ZooManifest, scans: dict) -> dict:
    """One row per model plus the confusion summary; returns the summary."""
    counts = confusion(manifest, {m: s.flagged for m, s in scans.items()})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_id", "arch", "dataset", "ground_truth", "verdict",
                         "correct", "best_reversed_asr", "ba", "asr"])
        for e in manifest.entries:
            s = scans[e.model_id]
            best = s.best_pair().reversed_asr if s.pairs else float("nan")
            writer.writerow([e.model_id, e.arch, e.dataset,
                             "trojaned" if e.trojaned else "benign", s.verdict,
                             s.flagged == e.trojaned, f"{best:.4f}",
                             f"{e.ba:.4f}", f"{e.asr:.4f}"])
        writer.writerow([])
        writer.writerow(["TP", "FP", "FN", "TN", "Acc"])
        writer.writerow([counts["TP"], counts["FP"], counts["FN"], counts["TN"],
                         f"{counts['Acc']:.4f}"])
    return counts
