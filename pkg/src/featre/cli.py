"""Command line front end.

Subcommands cover the full workflow: build a model zoo (clean and poisoned
training), scan checkpoints for feature-space trojans, mitigate a flagged
model, export the feature-space projection for a model, train the adaptive
attacker, and aggregate scan results against the zoo's ground truth.

Exit codes: 0 success, 1 usage error, 2 runtime failure. The output root
defaults to $FEATRE_OUT (falling back to ./runs); subcommand --out flags
override it. Numeric flags mirror the config dataclass fields; a kv config
file can seed any of them, with explicit flags winning.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import kvtext
from .adaptive import AdaptiveConfig, train_adaptive
from .attacks import KINDS, TriggerSpec, apply_trigger, poison_dataset
from .datakit import (build_reference_set, ensure_dataset, load_reference_set,
                      save_reference_set)
from .featanalysis import (attribute_neurons, orthogonality_score, project,
                           save_projection_csv, top_fraction_mask)
from .mitigation import mitigate, mitigation_report
from .modelkit import (LAST_CONV, TrainConfig, accuracy, attack_success_rate,
                       load_checkpoint, save_checkpoint, split, train)
from .reports import (ZooEntry, ZooManifest, load_all_scans, load_scan,
                      write_aggregate_csv, write_model_report)
from .reveng import REConfig, load_pair_artifacts, scan_model


class _Parser(argparse.ArgumentParser):
    """Argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _out_root() -> str:
    return os.environ.get("FEATRE_OUT", "runs")


def _add_config_flags(parser, cls, skip=()) -> None:
    """One flag per dataclass field, typed from the field default."""
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            parser.add_argument(flag, dest=f.name, default=None,
                                action=argparse.BooleanOptionalAction)
        else:
            parser.add_argument(flag, dest=f.name, default=None,
                                type=type(f.default))


def _config_from_args(cls, args, file_kv=None, prefix=None, **fixed):
    """Defaults <- config file <- explicit flags <- fixed overrides."""
    if file_kv is not None and prefix is not None and any(
            k.startswith(prefix + ".") for k in file_kv):
        cfg = cls.from_kv(file_kv, prefix)
    else:
        cfg = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    given = {k: v for k, v in vars(args).items()
             if k in names and v is not None}
    given.update(fixed)
    return replace(cfg, **given) if given else cfg


def _read_config_file(args):
    path = getattr(args, "config", None)
    return kvtext.read_kv(path) if path else None


def _load_zoo_model(manifest: ZooManifest, model_id: str):
    entry = manifest.get(model_id)
    model, meta = load_checkpoint(manifest.checkpoint_path(model_id))
    return entry, model, meta


def _zoo_data(args, manifest: ZooManifest):
    names = {e.dataset for e in manifest.entries}
    if len(names) > 1:
        raise ValueError(f"zoo mixes datasets {sorted(names)}; scan them separately")
    return ensure_dataset(args.data_root, names.pop())


def _refs_images(manifest: ZooManifest, test_ds) -> dict:
    refset = load_reference_set(Path(manifest.root) / "references.csv")
    return {c: test_ds.images[idx] for c, idx in refset.per_class.items()}


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_zoo_build(args) -> int:
    file_kv = _read_config_file(args)
    tcfg = _config_from_args(TrainConfig, args, file_kv, "train")
    zoo_dir = Path(args.out)
    zoo_dir.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds, stats = ensure_dataset(args.data_root, args.dataset)

    if (zoo_dir / "zoo.meta").exists():
        manifest = ZooManifest.load(zoo_dir)
    else:
        manifest = ZooManifest(str(zoo_dir), [])
    kinds = [k.strip() for k in args.attack_kinds.split(",") if k.strip()]
    for kind in kinds:
        if kind not in KINDS:
            raise ValueError(f"unknown attack kind {kind!r}; known: {sorted(KINDS)}")

    def _register(model_id, model, cfg, spec):
        rel = f"checkpoints/{model_id}.pt"
        ba = accuracy(model, test_ds, stats)
        asr = (attack_success_rate(model, test_ds, spec, stats)
               if spec is not None else float("nan"))
        save_checkpoint(zoo_dir / rel, model, args.dataset, cfg.seed, spec,
                        extra={"ba": ba, "asr": asr})
        manifest.add(ZooEntry(model_id, model.arch, args.dataset, rel,
                              spec is not None, spec, ba, asr, cfg.seed))
        line = f"{model_id}: BA {ba:.4f}"
        if spec is not None:
            line += f" ASR {asr:.4f} ({spec.kind} -> {spec.target})"
        print(line)

    offset = len(manifest)
    for i in range(args.n_benign):
        cfg = replace(tcfg, seed=tcfg.seed + offset + i)
        model, _ = train(train_ds, args.arch, cfg, stats)
        _register(f"benign-{offset + i:02d}", model, cfg, None)
    offset = len(manifest)
    for i in range(args.n_trojan):
        kind = kinds[i % len(kinds)]
        target = args.target if args.target >= 0 else i % stats.num_classes
        spec = TriggerSpec(kind, target=target, poison_rate=args.poison_rate,
                           seed=args.attack_seed + i)
        poisoned = poison_dataset(train_ds, spec)
        cfg = replace(tcfg, seed=tcfg.seed + offset + i)
        model, _ = train(poisoned, args.arch, cfg, stats)
        _register(f"trojan-{kind}-{offset + i:02d}", model, cfg, spec)

    refset = build_reference_set(test_ds, args.ref_per_class, seed=tcfg.seed)
    save_reference_set(zoo_dir / "references.csv", refset)
    manifest.save()
    print(f"zoo at {zoo_dir}: {len(manifest)} models")
    return 0


def _cmd_scan(args) -> int:
    file_kv = _read_config_file(args)
    cfg = _config_from_args(REConfig, args, file_kv, "config")
    manifest = ZooManifest.load(args.zoo)
    _, test_ds, stats = _zoo_data(args, manifest)
    refs = _refs_images(manifest, test_ds)
    ids = args.model_id or [e.model_id for e in manifest.entries]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = print if args.verbose else None
    for model_id in ids:
        _, model, _ = _load_zoo_model(manifest, model_id)
        sp = split(model, args.layer)
        scan = scan_model(sp, refs, stats, cfg, mode=args.mode,
                          stop_on_first_flag=args.stop_on_first_flag,
                          out_dir=out, model_id=model_id, log=log)
        best = scan.best_pair()
        print(f"{model_id}: {scan.verdict} "
              f"(best asr {best.reversed_asr:.3f} at pair "
              f"{best.source}-{best.target}, {scan.wall_time:.1f}s)")
    return 0


def _pick_pair(args, scan) -> tuple[int, int]:
    if args.pair:
        src, _, tgt = args.pair.rpartition("-")
        return int(src), int(tgt)
    flagged = [p for p in scan.pairs if p.flagged]
    best = max(flagged or scan.pairs, key=lambda p: p.reversed_asr)
    return best.source, best.target


def _cmd_mitigate(args) -> int:
    manifest = ZooManifest.load(args.zoo)
    entry, model, _ = _load_zoo_model(manifest, args.model_id)
    if entry.attack is None:
        raise ValueError(f"{args.model_id} is benign in the manifest; "
                         "mitigation scoring needs its attack spec")
    scan = load_scan(args.scan, args.model_id)
    ys, yt = _pick_pair(args, scan)
    pair_dir = Path(args.scan) / args.model_id / f"{ys}-{yt}"
    _, artifacts = load_pair_artifacts(pair_dir)
    _, test_ds, stats = _zoo_data(args, manifest)
    sp = split(model, args.layer)
    patched = mitigate(sp, artifacts["mask_binary"])
    report = mitigation_report(model, patched, test_ds, stats, entry.attack)
    report_kv = {"model_id": args.model_id, "pair": f"{ys}-{yt}"}
    report_kv.update({k: round(v, 6) for k, v in report.items()})
    kvtext.write_kv(pair_dir / "mitigation.meta", report_kv)
    print(f"{args.model_id} pair {ys}-{yt}: "
          f"BA {report['BA_before']:.4f} -> {report['BA_after']:.4f}, "
          f"ASR {report['ASR_before']:.4f} -> {report['ASR_after']:.4f}")
    return 0


def _cmd_analyze(args) -> int:
    manifest = ZooManifest.load(args.zoo)
    entry, model, _ = _load_zoo_model(manifest, args.model_id)
    if entry.attack is None:
        raise ValueError(f"{args.model_id} is benign; the projection needs "
                         "triggered inputs from its attack spec")
    _, test_ds, stats = _zoo_data(args, manifest)
    refs = _refs_images(manifest, test_ds)
    benign = np.concatenate([refs[c] for c in sorted(refs)
                             if c != entry.attack.target])
    trojan = apply_trigger(benign, entry.attack)
    sp = split(model, args.layer)
    if args.scan:
        scan = load_scan(args.scan, args.model_id)
        ys, yt = _pick_pair(args, scan)
        pair_dir = Path(args.scan) / args.model_id / f"{ys}-{yt}"
        _, artifacts = load_pair_artifacts(pair_dir)
        mask = artifacts["mask_binary"]
    else:
        scores = attribute_neurons(sp, trojan, stats, entry.attack.target)
        mask = top_fraction_mask(scores, args.mask_fraction)
    frame = project(sp, benign, trojan, mask, stats)
    score = orthogonality_score(frame)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_projection_csv(out, frame)
    kvtext.write_kv(out.with_suffix(".meta"),
                    {"model_id": args.model_id, "orthogonality_score": score})
    print(f"{args.model_id}: orthogonality score {score:.4f} "
          f"(trojan/benign spread along the masked direction), csv at {out}")
    return 0


def _cmd_adaptive_train(args) -> int:
    file_kv = _read_config_file(args)
    tcfg = _config_from_args(TrainConfig, args, file_kv, "train")
    spec = TriggerSpec(args.attack_kind, target=args.target,
                       poison_rate=args.poison_rate, seed=args.attack_seed)
    acfg = _config_from_args(AdaptiveConfig, args, file_kv, "attack.adaptive",
                             base_attack=spec)
    zoo_dir = Path(args.zoo)
    zoo_dir.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds, stats = ensure_dataset(args.data_root, args.dataset)
    model, _ = train_adaptive(train_ds, args.arch, spec, acfg, tcfg, stats)
    ba = accuracy(model, test_ds, stats)
    asr = attack_success_rate(model, test_ds, spec, stats)
    model_id = args.model_id or f"adaptive-{spec.kind}-{tcfg.seed}"
    rel = f"checkpoints/{model_id}.pt"
    extra = {"ba": ba, "asr": asr}
    extra.update({k: v for k, v in acfg.to_kv().items() if k.startswith("attack.adaptive")})
    save_checkpoint(zoo_dir / rel, model, args.dataset, tcfg.seed, spec, extra=extra)
    if (zoo_dir / "zoo.meta").exists():
        manifest = ZooManifest.load(zoo_dir)
    else:
        manifest = ZooManifest(str(zoo_dir), [])
    manifest.add(ZooEntry(model_id, model.arch, args.dataset, rel, True,
                          spec, ba, asr, tcfg.seed))
    manifest.save()
    print(f"{model_id}: BA {ba:.4f} ASR {asr:.4f}")
    return 0


def _cmd_report(args) -> int:
    manifest = ZooManifest.load(args.zoo)
    scans = load_all_scans(args.scans, manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for entry in manifest.entries:
        write_model_report(out / f"{entry.model_id}.meta", entry,
                           scans[entry.model_id])
    counts = write_aggregate_csv(out / "summary.csv", manifest, scans)
    print(f"TP {counts['TP']} FP {counts['FP']} FN {counts['FN']} "
          f"TN {counts['TN']} Acc {counts['Acc']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def _build_parser() -> _Parser:
    parser = _Parser(prog="featre", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    root = _out_root()

    def _common(p):
        p.add_argument("--config", help="kv config file seeding the flags")
        p.add_argument("--data-root", default=os.path.join(root, "data"))

    p = sub.add_parser("zoo", help="model zoo management")
    zoo_sub = p.add_subparsers(dest="zoo_command", metavar="action")
    pb = zoo_sub.add_parser("build", help="train clean and poisoned models")
    _common(pb)
    pb.add_argument("--out", default=os.path.join(root, "zoo"))
    pb.add_argument("--dataset", default="mnist")
    pb.add_argument("--arch", default="small_cnn_4c2f")
    pb.add_argument("--n-benign", type=int, default=2)
    pb.add_argument("--n-trojan", type=int, default=2)
    pb.add_argument("--attack-kinds", default="patch",
                    help="comma list cycled over the trojaned models")
    pb.add_argument("--target", type=int, default=-1,
                    help="attack target class; -1 cycles per model")
    pb.add_argument("--poison-rate", type=float, default=0.05)
    pb.add_argument("--attack-seed", type=int, default=100)
    pb.add_argument("--ref-per-class", type=int, default=10)
    _add_config_flags(pb, TrainConfig)
    pb.set_defaults(func=_cmd_zoo_build)

    p = sub.add_parser("scan", help="reverse-engineer triggers and flag models")
    _common(p)
    p.add_argument("--zoo", default=os.path.join(root, "zoo"))
    p.add_argument("--out", default=os.path.join(root, "scans"))
    p.add_argument("--model-id", action="append",
                   help="scan only this model (repeatable); default all")
    p.add_argument("--mode", choices=("target_only", "all_pairs"),
                   default="target_only")
    p.add_argument("--layer", default=LAST_CONV)
    p.add_argument("--stop-on-first-flag", action="store_true")
    p.add_argument("--verbose", action="store_true")
    _add_config_flags(p, REConfig)
    p.set_defaults(func=_cmd_scan)

    p = sub.add_parser("mitigate", help="flip masked neurons on a flagged model")
    _common(p)
    p.add_argument("--zoo", default=os.path.join(root, "zoo"))
    p.add_argument("--scan", default=os.path.join(root, "scans"))
    p.add_argument("--model-id", required=True)
    p.add_argument("--pair", help="source-target pair dir name, passed as "
                                  "--pair=-1-3; default: best flagged pair")
    p.add_argument("--layer", default=LAST_CONV)
    p.set_defaults(func=_cmd_mitigate)

    p = sub.add_parser("analyze", help="project features onto the benign plane")
    _common(p)
    p.add_argument("--zoo", default=os.path.join(root, "zoo"))
    p.add_argument("--scan", help="scan dir to take the recovered mask from; "
                                  "default: attribution mask")
    p.add_argument("--model-id", required=True)
    p.add_argument("--pair", help="override the scan pair dir name")
    p.add_argument("--layer", default=LAST_CONV)
    p.add_argument("--mask-fraction", type=float, default=0.03)
    p.add_argument("--out", default=os.path.join(root, "analysis", "projection.csv"))
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("adaptive-train", help="train the detector-aware attacker")
    _common(p)
    p.add_argument("--zoo", default=os.path.join(root, "zoo"))
    p.add_argument("--dataset", default="mnist")
    p.add_argument("--arch", default="small_cnn_4c2f")
    p.add_argument("--model-id")
    p.add_argument("--attack-kind", default="patch")
    p.add_argument("--target", type=int, default=0)
    p.add_argument("--poison-rate", type=float, default=0.05)
    p.add_argument("--attack-seed", type=int, default=100)
    _add_config_flags(p, AdaptiveConfig, skip=("base_attack",))
    _add_config_flags(p, TrainConfig)
    p.set_defaults(func=_cmd_adaptive_train)

    p = sub.add_parser("report", help="score scan verdicts against the zoo")
    p.add_argument("--zoo", default=os.path.join(root, "zoo"))
    p.add_argument("--scans", default=os.path.join(root, "scans"))
    p.add_argument("--out", default=os.path.join(root, "report"))
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help(sys.stderr)
        return 1
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 2
    except Exception as exc:
        print(f"featre: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
