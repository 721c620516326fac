"""Config-driven experiment harness.

Subcommands: gen-data | train | attack | universal | transfer | report.
A single JSON config drives the whole pipeline; every step derives its
randomness from the top-level seed through named substreams, and every
output CSV embeds the config hash plus seed so `report` can refuse mixed
inputs.  The model roster is the nine-row structure of the attack table:
baseline, two experts, two ensembles, four MoE variants.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from . import data as data_mod
from .attacks import (
    AttackSpec,
    apply_noise,
    evaluate_attack,
    load_noise,
    save_noise,
    transfer_matrix,
    universal_pgd,
)
from .ensemble import EnsembleModel, EnsembleRule
from .metrics import EvalRecord, drop_pct, fmt2, read_records, write_records
from .moe import GateKind, MoEModel, load_moe, save_moe, train_moe
from .nets import SegModel, SegNetConfig, TrainConfig, eval_miou, fit, load_model, save_model
from .serialize import file_sha256

ROSTER = (
    "baseline",
    "expert-a",
    "expert-b",
    "ensemble-mean",
    "ensemble-max",
    "moe-simple",
    "moe-simple-conv",
    "moe-classwise",
    "moe-classwise-conv",
)
_SINGLE_GROUP = ROSTER[:3]
_COMBO_GROUP = ROSTER[3:]
_MOE_VARIANTS = {
    "moe-simple": (GateKind.SIMPLE, False),
    "moe-simple-conv": (GateKind.SIMPLE, True),
    "moe-classwise": (GateKind.CLASSWISE, False),
    "moe-classwise-conv": (GateKind.CLASSWISE, True),
}


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# config

_REQUIRED_KEYS = (
    "seed",
    "data.resolution",
    "data.classes",
    "data.counts.train",
    "data.counts.val",
    "data.counts.test",
    "model.hidden",
    "train.experts.epochs",
    "train.experts.batch_size",
    "train.moe.epochs",
    "train.moe.batch_size",
    "train.base_lr",
    "train.power",
    "attacks.families",
    "attacks.epsilons",
    "attacks.pgd.lr",
    "attacks.pgd.steps",
    "attacks.universal.epsilon",
    "attacks.universal.lr",
    "attacks.universal.passes",
    "attacks.universal.batch_size",
)


def load_config(path: str, seed_override: Optional[int] = None) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise CliError(f"config is not valid JSON: {e}")
    if seed_override is not None:
        cfg["seed"] = seed_override
    missing = []
    for dotted in _REQUIRED_KEYS:
        node = cfg
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                missing.append(dotted)
                break
            node = node[part]
    if missing:
        raise CliError("config missing keys: " + ", ".join(missing))
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def substream(seed: int, *names) -> int:
    """Deterministic named sub-seed from the top-level seed."""
    h = hashlib.sha256(("/".join([str(seed), *map(str, names)])).encode()).digest()
    return int.from_bytes(h[:8], "little")


# ---------------------------------------------------------------------------
# shared pieces

def _dataset(cfg: dict) -> data_mod.Dataset:
    d = cfg["data"]
    return data_mod.generate_pair(
        counts=d["counts"],
        resolution=tuple(d["resolution"]),
        num_classes=d["classes"],
        seed=substream(cfg["seed"], "data"),
    )


def _net_config(cfg: dict) -> SegNetConfig:
    return SegNetConfig(
        num_classes=cfg["data"]["classes"],
        hidden=tuple(cfg["model"]["hidden"]),
        resolution=tuple(cfg["data"]["resolution"]),
    )


def _train_config(cfg: dict, kind: str, model_id: str) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        epochs=t[kind]["epochs"],
        batch_size=t[kind]["batch_size"],
        base_lr=t["base_lr"],
        power=t["power"],
        seed=substream(cfg["seed"], "train", model_id),
    )


def _roster_path(models_dir: str) -> str:
    return os.path.join(models_dir, "roster.json")


def _load_roster_meta(models_dir: str, cfg_hash: str) -> dict:
    path = _roster_path(models_dir)
    if not os.path.exists(path):
        raise CliError(f"no roster.json in {models_dir}; run `train` first")
    with open(path) as fh:
        meta = json.load(fh)
    if meta["config_hash"] != cfg_hash:
        raise CliError(
            f"checkpoint/config hash mismatch: roster built with {meta['config_hash']}, "
            f"current config is {cfg_hash}"
        )
    for mid, entry in meta["models"].items():
        fpath = os.path.join(models_dir, entry["file"])
        if not os.path.exists(fpath):
            raise CliError(f"roster references missing checkpoint {fpath}")
        actual = file_sha256(fpath)
        if actual != entry["sha256"]:
            raise CliError(f"checkpoint hash mismatch for {mid}: {fpath}")
    return meta


def build_models(models_dir: str, cfg_hash: str, subset: Optional[List[str]] = None) -> Dict[str, object]:
    """Instantiate the roster from checkpoints; ensembles are derived."""
    _load_roster_meta(models_dir, cfg_hash)
    wanted = list(subset) if subset else list(ROSTER)
    for mid in wanted:
        if mid not in ROSTER:
            raise CliError(f"unknown model id {mid!r}")
    models: Dict[str, object] = {}
    experts = None

    def _experts():
        nonlocal experts
        if experts is None:
            ea = load_model(os.path.join(models_dir, "expert-a.ckpt"))
            eb = load_model(os.path.join(models_dir, "expert-b.ckpt"))
            ea.freeze()
            eb.freeze()
            experts = (ea, eb)
        return experts

    for mid in wanted:
        if mid == "baseline":
            models[mid] = load_model(os.path.join(models_dir, "baseline.ckpt"))
        elif mid == "expert-a":
            models[mid] = load_model(os.path.join(models_dir, "expert-a.ckpt"))
        elif mid == "expert-b":
            models[mid] = load_model(os.path.join(models_dir, "expert-b.ckpt"))
        elif mid == "ensemble-mean":
            models[mid] = EnsembleModel(list(_experts()), EnsembleRule.MEAN)
        elif mid == "ensemble-max":
            models[mid] = EnsembleModel(list(_experts()), EnsembleRule.MAX)
        else:
            models[mid] = load_moe(os.path.join(models_dir, mid + ".moe"))
    return models


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = args.out or os.path.join(args.workdir, "data")
    ds = _dataset(cfg)
    data_mod.save(ds, out)
    n = sum(len(v) for v in ds.splits.values())
    print(f"wrote {n} samples to {out} (config {config_hash(cfg)})")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    chash = config_hash(cfg)
    data_dir = args.data or os.path.join(args.workdir, "data")
    models_dir = args.out or os.path.join(args.workdir, "models")
    os.makedirs(models_dir, exist_ok=True)
    ds = data_mod.load(data_dir)
    net_cfg = _net_config(cfg)
    if args.model is not None and args.model not in ROSTER:
        raise CliError(f"unknown model id {args.model!r}")
    if args.model in ("ensemble-mean", "ensemble-max"):
        raise CliError(f"{args.model} has no trainable parameters; it is derived from the experts")
    wanted = [args.model] if args.model else [m for m in ROSTER
                                              if m not in ("ensemble-mean", "ensemble-max")]
    entries = {}
    if os.path.exists(_roster_path(models_dir)):
        with open(_roster_path(models_dir)) as fh:
            prev = json.load(fh)
        if prev.get("config_hash") == chash:
            entries = prev.get("models", {})

    def _register(mid, fname):
        entries[mid] = {"file": fname, "sha256": file_sha256(os.path.join(models_dir, fname))}

    # experts and baseline
    domain_split = {"expert-a": "A", "expert-b": "B"}
    for mid in ("baseline", "expert-a", "expert-b"):
        if mid not in wanted:
            continue
        model = SegModel(net_cfg, seed=substream(cfg["seed"], "init", mid))
        split = ds.split("train", domain=domain_split.get(mid))
        rep = fit(model, split, _train_config(cfg, "experts", mid), ds.split("val"))
        save_model(model, os.path.join(models_dir, mid + ".ckpt"))
        print(f"trained {mid}: loss {rep.initial_loss:.3f} -> {rep.final_loss:.3f}")
        _register(mid, mid + ".ckpt")

    # MoE variants on frozen experts
    moe_ids = [m for m in _MOE_VARIANTS if m in wanted]
    if moe_ids:
        for req in ("expert-a.ckpt", "expert-b.ckpt"):
            if not os.path.exists(os.path.join(models_dir, req)):
                raise CliError(f"MoE training needs {req}; train the experts first")
        ea = load_model(os.path.join(models_dir, "expert-a.ckpt"))
        eb = load_model(os.path.join(models_dir, "expert-b.ckpt"))
        ea.freeze()
        eb.freeze()
        for mid in moe_ids:
            kind, extra = _MOE_VARIANTS[mid]
            moe = MoEModel([ea, eb], kind, extra_conv=extra,
                           seed=substream(cfg["seed"], "init", mid))
            rep = train_moe(moe, ds.split("train"), _train_config(cfg, "moe", mid),
                            ds.split("val"))
            save_moe(moe, os.path.join(models_dir, mid + ".moe"),
                     [os.path.join(models_dir, "expert-a.ckpt"),
                      os.path.join(models_dir, "expert-b.ckpt")])
            print(f"trained {mid}: loss {rep.initial_loss:.3f} -> {rep.final_loss:.3f}")
            _register(mid, mid + ".moe")

    with open(_roster_path(models_dir), "w") as fh:
        json.dump({"config_hash": chash, "seed": cfg["seed"], "models": entries},
                  fh, indent=1, sort_keys=True)
    print(f"roster written to {models_dir} (config {chash})")
    return 0


def cmd_attack(args) -> int:
    cfg = load_config(args.config, args.seed)
    chash = config_hash(cfg)
    data_dir = args.data or os.path.join(args.workdir, "data")
    models_dir = args.models or os.path.join(args.workdir, "models")
    out_dir = args.out or os.path.join(args.workdir, "records")
    os.makedirs(out_dir, exist_ok=True)
    ds = data_mod.load(data_dir)
    test = ds.split("test")
    subset = [args.model] if args.model else None
    models = build_models(models_dir, chash, subset)
    epsilons = [args.epsilon] if args.epsilon is not None else list(cfg["attacks"]["epsilons"])
    families = list(cfg["attacks"]["families"])
    records = []
    for mid in (m for m in ROSTER if m in models):
        model = models[mid]
        for family in families:
            for eps in epsilons:
                spec = AttackSpec(
                    family=family,
                    epsilon=eps,
                    alpha=cfg["attacks"]["pgd"]["lr"],
                    steps=cfg["attacks"]["pgd"]["steps"],
                    seed=substream(cfg["seed"], "attack", family, mid, eps),
                )
                clean, attacked = evaluate_attack(model, spec, test)
                records.append(EvalRecord(mid, family, eps, clean, attacked))
                print(f"{mid} {family} eps={eps:g}: clean {clean:.4f} -> {attacked:.4f}")
    path = os.path.join(out_dir, "attack.csv")
    write_records(path, records, chash, cfg["seed"])
    print(f"wrote {len(records)} records to {path}")
    return 0


def cmd_universal(args) -> int:
    cfg = load_config(args.config, args.seed)
    chash = config_hash(cfg)
    data_dir = args.data or os.path.join(args.workdir, "data")
    models_dir = args.models or os.path.join(args.workdir, "models")
    noise_dir = args.out or os.path.join(args.workdir, "noise")
    records_dir = os.path.join(args.workdir, "records")
    os.makedirs(noise_dir, exist_ok=True)
    os.makedirs(records_dir, exist_ok=True)
    ds = data_mod.load(data_dir)
    ucfg = cfg["attacks"]["universal"]
    eps = ucfg["epsilon"] if args.epsilon is None else args.epsilon
    subset = [args.model] if args.model else None
    models = build_models(models_dir, chash, subset)
    fit_material = ds.split("train") + ds.split("val")
    test = ds.split("test")
    records = []
    for mid in (m for m in ROSTER if m in models):
        model = models[mid]
        delta, _ = universal_pgd(
            model, fit_material, eps,
            lr=ucfg["lr"], passes=ucfg["passes"], batch_size=ucfg["batch_size"],
            seed=substream(cfg["seed"], "universal", mid),
        )
        save_noise(os.path.join(noise_dir, mid + ".nz"), delta, eps,
                   {"model": mid, "config_hash": chash, "seed": cfg["seed"]})
        clean = eval_miou(model, test)
        attacked = eval_miou(model, test, transform=apply_noise(delta))
        records.append(EvalRecord(mid, "universal", eps, clean, attacked))
        print(f"{mid} universal eps={eps:g}: clean {clean:.4f} -> {attacked:.4f}")
    path = os.path.join(records_dir, "universal.csv")
    write_records(path, records, chash, cfg["seed"])
    print(f"wrote noise to {noise_dir}, records to {path}")
    return 0


def cmd_transfer(args) -> int:
    cfg = load_config(args.config, args.seed)
    chash = config_hash(cfg)
    data_dir = args.data or os.path.join(args.workdir, "data")
    models_dir = args.models or os.path.join(args.workdir, "models")
    noise_dir = args.noise or os.path.join(args.workdir, "noise")
    out_dir = args.out or os.path.join(args.workdir, "records")
    os.makedirs(out_dir, exist_ok=True)
    ds = data_mod.load(data_dir)
    test = ds.split("test")
    models = build_models(models_dir, chash)
    noise = {}
    eps = None
    for mid in models:
        npath = os.path.join(noise_dir, mid + ".nz")
        if not os.path.exists(npath):
            raise CliError(f"missing universal noise for {mid}: {npath}; run `universal` first")
        delta, neps, meta = load_noise(npath)
        if meta.get("config_hash") != chash:
            raise CliError(f"noise/config hash mismatch for {mid}")
        noise[mid] = delta
        eps = neps if eps is None else eps
        if neps != eps:
            raise CliError("universal noise files disagree on epsilon")
    records = transfer_matrix(models, models, noise, test, eps)
    path = os.path.join(out_dir, "transfer.csv")
    write_records(path, records, chash, cfg["seed"])
    # matrix-shaped CSV: rows = source, columns = target, attacked mIoU (%)
    by_pair = {(r.attack.removeprefix("universal-from-"), r.model): r for r in records}
    ordered = [m for m in ROSTER if m in models]
    mpath = os.path.join(out_dir, "transfer_matrix.csv")
    with open(mpath, "w") as fh:
        fh.write(f"# config_hash={chash} seed={cfg['seed']}\n")
        fh.write("source\\target," + ",".join(ordered) + "\n")
        for src in ordered:
            cells = [fmt2(by_pair[(src, tgt)].miou_attack * 100) for tgt in ordered]
            fh.write(src + "," + ",".join(cells) + "\n")
    print(f"wrote {len(records)} transfer records to {path} and matrix to {mpath}")
    return 0


def _mark_best(rows, col_idx, better_high=True):
    """Return per-row marks for the best value among each model group."""
    marks = {i: "" for i in range(len(rows))}
    for group in (_SINGLE_GROUP, _COMBO_GROUP):
        members = [i for i, r in enumerate(rows) if r[0] in group and r[col_idx] is not None]
        if not members:
            continue
        best = max(members, key=lambda i: rows[i][col_idx]) if better_high else \
            min(members, key=lambda i: rows[i][col_idx])
        marks[best] = "*"
    return marks


def cmd_report(args) -> int:
    paths = args.records
    if not paths:
        raise CliError("report needs at least one records CSV (use --records)")
    all_records = []
    hashes = set()
    seeds = set()
    for p in paths:
        raw = os.path.splitext(p)[0] + ".raw" + os.path.splitext(p)[1]
        use = raw if os.path.exists(raw) else p
        recs, h, s = read_records(use)
        all_records.extend(recs)
        hashes.add(h)
        seeds.add(s)
    if len(hashes) > 1:
        raise CliError(f"refusing mixed config hashes in report inputs: {sorted(hashes)}")
    chash = hashes.pop()
    seed = seeds.pop()
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    eps = args.epsilon if args.epsilon is not None else 0.05

    for r in all_records:
        if not (np.isfinite(r.miou_clean) and np.isfinite(r.miou_attack)):
            raise CliError(f"non-finite metric in records for {r.model}/{r.attack}")

    # epsilon sweep CSV (per-instance families), the accuracy-vs-strength shape
    sweep_path = os.path.join(out_dir, "sweep.csv")
    with open(sweep_path, "w") as fh:
        fh.write(f"# config_hash={chash} seed={seed}\n")
        fh.write("model,attack,epsilon,miou_attack\n")
        for r in sorted(all_records, key=lambda r: (r.model, r.attack, r.epsilon)):
            if r.attack in ("fgsm", "bim", "pgd"):
                fh.write(f"{r.model},{r.attack},{r.epsilon:g},{fmt2(r.miou_attack * 100)}\n")

    # attack-table-shaped report at one epsilon
    columns = ["fgsm", "pgd", "universal"]
    titles = {"fgsm": "FGSM", "pgd": "PGD", "universal": "Universal PGD"}
    cell = {}
    clean = {}
    for r in all_records:
        if r.attack in ("fgsm", "pgd") and r.epsilon != eps:
            continue
        cell[(r.model, r.attack)] = r
        clean[r.model] = r.miou_clean
    models = [m for m in ROSTER if m in clean]
    rows = []
    for m in models:
        row = [m, clean[m]]
        for cname in columns:
            r = cell.get((m, cname))
            row.extend([r.miou_attack if r else None, r.drop if r else None])
        rows.append(row)

    clean_marks = _mark_best(rows, 1)
    val_marks = [_mark_best(rows, 2 + 2 * c) for c in range(len(columns))]
    drop_marks = [_mark_best(rows, 3 + 2 * c) for c in range(len(columns))]

    lines = [f"Models under attack, epsilon = {eps:g} (config {chash}, seed {seed})"]
    header = f"{'model':22s} {'No attack':>10s}"
    for cname in columns:
        header += f"  {titles[cname]:>22s}"
    lines.append(header)
    for i, row in enumerate(rows):
        text = f"{row[0]:22s} {fmt2(row[1] * 100) + clean_marks[i]:>10s}"
        for c in range(len(columns)):
            val, drop = row[2 + 2 * c], row[3 + 2 * c]
            if val is None:
                text += f"  {'-':>22s}"
            else:
                piece = f"{fmt2(val * 100)}{val_marks[c][i]} ({fmt2(drop)}%{drop_marks[c][i]})"
                text += f"  {piece:>22s}"
        lines.append(text)
    table = "\n".join(lines)
    print(table)
    with open(os.path.join(out_dir, "table.txt"), "w") as fh:
        fh.write(table + "\n")
    tcsv = os.path.join(out_dir, "table.csv")
    with open(tcsv, "w") as fh:
        fh.write(f"# config_hash={chash} seed={seed}\n")
        fh.write("model,miou_clean," + ",".join(
            f"miou_{c},drop_{c}" for c in columns) + "\n")
        for row in rows:
            parts = [row[0], fmt2(row[1] * 100)]
            for c in range(len(columns)):
                val, drop = row[2 + 2 * c], row[3 + 2 * c]
                parts.extend(["" if val is None else fmt2(val * 100),
                              "" if drop is None else fmt2(drop)])
            fh.write(",".join(parts) + "\n")
    print(f"report written to {out_dir}")
    return 0


# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segmoe",
        description="Adversarial-robustness workbench for MoE segmentation models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="experiment JSON config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--workdir", default="runs/exp", help="default root for artifacts")
        p.add_argument("--out", default=None, help="output directory override")

    p = sub.add_parser("gen-data", help="generate and save the two-domain dataset")
    common(p)

    p = sub.add_parser("train", help="train the full model roster")
    common(p)
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--model", default=None, help="train a single roster entry")

    p = sub.add_parser("attack", help="per-instance attacks over the epsilon grid")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--models", default=None, help="checkpoint directory")
    p.add_argument("--model", default=None, help="attack a single roster entry")
    p.add_argument("--epsilon", type=float, default=None, help="single epsilon instead of the grid")
    p.add_argument("--sweep", action="store_true", help="force the full epsilon grid")

    p = sub.add_parser("universal", help="train+evaluate universal noise per model")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--models", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--epsilon", type=float, default=None)

    p = sub.add_parser("transfer", help="source x target universal-noise matrix")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--models", default=None)
    p.add_argument("--noise", default=None, help="universal noise directory")

    p = sub.add_parser("report", help="render table and epsilon-sweep CSV from records")
    p.add_argument("--records", nargs="+", required=True, help="records CSV files")
    p.add_argument("--epsilon", type=float, default=None, help="table epsilon (default 0.05)")
    p.add_argument("--out", default=None)
    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "universal": cmd_universal,
    "transfer": cmd_transfer,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
