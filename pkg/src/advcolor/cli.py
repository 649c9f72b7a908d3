"""Command-line surface: dataset generation, training, attack campaigns,
evaluation and reporting.

Every output file is a pure function of (config, seed, checkpoints):
no timestamps or machine state leak into artifacts, so reruns are
byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data, evaluation
from .attacks import make_attack
from .classifier import ConvNetClassifier, logit_margin
from .config import RunConfig, load_config
from .exceptions import AdvColorError, ConfigError
from .validation import quantize255

log = logging.getLogger("advcolor")

MANIFEST_HEADER = ["id", "filename", "label", "target"]


@dataclass
class ImageRecord:
    id: str
    filename: str
    label: int
    target: int | None
    image: np.ndarray


def ingest(directory, n_classes: int = data.N_CLASSES) -> list[ImageRecord]:
    """Read a split directory (images + manifest.csv) into validated records."""
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if not manifest.exists():
        raise ConfigError(f"missing manifest: {manifest}")
    records = []
    with open(manifest, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ConfigError(
                f"{manifest}: header must be {','.join(MANIFEST_HEADER)}, got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ConfigError(f"{manifest}:{lineno}: expected 4 columns, got {len(row)}")
            rid, fname, label_s, target_s = row
            try:
                label = int(label_s)
            except ValueError:
                raise ConfigError(f"{manifest}:{lineno}: label {label_s!r} is not an integer")
            if not 0 <= label < n_classes:
                raise ConfigError(
                    f"{manifest}:{lineno}: label {label} outside [0, {n_classes - 1}]"
                )
            target = None
            if target_s != "":
                target = int(target_s)
                if not 0 <= target < n_classes:
                    raise ConfigError(
                        f"{manifest}:{lineno}: target {target} outside [0, {n_classes - 1}]"
                    )
                if target == label:
                    raise ConfigError(f"{manifest}:{lineno}: target equals ground truth")
            path = directory / fname
            if not path.exists():
                raise ConfigError(f"{manifest}:{lineno}: image file missing: {path}")
            try:
                img = data.load_png(path)
            except Exception as e:
                raise ConfigError(f"{manifest}:{lineno}: cannot decode {path}: {e}") from e
            records.append(ImageRecord(rid, fname, label, target, img))
    if not records:
        log.warning("ingest: %s contains no records", directory)
    return records


def _records_arrays(records):
    X = np.stack([r.image for r in records])
    y = np.array([r.label for r in records], dtype=np.int64)
    targets = np.array(
        [-1 if r.target is None else r.target for r in records], dtype=np.int64
    )
    return X, y, targets


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_make_dataset(cfg: RunConfig) -> None:
    ds = cfg.dataset
    xtr, ytr, xva, yva = data.make_corpus(ds.n_train, ds.n_val, cfg.seed, ds.image_size)
    root = cfg.dataset_dir()
    data.write_split(root / "train", xtr, ytr)
    data.write_split(root / "val", xva, yva, targets=data.default_targets(yva))
    meta = {
        "classes": data.CLASS_NAMES,
        "n_train": ds.n_train,
        "n_val": ds.n_val,
        "image_size": ds.image_size,
        "seed": cfg.seed,
    }
    (root / "dataset_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    log.info("dataset written to %s", root)


def _load_split(cfg, split):
    directory = cfg.dataset_dir() / split
    if not directory.exists():
        raise ConfigError(f"dataset split missing: {directory} (run make-dataset first)")
    return ingest(directory)


def cmd_train(cfg: RunConfig) -> None:
    train_records = _load_split(cfg, "train")
    val_records = _load_split(cfg, "val")
    xtr, ytr, _ = _records_arrays(train_records)
    xva, yva, _ = _records_arrays(val_records)

    mc = cfg.models
    shape = (cfg.dataset.image_size, cfg.dataset.image_size, 3)
    metrics = {}
    specs = [
        ("source", mc.source_architecture, cfg.seed, cfg.source_checkpoint()),
        ("transfer", mc.transfer_architecture, cfg.seed + 1, cfg.transfer_checkpoint()),
    ]
    cfg.models_dir().mkdir(parents=True, exist_ok=True)
    for role, arch, seed, path in specs:
        model = ConvNetClassifier(
            architecture=arch,
            n_classes=data.N_CLASSES,
            input_shape=shape,
            epochs=mc.epochs,
            batch_size=mc.batch_size,
            learning_rate=mc.learning_rate,
            momentum=mc.momentum,
            seed=seed,
        )
        model.fit(xtr, ytr, validation=(xva, yva))
        model.save(path)
        metrics[role] = {
            "architecture": arch,
            "seed": seed,
            "train_accuracy": float(model.score(xtr, ytr)),
            "val_accuracy": float(model.score(xva, yva)),
            "history": model.history_,
        }
        log.info(
            "%s model (%s): train acc %.3f, val acc %.3f",
            role, arch,
            metrics[role]["train_accuracy"],
            metrics[role]["val_accuracy"],
        )
    (cfg.models_dir() / "training_metrics.json").write_text(
        json.dumps(metrics, indent=2, sort_keys=True)
    )


def build_suite(cfg: RunConfig, model):
    """The evaluation suite: the first ``suite_size`` validation images the
    source model classifies correctly, with their manifest targets."""
    val_records = _load_split(cfg, "val")
    X, y, targets = _records_arrays(val_records)
    pred = model.predict(X)
    keep = np.where(pred == y)[0][: cfg.suite_size]
    if len(keep) < cfg.suite_size:
        raise ConfigError(
            f"suite needs {cfg.suite_size} correctly classified validation images,"
            f" only {len(keep)} available"
        )
    ids = [val_records[i].id for i in keep]
    return X[keep], y[keep], targets[keep], ids


def resolve_kappa(block, model, X, y) -> float:
    """A numeric kappa, or a percentile of the suite's clean logit margins."""
    if isinstance(block.kappa, dict):
        margins = logit_margin(model.decision_function(X), y)
        return float(np.percentile(margins, block.kappa["percentile"]))
    return float(block.kappa)


def _budget_tag(budget) -> str:
    if budget is None:
        return "default"
    if isinstance(budget, (list, tuple)):
        return "x".join(str(int(b)) for b in budget)
    return str(int(budget))


def campaign_dir(cfg: RunConfig, block, budget) -> Path:
    name = f"{block.name}__{block.mode}__{block.kappa_tag()}__{_budget_tag(budget)}"
    return cfg.out_dir() / "attacks" / name


def cmd_attack(cfg: RunConfig) -> None:
    if not cfg.attacks:
        raise ConfigError("config.attacks is empty; nothing to run")
    if not cfg.source_checkpoint().exists():
        raise ConfigError(f"missing checkpoint {cfg.source_checkpoint()} (run train first)")
    model = ConvNetClassifier.load(cfg.source_checkpoint())
    X, y, targets, ids = build_suite(cfg, model)

    # Validate before any compute: targeted blocks need manifest targets.
    for block in cfg.attacks:
        if block.targeted and np.any(targets < 0):
            raise ConfigError(
                f"attack {block.name!r} is targeted but the manifest has images"
                " without a target label"
            )

    for block in cfg.attacks:
        kappa = resolve_kappa(block, model, X, y)
        for budget in block.budgets or [None]:
            attack = make_attack(
                block.name,
                budget=budget,
                kappa=kappa,
                targeted=block.targeted,
                **block.params,
            )
            outcomes = attack.perturb(
                model, X, y, targets if block.targeted else None
            )
            out = campaign_dir(cfg, block, budget)
            _write_campaign(cfg, out, block, budget, kappa, attack, outcomes, ids, y, targets)
            agg = evaluation.aggregate(outcomes)
            log.info(
                "%s: success %.1f%%, mean L2 %s, mean C2 %s",
                out.name,
                agg.success_rate,
                f"{agg.mean_l2:.3f}" if agg.mean_l2 is not None else "-",
                f"{agg.mean_c2:.2f}" if agg.mean_c2 is not None else "-",
            )


def _write_campaign(cfg, out, block, budget, kappa, attack, outcomes, ids, y, targets):
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for rid, label, target, o in zip(ids, y, targets, outcomes):
        fname = f"adv_{rid}.png"
        data.save_png(img_dir / fname, o.image)
        rows.append(
            [
                rid,
                fname,
                int(label),
                "" if target < 0 else int(target),
                int(o.success),
                o.iterations,
                repr(o.l2),
                repr(o.linf),
                repr(o.c2),
            ]
        )
    with open(out / "records.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["id", "filename", "label", "target", "success", "iterations", "l2", "linf", "c2"]
        )
        writer.writerows(rows)
    report = {
        "schema_version": 1,
        "seed": cfg.seed,
        "attack": block.name,
        "mode": block.mode,
        "kappa_spec": block.kappa,
        "kappa": kappa,
        "budget": budget,
        "params": {k: v for k, v in attack.get_params().items()},
        "aggregate": evaluation.aggregate(outcomes).as_dict(),
        "config": cfg.snapshot(),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))


def _campaign_dirs(cfg):
    root = cfg.out_dir() / "attacks"
    if not root.exists():
        raise ConfigError(f"no attack outputs under {root} (run attack first)")
    return sorted(d for d in root.iterdir() if (d / "records.csv").exists())


def _read_campaign(cfg, directory):
    report = json.loads((directory / "report.json").read_text())
    rows = []
    with open(directory / "records.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    advs = np.stack([data.load_png(directory / "images" / r["filename"]) for r in rows])
    y = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    success = np.array([bool(int(r["success"])) for r in rows])
    ids = [r["id"] for r in rows]
    return report, advs, y, success, ids


def cmd_evaluate(cfg: RunConfig) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    model = ConvNetClassifier.load(cfg.source_checkpoint())
    if not cfg.transfer_checkpoint().exists():
        raise ConfigError(f"missing checkpoint {cfg.transfer_checkpoint()}")
    transfer_model = ConvNetClassifier.load(cfg.transfer_checkpoint())
    X, y, _, ids = build_suite(cfg, model)
    id_to_clean = {rid: X[i] for i, rid in enumerate(ids)}

    eval_dir = cfg.out_dir() / "evaluate"
    eval_dir.mkdir(parents=True, exist_ok=True)
    ev = cfg.evaluation
    summary = {}
    for camp in _campaign_dirs(cfg):
        report, advs, ys, success, cids = _read_campaign(cfg, camp)
        curves = [
            evaluation.robustness_eval(model, advs, ys, success, "bit_depth", ev.bit_depths),
            evaluation.robustness_eval(model, advs, ys, success, "jpeg", ev.jpeg_qualities),
        ]
        clean = np.stack([id_to_clean[c] for c in cids])
        transfer_rate = evaluation.transfer_eval(advs, ys, clean, transfer_model)
        summary[camp.name] = {
            "robustness": [c.as_dict() for c in curves],
            "transfer_rate": transfer_rate,
            "aggregate": report["aggregate"],
        }

        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
        for ax, curve in zip(axes, curves):
            ax.plot(curve.grid, curve.rates, marker="o")
            ax.set_xlabel(curve.transform)
            ax.set_ylabel("still adversarial (%)")
            ax.set_ylim(-2, 102)
            ax.grid(alpha=0.3)
        fig.suptitle(camp.name)
        fig.tight_layout()
        fig.savefig(eval_dir / f"robustness_{camp.name}.png", dpi=110)
        plt.close(fig)

        sheet_dir = eval_dir / "sheets" / camp.name
        sheet_dir.mkdir(parents=True, exist_ok=True)
        for cid, adv in list(zip(cids, advs))[: ev.contact_sheets]:
            sheet = evaluation.contact_sheet(
                id_to_clean[cid], adv, amplification=ev.amplification
            )
            data.save_png(sheet_dir / f"sheet_{cid}.png", quantize255(sheet))

    (eval_dir / "evaluation.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    log.info("evaluation written to %s", eval_dir)


def cmd_report(cfg: RunConfig) -> None:
    lines = ["# Attack campaign report", ""]
    lines.append("| attack | mode | kappa | budget | success % | mean L2 | mean Linf | mean C2 |")
    lines.append("|---|---|---|---|---|---|---|---|")
    for camp in _campaign_dirs(cfg):
        r = json.loads((camp / "report.json").read_text())
        agg = r["aggregate"]

        def fmt(v, spec=".3f"):
            return "-" if v is None else format(v, spec)

        lines.append(
            "| {attack} | {mode} | {kappa:.3g} | {budget} | {sr:.1f} | {l2} | {linf} | {c2} |".format(
                attack=r["attack"],
                mode=r["mode"],
                kappa=r["kappa"],
                budget=_budget_tag(r["budget"]),
                sr=agg["success_rate"],
                l2=fmt(agg["mean_l2"]),
                linf=fmt(agg["mean_linf"], ".2f"),
                c2=fmt(agg["mean_c2"], ".2f"),
            )
        )
    eval_json = cfg.out_dir() / "evaluate" / "evaluation.json"
    if eval_json.exists():
        summary = json.loads(eval_json.read_text())
        lines += ["", "## Robustness and transfer", ""]
        lines.append("| campaign | transfer % | bit-depth survival % | jpeg survival % |")
        lines.append("|---|---|---|---|")
        for name, entry in summary.items():
            bd, jp = entry["robustness"]
            lines.append(
                f"| {name} | {entry['transfer_rate']:.1f} | "
                f"{', '.join(f'{r:.0f}' for r in bd['rates'])} | "
                f"{', '.join(f'{r:.0f}' for r in jp['rates'])} |"
            )
    path = cfg.out_dir() / "report.md"
    path.write_text("\n".join(lines) + "\n")
    log.info("report written to %s", path)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advcolor",
        description="Perceptual-color adversarial perturbations: desk-scale pipeline",
    )
    parser.add_argument("--config", required=True, help="path to the run config (JSON)")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument("--suite", type=int, default=None, help="override suite size")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument(
        "command",
        choices=["make-dataset", "train", "attack", "evaluate", "report"],
    )
    return parser


COMMANDS = {
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output_dir = args.out
        if args.suite is not None:
            cfg.suite_size = args.suite
        COMMANDS[args.command](cfg)
    except AdvColorError as e:
        log.error("%s", e)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
