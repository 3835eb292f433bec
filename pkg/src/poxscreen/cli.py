"""``poxscreen`` command line: ingest, folds, train, eval, fuse, explain, report.

Settings are merged with the precedence flags > config file (TOML or JSON)
> environment (``POXSCREEN_OUT_DIR``, ``POXSCREEN_WEIGHTS_DIR``) > defaults,
and the merged result is written as ``run_config.json`` next to every output.

Exit codes: 0 success, 1 internal failure, 2 user or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .errors import PoxscreenError, UserError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger("poxscreen")

OUT_ENV = "POXSCREEN_OUT_DIR"
WEIGHTS_ENV = "POXSCREEN_WEIGHTS_DIR"


@dataclass
class RunConfig:
    dataset_root: str | None = None
    out_dir: str = "poxscreen_out"
    weights_dir: str | None = None
    n_folds: int = 5
    train_fraction: float = 0.70
    fold_seed: int = 42
    backbones: list[str] = field(default_factory=lambda: ["all"])
    fusion_mode: str = "argmax_concat"
    train: dict = field(default_factory=dict)
    head: dict = field(default_factory=dict)

    def finetune_config(self):
        from .training import FineTuneConfig

        return FineTuneConfig.from_dict(self.train)

    def head_config(self, n_classes: int):
        from .backbones import HeadConfig

        return HeadConfig(**{"n_classes": n_classes, **self.head})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, directory: str | Path) -> Path:
        path = Path(directory) / "run_config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path


_SCALARS = {f.name for f in dataclasses.fields(RunConfig)} - {"train", "head"}


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UserError(f"cannot read config file {path}: {exc}") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise UserError(f"cannot parse config file {path}: {exc}") from None
    unknown = set(data) - _SCALARS - {"train", "head"}
    if unknown:
        raise UserError(f"unknown config keys in {path}: {', '.join(sorted(unknown))}")
    return data


def resolve_config(flags: dict, config_path: str | None = None, environ=os.environ) -> RunConfig:
    """Merge settings; ``flags`` maps RunConfig fields (or ``train.<key>``/``head.<key>``) to values,
    ``None`` meaning "not given"."""
    merged = RunConfig().to_dict()
    if environ.get(OUT_ENV):
        merged["out_dir"] = environ[OUT_ENV]
    if environ.get(WEIGHTS_ENV):
        merged["weights_dir"] = environ[WEIGHTS_ENV]
    if config_path:
        for key, value in read_config_file(config_path).items():
            if key in ("train", "head"):
                merged[key].update(value)
            else:
                merged[key] = value
    for key, value in flags.items():
        if value is None:
            continue
        section, _, sub = key.partition(".")
        if sub:
            merged[section][sub] = value
        else:
            merged[key] = value
    if isinstance(merged["backbones"], str):
        merged["backbones"] = [merged["backbones"]]
    cfg = RunConfig(**merged)
    try:
        cfg.finetune_config()
        cfg.head_config(4)
    except (TypeError, ValueError) as exc:
        raise UserError(f"invalid configuration: {exc}") from None
    if cfg.weights_dir:
        os.environ[WEIGHTS_ENV] = cfg.weights_dir
    return cfg


def _backbone_ids(cfg: RunConfig) -> list[str]:
    from .backbones import parse_backbones

    return parse_backbones(",".join(cfg.backbones))


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _require_root(cfg: RunConfig) -> str:
    if not cfg.dataset_root:
        raise UserError("no dataset root given (use --root or dataset_root in the config file)")
    return cfg.dataset_root


def _plan(cfg: RunConfig, index):
    from .dataset import FoldPlan, make_fold_plan

    plan = make_fold_plan(index, cfg.n_folds, cfg.train_fraction, cfg.fold_seed)
    existing = Path(cfg.out_dir) / "fold_plan.json"
    if existing.exists() and FoldPlan.load(existing) != plan:
        raise UserError(f"{existing} was made with different fold settings; use a fresh --out directory")
    return plan


def cmd_ingest(args, cfg: RunConfig) -> int:
    from .dataset import load_dataset
    from .report import counts_table

    index = load_dataset(_require_root(cfg))
    out = Path(cfg.out_dir)
    _write_json(out / "dataset_index.json", {
        "root": str(cfg.dataset_root),
        "counts": index.counts_by_name(),
        "total": len(index),
        "records": [{"id": r.record_id, "path": str(r.source_path), "label": r.label.name} for r in index.records],
        "rejected": [{"path": r.path, "reason": r.reason} for r in index.rejected],
    })
    table = counts_table(index)
    (out / "dataset_counts.md").write_text(table, encoding="utf-8")
    cfg.save(out)
    print(table, end="")
    if index.rejected:
        print(f"{len(index.rejected)} file(s) rejected; see dataset_index.json")
    return 0


def cmd_folds(args, cfg: RunConfig) -> int:
    from .dataset import load_dataset

    index = load_dataset(_require_root(cfg))
    plan = _plan(cfg, index)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan.save(out / "fold_plan.json")
    cfg.save(out)
    for k in range(plan.n_folds):
        print(f"fold {k}: {len(plan.train_ids(k))} train / {len(plan.test_ids(k))} test")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    from .dataset import load_dataset
    from .training import run_experiment

    index = load_dataset(_require_root(cfg))
    plan = _plan(cfg, index)
    backbones = _backbone_ids(cfg)
    cfg.save(cfg.out_dir)

    def progress(model, fold, epoch, m):
        print(f"{model} fold {fold} epoch {epoch + 1}: loss {m['train_loss']:.4f} acc {m['train_accuracy']:.4f} "
              f"test_loss {m['test_loss']:.4f} test_acc {m['test_accuracy']:.4f}", flush=True)

    archive = run_experiment(backbones, plan, index, cfg.finetune_config(), cfg.out_dir,
                             cfg.head_config(len(index.class_vocab)), folds=args.only_fold, progress=progress)
    folds = args.only_fold if args.only_fold is not None else range(plan.n_folds)
    cells = [(b, k) for b in backbones for k in folds]
    failed = [(b, k) for b, k in cells if not archive.is_complete(b, k)]
    print(f"{len(cells) - len(failed)} of {len(cells)} cells complete in {archive.root}")
    for b, k in failed:
        status = archive.cell_status(b, k) or {}
        print(f"failed: {b}/fold{k}: {status.get('error', 'unknown error')}", file=sys.stderr)
    return 1 if failed else 0


def _archive(args, cfg: RunConfig):
    from .archive import ExperimentArchive

    root = Path(args.archive or cfg.out_dir)
    archive = ExperimentArchive(root)
    if not archive.manifest_path.exists():
        raise UserError(f"{root} is not an experiment archive (no manifest)")
    return archive


def _model_list(archive, text: str | None) -> list[str]:
    from .report import registry_order

    if text is None:
        return registry_order(archive.models())
    return [m.strip() for m in text.split(",") if m.strip()]


def cmd_eval(args, cfg: RunConfig) -> int:
    from .report import metrics_table, model_report

    archive = _archive(args, cfg)
    models = _model_list(archive, args.models)
    if not models:
        raise UserError(f"archive {archive.root} has no models")
    folds = list(range(args.folds)) if args.folds else None
    if folds is not None:
        archive.require(models, folds)
    reports = [model_report(archive, m, folds) for m in models]
    table = metrics_table(reports)
    out = Path(args.out or archive.root)
    _write_json(out / "eval.json", {"reports": [r.to_dict() for r in reports]})
    (out / "eval.md").write_text(table, encoding="utf-8")
    cfg.save(out)
    print(table, end="")
    return 0


def cmd_fuse(args, cfg: RunConfig) -> int:
    from .fusion import combo_search, ensemble_name, evaluate_ensemble, fusion_report
    from .report import combo_table, metric_cells, display_name

    archive = _archive(args, cfg)
    mode = cfg.fusion_mode
    out = Path(args.out or archive.root)
    if args.search:
        candidates = _model_list(archive, args.members)
        results = combo_search(candidates, archive, rank_by=args.rank_by, exhaustive=args.search == "exhaustive",
                               top_k=args.top_k, mode=mode, class_names=archive.class_names)
        table = combo_table(results)
        _write_json(out / f"combos_{args.search}.json", {
            "mode": mode, "rank_by": args.rank_by,
            "results": [{"members": list(r.member_ids), "averaged_report": r.report.to_dict()} for r in results],
        })
        (out / f"combos_{args.search}.md").write_text(table, encoding="utf-8")
        print(table, end="")
    else:
        if not args.members:
            raise UserError("give --members a,b,... or --search top5|exhaustive")
        members = _model_list(archive, args.members)
        for m in members:
            if m not in archive.models():
                raise UserError(f"unknown member {m!r}; archive has {', '.join(archive.models())}")
        result, preds = evaluate_ensemble(members, archive, mode=mode, class_names=archive.class_names,
                                          return_predictions=True)
        rep = fusion_report(members, mode, result.per_fold, result.report, preds)
        path = _write_json(out / f"fusion_{ensemble_name(members).replace('+', '_plus_')}.json", rep)
        print(f"{display_name(ensemble_name(members))}: " + " / ".join(metric_cells(result.report)))
        print(f"wrote {path}")
    cfg.save(out)
    return 0


def cmd_explain(args, cfg: RunConfig) -> int:
    from PIL import Image

    from .dataset import load_image
    from .explain import composite_panel, grad_cam, lime_explain, render_overlay
    from .training import ModelArtifact

    artifact = ModelArtifact(args.model)
    artifact.verify()
    try:
        image = load_image(args.image, artifact.image_size)
    except (OSError, ValueError) as exc:
        raise UserError(f"cannot read image {args.image}: {exc}") from None
    x = image / 255.0
    out = Path(args.out or cfg.out_dir) / "explain"
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    shown = Image.fromarray(image.round().clip(0, 255).astype("uint8"))
    heat = lime = None
    if args.method in ("gradcam", "both"):
        heat = grad_cam(artifact, x.astype("float32"), args.layer, args.target_class)
        render_overlay(shown, heat, path=out / f"{stem}_gradcam.png")
        _write_json(out / f"{stem}_gradcam.json", {**heat.sidecar(), "image": str(args.image),
                                                    "is_zero": heat.is_zero, "model": str(args.model)})
        print(f"grad-cam: class {heat.target_class} from {heat.source_layer}")
    if args.method in ("lime", "both"):
        lime = lime_explain(artifact, x, n_features=args.n_features, n_samples=args.n_samples,
                            top_labels=args.top_labels, seed=args.seed)
        render_overlay(shown, lime, path=out / f"{stem}_lime.png")
        (out / f"{stem}_lime.json").write_text(lime.to_json() + "\n", encoding="utf-8")
        print(f"lime: top label {lime.target_labels[0]}, segments {[s for s, _ in lime.selected_features]}")
    if heat is not None and lime is not None:
        composite_panel(shown, heat, lime, path=out / f"{stem}_panel.png")
    cfg.save(out)
    return 0


def cmd_report(args, cfg: RunConfig) -> int:
    from .report import build_report

    archive = _archive(args, cfg)
    ensembles = []
    for p in args.fusion or ():
        try:
            ensembles.append(json.loads(Path(p).read_text(encoding="utf-8")))
        except (OSError, ValueError) as exc:
            raise UserError(f"cannot read fusion report {p}: {exc}") from None
    out = Path(args.out or archive.root) / "report"
    models = _model_list(archive, args.models)
    build_report(archive, out, models, ensembles, figures=not args.no_figures)
    cfg.save(out)
    print(f"wrote {out / 'report.md'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON config file")
    common.add_argument("--out", dest="out_dir", help="output directory (env POXSCREEN_OUT_DIR)")
    common.add_argument("--weights-dir", help="directory with ImageNet weight files (env POXSCREEN_WEIGHTS_DIR)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--root", dest="dataset_root", help="corpus root with one folder per class")
    data.add_argument("--folds", dest="n_folds", type=int, help="number of random splits (default 5)")
    data.add_argument("--train-fraction", type=float)
    data.add_argument("--fold-seed", type=int)

    parser = argparse.ArgumentParser(prog="poxscreen", description="Skin-lesion screening with fused CNN backbones.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("ingest", parents=[common, data], help="index the corpus and count images per class")
    sub.add_parser("folds", parents=[common, data], help="write the seeded fold plan")

    p = sub.add_parser("train", parents=[common, data], help="fine-tune backbones on every fold")
    p.add_argument("--backbones", help='comma-separated ids or "all"')
    p.add_argument("--only-fold", type=int, action="append", help="train only this fold (repeatable)")
    p.add_argument("--epochs", dest="train.max_epochs", type=int)
    p.add_argument("--batch-size", dest="train.batch_size", type=int)
    p.add_argument("--lr", dest="train.initial_lr", type=float)
    p.add_argument("--lr-decay", dest="train.lr_decay", type=float)
    p.add_argument("--patience", dest="train.early_stop_patience", type=int)
    p.add_argument("--image-size", dest="train.image_size", type=int, nargs=2)
    p.add_argument("--seed", dest="train.seed", type=int)
    p.add_argument("--weights", dest="train.weights", help='"imagenet" (default) or "none" for random init')
    p.add_argument("--freeze-backbone", dest="train.freeze_backbone", action="store_true", default=None)

    for name, helptext in (("eval", "fold-averaged metrics table"), ("fuse", "fuse members or search combinations"),
                           ("report", "figures and consolidated report")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--archive", help="experiment directory (default: --out)")
        if name == "eval":
            p.add_argument("--models", help="comma-separated model ids (default: all in the archive)")
            p.add_argument("--folds", type=int, help="use folds 0..N-1 only")
        elif name == "fuse":
            p.add_argument("--members", help="comma-separated model ids")
            p.add_argument("--search", choices=["top5", "exhaustive"])
            p.add_argument("--top-k", type=int, default=5)
            p.add_argument("--rank-by", default="accuracy", choices=["precision", "recall", "f1", "accuracy"])
            p.add_argument("--mode", dest="fusion_mode", choices=["argmax_concat", "plurality"])
        else:
            p.add_argument("--models", help="comma-separated model ids (default: all in the archive)")
            p.add_argument("--fusion", action="append", help="fusion report JSON written by `fuse` (repeatable)")
            p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("explain", parents=[common], help="Grad-CAM and/or LIME for one image")
    p.add_argument("--model", required=True, help="model directory (model.keras + meta.json)")
    p.add_argument("--image", required=True)
    p.add_argument("--method", choices=["gradcam", "lime", "both"], default="both")
    p.add_argument("--layer", help="Grad-CAM layer (default: the backbone's last conv block)")
    p.add_argument("--target-class", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-samples", type=int, default=1000)
    p.add_argument("--n-features", type=int, default=5)
    p.add_argument("--top-labels", type=int, default=4)
    return parser


COMMANDS = {"ingest": cmd_ingest, "folds": cmd_folds, "train": cmd_train, "eval": cmd_eval,
            "fuse": cmd_fuse, "explain": cmd_explain, "report": cmd_report}
_CONFIG_KEYS = ("dataset_root", "out_dir", "weights_dir", "n_folds", "train_fraction", "fold_seed",
                "backbones", "fusion_mode")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    ns = vars(args)
    flags = {k: ns.get(k) for k in _CONFIG_KEYS}
    flags.update({k: v for k, v in ns.items() if k.startswith(("train.", "head."))})
    if flags["backbones"] is not None:
        flags["backbones"] = [b.strip() for b in flags["backbones"].split(",")]
    if flags.get("train.weights") == "none":
        flags["train.weights"] = None
        flags["train.weights_none"] = True
    weights_none = flags.pop("train.weights_none", False)
    # store outputs of read-only commands beside the archive unless --out says otherwise
    ns["out"] = ns.get("out_dir")
    try:
        cfg = resolve_config(flags, args.config)
        if weights_none:
            cfg.train["weights"] = None
        return COMMANDS[args.command](args, cfg)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PoxscreenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
