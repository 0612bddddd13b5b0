"""Command-line entry points.

Commands: train-vpr, train-ue, augment, pipeline, eval, import-transforms.
Every configuration key can be overridden with ``--set dotted.name=value``.
Exit codes: 0 success, 2 config validation error, 3 missing dependency,
4 renderer/protocol failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import backbone as backbone_mod
from . import ue_net as ue_mod
from .augment import AugmentConfig, augmentation_epoch
from .backbone import Backbone
from .config import ConfigError, RunConfig
from .dataset import (ConfigurationError, DatasetError, RecordStore,
                      import_transforms, load_manifest, organize, save_manifest)
from .evaluation import emit_report
from .pipeline import (CachingImageLoader, evaluate_recall, run_pipeline,
                       split_real)
from .renderer import RenderProtocolError, RendererError, psnr, render_oracle, render_external
from .training import MetricsLogger, NormalizationStats, train_ue
from .ue_net import UENet

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_RENDERER = 4


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _load_config(args, require_manifest: bool = True) -> RunConfig:
    overrides = _parse_overrides(args.set)
    if getattr(args, "manifest", None):
        overrides["manifest"] = args.manifest
    cfg = RunConfig.load(args.config, overrides)
    cfg.validate(require_manifest=require_manifest)
    return cfg


def _write_run_meta(cfg: RunConfig, command: str) -> None:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    with open(cfg.output_dir / f"{command}.meta.json", "w") as f:
        json.dump({"command": command, "seed": cfg["seed"], "config": cfg.doc}, f,
                  indent=1)


def _make_store(cfg: RunConfig) -> RecordStore:
    records = load_manifest(cfg["manifest"])
    scene_id = records[0].scene_id if records else "scene"
    return RecordStore(scene_id, records, cfg.output_dir / "synthetic")


def _make_renderer(cfg: RunConfig):
    if cfg["renderer.kind"] == "oracle":
        scene = cfg.scene_spec()
        noise = float(cfg["renderer.noise"])
        seed = int(cfg["seed"])

        def render(request):
            return render_oracle(request, scene, seed=seed, noise_level=noise)
        return render

    timeout = float(cfg["renderer.timeout"])
    exchange = cfg["exchange_dir"]

    def render(request):
        return render_external(request, exchange, timeout=timeout)
    return render


def _load_ue(cfg: RunConfig):
    path = cfg["ue_checkpoint"] or str(cfg.output_dir / "ue.pt")
    if not Path(path).exists():
        return None, None
    net, meta = ue_mod.load_checkpoint(path)
    stats_path = Path(path).with_suffix(".stats.json")
    stats = NormalizationStats.load(stats_path) if stats_path.exists() else None
    return net, stats


def cmd_import_transforms(args) -> int:
    cfg = _load_config(args, require_manifest=False)
    records = import_transforms(args.transforms, args.scene_id)
    out = args.output or str(cfg.output_dir / "manifest.json")
    save_manifest(out, args.scene_id, records)
    print(f"imported {len(records)} records -> {out}")
    return EXIT_OK


def cmd_train_vpr(args) -> int:
    cfg = _load_config(args)
    _write_run_meta(cfg, "train-vpr")
    store = _make_store(cfg)
    logger = MetricsLogger(cfg.output_dir / "metrics-vpr.jsonl")
    outcome = run_pipeline(store, cfg.backbone_config(), cfg.train_config(),
                           augment_config=None, organization="regular",
                           tau_pos=cfg.tau_pos, tau_neg=cfg.tau_neg,
                           logger=logger)
    ckpt = cfg.output_dir / "vpr.pt"
    backbone_mod.save_checkpoint(outcome.net, ckpt)
    print(f"best epoch {outcome.best_epoch}; "
          f"test R@1 = {outcome.test_report.recall_at[1]:.4f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_train_ue(args) -> int:
    cfg = _load_config(args)
    vpr_path = cfg["vpr_checkpoint"] or str(cfg.output_dir / "vpr.pt")
    if not Path(vpr_path).exists():
        print(f"error: VPR checkpoint not found at {vpr_path}; "
              "run the train-vpr command first", file=sys.stderr)
        return EXIT_DEPENDENCY
    _write_run_meta(cfg, "train-ue")
    net = backbone_mod.load_checkpoint(vpr_path)
    backbone = Backbone(net)
    store = _make_store(cfg)
    train_real, val_real, _ = split_real(store)
    loader = CachingImageLoader()
    ue = UENet(cfg.ue_config(), seed=int(cfg["seed"]))
    logger = MetricsLogger(cfg.output_dir / "metrics-ue.jsonl")
    _, stats, history = train_ue(backbone, ue, train_real, val_real,
                                 cfg.train_config(), image_loader=loader,
                                 logger=logger)
    ckpt = cfg.output_dir / "ue.pt"
    ue_mod.save_checkpoint(ue, ckpt, extra_meta={"seed": cfg["seed"]})
    stats.save(ckpt.with_suffix(".stats.json"))
    print(f"UE trained for {len(history)} epochs; final val NLL {history[-1]:.4f}; "
          f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = _load_config(args)
    vpr_path = cfg["vpr_checkpoint"] or str(cfg.output_dir / "vpr.pt")
    if not Path(vpr_path).exists():
        print(f"error: VPR checkpoint not found at {vpr_path}", file=sys.stderr)
        return EXIT_DEPENDENCY
    net = backbone_mod.load_checkpoint(vpr_path)
    ue, _ = _load_ue(cfg)
    aug = cfg.augment_config()
    if aug.use_ue and ue is None:
        print("error: augment.use_ue is enabled but no UE checkpoint found; "
              "run the train-ue command first", file=sys.stderr)
        return EXIT_DEPENDENCY
    store = _make_store(cfg)
    train_real, val_real, _ = split_real(store)
    view = organize(train_real + val_real, store.synthetic_records(),
                    "regular", cfg.tau_pos)
    loader = CachingImageLoader()
    summary = augmentation_epoch(net, ue, store, _make_renderer(cfg), aug,
                                 epoch=int(args.epoch), view=view,
                                 backbone=Backbone(net), image_loader=loader,
                                 seed=int(cfg["seed"]),
                                 diagnostics_path=cfg.output_dir / "candidates.json")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _load_config(args)
    _write_run_meta(cfg, "pipeline")
    aug = cfg.augment_config()
    ue, _ = _load_ue(cfg)
    if aug.use_ue and ue is None:
        print("error: pipeline needs a UE checkpoint when augment.use_ue is on; "
              "run the train-ue command first (or set augment.use_ue=false)",
              file=sys.stderr)
        return EXIT_DEPENDENCY
    renderer = _make_renderer(cfg)
    logger = MetricsLogger(cfg.output_dir / "metrics-pipeline.jsonl")

    if args.sweep == "none":
        store = _make_store(cfg)
        outcome = run_pipeline(store, cfg.backbone_config(), cfg.train_config(),
                               augment_config=aug, ue_net=ue, renderer=renderer,
                               organization=cfg["organization"],
                               tau_pos=cfg.tau_pos, tau_neg=cfg.tau_neg,
                               logger=logger)
        ckpt = cfg.output_dir / "vpr-final.pt"
        backbone_mod.save_checkpoint(outcome.net, ckpt)
        emit_report([("pipeline", outcome.test_report)], cfg.output_dir,
                    fmt="table", dataset=store.scene_id)
        print(f"test R@1 = {outcome.test_report.recall_at[1]:.4f}; checkpoint {ckpt}")
        return EXIT_OK

    rows = []
    if args.sweep == "compare":
        conditions = [
            ("regular", None, "regular"),
            ("augmented-regular", aug, "regular"),
            ("augmented-organized", aug, "real_query_synth_db"),
        ]
        for label, acfg, org in conditions:
            store = _make_store(cfg)
            outcome = run_pipeline(store, cfg.backbone_config(), cfg.train_config(),
                                   augment_config=acfg, ue_net=ue,
                                   renderer=renderer, organization=org,
                                   tau_pos=cfg.tau_pos, tau_neg=cfg.tau_neg,
                                   logger=logger)
            rows.append({"condition": label,
                         "recall@1": outcome.test_report.recall_at[1]})
    elif args.sweep == "m":
        for m in (0, 10, 20, 30):
            store = _make_store(cfg)
            acfg = None
            if m > 0:
                acfg = AugmentConfig(m_candidates=m, k_selected=aug.k_selected,
                                     n_references=aug.n_references,
                                     translation_radius=aug.translation_radius,
                                     rotation_max_deg=aug.rotation_max_deg,
                                     retention=aug.retention, use_ue=aug.use_ue)
            outcome = run_pipeline(store, cfg.backbone_config(), cfg.train_config(),
                                   augment_config=acfg, ue_net=ue,
                                   renderer=renderer,
                                   organization=cfg["organization"] if m else "regular",
                                   tau_pos=cfg.tau_pos, tau_neg=cfg.tau_neg,
                                   logger=logger)
            rows.append({"M": m, "recall@1": outcome.test_report.recall_at[1]})
    elif args.sweep == "ablation":
        for retention in ("current_epoch_only", "keep_all"):
            for use_ue in (False, True):
                store = _make_store(cfg)
                acfg = AugmentConfig(m_candidates=aug.m_candidates,
                                     k_selected=aug.k_selected,
                                     n_references=aug.n_references,
                                     translation_radius=aug.translation_radius,
                                     rotation_max_deg=aug.rotation_max_deg,
                                     retention=retention, use_ue=use_ue)
                outcome = run_pipeline(store, cfg.backbone_config(),
                                       cfg.train_config(), augment_config=acfg,
                                       ue_net=ue, renderer=renderer,
                                       organization=cfg["organization"],
                                       tau_pos=cfg.tau_pos, tau_neg=cfg.tau_neg,
                                       logger=logger)
                rows.append({"retention": retention, "use_ue": use_ue,
                             "recall@1": outcome.test_report.recall_at[1]})
    elif args.sweep == "psnr":
        from .pipeline import renderer_quality_rows
        rows = renderer_quality_rows(cfg, ue, logger)
    out = cfg.output_dir / f"sweep-{args.sweep}.json"
    with open(out, "w") as f:
        json.dump(rows, f, indent=1)
    print(json.dumps(rows, indent=1))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    ckpt = cfg["vpr_checkpoint"] or str(cfg.output_dir / "vpr.pt")
    if not Path(ckpt).exists():
        print(f"error: checkpoint not found at {ckpt}", file=sys.stderr)
        return EXIT_DEPENDENCY
    net = backbone_mod.load_checkpoint(ckpt)
    if net.config.descriptor_dim != int(cfg["backbone.descriptor_dim"]):
        print("error: checkpoint descriptor dimension "
              f"{net.config.descriptor_dim} does not match configured "
              f"{cfg['backbone.descriptor_dim']}", file=sys.stderr)
        return EXIT_CONFIG
    store = _make_store(cfg)
    train_real, val_real, test_real = split_real(store)
    queries = test_real or val_real
    report = evaluate_recall(net, queries, train_real + val_real, cfg.tau_pos,
                             image_loader=CachingImageLoader())
    files = emit_report([("eval", report)], cfg.output_dir, fmt="table",
                        dataset=store.scene_id)
    files += emit_report([("eval", report)], cfg.output_dir, fmt="curve_plot",
                         dataset=store.scene_id)
    print(f"R@1 = {report.recall_at[1]:.4f}; wrote {[str(f) for f in files]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vpraug")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--manifest", default=None, help="scene manifest path")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                       help="override any config key by dotted name")

    p = sub.add_parser("train-vpr", help="train the retrieval network (no augmentation)")
    common(p)
    p.set_defaults(func=cmd_train_vpr)

    p = sub.add_parser("train-ue", help="train the uncertainty network")
    common(p)
    p.set_defaults(func=cmd_train_ue)

    p = sub.add_parser("augment", help="run a single augmentation epoch")
    common(p)
    p.add_argument("--epoch", type=int, default=0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("pipeline", help="full training + augmentation pipeline")
    common(p)
    p.add_argument("--sweep", choices=["none", "compare", "m", "ablation", "psnr"],
                   default="none")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("import-transforms",
                       help="convert a nerfstudio-style transforms file to a manifest")
    common(p)
    p.add_argument("transforms", help="transforms.json path")
    p.add_argument("--scene-id", default="scene")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_import_transforms)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (RenderProtocolError, RendererError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RENDERER
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (ConfigError, ConfigurationError, DatasetError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
