"""Command-line surface: generate, train, eval, report.

Exit codes: 0 success, 1 runtime failure, 2 config/validation failure.
Every command writes the fully resolved config to a sidecar file in the
output directory before doing any work.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, apply_overrides, load_config, write_sidecar
from .dataio import DatasetSpec, load_image, read_manifest, sample_kshot, write_generated
from .diffusion import ToyBackbone, ToyBackboneConfig, linear_schedule
from .generation import batch_generate
from .metrics import aggregate_runs, report_to_dict, write_report
from .trainer import build_bank, evaluate, make_scorer, train
from .types import ImageSample, ValidationError
from .vlad import ToyFeatureExtractor, load_adapter, load_bank, save_adapter, save_bank

log = logging.getLogger("cutgen")


def make_backbone(cfg: RunConfig):
    if cfg.backbone == "toy":
        return ToyBackbone(ToyBackboneConfig(T=cfg.steps), schedule=linear_schedule(cfg.steps))
    from .sd_adapter import PretrainedBackbone, PretrainedBackboneConfig

    return PretrainedBackbone(PretrainedBackboneConfig(
        model_id=cfg.backbone, steps=cfg.steps, guidance_scale=cfg.guidance_scale))


def make_extractor(cfg: RunConfig) -> ToyFeatureExtractor:
    # The detector's feature source is pluggable through the library API;
    # the CLI ships the deterministic toy extractor.
    return ToyFeatureExtractor(seed=0)


def _require(cfg: RunConfig, *names: str) -> None:
    for n in names:
        if not getattr(cfg, n):
            raise ValidationError(f"--{n.replace('_', '-')} (or config key {n!r}) is required")
    if "dataset_root" in names and not Path(cfg.dataset_root).exists():
        raise ValidationError(f"dataset root does not exist: {cfg.dataset_root}")


def _dataset_spec(cfg: RunConfig, split: str) -> DatasetSpec:
    layout = "toy" if cfg.layout == "toy" else cfg.layout
    return DatasetSpec(root=Path(cfg.dataset_root), layout=layout,
                       categories=(cfg.category,), split=split)


def cmd_generate(cfg: RunConfig) -> int:
    _require(cfg, "dataset_root", "category")
    write_sidecar(cfg, Path(cfg.out), "resolved_config.generate.yaml")
    spec = _dataset_spec(cfg, "train")
    kshot = sample_kshot(spec, cfg.category, cfg.k, cfg.seed)
    backbone = make_backbone(cfg)
    normals = [ImageSample(load_image(p), cfg.category, p) for p in kshot.paths]
    samples = batch_generate(normals, cfg.resolved_per_image(), cfg.generation(),
                             backbone, include_normals=cfg.include_normals)
    out_dir = Path(cfg.out) / "generated"
    cat_dir = write_generated(samples, out_dir, cfg.category)
    (cat_dir / "kshot.json").write_text(json.dumps(
        {"category": cfg.category, "k": cfg.k, "seed": cfg.seed, "paths": list(kshot.paths)},
        sort_keys=True, indent=2) + "\n")
    log.info("wrote %d samples to %s", len(samples), cat_dir)
    return 0


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "category")
    write_sidecar(cfg, Path(cfg.out), "resolved_config.train.yaml")
    gen_root = Path(cfg.out) / "generated"
    cat_dir = gen_root / cfg.category
    if not cat_dir.exists():
        raise ValidationError(f"no generated dataset at {cat_dir}; run `cutgen generate` first")
    read_manifest(cat_dir)  # fail fast with a clear message
    gen_spec = DatasetSpec(root=gen_root, layout="generated", categories=(cfg.category,))
    from .dataio import load_split

    samples = list(load_split(gen_spec))
    extractor = make_extractor(cfg)
    state_path = Path(cfg.out) / "checkpoints" / "train_state.pt"
    if not cfg.resume and state_path.exists():
        state_path.unlink()
    adapter, rows = train(samples, extractor, cfg.training(),
                          state_path=state_path, resume=cfg.resume)

    kshot_meta = json.loads((cat_dir / "kshot.json").read_text())
    bank_images = [load_image(p) for p in kshot_meta["paths"]]
    bank = build_bank(bank_images, extractor, adapter, input_side=cfg.input_side)

    ckpt_dir = Path(cfg.out) / "checkpoints"
    save_adapter(adapter, ckpt_dir / "adapter.ckpt")
    save_bank(bank, ckpt_dir / "bank.ckpt")
    with open(ckpt_dir / "training_log.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    log.info("trained %d epochs; final loss %.4f", len(rows), rows[-1]["total"])
    return 0


def _eval_single(cfg: RunConfig, seed: int, out_dir: Path):
    ckpt_dir = out_dir / "checkpoints"
    adapter_path = ckpt_dir / "adapter.ckpt"
    if not adapter_path.exists():
        raise ValidationError(f"missing checkpoint: {adapter_path}; run `cutgen train` first")
    adapter = load_adapter(adapter_path)
    bank_path = ckpt_dir / "bank.ckpt"
    bank = load_bank(bank_path) if bank_path.exists() else None
    extractor = make_extractor(cfg)
    scorer = make_scorer(extractor, adapter, bank, cfg.temperature,
                         input_side=cfg.input_side)
    setup = f"{cfg.k}-shot" if cfg.k != "all" else "full-shot"
    return evaluate(scorer, _dataset_spec(cfg, "test"), setup=setup, seed=seed)


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "dataset_root", "category")
    out_root = Path(cfg.out)
    write_sidecar(cfg, out_root, "resolved_config.eval.yaml")
    if cfg.runs <= 1:
        report = _eval_single(cfg, cfg.seed, out_root)
    else:
        seeds = cfg.seeds[: cfg.runs]
        if len(seeds) < cfg.runs:
            raise ValidationError(f"need {cfg.runs} seeds, got {seeds}")
        reports = []
        for s in seeds:
            run_cfg = RunConfig(**{**vars(cfg), "seed": s, "out": str(out_root / f"run_{s}"),
                                   "runs": 1})
            log.info("full pipeline for seed %d", s)
            cmd_generate(run_cfg)
            cmd_train(run_cfg)
            run_report = _eval_single(run_cfg, s, Path(run_cfg.out))
            run_dir = Path(run_cfg.out)
            write_report(run_report, run_dir / "report.json", run_dir / "report.csv")
            reports.append(run_report)
        report = aggregate_runs(reports)
    write_report(report, out_root / "report.json", out_root / "report.csv")
    for metric, stat in report.average.items():
        print(f"{metric}: {stat.mean:.4f} +/- {stat.std:.4f}")
    return 0


def cmd_report(cfg: RunConfig) -> int:
    out_root = Path(cfg.out)
    report_path = out_root / "report.json"
    if not report_path.exists():
        raise ValidationError(f"missing report: {report_path}; run `cutgen eval` first")
    data = json.loads(report_path.read_text())
    print(json.dumps(data["average"], indent=2, sort_keys=True))

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cats = sorted(data["per_category"])
    metrics = sorted(next(iter(data["per_category"].values())))
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(cats), 4))
    width = 0.8 / len(metrics)
    for mi, metric in enumerate(metrics):
        vals = [data["per_category"][c][metric]["mean"] for c in cats]
        errs = [data["per_category"][c][metric]["std"] for c in cats]
        ax.bar([ci + mi * width for ci in range(len(cats))], vals, width,
               yerr=errs, label=metric)
    ax.set_xticks([ci + 0.4 for ci in range(len(cats))])
    ax.set_xticklabels(cats, rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    ax.set_title(f"{data['setup']} (n_runs={data['n_runs']})")
    fig.tight_layout()
    fig.savefig(out_root / "report.png", dpi=120)
    print(f"wrote {out_root / 'report.png'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cutgen",
                                     description="Anomaly sample generation and detector training")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("generate", cmd_generate), ("train", cmd_train),
                     ("eval", cmd_eval), ("report", cmd_report)):
        p = sub.add_parser(name)
        p.set_defaults(fn=fn)
        p.add_argument("--config", type=str, default=None, help="YAML config file")
        p.add_argument("--dataset-root", dest="dataset_root", type=str, default=None)
        p.add_argument("--layout", type=str, default=None, choices=["mvtec", "visa", "toy"])
        p.add_argument("--category", type=str, default=None)
        p.add_argument("--k", type=lambda v: v if v == "all" else int(v), default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--seeds", type=lambda v: [int(x) for x in v.split(",")], default=None)
        p.add_argument("--runs", type=int, default=None)
        p.add_argument("--gamma", type=float, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--lambda", dest="lambda_", type=float, default=None)
        p.add_argument("--beta", type=float, default=None)
        p.add_argument("--omega", type=float, default=None)
        p.add_argument("--per-image", dest="per_image", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--input-side", dest="input_side", type=int, default=None)
        p.add_argument("--toy", action="store_const", const="toy", dest="backbone", default=None,
                       help="use the deterministic toy backbone (and toy dataset layout)")
        p.add_argument("--backbone", dest="backbone", type=str)
        p.add_argument("--resume", action="store_const", const=True, default=None,
                       help="continue training from the saved epoch state")
        p.add_argument("--out", type=str, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "fn", "config")}
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if overrides.get("backbone") == "toy" and overrides.get("layout") is None and not args.config:
            overrides["layout"] = "toy"
        apply_overrides(cfg, overrides)
        return args.fn(cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.exception("command failed: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
