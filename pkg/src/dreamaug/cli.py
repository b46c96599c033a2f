"""Command-line entry point.

Subcommands: gen-data, dream, train, experiment. Each reads an optional JSON
config (see :mod:`dreamaug.config`), logs to stderr, and ends by printing one
line ``RESULT {json}`` on stdout. Exit codes: 0 success, 2 config or usage
error, 3 IO or data-format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Optional

from . import autodiff as ad
from . import config as configmod
from . import rng as rngmod
from .dream import bounds_from_normalization, deepdream_loss, dream_loss, stylized_dream
from .errors import ConfigError, DataError, DimensionError, FormatError, NumericError
from .evaluation import evaluate, matrix_csv, run_protocol, sweep_csv
from .model import load_checkpoint, save_checkpoint
from .ppm import read_ppm, write_ppm
from .synth import denormalize, generate, load_dataset, normalize, save_dataset
from .training import MODES

log = logging.getLogger("dreamaug")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

# visualization defaults for the dream command only
DREAM_CMD_ALPHA = 0.09
DREAM_CMD_ITERATIONS = 10


def _dump(obj, path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def _result(payload: dict) -> None:
    sys.stdout.write("RESULT " + json.dumps(payload, sort_keys=True) + "\n")
    sys.stdout.flush()


def _dataset(cfg: configmod.CliConfig, data: Optional[str]):
    """Load ``--data`` if given, otherwise generate the configured dataset in memory."""
    if data is not None:
        ds = load_dataset(data)
        log.info("loaded dataset from %s (%d domains, %d per cell)", data, len(ds.domains), ds.per_cell)
        return ds
    d = cfg.dataset
    log.info("generating dataset seed=%d per_cell=%d", d.seed, d.per_cell)
    return generate(d.seed, d.per_cell, d.size, d.domains, d.classes)


# -- commands -------------------------------------------------------------------
def cmd_gen_data(args, cfg: configmod.CliConfig) -> dict:
    d = cfg.dataset
    ds = generate(d.seed, d.per_cell, d.size, d.domains, d.classes)
    path = save_dataset(ds, args.out)
    manifest = ds.manifest()
    manifest["config"] = cfg.to_dict()
    _dump(manifest, path)
    log.info("wrote %d images under %s", ds.images.shape[0] * ds.images.shape[1] * ds.per_cell, args.out)
    return {"manifest": path, "normalization": manifest["normalization"], "config": cfg.to_dict()}


def cmd_dream(args, cfg: configmod.CliConfig) -> dict:
    model = load_checkpoint(args.checkpoint)
    norm = model.normalization or {}
    if "mean" not in norm or "std" not in norm:
        raise FormatError(f"{args.checkpoint}: checkpoint carries no normalization statistics")
    mean, std = norm["mean"], norm["std"]
    content, style = read_ppm(args.content), read_ppm(args.style)
    explicit = cfg.explicit.get("dream", set())
    dcfg = cfg.dream
    if "alpha" not in explicit:
        dcfg = replace(dcfg, alpha=DREAM_CMD_ALPHA)
    if "iterations" not in explicit:
        dcfg = replace(dcfg, iterations=DREAM_CMD_ITERATIONS)
    if args.alpha is not None:
        dcfg = replace(dcfg, alpha=args.alpha)
    if args.iterations is not None:
        dcfg = replace(dcfg, iterations=args.iterations)
    if args.no_standardize:
        dcfg = replace(dcfg, standardize_grad=False)
    if args.deepdream:
        dcfg = replace(dcfg, mode="deepdream")
    lower, upper = bounds_from_normalization(mean, std)
    dcfg = replace(dcfg, lower_bound=lower, upper_bound=upper)
    dcfg.validate()
    cfg = replace(cfg, dream=replace(dcfg, lower_bound=cfg.dream.lower_bound, upper_bound=cfg.dream.upper_bound))

    x = normalize(content, mean, std)[None]
    xs = normalize(style, mean, std)[None]
    if x.shape != xs.shape or x.shape[2:] != (model.arch.input_size,) * 2:
        raise DimensionError(f"content {list(content.shape)} and style {list(style.shape)} must both be "
                             f"[3, {model.arch.input_size}, {model.arch.input_size}]")
    gen = rngmod.stream(args.seed, rngmod.DREAM_NOISE) if dcfg.noise_bound > 0 else None
    trace: list = []
    out = stylized_dream(model, x, xs, dcfg, gen, trace=trace)
    write_ppm(denormalize(out[0], mean, std), args.out)
    if dcfg.mode == "stylized":
        final = dream_loss(model, ad.Tensor(out), ad.Tensor(xs), dcfg.eps, dcfg.variance_ddof).item()
    else:
        final = deepdream_loss(model, ad.Tensor(out)).item()
    log.info("dream loss %.6g -> %.6g over %d steps", float(trace[0][0]), final, dcfg.iterations)
    return {"out": args.out, "initial_loss": float(trace[0][0]), "final_loss": final,
            "trace": [float(t[0]) for t in trace], "seed": args.seed, "config": cfg.to_dict()}


def _apply_train_overrides(args, cfg: configmod.CliConfig) -> configmod.CliConfig:
    train_cfg = cfg.train
    if getattr(args, "mode", None) is not None:
        train_cfg = replace(train_cfg, mode=args.mode)
    if getattr(args, "epochs", None) is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    if getattr(args, "seed", None) is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    cfg = replace(cfg, train=train_cfg)
    cfg.validate()
    return cfg


def cmd_train(args, cfg: configmod.CliConfig) -> dict:
    from .evaluation import train_on_domains

    cfg = _apply_train_overrides(args, cfg)
    ds = _dataset(cfg, args.data)
    sources = tuple(cfg.experiment.train_domains or ds.domains)
    for s in sources:
        ds.domain_index(s)
    arch = replace(cfg.arch, num_classes=len(ds.classes), input_size=ds.size)
    model, report, _ = train_on_domains(ds, sources, cfg.train_config(), arch, cfg.train.seed)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "model.ckpt")
    save_checkpoint(model, ckpt)
    report.checkpoint = "model.ckpt"
    doc = report.to_json_dict()
    doc["sources"] = list(sources)
    doc["config"] = cfg.to_dict()
    held_out = [d for d in ds.domains if d not in sources]
    if held_out:
        imgs, labels, _ = ds.split(held_out)
        doc["held_out"] = {"domains": held_out,
                           "accuracy": evaluate(model, normalize(imgs, *_norm(model)), labels)}
    report_path = os.path.join(args.out, "report.json")
    _dump(doc, report_path)
    summary = {"checkpoint": ckpt, "report": report_path, "epochs": len(report.epochs),
               "final_train_acc": report.epochs[-1].acc if report.epochs else None, "config": cfg.to_dict()}
    if held_out:
        summary["held_out_accuracy"] = doc["held_out"]["accuracy"]
    return summary


def _norm(model):
    return model.normalization["mean"], model.normalization["std"]


def cmd_experiment(args, cfg: configmod.CliConfig) -> dict:
    cfg = _apply_train_overrides(args, cfg)
    if args.protocol is not None:
        cfg = replace(cfg, experiment=replace(cfg.experiment, protocol=args.protocol))
        cfg.validate()
    ds = _dataset(cfg, args.data)
    spec = cfg.experiment_spec()
    report = run_protocol(spec, ds, threads=args.threads)
    report["config"] = cfg.to_dict()
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "report.json")
    _dump(report, report_path)
    summary = {"report": report_path, "protocol": spec.protocol, "config": cfg.to_dict()}
    csv_text, csv_name = None, None
    if spec.protocol == "single_source_matrix":
        csv_text, csv_name = matrix_csv(report), "matrix.csv"
    elif spec.protocol != "bias_probe":
        csv_text, csv_name = sweep_csv(report), "sweep.csv"
    if csv_text is not None:
        csv_path = os.path.join(args.out, csv_name)
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(csv_text)
        summary["csv"] = csv_path
    summary["aggregates"] = {
        k: {kk: v[kk] for kk in ("average", "row_average", "probe") if kk in v}
        for k, v in report["aggregates"].items()
    }
    return summary


# -- argument parsing ------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dreamaug",
        description="Stylized-dream augmentation with consistency training on a synthetic "
                    "shape/texture domain-generalization benchmark.",
        epilog="Exit codes: 0 success, 2 config/usage error, 3 IO/format error, 4 numeric failure.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def common(p):
        p.add_argument("--config", metavar="PATH", help="JSON config file (all sections optional)")
        p.add_argument("--threads", type=int, default=1, metavar="N",
                       help="worker processes for independent runs (results do not depend on N; default 1)")

    p = sub.add_parser("gen-data", help="render the synthetic multi-domain dataset to PPM files",
                       description="Render the dataset section of the config to OUT/<domain>/<class>/<index>.ppm "
                                   "plus OUT/manifest.json.")
    common(p)
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("dream", help="generate one stylized dream image",
                       description="Run the feature-norm ascent on CONTENT using STYLE for the AdaIN statistics. "
                                   f"Defaults for this command: alpha={DREAM_CMD_ALPHA}, "
                                   f"iterations={DREAM_CMD_ITERATIONS} unless the config sets them.")
    common(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="model checkpoint (from train)")
    p.add_argument("--content", required=True, metavar="PPM", help="content image (P6, maxval 255)")
    p.add_argument("--style", required=True, metavar="PPM", help="style image (P6, maxval 255)")
    p.add_argument("--out", required=True, metavar="PPM", help="output image path")
    p.add_argument("--alpha", type=float, help="step size (overrides the config)")
    p.add_argument("--iterations", type=int, help="number of ascent steps (overrides the config)")
    p.add_argument("--no-standardize", action="store_true", help="use the raw gradient instead of standardizing it")
    p.add_argument("--deepdream", action="store_true", help="maximize the plain feature norm (ignores --style stats)")
    p.add_argument("--seed", type=int, default=0, help="seed for the optional noise start (default 0)")
    p.set_defaults(func=cmd_dream)

    p = sub.add_parser("train", help="train one model and write a checkpoint plus report",
                       description="Train on experiment.train_domains (all domains by default). Writes "
                                   "OUT/model.ckpt and OUT/report.json.")
    common(p)
    p.add_argument("--data", metavar="DIR", help="dataset directory from gen-data (default: generate from config)")
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.add_argument("--mode", choices=MODES, help="training mode (overrides train.mode)")
    p.add_argument("--epochs", type=int, help="overrides train.epochs")
    p.add_argument("--seed", type=int, help="overrides train.seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment", help="run an evaluation protocol",
                       description="Run experiment.protocol (leave_one_out, single_source_matrix, bias_probe, "
                                   "ablation, divergence_sweep, alpha_sweep, tau_sweep). Writes OUT/report.json "
                                   "and, except for bias_probe, a CSV table.")
    common(p)
    p.add_argument("--data", metavar="DIR", help="dataset directory from gen-data (default: generate from config)")
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.add_argument("--protocol", help="overrides experiment.protocol")
    p.add_argument("--epochs", type=int, help="overrides train.epochs")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {args.threads}")
        cfg = configmod.load(args.config)
        payload = args.func(args, cfg)
    except (ConfigError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _result(payload)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
