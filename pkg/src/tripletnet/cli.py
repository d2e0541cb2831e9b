"""Command-line entry point.

    tripletnet <validate|generate|train|crossval|ablate|probe|classify>
               --config RUN.cfg [--out DIR] [--jobs N] [--svg]

Exit status: 0 success, 1 error, 2 leakage probe verdict "leaky".
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_run_config
from .data import DataError, apply_normalizer, build_dataset, class_histogram, leakage_filter, load_features, \
    load_genetic_distances, load_image, load_manifest, load_schema, species_labels
from .evaluation import AblationConfig, ForestConfig, generate_synthetic, leakage_probe, run_ablation, \
    run_cv, write_ablation, write_cv_report, write_leakage_report, write_svg
from .model import PrecomputedFeatures, forward, load_checkpoint, save_checkpoint
from .tensor import softmax
from .training import Preprocessing, fit, fit_preprocessing, write_history

log = logging.getLogger("tripletnet")

EXIT_OK, EXIT_ERROR, EXIT_LEAKY = 0, 1, 2


class CommandError(RuntimeError):
    pass


def _records(rc: RunConfig):
    schema = load_schema(rc.path("schema")) if "schema" in rc.paths else None
    return load_manifest(rc.path("manifest"), schema)


def _extractor(rc: RunConfig):
    if "images" not in rc.paths and "features" in rc.paths:
        return PrecomputedFeatures(load_features(rc.path("features")))
    return rc.extractor


def load_dataset(rc: RunConfig, need_genetic: bool = False):
    records, schema = _records(rc)
    genetic = None
    if "genetic" in rc.paths:
        genetic = load_genetic_distances(rc.path("genetic"), species_labels(records))
    elif need_genetic:
        raise ConfigError(f"{rc.source}: missing required key 'genetic'")
    records, schema = leakage_filter(schema, records)
    if "images" in rc.paths:
        return build_dataset(records, schema, images_dir=rc.path("images"), image_side=rc.image_side,
                             genetic=genetic)
    if "features" in rc.paths:
        return build_dataset(records, schema, features=load_features(rc.path("features")), genetic=genetic)
    raise ConfigError(f"{rc.source}: one of 'images' or 'features' is required")


# ----------------------------------------------------------------- commands


def cmd_validate(rc: RunConfig, args) -> int:
    records, schema = _records(rc)
    hist = class_histogram(records)
    print(f"manifest: {rc.path('manifest')}")
    print(f"specimens: {len(records)}")
    print(f"classes: {len(hist)}")
    if hist:
        print(f"class size: min {min(hist.values())} / max {max(hist.values())}")
        for name, n in hist.items():
            print(f"  {name}: {n}")
    print(f"features: {len(schema)} total, {len(schema.flagged)} site-identifying")
    print(f"{len(schema.kept)} model features")
    if not schema.kept:
        raise DataError("every feature is flagged site-identifying")
    if "genetic" in rc.paths:
        gdm = load_genetic_distances(rc.path("genetic"), list(hist))
        off = gdm.matrix[~np.eye(len(gdm.species), dtype=bool)]
        print(f"genetic matrix: {len(gdm.species)} species, off-diagonal min {off.min():.6g} "
              f"max {off.max():.6g} mean {off.mean():.6g}")
    elif rc.config == 4:
        raise ConfigError(f"{rc.source}: configuration 4 needs a 'genetic' matrix")
    if "images" in rc.paths:
        base = rc.path("images")
        for r in records:
            try:
                load_image(base / r.image_ref, rc.image_side)
            except OSError as exc:
                raise DataError(f"{base / r.image_ref}: {exc.strerror}") from None
            except DataError as exc:
                raise DataError(f"{base / r.image_ref}: {exc}") from None
        print(f"images: {len(records)} decoded at {rc.image_side}x{rc.image_side}")
    elif "features" in rc.paths:
        table = load_features(rc.path("features"))
        missing = [r.id for r in records if r.id not in table]
        if missing:
            raise DataError(f"{rc.path('features')}: no features for id(s) {', '.join(missing[:5])}")
        print(f"precomputed features: {len(table)} rows")
    else:
        raise ConfigError(f"{rc.source}: one of 'images' or 'features' is required")
    print("valid")
    return EXIT_OK


def cmd_generate(rc: RunConfig, args) -> int:
    out = Path(args.out)
    data = generate_synthetic(rc.synthetic)
    paths = data.write(out)
    lines = [f"seed = {rc.seed}", f"image_side = {rc.synthetic.image_side}"]
    lines += [f"{k} = {paths[k].relative_to(out).as_posix()}" for k in ("manifest", "schema", "images", "genetic")]
    (out / "dataset.cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(data.records)} specimens of {len(data.species)} species to {out}")
    return EXIT_OK


def cmd_train(rc: RunConfig, args) -> int:
    config = AblationConfig(rc.config)
    data = load_dataset(rc, need_genetic=config == AblationConfig.DYNAMIC_MARGIN)
    cfg = config.train_config(rc.train)
    everything = np.arange(len(data))
    prep = fit_preprocessing(data, everything, cfg.standardize_measurements)
    prepared = prep.apply(data)
    extractor = _extractor(rc)
    params, history = fit(cfg, prepared, everything, extractor)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"species": list(data.species), "config": int(config), "seed": rc.seed,
            "features": list(data.schema.names) if cfg.use_measurements else [],
            "preprocessing": prep.to_dict()}
    save_checkpoint(out / "model.ckpt", params, meta)
    write_history(out / "history.csv", history)
    last = history[-1]
    print(f"trained configuration {int(config)} for {len(history)} epochs: "
          f"train accuracy {last.train_acc:.4f}, final lr {last.lr:.6g}")
    return EXIT_OK


def cmd_crossval(rc: RunConfig, args) -> int:
    config = AblationConfig(rc.config)
    data = load_dataset(rc, need_genetic=config == AblationConfig.DYNAMIC_MARGIN)
    report = run_cv(config, data, rc.folds, rc.seed, rc.train, _extractor(rc), jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_cv_report(out / "cv_report.csv", [report])
    if args.svg:
        write_svg(out / "ablation.svg", [report])
    print(f"configuration {report.config}: mean accuracy {report.mean:.4f} (std {report.std:.4f})")
    return EXIT_OK


def cmd_ablate(rc: RunConfig, args) -> int:
    data = load_dataset(rc, need_genetic=True)
    result = run_ablation(data, rc.folds, rc.seed, rc.train, _extractor(rc), jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ablation(out / "cv_report.csv", out / "ablation_summary.csv", result)
    if args.svg:
        write_svg(out / "ablation.svg", result.reports)
    for r, p in zip(result.reports, result.p_vs_prev):
        tail = "" if p is None else f", p vs previous {p:.4f}"
        print(f"configuration {r.config}: mean {r.mean:.4f} std {r.std:.4f}{tail}")
    return EXIT_OK


def cmd_probe(rc: RunConfig, args) -> int:
    records, schema = _records(rc)
    report = leakage_probe(records, schema, rc.seed, rc.threshold,
                           ForestConfig(n_trees=rc.n_trees, seed=rc.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_leakage_report(out / "leakage_report.csv", report)
    for name, acc in report.accuracies.items():
        print(f"accuracy[{name}] = {acc:.4f}")
    for name, imp in report.importances:
        print(f"importance[{name}] = {imp:.4f}")
    print(f"verdict: {report.verdict}")
    return EXIT_LEAKY if report.verdict == "leaky" else EXIT_OK


def cmd_classify(rc: RunConfig, args) -> int:
    params, meta = load_checkpoint(rc.path("checkpoint"))
    records, schema = _records(rc)
    records, schema = leakage_filter(schema, records)
    expected = meta.get("features", [])
    if params.config.n_measurements and list(schema.names) != expected:
        raise CommandError(f"manifest features do not match the checkpoint: expected {expected}, "
                           f"found {list(schema.names)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    species = meta["species"]
    rows = []
    if records:
        prep = Preprocessing.from_dict(meta.get("preprocessing", {}))
        meas = np.stack([r.measurements for r in records])
        if prep.meas_mean is not None:
            meas = (meas - prep.meas_mean) / prep.meas_std
        if isinstance(params.extractor, PrecomputedFeatures):
            params.extractor = PrecomputedFeatures(load_features(rc.path("features")))
            inputs = [r.id for r in records]
        else:
            base = rc.path("images")
            imgs = np.stack([load_image(base / r.image_ref, params.config.image_side) for r in records])
            if prep.image_stats is not None:
                imgs = apply_normalizer(imgs, prep.image_stats)
            inputs = imgs
        _, logits = forward(params, inputs, meas if params.config.n_measurements else None)
        probs = softmax(logits.data)
        pred = np.argmax(probs, axis=1)
        rows = [(r.id, species[p], repr(float(probs[i, p]))) for i, (r, p) in enumerate(zip(records, pred))]
    with open(out / "predictions.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "predicted_species", "confidence"))
        w.writerows(rows)
    print(f"classified {len(rows)} specimens")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate, "generate": cmd_generate, "train": cmd_train, "crossval": cmd_crossval,
    "ablate": cmd_ablate, "probe": cmd_probe, "classify": cmd_classify,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration file (key = value)")
    common.add_argument("--out", default="out", help="output directory (default: ./out)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for folds; results do not depend on it")
    common.add_argument("--svg", action="store_true", help="also write ablation.svg")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="tripletnet", description=__doc__.splitlines()[0] if __doc__ else None)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_ERROR
    try:
        rc = load_run_config(args.config)
        return COMMANDS[args.command](rc, args)
    except (ConfigError, DataError, CommandError, KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
