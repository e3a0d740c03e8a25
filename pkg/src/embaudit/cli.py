"""Command-line surface: one subcommand per experiment plus synth and stain.

Every command resolves its configuration from defaults, an optional JSON
config file, and explicit flags (in that order), echoes the fully resolved
configuration into its report, and writes outputs atomically. Reports are
JSON with a stable schema; plot data is emitted as plain CSV so any
plotting stack can render the figures.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import EmbAuditError, ParameterError, TaskError
from .geometry import distance_profiles, fit_pca, reduced_knn_curve, separability_profile
from .probes import LpConfig, ProbeReport, run_bias_experiment, run_probes_on_split
from .seeding import derive_seed, rng_for
from .splits import patient_split, rows_by_value, save_split_ids, subsample_per_site
from .stainproc import PipelineConfig, run_patch_pipeline
from .synthgen import SynthConfig, generate
from .table import EmbeddingTable, load_table, save_table

REPORT_SCHEMA_VERSION = 1


# -- atomic output helpers -------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name("." + path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    _atomic_write(path, buf.getvalue())


def _write_report(out_dir: Path, experiment: str, config: dict, payload: dict, t0: float) -> Path:
    report = {
        "experiment": experiment,
        "toolkit_version": __version__,
        "report_schema_version": REPORT_SCHEMA_VERSION,
        "config": config,
        "payload": payload,
        "wall_time_s": time.monotonic() - t0,
    }
    path = out_dir / "report.json"
    _atomic_write(path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


def _resolve(defaults: dict, args: argparse.Namespace) -> dict:
    """Merge defaults, config-file values and explicit CLI flags."""
    config = dict(defaults)
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text())
        if "config" in data and "experiment" in data:
            data = data["config"]  # accept a previous report as config
        unknown = set(data) - set(defaults)
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        config.update(data)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            config[key] = value
    missing = [k for k, v in config.items() if v is None]
    if missing:
        raise ParameterError(f"missing required config values: {missing}")
    return config


def _probe_report_payload(report: ProbeReport) -> dict:
    return {
        "classifier": report.classifier,
        "accuracy": report.accuracy,
        "n_test": report.n_test,
        "seed": report.seed,
        "class_ids": [int(c) for c in report.class_ids],
        "per_class_recall": [None if np.isnan(r) else float(r) for r in report.per_class_recall],
        "confusion_matrix": report.confusion_matrix.tolist(),
    }


def _load_input_table(config: dict) -> EmbeddingTable:
    return load_table(config["input"])


def _table_stats(table: EmbeddingTable) -> dict:
    """Descriptive per-site statistics: slide counts, patches per slide, classes."""
    stats: dict = {
        "n_rows": table.n_rows,
        "dim": table.dim,
        "model_tag": table.model_tag,
        "sites": {},
    }
    for site, rows in sorted(rows_by_value(table.sites).items()):
        n_slides = len(np.unique(table.slide_ids[rows]))
        site_stats = {
            "n_slides": n_slides,
            "n_patients": len(np.unique(table.patient_ids[rows])),
            "n_patches": int(len(rows)),
            "mean_patches_per_slide": len(rows) / n_slides,
        }
        if table.has_class_labels():
            site_stats["n_normal"] = int((table.classes[rows] == 0).sum())
            site_stats["n_tumor"] = int((table.classes[rows] == 1).sum())
        stats["sites"][str(int(site))] = site_stats
    return stats


# -- commands ---------------------------------------------------------------------


def cmd_site_prediction(args: argparse.Namespace) -> int:
    defaults = {
        "input": None,
        "seed": 0,
        "budget_per_site": 50_000,
        "fractions": [0.6, 0.1, 0.3],
        "k": 5,
        "epochs": 20,
        "batch_size": 128,
        "learning_rate": 1e-3,
    }
    config = _resolve(defaults, args)
    t0 = time.monotonic()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = _load_input_table(config)
    if len(np.unique(table.sites)) < 2:
        raise TaskError("site prediction requires at least 2 distinct site labels")
    lp_config = LpConfig(
        learning_rate=config["learning_rate"],
        batch_size=config["batch_size"],
        epochs=config["epochs"],
    )
    rows = subsample_per_site(
        table, config["budget_per_site"], seed=derive_seed(config["seed"], "subsample")
    )
    split = patient_split(
        table, tuple(config["fractions"]), seed=derive_seed(config["seed"], "split"), rows=rows
    )
    reports = run_probes_on_split(
        table, split, seed=config["seed"], k=config["k"], lp_config=lp_config
    )
    save_split_ids(table, split, out_dir / "split_ids.csv")
    payload = {name: _probe_report_payload(r) for name, r in reports.items()}
    payload["dataset"] = _table_stats(table)
    _write_csv(
        out_dir / "site_accuracy.csv",
        ["classifier", "accuracy", "n_test"],
        [[name, repr(r.accuracy), r.n_test] for name, r in sorted(reports.items())],
    )
    for name, r in sorted(reports.items()):
        _write_csv(
            out_dir / f"confusion_{name}.csv",
            ["true_class"] + [str(int(c)) for c in r.class_ids],
            [
                [int(c)] + [int(v) for v in row]
                for c, row in zip(r.class_ids, r.confusion_matrix)
            ],
        )
    _write_report(out_dir, "site-predict", config, payload, t0)
    return 0


def cmd_bias(args: argparse.Namespace) -> int:
    defaults = {
        "input": None,
        "seed": 0,
        "repetitions": 5,
        "epochs": 20,
        "batch_size": 128,
        "learning_rate": 1e-3,
    }
    config = _resolve(defaults, args)
    t0 = time.monotonic()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = _load_input_table(config)
    lp_config = LpConfig(
        learning_rate=config["learning_rate"],
        batch_size=config["batch_size"],
        epochs=config["epochs"],
    )
    results = run_bias_experiment(
        table, repetitions=config["repetitions"], seed=config["seed"], lp_config=lp_config
    )
    payload = {
        "dataset": _table_stats(table),
        "splits": [
            {
                "ratio_label": r.ratio_label,
                "mean_accuracy": r.mean_accuracy,
                "std_accuracy": r.std_accuracy,
                "accuracies": r.accuracies,
                "train_counts": {f"{s}/{c}": n for (s, c), n in r.train_counts.items()},
                "val_counts": {f"{s}/{c}": n for (s, c), n in r.val_counts.items()},
                "test_counts": {f"{s}/{c}": n for (s, c), n in r.test_counts.items()},
            }
            for r in results
        ],
    }
    _write_csv(
        out_dir / "bias_accuracy.csv",
        ["split_index", "ratio_label", "mean_accuracy", "std_accuracy"],
        [
            [i + 1, r.ratio_label, repr(r.mean_accuracy), repr(r.std_accuracy)]
            for i, r in enumerate(results)
        ],
    )
    _write_csv(
        out_dir / "bias_repetitions.csv",
        ["split_index", "ratio_label", "repetition", "accuracy"],
        [
            [i + 1, r.ratio_label, rep, repr(acc)]
            for i, r in enumerate(results)
            for rep, acc in enumerate(r.accuracies)
        ],
    )
    _write_report(out_dir, "bias", config, payload, t0)
    return 0


def _pick_reference(table: EmbeddingTable, n_per_group: int, seed: int) -> str:
    """Random tumor patch from a random eligible cancerous slide."""
    half = n_per_group // 2
    by_slide = rows_by_value(table.slide_ids)
    eligible = []
    for slide in sorted(str(s) for s in by_slide):
        rows = by_slide[slide]
        if (table.classes[rows] == 1).sum() >= half and (table.classes[rows] == 0).sum() >= half:
            eligible.append(slide)
    if not eligible:
        raise TaskError("no slide has enough patches of both classes for a reference")
    rng = rng_for(seed, "reference")
    slide = eligible[int(rng.integers(len(eligible)))]
    rows = by_slide[slide]
    tumor_rows = rows[table.classes[rows] == 1]
    return str(table.patch_ids[int(rng.choice(tumor_rows))])


def cmd_distances(args: argparse.Namespace) -> int:
    defaults = {
        "input": None,
        "seed": 0,
        "reference": "",
        "n_per_group": 1000,
        "n_other_slides": 5,
    }
    config = _resolve(defaults, args)
    t0 = time.monotonic()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = _load_input_table(config)
    if not config["reference"]:
        config["reference"] = _pick_reference(table, config["n_per_group"], config["seed"])
    profiles = distance_profiles(
        table,
        config["reference"],
        n_per_group=config["n_per_group"],
        n_other_slides=config["n_other_slides"],
        seed=config["seed"],
    )
    payload = {
        "reference": config["reference"],
        "groups": {
            p.group: {
                "n": int(len(p.sorted_distances)),
                "min": float(p.sorted_distances[0]),
                "max": float(p.sorted_distances[-1]),
            }
            for p in profiles
        },
    }
    _write_csv(
        out_dir / "distances.csv",
        ["group", "rank", "distance", "class_label"],
        [
            [p.group, rank, repr(float(d)), int(c)]
            for p in profiles
            for rank, (d, c) in enumerate(zip(p.sorted_distances, p.class_labels))
        ],
    )
    _write_report(out_dir, "distances", config, payload, t0)
    return 0


def cmd_reduced(args: argparse.Namespace) -> int:
    defaults = {
        "input": None,
        "seed": 0,
        "budget_per_site": 50_000,
        "fractions": [0.6, 0.1, 0.3],
        "components": [1, 2, 3, 5, 10, 20, 30, 50],
        "k": 5,
    }
    config = _resolve(defaults, args)
    t0 = time.monotonic()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = _load_input_table(config)
    rows = subsample_per_site(
        table, config["budget_per_site"], seed=derive_seed(config["seed"], "subsample")
    )
    split = patient_split(
        table, tuple(config["fractions"]), seed=derive_seed(config["seed"], "split"), rows=rows
    )
    curve, baseline = reduced_knn_curve(
        table, split, l_list=tuple(config["components"]), k=config["k"]
    )
    payload = {
        "curve": [{"components": l, "accuracy": acc} for l, acc in curve],
        "baseline_accuracy": baseline,
    }
    _write_csv(
        out_dir / "reduced_knn.csv",
        ["components", "accuracy"],
        [[l, repr(acc)] for l, acc in curve] + [["full", repr(baseline)]],
    )
    _write_report(out_dir, "reduced", config, payload, t0)
    return 0


def cmd_separability(args: argparse.Namespace) -> int:
    defaults = {"input": None, "seed": 0, "n_components": 50}
    config = _resolve(defaults, args)
    t0 = time.monotonic()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = _load_input_table(config)
    model = fit_pca(table)
    n = min(config["n_components"], table.dim)
    profile = separability_profile(table, model, n)
    payload = {
        "n_components": profile.n_components,
        "components": [
            {"index": int(i), "evr": float(e), "ovo_auroc": float(a)}
            for i, e, a in zip(profile.component_index, profile.evr, profile.ovo_auroc)
        ],
    }
    _write_csv(
        out_dir / "separability.csv",
        ["component", "evr", "ovo_auroc"],
        [
            [int(i), repr(float(e)), repr(float(a))]
            for i, e, a in zip(profile.component_index, profile.evr, profile.ovo_auroc)
        ],
    )
    _write_report(out_dir, "separability", config, payload, t0)
    return 0


def cmd_stain(args: argparse.Namespace) -> int:
    defaults = {
        "input": None,
        "seed": 0,
        "patch_size": 256,
        "thumb_scale": 32,
        "min_std": 8.0,
        "tissue_fraction": 0.5,
        "reinhard": True,
        "macenko": True,
        "target_pool_size": 500,
    }
    config = _resolve(defaults, args)
    t0 = time.monotonic()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    input_path = Path(config["input"])
    if input_path.is_dir():
        slides = sorted(
            p for p in input_path.iterdir()
            if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")
        )
    else:
        slides = [input_path]
    if not slides:
        raise ParameterError(f"no slide images found under {input_path}")
    result = run_patch_pipeline(
        slides,
        PipelineConfig(
            out_dir=out_dir,
            patch_size=config["patch_size"],
            thumb_scale=config["thumb_scale"],
            min_std=config["min_std"],
            tissue_fraction=config["tissue_fraction"],
            reinhard=config["reinhard"],
            macenko=config["macenko"],
            target_pool_size=config["target_pool_size"],
            seed=config["seed"],
        ),
    )
    payload = {
        "manifest": result.manifest_path.name,
        "n_kept": result.n_kept,
        "n_dropped": result.n_dropped,
        "n_slides": len(slides),
    }
    _write_report(out_dir, "stain", config, payload, t0)
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    defaults = {
        "seed": 0,
        "dims": 64,
        "n_sites": 2,
        "n_classes": 2,
        "patients_per_site": 4,
        "slides_per_patient": 2,
        "patches_per_slide": 100,
        "site_strength": 4.0,
        "class_strength": 1.0,
        "slide_strength": 0.5,
        "noise": 1.0,
        "signature_placement": "top_variance",
    }
    config = _resolve(defaults, args)
    t0 = time.monotonic()
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    synth = SynthConfig(
        dims=config["dims"],
        n_sites=config["n_sites"],
        n_classes=config["n_classes"],
        patients_per_site=config["patients_per_site"],
        slides_per_patient=config["slides_per_patient"],
        patches_per_slide=config["patches_per_slide"],
        site_strength=config["site_strength"],
        class_strength=config["class_strength"],
        slide_strength=config["slide_strength"],
        noise=config["noise"],
        signature_placement=config["signature_placement"],
        seed=config["seed"],
    )
    table = generate(synth)
    save_table(table, out_path)
    report_dir = out_path.parent
    payload = {"output": out_path.name, "n_rows": table.n_rows, "dim": table.dim}
    _atomic_write(
        report_dir / (out_path.name + ".report.json"),
        json.dumps(
            {
                "experiment": "synth",
                "toolkit_version": __version__,
                "report_schema_version": REPORT_SCHEMA_VERSION,
                "config": config,
                "payload": payload,
                "wall_time_s": time.monotonic() - t0,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
    )
    return 0


# -- argument parsing ----------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser, needs_input: bool = True) -> None:
    if needs_input:
        parser.add_argument("--input", help="input EMB1 table (or slide folder for stain)")
    parser.add_argument("--out", required=True, help="output directory (file for synth)")
    parser.add_argument("--seed", type=int, help="base seed; all stages derive from it")
    parser.add_argument("--config", help="JSON config file or a previous report.json")


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embaudit",
        description="Batch-effect audit toolkit for image-feature embeddings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("site-predict", help="source-site prediction with NCC/KNN/LP")
    _add_common(p)
    p.add_argument("--budget-per-site", dest="budget_per_site", type=int)
    p.add_argument("--fractions", type=_float_list, help="train,val,test e.g. 0.6,0.1,0.3")
    p.add_argument("--k", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.set_defaults(func=cmd_site_prediction)

    p = sub.add_parser("bias", help="biased tumor/normal downstream experiment")
    _add_common(p)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.set_defaults(func=cmd_bias)

    p = sub.add_parser("distances", help="ordered distance profiles around a tumor patch")
    _add_common(p)
    p.add_argument("--reference", help="reference patch id (random tumor patch if omitted)")
    p.add_argument("--n-per-group", dest="n_per_group", type=int)
    p.add_argument("--n-other-slides", dest="n_other_slides", type=int)
    p.set_defaults(func=cmd_distances)

    p = sub.add_parser("reduced", help="site prediction on PCA-reduced features")
    _add_common(p)
    p.add_argument("--budget-per-site", dest="budget_per_site", type=int)
    p.add_argument("--fractions", type=_float_list)
    p.add_argument("--components", type=_int_list, help="comma-separated list of l values")
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_reduced)

    p = sub.add_parser("separability", help="per-component explained variance and AUROC")
    _add_common(p)
    p.add_argument("--n-components", dest="n_components", type=int)
    p.set_defaults(func=cmd_separability)

    p = sub.add_parser("stain", help="tile slides and write normalized patch variants")
    _add_common(p)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--thumb-scale", dest="thumb_scale", type=int)
    p.add_argument("--min-std", dest="min_std", type=float)
    p.add_argument("--tissue-fraction", dest="tissue_fraction", type=float)
    p.add_argument("--no-reinhard", dest="reinhard", action="store_false", default=None)
    p.add_argument("--no-macenko", dest="macenko", action="store_false", default=None)
    p.add_argument("--target-pool-size", dest="target_pool_size", type=int)
    p.set_defaults(func=cmd_stain)

    p = sub.add_parser("synth", help="generate a synthetic oracle table (EMB1)")
    _add_common(p, needs_input=False)
    p.add_argument("--dims", type=int)
    p.add_argument("--n-sites", dest="n_sites", type=int)
    p.add_argument("--n-classes", dest="n_classes", type=int)
    p.add_argument("--patients-per-site", dest="patients_per_site", type=int)
    p.add_argument("--slides-per-patient", dest="slides_per_patient", type=int)
    p.add_argument("--patches-per-slide", dest="patches_per_slide", type=int)
    p.add_argument("--site-strength", dest="site_strength", type=float)
    p.add_argument("--class-strength", dest="class_strength", type=float)
    p.add_argument("--slide-strength", dest="slide_strength", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument(
        "--signature-placement",
        dest="signature_placement",
        choices=["top_variance", "low_variance", "random"],
    )
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EmbAuditError as exc:
        print(f"embaudit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
