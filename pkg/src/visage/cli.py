"""Command line interface.

Subcommands cover the full pipeline: ``simulate`` a cohort, ``train``
a risk or age head, compute ``metrics``, fit ``cox`` models, draw
``km`` curves per stratum, ``balance`` an age distribution, and
project ``attention`` maps onto a mesh. Every run writes a
``manifest.json`` recording the effective configuration, seed, input
digests, and tool version; outputs contain no timestamps, so a rerun
on identical inputs is byte-identical.

Exit codes: 0 success, 1 analysis failure (e.g. a fit that does not
converge), 2 input/usage error with no partial outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import AnalysisError, DataError, VisageError
from . import attention as attention_mod
from . import biomarkers
from . import cox as cox_mod
from . import metrics as metrics_mod
from . import survival
from . import synth as synth_mod
from . import trainer as trainer_mod
from .cohort import load_cohort, read_schema, save_cohort

DEFAULT_HORIZONS = (91, 182, 365, 730)  # 3, 6, 12, 24 months in days
KM_HORIZONS = (913, 1826)  # 2.5 and 5 years in days


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _safe_label(label: str) -> str:
    table = {"≥": "ge", "≤": "le", "<": "lt", ">": "gt", " ": "_", "/": "-", "+": "plus"}
    out = []
    for ch in label:
        out.append(table.get(ch, ch))
    return "".join(out)


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.split(",") if tok.strip())


def parse_covariate(spec: str) -> cox_mod.Covariate:
    """Parse the compact covariate syntax.

    Forms: ``field`` (continuous), ``field:per:10`` (continuous per 10
    units), ``field:cat:reference`` (categorical against a reference
    level), ``field:ge:5`` / ``field:le:-5`` (threshold indicator).
    """
    parts = spec.split(":")
    field = parts[0].strip()
    if not field:
        raise DataError(f"empty covariate spec {spec!r}")
    if len(parts) == 1:
        return cox_mod.Covariate(field)
    if len(parts) != 3:
        raise DataError(f"covariate spec {spec!r} must be field[:kind:value]")
    kind, value = parts[1].strip(), parts[2].strip()
    if kind == "per":
        return cox_mod.Covariate(field, per=float(value))
    if kind == "cat":
        return cox_mod.Covariate(field, kind="categorical", reference=value)
    if kind in ("ge", "le"):
        return cox_mod.Covariate(
            field, kind="threshold", threshold=float(value), op=">=" if kind == "ge" else "<="
        )
    raise DataError(f"unknown covariate kind {kind!r} in {spec!r}")


def _load(args) -> tuple:
    if not args.cohort:
        raise DataError("--cohort is required")
    schema = read_schema(args.schema) if args.schema else None
    result = load_cohort(args.cohort, schema)
    return result.cohort, result


def _marker_values(cohort, marker: str) -> tuple[np.ndarray, np.ndarray]:
    """Return (values, included mask) for a marker name."""
    n = len(cohort)
    if marker == "risk":
        scaled = np.array(
            [np.nan if r.risk_scaled is None else r.risk_scaled for r in cohort]
        )
        if np.all(np.isfinite(scaled)):
            return scaled, np.ones(n, dtype=bool)
        raw = np.array([np.nan if r.risk_raw is None else r.risk_raw for r in cohort])
        mask = np.isfinite(raw)
        if not mask.any():
            raise DataError("no risk values in cohort")
        values = np.full(n, np.nan)
        values[mask] = biomarkers.minmax_scale(raw[mask])
        return values, mask
    if marker == "fad":
        col = biomarkers.fad_for_cohort(cohort)
        return col.values, np.isfinite(col.values)
    if marker == "predicted_age":
        vals = np.array(
            [np.nan if r.predicted_age is None else r.predicted_age for r in cohort]
        )
        return vals, np.isfinite(vals)
    if marker == "chrono_age":
        vals = np.array([r.chrono_age for r in cohort], dtype=float)
        return vals, np.isfinite(vals)
    raise DataError(f"unknown marker {marker!r}")


def _scheme_marker(scheme: str) -> str:
    return "fad" if scheme.startswith("fad") else "risk"


def cmd_km(args, outputs: dict) -> dict:
    cohort, load = _load(args)
    times = cohort.times()
    events = cohort.events()
    horizons = _parse_floats(args.horizons) if args.horizons else KM_HORIZONS

    results: dict = {"strata": {}, "dropped_rows": load.n_dropped}
    try:
        results["median_followup_days"] = survival.reverse_km_median_followup(times, events)
    except VisageError as err:
        results["median_followup_days"] = None
        results["median_followup_note"] = str(err)

    if args.group_by and args.group_by != "none":
        values, mask = _marker_values(cohort, _scheme_marker(args.group_by))
        assignment = biomarkers.stratify(values[mask], args.group_by)
        sub_times, sub_events = times[mask], events[mask]
        groups = biomarkers.group_indices(assignment)
        results["scheme"] = args.group_by
        results["excluded_missing_marker"] = int(np.sum(~mask))
        ids = np.asarray(cohort.ids(), dtype=object)[mask]
        outputs["strata.csv"] = biomarkers.strata_to_csv(list(ids), assignment)
    else:
        groups = {"all": np.arange(times.size)}
        sub_times, sub_events = times, events
        results["scheme"] = None

    curves = {}
    for label, idx in groups.items():
        curve = survival.kaplan_meier(sub_times[idx], sub_events[idx])
        curves[label] = (curve, idx)
        outputs[f"km_{_safe_label(label)}.csv"] = survival.curve_to_csv(curve)
        est = {}
        for h in horizons:
            e = survival.km_estimate_at(curve, float(h))
            est[f"{h:g}"] = {
                "survival": e.estimate,
                "ci95": [e.ci_low, e.ci_high],
                "truncated": e.truncated,
            }
        results["strata"][label] = {
            "n": int(idx.size),
            "events": int(sub_events[idx].sum()),
            "estimates": est,
        }

    labels = list(groups)
    if len(labels) >= 2:
        pairs = [(sub_times[i], sub_events[i]) for i in groups.values()]
        test = survival.log_rank(pairs)
        results["log_rank"] = {
            "chi_square": test.chi_square,
            "dof": test.dof,
            "p_value": test.p_value,
        }
        pairwise = {}
        for a in range(len(labels)):
            for b in range(a + 1, len(labels)):
                t2 = survival.log_rank([pairs[a], pairs[b]])
                pairwise[f"{labels[a]} vs {labels[b]}"] = {
                    "chi_square": t2.chi_square,
                    "dof": t2.dof,
                    "p_value": t2.p_value,
                }
        results["log_rank_pairwise"] = pairwise
    else:
        results["log_rank"] = None
        results["log_rank_note"] = "single stratum; log-rank skipped"

    outputs["results.json"] = results
    return {"group_by": args.group_by, "horizons": list(horizons)}


def cmd_cox(args, outputs: dict) -> dict:
    cohort, load = _load(args)
    if not args.biomarker:
        raise DataError("--biomarker is required")
    times = cohort.times()
    events = cohort.events()
    biomarker = parse_covariate(args.biomarker)
    adjusters = [parse_covariate(s) for s in args.adjusters.split(",") if s.strip()] \
        if args.adjusters else []
    ties = args.ties or "efron"

    report: dict = {"dropped_rows": load.n_dropped, "ties": ties}
    if args.screen and adjusters:
        screen = cox_mod.univariate_screen(cohort, adjusters, alpha=args.alpha, ties=ties)
        report["screen"] = [
            {
                "covariate": entry.covariate.base_name(),
                "p": None if np.isnan(entry.p) else entry.p,
                "retained": entry.retained,
                "error": entry.error,
            }
            for entry in screen.entries
        ]
        adjusters = list(screen.retained)

    uni_design = cox_mod.build_design(cohort, [biomarker])
    uni_fit = cox_mod.fit_cox(uni_design, times, events, ties)
    report["univariate"] = cox_mod.fit_to_dict(uni_fit)

    rows = [("univariate", row) for row in uni_fit.rows()]
    adjusted = cox_mod.fit_adjusted(cohort, biomarker, adjusters, ties)
    report["adjusted"] = cox_mod.fit_to_dict(adjusted.fit)
    report["headline"] = [
        {"name": r.name, "hr": r.hr, "ci95": [r.ci_low, r.ci_high], "p": r.p}
        for r in adjusted.headline
    ]
    rows.extend(("adjusted", row) for row in adjusted.fit.rows())

    lines = ["model,covariate,hr,ci_low,ci_high,p,beta,se"]
    for model, row in rows:
        lines.append(
            f"{model},{row.name},{row.hr!r},{row.ci_low!r},{row.ci_high!r},"
            f"{row.p!r},{row.beta!r},{row.se!r}"
        )
    outputs["table.csv"] = "\n".join(lines) + "\n"
    outputs["fit.json"] = report

    failed = not uni_fit.converged or not adjusted.fit.converged
    return {
        "biomarker": args.biomarker,
        "adjusters": args.adjusters,
        "screen": bool(args.screen),
        "alpha": args.alpha,
        "ties": ties,
        "_exit_analysis_failure": failed,
    }


def cmd_metrics(args, outputs: dict) -> dict:
    cohort, load = _load(args)
    marker = args.marker or "risk"
    values, mask = _marker_values(cohort, marker)
    times = cohort.times()[mask]
    events = cohort.events()[mask]
    horizons = _parse_floats(args.horizons) if args.horizons else DEFAULT_HORIZONS

    conc = metrics_mod.harrell_c(values[mask], times, events)
    results: dict = {
        "marker": marker,
        "n_used": int(mask.sum()),
        "excluded_missing_marker": int(np.sum(~mask)),
        "dropped_rows": load.n_dropped,
        "c_index": {
            "value": conc.c_index,
            "concordant": conc.concordant,
            "discordant": conc.discordant,
            "tied_risk": conc.tied_risk,
            "comparable_pairs": conc.comparable_pairs,
        },
        "auc": {},
    }
    for h in horizons:
        try:
            auc = metrics_mod.time_dependent_auc(values[mask], times, events, float(h))
            results["auc"][f"{h:g}"] = {
                "value": auc.auc,
                "n_cases": auc.n_cases,
                "n_controls": auc.n_controls,
            }
        except AnalysisError as err:
            results["auc"][f"{h:g}"] = {"value": None, "note": str(err)}

    if marker != "chrono_age":
        pred = np.array(
            [np.nan if r.predicted_age is None else r.predicted_age for r in cohort]
        )
        has_age = np.isfinite(pred)
        if has_age.any():
            chrono = np.array([r.chrono_age for r in cohort])[has_age]
            acc = metrics_mod.age_accuracy(pred[has_age], chrono)
            results["age_accuracy"] = {
                "mae": acc.mae,
                "me": acc.me,
                "binwise_mae": acc.binwise_mae,
                "bins": [
                    {"start": b[0], "n": b[1], "mae": b[2]} for b in acc.bins
                ],
            }

    outputs["metrics.json"] = results
    return {"marker": marker, "horizons": list(horizons)}


def cmd_train(args, outputs: dict) -> dict:
    cohort, load = _load(args)
    target = args.target or "risk"
    overrides = {}
    for name, cast in (
        ("learning_rate", float),
        ("weight_decay", float),
        ("batch_size", int),
        ("epochs", int),
        ("smooth_lambda", float),
        ("validation_fraction", float),
        ("pair_loss", str),
        ("hidden", int),
    ):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = cast(value)
    config = trainer_mod.TrainConfig(seed=args.seed, **overrides)

    X = cohort.embedding_matrix()
    if target == "risk":
        result = trainer_mod.train_risk_model(X, cohort.times(), cohort.events(), config)
        lines = ["epoch,train_loss,val_loss,train_c,val_c"]
        lines.extend(
            f"{s.epoch},{s.train_loss!r},{s.val_loss!r},{s.train_c!r},{s.val_c!r}"
            for s in result.trace
        )
        final = (
            {
                "train_loss": result.trace[-1].train_loss,
                "val_loss": result.trace[-1].val_loss,
                "train_c": result.trace[-1].train_c,
                "val_c": result.trace[-1].val_c,
            }
            if result.trace
            else None
        )
    elif target == "age":
        ages = np.array([r.chrono_age for r in cohort])
        result = trainer_mod.train_age_model(X, ages, config)
        lines = ["epoch,train_mae,val_mae"]
        lines.extend(f"{s.epoch},{s.train_mae!r},{s.val_mae!r}" for s in result.trace)
        final = (
            {"train_mae": result.trace[-1].train_mae, "val_mae": result.trace[-1].val_mae}
            if result.trace
            else None
        )
    else:
        raise DataError(f"unknown target {target!r}")

    outputs["trace.csv"] = "\n".join(lines) + "\n"
    outputs[("model.bin", "model")] = (result.model, target, config)
    for i, ckpt in enumerate(result.checkpoints, start=1):
        outputs[(f"checkpoints/epoch_{i:03d}.bin", "model")] = (ckpt, target, config)
    outputs["summary.json"] = {
        "target": target,
        "n_subjects": len(cohort),
        "embedding_dim": X.shape[1],
        "n_train": len(result.train_indices),
        "n_val": len(result.val_indices),
        "epochs": config.epochs,
        "final": final,
        "dropped_rows": load.n_dropped,
    }
    settings = {
        k: getattr(config, k)
        for k in (
            "learning_rate", "weight_decay", "beta1", "beta2", "batch_size",
            "epochs", "smooth_lambda", "validation_fraction", "pair_loss", "shuffle",
        )
    }
    if config.hidden is not None:
        settings["hidden"] = config.hidden
    return {"target": target, "train_config": settings}


def cmd_simulate(args, outputs: dict) -> dict:
    covs = []
    if args.covariates:
        for token in args.covariates.split(";"):
            token = token.strip()
            if not token:
                continue
            parts = token.split(":")
            if len(parts) < 3:
                raise DataError(
                    f"covariate {token!r} must be field:dist:params, e.g. sex:bernoulli:0.5"
                )
            covs.append(
                synth_mod.SimCovariate(parts[0], (parts[1], *[float(p) for p in parts[2:]]))
            )
    censor: tuple = ("none",)
    if args.censor and args.censor != "none":
        kind, _, param = args.censor.partition(":")
        if not param:
            raise DataError(f"censor model {args.censor!r} needs a parameter, e.g. uniform:730")
        censor = (kind, float(param))

    spec = synth_mod.SimSpec(
        n=args.n,
        beta_true=_parse_floats(args.beta) if args.beta else (),
        baseline_hazard=args.baseline_hazard,
        censor_model=censor,
        covariate_model=tuple(covs),
        embedding_dim=args.embedding_dim,
        embedding_weights=_parse_floats(args.embedding_weights)
        if args.embedding_weights
        else None,
        round_days=not args.exact_times,
        seed=args.seed,
    )
    result = synth_mod.simulate(spec)
    outputs[("cohort.csv", "cohort")] = result.cohort
    outputs["truth.json"] = result.truth
    return {
        "n": spec.n,
        "beta_true": list(spec.beta_true),
        "baseline_hazard": spec.baseline_hazard,
        "censor_model": list(spec.censor_model),
        "embedding_dim": spec.embedding_dim,
        "round_days": spec.round_days,
    }


def cmd_balance(args, outputs: dict) -> dict:
    cohort, load = _load(args)
    ages = np.array([r.chrono_age for r in cohort])
    mode = args.mode or "bins"
    if mode == "factors":
        indices = trainer_mod.balance_by_factors(ages, seed=args.seed)
    elif mode == "bins":
        indices = trainer_mod.balance_bins(
            ages, bin_width=args.bin_width, target=args.target, seed=args.seed
        )
    else:
        raise DataError(f"unknown balance mode {mode!r}")

    ids = cohort.ids()
    lines = ["index,id"]
    lines.extend(f"{int(i)},{ids[int(i)]}" for i in indices)
    outputs["indices.csv"] = "\n".join(lines) + "\n"

    bin_index = np.floor(ages[indices] / args.bin_width).astype(int)
    uniq, counts = np.unique(bin_index, return_counts=True)
    outputs["counts.json"] = {
        "mode": mode,
        "n_input": len(cohort),
        "n_output": int(indices.size),
        "per_bin": {
            f"{b * args.bin_width:g}-{(b + 1) * args.bin_width:g}": int(c)
            for b, c in zip(uniq, counts)
        },
        "dropped_rows": load.n_dropped,
    }
    return {"mode": mode, "bin_width": args.bin_width, "target": args.target}


def cmd_attention(args, outputs: dict) -> dict:
    if not args.mesh or not args.landmarks or not args.grid:
        raise DataError("--grid, --mesh and --landmarks are required")
    mesh = attention_mod.load_mesh(args.mesh, args.landmarks)
    for _ in range(args.subdivide):
        mesh = attention_mod.subdivide_once(mesh)

    per_image = []
    for grid_path in args.grid.split(","):
        grid = attention_mod.load_grid(grid_path.strip())
        amap = grid if grid.shape[0] == attention_mod.IMAGE_SIZE else (
            attention_mod.upsample_bilinear(grid, attention_mod.IMAGE_SIZE)
        )
        per_image.append(attention_mod.triangle_attention(mesh, amap))
    averaged = attention_mod.average_over_dataset(per_image)

    outputs["attention.obj"] = attention_mod.export_obj(mesh, averaged)
    lines = ["triangle,score"]
    lines.extend(f"{i},{float(v)!r}" for i, v in enumerate(averaged.values))
    outputs["triangle_scores.csv"] = "\n".join(lines) + "\n"
    return {
        "grids": args.grid,
        "subdivide": args.subdivide,
        "triangles": mesh.n_triangles,
        "images": averaged.n_images,
    }


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--cohort", help="cohort CSV path")
    parser.add_argument("--schema", help="schema-mapping JSON path")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    parser.add_argument("--config", help="JSON file of parameter defaults")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="visage",
        description="Survival analysis for facial-image biomarkers.",
    )
    parser.add_argument("--version", action="version", version=f"visage {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("km", help="Kaplan-Meier curves per stratum with log-rank tests")
    _common(p)
    p.add_argument("--group-by", dest="group_by", default=None,
                   help=f"stratification scheme or 'none' ({', '.join(biomarkers.SCHEMES)})")
    p.add_argument("--horizons", default=None,
                   help="comma-separated day horizons for point estimates (default 913,1826)")
    p.set_defaults(func=cmd_km)

    p = sub.add_parser("cox", help="univariate and adjusted Cox fits")
    _common(p)
    p.add_argument("--biomarker", help="covariate spec, e.g. fad:per:10 or risk_scaled:ge:0.5")
    p.add_argument("--adjusters", default=None, help="comma-separated covariate specs")
    p.add_argument("--screen", action="store_true", default=None,
                   help="screen adjusters univariately before the adjusted fit")
    p.add_argument("--alpha", type=float, default=None, help="screening threshold (default 0.05)")
    p.add_argument("--ties", choices=("efron", "breslow"), default=None)
    p.set_defaults(func=cmd_cox)

    p = sub.add_parser("metrics", help="concordance and time-dependent AUC for a marker")
    _common(p)
    p.add_argument("--marker", choices=("risk", "fad", "predicted_age", "chrono_age"),
                   default=None)
    p.add_argument("--horizons", default=None,
                   help="comma-separated day horizons (default 91,182,365,730)")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("train", help="train the risk or age head on embeddings")
    _common(p)
    p.add_argument("--target", choices=("risk", "age"), default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--smooth-lambda", dest="smooth_lambda", type=float, default=None)
    p.add_argument("--validation-fraction", dest="validation_fraction", type=float, default=None)
    p.add_argument("--pair-loss", dest="pair_loss", choices=("logistic", "hinge"), default=None)
    p.add_argument("--hidden", type=int, default=None, help="hidden layer width (default none)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="generate a synthetic cohort with ground truth")
    _common(p)
    p.add_argument("--n", type=int, default=None, help="number of subjects")
    p.add_argument("--beta", default=None, help="comma-separated true coefficients")
    p.add_argument("--baseline-hazard", dest="baseline_hazard", type=float, default=None)
    p.add_argument("--censor", default=None,
                   help="none | uniform:T | exponential:rate | admin:T")
    p.add_argument("--covariates", default=None,
                   help="semicolon-separated field:dist:params, e.g. sex:bernoulli:0.5")
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int, default=None)
    p.add_argument("--embedding-weights", dest="embedding_weights", default=None,
                   help="comma-separated true embedding weights")
    p.add_argument("--exact-times", dest="exact_times", action="store_true", default=None,
                   help="keep continuous times instead of rounding up to days")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("balance", help="age-balanced resampling indices")
    _common(p)
    p.add_argument("--mode", choices=("factors", "bins"), default=None)
    p.add_argument("--bin-width", dest="bin_width", type=float, default=None)
    p.add_argument("--target", type=int, default=None, help="records per bin (default 200)")
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("attention", help="project attention grids onto a face mesh")
    _common(p)
    p.add_argument("--grid", help="comma-separated attention grid CSVs (7x7 or 112x112)")
    p.add_argument("--mesh", help="mesh OBJ path")
    p.add_argument("--landmarks", help="vertex_index,x,y CSV path")
    p.add_argument("--subdivide", type=int, default=None,
                   help="midpoint subdivision iterations (default 1)")
    p.set_defaults(func=cmd_attention)

    return parser


_DEFAULTS = {
    "km": {"group_by": "none", "horizons": "913,1826"},
    "cox": {"adjusters": "", "screen": False, "alpha": 0.05, "ties": "efron"},
    "metrics": {"marker": "risk", "horizons": "91,182,365,730"},
    "train": {"target": "risk"},
    "simulate": {
        "n": 1000,
        "beta": "",
        "baseline_hazard": 0.002,
        "censor": "none",
        "covariates": "",
        "exact_times": False,
    },
    "balance": {"mode": "bins", "bin_width": 5.0, "target": 200},
    "attention": {"subdivide": 1},
}


def _merge_config(args: argparse.Namespace) -> None:
    """Fill unset options from the config file, then built-in defaults."""
    layers = [dict(_DEFAULTS.get(args.command, {}))]
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as err:
                raise DataError(f"bad config JSON: {err}") from None
        if not isinstance(loaded, dict):
            raise DataError("config must be a JSON object")
        section = loaded.get(args.command, loaded)
        if not isinstance(section, dict):
            raise DataError(f"config section {args.command!r} must be an object")
        layers.append(section)
    merged: dict = {}
    for layer in layers:
        merged.update(layer)
    for key, value in merged.items():
        attr = key.replace("-", "_")
        if getattr(args, attr, None) is None:
            setattr(args, attr, value)
    if args.seed is None:
        args.seed = 0


def _render(value) -> bytes:
    if isinstance(value, bytes):
        return value
    if isinstance(value, str):
        return value.encode("utf-8")
    return (json.dumps(value, indent=2, sort_keys=True) + "\n").encode("utf-8")


def _write_outputs(out_dir: Path, outputs: dict, manifest: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for key, value in outputs.items():
        if isinstance(key, tuple):
            name, kind = key
            path = out_dir / name
            path.parent.mkdir(parents=True, exist_ok=True)
            if kind == "model":
                model, target, config = value
                trainer_mod.save_model(model, path, kind=target, config=config)
            elif kind == "cohort":
                save_cohort(value, path)
            written.append(name)
        else:
            path = out_dir / key
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(_render(value))
            written.append(key)
    manifest["outputs"] = sorted(written)
    (out_dir / "manifest.json").write_bytes(_render(manifest))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _merge_config(args)
        input_paths = [
            p
            for p in (
                args.cohort,
                args.schema,
                args.config,
                getattr(args, "mesh", None),
                getattr(args, "landmarks", None),
            )
            if p
        ]
        if getattr(args, "grid", None):
            input_paths.extend(g.strip() for g in args.grid.split(","))
        for p in input_paths:
            if not Path(p).is_file():
                raise DataError(f"input file not found: {p}")

        outputs: dict = {}
        parameters = args.func(args, outputs)
        analysis_failure = bool(parameters.pop("_exit_analysis_failure", False))
        manifest = {
            "tool": "visage",
            "version": __version__,
            "command": args.command,
            "seed": args.seed,
            "parameters": parameters,
            "inputs": {str(p): _sha256(Path(p)) for p in input_paths},
        }
        _write_outputs(Path(args.out), outputs, manifest)
        if analysis_failure:
            print("warning: analysis did not fully converge; see outputs", file=sys.stderr)
            return 1
        return 0
    except (DataError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except AnalysisError as err:
        print(f"analysis error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
