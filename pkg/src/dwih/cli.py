"""Command-line front end: ``dwih <subcommand> ...``.

Exit status: 0 on success, 1 on invalid input (a JSON error object is
written to stderr), 2 when a numerical check misses its tolerance.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from dwih import __version__
from dwih.errors import CheckFailure, DwihError, InputError
from dwih.hvol import read_hvol, write_hvol
from dwih.sidecar import load_series, save_series, write_json

EXIT_OK, EXIT_INVALID, EXIT_CHECK = 0, 1, 2


class UsageError(DwihError):
    kind = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _provenance(args, **extra) -> dict:
    params = {k: v for k, v in vars(args).items() if k != "func"}
    return {"tool": "dwih", "version": __version__, "command": args.command, "parameters": params, **extra}


# ---------------------------------------------------------------------------
# signal model


def cmd_fit_adc(args):
    from dwih.signal_model import extrapolate_dwi, fit_adc

    series, _ = load_series(args.input)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "joint":
        fitted = series
    else:
        lo = args.low_b if args.low_b is not None else (series.meta.low_b if series.meta else None)
        hi = args.high_b if args.high_b is not None else (series.meta.high_b if series.meta else None)
        if lo is None or hi is None:
            raise InputError("pairwise mode needs --low-b/--high-b or low_b/high_b in the sidecar")
        fitted = series.pair(lo, hi)
    result = fit_adc(fitted)
    write_hvol(out / "adc.hvol", result.adc)
    write_hvol(out / "s0.hvol", result.s0)
    write_hvol(out / "residual.hvol", result.residual_rms)
    files = ["adc.hvol", "s0.hvol", "residual.hvol"]
    if args.target_b is not None:
        write_hvol(out / "extrapolated.hvol", extrapolate_dwi(result, args.target_b))
        files.append("extrapolated.hvol")
    pairs = {}
    if args.all_pairs:
        for lo, hi in series.admissible_pairs():
            sub = out / "pairs" / f"b{lo:g}_{hi:g}"
            sub.mkdir(parents=True, exist_ok=True)
            pr = fit_adc(series.pair(lo, hi))
            write_hvol(sub / "adc.hvol", pr.adc)
            write_hvol(sub / "s0.hvol", pr.s0)
            pairs[f"{lo:g},{hi:g}"] = str(sub.relative_to(out))
    write_json(
        out / "provenance.json",
        _provenance(args, fit_method=result.method, b_values=list(result.b_values), outputs=files, pairs=pairs),
    )
    print(json.dumps({"output": str(out), "method": result.method, "b_values": list(result.b_values)}))


def cmd_extrapolate(args):
    from dwih.signal_model import AdcFitResult, extrapolate_dwi

    src = Path(args.input)
    adc = read_hvol(src / "adc.hvol" if src.is_dir() else args.input)
    s0 = read_hvol(Path(args.s0) if args.s0 else src / "s0.hvol")
    fit = AdcFitResult(adc, s0, adc.with_data(np.zeros(adc.data.shape)))
    vol = extrapolate_dwi(fit, args.target_b)
    write_hvol(args.output, vol)
    write_json(f"{args.output}.json", _provenance(args))
    print(json.dumps({"output": args.output, "target_b": args.target_b}))


# ---------------------------------------------------------------------------
# preprocessing and phantoms


def cmd_preprocess(args):
    from dwih.preprocess import preprocess_case

    extra = {"lesions": read_hvol(args.lesions)} if args.lesions else None
    result = preprocess_case(
        t2w=read_hvol(args.t2w),
        dwi_b2000=read_hvol(args.dwi_b2000),
        adc=read_hvol(args.adc),
        b0=read_hvol(args.b0),
        mask=read_hvol(args.mask),
        range_constant=args.range_constant,
        target_dims=tuple(int(d) for d in args.dims),
        target_spacing=tuple(args.spacing),
        extra_masks=extra,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = result.pop("provenance")
    for name, vol in result.items():
        write_hvol(out / f"{name}.hvol", vol)
    write_json(out / "provenance.json", _provenance(args, normalization=prov))
    print(json.dumps({"output": str(out), "volumes": sorted(result)}))


def cmd_phantom(args):
    from dwih.phantom import PhantomSpec, generate_phantom, oracle_heatmap
    from dwih.signal_model import MetaInfo

    spec = PhantomSpec.from_json(Path(args.spec).read_text()) if args.spec else PhantomSpec()
    meta = MetaInfo(args.low_b, args.high_b) if args.low_b is not None and args.high_b is not None else None
    ph = generate_phantom(spec, args.b_values, meta)
    out = Path(args.out)
    save_series(out, ph.series, pirads=ph.annotation.pirads, provenance={"phantom_spec": json.loads(spec.to_json())})
    write_hvol(out / "lesions.hvol", ph.annotation.mask)
    write_json(out / "lesions.json", {"pirads": ph.annotation.pirads})
    write_hvol(out / "gland.hvol", ph.gland)
    write_hvol(out / "t2w.hvol", ph.t2w)
    write_hvol(out / "truth_adc.hvol", ph.truth.adc)
    write_hvol(out / "truth_s0.hvol", ph.truth.s0)
    if args.heatmap_quality is not None:
        heat = oracle_heatmap(ph.annotation, args.heatmap_quality, args.fp_rate, args.heatmap_seed)
        write_hvol(out / "heatmap.hvol", heat)
    write_json(out / "provenance.json", _provenance(args, phantom_spec=json.loads(spec.to_json())))
    print(json.dumps({"output": str(out), "lesions": len(ph.annotation.labels)}))


# ---------------------------------------------------------------------------
# evaluation


def _load_annotation(hvol_path: Path):
    from dwih.evaluation import LesionAnnotation

    side = hvol_path.with_suffix(".json")
    pirads = {}
    if side.exists():
        doc = json.loads(side.read_text())
        pirads = doc.get("pirads", doc)
    return LesionAnnotation(read_hvol(hvol_path), pirads)


def load_cases(heatmap_dir, annotation_dir) -> list[tuple]:
    """Pair ``<case>.hvol`` heatmaps with ``<case>.hvol`` + ``<case>.json`` annotations."""
    heat_dir, ann_dir = Path(heatmap_dir), Path(annotation_dir)
    names = sorted(p.stem for p in heat_dir.glob("*.hvol"))
    if not names:
        raise InputError(f"no .hvol heatmaps in {heat_dir}")
    cases = []
    for name in names:
        ann = ann_dir / f"{name}.hvol"
        if not ann.exists():
            raise InputError(f"no annotation {ann} for heatmap {name}")
        cases.append((name, read_hvol(heat_dir / f"{name}.hvol"), _load_annotation(ann)))
    return cases


def _write_froc_csv(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fp_per_patient", "tpr"])
        for p in curve.points:
            w.writerow([repr(p.threshold), repr(p.fp_per_patient), repr(p.tpr)])


def cmd_evaluate(args):
    from dwih.evaluation import evaluate_cohort

    cases = load_cases(args.heatmaps, args.annotations)
    report = evaluate_cohort(
        cases,
        threshold=args.threshold,
        pirads_min=args.pirads_min,
        n_resamples=args.resamples,
        seed=args.seed,
        connectivity=args.connectivity,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    doc["provenance"] = _provenance(args)
    stem = out.with_suffix("")
    with open(f"{stem}_cases.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "score", "label", "n_lesions", "n_candidates", "n_tp"])
        for row in doc["cases"]:
            cands = row["candidates"]
            w.writerow([row["name"], repr(row["score"]), row["label"], row["n_lesions"], len(cands), sum(c["tp"] for c in cands)])
    figures = {}
    if report.froc is not None:
        _write_froc_csv(f"{stem}_froc.csv", report.froc)
    if not args.no_figures:
        from dwih import plotting

        scores = [c["score"] for c in doc["cases"]]
        labels = [c["label"] for c in doc["cases"]]
        figures["roc"] = str(plotting.plot_roc(scores, labels, f"{stem}_roc.png", report.auc, report.ci))
        figures["bootstrap"] = str(plotting.plot_bootstrap(report.bootstrap, f"{stem}_bootstrap.png", report.ci))
        if report.froc is not None:
            figures["froc"] = str(plotting.plot_froc(report.froc, f"{stem}_froc.png", doc["operating_points"]))
    doc["figures"] = figures
    write_json(out, doc)
    print(json.dumps({"auc": report.auc, "ci": list(report.ci), "operating_points": doc["operating_points"]}))


def cmd_froc(args):
    from dwih.evaluation import CaseDetections, extract_candidates, froc

    cases = load_cases(args.heatmaps, args.annotations)
    dets = [CaseDetections(extract_candidates(h, args.threshold, args.connectivity), a) for _, h, a in cases]
    curve = froc(dets)
    _write_froc_csv(args.out, curve)
    ops = {k: (v if np.isfinite(v) else None) for k, v in curve.operating_points().items()}
    if args.figure:
        from dwih import plotting

        plotting.plot_froc(curve, args.figure, ops)
    write_json(f"{args.out}.json", _provenance(args, operating_points=ops))
    print(json.dumps(ops))


def _read_scores(path):
    scores, labels = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                scores.append(float(row["score"]))
                labels.append(int(row["label"]))
            except (KeyError, ValueError):
                raise InputError(f"{path}: rows need numeric 'score' and 0/1 'label' columns") from None
    return scores, labels


def cmd_bootstrap_auc(args):
    from dwih.evaluation import bootstrap_auc

    scores, labels = _read_scores(args.scores)
    res = bootstrap_auc(scores, labels, n_resamples=args.resamples, seed=args.seed)
    doc = {"auc": res.auc, "ci": [res.ci_lo, res.ci_hi], "provenance": _provenance(args)}
    if args.out:
        write_json(args.out, doc)
    print(json.dumps({"auc": res.auc, "ci": [res.ci_lo, res.ci_hi]}))


def cmd_dynfilter_check(args):
    from dwih.dynamic_filter import gradient_check

    worst = 0.0
    for seed in range(args.seed, args.seed + args.n_seeds):
        worst = max(worst, gradient_check(seed))
    print(json.dumps({"max_rel_error": worst, "tolerance": args.tolerance, "seeds": [args.seed, args.seed + args.n_seeds - 1]}))
    if not worst < args.tolerance:
        raise CheckFailure(f"max relative gradient error {worst:.3e} >= {args.tolerance:.1e}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dwih", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    s = sub.add_parser("fit-adc", help="fit ADC/S0 maps from a DWI series sidecar")
    s.add_argument("--input", required=True, help="series.json sidecar")
    s.add_argument("--output", required=True, help="output directory")
    s.add_argument("--mode", choices=("pairwise", "joint"), default="pairwise")
    s.add_argument("--low-b", type=float)
    s.add_argument("--high-b", type=float)
    s.add_argument("--target-b", type=float, help="also write the extrapolated volume at this b")
    s.add_argument("--all-pairs", action="store_true", help="additionally fit every admissible pair")
    s.set_defaults(func=cmd_fit_adc)

    s = sub.add_parser("extrapolate", help="evaluate fitted maps at a target b-value")
    s.add_argument("--input", required=True, help="fit directory (adc.hvol, s0.hvol) or an ADC .hvol")
    s.add_argument("--s0", help="S0 .hvol when --input is a file")
    s.add_argument("--target-b", type=float, default=2000.0)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_extrapolate)

    s = sub.add_parser("preprocess", help="resample and normalize one case")
    for flag in ("--t2w", "--dwi-b2000", "--adc", "--b0", "--mask"):
        s.add_argument(flag, required=True)
    s.add_argument("--lesions", help="optional lesion label mask resampled alongside")
    s.add_argument("--range-constant", type=float, default=4.0)
    s.add_argument("--dims", type=_floats, default=[240, 240, 30])
    s.add_argument("--spacing", type=_floats, default=[0.5, 0.5, 3.0])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("phantom", help="generate a synthetic phantom case")
    s.add_argument("--spec", help="phantom spec JSON (defaults used when omitted)")
    s.add_argument("--b-values", type=_floats, default=[50.0, 800.0, 1500.0, 2000.0])
    s.add_argument("--low-b", type=float)
    s.add_argument("--high-b", type=float)
    s.add_argument("--heatmap-quality", type=float)
    s.add_argument("--fp-rate", type=float, default=0.0)
    s.add_argument("--heatmap-seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("evaluate", help="case- and lesion-level evaluation of heatmaps")
    s.add_argument("--heatmaps", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--threshold", type=float, required=True)
    s.add_argument("--pirads-min", type=int, default=3)
    s.add_argument("--resamples", type=int, default=2000)
    s.add_argument("--seed", type=int, default=17)
    s.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    s.add_argument("--no-figures", action="store_true")
    s.add_argument("--out", required=True, help="report JSON path; CSVs and figures go alongside")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("froc", help="FROC curve and operating points")
    s.add_argument("--heatmaps", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--threshold", type=float, required=True)
    s.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    s.add_argument("--figure", help="optional PNG path")
    s.add_argument("--out", required=True, help="CSV path")
    s.set_defaults(func=cmd_froc)

    s = sub.add_parser("bootstrap-auc", help="AUC with percentile bootstrap CI from a score CSV")
    s.add_argument("--scores", required=True, help="CSV with 'score' and 'label' columns")
    s.add_argument("--resamples", type=int, default=2000)
    s.add_argument("--seed", type=int, default=17)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bootstrap_auc)

    s = sub.add_parser("dynfilter-check", help="finite-difference check of the dynamic filter gradients")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-seeds", type=int, default=1)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.set_defaults(func=cmd_dynfilter_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            raise UsageError("no command given\n" + parser.format_usage())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("no command given\n" + parser.format_usage())
        args.func(args)
    except CheckFailure as exc:
        print(json.dumps({"error": "check-failed", "message": str(exc)}), file=sys.stderr)
        return EXIT_CHECK
    except (DwihError, OSError, json.JSONDecodeError) as exc:
        kind = getattr(exc, "kind", "io")
        if isinstance(exc, UsageError):
            print(parser.format_help(), file=sys.stderr)
        print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
