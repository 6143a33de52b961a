"""Command-line entry point.

    tsgb explain      saliency maps + JSON sidecar for single images
    tsgb eval         deletion / pointing / localization / sanity metrics
    tsgb sweep-alpha  pointing-game accuracy over a scale-coefficient grid
    tsgb dataset      generate the synthetic blob suite and its detector

Every command validates its full configuration and inputs before any
output file is created, and identical configuration plus seed produces
byte-identical outputs. Exit codes: 0 success, 2 usage error, 3 data
error, 4 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .attribution import (
    AttributionError,
    AttributionRequest,
    RULE_SETS,
    default_alpha,
    run_attribution,
)
from .evaluation import (
    EvalError,
    compute_map,
    deletion_score,
    loc_error,
    pointing_game,
    sanity_check,
)
from .forward import run_forward, top_k
from .model import ModelFormatError, load_model, save_model
from .ppm import ImageFormatError, read_image
from .saliency import SaliencyError, SaliencyMap, assemble, export_image
from .synthetic import build_detector, generate_synthetic_dataset, load_dataset, save_dataset
from .tensor import ShapeMismatchError

USAGE_ERROR, DATA_ERROR, INTERNAL_ERROR = 2, 3, 4

DATA_ERRORS = (
    ModelFormatError,
    ImageFormatError,
    EvalError,
    AttributionError,
    SaliencyError,
    ShapeMismatchError,
    FileNotFoundError,
    NotADirectoryError,
)

ALPHA_GRID_DEFAULT = tuple(round(0.5 + 0.1 * i, 1) for i in range(9))
THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(1, 11))
METRICS = ("deletion", "pointing", "loc", "sanity")


def _json_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _load_config_defaults(parser: argparse.ArgumentParser, argv):
    """Pre-scan for --config and fold its values in as parser defaults.

    Defaults are installed on every subparser: subcommands parse into a
    fresh namespace, so parent-level defaults would not survive.
    """
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if known.config:
        try:
            values = json.loads(Path(known.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config file {known.config}: {exc}")
        defaults = {k.replace("-", "_"): v for k, v in values.items()}
        for sub in getattr(parser, "tsgb_subparsers", []):
            sub.set_defaults(**defaults)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file supplying flag defaults")
    p.add_argument("--alpha", type=float, default=None,
                   help="scale coefficient; defaults per model family")
    p.add_argument("--rule-set", choices=RULE_SETS, default="tsgb")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsgb", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("explain", help="write saliency maps for single images")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, action="append",
                   help="PGM/PPM image; repeatable")
    p.add_argument("--target", default="predicted",
                   help="class index or 'predicted'")
    p.add_argument("--stop-layer", type=int, default=None)
    p.add_argument("--image-mode", choices=("grayscale", "signed-diverging"),
                   default="grayscale")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("eval", help="run metric suites over a dataset directory")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--metrics", default="pointing",
                   help=f"comma list from {METRICS}")
    p.add_argument("--margin", type=int, default=15)
    p.add_argument("--threshold-fraction", type=float, default=None,
                   help="box threshold; omitted: search the grid and report the best")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--step-fraction", type=float, default=0.1)
    p.add_argument("--erase-baseline", type=float, default=0.0)
    p.add_argument("--sanity-mode", choices=("all-at-once", "cascading-top-down"),
                   default="all-at-once")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-alpha", help="pointing-game accuracy per scale coefficient")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--alphas", default=None,
                   help="comma list; default 0.5..1.3 step 0.1")
    p.add_argument("--margin", type=int, default=15)
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("dataset", help="generate the synthetic suite")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=60)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--model-out", default=None,
                   help="also write the matching detector model here")
    p.set_defaults(func=cmd_dataset)

    parser.tsgb_subparsers = [c for c in sub.choices.values()]
    return parser


# ---------------------------------------------------------------------------


def _resolve_alpha(graph, alpha):
    if alpha is None:
        return default_alpha(graph.family)
    if not alpha > 0:
        raise EvalError(f"alpha must be positive, got {alpha}")
    return float(alpha)


def cmd_explain(args) -> int:
    graph = load_model(args.model)
    alpha = _resolve_alpha(graph, args.alpha)
    images = [(Path(p), read_image(p)) for p in args.input]
    for path, image in images:
        if image.shape != graph.input_shape:
            raise ShapeMismatchError(
                f"{path}: image shape {image.shape} != model input {graph.input_shape}"
            )
    if args.target != "predicted":
        try:
            target = int(args.target)
        except ValueError:
            raise EvalError(f"target must be an integer or 'predicted', got {args.target!r}")
        if not 0 <= target < graph.class_count:
            raise EvalError(
                f"target {target} out of range [0, {graph.class_count})"
            )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    for path, image in images:
        trace = run_forward(graph, image)
        predicted = top_k(trace.scores, 1)[0]
        target = predicted if args.target == "predicted" else int(args.target)
        req = AttributionRequest(
            target=target, alpha=alpha, rule_set=args.rule_set, stop_layer=args.stop_layer
        )
        state = run_attribution(graph, trace, req)
        stem = f"{path.stem}_c{target}"
        if args.stop_layer is None:
            m = assemble(state, trace)
        else:
            inter = state.at(args.stop_layer)
            m = SaliencyMap(
                values=inter.data.sum(axis=1)[0], target=target,
                alpha=alpha, rule_set=args.rule_set, model=graph.name,
            )
            stem += f"_l{args.stop_layer}"
        map_file = f"{stem}.{'pgm' if args.image_mode == 'grayscale' else 'ppm'}"
        export_image(m, out_dir / map_file, mode=args.image_mode)
        sidecar = {
            "model": graph.name,
            "input": path.name,
            "target": target,
            "predicted": predicted,
            "scores": [float(s) for s in trace.scores],
            "alpha": alpha,
            "rule_set": args.rule_set,
            "stop_layer": args.stop_layer,
            "seed": args.seed,
            "guard_hits": {str(k): v for k, v in state.diagnostics["guard_hits"].items()},
            "warnings": state.diagnostics["warnings"],
            "map": map_file,
            "image_mode": args.image_mode,
        }
        (out_dir / f"{stem}.json").write_text(_json_dumps(sidecar) + "\n")
        print(f"wrote {out_dir / map_file} (target {target}, predicted {predicted})")
    return 0


def _suite_maps(graph, dataset, rule_set, alpha):
    # wall-clock throughput goes to stderr so file and stdout output stay
    # byte-reproducible
    import time

    start = time.perf_counter()
    maps = {}
    for item in dataset.items:
        for label, _ in item.entries:
            maps[(item.id, label)] = compute_map(
                graph, item.image, label, rule_set=rule_set, alpha=alpha
            )
    elapsed = time.perf_counter() - start
    if maps and elapsed > 0:
        print(
            f"[timing] {rule_set}: {len(maps)} maps in {elapsed:.2f}s "
            f"({len(maps) / elapsed:.1f} maps/s)",
            file=sys.stderr,
        )
    return maps


def _write_report(report, out_dir: Path, name: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.jsonl").write_text("\n".join(report.jsonl_lines()) + "\n")
    print(report.summary())


def cmd_eval(args) -> int:
    graph = load_model(args.model)
    dataset = load_dataset(args.dataset)
    alpha = _resolve_alpha(graph, args.alpha)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in metrics:
        if m not in METRICS:
            raise EvalError(f"unknown metric {m!r}, expected one of {METRICS}")
    needs_boxes = any(m in ("pointing", "loc") for m in metrics)
    if needs_boxes and any(not item.entries for item in dataset.items):
        raise EvalError("dataset is missing ground-truth regions")
    out_dir = Path(args.out_dir)

    for metric in metrics:
        if metric == "pointing":
            maps = _suite_maps(graph, dataset, args.rule_set, alpha)
            report = pointing_game(maps, dataset.ground_truth(), margin=args.margin)
            report.config.update({"alpha": alpha, "rule_set": args.rule_set, "seed": args.seed})
            _write_report(report, out_dir, "pointing")
        elif metric == "deletion":
            records = []
            for item in dataset.items:
                for label, _ in item.entries:
                    m = compute_map(graph, item.image, label, rule_set=args.rule_set, alpha=alpha)
                    auc = deletion_score(
                        graph, item.image, m, label, args.step_fraction, args.erase_baseline
                    )
                    records.append({"image": item.id, "label": label, "auc": auc})
            from .evaluation import EvalReport, _mean_std

            report = EvalReport(
                metric="deletion",
                records=tuple(records),
                aggregate=_mean_std(r["auc"] for r in records),
                config={
                    "alpha": alpha, "rule_set": args.rule_set, "seed": args.seed,
                    "step_fraction": args.step_fraction, "erase_baseline": args.erase_baseline,
                },
            )
            _write_report(report, out_dir, "deletion")
        elif metric == "loc":
            k = min(args.k, graph.class_count)
            fractions = (
                [args.threshold_fraction]
                if args.threshold_fraction is not None
                else list(THRESHOLD_GRID)
            )
            best = None
            for frac in fractions:
                rep = loc_error(graph, dataset, k, frac, rule_set=args.rule_set, alpha=alpha)
                if best is None or rep.aggregate["error_rate"] < best.aggregate["error_rate"]:
                    best = rep
            best.config.update(
                {"alpha": alpha, "seed": args.seed, "searched": fractions}
            )
            _write_report(best, out_dir, "loc")
        elif metric == "sanity":
            items = [
                (item.id, item.image, item.entries[0][0])
                for item in dataset.items
                if item.entries
            ]
            report = sanity_check(
                graph, items, rule_set=args.rule_set, mode=args.sanity_mode,
                seed=args.seed, alpha=alpha,
            )
            _write_report(report, out_dir, "sanity")
    return 0


def cmd_sweep_alpha(args) -> int:
    graph = load_model(args.model)
    dataset = load_dataset(args.dataset)
    if args.alphas is None:
        alphas = list(ALPHA_GRID_DEFAULT)
    else:
        alphas = [float(a) for a in str(args.alphas).split(",") if a.strip()]
    if not alphas:
        raise EvalError("alpha list is empty")
    seen, unique = set(), []
    for a in alphas:
        if not a > 0:
            raise EvalError(f"alpha must be positive, got {a}")
        if a in seen:
            print(f"warning: duplicate alpha {a} dropped", file=sys.stderr)
            continue
        seen.add(a)
        unique.append(a)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for a in unique:
        maps = _suite_maps(graph, dataset, args.rule_set, a)
        rep = pointing_game(maps, dataset.ground_truth(), margin=args.margin)
        rows.append({"alpha": a, "class_mean": rep.aggregate["mean"],
                     "hit_rate": rep.aggregate["hit_rate"]})
    lines = [_json_dumps({"record": r}) for r in rows]
    lines.append(_json_dumps({
        "metric": "alpha_sweep",
        "config": {"rule_set": args.rule_set, "margin": args.margin, "seed": args.seed},
    }))
    (out_dir / "alpha_sweep.jsonl").write_text("\n".join(lines) + "\n")
    print(f"{'alpha':>6} {'class-mean':>11} {'hit-rate':>9}")
    for r in rows:
        print(f"{r['alpha']:>6.2f} {r['class_mean']:>11.4f} {r['hit_rate']:>9.4f}")
    return 0


def cmd_dataset(args) -> int:
    if args.count < 0:
        raise EvalError(f"count must be non-negative, got {args.count}")
    ds = generate_synthetic_dataset(args.count, seed=args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {args.count} images to {args.out}")
    if args.model_out:
        save_model(build_detector(), args.model_out)
        print(f"wrote detector model to {args.model_out}")
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    _load_config_defaults(parser, argv)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except Exception as exc:  # noqa: BLE001 - surfaced as internal failure
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return INTERNAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
