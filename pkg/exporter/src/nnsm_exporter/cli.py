"""Exporter command line.

    nnsm-export export --manifest m.json --out model.nnsm
    nnsm-export verify --manifest m.json --nnsm model.nnsm [-n 10]

`verify` feeds identical random 8-bit images to the engine (via its CLI,
as a subprocess) and to the ONNX reference evaluator, and reports the
maximum absolute score deviation. The two sides communicate only through
files; the exporter never imports the engine.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

from .convert import ExportError, ExportManifest, export
from .onnx_wire import OnnxParseError, load_onnx
from .runtime import OnnxEvalError, evaluate


def _write_ppm(path, pixels: np.ndarray) -> None:
    # pixels: (c, h, w) uint8 with c in {1, 3}
    c, h, w = pixels.shape
    magic = b"P5" if c == 1 else b"P6"
    body = pixels[0] if c == 1 else pixels.transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(body, dtype=np.uint8).tobytes())


def _engine_scores(engine: str, nnsm_path, image_path, work: Path) -> np.ndarray:
    out_dir = work / "engine_out"
    proc = subprocess.run(
        [
            engine, "explain",
            "--model", str(nnsm_path),
            "--input", str(image_path),
            "--target", "0",
            "--out-dir", str(out_dir),
        ],
        capture_output=True,
        text=True,
    )
    if proc.returncode != 0:
        raise ExportError(
            f"engine invocation failed (exit {proc.returncode}): {proc.stderr.strip()}"
        )
    sidecars = sorted(out_dir.glob("*.json"))
    if not sidecars:
        raise ExportError("engine produced no sidecar")
    scores = json.loads(sidecars[-1].read_text())["scores"]
    return np.asarray(scores, dtype=np.float64)


def cmd_export(args) -> int:
    manifest = ExportManifest.from_json(args.manifest)
    export(manifest, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_verify(args) -> int:
    manifest = ExportManifest.from_json(args.manifest)
    if args.n < 0:
        raise ExportError(f"n must be non-negative, got {args.n}")
    if args.n == 0:
        print("warning: n=0, vacuous pass", file=sys.stderr)
        print("max deviation 0 over 0 inputs (tolerance "
              f"{args.tolerance}): PASS")
        return 0
    graph = load_onnx(manifest.source)
    input_shape = next(iter(graph.inputs.values()))
    channels = input_shape[1]
    if channels not in (1, 3):
        raise ExportError(
            f"verification images need 1 or 3 channels, model takes {channels}"
        )
    mean = np.asarray(manifest.preprocess_mean, dtype=np.float32)[:, None, None]
    std = np.asarray(manifest.preprocess_std, dtype=np.float32)[:, None, None]

    rng = np.random.default_rng(args.seed)
    worst = 0.0
    with tempfile.TemporaryDirectory(prefix="nnsm-verify-") as tmp:
        work = Path(tmp)
        for i in range(args.n):
            pixels = rng.integers(0, 256, size=input_shape[1:], dtype=np.uint8)
            img_path = work / (f"v{i:03d}.pgm" if channels == 1 else f"v{i:03d}.ppm")
            _write_ppm(img_path, pixels)
            engine = _engine_scores(args.engine, args.nnsm, img_path, work)
            normalized = (pixels.astype(np.float32) / 255.0 - mean) / std
            reference = evaluate(graph, normalized[None]).astype(np.float64)
            if engine.shape != reference.shape:
                raise ExportError(
                    f"score lengths differ: engine {engine.shape}, "
                    f"source {reference.shape}"
                )
            worst = max(worst, float(np.abs(engine - reference).max()))
    ok = worst <= args.tolerance
    print(
        f"max deviation {worst:.3e} over {args.n} inputs "
        f"(tolerance {args.tolerance}): {'PASS' if ok else 'FAIL'}"
    )
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nnsm-export", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="convert an ONNX checkpoint to NNSM")
    p.add_argument("--manifest", required=True, help="export manifest JSON")
    p.add_argument("--out", required=True, help="output NNSM path")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("verify", help="compare engine scores against the source runtime")
    p.add_argument("--manifest", required=True)
    p.add_argument("--nnsm", required=True)
    p.add_argument("-n", type=int, default=10, help="number of random inputs")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--engine", default="tsgb", help="engine CLI executable")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(sys.argv[1:] if argv is None else list(argv))
    try:
        return args.func(args)
    except (ExportError, OnnxParseError, OnnxEvalError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - surfaced as internal failure
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
