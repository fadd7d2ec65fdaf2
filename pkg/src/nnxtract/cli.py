"""Command-line interface: generate, extract, verify, bench."""
from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys

import numpy as np

from . import report as rpt
from .extracted import ExtractedModel
from .model import verify_extraction
from .nnxio import NnxFormatError, load_model, save_extracted, save_model
from .oracle import Oracle, QUANT_MODES
from .pipeline import ExtractionConfig, ExtractionError, extract_model, run_benchmark
from .victimgen import GenSpec, generate, generate_suite

EXIT_BAD_ARGS = 2
EXIT_IO = 3
EXIT_EXTRACTION = 4
EXIT_VERIFY = 5

log = logging.getLogger("nnxtract")


def _setup_logging():
    level = os.environ.get("NNX_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _parse_dims(text: str):
    try:
        dims = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer list {text!r}")
    if len(dims) < 3 or any(d <= 0 for d in dims) or dims[-1] != 1:
        raise argparse.ArgumentTypeError(
            "need at least input,hidden,1 dims with scalar output")
    return dims


def _parse_seeds(text: str):
    if not text.strip():
        raise argparse.ArgumentTypeError("empty seed list")
    return [int(p) for p in text.split(",")]


def cmd_gen(args) -> int:
    if args.suite:
        manifest = generate_suite(args.dir, suite=args.suite, mode=args.mode)
        print(json.dumps(manifest, indent=2))
        return 0
    if not args.layers or not args.out:
        print("gen: need --layers and --out (or --suite/--dir)", file=sys.stderr)
        return EXIT_BAD_ARGS
    spec = GenSpec(layer_dims=args.layers, mode=args.mode, seed=args.seed,
                   epochs=args.epochs)
    model, losses = generate(spec)
    try:
        save_model(model, args.out)
    except OSError as e:
        print(f"gen: cannot write {args.out}: {e}", file=sys.stderr)
        return EXIT_IO
    info = {"file": args.out, "dims": list(model.layer_dims),
            "mode": args.mode, "seed": args.seed}
    if losses:
        info["loss_first"] = round(losses[0], 6)
        info["loss_last"] = round(losses[-1], 6)
    print(json.dumps(info))
    return 0


def _config_from_args(args) -> ExtractionConfig:
    return ExtractionConfig(s=args.s, hard_threshold=args.hard_threshold,
                            quantization=args.quantize_sign,
                            precision_improve=args.precision_improve,
                            max_hard=args.max_hard, dedup=not args.no_dedup,
                            workers=args.threads)


def cmd_extract(args) -> int:
    try:
        victim = load_model(args.model)
    except (OSError, NnxFormatError) as e:
        print(f"extract: cannot load {args.model}: {e}", file=sys.stderr)
        return EXIT_IO
    cfg = _config_from_args(args)
    echo = {"model": args.model, "seed": args.seed, "s": cfg.s,
            "hard_threshold": cfg.hard_threshold,
            "quantization": cfg.quantization,
            "precision_improve": cfg.precision_improve,
            "max_hard": cfg.max_hard, "dedup": cfg.dedup,
            "threads": cfg.workers}
    print("config:", json.dumps(echo))
    oracle = Oracle(victim)
    try:
        extracted, report = extract_model(oracle, cfg, args.seed,
                                          victim_seed=victim.seed)
    except ExtractionError as e:
        print(f"extract: failed at layer {e.layer}: {e}", file=sys.stderr)
        return EXIT_EXTRACTION
    report["config"] = echo
    if args.out:
        save_extracted(extracted, args.out)
    if args.report:
        rpt.write_json(report, args.report)
    totals = report["oracle_totals"]
    print(f"{'layer':>6} {'critpoint':>10} {'signature':>10} {'sign':>8} "
          f"{'precision':>10} {'t_sig[s]':>9} {'t_sign[s]':>10}")
    for lr in report["layers"]:
        q = lr["queries"]
        t = lr["time_s"]
        print(f"{lr['index']:>6} {q['critpoint']:>10} {q['signature']:>10} "
              f"{q['sign']:>8} {q['precision']:>10} {t['signature']:>9.2f} "
              f"{t['sign']:>10.3f}")
    print(f"final layer: {report['final_layer']['queries']} queries, "
          f"residual {report['final_layer']['residual']:.2e}")
    print("totals:", json.dumps(totals))
    return 0


def cmd_verify(args) -> int:
    try:
        truth = load_model(args.truth)
        ext_model, meta = load_model(args.extracted, with_extra=True)
    except (OSError, NnxFormatError) as e:
        print(f"verify: cannot load models: {e}", file=sys.stderr)
        return EXIT_IO
    from .extracted import ExtractedLayer
    layers = []
    Ws, bs = ext_model.weights, ext_model.biases
    for i in range(len(Ws) - 1):
        width = Ws[i].shape[0]
        layers.append(ExtractedLayer(
            layer_index=i + 1, signatures=np.asarray(Ws[i]),
            signs=np.ones(width, dtype=int), bias_multiples=np.asarray(bs[i]),
            confidence=np.ones(width), status=["easy"] * width,
            achieved_precision=np.zeros(width)))
    extracted = ExtractedModel(layers=layers, final_weights=Ws[-1][0],
                               final_bias=float(bs[-1][0]),
                               alignment=[[1.0] * l.width for l in layers])
    result = verify_extraction(truth, extracted, tol=args.tol)
    print(f"{'layer':>6} {'neuron':>7} {'match':>6} {'scale':>10} "
          f"{'max_rel_err':>12} {'sign':>5}")
    failures = 0
    for li, layer in enumerate(result.layers):
        for k, nv in enumerate(layer):
            ok = nv.matched_row >= 0 and nv.sign_correct and nv.max_rel_error <= args.tol
            failures += not ok
            print(f"{li + 1:>6} {k:>7} {nv.matched_row:>6} {nv.scale:>10.4f} "
                  f"{nv.max_rel_error:>12.3e} {'ok' if nv.sign_correct else 'NO':>5}")
    print(f"functional max |f - f_hat| over {result.n_check} inputs: "
          f"{result.functional_max_err:.3e}")
    if failures:
        print(f"verify: {failures} neuron(s) failed at tol {args.tol}",
              file=sys.stderr)
        return EXIT_VERIFY
    return 0


def cmd_bench(args) -> int:
    if args.suite_dir:
        manifest_path = os.path.join(args.suite_dir, "manifest.json")
        try:
            with open(manifest_path) as fh:
                manifest = json.load(fh)
            paths = [os.path.join(args.suite_dir, e["file"])
                     for e in manifest["models"]]
        except OSError as e:
            print(f"bench: cannot read manifest: {e}", file=sys.stderr)
            return EXIT_IO
    else:
        paths = sorted(glob.glob(args.models)) if args.models else []
    if not paths:
        print("bench: no models found", file=sys.stderr)
        return EXIT_IO
    if args.widths:
        keep = {int(w) for w in args.widths.split(",")}
        filtered = []
        for p in paths:
            try:
                dims = load_model(p).layer_dims
            except (OSError, NnxFormatError):
                continue
            if dims[1] in keep:
                filtered.append(p)
        paths = filtered
    cfg = _config_from_args(args)
    print("config:", json.dumps({"seeds": args.seeds, "s": cfg.s,
                                 "s_high": args.s_high,
                                 "quantization": cfg.quantization,
                                 "models": [os.path.basename(p) for p in paths]}))
    rows, skipped = run_benchmark(paths, args.seeds, cfg, s_high=args.s_high)
    for sk in skipped:
        print(f"bench: skipped {sk['model']}: {sk['note']}", file=sys.stderr)
    summary = rpt.summarize_bench(rows)
    os.makedirs(args.out_dir, exist_ok=True)
    rpt.write_bench_csv(rows, os.path.join(args.out_dir, "bench.csv"))
    rpt.write_json({"rows": rows, "summary": summary, "skipped": skipped},
                   os.path.join(args.out_dir, "bench.json"))
    figures = rpt.render_bench_figures(summary, args.out_dir)
    print(rpt.format_bench_table(summary))
    print("wrote:", os.path.join(args.out_dir, "bench.csv"),
          os.path.join(args.out_dir, "bench.json"), *figures)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="nnx",
        description="Query-only parameter extraction for ReLU networks")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate victim models")
    g.add_argument("--layers", type=_parse_dims, default=None,
                   help="comma-separated dims, e.g. 10,5,5,1")
    g.add_argument("--mode", choices=["random-init", "random-trained"],
                   default="random-trained")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--epochs", type=int, default=100)
    g.add_argument("--out", default=None)
    g.add_argument("--suite", choices=["table-random", "table1"], default=None)
    g.add_argument("--dir", default="models")
    g.set_defaults(func=cmd_gen)

    def add_cfg(p):
        p.add_argument("--s", type=int, default=15)
        p.add_argument("--hard-threshold", type=float, default=0.6)
        p.add_argument("--quantize-sign", choices=list(QUANT_MODES), default="b32")
        p.add_argument("--precision-improve", action="store_true")
        p.add_argument("--max-hard", type=int, default=10)
        p.add_argument("--no-dedup", action="store_true")
        p.add_argument("--threads", type=int, default=1)

    e = sub.add_parser("extract", help="extract a victim model's parameters")
    e.add_argument("--model", required=True)
    e.add_argument("--seed", type=int, default=0, help="extraction seed")
    e.add_argument("--out", default=None, help="write extracted NNX here")
    e.add_argument("--report", default=None, help="write report JSON here")
    add_cfg(e)
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("verify", help="compare an extraction against ground truth")
    v.add_argument("--truth", required=True)
    v.add_argument("--extracted", required=True)
    v.add_argument("--tol", type=float, default=1e-6)
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="layer-2 benchmark over a model suite")
    b.add_argument("--suite-dir", default=None,
                   help="directory with manifest.json from `gen --suite`")
    b.add_argument("--models", default=None, help="glob of NNX files")
    b.add_argument("--widths", default=None,
                   help="only benchmark these layer widths (comma list)")
    b.add_argument("--seeds", type=_parse_seeds, default=[0, 10, 40, 42])
    b.add_argument("--s-high", type=int, default=200)
    b.add_argument("--out-dir", default="bench_out")
    add_cfg(b)
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
