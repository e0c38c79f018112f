"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Set ``OTFPF_THREADS`` to cap subject-level parallelism.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import DatasetManifest, generate_synthetic_dataset
from .errors import ConfigError, DataError, NumericalError
from .experiment import evaluate_checkpoint, run_ablation, run_experiment
from .model import OtfpfConfig
from .ot import SinkhornConfig, sinkhorn
from .tensor_io import load_tensor, save_tensor


def _cmd_generate(args) -> int:
    manifest = generate_synthetic_dataset(args.n, args.size, args.seed, args.out)
    counts = {s: len(manifest.split_records(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.records)} subjects to {args.out} "
          f"(train/val/test = {counts['train']}/{counts['val']}/{counts['test']})")
    print(f"manifest: {Path(args.out) / 'manifest.json'}")
    return 0


def _load_manifest(path: str) -> tuple[DatasetManifest, Path]:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    return DatasetManifest.load(p), p.parent


def _cmd_train(args) -> int:
    cfg = OtfpfConfig.from_json(args.config) if args.config else OtfpfConfig()
    manifest, base = _load_manifest(args.manifest)
    result = run_experiment(cfg, manifest, base, args.out,
                            max_epochs=args.epochs,
                            make_figures=not args.no_figures)
    m = result.metrics
    print(f"epochs run: {result.epochs_run} (best at {result.best_epoch}), "
          f"{result.seconds:.1f}s")
    print(f"test MAE {m.mae:.3f} | PCC {_fmt(m.pcc)} | SRCC {_fmt(m.srcc)} "
          f"| baseline MAE {result.baseline_mae:.3f}")
    print(f"artifacts in {result.out_dir}")
    return 0


def _cmd_eval(args) -> int:
    manifest, base = _load_manifest(args.manifest)
    metrics = evaluate_checkpoint(args.ckpt, manifest, base, split=args.split,
                                  out_dir=args.out,
                                  make_figures=not args.no_figures)
    print(json.dumps({"split": args.split, "mae": metrics.mae,
                      "pcc": metrics.pcc, "srcc": metrics.srcc,
                      "n": metrics.n}, indent=2))
    return 0


def _cmd_ablate(args) -> int:
    cfg = OtfpfConfig.from_json(args.config) if args.config else OtfpfConfig()
    manifest, base = _load_manifest(args.manifest)
    table = run_ablation(manifest, base, args.out, base_cfg=cfg,
                         epochs=args.epochs)
    rows = [table["full"]] + table["ablations"]
    width = max(len(r["name"]) for r in rows)
    for r in rows:
        print(f"{r['name']:<{width}}  params={r['parameters']:>9,}  "
              f"MAE={r['mae']:.3f}  PCC={_fmt(r['pcc'])}  SRCC={_fmt(r['srcc'])}")
    print(f"table: {Path(args.out) / 'ablation.tsv'}")
    return 0


def _cmd_sinkhorn_solve(args) -> int:
    cost = load_tensor(args.cost)
    a = load_tensor(args.a).reshape(-1)
    b = load_tensor(args.b).reshape(-1)
    if cost.ndim != 2:
        raise DataError(f"cost tensor must be 2-D, got shape {cost.shape}")
    cfg = SinkhornConfig(epsilon=args.epsilon, max_iterations=args.max_iter,
                         tolerance=args.tol,
                         log_domain=True if args.log_domain else None)
    plan = sinkhorn(a, b, cost, cfg)
    out = Path(args.out)
    save_tensor(out, plan.plan.astype(np.float32))
    report = {
        "cost": plan.achieved_cost,
        "entropy": plan.entropy,
        "iterations": plan.iterations_used,
        "marginal_violation": plan.marginal_violation,
        "converged": plan.converged,
        "log_domain": plan.used_log_domain,
    }
    report_path = Path(args.report) if args.report else out.with_suffix(".report.json")
    report_path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(report, indent=2))
    print(f"plan: {out.with_suffix('.json')} / {out.with_suffix('.bin')}")
    return 0


def _cmd_otem_embed(args) -> int:
    from .autodiff import Tensor, no_grad
    from .otem import (AnchorSet, KernelSpec, OtemConfig, ReferenceSet,
                       otem_embed_with_info)
    from .autodiff import Parameter

    x = load_tensor(args.input)
    if x.ndim != 2:
        raise DataError(f"input tensor must be an m x C row set, got shape {x.shape}")
    try:
        spec = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {args.config}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config JSON {args.config}: {exc}") from exc
    known = {"sigma", "n_refs", "p_anchors", "seed", "epsilon",
             "max_iterations", "tolerance", "anchors_path", "references_path"}
    unknown = set(spec) - known
    if unknown:
        raise ConfigError(f"unknown otem config fields: {sorted(unknown)}")
    sk = SinkhornConfig(epsilon=spec.get("epsilon", 0.1),
                        max_iterations=spec.get("max_iterations", 100),
                        tolerance=spec.get("tolerance", 1e-6))
    rng = np.random.default_rng(spec.get("seed", 0))
    sigma = float(spec.get("sigma", 1.0))
    feature_dim = x.shape[1]
    if spec.get("anchors_path"):
        anchors = AnchorSet(Parameter(load_tensor(spec["anchors_path"]), "anchors"))
    else:
        anchors = AnchorSet.random(int(spec.get("p_anchors") or feature_dim),
                                   feature_dim, rng)
    if spec.get("references_path"):
        refs = ReferenceSet(Parameter(load_tensor(spec["references_path"]),
                                      "references"))
    else:
        refs = ReferenceSet.random(int(spec.get("n_refs", 4)), anchors.count, rng)
    cfg = OtemConfig(kernel=KernelSpec(bandwidth=sigma), anchors=anchors,
                     references=refs, sinkhorn=sk)
    with no_grad():
        out, info = otem_embed_with_info(Tensor(x), cfg)
    save_tensor(args.out, out.data)
    print(json.dumps({"output_shape": list(out.shape),
                      "sinkhorn_iterations": info["iterations"],
                      "converged": info["converged"]}, indent=2))
    return 0


def _fmt(v) -> str:
    return "undefined" if v is None else f"{v:.3f}"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otfpf",
        description="Brain-age estimation over synthetic volumes: transport-"
                    "embedded feature pyramids on overlapped 3D ConvNeXt pathways.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset + manifest")
    g.add_argument("--n", type=int, required=True, help="number of subjects (>= 10)")
    g.add_argument("--size", type=int, required=True, help="voxels per axis (>= 16)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=_cmd_generate)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--config", help="model config JSON (defaults when omitted)")
    t.add_argument("--manifest", required=True, help="manifest file or dataset dir")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--epochs", type=int, default=None,
                   help="override the config's max_epochs")
    t.add_argument("--no-figures", action="store_true",
                   help="skip PNG rendering, keep text/JSON outputs")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--ckpt", required=True, help="checkpoint prefix or .json path")
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--out", default=None, help="optional directory for reports")
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("ablate", help="train the full model and the six variants")
    a.add_argument("--manifest", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config", help="base config JSON")
    a.add_argument("--epochs", type=int, default=1,
                   help="epochs per configuration (default 1)")
    a.set_defaults(func=_cmd_ablate)

    s = sub.add_parser("sinkhorn-solve",
                       help="solve one entropic transport instance from tensor files")
    s.add_argument("--cost", required=True, help="n x m cost tensor")
    s.add_argument("--a", required=True, help="row marginal (length n)")
    s.add_argument("--b", required=True, help="column marginal (length m)")
    s.add_argument("--epsilon", type=float, default=0.1)
    s.add_argument("--max-iter", type=int, default=100)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--log-domain", action="store_true",
                   help="force log-domain updates (default: automatic)")
    s.add_argument("--out", required=True, help="output plan tensor prefix")
    s.add_argument("--report", default=None,
                   help="report JSON path (default <out>.report.json)")
    s.set_defaults(func=_cmd_sinkhorn_solve)

    o = sub.add_parser("otem-embed",
                       help="embed an m x C row set to a fixed n x p tensor")
    o.add_argument("--input", required=True, help="input tensor (m x C)")
    o.add_argument("--config", required=True, help="embedding config JSON")
    o.add_argument("--out", required=True, help="output tensor prefix")
    o.set_defaults(func=_cmd_otem_embed)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
