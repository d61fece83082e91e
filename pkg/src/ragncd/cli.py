"""Command-line entry point.

Exit codes: 0 success, 1 internal error, 2 bad input or config, 3 validation failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fusion, losses, retrieval, sskmeans
from .pipeline import (
    EXIT_BAD_INPUT,
    EXIT_INTERNAL,
    EXIT_INVALID,
    EXIT_OK,
    ConfigError,
    Run,
    StageError,
    evaluate,
    make_config,
    run_pipeline,
    topk_sweep,
)
from .store import BundleError, load_bundle, validate_bundle, write_bundle

log = logging.getLogger("ragncd")


def _common(p: argparse.ArgumentParser, out_required: bool = False):
    p.add_argument("--config", help="INI file with a [pipeline] section; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=out_required)
    p.add_argument("--k", type=int, help="captions retrieved per image")
    p.add_argument("--clusters", type=int, help="total cluster count K")
    p.add_argument("--no-text", action="store_true", default=None, help="image-only ablation")


def _synth_flags(p):
    p.add_argument("--num-classes", type=int)
    p.add_argument("--known-classes", type=int)
    p.add_argument("--samples-per-class", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--class-separation", type=float)
    p.add_argument("--text-noise", type=float)
    p.add_argument("--captions-per-class", type=int)
    p.add_argument("--distractors-per-class", type=int)
    p.add_argument("--distractor-noise", type=float)
    p.add_argument("--style-modes", type=int)
    p.add_argument("--style-strength", type=float)
    p.add_argument("--labeled-fraction", type=float)


def _cluster_flags(p):
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--freeze-known-centers", action="store_true", default=None)
    p.add_argument("--empty-cluster", choices=sskmeans.EMPTY_POLICIES)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ragncd", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic image bundle, caption corpus and split")
    _common(p, out_required=True)
    _synth_flags(p)

    p = sub.add_parser("retrieve", help="top-k caption retrieval for every image")
    _common(p, out_required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("fuse", help="concatenate image views with mean-pooled caption views")
    _common(p, out_required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--corpus")
    p.add_argument("--retrieval", help="retrieval dump (JSON lines) from the retrieve command")
    p.add_argument("--renormalize-joint", action="store_true", default=None)

    p = sub.add_parser("cluster", help="semi-supervised k-means on a fused bundle")
    _common(p, out_required=True)
    p.add_argument("--fused", required=True)
    _cluster_flags(p)

    p = sub.add_parser("eval", help="All/Old/New clustering accuracy of a fitted model")
    _common(p, out_required=True)
    p.add_argument("--fused", required=True)
    p.add_argument("--model", required=True)
    # accepted so the report's config echo can describe the run that produced the inputs
    _synth_flags(p)
    _cluster_flags(p)

    for name, helptext in (("run", "full pipeline"), ("sweep", "pipeline over several k values")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _synth_flags(p)
        _cluster_flags(p)
        p.add_argument("--images")
        p.add_argument("--corpus")
        p.add_argument("--renormalize-joint", action="store_true", default=None)
        p.add_argument("--workers", type=int)
        p.add_argument("--no-cache", dest="cache", action="store_false", default=None)
        if name == "sweep":
            p.add_argument("--ks", required=True, help="comma-separated k values, e.g. 1,3,10,30")

    p = sub.add_parser("loss-check", help="finite-difference check of the contrastive loss gradients")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--tau", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--denominator", choices=losses.DENOMINATORS)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("validate", help="check a bundle directory against its invariants")
    p.add_argument("bundle")
    return ap


_RUN_KEYS = (
    "seed", "out", "k", "clusters", "no_text", "num_classes", "known_classes", "samples_per_class", "dim",
    "class_separation", "text_noise", "captions_per_class", "distractors_per_class", "distractor_noise",
    "style_modes", "style_strength", "labeled_fraction", "tol", "max_iters", "freeze_known_centers",
    "empty_cluster", "images", "corpus", "renormalize_joint", "workers", "cache", "tau", "lam", "denominator",
)


def _config(args):
    overrides = {k: getattr(args, k) for k in _RUN_KEYS if getattr(args, k, None) is not None}
    return make_config(getattr(args, "config", None), **overrides)


def _print_report(rep):
    def fmt(x):
        return "n/a" if x is None else f"{x:.4f}"

    print(f"ACC all={fmt(rep.acc_all)} old={fmt(rep.acc_old)} new={fmt(rep.acc_new)} "
          f"(n={rep.n_all}, old={rep.n_old}, new={rep.n_new})")


def cmd_synth(args) -> int:
    cfg = _config(args)
    run = Run(cfg)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    images, corpus = run.stage_synth()
    print(f"images: {images}\ncorpus: {corpus}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    cfg = _config(args)
    results = retrieval.batch_retrieve(load_bundle(args.images), load_bundle(args.corpus), cfg.k, cfg.workers)
    retrieval.write_retrievals(results, args.out)
    print(f"{len(results)} queries, k={cfg.k} -> {args.out}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    cfg = _config(args)
    images = load_bundle(args.images)
    if cfg.no_text:
        out = fusion.image_only(images)
    else:
        if not (args.corpus and args.retrieval):
            raise ConfigError("fuse needs --corpus and --retrieval unless --no-text is given")
        out = fusion.fuse_dataset(
            images, retrieval.read_retrievals(args.retrieval), load_bundle(args.corpus), bool(args.renormalize_joint)
        )
    write_bundle(out, args.out)
    print(f"fused {out.count} rows, dim {out.dim} -> {args.out}")
    return EXIT_OK


def cmd_cluster(args) -> int:
    cfg = _config(args)
    fused = load_bundle(args.fused)
    if cfg.clusters is None:
        cfg = replace(cfg, clusters=len({r.class_truth for r in fused.records if r.class_truth is not None}) or None)
    if cfg.clusters is None:
        raise ConfigError("--clusters is required when the bundle has no class_truth")
    model = sskmeans.fit(fused, Run(cfg).cluster_config(fused))
    model.save(args.out)
    print(f"{model.iterations_run} iterations, converged={model.converged}, "
          f"inertia={model.inertia_trace[-1]:.6g} -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    report = evaluate(load_bundle(args.fused), sskmeans.ClusterModel.load(args.model))
    report.config = cfg.echo()
    report.save(args.out)
    _print_report(report)
    return EXIT_OK


def cmd_run(args) -> int:
    res = run_pipeline(_config(args))
    for name, st in res.manifest["stages"].items():
        print(f"{name:9s} {st['status']}")
    _print_report(res.report)
    return EXIT_OK


def cmd_sweep(args) -> int:
    try:
        ks = [int(k) for k in args.ks.split(",") if k.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --ks: {e}") from e
    rows = topk_sweep(_config(args), ks)
    print("k\tacc_all\tacc_old\tacc_new\tstatus")
    for r in rows:
        vals = ["" if r[n] is None else f"{r[n]:.4f}" for n in ("acc_all", "acc_old", "acc_new")]
        print("\t".join([str(r["k"]), *vals, r["status"]]))
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_INTERNAL


def cmd_loss_check(args) -> int:
    cfg = make_config(args.config, **{k: getattr(args, k) for k in ("seed", "tau", "lam", "denominator")
                                      if getattr(args, k) is not None})
    rng = np.random.default_rng(cfg.seed)
    worst = 0.0
    print("batch\tB\td\ttau\tlambda\trel_err\tresult")
    for b in range(args.batches):
        size = int(rng.integers(2, 17))
        dim = int(rng.choice([3, 8]))
        batch = losses.random_batch(rng, size, dim, tau=cfg.tau, lam=cfg.lam, denominator=cfg.denominator)
        err = losses.fd_check(batch)
        worst = max(worst, err)
        verdict = "pass" if err < args.tolerance else "FAIL"
        print(f"{b}\t{size}\t{dim}\t{cfg.tau:g}\t{cfg.lam:g}\t{err:.2e}\t{verdict}")
    print(f"worst relative error {worst:.2e} (tolerance {args.tolerance:g})")
    return EXIT_OK if worst < args.tolerance else EXIT_INVALID


def cmd_validate(args) -> int:
    try:
        bundle = load_bundle(args.bundle)
    except BundleError as e:
        print(f"INVALID: {e}")
        return EXIT_INVALID
    problems = validate_bundle(bundle)
    for p in problems:
        print(p)
    if problems:
        return EXIT_INVALID
    print(f"ok: {bundle.count} rows x {bundle.dim}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "retrieve": cmd_retrieve,
    "fuse": cmd_fuse,
    "cluster": cmd_cluster,
    "eval": cmd_eval,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "loss-check": cmd_loss_check,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (ConfigError, BundleError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except Exception as e:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
