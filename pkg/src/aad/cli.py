"""Command-line entry point: ``aad synth | features | train | eval | bench | verify``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import AadError, ConfigurationError, EmptyInputError, UsageError, __version__

log = logging.getLogger("aad")

SCHEMA = "aad-config/1"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- config ---------------------------------------------------------------------

def load_config(path: str | None) -> dict:
    """Read a JSON profile; ``None`` or "paper" selects the shipped paper profile."""
    if path in (None, "paper"):
        text = resources.files("aad").joinpath("profiles/paper.json").read_text()
        source = "paper"
    else:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        text, source = p.read_text(), str(p)
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{source}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict) or cfg.get("schema") != SCHEMA:
        raise UsageError(f"{source}: expected top-level \"schema\": \"{SCHEMA}\"")
    return cfg


def _section(cfg: dict, name: str) -> dict:
    if name in cfg:
        return dict(cfg[name])
    return dict(load_config(None)[name])


# -- commands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synthgen import gen_dataset, specs_from_config

    cfg = load_config(args.config)
    if "synth" not in cfg:
        raise UsageError(f"{args.config}: no \"synth\" section")
    specs = specs_from_config(cfg["synth"])
    out = Path(args.out)
    try:
        manifest = gen_dataset(specs, out, overwrite=args.overwrite)
    except FileExistsError:
        raise UsageError(f"{out} is not empty; pass --overwrite to regenerate") from None
    from .pipeline import write_manifest

    # one manifest per directory: the run manifest absorbs the generator's record
    write_manifest(out, "synth", cfg["synth"], sorted({s.seed for s in specs}), [args.config],
                   sorted(manifest["counts"]), extra={"generator": manifest["generator"],
                                                      "counts": manifest["counts"]})
    print(f"wrote {sum(s.n_normal + s.n_anomalous for s in specs)} clips in {len(specs)} groups to {out}")
    return EXIT_OK


def cmd_features(args) -> int:
    from .audio_io import scan_dataset
    from .pipeline import extract_features, write_manifest

    data = args.data or os.environ.get("AAD_DATA_ROOT")
    if not data:
        raise UsageError("no data directory: pass --data or set AAD_DATA_ROOT")
    if not Path(data).is_dir():
        raise UsageError(f"data directory not found: {data}")
    cfg = _section(load_config(args.config), "features")
    policy = args.valve_preprocess or cfg.get("valve_preprocess", "on")
    seeds = args.seeds if args.seeds is not None else cfg.get("split_seeds", [0])
    index = scan_dataset(data)
    for w in index.warnings:
        log.warning(w)
    index = index.select(machine=args.machine, model_id=args.model_id, snr=args.snr)
    if not len(index):
        raise EmptyInputError("no clips match the --machine / --model-id / --snr filters")
    stats = extract_features(index, args.out, policy, seeds)
    write_manifest(args.out, "features", {"valve_preprocess": policy, "split_seeds": list(seeds)}, seeds,
                   [data], ["index.csv", "features.json"])
    print(f"{stats['computed']} computed, {stats['cached']} cached, {stats['groups']} groups -> {args.out}")
    return EXIT_OK


def _train_config(args):
    from .training import TrainConfig

    cfg = _section(load_config(args.config), args.model)
    if args.model == "svdd":
        if args.dim is not None:
            cfg["subspace_dim"] = args.dim
        if args.variant:
            cfg["variant"] = args.variant
    elif args.dim is not None or args.variant:
        raise UsageError("--dim and --variant apply to svdd only")
    if args.max_epochs is not None:
        cfg["max_epochs"] = args.max_epochs
    cfg["seed"] = args.seed
    return TrainConfig.from_dict(cfg)


def cmd_train(args) -> int:
    from .pipeline import FeatureStore, train_group, write_manifest

    config = _train_config(args)
    store = FeatureStore.open(args.features)
    groups = store.index.select(machine=args.machine, model_id=args.model_id, snr=args.snr).groups()
    if not groups:
        raise EmptyInputError("no groups match the filters")
    outputs = []
    for machine, model_id, snr in groups:
        d = train_group(store, machine, model_id, snr, config, args.out)
        outputs.append(str(Path(d).relative_to(args.out)))
        print(f"{machine} {model_id} {snr}: {d}")
    manifest_cfg = config.to_dict()
    manifest_cfg["paper_config"] = config.is_paper_dim
    if not config.is_paper_dim:
        log.warning("subspace dim %d is outside the evaluated set (2, 4, 8); flagged non-paper",
                    config.subspace_dim)
    write_manifest(args.out, "train", manifest_cfg, [config.seed], [args.features], outputs)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import aggregate
    from .pipeline import FeatureStore, evaluate_checkpoint, find_checkpoints, write_manifest

    store = FeatureStore.open(args.features)
    ckpts = find_checkpoints(args.checkpoints)
    if not ckpts:
        raise EmptyInputError(f"no model.ckpt files under {args.checkpoints}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, runs = [], []
    score_rows = ["checkpoint,path,label,score"]
    for p in ckpts:
        rec, scores, ckpt = evaluate_checkpoint(p, store)
        records.append(rec)
        runs.append((p, rec, scores))
        rel = p.parent.relative_to(args.checkpoints)
        score_rows += [f"{rel},{s.path},{s.label},{s.score!r}" for s in scores]
        print(f"{rel}: AUC {rec.auc:.4f} ({rec.n_test} test clips)")
    report = aggregate(records)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.md").write_text(report.to_markdown())
    (out / "scores.csv").write_text("\n".join(score_rows) + "\n")
    outputs = ["report.csv", "report.md", "scores.csv"]
    if not args.no_figures:
        outputs += _eval_figures(out, runs, report)
    write_manifest(out, "eval", {"checkpoints": sorted(str(p) for p in ckpts)},
                   sorted({r.seed for r in records}), [args.checkpoints, args.features], outputs)
    print(report.to_markdown(), end="")
    return EXIT_OK


def _eval_figures(out: Path, runs, report) -> list[str]:
    from . import plots
    from .evaluation import method_label
    from .training import TrainingLog

    names = []
    by_group = {}
    for p, rec, scores in runs:
        by_group.setdefault((rec.machine, rec.model_id, rec.snr, rec.seed), []).append((p, rec, scores))
    for (machine, model_id, snr, seed), items in sorted(by_group.items()):
        stem = f"{machine}_{model_id}_{snr}_seed{seed}"
        curves = [(method_label(r.model_kind, r.subspace_dim), [s.score for s in sc], [s.label for s in sc], r.auc)
                  for _, r, sc in items]
        names.append(str(plots.plot_roc(curves, out / "figures" / f"roc_{stem}.png",
                                        f"{machine} {model_id} {snr} seed {seed}").relative_to(out)))
        for p, r, sc in items:
            tag = f"{stem}_{r.model_kind}{r.subspace_dim or ''}"
            names.append(str(plots.plot_score_hist([s.score for s in sc], [s.label for s in sc],
                                                   out / "figures" / f"scores_{tag}.png",
                                                   f"{method_label(r.model_kind, r.subspace_dim)} {stem}")
                             .relative_to(out)))
            log_path = p.parent / "train_log.csv"
            if log_path.exists():
                tl = TrainingLog.from_csv(log_path.read_text())
                names.append(str(plots.plot_losses(tl, out / "figures" / f"loss_{tag}.png", tag).relative_to(out)))
    names.append(str(plots.plot_auc_summary(report, out / "figures" / "auc_summary.png").relative_to(out)))
    return names


def cmd_bench(args) -> int:
    from .evaluation import hardware_descriptor, measure_latency
    from .features import compute_log_mel, make_feature_batch
    from .models import build_dense_ae, build_svdd_net
    from .pipeline import FeatureStore, find_checkpoints, write_manifest
    from .training import Checkpoint, TrainConfig

    reps = args.repetitions
    if args.features:
        store = FeatureStore.open(args.features)
        entry = next(iter(store.index))
        spec, source = store[entry.path], entry.path
    else:
        x = np.random.default_rng(0).standard_normal(160000) * 0.05
        spec, source = compute_log_mel(x, 16000), "synthetic white noise"
    if args.checkpoints:
        ckpts = [Checkpoint.load(p) for p in find_checkpoints(args.checkpoints)]
        if not ckpts:
            raise EmptyInputError(f"no model.ckpt files under {args.checkpoints}")
    else:
        # untrained builds time identically to trained ones
        ckpts = [Checkpoint(build_dense_ae(0), TrainConfig.default_ae())]
        for dim in (2, 4, 8):
            m = build_svdd_net(dim, 0)
            m.center = np.zeros(dim)
            ckpts.append(Checkpoint(m, TrainConfig.paper_svdd(dim)))
    rows = ["method,param_count,mean_ms_per_clip,ms_per_unit,units_per_clip,repetitions"]
    md = [f"Hardware: {hardware_descriptor()}", f"Input: {source}", "",
          "| Method | Trainable parameters | ms / 10 s clip | ms / unit |", "|---|---|---|---|"]
    seen = set()
    for ck in ckpts:
        dim = ck.model.subspace_dim if ck.kind == "svdd" else 0
        if (ck.kind, dim) in seen:
            continue
        seen.add((ck.kind, dim))
        fb = make_feature_batch(spec, ck.norm, kinds=(ck.kind,))
        lat = measure_latency(ck, fb, reps)
        n_params = ck.model.params.total_parameter_count()
        name = "Dense AE" if ck.kind == "ae" else f"Deep SVDD (dim {dim})"
        rows.append(f"{name},{n_params},{lat.mean_ms:.4f},{lat.per_window_ms:.5f},{lat.n_units},{lat.repetitions}")
        md.append(f"| {name} | {n_params:,} | {lat.mean_ms:.3f} | {lat.per_window_ms:.4f} |")
        print(f"{name}: {n_params} params, {lat.mean_ms:.3f} ms/clip")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.csv").write_text("\n".join(rows) + "\n")
    (out / "bench.md").write_text("\n".join(md) + "\n")
    write_manifest(out, "bench", {"repetitions": reps}, [0],
                   [p for p in (args.features, args.checkpoints) if p], ["bench.csv", "bench.md"])
    return EXIT_OK


def _corrupt_gradient(name, grad):
    """Test hook for ``--inject-grad-fault``: scale one tensor's analytic gradient."""
    g = grad.copy()
    if g.size:
        g.reshape(-1)[0] = g.reshape(-1)[0] * 1.01 + 1e-3
    return g


def cmd_verify(args) -> int:
    from .verify import run_all

    hook = _corrupt_gradient if args.inject_grad_fault else None
    results = run_all(range(args.grad_seeds), args.auc_instances, hook)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aad", description="Audio anomaly detection with a dense AE and deep SVDD.")
    p.add_argument("--version", action="version", version=f"aad {__version__}")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS / OpenMP threads")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded numerics so reductions are bit-reproducible")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic MIMII-style dataset")
    s.add_argument("--config", required=True, help="JSON config with a \"synth\" section (or \"paper\")")
    s.add_argument("--out", required=True)
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("features", help="extract and cache log-Mel features, splits and normalizers")
    s.add_argument("--data", help="dataset root (default: $AAD_DATA_ROOT)")
    s.add_argument("--out", required=True)
    s.add_argument("--machine", nargs="+")
    s.add_argument("--model-id", nargs="+")
    s.add_argument("--snr", nargs="+")
    s.add_argument("--valve-preprocess", choices=("on", "off", "auto"),
                   help="silence removal for valve clips (other machines are never touched)")
    s.add_argument("--seeds", type=int, nargs="+", help="split seeds to precompute")
    s.add_argument("--config")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", help="train one model per (machine, id, snr) group")
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--model", choices=("ae", "svdd"), required=True)
    s.add_argument("--dim", type=int, help="SVDD subspace dimension")
    s.add_argument("--variant", choices=("one_class", "soft_boundary"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--machine", nargs="+")
    s.add_argument("--model-id", nargs="+")
    s.add_argument("--snr", nargs="+")
    s.add_argument("--config")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score test splits and write report.csv / report.md / figures")
    s.add_argument("--checkpoints", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="parameter counts and per-clip scoring latency")
    s.add_argument("--out", required=True)
    s.add_argument("--features")
    s.add_argument("--checkpoints")
    s.add_argument("--repetitions", type=int, default=100)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("verify", help="gradient checks, AUC oracle, shape laws, parameter counts")
    s.add_argument("--grad-seeds", type=int, default=10)
    s.add_argument("--auc-instances", type=int, default=1000)
    s.add_argument("--inject-grad-fault", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_verify)
    return p


def _thread_limit(args):
    n = 1 if args.deterministic else args.threads
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(n)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"aad: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args):
            return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"aad: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AadError, OSError, ValueError) as exc:
        print(f"aad: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
