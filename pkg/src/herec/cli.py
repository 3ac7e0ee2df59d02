"""Command-line entry point: ``herec {synth,embed,train,evaluate,predict}``.

Every option can also come from a JSON or YAML file given with ``--config``;
flags on the command line win over file values. Each run writes
``manifest.json`` next to its outputs with the resolved configuration, seeds,
input/output hashes and library versions.

Exit codes: 0 success, 1 usage error, 2 invalid input data, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict

import numpy as np

from . import __version__
from .embedder import DivergenceError, EmbedConfig, embed_all, load_embeddings, save_embeddings
from .fusion import FusionKind
from .hin import DataError, NetworkSchema, load_graph, load_meta_paths, load_ratings, RatingDataset
from .recommender import HerecModel, HyperParams, file_sha256, load_model, save_model
from .walker import WalkConfig

log = logging.getLogger("herec")

ENV_OUTPUT = "HEREC_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------- arguments


def _common(p):
    p.add_argument("--config", help="JSON or YAML file with option values (flags win)")
    p.add_argument("--out", help=f"output directory (default: ${ENV_OUTPUT} or ./herec-out)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1, help="process cap; 1 is bit-reproducible")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _data(p, ratings=True):
    g = p.add_argument_group("data")
    g.add_argument("--nodes", help="nodes file: <id>\\t<type>")
    g.add_argument("--edges", help="edges file: <id>\\t<id>")
    g.add_argument("--schema", help="schema JSON")
    g.add_argument("--meta-paths", help="meta-path file with [user]/[item] sections")
    g.add_argument("--paths", nargs="+", help="use only these meta-path labels")
    g.add_argument("--user-type", default="U")
    g.add_argument("--item-type", default="I")
    if ratings:
        g.add_argument("--ratings", help="ratings file: <user>\\t<item>\\t<rating>")
        g.add_argument("--scale", nargs=2, type=float, metavar=("MIN", "MAX"), default=[1.0, 5.0])


def _walk_embed(p):
    g = p.add_argument_group("walks and embeddings")
    g.add_argument("--walk-length", type=int, default=40)
    g.add_argument("--walks-per-node", type=int, default=10)
    g.add_argument("--dim", type=int, default=64, help="embedding dimension d")
    g.add_argument("--window", type=int, default=5)
    g.add_argument("--negatives", type=int, default=5)
    g.add_argument("--embed-epochs", type=int, default=5)
    g.add_argument("--lr0", type=float, default=0.025)
    g.add_argument("--lr-min", type=float, default=1e-4)
    g.add_argument("--no-rating-edges", action="store_true",
                   help="do not add training ratings as user-item edges before walking")


def _hyper(p):
    g = p.add_argument_group("model")
    g.add_argument("--fusion", default="pnl", help="sl, pl or pnl")
    g.add_argument("--D", dest="D", type=int, default=10, help="latent factors")
    g.add_argument("--alpha", type=float, default=1.0)
    g.add_argument("--beta", type=float, default=1.0)
    g.add_argument("--lam", type=float, default=0.01)
    g.add_argument("--lam-theta", type=float, default=0.01)
    g.add_argument("--lam-gamma", type=float, default=0.01)
    g.add_argument("--eta", type=float, default=0.01)
    g.add_argument("--epochs", type=int, default=100)
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--patience", type=int, default=3)
    g.add_argument("--init-scale", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="herec", description="Recommendation with heterogeneous network embeddings.")
    parser.add_argument("--version", action="version", version=f"herec {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic community-structured HIN with ratings")
    _common(p)
    p.add_argument("--n-users", type=int, default=2000)
    p.add_argument("--n-items", type=int, default=1000)
    p.add_argument("--n-communities", type=int, default=3)
    p.add_argument("--n-ratings", type=int, default=20000)
    p.add_argument("--attr-purity", type=float, default=0.85)
    p.add_argument("--noise", type=float, default=0.6)

    p = sub.add_parser("embed", help="learn one embedding file per meta-path")
    _common(p)
    _data(p)
    _walk_embed(p)
    p.add_argument("--dump-corpus", action="store_true", help="also write the filtered walks")

    p = sub.add_parser("train", help="fit a model on all ratings")
    _common(p)
    _data(p)
    _walk_embed(p)
    _hyper(p)
    p.add_argument("--embeddings", help="output of `herec embed` (or its embeddings/ subdirectory); computed on the fly if omitted")
    p.add_argument("--baseline", action="store_true", help="train the plain MF model instead")

    p = sub.add_parser("evaluate", help="split/train/score protocol with optional studies")
    _common(p)
    _data(p)
    _walk_embed(p)
    _hyper(p)
    p.add_argument("--ratios", nargs="+", type=float, default=[0.8])
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--kinds", nargs="+", help="fusion kinds to score (default: --fusion)")
    p.add_argument("--no-baseline", action="store_true")
    p.add_argument("--cold-start", action="store_true", help="cold-start cohorts at the first ratio")
    p.add_argument("--ablation", nargs="*", metavar="LABEL",
                   help="incremental meta-path study; optional explicit order")
    p.add_argument("--sweep-D", nargs="+", type=int)
    p.add_argument("--sweep-alpha", nargs="+", type=float)
    p.add_argument("--sweep-beta", nargs="+", type=float)
    p.add_argument("--sweep-d", nargs="+", type=int)
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("predict", help="score user/item pairs with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--pairs", required=True, help="file of <user>\\t<item> lines")
    p.add_argument("--output", help="predictions file (default: stdout)")
    p.add_argument("--no-clip", action="store_true")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


# --------------------------------------------------------------------------- config handling


def read_config(path) -> dict:
    with open(path) as fh:
        text = fh.read()
    if path.endswith((".yaml", ".yml")):
        import yaml

        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ValueError(str(e)) from None
    else:
        data = json.loads(text or "{}")
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a mapping")
    flat = {}
    for k, v in data.items():
        if isinstance(v, dict):  # sections such as "walk:" or "model:" are flattened
            flat.update(v)
        else:
            flat[k] = v
    return {k.replace("-", "_"): v for k, v in flat.items()}


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        raise SystemExit(EXIT_USAGE)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        try:
            cfg = read_config(cfg_path)
        except OSError as e:
            raise UsageError(f"cannot read config: {e}") from None
        except ValueError as e:
            raise UsageError(f"malformed config {cfg_path}: {e}") from None
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - known - {"config"})
        if unknown:
            raise UsageError(f"unknown config keys for '{args.command}': {', '.join(unknown)}")
        sub.set_defaults(**{k: v for k, v in cfg.items() if k != "config"})
        args = parser.parse_args(argv)
    return args


def output_dir(args) -> str:
    out = args.out or os.environ.get(ENV_OUTPUT) or "herec-out"
    os.makedirs(out, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def _need(args, *names):
    for n in names:
        v = getattr(args, n, None)
        if not v:
            raise UsageError(f"--{n.replace('_', '-')} is required")
        if not os.path.isfile(v):
            raise UsageError(f"--{n.replace('_', '-')}: no such file {v}")


def walk_config(args) -> WalkConfig:
    return WalkConfig(args.walk_length, args.walks_per_node, args.seed)


def embed_config(args) -> EmbedConfig:
    return EmbedConfig(args.dim, args.window, args.negatives, args.embed_epochs, args.lr0, args.lr_min, args.seed)


def hyper_params(args) -> HyperParams:
    return HyperParams(D=args.D, alpha=args.alpha, beta=args.beta, lam=args.lam, lam_theta=args.lam_theta,
                       lam_gamma=args.lam_gamma, eta=args.eta, epochs=args.epochs, seed=args.seed,
                       tol=args.tol, patience=args.patience, init_scale=args.init_scale)


def load_inputs(args, need_ratings=True):
    """Graph, meta-paths and (optionally) ratings named by the arguments."""
    _need(args, "nodes", "edges", "schema", "meta_paths")
    if need_ratings:
        _need(args, "ratings")
    with open(args.schema) as fh:
        try:
            schema = NetworkSchema.from_json(fh)
        except (ValueError, KeyError, TypeError) as e:
            raise DataError(f"{args.schema}: {e}") from None
    with open(args.nodes) as fn, open(args.edges) as fe:
        g = load_graph(fn, fe, schema)
    with open(args.meta_paths) as fh:
        paths = load_meta_paths(fh, schema, args.user_type, args.item_type)
    if args.paths:
        wanted = list(args.paths)
        have = {mp.label for side in paths.values() for mp in side}
        missing = [w for w in wanted if w not in have]
        if missing:
            raise UsageError(f"--paths names unknown meta-paths: {', '.join(missing)}")
        paths = {side: [mp for mp in mps if mp.label in wanted] for side, mps in paths.items()}
    ratings = None
    if getattr(args, "ratings", None):
        with open(args.ratings) as fh:
            ratings = load_ratings(fh, tuple(args.scale))
        ratings.check_types(g, args.user_type, args.item_type)
    return g, paths, ratings


def with_rating_edges(args, g, ratings: RatingDataset | None):
    if ratings is None or args.no_rating_edges or not g.schema.allows(args.user_type, args.item_type):
        return g
    return g.with_edges(((r.user, r.item) for r in ratings.records), drop=(args.user_type, args.item_type))


def _versions() -> dict:
    import matplotlib
    import numba

    return {"herec": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "numba": numba.__version__, "matplotlib": matplotlib.__version__}


def write_manifest(out, args, inputs=(), outputs=(), seeds=None, extra=None):
    cfg = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
    doc = {
        "command": args.command,
        "config": cfg,
        "seeds": seeds or {"seed": getattr(args, "seed", None)},
        "inputs": {p: file_sha256(p) for p in inputs if p and os.path.isfile(p)},
        "outputs": {os.path.relpath(p, out): file_sha256(p) for p in outputs if p and os.path.isfile(p)},
        "versions": _versions(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra:
        doc.update(extra)
    path = os.path.join(out, "manifest.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, default=str)
    return path


def _input_files(args):
    return [getattr(args, k, None) for k in ("nodes", "edges", "schema", "meta_paths", "ratings", "config")]


# --------------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from . import synth

    out = output_dir(args)
    cfg = synth.SynthConfig(n_users=args.n_users, n_items=args.n_items, n_communities=args.n_communities,
                            n_ratings=args.n_ratings, attr_purity=args.attr_purity, noise=args.noise,
                            seed=args.seed)
    paths = synth.write(synth.generate(cfg), out)
    write_manifest(out, args, outputs=paths.values(), extra={"synth": asdict(cfg)})
    print(f"wrote synthetic dataset to {out}")
    return EXIT_OK


def _embed_sides(args, g, paths, workers):
    sides = {}
    for side, t in (("user", args.user_type), ("item", args.item_type)):
        if paths.get(side):
            sides[side] = embed_all(g, paths[side], walk_config(args), embed_config(args), workers=workers)
    return sides


def cmd_embed(args) -> int:
    g, paths, ratings = load_inputs(args, need_ratings=False)
    out = output_dir(args)
    g = with_rating_edges(args, g, ratings)
    sides = _embed_sides(args, g, paths, args.workers)
    emb_dir = os.path.join(out, "embeddings")
    written = []
    for emb in sides.values():
        written += save_embeddings(emb, emb_dir)
        written.append(os.path.join(emb_dir, f"{emb.target_type}.coverage.json"))
        for label, missing in emb.missing.items():
            n = len(emb.matrices[label].ids)
            print(f"{label}: {n - len(missing)}/{n} {emb.target_type} nodes covered")
    if args.dump_corpus:
        from .walker import generate_corpus, write_corpus
        from .embedder import _path_seed

        for mps in paths.values():
            for mp in mps:
                wc = walk_config(args)
                corpus = generate_corpus(g, mp, WalkConfig(wc.walk_length, wc.walks_per_node, _path_seed(wc.seed, mp)))
                p = os.path.join(emb_dir, f"{mp.label}.walks")
                with open(p, "w") as fh:
                    write_corpus(corpus, fh)
                written.append(p)
    write_manifest(out, args, _input_files(args), written)
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import plot_convergence
    from .recommender import MFModel

    g, paths, ratings = load_inputs(args)
    out = output_dir(args)
    hyper = hyper_params(args)
    provenance = {}
    if args.baseline:
        model = MFModel(ratings, hyper)
    else:
        if args.embeddings:
            emb_root = args.embeddings
            nested = os.path.join(emb_root, "embeddings")
            if os.path.isdir(nested) and not os.path.exists(os.path.join(emb_root, f"{args.user_type}.coverage.json")):
                emb_root = nested  # the --out directory of `herec embed`
            sides = {}
            for side, t in (("user", args.user_type), ("item", args.item_type)):
                labels = [mp.label for mp in paths.get(side, [])]
                if labels:
                    try:
                        sides[side] = load_embeddings(emb_root, t, labels)
                    except FileNotFoundError as e:
                        raise UsageError(f"missing embedding file: {e.filename}") from None
                    for lb in labels:
                        p = os.path.join(emb_root, f"{lb}.emb")
                        provenance[lb] = {"path": os.path.abspath(p), "sha256": file_sha256(p)}
        else:
            sides = _embed_sides(args, with_rating_edges(args, g, ratings), paths, args.workers)
            emb_dir = os.path.join(out, "embeddings")
            for emb in sides.values():
                for p in save_embeddings(emb, emb_dir):
                    provenance[os.path.basename(p)[:-4]] = {"path": os.path.abspath(p), "sha256": file_sha256(p)}
        model = HerecModel(ratings, sides.get("user"), sides.get("item"), FusionKind.parse(args.fusion), hyper)
        model.provenance = provenance
    report = model.train(ratings)
    model_path = os.path.join(out, "model.json")
    save_model(model, model_path)
    report_path = os.path.join(out, "train_report.csv")
    report.write_csv(report_path)
    fig = plot_convergence({"mf" if args.baseline else FusionKind.parse(args.fusion).short: report.objectives},
                           os.path.join(out, "convergence.png"))
    last = report.rows[-1]
    print(f"trained {len(report.rows)} epochs, objective {last['objective']:.6g}"
          + (" (stopped early)" if report.stopped_early else ""))
    write_manifest(out, args, _input_files(args) + [v["path"] for v in provenance.values()],
                   [model_path, report_path, fig])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from . import evaluation as ev
    from . import plotting

    g, paths, ratings = load_inputs(args)
    kinds = tuple(FusionKind.parse(k) for k in (args.kinds or [args.fusion]))
    setup = ev.EvalSetup(g, ratings, args.user_type, args.item_type, paths, walk_config(args),
                         embed_config(args), hyper_params(args), kinds, baseline=not args.no_baseline,
                         rating_edges=not args.no_rating_edges)
    for r in args.ratios:
        if not 0 < r < 1:
            raise UsageError(f"ratio {r} not in (0, 1)")
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    out = output_dir(args)
    written = []
    rows, reports = ev.evaluate(setup, args.ratios, args.repeats, args.seed, workers=args.workers)
    p = os.path.join(out, "metrics.csv")
    ev.write_metrics_csv(p, rows)
    written.append(p)
    summary = ev.summary_rows(reports)
    p = os.path.join(out, "summary.csv")
    ev.write_rows(p, summary, ev.SUMMARY_FIELDS)
    written.append(p)
    for r in summary:
        print(f"ratio={r['ratio']:<5} {r['method']:<10} MAE {r['mae']:.4f}  RMSE {r['rmse']:.4f}")
    plots = not args.no_plots
    if plots:
        written.append(plotting.plot_ratio_curve(summary, os.path.join(out, "ratio_rmse.png")))

    ratio = args.ratios[0]
    if args.cold_start:
        cold = ev.cold_start_study(setup, ratio, args.repeats, args.seed)
        p = os.path.join(out, "cold_start.csv")
        ev.write_rows(p, cold, ev.COLD_FIELDS)
        written.append(p)
        if plots:
            written.append(plotting.plot_cold_start(cold, os.path.join(out, "cold_start.png")))
    if args.ablation is not None:
        order = _ablation_order(paths, args.ablation)
        res = ev.metapath_ablation(setup, order, ratio, args.repeats, args.seed)
        rows_a = ev.ablation_rows(res)
        p = os.path.join(out, "ablation.csv")
        ev.write_rows(p, rows_a, ev.ABLATION_FIELDS)
        written.append(p)
        if plots:
            written.append(plotting.plot_ablation(rows_a, os.path.join(out, "ablation.png")))
    grid = {k: v for k, v in (("D", args.sweep_D), ("alpha", args.sweep_alpha),
                              ("beta", args.sweep_beta), ("d", args.sweep_d)) if v}
    if grid:
        rows_s = ev.sweep_rows(ev.sweep(setup, grid, ratio, args.repeats, args.seed))
        p = os.path.join(out, "sweep.csv")
        ev.write_rows(p, rows_s, ev.SWEEP_FIELDS)
        written.append(p)
        if plots:
            written.append(plotting.plot_sweep(rows_s, os.path.join(out, "sweep.png")))
    seeds = {"split": args.seed, "walk": args.seed, "embed": args.seed,
             "model": {f"repeat {k}": ev.repeat_seed(args.seed, k) for k in range(args.repeats)}}
    write_manifest(out, args, _input_files(args), written, seeds=seeds)
    return EXIT_OK


def _ablation_order(paths, labels):
    tagged = [(side, mp) for side in ("user", "item") for mp in paths.get(side, [])]
    if not labels:
        return tagged
    by_label = {mp.label: (side, mp) for side, mp in tagged}
    missing = [lb for lb in labels if lb not in by_label]
    if missing:
        raise UsageError(f"--ablation names unknown meta-paths: {', '.join(missing)}")
    return [by_label[lb] for lb in labels]


def cmd_predict(args) -> int:
    if not os.path.isfile(args.model):
        raise UsageError(f"no such model file {args.model}")
    if not os.path.isfile(args.pairs):
        raise UsageError(f"no such pairs file {args.pairs}")
    try:
        model = load_model(args.model)
    except (ValueError, KeyError) as e:
        raise DataError(f"{args.model}: {e}") from None
    pairs = []
    with open(args.pairs, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise DataError("expected <user>\\t<item>", n)
            pairs.append((parts[0], parts[1]))
    preds = model.predict_many(pairs, clip=not args.no_clip) if pairs else []
    sink = open(args.output, "w") if args.output else sys.stdout
    try:
        for (u, i), p in zip(pairs, preds):
            sink.write(f"{u}\t{i}\t{float(p)!r}\n")
    finally:
        if sink is not sys.stdout:
            sink.close()
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "embed": cmd_embed, "train": cmd_train,
            "evaluate": cmd_evaluate, "predict": cmd_predict}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(f"herec: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return int(e.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"herec: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"herec: invalid data: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"herec: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as e:
        # configuration values rejected by the library (bad ranges and the like)
        print(f"herec: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
