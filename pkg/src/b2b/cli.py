"""Command-line entry point: ``b2b <command> ...``.

Exit codes: 0 success, 2 invalid input or configuration, 3 stage or
estimation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from datetime import timedelta
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__

EXIT_OK, EXIT_VALIDATION, EXIT_FAILURE = 0, 2, 3

log = logging.getLogger("b2b")


def _csv_out(path: Optional[str]):
    return open(path, "w", newline="", encoding="utf-8") if path else sys.stdout


# ---------------------------------------------------------------- commands


def cmd_ingest(args) -> int:
    from .catalog import load_catalog
    from .ingestion import build_pair_stats, filter_vocabulary, ingest_sessions, read_events, summarize_sessions
    from .ingestion import write_baskets, write_stats

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    catalog = load_catalog(args.catalog)
    res = ingest_sessions(read_events(args.events), timedelta(minutes=args.session_gap_min))
    stats = build_pair_stats(res.sessions)
    vocab, baskets = filter_vocabulary(res.all_baskets(), stats, args.top_n)
    write_baskets(baskets, out / "baskets.tsv")
    write_stats(stats, out / "stats.csv")
    known = [s for s in res.sessions if all(p in catalog for p in s.viewed | s.purchased)]
    summary = {"sessions": len(res.sessions), "rejected_events": res.rejected, "vocabulary": len(vocab),
               "baskets": {k: sum(b.kind == k for b in baskets) for k in ("purchase", "search")},
               "attributes": summarize_sessions(known, catalog)}
    (out / "session_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("%d sessions, %d rejected events, %d baskets", len(res.sessions), res.rejected, len(baskets))
    return EXIT_OK


def cmd_train(args) -> int:
    from .embedding import TrainConfig, save_binary, save_text, train
    from .ingestion import read_baskets

    baskets = read_baskets(args.baskets, args.kind)
    cfg = TrainConfig(dimension=args.dim, negatives=args.negatives, epochs=args.epochs, learning_rate=args.lr,
                      seed=args.seed, parallel_workers=args.workers, unigram_power=args.power)
    space = train(baskets, cfg, space_kind=args.kind)
    save_text(space, args.out + ".txt")
    if args.binary:
        save_binary(space, args.out + ".bin")
    log.info("trained %s space: %d products x %d dims", args.kind, len(space.vocabulary), space.dimension)
    return EXIT_OK


def _load_space(path: str, kind: str):
    from .embedding import load_binary, load_text

    return load_binary(path) if path.endswith(".bin") else load_text(path, kind)


def cmd_score(args) -> int:
    from .catalog import UnknownProductError, load_catalog
    from .scoring import NeighborQuery, Scorer, UntrainedProductError, cosine_score, write_neighbors

    space = _load_space(args.space, args.kind)
    catalog = load_catalog(args.catalog) if args.catalog else None
    if args.pairs:
        with open(args.pairs, newline="", encoding="utf-8") as fh:
            pairs = [(r[0], r[1]) for r in csv.reader(line for line in fh if not line.startswith("#")) if r]
        if pairs and pairs[0][0] in ("i", "focal_id", "product_1"):
            pairs = pairs[1:]
        fh = _csv_out(args.out)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "score"])
        for i, j in pairs:
            try:
                s = cosine_score(space, i, j, args.matrix)
            except (UntrainedProductError, UnknownProductError):
                s = float("nan")
            w.writerow([i, j, repr(s)])
        if fh is not sys.stdout:
            fh.close()
        return EXIT_OK
    if not args.focal:
        raise ValueError("--topk needs at least one --focal")
    if args.constraint != "none" and catalog is None:
        raise ValueError("constrained queries need --catalog")
    scorer = Scorer(space, catalog, args.matrix)
    rows = [(f, scorer.top_k(NeighborQuery(f, args.topk, space.space_kind, args.constraint))) for f in args.focal]
    if args.out:
        write_neighbors(rows, args.out)
    else:
        for f, hits in rows:
            for r, (pid, s) in enumerate(hits, 1):
                print(f"{f},{pid},{s!r},{r}")
    return EXIT_OK


def cmd_bundle(args) -> int:
    from .bundles import BundleGenerator, apply_filters, featurize, margin_predicate, top_focal_by_views
    from .bundles import write_candidates
    from .catalog import load_catalog
    from .ingestion import read_stats
    from .scoring import Scorer

    catalog = load_catalog(args.catalog)
    stats = read_stats(args.stats)
    ps = _load_space(args.purchase_space, "purchase")
    ss = _load_space(args.search_space, "search")
    if args.focal_list:
        focals = [l.strip() for l in Path(args.focal_list).read_text().splitlines() if l.strip() and not l.startswith("#")]
    else:
        focals = top_focal_by_views(stats, args.n_focal, catalog)
    gen = BundleGenerator(Scorer(ps, catalog, args.matrix), Scorer(ss, catalog, args.matrix), catalog, stats, args.discount)
    cands = gen.generate(focals, args.strategies)
    if args.margin_filter:
        cands = apply_filters(cands, [margin_predicate(catalog)])
    std = featurize(cands, stats, catalog)
    write_candidates(cands, catalog, args.out, std)
    log.info("%d candidates for %d focal products", len(cands), len(focals))
    return EXIT_OK


def cmd_fit(args) -> int:
    from .glmm import fit, read_observations

    obs = read_observations(args.data)
    std = None
    scaling = Path(args.data + ".scaling.json")
    if args.scaling:
        scaling = Path(args.scaling)
    if scaling.is_file():
        std = json.loads(scaling.read_text())
    model = fit(obs, args.spec, include_scores=not args.no_scores, diagonal=args.diagonal,
                method="aghq" if args.aghq else "laplace", max_iter=args.max_iter, standardizer=std)
    model.save(args.out)
    if not model.converged:
        log.warning("optimizer did not report convergence")
    log.info("%s: loglik %.4f, %d parameters", args.spec, model.loglik, model.n_params)
    return EXIT_OK


def cmd_predict(args) -> int:
    from .bundles import candidate_from_row, read_candidate_rows
    from .glmm import HierarchicalFit

    model = HierarchicalFit.load(args.model)
    fh = _csv_out(args.out)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["focal_id", "addon_id", "strategy", "focal_aisle", "pred_prob"])
    for row in read_candidate_rows(args.candidates):
        c = candidate_from_row(row)
        aisle = row.get("aisle_k") or row.get("focal_aisle")
        ok = c.standardized is not None and np.isfinite([c.comp_score, c.sub_score]).all()
        w.writerow([c.focal_id, c.addon_id, c.strategy, aisle, repr(model.predict(c, aisle)) if ok else ""])
    if fh is not sys.stdout:
        fh.close()
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    from .glmm import cluster_bootstrap, read_observations

    obs = read_observations(args.data)
    res = cluster_bootstrap(obs, args.spec, B=args.B, seed=args.seed, diagonal=args.diagonal,
                            resample_aisles=args.resample_aisles, workers=args.workers)
    fh = _csv_out(args.out)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["parameter", "estimate", "median", "lower", "upper"])
    for j, name in enumerate(res.param_names):
        w.writerow([name, *(repr(float(a[j])) for a in (res.param_estimate, res.param_median, res.param_lower, res.param_upper))])
    if not args.resample_aisles:
        for k, aisle in enumerate(res.aisles):
            for t, term in enumerate(("alpha", "beta_comp", "beta_sub")):
                vals = (res.aisle_estimate, res.aisle_median, res.aisle_lower, res.aisle_upper)
                w.writerow([f"{aisle}:{term}", *(repr(float(a[k, t])) for a in vals)])
    if fh is not sys.stdout:
        fh.close()
    log.info("%d replicates, %d dropped", res.B, res.dropped)
    return EXIT_OK


def cmd_report(args) -> int:
    from . import analytics

    done = False
    if args.heatmap or args.zero_copurchase:
        from .bundles import candidate_from_row, read_candidate_rows
        from .catalog import load_catalog
        from .glmm import HierarchicalFit, aggregate_by_aisle_pair, write_heatmap, write_zero_copurchase
        from .glmm import zero_copurchase_report

        if not (args.model and args.candidates and args.catalog and args.out):
            raise ValueError("--heatmap/--zero-copurchase need --model, --candidates, --catalog and --out")
        model = HierarchicalFit.load(args.model)
        catalog = load_catalog(args.catalog)
        cands = [candidate_from_row(r) for r in read_candidate_rows(args.candidates)]
        cands = [c for c in cands if c.standardized is not None and np.isfinite([c.comp_score, c.sub_score]).all()]
        if args.heatmap:
            write_heatmap(*aggregate_by_aisle_pair(model, cands, catalog), args.out)
        else:
            write_zero_copurchase(zero_copurchase_report(model, cands, catalog, args.top), args.out)
        done = True
    if args.arm_table:
        arms = analytics.arm_table(analytics.read_rows(args.arm_table))
        if args.prop_tests:
            tests = analytics.pairwise_tests(arms, args.metric, args.continuity)
            if args.out:
                analytics.write_pairwise(tests, args.out)
            else:
                for a, b, p in tests:
                    print(f"{a}-{b},{p!r}")
        elif args.out:
            analytics.write_arm_table(arms, args.out)
        else:
            for a in list(arms.values()) + [analytics.total_row(arms)]:
                print(f"{a.strategy},{a.views},{a.atc},{a.atc_rate}")
        done = True
    if args.balance:
        if not args.covariates:
            raise ValueError("--balance needs --covariates")
        rows = analytics.balance_table(analytics.read_rows(args.balance), args.covariates.split(","), args.arm_key)
        if args.out:
            analytics.write_balance(rows, args.out)
        else:
            for r in rows:
                print(f"{r.covariate},{r.f_stat!r},{r.p_value!r}")
        done = True
    if args.anova:
        from .glmm import HierarchicalFit, deviance_anova

        res = deviance_anova(HierarchicalFit.load(args.anova[0]), HierarchicalFit.load(args.anova[1]))
        print(f"deviance_delta={res.deviance_delta!r} df={res.df} p={res.p_value!r}")
        done = True
    if not done:
        raise ValueError("report needs one of --heatmap, --zero-copurchase, --arm-table, --balance, --anova")
    return EXIT_OK


def cmd_run(args) -> int:
    from .pipeline import load_config, run_pipeline

    manifest = run_pipeline(load_config(args.config), force=args.force)
    log.info("executed %s; skipped %s", manifest["executed"] or "-", manifest["skipped"] or "-")
    print(json.dumps({k: v["sha256"] for k, v in manifest["artifacts"].items()}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import make_synthetic_corpus

    corpus = make_synthetic_corpus(seed=args.seed, n_products=args.products, n_sessions=args.sessions)
    paths = corpus.write(args.out)
    for name, p in sorted(paths.items()):
        print(f"{name}: {p}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    from .bundles import STRATEGIES
    from .glmm import SPECS
    from .scoring import CONSTRAINTS

    ap = argparse.ArgumentParser(prog="b2b", description="Embedding-based product bundle generation and evaluation.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="sessionize an event log into baskets and statistics")
    p.add_argument("--events", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--top-n", type=int, default=35000)
    p.add_argument("--session-gap-min", type=float, default=30.0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train one embedding space")
    p.add_argument("--baskets", required=True)
    p.add_argument("--kind", choices=("purchase", "search"), required=True)
    p.add_argument("--dim", type=int, default=100)
    p.add_argument("--negatives", type=int, default=20)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.025)
    p.add_argument("--power", type=float, default=1.0, help="unigram exponent of the noise distribution")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--binary", action="store_true", help="also write PREFIX.bin")
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="pair scores or top-k neighbors")
    p.add_argument("--space", required=True)
    p.add_argument("--kind", choices=("purchase", "search"), default="purchase")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--pairs", help="CSV of product id pairs")
    g.add_argument("--topk", type=int)
    p.add_argument("--focal", action="append", default=[])
    p.add_argument("--constraint", choices=CONSTRAINTS, default="none")
    p.add_argument("--catalog")
    p.add_argument("--matrix", choices=("input", "output", "mean"), default="input")
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("bundle", help="generate CP/CC/DC/VR bundle candidates")
    p.add_argument("--purchase-space", required=True)
    p.add_argument("--search-space", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--focal-list")
    p.add_argument("--n-focal", type=int, default=100)
    p.add_argument("--strategies", nargs="+", choices=STRATEGIES, default=list(STRATEGIES))
    p.add_argument("--discount", type=float, default=10.0)
    p.add_argument("--margin-filter", action="store_true")
    p.add_argument("--matrix", choices=("input", "output", "mean"), default="input")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bundle)

    p = sub.add_parser("fit", help="fit a bundle-purchase model")
    p.add_argument("--data", required=True)
    p.add_argument("--spec", choices=SPECS, default="varying_slopes")
    p.add_argument("--diagonal", action="store_true")
    p.add_argument("--no-scores", action="store_true", help="drop the complementarity/substitutability terms")
    p.add_argument("--aghq", action="store_true")
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--scaling", help="standardizer JSON to embed in the model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predicted purchase probabilities")
    p.add_argument("--model", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bootstrap", help="cluster bootstrap intervals")
    p.add_argument("--data", required=True)
    p.add_argument("--spec", choices=SPECS[2:], default="varying_slopes")
    p.add_argument("--B", type=int, default=1000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--diagonal", action="store_true")
    p.add_argument("--resample-aisles", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("report", help="heatmaps, zero co-purchase lists, experiment tables")
    p.add_argument("--heatmap", action="store_true")
    p.add_argument("--zero-copurchase", action="store_true")
    p.add_argument("--model")
    p.add_argument("--candidates")
    p.add_argument("--catalog")
    p.add_argument("--top", type=int, default=3)
    p.add_argument("--arm-table")
    p.add_argument("--prop-tests", action="store_true")
    p.add_argument("--metric", choices=("clicks", "atc", "purchases"), default="atc")
    p.add_argument("--continuity", action="store_true")
    p.add_argument("--balance")
    p.add_argument("--covariates")
    p.add_argument("--arm-key", default="arm")
    p.add_argument("--anova", nargs=2, metavar=("WITHOUT", "WITH"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true", help="ignore cached stages")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("synth", help="write a synthetic corpus with planted structure")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--products", type=int, default=200)
    p.add_argument("--sessions", type=int, default=5000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    from .pipeline import ConfigError, StageError

    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
