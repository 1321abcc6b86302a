"""``tgraph`` command-line interface.

Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 I/O error.
Set ``TGRAPH_LOG`` (DEBUG, INFO, WARNING, ...) to control logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .dataset import CollectionKind, dumps, read_json, write_json
from .errors import NumericError, TGraphError
from .inference import evaluate, rank
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .preprocess import load_preprocessed_dataset, preprocess_dataset
from .synthetic import generate_synthetic
from .training import TrainConfig, cross_validate, make_folds, select_folds, train_fold

log = logging.getLogger("tgraph")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

# Options that a --config file may set, with their built-in defaults.
TRAIN_DEFAULTS = {
    "epochs": None, "batch": None, "hidden_dim": 256, "n_blocks": 2, "k_folds": 20,
    "lr": 1e-3, "weight_decay": 1e-5, "grad_clip": 1.0, "validate_every": 1,
}
ABLATE_DEFAULTS = dict(TRAIN_DEFAULTS, folds=5, folds_kept=4, tta=10, rank_batch=128)
ABLATIONS = {
    "self-attention": "use_self_attention",
    "cross-attention": "use_cross_attention",
    "edges": "use_edges",
}


class UsageError(TGraphError, ValueError):
    pass


def node_range(text):
    try:
        lo, hi = (int(x) for x in text.split(".."))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MIN..MAX, got {text!r}") from None
    return lo, hi


def collection(text):
    try:
        return CollectionKind.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def add_train_options(p):
    g = p.add_argument_group("training options (override --config)")
    g.add_argument("--epochs", type=float, help="epochs per fold (default: per collection)")
    g.add_argument("--batch", type=int, help="configurations per step (default: 128 random/tile, 64 otherwise)")
    g.add_argument("--hidden-dim", type=int, help="channels C (default 256)")
    g.add_argument("--n-blocks", type=int, help="graph convolution blocks (default 2)")
    g.add_argument("--k-folds", type=int, help="folds in the cross-validation plan (default 20)")
    g.add_argument("--lr", type=float, help="peak learning rate (default 1e-3)")
    g.add_argument("--weight-decay", type=float, help="AdamW decay on non-bias weights (default 1e-5)")
    g.add_argument("--grad-clip", type=float, help="global gradient norm limit (default 1.0)")
    g.add_argument("--validate-every", type=int, help="epochs between validation passes (default 1)")
    p.add_argument("--config", type=Path, help="JSON file of option defaults; flags take precedence")


def build_parser():
    parser = argparse.ArgumentParser(prog="tgraph", description="Rank tensor-program configurations with TGraph.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic dataset with a known runtime oracle")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--graphs", type=int, required=True)
    p.add_argument("--nodes", type=node_range, required=True, help="node count range MIN..MAX")
    p.add_argument("--configs", type=int, required=True, help="configurations per graph")
    p.add_argument("--opcodes", type=int, default=12, help="opcode vocabulary size (default 12)")
    p.add_argument("--style", choices=("random", "default"), default="random",
                   help="random layouts, or low-variance perturbations of a default (default random)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("preprocess", help="prune, deduplicate and compress a raw dataset")
    p.add_argument("--in", dest="in_dir", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-prune", action="store_true")
    p.add_argument("--no-dedup", action="store_true")

    p = sub.add_parser("train", help="train one fold and write its checkpoint")
    p.add_argument("--data", type=Path, required=True, help="preprocessed dataset")
    p.add_argument("--collection", type=collection, required=True, help="e.g. layout:xla:random or tile:xla")
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="checkpoint file")
    p.add_argument("--log", type=Path, help="JSON-lines training log (default: OUT.log.jsonl)")
    for name in ABLATIONS:
        p.add_argument(f"--no-{name}", action="store_true", help=f"disable {name.replace('-', ' ')}")
    add_train_options(p)

    p = sub.add_parser("rank", help="score and order every configuration")
    p.add_argument("--data", type=Path, required=True, help="preprocessed dataset")
    p.add_argument("--ckpt", type=Path, required=True, help="directory of *.ckpt files")
    p.add_argument("--out", type=Path, required=True, help="predictions JSON")
    p.add_argument("--tta", type=int, default=10, help="test-time permutations (default 10)")
    p.add_argument("--batch", type=int, default=128, help="configurations per forward pass (default 128)")
    p.add_argument("--keep", type=int, help="ensemble only the KEEP folds with best validation tau")
    p.add_argument("--seed", type=int, default=0, help="TTA permutation seed")

    p = sub.add_parser("evaluate", help="Kendall tau (layout) or top-5 metric (tile) of predictions")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every autodiff op and a conv block")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="train model variants with features disabled and compare tau")
    p.add_argument("--data", type=Path, required=True, help="preprocessed dataset")
    p.add_argument("--disable", action="append", default=[], choices=sorted(ABLATIONS),
                   help="add a variant with this feature disabled (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--folds", type=int, help="folds trained per variant (default 5)")
    p.add_argument("--folds-kept", type=int, help="folds kept for reporting (default 4)")
    p.add_argument("--tta", type=int, help="test-time permutations (default 10)")
    p.add_argument("--parallel-folds", type=int, default=1, help="worker processes for fold training")
    p.add_argument("--out", type=Path, help="write the table as JSON")
    add_train_options(p)
    return parser


def resolve(args, defaults):
    """Merge options: explicit flags > --config file > defaults."""
    merged = dict(defaults)
    if getattr(args, "config", None) is not None:
        doc = read_json(args.config)
        if not isinstance(doc, dict):
            raise UsageError(f"{args.config}: config file must hold a JSON object")
        unknown = sorted(set(doc) - set(defaults))
        if unknown:
            raise UsageError(f"{args.config}: unknown options {unknown}")
        merged.update(doc)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    log.info("effective options: %s", json.dumps(merged, sort_keys=True))
    return merged


def train_config(opts, kind, seed, **extra):
    fields = dict(lr_peak=opts["lr"], weight_decay=opts["weight_decay"], grad_clip_norm=opts["grad_clip"],
                  k_folds=opts["k_folds"], validate_every=opts["validate_every"],
                  configs_per_batch=opts["batch"], seed=seed, **extra)
    if opts["epochs"] is not None:
        fields["epochs"] = opts["epochs"]
    return TrainConfig.for_collection(kind, **fields)


def model_config(opts, dataset, **flags):
    return ModelConfig(n_opcodes=dataset.n_opcodes, hidden_dim=opts["hidden_dim"], n_blocks=opts["n_blocks"],
                       mode="tile" if dataset.kind.is_tile else "layout", **flags)


def cmd_synth(args):
    lo, hi = args.nodes
    generate_synthetic(args.out, args.seed, args.graphs, (lo, hi), args.configs, args.opcodes,
                       CollectionKind(f"layout_{args.style}"))
    print(f"wrote {args.graphs} graphs to {args.out}")


def cmd_preprocess(args):
    graphs = preprocess_dataset(args.in_dir, args.out, not args.no_prune, not args.no_dedup)
    print(f"preprocessed {len(graphs)} graphs into {args.out}")


def cmd_train(args):
    opts = resolve(args, TRAIN_DEFAULTS)
    dataset = load_preprocessed_dataset(args.data)
    if str(dataset.kind) != str(args.collection):
        raise UsageError(f"--collection {args.collection} does not match dataset kind {dataset.kind}")
    # train trains exactly one fold; the ensemble-size fields do not apply
    cfg = train_config(opts, dataset.kind, args.seed, folds_trained=1, folds_kept=1)
    folds = make_folds([g.graph_id for g in dataset.graphs], cfg.k_folds, cfg.seed)
    if not 0 <= args.fold < len(folds):
        raise UsageError(f"--fold must be in [0, {len(folds)})")
    flags = {attr: not getattr(args, f"no_{name.replace('-', '_')}") for name, attr in ABLATIONS.items()}
    mcfg = model_config(opts, dataset, **flags)
    log_path = args.log or args.out.with_name(args.out.name + ".log.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w", encoding="utf-8") as fh:
        result = train_fold(dataset, folds[args.fold], cfg, mcfg, fh)
    save_checkpoint(result.checkpoint, args.out)
    print(f"fold {args.fold}: best validation tau {result.best_tau} at epoch {result.best_epoch}; "
          f"checkpoint {args.out}")


def load_checkpoints(directory, keep=None):
    paths = sorted(Path(directory).glob("*.ckpt"))
    if not paths:
        raise FileNotFoundError(f"no *.ckpt files in {directory}")
    ckpts = [load_checkpoint(p) for p in paths]
    if keep is not None:
        taus = [c.meta.get("best_tau") for c in ckpts]
        ckpts = [ckpts[i] for i in sorted(select_folds(taus, keep))]
    return ckpts


def cmd_rank(args):
    dataset = load_preprocessed_dataset(args.data)
    ckpts = load_checkpoints(args.ckpt, args.keep)
    out = {}
    for pg in dataset.graphs:
        if pg.n_configs == 0:
            continue
        out[pg.graph_id] = rank(pg, ckpts, args.tta, args.batch, args.seed).to_doc()
    write_json(args.out, out)
    print(f"ranked {len(out)} graphs with {len(ckpts)} checkpoints into {args.out}")


def cmd_evaluate(args):
    dataset = load_preprocessed_dataset(args.data)
    doc = read_json(args.pred)
    predictions = {gid: entry["scores"] for gid, entry in doc.items()}
    graphs = [g for g in dataset.graphs if g.graph_id in predictions and g.n_configs >= 2]
    sys.stdout.write(dumps(evaluate(graphs, predictions)))


def cmd_gradcheck(args):
    from .gradcheck import run_suite

    results = run_suite(args.seed)
    for r in results:
        print(f"{r.name:<18} {r.error:.3e}  tol {r.tol:.0e}  {'ok' if r.ok else 'FAIL'}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        raise NumericError(f"gradient check failed for {', '.join(failed)}")


def ablation_variants(disabled):
    if len(set(disabled)) != len(disabled):
        raise UsageError("each feature may be disabled only once")
    variants = [("full", {})]
    variants += [(f"-{name}", {ABLATIONS[name]: False}) for name in disabled]
    return variants


def run_ablation(dataset, variants, cfg, opts, workers=1, n_tta=10, batch=128):
    """Train each variant on the same folds; returns ``[(name, tau, per_fold_tau)]``."""
    from .inference import holdout_evaluation

    rows = []
    for name, flags in variants:
        results = cross_validate(dataset, cfg, model_config(opts, dataset, **flags), workers=workers)
        kept_ids = set(select_folds(results, cfg.folds_kept))
        kept = [res for res in results if res.fold.index in kept_ids]
        per_fold = {res.fold.index: holdout_evaluation(dataset, [res], n_tta, batch, cfg.seed)["mean"]
                    for res in kept}
        # tau is the mean over all held-out graphs of the kept folds
        rows.append((name, holdout_evaluation(dataset, kept, n_tta, batch, cfg.seed)["mean"], per_fold))
    return rows


def cmd_ablate(args):
    opts = resolve(args, ABLATE_DEFAULTS)
    variants = ablation_variants(args.disable)
    dataset = load_preprocessed_dataset(args.data)
    cfg = train_config(opts, dataset.kind, args.seed, folds_trained=opts["folds"], folds_kept=opts["folds_kept"])
    rows = run_ablation(dataset, variants, cfg, opts, args.parallel_folds, opts["tta"], opts["rank_batch"])
    full = rows[0][1]
    print(f"{'variant':<18} {'tau':>8} {'delta':>8}")
    for name, tau, _ in rows:
        print(f"{name:<18} {tau:>8.4f} {tau - full:>+8.4f}")
    if args.out:
        write_json(args.out, {"rows": [{"variant": n, "tau": t, "per_fold": {str(k): v for k, v in pf.items()}}
                                       for n, t, pf in rows]})


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "rank": cmd_rank,
    "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate,
}


def main(argv=None):
    logging.basicConfig(level=os.environ.get("TGRAPH_LOG", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"tgraph: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TGraphError, ValueError) as exc:
        print(f"tgraph: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"tgraph: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
