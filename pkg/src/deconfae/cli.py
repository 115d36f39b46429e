"""Command-line entry point: synthetic generation, pretraining, fine-tuning,
protocol runs, and report emission.

Exit status: 0 success, 1 validation error, 2 runtime error.  Errors print as
machine-parsable ``error:`` lines.  ``DCAE_LOG`` in {quiet, info, debug}
controls verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import data as D
from . import models as M
from . import train as T
from .config import ConfigError, load_config
from .evaluation import EvalReport

log = logging.getLogger("deconfae")


def _setup_logging():
    level = {"quiet": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("DCAE_LOG", "info"),
                                         logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(code)


def _require_outdir(path, force, names):
    existing = [os.path.join(path, n) for n in names
                if os.path.exists(os.path.join(path, n))]
    if existing and not force:
        _fail(1, f"output exists (use --force): {existing[0]}")
    os.makedirs(path, exist_ok=True)


def _load_datasets(cfg):
    """Resolve the config's data source into (cell-line ds, tissue ds)."""
    if cfg.synth is not None:
        ds_c, ds_t, _ = D.synth_generate(cfg.synth)
        return ds_c, ds_t
    if not cfg.data:
        _fail(1, "config needs either a 'synth' or a 'data' section")
    section = cfg.data
    missing = [section[k] for k in ("cell_line_tsv", "tissue_tsv")
               if k in section and not os.path.exists(section[k])]
    for k in ("cell_line_tsv", "tissue_tsv"):
        if k not in section:
            _fail(1, f"data section missing {k}")
    if missing:
        _fail(1, "missing input files: " + ", ".join(missing))
    orientation = section.get("orientation", "samples_as_rows")
    log_tf = section.get("log_transform", False)
    ds_c = D.load_expression_tsv(section["cell_line_tsv"], orientation,
                                 domain="cell_line", log_transform=log_tf)
    ds_t = D.load_expression_tsv(section["tissue_tsv"], orientation,
                                 domain="tissue", log_transform=log_tf)
    if cfg.feature_k:
        sel_c = D.select_top_varied(ds_c, cfg.feature_k)
        sel_t = D.select_top_varied(ds_t, cfg.feature_k)
        _, ds_c, ds_t = D.union_features(ds_c, sel_c, ds_t, sel_t)
    if "labels_csv" in section:
        if not os.path.exists(section["labels_csv"]):
            _fail(1, f"missing input files: {section['labels_csv']}")
        table = D.load_label_csv(section["labels_csv"])
        drug = section.get("drug")
        if drug is not None:
            table = table[table["drug"] == drug]
        for ds in (ds_c, ds_t):
            sub = table.set_index("sample_id")["auc"]
            auc = np.array([sub.get(sid, np.nan) for sid in ds.sample_ids])
            if not np.isnan(auc).all():
                keep = ~np.isnan(auc)
                trimmed = ds.subset_samples(np.nonzero(keep)[0])
                labels, thr = D.binarize_by_auc(auc[keep], trimmed.matrix,
                                                grid=cfg.threshold_grid,
                                                seed=cfg.seed)
                trimmed.labels = labels
                if ds.domain == "cell_line":
                    ds_c = trimmed
                else:
                    ds_t = trimmed
                log.info("%s: threshold %.2f, %d/%d split", ds.domain, thr,
                         int(labels.sum()), int((1 - labels).sum()))
    return ds_c, ds_t


def cmd_synth(args):
    try:
        spec = D.SynthSpec(n_per_domain=args.n, dim=args.dim,
                           shared_rank=args.rank,
                           confounder_strength=args.gamma,
                           noise=args.sigma, seed=args.seed)
    except ValueError as exc:
        _fail(1, str(exc))
    try:
        paths = D.write_synth_bundle(spec, args.out, force=args.force)
    except FileExistsError as exc:
        _fail(1, str(exc))
    for p in paths:
        print(p)
    return 0


def _run_dir(out, variant, seed):
    return os.path.join(out, str(variant), str(seed))


def cmd_pretrain(args):
    cfg = load_config(args.config)
    ds_c, ds_t = _load_datasets(cfg)
    pc = cfg.protocol_config()
    for variant in cfg.variants:
        run_dir = _run_dir(args.out or cfg.out_dir, variant, cfg.seed)
        _require_outdir(run_dir, args.force, ["pretrained.ckpt"])
        model = M.build_model(
            T._model_config(pc, variant, ds_c.n_features),
            T.substream(cfg.seed, "init", variant))
        model, trace = T.pretrain(model, ds_c, ds_t, pc.schedule)
        M.save_model(model, os.path.join(run_dir, "pretrained.ckpt"),
                     extra_meta={"seed": cfg.seed, "stage": "pretrain"})
        trace.write(os.path.join(run_dir, "pretrain_trace.tsv"))
        log.info("pretrained %s -> %s", variant, run_dir)
    return 0


def cmd_finetune(args):
    cfg = load_config(args.config)
    ds_c, ds_t = _load_datasets(cfg)
    if ds_c.labels is None:
        _fail(1, "finetune needs labeled cell-line data")
    strata = ds_c.strata if ds_c.strata is not None else ["all"] * ds_c.n_samples
    strata, _ = D.merge_small_strata(strata, min_size=cfg.n_folds)
    folds = D.stratified_kfold(strata, k=cfg.n_folds, seed=cfg.seed)
    pc = cfg.protocol_config()
    for variant in cfg.variants:
        run_dir = _run_dir(args.out or cfg.out_dir, variant, cfg.seed)
        ckpt = os.path.join(run_dir, "pretrained.ckpt")
        if variant != "MLP_ONLY" and not os.path.exists(ckpt):
            _fail(1, f"missing pretrained checkpoint: {ckpt}")
        _require_outdir(run_dir, args.force, ["finetuned.ckpt"])
        if variant == "MLP_ONLY":
            model = M.build_model(T._model_config(pc, variant, ds_c.n_features),
                                  T.substream(cfg.seed, "init", variant))
        else:
            model, _ = M.load_model(ckpt)
        M.attach_head(model, T.substream(cfg.seed, "head-init", variant))
        val_idx = np.nonzero(folds == 0)[0]
        tr_idx = np.nonzero(folds != 0)[0]
        model, trace = T.finetune(model, ds_c.subset_samples(tr_idx),
                                  ds_c.subset_samples(val_idx), pc.schedule,
                                  seed_tags=(variant,))
        M.save_model(model, os.path.join(run_dir, "finetuned.ckpt"),
                     extra_meta={"seed": cfg.seed, "stage": "finetune"})
        trace.write(os.path.join(run_dir, "finetune_trace.tsv"))
        log.info("finetuned %s -> %s", variant, run_dir)
    return 0


def cmd_protocol(args):
    cfg = load_config(args.config)
    ds_c, ds_t = _load_datasets(cfg)
    out = args.out or cfg.out_dir
    _require_outdir(out, args.force, ["report.csv", "report.json"])
    report, details = T.run_protocol(cfg.protocol_config(), ds_c, ds_t,
                                     jobs=args.jobs)
    report.write_csv(os.path.join(out, "report.csv"))
    report.write_json(os.path.join(out, "report.json"))
    with open(os.path.join(out, "protocol_details.json"), "w") as fh:
        json.dump(details, fh, indent=2, sort_keys=True)
    print(os.path.join(out, "report.csv"))
    return 0


def cmd_report(args):
    if not os.path.exists(args.report):
        _fail(1, f"report not found: {args.report}")
    report = EvalReport.read_csv(args.report)
    if not report.records:
        _fail(1, f"report is empty: {args.report}")
    agg = report.aggregates("auroc")
    print(f"{'variant':<16} {'auroc (mean±std)':>20} {'n':>4}")
    for variant in sorted(agg):
        a = agg[variant]
        print(f"{variant:<16} {a['mean']:.4f}±{a['std']:.4f}{'':>6} {a['n']:>4}")
    tests = report.pairwise_tests("auroc")
    if tests:
        print("\npairwise Welch t-tests (auroc):")
        for t in tests:
            print(f"  {t['variant_a']} vs {t['variant_b']}: "
                  f"t={t['t']:.4f} p={t['p']:.6f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "plot_data.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "iteration", "auroc"])
            for r in sorted(report.records,
                            key=lambda r: (r.variant, r.seed, r.fold)):
                if r.metric == "auroc":
                    writer.writerow([r.variant, r.fold, repr(r.value)])
        print(path)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="deconfae",
        description="Deconfounding autoencoder training and evaluation")
    parser.add_argument("--jobs", type=int, default=1,
                        help="parallel (variant) jobs for protocol runs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic confounded dataset")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--dim", type=int, default=200)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--gamma", type=float, default=3.0)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    for name, func in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune),
                       ("protocol", cmd_protocol)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--force", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="summarize a protocol report")
    p.add_argument("report")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.debug("unhandled", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
