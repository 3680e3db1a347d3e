"""The padrec command line.

Subcommands: synth | preprocess | pretrain | align | finetune | pipeline |
eval | ablate | diagnose. Global flags: --config, --seed, --run-dir,
--threads, --precision. All outputs land in the run directory; inputs are
never mutated. Exit codes: 0 success, 1 config/usage error, 2 runtime or
data error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .config import ConfigError, RunConfig
from .data import (gen_synthetic, load_text_embeddings, load_tsv,
                   preprocess_split, write_text_embeddings)
from .evaluate import (behavior_target_pairs, bucketed_kt, evaluate_ranking,
                       top_bottom_pair_analysis, write_pairs_csv, write_report)
from .model import bucketize
from .pipeline import align_phase, finetune_phase, load_model_from, pretrain


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are validation errors: exit 1
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


class _RunDirLock:
    def __init__(self, run_dir: str):
        self.path = os.path.join(run_dir, ".lock")

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"run directory is locked by another process: {self.path}")
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        os.unlink(self.path)


def _apply_runtime(cfg: RunConfig) -> None:
    ad.set_default_dtype(np.float32 if cfg["precision"] == "f32"
                         else np.float64)
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=max(1, cfg["threads"]))
    except ImportError:
        pass


def _load_dataset(cfg: RunConfig):
    path = cfg["data.interactions"]
    if not path:
        raise ConfigError("data.interactions is required for this command")
    if not os.path.exists(path):
        raise FileNotFoundError(f"interaction log not found: {path}")
    dataset = preprocess_split(load_tsv(path))
    text_path, index_path = cfg["data.text"], cfg["data.text_index"]
    if not text_path:
        raise ConfigError("data.text is required for this command")
    if not os.path.exists(text_path):
        raise FileNotFoundError(f"text embedding file not found: {text_path}")
    if not index_path:
        index_path = text_path + ".index"
    text = load_text_embeddings(text_path, index_path, dataset.vocab,
                                strict=cfg["data.text_strict"])
    return dataset, text


def _prepare_run_dir(cfg: RunConfig, run_dir: str) -> None:
    os.makedirs(run_dir, exist_ok=True)
    cfg.write_resolved(os.path.join(run_dir, "resolved_config.json"))


def _overrides_from_args(args) -> dict:
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.threads is not None:
        out["threads"] = args.threads
    if args.precision is not None:
        out["precision"] = args.precision
    for key, value in args.set or []:
        out[key] = value
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    log, text, item_ids = gen_synthetic(
        seed=args.seed if args.seed is not None else 0,
        n_users=args.users, n_items=args.items, n_cold=args.cold,
        latent_dim=args.latent_dim, noise=args.noise)
    os.makedirs(args.out_dir, exist_ok=True)
    tsv = os.path.join(args.out_dir, "interactions.tsv")
    with open(tsv, "w", encoding="utf-8") as fh:
        for rec in log.records:
            fh.write(f"{rec.user}\t{rec.item}\t{rec.timestamp}\t"
                     f"{'1' if rec.positive else '0'}\n")
    emb = os.path.join(args.out_dir, "text.padv1")
    write_text_embeddings(emb, emb + ".index", text, item_ids)
    print(f"wrote {tsv} ({len(log.records)} interactions) and {emb}")
    return 0


def cmd_preprocess(cfg: RunConfig, run_dir: str) -> int:
    dataset, text = _load_dataset(cfg)
    summary = {
        "users": dataset.n_users,
        "items": dataset.n_items,
        "interactions": int(sum(len(s) for s in dataset.sequences)),
        "text_dim": int(text.shape[1]),
        "zero_frequency_items": int((dataset.train_freq == 0).sum()),
    }
    import json

    with open(os.path.join(run_dir, "dataset_summary.json"), "w",
              encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(json.dumps(summary))
    return 0


def _phase_paths(run_dir: str) -> dict[str, str]:
    return {
        "pretrain": os.path.join(run_dir, "pretrain.ckpt"),
        "align": os.path.join(run_dir, "align.ckpt"),
        "final": os.path.join(run_dir, "final.ckpt"),
        "metrics": os.path.join(run_dir, "metrics.jsonl"),
        "report": os.path.join(run_dir, "report.json"),
    }


def _run_phases(cfg: RunConfig, run_dir: str, phases: list[str]) -> int:
    dataset, text = _load_dataset(cfg)
    paths = _phase_paths(run_dir)
    mcfg = cfg.model_config()
    if "pretrain" in phases:
        ckpt = pretrain(cfg.train_config("pretrain"), mcfg, dataset, text,
                        metrics_path=paths["metrics"], echo=True)
        ckpt.save(paths["pretrain"])
    if "align" in phases:
        pre = Checkpoint.load(paths["pretrain"])
        ckpt = align_phase(cfg.train_config("align"), mcfg, dataset, text, pre,
                           metrics_path=paths["metrics"], echo=True)
        ckpt.save(paths["align"])
    if "finetune" in phases:
        pre = Checkpoint.load(paths["pretrain"])
        al = Checkpoint.load(paths["align"])
        ckpt = finetune_phase(cfg.train_config("finetune"), mcfg, dataset,
                              text, pre, al,
                              metrics_path=paths["metrics"], echo=True)
        ckpt.save(paths["final"])
    if "eval" in phases:
        final = Checkpoint.load(paths["final"])
        model = load_model_from(final, dataset, text)
        report = evaluate_ranking(model, dataset, "test",
                                  experts=tuple(final.config["train"]["experts"]),
                                  k=cfg["eval.k"],
                                  batch_size=cfg["train.eval_batch"])
        write_report(paths["report"], rank=report)
        print(f"test HR@{report.k}={report.hr:.4f} "
              f"nDCG@{report.k}={report.ndcg:.4f}")
    return 0


def cmd_eval(cfg: RunConfig, run_dir: str, ckpt_path: str | None) -> int:
    dataset, text = _load_dataset(cfg)
    path = ckpt_path or _phase_paths(run_dir)["final"]
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = Checkpoint.load(path)
    model = load_model_from(ckpt, dataset, text)
    phase = ckpt.config.get("phase", "finetune")
    single = {"pretrain": "id", "align": "align"}.get(phase)
    report = evaluate_ranking(
        model, dataset, "test", single_expert=single,
        experts=None if single else tuple(ckpt.config["train"]["experts"]),
        k=cfg["eval.k"], batch_size=cfg["train.eval_batch"])
    write_report(_phase_paths(run_dir)["report"], rank=report)
    print(f"test HR@{report.k}={report.hr:.4f} nDCG@{report.k}={report.ndcg:.4f}")
    return 0


def cmd_ablate(cfg: RunConfig, run_dir: str, args) -> int:
    dataset, text = _load_dataset(cfg)
    paths = _phase_paths(run_dir)
    variants: list[tuple[str, dict]] = []
    for v in (args.align_variant or "").split(","):
        if v:
            variants.append((f"align={v}", {"train.alignment_variant": v}))
    for k in (args.kernel or "").split(","):
        if k:
            variants.append((f"kernel={k}", {"kernel.kind": k}))
    for e in (args.experts or "").split(";"):
        if e:
            variants.append((f"experts={e}", {"train.experts": e}))
    if args.gating:
        variants.append((f"gating={args.gating}", {"train.gating": args.gating}))
    if not variants:
        raise ConfigError("ablate: no variants requested")

    if args.from_scratch or not os.path.exists(paths["pretrain"]):
        ckpt = pretrain(cfg.train_config("pretrain"), cfg.model_config(),
                        dataset, text, metrics_path=paths["metrics"])
        ckpt.save(paths["pretrain"])
    pre = Checkpoint.load(paths["pretrain"])

    rows = []
    for name, overrides in variants:
        vcfg = RunConfig(dict(cfg.values))
        for k, v in overrides.items():
            vcfg.set(k, v, where=f"variant {name}")
        vcfg.validate()
        mcfg = vcfg.model_config()
        al = align_phase(vcfg.train_config("align"), mcfg, dataset, text, pre)
        fin = finetune_phase(vcfg.train_config("finetune"), mcfg, dataset,
                             text, pre, al)
        model = load_model_from(fin, dataset, text)
        report = evaluate_ranking(model, dataset, "test",
                                  experts=vcfg.experts(), k=cfg["eval.k"],
                                  batch_size=cfg["train.eval_batch"])
        row = {"variant": name, "hr10": report.hr, "ndcg10": report.ndcg}
        for stratum, vals in report.by_stratum.items():
            row[f"hr10_{stratum}"] = vals["hr"]
            row[f"ndcg10_{stratum}"] = vals["ndcg"]
        rows.append(row)
        print(f"{name}: HR@10={report.hr:.4f} nDCG@10={report.ndcg:.4f}")

    out = os.path.join(run_dir, "ablation.csv")
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {out}")
    return 0


def cmd_diagnose(cfg: RunConfig, run_dir: str, args) -> int:
    dataset, text = _load_dataset(cfg)
    for p in (args.before, args.after):
        if not os.path.exists(p):
            raise FileNotFoundError(f"checkpoint not found: {p}")
    before = Checkpoint.load(args.before)
    after = Checkpoint.load(args.after)
    tables = {"before": (before, args.before_table or args.table),
              "after": (after, args.after_table or args.table)}
    for name, (ck, table) in tables.items():
        if table not in ck.sections:
            raise ValueError(f"{name} checkpoint has no section {table!r}")
        if ck.sections[table].shape[0] != dataset.n_items:
            raise ValueError(
                f"{name} checkpoint vocabulary size "
                f"{ck.sections[table].shape[0]} != dataset {dataset.n_items}")
    buckets = bucketize(dataset.train_freq, cfg["model.buckets"])
    pairs = behavior_target_pairs(dataset)
    b_ck, b_table = tables["before"]
    a_ck, a_table = tables["after"]
    kt = bucketed_kt(b_ck.sections[b_table], a_ck.sections[a_table],
                     dataset, buckets, pairs=pairs)
    analysis = top_bottom_pair_analysis(a_ck.sections[a_table], text, pairs)
    write_report(os.path.join(run_dir, "report.json"), kt=kt,
                 pair_analysis=analysis)
    write_pairs_csv(os.path.join(run_dir, "pairs.csv"), pairs, analysis)
    print(f"overall KT={kt.overall:.4f} mean bucket KT={kt.mean_defined():.4f} "
          f"separation={analysis['separation']:.4f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="padrec", description=__doc__)
    parser.add_argument("--config", default=None, help="key = value file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--run-dir", default="padrec_run")
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--precision", choices=("f32", "f64"), default=None)
    parser.add_argument("--set", nargs=2, action="append",
                        metavar=("KEY", "VALUE"),
                        help="override any config key")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic world")
    synth.add_argument("--users", type=int, default=500)
    synth.add_argument("--items", type=int, default=100)
    synth.add_argument("--cold", type=int, default=10)
    synth.add_argument("--latent-dim", type=int, default=8)
    synth.add_argument("--noise", type=float, default=0.1)
    synth.add_argument("--out-dir", required=True)

    for name in ("preprocess", "pretrain", "align", "finetune", "pipeline"):
        sub.add_parser(name)

    ev = sub.add_parser("eval")
    ev.add_argument("--ckpt", default=None)

    ab = sub.add_parser("ablate")
    ab.add_argument("--align-variant", default=None,
                    help="comma-separated alignment variants")
    ab.add_argument("--kernel", default=None, help="comma-separated kernels")
    ab.add_argument("--experts", default=None,
                    help="semicolon-separated expert masks, e.g. 'id;id,align'")
    ab.add_argument("--gating", default=None)
    ab.add_argument("--from-scratch", action="store_true")

    diag = sub.add_parser("diagnose")
    diag.add_argument("--before", required=True)
    diag.add_argument("--after", required=True)
    diag.add_argument("--table", default="collab_align")
    diag.add_argument("--before-table", default=None)
    diag.add_argument("--after-table", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            return cmd_synth(args)
        cfg = RunConfig.from_file(args.config, _overrides_from_args(args))
    except ConfigError as exc:
        sys.stderr.write(f"padrec: config error: {exc}\n")
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:
        sys.stderr.write(f"padrec: error: {exc}\n")
        return 2

    run_dir = args.run_dir
    try:
        _apply_runtime(cfg)
        os.makedirs(run_dir, exist_ok=True)
        with _RunDirLock(run_dir):
            _prepare_run_dir(cfg, run_dir)
            if args.command == "preprocess":
                return cmd_preprocess(cfg, run_dir)
            if args.command == "pretrain":
                return _run_phases(cfg, run_dir, ["pretrain"])
            if args.command == "align":
                return _run_phases(cfg, run_dir, ["align"])
            if args.command == "finetune":
                return _run_phases(cfg, run_dir, ["finetune"])
            if args.command == "pipeline":
                return _run_phases(
                    cfg, run_dir, ["pretrain", "align", "finetune", "eval"])
            if args.command == "eval":
                return cmd_eval(cfg, run_dir, args.ckpt)
            if args.command == "ablate":
                return cmd_ablate(cfg, run_dir, args)
            if args.command == "diagnose":
                return cmd_diagnose(cfg, run_dir, args)
            raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        sys.stderr.write(f"padrec: config error: {exc}\n")
        return 1
    except Exception as exc:
        sys.stderr.write(f"padrec: error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
