"""Command-line entry point: ``fieldctr <command> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
import warnings

import numpy as np

from . import data as dc
from .config import ConfigError, load_config
from .corpus import CorpusConfig, emit_corpus, make_examples
from .enhancement import check_lambda_grid
from .estimator import FieldCTRClassifier
from .metrics import evaluate, relaimpr
from .semantics import (export_interaction_csv, field_interaction_matrix, load_field_embeddings,
                        save_field_embeddings, synthetic_encode)
from .training import TrainingDiverged

logger = logging.getLogger("fieldctr")

ABLATIONS = ("wo-fre", "wo-fie", "wo-ft")
SPLITS = ("train", "val", "test")


class CommandError(RuntimeError):
    pass


def _out(cfg) -> str:
    out = cfg["output"]["dir"]
    os.makedirs(out, exist_ok=True)
    return out


def _schema(cfg) -> dc.FieldSchema:
    path = cfg["data"]["schema"]
    if not path:
        raise CommandError("[data] schema is not set")
    return dc.load_schema(path)


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _load_prepared(cfg, schema):
    out = cfg["output"]["dir"]
    vocab_dir = os.path.join(out, "vocab")
    if not os.path.isdir(vocab_dir):
        raise CommandError(f"no vocabulary under {vocab_dir}; run 'prepare' first")
    vocab = dc.FeatureVocab.load(vocab_dir, schema)
    splits = {}
    for name in SPLITS:
        path = os.path.join(out, "splits", f"{name}.tsv")
        if os.path.exists(path):
            splits[name] = dc.read_split(path, schema, None, name)
    return vocab, splits


def cmd_prepare(cfg, args) -> int:
    d = cfg["data"]
    schema = _schema(cfg)
    if not d["table"]:
        raise CommandError("[data] table is not set")
    ds = dc.ingest_table(d["table"], schema, d["rating_threshold"], d["drop_neutral"])
    if d["k_core"] > 0:
        ds = dc.k_core_filter(ds, d["core_fields"], d["k_core"])
    train, val, test = dc.temporal_split(ds, d["split_ratios"])
    vocab = dc.build_vocab(train, schema)
    out = _out(cfg)
    os.makedirs(os.path.join(out, "splits"), exist_ok=True)
    counts = {}
    for part in (train, val, test):
        dc.write_split(dc.encode(part, vocab), os.path.join(out, "splits", f"{part.split}.tsv"))
        counts[part.split] = {"n": len(part), "positives": int(part.labels.sum())}
    vocab.export(os.path.join(out, "vocab"))
    dc.write_schema(schema, os.path.join(out, "schema.tsv"))
    _write_json(os.path.join(out, "prepare.json"),
                {"splits": counts, "vocab_sizes": vocab.sizes, "schema_digest": schema.digest()})
    for name, c in counts.items():
        print(f"{name}: {c['n']} instances ({c['positives']} positive)")
    return 0


def cmd_gen_corpus(cfg, args) -> int:
    schema = _schema(cfg)
    vocab, _ = _load_prepared(cfg, schema)
    S = args.samples if args.samples is not None else cfg["corpus"]["samples_per_field"]
    try:
        ccfg = CorpusConfig(S, cfg["train"]["seed"], cfg["corpus"]["template_id"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    examples = make_examples(vocab, schema, ccfg)
    path = os.path.join(_out(cfg), "corpus.jsonl")
    emit_corpus(examples, path, schema)
    per_field = np.bincount([e.field_index for e in examples], minlength=schema.K)
    for name, n in zip(schema.names, per_field):
        print(f"{name}: {n}")
    print(f"wrote {len(examples)} examples to {path}")
    return 0


def _synthetic(cfg, schema, mode=None):
    e = cfg["embeddings"]
    return synthetic_encode(schema, mode or e["synthetic_mode"], cfg["train"]["seed"], e["synthetic_dim"],
                            e["clusters"] or None)


def cmd_gen_embeddings(cfg, args) -> int:
    schema = _schema(cfg)
    fem = _synthetic(cfg, schema, args.mode)
    path = os.path.join(_out(cfg), "field_embeddings.jsonl")
    save_field_embeddings(fem, path)
    print(f"wrote {fem.K} x {fem.dim} {fem.provenance} field embeddings to {path}")
    return 0


def field_embeddings_for(cfg, schema, untuned=False):
    e = cfg["embeddings"]
    if e["source"] == "synthetic":
        # the untuned stand-in for synthetic runs is the raw trigram encoder
        return _synthetic(cfg, schema, "raw" if untuned else None)
    path = e["untuned_path"] if untuned else e["path"]
    if not path:
        raise CommandError("[embeddings] untuned_path is not set" if untuned else "[embeddings] path is not set")
    return load_field_embeddings(path, schema)


def apply_ablations(cfg, ablations) -> list[str]:
    """Apply ``--ablate`` flags in place; ablations win over configured lambdas.

    Returns one line per flag describing the precedence, for printing.
    """
    notes = []
    enh = cfg["enhancement"]
    for a in dict.fromkeys(ablations or []):
        if a == "wo-fre":
            notes.append(f"--ablate wo-fre: lambda_kl=0 (takes precedence over configured {enh['lambda_kl']})")
            enh["lambda_kl"] = 0.0
        elif a == "wo-fie":
            notes.append(f"--ablate wo-fie: lambda_fm=0 (takes precedence over configured {enh['lambda_fm']})")
            enh["lambda_fm"] = 0.0
        elif a == "wo-ft":
            notes.append("--ablate wo-ft: using untuned field embeddings")
    return notes


def build_estimator(cfg, schema, vocab_sizes, untuned=False, **overrides) -> FieldCTRClassifier:
    m, enh, t = cfg["model"], dict(cfg["enhancement"]), cfg["train"]
    enh.update(overrides)
    needs_semantics = enh["lambda_kl"] > 0 or (enh["lambda_fm"] > 0 and enh["fie_mode"] != "off")
    fem = field_embeddings_for(cfg, schema, untuned) if needs_semantics else None
    return FieldCTRClassifier(
        backbone=m["backbone"], embedding_dim=m["embedding_dim"], hidden_units=m["hidden_units"],
        init_std=m["init_std"], lambda_kl=enh["lambda_kl"], alignment=enh["alignment"],
        cl_temperature=enh["cl_temperature"], lambda_fm=enh["lambda_fm"], fie_mode=enh["fie_mode"],
        adaptor_init=enh["adaptor_init"], field_embeddings=None if fem is None else fem.H,
        learning_rate=t["learning_rate"], weight_decay=t["weight_decay"], batch_size=t["batch_size"],
        max_epochs=t["max_epochs"], patience=t["patience"], shuffle=t["shuffle"],
        vocab_sizes=vocab_sizes, random_state=t["seed"],
    )


def _require_splits(splits, names):
    missing = [n for n in names if n not in splits]
    if missing:
        raise CommandError(f"missing prepared split(s) {missing}; run 'prepare' first")


def _fit(est, splits, schema):
    tr, va = splits["train"], splits["val"]
    eval_set = (va.indices, va.labels, va.values) if va.labels.min() != va.labels.max() else None
    return est.fit(tr.indices, tr.labels, values=tr.values, eval_set=eval_set, schema_digest=schema.digest())


def _report(est, split, base_auc=None, **meta):
    probs = est.predict_proba(split.indices, split.values)[:, 1]
    return evaluate(split.labels, probs, base_auc, split=split.split, **meta)


def cmd_train(cfg, args) -> int:
    start = time.perf_counter()
    schema = _schema(cfg)
    vocab, splits = _load_prepared(cfg, schema)
    _require_splits(splits, SPLITS)
    for note in apply_ablations(cfg, args.ablate):
        print(note)
    untuned = "wo-ft" in (args.ablate or [])
    est = build_estimator(cfg, schema, vocab.sizes, untuned)
    try:
        _fit(est, splits, schema)
    except TrainingDiverged as exc:
        raise CommandError(f"training diverged: {exc}") from None
    out = _out(cfg)
    est.save(os.path.join(out, "model.ckpt"))
    est.run_record_.write_jsonl(os.path.join(out, "run_log.jsonl"))
    report = _report(est, splits["test"], args.base_auc if args.base_auc is not None else cfg["train"]["base_auc"],
                     backbone=est.backbone, lambda_kl=est.lambda_kl, lambda_fm=est.lambda_fm,
                     best_epoch=est.run_record_.best_epoch, ablate=",".join(args.ablate or []))
    _write_json(os.path.join(out, "metrics.json"), report.to_dict())
    wall = time.perf_counter() - start
    # wall-clock lives in its own file so the other artifacts stay reproducible
    _write_json(os.path.join(out, "timing.json"), {"wall_seconds": wall, "train_seconds": est.run_record_.wall_seconds})
    print(f"test AUC {report.auc:.4f}  LogLoss {report.logloss:.4f}  (best epoch {est.run_record_.best_epoch})")
    print(f"wall-clock {wall:.1f}s", file=sys.stderr)
    return 0


def cmd_evaluate(cfg, args) -> int:
    schema = _schema(cfg)
    _, splits = _load_prepared(cfg, schema)
    _require_splits(splits, [args.split])
    out = cfg["output"]["dir"]
    ckpt = args.checkpoint or os.path.join(out, "model.ckpt")
    est = FieldCTRClassifier.load(ckpt)
    if est.bundle_.schema_digest and est.bundle_.schema_digest != schema.digest():
        raise CommandError(f"{ckpt} was trained on a different schema")
    base = args.base_auc if args.base_auc is not None else cfg["train"]["base_auc"]
    report = _report(est, splits[args.split], base)
    _write_json(os.path.join(_out(cfg), f"eval_{args.split}.json"), report.to_dict())
    print(report.to_json())
    return 0


SWEEP_COLUMNS = ["lambda_kl", "lambda_fm", "val_auc", "val_logloss", "test_auc", "test_logloss",
                 "relaimpr_pct", "best", "error"]


def cmd_sweep(cfg, args) -> int:
    schema = _schema(cfg)
    vocab, splits = _load_prepared(cfg, schema)
    _require_splits(splits, SPLITS)
    try:
        kl_grid = check_lambda_grid(cfg["sweep"]["lambda_kl_grid"], "lambda_kl_grid")
        fm_grid = check_lambda_grid(cfg["sweep"]["lambda_fm_grid"], "lambda_fm_grid")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    base = _fit(build_estimator(cfg, schema, vocab.sizes, lambda_kl=0.0, lambda_fm=0.0), splits, schema)
    base_auc = _report(base, splits["test"]).auc
    rows = []
    for lkl in kl_grid:
        for lfm in fm_grid:
            row = {"lambda_kl": lkl, "lambda_fm": lfm}
            try:
                est = _fit(build_estimator(cfg, schema, vocab.sizes, lambda_kl=lkl, lambda_fm=lfm), splits, schema)
                v, te = _report(est, splits["val"]), _report(est, splits["test"])
                row.update(val_auc=v.auc, val_logloss=v.logloss, test_auc=te.auc, test_logloss=te.logloss,
                           relaimpr_pct=relaimpr(te.auc, base_auc) if base_auc > 0.5 else None)
            except Exception as exc:  # one failing cell must not abort the sweep
                logger.warning("sweep cell lambda_kl=%s lambda_fm=%s failed: %s", lkl, lfm, exc)
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
            print(f"lambda_kl={lkl} lambda_fm={lfm} val_auc={row.get('val_auc', float('nan')):.4f}", flush=True)
    ok = [r for r in rows if "val_auc" in r]
    if ok:
        max(ok, key=lambda r: r["val_auc"])["best"] = 1
    out = _out(cfg)
    _write_rows(os.path.join(out, "sweep.csv"), rows)
    ranked = sorted(ok, key=lambda r: -r["val_auc"]) + [r for r in rows if "val_auc" not in r]
    _write_rows(os.path.join(out, "sweep_summary.csv"), ranked)
    _write_json(os.path.join(out, "sweep_base.json"), {"base_test_auc": base_auc})
    print(f"base test AUC {base_auc:.4f}; {len(ok)}/{len(rows)} cells succeeded")
    if len(ok) < len(rows):
        print(f"warning: {len(rows) - len(ok)} cell(s) failed; see the error column", file=sys.stderr)
    return 0


def _write_rows(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            row = {c: "" if r.get(c) is None else r[c] for c in SWEEP_COLUMNS}
            row["best"] = r.get("best", 0)
            w.writerow(row)


def cmd_export_heatmap(cfg, args) -> int:
    schema = _schema(cfg)
    fem = load_field_embeddings(args.embeddings, schema) if args.embeddings else field_embeddings_for(cfg, schema)
    im = field_interaction_matrix(fem)
    path = os.path.join(_out(cfg), "heatmap.csv")
    export_interaction_csv(im, path)
    print(f"wrote {im.M.shape[0]}x{im.M.shape[1]} field interaction matrix to {path}")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "gen-corpus": cmd_gen_corpus,
    "gen-embeddings": cmd_gen_embeddings,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "export-heatmap": cmd_export_heatmap,
}


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # sub-commands repeat the global flags; SUPPRESS keeps them from clobbering earlier values
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="INI run configuration", **kw)
    p.add_argument("--seed", type=int, help="overrides [train] seed", **kw)
    p.add_argument("--out", help="overrides [output] dir", **kw)
    p.add_argument("-v", "--verbose", action="store_true", **kw)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)

    parser = argparse.ArgumentParser(prog="fieldctr", description=__doc__, parents=[_global_flags(False)])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="ingest, split 8:1:1 by time, build vocabularies")
    p = sub.add_parser("gen-corpus", parents=[common], help="emit the field-feature prompt corpus")
    p.add_argument("--samples", type=int, help="features sampled per field")
    p = sub.add_parser("gen-embeddings", parents=[common], help="write synthetic field embeddings")
    p.add_argument("--mode", choices=("raw", "structured"))
    p = sub.add_parser("train", parents=[common], help="train, checkpoint and score the test split")
    p.add_argument("--ablate", action="append", choices=ABLATIONS)
    p.add_argument("--base-auc", type=float)
    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a split")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--base-auc", type=float)
    sub.add_parser("sweep", parents=[common], help="grid over lambda_kl x lambda_fm")
    p = sub.add_parser("export-heatmap", parents=[common], help="write the field cosine matrix as CSV")
    p.add_argument("--embeddings", help="field-embedding JSONL (defaults to the configured source)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["train"]["seed"] = args.seed
        if args.out is not None:
            cfg["output"]["dir"] = os.path.abspath(args.out)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CommandError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
