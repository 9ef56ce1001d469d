"""Command-line front end.

Exit codes: 0 success, 2 config/validation error, 3 numerical failure,
4 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ._io import atomic_write_text, file_hash
from .config import ConfigError, RunConfig, load_config
from .evaluation import (
    BENCH_FIELDS,
    EvalReport,
    auroc,
    bench_scores,
    context_silhouette,
    pca_alignment_export,
    read_csv,
    write_csv,
)
from .imageops import check_alignment, check_distinctiveness
from .scoring import TestTimePolicy, final_scores, fit_score_model, save_score_model
from .trainer import Checkpoint, NonFiniteLossError, train

logger = logging.getLogger("con2")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4
SCORE_FIELDS = ("id", "score", "label", "variant", "A", "seed", "config_hash")


class MissingArtifact(FileNotFoundError):
    pass


def _load_checkpoint(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except FileNotFoundError as exc:
        raise MissingArtifact(str(exc)) from exc


def _say(name: str, value) -> None:
    print(f"{name} = {value}")


# -- commands ---------------------------------------------------------------


def cmd_train(cfg: RunConfig, run_dir=None) -> Path:
    split = cfg.load_dataset()
    ckpt = train(cfg.model, cfg.train, split, log_every=100)
    ckpt.meta.update(config_hash=cfg.config_hash, seed=cfg.train.seed)
    out = cfg.run_dir(run_dir)
    path = ckpt.save(out / "checkpoint")
    # loss history also lives beside the checkpoint for quick inspection
    atomic_write_text(out / "loss_history.csv", (path / "loss_history.csv").read_text())
    _say("checkpoint", path)
    _say("final_loss", ckpt.history[-1]["loss"])
    return path


def _policy(ckpt: Checkpoint, A: int, seed: int) -> TestTimePolicy:
    return TestTimePolicy.draw(A=A, content=ckpt.train_config.content, context=ckpt.train_config.context, seed=seed)


def cmd_score(
    cfg: RunConfig,
    checkpoint,
    variant: str | None = None,
    A: int | None = None,
    seed: int | None = None,
    out=None,
    run_dir=None,
    save_model: bool = True,
) -> Path:
    variant = (variant or cfg.scoring.variant).lower()
    A = cfg.scoring.A if A is None else A
    seed = cfg.scoring.seed if seed is None else seed
    if variant not in ("nnd", "lh"):
        raise ConfigError(f"unknown variant {variant!r}")
    if A < 2 or A % 2:
        raise ConfigError(f"A must be a positive even integer, got {A}")
    ckpt = _load_checkpoint(checkpoint)
    split = cfg.load_dataset()
    policy = _policy(ckpt, A, seed)
    model = fit_score_model(ckpt, split.train, policy, variant, cfg.scoring.eps)
    scores = final_scores(model, ckpt, split.test)
    run = cfg.run_dir(run_dir)
    out = Path(out) if out else run / f"scores_{variant}_A{A}_seed{seed}.csv"
    rows = [
        dict(id=i, score=float(s), label=int(y), variant=variant, A=A, seed=seed,
             config_hash=cfg.config_hash)
        for i, (s, y) in enumerate(zip(scores, split.test_labels))
    ]
    write_csv(out, rows, SCORE_FIELDS)
    if save_model:
        save_score_model(
            model,
            out.with_suffix("").with_name(out.stem + "_model"),
            meta={"checkpoint_hash": file_hash(Path(checkpoint) / "params.npz"),
                  "config_hash": cfg.config_hash, "seed": seed},
        )
    _say("scores", out)
    return out


def cmd_eval(score_files, out_dir=None, cfg: RunConfig | None = None, checkpoint=None) -> EvalReport:
    rows = []
    hashes = set()
    for f in score_files:
        f = Path(f)
        if not f.is_file():
            raise MissingArtifact(f"score file not found: {f}")
        records = read_csv(f)
        if not records:
            raise ConfigError(f"empty score file: {f}")
        scores = np.array([float(r["score"]) for r in records])
        labels = np.array([int(r["label"]) for r in records])
        if len(np.unique(labels)) < 2:
            raise ConfigError(f"AUROC needs both classes; {f} has only label {labels[0]}")
        hashes.add(records[0].get("config_hash"))
        rows.append(
            dict(variant=records[0].get("variant", ""), seed=int(records[0].get("seed", 0)),
                 auroc=auroc(scores, labels), n=len(records), source=f.name)
        )
    report = EvalReport(rows=rows, config_hash=",".join(sorted(h for h in hashes if h)))
    if checkpoint is not None and cfg is not None:
        ckpt = _load_checkpoint(checkpoint)
        split = cfg.load_dataset()
        report.silhouette = context_silhouette(ckpt, split.test, ckpt.train_config.context)
    out = Path(out_dir) if out_dir else Path(score_files[0]).parent
    report.write(out / "report.csv", out / "report.json")
    for r in rows:
        _say(f"auroc[{r['variant']},seed={r['seed']}]", r["auroc"])
    if report.silhouette is not None:
        _say("silhouette", report.silhouette)
    return report


def cmd_validate_context(cfg: RunConfig, augmentation=None, k: int = 5, n: int = 32, out=None, run_dir=None):
    split = cfg.load_dataset()
    aug = augmentation or cfg.train.context
    samples = list(split.train[:n])
    dist = check_distinctiveness(samples, aug, k=k)
    align = check_alignment(samples, aug)
    result = {
        "augmentation": dist.augmentation,
        "distinctiveness": dist.distinctiveness,
        "alignment": align.alignment,
        "n_samples": len(samples),
        "k": k,
        "distance": {**dist.distance, **align.distance},
        "config_hash": cfg.config_hash,
    }
    out = Path(out) if out else cfg.run_dir(run_dir) / f"context_{dist.augmentation}.json"
    atomic_write_text(out, json.dumps(result, indent=2, sort_keys=True))
    _say("distinctiveness", dist.distinctiveness)
    _say("alignment", align.alignment)
    return result


def cmd_bench_scores(n_values, d: int = 64, n_batches: int = 10, batch_size: int = 32, out=None):
    rows = bench_scores(n_values, n_batches=n_batches, batch_size=batch_size, d=d)
    if out:
        write_csv(out, rows, BENCH_FIELDS)
    for r in rows:
        _say(f"query_s[n={r['n']}]", f"nnd {r['nnd_query_s']:.3g} lh {r['lh_query_s']:.3g}")
    return rows


def cmd_export_embeddings(cfg: RunConfig, checkpoint, out_dir=None, run_dir=None):
    ckpt = _load_checkpoint(checkpoint)
    split = cfg.load_dataset()
    n_train = min(cfg.eval.export_train_samples, len(split.train))
    images = np.concatenate([split.train[:n_train], split.test])
    ids = [f"train-{i}" for i in range(n_train)] + [f"test-{i}" for i in range(len(split.test))]
    splits = ["train"] * n_train + ["test"] * len(split.test)
    anomaly = [0] * n_train + [int(y) for y in split.test_labels]
    out = Path(out_dir) if out_dir else cfg.run_dir(run_dir)
    rows, pca = pca_alignment_export(
        ckpt, images, ckpt.train_config.context,
        out_csv=out / "embeddings.csv",
        out_figure=out / f"alignment.{cfg.eval.figure_format}",
        ids=ids, splits=splits, anomaly=anomaly,
    )
    _say("embedding_rows", len(rows))
    _say("explained_variance", float(pca.explained_variance_ratio.sum()))
    return rows


# -- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="con2", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an encoder with the Con2 objective")
    t.add_argument("config")
    t.add_argument("--run-dir")

    s = sub.add_parser("score", help="fit a score model and score the test split")
    s.add_argument("config")
    s.add_argument("checkpoint")
    s.add_argument("--variant", choices=("nnd", "lh"))
    s.add_argument("--A", type=int, dest="A")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--run-dir")

    e = sub.add_parser("eval", help="AUROC report from score files")
    e.add_argument("scores", nargs="+")
    e.add_argument("--out-dir")
    e.add_argument("--config", help="with --checkpoint, also report the context silhouette")
    e.add_argument("--checkpoint")

    v = sub.add_parser("validate-context", help="heuristic checks of a context augmentation")
    v.add_argument("config")
    v.add_argument("--augmentation", choices=("invert", "vflip", "equalize"))
    v.add_argument("--k", type=int, default=5)
    v.add_argument("--n", type=int, default=32)
    v.add_argument("--out")
    v.add_argument("--run-dir")

    b = sub.add_parser("bench-scores", help="runtime of the two score functions versus n")
    b.add_argument("--n", type=int, nargs="+", default=[100, 1000, 10000])
    b.add_argument("--d", type=int, default=64)
    b.add_argument("--batches", type=int, default=10)
    b.add_argument("--batch-size", type=int, default=32)
    b.add_argument("--out")

    x = sub.add_parser("export-embeddings", help="2-d PCA export of both contexts")
    x.add_argument("config")
    x.add_argument("checkpoint")
    x.add_argument("--out-dir")
    x.add_argument("--run-dir")
    return p


def _dispatch(args) -> None:
    if args.command == "train":
        cmd_train(load_config(args.config), args.run_dir)
    elif args.command == "score":
        cmd_score(load_config(args.config), args.checkpoint, args.variant, args.A, args.seed,
                  args.out, args.run_dir)
    elif args.command == "eval":
        cfg = load_config(args.config) if args.config else None
        cmd_eval(args.scores, args.out_dir, cfg, args.checkpoint)
    elif args.command == "validate-context":
        cmd_validate_context(load_config(args.config), args.augmentation, args.k, args.n,
                             args.out, args.run_dir)
    elif args.command == "bench-scores":
        cmd_bench_scores(args.n, args.d, args.batches, args.batch_size, args.out)
    elif args.command == "export-embeddings":
        cmd_export_embeddings(load_config(args.config), args.checkpoint, args.out_dir, args.run_dir)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NonFiniteLossError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
