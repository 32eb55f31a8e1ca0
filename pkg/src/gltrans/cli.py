"""Command-line entry point: synth, train, eval, gradcheck, ablate.

Every command takes ``--config PATH``, ``--seed N``, ``--out DIR`` and
trailing ``key=value`` overrides. Config or dataset errors exit with 2.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import ConfigError
from .checkpoint import CheckpointError
from .config import RunConfig, load_config
from .data import Dataset, DatasetError, generate, load_dir, write_dataset
from .estimator import GLTransReID
from .evaluation import EvalReport, distance_matrix, evaluate, l2_normalize, write_report
from .gradcheck import corrupt_gelu_gradient, format_table, run_suite
from .tensor import NonFiniteError

log = logging.getLogger("gltrans")

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


# -- shared plumbing ------------------------------------------------------


def resolve(args, **extra) -> RunConfig:
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg = cfg.replace(**{getattr(args, "seed_key", "seed"): args.seed})
    for k, v in extra.items():
        if v is not None:
            cfg = cfg.replace(**{k: v})
    return cfg


def comment_lines(cfg: RunConfig) -> list[str]:
    return ["resolved config"] + cfg.lines()


def write_csv(path: Path, header: list[str], rows, cfg: RunConfig) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in comment_lines(cfg):
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def load_data(cfg: RunConfig) -> Dataset:
    if cfg.data:
        return load_dir(cfg.data, cfg.image_h, cfg.image_w)
    return generate(cfg.synth_spec())


def features(est: GLTransReID, ds: Dataset) -> np.ndarray:
    return est.transform(ds.images, ds.cameras)


def retrieval(est: GLTransReID, ds: Dataset, gallery_split: str = "gallery", cam_filter: bool = True) -> EvalReport:
    query, gallery = ds.subset("query"), ds.subset(gallery_split)
    if not len(query) or not len(gallery):
        raise DatasetError("dataset has no query/gallery split to evaluate")
    q = l2_normalize(features(est, query), "query feature")
    g = l2_normalize(features(est, gallery), "gallery feature")
    dist = distance_matrix(q, g)
    return evaluate(dist, query.ids, gallery.ids, query.cameras, gallery.cameras, cam_filter=cam_filter)


def train(cfg: RunConfig, ds: Dataset, callback=None) -> GLTransReID:
    tr = ds.subset("train")
    est = GLTransReID(**cfg.estimator_params())
    return est.fit(tr.images, tr.ids, tr.cameras, callback=callback)


def train_and_eval(cfg: RunConfig, ds: Dataset | None = None) -> tuple[GLTransReID, EvalReport]:
    ds = load_data(cfg) if ds is None else ds
    est = train(cfg, ds)
    return est, retrieval(est, ds)


# -- commands --------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = resolve(args, num_ids=args.ids, imgs_per_id=args.imgs, nuisance=args.nuisance)
    ds = generate(cfg.synth_spec())
    out = Path(args.out or "synth")
    write_dataset(ds, out, comment_lines(cfg))
    print(f"wrote {len(ds)} images ({cfg.num_ids} ids x {cfg.imgs_per_id}) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve(args, data=args.data, epochs=args.epochs)
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text("\n".join(cfg.lines()) + "\n", encoding="utf-8")
    for line in cfg.lines():
        log.info("config %s", line)
    ds = load_data(cfg)
    rows: list[dict] = []
    est = train(cfg, ds, callback=lambda row, _: rows.append(row))
    header = list(rows[0]) if rows else ["iter", "epoch", "lr", "total"]
    write_csv(out / "train.csv", header, ([r[k] for k in header] for r in rows), cfg)
    est.save(out / "final.gltr")
    est.save(out / "best.gltr", est.best_state_)
    if rows:
        print(f"{len(rows)} iterations, loss {rows[0]['total']:.4f} -> {rows[-1]['total']:.4f}")
    print(f"checkpoints written to {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if args.config is None and (ckpt.parent / "config.txt").exists():
        args.config = str(ckpt.parent / "config.txt")
    cfg = resolve(args, data=args.data)
    est = GLTransReID(**cfg.estimator_params())
    try:
        est.load(ckpt)
    except ValueError as exc:
        if isinstance(exc, (ConfigError, CheckpointError)):
            raise
        raise ConfigError(f"checkpoint does not match config: {exc}") from None
    ds = load_data(cfg)
    report = retrieval(est, ds, args.gallery_split, cam_filter=not args.no_cam_filter)
    out = Path(args.out) if args.out else ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "eval.csv", comment_lines(cfg))
    s = report.summary()
    print(f"mAP {s['mAP']:.4f}  Rank1 {s['rank1']:.4f}  Rank5 {s['rank5']:.4f}  skipped {report.num_skipped}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = resolve(args)
    est = GLTransReID(**cfg.estimator_params())
    if args.inject_fault == "gelu":
        with corrupt_gelu_gradient():
            rows, secs = run_suite(est, args.coords, cfg.seed)
    else:
        rows, secs = run_suite(est, args.coords, cfg.seed)
    print(format_table(rows))
    failed = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} rows passed in {secs:.1f}s")
    return 0 if not failed else EXIT_RUNTIME


@dataclass
class AblationRow:
    label: str
    changes: dict


def _layers(k: int, depth: int) -> str:
    return ",".join(str(l) for l in range(max(1, depth - k + 1), depth + 1))


def sweep_rows(name: str, cfg: RunConfig) -> list[AblationRow]:
    if name == "components":
        pattern = [  # gae, ptl, ptf, gma
            (False, False, False, False),
            (True, False, False, False),
            (True, True, False, False),
            (True, True, True, False),
            (True, True, True, True),
        ]
        return [
            AblationRow(f"Model-{i}", dict(gae_on=a, ptl_on=b, ptf_on=c, gma_on=d))
            for i, (a, b, c, d) in enumerate(pattern, 1)
        ]
    if name == "gae_strategy":
        return [AblationRow(s, dict(gae_strategy=s)) for s in ("add", "concat", "one_fc", "two_fc")]
    if name == "layers":
        return [AblationRow(f"last-{k}", dict(aggregated_layers=_layers(k, cfg.depth))) for k in (4, 3, 2, 1)]
    if name == "parts":
        return [AblationRow(f"T={t}", dict(parts=t)) for t in (1, 2, 3, 6)]
    if name == "ptl":
        settings = [("avgpool", 0), ("unshared", 1), ("unshared", 2), ("shared", 1), ("shared", 2)]
        return [
            AblationRow(f"Model-{i}: {m}/{d}", dict(ptl_mode=m, ptl_depth=d))
            for i, (m, d) in enumerate(settings, 1)
        ]
    if name == "gma_heads":
        return [AblationRow(f"O={o}", dict(gma_heads=o)) for o in (1, 4, 6, 12)]
    raise ConfigError(f"unknown sweep {name!r}; valid sweeps: {', '.join(SWEEPS)}")


SWEEPS = ("components", "gae_strategy", "parts", "ptl", "gma_heads", "layers")


def run_sweep(name: str, cfg: RunConfig, ds: Dataset | None = None) -> list[list]:
    """Train and evaluate each row; infeasible rows are kept with a note."""
    ds = load_data(cfg) if ds is None else ds
    rows = []
    for row in sweep_rows(name, cfg):
        setting = " ".join(f"{k}={v}" for k, v in row.changes.items())
        try:
            run_cfg = cfg.replace(**row.changes)
            GLTransReID(**run_cfg.estimator_params()).init_model(2)
        except ConfigError as exc:
            rows.append([name, row.label, setting, "", "", f"skipped: {exc}"])
            continue
        _, report = train_and_eval(run_cfg, ds)
        rows.append([name, row.label, setting, f"{report.mAP:.6f}", f"{report.rank(1):.6f}", ""])
        log.info("%s %s mAP %.4f Rank1 %.4f", name, row.label, report.mAP, report.rank(1))
    return rows


def cmd_ablate(args) -> int:
    cfg = resolve(args, epochs=args.epochs)
    sweep_rows(args.sweep, cfg)  # validate the name before any training
    out = Path(args.out or "ablate")
    out.mkdir(parents=True, exist_ok=True)
    rows = run_sweep(args.sweep, cfg)
    path = out / f"ablate_{args.sweep}.csv"
    write_csv(path, ["sweep", "row", "setting", "mAP", "Rank1", "note"], rows, cfg)
    for r in rows:
        print(f"{r[1]:<22} mAP {r[3] or '-':>8}  Rank1 {r[4] or '-':>8}  {r[5]}")
    print(f"wrote {path}")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("overrides", nargs="*", metavar="key=value")

    p = argparse.ArgumentParser(prog="gltrans", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic PPM dataset")
    s.add_argument("--ids", type=int)
    s.add_argument("--imgs", type=int, help="images per identity")
    s.add_argument("--nuisance", type=float)
    s.set_defaults(func=cmd_synth, seed_key="data_seed")

    t = sub.add_parser("train", parents=[common], help="train and save checkpoints")
    t.add_argument("--data", help="PPM dataset directory (default: synthesize)")
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--gallery-split", choices=("gallery", "query", "train"), default="gallery")
    e.add_argument("--no-cam-filter", action="store_true", help="keep same-camera matches")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--coords", type=int, default=10, help="sampled coordinates per tensor")
    g.add_argument("--inject-fault", choices=("gelu",), help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", parents=[common], help="train/evaluate a toggle sweep")
    a.add_argument("--sweep", required=True, help=f"one of {', '.join(SWEEPS)}")
    a.add_argument("--epochs", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"aborted: non-finite value: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
