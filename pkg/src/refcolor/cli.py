"""Command-line entry points: ``refcolor colorize`` and ``refcolor ablate``.

Configuration precedence is built-in defaults < ``--config`` JSON < flags.
A ``report.json`` written by a previous run is itself a valid ``--config``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .evaluation import ch_scores, convergence_curve, format_ablation_table, rows_to_csv, CURVE_COLUMNS
from .features import ExtractorConfig, Extractors
from .image_core import load_image, save_image, to_tensor
from .losses import DEFAULT_FDA_WEIGHTS, perceptual_loss, structure_of
from .metrics import METRICS
from .optimizer import ABLATIONS, RunAborted, RunConfig, prepare_inputs, run

logger = logging.getLogger("refcolor")

DEFAULT_SNAPSHOT_STRIDE = 20
ABLATION_COLUMNS = ("cell", "pair", "old", "ref", "ablation", "K", "T", "L", "status",
                    "ch_kl", "ch_hellinger", "loss_p", "sifid", "fid", "wall_time", "error")


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--metric", choices=METRICS, help="distribution distance (default cx)")
    p.add_argument("--lr", type=float, help="learning rate for all but the finest scale")
    p.add_argument("--lr-final", type=float, dest="lr_final_scale", help="learning rate at the finest scale")
    p.add_argument("--lambda-fda", type=float, help="weight of the colour term (default depends on metric)")
    p.add_argument("--lambda-p", type=float, help="weight of the structure term")
    p.add_argument("--size", type=int, nargs="+", metavar="PX", help="working resolution: S or H W")
    p.add_argument("--samples", type=int, dest="n_samples", help="hypercolumn sample points per image")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", type=Path, help="JSON config (or a previous report.json)")
    p.add_argument("--weights-dir", type=Path, help="directory with pretrained weights "
                   "(default $REFCOLOR_WEIGHTS_DIR or ~/.cache/refcolor)")
    p.add_argument("--require-pretrained", action="store_true",
                   help="fail instead of falling back to randomly initialised extractors")
    p.add_argument("-v", "--verbose", action="store_true")


def _colorize_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refcolor colorize", description="Colourise a grayscale photo from a colour reference.")
    p.add_argument("--old", type=Path, required=True, help="grayscale (old) photo")
    p.add_argument("--ref", type=Path, required=True, help="colour reference image")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--scales", type=int, dest="K", help="number of coarser scales K (default 3)")
    p.add_argument("--iters", type=int, dest="T", help="iterations per scale T (default 200)")
    p.add_argument("--lp-levels", type=int, dest="L", help="Laplacian pyramid levels L (default 5)")
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--emit-curves", action="store_true", help="write curves.csv and snapshot images")
    p.add_argument("--snapshot-stride", type=int, default=DEFAULT_SNAPSHOT_STRIDE)
    _add_run_options(p)
    return p


def _ablate_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refcolor ablate", description="Run an ablation grid over image pairs.")
    p.add_argument("--pair", nargs=2, action="append", type=Path, metavar=("OLD", "REF"), default=[],
                   help="an old/reference pair; repeat for more")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ablations", nargs="+", choices=ABLATIONS, default=None)
    p.add_argument("--scales-grid", type=int, nargs="+", dest="K_grid")
    p.add_argument("--iters-grid", type=int, nargs="+", dest="T_grid")
    p.add_argument("--lp-levels-grid", type=int, nargs="+", dest="L_grid")
    p.add_argument("--grid", type=Path, help="JSON with any of: pairs, ablations, K, T, L")
    p.add_argument("--external", type=Path, help="CSV with columns cell,sifid,fid computed elsewhere")
    p.add_argument("--jobs", type=int, default=1, help="grid cells run concurrently")
    _add_run_options(p)
    return p


def resolve_config(args: argparse.Namespace, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, the optional config file and explicit flags."""
    base: dict = {}
    if getattr(args, "config", None):
        loaded = json.loads(Path(args.config).read_text())
        base = dict(loaded.get("config", loaded))
    flags = {k: getattr(args, k, None) for k in ("K", "T", "L", "lr", "lr_final_scale", "seed",
                                                 "ablation", "n_samples")}
    flags.update(overrides or {})
    base.update({k: v for k, v in flags.items() if v is not None})
    if getattr(args, "size", None):
        if len(args.size) not in (1, 2):
            raise ValueError("--size takes one or two values")
        base["size"] = list(args.size) * (2 if len(args.size) == 1 else 1)

    metric = dict(base.get("metric") or {})
    weights = dict(base.get("weights") or {})
    if args.metric and args.metric != metric.get("kind"):
        metric["kind"] = args.metric
        weights.pop("lambda_fda", None)
    kind = metric.get("kind", "cx")
    if args.lambda_fda is not None:
        weights["lambda_fda"] = args.lambda_fda
    if args.lambda_p is not None:
        weights["lambda_p"] = args.lambda_p
    weights.setdefault("lambda_fda", DEFAULT_FDA_WEIGHTS[kind])
    weights.setdefault("lambda_p", 1.0)
    base["metric"], base["weights"] = metric, weights
    return RunConfig.from_dict(base)


def load_extractors(args: argparse.Namespace) -> Extractors:
    cfg = ExtractorConfig(weights_dir=str(args.weights_dir) if args.weights_dir else None,
                          allow_random=not args.require_pretrained)
    return Extractors(cfg)


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def colorize_job(old: Path, ref: Path, out: Path, cfg: RunConfig, ext: Extractors,
                 emit_curves: bool = False, snapshot_stride: int = DEFAULT_SNAPSHOT_STRIDE) -> dict:
    """Run one colourisation and write result.png, report.json, loss.csv (+ curves)."""
    out.mkdir(parents=True, exist_ok=True)
    o, r = load_image(old), load_image(ref)
    snapshots: list[tuple[int, int, np.ndarray]] = []

    def keep(scale: int, it: int, img: np.ndarray) -> None:
        snapshots.append((scale, it, img))

    try:
        result, report = run(o, r, cfg, ext, snapshot_stride=snapshot_stride if emit_curves else None,
                             on_snapshot=keep if emit_curves else None)
    except RunAborted as exc:
        (out / "loss.csv").write_text(exc.report.loss_csv())
        _write_json(out / "report.json", {**exc.report.to_dict(), "inputs": {"old": old, "ref": ref}})
        if exc.iterate is not None:
            np.save(out / "diverged_iterate.npy", exc.iterate)
        raise
    _, R = prepare_inputs(o, r, cfg)
    ref_work = R[0].permute(1, 2, 0).numpy()
    scores = ch_scores(result, ref_work)
    save_image(result, out / "result.png")
    (out / "loss.csv").write_text(report.loss_csv())
    if emit_curves:
        snap_dir = out / "snapshots"
        for scale, it, img in snapshots:
            save_image(img, snap_dir / f"scale{scale}_iter{it:04d}.png")
        rows = convergence_curve(snapshots, ref_work)
        (out / "curves.csv").write_text(rows_to_csv(rows, CURVE_COLUMNS))
    doc = {**report.to_dict(), "inputs": {"old": old, "ref": ref}, "scores": scores,
           "versions": {"refcolor": __version__, "torch": torch.__version__}}
    _write_json(out / "report.json", doc)
    return {"result": result, "report": report, "scores": scores}


def colorize(argv: list[str] | None = None) -> int:
    parser = _colorize_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        cfg = resolve_config(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        parser.error(str(exc))
    if args.snapshot_stride < 1:
        parser.error("--snapshot-stride must be >= 1")
    for p in (args.old, args.ref):
        if not p.exists():
            parser.error(f"{p} does not exist")
    try:
        ext = load_extractors(args)
        job = colorize_job(args.old, args.ref, args.out, cfg, ext, args.emit_curves, args.snapshot_stride)
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        logger.error("colorize failed: %s", exc)
        if args.verbose:
            traceback.print_exc()
        return 1
    logger.info("wrote %s (CH KL %.4f, Hellinger %.4f)", args.out / "result.png",
                job["scores"]["ch_kl"], job["scores"]["ch_hellinger"])
    return 0


def _grid_from_args(args: argparse.Namespace) -> dict:
    grid: dict = {}
    if args.grid:
        grid = json.loads(args.grid.read_text())
    pairs = [tuple(map(Path, p)) for p in grid.get("pairs", [])] + [tuple(p) for p in args.pair]
    return {
        "pairs": pairs,
        "ablation": args.ablations or grid.get("ablations") or ["full"],
        "K": args.K_grid or grid.get("K") or [None],
        "T": args.T_grid or grid.get("T") or [None],
        "L": args.L_grid or grid.get("L") or [None],
    }


def _read_external(path: Path | None) -> dict[str, dict]:
    if path is None:
        return {}
    with open(path, newline="") as fh:
        return {row["cell"]: row for row in csv.DictReader(fh)}


def run_cell(cell: str, pair_idx: int, old: Path, ref: Path, out: Path, cfg: RunConfig, ext: Extractors) -> dict:
    row = {"cell": cell, "pair": pair_idx, "old": str(old), "ref": str(ref), "ablation": cfg.ablation,
           "K": cfg.K, "T": cfg.T, "L": cfg.L}
    try:
        job = colorize_job(old, ref, out / cell, cfg, ext)
        report = job["report"]
        O, _ = prepare_inputs(load_image(old), load_image(ref), cfg)
        with torch.no_grad():
            lp = perceptual_loss(to_tensor(job["result"]), structure_of(ext, O), ext)
        row.update(status="ok", loss_p=float(lp), wall_time=round(report.wall_time, 3), **job["scores"])
    except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the grid
        logger.error("cell %s failed: %s", cell, exc)
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return row


def ablate(argv: list[str] | None = None) -> int:
    parser = _ablate_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        grid = _grid_from_args(args)
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(str(exc))
    if not grid["pairs"]:
        parser.error("no image pairs given (use --pair OLD REF or a grid file)")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    cells = []
    try:
        for pi, (old, ref) in enumerate(grid["pairs"]):
            for abl, K, T, L in itertools.product(grid["ablation"], grid["K"], grid["T"], grid["L"]):
                cfg = resolve_config(args, {"ablation": abl, "K": K, "T": T, "L": L})
                name = f"p{pi}_{cfg.ablation}_K{cfg.K}_T{cfg.T}_L{cfg.L}"
                cells.append((name, pi, Path(old), Path(ref), cfg))
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        parser.error(str(exc))
    try:
        ext = load_extractors(args)
    except Exception as exc:  # noqa: BLE001
        logger.error("could not load extractors: %s", exc)
        return 1
    args.out.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        rows = list(pool.map(lambda c: run_cell(c[0], c[1], c[2], c[3], args.out, c[4], ext), cells))
    external = _read_external(args.external)
    for row in rows:
        ext_row = external.get(row["cell"], {})
        for key in ("sifid", "fid"):
            if ext_row.get(key) not in (None, ""):
                row[key] = float(ext_row[key])
    (args.out / "ablation.csv").write_text(rows_to_csv(rows, ABLATION_COLUMNS))
    ok_rows = [r for r in rows if r["status"] == "ok"]
    defaults = dataclasses.asdict(RunConfig())
    table = format_ablation_table(ok_rows, {a: defaults[a] for a in ("ablation", "K", "T", "L")})
    (args.out / "ablation_table.txt").write_text(table + "\n")
    print(table)
    failed = len(rows) - len(ok_rows)
    if failed:
        logger.warning("%d of %d cells failed; see ablation.csv", failed, len(rows))
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    commands = {"colorize": colorize, "ablate": ablate}
    if not argv or argv[0] not in commands:
        if argv and argv[0] in ("-V", "--version"):
            print(__version__)
            return 0
        print("usage: refcolor {colorize,ablate} [options]  (see refcolor <command> --help)", file=sys.stderr)
        return 2
    return commands[argv[0]](argv[1:])


if __name__ == "__main__":
    sys.exit(main())
