"""Command-line interface.

Subcommands: ``synth``, ``obfuscate``, ``train``, ``eval-reid``, ``eval-attr``
and ``sweep``. Settings resolve as command-line flags > ``--config`` JSON
file > built-in defaults; every command writes the resolved settings to
``<out>/config.json``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .attribute import AttrRow, render_attr_table, write_attr_csv
from .dataset import ManifestError, synth_generate
from .dp_mechanism import sensitivity
from .embedding import load_checkpoint, LinearEmbedder, save_checkpoint
from .experiment import (
    ConfigError,
    RunConfig,
    evaluate_attributes,
    evaluate_reid,
    format_epsilon,
    load_cell_data,
    load_dataset,
    obfuscate_images,
    parse_epsilon,
    run_cell,
    train_embedder,
)
from .retrieval import ReidRow, render_reid_table, write_reid_csv

log = logging.getLogger("dpreid")

OBFUSCATION_META = "obfuscation.json"


def _csv_list(conv):
    def parse(text):
        return [conv(v) for v in text.split(",") if v.strip()]
    return parse


def _grid(text):
    pairs = []
    for item in text.split(","):
        b, _, c = item.strip().partition("x")
        if not c:
            raise argparse.ArgumentTypeError(f"grid entries look like 2x32, got {item!r}")
        pairs.append([int(b), int(c)])
    return pairs


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False, argument_default=S)
    common.add_argument("--config", help="JSON file with a flat settings object")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="parallel sweep cells")
    common.add_argument("--strict", action="store_true", default=S,
                        help="calibrate noise to the worst-case L1 distance")
    common.add_argument("--midpoint", action="store_true", default=S,
                        help="quantise to bin midpoints instead of bin floors")
    common.add_argument("--out", help="output directory")
    common.add_argument("--dataset", help="dataset root directory")
    common.add_argument("-v", "--verbose", action="store_true", default=False)

    embed = argparse.ArgumentParser(add_help=False, argument_default=S)
    embed.add_argument("--embed-dim", dest="embed_dim", type=int)
    embed.add_argument("--grid-side", dest="grid_side", type=int)
    embed.add_argument("--bins", type=int)
    embed.add_argument("--margin", type=float)
    embed.add_argument("--P", dest="P", type=int, help="classes per batch")
    embed.add_argument("--K", dest="K", type=int, help="instances per class")
    embed.add_argument("--lr", type=float)
    embed.add_argument("--epochs", type=int)
    embed.add_argument("--negative", choices=["hardest", "random"])

    clf = argparse.ArgumentParser(add_help=False, argument_default=S)
    clf.add_argument("--tasks", type=_csv_list(str))
    clf.add_argument("--clf-lr", dest="clf_lr", type=float)
    clf.add_argument("--clf-epochs", dest="clf_epochs", type=int)

    cam = argparse.ArgumentParser(add_help=False, argument_default=S)
    cam.add_argument("--no-camera-aware", dest="camera_aware", action="store_false", default=S,
                     help="centroids use all gallery samples, including the query's camera")

    cell = argparse.ArgumentParser(add_help=False, argument_default=S)
    cell.add_argument("-b", type=int, help="pixelisation block side")
    cell.add_argument("-c", type=int, help="quantisation bin width")
    cell.add_argument("--epsilon", help="privacy budget, or 'none' to disable noise")

    parser = argparse.ArgumentParser(prog="dpreid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    for name, typ in [("n-ids", int), ("n-cameras", int), ("imgs-per-pair", int), ("width", int),
                      ("height", int), ("train-fraction", float), ("n-age", int),
                      ("n-ethnicity", int)]:
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=typ, default=S)

    sub.add_parser("obfuscate", parents=[common, cell], help="write an obfuscated copy of a dataset")
    sub.add_parser("train", parents=[common, embed], help="train a CTL embedder on the train split")
    p = sub.add_parser("eval-reid", parents=[common, embed, cam], help="evaluate re-identification")
    p.add_argument("--checkpoint", default=S, help="embedder checkpoint (untrained if omitted)")
    sub.add_parser("eval-attr", parents=[common, clf], help="evaluate adverse attribute classifiers")
    p = sub.add_parser("sweep", parents=[common, embed, clf, cam], help="run a (b, c, epsilon) sweep")
    p.add_argument("--grid", type=_grid, default=S, help="comma list like 1x64,2x32,4x16")
    p.add_argument("--epsilons", type=_csv_list(str), default=S, help="comma list, e.g. 1e-3,1,none")
    p.add_argument("--ablation", action="store_true", default=S,
                   help="vary b with c=1 and c with b=1, noise disabled")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config file must contain a JSON object")
    flags = {k: v for k, v in vars(args).items() if k not in ("config", "command", "verbose")}
    values.update(flags)
    if "epsilon" in values and values["epsilon"] is not None:
        values["epsilon"] = format_epsilon(parse_epsilon(values["epsilon"]))
    if "epsilons" in values:
        values["epsilons"] = [format_epsilon(parse_epsilon(e)) for e in values["epsilons"]]
    return RunConfig.from_dict(values)


def _require(cfg, *names):
    for n in names:
        if getattr(cfg, n) in (None, ""):
            raise ConfigError(f"--{n} is required")


def _out_dir(cfg) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")
    return out


def _dataset_meta(root) -> dict:
    p = Path(root) / OBFUSCATION_META
    if p.exists():
        return json.loads(p.read_text())
    return {"epsilon": "none", "b": 1, "c": 1}


# --- commands ----------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> int:
    _require(cfg, "out")
    out = Path(cfg.out)
    try:
        synth_generate(out, cfg.n_ids, cfg.n_cameras, cfg.imgs_per_pair, cfg.width, cfg.height,
                       cfg.seed, cfg.train_fraction, cfg.n_age, cfg.n_ethnicity)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.dump(out / "config.json")
    log.info("wrote synthetic dataset to %s", out)
    return 0


def cmd_obfuscate(cfg: RunConfig) -> int:
    _require(cfg, "dataset", "out")
    root = Path(cfg.dataset)
    persons, at, ae = load_dataset(root, cfg)
    manifests = [m for m in (persons, at, ae) if m is not None]
    params = cfg.privacy()
    sens = sensitivity(manifests[0].width, manifests[0].height, params.b, params.c)
    out = _out_dir(cfg)
    paths = sorted({r.image_path for m in manifests for r in m.records})
    clean = manifests[0].load_images([_Rec(p) for p in paths])
    noised = obfuscate_images(clean, paths, params, cfg.seed)
    from .image_core import write_image

    for rel, img in zip(paths, noised):
        dst = out / rel
        dst.parent.mkdir(parents=True, exist_ok=True)
        write_image(dst, img)
    for name in ("persons.csv", "attributes.csv", "attributes_train.csv", "attributes_test.csv"):
        if (root / name).exists():
            shutil.copyfile(root / name, out / name)
    meta = {
        "epsilon": format_epsilon(params.epsilon),
        "b": params.b,
        "c": params.c,
        "strict": params.strict,
        "midpoint": params.midpoint,
        "seed": cfg.seed,
        "delta_f": sens.delta_f,
        "strict_delta_f": sens.strict_delta_f,
        "noise_scale": params.scale(manifests[0].width, manifests[0].height),
        "source": str(cfg.dataset),
    }
    (out / OBFUSCATION_META).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("obfuscated %d images into %s", len(paths), out)
    return 0


class _Rec:
    def __init__(self, path):
        self.image_path = path


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "dataset", "out")
    persons, _, _ = load_dataset(cfg.dataset, cfg)
    if persons is None or not persons.split("train"):
        raise ConfigError(f"{cfg.dataset} has no training records")
    recs = persons.split("train")
    out = _out_dir(cfg)
    embedder, trace = train_embedder(persons.load_images(recs), [r.person_id for r in recs], cfg)
    save_checkpoint(out / "embedder.csv", embedder)
    with open(out / "loss_trace.csv", "w") as fh:
        fh.write("epoch,mean_loss\n")
        for i, v in enumerate(trace):
            fh.write(f"{i},{v!r}\n")
    return 0


def cmd_eval_reid(cfg: RunConfig) -> int:
    _require(cfg, "dataset", "out")
    persons, _, _ = load_dataset(cfg.dataset, cfg)
    if persons is None:
        raise ConfigError(f"{cfg.dataset} has no persons.csv")
    query, gallery = persons.split("query"), persons.split("gallery")
    if not query or not gallery:
        raise ConfigError("dataset needs non-empty query and gallery splits")
    if cfg.checkpoint:
        embedder = load_checkpoint(cfg.checkpoint)
    else:
        embedder = LinearEmbedder.random(cfg.embed_dim, cfg.grid_side, cfg.bins, seed=cfg.seed)
    meta = _dataset_meta(cfg.dataset)
    out = _out_dir(cfg)
    rows = evaluate_reid(embedder, persons.load_images(query), query, persons.load_images(gallery),
                         gallery, cfg, meta["epsilon"], meta["b"], meta["c"])
    write_reid_csv(rows, out / "reid_report.csv")
    (out / "reid_table.txt").write_text(render_reid_table(rows, _caption(rows[0])))
    return 0


def cmd_eval_attr(cfg: RunConfig) -> int:
    _require(cfg, "dataset", "out")
    _, at, ae = load_dataset(cfg.dataset, cfg)
    if at is None or ae is None:
        raise ConfigError(f"{cfg.dataset} has no attribute manifests")
    meta = _dataset_meta(cfg.dataset)
    out = _out_dir(cfg)
    rows = evaluate_attributes(at.load_images(at.attributes), at.attributes,
                               ae.load_images(ae.attributes), ae.attributes, cfg,
                               at.cardinality, meta["epsilon"], meta["b"], meta["c"])
    write_attr_csv(rows, out / "attr_report.csv")
    if rows:
        (out / "attr_table.txt").write_text(render_attr_table(rows, _caption(rows[0], "attribute accuracy")))
    return 0


def _caption(row, what="reID results"):
    return (f"Synthetic {what}, b={row.b}, c={row.c}, delta_f={row.delta_f:.0f} "
            f"(strict delta_f={row.strict_delta_f:.0f})")


def _sweep_worker(args):
    root, cfg_dict, b, c, eps = args
    cfg = RunConfig.from_dict(cfg_dict)
    return _run_sweep_cell(load_cell_data(root, cfg), cfg, b, c, eps)


def _run_sweep_cell(data, cfg, b, c, eps):
    try:
        reid, attr, trace = run_cell(data, cfg, b, c, eps)
        return b, c, eps, reid, attr, trace, None
    except Exception as exc:  # one bad cell must not sink the sweep
        return b, c, eps, [], [], [], f"{type(exc).__name__}: {exc}"


def cmd_sweep(cfg: RunConfig) -> int:
    _require(cfg, "dataset", "out")
    data = load_cell_data(cfg.dataset, cfg)
    any_manifest = next(m for m in (data["persons"], data["attr_train"]) if m is not None)
    grid = cfg.sweep_grid(any_manifest.width, any_manifest.height)
    epsilons = cfg.sweep_epsilons()
    out = _out_dir(cfg)
    cells = [(b, c, e) for b, c in grid for e in epsilons]

    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_sweep_worker,
                                    [(cfg.dataset, cfg.to_dict(), b, c, e) for b, c, e in cells]))
    else:
        results = [_run_sweep_cell(data, cfg, b, c, e) for b, c, e in cells]

    reid_rows, attr_rows, failures = [], [], []
    for b, c, eps, reid, attr, trace, err in results:
        cell_dir = out / "cells" / f"b{b}_c{c}_eps{format_epsilon(eps)}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        if err:
            failures.append((b, c, eps, err))
            (cell_dir / "error.txt").write_text(err + "\n")
            log.error("cell b=%d c=%d eps=%s failed: %s", b, c, format_epsilon(eps), err)
            continue
        write_reid_csv(reid, cell_dir / "reid.csv")
        write_attr_csv(attr, cell_dir / "attr.csv")
        with open(cell_dir / "loss_trace.csv", "w") as fh:
            fh.write("epoch,mean_loss\n")
            for i, v in enumerate(trace):
                fh.write(f"{i},{v!r}\n")
        reid_rows += reid
        attr_rows += attr

    write_reid_csv(reid_rows, out / "reid_report.csv")
    write_attr_csv(attr_rows, out / "attr_report.csv")
    (out / "report.txt").write_text(render_sweep_report(reid_rows, attr_rows, grid, cfg, failures))
    return 2 if failures else 0


def render_sweep_report(reid_rows, attr_rows, grid, cfg, failures=()) -> str:
    parts = []
    if cfg.ablation:
        key = lambda r: f"b={r.b}, c={r.c}"  # noqa: E731
        if reid_rows:
            lines = ["Synthetic reID results, varying b and c (noise disabled)",
                     f"{'Parameters':>14} | {'reg mAP%':>9} {'reg Top1%':>9} | {'cen mAP%':>9} {'cen Top1%':>9}"]
            by = {}
            for r in reid_rows:
                if r.mode == "regular" or r.camera_aware:
                    by.setdefault(key(r), {})[r.mode] = r
            for k, m in by.items():
                reg, cen = m.get("regular"), m.get("centroid")
                lines.append(f"{k:>14} | {reg.mAP:>8.1f}% {reg.top1:>8.1f}% | {cen.mAP:>8.1f}% {cen.top1:>8.1f}%")
            parts.append("\n".join(lines) + "\n")
        if attr_rows:
            parts.append(render_attr_table(attr_rows, "Synthetic attribute accuracy, varying b and c",
                                           row_key=key, row_title="Parameters"))
    else:
        for b, c in grid:
            rr = [r for r in reid_rows if (r.b, r.c) == (b, c)]
            ar = [r for r in attr_rows if (r.b, r.c) == (b, c)]
            if rr:
                parts.append(render_reid_table(rr, _caption(rr[0])))
            if ar:
                parts.append(render_attr_table(ar, _caption(ar[0], "attribute accuracy")))
    for b, c, eps, err in failures:
        parts.append(f"FAILED cell b={b} c={c} epsilon={format_epsilon(eps)}: {err}\n")
    return "\n".join(parts)


COMMANDS = {
    "synth": cmd_synth,
    "obfuscate": cmd_obfuscate,
    "train": cmd_train,
    "eval-reid": cmd_eval_reid,
    "eval-attr": cmd_eval_attr,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ManifestError) as exc:
        print(f"dpreid: configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"dpreid: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
