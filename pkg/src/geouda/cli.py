"""Command-line entry point.

One binary, five subcommands: `encode` (coordinate encodings from a text
file), `gen-data` (synthetic dataset), `train`, `eval`, `ablate`. Every run
that owns an output directory writes a resolved config echo there, so the run
can be reproduced from its artifacts alone.

Exit codes: 0 success, 1 usage problem, 2 configuration problem, 3 runtime
failure. Each failure prints a one-line diagnostic to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
import yaml

from .ablation import AblationCell, ablate, apply_deltas, standard_grid
from .config import ConfigError, RunConfig, parse_config, write_config_echo
from .data import SyntheticConfig, generate_synthetic, load_dataset
from .encoding import EncodingConfig, RawCoordinate, encode_supervision
from .metrics import write_iou_csv
from .network import load_checkpoint, model_from_checkpoint
from .training import evaluate, fit

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

ECHO_NAME = "config_echo.yaml"


def _load_run_config(args) -> RunConfig:
    cfg = parse_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed).resolved()
    if getattr(args, "data", None):
        cfg = dataclasses.replace(cfg, data_root=args.data)
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def _require(value: str | None, key: str, flag: str) -> str:
    if not value:
        raise ConfigError(f"missing required key '{key}': set it in the config or pass {flag}")
    return value


def _open_dataset(root: str, num_classes: int, in_bands: int, merge: int | None):
    return load_dataset(
        root,
        expected_bands=in_bands,
        num_classes=num_classes - 1,
        merge_labels_above=merge,
    )


def _echo(cfg: RunConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config_echo(cfg, out_dir / ECHO_NAME)


def cmd_encode(args) -> int:
    origin_lon, origin_lat = _parse_origin(args.origin)
    enc = EncodingConfig(
        dim=args.dim,
        base_frequency=args.base_frequency,
        noise_radius_m=args.noise_radius_m,
        origin_lon_m=origin_lon,
        origin_lat_m=origin_lat,
    )
    rng = np.random.default_rng(args.seed)
    lines = []
    for lineno, raw_line in enumerate(Path(args.coords).read_text().splitlines(), start=1):
        stripped = raw_line.strip()
        if not stripped:
            continue
        parts = stripped.split()
        if len(parts) != 2:
            raise ValueError(f"{args.coords}:{lineno}: expected 'lon_m lat_m', got {stripped!r}")
        vec = encode_supervision(
            RawCoordinate(float(parts[0]), float(parts[1])), enc, rng
        )
        lines.append(",".join(repr(float(v)) for v in vec))
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _parse_origin(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError(f"--origin expects 'lon_m,lat_m', got {text!r}")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError as exc:
        raise ConfigError(f"--origin expects two numbers, got {text!r}") from exc


# gen-data flag name -> SyntheticConfig field; kept explicit so --help reads well
_GEN_FLAGS = [
    ("--num-source-domains", "num_source_domains", int),
    ("--num-target-domains", "num_target_domains", int),
    ("--patches-per-domain", "patches_per_domain", int),
    ("--image-size", "image_size", int),
    ("--num-classes", "num_classes", int),
    ("--radiometric-shift", "radiometric_shift", float),
    ("--band-mixing", "band_mixing", float),
    ("--pixel-noise", "pixel_noise", float),
    ("--position-gain", "position_gain", float),
    ("--seasonal-gain", "seasonal_gain", float),
    ("--box-size-m", "box_size_m", float),
    ("--box-spacing-m", "box_spacing_m", float),
    ("--origin-lon-m", "origin_lon_m", float),
    ("--origin-lat-m", "origin_lat_m", float),
]


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    overrides = {
        field: getattr(args, field)
        for _, field, _ in _GEN_FLAGS
        if getattr(args, field) is not None
    }
    if args.class_fractions:
        overrides["class_fractions"] = tuple(
            float(v) for v in args.class_fractions.split(",")
        )
    try:
        synthetic = dataclasses.replace(cfg.synthetic, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg = dataclasses.replace(cfg, synthetic=synthetic)
    out_dir = Path(_require(cfg.out_dir, "out_dir", "--out"))
    generate_synthetic(cfg.synthetic, out_dir)
    _echo(cfg, out_dir)
    n = (cfg.synthetic.num_source_domains + cfg.synthetic.num_target_domains)
    print(f"wrote {n} domains x {cfg.synthetic.patches_per_domain} patches to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    data_root = _require(cfg.data_root, "data_root", "--data")
    out_dir = Path(_require(cfg.out_dir, "out_dir", "--out"))
    dataset = _open_dataset(
        data_root, cfg.train.network.num_classes, cfg.train.network.in_bands,
        args.merge_labels_above,
    )
    _echo(cfg, out_dir)
    result = fit(cfg.train, dataset, out_dir=out_dir)
    print(
        f"trained {result.epochs_run} epochs ({result.param_count} parameters), "
        f"best val mIoU {result.best_val_miou:.4f} at epoch {result.best_epoch}; "
        f"artifacts in {out_dir}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(payload)
    dataset = _open_dataset(
        args.data, model.cfg.num_classes, model.cfg.in_bands, args.merge_labels_above
    )
    domains = args.domains.split(",") if args.domains else None
    report, _ = evaluate(model, dataset, domains=domains, labels_dir=args.labels)
    for c, (value, ok) in enumerate(zip(report.per_class, report.valid)):
        print(f"class_{c}: {value:.6f}" if ok else f"class_{c}: (not observed)")
    print(f"miou: {report.miou:.6f}")
    if args.out:
        write_iou_csv(args.out, report)
        print(f"wrote {args.out}")
    return EXIT_OK


def _parse_grid(path: str) -> list[AblationCell]:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in grid file {path}: {exc}") from exc
    if doc is None:
        raise ConfigError(f"grid file {path} is empty")
    if not isinstance(doc, list):
        raise ConfigError(f"grid file {path} must be a list of cells")
    cells = []
    for i, entry in enumerate(doc):
        if not isinstance(entry, dict) or "id" not in entry:
            raise ConfigError(f"grid cell {i} must be a mapping with an 'id'")
        unknown = set(entry) - {"id", "deltas"}
        if unknown:
            raise ConfigError(f"grid cell {entry['id']!r}: unknown keys {sorted(unknown)}")
        deltas = entry.get("deltas") or {}
        if not isinstance(deltas, dict):
            raise ConfigError(f"grid cell {entry['id']!r}: 'deltas' must be a mapping")
        converted = tuple(
            (k, tuple(v) if isinstance(v, list) else v) for k, v in deltas.items()
        )
        try:
            cells.append(AblationCell(str(entry["id"]), converted))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return cells


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    data_root = _require(cfg.data_root, "data_root", "--data")
    out_dir = Path(_require(cfg.out_dir, "out_dir", "--out"))
    cells = _parse_grid(args.grid) if args.grid else standard_grid()
    for cell in cells:  # surface bad deltas as config errors before training
        try:
            apply_deltas(cfg.train, dict(cell.deltas))
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"grid cell {cell.cell_id!r}: {exc}") from exc
    dataset = _open_dataset(
        data_root, cfg.train.network.num_classes, cfg.train.network.in_bands,
        args.merge_labels_above,
    )
    _echo(cfg, out_dir)
    rows = ablate(cfg.train, cells, dataset, out_dir=out_dir)
    failed = 0
    for row in rows:
        if row["error"]:
            failed += 1
            print(f"{row['cell_id']}: FAILED ({row['error']})")
        else:
            print(
                f"{row['cell_id']}: miou {float(row['miou']):.4f}, "
                f"params {row['params']}, epochs {row['epochs_run']}"
            )
    print(f"wrote {out_dir / 'results.csv'} ({len(rows) - failed}/{len(rows)} cells ok)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geouda",
        description="Geo-supervised domain adaptation for semantic segmentation.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p_enc = sub.add_parser("encode", help="encode 'lon_m lat_m' pairs from a text file")
    p_enc.add_argument("coords", help="input file, one 'lon_m lat_m' pair per line")
    p_enc.add_argument("--dim", type=int, default=EncodingConfig().dim)
    p_enc.add_argument("--base-frequency", type=float, default=EncodingConfig().base_frequency)
    p_enc.add_argument("--noise-radius-m", type=float, default=EncodingConfig().noise_radius_m)
    p_enc.add_argument(
        "--origin",
        default=f"{EncodingConfig().origin_lon_m},{EncodingConfig().origin_lat_m}",
        help="centering origin as 'lon_m,lat_m'",
    )
    p_enc.add_argument("--seed", type=int, default=0, help="noise stream seed")
    p_enc.add_argument("--out", help="output file (default: stdout)")
    p_enc.set_defaults(func=cmd_encode)

    p_gen = sub.add_parser("gen-data", help="generate a synthetic geo-tagged dataset")
    p_gen.add_argument("--config", help="run config file (synthetic section)")
    p_gen.add_argument("--out", help="dataset root to create")
    p_gen.add_argument("--seed", type=int, help="override every configured seed")
    for flag, field, ftype in _GEN_FLAGS:
        p_gen.add_argument(flag, dest=field, type=ftype, default=None)
    p_gen.add_argument(
        "--class-fractions", default=None, help="comma-separated positive fractions"
    )
    p_gen.set_defaults(func=cmd_gen_data)

    p_train = sub.add_parser("train", help="train on a dataset root")
    p_train.add_argument("--config", help="run config file")
    p_train.add_argument("--data", help="dataset root (overrides config data_root)")
    p_train.add_argument("--out", help="output directory (overrides config out_dir)")
    p_train.add_argument("--seed", type=int, help="override every configured seed")
    p_train.add_argument(
        "--merge-labels-above", type=int, default=None,
        help="clamp label values above this index into it on load",
    )
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint with four-crop inference")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True, help="dataset root")
    p_eval.add_argument(
        "--labels", default=None,
        help="held-out label directory (default: <data>/eval_labels)",
    )
    p_eval.add_argument("--domains", default=None, help="comma-separated domain names")
    p_eval.add_argument("--out", help="write the per-class IoU table to this CSV")
    p_eval.add_argument("--merge-labels-above", type=int, default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate", help="run a grid of config deltas")
    p_abl.add_argument("--config", help="base run config file")
    p_abl.add_argument("--grid", help="YAML list of cells (default: the standard grid)")
    p_abl.add_argument("--data", help="dataset root (overrides config data_root)")
    p_abl.add_argument("--out", help="output directory (overrides config out_dir)")
    p_abl.add_argument("--seed", type=int, help="override every configured seed")
    p_abl.add_argument("--merge-labels-above", type=int, default=None)
    p_abl.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage problems; fold the
        # latter into this tool's usage code
        return EXIT_OK if not exc.code else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"geouda: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"geouda: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
