"""Command-line entry point wiring the pipeline modules into subcommands.

Every subcommand accepts ``--config FILE`` (flat ``key = value`` lines)
whose entries fill in any option not given explicitly on the command
line; explicit flags always win. Exit codes: 0 success, 1 validation or
usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from . import __version__
from .errors import IOFailure, ValidationError
from .metrics import BOOTSTRAP_ITERATIONS, bootstrap_ci, macro_dice, per_class_report
from .nifti import read_volume, write_volume
from .postproc import connected_components, filter_small_components, stats_to_rows
from .pseudoct import DEFAULT_MIN_LUNG_VOLUME, DEFAULT_THRESHOLD_FRACTION, find_background_and_lung, make_pseudo_ct
from .quadrants import DEFAULT_BANDS, DEFAULT_BODY_THRESHOLD, quadrant_labelmap
from .schema import LabelSchema, builtin_schema, ct_reference_schema, validate_labels
from .stitch import stitch
from .tiler import (
    DEFAULT_MEMORY_BUDGET,
    DEFAULT_OVERLAP,
    DEFAULT_PATCH_SHAPE,
    FusionConfig,
    fuse_scored,
    pad_to_patch,
    parse_oracle_spec,
    plan_tiles,
)
from .vertebrae import detect_anomalies, instance_label
from .volume import crop, resample, same_grid

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_config(path: str) -> dict[str, str]:
    try:
        text = open(path).read()
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _convert_like(raw: str, template):
    if isinstance(template, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"cannot parse boolean config value {raw!r}")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        kind = type(template[0]) if template else float
        return tuple(kind(p) for p in parts)
    return raw


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults <- config file <- explicit flags."""
    cfg = {"seed": 0, "threads": 0, **defaults}
    file_cfg = _load_config(args.config) if getattr(args, "config", None) else {}
    for k, v in file_cfg.items():
        if k in cfg:
            cfg[k] = _convert_like(v, defaults[k])
        else:
            logger.warning("config: ignoring unknown key %r", k)
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _parse_bytes(text) -> int:
    if isinstance(text, int):
        return text
    s = str(text).strip().upper()
    mult = 1
    if s and s[-1] in "KMG":
        mult = {"K": 1 << 10, "M": 1 << 20, "G": 1 << 30}[s[-1]]
        s = s[:-1]
    try:
        return int(float(s) * mult)
    except ValueError:
        raise ValidationError(f"cannot parse byte size {text!r}") from None


def _triple(text, kind=int) -> tuple:
    parts = [p for p in str(text).replace(",", " ").split() if p]
    if len(parts) != 3:
        raise ValidationError(f"expected 3 comma-separated values, got {text!r}")
    return tuple(kind(p) for p in parts)


def _schema_from(path: str | None) -> LabelSchema:
    return LabelSchema.from_json(path) if path else builtin_schema()


def _write_report(path: str, results: dict, cfg: dict, catalog_version: str) -> None:
    payload = {
        "tool": "torsoseg",
        "version": __version__,
        "catalog_version": catalog_version,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()},
        "results": results,
    }
    try:
        with open(path, "w") as f:
            json.dump(payload, f, indent=1)
            f.write("\n")
    except OSError as exc:
        raise IOFailure(f"cannot write report {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_stitch(args) -> int:
    cfg = _resolve(args, {"spacing": None, "kind": "auto"})
    kind = None if cfg["kind"] == "auto" else cfg["kind"]
    stacks = [read_volume(p, kind=kind) for p in args.stacks]
    spacing = _triple(cfg["spacing"], float) if cfg["spacing"] else None
    out = stitch(stacks, reference_spacing=spacing)
    write_volume(out, args.out)
    logger.info("stitched %d stacks -> %s %s", len(stacks), args.out, out.shape)
    return 0


def _cmd_pseudoct(args) -> int:
    cfg = _resolve(
        args,
        {
            "threshold_fraction": DEFAULT_THRESHOLD_FRACTION,
            "min_volume_mm3": DEFAULT_MIN_LUNG_VOLUME,
        },
    )
    water = read_volume(args.water, kind="image")
    inphase = read_volume(args.inphase, kind="image")
    muscle = read_volume(args.muscle, kind="labelmap")
    bglung = find_background_and_lung(
        inphase, threshold_fraction=cfg["threshold_fraction"], min_volume=cfg["min_volume_mm3"]
    )
    out = make_pseudo_ct(water, muscle, bglung)
    write_volume(out, args.out)
    if args.bglung_out:
        write_volume(bglung, args.bglung_out)
    return 0


def _cmd_postproc(args) -> int:
    cfg = _resolve(args, {"connectivity": 26, "skip_filter": False})
    labels = read_volume(args.labels, kind="labelmap")
    schema = _schema_from(args.schema)
    out = labels if cfg["skip_filter"] else filter_small_components(
        labels, schema, connectivity=cfg["connectivity"]
    )
    write_volume(out, args.out)

    if args.stats_csv:
        rows = []
        present = np.unique(out.data)
        for cid in (int(c) for c in present if c != 0):
            _, stats = connected_components(
                out.with_data(out.data == cid, kind="labelmap"),
                connectivity=cfg["connectivity"],
                class_id=cid,
            )
            rows.extend(stats_to_rows(stats))
        _write_csv(args.stats_csv, rows)
    return 0


def _cmd_quadrants(args) -> int:
    cfg = _resolve(
        args, {"bands": DEFAULT_BANDS, "threshold_fraction": DEFAULT_BODY_THRESHOLD}
    )
    inphase = read_volume(args.inphase, kind="image")
    out = quadrant_labelmap(
        inphase, bands=cfg["bands"], threshold_fraction=cfg["threshold_fraction"]
    )
    write_volume(out, args.out)
    return 0


def _cmd_vertebrae(args) -> int:
    cfg = _resolve(args, {"start_level": "C3", "min_volume_mm3": 500.0})
    body = read_volume(args.body, kind="labelmap")
    ivd = read_volume(args.ivd, kind="labelmap") if args.ivd else None
    instances, report = instance_label(
        body, ivd=ivd, start_level=cfg["start_level"], min_volume=cfg["min_volume_mm3"]
    )
    report = detect_anomalies(instances, report)
    write_volume(instances, args.out)
    if args.report:
        _write_report(args.report, report.to_dict(), cfg, builtin_schema().version)
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolve(
        args,
        {
            "bootstrap_iterations": BOOTSTRAP_ITERATIONS,
            "level": 0.95,
            "seed": 0,
        },
    )
    if len(args.pred) != len(args.ref):
        raise ValidationError("--pred and --ref must be given the same number of times")
    schema = _schema_from(args.schema)

    subjects = []
    per_class_values: dict[int, list[float]] = {c.id: [] for c in schema.classes}
    macro_values = []
    for pred_path, ref_path in zip(args.pred, args.ref):
        pred = read_volume(pred_path, kind="labelmap")
        ref = read_volume(ref_path, kind="labelmap")
        report = per_class_report(pred, ref, schema)
        macro = macro_dice(report)
        if macro is not None:
            macro_values.append(macro)
        for m in report:
            if m.dice is not None:
                per_class_values[m.class_id].append(m.dice)
        subjects.append(
            {
                "pred": str(pred_path),
                "ref": str(ref_path),
                "macro_dice": macro,
                "classes": [
                    {
                        "class_id": m.class_id,
                        "name": schema[m.class_id].name,
                        "dice": m.dice,
                        "assd_mm": m.assd,
                        "pred_volume_mm3": m.pred_volume,
                        "ref_volume_mm3": m.ref_volume,
                        "status": m.status,
                    }
                    for m in report
                ],
            }
        )

    def ci_dict(values):
        if not values:
            return None
        ci = bootstrap_ci(
            values,
            iterations=cfg["bootstrap_iterations"],
            level=cfg["level"],
            seed=cfg["seed"],
        )
        return {"mean": ci.mean, "lo": ci.lo, "hi": ci.hi, "iterations": ci.iterations,
                "level": ci.level, "seed": ci.seed, "method": "percentile"}

    class_means = [float(np.mean(v)) for v in per_class_values.values() if v]
    results = {
        "subjects": subjects,
        # Aggregation A: per-subject macro Dice, bootstrapped over subjects.
        "macro_over_subjects": {
            "mean": float(np.mean(macro_values)) if macro_values else None,
            "sd": float(np.std(macro_values, ddof=1)) if len(macro_values) > 1 else 0.0,
            "bootstrap": ci_dict(macro_values),
        },
        # Aggregation B: per-class means over subjects, then averaged.
        "macro_over_classes": {
            "mean": float(np.mean(class_means)) if class_means else None,
            "sd": float(np.std(class_means, ddof=1)) if len(class_means) > 1 else 0.0,
        },
        "per_class": [
            {
                "class_id": cid,
                "name": schema[cid].name,
                "n_subjects": len(vals),
                "dice_mean": float(np.mean(vals)) if vals else None,
                "bootstrap": ci_dict(vals),
            }
            for cid, vals in per_class_values.items()
        ],
    }
    _write_report(args.report, results, cfg, schema.version)
    if args.csv:
        fields = [
            "subject", "class_id", "name", "dice", "assd_mm",
            "pred_volume_mm3", "ref_volume_mm3", "status",
            "macro_mean", "macro_sd", "ci_lo", "ci_hi",
        ]
        rows = []
        for si, subj in enumerate(subjects):
            for m in subj["classes"]:
                rows.append({"subject": si, **m})
        summary = results["macro_over_subjects"]
        boot = summary["bootstrap"] or {}
        rows.append(
            {
                "subject": "summary",
                "name": "macro_dice_over_subjects",
                "status": "summary",
                "macro_mean": summary["mean"],
                "macro_sd": summary["sd"],
                "ci_lo": boot.get("lo"),
                "ci_hi": boot.get("hi"),
            }
        )
        _write_csv(args.csv, rows, fields)
    macro = results["macro_over_subjects"]["mean"]
    logger.info("eval: macro dice over subjects = %s", macro)
    return 0


def _cmd_infer(args) -> int:
    cfg = _resolve(
        args,
        {
            "patch": tuple(DEFAULT_PATCH_SHAPE),
            "overlap": DEFAULT_OVERLAP,
            "kernel": "gaussian",
            "memory_budget": str(DEFAULT_MEMORY_BUDGET),
            "precision": "float32",
            "num_classes": 0,
        },
    )
    patch = tuple(int(p) for p in cfg["patch"])
    image = read_volume(args.image, kind="image")
    oracle = parse_oracle_spec(args.oracle, num_classes=cfg["num_classes"] or None)

    aux = None
    if args.quadrants:
        q = read_volume(args.quadrants, kind="labelmap")
        if not same_grid(q, image):
            q = resample(q, image.grid, mode="nearest")
        aux = q

    padded, crop_slices = pad_to_patch(image, patch)
    if aux is not None:
        aux = pad_to_patch(aux, patch)[0]
    plan = plan_tiles(
        padded.shape, patch, overlap_fraction=cfg["overlap"], weight_kernel=cfg["kernel"]
    )
    fusion_cfg = FusionConfig(
        memory_budget=_parse_bytes(cfg["memory_budget"]),
        accumulator_precision=cfg["precision"],
    )
    labels, stats = fuse_scored(plan, padded, oracle, cfg=fusion_cfg, aux=aux)
    out = crop(labels, crop_slices)
    write_volume(out, args.out)
    logger.info(
        "infer: %d tiles, %d chunks of depth %d, peak accumulator %.1f MiB",
        stats.tiles_evaluated, stats.num_chunks, stats.chunk_depth,
        stats.peak_accumulator_bytes / (1 << 20),
    )
    close = getattr(oracle, "close", None)
    if close:
        close()
    return 0


def _cmd_schema(args) -> int:
    if args.schema_cmd == "dump":
        schema = ct_reference_schema() if args.ct else builtin_schema()
        schema.dump_json(args.out)
        return 0
    if args.schema_cmd == "diff":
        a = LabelSchema.from_json(args.left)
        b = LabelSchema.from_json(args.right)
        for line in a.diff(b):
            print(line)
        return 0
    if args.schema_cmd == "validate":
        labels = read_volume(args.labels, kind="labelmap")
        schema = _schema_from(args.schema)
        rep = validate_labels(labels, schema)
        print(json.dumps(
            {
                "unknown_ids": [{"id": i, "voxels": n} for i, n in rep.unknown],
                "classes": rep.classes,
                "empty_groups": rep.empty_groups,
            },
            indent=1,
        ))
        return 0
    raise ValidationError(f"unknown schema subcommand {args.schema_cmd!r}")


def _write_csv(path: str, rows: list[dict], fields: list[str] | None = None) -> None:
    if not rows:
        rows = [{}]
    if fields is None:
        fields = list(rows[0].keys())
    try:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fields, restval="")
            writer.writeheader()
            for r in rows:
                writer.writerow(r)
    except OSError as exc:
        raise IOFailure(f"cannot write CSV {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, default=None, help="seed for stochastic steps")
    common.add_argument("--threads", type=int, default=None,
                        help="worker cap for parallel sections")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="torsoseg", description=__doc__)
    parser.add_argument("--version", action="version", version=f"torsoseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("stitch", parents=[common], help="fuse overlapping stacks")
    p.add_argument("stacks", nargs="+", help="input stacks, inferior to superior or any order")
    p.add_argument("--out", required=True)
    p.add_argument("--spacing", help="output spacing a,b,c (default: finest input)")
    p.add_argument("--kind", choices=("auto", "image", "labelmap"),
                   help="treat inputs as images (blended) or labelmaps "
                        "(max-weight pick); auto infers from the datatype")
    p.set_defaults(func=_cmd_stitch)

    p = sub.add_parser("pseudoct", parents=[common], help="make a pseudo-CT water image")
    p.add_argument("--water", required=True)
    p.add_argument("--inphase", required=True)
    p.add_argument("--muscle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bglung-out", help="also write the background/lung labelmap")
    p.add_argument("--threshold-fraction", type=float, dest="threshold_fraction")
    p.add_argument("--min-volume-mm3", type=float, dest="min_volume_mm3")
    p.set_defaults(func=_cmd_pseudoct)

    p = sub.add_parser("postproc", parents=[common], help="component cleanup of a labelmap")
    p.add_argument("--labels", required=True)
    p.add_argument("--schema", help="catalog JSON (default: builtin)")
    p.add_argument("--out", required=True)
    p.add_argument("--connectivity", type=int, choices=(6, 18, 26))
    p.add_argument("--skip-filter", action="store_const", const=True, dest="skip_filter")
    p.add_argument("--stats-csv", help="write per-class component stats")
    p.set_defaults(func=_cmd_postproc)

    p = sub.add_parser("quadrants", parents=[common], help="eleven-quadrant localizer")
    p.add_argument("--inphase", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bands", type=int)
    p.add_argument("--threshold-fraction", type=float, dest="threshold_fraction")
    p.set_defaults(func=_cmd_quadrants)

    p = sub.add_parser("vertebrae", parents=[common], help="vertebra instance labeling")
    p.add_argument("--body", required=True, help="vertebra-body binary mask")
    p.add_argument("--ivd", help="optional intervertebral-disc mask")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="JSON report with levels and anomalies")
    p.add_argument("--start-level", dest="start_level")
    p.add_argument("--min-volume-mm3", type=float, dest="min_volume_mm3")
    p.set_defaults(func=_cmd_vertebrae)

    p = sub.add_parser("eval", parents=[common], help="Dice/ASSD evaluation report")
    p.add_argument("--pred", action="append", required=True)
    p.add_argument("--ref", action="append", required=True)
    p.add_argument("--schema", help="catalog JSON (default: builtin)")
    p.add_argument("--report", required=True, help="output JSON report")
    p.add_argument("--csv", help="optional CSV mirror")
    p.add_argument("--bootstrap-iterations", type=int, dest="bootstrap_iterations")
    p.add_argument("--level", type=float)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="tiled patch-oracle inference")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--oracle", required=True,
                   help="mock:constant:C | mock:threshold:T | mock:checkerboard | "
                        "mock:bins:T1,T2 | proc:<command>")
    p.add_argument("--quadrants", help="quadrant labelmap fed to the oracle")
    p.add_argument("--patch", type=lambda s: _triple(s, int))
    p.add_argument("--overlap", type=float)
    p.add_argument("--kernel", choices=("uniform", "gaussian"))
    p.add_argument("--memory-budget", dest="memory_budget")
    p.add_argument("--precision", choices=("float32", "float16"))
    p.add_argument("--num-classes", type=int, dest="num_classes")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("schema", parents=[common], help="catalog dump/diff/validate")
    ssub = p.add_subparsers(dest="schema_cmd", required=True, parser_class=_Parser)
    d = ssub.add_parser("dump", parents=[common])
    d.add_argument("--out", required=True)
    d.add_argument("--ct", action="store_true", help="dump the CT-side reference catalog")
    d.set_defaults(func=_cmd_schema, schema_cmd="dump")
    d = ssub.add_parser("diff", parents=[common])
    d.add_argument("left")
    d.add_argument("right")
    d.set_defaults(func=_cmd_schema, schema_cmd="diff")
    d = ssub.add_parser("validate", parents=[common])
    d.add_argument("--labels", required=True)
    d.add_argument("--schema")
    d.set_defaults(func=_cmd_schema, schema_cmd="validate")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"torsoseg: {exc}", file=sys.stderr)
        return 1
    except IOFailure as exc:
        print(f"torsoseg: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"torsoseg: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
