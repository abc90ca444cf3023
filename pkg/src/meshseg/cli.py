"""``meshseg`` command line.

Exit codes: 0 success, 1 unexpected failure, 2 usage error, 3 missing file,
4 config parse failure, 5 invalid input data.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import secrets
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__, metrics, pipeline, stats
from .meshnet import (
    ModelSpec,
    SpecError,
    WeightFileError,
    count_parameters,
    load_model,
    receptive_field,
    save_model,
)
from .sampling import SamplerConfig
from .volume import Volume, VolumeFormatError, load_volume, minmax_normalize, pad_to_cube, write_volume

log = logging.getLogger("meshseg")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


# -- config ------------------------------------------------------------------------

MODEL_DEFAULTS = {
    "modalities": 1,
    "channels": 71,
    "classes": 50,
    "subvolume_side": 38,
    "dropout": None,
    "bn_position": "before",
    "literal_table": False,
}


def default_config():
    train = asdict(pipeline.TrainConfig())
    sampler = train.pop("sampler")
    sampler["gaussian_mean"] = list(sampler["gaussian_mean"])
    sampler["gaussian_std"] = list(sampler["gaussian_std"])
    sampler["volume_dims"] = list(sampler["volume_dims"])
    return {
        "model": dict(MODEL_DEFAULTS),
        "train": train,
        "sampler": sampler,
        "segment": {"subvolumes": 1024, "batch_size": 8, "vote": "majority", "pad_side": 256},
    }


def write_default_config(path):
    Path(path).write_text(yaml.safe_dump(default_config(), sort_keys=True))


def load_config(path=None):
    """Defaults overlaid with the sections of a YAML file; unknown keys are errors."""
    cfg = default_config()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        user = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for section, values in user.items():
        if section not in cfg or not isinstance(values, dict):
            raise ConfigError(f"{path}: unknown or malformed section {section!r}")
        unknown = set(values) - set(cfg[section])
        if unknown:
            raise ConfigError(f"{path}: unknown keys in [{section}]: {sorted(unknown)}")
        cfg[section].update(values)
    return cfg


def model_spec(cfg):
    m = dict(cfg["model"])
    try:
        return ModelSpec.default(**m).validate()
    except (TypeError, SpecError) as exc:
        raise ConfigError(f"invalid model section: {exc}") from exc


def sampler_config(cfg, seed):
    try:
        return SamplerConfig(**{**cfg["sampler"], "seed": seed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid sampler section: {exc}") from exc


def train_config(cfg, seed, sampler):
    names = {f.name for f in fields(pipeline.TrainConfig)} - {"sampler", "seed"}
    try:
        return pipeline.TrainConfig(**{k: cfg["train"][k] for k in names}, sampler=sampler, seed=seed).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train section: {exc}") from exc


# -- helpers -----------------------------------------------------------------------

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out, args, seed, inputs, outputs, seed_source="given"):
    path = Path(str(out) + ".manifest")
    lines = [
        f"command: {args.command}",
        f"argv: {' '.join(args.argv)}",
        f"config: {args.config or '-'}",
        f"seed: {seed}",
        f"seed_source: {seed_source}",
        f"version: meshseg {__version__}",
    ]
    lines += [f"input: {p}" for p in inputs]
    lines += [f"output: {p} sha256={_sha256(p)}" for p in outputs if Path(p).is_file()]
    path.write_text("\n".join(lines) + "\n")
    return path


def _seed(args):
    if args.seed is not None:
        return args.seed, "given"
    return secrets.randbits(31), "auto"


def _require(path):
    if not Path(path).exists():
        raise FileNotFoundError(path)
    return path


def _load_inputs(paths, pad_side):
    vols = [minmax_normalize(load_volume(_require(p))) for p in paths]
    if pad_side:
        vols = [pad_to_cube(v, pad_side) for v in vols]
    return vols


def _parse_dataset(text, pad_side, label_map):
    if ":" not in text:
        raise UsageError(f"dataset {text!r} must look like IMAGE[,IMAGE2]:LABELS")
    imgs, lab = text.rsplit(":", 1)
    vols = _load_inputs(imgs.split(","), pad_side)
    labels = load_volume(_require(lab), kind="labels")
    if label_map is not None:
        labels = pipeline.remap_labels(labels, label_map)
    if pad_side:
        labels = pad_to_cube(labels, pad_side)
    return vols, labels


def _executor(threads):
    return ThreadPoolExecutor(threads) if threads and threads > 1 else nullcontext(None)


# -- commands ----------------------------------------------------------------------

def cmd_inspect(args, cfg):
    if args.model:
        spec = load_model(_require(args.model)).spec
    else:
        for key in ("modalities", "channels", "classes"):
            if getattr(args, key) is not None:
                cfg["model"][key] = getattr(args, key)
        spec = model_spec(cfg)
    print(f"modalities: {spec.modalities}")
    print(f"channels: {spec.channels}")
    print(f"classes: {spec.classes}")
    print(f"subvolume side: {spec.subvolume_side}")
    for i, l in enumerate(spec.layers, 1):
        extras = [n for n, on in (("BN", l.bn), ("ReLU", l.relu)) if on]
        if l.dropout:
            extras.append(f"dropout({l.dropout})")
        print(f"layer {i}: kernel {l.kernel}^3 dilation {l.dilation} padding {l.padding} {' '.join(extras)}".rstrip())
    print(f"parameters: {count_parameters(spec)}")
    print(f"receptive field: {receptive_field(spec)}")
    return EXIT_OK


def _train_common(args, cfg, model=None):
    seed, source = _seed(args)
    sampler = sampler_config(cfg, seed)
    tcfg = train_config(cfg, seed, sampler)
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    label_map = pipeline.load_label_map(_require(args.label_map))[0] if args.label_map else None
    pad = cfg["segment"]["pad_side"] if not args.no_preprocess else None
    data = [_parse_dataset(d, pad, label_map) for d in args.dataset]
    val = [_parse_dataset(d, pad, label_map) for d in args.val_dataset] if args.val_dataset else None
    dtype = np.float64 if args.float64 else np.float32
    if model is None:
        result = pipeline.train(data, tcfg, spec=model_spec(cfg), val_datasets=val, dtype=dtype)
    else:
        result = pipeline.finetune(model, data, tcfg, val_datasets=val)
    save_model(result.model, args.out)
    log_path = args.log or str(args.out) + ".log.jsonl"
    result.write_log(log_path)
    inputs = [p for d in args.dataset for p in d.replace(":", ",").split(",")]
    write_manifest(args.out, args, seed, inputs, [args.out, log_path], source)
    last = result.history[-1] if result.history else None
    if last:
        print(f"epoch {last.epoch}: train_loss {last.train_loss:.6f} val_loss {last.val_loss:.6f} "
              f"macro_dice {last.macro_dice:.4f}")
    return EXIT_OK


def cmd_train(args, cfg):
    return _train_common(args, cfg)


def cmd_finetune(args, cfg):
    model = load_model(_require(args.model))
    return _train_common(args, cfg, model)


def cmd_segment(args, cfg):
    seed, source = _seed(args)
    model = load_model(_require(args.model))
    raw = [load_volume(_require(p)) for p in args.inputs]
    pad = None if args.no_preprocess else (args.pad_side or cfg["segment"]["pad_side"])
    vols = [minmax_normalize(v) for v in raw]
    if pad:
        vols = [pad_to_cube(v, pad) for v in vols]
    n = args.subvolumes or cfg["segment"]["subvolumes"]
    dims = vols[0].dims
    sampler = pipeline.default_sampler(dims, model.spec.subvolume_side, n, seed)
    with _executor(args.threads) as pool:
        seg = pipeline.segment(vols, model, sampler, n, seed=seed,
                               batch_size=cfg["segment"]["batch_size"],
                               vote=args.vote or cfg["segment"]["vote"], executor=pool)
    labels = seg.labels.data
    off = vols[0].meta.get("pad_offset")
    if off:
        labels = labels[tuple(slice(o, o + d) for o, d in zip(off, raw[0].dims))]
    out = Volume(labels, raw[0].spacing, "labels", {k: v for k, v in raw[0].meta.items() if k == "nifti_header"})
    write_volume(out, args.out)
    write_manifest(args.out, args, seed, args.inputs + [args.model], [args.out], source)
    print(f"segmented {len(seg.corners)} subvolumes -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args, cfg):
    pred = load_volume(_require(args.pred), kind="labels")
    gt = load_volume(_require(args.gt), kind="labels")
    names = {}
    if args.label_map:
        _, names = pipeline.load_label_map(_require(args.label_map))
    classes = args.classes or max(int(pred.data.max()), int(gt.data.max()), max(names, default=0)) + 1
    _, d, a = metrics.per_class(pred, gt, classes, percent=args.percent)
    out = args.out or str(args.pred) + ".metrics.tsv"
    metrics.write_report(out, d, a, names)
    print(f"macro DICE: {metrics.macro(d):.6f}" if classes > 1 else f"DICE: {d[0]:.6f}")
    write_manifest(out, args, None, [args.pred, args.gt], [out])
    return EXIT_OK


def cmd_stats(args, cfg):
    records, rois = stats.read_cohort(_require(args.table))
    results, buckets = stats.meta_analysis(records, rois, alpha=args.alpha)
    stats.write_stats_report(args.out, results, buckets)
    for b in stats.BUCKETS:
        print(f"{b}: {len(buckets[b])}")
    write_manifest(args.out, args, None, [args.table], [args.out])
    return EXIT_OK


def cmd_benchmark(args, cfg):
    seed, source = _seed(args)
    model = load_model(_require(args.model))
    vols = [minmax_normalize(load_volume(_require(p))) for p in args.inputs]
    pad = None if args.no_preprocess else cfg["segment"]["pad_side"]
    if pad:
        vols = [pad_to_cube(v, pad) for v in vols]
    reference = None
    if args.reference:
        reference = load_volume(_require(args.reference), kind="labels")
        if pad:
            reference = pad_to_cube(reference, pad)
    counts = [int(c) for c in args.counts.split(",")]
    sampler = pipeline.default_sampler(vols[0].dims, model.spec.subvolume_side, seed=seed)
    report = pipeline.benchmark(model, vols, counts, args.repeats, reference, sampler, seed,
                                reference_count=args.reference_count)
    report.write(args.out)
    for r in report.rows:
        print(f"{r.count}\tmean {r.mean_s:.3f}s\tmin {r.min_s:.3f}s\tmacro_dice {r.macro_dice:.4f}")
    print(f"linear fit r2 = {report.r2:.4f}")
    write_manifest(args.out, args, seed, args.inputs + [args.model], [args.out], source)
    return EXIT_OK


def cmd_config(args, cfg):
    write_default_config(args.out)
    print(f"wrote defaults to {args.out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="meshseg", description="MeshNet brain atlas segmentation")
    p.add_argument("--version", action="version", version=f"meshseg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="YAML config; flags override it")
        if seed:
            sp.add_argument("--seed", type=int)
        return sp

    s = common(sub.add_parser("inspect", help="print architecture, parameter count, receptive field"), seed=False)
    s.add_argument("--modalities", type=int)
    s.add_argument("--channels", type=int)
    s.add_argument("--classes", type=int)
    s.add_argument("--model", help="inspect a saved weight file instead")

    for name in ("train", "finetune"):
        s = common(sub.add_parser(name, help=f"{name} on IMAGE[,IMAGE2]:LABELS datasets"))
        if name == "finetune":
            s.add_argument("--model", required=True)
        s.add_argument("--dataset", action="append", required=True)
        s.add_argument("--val-dataset", action="append")
        s.add_argument("--label-map", help="lines 'freesurfer_id class_index region_name'")
        s.add_argument("--epochs", type=int)
        s.add_argument("--float64", action="store_true", help="64-bit compute")
        s.add_argument("--no-preprocess", action="store_true")
        s.add_argument("--log")
        s.add_argument("--out", required=True)

    s = common(sub.add_parser("segment", help="segment a volume by voted subvolume predictions"))
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--subvolumes", type=int)
    s.add_argument("--vote", choices=("majority", "logprob"))
    s.add_argument("--pad-side", type=int)
    s.add_argument("--no-preprocess", action="store_true")
    s.add_argument("--threads", type=int, default=int(os.environ.get("MESHSEG_THREADS", "1")))
    s.add_argument("--out", required=True)

    s = common(sub.add_parser("evaluate", help="per-class DICE/AVD report"), seed=False)
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--classes", type=int)
    s.add_argument("--label-map")
    s.add_argument("--percent", action="store_true", help="report AVD in percent")
    s.add_argument("--out")

    s = common(sub.add_parser("stats", help="covariate-adjusted repeated-measures ANOVA per ROI"), seed=False)
    s.add_argument("--table", required=True)
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--out", required=True)

    s = common(sub.add_parser("benchmark", help="time and score segmentation per subvolume count"))
    s.add_argument("--model", required=True)
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--counts", default=",".join(map(str, pipeline.DEFAULT_COUNTS)))
    s.add_argument("--repeats", type=int, default=1)
    s.add_argument("--reference")
    s.add_argument("--reference-count", type=int, default=8192)
    s.add_argument("--no-preprocess", action="store_true")
    s.add_argument("--out", required=True)

    s = sub.add_parser("config", help="write the default config file")
    s.add_argument("--out", required=True)
    s.set_defaults(config=None)
    return p


COMMANDS = {
    "inspect": cmd_inspect,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "segment": cmd_segment,
    "evaluate": cmd_evaluate,
    "stats": cmd_stats,
    "benchmark": cmd_benchmark,
    "config": cmd_config,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"meshseg: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"meshseg: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"meshseg: missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"meshseg: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (VolumeFormatError, WeightFileError, SpecError, ValueError) as exc:
        print(f"meshseg: invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
