"""``scalenets`` command line: generate, analyze, train, eval."""
import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .arch import ArchSpecError, LayerSpec, build_variant, count_params, layer_param_count, receptive_field
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import PhantomError, VolumeFormatError, generate_phantom, read_volume, write_volume
from .evaluation import DiceReport, evaluate, wilcoxon_signed_rank
from .training import TrainConfig, TrainingDiverged, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    """Bad flags, config or missing inputs (exit 2)."""


class RuntimeFailure(Exception):
    """Failure while processing valid inputs (exit 3)."""


def _log(msg):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------- generate


def sample_seeds(seed, count):
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64)]


def cmd_generate(args):
    if args.seed is None:
        raise UsageError("generate requires --seed")
    if args.count < 1 or args.size < 4 or args.modalities < 1:
        raise UsageError("--count must be >= 1, --size >= 4, --modalities >= 1")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise RuntimeFailure(f"cannot create {out}: {err}") from None
    entries = []
    for i, s in enumerate(sample_seeds(args.seed, args.count)):
        sample = generate_phantom((args.size,) * 3, args.modalities, np.random.default_rng(s))
        name = f"sample_{i:04d}.snvl"
        try:
            write_volume(sample, out / name)
        except OSError as err:
            raise RuntimeFailure(f"cannot write {out / name}: {err}") from None
        entries.append({"file": name, "seed": s})
    manifest = {"seed": args.seed, "size": args.size, "modalities": args.modalities, "samples": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {args.count} samples to {out}")


# ----------------------------------------------------------------- analyze


def scalable_ratio(n, p, k=3):
    """Weights of cross_f + cross_m over a joint conv on the same n*p features."""
    scalable = layer_param_count(LayerSpec("cross_f", k=k, channels_out=p), n, p)[0]
    scalable += layer_param_count(LayerSpec("cross_m", k=k, channels_out=n), n, p)[0]
    classic = layer_param_count(LayerSpec("conv", k=k, channels_out=n * p), 1, n * p)[0]
    return scalable, classic, scalable / classic


def _arch_from_args(args):
    try:
        return build_variant(args.variant, args.modalities, args.classes, args.f_width)
    except ArchSpecError as err:
        raise UsageError(str(err)) from None


def cmd_analyze(args):
    spec = _arch_from_args(args)
    counts = count_params(spec)
    print(f"variant\t{spec.name}\tmodalities={spec.n_modalities}\tclasses={spec.n_classes}\tf_width={spec.f_width}")
    print("layer\tkind\tsection\tweights\tbiases\ttotal")
    for item in counts.items:
        print(f"{item.path}\t{item.kind}\t{item.section}\t{item.weights}\t{item.biases}\t{item.total}")
    for section in ("backend", "frontend"):
        print(f"{section}_total\t{counts.section_total(section)}")
    print(f"total\t{counts.total}")
    print("receptive_field\t" + " ".join(str(r) for r in receptive_field(spec)))
    s, c, ratio = scalable_ratio(spec.n_modalities, spec.f_width)
    print(f"scalable_weights\t{s}\nclassic_weights\t{c}")
    print(f"ratio\t{ratio:.6f}")


# ------------------------------------------------------------------- train

_ARCH_KEYS = ("variant", "n_modalities", "n_classes", "f_width")
_TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))
_CONFIG_KEYS = set(_ARCH_KEYS + _TRAIN_KEYS + ("train_data", "val_data", "out"))


def _resolve_paths(entries, base):
    if isinstance(entries, str):
        entries = [entries]
    if not isinstance(entries, list) or not entries:
        raise UsageError("data entries must be a path or a non-empty list of paths")
    files = []
    for e in entries:
        path = Path(e) if os.path.isabs(e) else base / e
        if path.is_dir():
            found = sorted(path.glob("*.snvl"))
            if not found:
                raise UsageError(f"no .snvl files in {path}")
            files.extend(found)
        elif path.is_file():
            files.append(path)
        else:
            raise UsageError(f"data path does not exist: {path}")
    return files


def load_run_config(args):
    """Merge the JSON config with command-line overrides and validate it."""
    if args.config is None:
        raise UsageError("train requires --config")
    try:
        cfg = json.loads(Path(args.config).read_text())
    except OSError as err:
        raise UsageError(f"cannot read config: {err}") from None
    except json.JSONDecodeError as err:
        raise UsageError(f"config is not valid JSON: {err}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(cfg) - _CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    overrides = {
        "seed": args.seed, "out": args.out, "variant": args.variant,
        "n_modalities": args.modalities, "n_classes": args.classes, "f_width": args.f_width,
    }
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("variant", "train_data", "val_data", "seed", "out"):
        if key not in cfg:
            raise UsageError(f"config is missing {key!r}")
    cfg.setdefault("n_modalities", 4)
    cfg.setdefault("n_classes", 6)
    cfg.setdefault("f_width", 16)
    return cfg


def cmd_train(args):
    cfg = load_run_config(args)
    base = Path(args.config).resolve().parent
    train_files = _resolve_paths(cfg["train_data"], base)
    val_files = _resolve_paths(cfg["val_data"], base)
    try:
        arch = build_variant(cfg["variant"], cfg["n_modalities"], cfg["n_classes"], cfg["f_width"])
        config = TrainConfig(**{k: cfg[k] for k in _TRAIN_KEYS if k in cfg})
    except (ArchSpecError, TypeError, ValueError) as err:
        raise UsageError(f"invalid config: {err}") from None
    try:
        train_set = [read_volume(f) for f in train_files]
        val_set = [read_volume(f) for f in val_files]
    except (OSError, VolumeFormatError) as err:
        raise RuntimeFailure(f"cannot read data: {err}") from None

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    resolved = dict(cfg, train_data=[str(f) for f in train_files], val_data=[str(f) for f in val_files])
    resolved.update(dataclasses.asdict(config))
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")

    with open(out / "train.log", "w") as log:
        log.write("step\tloss\tval_dice\n")

        def on_step(step, loss, val):
            log.write(f"{step}\t{loss!r}\t{'-' if val is None else repr(val)}\n")
            log.flush()
            if val is not None:
                _log(f"step {step} loss {loss:.4f} val_dice {val:.4f}")

        try:
            result = train(arch, train_set, val_set, config, on_step=on_step)
        except ValueError as err:
            raise RuntimeFailure(str(err)) from None
    save_checkpoint(result.checkpoint, out / "checkpoint.snck")
    print(f"best val_dice {result.checkpoint.best_score:.6f} at step {result.checkpoint.step}; wrote {out}")


# -------------------------------------------------------------------- eval


def compare_reports(report, other, alternative):
    lines = []
    if report.subjects != other.subjects:
        raise RuntimeFailure("reports cover different subjects")
    for region in report.regions:
        if region not in other.regions:
            raise RuntimeFailure(f"region {region!r} missing from comparison report")
        try:
            res = wilcoxon_signed_rank(report.scores[region], other.scores[region], alternative)
        except ValueError as err:
            raise RuntimeFailure(f"{region}: {err}") from None
        lines.append(f"{region}\tW={res.statistic:g}\tp={res.pvalue:.6g}\tn={res.n}")
    return lines


def cmd_eval(args):
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except OSError as err:
        raise UsageError(f"cannot read checkpoint: {err}") from None
    except CheckpointError as err:
        raise RuntimeFailure(f"bad checkpoint: {err}") from None
    files = _resolve_paths(args.data, Path.cwd())
    other = None
    if args.compare is not None:
        try:
            other = DiceReport.from_text(Path(args.compare).read_text())
        except OSError as err:
            raise UsageError(f"cannot read comparison report: {err}") from None
        except ValueError as err:
            raise RuntimeFailure(f"bad comparison report: {err}") from None
    try:
        samples = [read_volume(f) for f in files]
        report = evaluate(ckpt, samples, names=[f.stem for f in files])
    except (OSError, VolumeFormatError, ValueError) as err:
        raise RuntimeFailure(str(err)) from None
    text = report.to_text()
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.tsv").write_text(text)
    sys.stdout.write(text)
    if other is not None:
        alternative = "greater" if args.one_sided else "two-sided"
        for line in compare_reports(report, other, alternative):
            print(line)


# -------------------------------------------------------------------- main


def build_parser():
    parser = argparse.ArgumentParser(prog="scalenets", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic phantoms")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--modalities", type=int, default=4)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    a = sub.add_parser("analyze", help="parameter counts and receptive field")
    a.add_argument("--variant", required=True)
    a.add_argument("--modalities", type=int, default=4)
    a.add_argument("--classes", type=int, default=6)
    a.add_argument("--f-width", type=int, default=16)
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--variant")
    t.add_argument("--modalities", type=int)
    t.add_argument("--classes", type=int)
    t.add_argument("--f-width", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Dice report for a checkpoint, optionally compared with another report")
    e.add_argument("checkpoint")
    e.add_argument("data", nargs="+")
    e.add_argument("--out")
    e.add_argument("--compare")
    e.add_argument("--one-sided", action="store_true", help="test whether this model scores higher")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except UsageError as err:
        _log(f"error: {err}")
        return EXIT_USAGE
    except (RuntimeFailure, PhantomError) as err:
        _log(f"error: {err}")
        return EXIT_RUNTIME
    except TrainingDiverged as err:
        _log(f"error: training diverged: {err}")
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
