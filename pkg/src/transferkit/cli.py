"""Command-line pipeline: synth -> augment -> train-base -> retrain -> evaluate -> report.

Every command is deterministic given its flags; outputs are written
atomically. Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from . import augment as aug
from . import dataset as dsm
from . import evaluation as ev
from . import nn, train
from .errors import StaleCacheError, TransferKitError, UsageError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("transferkit")

# defaults per command; argparse itself uses SUPPRESS so config files can
# sit between these and explicit flags
COMMON = {"seed": 0, "log_level": "warning"}
SPLIT = {"test_fraction": 1 / 6, "image_size": 32}
TRAINING = {"lr": 0.01, "epochs": 50, "batch": 32, "val_fraction": 0.2}
DEFAULTS = {
    "synth": {"per_class": 120, "image_size": 32, "out": None},
    "augment": {"in_dir": None, "out": None, "rotation": 30.0, "translation": 0.1, "lighting": 1.25},
    "train-base": {**SPLIT, **TRAINING, "data": None, "out": None, "classes": None, "channels": "8,16"},
    "retrain": {**SPLIT, **TRAINING, "data": None, "model": None, "out": None, "cache": None, "refresh_cache": False},
    "evaluate": {**SPLIT, "data": None, "model": None, "matrix": None, "out": None},
    "report": {"in_file": None, "format": "table", "out": None},
}
for _d in DEFAULTS.values():
    for _k, _v in COMMON.items():
        _d.setdefault(_k, _v)
REQUIRED = {
    "synth": ("out",),
    "augment": ("in_dir", "out"),
    "train-base": ("data", "out"),
    "retrain": ("data", "model", "out"),
    "evaluate": ("out",),
    "report": ("in_file",),
}


class ArgParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> ArgParser:
    p = ArgParser(prog="transferkit", description=__doc__.splitlines()[0], argument_default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=ArgParser)

    def common(sp):
        sp.add_argument("--config", help="TOML file; explicit flags override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--log-level", dest="log_level", choices=["debug", "info", "warning", "error"])
        sp.add_argument("--out", help="output directory (file for report)")

    def split(sp):
        sp.add_argument("--test-fraction", dest="test_fraction", type=float)
        sp.add_argument("--image-size", dest="image_size", type=int)

    def training(sp):
        sp.add_argument("--lr", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch", type=int)
        sp.add_argument("--val-fraction", dest="val_fraction", type=float)

    sp = sub.add_parser("synth", help="generate the synthetic shapes dataset", argument_default=argparse.SUPPRESS)
    common(sp)
    sp.add_argument("--per-class", dest="per_class", type=int)
    sp.add_argument("--image-size", dest="image_size", type=int)

    sp = sub.add_parser("augment", help="expand a dataset 6x offline", argument_default=argparse.SUPPRESS)
    common(sp)
    sp.add_argument("--in", dest="in_dir")
    sp.add_argument("--rotation", type=float)
    sp.add_argument("--translation", type=float)
    sp.add_argument("--lighting", type=float)

    sp = sub.add_parser("train-base", help="train a full CNN", argument_default=argparse.SUPPRESS)
    common(sp)
    split(sp)
    training(sp)
    sp.add_argument("--data")
    sp.add_argument("--classes", help="comma-separated subset of classes to train on")
    sp.add_argument("--channels", help="comma-separated conv filter counts, e.g. 8,16")

    sp = sub.add_parser("retrain", help="freeze the feature extractor, retrain the last layer",
                        argument_default=argparse.SUPPRESS)
    common(sp)
    split(sp)
    training(sp)
    sp.add_argument("--data")
    sp.add_argument("--model")
    sp.add_argument("--cache", help="bottleneck cache file (default OUT/bottlenecks.jsonl)")
    sp.add_argument("--refresh-cache", dest="refresh_cache", action="store_true")

    sp = sub.add_parser("evaluate", help="confusion matrix and metrics", argument_default=argparse.SUPPRESS)
    common(sp)
    split(sp)
    sp.add_argument("--data")
    sp.add_argument("--model")
    sp.add_argument("--matrix", help="confusion-matrix CSV to evaluate instead of a model")

    sp = sub.add_parser("report", help="render a report.json", argument_default=argparse.SUPPRESS)
    common(sp)
    sp.add_argument("--in", dest="in_file")
    sp.add_argument("--format", choices=["table", "json"])
    return p


def _load_config(path, command) -> dict:
    try:
        doc = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"invalid TOML in {path}: {e}") from None
    known_anywhere = set().union(*DEFAULTS.values())
    out = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            if key not in DEFAULTS:
                raise UsageError(f"unknown config section [{key}]")
            if key != command:
                continue
            for k, v in value.items():
                k = k.replace("-", "_")
                if k not in DEFAULTS[command]:
                    raise UsageError(f"unknown key {k!r} in config section [{key}]")
                out[k] = v
        else:
            k = key.replace("-", "_")
            if k not in known_anywhere:
                raise UsageError(f"unknown config key {key!r}")
            if k in DEFAULTS[command] and k not in out:
                out[k] = value
    return out


def resolve(argv) -> tuple[str, dict]:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command", None)
    if command is None:
        raise UsageError("no command given; see --help")
    opts = dict(DEFAULTS[command])
    if "config" in args:
        opts.update(_load_config(args.pop("config"), command))
    opts.update(args)
    missing = [k for k in REQUIRED[command] if opts.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return command, opts


def _progress(**fields):
    print(" ".join(f"{k}={v}" for k, v in fields.items()), file=sys.stderr, flush=True)


def _write(path, text: str):
    dsm.write_bytes_atomic(path, text.encode("utf-8"))
    _progress(event="wrote", path=path)


def _dir(path, must_exist=False) -> Path:
    p = Path(path)
    if must_exist and not p.is_dir():
        raise UsageError(f"{p} is not a directory")
    return p


def _file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{p} does not exist")
    return p


# --------------------------------------------------------------------------
# commands


def cmd_synth(o):
    ds = dsm.synth_shapes(o["per_class"], o["image_size"], o["seed"])
    out = _dir(o["out"])
    dsm.write_dataset(ds, out)
    _progress(event="synth", images=len(ds), classes=len(ds.class_names), out=out)


def cmd_augment(o):
    src = dsm.ingest_directory(_dir(o["in_dir"], must_exist=True))
    spec = aug.AugmentSpec(o["rotation"], o["translation"], o["lighting"])
    out = _dir(o["out"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["output_path", "source_path", "variant", "label"])
    count = 0
    for item in src:
        for variant, new in aug.augment_image(item, spec, o["seed"]):
            dsm.write_ppm(out / new.id, new.image)
            w.writerow([new.id, item.id, variant, src.class_names[item.label]])
            count += 1
    _write(out / "augment_manifest.csv", buf.getvalue())
    _progress(event="augment", sources=len(src), images=count, skipped=len(src.skipped), out=out)


def _split(o):
    ds = dsm.ingest_directory(_dir(o["data"], must_exist=True), o["image_size"])
    if ds.skipped:
        _progress(event="skipped", files=len(ds.skipped))
    spec = dsm.SplitSpec(o["test_fraction"], o["seed"])
    # augmented variants follow their source image into the same side
    train_ds, test_ds = dsm.stratified_split(ds, spec, group=dsm.source_id)
    return ds, train_ds, test_ds


def _config(o):
    return train.TrainConfig(o["lr"], o["epochs"], o["batch"], o["seed"], o["val_fraction"])


def _epoch_printer(stage):
    def show(r):
        _progress(event="epoch", stage=stage, epoch=r.epoch, train_acc=f"{r.train_acc:.4f}",
                  val_acc=f"{r.val_acc:.4f}", train_ce=f"{r.train_ce:.4f}", val_ce=f"{r.val_ce:.4f}")
    return show


def cmd_train_base(o):
    ds, train_ds, _ = _split(o)
    if o["classes"]:
        train_ds = train_ds.select_classes([c.strip() for c in str(o["classes"]).split(",") if c.strip()])
    cfg = _config(o)
    tr, va = train.holdout_indices(train_ds.labels, cfg.validation_fraction, cfg.seed)
    x, y = train_ds.volumes(), train_ds.labels
    channels = tuple(int(c) for c in str(o["channels"]).split(","))
    net = nn.small_cnn(x.shape[1:], len(train_ds.class_names), channels, cfg.seed, train_ds.class_names)
    net, history = train.train_full(net, (x[tr], y[tr]), (x[va], y[va]), cfg, _epoch_printer("base"))
    out = _dir(o["out"])
    _write(out / "model.json", nn.network_to_json(net))
    _write(out / "base_curves.csv", ev.emit_curves_csv(history))


def _bottlenecks(o, net, ds, out) -> train.BottleneckCache:
    path = Path(o["cache"]) if o["cache"] else out / "bottlenecks.jsonl"
    if path.exists() and not o["refresh_cache"]:
        cache = train.BottleneckCache.from_text(path.read_text(encoding="utf-8"))
        cache.check(net)
        missing = set(ds.ids) - set(cache.ids)
        if missing:
            raise StaleCacheError(f"cache {path} lacks {len(missing)} images; rerun with --refresh-cache")
        _progress(event="cache", action="reused", path=path)
        return cache
    cache = train.extract_bottlenecks(net, ds)
    _write(path, cache.to_text())
    _progress(event="cache", action="extracted", images=len(cache), length=cache.vector_length)
    return cache


def cmd_retrain(o):
    base = nn.network_from_json(_file(o["model"]).read_text(encoding="utf-8"))
    ds, train_ds, _ = _split(o)
    out = _dir(o["out"])
    cache = _bottlenecks(o, base, ds, out)
    train_cache = train.BottleneckCache(cache.fingerprint, train_ds.ids, cache.rows_for(train_ds.ids))
    frozen = train.prefix_fingerprint(base)
    head, history = train.retrain_head(train_cache, train_ds.labels, len(ds.class_names), _config(o))
    net = train.attach_head(base, head, ds.class_names)
    assert train.prefix_fingerprint(net) == frozen
    _progress(event="retrain", prefix_fingerprint=frozen[:16], final_val_acc=f"{history[-1].val_acc:.4f}")
    _write(out / "model.json", nn.network_to_json(net))
    _write(out / "head_curves.csv", ev.emit_curves_csv(history))


def cmd_evaluate(o):
    out = _dir(o["out"])
    if o["matrix"]:
        cm = ev.parse_confusion_csv(_file(o["matrix"]).read_text(encoding="utf-8"))
    else:
        if not (o["model"] and o["data"]):
            raise UsageError("evaluate needs --matrix, or both --model and --data")
        net = nn.network_from_json(_file(o["model"]).read_text(encoding="utf-8"))
        _, _, test_ds = _split(o)
        names = net.class_names or test_ds.class_names
        known = [n for n in test_ds.class_names if n in names]
        test_ds = test_ds.select_classes(known)
        remap = [list(names).index(n) for n in test_ds.class_names]
        probs = train.predict(net, test_ds.volumes())
        pairs = zip((remap[l] for l in test_ds.labels), probs.argmax(axis=1).tolist())
        cm = ev.confusion_from_predictions(pairs, len(names), names)
        _write(out / "confusion.csv", ev.confusion_csv(cm))
    report = ev.build_report(cm)
    _write(out / "report.json", ev.emit_report(report, "json"))
    _write(out / "report.txt", ev.emit_report(report, "table"))
    _progress(event="evaluate", total=report.total_examples, macro_accuracy=f"{float(report.macro.accuracy):.6f}")


def cmd_report(o):
    report = ev.parse_report(_file(o["in_file"]).read_text(encoding="utf-8"))
    text = ev.emit_report(report, o["format"])
    if o["out"]:
        _write(o["out"], text)
    else:
        sys.stdout.write(text)


COMMANDS = {
    "synth": cmd_synth,
    "augment": cmd_augment,
    "train-base": cmd_train_base,
    "retrain": cmd_retrain,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def dispatch(argv=None) -> int:
    try:
        command, opts = resolve(argv)
        logging.basicConfig(level=opts["log_level"].upper(), stream=sys.stderr,
                            format="%(name)s %(levelname)s %(message)s")
        COMMANDS[command](opts)
    except TransferKitError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
