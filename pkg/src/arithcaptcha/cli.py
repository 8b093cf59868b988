"""Command-line driver: generate, train, solve, evaluate, bench-adaptive.

Settings come from a flat ``key = value`` file (``--config``) and are
overridden by flags. Exit codes: 0 success, 1 usage or config error,
2 inconsistent recognition, 3 segmentation failure.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace

from .generator import (
    NotationType, RenderStyle, default_angles, enumerate_types, generate_corpus, load_atlas, read_manifest,
)
from .imagecore import PGMError, load_pgm
from .nn import Hyperparams, build_paper_net, class_preset, load_model, rotation_grid, save_model, train
from .recognize import (
    CnnClassifier, InconsistentRecognition, SegmentationFailed, TemplateClassifier, build_templates,
    evaluate, load_corpus, segment_cells, solve, training_set,
)
from .segment import SegmentationError, adaptive_detect, speedup_bench

log = logging.getLogger("arithcaptcha")

EXIT_OK, EXIT_USAGE, EXIT_INCONSISTENT, EXIT_SEGMENTATION = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(",", " ").split())


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    types: tuple = field(default_factory=lambda: tuple(t.name for t in enumerate_types()))
    # rendering style
    angle_limit: int = 0
    angle_step: int = 5
    noise_density: float = 0.0
    lines: int = 0
    padding: int = 4
    vmargin: int = 6
    style_seed: int = 0
    count: int = 100
    # training
    preset: str = "extended94"
    lr: float = 0.01
    batch_size: int = 32
    epochs: int = 10
    augment: bool = True
    aug_limit: float = 50.0
    aug_step: float = 5.0
    # recognition
    strategy: str = "tm"
    deskew: bool = True
    deskew_angles: tuple = ()
    template_angles: tuple = (0.0,)
    tau: int = 1
    # paths
    atlas: str = ""
    dataset: str = "data"
    model: str = "model.cfnn"
    out: str = "out"

    @property
    def notation_types(self) -> list[NotationType]:
        return [NotationType.parse(t) for t in self.types]

    @property
    def style(self) -> RenderStyle:
        angles = default_angles(self.angle_limit, self.angle_step) if self.angle_limit else (0,)
        return RenderStyle(angles, self.noise_density, self.lines, self.padding, self.vmargin, self.style_seed)

    @property
    def hyperparams(self) -> Hyperparams:
        return Hyperparams(self.lr, self.batch_size, self.epochs, self.seed)

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def header(self) -> str:
        return f"seed={self.seed} config={self.digest}"

    def with_values(self, values: dict) -> "RunConfig":
        kinds = {f.name: f for f in fields(self)}
        parsed = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            default = getattr(RunConfig(), key)
            text = str(raw).strip()
            try:
                if isinstance(default, bool):
                    if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(text)
                    parsed[key] = text.lower() in ("true", "1", "yes")
                elif key == "types":
                    parsed[key] = tuple(NotationType.parse(t.strip()).name for t in text.split(",") if t.strip())
                elif isinstance(default, tuple):
                    parsed[key] = _floats(text)
                elif isinstance(default, int):
                    parsed[key] = int(text, 0)
                elif isinstance(default, float):
                    parsed[key] = float(text)
                else:
                    parsed[key] = text
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        cfg = replace(self, **parsed)
        if cfg.strategy not in ("tm", "cnn"):
            raise ConfigError(f"unknown strategy {cfg.strategy!r}")
        if not cfg.types:
            raise ConfigError("type filter is empty")
        return cfg


def parse_config_text(text: str) -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            with open(path) as fh:
                cfg = cfg.with_values(parse_config_text(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return cfg.with_values(overrides or {})


# --- commands ------------------------------------------------------------

def _atlas(cfg: RunConfig):
    return load_atlas(cfg.atlas or None)


def cmd_generate(cfg: RunConfig, out_dir: str) -> str:
    if cfg.count < 1:
        raise ConfigError("count must be >= 1")
    try:
        generate_corpus(out_dir, cfg.count, cfg.notation_types, cfg.style, cfg.seed, _atlas(cfg))
    except OSError as exc:
        raise ConfigError(f"cannot write {out_dir}: {exc.strerror}") from None
    return out_dir


def cmd_train(cfg: RunConfig, out_dir: str) -> tuple[str, str]:
    """Returns the model and trace paths."""
    classes = class_preset(cfg.preset)
    manifest = os.path.join(cfg.dataset, "manifest.csv")
    if not os.path.exists(manifest):
        raise ConfigError(f"no manifest at {manifest}")
    samples = read_manifest(manifest)
    missing = sorted({c.label for s in samples for c in s.cells} - set(classes))
    if missing:
        raise ConfigError(f"dataset classes {missing} are not in preset {cfg.preset}")
    x, y = training_set(load_corpus(cfg.dataset), classes, cfg.augment, cfg.aug_limit, cfg.aug_step, cfg.tau)
    angles = len(rotation_grid(cfg.aug_limit, cfg.aug_step)) if cfg.augment else 1
    model = build_paper_net(classes, seed=cfg.seed)
    model, trace = train(model, x, y, cfg.hyperparams, log=log.info)
    os.makedirs(out_dir, exist_ok=True)
    model_path = os.path.join(out_dir, os.path.basename(cfg.model))
    with open(model_path, "wb") as fh:
        fh.write(save_model(model))
    trace_path = os.path.join(out_dir, "trace.csv")
    with open(trace_path, "w") as fh:
        fh.write(f"# {cfg.header()} cells={len(y) // angles} angles={angles} augmented={len(y)}\n")
        fh.write(trace.to_csv())
    return model_path, trace_path


def make_classifier(cfg: RunConfig):
    if cfg.strategy == "cnn":
        try:
            with open(cfg.model, "rb") as fh:
                model = load_model(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read model {cfg.model}: {exc.strerror}") from None
        return CnnClassifier(model)
    return TemplateClassifier(build_templates(_atlas(cfg), cfg.template_angles))


def declared_angles(cfg: RunConfig, image_path: str):
    """Per-cell deskew angles: the image's manifest row if one sits beside it, else ``deskew_angles``."""
    if not cfg.deskew:
        return None
    manifest = os.path.join(os.path.dirname(os.path.abspath(image_path)), "manifest.csv")
    if os.path.exists(manifest):
        name = os.path.basename(image_path)
        for s in read_manifest(manifest):
            if s.file == name:
                return [c.angle for c in s.cells]
    return list(cfg.deskew_angles) or None


def cmd_solve(cfg: RunConfig, image_path: str, stream=None) -> int:
    stream = sys.stdout if stream is None else stream
    try:
        img = load_pgm(image_path)
    except (OSError, PGMError) as exc:
        raise ConfigError(f"cannot read {image_path}: {exc}") from None
    try:
        result = solve(img, make_classifier(cfg), declared_angles(cfg, image_path), cfg.tau)
    except SegmentationFailed as exc:
        print(f"? ? - ? {cfg.strategy.upper()}  # {exc}", file=stream)
        return EXIT_SEGMENTATION
    except InconsistentRecognition as exc:
        print(f"{exc.partial.line()}  # {exc}", file=stream)
        return EXIT_INCONSISTENT
    print(result.line(), file=stream)
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, out_dir: str, stream=None):
    stream = sys.stdout if stream is None else stream
    if not os.path.exists(os.path.join(cfg.dataset, "manifest.csv")):
        raise ConfigError(f"no manifest in {cfg.dataset}")
    report = evaluate(cfg.dataset, make_classifier(cfg), cfg.deskew)
    os.makedirs(out_dir, exist_ok=True)
    head = f"{cfg.header()} strategy={report.strategy}"
    with open(os.path.join(out_dir, f"report_{cfg.strategy}.csv"), "w") as fh:
        fh.write(report.to_csv(head))
    with open(os.path.join(out_dir, f"confusion_{cfg.strategy}.csv"), "w") as fh:
        fh.write(report.confusion_csv())
    rates = report.serial_vs_adaptive()
    print(f"# {head}", file=stream)
    print(f"char_accuracy={report.char_accuracy:.6f} captcha_accuracy={report.captcha_accuracy:.6f}", file=stream)
    print(f"r^4={rates['per_example_serial']:.6f} r^3={rates['per_example_adaptive']:.6f} "
          f"r^32={rates['all_types_serial']:.6f} r^24={rates['all_types_adaptive']:.6f}", file=stream)
    print(f"segmentation_failures={report.segmentation_failures} inconsistent={report.inconsistent} "
          f"missing={len(report.missing)}", file=stream)
    for name in report.missing:
        print(f"missing {name}", file=stream)
    return report


def cmd_bench_adaptive(cfg: RunConfig, stream=None):
    """Boxes come from the solver's own segmentation of each image; samples it cannot split are skipped."""
    stream = sys.stdout if stream is None else stream
    corpus, skipped = [], 0
    for sample, img in load_corpus(cfg.dataset):
        angles = [c.angle for c in sample.cells] if cfg.deskew else None
        boxes = segment_cells(img, angles, cfg.tau)
        try:
            adaptive_detect(boxes)
        except SegmentationError:
            skipped += 1
            continue
        corpus.append((sample.spec.type.name, boxes))
    if not corpus:
        raise ConfigError(f"no usable samples in {cfg.dataset}")
    absent = sorted({t.name for t in enumerate_types()} - {name for name, _ in corpus})
    if absent:
        log.warning("types absent from corpus: %s", ",".join(absent))
    report = speedup_bench(corpus)
    print(f"# {cfg.header()} skipped={skipped}", file=stream)
    stream.write(report.to_text())
    print(f"check_ratio={report.ratio:.4f} wall_ratio={report.wall_ratio:.4f} "
          f"agreement={report.agreement}/{report.samples}", file=stream)
    return report


# --- entry point ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--strategy", choices=["tm", "cnn"])
    common.add_argument("--types", help="comma-separated notation types, e.g. D-O-D,S-NN-S")
    common.add_argument("--dataset", help="corpus directory")
    common.add_argument("--model", help="model file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="arithcaptcha", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", parents=[common], help="render a corpus")
    g.add_argument("--count", type=int)
    sub.add_parser("train", parents=[common], help="train the CNN on a corpus")
    s = sub.add_parser("solve", parents=[common], help="solve one PGM image")
    s.add_argument("image")
    sub.add_parser("evaluate", parents=[common], help="score a strategy on a corpus")
    sub.add_parser("bench-adaptive", parents=[common], help="adaptive vs serialized check counts")
    return p


def _overrides(args) -> dict:
    values = {}
    for key in ("seed", "strategy", "types", "dataset", "model", "count"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    return values


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        out = args.out or cfg.out
        if args.command == "generate":
            print(cmd_generate(cfg, out))
        elif args.command == "train":
            for path in cmd_train(cfg, out):
                print(path)
        elif args.command == "solve":
            return cmd_solve(cfg, args.image)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, out)
        else:
            cmd_bench_adaptive(cfg)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
