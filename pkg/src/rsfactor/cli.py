"""Command-line interface: ``rsfactor <factorize|enhance|train|eval|synth>``.

Settings come from built-in defaults, then an optional JSON ``--config``
file, then explicit flags.  Exit codes: 0 success, 1 usage or configuration
error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from importlib import resources
from pathlib import Path

from .factorize import ParamVector, export_factors, factorize
from .fusion import FUSION_MODES, enhance
from .image import LUMA_COEFFS
from .io import IMAGE_SUFFIXES, ImageReadError, list_images, read_image, write_image
from .metrics import evaluate, eval_csv
from .train import CheckpointVersionError, TrainConfig, history_csv, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("rsfactor")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOG_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING, "warning": logging.WARNING}
DEMO_CHECKPOINT = "demo_checkpoint.json"
COMMANDS = ("factorize", "enhance", "train", "eval", "synth")

# keys accepted in a --config file besides the TrainConfig fields
RUN_KEYS = {"checkpoint", "outdir", "luma", "count", "size", "bits", "differences", "residual"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}

# flag name -> config key
FLAG_KEYS = {"k": "k_factors", "t": "t_iters", "mode": "fusion_mode", "weights": "factor_weights"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _weights(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"weights must be comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("weights list is empty")
    return vals


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {v}")
    return v


def _common_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = TrainConfig()

    def dflt(v):
        return argparse.SUPPRESS if suppress else v

    p.add_argument("--config", type=Path, default=dflt(None), help="JSON file with settings")
    p.add_argument("--k", type=_positive_int, default=dflt(d.k_factors), help="number of factors K")
    p.add_argument("--t", type=_positive_int, default=dflt(d.t_iters), help="ADMM iterations T per factor")
    p.add_argument("--checkpoint", type=Path, default=dflt(None),
                   help="checkpoint to read (factorize/enhance; enhance falls back to the bundled demo) "
                        "or to write (train; default <outdir>/checkpoint.json)")
    p.add_argument("--mode", choices=FUSION_MODES, default=dflt(d.fusion_mode), help="fusion mode")
    p.add_argument("--weights", type=_weights, default=dflt(None),
                   help="factor weights a,b,c,...: K values, or K+1 with the image weight first")
    p.add_argument("--jobs", type=_positive_int, default=dflt(1), help="worker processes")
    p.add_argument("--seed", type=int, default=dflt(d.seed), help="random seed")
    p.add_argument("--outdir", type=Path, default=dflt(Path("out")), help="output directory")
    p.add_argument("--luma", choices=sorted(LUMA_COEFFS), default=dflt("analog"), help="luma convention for metrics")


def build_parser(suppress: bool = False) -> argparse.ArgumentParser:
    """The argument parser; ``suppress=True`` drops defaults to detect explicit flags."""
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="rsfactor", description="Recursive specularity factorization for low-light images.",
                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def dflt(v):
        return argparse.SUPPRESS if suppress else v

    p = sub.add_parser("factorize", help="split an image into K factor images", formatter_class=fmt)
    p.add_argument("input", type=Path, help="input image")
    p.add_argument("--differences", action="store_true", default=dflt(False), help="also write F^k maps")
    p.add_argument("--residual", action="store_true", default=dflt(False), help="also write the absorbed residual")
    _common_flags(p, suppress)

    p = sub.add_parser("enhance", help="enhance an image or a directory of images", formatter_class=fmt)
    p.add_argument("input", type=Path, help="input image or directory (recursed one level)")
    p.add_argument("--bits", type=int, choices=(8, 16), default=dflt(8), help="output PNG bit depth")
    _common_flags(p, suppress)

    p = sub.add_parser("train", help="train factorization scalars and fusion gammas", formatter_class=fmt)
    p.add_argument("data", type=Path, help="directory of training images (uses low/ when present)")
    _common_flags(p, suppress)

    p = sub.add_parser("eval", help="full-reference metrics for matching files", formatter_class=fmt)
    p.add_argument("pred", type=Path, help="directory of predictions")
    p.add_argument("gt", type=Path, help="directory of ground-truth images")
    _common_flags(p, suppress)

    p = sub.add_parser("synth", help="write a synthetic paired low/high dataset", formatter_class=fmt)
    p.add_argument("--count", type=_positive_int, default=dflt(20), help="number of pairs")
    p.add_argument("--size", type=_positive_int, default=dflt(128), help="image height and width")
    _common_flags(p, suppress)
    return parser


def _setup_logging() -> None:
    name = os.environ.get("RSFACTOR_LOG", "info").strip().lower()
    level = LOG_LEVELS.get(name)
    if level is None:
        raise UsageError(f"RSFACTOR_LOG must be one of debug|info|warn, got {name!r}")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(data) - TRAIN_KEYS - RUN_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return data


def resolve_settings(argv: list[str]) -> tuple[str, dict]:
    """Merge defaults, config file and explicit flags into one flat dict."""
    args = build_parser().parse_args(argv)
    explicit = vars(build_parser(suppress=True).parse_args(argv))
    settings = {FLAG_KEYS.get(k, k): v for k, v in vars(args).items()}
    settings.update(_load_config(args.config))
    settings.update({FLAG_KEYS.get(k, k): v for k, v in explicit.items()})
    for key in ("checkpoint", "outdir"):
        if settings.get(key) is not None:
            settings[key] = Path(settings[key])
    return args.command, settings


def train_config(settings: dict) -> TrainConfig:
    kw = {k: settings[k] for k in TRAIN_KEYS if k in settings}
    try:
        return TrainConfig.from_dict(kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from None


def _read(path: Path):
    try:
        return read_image(path)
    except ImageReadError as exc:
        raise DataError(str(exc)) from None


def _load_params(settings: dict, require: bool):
    """ParamVector and FusionConfig from --checkpoint, the demo, or the defaults."""
    path = settings.get("checkpoint")
    if path is None and require:
        with resources.as_file(resources.files("rsfactor") / "data" / DEMO_CHECKPOINT) as demo:
            path = Path(demo)
    if path is None:
        cfg = train_config(settings)
        return cfg.initial_params(), cfg.initial_fusion()
    try:
        pv, fcfg, _ = load_checkpoint(path)
    except CheckpointVersionError as exc:
        raise DataError(str(exc)) from None
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} not found") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"checkpoint {path} is malformed: {exc}") from None
    return pv, fcfg


def _apply_fusion_overrides(fcfg, settings: dict, explicit_only: dict):
    if "fusion_mode" in explicit_only:
        fcfg = replace(fcfg, mode=explicit_only["fusion_mode"])
    if explicit_only.get("factor_weights") is not None:
        try:
            fcfg = fcfg.with_weights(explicit_only["factor_weights"])
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return fcfg


def _overrides(settings: dict, argv: list[str]) -> dict:
    """Settings that came from the config file or explicit flags (not defaults)."""
    explicit = {FLAG_KEYS.get(k, k): v for k, v in vars(build_parser(suppress=True).parse_args(argv)).items()}
    out = dict(_load_config(settings.get("config")))
    out.update(explicit)
    return out


def cmd_factorize(settings: dict, argv: list[str]) -> int:
    over = _overrides(settings, argv)
    img = _read(settings["input"])
    pv, _ = _load_params(settings, require=False)
    if settings.get("checkpoint") is not None:
        for key in ("k_factors", "t_iters"):
            if key in over and over[key] != getattr(pv, key):
                raise UsageError(f"--{key[0]} {over[key]} conflicts with the checkpoint ({getattr(pv, key)})")
    stack = factorize(img, pv)
    written = export_factors(stack, settings["outdir"], Path(settings["input"]).stem,
                             include_differences=bool(settings.get("differences")),
                             include_residual=bool(settings.get("residual")))
    for p in written:
        print(p)
    return EXIT_OK


def _enhance_inputs(root: Path) -> list[tuple[Path, Path]]:
    """``(source, relative output path)`` pairs; directories recurse one level."""
    if root.is_file():
        return [(root, Path(root.stem + ".png"))]
    if not root.is_dir():
        raise DataError(f"{root}: no such file or directory")
    pairs = [(p, Path(p.stem + ".png")) for p in list_images(root)]
    for sub in sorted(d for d in root.iterdir() if d.is_dir()):
        pairs += [(p, Path(sub.name) / (p.stem + ".png")) for p in list_images(sub)]
    if not pairs:
        raise DataError(f"{root}: no images with suffix {', '.join(IMAGE_SUFFIXES)}")
    return pairs


def _enhance_task(args):
    img, pv, fcfg = args
    return enhance(img, pv, fcfg)


def cmd_enhance(settings: dict, argv: list[str]) -> int:
    over = _overrides(settings, argv)
    pairs = _enhance_inputs(Path(settings["input"]))
    pv, fcfg = _load_params(settings, require=True)
    fcfg = _apply_fusion_overrides(fcfg, settings, over)
    images = [_read(src) for src, _ in pairs]
    tasks = [(im, pv, fcfg) for im in images]
    jobs = int(settings.get("jobs", 1))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_enhance_task, tasks))
    else:
        outputs = [_enhance_task(t) for t in tasks]
    outdir = Path(settings["outdir"])
    for (_, rel), out in zip(pairs, outputs):
        dest = outdir / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        write_image(dest, out, bits=int(settings.get("bits", 8)))
        print(dest)
    return EXIT_OK


def cmd_train(settings: dict, argv: list[str]) -> int:
    cfg = train_config(settings)
    data = Path(settings["data"])
    if (data / "low").is_dir():
        data = data / "low"
    if not data.is_dir():
        raise DataError(f"{data}: not a directory")
    paths = list_images(data)
    if not paths:
        raise DataError(f"{data}: no training images")
    images = [_read(p) for p in paths]
    shapes = {im.channels for im in images}
    if len(shapes) != 1:
        raise DataError("training images mix gray and color")
    outdir = Path(settings["outdir"])
    ckpt = settings.get("checkpoint") or outdir / "checkpoint.json"
    logger.info("training on %d images from %s", len(images), data)
    result = train(images, cfg)
    outdir.mkdir(parents=True, exist_ok=True)
    Path(ckpt).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, result)
    (outdir / "history.csv").write_text(history_csv(result.history))
    print(ckpt)
    return EXIT_OK


def cmd_eval(settings: dict, argv: list[str]) -> int:
    pred_dir, gt_dir = Path(settings["pred"]), Path(settings["gt"])
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise DataError(f"{d}: not a directory")
    preds = {p.stem: p for p in list_images(pred_dir)}
    gts = {p.stem: p for p in list_images(gt_dir)}
    missing = sorted(set(preds) ^ set(gts))
    if missing:
        raise DataError(f"files without a counterpart: {', '.join(missing)}")
    if not preds:
        raise DataError("no images to evaluate")
    named = []
    for stem in sorted(preds):
        a, b = _read(preds[stem]), _read(gts[stem])
        if a.shape != b.shape:
            raise DataError(f"{stem}: shape {a.shape} vs {b.shape}")
        named.append((stem, evaluate(a, b, settings.get("luma", "analog"))))
    text = eval_csv(named)
    outdir = Path(settings["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "metrics.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(settings: dict, argv: list[str]) -> int:
    from .synth import SynthConfig, write_dataset

    size = int(settings.get("size", 128))
    count = int(settings.get("count", 20))
    if count < 1 or size < 16:
        raise UsageError("synth needs count >= 1 and size >= 16")
    stems = write_dataset(settings["outdir"], count, int(settings["seed"]), SynthConfig(height=size, width=size))
    print(f"{len(stems)} pairs in {settings['outdir']}")
    return EXIT_OK


HANDLERS = {"factorize": cmd_factorize, "enhance": cmd_enhance, "train": cmd_train,
            "eval": cmd_eval, "synth": cmd_synth}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        _setup_logging()
        command, settings = resolve_settings(argv)
        return HANDLERS[command](settings, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"rsfactor: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"rsfactor: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"rsfactor: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
