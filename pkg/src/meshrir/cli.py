"""Command-line entry point: ``meshrir <subcommand> ...``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import yaml

from . import gan, pipeline, shoebox, training
from .mesh import load_mesh, save_mesh, simplify_mesh

log = logging.getLogger("meshrir")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

DATASET_DEFAULTS = {"scenes": 8, "irs_per_scene": 8, "seed": 0, "max_order": 30,
                    "val_fraction": 0.2, "workers": 1,
                    "absorption_range": list(shoebox.ABSORPTION_RANGE)}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def load_config(path) -> dict:
    """YAML file with optional ``training``, ``model`` and ``dataset`` sections."""
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise training.ConfigError([f"{path}: top level must be a mapping"])
    unknown = sorted(set(data) - {"training", "model", "dataset"})
    if unknown:
        raise training.ConfigError([f"{k}: unknown section" for k in unknown])
    return data


def _emit(report: dict, table: str, path) -> None:
    print(table)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(report, indent=1, sort_keys=True, default=str) + "\n")


def _add_overrides(p, names, types):
    for name in names:
        kind = types.get(name, str)
        flags = dict.fromkeys(["--" + name.replace("_", "-"), "--" + name])
        if kind in ("tuple", "pair"):
            p.add_argument(*flags, dest=name, nargs="+", type=float, default=None)
        else:
            p.add_argument(*flags, dest=name, type=kind, default=None)


_TRAIN_TYPES = {"batch_size": int, "learning_rate": float, "lr_decay": float, "lr_decay_every": int,
                "epochs": int, "g_steps_per_d_step": int, "lambda_edr": float, "lambda_mse": float,
                "band_weights": "tuple", "variant": str, "seed": int, "max_g_steps": int,
                "checkpoint_every": int, "target_faces": int, "weld_epsilon": float}
_MODEL_TYPES = {"gen_channels": "tuple", "disc_channels": "tuple", "base_length": int,
                "cond_channels": int, "encoder_hidden": int, "encoder_stages": int,
                "keep_ratio": float}
_DATASET_TYPES = {"scenes": int, "irs_per_scene": int, "seed": int, "max_order": int,
                  "val_fraction": float, "workers": int, "absorption_range": "pair"}


def build_training_config(args, config: dict) -> training.TrainingConfig:
    data = dict(config.get("training") or {})
    model = dict(data.pop("model", None) or {})
    model.update(config.get("model") or {})
    for name in _TRAIN_TYPES:
        v = getattr(args, name, None)
        if v is not None:
            data[name] = v
    for name in _MODEL_TYPES:
        v = getattr(args, name, None)
        if v is not None:
            model[name] = [int(c) for c in v] if _MODEL_TYPES[name] == "tuple" else v
    problems = [f"model.{k}: unknown key" for k in sorted(set(model) - {f.name for f in fields(gan.ModelConfig)})]
    if problems:
        raise training.ConfigError(problems)
    if model:
        base = training.TrainingConfig().model.to_dict()
        base.update(model)
        try:
            data["model"] = gan.ModelConfig(**base)
        except gan.ModelError as exc:
            raise training.ConfigError([f"model: {exc}"]) from exc
    return training.TrainingConfig.from_dict(data).validate()


def cmd_simplify(args, config):
    mesh = load_mesh(args.input)
    out = simplify_mesh(mesh, args.target)
    save_mesh(out, args.output)
    report = {"input": str(args.input), "output": str(args.output), "faces_in": mesh.n_faces,
              "faces_out": out.n_faces, "target": args.target}
    _emit(report, f"{args.input}: {mesh.n_faces} -> {out.n_faces} faces -> {args.output}", args.report)


def cmd_dataset(args, config):
    opts = dict(DATASET_DEFAULTS)
    section = config.get("dataset") or {}
    unknown = sorted(set(section) - set(DATASET_DEFAULTS))
    if unknown:
        raise training.ConfigError([f"dataset.{k}: unknown key" for k in unknown])
    opts.update(section)
    for name in _DATASET_TYPES:
        v = getattr(args, name, None)
        if v is not None:
            opts[name] = v
    if len(opts["absorption_range"]) != 2:
        raise training.ConfigError(["absorption_range: need two values lo hi"])
    manifest = shoebox.build_dataset(opts["scenes"], opts["irs_per_scene"], opts["seed"], args.out,
                                     max_order=opts["max_order"], val_fraction=opts["val_fraction"],
                                     workers=opts["workers"],
                                     absorption_range=tuple(opts["absorption_range"]))
    n_rows = sum(1 for _ in open(manifest, encoding="utf-8"))
    report = dict(opts, manifest=str(manifest), rows=n_rows)
    _emit(report, f"wrote {n_rows} rows over {opts['scenes']} scenes -> {manifest}", args.report)


def cmd_train(args, config):
    cfg = build_training_config(args, config)
    cks = training.train(args.manifest, cfg, args.out)
    log_rows = training.read_loss_log(Path(args.out) / "loss_log.csv")
    last = log_rows[-1] if log_rows else {}
    report = {"config": cfg.to_dict(), "checkpoints": [str(c) for c in cks],
              "steps": int(last.get("step", 0)), "final": last}
    table = "\n".join([f"variant {cfg.variant}, {report['steps']} generator steps"]
                      + [f"{k:>7} {v:.6g}" for k, v in last.items() if k not in ("epoch", "step")]
                      + [f"checkpoint {c}" for c in cks])
    _emit(report, table, args.report)


def cmd_generate(args, config):
    sources = args.source
    listeners = args.listener
    result = pipeline.generate_ir(args.mesh, sources, listeners, args.checkpoint, args.out,
                                  target_faces=args.target_faces)
    report = {"mesh": str(args.mesh), "checkpoint": str(args.checkpoint),
              "outputs": [str(p) for p in result.paths], "encode_calls": result.encode_calls,
              "generate_calls": result.generate_calls}
    _emit(report, "\n".join(f"wrote {p}" for p in result.paths), args.report)


def cmd_eval(args, config):
    rep = pipeline.evaluate(args.manifest, args.checkpoint, spectra=args.spectra)
    if args.plots and rep.spectra:
        pipeline.plot_spectra(rep, args.plots)
    _emit(rep.to_dict(), rep.table(), args.report)


def cmd_bench(args, config):
    rep = pipeline.bench(args.mesh, args.n_irs, args.checkpoint, seed=args.seed)
    _emit(rep.to_dict(), rep.table(), args.report)


def cmd_render(args, config):
    res = pipeline.render_speech(args.speech, args.ir, args.out)
    report = {"output": str(res.path), "rate": res.rate, "length": res.length, "scale": res.scale}
    _emit(report, f"wrote {res.path} ({res.length} samples at {res.rate} Hz, scale {res.scale:.6g})",
          args.report)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="meshrir", description="Mesh-conditioned room impulse response generation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--report", default=None, help="write the JSON report here")

    p = sub.add_parser("simplify", help="quadric edge-collapse simplification of an OBJ mesh")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--target", type=int, default=2000)
    common(p)
    p.set_defaults(func=cmd_simplify)

    p = sub.add_parser("dataset", help="build a shoebox corpus with image-source IRs")
    p.add_argument("--out", required=True)
    _add_overrides(p, _DATASET_TYPES, _DATASET_TYPES)
    common(p)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train encoder, generator and discriminator")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_overrides(p, _TRAIN_TYPES, _TRAIN_TYPES)
    _add_overrides(p, _MODEL_TYPES, _MODEL_TYPES)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="predict IR WAVs for source/listener pairs in a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", nargs=3, type=float, action="append", required=True, metavar=("X", "Y", "Z"))
    p.add_argument("--listener", nargs=3, type=float, action="append", required=True, metavar=("X", "Y", "Z"))
    p.add_argument("--out", required=True, help=".wav file for one pair, else a directory")
    p.add_argument("--target-faces", type=int, default=2000)
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="acoustic-metric errors of a checkpoint on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--spectra", type=int, default=0, help="store power spectra for the first N rows")
    p.add_argument("--plots", default=None, help="directory for spectrum CSV/PNG overlays")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time each pipeline stage")
    p.add_argument("--mesh", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-irs", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("render", help="convolve dry speech with an IR")
    p.add_argument("--speech", required=True)
    p.add_argument("--ir", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        args.func(args, config)
    except (training.ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except pipeline.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - reported, not swallowed
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
