"""Command-line entry point: ``lenslesskit <command> [options]``.

Every command writes ``run.json`` (the fully resolved arguments) into its
output directory; ``--config run.json`` replays it. Errors are reported as a
single JSON line on stderr with exit code 1 (bad input) or 2 (internal).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__

ENV_OUT = "LENSLESSKIT_OUT"
DEFAULT_PITCH = 62.5e-6


class UserError(Exception):
    def __init__(self, field, message):
        super().__init__(message)
        self.field = field


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError("arguments", message)


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require(path, field):
    if path is None:
        raise UserError(field, f"{field} is required")
    p = Path(path)
    if not p.exists():
        raise UserError(field, f"{p} does not exist")
    return p


def _size(text, field="image"):
    try:
        h, w = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise UserError(field, f"expected HxW, got {text!r}") from None
    if h < 0 or w < 0:
        raise UserError(field, "sizes must be non-negative")
    return h, w


# ---------------------------------------------------------------- commands

def cmd_mask(args, out):
    from .optics import MaskSpec, generate_coded_mask
    from .plotting import image_figure
    from .rasters import save_mask

    spec = MaskSpec(region_extent=(args.extent, args.extent), pinhole_count=args.count,
                    pinhole_size=args.pinhole_size, rng_seed=args.seed,
                    grid_pitch=args.grid_pitch, thickness=args.thickness)
    mask = generate_coded_mask(spec)
    save_mask(out / "mask.png", mask)
    image_figure(out / "mask_preview.png", mask.transmission, f"{args.count} pinholes")
    return {"mask": "mask.png", "open_fraction": mask.open_fraction, "samples": list(mask.transmission.shape)}


def _load_mask(path, field="mask"):
    from .rasters import load_mask

    try:
        return load_mask(_require(path, field))
    except (KeyError, ValueError) as exc:
        raise UserError(field, f"cannot read mask {path}: {exc}") from None


def _geometry(args):
    from .optics import PinholeGeometry

    return PinholeGeometry(wavelength=args.wavelength, mask_sensor_distance=args.distance,
                           pinhole_size=args.pinhole_size)


def cmd_capture(args, out):
    from .optics import NoiseSpec
    from .trainer import load_image_dir, sample_references, save_dataset, synth_capture_dataset

    mask = _load_mask(args.mask)
    if args.scenes:
        refs = load_image_dir(_require(args.scenes, "scenes"), args.size)
    else:
        refs = sample_references(args.builtin, args.size, seed=args.seed)
    for _, r in refs:
        r.pixel_pitch = args.pitch
    noise = NoiseSpec(sigma=args.noise_sigma, photons=args.photons, seed=args.seed)
    if args.n_eval > len(refs):
        raise UserError("n_eval", f"n_eval={args.n_eval} exceeds {len(refs)} references")
    ds = synth_capture_dataset(refs, mask, _geometry(args), noise, seed=args.seed,
                               n_eval=args.n_eval, boundary=args.boundary)
    save_dataset(ds, out / "dataset")
    return {"dataset": "dataset", "records": len(ds), "train": len(ds.split("train")),
            "eval": len(ds.split("eval"))}


def cmd_deconv(args, out):
    from .deconv import build_inverse_filter, deconvolve
    from .optics import psf_from_mask
    from .plotting import image_figure
    from .rasters import load_raster, save_raster

    values, meta = load_raster(_require(args.capture, "capture"))
    mask = _load_mask(args.mask)
    psf = psf_from_mask(mask, _geometry(args), values.shape[:2], args.pitch)
    if args.eps < 0:
        raise UserError("eps", "eps must be non-negative")
    filt = build_inverse_filter(psf.values / psf.values.sum(), args.eps)
    restored = deconvolve(values, filt)
    save_raster(out / "restored.png", restored, {"source": str(args.capture), "eps_rel": args.eps,
                                                 "eps_abs": filt.eps})
    image_figure(out / "restored_preview.png", np.clip(restored, 0, 1), f"eps={args.eps:g}")
    return {"restored": "restored.png", "eps_abs": filt.eps}


def _model_spec(args):
    from .blocks import ModelSpec

    if args.model:
        spec = ModelSpec.from_json(_require(args.model, "model").read_text())
    else:
        spec = ModelSpec(block_kind=args.block, embed_dims=tuple(args.embed), patch_size=args.patch,
                         mlp_ratio=args.mlp_ratio, spatial_gate=args.spatial_gate, seed=args.seed)
    return spec


def cmd_train(args, out):
    from .blocks import Reconstructor
    from .plotting import history_figure
    from .trainer import TrainConfig, load_dataset, train

    ds = load_dataset(_require(args.dataset, "dataset"))
    spec = _model_spec(args)
    X, Y = ds.arrays("train")
    if X is None:
        raise UserError("dataset", "dataset has no train records")
    spec.in_size, spec.out_size = X.shape[1:3], Y.shape[1:3]
    spec.in_channels, spec.out_channels = X.shape[3], Y.shape[3]
    cfg = TrainConfig(learning_rate=args.lr, weight_decay=args.weight_decay, batch_size=args.batch_size,
                      epochs=args.epochs, warmup_epochs=args.warmup_epochs, seed=args.seed)
    model = Reconstructor(spec)
    res = train(model, ds, cfg, out_dir=out)
    history_figure(out / "history.png", res.history)
    return {"checkpoint": f"checkpoints/epoch_{cfg.epochs:03d}", "final_loss": res.history[-1]["train_loss"],
            "params": model.param_count()}


def cmd_eval(args, out):
    from .blocks import ModelSpec, Reconstructor
    from .metrics import table4
    from .optics import psf_from_mask
    from .plotting import reconstruction_figure
    from .tensor import load_checkpoint
    from .trainer import MeanImageBaseline, RidgeBaseline, evaluate, fit_ridge_eps, load_dataset, predict

    ds = load_dataset(_require(args.dataset, "dataset"))
    reports, columns = [], {}
    X, Y = ds.arrays(args.split)
    if X is None:
        raise UserError("split", f"dataset has no {args.split!r} records")
    columns["capture"] = X
    if args.checkpoint:
        stem = Path(args.checkpoint)
        _require(stem.with_suffix(".json"), "checkpoint")
        spec_path = Path(args.model) if args.model else stem.parent.parent / "model_spec.json"
        spec = ModelSpec.from_json(_require(spec_path, "model").read_text())
        model = Reconstructor(spec)
        model.load_state_dict(load_checkpoint(stem))
        rep = evaluate(model, ds, args.split, name=spec.block_kind, param_size_mb=model.param_megabytes())
        reports.append(rep)
        columns[spec.block_kind] = np.clip(predict(model, X.astype(model.dtype)), 0, 1)
    if "mean" in args.baselines:
        m = MeanImageBaseline(ds)
        reports.append(evaluate(m, ds, args.split, name="mean-image"))
    if "ridge" in args.baselines:
        mask = _load_mask(args.mask)
        psf = psf_from_mask(mask, _geometry(args), X.shape[1:3], args.pitch)
        eps = fit_ridge_eps(ds, psf) if args.eps is None else args.eps
        m = RidgeBaseline(psf, eps)
        reports.append(evaluate(m, ds, args.split, name=f"ridge(eps={eps:.3g})"))
        columns["ridge"] = np.clip(predict(m, X), 0, 1)
    if not reports:
        raise UserError("checkpoint", "nothing to evaluate: give --checkpoint and/or --baselines")
    columns["reference"] = Y
    for rep in reports:
        slug = rep.model.split("(")[0]
        (out / f"report_{slug}.csv").write_text(rep.to_csv())
        (out / f"report_{slug}.json").write_text(rep.to_json() + "\n")
    (out / "table4.txt").write_text(table4(reports) + "\n")
    reconstruction_figure(out / "reconstructions.png", columns)
    return {"reports": [r.summary() for r in reports]}


def cmd_cost(args, out):
    from .costmodel import (ArchInput, count_mults, load_table3, table3_csv, table3_report)
    from .plotting import cost_scaling_figure, cost_table_figure

    if args.arch:
        try:
            doc = json.loads(_require(args.arch, "arch").read_text())
        except json.JSONDecodeError as exc:
            raise UserError("arch", f"invalid JSON: {exc}") from None
        configs = doc["rows"] if isinstance(doc, dict) and "rows" in doc else doc
        if isinstance(configs, dict):
            configs = [configs]
    else:
        configs = load_table3()["rows"]
    for i, c in enumerate(configs):
        for key in ("image", "size", "model", "embed"):
            if key not in c:
                raise UserError(f"arch[{i}].{key}", f"configuration {i} lacks {key!r}")
    if args.image:
        configs = [{**c, "size": list(_size(args.image))} for c in configs]
    try:
        rows = table3_report(configs, device_flops=args.tflops * 1e12)
    except ValueError as exc:
        raise UserError("arch", str(exc)) from None
    if args.precision == "fp16":
        for r in rows:
            r["selected_gb"] = r["fp16_gb"]
    (out / "cost.csv").write_text(table3_csv(rows))
    _dump(out / "cost.json", {"precision": args.precision, "tflops": args.tflops, "rows": rows})
    cost_table_figure(out / "cost_memory.png", rows)
    sides = [32, 64, 128, 256, 512]
    series = {k: [count_mults(ArchInput(k, s, s, C=3, L=512, P=4)) for s in sides]
              for k in ("vit_sa", "vit_aa", "gmlp")}
    cost_scaling_figure(out / "cost_scaling.png", sides, series)
    return {"rows": len(rows), "csv": "cost.csv"}


COMMANDS = {"mask": cmd_mask, "capture": cmd_capture, "deconv": cmd_deconv,
            "train": cmd_train, "eval": cmd_eval, "cost": cmd_cost}


# ---------------------------------------------------------------- parser

def _optics_flags(p):
    p.add_argument("--wavelength", type=float, default=500e-9)
    p.add_argument("--distance", type=float, default=2e-3, help="mask-sensor distance [m]")
    p.add_argument("--pinhole-size", type=float, default=61e-6)
    p.add_argument("--pitch", type=float, default=DEFAULT_PITCH, help="sensor pixel pitch [m]")


def build_parser():
    parser = _Parser(prog="lenslesskit", description="Lensless coded-aperture imaging toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None, help=f"output directory (default ${ENV_OUT}/<command>)")
    common.add_argument("--config", default=None, help="replay a run.json")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("mask", parents=[common], help="generate a coded aperture mask")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--pinhole-size", type=float, default=61e-6)
    p.add_argument("--extent", type=float, default=2e-3)
    p.add_argument("--grid-pitch", type=float, default=None)
    p.add_argument("--thickness", type=float, default=0.0)

    p = sub.add_parser("capture", parents=[common], help="simulate captures for a set of scenes")
    p.add_argument("--mask", required=False)
    p.add_argument("--scenes", default=None, help="directory of scene images")
    p.add_argument("--builtin", type=int, default=16, help="number of bundled-corpus crops when --scenes is absent")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--photons", type=float, default=None)
    p.add_argument("--n-eval", type=int, default=0)
    p.add_argument("--boundary", choices=["periodic", "linear"], default="periodic")
    _optics_flags(p)

    p = sub.add_parser("deconv", parents=[common], help="ridge-deconvolve one capture")
    p.add_argument("--capture")
    p.add_argument("--mask")
    p.add_argument("--eps", type=float, default=1e-2, help="relative regularisation")
    _optics_flags(p)

    p = sub.add_parser("train", parents=[common], help="train a reconstruction model")
    p.add_argument("--dataset")
    p.add_argument("--model", default=None, help="ModelSpec JSON")
    p.add_argument("--block", choices=["gmlp", "vit_sa", "vit_aa"], default="gmlp")
    p.add_argument("--embed", type=int, nargs="+", default=[128])
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--mlp-ratio", type=int, default=6)
    p.add_argument("--spatial-gate", action="store_true")
    p.add_argument("--lr", type=float, default=6e-5)
    p.add_argument("--weight-decay", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--warmup-epochs", type=int, default=3)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint and/or baselines")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint", default=None, help="checkpoint stem (without .bin/.json)")
    p.add_argument("--model", default=None, help="ModelSpec JSON (default: next to the checkpoints)")
    p.add_argument("--split", default="eval")
    p.add_argument("--baselines", nargs="*", default=[], choices=["mean", "ridge"])
    p.add_argument("--mask", default=None, help="mask for the ridge baseline")
    p.add_argument("--eps", type=float, default=None, help="ridge eps (default: fitted on train)")
    _optics_flags(p)

    p = sub.add_parser("cost", parents=[common], help="parameter/multiplication cost report")
    p.add_argument("--arch", default=None, help="JSON list of configurations (default: bundled table)")
    p.add_argument("--image", default=None, help="override the image size, HxW")
    p.add_argument("--precision", choices=["fp32", "fp16"], default="fp32")
    p.add_argument("--tflops", type=float, default=45.0)
    return parser


def _resolve(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg_path = _require(args.config, "config")
        try:
            record = json.loads(cfg_path.read_text())
        except json.JSONDecodeError as exc:
            raise UserError("config", f"invalid JSON: {exc}") from None
        if record.get("command") != args.command:
            raise UserError("config", f"run.json is for {record.get('command')!r}, not {args.command!r}")
        saved = record.get("args", {})
        known = vars(args)
        unknown = [k for k in saved if k not in known]
        if unknown:
            raise UserError(f"config.{unknown[0]}", "unknown setting in run.json")
        # saved values become defaults; flags given on this command line still win
        sp = parser._subparsers._group_actions[0].choices[args.command]
        sp.set_defaults(**{k: v for k, v in saved.items() if k not in ("config", "out", "command")})
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _resolve(argv)
        root = Path(os.environ.get(ENV_OUT, "lenslesskit_out"))
        out = Path(args.out) if args.out else root / args.command
        out.mkdir(parents=True, exist_ok=True)
        np.random.seed(args.seed)
        record = {"command": args.command, "version": __version__,
                  "args": {k: v for k, v in sorted(vars(args).items()) if k not in ("config",)}}
        _dump(out / "run.json", record)
        result = COMMANDS[args.command](args, out)
        _dump(out / "result.json", result)
        if args.verbose:
            print(json.dumps(result, sort_keys=True))
        else:
            print(str(out))
        return 0
    except UserError as exc:
        _fail(exc.field, str(exc), "user")
        return 1
    except (FileNotFoundError, ValueError, KeyError) as exc:
        msg = str(exc)
        field = msg.split(":", 1)[0] if ":" in msg and " " not in msg.split(":", 1)[0] else None
        _fail(field, msg, "user")
        return 1
    except Exception as exc:  # noqa: BLE001
        _fail(None, f"{type(exc).__name__}: {exc}", "internal")
        return 2


def _fail(field, message, kind):
    line = {"error": kind, "field": field, "message": " ".join(message.split())}
    sys.stderr.write(json.dumps(line) + "\n")


if __name__ == "__main__":
    sys.exit(main())
