"""Command-line interface: ``samovar {synth,train,eval,interpret}``.

Every command writes its fully resolved configuration next to its outputs,
so a run can be repeated from the output directory alone.  Exit codes:
0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from .attn_stack import Model, StackConfig, count_footprint
from .errors import ConfigError, DataError, SamovarError
from .ingest import SplitSpec, load_csv, split_and_standardize, window_arrays, with_calendar_features
from .synth_bench import SynthConfig, export_csv, make_arrays, make_split
from .train_eval import (ArrayData, SynthData, TrainConfig, evaluate, metrics, repeat_last_patch,
                         train)

log = logging.getLogger("samovar")
DEFAULT_OUT = "samovar_out"


def default_out() -> str:
    return os.environ.get("SAMOVAR_OUT", DEFAULT_OUT)


def _read_config(path) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _override(base: dict, **kw) -> dict:
    out = dict(base)
    out.update({k: v for k, v in kw.items() if v is not None})
    return out


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")


# ---------------------------------------------------------------------------
# shared resolution of configs


def synth_config(args, file_cfg) -> SynthConfig:
    base = file_cfg.get("synth", {})
    base = _override(base, seed=args.seed, C=getattr(args, "channels", None),
                     L_I=getattr(args, "L_I", None), L_P=getattr(args, "L_P", None),
                     examples_per_epoch=getattr(args, "examples", None),
                     val_examples=getattr(args, "val_examples", None),
                     train_range=getattr(args, "train_range", None),
                     val_range=getattr(args, "val_range", None))
    return SynthConfig.from_dict(base)


def model_config(args, file_cfg, C, L_I, L_P, precision) -> StackConfig:
    base = dict(file_cfg.get("model", {}))
    base.update(variant=args.variant or base.get("variant", "samovar"), C=C, L_I=L_I, L_P=L_P, dtype=precision)
    if args.with_wk:
        base["use_Wk"] = True
    if args.no_dinv:
        base["use_Dinv"] = False
    if args.no_qv_norm:
        base["qv_norm"] = False
    base = _override(base, l=args.layers, d=args.hidden, H=args.heads)
    return StackConfig.from_dict(base)


def train_config(args, file_cfg) -> TrainConfig:
    base = dict(file_cfg.get("train", {}))
    if args.no_clip:
        base["clip_norm"] = None
    base = _override(base, max_epochs=args.epochs, batch_size=args.batch_size, patience=args.patience,
                     seed=args.seed, precision=args.precision, warmup_epochs=args.warmup)
    if "warmup_epochs" not in base and "max_epochs" in base:
        # short runs: keep the default warm-up but never past the last epoch
        base["warmup_epochs"] = min(TrainConfig.warmup_epochs, base["max_epochs"])
    return TrainConfig.from_dict(base)


def load_real(path, L_I, L_P, calendar=False):
    ds = load_csv(path)
    if calendar:
        ds = with_calendar_features(ds)
    train_s, val_s, test_s, spec = split_and_standardize(ds, SplitSpec())
    return ds, train_s, val_s, test_s, spec


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    file_cfg = _read_config(args.config)
    cfg = synth_config(args, file_cfg)  # validates before anything is written
    out = args.out or default_out()
    os.makedirs(out, exist_ok=True)
    for split, n in (("train", cfg.examples_per_epoch), ("val", cfg.val_examples)):
        export_csv(make_split(cfg, split, n), os.path.join(out, f"{split}.csv"),
                   os.path.join(out, f"processes_{split}.json"))
    _write_json(os.path.join(out, "resolved_config.json"), {"command": "synth", "synth": cfg.to_dict()})
    print(f"wrote synthetic splits to {out}")
    return 0


def _data_for_training(args, file_cfg, L_I, L_P):
    if args.data:
        _, tr, va, te, spec = load_real(args.data, L_I, L_P, args.calendar)
        tx, ty = window_arrays(tr, L_I, L_P, 1)
        vx, vy = window_arrays(va, L_I, L_P, L_P)
        C = tr.values.shape[1]
        return ArrayData(tx, ty, vx, vy, seed=args.seed or 0), C, {"data": args.data, "calendar": args.calendar,
                                                                     "mean": np.asarray(spec.mean).tolist(),
                                                                     "std": np.asarray(spec.std).tolist()}
    scfg = synth_config(args, file_cfg)
    return SynthData(scfg, resample=not args.fixed_pool), scfg.C, {"synth": scfg.to_dict(),
                                                                    "resample": not args.fixed_pool}


def cmd_train(args) -> int:
    file_cfg = _read_config(args.config)
    tcfg = train_config(args, file_cfg)
    if args.data:
        L_I = args.L_I or file_cfg.get("data", {}).get("L_I", 512)
        L_P = args.L_P or file_cfg.get("data", {}).get("L_P", 96)
    else:
        scfg = synth_config(args, file_cfg)
        L_I, L_P = scfg.L_I, scfg.L_P
    data, C, data_meta = _data_for_training(args, file_cfg, L_I, L_P)
    mcfg = model_config(args, file_cfg, C, L_I, L_P, tcfg.precision)
    out = args.out or default_out()
    os.makedirs(out, exist_ok=True)
    resolved = {"command": "train", "model": mcfg.to_dict(), "train": tcfg.to_dict(),
                "data": {**data_meta, "L_I": L_I, "L_P": L_P}}
    _write_json(os.path.join(out, "resolved_config.json"), resolved)
    model = Model(mcfg, seed=tcfg.seed)
    params, flops = count_footprint(mcfg, model.w)
    print(f"{mcfg.variant}: {params} parameters, {flops} multiply-adds per forward")
    result = train(model, data, tcfg, log_path=os.path.join(out, "metrics.jsonl"),
                   on_epoch=lambda r: print(f"epoch {r.epoch:3d}  train {r.train_mse:.5f}  "
                                            f"val {r.val_mse:.5f}  lr {r.lr:.2e}", flush=True))
    ckpt.save(os.path.join(out, "model.smvw"), result.best_weights,
              {"model": mcfg.to_dict(), "data": resolved["data"]})
    with open(os.path.join(out, "loss_curve.dat"), "w", encoding="utf-8") as fh:
        fh.write("# epoch train_mse val_mse\n")
        for r in result.metrics:
            fh.write(f"{r.epoch} {r.train_mse!r} {r.val_mse!r}\n")
    with open(os.path.join(out, "loss_curve.csv"), "w", encoding="utf-8") as fh:
        fh.write("epoch,train_mse,val_mse,val_mae,lr\n")
        for r in result.metrics:
            fh.write(f"{r.epoch},{r.train_mse!r},{r.val_mse!r},{r.val_mae!r},{r.lr!r}\n")
    print(f"best epoch {result.best_epoch} val MSE {result.best_val_mse:.5f}; outputs in {out}")
    return 0


def load_model(path, precision="float64") -> Model:
    tensors = ckpt.load(path)
    side = ckpt.load_config(path)
    mcfg = dict(side["model"])
    mcfg["dtype"] = precision
    model = Model(StackConfig.from_dict(mcfg))
    ckpt.assign(model.w, tensors)
    return model, side


def _eval_windows(args, model, side):
    cfg = model.cfg
    if args.data:
        _, tr, va, te, _ = load_real(args.data, cfg.L_I, cfg.L_P, side.get("data", {}).get("calendar", False))
        split = {"train": tr, "val": va, "test": te}[args.split]
        return window_arrays(split, cfg.L_I, cfg.L_P, cfg.L_P)
    synth = side.get("data", {}).get("synth")
    if synth is None:
        raise ConfigError("checkpoint was not trained on synthetic data; pass --data")
    scfg = SynthConfig.from_dict(synth)
    n = min(scfg.examples_per_epoch, 1024) if args.split == "train" else scfg.val_examples
    return make_arrays(scfg, args.split, n)


def cmd_eval(args) -> int:
    model, side = load_model(args.checkpoint)
    x, y = _eval_windows(args, model, side)
    mse, mae = evaluate(model, x, y, model.cfg.L_P)
    result = {"split": args.split, "windows": int(len(x)), "mse": mse, "mae": mae}
    if args.baseline:
        bmse, bmae = metrics(repeat_last_patch(x, model.cfg.L_P), y)
        result["repeat_last"] = {"mse": bmse, "mae": bmae}
    out = args.out or default_out()
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, f"eval_{args.split}.json"), result)
    print(json.dumps(result))
    return 0


def cmd_interpret(args) -> int:
    from . import interpret as it
    model, side = load_model(args.checkpoint)
    x, _ = _eval_windows(args, model, side)
    if not 0 <= args.window_index < len(x):
        raise ConfigError(f"window index {args.window_index} outside [0, {len(x)})")
    window = x[args.window_index]
    out = args.out or default_out()
    os.makedirs(out, exist_ok=True)
    meta = {"window_index": args.window_index, "variant": model.cfg.variant,
            "axes": ["output_patch", "source_patch", "channel_out", "channel_in"]}
    if model.cfg.variant == "lintrans":
        att = it.lintrans_attention_map(model, window)
        it.export_matrix_csv(os.path.join(out, "attention_avg.csv"), att, {**meta, "axes": ["channel", "t", "i"]})
        order = it.deinterleave_order(att.shape[-1])
        it.export_matrix_csv(os.path.join(out, "attention_avg_deinterleaved.csv"), att[:, order][:, :, order],
                             {**meta, "axes": ["channel", "t", "i"], "order": order.tolist()})
        it.export_matrix_json(os.path.join(out, "attention_avg.json"), att, meta)
        print(f"wrote averaged attention map to {out}")
        return 0
    if model.cfg.variant != "samovar":
        raise ConfigError("interpretation exports are available for SAMoVAR and LinTrans checkpoints")
    heat = it.contribution_heatmap(model, window)
    it.export_matrix_csv(os.path.join(out, "heatmap.csv"), heat, meta)
    it.export_matrix_json(os.path.join(out, "heatmap.json"), heat, meta)
    res = model.forward(window[None])
    X1 = res.X1.data
    stats = [it.pruning_stats(model, X1[c]) for c in range(model.cfg.C)]
    _write_json(os.path.join(out, "pruning_stats.json"), stats)
    t = args.t if args.t is not None else X1.shape[1] - 1
    j = args.j if args.j is not None else max(0, t - 4)
    for c in range(model.cfg.C):
        paths, vw = it.paths_between(model, X1[c], t, j, head=args.head)
        with open(os.path.join(out, f"paths_ch{c}_{j}_to_{t}.dot"), "w", encoding="utf-8") as fh:
            fh.write(it.paths_to_dot(paths, name=f"ch{c}"))
        it.export_matrix_csv(os.path.join(out, f"C_ch{c}_{t}_{j}.csv"), vw.C_total[t - j, 0],
                             {"t": t, "j": j, "channel": c})
    print(f"wrote heatmap, paths and pruning statistics to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--out", help="output directory (default $SAMOVAR_OUT or ./samovar_out)")
    p.add_argument("--seed", type=int)


def _add_synth(p):
    p.add_argument("--channels", type=int)
    p.add_argument("--L-I", dest="L_I", type=int)
    p.add_argument("--L-P", dest="L_P", type=int)
    p.add_argument("--examples", type=int, help="synthetic examples per epoch")
    p.add_argument("--val-examples", type=int)
    p.add_argument("--train-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--val-range", type=float, nargs=2, metavar=("LO", "HI"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="samovar", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic VAR benchmark as CSV")
    _add_common(p)
    _add_synth(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model variant")
    _add_common(p)
    _add_synth(p)
    p.add_argument("--variant", choices=["samovar", "lintrans", "fixedvar"])
    p.add_argument("--data", help="CSV dataset; omit for the synthetic benchmark")
    p.add_argument("--calendar", action="store_true", help="append calendar features as channels")
    p.add_argument("--fixed-pool", action="store_true",
                   help="synthetic: reuse the same examples every epoch")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--warmup", type=int, help="warm-up epochs (default 5, capped at --epochs)")
    p.add_argument("--precision", choices=["float32", "float64"])
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--with-wk", action="store_true", help="ablation: learn key projections")
    p.add_argument("--no-dinv", action="store_true", help="ablation: drop the D^-1 output mix")
    p.add_argument("--no-qv-norm", action="store_true", help="ablation: no RMSNorm on q and v")
    p.add_argument("--no-clip", action="store_true", help="disable gradient clipping")
    p.set_defaults(func=cmd_train)

    for name, fn, helptext in (("eval", cmd_eval, "evaluate a checkpoint"),
                               ("interpret", cmd_interpret, "export VAR weights, heatmaps and paths")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", help="CSV dataset (default: the checkpoint's synthetic config)")
        p.add_argument("--split", choices=["train", "val", "test"], default="test")
        p.add_argument("--out")
        if name == "eval":
            p.add_argument("--baseline", action="store_true", help="also score the repeat-last-patch forecast")
        else:
            p.add_argument("--window-index", type=int, default=0)
            p.add_argument("--t", type=int, help="sink token (default: last)")
            p.add_argument("--j", type=int, help="source token (default: t - 4)")
            p.add_argument("--head", type=int, help="export per-head path blocks")
        p.set_defaults(func=fn)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SamovarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
