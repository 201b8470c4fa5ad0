"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 numeric abort during
training, 3 partial per-file I/O failure. The LLFLOW_THREADS environment
variable caps worker parallelism for per-image commands.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .data import (DataError, SynthSpec, load_pair_dataset, read_png,
                   synth_generate, to_uint8, to_unit, write_png)
from .inference import EnhanceOptions, enhance, grad_activation_map, score_nll
from .metrics import psnr, ssim
from .training import NonFiniteLossError, load_model, train


def _threads():
    try:
        return max(1, int(os.environ.get("LLFLOW_THREADS", "1")))
    except ValueError:
        return 1


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for override in args.set or []:
        if "=" not in override:
            raise ConfigError(f"--set expects section.key=value, got {override!r}")
        key, value = override.split("=", 1)
        cfg.set_key(key, value)
    cfg.validate()
    return cfg


def cmd_train(args):
    try:
        cfg = _load_run_config(args)
        pairs = load_pair_dataset(cfg.data.root) if not args.dataset else load_pair_dataset(args.dataset)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        path = train(cfg, pairs, args.out, resume=args.resume, log=print)
    except NonFiniteLossError as exc:
        print(f"aborted: {exc} (last finite state: {exc.checkpoint_path})", file=sys.stderr)
        return 2
    print(f"checkpoint written to {path}")
    return 0


def _input_files(path):
    if os.path.isdir(path):
        return [os.path.join(path, f) for f in sorted(os.listdir(path)) if f.endswith(".png")]
    return [path]


def cmd_enhance(args):
    try:
        _, model = load_model(args.checkpoint)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    opts = EnhanceOptions(mode=args.mode, num_samples=args.samples,
                          temperature=args.temperature, z_offset=args.z_offset)
    try:
        opts.validate()
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    files = _input_files(args.input)
    if not files:
        print(f"error: no PNG inputs under {args.input}", file=sys.stderr)
        return 1
    out_dir = args.out or (args.input if os.path.isdir(args.input) else os.path.dirname(args.input) or ".")
    os.makedirs(out_dir, exist_ok=True)

    def work(item):
        idx, path = item
        try:
            img = to_unit(read_png(path))
            rng = np.random.default_rng(args.seed + idx)
            out = enhance(img, model, opts, rng=rng)
            stem = os.path.splitext(os.path.basename(path))[0]
            dest = os.path.join(out_dir, f"{stem}_enhanced.png")
            write_png(dest, to_uint8(out))
            return dest, None
        except Exception as exc:
            return path, exc

    failed = 0
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        for dest, err in pool.map(work, enumerate(files)):
            if err is not None:
                print(f"error: {dest}: {err}", file=sys.stderr)
                failed += 1
            else:
                print(dest)
    return 3 if failed else 0


def cmd_eval(args):
    try:
        _, model = load_model(args.checkpoint)
        pairs = load_pair_dataset(args.dataset)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    def work(pair):
        out = enhance(pair.low, model)
        _, nll_dim = score_nll(pair.low, out, model)
        return pair.id, psnr(out, pair.ref), ssim(out, pair.ref), nll_dim

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        rows = list(pool.map(work, pairs))
    out_csv = args.out or "eval.csv"
    with open(out_csv, "w", encoding="utf-8") as fh:
        fh.write("# psnr_db: RGB MSE; ssim: Rec.601 luminance, 11x11 gaussian window\n")
        fh.write("image_id,psnr_db,ssim,nll_per_dim\n")
        for rid, p, s, n in rows:
            fh.write(f"{rid},{p!r},{s!r},{n!r}\n")
    mp = float(np.mean([r[1] for r in rows]))
    ms = float(np.mean([r[2] for r in rows]))
    mn = float(np.mean([r[3] for r in rows]))
    print(f"mean_psnr_db={mp:.4f} mean_ssim={ms:.4f} mean_nll_per_dim={mn:.4f} ({out_csv})")
    return 0


def cmd_score(args):
    try:
        _, model = load_model(args.checkpoint)
        low = to_unit(read_png(args.low))
        candidate = to_unit(read_png(args.candidate))
        raw, per_dim = score_nll(low, candidate, model)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"nll_raw={raw!r} nll_per_dim={per_dim!r}")
    return 0


def cmd_gradmap(args):
    try:
        _, model = load_model(args.checkpoint)
        low = to_unit(read_png(args.low))
        candidate = to_unit(read_png(args.candidate))
        gmap = grad_activation_map(low, candidate, model)
        write_png(args.out, to_uint8(gmap))
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(args.out)
    return 0


def cmd_synth(args):
    spec = SynthSpec(count=args.count, size=args.size, seed=args.seed,
                     content=args.content, tile_dir=args.tile_dir or "")
    try:
        synth_generate(spec, args.out)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(args.out)
    return 0


def cmd_selftest(args):
    from .diagnostics import run_selftest
    failures = 0
    for name, ok, detail in run_selftest():
        status = "PASS" if ok else "FAIL"
        print(f"[{status}] {name}" + (f" ({detail})" if detail else ""))
        failures += 0 if ok else 1
    return 0 if failures == 0 else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="llflow",
                                     description="Conditional-flow low-light image enhancement")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--dataset", help="paired dataset root (overrides data.root)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance low-light images")
    p.add_argument("checkpoint")
    p.add_argument("input", help="PNG file or directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--mode", choices=("mean", "sample"), default="mean")
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--z-offset", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="PSNR/SSIM/NLL over a paired dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out", help="metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="NLL of a candidate image")
    p.add_argument("checkpoint")
    p.add_argument("low")
    p.add_argument("candidate")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("gradmap", help="gradient activation heatmap PNG")
    p.add_argument("checkpoint")
    p.add_argument("low")
    p.add_argument("candidate")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gradmap)

    p = sub.add_parser("synth", help="generate a synthetic paired corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--content", choices=("gradients", "shapes", "tiles-from-directory"),
                   default="shapes")
    p.add_argument("--tile-dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("selftest", help="run built-in invariant checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
