"""Command-line entry point: ``ossir {train,eval,infer,bench,count,synth}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, ppm
from .bench import DEFAULT_SIZES, bench_scaling
from .data import RainParams, make_dataset
from .errors import ConfigError
from .model import ModelConfig, build, count_flops, parse_kv
from .tensor import Tensor, no_grad
from .train import TrainConfig, evaluate, train

REFERENCE_PARAMS_M = 10.50
REFERENCE_GFLOPS = 20.5

PRESETS = {
    "real_sr": ModelConfig.real_sr,
    "sisr": ModelConfig.sisr,
    "derain": ModelConfig.derain,
    "tiny": ModelConfig.tiny,
}


def _split_overrides(pairs: list[str]) -> dict[str, str]:
    kv = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip()] = v.strip()
    return kv


def load_configs(args) -> tuple[ModelConfig, TrainConfig, dict[str, str]]:
    """Resolve preset -> config file -> ``--set`` overrides -> ``--seed``.

    Keys are routed to the model or trainer config by name; ``data.*`` keys
    are returned separately for the dataset builder.
    """
    kv: dict[str, str] = {}
    if getattr(args, "config", None):
        kv.update(parse_kv(Path(args.config).read_text()))
    kv.update(_split_overrides(getattr(args, "set", None) or []))
    model_fields = set(vars(ModelConfig()))
    train_fields = set(vars(TrainConfig()))
    model_kv = {k: v for k, v in kv.items() if k in model_fields}
    train_kv = {k: v for k, v in kv.items() if k in train_fields and k not in model_fields}
    data_kv = {k[5:]: v for k, v in kv.items() if k.startswith("data.")}
    unknown = set(kv) - model_fields - train_fields - {f"data.{k}" for k in data_kv}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    mcfg = PRESETS[args.preset]().updated(model_kv)
    tcfg = TrainConfig().updated(train_kv)
    if args.seed is not None:
        mcfg.seed = args.seed
        tcfg.seed = args.seed
    mcfg.validate()
    tcfg.validate()
    return mcfg, tcfg, data_kv


def _dataset(mcfg: ModelConfig, data_kv: dict[str, str], seed: int, split: str):
    count = int(data_kv.get("count", 32)) if split == "train" else int(data_kv.get("eval_count", 8))
    size = int(data_kv.get("size", 64))
    rain = RainParams(**{k: float(data_kv[k]) for k in vars(RainParams()) if k in data_kv})
    # evaluation images come from a disjoint seed stream
    return make_dataset(count, size, mcfg.task, seed if split == "train" else seed + 1_000_003, rain)


def cmd_train(args) -> int:
    mcfg, tcfg, data_kv = load_configs(args)
    model = build(mcfg)
    ds = _dataset(mcfg, data_kv, tcfg.seed, "train")
    ev = _dataset(mcfg, data_kv, tcfg.seed, "eval")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(model, ds, tcfg, ev, out / "log.csv", out / "model.vmir")
    f = res.final
    print(f"trained {tcfg.iterations} iterations in {res.seconds:.1f} s")
    print(f"eval psnr {f.psnr:.3f} dB (input {f.baseline_psnr:.3f}), ssim {f.ssim:.4f} (input {f.baseline_ssim:.4f})")
    return 0


def cmd_eval(args) -> int:
    model = checkpoint.load(args.checkpoint)
    _, _, data_kv = load_configs(args)
    seed = args.seed if args.seed is not None else 0
    ev = _dataset(model.config, data_kv, seed, "eval")
    r = evaluate(model, ev)
    print(f"psnr,{r.psnr:.4f}\nssim,{r.ssim:.5f}\ninput_psnr,{r.baseline_psnr:.4f}\ninput_ssim,{r.baseline_ssim:.5f}")
    return 0


def cmd_infer(args) -> int:
    model = checkpoint.load(args.checkpoint)
    img = ppm.read_ppm(args.input).to_float()
    h, w = img.shape[1:]
    ph, pw = -h % 8, -w % 8
    x = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect") if ph or pw else img
    with no_grad():
        y = model(Tensor(x[None].astype(model.config.np_dtype))).data[0]
    s = y.shape[1] // x.shape[1]
    ppm.write_ppm(args.output, np.clip(y[:, :h * s, :w * s], 0.0, 1.0))
    return 0


def cmd_bench(args) -> int:
    sizes = DEFAULT_SIZES if not args.sizes else [tuple(int(v) for v in s.split("x")) for s in args.sizes]
    res = bench_scaling(sizes, channels=args.channels, repeats=args.repeats, seed=args.seed or 0)
    text = res.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    print(f"# log-log slope {res.slope:.3f}; ratios " + " ".join(f"{r:.2f}" for r in res.ratios))
    return 0


def cmd_count(args) -> int:
    mcfg, _, _ = load_configs(args)
    h, w = args.size
    rep = count_flops(build(mcfg), (h, w))
    print(rep.format(REFERENCE_PARAMS_M, REFERENCE_GFLOPS) if args.preset == "real_sr" else rep.format())
    return 0


def cmd_synth(args) -> int:
    mcfg, tcfg, data_kv = load_configs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, pair in enumerate(_dataset(mcfg, data_kv, tcfg.seed, args.split)):
        ppm.write_ppm(out / f"{i:03d}_lq.ppm", pair.lq)
        ppm.write_ppm(out / f"{i:03d}_hq.ppm", pair.hq)
    print(f"wrote {i + 1} pairs to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ossir", description="Omni selective scan image restoration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, preset="tiny"):
        sp.add_argument("--preset", choices=sorted(PRESETS), default=preset)
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("train", help="train on the synthetic corpus")
    common(sp)
    sp.add_argument("--out", default="run")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on held-out synthetic pairs")
    common(sp)
    sp.add_argument("checkpoint")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("infer", help="restore one P6 image")
    sp.add_argument("checkpoint")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_infer)

    sp = sub.add_parser("bench", help="OSS block forward time versus pixel count")
    sp.add_argument("--sizes", nargs="*", metavar="HxW")
    sp.add_argument("--channels", type=int, default=32)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("count", help="parameter and FLOP report")
    common(sp, preset="real_sr")
    sp.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    sp.set_defaults(fn=cmd_count)

    sp = sub.add_parser("synth", help="write the synthetic dataset as PPM pairs")
    common(sp)
    sp.add_argument("--split", choices=("train", "eval"), default="train")
    sp.add_argument("--out", default="synth")
    sp.set_defaults(fn=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
