"""Command-line entry point: synth, train, eval, verify, dump-firing-rates.

Configuration is a flat ``key = value`` file merged with CLI flags (flags
win); the resolved config is echoed into the run directory together with
the sha-256 of the dataset manifest, so every run directory describes
itself. Exit codes: 0 success, 2 config/input error, 3 verification
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import eventdata as ed
from . import kernels
from .network import (CheckpointError, NetworkSpec, build_network, derive_plan,
                      load_checkpoint, save_checkpoint)
from .shrink import average_timestep, overhead_count
from .tensor import Tensor
from .training import (LossWeights, SgdState, TrainConfig, evaluate, train_epoch)
from .verify import SUITES


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# flat config file

CONFIG_SPEC = {
    "arch": ("vgg9", str),
    "width_scale": (8, int),
    "stage_timesteps": ("8,6,4,2", str),
    "lambda": ("", str),
    "epochs": (100, int),
    "batch": (64, int),
    "lr0": (0.1, float),
    "momentum": (0.9, float),
    "weight_decay": (1e-3, float),
    "tau": (2.0, float),
    "theta": (1.0, float),
    "surrogate_a": (1.0, float),
    "seed": (0, int),
    "data_dir": ("", str),
    "out_dir": ("ssnn-run", str),
    "dtype": ("f32", str),
    "delta_ms": (10.0, float),
}


def parse_config_file(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in CONFIG_SPEC:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        _, typ = CONFIG_SPEC[key]
        try:
            values[key] = typ(val)
        except ValueError as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from e
    return values


def resolve_config(args) -> dict:
    cfg = {k: default for k, (default, _) in CONFIG_SPEC.items()}
    if getattr(args, "config", None):
        cfg.update(parse_config_file(args.config))
    for key in CONFIG_SPEC:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    return cfg


def echo_config(cfg: dict, out_dir: Path):
    lines = [f"{k} = {cfg[k]!r}" if isinstance(cfg[k], str) else f"{k} = {cfg[k]}"
             for k in CONFIG_SPEC]
    (out_dir / "config.resolved").write_text("\n".join(lines) + "\n")


def _parse_int_list(text, what):
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip() != "")
    except ValueError as e:
        raise ConfigError(f"bad {what} list {text!r}: {e}") from e


def _parse_float_list(text, what):
    try:
        return tuple(float(v) for v in str(text).split(",") if v.strip() != "")
    except ValueError as e:
        raise ConfigError(f"bad {what} list {text!r}: {e}") from e


def _apply_threads(n):
    if n is None:
        return
    import threadpoolctl

    global _THREAD_LIMIT  # keep the limiter alive for the process lifetime
    _THREAD_LIMIT = threadpoolctl.threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    streams, labels = ed.synth_moving_bars(
        args.n, classes=args.classes, size=args.size, t_frames=args.frames,
        seed=args.seed, delta_ms=args.delta_ms)
    train_idx, test_idx = ed.split(labels, seed=args.seed)
    ed.write_dataset(out, streams, labels, train_idx, test_idx)
    print(f"dataset={out} train={len(train_idx)} test={len(test_idx)} "
          f"manifest_sha256={ed.manifest_digest(out)}")
    return 0


def _ensure_dataset(cfg, args):
    data_dir = cfg["data_dir"] or str(Path(cfg["out_dir"]) / "data")
    root = Path(data_dir)
    if (root / "manifest.txt").exists():
        return root
    if not getattr(args, "synth", False):
        raise ConfigError(
            f"no dataset manifest under {root}; pass --data-dir or --synth"
        )
    streams, labels = ed.synth_moving_bars(
        args.synth_n, size=args.synth_size, t_frames=args.synth_frames,
        seed=cfg["seed"], delta_ms=cfg["delta_ms"])
    train_idx, test_idx = ed.split(labels, seed=cfg["seed"])
    ed.write_dataset(root, streams, labels, train_idx, test_idx)
    return root


def _resolve_weights(cfg, n_heads, unconstrained) -> LossWeights:
    if cfg["lambda"]:
        values = _parse_float_list(cfg["lambda"], "lambda")
        if len(values) != n_heads:
            raise ConfigError(
                f"{len(values)} loss weights for {n_heads} stage heads"
            )
        try:
            return LossWeights(values, unconstrained=unconstrained)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    return LossWeights.default(n_heads)


def _metrics_header(n_heads):
    cols = ["epoch", "lr"]
    cols += [f"loss_stage_{i + 1}" for i in range(n_heads)]
    cols += [f"acc_stage_{i + 1}" for i in range(n_heads)]
    cols.append("acc_final_test")
    return ",".join(cols)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _apply_threads(args.threads)
    timesteps = _parse_int_list(cfg["stage_timesteps"], "stage_timesteps")
    try:
        plan = derive_plan(cfg["arch"], timesteps)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if cfg["dtype"] not in ("f32", "f64"):
        raise ConfigError(f"dtype must be f32 or f64, got {cfg['dtype']!r}")

    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out_dir)

    data_root = _ensure_dataset(cfg, args)
    (out_dir / "provenance.txt").write_text(
        f"dataset_manifest_sha256={ed.manifest_digest(data_root)}\n"
        f"kernel_backend={kernels.BACKEND}\n"
    )

    t1 = plan.timesteps[0]
    train_x, train_y = ed.load_frames(data_root, "train", cfg["delta_ms"], t1)
    test_x, test_y = ed.load_frames(data_root, "test", cfg["delta_ms"], t1)
    classes = int(max(train_y.max(), test_y.max())) + 1
    dt = np.float32 if cfg["dtype"] == "f32" else np.float64
    train_x = train_x.astype(dt)
    test_x = test_x.astype(dt)

    weights = _resolve_weights(cfg, plan.n_stages, args.lambda_unconstrained)
    spec = NetworkSpec(
        arch=cfg["arch"], plan=plan, classes=classes,
        width_scale=cfg["width_scale"], in_channels=train_x.shape[2],
        tau=cfg["tau"], theta=cfg["theta"], surrogate_a=cfg["surrogate_a"],
        dtype=cfg["dtype"])
    model = build_network(spec, seed=cfg["seed"])
    tcfg = TrainConfig(
        lr0=cfg["lr0"], epochs=cfg["epochs"], batch=cfg["batch"],
        momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
        seed=cfg["seed"], dtype=cfg["dtype"])

    counts = model.param_counts()
    print(f"average_timestep={average_timestep(plan)} w_add={overhead_count(plan)} "
          f"params={counts['total']} lambda={list(weights.values)} "
          f"backend={kernels.BACKEND}")

    n_heads = plan.n_stages
    state = SgdState()
    best_acc, best_epoch = -1.0, -1
    metrics_lines = [_metrics_header(n_heads)]
    timing_lines = ["epoch,wall_seconds"]
    for epoch in range(tcfg.epochs):
        em = train_epoch(model, train_x, train_y, tcfg, weights, epoch, state)
        accs = evaluate(model, test_x, test_y, batch=tcfg.batch)
        final_acc = accs[-1]
        row = [str(epoch), repr(em.lr)]
        row += [repr(v) for v in em.losses]
        row += [repr(v) for v in em.train_acc]
        row.append(repr(final_acc))
        metrics_lines.append(",".join(row))
        timing_lines.append(f"{epoch},{em.wall_seconds:.3f}")
        if final_acc > best_acc:
            best_acc, best_epoch = final_acc, epoch
            save_checkpoint(model, out_dir / "ckpt_best.ssnn")
        print(f"epoch={epoch} lr={em.lr:g} loss={em.losses[-1]:.4f} "
              f"test_acc={final_acc:.4f}")

    (out_dir / "metrics.csv").write_text("\n".join(metrics_lines) + "\n")
    (out_dir / "timing.csv").write_text("\n".join(timing_lines) + "\n")
    save_checkpoint(model, out_dir / "ckpt_final.ssnn")
    print(f"best_test_acc={best_acc:.4f} at_epoch={best_epoch} out_dir={out_dir}")
    return 0


def _aggregate_firing_rates(model, frames, batch):
    sums, total = {}, 0
    order = []
    for lo in range(0, len(frames), batch):
        xb = np.ascontiguousarray(frames[lo:lo + batch].transpose(1, 0, 2, 3, 4))
        capture = []
        model._forward(Tensor(xb), with_ecs=False, capture=capture)
        total += xb.shape[0] * xb.shape[1]
        for name, s in capture:
            if name not in sums:
                sums[name] = np.zeros(s.shape[2:], dtype=np.float64)
                order.append(name)
            sums[name] += s.sum(axis=(0, 1))
    return [(name, sums[name] / total) for name in order]


def _write_rates_csv(rates, path):
    lines = ["layer,channel,row,col,rate"]
    for name, rate in rates:
        c, h, w = rate.shape
        for ci in range(c):
            for yi in range(h):
                for xi in range(w):
                    lines.append(f"{name},{ci},{yi},{xi},{float(rate[ci, yi, xi])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_eval(args) -> int:
    _apply_threads(args.threads)
    try:
        model = load_checkpoint(args.checkpoint)
    except (CheckpointError, OSError) as e:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {e}") from e
    if args.arch and args.arch != model.spec.arch:
        raise ConfigError(
            f"checkpoint is {model.spec.arch!r} but --arch {args.arch!r} given"
        )
    model.eval()
    frames, labels = ed.load_frames(args.data_dir, args.split, args.delta_ms,
                                    model.plan.timesteps[0])
    frames = frames.astype(model.fc_w.data.dtype)
    accs = evaluate(model, frames, labels, batch=args.batch)
    report = {"split": args.split, "n": int(len(labels)),
              "final_head_acc": accs[-1]}
    for i, acc in enumerate(accs[:-1]):
        report[f"ec{i + 1}_acc"] = acc

    telemetry = {}
    for lo in range(0, len(frames), args.batch):
        xb = np.ascontiguousarray(
            frames[lo:lo + args.batch].transpose(1, 0, 2, 3, 4))
        per_stage = model.spike_telemetry(Tensor(xb))
        for st, d in per_stage.items():
            agg = telemetry.setdefault(st, {"spikes": 0.0, "synops": 0.0})
            agg["spikes"] += d["spikes"]
            agg["synops"] += d["synops"]
    for st in sorted(telemetry):
        report[f"stage{st + 1}_spikes"] = telemetry[st]["spikes"]
        report[f"stage{st + 1}_synops"] = telemetry[st]["synops"]
    print(json.dumps(report, sort_keys=True))

    if args.dump_firing_rates:
        rates = _aggregate_firing_rates(model, frames, args.batch)
        _write_rates_csv(rates, args.dump_firing_rates)
    return 0


def cmd_verify(args) -> int:
    results = SUITES[args.suite]()
    all_pass = True
    for r in results:
        print(json.dumps(r.as_dict(), sort_keys=True))
        all_pass &= r.passed
    return 0 if all_pass else 3


def cmd_dump_firing_rates(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
    except (CheckpointError, OSError) as e:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {e}") from e
    model.eval()
    frames, _ = ed.load_frames(args.data_dir, args.split, args.delta_ms,
                               model.plan.timesteps[0])
    frames = frames.astype(model.fc_w.data.dtype)
    rates = _aggregate_firing_rates(model, frames, args.batch)
    _write_rates_csv(rates, args.out)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_config_flags(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--arch", choices=["vgg9", "resnet18", "custom"])
    p.add_argument("--width-scale", dest="width_scale", type=int)
    p.add_argument("--stage-timesteps", dest="stage_timesteps")
    p.add_argument("--lambda", dest="lambda")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--surrogate-a", dest="surrogate_a", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--dtype", choices=["f32", "f64"])
    p.add_argument("--delta-ms", dest="delta_ms", type=float)


def build_parser():
    parser = argparse.ArgumentParser(prog="ssnn")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic moving-bars dataset")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta-ms", dest="delta_ms", type=float, default=10.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a shrinking-timestep SNN")
    _add_config_flags(p)
    p.add_argument("--threads", type=int, default=None,
                   help="limit BLAS thread pools (1 for strict determinism)")
    p.add_argument("--synth", action="store_true",
                   help="generate a synthetic dataset if data_dir has none")
    p.add_argument("--synth-n", type=int, default=500)
    p.add_argument("--synth-size", type=int, default=16)
    p.add_argument("--synth-frames", type=int, default=8)
    p.add_argument("--lambda-unconstrained", action="store_true",
                   help="drop the sum-to-1 constraint on the loss weights")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", dest="data_dir", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--delta-ms", dest="delta_ms", type=float, default=10.0)
    p.add_argument("--arch", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--dump-firing-rates", dest="dump_firing_rates", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run a verification suite")
    p.add_argument("suite", choices=sorted(SUITES))
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("dump-firing-rates", help="per-layer mean spike rates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", dest="data_dir", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--delta-ms", dest="delta_ms", type=float, default=10.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_firing_rates)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ed.EvstError, CheckpointError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
