"""Command-line surface.

Heavy imports happen inside ``main`` so the thread-count environment
variable can take effect before numpy loads its BLAS backend.  Set
``DEFORMNET_NUM_THREADS`` to pin OpenBLAS/OMP/MKL thread counts; kernels
are deterministic for a fixed seed and thread count.

Exit codes: 0 on success, 1 when a check fails, 2 on bad arguments or
invalid configurations.
"""

from __future__ import annotations

import argparse
import os
import sys

THREAD_ENV = "DEFORMNET_NUM_THREADS"


def _apply_thread_env() -> None:
    threads = os.environ.get(THREAD_ENV)
    if threads:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)


def _parse_shape(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must be comma-separated ints, got {text!r}")
    if len(shape) != 4:
        raise argparse.ArgumentTypeError(f"shape must be n,c,h,w, got {text!r}")
    return shape


def _parse_pixel(text: str) -> tuple[int, int]:
    try:
        y, x = (int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"pixel must be y,x ints, got {text!r}")
    return y, x


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deformnet",
        description="Deformable-convolution backbone toolkit: config generation, "
        "parameter audit, gradient and oracle checks, benchmarks, receptive-field "
        "maps, and a toy training smoke test.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="generate and validate a model config file")
    sel = p.add_mutually_exclusive_group(required=True)
    sel.add_argument("--variant", help="registry variant name (T/S/B/L/XL/H)")
    sel.add_argument("--c1", type=int, help="stage-1 channels (with --cprime/--l1/--l3)")
    sel.add_argument("--scale-from", help="origin variant to scale with --phi")
    p.add_argument("--cprime", type=int, help="group dimension")
    p.add_argument("--l1", type=int, help="stage-1/2/4 block count")
    p.add_argument("--l3", type=int, help="stage-3 block count")
    p.add_argument("--phi", type=float, default=1.0, help="composite scaling factor")
    p.add_argument("--alpha", type=float, default=1.09, help="depth scaling factor")
    p.add_argument("--beta", type=float, default=1.36, help="width scaling factor")
    p.add_argument("--name", help="config name (defaults to the selector)")
    p.add_argument("--ffn-ratio", type=int, default=4)
    p.add_argument("--layer-scale", action="store_true", help="enable per-branch layer scale")
    p.add_argument("--num-classes", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output config path")

    p = sub.add_parser("params", help="parameter count breakdown and target deviation")
    sel = p.add_mutually_exclusive_group(required=True)
    sel.add_argument("--config", help="config file")
    sel.add_argument("--variant", help="registry variant name")
    p.add_argument(
        "--enumerate-limit", type=int, default=5_000_000,
        help="build + enumerate models up to this closed-form size (cross-check)",
    )

    p = sub.add_parser("gradcheck", help="finite-difference checks across ablation rows")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-6, help="central-difference step")
    p.add_argument("--scope", choices=("op", "block", "model", "all"), default="all")
    p.add_argument("--coords", type=int, help="coordinates sampled per tensor (default: scope-dependent)")

    p = sub.add_parser("oracle", help="naive-vs-vectorized kernel comparison in ulps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--toggles", choices=("dcnv3", "dcnv2"), default="dcnv3")

    p = sub.add_parser("bench", help="micro-benchmarks with warmup discard")
    p.add_argument("--op", choices=("dcnv3", "conv2d", "block", "model"), default="dcnv3")
    p.add_argument("--shape", type=_parse_shape, default=(1, 64, 56, 56),
                   help="n,c,h,w input shape (ops) or image shape (model)")
    p.add_argument("--variant", default="T", help="model variant for --op model")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV output path (default: print rows)")

    p = sub.add_parser("erf", help="effective-receptive-field map for one pixel")
    p.add_argument("--config", required=True, help="config file")
    p.add_argument("--weights", help="optional weights file (default: seeded init)")
    p.add_argument("--stage", type=int, default=1, help="0 = stem, 1..4 = stage output")
    p.add_argument("--pixel", type=_parse_pixel, required=True, help="y,x input pixel")
    p.add_argument("--image-size", type=int, default=64, help="synthetic input side")
    p.add_argument("--input", help="optional P5 PGM image instead of synthetic noise")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", required=True, help="writes <prefix>.pgm and <prefix>.csv")

    p = sub.add_parser("train-toy", help="SGD smoke test on the synthetic 10-class task")
    p.add_argument("--config", help="config file (default: a tiny built-in config)")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="loss-curve CSV path")
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_config(args) -> int:
    from .errors import ConfigError
    from .model import ModelConfig, StackConfig, count_params, validate_stack, variant_registry
    from .scaling import ScaleFactors, scale_config
    from .serialize import write_config

    registry = variant_registry()
    layer_scale = args.layer_scale
    if args.variant is not None:
        spec = registry.get(args.variant)
        if spec is None:
            print(f"error: unknown variant {args.variant!r}; have {', '.join(registry)}")
            return 2
        stack = spec.stack
        layer_scale = layer_scale or spec.layer_scale
        name = args.name or spec.name
    elif args.scale_from is not None:
        spec = registry.get(args.scale_from)
        if spec is None:
            print(f"error: unknown variant {args.scale_from!r}; have {', '.join(registry)}")
            return 2
        try:
            scaled = scale_config(spec.stack, ScaleFactors(args.alpha, args.beta, args.phi))
        except ConfigError as exc:
            print(f"error: {exc}")
            return 2
        print(scaled.report())
        stack = scaled.stack
        name = args.name or f"{args.scale_from}-phi{args.phi:g}"
    else:
        if None in (args.cprime, args.l1, args.l3):
            print("error: --c1 requires --cprime, --l1 and --l3")
            return 2
        stack = StackConfig(args.c1, args.cprime, args.l1, args.l3)
        name = args.name or "custom"

    violations = validate_stack(stack)
    if violations:
        for v in violations:
            print(f"violation: {v}")
        return 2
    cfg = ModelConfig(
        name=name, stack=stack, ffn_ratio=args.ffn_ratio,
        layer_scale=layer_scale, num_classes=args.num_classes, seed=args.seed,
    )
    report = count_params(stack, cfg.ffn_ratio, cfg.num_classes, cfg.layer_scale)
    write_config(cfg, args.out)
    print(
        f"ok: (C1={stack.c1}, C'={stack.cprime}, L1={stack.l1}, L3={stack.l3}) "
        f"valid; closed-form params {report.closed_form_total:,}; wrote {args.out}"
    )
    return 0


def cmd_params(args) -> int:
    from .errors import ConfigError
    from .model import build_model, count_params, variant_registry
    from .serialize import read_config

    registry = variant_registry()
    target_m = None
    if args.variant is not None:
        spec = registry.get(args.variant)
        if spec is None:
            print(f"error: unknown variant {args.variant!r}; have {', '.join(registry)}")
            return 2
        from .model import ModelConfig

        cfg = ModelConfig(
            name=spec.name, stack=spec.stack, layer_scale=spec.layer_scale,
        )
        target_m = spec.expected_params_m
    else:
        try:
            cfg = read_config(args.config)
        except (ConfigError, OSError) as exc:
            print(f"error: {exc}")
            return 2
        spec = registry.get(cfg.name)
        if spec is not None and spec.stack == cfg.stack:
            target_m = spec.expected_params_m
    try:
        report = count_params(cfg.stack, cfg.ffn_ratio, cfg.num_classes, cfg.layer_scale)
    except ConfigError as exc:
        print(f"error: {exc}")
        return 2
    if report.closed_form_total <= args.enumerate_limit:
        model = build_model(cfg)
        report.enumerated_total = model.param_count()
    for line in report.lines():
        print(line)
    if target_m is not None:
        target = target_m * 1e6
        dev = abs(report.closed_form_total - target) / target
        verdict = "within 15%" if dev <= 0.15 else "OUTSIDE 15%"
        print(f"published target {target_m:g}M, deviation {dev * 100:.1f}% ({verdict})")
        if dev > 0.15:
            return 1
    if report.enumerated_total is not None and report.enumerated_total != report.closed_form_total:
        return 1
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import (
        TOGGLE_ROWS,
        check_block_gradients,
        check_dcn_gradients,
        check_model_gradients,
    )

    if args.step > 1e-4:
        print(
            f"warning: step {args.step:g} is large; central-difference truncation "
            f"error grows as step^2 and will dominate the comparison"
        )
    failed = []

    def report(result) -> None:
        status = "ok" if result.passed else "FAIL"
        print(
            f"{status:4s} {result.name:28s} max rel err {result.max_rel_error:.3e} "
            f"(tol {result.tolerance:g}, {result.coords_checked} coords)"
        )
        if not result.passed:
            failed.append(result)

    for label, row in TOGGLE_ROWS:
        print(f"-- toggles: {label} ({row['normalization']}, "
              f"shared={row['shared_weights']}, multi_group={row['multi_group']})")
        if args.scope in ("op", "all"):
            from .dcn import DcnConfig

            cfg = DcnConfig(channels=8, groups=2 if row["multi_group"] else 1, **row)
            kw = {} if args.coords is None else {"coords_per_tensor": args.coords}
            for r in check_dcn_gradients(seed=args.seed, cfg=cfg, step=args.step, **kw):
                report(r)
        if args.scope in ("block", "all"):
            kw = {} if args.coords is None else {"coords_per_tensor": args.coords}
            for r in check_block_gradients(seed=args.seed, step=args.step, **row, **kw):
                report(r)
        if args.scope in ("model", "all"):
            kw = {} if args.coords is None else {"n_params": args.coords}
            report(check_model_gradients(seed=args.seed, step=args.step, **row, **kw))
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_error)
        print(f"FAILED: worst offender {worst.name} at {worst.max_rel_error:.3e}")
        return 1
    print("all gradient checks passed")
    return 0


def cmd_oracle(args) -> int:
    from .verify import run_oracle_trials

    report = run_oracle_trials(seed=args.seed, trials=args.trials, mode=args.toggles)
    print(
        f"{args.toggles}: {report.trials} trials, max {report.max_ulp} ulp "
        f"(max abs {report.max_abs:.3e}) in {report.seconds:.2f}s"
    )
    if not report.passed:
        print(f"FAILED: {report.max_ulp} ulp exceeds the 4-ulp bound")
        return 1
    return 0


def cmd_bench(args) -> int:
    import numpy as np

    from .bench import BenchResult, time_op, write_bench_csv
    from .dcn import DcnConfig, DcnWeights, SamplingField, dcn_output_hw, dcnv3_forward, dcnv3_naive_forward
    from .tensor import Conv2dWeights, LinearWeights, conv2d
    from .verify import make_random_block

    rng = np.random.default_rng(args.seed)
    n, c, h, w_ = args.shape
    results: list[BenchResult] = []
    if args.op == "dcnv3":
        groups = max(1, c // 16)
        cfg = DcnConfig(channels=c, groups=groups)
        ho, wo = dcn_output_hw(h, w_, cfg)
        x = rng.standard_normal(args.shape)
        field = SamplingField(
            rng.uniform(-1.0, 1.0, (n, 2 * cfg.num_points * groups, ho, wo)),
            rng.standard_normal((n, cfg.num_points * groups, ho, wo)),
        )
        weights = DcnWeights(proj=LinearWeights(rng.standard_normal((c, c)) / np.sqrt(c)))
        fast = time_op(lambda: dcnv3_forward(x, field, weights, cfg), "dcnv3", args.shape, args.reps)
        slow = time_op(
            lambda: dcnv3_naive_forward(x, field, weights, cfg), "dcnv3_naive", args.shape, args.reps
        )
        fast.speedup_vs_naive = slow.median_s / fast.median_s
        results += [fast, slow]
    elif args.op == "conv2d":
        weights = Conv2dWeights(
            rng.standard_normal((c, c, 3, 3)) / (3.0 * np.sqrt(c)), stride=1, padding=1
        )
        x = rng.standard_normal(args.shape)
        results.append(time_op(lambda: conv2d(x, weights), "conv2d", args.shape, args.reps))
    elif args.op == "block":
        from .blocks import basic_block

        blk = make_random_block(rng, channels=c, groups=max(1, c // 16), ffn_ratio=4)
        x = rng.standard_normal(args.shape)
        results.append(time_op(lambda: basic_block(x, blk), "block", args.shape, args.reps))
    else:  # model
        from .model import ModelConfig, build_model, model_forward, variant_registry

        spec = variant_registry().get(args.variant)
        if spec is None:
            print(f"error: unknown variant {args.variant!r}")
            return 2
        cfg = ModelConfig(
            name=spec.name, stack=spec.stack, layer_scale=spec.layer_scale, seed=args.seed
        )
        model = build_model(cfg)
        x = rng.standard_normal((n, 3, h, w_))
        results.append(
            time_op(lambda: model_forward(model, x), f"model-{spec.name}", (n, 3, h, w_), args.reps)
        )
    if args.out:
        write_bench_csv(results, args.out)
        print(f"wrote {args.out}")
    for r in results:
        extra = "" if r.speedup_vs_naive is None else f", speedup vs naive {r.speedup_vs_naive:.2f}x"
        print(
            f"{r.op}: median {r.median_s * 1e3:.3f} ms over {r.reps} reps, "
            f"{r.images_per_s:.3f} images/s{extra}"
        )
    return 0


def cmd_erf(args) -> int:
    import numpy as np

    from .erf import (
        erf_map,
        read_pgm,
        receptive_field,
        stage_layer_chain,
        support_box,
        write_map_csv,
        write_pgm,
    )
    from .errors import ConfigError, ShapeError
    from .model import build_model
    from .serialize import load_weights, read_config

    try:
        cfg = read_config(args.config)
        model = build_model(cfg)
        if args.weights:
            load_weights(model, args.weights)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}")
        return 2
    rng = np.random.default_rng(args.seed)
    if args.input:
        gray = read_pgm(args.input)
        x = np.repeat(gray[None, None], 3, axis=1)
    else:
        side = args.image_size
        x = rng.standard_normal((1, 3, side, side))
    try:
        emap = erf_map(model, x, args.pixel, args.stage)
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}")
        return 2
    rf = receptive_field(stage_layer_chain(model, args.stage))
    feat_hw = (x.shape[2] // rf.jump, x.shape[3] // rf.jump)
    box = support_box(args.pixel, rf, feat_hw[0], feat_hw[1], x.shape[2], x.shape[3])
    write_pgm(emap, f"{args.out_prefix}.pgm")
    write_map_csv(emap, f"{args.out_prefix}.csv")
    ys, xs = np.nonzero(emap)
    if len(ys):
        print(f"support rows [{ys.min()}, {ys.max()}] cols [{xs.min()}, {xs.max()}]")
    else:
        print("support empty")
    print(
        f"static receptive field: size {rf.size}, stride {rf.jump}, "
        f"box rows [{box[0]}, {box[1]}] cols [{box[2]}, {box[3]}]"
    )
    print(f"wrote {args.out_prefix}.pgm and {args.out_prefix}.csv")
    return 0


def cmd_train_toy(args) -> int:
    from .errors import ConfigError
    from .model import ModelConfig, StackConfig
    from .serialize import read_config
    from .traintoy import train_toy, write_loss_csv

    if args.config:
        try:
            cfg = read_config(args.config)
        except (ConfigError, OSError) as exc:
            print(f"error: {exc}")
            return 2
    else:
        cfg = ModelConfig("toy", StackConfig(16, 16, 1, 1), num_classes=10, seed=args.seed)
    try:
        _, result = train_toy(cfg, steps=args.steps, lr=args.lr, seed=args.seed)
    except ConfigError as exc:
        print(f"error: {exc}")
        return 2
    write_loss_csv(result, args.out)
    print(
        f"{args.steps} steps at lr {args.lr:g}: loss {result.initial:.4f} -> "
        f"{result.final:.4f}; wrote {args.out}"
    )
    return 0


_COMMANDS = {
    "config": cmd_config,
    "params": cmd_params,
    "gradcheck": cmd_gradcheck,
    "oracle": cmd_oracle,
    "bench": cmd_bench,
    "erf": cmd_erf,
    "train-toy": cmd_train_toy,
}


def main(argv=None) -> int:
    _apply_thread_env()
    args = build_parser().parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
