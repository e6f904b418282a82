"""Command-line entry point: gen-demos, train, eval, grad-check, ablate.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import dataset as ds
from . import env as toyenv
from . import gradcheck
from . import tensor as tc
from . import trainer
from .evaluate import EXEC_HORIZON, SUITE_EPISODES, SUITES, EvalReport, ExpertPlanner, PolicyPlanner, evaluate

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

ABLATION_VARIANTS = [
    ("full/pool", {"modality": "full", "downsample": "pool"}),
    ("full/mlp", {"modality": "full", "downsample": "mlp"}),
    ("no_geo", {"modality": "no_geo", "downsample": "pool"}),
    ("no_sem", {"modality": "no_sem", "downsample": "pool"}),
]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _write_report(report: EvalReport, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json() + "\n", encoding="utf-8")
    path.with_suffix(".txt").write_text(report.to_text() + "\n", encoding="utf-8")


def _train_overrides(args) -> dict:
    over = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise trainer.ConfigError(f"--set expects key=value, got {item!r}")
        over[key.strip()] = value.strip()
    for key in ("modality", "downsample", "history", "epochs", "batch", "max_steps", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            over[key] = value
    return over


# ---------------------------------------------------------------- commands
def cmd_gen_demos(args) -> int:
    robustness = toyenv.parse_robustness(args.robustness)
    # The generator settings already land in the file meta; the output path is
    # left out so the checksum only depends on content.
    data = ds.generate_demos(args.count, args.seed, robustness, perturb=args.perturb)
    checksum = ds.save_demos(data, args.out)
    print(f"episodes={len(data.episodes)} frames={data.num_frames} perturb={args.perturb} robustness={robustness.to_dict()}")
    print(f"sha256 {checksum}  {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = trainer.load_config(args.config, _train_overrides(args))
    print("config: " + json.dumps(cfg.to_dict(), sort_keys=True))
    data = ds.load_demos(args.data)
    meta = {"argv": args.argv, "data": str(args.data), "data_sha256": ds.file_checksum(args.data)}
    t0 = time.perf_counter()
    ckpt = trainer.train(cfg, data, args.out, log=print, meta=meta)
    print(f"trained {ckpt.step} steps in {time.perf_counter() - t0:.1f}s -> {Path(args.out) / 'final.vdpc'}")
    return EXIT_OK


def _planner_for(args):
    if args.policy == "expert":
        return ExpertPlanner(horizon=8), 1, {}
    if not args.ckpt:
        raise UsageError("eval needs --ckpt unless --policy expert")
    ckpt = trainer.load_checkpoint(args.ckpt)
    pc = ckpt.policy_config
    if pc.image_size != toyenv.IMAGE_SIZE or pc.action_dim != toyenv.ACTION_DIM:
        raise tc.ShapeError(
            f"checkpoint expects {pc.image_size}x{pc.image_size} images and J={pc.action_dim}; "
            f"environment provides {toyenv.IMAGE_SIZE}x{toyenv.IMAGE_SIZE} and J={toyenv.ACTION_DIM}"
        )
    policy = ckpt.build_policy(use_ema=not args.raw_weights)
    return PolicyPlanner(policy), pc.history, {"ckpt": str(args.ckpt), "ckpt_step": ckpt.step}


def cmd_eval(args) -> int:
    planner, history, prov = _planner_for(args)
    if args.suite:
        names = list(SUITES) if args.suite == "all" else [args.suite]
        conditions = [c for n in names for c in SUITES[n]]
        episodes = args.episodes or SUITE_EPISODES
        title = f"robustness suite: {args.suite}"
    else:
        rob = toyenv.parse_robustness(args.robustness)
        label = ",".join(f"{k}={v}" for k, v in rob.to_dict().items() if k in rob.varied_fields()) or "nominal"
        conditions = [(label, rob)]
        episodes = args.episodes or 48
        title = "closed-loop evaluation"
    prov.update(argv=args.argv, policy=args.policy, exec_horizon=args.exec_horizon, raw_weights=args.raw_weights)
    report = evaluate(
        planner,
        conditions,
        episodes=episodes,
        repeats=args.repeats,
        seed_base=args.seed,
        exec_horizon=args.exec_horizon,
        history=history,
        title=title,
        provenance=prov,
    )
    print(report.to_text())
    out = Path(args.out) if args.out else (Path(args.ckpt).with_suffix(".eval.json") if args.ckpt else Path("expert.eval.json"))
    _write_report(report, out)
    print(f"\nrecord: {out}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    with tc.broken_backward(*(args.break_op or ())):
        results = gradcheck.run_all(seeds=range(args.seeds), end_to_end=not args.skip_end_to_end)
    rows = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<24} max rel err {r.error:.3e}  (tol {r.tol:.0e})")
        rows.append({"name": r.name, "error": float(r.error), "tol": r.tol, "passed": bool(r.passed)})
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    Path(args.out).write_text(json.dumps({"broken": args.break_op or [], "checks": rows}, indent=2) + "\n")
    print(f"record: {args.out}")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_ablate(args) -> int:
    base = trainer.load_config(args.config, _train_overrides(args))
    data = ds.load_demos(args.data)
    out = Path(args.out)
    results = {}
    for name, over in ABLATION_VARIANTS:
        cfg = trainer.apply_overrides(base, over)
        run_dir = out / name.replace("/", "_")
        print(f"== training {name}")
        meta = {"argv": args.argv, "variant": name}
        ckpt = trainer.train(cfg, data, run_dir, log=print, meta=meta)
        policy = ckpt.build_policy()
        print(f"   parameters: {policy.num_parameters()}")
        report = evaluate(
            PolicyPlanner(policy),
            [(name, toyenv.RobustnessConfig())],
            episodes=args.episodes,
            repeats=args.repeats,
            seed_base=args.eval_seed,
            exec_horizon=args.exec_horizon,
            history=cfg.history,
            title=f"variant {name}",
        )
        results[name] = (report.conditions[0], policy.num_parameters())
    tables = {
        "modality (semantic / geometric contribution)": ["full/pool", "no_geo", "no_sem"],
        "geometry downsampling": ["full/pool", "full/mlp"],
    }
    for title, names in tables.items():
        report = EvalReport(
            f"ablation: {title}",
            args.eval_seed,
            args.episodes,
            args.repeats,
            [results[n][0] for n in names],
            provenance={"argv": args.argv, "parameters": {n: results[n][1] for n in names}},
        )
        print()
        print(report.to_text())
        slug = "modality" if title.startswith("modality") else "downsample"
        _write_report(report, out / f"ablation_{slug}.json")
    return EXIT_OK


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vodp", description="Vision-only diffusion policy on a 2-D pick-and-place task.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-demos", help="record scripted-expert demonstrations")
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--robustness", nargs="*", metavar="KEY=VALUE", help="size=1.6 color=green background=pink lighting=blink")
    g.add_argument("--perturb", action="store_true", help="jitter executed motion and inject early grasps; labels stay clean")
    g.set_defaults(func=cmd_gen_demos)

    def train_flags(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--modality", choices=["full", "no_geo", "no_sem"])
        sp.add_argument("--downsample", choices=["pool", "mlp"])
        sp.add_argument("--history", type=int, choices=[1, 3])
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch", type=int)
        sp.add_argument("--max-steps", dest="max_steps", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    t = sub.add_parser("train", help="train a policy checkpoint")
    train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="closed-loop evaluation")
    e.add_argument("--ckpt")
    e.add_argument("--policy", choices=["checkpoint", "expert"], default="checkpoint")
    e.add_argument("--episodes", type=int)
    e.add_argument("--repeats", type=int, default=3)
    e.add_argument("--seed", type=int, default=10000)
    e.add_argument("--robustness", nargs="*", metavar="KEY=VALUE")
    e.add_argument("--suite", choices=sorted(SUITES) + ["all"])
    e.add_argument("--exec-horizon", dest="exec_horizon", type=int, default=EXEC_HORIZON)
    e.add_argument("--raw-weights", dest="raw_weights", action="store_true", help="use raw instead of EMA weights")
    e.add_argument("--out", help="record file (JSON); a .txt copy of the table is written alongside")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("grad-check", help="finite-difference check of every op and the full loss")
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--break", dest="break_op", action="append", metavar="OP", help="debug: corrupt this op's backward")
    c.add_argument("--skip-end-to-end", action="store_true")
    c.add_argument("--out", default="grad_check.json", help="record file (JSON)")
    c.set_defaults(func=cmd_grad_check)

    a = sub.add_parser("ablate", help="train and compare modality / downsampling variants")
    train_flags(a)
    a.add_argument("--episodes", type=int, default=48)
    a.add_argument("--repeats", type=int, default=3)
    a.add_argument("--eval-seed", dest="eval_seed", type=int, default=10000)
    a.add_argument("--exec-horizon", dest="exec_horizon", type=int, default=EXEC_HORIZON)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.argv = argv
        if getattr(args, "exec_horizon", 1) is not None and not 1 <= getattr(args, "exec_horizon", 1) <= 8:
            raise UsageError("--exec-horizon must be in 1..8")
        return args.func(args)
    except (UsageError, trainer.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if not isinstance(exc, tc.ShapeError) else EXIT_RUNTIME
    except (OSError, RuntimeError, FloatingPointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
