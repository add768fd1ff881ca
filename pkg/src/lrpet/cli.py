"""``lrpet`` command line: train | compress | eval | search | verify."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import config as C
from . import verify as V
from .compress import FormatError, atomic_write, load_model, save_model, truncate_and_factor
from .data import FormatError as DataFormatError
from .lrpet import DivergenceError, PlanError, RankPlan, train_lrpet, truncation_errors
from .search import SearchConfig, bo_search, quadratic_bowl, search_rank_plan

log = logging.getLogger("lrpet")


class CommandError(Exception):
    pass


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("LRPET_THREADS", "1")))
    except ValueError:
        return 1


def _load_config(args) -> C.RunConfig:
    cfg = C.load(args.config, args.set or [], args.seed)
    if args.out:
        cfg.output.dir = args.out
    return cfg


def _write_json(path, obj):
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _write_config(out: Path, cfg: C.RunConfig):
    text = yaml.safe_dump(json.loads(json.dumps(C.to_dict(cfg))), sort_keys=False)
    atomic_write(out / "config.yaml", text.encode())


def _write_metrics(out: Path, metrics, timing=True):
    tmp = out / ".metrics.csv.tmp"
    metrics.write_csv(tmp, timing=timing)
    os.replace(tmp, out / "metrics.csv")


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    data = C.build_dataset(cfg)
    net = C.build_network(cfg, data.image_shape, data.num_classes)
    tcfg = dataclasses.replace(C.train_config(cfg), threads=_threads())
    plan = C.build_plan(cfg, net) if cfg.lrpet.enabled else None
    if args.overhead:
        return _overhead(args.overhead, cfg, data, net, tcfg, plan or C.build_plan(cfg, net), out)
    _write_config(out, cfg)
    net, metrics = train_lrpet(net, data, tcfg, plan)
    net.eval()
    meta = {"data_digest": data.digest(), "seed": tcfg.seed, "lrpet": cfg.lrpet.enabled}
    if plan is not None:
        meta["plan"] = plan.to_dict()
        errs = truncation_errors(net, plan.ranks(net))
        meta["truncation_errors"] = {str(k): v for k, v in errs.items()}
    save_model(net, out / "model.lrpt", meta)
    _write_metrics(out, metrics)
    print(f"final test accuracy {metrics.final_accuracy:.4f}; wrote {out / 'model.lrpt'}")
    return 0


def _overhead(epochs, cfg, data, net, tcfg, plan, out: Path) -> int:
    """Time ``epochs`` epochs of plain SGD and of LRPET from identical starts."""
    tcfg = dataclasses.replace(tcfg, epochs=epochs)
    _, base = train_lrpet(net.clone(), data, tcfg, None)
    _, ours = train_lrpet(net.clone(), data, tcfg, plan)
    t_base = float(np.mean([r["epoch_seconds"] for r in base.rows]))
    t_ours = float(np.mean([r["epoch_seconds"] for r in ours.rows]))
    result = {"epochs": epochs, "sgd_epoch_seconds": t_base, "lrpet_epoch_seconds": t_ours, "ratio": t_ours / t_base}
    _write_json(out / "overhead.json", result)
    print(f"SGD {t_base:.3f}s/epoch, LRPET {t_ours:.3f}s/epoch, ratio {t_ours / t_base:.3f}")
    return 0


def _plan_from_args(args, net) -> RankPlan:
    if args.plan:
        raw = yaml.safe_load(Path(args.plan).read_text())
        section = raw.get("lrpet", raw)
        min_rank = {int(k): int(v) for k, v in (section.get("min_rank") or {}).items()}
        keep = {int(i) for i in section.get("keep_dense") or ()}
        if section.get("ratios"):
            plan = RankPlan({int(k): float(v) for k, v in section["ratios"].items()}, min_rank, keep)
        else:
            plan = RankPlan.uniform(net, float(section.get("ratio", 0.5)), min_rank, keep)
    elif args.ratio is not None:
        plan = RankPlan.uniform(net, args.ratio, keep_dense=args.keep_dense or ())
    else:
        _, meta = load_model(args.model, with_meta=True)
        if "plan" not in meta:
            raise CommandError("model carries no training plan; pass --ratio or --plan")
        plan = RankPlan.from_dict(meta["plan"])
    plan.validate(net)
    return plan


def cmd_compress(args) -> int:
    net = load_model(args.model)
    plan = _plan_from_args(args, net)
    out = Path(args.out or Path(args.model).parent)
    factored, report = truncate_and_factor(net, plan)
    save_model(factored, out / "model_factorized.lrpt", {"plan": plan.to_dict(), "source": str(args.model)})
    report.to_json(out / "report.json")
    print(report.table())
    return 0


def cmd_eval(args) -> int:
    if not Path(args.model).is_file():
        raise CommandError(f"no such model file: {args.model}")
    net = load_model(args.model)
    cfg = _load_config(args)
    data = C.build_dataset(cfg)
    if data.image_shape != net.input_shape:
        raise CommandError(f"data shape {data.image_shape} does not fit model input {net.input_shape}")
    net.eval()
    acc = net.accuracy(data.test.images, data.test.labels)
    out = Path(args.out or Path(args.model).parent)
    _write_json(out / "eval.json", {"model": str(args.model), "accuracy": acc, "count": len(data.test)})
    print(f"accuracy {acc:.4f} on {len(data.test)} samples")
    return 0


def cmd_search(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    scfg = C.search_config(cfg)
    if cfg.search.objective == "quadratic":
        if not cfg.search.optimum:
            raise CommandError("search.optimum is required for the quadratic objective")
        state = bo_search(quadratic_bowl(cfg.search.optimum), len(cfg.search.optimum), scfg)
        best = state.best.p
        fragment = {"search": {"best": [float(v) for v in best], "objective": state.best.objective}}
        dist = float(np.linalg.norm(best - np.asarray(cfg.search.optimum)))
        print(f"best p {np.round(best, 4).tolist()} at distance {dist:.4f} from the optimum")
    else:
        data = C.build_dataset(cfg)
        val = C.validation_dataset(data, cfg.data.validation)
        template = C.build_network(cfg, data.image_shape, data.num_classes)
        plan, state = search_rank_plan(template, val, scfg)
        fragment = {"lrpet": plan.to_dict()}
        print(f"best objective {state.best.objective:.4f} (E {state.best.error:.4f}, C {state.best.compression:.4f})")
    state.write_csv(out / "search_trace.csv")
    atomic_write(out / "plan.yaml", yaml.safe_dump(fragment, sort_keys=False).encode())
    _write_config(out, cfg)
    print(f"wrote {out / 'plan.yaml'}")
    return 0


def cmd_verify(args) -> int:
    try:
        checks = V.run(args.suite)
    except KeyError as exc:
        raise CommandError(exc.args[0]) from exc
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 0 if failed == 0 else 1


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrpet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML/JSON run configuration")
        p.add_argument("--seed", type=int, help="overrides train/model/search seeds")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")

    p = sub.add_parser("train", help="train a network (plain SGD or LRPET)")
    common(p)
    p.add_argument("--overhead", type=int, metavar="EPOCHS", help="only time SGD vs LRPET epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="factorize a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--ratio", type=float, help="uniform pruning ratio")
    p.add_argument("--plan", help="plan fragment (YAML/JSON) with lrpet.ratios")
    p.add_argument("--keep-dense", type=int, nargs="*", metavar="LAYER", help="layers left unfactorized with --ratio")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("eval", help="test accuracy of a saved model")
    common(p)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("search", help="Bayesian search for per-layer pruning ratios")
    common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("verify", help="run a property suite")
    p.add_argument("suite", help=f"one of {', '.join([*V.SUITES, 'all'])}")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (C.ConfigError, CommandError, PlanError, FormatError, DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
