"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint
from .data import build_dataset, load_corpus
from .imageio import load_png, save_png
from .layout import SequenceLayout
from .metrics import SCENARIOS, eval_suite, summarize, write_metrics_csv
from .model import ModelConfig
from .routing import audit_routing, build_dynamic_mask, build_static_mask, combine
from .sampler import SampleRequest, export_trace, sample
from .trainer import (NumericalAbort, PretrainConfig, TrainConfig, load_train_config, pretrain,
                      set_single_threaded, train)
from .vocab import tokenize

logger = logging.getLogger("diptych_router")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def write_manifest(path: Path, command: str, config: dict, seed: int | None, artifacts: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"subcommand": command, "config": config, "seed": seed,
               "artifacts": {k: str(v) for k, v in artifacts.items()}, "version": __version__}
    path.write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")


def file_manifest(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.json")


# ------------------------------------------------------------------ helpers


def parse_cond(spec: str) -> tuple[np.ndarray, list[int]]:
    path, sep, text = spec.partition(":")
    if not sep:
        raise UsageError(f"--cond expects IMAGE:PROMPT, got {spec!r}")
    try:
        tokens = tokenize(text)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if not Path(path).is_file():
        raise DataError(f"condition image {path} not found")
    return load_png(path), tokens


def build_request(args) -> SampleRequest:
    conds = [parse_cond(c) for c in (args.cond or [])]
    try:
        prompt = tokenize(args.prompt)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    return SampleRequest(
        cond_images=[c[0] for c in conds],
        cond_prompts=[c[1] for c in conds],
        prompt=prompt,
        steps=args.steps,
        seed=args.seed,
        static_routing=not args.no_static_routing,
        dynamic_routing=not args.no_dynamic_routing,
        trace=getattr(args, "trace", None) is not None,
        trace_every=args.trace_every,
    )


def mask_summary(mask, layout: SequenceLayout) -> dict[str, int]:
    names = [f"cond{k}" for k in range(layout.c)] + ["prompt", "noise"]
    bounds = [layout.condition_block(k) for k in range(layout.c)] + [layout.prompt, layout.noise]
    out = {}
    for rn, rs in zip(names, bounds):
        for cn, cs in zip(names, bounds):
            count = int(mask.blocked[rs, cs].sum())
            if count:
                out[f"{rn}->{cn}"] = count
    return out


def infer_variant(header: dict) -> str:
    cfg = header.get("extra", {}).get("train", {})
    if cfg and not cfg.get("diptych", True):
        return "no-diptych"
    if cfg and not cfg.get("static_routing", True) and not cfg.get("dual_lora", True):
        return "no-bias-mitigation"
    if cfg and not cfg.get("dynamic_routing", True):
        return "no-dynamic-routing"
    return "full"


# ----------------------------------------------------------------- commands


def cmd_build_dataset(args) -> int:
    out = Path(args.out)
    config = {"subjects": args.subjects, "seed": args.seed, "views": args.views, "test_subjects": args.test_subjects}
    write_manifest(out / "run_manifest.json", "build-dataset", config, args.seed, {"out": out})
    build_dataset(out, subjects=args.subjects, seed=args.seed, views=args.views, test_subjects=args.test_subjects)
    print(f"wrote {args.subjects} train and {args.test_subjects} test subjects x {args.views} views to {out}")
    return 0


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"config file {path} is not valid JSON: {exc}") from exc


def cmd_pretrain(args) -> int:
    payload = _load_json(args.config) if args.config else {}
    if args.iters is not None:
        payload["iters"] = args.iters
    if args.seed is not None:
        payload["seed"] = args.seed
    config = PretrainConfig(**payload)
    out = Path(args.out)
    write_manifest(file_manifest(out), "pretrain", config.to_json(), config.seed, {"data": args.data, "out": out})
    corpus = load_corpus(args.data)
    pretrain(config, corpus, out)
    print(f"wrote base checkpoint {out}")
    return 0


def cmd_train(args) -> int:
    config = load_train_config(args.config) if args.config else TrainConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.iters is not None:
        try:
            changes["stage_iters"] = tuple(int(i) for i in args.iters.split(","))
        except ValueError:
            raise UsageError(f"--iters expects three comma-separated counts, got {args.iters!r}") from None
    if args.base is not None:
        changes["base_checkpoint"] = args.base
    if args.no_static_routing or args.no_bias_mitigation:
        changes["static_routing"] = False
    if args.no_dual_lora or args.no_bias_mitigation:
        changes["dual_lora"] = False
    if args.no_dynamic_routing:
        changes["dynamic_routing"] = False
    if args.no_diptych:
        changes["diptych"] = False
    if args.debug:
        changes["debug"] = True
    config = TrainConfig.from_json({**config.to_json(), **changes})
    out = Path(args.out)
    write_manifest(out / "run_manifest.json", "train", config.to_json(), config.seed,
                   {"data": args.data, "out": out, "loss": out / "loss.csv"})
    if config.base_checkpoint is not None and not Path(config.base_checkpoint).is_file():
        raise DataError(f"base checkpoint {config.base_checkpoint} not found")
    corpus = load_corpus(args.data)
    result = train(config, corpus, out)
    print(f"trained {len(result.losses)} iterations; checkpoints: {', '.join(str(p) for p in result.checkpoints)}")
    return 0


def _load_model(path):
    if not Path(path).is_file():
        raise DataError(f"checkpoint {path} not found")
    try:
        return load_checkpoint(path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def cmd_sample(args) -> int:
    model, header = _load_model(args.ckpt)
    req = build_request(args)
    out = Path(args.out)
    write_manifest(file_manifest(out), "sample", {"ckpt": args.ckpt, "cond": args.cond, "prompt": args.prompt,
                   "steps": args.steps, "dynamic_routing": req.dynamic_routing, "static_routing": req.static_routing},
                   args.seed, {"out": out, "trace": args.trace})
    try:
        result = sample(model, req)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    save_png(out, result.image)
    if args.trace:
        grid = (model.config.image_edge // model.config.patch,) * 2
        files = export_trace(result.trace, args.trace, grid)
        print(f"wrote {len(files)} affinity heatmaps to {args.trace}")
    print(f"wrote {out}")
    return 0


def cmd_trace_affinity(args) -> int:
    args.trace = args.out_dir
    model, _ = _load_model(args.ckpt)
    req = build_request(args)
    if req.c == 0:
        raise DataError("affinity tracing needs at least one --cond")
    out = Path(args.out_dir)
    write_manifest(out / "run_manifest.json", "trace-affinity", {"ckpt": args.ckpt, "cond": args.cond,
                   "prompt": args.prompt, "steps": args.steps, "trace_every": args.trace_every}, args.seed, {"out": out})
    try:
        result = sample(model, req)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    grid = (model.config.image_edge // model.config.patch,) * 2
    files = export_trace(result.trace, out, grid)
    save_png(out / "sample.png", result.image)
    print(f"wrote {len(files)} affinity heatmaps to {out}")
    return 0


def cmd_eval(args) -> int:
    models = {}
    for entry in args.ckpt:
        variant, sep, path = entry.partition("=")
        if not sep:
            path, variant = entry, None
        model, header = _load_model(path)
        models[variant or infer_variant(header)] = model
    out = Path(args.out)
    write_manifest(file_manifest(out), "eval", {"ckpt": args.ckpt, "cases": args.cases, "seeds": args.seeds,
                   "steps": args.steps, "scenarios": args.scenarios}, None, {"data": args.data, "out": out})
    testset = load_corpus(args.data, "test")
    rows = eval_suite(models, testset, scenarios=args.scenarios, cases=args.cases, seeds=args.seeds, steps=args.steps)
    write_metrics_csv(out, rows)
    for r in summarize(rows):
        print(f"{r['variant']:>20s} {r['scenario']:>10s}  identity {r['identity_sim']:.3f}  attr {r['attr_match']:.3f}")
    return 0


def cmd_inspect_mask(args) -> int:
    layout = SequenceLayout(args.c, args.n_prime, args.m_prime, args.m, args.n)
    mask = build_static_mask(layout)
    if args.assignment:
        try:
            assign = json.loads(Path(args.assignment).read_text(encoding="utf-8"))
            if not isinstance(assign, list) or not all(isinstance(a, int) and not isinstance(a, bool) for a in assign):
                raise ValueError("assignment must be a JSON list of integers")
            mask = combine(mask, build_dynamic_mask(torch.tensor(assign, dtype=torch.long), layout))
            audit_routing(mask)
        except (OSError, ValueError, AssertionError) as exc:
            raise DataError(f"malformed assignment {args.assignment}: {exc}") from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    mask.to_pgm(out)
    summary = {"layout": layout.to_json(), "L": layout.L, "blocked": mask.count(), "blocks": mask_summary(mask, layout)}
    print(f"L={layout.L} blocked={mask.count()}")
    for k, v in summary["blocks"].items():
        print(f"  {k}: {v}")
    if args.summary:
        Path(args.summary).write_text(json.dumps(summary, indent=1), encoding="utf-8")
    return 0


# ------------------------------------------------------------------ parser


def make_parser() -> Parser:
    p = Parser(prog="diptych-router", description="Multi-subject routing laboratory on a toy diffusion transformer.")
    p.add_argument("--threads", type=int, default=1, help="torch threads; 1 gives bit-reproducible runs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=Parser)

    b = sub.add_parser("build-dataset", help="render the synthetic single-subject corpus")
    b.add_argument("--out", required=True)
    b.add_argument("--subjects", type=int, default=512)
    b.add_argument("--test-subjects", type=int, default=64)
    b.add_argument("--views", type=int, default=4)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_build_dataset)

    pt = sub.add_parser("pretrain", help="full-parameter text-to-image training of the base model")
    pt.add_argument("--data", required=True)
    pt.add_argument("--out", required=True, help="base checkpoint file")
    pt.add_argument("--config")
    pt.add_argument("--iters", type=int)
    pt.add_argument("--seed", type=int)
    pt.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train", help="three-stage LoRA curriculum")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--base", help="base checkpoint from `pretrain`")
    t.add_argument("--iters", help="stage iteration counts, e.g. 2000,1000,1000")
    t.add_argument("--seed", type=int)
    t.add_argument("--no-static-routing", action="store_true")
    t.add_argument("--no-dynamic-routing", action="store_true")
    t.add_argument("--no-diptych", action="store_true")
    t.add_argument("--no-dual-lora", action="store_true")
    t.add_argument("--no-bias-mitigation", action="store_true", help="same as --no-static-routing --no-dual-lora")
    t.add_argument("--debug", action="store_true", help="audit every routing mask")
    t.set_defaults(func=cmd_train)

    def sampling_flags(sp):
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--cond", action="append", help="IMAGE.png:condition prompt (repeatable)")
        sp.add_argument("--prompt", required=True)
        sp.add_argument("--steps", type=int, default=20)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--trace-every", type=int, default=5)
        sp.add_argument("--no-dynamic-routing", action="store_true")
        sp.add_argument("--no-static-routing", action="store_true")

    s = sub.add_parser("sample", help="generate one image")
    sampling_flags(s)
    s.add_argument("--out", required=True)
    s.add_argument("--trace", help="directory for affinity heatmaps")
    s.set_defaults(func=cmd_sample)

    ta = sub.add_parser("trace-affinity", help="sample and export noise-condition affinity heatmaps")
    sampling_flags(ta)
    ta.add_argument("--out", dest="out_dir", required=True)
    ta.set_defaults(func=cmd_trace_affinity)

    e = sub.add_parser("eval", help="ablation metrics table")
    e.add_argument("--ckpt", action="append", required=True, help="FILE or VARIANT=FILE (repeatable)")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--cases", type=int, default=32)
    e.add_argument("--seeds", type=int, default=4)
    e.add_argument("--steps", type=int, default=20)
    e.add_argument("--scenarios", nargs="+", choices=SCENARIOS, default=list(SCENARIOS))
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("inspect-mask", help="render static (and routed) flow masks")
    m.add_argument("--c", type=int, required=True)
    m.add_argument("--n-prime", type=int, required=True)
    m.add_argument("--m-prime", type=int, required=True)
    m.add_argument("--m", type=int, required=True)
    m.add_argument("--n", type=int, required=True)
    m.add_argument("--assignment", help="JSON list with one condition index per noise token")
    m.add_argument("--out", required=True, help="PGM output")
    m.add_argument("--summary", help="optional JSON summary output")
    m.set_defaults(func=cmd_inspect_mask)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            raise UsageError("no subcommand given")
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("no subcommand given")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        if args.threads == 1:
            set_single_threaded()
        else:
            torch.set_num_threads(args.threads)
        return args.func(args)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(str(exc), file=sys.stderr)
        return 1
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except (DataError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
