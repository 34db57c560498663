"""Command line entry point: study, sample, detect, bench, viz."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import accumulate as acc
from . import bench, query, scene, study, svg
from .errors import OrceaError
from .seeds import sub_seed


def _config(args) -> bench.BenchConfig:
    cfg = bench.BenchConfig.load(args.config) if args.config else bench.BenchConfig()
    over = {}
    for flag, name in (("kind", "kind"), ("seed", "seed"), ("quality", "quality"),
                       ("max_k", "max_k"), ("n_instances", "n_instances"), ("reps", "reps"),
                       ("workers", "workers"), ("study", "study_path")):
        v = getattr(args, flag, None)
        if v is not None:
            over[name] = v
    if getattr(args, "exact", False):
        over["exact"] = True
    if getattr(args, "timings", False):
        over["timings"] = True
    return replace(cfg, **over) if over else cfg


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON bench/study config file")
    p.add_argument("--kind", choices=[k.value for k in scene.ModelKind])
    p.add_argument("--seed", type=int)
    p.add_argument("--quality", choices=sorted(scene.QUALITY_PRESETS))


def cmd_study(args) -> int:
    cfg = _config(args)
    sm = bench.build_studied(cfg)
    study.save(sm, args.out)
    print(f"studied {cfg.kind}: {', '.join(f'{k} k={len(t.joint)}' for k, t in sm.types.items())} -> {args.out}")
    return 0


def cmd_sample(args) -> int:
    cfg = _config(args)
    inst = scene.sample_instance(cfg.spec, sub_seed(cfg.seed, 10, args.instance))
    es = scene.ideal_evidence(inst, box=scene.FeatureBox.for_spec(cfg.spec))
    es = scene.degrade(es, cfg.quality_obj, sub_seed(cfg.seed, 11, args.instance, 0))
    scene.save_evidence(es, args.out)
    names = " ".join(f"{n}={v:.4f}" for n, v in zip(cfg.spec.param_names, inst.vector))
    print(f"truth {names}; {len(es)} items -> {args.out}")
    return 0


def cmd_detect(args) -> int:
    sm = study.load(args.model)
    es = scene.load_evidence(args.evidence)
    rc = acc.ReduceConfig(max_k=args.max_k or acc.ReduceConfig().max_k, exact=args.exact)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    trace = open(out / "trace.tsv", "w") if (out and args.trace) else None
    try:
        state = acc.push_all(acc.init(sm, rc, trace=trace), es.items)
    finally:
        if trace:
            trace.close()
    mix, counts = acc.posterior(state)
    crit = query.Criteria.for_kind(sm.spec.kind)
    report = query.match_report(mix, counts, state.evidence_count, crit)
    text = report.to_text(sm.spec.param_names)
    sys.stdout.write(text)
    if out:
        (out / "report.txt").write_text(text)
        head = "\t".join(list(sm.spec.param_names) + ["box_mass", "noise_ratio", "decisive"])
        (out / "report.tsv").write_text(head + "\n" + report.to_row() + "\n")
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.sweep:
        for v, res in bench.run_sweep(cfg, args.sweep):
            print(f"{args.sweep}={v}: {res.successes}/{res.runs} detection_rate={res.detection_rate:.3f}")
        return 0
    res = bench.run_bench(cfg)
    print(f"{cfg.kind}: {res.successes}/{res.runs} detection_rate={res.detection_rate:.3f}")
    return 0


def cmd_viz(args) -> int:
    es = scene.load_evidence(args.evidence)
    if args.model:
        sm = study.load(args.model)
        state = acc.push_all(acc.init(sm), es.items)
        mix, _ = acc.posterior(state)
        names = sm.spec.param_names
        axes = tuple(names.index(a) for a in args.axes.split(","))
        if len(axes) != 2:
            raise OrceaError("--axes needs exactly two parameter names")
        svg.render_svg(mix, args.out, axes=axes, title=f"posterior {args.axes}")
    else:
        svg.render_svg(es, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="orcea", description="Model detection from evidence sets.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("study", help="build and save a studied model")
    _common(s)
    s.add_argument("--out", required=True, help="studied-model file to write")
    s.set_defaults(func=cmd_study)

    s = sub.add_parser("sample", help="write a synthetic evidence file")
    _common(s)
    s.add_argument("--instance", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("detect", help="accumulate one evidence file and report matches")
    s.add_argument("--model", required=True)
    s.add_argument("--evidence", required=True)
    s.add_argument("--max-k", type=int)
    s.add_argument("--exact", action="store_true")
    s.add_argument("--trace", action="store_true", help="write trace.tsv into --out")
    s.add_argument("--out")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("bench", help="run the benchmark protocol")
    _common(s)
    s.add_argument("--max-k", type=int)
    s.add_argument("--exact", action="store_true")
    s.add_argument("--n-instances", type=int)
    s.add_argument("--reps", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--study", help="studied-model file (skip the study phase)")
    s.add_argument("--timings", action="store_true", help="also write timings.tsv")
    s.add_argument("--sweep", choices=sorted(bench.SWEEPS))
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("viz", help="render evidence or a posterior slice to SVG")
    s.add_argument("--evidence", required=True)
    s.add_argument("--model", help="render the posterior slice instead of the evidence")
    s.add_argument("--axes", default="x,y")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OrceaError, OSError, ValueError) as exc:
        print(f"orcea {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
