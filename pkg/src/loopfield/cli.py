"""Command line entry points: quick inspection utilities + experiment runner."""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import experiments, harness
from .graphs import build_domain, green, transition_kernel
from .soups import loop_mass, occupation_batch, sample_soups


def _cmd_exponent(args) -> int:
    table = experiments.exponents(args.c)
    print(f"[exponent] c={table.c:g} kappa={table.kappa:.12g} "
          f"rho={table.rho:.12g} beta={table.beta:.12g}")
    if args.u is not None:
        ob = experiments.oblique_exponent(args.c, args.u)
        print(f"[exponent] oblique(u={args.u:g}) = {ob:.12g}")
    return 0


def _cmd_green(args) -> int:
    dom = build_domain(args.kind, args.size)
    gr = green(dom)
    i = int(gr.kernel.pos_of[dom.marked])
    print(f"[green] kind={args.kind} size={args.size} "
          f"active={gr.n} mode={gr.mode}")
    print(f"[green] G(marked, marked) = {gr.entry(i, i):.12g}")
    return 0


def _cmd_soup(args) -> int:
    dom = build_domain(args.kind, args.size)
    ker = transition_kernel(dom)
    rng = harness.rng_stream(args.seed, 0)
    batch = sample_soups(ker, args.c, rng, args.count)
    occ = occupation_batch(batch, rng)
    i = int(ker.pos_of[dom.marked])
    print(f"[soup] kind={args.kind} size={args.size} c={args.c:g} "
          f"replicas={args.count}")
    print(f"[soup] loop-measure mass F = {loop_mass(ker):.9g}")
    print(f"[soup] mean loops/replica = {batch.n_loops / args.count:.6g}")
    print(f"[soup] mean occupation at marked vertex = "
          f"{float(occ[:, i].mean()):.6g}")
    return 0


def _print_verdicts(verdicts) -> None:
    for v in verdicts:
        status = "PASS" if v["passed"] else "FAIL"
        extra = ""
        if v.get("p_value") is not None:
            extra = f" p={v['p_value']:.3g}"
        elif v.get("score") is not None:
            extra = f" score={v['score']:.3g}"
        print(f"[gate] {status} {v['name']} "
              f"(estimate={v['estimate']:.6g} target={v['target']:.6g}{extra})")


def _cmd_run(args) -> int:
    if args.config:
        with open(args.config) as fh:
            cfg = harness.parse_config(fh.read())
        if cfg.experiment != args.experiment:
            raise harness.ConfigError(
                f"config is for {cfg.experiment!r}, not {args.experiment!r}")
    else:
        cfg = harness.make_config(args.experiment)
    workers = args.workers
    if workers is None and "LOOPFIELD_WORKERS" in os.environ:
        workers = int(os.environ["LOOPFIELD_WORKERS"])
    out = args.out
    if out is None and "LOOPFIELD_OUT" in os.environ:
        out = os.environ["LOOPFIELD_OUT"]
    cfg = cfg.with_overrides(seed=args.seed, workers=workers, out=out,
                             n_replicas=args.replicas)
    report = experiments.run_experiment(args.experiment, cfg)
    outdir = cfg["out"]
    files = harness.render_report(report, outdir)
    _print_verdicts([v.to_dict() for v in report.verdicts])
    print(f"[run] {report.experiment}: replicas={report.replicas} "
          f"seed={report.seed}")
    print(f"[run] artifacts: {', '.join(sorted(os.path.basename(f) for f in files))}")
    print(f"[run] wall clock {report.wall_clock:.1f}s (not serialized)")
    print(f"[run] overall: {'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else 3


def _cmd_mass(args) -> int:
    args.experiment = "mass_scaling"
    return _cmd_run(args)


def _cmd_report(args) -> int:
    with open(args.path) as fh:
        doc = json.load(fh)
    print(f"[report] experiment={doc['experiment']} replicas={doc['replicas']} "
          f"seed={doc['seed']}")
    _print_verdicts(doc["verdicts"])
    print(f"[report] overall: {'PASS' if doc['passed'] else 'FAIL'}")
    return 0 if doc["passed"] else 3


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="loopfield",
        description="loop-soup / free-field coupling laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("exponent", help="kappa/rho/beta exponent table")
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--u", type=float, default=None)
    p.set_defaults(fn=_cmd_exponent)

    p = sub.add_parser("green", help="Green matrix summary for a domain")
    p.add_argument("--kind", default="square")
    p.add_argument("--size", type=int, default=7)
    p.set_defaults(fn=_cmd_green)

    p = sub.add_parser("soup", help="sample loop soups and summarize")
    p.add_argument("--kind", default="square")
    p.add_argument("--size", type=int, default=7)
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--count", type=int, default=100)
    p.set_defaults(fn=_cmd_soup)

    for name, fn in (("run", _cmd_run), ("mass", _cmd_mass)):
        p = sub.add_parser(
            name, help="run an experiment pipeline" if name == "run"
            else "run the slit-mass scaling experiment")
        if name == "run":
            p.add_argument("experiment",
                           choices=sorted(experiments._PIPELINES))
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--replicas", type=int, default=None)
        p.set_defaults(fn=fn)

    p = sub.add_parser("report", help="summarize an emitted report.json")
    p.add_argument("--path", default="out/report.json")
    p.set_defaults(fn=_cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except harness.ConfigError as exc:
        print(f"[config-error] {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"[io-error] {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
