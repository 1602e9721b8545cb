"""Command-line front end: generate, rewrite, simulate, sweep, verify.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys

from .graph import GraphError, load_graph, save_graph
from .models import UNetParams, gen_chain, gen_unet3d
from .training import (expand_training_graph, load_training_graph,
                       save_training_graph, static_peak_estimate)
from .rewrite import (PRESETS, RewriteConfig, apply_rewrite, check_rewrite_validity,
                      load_plan, resolve_preset, save_plan)
from .sim import (SimConfig, calibrate_compute_rate, emit_trace, epoch_time,
                  simulate, stall_report, sweep)

LINKS = {
    "nvlink1": (40e9, 40e9),  # 80 GB/s bidirectional split across directions
    "pcie3": (16e9, 16e9),    # 32 GB/s bidirectional split across directions
}


class UsageError(Exception):
    """Bad invocation rather than a domain failure; exits with code 2."""

_IEC = {"kib": 2**10, "mib": 2**20, "gib": 2**30, "tib": 2**40}
_SI = {"kb": 1e3, "mb": 1e6, "gb": 1e9, "tb": 1e12, "b": 1.0}


def parse_bytes(text: str) -> int:
    s = str(text).strip().lower().replace(" ", "")
    for suffix, mult in sorted({**_IEC, **_SI}.items(), key=lambda kv: -len(kv[0])):
        if s.endswith(suffix):
            return int(float(s[:-len(suffix)]) * mult)
    return int(float(s))


def fmt_bytes(n: int) -> str:
    return f"{n} B ({n / 1e9:.3f} GB, {n / 2**30:.3f} GiB)"


def parse_seed_spec(text: str) -> list[int]:
    seeds: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise GraphError(f"no seeds in spec {text!r}")
    return seeds


def _csv_floats(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


def _csv_ints(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


def _rewrite_config(args) -> RewriteConfig:
    if getattr(args, "preset", None):
        return resolve_preset(args.preset)
    return RewriteConfig(
        mode=args.mode,
        n_tensors=args.n_tensors,
        lb=args.lb,
        excl_scopes=tuple(s for s in (args.excl_scopes or "").split(",") if s),
        incl_scopes=tuple(s for s in (args.incl_scopes or "").split(",") if s),
        ckpt_policy=args.ckpt_policy,
        manual_ckpts=tuple(s for s in (args.manual_ckpts or "").split(",") if s),
    )


def _sim_config(args) -> SimConfig:
    d2h, h2d = args.d2h_bw, args.h2d_bw
    if args.link:
        if args.link not in LINKS:
            raise GraphError(f"unknown link preset {args.link!r}; expected one of {sorted(LINKS)}")
        d2h, h2d = LINKS[args.link]
    return SimConfig(
        compute_rate=args.compute_rate, d2h_bw=d2h, h2d_bw=h2d,
        xfer_latency=args.latency,
        gpu_budget=parse_bytes(args.budget) if args.budget else 0,
        static_bytes=parse_bytes(args.static_bytes) if args.static_bytes else 0,
        enforce_budget=args.enforce_budget,
    )


def cmd_generate(args) -> int:
    if args.workload == "unet":
        params = UNetParams(dims=tuple(args.dims), in_channels=args.in_channels,
                            base_filters=args.base_filters, depth=args.depth,
                            elem_bytes=args.elem_bytes,
                            convs_per_level=args.convs_per_level)
        g = gen_unet3d(params)
    else:
        kinds = tuple(k for k in args.kinds.split(",") if k) or ("conv",)
        g = gen_chain(args.n, args.bytes_per_tensor, args.cost, kinds)
    save_graph(g, args.output)
    print(f"wrote {args.output}: {len(g.nodes)} nodes, {len(g.tensors)} tensors")
    return 0


def cmd_rewrite(args) -> int:
    g = load_graph(args.graph)
    static = parse_bytes(args.static_bytes) if args.static_bytes else 0
    tg = expand_training_graph(g, static_bytes=static,
                               backward_cost_ratio=args.backward_cost_ratio)
    cfg = _rewrite_config(args)
    rewritten, plan = apply_rewrite(tg, cfg)
    violations = check_rewrite_validity(tg, rewritten, plan)
    if violations:
        raise GraphError(f"rewrite produced an invalid graph: {violations[0]}")
    save_training_graph(rewritten, args.out_graph)
    save_plan(plan, args.out_plan)
    liveness = static_peak_estimate(rewritten, plan)
    print(f"mode: {plan.mode}")
    print(f"swapped feature maps: {len(plan.swapped)}")
    print(f"checkpoints: {len(plan.checkpoints)}")
    print(f"recompute clones: {len(plan.clone_map)}")
    print(f"static peak estimate: {fmt_bytes(liveness.peak_bytes)}")
    if args.liveness:
        with open(args.liveness, "w", encoding="utf-8") as fh:
            fh.write(liveness.to_json())
        print(f"wrote liveness report {args.liveness}")
    print(f"wrote {args.out_graph} and {args.out_plan}")
    return 0


def _run_scenario(path: str, args) -> int:
    with open(path, encoding="utf-8") as fh:
        sc = json.load(fh)
    gen = sc["generator"]
    if gen["kind"] == "unet3d":
        g = gen_unet3d(UNetParams(
            dims=tuple(gen["dims"]), in_channels=gen.get("in_channels", 4),
            base_filters=gen.get("base_filters", 64), depth=gen.get("depth", 5),
            elem_bytes=gen.get("elem_bytes", 4),
            convs_per_level=gen.get("convs_per_level", 2)))
    elif gen["kind"] == "chain":
        g = gen_chain(gen["n"], gen.get("bytes_per_tensor", 1024),
                      gen.get("cost_per_op", 1.0),
                      tuple(gen.get("kinds", ["conv"])))
    else:
        raise GraphError(f"unknown generator kind {gen.get('kind')!r}")
    tg = expand_training_graph(g, static_bytes=int(sc.get("static_bytes", 0)))

    rw = sc.get("rewrite", {})
    if "preset" in rw:
        cfg = resolve_preset(rw["preset"])
    else:
        cfg = RewriteConfig(
            mode=rw.get("mode", "none"), n_tensors=rw.get("n_tensors", -1),
            lb=rw.get("lb", 1), excl_scopes=tuple(rw.get("excl_scopes", ())),
            incl_scopes=tuple(rw.get("incl_scopes", ())),
            ckpt_policy=rw.get("ckpt_policy", "speed"),
            manual_ckpts=tuple(rw.get("manual_ckpts", ())))
    rewritten, plan = apply_rewrite(tg, cfg)

    sm = sc.get("sim", {})
    d2h, h2d = LINKS.get(sm.get("link", ""), (sm.get("d2h_bw", 40e9), sm.get("h2d_bw", 40e9)))
    sim_cfg = SimConfig(compute_rate=sm.get("compute_rate", 1e12), d2h_bw=d2h, h2d_bw=h2d,
                        xfer_latency=sm.get("xfer_latency", 0.0),
                        gpu_budget=parse_bytes(sm["gpu_budget"]) if "gpu_budget" in sm else 0,
                        static_bytes=parse_bytes(sm["static_bytes"]) if "static_bytes" in sm else 0,
                        enforce_budget=bool(sm.get("enforce_budget", False)))
    cal = sm.get("calibrate")
    if cal:
        cal_cfg = resolve_preset(cal["preset"]) if "preset" in cal else RewriteConfig(mode="none")
        cal_tg, cal_plan = apply_rewrite(tg, cal_cfg)
        sim_cfg.compute_rate = calibrate_compute_rate(
            cal_tg, cal_plan, sim_cfg, float(cal["target_seconds"]))
        print(f"calibrated compute_rate: {sim_cfg.compute_rate:.6g} units/s")

    report = simulate(rewritten, plan, sim_cfg)
    _print_report(report)
    outputs = sc.get("outputs", {})
    if outputs.get("trace"):
        emit_trace(report, outputs["trace"])
        print(f"wrote trace {outputs['trace']}")
    if outputs.get("report"):
        with open(outputs["report"], "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
        print(f"wrote report {outputs['report']}")
    return 0


def _print_report(report) -> None:
    phases = stall_report(report)
    print(f"makespan: {report.makespan:.6f} s")
    print(f"peak resident: {fmt_bytes(report.peak_resident)}")
    print(f"stalls: forward {phases['forward']:.6f} s, "
          f"boundary {phases['boundary']:.6f} s, backward {phases['backward']:.6f} s")
    for ch in ("compute", "d2h", "h2d"):
        print(f"busy[{ch}]: {report.busy[ch]:.3f}")


def cmd_simulate(args) -> int:
    if args.scenario:
        return _run_scenario(args.scenario, args)
    tg = load_training_graph(args.graph)
    plan = load_plan(args.plan) if args.plan else None
    sim_cfg = _sim_config(args)
    if args.calibrate_target:
        sim_cfg.compute_rate = calibrate_compute_rate(tg, plan, sim_cfg,
                                                      float(args.calibrate_target))
        print(f"calibrated compute_rate: {sim_cfg.compute_rate:.6g} units/s")
    report = simulate(tg, plan, sim_cfg)
    _print_report(report)
    if args.iterations:
        total = epoch_time(report.makespan, args.iterations, args.host_preproc)
        print(f"epoch estimate: {total:.3f} s over {args.iterations} iterations")
    if args.trace:
        emit_trace(report, args.trace)
        print(f"wrote trace {args.trace}")
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
        print(f"wrote report {args.report}")
    return 0


def cmd_sweep(args) -> int:
    g = load_graph(args.graph)
    static = parse_bytes(args.static_bytes) if args.static_bytes else 0
    tg = expand_training_graph(g, static_bytes=static)

    rewrite_cfgs: list[RewriteConfig] = []
    if args.presets:
        rewrite_cfgs.extend(resolve_preset(p.strip()) for p in args.presets.split(",") if p.strip())
    if args.lb or args.n_tensors:
        lbs = _csv_ints(args.lb) if args.lb else [1]
        nts = _csv_ints(args.n_tensors) if args.n_tensors else [-1]
        excl = tuple(s for s in (args.excl_scopes or "").split(",") if s)
        for nt in nts:
            for lb in lbs:
                rewrite_cfgs.append(RewriteConfig(mode=args.mode, n_tensors=nt, lb=lb,
                                                  excl_scopes=excl))
    if not rewrite_cfgs:
        raise UsageError("empty sweep grid: give --presets or --lb/--n-tensors")

    if args.link:
        bws = [LINKS[l.strip()] for l in args.link.split(",") if l.strip()]
    elif args.bw:
        bws = [(b, b) for b in _csv_floats(args.bw)]
    else:
        bws = [(40e9, 40e9)]
    sim_cfgs = [SimConfig(compute_rate=args.compute_rate, d2h_bw=d, h2d_bw=h,
                          xfer_latency=args.latency) for d, h in bws]

    rows = sweep(tg, rewrite_cfgs, sim_cfgs)
    header = ["n_tensors", "lb", "mode", "d2h_bw", "h2d_bw", "swapped",
              "makespan", "peak_resident", "boundary_stall", "backward_stall", "error"]
    widths = [max(len(h), 12) for h in header]

    def fmt_row(values):
        cells = [f"{v:g}" if isinstance(v, float) else str(v) for v in values]
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths))

    lines = [fmt_row(header)]
    for row in rows:
        lines.append(fmt_row([row[h] if row[h] is not None else "-" for h in header]))
    table = "\n".join(lines) + "\n"
    print(table, end="")
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"version": 1, "rows": rows}, sort_keys=True, indent=2) + "\n")
        print(f"wrote {args.output}")
    return 0


def cmd_verify(args) -> int:
    from .models import gen_chain, gen_unet3d, UNetParams
    from .numeric import equivalence_check, grad_check
    from .props import make_broken_swap_variant, run_invariant_suite

    seeds = parse_seed_spec(args.seeds)
    failures: list[str] = []

    chain_tg = expand_training_graph(gen_chain(8, bytes_per_tensor=48,
                                               kinds=("conv", "activation", "norm", "pool")[:3]))
    unet_tg = expand_training_graph(gen_unet3d(UNetParams(
        dims=(8, 8, 8), in_channels=1, base_filters=1, depth=2, convs_per_level=1)))

    for label, tg in (("chain", chain_tg), ("unet-toy", unet_tg)):
        variants = []
        for preset in sorted(PRESETS):
            variants.append((preset,) + apply_rewrite(tg, resolve_preset(preset)))
        for policy in ("speed", "sqrt_n"):
            cfg = RewriteConfig(mode="recompute", ckpt_policy=policy)
            variants.append((f"recompute-{policy}",) + apply_rewrite(tg, cfg))
        if label == "chain" and args.inject_use_after_swap:
            variants.append(("injected-broken-plan",) + make_broken_swap_variant(chain_tg))
        for row in equivalence_check(tg, variants, seeds):
            if row["error"] or row["deviation"] != 0.0:
                failures.append(f"equivalence[{label}/{row['label']}]: "
                                f"deviation={row['deviation']} {row['error']}")
        for seed in seeds[:3]:
            rep = grad_check(tg, seed=seed)
            if rep.max_rel_error >= 1e-4:
                failures.append(f"grad-check[{label}] seed {seed}: {rep.max_rel_error}")

    suite = run_invariant_suite(instances=args.instances, seed=args.seed)
    failures.extend(suite["failures"])
    print(f"invariant suite: {suite['instances']} instances, {suite['checks']} checks, "
          f"{suite['oracle_runs']} schedule-oracle runs")
    if failures:
        for f in failures:
            print(f"FAIL {f}", file=sys.stderr)
        return 1
    print(f"verify: all checks passed ({len(seeds)} seeds)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swapsim",
        description="Model training graphs under a GPU memory budget: swap/recompute "
                    "rewrites plus a deterministic schedule simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="generate a workload graph file")
    gen_sub = p_gen.add_subparsers(dest="workload", required=True)
    p_unet = gen_sub.add_parser("unet", help="3D U-Net forward graph")
    p_unet.add_argument("--dims", type=int, nargs=3, required=True)
    p_unet.add_argument("--in-channels", type=int, default=4)
    p_unet.add_argument("--base-filters", type=int, default=64)
    p_unet.add_argument("--depth", type=int, default=5)
    p_unet.add_argument("--elem-bytes", type=int, default=4)
    p_unet.add_argument("--convs-per-level", type=int, default=2)
    p_unet.add_argument("-o", "--output", required=True)
    p_unet.set_defaults(func=cmd_generate)
    p_chain = gen_sub.add_parser("chain", help="linear chain graph")
    p_chain.add_argument("--n", type=int, required=True)
    p_chain.add_argument("--bytes-per-tensor", type=int, default=1024)
    p_chain.add_argument("--cost", type=float, default=1.0)
    p_chain.add_argument("--kinds", default="conv")
    p_chain.add_argument("-o", "--output", required=True)
    p_chain.set_defaults(func=cmd_generate)

    p_rw = sub.add_parser("rewrite", help="expand to a training graph and apply a rewrite")
    p_rw.add_argument("graph")
    p_rw.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p_rw.add_argument("--mode", choices=["swap", "recompute", "none"], default="swap")
    p_rw.add_argument("--n-tensors", type=int, default=-1)
    p_rw.add_argument("--lb", type=int, default=1)
    p_rw.add_argument("--excl-scopes", default="")
    p_rw.add_argument("--incl-scopes", default="")
    p_rw.add_argument("--ckpt-policy", choices=["speed", "sqrt_n", "manual"], default="speed")
    p_rw.add_argument("--manual-ckpts", default="")
    p_rw.add_argument("--static-bytes", default="")
    p_rw.add_argument("--backward-cost-ratio", type=float, default=2.0)
    p_rw.add_argument("--out-graph", default="training_graph.json")
    p_rw.add_argument("--out-plan", default="plan.json")
    p_rw.add_argument("--liveness", default=None,
                      help="write the per-tensor residency intervals as JSON")
    p_rw.set_defaults(func=cmd_rewrite)

    p_sim = sub.add_parser("simulate", help="simulate a rewritten training graph")
    p_sim.add_argument("graph", nargs="?")
    p_sim.add_argument("plan", nargs="?")
    p_sim.add_argument("--scenario", default=None,
                       help="scenario file binding generator, rewrite and sim configs")
    p_sim.add_argument("--compute-rate", type=float, default=1e12)
    p_sim.add_argument("--d2h-bw", type=float, default=40e9)
    p_sim.add_argument("--h2d-bw", type=float, default=40e9)
    p_sim.add_argument("--link", choices=sorted(LINKS), default=None)
    p_sim.add_argument("--latency", type=float, default=0.0)
    p_sim.add_argument("--budget", default="")
    p_sim.add_argument("--enforce-budget", action="store_true")
    p_sim.add_argument("--static-bytes", default="")
    p_sim.add_argument("--calibrate-target", type=float, default=None)
    p_sim.add_argument("--trace", default=None)
    p_sim.add_argument("--report", default=None)
    p_sim.add_argument("--iterations", type=int, default=None,
                       help="also print the epoch-time estimate for N iterations")
    p_sim.add_argument("--host-preproc", type=float, default=0.0)
    p_sim.set_defaults(func=cmd_simulate)

    p_sw = sub.add_parser("sweep", help="simulate a grid of rewrite/sim configurations")
    p_sw.add_argument("graph")
    p_sw.add_argument("--presets", default="")
    p_sw.add_argument("--mode", choices=["swap", "recompute", "none"], default="swap")
    p_sw.add_argument("--n-tensors", default="")
    p_sw.add_argument("--lb", default="")
    p_sw.add_argument("--excl-scopes", default="")
    p_sw.add_argument("--bw", default="")
    p_sw.add_argument("--link", default="")
    p_sw.add_argument("--compute-rate", type=float, default=1e12)
    p_sw.add_argument("--latency", type=float, default=0.0)
    p_sw.add_argument("--static-bytes", default="")
    p_sw.add_argument("-o", "--output", default=None)
    p_sw.set_defaults(func=cmd_sweep)

    p_ver = sub.add_parser("verify", help="equivalence, gradient and invariant suites")
    p_ver.add_argument("--seeds", default="1..20")
    p_ver.add_argument("--instances", type=int, default=200)
    p_ver.add_argument("--seed", type=int, default=0)
    p_ver.add_argument("--inject-use-after-swap", action="store_true")
    p_ver.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "simulate" and not args.scenario and not args.graph:
        parser.error("simulate needs GRAPH PLAN or --scenario")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except GraphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
