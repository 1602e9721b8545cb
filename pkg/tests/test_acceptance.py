"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
summary, or via plain ``pytest`` as part of the full suite.
"""
import time

import pytest

from swapsim.models import UNetParams, gen_chain, gen_unet3d
from swapsim.numeric import equivalence_check, grad_check
from swapsim.props import run_invariant_suite
from swapsim.rewrite import RewriteConfig, apply_rewrite, resolve_preset
from swapsim.sim import SimConfig, calibrate_compute_rate, epoch_time, simulate, stall_report
from swapsim.training import (cross_phase_tensors, expand_training_graph,
                              static_peak_estimate)

GIB = 2**30
PRESET_NAMES = ("paper-c1", "paper-c2", "paper-c3", "paper-c4")

# Reference timing scenario: a tuned one-epoch run of 670 s over 171
# iterations, with the untuned swap-everything baseline 17.1% slower.
REF_EPOCH_SECONDS = 670.0
REF_ITERATIONS = 171
REF_PATCH_ITERATIONS = 387
TUNING_GAIN = 0.171
REF_RECOMPUTE_EPOCH_SECONDS = 783.0
BASELINE_ITER_SECONDS = REF_EPOCH_SECONDS / REF_ITERATIONS / (1.0 - TUNING_GAIN)

NVLINK = dict(d2h_bw=40e9, h2d_bw=40e9, xfer_latency=10e-6)
PCIE = dict(d2h_bw=16e9, h2d_bw=16e9, xfer_latency=10e-6)


def report(criterion: str, ok: bool, detail: str):
    print(f"\nACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"{criterion}: {detail}"


@pytest.fixture(scope="module")
def full_unet():
    return expand_training_graph(gen_unet3d(UNetParams(dims=(192, 192, 192))))


@pytest.fixture(scope="module")
def full_variants(full_unet):
    variants = {name: apply_rewrite(full_unet, resolve_preset(name))
                for name in PRESET_NAMES}
    variants["recompute"] = apply_rewrite(
        full_unet, RewriteConfig(mode="recompute", ckpt_policy="speed"))
    return variants


@pytest.fixture(scope="module")
def calibrated_rate(full_variants):
    tg, plan = full_variants["paper-c1"]
    return calibrate_compute_rate(tg, plan, SimConfig(**NVLINK), BASELINE_ITER_SECONDS)


def run_variant(full_variants, name, rate, link):
    tg, plan = full_variants[name]
    r = simulate(tg, plan, SimConfig(compute_rate=rate, **link))
    return r.makespan, stall_report(r)


def test_criterion_1_semantic_preservation():
    started = time.time()
    seeds = list(range(1, 21))
    toys = {
        "chain-n50": expand_training_graph(
            gen_chain(50, bytes_per_tensor=64, kinds=("conv", "activation", "norm"))),
        "unet-8": expand_training_graph(gen_unet3d(UNetParams(
            dims=(8, 8, 8), in_channels=1, base_filters=1, depth=2,
            convs_per_level=1))),
    }
    worst = 0.0
    errors = []
    for label, tg in toys.items():
        variants = [(p,) + apply_rewrite(tg, resolve_preset(p)) for p in PRESET_NAMES]
        for policy in ("speed", "sqrt_n"):
            variants.append((f"rc-{policy}",) + apply_rewrite(
                tg, RewriteConfig(mode="recompute", ckpt_policy=policy)))
        for row in equivalence_check(tg, variants, seeds):
            worst = max(worst, row["deviation"])
            if row["error"]:
                errors.append(f"{label}/{row['label']}: {row['error']}")
    grad_worst = max(
        grad_check(expand_training_graph(gen_chain(12, bytes_per_tensor=64,
                                                   kinds=("conv", "activation", "norm"))),
                   seed=0).max_rel_error,
        grad_check(expand_training_graph(gen_chain(50, bytes_per_tensor=64)),
                   seed=1).max_rel_error,
        grad_check(toys["unet-8"], seed=2).max_rel_error,
    )
    elapsed = time.time() - started
    report("1-semantic-preservation",
           worst == 0.0 and not errors and grad_worst < 1e-4 and elapsed < 30,
           f"deviation={worst} grad_err={grad_worst:.2e} over {len(seeds)} seeds, "
           f"{elapsed:.1f}s (<30s)")


def test_criterion_2_timeline_phenomenology(full_variants, calibrated_rate):
    started = time.time()
    _, c1 = run_variant(full_variants, "paper-c1", calibrated_rate, NVLINK)
    _, c3 = run_variant(full_variants, "paper-c3", calibrated_rate, NVLINK)
    _, c4 = run_variant(full_variants, "paper-c4", calibrated_rate, NVLINK)
    elapsed = time.time() - started
    ok = (c1["boundary"] > 0
          and c3["boundary"] < c1["boundary"]
          and c4["backward"] < c3["backward"]
          and elapsed < 60)
    report("2-timeline-phenomenology", ok,
           f"boundary c1={c1['boundary']:.3f}s > c3={c3['boundary']:.3f}s; "
           f"backward c4={c4['backward']:.3f}s < c3={c3['backward']:.3f}s; "
           f"{elapsed:.1f}s (<60s)")


def test_criterion_3_tuning_gain(full_variants, calibrated_rate):
    m_c1, _ = run_variant(full_variants, "paper-c1", calibrated_rate, NVLINK)
    m_c4, _ = run_variant(full_variants, "paper-c4", calibrated_rate, NVLINK)
    ratio = m_c4 / m_c1
    report("3-tuning-gain", 0.75 <= ratio <= 0.95,
           f"makespan(c4)/makespan(c1) = {ratio:.3f} in [0.75, 0.95] "
           f"(reference gain {TUNING_GAIN:.1%})")


def test_criterion_4_table_structure(full_unet, full_variants):
    candidates = cross_phase_tensors(full_unet)
    synthesis = sum(1 for t in candidates
                    if full_unet.graph.tensor(t).scope.startswith("synthesis/"))
    expected = (len(candidates), min(500, len(candidates)),
                len(candidates) - synthesis, len(candidates) - synthesis)
    got = tuple(len(full_variants[name][1].swapped) for name in PRESET_NAMES)

    # The capped preset only differs from swap-everything when there are more
    # than 500 feature maps, so the peak-direction comparison runs on a long
    # uniform chain where the cap binds: the unswapped residue of the capped
    # run stays resident across the phase boundary and raises the peak.
    chain = expand_training_graph(gen_chain(843, bytes_per_tensor=15_000_000))
    peak = {}
    for name in ("paper-c1", "paper-c2"):
        rw, plan = apply_rewrite(chain, resolve_preset(name))
        peak[name] = static_peak_estimate(rw, plan).peak_bytes
    ok = got == expected and peak["paper-c1"] < peak["paper-c2"]
    report("4-table-structure", ok,
           f"swapped counts {got} == {expected}; chain-843 peak all-swap "
           f"{peak['paper-c1']/1e9:.2f} GB < capped {peak['paper-c2']/1e9:.2f} GB")


def test_criterion_5_recompute_comparison(full_variants, calibrated_rate):
    m_rec_nv, _ = run_variant(full_variants, "recompute", calibrated_rate, NVLINK)
    m_c4_nv, _ = run_variant(full_variants, "paper-c4", calibrated_rate, NVLINK)
    m_rec_pc, _ = run_variant(full_variants, "recompute", calibrated_rate, PCIE)
    m_c4_pc, _ = run_variant(full_variants, "paper-c4", calibrated_rate, PCIE)
    ratio_nv = m_rec_nv / m_c4_nv
    ratio_pc = m_rec_pc / m_c4_pc

    tg208 = expand_training_graph(gen_unet3d(UNetParams(dims=(208, 208, 208))))
    rec_rw, rec_plan = apply_rewrite(
        tg208, RewriteConfig(mode="recompute", ckpt_policy="speed"))
    swap_rw, swap_plan = apply_rewrite(tg208, resolve_preset("paper-c1"))
    rec_peak = static_peak_estimate(rec_rw, rec_plan).peak_bytes
    swap_peak = static_peak_estimate(swap_rw, swap_plan).peak_bytes

    ok = (1.05 <= ratio_nv <= 1.35
          and ratio_pc < ratio_nv
          and rec_peak > 16 * GIB
          and swap_peak <= 16 * GIB)
    report("5-recompute-comparison", ok,
           f"recompute/swap makespan: nvlink {ratio_nv:.3f} in [1.05,1.35] "
           f"(reference {REF_RECOMPUTE_EPOCH_SECONDS/REF_EPOCH_SECONDS:.2f}), "
           f"pcie {ratio_pc:.3f} < nvlink; 208^3 static peak recompute "
           f"{rec_peak/GIB:.1f} GiB > 16 GiB budget, all-swap {swap_peak/GIB:.1f} GiB fits")


def test_criterion_6_property_suites():
    started = time.time()
    suite = run_invariant_suite(instances=200, seed=0)
    elapsed = time.time() - started
    ok = not suite["failures"] and suite["instances"] >= 200 and elapsed < 300
    detail = (f"{suite['instances']} randomized instances, {suite['checks']} checks, "
              f"{suite['oracle_runs']} schedule-oracle runs, {elapsed:.1f}s (<300s)")
    if suite["failures"]:
        detail += f"; first failure: {suite['failures'][0]}"
    report("6-property-suites", ok, detail)


def test_criterion_7_epoch_model():
    # Dyadic per-iteration times keep the products exact, so the iteration
    # ratio comes out bit-exact.
    exact = all(
        epoch_time(t, REF_ITERATIONS) / epoch_time(t, REF_PATCH_ITERATIONS)
        == REF_ITERATIONS / REF_PATCH_ITERATIONS
        for t in (0.5, 1.0, 2.25, 4.0))
    host_bound = epoch_time(0.5, REF_PATCH_ITERATIONS, host_preproc_seconds=1.0) \
        == REF_PATCH_ITERATIONS * 1.0
    report("7-epoch-model", exact and host_bound,
           f"epoch ratio {REF_ITERATIONS}/{REF_PATCH_ITERATIONS} exact = {exact}; "
           f"host-bound branch engages = {host_bound}")
