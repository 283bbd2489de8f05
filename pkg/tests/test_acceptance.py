"""Acceptance criteria 1-14.

Criteria 1-5 are direct checks on small models. Criterion 14 runs the smoke
configuration twice. Criteria 6-13 read the reports of ``experiment all`` on
``configs/demo.json``; the run is written to ``$IGF_ACCEPTANCE_OUT`` (default
``out/acceptance``). Set ``IGF_ACCEPTANCE_REUSE=1`` to reuse existing reports
there when they pass verification instead of recomputing them.

Each test records one PASS/FAIL line through the ``criterion`` fixture;
the lines are printed at the end of the session.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from igf.cli import main as cli_main
from igf.corpus import Context, sample_contexts
from igf.filtration import Action, ThresholdSchedule, decide, threshold_at
from igf.gradcheck import check_gradient
from igf.infogain import IGDataset, IGSample, information_gain, normalize_ig
from igf.learner import LearnerConfig, conv_layout, conv_loss, init_conv_params
from igf.model import (
    ModelConfig,
    OptimizerConfig,
    TinyCausalLM,
    _token_nats,
    n_params,
    unpack,
)
from igf.suite import EXPERIMENTS, find_reports, verify_report

REPO = Path(__file__).resolve().parents[1]
DEMO_CONFIG = REPO / "configs" / "demo.json"
SMOKE_CONFIG = REPO / "configs" / "smoke.json"

logger = logging.getLogger(__name__)


# 1. finite-difference gradient checks


def test_criterion_01_gradient_check(criterion):
    t0 = time.perf_counter()
    cfg = ModelConfig(vocab_size=300, context_length=8, d_model=16, n_layers=2, n_heads=2, ffn_mult=4, seed=3)
    lm = TinyCausalLM(cfg)
    tokens = torch.as_tensor(np.random.default_rng(0).integers(0, cfg.vocab_size, size=(3, 8)))
    n_targets = tokens.shape[0] * (tokens.shape[1] - 1)
    lm_res = check_gradient(lambda th: _token_nats(cfg, th, tokens) / n_targets, lm.params, n_coordinates=1000,
                            h=1e-4, rng_seed=1)
    lm_time = time.perf_counter() - t0

    t0 = time.perf_counter()
    lcfg = LearnerConfig("conv", embed_dim=16, kernel_width=3, conv_channels=16, hidden_dim=16, context_length=8)
    rng = np.random.default_rng(2)
    theta = torch.from_numpy(init_conv_params(lcfg, rng))
    emb = torch.from_numpy(rng.normal(0.0, 1.0, size=(50, 16)))
    toks = torch.as_tensor(rng.integers(0, 50, size=(12, 8)))
    targets = torch.from_numpy(rng.normal(size=12))
    conv_res = check_gradient(lambda th: conv_loss(lcfg, th, emb, toks, targets), theta, n_coordinates=1000,
                              h=1e-4, rng_seed=1)
    conv_time = time.perf_counter() - t0

    n_conv = sum(int(np.prod(s)) for _, s in conv_layout(lcfg))
    passed = (lm_res.max_relative_error < 1e-4 and conv_res.max_relative_error < 1e-4
              and lm_res.n_coordinates >= 1000 and conv_res.n_coordinates >= 1000
              and lm_time < 60 and conv_time < 60)
    criterion(1, passed,
                     f"LM max rel err {lm_res.max_relative_error:.2e} over {lm_res.n_coordinates} coords in "
                     f"{lm_time:.1f}s; conv {conv_res.max_relative_error:.2e} over {conv_res.n_coordinates} of "
                     f"{n_conv} coords in {conv_time:.1f}s")
    assert lm_res.n_coordinates >= 1000 and conv_res.n_coordinates >= 1000
    assert lm_res.max_relative_error < 1e-4
    assert conv_res.max_relative_error < 1e-4
    assert lm_time < 60 and conv_time < 60


# 2. perplexity identities


def _perfect_cycle_model() -> tuple[TinyCausalLM, list[list[int]]]:
    """A zero-layer model that predicts token ``i + 1`` at position ``i`` with near-certainty."""
    V = L = 16
    cfg = ModelConfig(vocab_size=V, context_length=L - 1, d_model=V, n_layers=0, n_heads=1, seed=0)
    theta = torch.zeros(n_params(cfg), dtype=torch.float64)
    p = unpack(cfg, theta)
    eye = torch.eye(V, dtype=torch.float64)
    p["wte"].copy_(eye)
    # position i sees token i; move the residual onto the next token's direction
    for i in range(L - 1):
        p["wpe"][i].copy_(10.0 * eye[i + 1] - eye[i])
    p["lnf.g"].fill_(1000.0)
    return TinyCausalLM(cfg, theta), [list(range(L - 1))]


def test_criterion_02_perplexity_identities(tiny_config, tiny_corpora, criterion):
    V = tiny_config.vocab_size
    uniform = TinyCausalLM(tiny_config)
    p = unpack(tiny_config, uniform.params)
    p["wte"].zero_()  # tied output projection -> every logit is 0
    batch = sample_contexts(tiny_corpora["a"], 8, tiny_config.context_length, rng_seed=5)
    ppl_uniform = uniform.perplexity(batch)
    uniform_ok = abs(ppl_uniform - V) / V <= 1e-9

    perfect, seq = _perfect_cycle_model()
    ppl_perfect = perfect.perplexity(seq)
    perfect_ok = abs(ppl_perfect - 1.0) <= 1e-9

    lm = TinyCausalLM(tiny_config)
    loss = lm.loss_bits(batch)
    probs = lm.forward(batch).numpy()
    tok = np.array([c.x for c in batch])
    picked = np.take_along_axis(probs[:, :-1], tok[:, 1:, None], axis=2)[..., 0]
    oracle_bits = float(-np.mean(np.log2(picked)))
    ppl = lm.perplexity(batch)
    identity_ok = abs(ppl - 2.0**loss) <= 1e-12 * ppl and abs(loss - oracle_bits) <= 1e-9

    criterion(2, uniform_ok and perfect_ok and identity_ok,
                     f"uniform ppl {ppl_uniform:.12g} (V={V}); perfect ppl {ppl_perfect:.12g}; "
                     f"ppl {ppl:.6f} vs 2^loss {2.0**loss:.6f}")
    assert uniform_ok and perfect_ok and identity_ok


# 3. IG leaves the base untouched and repeats bit-identically


def test_criterion_03_ig_purity_and_determinism(tiny_base, tiny_corpora, tiny_objective, tiny_config, criterion):
    before_params = tiny_base.params.copy()
    before_fp = tiny_base.fingerprint
    opt = OptimizerConfig(learning_rate=1e-3)
    examples = sample_contexts(tiny_corpora["a"], 5, tiny_config.context_length, rng_seed=9)
    first = [information_gain(tiny_base, x, tiny_objective, opt) for x in examples]
    second = [information_gain(tiny_base, x, tiny_objective, opt) for x in examples]
    untouched = np.array_equal(tiny_base.params, before_params) and tiny_base.fingerprint == before_fp
    identical = [np.float64(a).tobytes() for a in first] == [np.float64(b).tobytes() for b in second]
    nonzero = any(v != 0.0 for v in first)
    criterion(3, untouched and identical and nonzero,
                     f"base unchanged={untouched}, repeat bit-identical={identical} over {len(first)} probes")
    assert untouched and identical and nonzero


# 4. normalization


def _dataset(values) -> IGDataset:
    ctx = Context((0, 1), "A")
    return IGDataset(tuple(IGSample(ctx, float(v)) for v in values), "obj", "base")


def test_criterion_04_normalization(criterion):
    raw = np.random.default_rng(4).lognormal(mean=-3.0, sigma=1.5, size=10_000) - 0.02
    z = normalize_ig(_dataset(raw)).targets
    mean_err, std_err = abs(float(z.mean())), abs(float(z.std(ddof=0)) - 1.0)
    analytic = normalize_ig(_dataset([1.0, 2.0, 3.0])).targets
    expected = np.array([-math.sqrt(1.5), 0.0, math.sqrt(1.5)])
    analytic_err = float(np.max(np.abs(analytic - expected)))
    passed = mean_err <= 1e-9 and std_err <= 1e-9 and analytic_err <= 1e-6
    criterion(4, passed, f"|mean| {mean_err:.1e}, |std-1| {std_err:.1e} on 10000; "
                                f"[1,2,3] -> {np.round(analytic, 4).tolist()}")
    assert passed


# 5. decision rule and shifting schedule


def test_criterion_05_decision_and_schedule(criterion):
    rng = np.random.default_rng(5)
    # a coarse grid makes exact ties common
    q = rng.integers(-20, 21, size=100_000) / 10.0
    t = rng.integers(-20, 21, size=100_000) / 10.0
    got = np.array([decide(a, b) is Action.BACKPROP for a, b in zip(q.tolist(), t.tolist())])
    expected = q >= t
    mismatches = int(np.sum(got != expected))
    n_ties = int(np.sum(q == t))
    s = ThresholdSchedule.shifting(1.0, -1.0, 10)
    values = [threshold_at(s, b) for b in range(40)]
    schedule_ok = values[:10] == [1.0] * 10 and values[10:] == [-1.0] * 30
    criterion(5, mismatches == 0 and schedule_ok,
                     f"{mismatches} mismatches over 100000 pairs ({n_ties} ties); schedule batches 0-9 = "
                     f"{sorted(set(values[:10]))}, 10+ = {sorted(set(values[10:]))}")
    assert mismatches == 0 and schedule_ok


# 14. experiment all is reproducible and verifiable


@pytest.mark.slow
def test_criterion_14_experiment_all_reproducible(tmp_path, criterion):
    runs = [tmp_path / "first", tmp_path / "second"]
    for out in runs:
        assert cli_main(["experiment", "all", "--config", str(SMOKE_CONFIG), "--out", str(out)]) == 0
    reports = [out / "reports" for out in runs]
    files = [sorted(p.relative_to(r) for p in r.rglob("*") if p.is_file()) for r in reports]
    same_listing = files[0] == files[1]
    differing = [str(f) for f in files[0] if (reports[0] / f).read_bytes() != (reports[1] / f).read_bytes()] \
        if same_listing else ["<file listing differs>"]
    verify_code = cli_main(["verify", str(reports[0])])
    passed = same_listing and not differing and verify_code == 0 and len(files[0]) > 0
    criterion(14, passed, f"{len(files[0])} report files, {len(differing)} differ, verify exit {verify_code}")
    assert same_listing and not differing, differing
    assert verify_code == 0


# 6-13. the demo suite


@pytest.fixture(scope="session")
def demo_reports() -> dict[str, dict]:
    out = Path(os.environ.get("IGF_ACCEPTANCE_OUT", REPO / "out" / "acceptance"))
    reports = out / "reports"
    reuse = os.environ.get("IGF_ACCEPTANCE_REUSE") == "1"
    found = {json.loads((d / "report.json").read_text())["experiment"]: d for d in find_reports(reports)} \
        if reports.exists() else {}
    if not (reuse and set(found) == set(EXPERIMENTS) and not any(verify_report(d) for d in found.values())):
        t0 = time.perf_counter()
        assert cli_main(["experiment", "all", "--config", str(DEMO_CONFIG), "--out", str(out)]) == 0
        logger.info("demo suite took %.0f s", time.perf_counter() - t0)
        found = {json.loads((d / "report.json").read_text())["experiment"]: d for d in find_reports(reports)}
    problems = {name: verify_report(d) for name, d in found.items()}
    assert not any(problems.values()), problems
    return {name: json.loads((d / "report.json").read_text())["summary"] for name, d in found.items()}


@pytest.mark.slow
def test_criterion_06_headline(demo_reports, criterion):
    s = demo_reports["headline"]
    pools = s["pools"]
    med = {k: v["median_final"] for k, v in pools.items()}
    n = min(v["n_runs"] for v in pools.values())
    p = s["p_shifting_below_standard"]
    passed = n >= 20 and med["igf_shifting"] < med["igf_constant"] < med["standard"] and p < 0.05
    criterion(6, passed,
                     f"median final ppl shifting {med['igf_shifting']:.4f} < constant {med['igf_constant']:.4f} "
                     f"< standard {med['standard']:.4f}; p(shift<std)={p:.4g}; {n} seeds per pool")
    assert n >= 20
    assert med["igf_shifting"] < med["igf_constant"] < med["standard"]
    assert p < 0.05


@pytest.mark.slow
def test_criterion_07_ablation(demo_reports, criterion):
    s = demo_reports["ablation"]
    m, pp = s["mean_ig"], s["pairwise_p"]
    ratio = s["ratio_unigram_to_real"]
    checks = [
        m["real"] >= m["unigram_sampled"] > m["uniform_sampled"],
        pp["unigram_sampled>uniform_sampled"] < 0.05,
        pp["real>uniform_sampled"] < 0.05,
        s["p_uniform_above_zero"] >= 0.05,
        ratio is not None and 0.4 <= ratio <= 0.9,
    ]
    criterion(7, all(checks),
                     f"mean IG real {m['real']:.4g} / unigram {m['unigram_sampled']:.4g} / uniform "
                     f"{m['uniform_sampled']:.4g}; p {pp}; p(uniform>0)={s['p_uniform_above_zero']:.3g}; "
                     f"ratio {ratio:.3f}")
    assert all(checks), checks


@pytest.mark.slow
def test_criterion_08_separation(demo_reports, criterion):
    s = demo_reports["separation"]
    passed = s["auc"] >= 0.8 and s["b_below_a_at_every_threshold"]
    criterion(8, passed, f"AUC {s['auc']:.3f}; B below A at every threshold="
                                f"{s['b_below_a_at_every_threshold']}; B fraction at T=-1: "
                                f"{s['b_fraction_above_minus_one']:.3f}")
    assert s["auc"] >= 0.8
    assert s["b_below_a_at_every_threshold"]


@pytest.mark.slow
def test_criterion_09_early_final_correlation(demo_reports, criterion):
    s = demo_reports["early_final"]
    std = s["correlation"]["standard"]
    books = s["correlation"].get("standard_books", {})
    passed = std["n_runs"] >= 20 and std["pearson_r"] > 0 and std["p_value"] < 0.05
    criterion(9, passed,
                     f"r(batch 1, final) = {std['pearson_r']:.3f} (p={std['p_value']:.3g}, {std['n_runs']} runs); "
                     f"books-only stream r = {books.get('pearson_r', float('nan')):.3f}; reference r = "
                     f"{s['reference_r']}")
    assert std["n_runs"] >= 20
    assert std["pearson_r"] > 0 and std["p_value"] < 0.05


@pytest.mark.slow
def test_criterion_10_learner_comparison(demo_reports, criterion):
    s = demo_reports["learners"]
    top = str(s["largest_size"])
    rows = {k: v[top] for k, v in s["table"].items()}
    significant = all(r["pearson_r"] > 0 and r["p_value"] < 0.01 for r in rows.values())
    conv_ok = s["conv_minus_best_baseline"] >= -0.05
    gap = s.get("conv_r_2000_vs_largest_gap")
    stable = gap is not None and gap <= 0.1
    passed = len(rows) == 4 and significant and conv_ok and stable
    detail = ", ".join(f"{k} r={r['pearson_r']:.3f} (p={r['p_value']:.2g})" for k, r in sorted(rows.items()))
    criterion(10, passed, f"at {top}: {detail}; conv - best baseline {s['conv_minus_best_baseline']:+.3f}; "
                                 f"|r(2000) - r({top})| = {gap}")
    assert len(rows) == 4 and significant
    assert conv_ok
    assert stable


@pytest.mark.slow
def test_criterion_11_best_of_k(demo_reports, criterion):
    s = demo_reports["best_of_k"]
    igf1 = s["median_best_of_k"]["igf_shifting"]["1"]
    std_best = s["standard_best_of_all_median"]
    passed = igf1 < std_best
    criterion(11, passed, f"median best-of-1 IGF {igf1:.4f} vs median best-of-n standard {std_best:.4f}")
    assert passed


@pytest.mark.slow
def test_criterion_12_iterated_igf(demo_reports, criterion):
    s = demo_reports["iigf"]
    passed = s["n_seeds"] >= 5 and s["median_improvement"] >= 0
    criterion(12, passed, f"median improvement {s['median_improvement']:.4g} over {s['n_seeds']} seeds from "
                                 f"converged ppl {s['start_perplexity']:.4f} (standard control "
                                 f"{s['median_standard_improvement']:.4g})")
    assert s["n_seeds"] >= 5
    assert s["median_improvement"] >= 0


@pytest.mark.slow
def test_criterion_13_tracked_contexts(demo_reports, criterion):
    s = demo_reports["tracked"]
    m = s["mean_reduction"]
    passed = m["high"] > m["low"] and s["p_high_greater"] < 0.05
    criterion(13, passed, f"mean loss reduction high-Q {m['high']:.4g} vs low-Q {m['low']:.4g}; "
                                 f"p={s['p_high_greater']:.3g}")
    assert passed
