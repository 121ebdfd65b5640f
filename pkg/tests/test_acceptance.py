"""Acceptance criteria 1-9, each printing one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline;
they are also echoed to the terminal when output is captured.
"""
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from qfixlab import verification as vf
from qfixlab.cli import load_config, main
from qfixlab.envs import PENALTY_PAYOFF, env_from_dict
from qfixlab.mixers import KINDS, MixerSpec
from qfixlab.training import run_experiment

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
FIX_KINDS = [k for k in KINDS if MixerSpec(k).fixee is not None]


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


def failures(reports):
    return {r.check_name: r.witnesses[:1] for r in reports if not r.passed}


def test_criterion_1_igm_property_suite(report):
    t = time.perf_counter()
    reports = [
        vf.igm_property_check(kind, mode, instances=1000)
        for kind in KINDS
        for mode in ("stateless", "state_only", "history_state")
    ]
    elapsed = time.perf_counter() - t
    bad = failures(reports)
    ok = not bad and elapsed < 120 and all(r.instances == 1000 for r in reports)
    report(1, ok, f"{len(reports)} kind x conditioning checks, 1000 instances each, failures {bad or 0}, {elapsed:.1f}s (< 120s)")


def test_criterion_2_advantage_equivalence(report):
    rep = vf.advantage_equivalence_check(instances=10_000, near_ties=100)
    report(2, rep.passed and rep.instances == 10_000, f"{rep.failures} disagreements on {rep.instances} tables ({rep.details['igm_holds']} IGM), 100 near ties")


def test_criterion_3_gradient_checks(report):
    reports = vf.grad_check_all(instances=100)
    worst = max(r.details["max_rel_error"] for r in reports)
    ok = all(r.passed and r.instances == 100 for r in reports)
    report(3, ok, f"{len(reports)} checks x 100 instances, worst relative error {worst:.2e} (< 1e-4), failing {sorted(failures(reports))}")


def test_criterion_4_detach_identity(report):
    reports = vf.suite_detach(instances=200)
    on = [r for r in reports if r.check_name.endswith("/on")]
    fractions = {r.check_name: r.details["differ_fraction"] for r in reports if r.check_name.endswith("off_differs")}
    ok = all(r.passed for r in reports) and all(r.instances == 200 for r in on)
    report(4, ok, f"detach on: {sum(r.failures for r in on)} mismatches over {sum(r.instances for r in on)}; detach off differs: {fractions}")


def test_criterion_5_recovery(report):
    reports = [vf.recovery_check(kind, instances=200) for kind in FIX_KINDS]
    ok = all(r.passed and r.instances == 200 for r in reports)
    report(5, ok, f"{len(reports)} fixing kinds x 200 instances reproduce the fixee within 1e-12, failing {sorted(failures(reports))}")


def test_criterion_6_completeness_separation(report):
    t = time.perf_counter()
    fits = vf.completeness_fit_check(instances=50, steps=20_000, threshold=1e-2)
    elapsed = time.perf_counter() - t
    rates = {r.check_name: 1 - r.failures / r.instances for r in fits if r.check_name != "completeness/vdn_baseline_gap"}
    fit = vf.best_additive_fit(np.array(PENALTY_PAYOFF))
    ok = (
        all(rate >= 0.95 for rate in rates.values())
        and fit.residual > 1.0
        and fit.greedy_action != (0, 0)
        and elapsed < 600
    )
    report(
        6,
        ok,
        f"fit rates {rates} (>= 0.95); VDN least squares residual {fit.residual:.3f} (> 1.0), greedy {fit.greedy_action}; {elapsed:.0f}s (< 600s)",
    )


def test_criterion_7_stateful_suite(report):
    reports = vf.suite_stateful(instances=200)
    witness = next(r for r in reports if r.check_name == "stateful/state_only_completeness_witness")
    stateful = [r for r in reports if r is not witness]
    reproduced = witness.details["reproduced"]
    ok = all(r.passed for r in stateful) and witness.instances == 10 and reproduced >= 8
    kinds = [r for r in stateful if r.check_name.count("/") == 2]
    report(
        7,
        ok,
        f"{len(kinds)} stateful checks x 200 instances, failing {sorted(failures(stateful))}; witness reproduced {reproduced}/10 (>= 8)",
    )


def test_criterion_8_penalty_game_learning(report):
    optimum = {}
    slowest = 0.0
    for name in ("qplusfix_sum", "vdn"):
        _, cfg = load_config(CONFIGS / f"penalty_{name}.json")
        assert cfg.train.total_steps == 50_000 and len(cfg.seeds) == 20
        hits = 0
        for seed in cfg.seeds:
            t = time.perf_counter()
            res = run_experiment(
                lambda rng: env_from_dict(cfg.env, seed=int(rng.integers(2**63))),
                cfg.mixer,
                replace(cfg.train, seed=seed),
                eval_interval=cfg.eval_interval,
                eval_episodes=cfg.eval_episodes,
            )
            slowest = max(slowest, time.perf_counter() - t)
            hits += res.final_greedy_return == 8.0
        optimum[name] = hits
    ok = optimum["qplusfix_sum"] >= 18 and optimum["vdn"] <= 5 and slowest < 15 * 60
    report(
        8,
        ok,
        f"optimum reached: Q+FIX-sum {optimum['qplusfix_sum']}/20 (>= 18), VDN {optimum['vdn']}/20 (<= 5); slowest seed {slowest:.0f}s",
    )


def test_criterion_9_determinism(report, tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["run", "--config", str(CONFIGS / "smoke.json"), "--out", str(o)]) for o in outs]
    same = (outs[0] / "metrics.jsonl").read_bytes() == (outs[1] / "metrics.jsonl").read_bytes()
    n = len((outs[0] / "metrics.jsonl").read_text().splitlines())
    report(9, codes == [0, 0] and same and n > 0, f"two runs of configs/smoke.json: exit codes {codes}, {n} records, byte-identical metrics.jsonl: {same}")
