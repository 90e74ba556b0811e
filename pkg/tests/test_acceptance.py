"""End-to-end acceptance checks.

Each test prints one PASS/FAIL line with the measured numbers, then asserts.
The balancing and counterfactual checks train real models at desk scale:
the balancing block runs five paired seeds at 500 epochs, the counterfactual
block at 3000 epochs (the per-step error pattern needs the factual fit to be
past its transient; see notes in the repo history).  Expect the whole module
to take roughly an hour.
"""

import json
import os
import time

import numpy as np
import pytest

from godeflow import autodiff as ad
from godeflow.autodiff import Tensor
from godeflow.cli import main as cli_main
from godeflow.config import RunConfig
from godeflow.graphs import (
    build_graph,
    generate_synthetic_graph,
    interference_summary,
    partition_graph,
)
from godeflow.model import (
    GROUP_NAMES,
    ModelConfig,
    ModelParams,
    decode_outcome,
    encode_initial,
    euler_solve,
    loss_interference,
    loss_outcome,
    loss_total,
    loss_treatment,
    solve_trajectory,
)
from godeflow.pipeline import build_graph as config_graph
from godeflow.pipeline import fit, simulate
from godeflow.simulator import (
    InterventionSpec,
    SimParams,
    counterfactual_oracle,
    simulate_trajectory,
    variant_params,
)
from godeflow.training import (
    TrainConfig,
    balance_diagnostics,
    evaluate_counterfactual,
    generalization_eval,
    train,
)

PAIRED_SEEDS = (101, 102, 103, 104, 105)
BALANCE_EPOCHS = 500
COUNTERFACTUAL_EPOCHS = 3000
GENERALIZATION_EPOCHS = 500


def report(number, ok, detail, capsys):
    with capsys.disabled():
        print(f"\n[criterion {number:02d}] {'PASS' if ok else 'FAIL'}: {detail}")


def seeded_config(base):
    config = RunConfig()
    config.graph.seed = base
    config.sim = variant_params(config.sim, seed=base + 1)
    config.train.seed = base + 2
    config.eval.seed = base + 3
    return config


# ---------------------------------------------------------------- criterion 1


def test_criterion_01_gradient_correctness(capsys):
    t_start = time.time()
    config = ModelConfig(latent_dim=8, encoder_hidden=8, head_hidden=8, substeps=2)
    graph = generate_synthetic_graph(6, 2.0, 1.0, seed=21)
    rng = np.random.default_rng(21)
    x0 = rng.uniform(1.0, 9.0, size=6)
    statics = rng.normal(size=(6, 3))
    treatments = (rng.random((4, 6)) < 0.5).astype(np.int64)
    interference = np.stack(
        [interference_summary(graph, treatments[t]) for t in range(4)]
    )
    targets = rng.uniform(0.5, 9.5, size=(4, 6))
    params = ModelParams.initialize(3, config, seed=21)

    def trajectory():
        z0 = encode_initial(x0, statics, params)
        return solve_trajectory(z0, treatments.astype(np.float64), graph, params)

    # the reversal is held at identity so the scalar being differentiated is
    # the loss itself; the sign contract of the reversal is criterion 2
    losses = {
        "outcome": lambda: loss_outcome(
            decode_outcome(trajectory().stacked(), params), targets
        ),
        "treatment": lambda: loss_treatment(
            trajectory(), treatments, params, reversal=False
        ),
        "interference": lambda: loss_interference(
            trajectory(), treatments, interference, params, reversal=False
        ),
        "total": lambda: loss_total(
            loss_outcome(decode_outcome(trajectory().stacked(), params), targets),
            loss_treatment(trajectory(), treatments, params, reversal=False),
            loss_interference(
                trajectory(), treatments, interference, params, reversal=False
            ),
            0.5,
            0.5,
        ),
    }
    touched_groups = {
        "outcome": ("encoder", "ode", "outcome"),
        "treatment": ("encoder", "ode", "treatment"),
        "interference": ("encoder", "ode", "interference"),
        "total": GROUP_NAMES,
    }

    h = 1e-5
    worst = 0.0
    worst_at = ""
    for loss_name, build in losses.items():
        for tensor in params.named_parameters().values():
            tensor.grad = None
        build().backward()
        for group in touched_groups[loss_name]:
            for par_name, tensor in params.groups[group].items():
                grad = tensor.grad
                assert grad is not None, f"{loss_name}: no gradient to {group}.{par_name}"
                for idx in range(tensor.values.size):
                    original = tensor.values.flat[idx]
                    tensor.values.flat[idx] = original + h
                    up = float(build().values)
                    tensor.values.flat[idx] = original - h
                    down = float(build().values)
                    tensor.values.flat[idx] = original
                    numeric = (up - down) / (2.0 * h)
                    exact = grad.flat[idx]
                    rel = abs(numeric - exact) / max(abs(numeric), abs(exact), 1e-8)
                    if rel > worst:
                        worst = rel
                        worst_at = f"{loss_name}:{group}.{par_name}[{idx}]"
    elapsed = time.time() - t_start
    ok = worst < 1e-4 and elapsed < 10.0
    report(1, ok,
           f"max relative error {worst:.3e} (at {worst_at}), "
           f"runtime {elapsed:.1f}s (budget 10s)", capsys)
    assert worst < 1e-4, worst_at
    assert elapsed < 10.0


# ---------------------------------------------------------------- criterion 2


def test_criterion_02_gradient_reversal_contract(capsys):
    config = ModelConfig(latent_dim=8, encoder_hidden=8, head_hidden=8, substeps=2)
    graph = generate_synthetic_graph(6, 2.0, 1.0, seed=22)
    rng = np.random.default_rng(22)
    x0 = rng.uniform(1.0, 9.0, size=6)
    statics = rng.normal(size=(6, 3))
    treatments = (rng.random((4, 6)) < 0.5).astype(np.int64)
    interference = np.stack(
        [interference_summary(graph, treatments[t]) for t in range(4)]
    )
    params = ModelParams.initialize(3, config, seed=22)

    def trajectory():
        z0 = encode_initial(x0, statics, params)
        return solve_trajectory(z0, treatments.astype(np.float64), graph, params)

    builders = {
        "treatment": lambda rev: loss_treatment(
            trajectory(), treatments, params, reversal=rev
        ),
        "interference": lambda rev: loss_interference(
            trajectory(), treatments, interference, params, reversal=rev
        ),
    }
    forward_bitwise = True
    upstream_negated = True
    heads_identical = True
    for head, build in builders.items():
        grads = {}
        values = {}
        for rev in (True, False):
            for tensor in params.named_parameters().values():
                tensor.grad = None
            loss = build(rev)
            values[rev] = loss.values.copy()
            loss.backward()
            grads[rev] = {
                name: tensor.grad.copy()
                for name, tensor in params.named_parameters().items()
                if tensor.grad is not None
            }
        forward_bitwise &= values[True].tobytes() == values[False].tobytes()
        for name in grads[True]:
            group = name.split(".")[0]
            if group in ("encoder", "ode"):
                upstream_negated &= np.array_equal(grads[True][name], -grads[False][name])
            elif group == head:
                heads_identical &= np.array_equal(grads[True][name], grads[False][name])
    ok = forward_bitwise and upstream_negated and heads_identical
    report(2, ok,
           f"forward bitwise={forward_bitwise}, upstream exact negation="
           f"{upstream_negated}, head gradients identical={heads_identical}", capsys)
    assert forward_bitwise and upstream_negated and heads_identical


# ---------------------------------------------------------------- criterion 3


def test_criterion_03_euler_first_order(capsys):
    def rhs(z, t):
        return ad.scale(z, -1.0)

    exact = float(np.exp(-1.0))
    coarse = euler_solve(rhs, Tensor(np.array([[1.0]])), 1, 10)[-1].values[0, 0]
    fine = euler_solve(rhs, Tensor(np.array([[1.0]])), 1, 20)[-1].values[0, 0]
    ratio = abs(coarse - exact) / abs(fine - exact)
    ok = 1.8 <= ratio <= 2.2
    report(3, ok, f"halving the step scaled the error by {ratio:.4f} "
                  f"(required [1.8, 2.2])", capsys)
    assert ok


# ---------------------------------------------------------------- criterion 4


def test_criterion_04_simulator_invariants(capsys):
    problems = []
    for seed in range(201, 211):
        graph = generate_synthetic_graph(500, 2.0, 1.7, seed)
        ds = simulate_trajectory(graph, variant_params(SimParams(), seed=seed + 1))
        if not (np.all(ds.covariates >= 0.1) and np.all(ds.covariates <= 10.0)):
            problems.append(f"seed {seed}: X out of range")
        if not (np.all(ds.interference >= 0.0) and np.all(ds.interference <= 1.0)):
            problems.append(f"seed {seed}: G out of [0, 1]")
        if not np.all(ds.doses <= 2.0):
            problems.append(f"seed {seed}: dose above 2")
        for t in range(ds.horizon + 1):
            if not np.array_equal(
                ds.interference[t], interference_summary(graph, ds.treatments[t])
            ):
                problems.append(f"seed {seed}: stored G differs at t={t}")
                break
        null = counterfactual_oracle(ds, InterventionSpec(start_time=5, flip_ratio=0.0))
        if null.outcomes.tobytes() != ds.covariates.tobytes():
            problems.append(f"seed {seed}: null intervention not bitwise factual")
    ok = not problems
    report(4, ok, "10 seeds, N=500, T=10: all invariants hold" if ok
           else "; ".join(problems), capsys)
    assert ok, problems


# ---------------------------------------------------------------- criterion 5


def test_criterion_05_confounding_realization(capsys):
    gaps = []
    null_rates = []
    for seed in range(301, 306):
        graph = generate_synthetic_graph(500, 2.0, 1.7, seed)
        ds = simulate_trajectory(graph, variant_params(SimParams(), seed=seed + 1))
        below = []
        above = []
        for t in range(ds.horizon + 1):
            xbar = ds.covariates[: t + 1].mean(axis=0)
            below.append(ds.treatments[t][xbar < 5.0])
            above.append(ds.treatments[t][xbar >= 5.0])
        gaps.append(np.concatenate(below).mean() - np.concatenate(above).mean())

        flat = variant_params(
            SimParams(), seed=seed + 1,
            gamma_a=0.0, gamma_n=0.0, gamma_f=0.0, gamma_g=0.0,
        )
        null_rates.append(simulate_trajectory(graph, flat).treatments.mean())
    gap = float(np.mean(gaps))
    null_rate = float(np.mean(null_rates))
    ok = gap >= 0.1 and abs(null_rate - 0.5) <= 0.02
    report(5, ok,
           f"treated-rate gap below-vs-above adjustment point = {gap:.4f} "
           f"(need >= 0.1); rate without confounding = {null_rate:.4f} "
           f"(need 0.5 +/- 0.02)", capsys)
    assert ok


# ----------------------------------------------------- criteria 6, 7, 8, 11


def train_variant_pair(config, dataset, epochs):
    """Train the balanced and unbalanced variants from the same seed."""
    out = {}
    for variant in ("full", "N"):
        config.train = TrainConfig.for_variant(
            variant, epochs=epochs, seed=config.train.seed
        )
        params, _ = fit(config, dataset)
        out[variant] = params
    return out


@pytest.fixture(scope="module")
def balance_runs():
    """Five paired seeds at 500 epochs with post-hoc balance probes."""
    t_start = time.time()
    rows = []
    for base in PAIRED_SEEDS:
        config = seeded_config(base)
        dataset = simulate(config, config_graph(config))
        models = train_variant_pair(config, dataset, BALANCE_EPOCHS)
        for variant, params in models.items():
            probe = balance_diagnostics(params, dataset)
            rows.append({"seed": base, "variant": variant, **probe})
    return {"rows": rows, "elapsed": time.time() - t_start}


def variant_mean(rows, variant, key):
    return float(np.mean([r[key] for r in rows if r["variant"] == variant]))


def test_criterion_06_balancing_margins(balance_runs, capsys):
    rows = balance_runs["rows"]
    acc_full = variant_mean(rows, "full", "treatment_accuracy")
    acc_n = variant_mean(rows, "N", "treatment_accuracy")
    r2_full = variant_mean(rows, "full", "interference_r2")
    r2_n = variant_mean(rows, "N", "interference_r2")
    elapsed = balance_runs["elapsed"]
    accuracy_ok = acc_full <= acc_n - 0.05
    r2_ok = r2_full <= r2_n
    budget_ok = elapsed <= 1800.0
    ok = accuracy_ok and r2_ok and budget_ok
    report(6, ok,
           f"treatment accuracy full={acc_full:.4f} vs N={acc_n:.4f} "
           f"(need full <= N - 0.05: {'yes' if accuracy_ok else 'NO'}); "
           f"interference R2 full={r2_full:.4f} vs N={r2_n:.4f} "
           f"(need full <= N: {'yes' if r2_ok else 'NO'}); "
           f"runtime {elapsed / 60:.1f} min of 30", capsys)
    assert ok, (acc_full, acc_n, r2_full, r2_n, elapsed)


@pytest.fixture(scope="module")
def counterfactual_runs():
    """Five paired seeds at 3000 epochs, scored at flip ratios 0.25/0.5/1.0."""
    rows = []
    for base in PAIRED_SEEDS:
        config = seeded_config(base)
        dataset = simulate(config, config_graph(config))
        models = train_variant_pair(config, dataset, COUNTERFACTUAL_EPOCHS)
        for variant, params in models.items():
            row = {"seed": base, "variant": variant}
            for ratio in (0.25, 0.5, 1.0):
                spec = InterventionSpec(
                    start_time=5, flip_ratio=ratio, seed=config.eval.seed
                )
                rep = evaluate_counterfactual(
                    params, dataset, spec, horizon=5, compute_balance=False
                )
                row[f"mse_{ratio}"] = rep.overall_mse
                if ratio == 0.5:
                    row["per_step"] = rep.per_step_mse
            rows.append(row)
    return rows


def test_criterion_07_counterfactual_trend(counterfactual_runs, capsys):
    rows = counterfactual_runs
    mse_full = variant_mean(rows, "full", "mse_0.5")
    mse_n = variant_mean(rows, "N", "mse_0.5")
    direction_ok = mse_full <= mse_n
    monotone_counts = {}
    for variant in ("full", "N"):
        steps = [r["per_step"] for r in rows if r["variant"] == variant]
        monotone_counts[variant] = sum(
            all(b >= a for a, b in zip(s, s[1:])) for s in steps
        )
    monotone_ok = all(count >= 4 for count in monotone_counts.values())
    ok = direction_ok and monotone_ok
    report(7, ok,
           f"overall MSE at flip 0.5: full={mse_full:.4f} vs N={mse_n:.4f} "
           f"(need full <= N: {'yes' if direction_ok else 'NO'}); per-step "
           f"non-decreasing in {monotone_counts['full']}/5 (full) and "
           f"{monotone_counts['N']}/5 (N) seeds (need >= 4 each)", capsys)
    assert ok, (mse_full, mse_n, monotone_counts)


def test_criterion_08_flip_ratio_trend(counterfactual_runs, capsys):
    rows = counterfactual_runs
    details = []
    ok = True
    for variant in ("full", "N"):
        low = variant_mean(rows, variant, "mse_0.25")
        high = variant_mean(rows, variant, "mse_1.0")
        ok &= high >= low
        details.append(f"{variant}: flip-1.0 {high:.4f} vs flip-0.25 {low:.4f}")
    report(8, ok, "; ".join(details) + " (need flip-1.0 >= flip-0.25)", capsys)
    assert ok, details


# ---------------------------------------------------------------- criterion 9


def test_criterion_09_alternation_schedule(capsys):
    graph = generate_synthetic_graph(12, 2.0, 1.0, seed=31)
    dataset = simulate_trajectory(
        graph, variant_params(SimParams(), seed=32, horizon=4)
    )
    params = ModelParams.initialize(
        int(dataset.params.static_dim),
        ModelConfig(latent_dim=8, encoder_hidden=8, head_hidden=8, substeps=2),
        seed=33,
    )
    cfg = TrainConfig(alt_ratio=4, epochs=5000, substeps=2, seed=33)
    _, history = train(dataset, params, cfg)
    full_steps = sum(1 for rec in history if rec.step_kind == "full")
    outcome_steps = sum(1 for rec in history if rec.step_kind == "outcome")
    ok = (full_steps, outcome_steps) == (4000, 1000)
    report(9, ok,
           f"K=4, 5000 iterations -> {full_steps} full-objective / "
           f"{outcome_steps} outcome-only steps (need exactly 4000/1000, "
           f"realized ratio {full_steps / max(outcome_steps, 1):.2f})", capsys)
    assert ok


# --------------------------------------------------------------- criterion 10


def test_criterion_10_end_to_end_determinism(tmp_path, capsys):
    config_body = {
        "graph": {"num_nodes": 60, "seed": 41},
        "sim": {"seed": 42},
        "model": {"latent_dim": 16, "encoder_hidden": 16, "head_hidden": 16,
                  "substeps": 4},
        "train": {"epochs": 50, "seed": 43},
        "eval": {"seed": 44},
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config_body))

    def one_run(tag):
        data = tmp_path / f"data_{tag}"
        run = tmp_path / f"run_{tag}"
        rep = tmp_path / f"report_{tag}.csv"
        assert cli_main(["simulate", "--config", str(config_path),
                         "--out", str(data)]) == 0
        assert cli_main(["train", "--config", str(config_path),
                         "--data", str(data), "--out", str(run)]) == 0
        assert cli_main(["evaluate",
                         "--checkpoint", str(run / "checkpoint"),
                         "--data", str(data), "--report", str(rep),
                         "--seed", "44"]) == 0
        return data, run, rep

    def files(directory):
        out = {}
        for name in sorted(os.listdir(directory)):
            full = os.path.join(directory, name)
            if os.path.isfile(full):
                with open(full, "rb") as fh:
                    out[name] = fh.read()
        return out

    data_a, run_a, rep_a = one_run("a")
    data_b, run_b, rep_b = one_run("b")
    datasets_equal = files(data_a) == files(data_b)
    checkpoints_equal = files(run_a / "checkpoint") == files(run_b / "checkpoint")
    reports_equal = rep_a.read_bytes() == rep_b.read_bytes()
    ok = datasets_equal and checkpoints_equal and reports_equal
    report(10, ok,
           f"byte-identical: dataset={datasets_equal}, "
           f"checkpoint={checkpoints_equal}, report={reports_equal}", capsys)
    assert ok


# --------------------------------------------------------------- criterion 11


@pytest.fixture(scope="module")
def generalization_runs():
    """Train on the train subgraph, evaluate on the disjoint test subgraph."""
    rows = []
    for base in PAIRED_SEEDS:
        config = seeded_config(base)
        graph = config_graph(config)
        part = partition_graph(graph, (0.6, 0.2, 0.2), seed=base)
        train_sim = variant_params(
            config.sim, seed=config.sim.seed + 1000,
            w_treat=config.sim.w_treat, w_growth=config.sim.w_growth,
        )
        train_ds = simulate_trajectory(part.train_graph, train_sim)
        for variant in ("full", "N"):
            config.train = TrainConfig.for_variant(
                variant, epochs=GENERALIZATION_EPOCHS, seed=config.train.seed
            )
            params, _ = fit(config, train_ds)
            rep = generalization_eval(
                params, part, train_sim, flip_ratio=0.5, horizon=5,
                eval_seed=config.eval.seed,
            )
            rows.append({"seed": base, "variant": variant,
                         "mse": rep.overall_mse})
    return rows


def test_criterion_11_subgraph_generalization(generalization_runs, capsys):
    rows = generalization_runs
    finite = all(np.isfinite(r["mse"]) for r in rows)
    mse_full = variant_mean(rows, "full", "mse")
    mse_n = variant_mean(rows, "N", "mse")
    direction_ok = mse_full <= mse_n
    ok = finite and direction_ok
    report(11, ok,
           f"test-subgraph MSE: full={mse_full:.4f} vs N={mse_n:.4f} "
           f"(need finite and full <= N: finite={finite}, "
           f"direction={'yes' if direction_ok else 'NO'})", capsys)
    assert ok, (mse_full, mse_n)
