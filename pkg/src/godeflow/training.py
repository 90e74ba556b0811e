"""Training loop, counterfactual evaluation and balance diagnostics.

Training alternates between steps on the full objective (outcome error plus
weighted adversarial terms, all five parameter groups updated) and periodic
outcome-only steps that update just the encoder, the dynamics and the
outcome head.  With an alternation ratio K, every (K+1)-th step is
outcome-only, so K full steps are taken for each outcome-only step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ParameterError, TrainingError
from .model import (
    GROUP_NAMES,
    OUTCOME_GROUPS,
    ModelParams,
    decode_outcome,
    encode_initial,
    loss_interference,
    loss_outcome,
    loss_total,
    loss_treatment,
    solve_trajectory,
)
from .optim import AdamState, adam_step
from .simulator import (
    InterventionSpec,
    ObservationalDataset,
    SimParams,
    counterfactual_oracle,
    simulate_trajectory,
    variant_params,
)

VARIANT_WEIGHTS = {
    "full": (0.5, 0.5),
    "N": (0.0, 0.0),
    "T": (1.0, 0.0),
    "I": (0.0, 1.0),
}

DEGREE_BUCKETS = (
    ("(0,5]", 0, 5),
    ("(5,10]", 5, 10),
    ("(10,20]", 10, 20),
    ("(20,30]", 20, 30),
    ("(30,40]", 30, 40),
    ("(40,50]", 40, 50),
    (">50", 50, None),
)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    alpha_treatment: float = 0.5
    alpha_interference: float = 0.5
    alt_ratio: int = 4
    epochs: int = 5000
    substeps: int = 4
    seed: int = 0
    variant: str = "full"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.alpha_treatment < 0 or self.alpha_interference < 0:
            raise ParameterError(
                f"loss weights must be non-negative, got "
                f"({self.alpha_treatment}, {self.alpha_interference})"
            )
        if self.alt_ratio < 0:
            raise ParameterError(f"alt_ratio must be >= 0, got {self.alt_ratio}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.substeps < 1:
            raise ParameterError(f"substeps must be >= 1, got {self.substeps}")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "TrainConfig":
        if variant not in VARIANT_WEIGHTS:
            raise ParameterError(
                f"unknown variant {variant!r}, expected one of {sorted(VARIANT_WEIGHTS)}"
            )
        alpha_t, alpha_g = VARIANT_WEIGHTS[variant]
        overrides.setdefault("alpha_treatment", alpha_t)
        overrides.setdefault("alpha_interference", alpha_g)
        return cls(variant=variant, **overrides)


def is_outcome_only_step(iteration: int, alt_ratio: int) -> bool:
    """True when 1-based ``iteration`` is an outcome-only step."""
    return iteration % (alt_ratio + 1) == 0


@dataclass
class LossRecord:
    iteration: int
    step_kind: str  # "full" or "outcome"
    total: float
    outcome: float
    treatment: float | None = None
    interference: float | None = None


def write_loss_history(history, path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["iteration", "step_kind", "loss_total", "loss_outcome",
             "loss_treatment", "loss_interference"]
        )
        for rec in history:
            writer.writerow(
                [
                    rec.iteration,
                    rec.step_kind,
                    repr(rec.total),
                    repr(rec.outcome),
                    "" if rec.treatment is None else repr(rec.treatment),
                    "" if rec.interference is None else repr(rec.interference),
                ]
            )


def train(
    dataset: ObservationalDataset,
    params: ModelParams,
    config: TrainConfig,
    valid_dataset: ObservationalDataset | None = None,
    val_every: int = 50,
) -> tuple[ModelParams, list]:
    """Fit ``params`` to the factual trajectory in ``dataset``.

    Returns the trained parameters and the per-iteration loss history.  When
    ``valid_dataset`` is given, the outcome error on it is tracked every
    ``val_every`` iterations and the best snapshot is returned instead of
    the final iterate.
    """
    graph = dataset.graph
    x0 = dataset.covariates[0]
    statics = dataset.static_covariates
    a_path = dataset.treatments.astype(np.float64)
    targets = dataset.outcomes.reshape(-1, 1)
    alpha_t = config.alpha_treatment
    alpha_g = config.alpha_interference

    outcome_params = params.named_parameters(OUTCOME_GROUPS)
    outcome_state = AdamState.for_params(outcome_params, config.learning_rate)
    treat_params = params.named_parameters(("treatment",))
    treat_state = AdamState.for_params(treat_params, config.learning_rate)
    interf_params = params.named_parameters(("interference",))
    interf_state = AdamState.for_params(interf_params, config.learning_rate)

    history: list[LossRecord] = []
    best_val = np.inf
    best_params: ModelParams | None = None

    for iteration in range(1, config.epochs + 1):
        outcome_only = is_outcome_only_step(iteration, config.alt_ratio)
        z0 = encode_initial(x0, statics, params)
        trajectory = solve_trajectory(
            z0, a_path, graph, params, substeps=config.substeps
        )
        predicted = decode_outcome(trajectory.stacked(), params)
        l_outcome = loss_outcome(predicted, targets)

        l_treat = None
        l_interf = None
        if outcome_only:
            objective = l_outcome
        else:
            # with a weight of exactly zero the term contributes no gradient,
            # so it is skipped outright; the outcome groups then follow the
            # same parameter trajectory as pure outcome training
            if alpha_t > 0:
                l_treat = loss_treatment(trajectory, dataset.treatments, params)
            if alpha_g > 0:
                l_interf = loss_interference(
                    trajectory, dataset.treatments, dataset.interference, params
                )
            objective = loss_total(l_outcome, l_treat, l_interf, alpha_t, alpha_g)

        total_value = float(objective.values)
        if not np.isfinite(total_value):
            raise TrainingError(f"non-finite loss at iteration {iteration}")

        objective.backward()
        adam_step(outcome_params, outcome_state)
        if not outcome_only:
            if alpha_t > 0:
                adam_step(treat_params, treat_state)
            if alpha_g > 0:
                adam_step(interf_params, interf_state)

        history.append(
            LossRecord(
                iteration=iteration,
                step_kind="outcome" if outcome_only else "full",
                total=total_value,
                outcome=float(l_outcome.values),
                treatment=None if l_treat is None else float(l_treat.values),
                interference=None if l_interf is None else float(l_interf.values),
            )
        )

        if valid_dataset is not None and (
            iteration % val_every == 0 or iteration == config.epochs
        ):
            val = _outcome_error(params, valid_dataset, config.substeps)
            if val < best_val:
                best_val = val
                best_params = params.copy()

    if best_params is not None:
        return best_params, history
    return params, history


def _outcome_error(params: ModelParams, dataset: ObservationalDataset, substeps: int) -> float:
    with ad.no_grad():
        z0 = encode_initial(dataset.covariates[0], dataset.static_covariates, params)
        trajectory = solve_trajectory(
            z0,
            dataset.treatments.astype(np.float64),
            dataset.graph,
            params,
            substeps=substeps,
        )
        predicted = decode_outcome(trajectory.stacked(), params)
        err = loss_outcome(predicted, dataset.outcomes.reshape(-1, 1))
    return float(err.values)


@dataclass
class EvalReport:
    """Counterfactual accuracy plus balance diagnostics for one evaluation."""

    per_step_mse: list
    overall_mse: float
    degree_buckets: list  # dicts with label, min_degree, max_degree, count, mse
    balance: dict | None
    metadata: dict = field(default_factory=dict)

    def header(self) -> list:
        cols = ["overall_mse"]
        cols += [f"mse_step_{s}" for s in range(1, len(self.per_step_mse) + 1)]
        for bucket in self.degree_buckets:
            tag = bucket["label"].strip("(]>").replace(",", "_")
            cols += [f"bucket_{tag}_count", f"bucket_{tag}_mse"]
        if self.balance is not None:
            cols += ["balance_treatment_accuracy", "balance_interference_r2"]
        cols += sorted(self.metadata)
        return cols

    def row(self) -> list:
        def fmt(value):
            if isinstance(value, float):
                return repr(value)
            return value

        out = [repr(float(self.overall_mse))]
        out += [repr(float(v)) for v in self.per_step_mse]
        for bucket in self.degree_buckets:
            out.append(bucket["count"])
            out.append("" if bucket["mse"] is None else repr(float(bucket["mse"])))
        if self.balance is not None:
            out.append(repr(float(self.balance["treatment_accuracy"])))
            out.append(repr(float(self.balance["interference_r2"])))
        out += [fmt(self.metadata[k]) for k in sorted(self.metadata)]
        return out

    def save(self, path) -> None:
        with open(path, "w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header())
            writer.writerow(self.row())


def evaluate_counterfactual(
    params: ModelParams,
    dataset: ObservationalDataset,
    spec: InterventionSpec,
    horizon: int = 5,
    substeps: int | None = None,
    compute_balance: bool = True,
    balance_holdout: float = 0.25,
    balance_seed: int = 0,
    predict_override=None,
    extra_metadata: dict | None = None,
) -> EvalReport:
    """Score counterfactual predictions against the simulator's replay.

    The model is rolled forward under the counterfactual treatment path; its
    own latent state at ``spec.start_time`` (reached under the factual path,
    which the counterfactual path matches up to that point) is simply
    continued, with no re-encoding.  Errors are reported 1 to ``horizon``
    steps past the intervention start.

    ``predict_override(dataset, oracle, horizon)`` replaces the model's
    predictions entirely; it exists for harness self-tests.
    """
    t_max = dataset.horizon
    start = spec.start_time
    if horizon < 1:
        raise ParameterError(f"horizon must be >= 1, got {horizon}")
    if start + horizon > t_max:
        raise ParameterError(
            f"start_time {start} plus horizon {horizon} exceeds the observed "
            f"horizon {t_max}"
        )
    oracle = counterfactual_oracle(dataset, spec)

    if predict_override is not None:
        predictions = np.asarray(predict_override(dataset, oracle, horizon), dtype=np.float64)
        if predictions.shape != (horizon, dataset.num_nodes):
            raise ParameterError(
                f"predict_override returned shape {predictions.shape}, expected "
                f"({horizon}, {dataset.num_nodes})"
            )
    else:
        with ad.no_grad():
            z0 = encode_initial(dataset.covariates[0], dataset.static_covariates, params)
            trajectory = solve_trajectory(
                z0,
                oracle.treatments.astype(np.float64),
                dataset.graph,
                params,
                substeps=substeps,
                n_intervals=start + horizon,
            )
            predictions = np.stack(
                [
                    decode_outcome(trajectory.states[start + s], params).values[:, 0]
                    for s in range(1, horizon + 1)
                ]
            )

    truth = oracle.outcomes[start + 1 : start + horizon + 1]
    squared = (predictions - truth) ** 2
    per_step = [float(v) for v in squared.mean(axis=1)]
    overall = float(squared.mean())

    degrees = dataset.graph.degrees
    buckets = []
    for label, lo, hi in DEGREE_BUCKETS:
        if hi is None:
            members = degrees > lo
        else:
            members = (degrees > lo) & (degrees <= hi)
        count = int(members.sum())
        mse = float(squared[:, members].mean()) if count else None
        buckets.append(
            {"label": label, "min_degree": lo, "max_degree": hi, "count": count, "mse": mse}
        )

    balance = None
    if compute_balance and predict_override is None:
        balance = balance_diagnostics(
            params,
            dataset,
            holdout_fraction=balance_holdout,
            seed=balance_seed,
            substeps=substeps,
        )

    metadata = {
        "start_time": start,
        "horizon": horizon,
        "flip_ratio": "" if spec.flip_ratio is None else repr(float(spec.flip_ratio)),
        "intervention_seed": spec.seed,
        "num_nodes": dataset.num_nodes,
    }
    if extra_metadata:
        metadata.update(extra_metadata)
    return EvalReport(
        per_step_mse=per_step,
        overall_mse=overall,
        degree_buckets=buckets,
        balance=balance,
        metadata=metadata,
    )


def latent_rows(
    params: ModelParams, dataset: ObservationalDataset, substeps: int | None = None
) -> np.ndarray:
    """Frozen latent states under the factual path, stacked timestamp-major."""
    with ad.no_grad():
        z0 = encode_initial(dataset.covariates[0], dataset.static_covariates, params)
        trajectory = solve_trajectory(
            z0,
            dataset.treatments.astype(np.float64),
            dataset.graph,
            params,
            substeps=substeps,
        )
        return trajectory.stacked().values


def balance_diagnostics(
    params: ModelParams,
    dataset: ObservationalDataset,
    holdout_fraction: float = 0.25,
    seed: int = 0,
    substeps: int | None = None,
) -> dict:
    """Post-hoc probes of how much treatment information the latents carry.

    A fresh classifier is fitted from the frozen latents to the observed
    treatment, and a fresh linear regressor from latents-plus-treatment to
    the treated-neighbor fraction; both are scored on a held-out row split.
    Lower accuracy / R-squared means better balanced representations.
    """
    rows = latent_rows(params, dataset, substeps=substeps)
    labels = dataset.treatments.reshape(-1)
    targets = dataset.interference.reshape(-1)
    accuracy = probe_classification(rows, labels, holdout_fraction, seed)
    regressor_inputs = np.column_stack([rows, labels.astype(np.float64)])
    r2 = probe_regression(regressor_inputs, targets, holdout_fraction, seed)
    return {"treatment_accuracy": float(accuracy), "interference_r2": float(r2)}


def _split_rows(n_rows: int, holdout_fraction: float, seed: int):
    if not 0.0 < holdout_fraction < 1.0:
        raise ParameterError(
            f"holdout_fraction must lie in (0, 1), got {holdout_fraction}"
        )
    n_hold = int(round(holdout_fraction * n_rows))
    if n_hold < 1 or n_hold >= n_rows:
        raise ParameterError(
            f"holdout_fraction {holdout_fraction} leaves a degenerate split "
            f"for {n_rows} rows"
        )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 13])))
    order = rng.permutation(n_rows)
    return order[n_hold:], order[:n_hold]


def _standardize(train: np.ndarray, hold: np.ndarray):
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (train - mean) / std, (hold - mean) / std


def probe_classification(
    features: np.ndarray, labels: np.ndarray, holdout_fraction: float = 0.25, seed: int = 0
) -> float:
    """Held-out accuracy of a ridge-regularised logistic probe."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if features.shape[0] != labels.shape[0]:
        raise ParameterError(
            f"{features.shape[0]} feature rows vs {labels.shape[0]} labels"
        )
    train_idx, hold_idx = _split_rows(features.shape[0], holdout_fraction, seed)
    f_train, f_hold = _standardize(features[train_idx], features[hold_idx])
    y_train = labels[train_idx]

    design = np.column_stack([np.ones(f_train.shape[0]), f_train])
    w = np.zeros(design.shape[1])
    ridge = 1e-3
    n = design.shape[0]
    for _ in range(40):
        logits = np.clip(design @ w, -35.0, 35.0)
        p = 1.0 / (1.0 + np.exp(-logits))
        grad = design.T @ (p - y_train) / n + ridge * w
        curvature = p * (1.0 - p)
        hessian = (design * curvature[:, None]).T @ design / n
        hessian[np.diag_indices_from(hessian)] += ridge
        w = w - np.linalg.solve(hessian, grad)

    hold_design = np.column_stack([np.ones(f_hold.shape[0]), f_hold])
    hold_pred = (hold_design @ w) > 0.0
    return float((hold_pred == (labels[hold_idx] > 0.5)).mean())


def probe_regression(
    features: np.ndarray, targets: np.ndarray, holdout_fraction: float = 0.25, seed: int = 0
) -> float:
    """Held-out R-squared of a least-squares linear probe."""
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if features.shape[0] != targets.shape[0]:
        raise ParameterError(
            f"{features.shape[0]} feature rows vs {targets.shape[0]} targets"
        )
    train_idx, hold_idx = _split_rows(features.shape[0], holdout_fraction, seed)
    f_train, f_hold = _standardize(features[train_idx], features[hold_idx])
    design = np.column_stack([np.ones(f_train.shape[0]), f_train])
    coef, *_ = np.linalg.lstsq(design, targets[train_idx], rcond=None)
    hold_design = np.column_stack([np.ones(f_hold.shape[0]), f_hold])
    residual = targets[hold_idx] - hold_design @ coef
    ss_res = float((residual**2).sum())
    centered = targets[hold_idx] - targets[hold_idx].mean()
    ss_tot = float((centered**2).sum())
    if ss_tot <= 1e-12:
        return 0.0
    return 1.0 - ss_res / ss_tot


def export_latents(
    params: ModelParams, dataset: ObservationalDataset, path, substeps: int | None = None
) -> int:
    """Write one CSV row per (node, timestamp) with the latent coordinates.

    Columns: ``node``, ``timestamp``, ``z_0 .. z_{L-1}``, ``treatment``,
    ``interference``.  Floats are printed with round-trip precision.
    Returns the number of data rows written.
    """
    rows = latent_rows(params, dataset, substeps=substeps)
    n = dataset.num_nodes
    t_max = dataset.horizon
    latent_dim = rows.shape[1]
    header = ["node", "timestamp"]
    header += [f"z_{k}" for k in range(latent_dim)]
    header += ["treatment", "interference"]
    written = 0
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for node in range(n):
            for t in range(t_max + 1):
                row = [node, t]
                row += [repr(float(v)) for v in rows[t * n + node]]
                row.append(int(dataset.treatments[t, node]))
                row.append(repr(float(dataset.interference[t, node])))
                writer.writerow(row)
                written += 1
    return written


def generalization_eval(
    params: ModelParams,
    partition,
    sim_params: SimParams | None,
    flip_ratio: float = 0.5,
    horizon: int = 5,
    start_time: int | None = None,
    eval_seed: int = 0,
    test_seed: int | None = None,
    test_dataset: ObservationalDataset | None = None,
    compute_balance: bool = False,
    extra_metadata: dict | None = None,
) -> EvalReport:
    """Counterfactual evaluation on an unseen test subgraph.

    A fresh trajectory is simulated on ``partition``'s test subgraph (same
    process parameters, distinct seed) and the trained model is evaluated on
    it; the initial latent states are encoded from the test units' own
    initial conditions.  Supplying ``test_dataset`` skips the simulation,
    which also serves as the harness self-check hook.
    """
    if test_dataset is None:
        if partition is None or sim_params is None:
            raise ParameterError(
                "generalization_eval needs a partition and sim_params when no "
                "test_dataset is supplied"
            )
        train_set = set(int(v) for v in partition.train_nodes)
        for name, nodes in (
            ("valid", partition.valid_nodes),
            ("test", partition.test_nodes),
        ):
            overlap = train_set.intersection(int(v) for v in nodes)
            if overlap:
                raise ParameterError(
                    f"train and {name} node sets share indices, e.g. {sorted(overlap)[:3]}"
                )
        if test_seed is None:
            test_seed = int(sim_params.seed) + 7919
        # same process parameters, fresh realization: the mechanism vectors
        # are pinned so only the draws (initial states, noise, assignment
        # coin flips) change with the seed
        test_params = variant_params(
            sim_params,
            seed=test_seed,
            w_treat=sim_params.w_treat,
            w_growth=sim_params.w_growth,
        )
        test_dataset = simulate_trajectory(partition.test_graph, test_params)
    if start_time is None:
        start_time = test_dataset.horizon - horizon
    spec = InterventionSpec(start_time=start_time, flip_ratio=flip_ratio, seed=eval_seed)
    metadata = {"evaluation": "generalization"}
    if extra_metadata:
        metadata.update(extra_metadata)
    return evaluate_counterfactual(
        params,
        test_dataset,
        spec,
        horizon=horizon,
        compute_balance=compute_balance,
        extra_metadata=metadata,
    )
