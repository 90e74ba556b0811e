"""Tumor-growth style trajectory simulator with graph spillover.

Units sit on a fixed undirected graph.  Each unit carries a scalar health
state that evolves in continuous time under a log-growth law in which its
own state, its neighbors' states, static unit traits, neighbor traits and a
decaying treatment dose all enter the growth rate.  Treatment assignment is
confounded: the probability of being treated at an observation time depends
on the unit's running-average state, its neighborhood's running average, and
trait summaries, so sicker units (and sicker neighborhoods) are treated more
often.

Because every random draw (initial states, traits, treatment coin flips,
integration noise) is persisted, the simulator can replay the integration
from any observation time under altered treatments while reusing the exact
same noise, which yields ground-truth counterfactual trajectories.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DatasetError, DomainError, ParameterError, SimulationError
from .graphs import (
    Graph,
    interference_summary,
    neighbor_mean,
    read_edge_list,
    write_edge_list,
)

DATASET_FORMAT = "godeflow-dataset-v1"

# fixed salts so each random stream is independent of the others
_SALT_MECHANISM = 0
_SALT_STATIC = 1
_SALT_INITIAL = 2
_SALT_TREATMENT = 3
_SALT_NOISE = 4


def _rng(seed: int, salt: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), salt])))


@dataclass
class SimParams:
    """All knobs of the data-generating process.

    The treatment model weights (``gamma_*``), growth-rate weights
    (``rho_*``), dose effects (``beta_*``) and thresholds (``delta_*``)
    default to the values used throughout the built-in experiments.  The
    trait mechanism vectors ``w_treat`` and ``w_growth`` are drawn once from
    the seed when not supplied explicitly.
    """

    gamma_a: float = 10.0
    gamma_n: float = 3.3
    gamma_f: float = 10.0
    gamma_g: float = 3.3
    delta_a: float = 5.0
    delta_n: float = 5.0
    rho_u: float = -0.001
    rho_n: float = -0.00033
    rho_f: float = 0.001
    rho_g: float = 0.00033
    beta_a: float = 0.03
    beta_n: float = 0.01
    carrying_capacity: float = 15.0
    full_dose: float = 1.0
    x_min: float = 0.1
    x_max: float = 10.0
    noise_std: float = 0.01
    static_dim: int = 10
    dt: float = 0.25
    horizon: int = 10
    seed: int = 0
    w_treat: np.ndarray | None = field(default=None, repr=False)
    w_growth: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.x_min <= 0 or self.x_max <= self.x_min:
            raise ParameterError(
                f"need 0 < x_min < x_max, got [{self.x_min}, {self.x_max}]"
            )
        if self.carrying_capacity <= 0:
            raise ParameterError(
                f"carrying_capacity must be positive, got {self.carrying_capacity}"
            )
        if self.full_dose <= 0:
            raise ParameterError(f"full_dose must be positive, got {self.full_dose}")
        if self.noise_std < 0:
            raise ParameterError(f"noise_std must be non-negative, got {self.noise_std}")
        if self.static_dim < 1:
            raise ParameterError(f"static_dim must be >= 1, got {self.static_dim}")
        if self.horizon < 1:
            raise ParameterError(f"horizon must be >= 1, got {self.horizon}")
        self.substeps_per_interval()  # validates dt
        rng = _rng(self.seed, _SALT_MECHANISM)
        scale = 1.0 / np.sqrt(self.static_dim)
        if self.w_treat is None:
            self.w_treat = rng.normal(0.0, scale, size=self.static_dim)
        else:
            self.w_treat = np.asarray(self.w_treat, dtype=np.float64)
            rng.normal(0.0, scale, size=self.static_dim)  # keep stream aligned
        if self.w_growth is None:
            self.w_growth = rng.normal(0.0, scale, size=self.static_dim)
        else:
            self.w_growth = np.asarray(self.w_growth, dtype=np.float64)
        if self.w_treat.shape != (self.static_dim,) or self.w_growth.shape != (
            self.static_dim,
        ):
            raise ParameterError(
                f"mechanism vectors must have shape ({self.static_dim},), got "
                f"{self.w_treat.shape} and {self.w_growth.shape}"
            )

    def substeps_per_interval(self) -> int:
        if self.dt <= 0 or self.dt > 1:
            raise ParameterError(f"dt must lie in (0, 1], got {self.dt}")
        n = round(1.0 / self.dt)
        if abs(n * self.dt - 1.0) > 1e-9:
            raise ParameterError(
                f"dt must evenly divide the unit observation interval, got {self.dt}"
            )
        return n

    def to_dict(self) -> dict:
        out = {}
        for name in (
            "gamma_a",
            "gamma_n",
            "gamma_f",
            "gamma_g",
            "delta_a",
            "delta_n",
            "rho_u",
            "rho_n",
            "rho_f",
            "rho_g",
            "beta_a",
            "beta_n",
            "carrying_capacity",
            "full_dose",
            "x_min",
            "x_max",
            "noise_std",
            "dt",
        ):
            out[name] = float(getattr(self, name))
        out["static_dim"] = int(self.static_dim)
        out["horizon"] = int(self.horizon)
        out["seed"] = int(self.seed)
        out["w_treat"] = [float(v) for v in self.w_treat]
        out["w_growth"] = [float(v) for v in self.w_growth]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SimParams":
        data = dict(data)
        for key in ("w_treat", "w_growth"):
            if data.get(key) is not None:
                data[key] = np.asarray(data[key], dtype=np.float64)
        return cls(**data)


def sample_static_covariates(num_nodes: int, dim: int, seed: int) -> np.ndarray:
    """Per-unit static trait vectors, standard normal entries."""
    if num_nodes < 1 or dim < 1:
        raise ParameterError(
            f"num_nodes and dim must be positive, got {num_nodes} and {dim}"
        )
    return _rng(seed, _SALT_STATIC).normal(0.0, 1.0, size=(num_nodes, dim))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def treatment_probability(
    xbar: float,
    nbr_xbar_mean: float | None,
    trait_effect: float,
    nbr_trait_effect_mean: float | None,
    params: SimParams,
) -> float:
    """Probability that one unit is treated at an observation time.

    ``xbar`` is the unit's running-average state up to now and
    ``trait_effect`` its static trait summary.  The two neighbor arguments
    are the corresponding neighborhood means; pass ``None`` for a unit with
    no neighbors, which drops those terms entirely.
    """
    z = params.gamma_a * (params.delta_a - xbar)
    if nbr_xbar_mean is not None:
        z = z + params.gamma_n * (params.delta_n - nbr_xbar_mean)
    z = z + params.gamma_f * trait_effect
    if nbr_trait_effect_mean is not None:
        z = z + params.gamma_g * nbr_trait_effect_mean
    return float(_stable_sigmoid(np.float64(z)))


def _treatment_probability_all(
    xbar: np.ndarray,
    nbr_xbar: np.ndarray,
    trait_effect: np.ndarray,
    nbr_trait_effect: np.ndarray,
    has_neighbors: np.ndarray,
    params: SimParams,
) -> np.ndarray:
    # accumulation order mirrors treatment_probability so the two agree bitwise
    z = params.gamma_a * (params.delta_a - xbar)
    z = z + np.where(has_neighbors, params.gamma_n * (params.delta_n - nbr_xbar), 0.0)
    z = z + params.gamma_f * trait_effect
    z = z + np.where(has_neighbors, params.gamma_g * nbr_trait_effect, 0.0)
    return _stable_sigmoid(z)


def update_dose(previous_dose: float, treated, params: SimParams) -> float:
    """Dose carried into the next interval: fresh dose plus half the old one."""
    treated = float(treated)
    if treated not in (0.0, 1.0):
        raise DomainError(f"treated must be 0 or 1, got {treated!r}")
    if previous_dose < 0:
        raise DomainError(f"previous_dose must be non-negative, got {previous_dose}")
    return params.full_dose * treated + previous_dose / 2.0


def pkpd_derivative(
    x: float,
    nbr_x_mean: float | None,
    dose: float,
    nbr_dose_mean: float | None,
    trait_effect: float,
    nbr_trait_effect_mean: float | None,
    noise: float,
    params: SimParams,
) -> float:
    """Instantaneous state derivative for a single unit.

    Log-growth toward the carrying capacity in the unit's own state and in
    the neighborhood mean state, plus trait, dose and noise contributions,
    all scaled by the current state.  Neighbor arguments are ``None`` for a
    unit with no neighbors, dropping those terms.  States must stay strictly
    positive for the logarithms to exist.
    """
    if x <= 0:
        raise DomainError(f"state must be positive, got {x}")
    if nbr_x_mean is not None and nbr_x_mean <= 0:
        raise DomainError(f"neighbor mean state must be positive, got {nbr_x_mean}")
    k = params.carrying_capacity
    g = params.rho_u * np.log(k / np.float64(x))
    if nbr_x_mean is not None:
        g = g + params.rho_n * np.log(k / np.float64(nbr_x_mean))
    g = g + params.rho_f * trait_effect
    if nbr_trait_effect_mean is not None:
        g = g + params.rho_g * nbr_trait_effect_mean
    g = g + params.beta_a * dose
    if nbr_dose_mean is not None:
        g = g + params.beta_n * nbr_dose_mean
    g = g + noise
    return float(x * g)


def _growth_rate_all(
    x: np.ndarray,
    nbr_x_mean: np.ndarray,
    dose: np.ndarray,
    nbr_dose_mean: np.ndarray,
    trait_effect: np.ndarray,
    nbr_trait_effect: np.ndarray,
    noise: np.ndarray,
    has_neighbors: np.ndarray,
    params: SimParams,
) -> np.ndarray:
    # mirrors pkpd_derivative term by term (isolated units contribute zeros)
    k = params.carrying_capacity
    safe_nbr = np.where(has_neighbors, nbr_x_mean, 1.0)
    g = params.rho_u * np.log(k / x)
    g = g + np.where(has_neighbors, params.rho_n * np.log(k / safe_nbr), 0.0)
    g = g + params.rho_f * trait_effect
    g = g + np.where(has_neighbors, params.rho_g * nbr_trait_effect, 0.0)
    g = g + params.beta_a * dose
    g = g + np.where(has_neighbors, params.beta_n * nbr_dose_mean, 0.0)
    g = g + noise
    return g


def _advance_interval(
    x: np.ndarray,
    dose_row: np.ndarray,
    noise_row: np.ndarray,
    graph: Graph,
    trait_effect: np.ndarray,
    nbr_trait_effect: np.ndarray,
    has_neighbors: np.ndarray,
    params: SimParams,
    interval_index: int,
) -> tuple[np.ndarray, int]:
    """One observation interval of explicit Euler substeps with clamping."""
    substeps = params.substeps_per_interval()
    nbr_dose = neighbor_mean(graph, dose_row)
    clamped = 0
    for _ in range(substeps):
        nbr_x = neighbor_mean(graph, x)
        growth = _growth_rate_all(
            x,
            nbr_x,
            dose_row,
            nbr_dose,
            trait_effect,
            nbr_trait_effect,
            noise_row,
            has_neighbors,
            params,
        )
        proposed = x + params.dt * (x * growth)
        if np.isnan(proposed).any():
            node = int(np.flatnonzero(np.isnan(proposed))[0])
            raise SimulationError(
                f"non-finite state for node {node} during interval {interval_index}"
            )
        outside = (proposed < params.x_min) | (proposed > params.x_max)
        clamped += int(np.count_nonzero(outside))
        x = np.clip(proposed, params.x_min, params.x_max)
    return x, clamped


@dataclass
class ObservationalDataset:
    """One simulated factual trajectory plus everything needed to replay it."""

    graph: Graph
    static_covariates: np.ndarray  # (N, d_v)
    covariates: np.ndarray  # (T+1, N) scalar health states
    treatments: np.ndarray  # (T+1, N) binary
    interference: np.ndarray  # (T+1, N) treated neighbor fractions
    doses: np.ndarray  # (T+1, N)
    noise_draws: np.ndarray  # (T+1, N), row t drives interval [t, t+1)
    params: SimParams
    clamp_count: int = 0

    @property
    def outcomes(self) -> np.ndarray:
        """The outcome is the health state itself."""
        return self.covariates

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def horizon(self) -> int:
        return self.covariates.shape[0] - 1

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(self.covariates.shape[0], dtype=np.float64)


def simulate_trajectory(graph: Graph, params: SimParams) -> ObservationalDataset:
    """Simulate the factual trajectory of every unit on ``graph``.

    All stochastic inputs are drawn from streams derived from
    ``params.seed``, so equal arguments reproduce the dataset bitwise.
    """
    n = graph.num_nodes
    t_max = params.horizon
    statics = sample_static_covariates(n, params.static_dim, params.seed)
    trait_treat = statics @ params.w_treat
    trait_growth = statics @ params.w_growth
    has_neighbors = graph.degrees > 0
    nbr_trait_treat = neighbor_mean(graph, trait_treat)
    nbr_trait_growth = neighbor_mean(graph, trait_growth)

    x0 = _rng(params.seed, _SALT_INITIAL).uniform(params.x_min, params.x_max, size=n)
    coin_flips = _rng(params.seed, _SALT_TREATMENT).random((t_max + 1, n))
    noise = _rng(params.seed, _SALT_NOISE).normal(
        0.0, params.noise_std, size=(t_max + 1, n)
    )

    covariates = np.zeros((t_max + 1, n))
    treatments = np.zeros((t_max + 1, n), dtype=np.int64)
    interference = np.zeros((t_max + 1, n))
    doses = np.zeros((t_max + 1, n))
    covariates[0] = x0
    clamp_count = 0

    for t in range(t_max + 1):
        xbar = covariates[: t + 1].mean(axis=0)
        prob = _treatment_probability_all(
            xbar,
            neighbor_mean(graph, xbar),
            trait_treat,
            nbr_trait_treat,
            has_neighbors,
            params,
        )
        treatments[t] = coin_flips[t] < prob
        previous = doses[t - 1] if t > 0 else np.zeros(n)
        doses[t] = params.full_dose * treatments[t] + previous / 2.0
        interference[t] = interference_summary(graph, treatments[t])
        if t < t_max:
            covariates[t + 1], clamped = _advance_interval(
                covariates[t],
                doses[t],
                noise[t],
                graph,
                trait_growth,
                nbr_trait_growth,
                has_neighbors,
                params,
                t,
            )
            clamp_count += clamped

    return ObservationalDataset(
        graph=graph,
        static_covariates=statics,
        covariates=covariates,
        treatments=treatments,
        interference=interference,
        doses=doses,
        noise_draws=noise,
        params=params,
        clamp_count=clamp_count,
    )


@dataclass(frozen=True)
class InterventionSpec:
    """Which treatments to flip, and from when.

    Exactly one of ``flip_ratio`` and ``flip_mask`` must be given.  With a
    ratio, ``round(ratio * N)`` units are chosen by ``seed`` and their
    treatments are flipped at every time from ``start_time`` on.  A mask of
    shape ``(T + 1 - start_time, N)`` selects arbitrary unit-time cells.
    """

    start_time: int
    flip_ratio: float | None = None
    flip_mask: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if (self.flip_ratio is None) == (self.flip_mask is None):
            raise ParameterError("give exactly one of flip_ratio and flip_mask")
        if self.flip_ratio is not None and not 0.0 <= self.flip_ratio <= 1.0:
            raise ParameterError(f"flip_ratio must lie in [0, 1], got {self.flip_ratio}")
        if self.start_time < 0:
            raise ParameterError(f"start_time must be >= 0, got {self.start_time}")


def resolve_flip_mask(spec: InterventionSpec, dataset: ObservationalDataset) -> np.ndarray:
    """Expand an intervention into a boolean mask over the replay window."""
    t_max = dataset.horizon
    n = dataset.num_nodes
    if spec.start_time > t_max:
        raise ParameterError(
            f"start_time {spec.start_time} is beyond the horizon {t_max}"
        )
    window = t_max + 1 - spec.start_time
    if spec.flip_mask is not None:
        mask = np.asarray(spec.flip_mask).astype(bool)
        if mask.shape != (window, n):
            raise ParameterError(
                f"flip_mask has shape {mask.shape}, expected ({window}, {n})"
            )
        return mask
    count = int(round(spec.flip_ratio * n))
    units = np.sort(_rng(spec.seed, 9).choice(n, size=count, replace=False))
    mask = np.zeros((window, n), dtype=bool)
    mask[:, units] = True
    return mask


@dataclass(frozen=True)
class CounterfactualTrajectory:
    """Ground-truth replay under flipped treatments."""

    start_time: int
    treatments: np.ndarray  # (T+1, N) applied path; factual before start_time
    outcomes: np.ndarray  # (T+1, N); equals factual through start_time
    interference: np.ndarray
    doses: np.ndarray
    flip_mask: np.ndarray  # (T+1-start, N) bool


def counterfactual_oracle(
    dataset: ObservationalDataset, spec: InterventionSpec
) -> CounterfactualTrajectory:
    """Replay the integration from ``spec.start_time`` under flipped treatments.

    The replay starts from the factual state at ``start_time`` and reuses the
    persisted noise draws, so the only difference from the factual world is
    the treatment path.  Flipping nothing reproduces the factual trajectory
    bitwise.
    """
    graph = dataset.graph
    params = dataset.params
    t_max = dataset.horizon
    n = dataset.num_nodes
    mask = resolve_flip_mask(spec, dataset)
    start = spec.start_time

    cf_a = dataset.treatments.copy()
    window = cf_a[start:]
    window[mask] = 1 - window[mask]

    cf_x = dataset.covariates.copy()
    cf_d = dataset.doses.copy()
    cf_g = dataset.interference.copy()

    trait_growth = dataset.static_covariates @ params.w_growth
    nbr_trait_growth = neighbor_mean(graph, trait_growth)
    has_neighbors = graph.degrees > 0

    for t in range(start, t_max + 1):
        previous = cf_d[t - 1] if t > 0 else np.zeros(n)
        cf_d[t] = params.full_dose * cf_a[t] + previous / 2.0
        cf_g[t] = interference_summary(graph, cf_a[t])
        if t < t_max:
            cf_x[t + 1], _ = _advance_interval(
                cf_x[t],
                cf_d[t],
                dataset.noise_draws[t],
                graph,
                trait_growth,
                nbr_trait_growth,
                has_neighbors,
                params,
                t,
            )

    return CounterfactualTrajectory(
        start_time=start,
        treatments=cf_a,
        outcomes=cf_x,
        interference=cf_g,
        doses=cf_d,
        flip_mask=mask,
    )


# ---------------------------------------------------------------------------
# dataset directory layout


def _format_value(value) -> str:
    return repr(float(value))


def _write_matrix(path, matrix: np.ndarray, integer: bool = False) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for row in np.atleast_2d(matrix):
            if integer:
                fh.write(",".join(str(int(v)) for v in row))
            else:
                fh.write(",".join(_format_value(v) for v in row))
            fh.write("\n")


def _read_matrix(path, integer: bool = False) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if integer:
                rows.append([int(v) for v in parts])
            else:
                rows.append([float(v) for v in parts])
    dtype = np.int64 if integer else np.float64
    return np.array(rows, dtype=dtype)


_DATASET_FILES = {
    "static_covariates": ("V.csv", False),
    "covariates": ("X.csv", False),
    "treatments": ("A.csv", True),
    "interference": ("G.csv", False),
    "doses": ("D.csv", False),
    "noise_draws": ("noise.csv", False),
}


def save_dataset(dataset: ObservationalDataset, directory) -> None:
    """Write a dataset directory (manifest, edge list and per-field CSVs).

    Floats are printed with full round-trip precision, so loading the
    directory back reproduces the dataset bitwise.
    """
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "format": DATASET_FORMAT,
        "num_nodes": dataset.num_nodes,
        "horizon": dataset.horizon,
        "static_dim": int(dataset.params.static_dim),
        "clamp_count": int(dataset.clamp_count),
        "sim_params": dataset.params.to_dict(),
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_edge_list(os.path.join(directory, "edges.txt"), dataset.graph)
    for attr, (name, integer) in _DATASET_FILES.items():
        _write_matrix(os.path.join(directory, name), getattr(dataset, attr), integer)
    # the outcome series duplicates the state series by definition; stored
    # separately so the directory is self-describing
    _write_matrix(os.path.join(directory, "Y.csv"), dataset.outcomes)


def load_dataset(directory) -> ObservationalDataset:
    """Load a directory written by :func:`save_dataset`."""
    manifest_path = os.path.join(directory, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DatasetError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path, "r", encoding="ascii") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetError(
            f"unsupported dataset format {manifest.get('format')!r} in {directory}"
        )
    params = SimParams.from_dict(manifest["sim_params"])
    graph = read_edge_list(os.path.join(directory, "edges.txt"), manifest["num_nodes"])
    fields = {}
    for attr, (name, integer) in _DATASET_FILES.items():
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise DatasetError(f"dataset file missing: {path}")
        fields[attr] = _read_matrix(path, integer)
    outcomes = _read_matrix(os.path.join(directory, "Y.csv"))
    if not np.array_equal(outcomes, fields["covariates"]):
        raise DatasetError(f"Y.csv does not match X.csv in {directory}")
    expected = (manifest["horizon"] + 1, manifest["num_nodes"])
    for attr in ("covariates", "treatments", "interference", "doses", "noise_draws"):
        if fields[attr].shape != expected:
            raise DatasetError(
                f"{attr} has shape {fields[attr].shape}, expected {expected}"
            )
    dataset = ObservationalDataset(
        graph=graph,
        params=params,
        clamp_count=int(manifest.get("clamp_count", 0)),
        **fields,
    )
    return dataset


def variant_params(params: SimParams, **overrides) -> SimParams:
    """Copy ``params`` with field overrides.

    Changing the seed or the trait dimension regenerates the mechanism
    vectors from the new seed unless they are overridden explicitly.
    """
    if ("seed" in overrides or "static_dim" in overrides) and not (
        "w_treat" in overrides or "w_growth" in overrides
    ):
        overrides.setdefault("w_treat", None)
        overrides.setdefault("w_growth", None)
    return replace(params, **overrides)
