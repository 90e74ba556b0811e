"""Latent graph dynamics model with adversarially balanced representations.

An encoder maps each unit's initial state and static traits to a latent
vector.  The latent state then evolves through an explicit-Euler solve of a
message-passing vector field in which the unit's own latent-and-treatment
pair and the neighborhood mean of its neighbors' pairs both enter.  Affine
heads decode the outcome and, through a gradient-reversal wrapper, try to
read the current treatment and the treated-neighbor fraction back out of the
latent state; training against those heads removes treatment information
from the representation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DimensionError, DomainError, ParameterError, SolveError
from .graphs import Graph
from .optim import glorot_uniform
from .simulator import ObservationalDataset


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 64
    encoder_hidden: int = 64
    head_hidden: int = 64
    substeps: int = 4

    def __post_init__(self):
        for name in ("latent_dim", "encoder_hidden", "head_hidden", "substeps"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass(frozen=True)
class Normalization:
    """Input/output standardisation constants baked into the model.

    The encoder sees standardised states and traits; the outcome decoder maps
    back to the raw state scale.  This is a fixed affine reparameterisation
    chosen from the training data, stored with the checkpoint.
    """

    x_mean: float
    x_std: float
    v_mean: np.ndarray
    v_std: np.ndarray

    @classmethod
    def from_dataset(cls, dataset: ObservationalDataset) -> "Normalization":
        x = dataset.covariates
        v = dataset.static_covariates
        x_std = float(x.std())
        v_std = v.std(axis=0)
        return cls(
            x_mean=float(x.mean()),
            x_std=x_std if x_std > 0 else 1.0,
            v_mean=v.mean(axis=0),
            v_std=np.where(v_std > 0, v_std, 1.0),
        )

    @classmethod
    def identity(cls, static_dim: int) -> "Normalization":
        return cls(0.0, 1.0, np.zeros(static_dim), np.ones(static_dim))

    def to_dict(self) -> dict:
        return {
            "x_mean": self.x_mean,
            "x_std": self.x_std,
            "v_mean": [float(v) for v in self.v_mean],
            "v_std": [float(v) for v in self.v_std],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Normalization":
        return cls(
            x_mean=float(data["x_mean"]),
            x_std=float(data["x_std"]),
            v_mean=np.asarray(data["v_mean"], dtype=np.float64),
            v_std=np.asarray(data["v_std"], dtype=np.float64),
        )


GROUP_NAMES = ("encoder", "ode", "outcome", "treatment", "interference")

# groups updated on outcome-only steps (heads excluded)
OUTCOME_GROUPS = ("encoder", "ode", "outcome")


class ModelParams:
    """All trainable tensors, organised into named groups."""

    def __init__(
        self,
        config: ModelConfig,
        static_dim: int,
        normalization: Normalization,
        groups: dict,
    ):
        self.config = config
        self.static_dim = static_dim
        self.normalization = normalization
        self.groups = groups

    @classmethod
    def initialize(
        cls,
        static_dim: int,
        config: ModelConfig,
        seed: int,
        normalization: Normalization | None = None,
    ) -> "ModelParams":
        if static_dim < 1:
            raise ParameterError(f"static_dim must be >= 1, got {static_dim}")
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([int(seed), 11]))
        )
        latent = config.latent_dim
        enc_h = config.encoder_hidden
        head_h = config.head_hidden
        in_dim = 1 + static_dim

        def weight(fan_in, fan_out):
            return Tensor(glorot_uniform(rng, fan_in, fan_out), requires_grad=True)

        def bias(size):
            return Tensor(np.zeros(size), requires_grad=True)

        groups = {
            "encoder": {
                "W_in": weight(in_dim, enc_h),
                "b_in": bias(enc_h),
                "W_out": weight(enc_h, latent),
                "b_out": bias(latent),
            },
            "ode": {
                "W_self": weight(latent + 1, latent),
                "b_self": bias(latent),
                "W_nbr": weight(latent + 1, latent),
                "b_nbr": bias(latent),
            },
            "outcome": {
                "W": weight(latent, 1),
                "b": bias(1),
            },
            "treatment": {
                "W_hidden": weight(latent, head_h),
                "b_hidden": bias(head_h),
                "W_logits": weight(head_h, 2),
                "b_logits": bias(2),
            },
            "interference": {
                "W_hidden": weight(latent + 1, head_h),
                "b_hidden": bias(head_h),
                "W_out": weight(head_h, 1),
                "b_out": bias(1),
            },
        }
        if normalization is None:
            normalization = Normalization.identity(static_dim)
        return cls(config, static_dim, normalization, groups)

    def named_parameters(self, group_names=GROUP_NAMES) -> dict:
        out = {}
        for group in group_names:
            for name, tensor in self.groups[group].items():
                out[f"{group}.{name}"] = tensor
        return out

    def copy(self) -> "ModelParams":
        groups = {
            g: {n: Tensor(t.values.copy(), requires_grad=True) for n, t in members.items()}
            for g, members in self.groups.items()
        }
        return ModelParams(self.config, self.static_dim, self.normalization, groups)

    def save(self, directory, extra_metadata: dict | None = None) -> None:
        metadata = {
            "kind": "model",
            "model_config": asdict(self.config),
            "static_dim": int(self.static_dim),
            "normalization": self.normalization.to_dict(),
        }
        if extra_metadata:
            metadata.update(extra_metadata)
        arrays = {name: t.values for name, t in self.named_parameters().items()}
        save_checkpoint(directory, arrays, metadata)

    @classmethod
    def load(cls, directory) -> tuple["ModelParams", dict]:
        arrays, metadata = load_checkpoint(directory)
        config = ModelConfig(**metadata["model_config"])
        params = cls.initialize(
            static_dim=int(metadata["static_dim"]),
            config=config,
            seed=0,
            normalization=Normalization.from_dict(metadata["normalization"]),
        )
        for name, tensor in params.named_parameters().items():
            if name not in arrays:
                raise DimensionError(f"checkpoint is missing parameter {name!r}")
            if arrays[name].shape != tensor.values.shape:
                raise DimensionError(
                    f"checkpoint parameter {name!r} has shape {arrays[name].shape}, "
                    f"expected {tensor.values.shape}"
                )
            tensor.values = arrays[name]
        return params, metadata


def mean_aggregation_operators(graph: Graph):
    """Row-stochastic neighbor-mean matrix and its transpose (CSR)."""
    n = graph.num_nodes
    weights = 1.0 / np.maximum(graph.degrees, 1).astype(np.float64)
    data = weights[graph.edge_src]
    op = sparse.csr_matrix(
        (data, (graph.edge_src, graph.edge_dst)), shape=(n, n), dtype=np.float64
    )
    return op, op.T.tocsr()


def encode_initial(x0: np.ndarray, statics: np.ndarray, params: ModelParams) -> Tensor:
    """Map initial states and static traits to initial latent vectors."""
    x0 = np.asarray(x0, dtype=np.float64)
    statics = np.asarray(statics, dtype=np.float64)
    if x0.ndim != 1 or statics.ndim != 2 or statics.shape[0] != x0.shape[0]:
        raise DimensionError(
            f"encode_initial: got states {x0.shape} and traits {statics.shape}"
        )
    if statics.shape[1] != params.static_dim:
        raise DimensionError(
            f"encode_initial: traits have dimension {statics.shape[1]}, "
            f"model expects {params.static_dim}"
        )
    norm = params.normalization
    features = np.column_stack(
        [(x0 - norm.x_mean) / norm.x_std, (statics - norm.v_mean) / norm.v_std]
    )
    enc = params.groups["encoder"]
    hidden = ad.tanh(ad.matmul(Tensor(features), enc["W_in"]) + enc["b_in"])
    return ad.matmul(hidden, enc["W_out"]) + enc["b_out"]


def ode_rhs(
    z: Tensor,
    treatments_now: np.ndarray,
    graph: Graph,
    params: ModelParams,
    operators=None,
) -> Tensor:
    """Latent time derivative from the self map plus the neighbor-mean map."""
    treatments_now = np.asarray(treatments_now, dtype=np.float64)
    if z.ndim != 2 or treatments_now.shape != (z.shape[0],):
        raise DimensionError(
            f"ode_rhs: latent {z.shape} and treatments {treatments_now.shape}"
        )
    if z.shape[0] != graph.num_nodes:
        raise DimensionError(
            f"ode_rhs: latent rows {z.shape[0]} != graph nodes {graph.num_nodes}"
        )
    if operators is None:
        operators = mean_aggregation_operators(graph)
    op, op_t = operators
    ode = params.groups["ode"]
    pair = ad.concat([z, Tensor(treatments_now[:, None])], axis=-1)
    self_part = ad.matmul(pair, ode["W_self"]) + ode["b_self"]
    messages = ad.matmul(pair, ode["W_nbr"]) + ode["b_nbr"]
    neighbor_part = ad.matmul_const(op, messages, op_t)
    return ad.tanh(self_part + neighbor_part)


def euler_solve(rhs, z0: Tensor, n_intervals: int, substeps: int) -> list:
    """Explicit Euler over ``n_intervals`` unit intervals.

    ``rhs(z, interval_index)`` supplies the derivative; inputs held constant
    within an interval are the caller's business.  Returns the states at the
    interval boundaries, starting with ``z0``.
    """
    if n_intervals < 0:
        raise ParameterError(f"n_intervals must be >= 0, got {n_intervals}")
    if substeps < 1:
        raise ParameterError(f"substeps must be >= 1, got {substeps}")
    h = 1.0 / substeps
    states = [z0]
    z = z0
    for t in range(n_intervals):
        for _ in range(substeps):
            z = z + ad.scale(rhs(z, t), h)
        if not np.isfinite(z.values).all():
            raise SolveError(f"non-finite latent state after interval {t}")
        states.append(z)
    return states


@dataclass
class LatentTrajectory:
    """Latent states at the observed timestamps; the first is the encoding."""

    states: list

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1

    def stacked(self) -> Tensor:
        """All states as one matrix, timestamp-major: row ``t * N + i``."""
        return ad.concat(self.states, axis=0)

    def values(self) -> np.ndarray:
        return np.stack([s.values for s in self.states])


def solve_trajectory(
    z0: Tensor,
    treatment_path: np.ndarray,
    graph: Graph,
    params: ModelParams,
    substeps: int | None = None,
    n_intervals: int | None = None,
) -> LatentTrajectory:
    """Roll the latent state across observed intervals.

    ``treatment_path`` has one row per observed timestamp; the row at the
    left endpoint of each interval is held constant across that interval's
    Euler substeps.
    """
    treatment_path = np.asarray(treatment_path, dtype=np.float64)
    if treatment_path.ndim != 2 or treatment_path.shape[1] != z0.shape[0]:
        raise DimensionError(
            f"solve_trajectory: treatment path {treatment_path.shape} does not "
            f"match latent rows {z0.shape[0]}"
        )
    if n_intervals is None:
        n_intervals = treatment_path.shape[0] - 1
    if n_intervals > treatment_path.shape[0] - 1:
        raise DimensionError(
            f"solve_trajectory: {n_intervals} intervals need "
            f"{n_intervals + 1} treatment rows, got {treatment_path.shape[0]}"
        )
    if substeps is None:
        substeps = params.config.substeps
    operators = mean_aggregation_operators(graph)

    def rhs(z, t):
        return ode_rhs(z, treatment_path[t], graph, params, operators)

    return LatentTrajectory(euler_solve(rhs, z0, n_intervals, substeps))


def decode_outcome(latent_rows: Tensor, params: ModelParams) -> Tensor:
    """Predicted outcome for each latent row, on the raw state scale."""
    head = params.groups["outcome"]
    raw = ad.matmul(latent_rows, head["W"]) + head["b"]
    norm = params.normalization
    return ad.scale(raw, norm.x_std) + Tensor(np.float64(norm.x_mean))


def loss_outcome(predicted: Tensor, targets: np.ndarray) -> Tensor:
    """Mean squared error over every unit and observed timestamp."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    if predicted.shape != targets.shape:
        raise DimensionError(
            f"loss_outcome: predictions {predicted.shape} vs targets {targets.shape}"
        )
    return ad.mean(ad.square(predicted - Tensor(targets)))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer class labels."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}"
        )
    one_hot = np.zeros(logits.shape)
    one_hot[np.arange(labels.size), labels.astype(np.int64)] = 1.0
    log_probs = ad.log_softmax(logits)
    picked = ad.tensor_sum(ad.multiply(log_probs, Tensor(one_hot)), axis=-1)
    return ad.scale(ad.mean(picked), -1.0)


def _validate_binary(values: np.ndarray, what: str) -> np.ndarray:
    values = np.asarray(values)
    flat = values.astype(np.float64)
    if not np.all((flat == 0.0) | (flat == 1.0)):
        raise DomainError(f"{what} must be binary 0/1 values")
    return values


def treatment_logits(latent_rows: Tensor, params: ModelParams, reversal: bool = True) -> Tensor:
    head = params.groups["treatment"]
    z = ad.gradient_reversal(latent_rows) if reversal else latent_rows
    hidden = ad.tanh(ad.matmul(z, head["W_hidden"]) + head["b_hidden"])
    return ad.matmul(hidden, head["W_logits"]) + head["b_logits"]


def loss_treatment(
    trajectory: LatentTrajectory,
    treatments: np.ndarray,
    params: ModelParams,
    reversal: bool = True,
) -> Tensor:
    """Cross-entropy of the treatment head at every observed timestamp.

    The head reads the latent state through a gradient-reversal wrapper, so
    minimising this loss trains the head while pushing the encoder and the
    dynamics toward treatment-uninformative latents.
    """
    treatments = _validate_binary(treatments, "treatments")
    rows = trajectory.stacked()
    labels = treatments.reshape(-1)
    if labels.shape[0] != rows.shape[0]:
        raise DimensionError(
            f"loss_treatment: {labels.shape[0]} labels for {rows.shape[0]} latent rows"
        )
    logits = treatment_logits(rows, params, reversal=reversal)
    return softmax_cross_entropy(logits, labels)


def loss_interference(
    trajectory: LatentTrajectory,
    treatments: np.ndarray,
    interference: np.ndarray,
    params: ModelParams,
    reversal: bool = True,
) -> Tensor:
    """Squared error of the interference head at every observed timestamp.

    The head sees the latent state concatenated with the unit's own
    treatment, again through gradient reversal.
    """
    treatments = _validate_binary(treatments, "treatments")
    interference = np.asarray(interference, dtype=np.float64)
    if interference.min() < 0.0 or interference.max() > 1.0:
        raise DomainError("interference values must lie in [0, 1]")
    rows = trajectory.stacked()
    a_flat = treatments.astype(np.float64).reshape(-1, 1)
    g_flat = interference.reshape(-1, 1)
    if a_flat.shape[0] != rows.shape[0] or g_flat.shape[0] != rows.shape[0]:
        raise DimensionError(
            f"loss_interference: {a_flat.shape[0]} treatments and "
            f"{g_flat.shape[0]} targets for {rows.shape[0]} latent rows"
        )
    head = params.groups["interference"]
    combined = ad.concat([rows, Tensor(a_flat)], axis=-1)
    z = ad.gradient_reversal(combined) if reversal else combined
    hidden = ad.tanh(ad.matmul(z, head["W_hidden"]) + head["b_hidden"])
    predicted = ad.matmul(hidden, head["W_out"]) + head["b_out"]
    return ad.mean(ad.square(predicted - Tensor(g_flat)))


def loss_total(
    outcome_loss,
    treatment_loss,
    interference_loss,
    alpha_treatment: float,
    alpha_interference: float,
) -> Tensor:
    """Weighted training objective.

    A ``None`` adversarial term is allowed when its weight is exactly zero,
    in which case it contributes nothing.
    """
    if alpha_treatment < 0 or alpha_interference < 0:
        raise ParameterError(
            f"loss weights must be non-negative, got "
            f"({alpha_treatment}, {alpha_interference})"
        )
    total = outcome_loss if isinstance(outcome_loss, Tensor) else Tensor(np.float64(outcome_loss))
    for term, weight, name in (
        (treatment_loss, alpha_treatment, "treatment_loss"),
        (interference_loss, alpha_interference, "interference_loss"),
    ):
        if term is None:
            if weight != 0.0:
                raise ParameterError(f"{name} is required when its weight is nonzero")
            continue
        term = term if isinstance(term, Tensor) else Tensor(np.float64(term))
        total = total + ad.scale(term, weight)
    return total
