"""Gibbs-sampled Bayesian factorization of the rank-3 observation tensor.

The model places a Gaussian likelihood with fixed precision ``alpha`` on each
observed cell, whose mean is the three-way latent product
``sum_d U[i,d] * V[j,d] * W[k,d]``. Each mode's latent rows get a Gaussian
prior whose mean and precision carry a conjugate Gaussian-Wishart hyperprior,
so the full conditional of every quantity is available in closed form and
one sweep samples, per mode: hyperparameters, then all latent rows.

Randomness is organized as counter-based streams keyed by
``(seed, sweep, role, entity)`` (see :mod:`trialtensor.rng`), which makes a
multi-threaded sweep bit-identical to a serial one.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import DataError, NumericalError
from .io import atomic_write, format_float, read_json
from .rng import ROLE_HYPER, ROLE_INIT, ROLE_LATENT, StreamTree
from .tensor import Coord, SparseTensor

_JITTER_REL = 1e-6


@dataclass(frozen=True)
class Hyperprior:
    """Gaussian-Wishart hyperprior shared by all three modes.

    ``precision_scale`` is the Wishart scale matrix and ``dof`` its degrees
    of freedom; ``mean_strength`` scales how strongly the prior mean ties
    down the sampled per-mode mean.
    """

    mean: np.ndarray
    mean_strength: float
    precision_scale: np.ndarray
    dof: float

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        scale = np.asarray(self.precision_scale, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision_scale", scale)
        n_latent = mean.shape[0]
        if scale.shape != (n_latent, n_latent):
            raise ValueError("precision_scale shape does not match mean length")
        if not np.allclose(scale, scale.T):
            raise NumericalError("scale matrix not SPD: not symmetric")
        try:
            np.linalg.cholesky(scale)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("scale matrix not SPD") from exc
        if self.dof < n_latent:
            raise ValueError(f"dof {self.dof} below latent dimension {n_latent}")
        if self.mean_strength <= 0:
            raise ValueError("mean_strength must be positive")

    @property
    def n_latent(self) -> int:
        return int(self.mean.shape[0])

    @classmethod
    def default(cls, n_latent: int) -> "Hyperprior":
        return cls(
            mean=np.zeros(n_latent),
            mean_strength=2.0,
            precision_scale=np.eye(n_latent),
            dof=float(n_latent),
        )


@dataclass
class ModeParams:
    """Per-mode Gaussian prior on latent rows: Normal(mean, precision^-1)."""

    mean: np.ndarray
    precision: np.ndarray


@dataclass
class ModelState:
    """Latent matrices plus per-mode priors; owned by the sampling loop."""

    latents: list[np.ndarray]
    params: list[ModeParams]
    alpha: float
    n_latent: int
    seed: int
    hyperprior: Hyperprior
    sweep: int = 0

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(mat.shape[0] for mat in self.latents)


@dataclass(frozen=True)
class SamplerSchedule:
    """Burn-in, post-burn-in sweep count, and thinning interval."""

    burnin: int = 500
    samples: int = 3500
    thin: int = 350

    def __post_init__(self):
        if self.burnin < 0 or self.samples < 1 or self.thin < 1:
            raise ValueError(f"invalid schedule {self}")

    @property
    def retained(self) -> int:
        return self.samples // self.thin


def init_model(
    dims: Sequence[int],
    n_latent: int,
    hyperprior: Hyperprior | None = None,
    alpha: float = 5.0,
    seed: int = 0,
) -> ModelState:
    """Fresh model state: latents i.i.d. standard normal, identity priors."""
    if n_latent < 1:
        raise ValueError("n_latent must be at least 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if hyperprior is None:
        hyperprior = Hyperprior.default(n_latent)
    if hyperprior.n_latent != n_latent:
        raise ValueError("hyperprior dimension does not match n_latent")
    tree = StreamTree(seed)
    latents = [
        tree.stream(0, ROLE_INIT, mode).standard_normal((int(dims[mode]), n_latent))
        for mode in range(3)
    ]
    params = [
        ModeParams(mean=hyperprior.mean.copy(), precision=np.eye(n_latent)) for _ in range(3)
    ]
    return ModelState(
        latents=latents,
        params=params,
        alpha=float(alpha),
        n_latent=n_latent,
        seed=seed,
        hyperprior=hyperprior,
    )


# --------------------------------------------------------------------------
# Elementary draws.

def sample_wishart(scale: np.ndarray, dof: float, rng: np.random.Generator) -> np.ndarray:
    """Draw from Wishart(scale, dof) by the Bartlett decomposition.

    With ``L = chol(scale)`` and ``A`` lower triangular having
    ``A[i, i] ~ sqrt(chi2(dof - i))`` and standard-normal entries below the
    diagonal, ``L A A' L'`` is Wishart-distributed. The draw order (diagonal
    first, then the strictly-lower entries row-major) is part of the
    determinism contract.
    """
    scale = np.asarray(scale, dtype=np.float64)
    dim = scale.shape[0]
    if dof < dim:
        raise ValueError(f"degrees of freedom {dof} below dimension {dim}")
    try:
        lower = np.linalg.cholesky(scale)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("scale matrix not SPD") from exc
    bartlett = np.zeros((dim, dim))
    bartlett[np.diag_indices(dim)] = np.sqrt(rng.chisquare(dof - np.arange(dim)))
    if dim > 1:
        tril = np.tril_indices(dim, k=-1)
        bartlett[tril] = rng.standard_normal(len(tril[0]))
    root = lower @ bartlett
    sample = root @ root.T
    return (sample + sample.T) / 2.0


def sample_mvn(mean: np.ndarray, precision: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw from Normal(mean, precision^-1) without forming the inverse.

    Uses the Cholesky factor of the precision and a single triangular
    solve: if ``precision = L L'`` and ``z`` is standard normal, then
    ``mean + solve(L', z)`` has covariance ``precision^-1``.
    """
    mean = np.asarray(mean, dtype=np.float64)
    try:
        lower = np.linalg.cholesky(np.asarray(precision, dtype=np.float64))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("precision not SPD") from exc
    z = rng.standard_normal(mean.shape[0])
    return mean + solve_triangular(lower.T, z, lower=False)


def _jittered(mat: np.ndarray) -> np.ndarray:
    # Jitter policy: one retry with 1e-6 * (trace / dim) added to the diagonal.
    dim = mat.shape[0]
    eps = _JITTER_REL * float(np.trace(mat)) / dim
    if eps <= 0.0:
        eps = _JITTER_REL
    return mat + eps * np.eye(dim)


def sample_mode_hyperparams(
    latents: np.ndarray, hyperprior: Hyperprior, rng: np.random.Generator
) -> ModeParams:
    """Gaussian-Wishart posterior draw given one mode's latent rows.

    Conjugate update: with ``n`` rows, sample mean ``xbar`` and centered
    scatter ``n * S``, the posterior has strength ``beta0 + n``, degrees of
    freedom ``dof0 + n``, mean ``(beta0 * mu0 + n * xbar) / (beta0 + n)``
    and inverse scale
    ``W0^-1 + n * S + (beta0 * n / (beta0 + n)) (xbar - mu0)(xbar - mu0)'``.
    Precision is drawn from the Wishart, then the mean conditionally on it.
    """
    latents = np.asarray(latents, dtype=np.float64)
    n_rows = latents.shape[0]
    if n_rows < 1:
        raise ValueError("empty mode: cannot update hyperparameters")
    beta0 = hyperprior.mean_strength
    mu0 = hyperprior.mean
    xbar = latents.mean(axis=0)
    centered = latents - xbar
    scatter = centered.T @ centered
    beta_post = beta0 + n_rows
    dof_post = hyperprior.dof + n_rows
    mean_post = (beta0 * mu0 + n_rows * xbar) / beta_post
    dev = xbar - mu0
    scale_inv = np.linalg.inv(hyperprior.precision_scale)
    scale_inv = scale_inv + scatter + (beta0 * n_rows / beta_post) * np.outer(dev, dev)
    scale_inv = (scale_inv + scale_inv.T) / 2.0
    try:
        scale_post = _spd_inverse(scale_inv)
    except NumericalError:
        scale_post = _spd_inverse(_jittered(scale_inv))
    try:
        precision = sample_wishart(scale_post, dof_post, rng)
    except NumericalError:
        precision = sample_wishart(_jittered(scale_post), dof_post, rng)
    mean = sample_mvn(mean_post, beta_post * precision, rng)
    return ModeParams(mean=mean, precision=precision)


def _spd_inverse(mat: np.ndarray) -> np.ndarray:
    try:
        lower = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("matrix not SPD") from exc
    inv = cho_solve((lower, True), np.eye(mat.shape[0]))
    return (inv + inv.T) / 2.0


def row_posterior(
    prior_precision: np.ndarray,
    prior_mean: np.ndarray,
    alpha: float,
    q_rows: np.ndarray,
    values: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian conditional of one latent row given its observed cells.

    ``q_rows`` holds, per observed cell, the elementwise product of the other
    two modes' latent vectors. Posterior precision is
    ``prior_precision + alpha * sum(q q')`` and the posterior mean solves it
    against ``prior_precision @ prior_mean + alpha * sum(value * q)``.
    """
    precision = prior_precision + alpha * (q_rows.T @ q_rows)
    precision = (precision + precision.T) / 2.0
    rhs = prior_precision @ prior_mean + alpha * (q_rows.T @ values)
    try:
        mean = np.linalg.solve(precision, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("row posterior precision is singular") from exc
    return precision, mean


_OTHER_MODES = {0: (1, 2), 1: (0, 2), 2: (0, 1)}


def sample_mode_latents(
    state: ModelState,
    tensor: SparseTensor,
    mode: int,
    tree: StreamTree,
    n_threads: int = 1,
) -> np.ndarray:
    """Redraw every latent row of one mode from its full conditional.

    Rows are conditionally independent given the other two modes, so they
    are drawn on independent streams and may be computed in parallel.
    Entities with no observed cells fall back to the mode prior.
    """
    other_a, other_b = _OTHER_MODES[mode]
    order, offsets = tensor.fiber_index(mode)
    coords = tensor.coords
    values = tensor.values
    params = state.params[mode]
    lat_a = state.latents[other_a]
    lat_b = state.latents[other_b]
    alpha = state.alpha
    sweep = state.sweep
    out = np.empty_like(state.latents[mode])

    def draw_rows(entities: range) -> None:
        for entity in entities:
            rng = tree.stream(sweep, ROLE_LATENT + mode, entity)
            rows = order[offsets[entity] : offsets[entity + 1]]
            if rows.size == 0:
                out[entity] = sample_mvn(params.mean, params.precision, rng)
                continue
            q_rows = lat_a[coords[rows, other_a]] * lat_b[coords[rows, other_b]]
            cell_values = values[rows]
            precision, mean = row_posterior(
                params.precision, params.mean, alpha, q_rows, cell_values
            )
            try:
                out[entity] = sample_mvn(mean, precision, rng)
            except NumericalError:
                precision = _jittered(precision)
                rhs = params.precision @ params.mean + alpha * (q_rows.T @ cell_values)
                out[entity] = sample_mvn(np.linalg.solve(precision, rhs), precision, rng)

    n_entities = out.shape[0]
    if n_threads <= 1 or n_entities < 2:
        draw_rows(range(n_entities))
    else:
        n_workers = min(n_threads, n_entities)
        bounds = np.linspace(0, n_entities, n_workers + 1, dtype=int)
        chunks = [range(bounds[w], bounds[w + 1]) for w in range(n_workers)]
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            # Exhaust the iterator so worker exceptions propagate.
            list(pool.map(draw_rows, chunks))
    return out


def gibbs_step(
    state: ModelState, tensor: SparseTensor, tree: StreamTree, n_threads: int = 1
) -> ModelState:
    """One full sweep: per mode (target, indication, layer order),
    sample hyperparameters, then every latent row of that mode."""
    if state.dims != tensor.dims:
        raise DataError(f"state dims {state.dims} do not match tensor dims {tensor.dims}")
    for mode in range(3):
        rng = tree.stream(state.sweep, ROLE_HYPER, mode)
        state.params[mode] = sample_mode_hyperparams(state.latents[mode], state.hyperprior, rng)
        state.latents[mode] = sample_mode_latents(state, tensor, mode, tree, n_threads)
    state.sweep += 1
    return state


# --------------------------------------------------------------------------
# Prediction.

def predict_cells(state: ModelState, coords: np.ndarray) -> np.ndarray:
    """Three-way latent products for an (n, 3) coordinate array, clamped to [0, 1]."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    dims = state.dims
    if coords.size and (coords.min() < 0 or (coords >= np.asarray(dims)).any()):
        raise DataError("query coordinate out of range")
    raw = np.sum(
        state.latents[0][coords[:, 0]]
        * state.latents[1][coords[:, 1]]
        * state.latents[2][coords[:, 2]],
        axis=1,
    )
    return np.clip(raw, 0.0, 1.0)


def predict_cell(state: ModelState, i: int, j: int, k: int) -> float:
    """Success-probability score for one cell."""
    return float(predict_cells(state, np.array([[i, j, k]]))[0])


@dataclass
class PredictionAccumulator:
    """Running sums of per-retained-sample predictions over query cells."""

    cells: np.ndarray
    sums: np.ndarray = field(init=False)
    count: int = field(init=False, default=0)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int64).reshape(-1, 3)
        self.sums = np.zeros(self.cells.shape[0])

    def add(self, scores: np.ndarray) -> None:
        self.sums += scores
        self.count += 1

    def means(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no retained samples accumulated")
        return self.sums / self.count


@dataclass(frozen=True)
class RunResult:
    predictions: dict[Coord, float]
    retained: int


def run(
    state: ModelState,
    tensor: SparseTensor,
    schedule: SamplerSchedule,
    query_cells: Sequence[Coord] | np.ndarray,
    n_threads: int = 1,
) -> RunResult:
    """Burn in, then sample, retaining every ``thin``-th post-burn-in sweep.

    Sweeps are numbered 1-based after burn-in and a sweep is retained when
    its number is an exact multiple of ``thin``, so the retained count is
    ``samples // thin``. The final score per query cell is the arithmetic
    mean of the clamped per-sample predictions.
    """
    if schedule.retained == 0:
        raise ValueError(
            f"schedule retains no samples (samples={schedule.samples} < thin={schedule.thin})"
        )
    accumulator = PredictionAccumulator(np.asarray(query_cells))
    predict_cells(state, accumulator.cells)  # validate query range up front
    tree = StreamTree(state.seed)
    for _ in range(schedule.burnin):
        gibbs_step(state, tensor, tree, n_threads)
    for sweep_number in range(1, schedule.samples + 1):
        gibbs_step(state, tensor, tree, n_threads)
        if sweep_number % schedule.thin == 0:
            accumulator.add(predict_cells(state, accumulator.cells))
    means = accumulator.means()
    predictions = {
        (int(i), int(j), int(k)): float(score)
        for (i, j, k), score in zip(accumulator.cells, means)
    }
    return RunResult(predictions=predictions, retained=accumulator.count)


# --------------------------------------------------------------------------
# Checkpoints: one TSV per latent matrix plus a JSON manifest.

_CHECKPOINT_FILES = ("targets.tsv", "indications.tsv", "layers.tsv")


def save_checkpoint(
    directory: str | Path,
    state: ModelState,
    schedule: SamplerSchedule,
    retained: int,
) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for filename, matrix in zip(_CHECKPOINT_FILES, state.latents):
        with atomic_write(directory / filename) as handle:
            for row in matrix:
                handle.write("\t".join(format_float(v) for v in row) + "\n")
    manifest = {
        "n_latent": state.n_latent,
        "alpha": state.alpha,
        "burnin": schedule.burnin,
        "samples": schedule.samples,
        "thin": schedule.thin,
        "seed": state.seed,
        "retained": retained,
    }
    with atomic_write(directory / "manifest.json") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")


def load_checkpoint(directory: str | Path) -> tuple[ModelState, Mapping]:
    """Rebuild a prediction-ready state from a checkpoint directory.

    Only the latent matrices matter for prediction; priors are reset to the
    defaults, so the returned state is not suitable for resuming a chain.
    """
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    latents = []
    for filename in _CHECKPOINT_FILES:
        matrix = np.loadtxt(directory / filename, delimiter="\t", ndmin=2)
        latents.append(np.asarray(matrix, dtype=np.float64))
    n_latent = int(manifest["n_latent"])
    state = init_model(
        dims=[m.shape[0] for m in latents],
        n_latent=n_latent,
        alpha=float(manifest["alpha"]),
        seed=int(manifest["seed"]),
    )
    state.latents = latents
    return state, manifest
