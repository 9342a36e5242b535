"""Synthetic (task x domain) regression grid with compositional structure.

Cell (c, d) maps an input x in R^p to a task-c output y in R^q via
``y = x U_d V_c + noise``. Domain d draws its inputs from its own random
rank-``domain_rank`` subspace of R^p (``x = s B_d``), so domains overlap but
are distinguishable by where their inputs live.

One model serves every cell: a two-layer linear network with a shared
encoder ``enc.weight`` (p x r) and a head ``head.weight`` (r x C*q) holding
one r x q block per task; cell (c, d) reads head block c. A constituent
fine-tuned on (c, d) adapts the encoder on domain d's subspace and head
block c, so merging constituents for (c, d) and (c', d') can in principle
solve the unseen (c, d'), while encoder updates from different domains
interfere where the subspaces overlap.

The pretrained base model holds shared factors ``U0`` / ``V0``; cell factors
are the base factors plus seeded Gaussian offsets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mergelab import rng
from mergelab.checkpoint import TensorMap
from mergelab.merge.kernels import compute_task_vector, compute_trim_statistic
from mergelab.statistics import ToyModel, model_statistics

Cell = tuple[int, int]  # (task c, domain d)

ENC = "enc.weight"
HEAD = "head.weight"
SPLITS = ("train", "val", "test")


@dataclass
class CellData:
    X: dict[str, np.ndarray]
    Y: dict[str, np.ndarray]


@dataclass
class Scenario:
    n_domains: int
    n_tasks: int
    input_dim: int
    latent_dim: int
    output_dim: int
    sigma: float
    seed: int
    U: list[np.ndarray]  # per domain, p x r
    V: list[np.ndarray]  # per task, r x q
    B: list[np.ndarray]  # per domain input basis, domain_rank x p
    U0: np.ndarray
    V0: np.ndarray
    held_in: list[Cell]
    generalization: list[Cell]
    data: dict[Cell, CellData] = field(repr=False, default_factory=dict)
    params: dict = field(default_factory=dict)

    @property
    def cells(self) -> list[Cell]:
        return [(c, d) for c in range(self.n_tasks) for d in range(self.n_domains)]

    def out_cols(self, c: int) -> slice:
        return slice(c * self.output_dim, (c + 1) * self.output_dim)

    def base_model(self) -> TensorMap:
        return {
            ENC: self.U0.astype(np.float32),
            HEAD: np.tile(self.V0, (1, self.n_tasks)).astype(np.float32),
        }

    def ground_truth_model(self, cell: Cell) -> TensorMap:
        c, d = self.check_cell(cell)
        model = self.base_model()
        model[ENC][:] = self.U[d]
        model[HEAD][:, self.out_cols(c)] = self.V[c]
        return model

    def cell_blocks(self, model: TensorMap, cell: Cell) -> tuple[np.ndarray, np.ndarray]:
        """(encoder, task head block) used by ``cell``, in float64."""
        c, _ = cell
        enc = np.asarray(model[ENC], dtype=np.float64)
        head = np.asarray(model[HEAD], dtype=np.float64)[:, self.out_cols(c)]
        return enc, head

    def check_cell(self, cell: Cell) -> Cell:
        c, d = cell
        if not (0 <= c < self.n_tasks and 0 <= d < self.n_domains):
            raise KeyError(f"unknown cell {cell}")
        return (int(c), int(d))

    def applicable_generalization(self, cells: list[Cell]) -> list[Cell]:
        """Off-diagonal cells whose task appears among ``cells``."""
        tasks = {c for c, _ in cells}
        return [cell for cell in self.generalization if cell[0] in tasks]


def held_in_cells(n_domains: int, n_tasks: int) -> list[Cell]:
    """Diagonal when D == C; otherwise the longer axis wraps around the shorter one."""
    return [(i % n_tasks, i % n_domains) for i in range(max(n_domains, n_tasks))]


def _as_f32_exact(a: np.ndarray) -> np.ndarray:
    # factors are exactly float32-representable so stored models are lossless
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def generate_scenario(
    n_domains: int = 8,
    n_tasks: int = 8,
    input_dim: int = 12,
    seed: int = 0,
    sigma: float = 0.1,
    *,
    domain_rank: int = 4,
    latent_dim: int = 3,
    output_dim: int = 4,
    spread: float = 0.6,
    n_train: int = 48,
    n_val: int = 32,
    n_test: int = 64,
) -> Scenario:
    if n_domains < 2 or n_tasks < 2:
        raise ValueError("need at least 2 domains and 2 tasks")
    if min(input_dim, latent_dim, output_dim, domain_rank) < 1:
        raise ValueError("dimensions must be positive")
    if domain_rank > input_dim:
        raise ValueError("domain_rank must not exceed input_dim")
    if latent_dim > output_dim:
        raise ValueError("latent_dim must not exceed output_dim")
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("every split needs at least one example")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    g = rng.stream(seed, "scenario/factors")
    U0 = _as_f32_exact(g.standard_normal((input_dim, latent_dim)) / np.sqrt(domain_rank))
    V0 = _as_f32_exact(g.standard_normal((latent_dim, output_dim)) / np.sqrt(latent_dim))
    U = [_as_f32_exact(U0 + spread * g.standard_normal(U0.shape) / np.sqrt(domain_rank)) for _ in range(n_domains)]
    V = [_as_f32_exact(V0 + spread * g.standard_normal(V0.shape) / np.sqrt(latent_dim)) for _ in range(n_tasks)]
    B = [g.standard_normal((domain_rank, input_dim)) / np.sqrt(input_dim) for _ in range(n_domains)]
    held_in = held_in_cells(n_domains, n_tasks)
    held = set(held_in)
    generalization = [(c, d) for c in range(n_tasks) for d in range(n_domains) if (c, d) not in held]
    sizes = {"train": n_train, "val": n_val, "test": n_test}
    data = {}
    for c in range(n_tasks):
        for d in range(n_domains):
            gc = rng.stream(seed, f"scenario/cell/{c}/{d}")
            X, Y = {}, {}
            for split in SPLITS:
                x = gc.standard_normal((sizes[split], domain_rank)) @ B[d]
                X[split] = x
                Y[split] = (x @ U[d]) @ V[c] + sigma * gc.standard_normal((sizes[split], output_dim))
            data[(c, d)] = CellData(X, Y)
    params = dict(
        n_domains=n_domains,
        n_tasks=n_tasks,
        input_dim=input_dim,
        seed=seed,
        sigma=sigma,
        domain_rank=domain_rank,
        latent_dim=latent_dim,
        output_dim=output_dim,
        spread=spread,
        n_train=n_train,
        n_val=n_val,
        n_test=n_test,
    )
    return Scenario(n_domains, n_tasks, input_dim, latent_dim, output_dim, sigma, seed, U, V, B, U0, V0,
                    held_in, generalization, data, params)


# -- training --------------------------------------------------------------


def _ridge_encoder(pairs, heads, alpha: float, prior: np.ndarray) -> np.ndarray:
    """argmin_E sum ||X E H - Y||^2 + alpha ||E - prior||^2 over (X, Y), H pairs.

    Solved in vectorized form: (sum HH^T (x) X^TX + alpha I) vec(E) = vec(sum X^T Y H^T + alpha prior).
    """
    p, r = prior.shape
    A = alpha * np.eye(p * r)
    rhs = alpha * prior
    for (X, Y), H in zip(pairs, heads):
        A += np.kron(H @ H.T, X.T @ X)
        rhs = rhs + X.T @ Y @ H.T
    return _solve(A, rhs.reshape(-1, order="F"), alpha).reshape((p, r), order="F")


def _ridge_head(pairs, encoders, alpha: float, prior: np.ndarray) -> np.ndarray:
    r = prior.shape[0]
    A = alpha * np.eye(r)
    rhs = alpha * prior
    for (X, Y), E in zip(pairs, encoders):
        XE = X @ E
        A += XE.T @ XE
        rhs = rhs + XE.T @ Y
    return _solve(A, rhs, alpha)


def _solve(A: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    if alpha == 0 and np.linalg.cond(A) > 1e12:
        raise np.linalg.LinAlgError("singular design: use alpha > 0")
    return np.linalg.solve(A, b)


def _fit(scenario: Scenario, cells: list[Cell], alpha: float, split: str = "train") -> TensorMap:
    """One alternating ridge round from the base model: shared encoder, then task heads."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    for cell in cells:
        if len(scenario.data[cell].X[split]) == 0:
            raise ValueError(f"cell {cell} has no {split} examples")
    base = scenario.base_model()
    enc = np.asarray(base[ENC], dtype=np.float64)
    head = np.asarray(base[HEAD], dtype=np.float64)
    pairs = [(scenario.data[cl].X[split], scenario.data[cl].Y[split]) for cl in cells]
    new_enc = _ridge_encoder(pairs, [head[:, scenario.out_cols(c)] for c, _ in cells], alpha, enc)
    new_head = head.copy()
    for c in sorted({c for c, _ in cells}):
        mine = [i for i, cell in enumerate(cells) if cell[0] == c]
        new_head[:, scenario.out_cols(c)] = _ridge_head(
            [pairs[i] for i in mine], [new_enc] * len(mine), alpha, head[:, scenario.out_cols(c)]
        )
    return {ENC: new_enc.astype(np.float32), HEAD: new_head.astype(np.float32)}


@dataclass
class Constituent:
    cell: Cell
    params: TensorMap
    statistics: TensorMap


def _embed(scenario: Scenario, cell: Cell, stats: TensorMap) -> TensorMap:
    """Place statistics computed on a cell's sub-model (encoder + one head block) into full shapes."""
    c, _ = cell
    head_f = np.zeros((scenario.latent_dim, scenario.n_tasks * scenario.output_dim), dtype=np.float32)
    head_f[:, scenario.out_cols(c)] = stats["fisher/head.weight"]
    return {
        "fisher/" + ENC: stats["fisher/enc.weight"],
        "fisher/" + HEAD: head_f,
        "gram/" + ENC: stats["gram/enc.weight"],
        "gram/" + HEAD: stats["gram/head.weight"],
    }


def train_constituent(
    scenario: Scenario,
    cell: Cell,
    alpha: float = 1e-2,
    *,
    k_fraction: float = 0.2,
    fisher_samples: int = 4,
    empirical_fisher: bool = False,
) -> Constituent:
    """Ridge fit on the cell's training split, plus its merge statistics.

    Fisher and Gram statistics come from the validation split; trim masks
    keep the top ``k_fraction`` of the task vector by magnitude.
    """
    cell = scenario.check_cell(cell)
    params = _fit(scenario, [cell], alpha)
    enc, head = scenario.cell_blocks(params, cell)
    sub = ToyModel(["enc", "head"], {"enc.weight": enc, "head.weight": head})
    val = scenario.data[cell]
    sub_stats = model_statistics(
        sub,
        val.X["val"],
        labels=val.Y["val"],
        empirical=empirical_fisher,
        n_samples=fisher_samples,
        seed=rng.child_seed(scenario.seed, f"fisher/{cell[0]}/{cell[1]}"),
    )
    stats = _embed(scenario, cell, sub_stats)
    base = scenario.base_model()
    tv = {n: compute_task_vector(params[n], base[n]) for n in params}
    for name, mask in compute_trim_statistic(tv, k_fraction).items():
        stats[f"trim/{name}"] = mask
    return Constituent(cell, params, {n: stats[n] for n in sorted(stats)})


def train_multitask(scenario: Scenario, alpha: float = 1e-2, cells: list[Cell] | None = None) -> TensorMap:
    """Joint ridge fit over ``cells`` (default: every held-in cell)."""
    return _fit(scenario, list(cells or scenario.held_in), alpha)


# -- evaluation ------------------------------------------------------------


def cell_score(model: TensorMap, scenario: Scenario, cell: Cell, split: str = "test") -> float:
    """Negative mean squared error on one cell (higher is better)."""
    cell = scenario.check_cell(cell)
    enc, head = scenario.cell_blocks(model, cell)
    data = scenario.data[cell]
    pred = (data.X[split] @ enc) @ head
    return -float(np.mean((pred - data.Y[split]) ** 2))


def evaluate(model: TensorMap, scenario: Scenario, cells, split: str = "test") -> float:
    """Unweighted mean of per-cell scores."""
    cells = list(cells)
    if not cells:
        raise ValueError("no cells to evaluate")
    return float(np.mean([cell_score(model, scenario, cell, split) for cell in cells]))
