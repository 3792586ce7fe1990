"""Grid search over (k, m, lambda) by BIC."""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .emfit.fit import FitConfig, as_member, default_lambda_grid, fit
from .emfit.initialize import distinguishable
from .emfit.mstep import block_norms
from .errors import DataError, SelectionError, SwitchODEError

log = logging.getLogger(__name__)

ZERO_BLOCK = 1e-10


def complexity(theta, count="entries"):
    """Number of free drift parameters.

    ``"entries"`` counts nonzero coefficients inside active blocks (the
    l0 norm of every coefficient vector); ``"blocks"`` counts active blocks.
    A block is active when its Euclidean norm is at least 1e-10.
    """
    active = block_norms(theta) >= ZERO_BLOCK
    if count == "blocks":
        return int(active.sum())
    if count == "entries":
        return int(((np.abs(theta) > 0) & active[..., None]).sum())
    raise DataError(f"count must be 'entries' or 'blocks', got {count!r}")


def bic(result, N=None, count="entries"):
    """``(k^2 - k + #nonzero drift parameters) log N - 2 * unpenalised objective``.

    See :func:`complexity` for ``count``. Works for single and grouped fits
    (one generator per group).
    """
    if hasattr(result, "params"):
        theta, n_q = result.params.theta, 1
    else:
        theta, n_q = result.theta, len(result.q)
    N = result.n_obs if N is None else N
    if N < 2:
        raise DataError("N must be at least 2")
    k = theta.shape[0]
    return float((n_q * (k * k - k) + complexity(theta, count)) * np.log(N) - 2.0 * result.unpenalized_objective)


@dataclass
class SelectionGrid:
    k_candidates: tuple = (1, 2, 3, 4, 5, 6)
    m_candidates: tuple = (1, 2, 3, 4, 5)
    lambda_grid: np.ndarray = field(default_factory=default_lambda_grid)

    def __post_init__(self):
        self.k_candidates = tuple(int(k) for k in self.k_candidates)
        self.m_candidates = tuple(int(m) for m in self.m_candidates)
        self.lambda_grid = np.sort(np.asarray(self.lambda_grid, dtype=float))[::-1]
        if not (self.k_candidates and self.m_candidates and self.lambda_grid.size):
            raise DataError("selection grid must be non-empty")
        if min(self.k_candidates) < 1 or min(self.m_candidates) < 1:
            raise DataError("k and m candidates must be positive")
        if np.any(self.lambda_grid <= 0):
            raise DataError("lambda grid must be positive")

    @property
    def size(self):
        return len(self.k_candidates) * len(self.m_candidates) * self.lambda_grid.size


@dataclass
class Cell:
    k: int
    m: int
    lam: float
    bic: float
    converged: bool
    iterations: int = 0
    error: str = ""


@dataclass
class SelectionReport:
    cells: list
    chosen: tuple
    fit: object
    stage1: dict

    def rows(self):
        return [
            {"k": c.k, "m": c.m, "lambda": c.lam, "bic": c.bic, "converged": c.converged,
             "iterations": c.iterations, "error": c.error}
            for c in self.cells
        ]


def cell_seed(seed, k, m):
    """Independent, reproducible stream for grid cell ``(k, m)``."""
    return np.random.SeedSequence(entropy=seed, spawn_key=(k, m))


def _run_path(y, psi, h, k, m, lambdas, config, seed, count="entries"):
    """Warm-started path for one (k, m).

    A failed fit, or one whose states collapsed, restarts the next fit from
    the default data-driven initialisation.
    """
    cells, fits = [], []
    init = None
    for lam in lambdas:
        try:
            res = fit(y, psi, k=k, m=m, lam=lam, init=init, config=config, seed=seed, h=h)
        except SwitchODEError as exc:
            log.info("fit failed at k=%d m=%d lambda=%.4g: %s", k, m, lam, exc)
            cells.append(Cell(k, m, float(lam), np.inf, False, 0, f"{type(exc).__name__}: {exc}"))
            fits.append(None)
            init = None
            continue
        cells.append(Cell(k, m, float(lam), bic(res, count=count), res.converged, res.iterations))
        fits.append(res)
        init = res.params if distinguishable(res.params, res.posterior.w) else None
    return cells, fits


def _run_path_star(args):
    return _run_path(*args)


def grid_search(y, psi_factory, grid=None, config=None, seed=0, h=None, workers=1, count="entries"):
    """Two-stage BIC selection.

    Stage 1 finds, for every k, the best BIC over (m, lambda) using a
    warm-started lambda path per m, and picks k with the smallest of these.
    Stage 2 keeps that k and reports the (m, lambda) of minimal BIC.
    ``psi_factory(m)`` returns the features for basis size m; ``count``
    is passed to :func:`bic`.
    """
    grid = grid or SelectionGrid()
    config = config or FitConfig()
    psis = {}
    for m in grid.m_candidates:
        yy, psi, hh = as_member(y, psi_factory(m), h)
        if psi.shape[2] != m:
            raise DataError(f"psi_factory({m}) returned {psi.shape[2]} basis functions")
        psis[m] = psi
    jobs = [
        (yy, psis[m], hh, k, m, grid.lambda_grid, config, cell_seed(seed, k, m), count)
        for k in grid.k_candidates for m in grid.m_candidates
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_path_star, jobs))
    else:
        outputs = [_run_path(*job) for job in jobs]
    cells, fits = [], []
    for c, f in outputs:
        cells.extend(c)
        fits.extend(f)
    ok = [i for i, f in enumerate(fits) if f is not None]
    if not ok:
        raise SelectionError("every fit failed:\n" + "\n".join(
            f"k={c.k} m={c.m} lambda={c.lam:.4g}: {c.error}" for c in cells
        ))
    stage1 = {}
    for i in ok:
        c = cells[i]
        if c.k not in stage1 or c.bic < cells[stage1[c.k]].bic:
            stage1[c.k] = i
    k_star = min(stage1, key=lambda kk: (cells[stage1[kk]].bic, kk))
    best = min((i for i in ok if cells[i].k == k_star), key=lambda i: cells[i].bic)
    win = cells[best]
    return SelectionReport(
        cells=cells,
        chosen=(win.k, win.m, win.lam),
        fit=fits[best],
        stage1={kk: cells[i].bic for kk, i in stage1.items()},
    )
