"""Optimal-transport coupling between atmospheric and boundary latent fields.

The block works in three moves: per-sphere feature extraction, an entropic
transport solve between the two latent grids, and a transport-weighted
feature exchange added back through a residual connection.  The two
directions (boundary-to-atmosphere and atmosphere-to-boundary) carry fully
independent parameter sets.  Solved plans can be archived and sliced into the
influence maps behind the weighted mean influencing distance diagnostic.

The public solver iterates in log space, which is mandatory at small epsilon
on the [0, 2] cosine-cost scale.  A probability-domain scaled kernel covers
the hot rollout path where epsilon is moderate and the exponent range is
provably safe; it produces the same plans within solver tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .grid import GridSpec, RegionBox, great_circle_km, latitude_weights, region_mask
from .vq import LATENT_SHAPE

DEFAULT_EPSILON = 0.05
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 5000

#: Max exponent magnitude the probability-domain kernel will accept.
_SCALED_KERNEL_EXP_LIMIT = 60.0


class SinkhornNumericalError(RuntimeError):
    pass


@dataclass
class CostMatrix:
    """Pairwise coupling cost between two latent grids, in [0, 2]."""

    values: np.ndarray
    direction: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("cost matrix must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("cost matrix must be finite")


@dataclass
class TransportPlan:
    """Entropic transport plan with its solve metadata.

    ``S`` may be None for summary-only plans produced on the hot path with
    ``materialize_plans=False``; all solve metadata is still recorded.
    """

    S: np.ndarray | None
    epsilon: float
    iterations_used: int
    converged: bool
    direction: str | None = None
    marginal_violation: float = np.nan

    def __post_init__(self):
        if self.S is not None:
            self.S = np.asarray(self.S, dtype=np.float64)
            if np.any(self.S < 0):
                raise ValueError("transport plan entries must be nonnegative")


def cosine_cost(F_A: np.ndarray, F_B: np.ndarray, direction: str | None = None) -> CostMatrix:
    """C[i, j] = 1 - cos_sim(F_A[:, i], F_B[:, j]).

    Zero-norm feature columns take similarity 0 by convention, i.e. cost 1.
    """
    F_A = np.asarray(F_A, dtype=np.float64)
    F_B = np.asarray(F_B, dtype=np.float64)
    if F_A.ndim != 2 or F_B.ndim != 2 or F_A.shape[0] != F_B.shape[0]:
        raise ValueError(f"feature blocks must share a feature dimension, got {F_A.shape} and {F_B.shape}")
    na = np.linalg.norm(F_A, axis=0)
    nb = np.linalg.norm(F_B, axis=0)
    ua = np.where(na > 0, F_A / np.where(na > 0, na, 1.0), 0.0)
    ub = np.where(nb > 0, F_B / np.where(nb > 0, nb, 1.0), 0.0)
    sim = ua.T @ ub
    return CostMatrix(values=np.clip(1.0 - sim, 0.0, 2.0), direction=direction)


def _validate_marginals(Cv, a, b):
    ga, gb = Cv.shape
    a = np.full(ga, 1.0 / ga) if a is None else np.asarray(a, dtype=np.float64)
    b = np.full(gb, 1.0 / gb) if b is None else np.asarray(b, dtype=np.float64)
    if a.shape != (ga,) or b.shape != (gb,):
        raise ValueError("marginal shapes do not match the cost matrix")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("marginals must be nonnegative")
    if abs(a.sum() - b.sum()) > 1e-9 or abs(a.sum() - 1.0) > 1e-6:
        raise ValueError(f"marginal masses must both be 1, got {a.sum():.12f} and {b.sum():.12f}")
    return a, b


def sinkhorn(C, a=None, b=None, epsilon: float = DEFAULT_EPSILON,
             max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL,
             direction: str | None = None) -> TransportPlan:
    """Entropic transport solve by alternating marginal matching in log space.

    Parameters
    ----------
    C : CostMatrix or [G_A, G_B] array
    a, b : marginals summing to 1 (uniform when omitted)
    epsilon : entropic regularization strength (> 0)
    max_iter, tol : stop when the max marginal violation drops below tol,
        or at max_iter with ``converged=False``

    Returns
    -------
    TransportPlan with S = diag(u) exp(-C/eps) diag(v).
    """
    Cv = C.values if isinstance(C, CostMatrix) else np.asarray(C, dtype=np.float64)
    if direction is None and isinstance(C, CostMatrix):
        direction = C.direction
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    a, b = _validate_marginals(Cv, a, b)

    with np.errstate(divide="ignore"):
        log_a = np.log(a)
        log_b = np.log(b)
    f = np.zeros(Cv.shape[0])
    g = np.zeros(Cv.shape[1])
    converged = False
    viol = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        row_lse = logsumexp((g[None, :] - Cv) / epsilon, axis=1)
        if it > 1:
            # column marginals are exact after each g-update; row violation
            # with the current potentials decides convergence
            viol = float(np.max(np.abs(np.exp(f / epsilon + row_lse) - a)))
            if viol < tol:
                converged = True
                break
        f = epsilon * (log_a - row_lse)
        g = epsilon * (log_b - logsumexp((f[:, None] - Cv) / epsilon, axis=0))
        live_f = f[a > 0]
        live_g = g[b > 0]
        if not (np.all(np.isfinite(live_f)) and np.all(np.isfinite(live_g))):
            raise SinkhornNumericalError(
                f"sinkhorn iteration produced non-finite potentials at epsilon={epsilon}")

    with np.errstate(invalid="ignore"):
        S = np.exp((f[:, None] + g[None, :] - Cv) / epsilon)
    S = np.where(np.isfinite(S), S, 0.0)
    if not converged:
        viol = float(max(np.max(np.abs(S.sum(axis=1) - a)), np.max(np.abs(S.sum(axis=0) - b))))
    plan = TransportPlan(S=S, epsilon=epsilon, iterations_used=it,
                         converged=converged, direction=direction, marginal_violation=viol)
    if converged:
        _assert_marginals(plan, a, b, tol)
    return plan


def _assert_marginals(plan: TransportPlan, a, b, tol):
    rows = plan.S.sum(axis=1)
    cols = plan.S.sum(axis=0)
    worst = max(np.max(np.abs(rows - a)), np.max(np.abs(cols - b)))
    if worst > max(tol, 10 * np.finfo(np.float64).eps * len(a)):
        raise SinkhornNumericalError(
            f"converged plan violates its marginals by {worst:.3e} (tol {tol:.1e})")


def _sinkhorn_scaled(Cv, a, b, epsilon, max_iter, tol, dtype=np.float32):
    """Probability-domain kernel for moderate epsilon; returns scalings, not S."""
    K = np.exp(-(Cv / epsilon), dtype=dtype) if Cv.dtype == dtype else np.exp(-(Cv.astype(dtype) / dtype(epsilon)))
    a_ = a.astype(dtype)
    b_ = b.astype(dtype)
    u = np.ones(Cv.shape[0], dtype=dtype)
    v = np.ones(Cv.shape[1], dtype=dtype)
    converged = False
    viol = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        Kv = K @ v
        if it > 1:
            viol = float(np.max(np.abs(u * Kv - a_)))
            if viol < tol:
                converged = True
                break
        u = a_ / Kv
        v = b_ / (K.T @ u)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise SinkhornNumericalError(
            f"scaled sinkhorn kernel produced non-finite scalings at epsilon={epsilon}")
    return u, v, K, it, viol, converged


def solve_plan(C, a=None, b=None, epsilon: float = DEFAULT_EPSILON,
               max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL,
               direction: str | None = None, materialize: bool = True,
               solver: str = "log"):
    """Solve for a plan with a choice of kernel.

    ``solver='auto'`` takes the fast scaled kernel when max(C)/epsilon is
    small enough to be underflow-safe, otherwise the log-domain path.
    Returns (TransportPlan, mixer) where ``mixer(F_source)`` applies the
    un-gained transport mixture without needing the materialized plan.
    """
    Cv = C.values if isinstance(C, CostMatrix) else np.asarray(C, dtype=np.float64)
    if direction is None and isinstance(C, CostMatrix):
        direction = C.direction
    a, b = _validate_marginals(Cv, a, b)
    use_scaled = solver == "scaled" or (
        solver == "auto" and float(Cv.max()) / epsilon <= _SCALED_KERNEL_EXP_LIMIT)
    if solver not in ("log", "auto", "scaled"):
        raise ValueError(f"unknown solver {solver!r}")
    if not use_scaled:
        plan = sinkhorn(Cv, a, b, epsilon=epsilon, max_iter=max_iter, tol=tol, direction=direction)
        gs = Cv.shape[1]

        def mixer(F_source: np.ndarray) -> np.ndarray:
            return (F_source @ plan.S.T) * gs

        if not materialize:
            plan = replace(plan, S=None)
        return plan, mixer

    u, v, K, it, viol, converged = _sinkhorn_scaled(Cv, a, b, epsilon, max_iter, tol)
    gs = Cv.shape[1]

    def mixer(F_source: np.ndarray) -> np.ndarray:
        # F @ S.T with S = diag(u) K diag(v), computed by matvecs
        return (((F_source.astype(K.dtype) * v[None, :]) @ K.T) * u[None, :]).astype(np.float64) * gs

    S = (u[:, None] * K * v[None, :]).astype(np.float64) if materialize else None
    plan = TransportPlan(S=S, epsilon=epsilon, iterations_used=it, converged=converged,
                         direction=direction, marginal_violation=viol)
    if converged and S is not None:
        _assert_marginals(plan, a, b, max(tol, 1e-5))
    return plan, mixer


def apply_coupling(F_target: np.ndarray, F_source: np.ndarray, S, gain: float) -> np.ndarray:
    """Residual transport-weighted exchange.

    F_target' = F_target + gain * G_source * (F_source @ S.T): each target
    site receives the plan-weighted mixture of source features, scaled so a
    uniform plan delivers the plain source mean.  gain = 0 returns F_target
    exactly.
    """
    F_target = np.asarray(F_target, dtype=np.float64)
    F_source = np.asarray(F_source, dtype=np.float64)
    Sv = S.S if isinstance(S, TransportPlan) else np.asarray(S, dtype=np.float64)
    gt, gs = Sv.shape
    if F_target.shape[1] != gt or F_source.shape[1] != gs or F_target.shape[0] != F_source.shape[0]:
        raise ValueError(
            f"shape mismatch: plan {Sv.shape}, target {F_target.shape}, source {F_source.shape}")
    if gain == 0.0:
        return F_target.copy()
    return F_target + gain * gs * (F_source @ Sv.T)


def cross_attention_plan(F_target: np.ndarray, F_source: np.ndarray) -> np.ndarray:
    """Scaled-dot-product attention normalized to plan convention.

    Rows are softmax over source sites divided by G_target, so the matrix
    drops into the identical apply path as a transport plan (uniform
    attention then delivers the plain source mean).
    """
    F_target = np.asarray(F_target, dtype=np.float64)
    F_source = np.asarray(F_source, dtype=np.float64)
    d_f = F_target.shape[0]
    logits = (F_target.T @ F_source) / np.sqrt(d_f)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w / F_target.shape[1]


@dataclass
class DirectionParams:
    """Extraction, back-projection, and solve settings for one coupling direction."""

    w_target: np.ndarray   # [d_f, 3 * C_target]
    w_source: np.ndarray   # [d_f, 3 * C_source]
    w_back: np.ndarray     # [C_target, d_f]
    gain: float = 0.15
    epsilon: float = 0.5
    max_iter: int = 60
    tol: float = 1e-3


@dataclass
class OtbParams:
    """Parameters of one optimal-transport block (both directions)."""

    c_za: int
    c_zb: int
    d_f: int
    b_to_a: DirectionParams
    a_to_b: DirectionParams
    coupling_mode: str = "ot"          # "ot" | "cross_attention" | "none"
    marginal_a: np.ndarray | None = None
    marginal_b: np.ndarray | None = None
    solver: str = "auto"

    def __post_init__(self):
        if self.coupling_mode not in ("ot", "cross_attention", "none"):
            raise ValueError(f"unknown coupling mode {self.coupling_mode!r}")


def reference_otb_params(seed: int, c_za: int, c_zb: int, d_f: int = 4,
                         gain: float = 0.15, epsilon: float = 0.5,
                         coupling_mode: str = "ot", max_iter: int = 60,
                         tol: float = 1e-3) -> OtbParams:
    """Seeded fixed linear extractors; independent parameter sets per direction."""
    rng = np.random.default_rng(seed)

    def direction(c_tgt, c_src):
        return DirectionParams(
            w_target=rng.standard_normal((d_f, 3 * c_tgt)) / np.sqrt(3 * c_tgt),
            w_source=rng.standard_normal((d_f, 3 * c_src)) / np.sqrt(3 * c_src),
            w_back=rng.standard_normal((c_tgt, d_f)) / np.sqrt(d_f),
            gain=gain, epsilon=epsilon, max_iter=max_iter, tol=tol,
        )

    return OtbParams(c_za=c_za, c_zb=c_zb, d_f=d_f,
                     b_to_a=direction(c_za, c_zb), a_to_b=direction(c_zb, c_za),
                     coupling_mode=coupling_mode)


def _flatten(z: np.ndarray) -> np.ndarray:
    return np.asarray(z, dtype=np.float64).reshape(z.shape[0], -1)


def otb_block(noisy_a: np.ndarray, noisy_b: np.ndarray, cond, params: OtbParams,
              materialize_plans: bool = True):
    """One optimal-transport block pass.

    Extracts per-sphere features from the noisy latent stacked with the two
    conditioning latents, solves boundary-to-atmosphere and atmosphere-to-
    boundary plans with separate parameter sets, applies the transport-
    weighted exchange, and adds the back-projected increment through a
    residual.  Returns (a_out, b_out, plan_b_to_a, plan_a_to_b).
    """
    spatial = noisy_a.shape[1:]
    if noisy_a.shape[0] != params.c_za or noisy_b.shape[0] != params.c_zb:
        raise ValueError("latent channel counts do not match the block parameters")
    if cond is not None:
        cond_t = np.asarray(cond.z_t, dtype=np.float64)
        cond_tm1 = np.asarray(cond.z_tm1, dtype=np.float64)
        ca = params.c_za
        stack_a = np.concatenate([_flatten(noisy_a), _flatten(cond_t[:ca]), _flatten(cond_tm1[:ca])])
        stack_b = np.concatenate([_flatten(noisy_b), _flatten(cond_t[ca:]), _flatten(cond_tm1[ca:])])
    else:
        stack_a = np.concatenate([_flatten(noisy_a)] * 3)
        stack_b = np.concatenate([_flatten(noisy_b)] * 3)

    if params.coupling_mode == "none":
        return noisy_a.copy(), noisy_b.copy(), None, None

    def one_direction(p: DirectionParams, stack_tgt, stack_src, tgt_latent, a_marg, b_marg, tag):
        F_t = p.w_target @ stack_tgt
        F_s = p.w_source @ stack_src
        if params.coupling_mode == "ot":
            cost = cosine_cost(F_t, F_s, direction=tag)
            plan, mixer = solve_plan(cost, a_marg, b_marg, epsilon=p.epsilon,
                                     max_iter=p.max_iter, tol=p.tol, direction=tag,
                                     materialize=materialize_plans, solver=params.solver)
            mixed = F_t + p.gain * mixer(F_s)
        else:
            S = cross_attention_plan(F_t, F_s)
            plan = TransportPlan(S=S if materialize_plans else None, epsilon=np.nan,
                                 iterations_used=0, converged=True, direction=tag + ":attn",
                                 marginal_violation=np.nan)
            mixed = apply_coupling(F_t, F_s, S, p.gain)
        delta = (p.w_back @ (mixed - F_t)).reshape(tgt_latent.shape)
        return tgt_latent + delta, plan

    a_out, plan_ba = one_direction(params.b_to_a, stack_a, stack_b, noisy_a,
                                   params.marginal_a, params.marginal_b, "B->A")
    b_out, plan_ab = one_direction(params.a_to_b, stack_b, stack_a, noisy_b,
                                   params.marginal_b, params.marginal_a, "A->B")
    return a_out, b_out, plan_ba, plan_ab


def latent_grid_spec(grid: GridSpec) -> GridSpec:
    """Cell-center geometry of the 30 x 60 latent grid over a physical grid."""
    h, w = LATENT_SHAPE
    lat_step = (grid.n_lat - 1) * grid.lat_step_deg / h
    lon_step = grid.n_lon * grid.lon_step_deg / w
    return GridSpec(n_lat=h, n_lon=w,
                    lat_start_deg=grid.lat_start_deg + 0.5 * lat_step,
                    lat_step_deg=lat_step,
                    lon_start_deg=grid.lon_start_deg + 0.5 * (lon_step - grid.lon_step_deg),
                    lon_step_deg=lon_step)


def latitude_marginals(grid_latent: GridSpec) -> np.ndarray:
    """Latitude-weighted marginal over flattened latent cells, summing to 1."""
    w = latitude_weights(grid_latent)[:, None] * np.ones((1, grid_latent.n_lon))
    flat = w.ravel()
    return flat / flat.sum()


def wmid(S, grid_latent: GridSpec, region: RegionBox, percentile: float = 50.0) -> float:
    """Weighted mean influencing distance of boundary sources on a target region.

    Restricts the plan to target rows inside the region, sums them into a
    per-source-cell influence map, centers it, keeps cells at or above the
    given percentile of the centered values, and returns the influence-
    weighted mean great-circle distance (km) from kept cells to the nearest
    region cell (zero inside the region).  Invariant under positive rescaling
    of the plan.
    """
    Sv = S.S if isinstance(S, TransportPlan) else np.asarray(S, dtype=np.float64)
    mask = region_mask(grid_latent, region).ravel()
    if Sv.shape[0] != mask.size:
        raise ValueError(f"plan has {Sv.shape[0]} target rows; latent grid has {mask.size} cells")
    influence = Sv[mask].sum(axis=0)
    centered = influence - influence.mean()
    threshold = np.percentile(centered, percentile)
    keep = centered >= threshold

    lats = np.repeat(grid_latent.latitudes, grid_latent.n_lon)
    lons = np.tile(grid_latent.longitudes, grid_latent.n_lat)
    rlats, rlons = lats[mask], lons[mask]
    d = great_circle_km((lats[keep][:, None], lons[keep][:, None]),
                        (rlats[None, :], rlons[None, :]))
    nearest = np.asarray(d).min(axis=1)

    weights = influence[keep]
    total = weights.sum()
    if total <= 0.0:
        raise ValueError("all influence was filtered out by the percentile threshold")
    return float((weights * nearest).sum() / total)
