"""Confidence-controlled gradient attacks against binary detectors.

An attack succeeds only when the logit of the target class exceeds the logit
of the source class by more than ``c``. Four algorithms are provided:
iterated FGSM over an ascending strength grid, PGD with an outer search over
the neighbourhood radius, momentum iterated FGSM, and Carlini-Wagner L2 with
``kappa = c``.

Models only need a ``forward(Tensor[N,1,H,W]) -> Tensor[N,2]`` method.
Attacks run on blocks of patches that step in lockstep. Float32 logits of a
patch can move by a few ulps depending on which other patches share its
batch, so in-loop success is tested with a small rounding guard, and every
success is confirmed by a per-patch forward pass (batch of one) before it is
reported. The same per-patch pass is what :func:`verify_margins` exposes.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import imgops
from . import tensor as T

log = logging.getLogger(__name__)

ALGORITHMS = ("IFGSM", "PGD", "MIFGSM", "CW_L2")

# Patches attacked together. Fixed so results never depend on parallelism.
BLOCK = 50

_EPS32 = float(np.finfo(np.float32).eps)


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttackConfig:
    """Attack algorithm, confidence margin and per-algorithm parameters.

    PGD: ``epsilon`` is the initial L-inf neighbourhood radius and
    ``stepsize`` the initial per-step size; the outer search rescales both by
    the same factor. ``max_steps`` of ``None`` picks 10 for the FGSM family
    and 20 for PGD. The C&W defaults follow the usual toolkit defaults; the
    benchmark experiments override ``max_iterations`` and ``learning_rate``.
    """

    algorithm: str = "IFGSM"
    c: float = 0.0
    max_epsilon: float = 1.0
    epsilon_grid_size: int = 100
    max_steps: int | None = None
    mu: float = 0.2
    epsilon: float = 0.5
    stepsize: float = 0.05
    search_rounds: int = 6
    max_radius: float = 1.0
    learning_rate: float = 5e-3
    initial_const: float = 1e-2
    max_const: float = 1e2
    binary_search_steps: int = 9
    max_iterations: int = 1000
    abort_early: bool = True

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if not (self.c >= 0 and math.isfinite(self.c)):
            raise ValueError(f"confidence c must be finite and >= 0, got {self.c}")
        positive = ("max_epsilon", "epsilon", "stepsize", "max_radius", "learning_rate",
                    "initial_const", "max_const")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        counts = ("epsilon_grid_size", "search_rounds", "binary_search_steps", "max_iterations")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.mu < 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")

    @property
    def kappa(self) -> float:
        return self.c

    @property
    def steps(self) -> int:
        if self.max_steps is not None:
            return int(self.max_steps)
        return 20 if self.algorithm == "PGD" else 10

    @property
    def iteration_cap(self) -> int:
        return self.max_iterations if self.algorithm == "CW_L2" else self.steps

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        params = d.pop("params", {}) or {}
        d.update(params)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown attack parameters: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class AttackResult:
    success: bool
    adversarial: np.ndarray | None
    achieved_margin: float
    iterations_used: int
    epsilon_used: float
    psnr_to_original: float
    l2_distance: float
    linf_distance: float
    error: str | None = field(default=None)


def margin(logits, source_label: int) -> float:
    """z_{1-i} - z_i for source label i."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if z.shape != (2,):
        raise T.ShapeError(f"margin needs two logits, got shape {z.shape}")
    if source_label not in (0, 1):
        raise ValueError(f"source label must be 0 or 1, got {source_label}")
    return float(z[1 - source_label] - z[source_label])


def is_adversarial(logits, source_label: int, c: float) -> bool:
    return margin(logits, source_label) > c


def per_patch_logits(model, patches) -> np.ndarray:
    """Logits from an independent forward pass, one patch per batch."""
    x = np.asarray(patches, dtype=np.float32)
    out = np.empty((len(x), 2))
    for i in range(len(x)):
        out[i] = model.forward(T.Tensor(x[i][None, None])).data[0]
    return out


def verify_margins(model, patches, labels) -> np.ndarray:
    """Margins of :func:`per_patch_logits`."""
    z = per_patch_logits(model, patches)
    return np.array([margin(z[i], int(labels[i])) for i in range(len(z))])


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _signs(labels) -> np.ndarray:
    """Per-sample weights s with margin = s . z."""
    labels = np.asarray(labels)
    s = np.where(labels[:, None] == 1, [1.0, -1.0], [-1.0, 1.0])
    return s.astype(np.float32)


def _guard(z: np.ndarray) -> np.ndarray:
    """Rounding allowance on a batched margin; well below any useful c."""
    return 64 * _EPS32 * (1.0 + np.abs(z).sum(axis=1))


def _margin_grad(model, x: np.ndarray, signs: np.ndarray):
    with T.Tape() as tape:
        xt = T.Tensor(x[:, None])
        z = model.forward(xt)
        total = T.tsum(T.mul(z, signs))
    g = tape.gradient(total, xt).data[:, 0]
    zd = z.data.astype(np.float64)
    return (zd * signs).sum(axis=1), zd, g


def _l1_normalised(g: np.ndarray) -> np.ndarray:
    g = g.astype(np.float64)
    norm = np.abs(g).reshape(len(g), -1).sum(axis=1)
    norm = np.where(norm > 0, norm, 1.0)
    return g / norm.reshape((-1,) + (1,) * (g.ndim - 1))


def _bcast(v: np.ndarray, like: np.ndarray) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (like.ndim - 1))


@dataclass
class _Hit:
    x: np.ndarray
    iterations: int
    epsilon: float


def _finish(model, x0: np.ndarray, label: int, c: float, hit: _Hit | None, best_margin: float) -> AttackResult:
    """Confirm a candidate with a per-patch pass and compute distortion."""
    if hit is not None:
        m = float(verify_margins(model, hit.x[None], [label])[0])
        if m > c:
            diff = hit.x.astype(np.float64) - x0.astype(np.float64)
            return AttackResult(
                success=True,
                adversarial=hit.x.copy(),
                achieved_margin=m,
                iterations_used=int(hit.iterations),
                epsilon_used=float(hit.epsilon),
                psnr_to_original=imgops.psnr(x0, hit.x),
                l2_distance=float(np.sqrt((diff ** 2).sum())),
                linf_distance=float(np.abs(diff).max()) if diff.size else 0.0,
            )
        log.warning("candidate with batched margin above c=%g re-verified at %.9g; dropped", c, m)
        best_margin = min(best_margin, m)
    return AttackResult(False, None, float(best_margin), 0, math.nan, math.nan, math.nan, math.nan)


# ---------------------------------------------------------------------------
# I-FGSM / MI-FGSM over an ascending strength grid
# ---------------------------------------------------------------------------

def _grid_engine(model, x0: np.ndarray, labels, cfg: AttackConfig, cs, trace: list | None = None):
    """Run the grid attack once for several margins sharing one trajectory.

    For each c the first success in (grid index, step) order is kept; a
    larger c can only be hit later, so one pass serves the whole sweep.
    Returns ``hits[j][i]`` (or None) and the best in-loop margin per sample.
    """
    n = len(x0)
    cs = list(cs)
    momentum = cfg.algorithm == "MIFGSM"
    signs = _signs(labels)
    grid = cfg.epsilon_grid_size
    steps = cfg.steps
    eps_values = np.arange(1, grid + 1, dtype=np.float64) * cfg.max_epsilon / grid
    step_values = (eps_values / steps).astype(np.float32)

    hits: list[list[_Hit | None]] = [[None] * n for _ in cs]
    pending = np.ones((len(cs), n), dtype=bool)
    c_arr = np.asarray(cs, dtype=np.float64)[:, None]

    def record(idx, m, z, xs, it, eps):
        ok = pending[:, idx] & (m[None, :] - _guard(z)[None, :] > c_arr)
        for j, pos in zip(*np.nonzero(ok)):
            i = idx[pos]
            hits[j][i] = _Hit(xs[pos].copy(), it if np.isscalar(it) else int(it[pos]),
                              eps if np.isscalar(eps) else float(eps[pos]))
        pending[:, idx] &= ~ok

    m0, z0, g0 = _margin_grad(model, x0, signs)
    best = m0.copy()
    everyone = np.arange(n)
    record(everyone, m0, z0, x0, 0, 0.0)
    g0n = _l1_normalised(g0) if momentum else None

    x = x0.copy()
    mom = np.zeros(x0.shape, dtype=np.float64) if momentum else None
    k = np.zeros(n, dtype=np.int64)
    t = np.zeros(n, dtype=np.int64)

    def direction(idx, grad, fresh):
        if not momentum:
            return np.sign(grad)
        if fresh:
            mom[idx] = g0n[idx]
        else:
            mom[idx] = cfg.mu * mom[idx] + _l1_normalised(grad)
        return np.sign(mom[idx])

    def start_run(idx):
        d = direction(idx, g0[idx], fresh=True)
        s = _bcast(step_values[k[idx]], d)
        x[idx] = np.clip(x0[idx] + (s * d).astype(np.float32), 0.0, 1.0)
        t[idx] = 1

    active = pending.any(axis=0)
    start_run(np.flatnonzero(active))
    while active.any():
        idx = np.flatnonzero(active)
        if trace is not None:
            trace.append((idx.copy(), x[idx].copy()))
        m, z, g = _margin_grad(model, x[idx], signs[idx])
        best[idx] = np.maximum(best[idx], m)
        record(idx, m, z, x[idx], t[idx], eps_values[k[idx]])

        still = pending[:, idx].any(axis=0)
        active[idx[~still]] = False
        live = idx[still]
        g = g[still]
        ends = t[live] >= steps
        nxt = live[ends]
        k[nxt] += 1
        exhausted = nxt[k[nxt] >= grid]
        active[exhausted] = False
        restart = nxt[k[nxt] < grid]
        if len(restart):
            start_run(restart)
        cont = live[~ends]
        if len(cont):
            d = direction(cont, g[~ends], fresh=False)
            s = _bcast(step_values[k[cont]], d)
            x[cont] = np.clip(x[cont] + (s * d).astype(np.float32), 0.0, 1.0)
            t[cont] += 1
    return hits, best


# ---------------------------------------------------------------------------
# PGD with an outer radius search
# ---------------------------------------------------------------------------

def _pgd_engine(model, x0: np.ndarray, labels, cfg: AttackConfig, c: float):
    n = len(x0)
    signs = _signs(labels)
    steps = cfg.steps
    hits: list[_Hit | None] = [None] * n
    best_l2 = np.full(n, np.inf)

    m0, z0, g0 = _margin_grad(model, x0, signs)
    best = m0.copy()
    done = m0 - _guard(z0) > c
    for i in np.flatnonzero(done):
        hits[i] = _Hit(x0[i].copy(), 0, 0.0)

    alpha = np.full(n, cfg.epsilon, dtype=np.float64)
    step = np.full(n, cfg.stepsize, dtype=np.float64)
    rounds = np.zeros(n, dtype=np.int64)
    t = np.zeros(n, dtype=np.int64)
    x = x0.copy()
    lo = np.empty_like(x0)
    hi = np.empty_like(x0)

    def project(idx, y):
        return np.clip(np.clip(y, lo[idx], hi[idx]), 0.0, 1.0)

    def start_round(idx):
        a = _bcast(alpha[idx].astype(np.float32), x0[idx])
        lo[idx] = x0[idx] - a
        hi[idx] = x0[idx] + a
        s = _bcast(step[idx].astype(np.float32), x0[idx])
        x[idx] = project(idx, x0[idx] + s * np.sign(g0[idx]))
        t[idx] = 1

    active = ~done
    start_round(np.flatnonzero(active))
    while active.any():
        idx = np.flatnonzero(active)
        m, z, g = _margin_grad(model, x[idx], signs[idx])
        best[idx] = np.maximum(best[idx], m)
        ok = m - _guard(z) > c
        diff = (x[idx].astype(np.float64) - x0[idx]).reshape(len(idx), -1)
        l2 = np.sqrt((diff ** 2).sum(axis=1))
        for pos in np.flatnonzero(ok & (l2 < best_l2[idx])):
            i = idx[pos]
            best_l2[i] = l2[pos]
            hits[i] = _Hit(x[i].copy(), int(t[i]), float(alpha[i]))

        ends = ok | (t[idx] >= steps)
        fin = idx[ends]
        if len(fin):
            factor = np.where(ok[ends], 0.5, 2.0)
            new_alpha = np.minimum(alpha[fin] * factor, cfg.max_radius)
            step[fin] *= new_alpha / alpha[fin]
            alpha[fin] = new_alpha
            rounds[fin] += 1
            over = fin[rounds[fin] >= cfg.search_rounds]
            active[over] = False
            again = fin[rounds[fin] < cfg.search_rounds]
            if len(again):
                start_round(again)
        cont = idx[~ends]
        if len(cont):
            s = _bcast(step[cont].astype(np.float32), x0[cont])
            x[cont] = project(cont, x[cont] + s * np.sign(g[~ends]))
            t[cont] += 1
    return hits, best


# ---------------------------------------------------------------------------
# Carlini-Wagner L2
# ---------------------------------------------------------------------------

def _cw_engine(model, x0: np.ndarray, labels, cfg: AttackConfig, c: float):
    n = len(x0)
    signs = _signs(labels)
    hits: list[_Hit | None] = [None] * n
    best_l2 = np.full(n, np.inf)

    m0, z0, _ = _margin_grad(model, x0, signs)
    best = m0.copy()
    todo = ~(m0 - _guard(z0) > c)
    for i in np.flatnonzero(~todo):
        hits[i] = _Hit(x0[i].copy(), 0, 0.0)

    w0 = np.arctanh(np.clip(2.0 * x0.astype(np.float64) - 1.0, -1 + 1e-6, 1 - 1e-6)).astype(np.float32)
    lam = np.full(n, cfg.initial_const, dtype=np.float64)
    lam_lo = np.zeros(n)
    lam_hi = np.full(n, np.inf)
    check_every = max(1, cfg.max_iterations // 10)
    members = np.flatnonzero(todo)

    for _ in range(cfg.binary_search_steps):
        if not len(members):
            break
        w = w0[members].copy()
        adam_m = np.zeros_like(w)
        adam_v = np.zeros_like(w)
        live = np.ones(len(members), dtype=bool)
        succeeded = np.zeros(len(members), dtype=bool)
        prev = np.full(len(members), np.inf)
        lam_b = lam[members].astype(np.float32)
        for it in range(1, cfg.max_iterations + 1):
            li = np.flatnonzero(live)
            if not len(li):
                break
            gi = members[li]
            with T.Tape() as tape:
                wt = T.Tensor(w[li])
                xt = T.add(T.mul(T.tanh_map(wt), 0.5), 0.5)
                z = model.forward(T.reshape(xt, (len(li), 1) + x0.shape[1:]))
                mt = T.tsum(T.mul(z, signs[gi]), axis=1)
                d = T.sub(xt, x0[gi])
                l2sq = T.tsum(T.mul(d, d), axis=tuple(range(1, x0.ndim)))
                hinge = T.relu(T.sub(np.float32(c), mt))
                per = T.add(l2sq, T.mul(hinge, lam_b[li]))
                total = T.tsum(per)
            grad = tape.gradient(total, wt).data
            xs = xt.data
            zd = z.data.astype(np.float64)
            m = (zd * signs[gi]).sum(axis=1)
            best[gi] = np.maximum(best[gi], m)
            ok = m - _guard(zd) > c
            succeeded[li] |= ok
            l2 = np.sqrt(((xs.astype(np.float64) - x0[gi]) ** 2).reshape(len(li), -1).sum(axis=1))
            for pos in np.flatnonzero(ok & (l2 < best_l2[gi])):
                i = gi[pos]
                best_l2[i] = l2[pos]
                hits[i] = _Hit(xs[pos].copy(), it, float(lam[i]))

            state = T.AdamState(adam_m[li], adam_v[li], it - 1, cfg.learning_rate, 0.9, 0.999, 1e-8)
            w[li], state = T.adam_update(w[li], grad, state)
            adam_m[li], adam_v[li] = state.m, state.v

            if cfg.abort_early and it % check_every == 0:
                loss = per.data.astype(np.float64)
                stalled = loss > 0.9999 * prev[li]
                live[li[stalled]] = False
                prev[li] = loss

        # geometric growth until the first success, then bisection
        won = succeeded
        lam_hi[members[won]] = np.minimum(lam_hi[members[won]], lam[members[won]])
        lam_lo[members[~won]] = np.maximum(lam_lo[members[~won]], lam[members[~won]])
        bounded = np.isfinite(lam_hi[members])
        lam[members] = np.where(bounded, (lam_lo[members] + lam_hi[members]) / 2,
                                np.minimum(lam[members] * 10, cfg.max_const))
    return hits, best


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------

def _prepare(patches, labels):
    x = np.asarray(patches, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim < 2:
        raise T.ShapeError(f"patches must be [N,H,W] or [H,W], got shape {x.shape}")
    if len(x) != len(labels):
        raise T.ShapeError(f"{len(x)} patches but {len(labels)} labels")
    if len(labels) and not np.isin(labels, (0, 1)).all():
        raise ValueError("source labels must be 0 or 1")
    if x.size and (x.min() < 0 or x.max() > 1 or not np.isfinite(x).all()):
        raise ValueError("patch pixels must lie in [0, 1]")
    return x, labels


def _run_block(model, x0, labels, cfg: AttackConfig, cs) -> list[list[AttackResult]]:
    """Attack one block for every c in ``cs``; returns ``results[j][i]``."""
    if cfg.algorithm in ("IFGSM", "MIFGSM"):
        hits, best = _grid_engine(model, x0, labels, cfg, cs)
    else:
        engine = _pgd_engine if cfg.algorithm == "PGD" else _cw_engine
        hits, best = [], np.full(len(x0), -np.inf)
        for c in cs:
            h, b = engine(model, x0, labels, cfg, c)
            hits.append(h)
            best = np.maximum(best, b)
    return [[_finish(model, x0[i], int(labels[i]), c, hits[j][i], float(best[i]))
             for i in range(len(x0))] for j, c in enumerate(cs)]


def _safe_block(args):
    model, x0, labels, cfg, cs = args
    try:
        return _run_block(model, x0, labels, cfg, cs)
    except Exception:
        log.exception("block attack failed; retrying patch by patch")
    out = [[None] * len(x0) for _ in cs]
    for i in range(len(x0)):
        try:
            single = _run_block(model, x0[i:i + 1], labels[i:i + 1], cfg, cs)
            for j in range(len(cs)):
                out[j][i] = single[j][0]
        except Exception as exc:  # recorded, never raised
            for j in range(len(cs)):
                out[j][i] = AttackResult(False, None, math.nan, 0, math.nan, math.nan,
                                         math.nan, math.nan, error=f"{type(exc).__name__}: {exc}")
    return out


def attack_sweep(model, patches, labels, cfg: AttackConfig, cs, parallelism: int = 1) -> dict[float, list[AttackResult]]:
    """Attack every patch for each margin in ``cs``.

    Grid attacks share one trajectory across the sweep; PGD and C&W are run
    once per margin. ``cfg.c`` is ignored.
    """
    cs = [float(c) for c in cs]
    for c in cs:
        replace(cfg, c=c)  # validates
    x, labels = _prepare(patches, labels)
    if not cs:
        return {}
    jobs = [(model, x[i:i + BLOCK], labels[i:i + BLOCK], cfg, cs) for i in range(0, len(x), BLOCK)]
    if parallelism > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(parallelism, len(jobs))) as pool:
            blocks = list(pool.map(_safe_block, jobs))
    else:
        blocks = [_safe_block(job) for job in jobs]
    return {c: [r for block in blocks for r in block[j]] for j, c in enumerate(cs)}


def attack_batch(model, patches, labels, cfg: AttackConfig, parallelism: int = 1) -> list[AttackResult]:
    """Attack each patch independently with ``cfg``; order matches the input."""
    if parallelism < 1:
        raise ValueError(f"parallelism must be >= 1, got {parallelism}")
    if len(patches) == 0:
        return []
    return attack_sweep(model, patches, labels, cfg, [cfg.c], parallelism)[float(cfg.c)]


def _single(model, patch, source_label, cfg, algorithm):
    if cfg.algorithm != algorithm:
        cfg = replace(cfg, algorithm=algorithm)
    x = np.asarray(patch, dtype=np.float32)[None]
    x, labels = _prepare(x, [source_label])
    return _safe_block((model, x, labels, cfg, [float(cfg.c)]))[0][0]


def ifgsm(model, patch, source_label: int, cfg: AttackConfig) -> AttackResult:
    return _single(model, patch, source_label, cfg, "IFGSM")


def mifgsm(model, patch, source_label: int, cfg: AttackConfig) -> AttackResult:
    return _single(model, patch, source_label, cfg, "MIFGSM")


def pgd(model, patch, source_label: int, cfg: AttackConfig) -> AttackResult:
    return _single(model, patch, source_label, cfg, "PGD")


def cw_l2(model, patch, source_label: int, cfg: AttackConfig) -> AttackResult:
    return _single(model, patch, source_label, cfg, "CW_L2")


def grid_trace(model, patches, labels, cfg: AttackConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """Every iterate visited by a grid attack on one block, for inspection."""
    if cfg.algorithm not in ("IFGSM", "MIFGSM"):
        raise ValueError("grid_trace applies to IFGSM and MIFGSM only")
    x, labels = _prepare(patches, labels)
    trace: list = []
    _grid_engine(model, x, labels, cfg, [float(cfg.c)], trace=trace)
    return trace
