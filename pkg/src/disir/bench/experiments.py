"""Desk-scale experiments behind the command-line harness.

Every experiment is a pure function of its :class:`RunConfig`: randomness
comes from :func:`disir.core.rng_stream` keyed by ``(seed, namespace,
replicate)``, so results do not depend on the number of worker threads.
"""
from __future__ import annotations

import csv
import json
import math
import os
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import stats

from ..core import rng_stream
from ..estimators import (
    calibrate_beta,
    elbo_gradient_theta,
    fit_proposal,
    iwae_gradient_theta,
    iwae_phi_gradient,
    rmsprop_update,
    unbiased_gradient,
)
from ..coupling import run_coupled_chains
from ..kernels import BetaController, update_beta
from ..models import (
    BimodalToy1D,
    LinearGaussianProposal,
    PpcaModel,
    ppca_exact_marginal_grad,
    ppca_log_marginal,
    ppca_ml_solution,
    toy_trace,
)
from .config import RunConfig

__all__ = [
    "NumericalFailure",
    "ResultTable",
    "parallel_map",
    "setup_ppca",
    "coordinate_summary",
    "survival_tail_fit",
    "mean_repeat_length",
    "window_monotone",
    "cmd_bias_bench",
    "cmd_meeting_times",
    "cmd_toy_trace",
    "cmd_fit_ppca",
    "COMMANDS",
]

# stream namespaces
NS_SETUP, NS_PROPOSAL, NS_CALIBRATE = 1, 2, 3
NS_ESTIMATOR = {"elbo": 10, "iwae": 11, "c-isir": 12, "c-isir-disir": 13}
NS_MEETING = 20
NS_TOY = 30
NS_FIT = 40


class NumericalFailure(RuntimeError):
    """A run produced NaN or otherwise diverged."""


# ---------------------------------------------------------------------------
# result container


@dataclass
class ResultTable:
    """Raw rows plus a JSON-serialisable summary.

    Raw rows come from ``rows`` followed by ``blocks``; a block
    ``(label, coords, values)`` expands to rows ``(label, coords[j], r,
    values[r, j])`` and keeps large benchmarks out of Python lists.
    """

    name: str
    columns: tuple
    rows: list = field(default_factory=list)
    blocks: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def iter_rows(self) -> Iterator[tuple]:
        yield from self.rows
        for label, coords, values in self.blocks:
            for j, c in enumerate(coords):
                col = values[:, j]
                for r in range(col.shape[0]):
                    yield (label, c, r, float(col[r]))

    @property
    def n_rows(self) -> int:
        return len(self.rows) + sum(v.shape[0] * len(c) for _, c, v in self.blocks)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            for k, v in self.meta.items():
                fh.write(f"# {k}={v}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for row in self.iter_rows():
                w.writerow([_fmt(v) for v in row])

    def write_json(self, path: str) -> None:
        doc = {"meta": self.meta, "summary": _jsonable(self.summary)}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True, allow_nan=False)
            fh.write("\n")

    def write(self, out_dir: str) -> tuple[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, f"{self.name}.csv")
        json_path = os.path.join(out_dir, f"{self.name}.json")
        self.write_csv(csv_path)
        self.write_json(json_path)
        return csv_path, json_path


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def git_revision() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(
            ["git", "-C", here, "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5, check=True,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _meta(cfg: RunConfig) -> dict:
    return {
        "experiment": cfg.experiment,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "git_revision": git_revision(),
    }


# ---------------------------------------------------------------------------
# parallel helpers


def _n_threads(cfg: RunConfig) -> int:
    return cfg.threads or os.cpu_count() or 1


def parallel_map(fn: Callable[[int], object], n: int, threads: int) -> list:
    """``[fn(0), ..., fn(n-1)]`` evaluated on a thread pool, in index order."""
    if threads <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    chunk = max(1, n // (4 * threads))
    starts = range(0, n, chunk)

    def run(s):
        return [fn(i) for i in range(s, min(s + chunk, n))]

    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(run, starts))
    return [v for part in parts for v in part]


# ---------------------------------------------------------------------------
# shared set-up


def setup_ppca(cfg: RunConfig):
    """Random PPCA instance, its observed batch and the proposal named in the config."""
    m_cfg, p_cfg = cfg.model, cfg.proposal
    rng = rng_stream(cfg.seed, 0, NS_SETUP)
    model = PpcaModel.random(m_cfg.Dz, m_cfg.Dx, rng)
    X = model.sample(m_cfg.N, rng)
    if p_cfg.kind == "matched":
        proposal = LinearGaussianProposal.matched(model).spec()
    else:
        proposal = LinearGaussianProposal.standard(m_cfg.Dz, m_cfg.Dx).spec()
        if p_cfg.kind == "fitted" and p_cfg.steps > 0:
            train = model.sample(p_cfg.n_train, rng_stream(cfg.seed, 1, NS_SETUP))
            proposal, _ = fit_proposal(
                model.spec(), proposal, train, p_cfg.K, p_cfg.steps,
                rng_stream(cfg.seed, 0, NS_PROPOSAL), lr=p_cfg.lr, batch_size=p_cfg.batch_size,
            )
    return model, X, proposal


def _calibrated_betas(cfg, model_spec, proposal, X, K):
    e = cfg.estimator
    ctrl = BetaController(beta=e.beta_init)
    return np.array([
        calibrate_beta(model_spec, proposal, x, K, rng_stream(cfg.seed, 1000 * K + i, NS_CALIBRATE),
                       e.calibrate_steps, ctrl)
        for i, x in enumerate(X)
    ])


# ---------------------------------------------------------------------------
# statistics


def coordinate_summary(errors: np.ndarray) -> dict:
    """Per-coordinate mean, variance, z-score and boxplot statistics of ``(R, P)`` errors."""
    R = errors.shape[0]
    mean = errors.mean(axis=0)
    var = errors.var(axis=0, ddof=1) if R > 1 else np.full(errors.shape[1], np.nan)
    se = np.sqrt(var / R)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, mean / se, np.nan)
    q1, med, q3 = np.percentile(errors, [25, 50, 75], axis=0)
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    w_lo = np.array([errors[(errors[:, j] >= lo_fence[j]), j].min() for j in range(errors.shape[1])])
    w_hi = np.array([errors[(errors[:, j] <= hi_fence[j]), j].max() for j in range(errors.shape[1])])
    return {
        "mean_error": mean, "variance": var, "std_error": se, "z": z,
        "q1": q1, "median": med, "q3": q3, "whisker_lo": w_lo, "whisker_hi": w_hi,
    }


def survival_tail_fit(taus: np.ndarray, quantile: float = 0.9) -> dict:
    """Least-squares fit of ``log S(t)`` against ``t`` above the given quantile.

    Returns the slope, intercept and ``r2``; ``r2`` near 1 means a
    geometric (log-linear) tail.
    """
    taus = np.sort(np.asarray(taus, dtype=float))
    n = taus.size
    if n < 10:
        return {"start": None, "slope": None, "intercept": None, "r2": None, "points": 0}
    start = float(np.quantile(taus, quantile))
    grid = np.unique(taus[taus >= start])
    surv = 1.0 - np.searchsorted(taus, grid, side="left") / n
    keep = surv > 0
    t, s = grid[keep], np.log(surv[keep])
    if t.size < 3:
        return {"start": start, "slope": None, "intercept": None, "r2": None, "points": int(t.size)}
    fit = stats.linregress(t, s)
    return {
        "start": start, "slope": float(fit.slope), "intercept": float(fit.intercept),
        "r2": float(fit.rvalue**2), "points": int(t.size),
    }


def mean_repeat_length(values: Sequence[float]) -> float:
    """Mean length of runs of identical consecutive values."""
    v = np.asarray(values)
    if v.size == 0:
        return float("nan")
    breaks = np.flatnonzero(v[1:] != v[:-1])
    return v.size / (breaks.size + 1)


def window_monotone(curve: Sequence[float], window: int = 10) -> bool:
    """Whether means over consecutive non-overlapping windows never decrease."""
    c = np.asarray(curve, dtype=float)
    n = c.size // window
    if n < 2:
        return True
    means = c[: n * window].reshape(n, window).mean(axis=1)
    return bool(np.all(np.diff(means) >= 0))


# ---------------------------------------------------------------------------
# bias / variance benchmark


def _replicate_fn(name, cfg, ms, ps, X, betas) -> Callable[[int], tuple]:
    e = cfg.estimator
    ns = NS_ESTIMATOR[name]
    if name in ("elbo", "iwae"):
        K = 1 if name == "elbo" else e.K

        def draw(r):
            rng = rng_stream(cfg.seed, r, ns)
            g = np.zeros(ms.theta.size)
            for x in X:
                g += elbo_gradient_theta(ms, ps, x, rng) if K == 1 else iwae_gradient_theta(ms, ps, x, K, rng)
            return g, 0, False, 0, np.nan

        return draw
    exploit = name == "c-isir-disir"
    ecfg = e.to_estimator(cfg.seed, exploit=exploit, capped_policy="accept")

    def draw(r):
        est = unbiased_gradient(ms, ps, X, ecfg, rng_stream(cfg.seed, r, ns), betas if exploit else None)
        return est.value, est.tau, est.capped, est.work, est.max_log_weight

    return draw


def cmd_bias_bench(cfg: RunConfig) -> ResultTable:
    """Signed gradient errors of ELBO, IWAE, C-ISIR and C-ISIR-DISIR against the exact gradient."""
    model, X, ps = setup_ppca(cfg)
    ms = model.spec()
    exact = ppca_exact_marginal_grad(model, X)
    P = exact.size
    betas = None
    if "c-isir-disir" in cfg.bench.estimators:
        betas = _calibrated_betas(cfg, ms, ps, X, cfg.estimator.K)
    coords = list(range(P)) if cfg.bench.raw_coordinates is None else list(cfg.bench.raw_coordinates)
    if any(c >= P for c in coords):
        raise ValueError(f"raw coordinate out of range (theta has {P} entries)")
    labels = model.layout.labels()
    table = ResultTable("bias-bench", ("estimator", "coordinate", "replicate", "value"), meta=_meta(cfg))
    per_est = {}
    variances = {}
    threads = _n_threads(cfg)
    for name in cfg.bench.estimators:
        results = parallel_map(_replicate_fn(name, cfg, ms, ps, X, betas), cfg.replicates, threads)
        G = np.array([r[0] for r in results])
        taus = np.array([r[1] for r in results], dtype=np.int64)
        capped = np.array([r[2] for r in results], dtype=bool)
        work = np.array([r[3] for r in results], dtype=np.int64)
        max_lw = np.array([r[4] for r in results])
        errors = G - exact
        table.blocks.append((name, coords, errors[:, coords]))
        cs = coordinate_summary(errors)
        variances[name] = cs["variance"]
        absz = np.abs(cs["z"])
        s = {
            "coordinates": cs,
            "max_abs_z": float(np.nanmax(absz)) if np.any(np.isfinite(absz)) else None,
            "fraction_abs_z_le_4": float(np.mean(absz <= 4)),
            "count_abs_z_gt_5": int(np.sum(absz > 5)),
            "mean_variance": float(np.mean(cs["variance"])),
        }
        if name.startswith("c-"):
            met = taus[~capped]
            s.update({
                "capped_count": int(capped.sum()),
                "capped_fraction": float(capped.mean()),
                "capped_replicates": np.flatnonzero(capped),
                "tau_max_mean": float(met.mean()) if met.size else None,
                "work_mean": float(work.mean()),
                "max_log_weight": float(max_lw.max()),
            })
        per_est[name] = s
    summary = {"estimators": per_est, "exact_gradient": exact, "labels": labels, "raw_coordinates": coords}
    if betas is not None:
        summary["betas"] = betas
    if "c-isir" in variances and "c-isir-disir" in variances:
        summary["variance_ordering_fraction"] = float(
            np.mean(variances["c-isir-disir"] <= variances["c-isir"])
        )
    table.summary = summary
    return table


# ---------------------------------------------------------------------------
# meeting times


def cmd_meeting_times(cfg: RunConfig) -> ResultTable:
    """Meeting times of C-ISIR and C-ISIR-DISIR for each K; replicate ``r`` uses datapoint ``r mod N``."""
    model, X, ps = setup_ppca(cfg)
    ms = model.spec()
    e = cfg.estimator
    threads = _n_threads(cfg)
    table = ResultTable(
        "meeting-times", ("estimator", "K", "replicate", "tau", "capped", "work"), meta=_meta(cfg)
    )
    summary = {}
    for ki, K in enumerate(cfg.meeting.Ks):
        betas = _calibrated_betas(cfg, ms, ps, X, K)
        summary_k = {"betas": betas}
        for ei, name in enumerate(("c-isir", "c-isir-disir")):
            exploit = name == "c-isir-disir"
            ns = NS_MEETING + 10 * ki + ei

            def draw(r, exploit=exploit, ns=ns):
                n = r % X.shape[0]
                c = e.to_estimator(cfg.seed, exploit=exploit, K=K, beta_init=float(betas[n]))
                tr = run_coupled_chains(ms, ps, X[n], c, rng_stream(cfg.seed, r, ns))
                return tr.tau, tr.capped, tr.work

            res = parallel_map(draw, cfg.replicates, threads)
            taus = np.array([r[0] for r in res], dtype=np.int64)
            capped = np.array([r[1] for r in res], dtype=bool)
            for r, (tau, cap, work) in enumerate(res):
                table.rows.append((name, K, r, int(tau), bool(cap), int(work)))
            summary_k[name] = _tau_summary(taus, capped, e.max_iterations, cfg.meeting.bins)
        summary[str(K)] = summary_k
    table.summary = {"by_K": summary}
    return table


def _tau_summary(taus, capped, cap, bins) -> dict:
    met = taus[~capped]
    # capped runs are counted at the cap for the censored mean
    censored = np.where(capped, cap, taus).astype(float)
    out = {
        "replicates": int(taus.size),
        "capped_count": int(capped.sum()),
        "capped_fraction": float(capped.mean()),
        "mean": float(censored.mean()),
        "std_error": float(censored.std(ddof=1) / math.sqrt(taus.size)) if taus.size > 1 else None,
        "mean_met": float(met.mean()) if met.size else None,
    }
    if met.size:
        qs = [0.5, 0.9, 0.95, 0.99, 0.999]
        out["quantiles"] = {str(q): float(np.quantile(met, q)) for q in qs}
        counts, edges = np.histogram(met, bins=bins)
        out["histogram"] = {"counts": counts, "edges": edges}
        out["tail_fit"] = survival_tail_fit(met)
    return out


# ---------------------------------------------------------------------------
# toy traces


def cmd_toy_trace(cfg: RunConfig) -> ResultTable:
    """Selected-sample traces on the bimodal toy target, one block per kernel."""
    t = BimodalToy1D()
    tc = cfg.toy
    table = ResultTable("toy-trace", ("kernel", "t", "z", "beta", "ess"), meta=_meta(cfg))

    def run(i):
        return toy_trace(t, tc.kernels[i], tc.steps, rng_stream(cfg.seed, i, NS_TOY), tc.K, tc.beta_init)

    traces = parallel_map(run, len(tc.kernels), _n_threads(cfg))
    summary = {}
    for kernel, rows in zip(tc.kernels, traces):
        table.rows.extend((kernel, *row) for row in rows)
        z = np.array([r[1] for r in rows])
        if z.size:
            ks = stats.kstest(z, t.cdf)
            summary[kernel] = {
                "steps": int(z.size),
                "ks_distance": float(ks.statistic),
                "mean_repeat_length": mean_repeat_length(z),
                "move_rate": float(np.mean(z[1:] != z[:-1])) if z.size > 1 else None,
            }
        else:
            summary[kernel] = {"steps": 0, "ks_distance": None, "mean_repeat_length": None, "move_rate": None}
    table.summary = summary
    return table


# ---------------------------------------------------------------------------
# maximum-likelihood fitting


def cmd_fit_ppca(cfg: RunConfig) -> ResultTable:
    """Fit PPCA by RMSProp on unbiased gradients while tracking the proposal by IWAE.

    The exact log-likelihood is logged after every epoch (epoch 0 is the
    initialisation) and compared with the closed-form ML solution.
    """
    f, e = cfg.fit, cfg.estimator
    rng = rng_stream(cfg.seed, 0, NS_FIT)
    truth = PpcaModel.random(f.Dz, f.Dx, rng)
    truth = PpcaModel(rng.standard_normal(f.Dx), truth.theta1)
    X = truth.sample(f.N, rng)
    model = PpcaModel.random(f.Dz, f.Dx, rng_stream(cfg.seed, 1, NS_FIT))
    theta = model.theta.copy()
    proposal = LinearGaussianProposal.standard(f.Dz, f.Dx).spec()
    phi = proposal.phi.copy()
    s_theta, s_phi = np.zeros_like(theta), np.zeros_like(phi)
    ml_ll = ppca_log_marginal(ppca_ml_solution(X, f.Dz), X)
    ecfg = e.to_estimator(cfg.seed, exploit=True, capped_policy="accept")
    betas = np.full(f.N, e.beta_init)
    order_rng = rng_stream(cfg.seed, 2, NS_FIT)

    def loglik(th):
        return ppca_log_marginal(PpcaModel.from_theta(th, f.Dz, f.Dx), X)

    table = ResultTable(
        "fit-ppca", ("epoch", "log_likelihood", "beta_mean", "tau_mean", "capped"), meta=_meta(cfg)
    )
    curve = [loglik(theta)]
    table.rows.append((0, curve[0], float(betas.mean()), float("nan"), 0))
    step = 0
    total_capped = 0
    for epoch in range(1, f.epochs + 1):
        lr = f.lr / (1.0 + f.lr_decay * (epoch - 1))
        perm = order_rng.permutation(f.N)
        taus, capped = [], 0
        for start in range(0, f.N, f.batch_size):
            idx = perm[start : start + f.batch_size]
            ms = PpcaModel.from_theta(theta, f.Dz, f.Dx).spec()
            for j in range(f.phi_steps):
                prng = rng_stream(cfg.seed, step * max(f.phi_steps, 1) + j, NS_FIT + 1)
                cur = proposal.with_phi(phi)
                g = np.zeros_like(phi)
                for i in idx:
                    g += iwae_phi_gradient(ms, cur, X[i], e.K, prng)
                phi, s_phi = rmsprop_update(phi, g / idx.size, s_phi, f.phi_lr)
            ps = proposal.with_phi(phi)
            est = unbiased_gradient(ms, ps, X[idx], ecfg, rng_stream(cfg.seed, step, NS_FIT + 2), betas[idx])
            theta, s_theta = rmsprop_update(theta, est.value / idx.size, s_theta, lr)
            for n, i in enumerate(idx):
                if math.isfinite(est.mean_ess[n]):
                    betas[i] = update_beta(
                        BetaController(beta=float(betas[i])), est.mean_ess[n], e.K
                    ).beta
            taus.extend(int(t) for t in est.taus if t >= 0)
            capped += int(np.sum(est.taus < 0))
            step += 1
        ll = loglik(theta)
        if not (math.isfinite(ll) and np.all(np.isfinite(theta)) and np.all(np.isfinite(phi))):
            raise NumericalFailure(f"fit diverged at epoch {epoch}: log-likelihood {ll}")
        curve.append(ll)
        total_capped += capped
        table.rows.append((epoch, ll, float(betas.mean()), float(np.mean(taus)) if taus else float("nan"), capped))
    final = curve[-1]
    table.summary = {
        "initial_log_likelihood": curve[0],
        "final_log_likelihood": final,
        "ml_log_likelihood": ml_ll,
        "relative_gap": (ml_ll - final) / abs(ml_ll),
        "window_monotone_10": window_monotone(curve[1:], 10),
        "capped_total": total_capped,
        "epochs": f.epochs,
    }
    return table


COMMANDS = {
    "bias-bench": cmd_bias_bench,
    "meeting-times": cmd_meeting_times,
    "toy-trace": cmd_toy_trace,
    "fit-ppca": cmd_fit_ppca,
}
