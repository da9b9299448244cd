"""Cross-validation, grid sweeps, method comparisons and report files.

Reports are JSON Lines (one record per line, keys sorted) plus CSV tables;
both are byte-for-byte reproducible for a fixed seed unless wall-clock
timings are requested.
"""

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import bayesian_bootstrap, standardize_split, stratified_folds
from .kernel import Hyperparams
from .models import INFERENCE_ERRORS, THETA_SOURCE, Settings, fit, select_hyperparams
from .predict import training_probabilities

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-300


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


@dataclass
class Report:
    """Accumulates JSONL records and CSV tables for one command."""

    records: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    partial: bool = False
    timings: bool = False

    def add(self, kind, **fields):
        rec = {"record": kind}
        rec.update(fields)
        self.records.append(_clean(rec))
        return rec

    def table(self, name, header):
        self.tables[name] = {"header": header, "rows": []}
        return self.tables[name]["rows"]

    def jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, out_dir, stem="report"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.jsonl").write_text(self.jsonl())
        for name, tab in self.tables.items():
            with open(out / f"{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(tab["header"])
                for row in tab["rows"]:
                    w.writerow([_fmt(v) for v in row])
        return out


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if not np.isfinite(v) else repr(float(v))
    if isinstance(v, (np.bool_, bool)):
        return int(v)
    return v


class _Clock:
    def __init__(self, enabled):
        self.enabled = enabled
        self.t0 = time.perf_counter()

    def lap(self):
        if not self.enabled:
            return {}
        t = time.perf_counter()
        out, self.t0 = {"seconds": round(t - self.t0, 6)}, t
        return out


def log_predictive(probs, y):
    """Per-point ``log p(y_i)`` from a probability matrix."""
    p = probs[np.arange(len(y)), y]
    return np.log(np.maximum(p, LOG_FLOOR))


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

def _needed_sources(methods):
    return sorted({THETA_SOURCE[m] for m in methods if THETA_SOURCE[m] is not None})


def cv_run(raw, n_folds, methods, seed=0, settings=None, theta=None, reference="ep", timings=False):
    """Stratified cross-validation of several methods.

    Parameters
    ----------
    raw : LabeledDataset
        Unstandardised data; each fold is standardised with its own
        training statistics.
    methods : list of str
        Method names; the uniform baseline is always added.
    theta : Hyperparams, optional
        Fixed hyperparameters; otherwise type-II MAP per fold and method.
    """
    settings = settings or Settings(seed=seed)
    methods = list(dict.fromkeys(list(methods) + ["uniform"]))
    folds = stratified_folds(raw.y, n_folds, seed)
    rep = Report(timings=timings)
    rep.add("run", command="cv", folds=n_folds, seed=seed, methods=methods, n=raw.n, d=raw.d,
            classes=raw.classes, fold_sizes=np.bincount(folds, minlength=n_folds))
    points = rep.table("cv_points", ["row", "fold", "label", "method", "log_pred", "correct", "flagged"]
                       + [f"p_{c}" for c in raw.classes])
    trace_rows = rep.table("traces", ["fold", "method", "sweep", "log_z", "max_delta", "skipped",
                                      "inner_sweeps", "damping"])
    lpd = {m: np.full(raw.n, np.nan) for m in methods}
    correct = {m: np.full(raw.n, np.nan) for m in methods}
    clock = _Clock(timings)

    for k in range(n_folds):
        tr_idx, te_idx = np.flatnonzero(folds != k), np.flatnonzero(folds == k)
        train, test, _ = standardize_split(raw.subset(tr_idx), raw.subset(te_idx))
        thetas = {}
        for src in _needed_sources(methods):
            if theta is not None:
                thetas[src] = theta
                continue
            try:
                thetas[src], htrace = select_hyperparams(src, train, settings)
                rep.add("hyperopt", fold=k, source=src, theta=thetas[src].to_vector(),
                        evaluations=len(htrace), **clock.lap())
            except (RuntimeError,) + INFERENCE_ERRORS as exc:
                thetas[src] = None
                rep.add("hyperopt", fold=k, source=src, error=str(exc))
        for m in methods:
            src = THETA_SOURCE[m]
            th = thetas.get(src) if src else None
            if src is not None and th is None:
                rep.partial = True
                rep.add("fold", fold=k, method=m, error="hyperparameter selection failed")
                continue
            try:
                model = fit(m, train, th, settings)
                probs, flagged = model.predict(test.X)
            except INFERENCE_ERRORS + (ValueError,) as exc:
                rep.partial = True
                rep.add("fold", fold=k, method=m, error=str(exc))
                continue
            lp = log_predictive(probs, test.y)
            hit = (probs.argmax(1) == test.y).astype(float)
            lpd[m][te_idx], correct[m][te_idx] = lp, hit
            if np.any(flagged) or not model.converged:
                rep.partial = True
            rep.add("fold", fold=k, method=m, n_test=te_idx.size, mlpd=lp.mean(), accuracy=hit.mean(),
                    flagged=int(np.sum(flagged)), **model.summary(), **clock.lap())
            for j, i in enumerate(te_idx):
                points.append([int(i), k, raw.classes[test.y[j]], m, lp[j], int(hit[j]), int(flagged[j])]
                              + list(probs[j]))
            for r in model.trace_rows():
                trace_rows.append([k, m] + [r[c] for c in ("sweep", "log_z", "max_delta", "skipped",
                                                           "inner_sweeps", "damping")])

    summary = rep.table("cv_summary", ["method", "n_points", "mlpd", "mlpd_lo", "mlpd_hi",
                                       "accuracy", "acc_lo", "acc_hi"])
    for j, m in enumerate(methods):
        ok = np.isfinite(lpd[m])
        if not np.any(ok):
            rep.add("summary", method=m, n_points=0, error="no successful folds")
            continue
        mlpd = bayesian_bootstrap(lpd[m][ok], seed=[seed, j, 0])
        acc = bayesian_bootstrap(correct[m][ok], seed=[seed, j, 1])
        rep.add("summary", method=m, n_points=int(ok.sum()), mlpd=mlpd[0], mlpd_interval=mlpd[1:],
                accuracy=acc[0], accuracy_interval=acc[1:], partial=bool(ok.sum() < raw.n))
        summary.append([m, int(ok.sum()), *mlpd, *acc])

    ref = reference if reference in methods else methods[0]
    diffs = rep.table("cv_differences", ["method", "reference", "n_points", "mean", "lo", "hi"])
    for j, m in enumerate(methods):
        if m == ref:
            continue
        ok = np.isfinite(lpd[m]) & np.isfinite(lpd[ref])
        if not np.any(ok):
            continue
        d = bayesian_bootstrap(lpd[m][ok] - lpd[ref][ok], seed=[seed, j, 2])
        rep.add("difference", method=m, reference=ref, n_points=int(ok.sum()), mean=d[0], interval=d[1:])
        diffs.append([m, ref, int(ok.sum()), *d])
    rep.add("status", partial=rep.partial)
    return rep


# ---------------------------------------------------------------------------
# Grid sweeps
# ---------------------------------------------------------------------------

def parse_grid(spec):
    """``"lmin:lmax:steps,smin:smax:steps"`` -> (log_l values, log_sigma2 values)."""
    try:
        parts = [p.split(":") for p in spec.split(",")]
        if len(parts) != 2 or any(len(p) != 3 for p in parts):
            raise ValueError
        axes = [np.linspace(float(a), float(b), int(n)) for a, b, n in parts]
    except ValueError:
        raise ValueError(f"bad grid specification {spec!r}; expected 'lmin:lmax:steps,smin:smax:steps'")
    if any(ax.size < 1 for ax in axes):
        raise ValueError("grid axes need at least one step")
    return axes[0], axes[1]


def snake_path(n_rows, n_cols):
    """Boustrophedon order over a grid so neighbours are visited consecutively."""
    path = []
    for i in range(n_rows):
        cols = range(n_cols) if i % 2 == 0 else range(n_cols - 1, -1, -1)
        path.extend((i, j) for j in cols)
    return path


def evaluate_node(method, train, test, theta, settings, init=None):
    """Fit at ``theta`` and score on ``test``: (log evidence, mlpd, accuracy, model, flagged)."""
    model = fit(method, train, theta, settings, init)
    probs, flagged = model.predict(test.X)
    lp = log_predictive(probs, test.y)
    acc = float(np.mean(probs.argmax(1) == test.y))
    return model.log_evidence, float(lp.mean()), acc, model, bool(np.any(flagged)) or not model.converged


def grid_sweep(train, test, log_ls, log_s2s, methods, settings=None, warm_start=True, timings=False):
    """Evidence, test MLPD and accuracy over a (log l, log sigma^2) grid.

    Each method walks the grid along a snake path, warm-starting from the
    previous node when ``warm_start`` is set.
    """
    settings = settings or Settings()
    rep = Report(timings=timings)
    rep.add("run", command="grid", methods=list(methods), log_lengthscale=log_ls, log_magnitude=log_s2s,
            n_train=train.n, n_test=test.n, warm_start=warm_start)
    rows = rep.table("grid", ["method", "log_lengthscale", "log_magnitude", "log_evidence",
                              "mlpd", "accuracy", "converged", "flagged"])
    clock = _Clock(timings)
    for m in methods:
        prev = None
        results = {}
        for i, j in snake_path(len(log_ls), len(log_s2s)):
            theta = Hyperparams(log_s2s[j], [log_ls[i]])
            try:
                ev, mlpd, acc, model, flag = evaluate_node(m, train, test, theta, settings,
                                                           prev if warm_start else None)
                prev = model if m != "gibbs" else None
                conv = model.converged
            except INFERENCE_ERRORS + (ValueError,) as exc:
                logger.warning("grid node failed (%s, %s): %s", m, theta.to_vector(), exc)
                ev = mlpd = acc = np.nan
                conv, flag, prev = False, True, None
            rep.partial |= flag
            results[i, j] = [m, log_ls[i], log_s2s[j], np.nan if ev is None else ev, mlpd, acc, int(conv), int(flag)]
            rep.add("node", method=m, log_lengthscale=log_ls[i], log_magnitude=log_s2s[j],
                    log_evidence=ev, mlpd=mlpd, accuracy=acc, converged=conv, flagged=flag, **clock.lap())
        rows.extend(results[i, j] for i in range(len(log_ls)) for j in range(len(log_s2s)))
    rep.add("status", partial=rep.partial)
    return rep


def grid_argmax(rows, column):
    """``(i, j)`` grid coordinates of the best finite value of ``column``.

    ``rows`` are rows of the ``grid`` table for a single method, with
    lengthscale index ``i`` and magnitude index ``j``.
    """
    vals = np.array([r[column] for r in rows], dtype=float)
    if not np.any(np.isfinite(vals)):
        return None
    best = rows[int(np.nanargmax(vals))]
    ls = sorted({r[1] for r in rows})
    s2 = sorted({r[2] for r in rows})
    return ls.index(best[1]), s2.index(best[2])


# ---------------------------------------------------------------------------
# Fixed-hyperparameter comparison against the Gibbs oracle
# ---------------------------------------------------------------------------

def latent_moments(model):
    """Posterior latent means and marginal variances at the training inputs."""
    if model.method in ("ep", "iep"):
        st = model.state.state
        return st.mean, np.diagonal(st.cov, axis1=1, axis2=2)
    if model.method in ("la", "la-tkp"):
        return model.state.mode, np.diagonal(model.state.post.cov, axis1=1, axis2=2)
    if model.method == "gibbs":
        return model.state.mean, np.diagonal(model.state.cov, axis1=1, axis2=2)
    return None, None


def train_probabilities(model):
    """Predictive probabilities at the training inputs."""
    if model.method in ("ep", "iep"):
        return training_probabilities(model.state.state, model.settings.seed).probs
    if model.method == "gibbs":
        return model.state.train_probs
    return model.predict(model.data.X)[0]


def compare_run(data, theta, methods, settings=None, timings=False):
    """Compare approximations with a Gibbs chain at fixed ``theta`` on training data."""
    settings = settings or Settings()
    methods = [m for m in dict.fromkeys(methods) if m != "gibbs"]
    rep = Report(timings=timings)
    rep.add("run", command="compare", methods=methods, theta=theta.to_vector(), n=data.n,
            classes=data.classes, seed=settings.seed)
    clock = _Clock(timings)
    oracle = fit("gibbs", data, theta, settings)
    g_mean, g_var = latent_moments(oracle)
    g_prob = train_probabilities(oracle)
    rep.add("oracle", method="gibbs", **oracle.summary(), **clock.lap())
    idx = np.arange(data.n)
    cols = ["row", "label", "gibbs"] + methods
    prob_rows = rep.table("compare_probs", cols)
    table = {"gibbs": g_prob[idx, data.y]}
    latent_rows = rep.table("compare_latents", ["row", "class", "method", "mean", "var",
                                                "gibbs_mean", "gibbs_var"])
    for m in methods:
        try:
            model = fit(m, data, theta, settings)
            p = train_probabilities(model)
        except INFERENCE_ERRORS as exc:
            rep.partial = True
            rep.add("method", method=m, error=str(exc))
            continue
        table[m] = p[idx, data.y]
        rec = {"mean_abs_prob_diff": float(np.mean(np.abs(p - g_prob)))}
        mu, var = latent_moments(model)
        if mu is not None:
            sd = np.sqrt(g_var)
            rec["max_mean_diff_sd"] = float(np.max(np.abs(mu - g_mean) / sd))
            rec["var_ratio_range"] = [float(np.min(var / g_var)), float(np.max(var / g_var))]
            for i in idx:
                for k in range(data.n_classes):
                    latent_rows.append([int(i), data.classes[k], m, mu[i, k], var[i, k],
                                        g_mean[i, k], g_var[i, k]])
        rep.partial |= not model.converged
        rep.add("method", method=m, **model.summary(), **rec, **clock.lap())
    for i in idx:
        prob_rows.append([int(i), data.classes[data.y[i]]] + [table.get(m, [np.nan] * data.n)[i]
                                                             for m in ["gibbs"] + methods])
    rep.add("status", partial=rep.partial)
    return rep


def gibbs_run(data, theta, settings, test=None, timings=False):
    """Run the Gibbs oracle and tabulate marginals and (optionally) test predictions."""
    clock = _Clock(timings)
    model = fit("gibbs", data, theta, settings)
    ch = model.state
    rep = Report(timings=timings)
    rep.add("run", command="gibbs", theta=theta.to_vector(), n=data.n, classes=data.classes,
            seed=settings.seed, samples=settings.gibbs_samples, burn_in=settings.gibbs_burn_in,
            thin=settings.gibbs_thin)
    rep.add("chain", split_half_z=ch.split_half_z(), iterations=ch.n_iterations,
            aux_draws=ch.aux_draws, **clock.lap())
    rows = rep.table("gibbs_marginals", ["row", "label", "class", "mean", "var", "prob"])
    var = np.diagonal(ch.cov, axis1=1, axis2=2)
    for i in range(data.n):
        for k in range(data.n_classes):
            rows.append([i, data.classes[data.y[i]], data.classes[k], ch.mean[i, k], var[i, k],
                         ch.train_probs[i, k]])
    if test is not None:
        from .gibbs import chain_predict

        p, se = chain_predict(ch, data.X, theta, test.X)
        lp = log_predictive(p, test.y)
        rep.add("test", n_test=test.n, mlpd=lp.mean(), accuracy=np.mean(p.argmax(1) == test.y),
                max_std_err=se.max())
        trows = rep.table("gibbs_test", ["row", "label"] + [f"p_{c}" for c in data.classes]
                          + [f"se_{c}" for c in data.classes])
        for i in range(test.n):
            trows.append([i, data.classes[test.y[i]], *p[i], *se[i]])
    rep.add("status", partial=rep.partial)
    return rep


def split_train_test(raw, test_fraction, seed):
    """Seeded stratified split used when no separate test file is given."""
    n_folds = max(2, int(round(1.0 / test_fraction)))
    folds = stratified_folds(raw.y, n_folds, seed)
    train, test = raw.subset(np.flatnonzero(folds != 0)), raw.subset(np.flatnonzero(folds == 0))
    return standardize_split(train, test)[:2]

