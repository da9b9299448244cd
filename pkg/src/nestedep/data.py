"""Dataset ingestion, standardisation, fold assignment and bootstrap intervals."""

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .kernel import LabeledDataset

logger = logging.getLogger(__name__)

MISSING = {"", "na", "nan", "null", "none", "?"}
BOOTSTRAP_REPLICATES = 10_000


class IngestError(ValueError):
    pass


@dataclass
class RawTable:
    """Covariates as read from disk, before standardisation."""

    X: np.ndarray
    labels: np.ndarray          # zero-based codes
    classes: list               # original label strings, first-appearance order
    columns: list

    def dataset(self):
        return LabeledDataset(self.X, self.labels, len(self.classes), list(self.classes))


def read_table(path, label_column, delimiter=",", classes=None):
    """Read a delimited text file with a header row.

    Labels are coded in order of first appearance unless ``classes`` fixes
    the mapping (as when reading a test file for a trained model).
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise IngestError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if label_column not in header:
        raise IngestError(f"{path}: no column named {label_column!r}; columns are {header}")
    li = header.index(label_column)
    feat = [j for j in range(len(header)) if j != li]
    body = rows[1:]
    if not body:
        raise IngestError(f"{path}: no data rows")

    missing, bad = [], []
    X = np.empty((len(body), len(feat)))
    raw_labels = []
    for r, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise IngestError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        cells = [row[j].strip() for j in feat]
        lab = row[li].strip()
        if lab.lower() in MISSING or any(cv.lower() in MISSING for cv in cells):
            missing.append(r)
            continue
        try:
            X[r - 1] = [float(cv) for cv in cells]
        except ValueError:
            bad.append(r)
        raw_labels.append(lab)
    if missing:
        raise IngestError(f"{path}: missing values in data rows {missing}")
    if bad:
        raise IngestError(f"{path}: non-numeric covariates in data rows {bad}")

    if classes is None:
        classes = list(dict.fromkeys(raw_labels))
        if len(classes) < 2:
            raise IngestError(f"{path}: need at least two classes, found {classes}")
    index = {name: k for k, name in enumerate(classes)}
    unknown = sorted(set(raw_labels) - set(index))
    if unknown:
        raise IngestError(f"{path}: labels {unknown} not seen in training data")
    y = np.array([index[v] for v in raw_labels], dtype=int)
    return RawTable(X, y, list(classes), [header[j] for j in feat])


@dataclass
class Standardizer:
    """Per-column affine map to zero mean and unit variance."""

    mean: np.ndarray
    scale: np.ndarray
    constant: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=float)
        mean = X.mean(0)
        std = X.std(0)
        constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
        if np.any(constant):
            logger.warning("constant covariate column(s) %s standardised to zero",
                           np.flatnonzero(constant).tolist())
        return cls(mean, np.where(constant, 1.0, std), constant)

    def transform(self, X):
        Z = (np.asarray(X, dtype=float) - self.mean) / self.scale
        Z[:, self.constant] = 0.0
        return Z

    def as_dict(self):
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist(),
                "constant": self.constant.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"]), np.array(d["scale"]), np.array(d["constant"], dtype=bool))


def ingest(path, label_column, delimiter=","):
    """Read and standardise a dataset.

    Returns ``(LabeledDataset, Standardizer, RawTable)``.  The statistics
    come from the whole file; cross-validation re-standardises per fold.
    """
    table = read_table(path, label_column, delimiter)
    std = Standardizer.fit(table.X)
    data = LabeledDataset(std.transform(table.X), table.labels, len(table.classes), table.classes)
    return data, std, table


def standardize_split(train, test):
    """Standardise both parts with the training part's statistics."""
    std = Standardizer.fit(train.X)
    tr = LabeledDataset(std.transform(train.X), train.y, train.n_classes, train.classes)
    te = LabeledDataset(std.transform(test.X), test.y, test.n_classes, test.classes)
    return tr, te, std


def stratified_folds(y, n_folds, seed):
    """Fold index per observation; each class is shuffled and dealt round-robin."""
    y = np.asarray(y)
    if n_folds < 2:
        raise ValueError("need at least two folds")
    if n_folds > y.size:
        raise ValueError(f"{n_folds} folds for {y.size} observations")
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(np.flatnonzero(y == k)) for k in np.unique(y)])
    folds = np.empty(y.size, dtype=int)
    folds[order] = np.arange(y.size) % n_folds
    return folds


def bayesian_bootstrap(values, n_rep=BOOTSTRAP_REPLICATES, seed=0, level=0.95):
    """Point estimate and interval of a mean under Dirichlet(1) reweighting."""
    values = np.asarray(values, dtype=float)
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(values.size), size=n_rep)
    reps = w @ values
    a = 0.5 * (1.0 - level)
    lo, hi = np.quantile(reps, [a, 1.0 - a])
    # shifted compensated sum: a constant vector returns its value exactly
    mean = float(values[0] + math.fsum(values - values[0]) / values.size)
    return mean, float(min(lo, mean)), float(max(hi, mean))
