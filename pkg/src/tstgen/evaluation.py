"""Fidelity statistics and train-on-synthetic / test-on-real downstream tasks."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .datapipe import SeriesRecord
from .errors import ConfigError, DataError, DegenerateInputError
from .numerics import Tensor
from .training import OptimizerState, TrainConfig, adam_step

FAMILIES = ("mlp-1", "mlp-5", "linear", "kernel-ridge")


# ---------------------------------------------------------------------------
# metrics

def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise DegenerateInputError("pearson needs two equal-length series of length >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0 or syy == 0:
        raise DegenerateInputError("pearson is undefined for a constant series")
    # the (n - 1) factors of covariance and both deviations cancel
    rho = float(xc @ yc) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, rho))


def pooled_rows(records: Sequence[SeriesRecord], n_features: int | None = None) -> np.ndarray:
    if not records:
        raise DataError("cannot pool an empty dataset")
    X = np.concatenate([r.measurements for r in records], axis=0)
    return X if n_features is None else X[:, :n_features]


def cross_correlation_matrix(records: Sequence[SeriesRecord], n_features: int | None = None) -> np.ndarray:
    """Feature-by-feature Pearson matrix pooled over every valid timestep.

    Rows and columns of constant features are NaN (undefined).
    """
    X = pooled_rows(records, n_features)
    if X.shape[0] < 2:
        raise DegenerateInputError("need at least 2 timesteps for a correlation matrix")
    F = X.shape[1]
    C = np.full((F, F), np.nan)
    defined = X.std(axis=0) > 0
    for j in range(F):
        if not defined[j]:
            continue
        C[j, j] = 1.0
        for k in range(j + 1, F):
            if defined[k]:
                C[j, k] = C[k, j] = pearson(X[:, j], X[:, k])
    return C


def undefined_features(matrix: np.ndarray) -> list[int]:
    return [j for j in range(matrix.shape[0]) if np.isnan(matrix[j, j])]


def frobenius_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius norm of ``a - b`` over entries defined in both."""
    ok = ~(np.isnan(a) | np.isnan(b))
    return float(np.sqrt(((a - b)[ok] ** 2).sum()))


def length_tv_distance(real: Sequence[SeriesRecord], synthetic: Sequence[SeriesRecord]) -> float:
    """Total-variation distance between the empirical length distributions."""
    lr = np.array([r.length for r in real])
    ls = np.array([r.length for r in synthetic])
    support = np.union1d(lr, ls)
    p = np.array([(lr == v).mean() for v in support])
    q = np.array([(ls == v).mean() for v in support])
    return float(0.5 * np.abs(p - q).sum())


@dataclass
class ClassificationScores:
    accuracy: float
    precision: dict[str, float]
    recall: dict[str, float]
    f1: dict[str, float]
    support: dict[str, int]


def f1_and_accuracy(predictions: Sequence[str], labels: Sequence[str],
                    classes: Sequence[str]) -> ClassificationScores:
    """One-vs-rest precision/recall/F1 per class, plus overall accuracy.

    Zero denominators give 0 (including F1 when P + R = 0).
    """
    pred = np.asarray(predictions, dtype=object)
    true = np.asarray(labels, dtype=object)
    if pred.size != true.size or pred.size == 0:
        raise DataError("predictions and labels must be non-empty and equally long")
    precision, recall, f1, support = {}, {}, {}, {}
    for c in classes:
        tp = int(((pred == c) & (true == c)).sum())
        fp = int(((pred == c) & (true != c)).sum())
        fn = int(((pred != c) & (true == c)).sum())
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        precision[c], recall[c] = p, r
        f1[c] = 2 * p * r / (p + r) if p + r else 0.0
        support[c] = tp + fn
    return ClassificationScores(float((pred == true).mean()), precision, recall, f1, support)


def r2_score(predicted, actual) -> float:
    """Coefficient of determination; multi-output targets average per-output scores."""
    yp = np.asarray(predicted, dtype=np.float64)
    ya = np.asarray(actual, dtype=np.float64)
    if yp.shape != ya.shape:
        raise DataError(f"shape mismatch {yp.shape} vs {ya.shape}")
    if ya.ndim == 1:
        yp, ya = yp[:, None], ya[:, None]
    if ya.shape[0] < 2:
        raise DegenerateInputError("r2 needs at least 2 samples")
    ss_res = ((ya - yp) ** 2).sum(axis=0)
    ss_tot = ((ya - ya.mean(axis=0)) ** 2).sum(axis=0)
    if (ss_tot == 0).any():
        raise DegenerateInputError("r2 is undefined for a constant target")
    return float(np.mean(1.0 - ss_res / ss_tot))


def mix_datasets(synthetic: Sequence[SeriesRecord], real: Sequence[SeriesRecord], proportion: float,
                 seed: int = 0) -> list[SeriesRecord]:
    """All synthetic records plus floor(p * |real|) reals sampled without replacement."""
    if not 0 <= proportion <= 1:
        raise ConfigError(f"mix proportion must lie in [0, 1], got {proportion}")
    k = math.floor(proportion * len(real) + 1e-9)
    chosen = np.sort(np.random.default_rng(seed).permutation(len(real))[:k])
    return list(synthetic) + [real[i] for i in chosen]


# ---------------------------------------------------------------------------
# downstream models

@dataclass
class DownstreamConfig:
    task: str = "classification"
    family: str = "mlp-1"
    epochs: int = 100
    mix_proportion: float = 0.0
    class_attribute: str = "end_event_type"
    history: int = 500
    horizon: int = 50
    target_feature: int = 0
    learning_rate: float = 1e-2
    batch_size: int = 64
    hidden: int = 64
    linear_lambda: float = 1e-6
    kernel_lambda: float = 1.0
    kernel_gamma: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}")
        if self.task == "classification" and self.family != "mlp-1":
            raise ConfigError("classification supports the mlp-1 family only")
        if not 0 <= self.mix_proportion <= 1:
            raise ConfigError("mix_proportion must lie in [0, 1]")
        if self.epochs < 1 or self.history < 1 or self.horizon < 1:
            raise ConfigError("epochs, history and horizon must be positive")


def mean_pool(records: Sequence[SeriesRecord]) -> np.ndarray:
    """Per-feature mean over each record's timesteps -> [N, F]."""
    return np.stack([r.measurements.mean(axis=0) for r in records])


class _Standardizer:
    def __init__(self, X: np.ndarray):
        self.mean = X.mean(axis=0)
        std = X.std(axis=0)
        self.std = np.where(std > 0, std, 1.0)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std


def _dense_layers(sizes: Sequence[int], rng: np.random.Generator) -> dict[str, Tensor]:
    params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = math.sqrt(6.0 / (a + b))
        params[f"l{i}.weight"] = Tensor(rng.uniform(-bound, bound, (a, b)), requires_grad=True)
        params[f"l{i}.bias"] = Tensor(np.zeros(b), requires_grad=True)
    return params


def _mlp(params: dict[str, Tensor], x: Tensor) -> Tensor:
    n = len(params) // 2
    for i in range(n):
        x = nx.add(nx.matmul(x, params[f"l{i}.weight"]), params[f"l{i}.bias"])
        if i < n - 1:
            x = nx.relu(x)
    return x


def _fit_minibatch(params: dict[str, Tensor], X: np.ndarray, loss_fn, config: DownstreamConfig) -> None:
    opt = OptimizerState.zeros_like(params)
    adam = TrainConfig(learning_rate=config.learning_rate)
    n = X.shape[0]
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            for p in params.values():
                p.zero_grad()
            loss = loss_fn(idx)
            nx.backward(loss)
            adam_step(params, {k: p.grad for k, p in params.items()}, opt, adam)


class Classifier:
    """Single linear map from mean-pooled features to class scores."""

    def __init__(self, classes: Sequence[str], scaler: _Standardizer, params: dict[str, Tensor]):
        self.classes = list(classes)
        self.scaler = scaler
        self.params = params

    def scores(self, records: Sequence[SeriesRecord]) -> np.ndarray:
        with nx.no_grad():
            return _mlp(self.params, Tensor(self.scaler(mean_pool(records)))).data

    def predict(self, records: Sequence[SeriesRecord]) -> list[str]:
        return [self.classes[i] for i in argmax_scores(self.scores(records))]


def argmax_scores(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(scores, axis=-1)


def labels_of(records: Sequence[SeriesRecord], attribute: str) -> list[str]:
    try:
        return [r.metadata[attribute] for r in records]
    except KeyError:
        raise DataError(f"record lacks the class attribute {attribute!r}") from None


def train_classifier(corpus: Sequence[SeriesRecord], config: DownstreamConfig,
                     classes: Sequence[str]) -> Classifier:
    labels = labels_of(corpus, config.class_attribute)
    if len(set(labels)) < 2:
        raise DataError("classification needs at least 2 classes in the training corpus")
    unknown = set(labels) - set(classes)
    if unknown:
        raise DataError(f"labels outside the class vocabulary: {sorted(unknown)}")
    X = mean_pool(corpus)
    scaler = _Standardizer(X)
    Xs = scaler(X)
    index = {c: i for i, c in enumerate(classes)}
    onehot = np.zeros((len(labels), len(classes)))
    onehot[np.arange(len(labels)), [index[l] for l in labels]] = 1.0
    rng = np.random.default_rng(config.seed)
    params = _dense_layers([X.shape[1], len(classes)], rng)

    def loss_fn(idx):
        logp = nx.log_softmax(_mlp(params, Tensor(Xs[idx])))
        return nx.scale(nx.sum_all(nx.mul(logp, Tensor(onehot[idx]))), -1.0 / len(idx))

    _fit_minibatch(params, Xs, loss_fn, config)
    return Classifier(classes, scaler, params)


def regression_arrays(records: Sequence[SeriesRecord], history: int, horizon: int,
                      feature: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """First ``history`` values as input, the following ``horizon`` values as target."""
    need = history + horizon
    short = [r.id for r in records if r.length < need]
    if short:
        raise DataError(f"{len(short)} series shorter than history + horizon = {need} (e.g. {short[0]!r})")
    if not records:
        raise DataError("empty regression corpus")
    series = np.stack([r.measurements[:need, feature] for r in records])
    return series[:, :history], series[:, history:]


class Regressor:
    def __init__(self, family: str, predict_fn):
        self.family = family
        self._predict = predict_fn

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self._predict(np.asarray(X, dtype=np.float64))


def fit_linear(X: np.ndarray, Y: np.ndarray, lam: float = 1e-6) -> Regressor:
    """Ridge-regularized normal equations with an unpenalized intercept."""
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc = X - mx
    W = np.linalg.solve(Xc.T @ Xc + lam * np.eye(X.shape[1]), Xc.T @ (Y - my))
    reg = Regressor("linear", lambda Z: (Z - mx) @ W + my)
    reg.weights, reg.intercept = W, my - mx @ W
    return reg


def rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def fit_kernel_ridge(X: np.ndarray, Y: np.ndarray, lam: float = 1.0,
                     gamma: float | None = None) -> Regressor:
    """RBF kernel ridge on mean-centred targets; gamma defaults to 1 / (history * var(X))."""
    if gamma is None:
        var = X.var()
        gamma = 1.0 / (X.shape[1] * var) if var > 0 else 1.0
    my = Y.mean(axis=0)
    K = rbf_kernel(X, X, gamma)
    alpha = np.linalg.solve(K + lam * np.eye(X.shape[0]), Y - my)
    train_X = X.copy()
    reg = Regressor("kernel-ridge", lambda Z: rbf_kernel(Z, train_X, gamma) @ alpha + my)
    reg.gamma = gamma
    return reg


def fit_mlp(X: np.ndarray, Y: np.ndarray, config: DownstreamConfig, n_layers: int) -> Regressor:
    xs = _Standardizer(X)
    y_mean, y_std = Y.mean(), Y.std() or 1.0
    Xs, Ys = xs(X), (Y - y_mean) / y_std
    sizes = [X.shape[1]] + [config.hidden] * (n_layers - 1) + [Y.shape[1]]
    params = _dense_layers(sizes, np.random.default_rng(config.seed))

    def loss_fn(idx):
        diff = nx.sub(_mlp(params, Tensor(Xs[idx])), Tensor(Ys[idx]))
        return nx.mean_all(nx.mul(diff, diff))

    _fit_minibatch(params, Xs, loss_fn, config)

    def predict(Z):
        with nx.no_grad():
            return _mlp(params, Tensor(xs(Z))).data.astype(np.float64) * y_std + y_mean

    return Regressor(f"mlp-{n_layers}", predict)


def train_regressor(corpus: Sequence[SeriesRecord], config: DownstreamConfig) -> Regressor:
    X, Y = regression_arrays(corpus, config.history, config.horizon, config.target_feature)
    if config.family == "linear":
        return fit_linear(X, Y, config.linear_lambda)
    if config.family == "kernel-ridge":
        return fit_kernel_ridge(X, Y, config.kernel_lambda, config.kernel_gamma)
    return fit_mlp(X, Y, config, 1 if config.family == "mlp-1" else 5)


# ---------------------------------------------------------------------------
# reports

@dataclass
class MetricsReport:
    dataset_ids: dict[str, str] = field(default_factory=dict)
    task: str | None = None
    family: str | None = None
    mix_proportion: float | None = None
    train_size: int | None = None
    pooling: str | None = None
    accuracy: float | None = None
    precision: dict[str, float] | None = None
    recall: dict[str, float] | None = None
    f1: dict[str, float] | None = None
    r2: float | None = None
    correlation_real: list | None = None
    correlation_synthetic: list | None = None
    correlation_distance: float | None = None
    undefined_features: list | None = None
    length_tv_distance: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(_nan_to_none(self.to_dict()), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        raw = json.loads(text)
        for key in ("correlation_real", "correlation_synthetic"):
            if raw.get(key) is not None:
                raw[key] = [[np.nan if v is None else v for v in row] for row in raw[key]]
        return cls(**raw)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def _nan_to_none(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    return obj


def fidelity_report(real: Sequence[SeriesRecord], synthetic: Sequence[SeriesRecord],
                    n_features: int | None = None) -> MetricsReport:
    if not real or not synthetic:
        raise DataError("fidelity needs non-empty real and synthetic datasets")
    cr = cross_correlation_matrix(real, n_features)
    cs = cross_correlation_matrix(synthetic, n_features)
    undefined = sorted(set(undefined_features(cr)) | set(undefined_features(cs)))
    return MetricsReport(correlation_real=cr.tolist(), correlation_synthetic=cs.tolist(),
                         correlation_distance=frobenius_distance(cr, cs),
                         undefined_features=undefined,
                         length_tv_distance=length_tv_distance(real, synthetic))


def run_downstream(synthetic: Sequence[SeriesRecord], real_train: Sequence[SeriesRecord],
                   real_test: Sequence[SeriesRecord], config: DownstreamConfig,
                   classes: Sequence[str] | None = None) -> MetricsReport:
    """Train on synthetic + a proportion of real train; always score on real test."""
    corpus = mix_datasets(synthetic, real_train, config.mix_proportion, config.seed)
    report = MetricsReport(task=config.task, family=config.family,
                           mix_proportion=config.mix_proportion, train_size=len(corpus))
    if not corpus:
        raise DataError("downstream training corpus is empty")
    if config.task == "classification":
        if classes is None:
            raise ConfigError("classification needs the class vocabulary")
        clf = train_classifier(corpus, config, classes)
        scores = f1_and_accuracy(clf.predict(real_test), labels_of(real_test, config.class_attribute),
                                 classes)
        report.pooling = "mean over valid timesteps"
        report.accuracy = scores.accuracy
        report.precision, report.recall, report.f1 = scores.precision, scores.recall, scores.f1
    else:
        reg = train_regressor(corpus, config)
        X, Y = regression_arrays(real_test, config.history, config.horizon, config.target_feature)
        report.r2 = r2_score(reg.predict(X), Y)
    return report


def write_plot_files(reports: Sequence[MetricsReport], out_dir, label: str = "synthetic+real") -> list[Path]:
    """Plot-ready TSVs: accuracy vs proportion, per-class F1, R2 table, correlation grids."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    cls = [r for r in reports if r.task == "classification"]
    if cls:
        path = out_dir / "accuracy_vs_proportion.tsv"
        lines = ["family\tproportion\taccuracy"]
        lines += [f"{r.family}\t{r.mix_proportion!r}\t{r.accuracy!r}" for r in cls]
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
        path = out_dir / "f1_per_class.tsv"
        lines = ["family\tproportion\tclass\tf1"]
        for r in cls:
            lines += [f"{r.family}\t{r.mix_proportion!r}\t{c}\t{v!r}" for c, v in r.f1.items()]
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
    reg = [r for r in reports if r.task == "regression"]
    if reg:
        path = out_dir / "r2_table.tsv"
        props = sorted({r.mix_proportion for r in reg})
        lines = ["dataset\t" + "\t".join(FAMILIES)]
        for p in props:
            row = {r.family: r.r2 for r in reg if r.mix_proportion == p}
            cells = [repr(row[f]) if f in row else "" for f in FAMILIES]
            lines.append(f"{label} (p={p!r})\t" + "\t".join(cells))
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
    fid = next((r for r in reports if r.correlation_real is not None), None)
    if fid is not None:
        for key in ("correlation_real", "correlation_synthetic"):
            path = out_dir / f"{key}.tsv"
            grid = getattr(fid, key)
            path.write_text("".join("\t".join(repr(float(v)) for v in row) + "\n" for row in grid))
            written.append(path)
    return written
