"""Node-level (classification) and attribute-level (profiling) evaluation,
plus the experiment runner and its sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .baselines import gcn_baseline, neigh_aggre, vae_baseline
from .errors import InvalidArgumentError, MissingLabelsError, NangError, ShapeError, UnsupportedSettingError
from .graph import CATEGORICAL, DatasetBundle, normalize_adjacency, split_nodes, write_predictions
from .metrics import ranking_scores
from .model import TrainConfig, generate_attributes, train_nang

logger = logging.getLogger(__name__)

SETTINGS = ("X", "A", "A+X", "profiling")
NANG_METHODS = {"nang": "full", "nang-cross": "cross-only", "nang-self": "self-only"}
METHODS = ("nang", "nang-cross", "nang-self", "neighaggre", "vae", "gcn", "true", "random")
LAMBDA_C_GRID = (1.0, 2.0, 3.0, 5.0, 10.0, 20.0, 50.0)
REPORT_COLUMNS = ("method", "dataset", "setting", "metric", "k", "mean", "std", "repeats", "seeds", "variant")


@dataclass
class MetricReport:
    method: str
    dataset: str
    setting: str
    metric: str
    mean: float
    std: float = 0.0
    repeats: int = 1
    k: int | None = None
    seeds: list = field(default_factory=list)
    variant: str = ""

    def __post_init__(self):
        if self.std < 0:
            raise InvalidArgumentError("std must be non-negative")
        if self.metric == "mmd":
            if self.mean < 0:
                raise InvalidArgumentError("mmd must be non-negative")
        elif not 0.0 <= self.mean <= 1.0:
            raise InvalidArgumentError(f"{self.metric} must lie in [0, 1], got {self.mean}")

    @property
    def label(self):
        return f"{self.metric}@{self.k}" if self.k is not None else self.metric

    def row(self):
        return {"method": self.method, "dataset": self.dataset, "setting": self.setting,
                "metric": self.metric, "k": "" if self.k is None else str(self.k),
                "mean": repr(float(self.mean)), "std": repr(float(self.std)),
                "repeats": str(self.repeats), "seeds": " ".join(str(s) for s in self.seeds),
                "variant": self.variant}


@dataclass
class ClassifierProtocol:
    folds: int = 5
    repeats: int = 10
    hidden_dim: int = 64
    lr: float = 0.01
    epochs: int = 200
    dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise InvalidArgumentError("folds must be >= 2")
        if self.repeats < 1:
            raise InvalidArgumentError("repeats must be >= 1")
        if self.epochs < 0 or self.hidden_dim < 1 or not self.lr > 0:
            raise InvalidArgumentError("epochs >= 0, hidden_dim >= 1 and lr > 0 are required")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgumentError("dropout must lie in [0, 1)")


# ---------------------------------------------------------------------------
# classifiers


def _fit_classifier(forward, params, labels, train_idx, test_idx, protocol, rng):
    opt = ag.Adam(params, lr=protocol.lr)
    for _ in range(protocol.epochs):
        logits = forward(True, rng)
        loss = ag.softmax_cross_entropy(ag.take_rows(logits, train_idx), labels[train_idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    pred = forward(False, None).data[test_idx].argmax(axis=1)
    return float(np.mean(pred == labels[test_idx]))


def mlp_accuracy(x, labels, train_idx, test_idx, n_classes, protocol, rng):
    """Train a two-layer MLP on ``train_idx`` rows and score ``test_idx`` rows."""
    x = Tensor(np.asarray(x, dtype=np.float64))
    w1 = ag.glorot_init(x.shape[1], protocol.hidden_dim, rng)
    b1 = ag.zeros(1, protocol.hidden_dim)
    w2 = ag.glorot_init(protocol.hidden_dim, n_classes, rng)
    b2 = ag.zeros(1, n_classes)

    def forward(training, drop_rng):
        h = ag.dropout(ag.relu(ag.linear(x, w1, b1)), protocol.dropout, training, drop_rng)
        return ag.linear(h, w2, b2)

    return _fit_classifier(forward, [w1, b1, w2, b2], labels, train_idx, test_idx, protocol, rng)


def gcn_accuracy(adj_norm, features, labels, train_idx, test_idx, n_classes, protocol, rng):
    """Two-layer GCN classifier; ``features=None`` means identity input features."""
    if features is None:
        propagated = None
        w1 = ag.glorot_init(adj_norm.n_rows, protocol.hidden_dim, rng)
    else:
        # A X is constant, so the first propagation is done once
        propagated = Tensor(np.asarray(adj_norm.to_csr() @ np.asarray(features, dtype=np.float64)))
        w1 = ag.glorot_init(propagated.shape[1], protocol.hidden_dim, rng)
    b1 = ag.zeros(1, protocol.hidden_dim)
    w2 = ag.glorot_init(protocol.hidden_dim, n_classes, rng)

    def forward(training, drop_rng):
        pre = ag.spmm(adj_norm, w1) if propagated is None else ag.matmul(propagated, w1)
        h = ag.dropout(ag.relu(ag.add(pre, b1)), protocol.dropout, training, drop_rng)
        return ag.spmm(adj_norm, ag.matmul(h, w2))

    return _fit_classifier(forward, [w1, b1, w2], labels, train_idx, test_idx, protocol, rng)


def cross_validate(n_items, protocol: ClassifierProtocol, fit_eval):
    """Repeated shuffled k-fold CV; ``fit_eval(train, test, rng)`` returns accuracy.

    Each (repeat, fold) pair gets its own generator derived from the seed.
    """
    if n_items < protocol.folds:
        raise InvalidArgumentError(f"need at least {protocol.folds} labelled nodes, got {n_items}")
    scores = []
    for r in range(protocol.repeats):
        perm = ag.make_rng(protocol.seed, r).permutation(n_items)
        folds = np.array_split(perm, protocol.folds)
        for f in range(protocol.folds):
            test = np.sort(folds[f])
            train = np.sort(np.concatenate([folds[j] for j in range(protocol.folds) if j != f]))
            scores.append(fit_eval(train, test, ag.make_rng(protocol.seed, r, f)))
    return np.array(scores)


def _labels_at(bundle_or_labels, nodes=None):
    labels = bundle_or_labels.labels if isinstance(bundle_or_labels, DatasetBundle) else bundle_or_labels
    if labels is None:
        raise MissingLabelsError("classification needs node labels")
    labels = np.asarray(labels, dtype=np.int64)
    return labels if nodes is None else labels[nodes]


def _report(scores, method, dataset, setting, protocol):
    return MetricReport(method, dataset, setting, "accuracy", float(scores.mean()), float(scores.std()),
                        len(scores), seeds=[protocol.seed])


def classify_x(generated, labels, protocol: ClassifierProtocol | None = None, n_classes=None,
               method="", dataset=""):
    """Attributes-only setting: MLP on generated rows with their labels."""
    protocol = protocol or ClassifierProtocol()
    generated = np.asarray(generated, dtype=np.float64)
    labels = _labels_at(labels)
    if len(labels) != len(generated):
        raise ShapeError("one label per generated row is required")
    n_classes = n_classes or int(labels.max()) + 1
    scores = cross_validate(len(labels), protocol, lambda tr, te, rng: mlp_accuracy(
        generated, labels, tr, te, n_classes, protocol, rng))
    return _report(scores, method, dataset, "X", protocol)


def fused_attributes(bundle: DatasetBundle, generated):
    """True attributes on observed nodes, generated rows on the test nodes."""
    x = bundle.attributes.values.copy()
    generated = np.asarray(generated, dtype=np.float64)
    if generated.shape != (len(bundle.split.test), bundle.n_features):
        raise ShapeError("generated attributes must cover the test nodes")
    x[bundle.split.test] = generated
    return x


def _classify_graph(bundle, features, protocol, method, setting):
    test_nodes = bundle.split.test
    labels = _labels_at(bundle)
    n_classes = bundle.n_classes or int(labels.max()) + 1
    adj = normalize_adjacency(bundle.graph)
    scores = cross_validate(len(test_nodes), protocol, lambda tr, te, rng: gcn_accuracy(
        adj, features, labels, test_nodes[tr], test_nodes[te], n_classes, protocol, rng))
    return _report(scores, method, bundle.name, setting, protocol)


def classify_fused(bundle: DatasetBundle, generated, protocol: ClassifierProtocol | None = None, method=""):
    """A+X setting: GCN over the graph with the fused attribute matrix."""
    _labels_at(bundle)
    return _classify_graph(bundle, fused_attributes(bundle, generated), protocol or ClassifierProtocol(),
                           method, "A+X")


def classify_structure_only(bundle: DatasetBundle, protocol: ClassifierProtocol | None = None):
    """A setting: GCN with identity input features."""
    _labels_at(bundle)
    return _classify_graph(bundle, None, protocol or ClassifierProtocol(), "-", "A")


# ---------------------------------------------------------------------------
# profiling


def default_ks(truth, n_features):
    """(10, 20, 50) for attribute-rich data, (3, 5, 10) otherwise; capped at F."""
    avg_nnz = float(np.mean(np.count_nonzero(truth, axis=1))) if len(truth) else 0.0
    ks = (10, 20, 50) if avg_nnz >= 15 else (3, 5, 10)
    return tuple(k for k in ks if k <= n_features) or (n_features,)


def profile(generated, truth, ks=None, categorical=True, method="", dataset=""):
    """Mean Recall@k and NDCG@k over test nodes with non-empty truth."""
    truth = np.asarray(truth)
    if not categorical or not np.all((truth == 0) | (truth == 1)):
        raise UnsupportedSettingError("profiling needs categorical attributes")
    generated = np.asarray(generated, dtype=np.float64)
    ks = tuple(ks) if ks else default_ks(truth, truth.shape[1])
    reports = []
    for k in ks:
        recall, ndcg = ranking_scores(generated, truth, k)
        for name, values in (("recall", recall), ("ndcg", ndcg)):
            reports.append(MetricReport(method, dataset, "profiling", name,
                                        float(values.mean()) if len(values) else 0.0, k=k))
    return reports


# ---------------------------------------------------------------------------
# experiment runner


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    method_overrides: dict = field(default_factory=dict)
    protocol: ClassifierProtocol = field(default_factory=ClassifierProtocol)
    ks: tuple | None = None

    def method_config(self, method):
        cfg = self.train.replace(**self.method_overrides.get(method, {}))
        if method in NANG_METHODS:
            cfg = cfg.replace(ablation=NANG_METHODS[method])
        return cfg


@dataclass
class MethodOutput:
    predictions: np.ndarray
    model: object = None
    history: object = None


def _with_context(exc, context):
    if exc.args:
        exc.args = (f"{context}: {exc.args[0]}",) + exc.args[1:]
    else:
        exc.args = (context,)
    return exc


def generate_with(method, bundle: DatasetBundle, config: ExperimentConfig) -> MethodOutput:
    """Run one generation method and return its test-node predictions."""
    split, attrs = bundle.split, bundle.attributes
    cfg = config.method_config(method)
    if method in NANG_METHODS:
        model, history = train_nang(bundle, cfg)
        pred = generate_attributes(model, normalize_adjacency(bundle.graph), split.test, attrs.is_categorical)
        return MethodOutput(pred, model, history)
    if method == "neighaggre":
        return MethodOutput(neigh_aggre(bundle.graph, attrs.values, split.observed, split.test))
    if method == "vae":
        pred, model, history = vae_baseline(bundle, cfg, return_model=True)
        return MethodOutput(pred, model, history)
    if method == "gcn":
        pred, model, history = gcn_baseline(bundle, cfg, return_model=True)
        return MethodOutput(pred, model, history)
    if method == "true":
        return MethodOutput(attrs.rows(split.test).copy())
    if method == "random":
        return MethodOutput(ag.make_rng(cfg.seed, 99).random((len(split.test), bundle.n_features)))
    raise InvalidArgumentError(f"unknown method {method!r}; choose from {METHODS}")


def check_settings(bundle, settings):
    for s in settings:
        if s not in SETTINGS:
            raise InvalidArgumentError(f"unknown setting {s!r}; choose from {SETTINGS}")
        if s == "profiling" and not bundle.attributes.is_categorical:
            raise UnsupportedSettingError("profiling needs categorical attributes")
        if s in ("X", "A", "A+X") and bundle.labels is None:
            raise MissingLabelsError(f"setting {s} needs node labels")


def evaluate_predictions(bundle, method, predictions, settings, config: ExperimentConfig):
    reports = []
    test = bundle.split.test
    for setting in settings:
        if setting == "X":
            reports.append(classify_x(predictions, _labels_at(bundle, test), config.protocol,
                                      bundle.n_classes, method, bundle.name))
        elif setting == "A+X":
            reports.append(classify_fused(bundle, predictions, config.protocol, method))
        elif setting == "profiling":
            reports.extend(profile(predictions, bundle.attributes.rows(test), config.ks,
                                   bundle.attributes.is_categorical, method, bundle.name))
    return reports


@dataclass
class ExperimentResult:
    reports: list
    outputs: dict

    def histories(self):
        return {m: o.history for m, o in self.outputs.items() if o.history is not None}


def run_experiment(bundle: DatasetBundle, methods, settings, config: ExperimentConfig | None = None,
                   variant="") -> ExperimentResult:
    """Train each method, generate test-node attributes and evaluate them."""
    config = config or ExperimentConfig()
    check_settings(bundle, settings)
    for m in methods:
        if m not in METHODS:
            raise InvalidArgumentError(f"unknown method {m!r}; choose from {METHODS}")
    reports, outputs = [], {}
    if "A" in settings:
        try:
            reports.append(classify_structure_only(bundle, config.protocol))
        except NangError as exc:
            raise _with_context(exc, "setting A") from None
    for method in methods:
        try:
            out = generate_with(method, bundle, config)
            reports.extend(evaluate_predictions(bundle, method, out.predictions, settings, config))
        except NangError as exc:
            raise _with_context(exc, f"method {method}") from None
        outputs[method] = out
    for r in reports:
        r.variant = variant
        if config.train.seed not in r.seeds:
            r.seeds = sorted(set(r.seeds) | {config.train.seed})
    return ExperimentResult(reports, outputs)


def lambda_c_sweep(bundle, values=LAMBDA_C_GRID, methods=("nang",), settings=("profiling",),
                   config: ExperimentConfig | None = None):
    """One experiment per cross-reconstruction weight; returns {value: result}."""
    config = config or ExperimentConfig()
    nang_methods = [m for m in methods if m in NANG_METHODS] or ["nang"]
    results = {}
    for value in values:
        cfg = ExperimentConfig(config.train.replace(lambda_c=float(value)), config.method_overrides,
                               config.protocol, config.ks)
        results[float(value)] = run_experiment(bundle, nang_methods, settings, cfg,
                                               variant=f"lambda_c={float(value)!r}")
    return results


def observed_ratio_sweep(bundle, ratios, methods=("nang",), settings=("profiling",),
                         config: ExperimentConfig | None = None, val_ratio=0.1):
    """Re-split with a smaller observed-train share and rerun; returns {ratio: result}.

    The validation share stays at ``val_ratio``; the rest becomes test nodes.
    """
    config = config or ExperimentConfig()
    results = {}
    for ratio in ratios:
        ratio = float(ratio)
        if not 0.0 < ratio < 1.0 - val_ratio:
            raise InvalidArgumentError(f"observed ratio must lie in (0, {1.0 - val_ratio}), got {ratio}")
        split = split_nodes(bundle.n_nodes, (ratio, val_ratio, 1.0 - ratio - val_ratio),
                            ag.make_rng(config.train.seed, 7))
        results[ratio] = run_experiment(bundle.with_split(split), methods, settings, config,
                                        variant=f"observed_ratio={ratio!r}")
    return results


# ---------------------------------------------------------------------------
# serialisation


def reports_to_csv(reports, header=None):
    buf = io.StringIO()
    for line in header or []:
        buf.write(f"# {line}\n")
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def write_reports(reports, out_dir, echo=None, stem="reports"):
    """Write ``<stem>.csv`` and ``<stem>.json``; ``echo`` is embedded in both."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = [f"config {json.dumps(echo, sort_keys=True)}"] if echo is not None else None
    (out / f"{stem}.csv").write_text(reports_to_csv(reports, header), encoding="utf-8")
    doc = {"config": echo, "reports": [asdict(r) for r in reports]}
    (out / f"{stem}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def save_prediction_scores(path, scores, echo=None):
    """Full-precision scores (probabilities before binarisation) plus the config echo."""
    with open(path, "wb") as fh:
        np.savez(fh, scores=np.asarray(scores, dtype=np.float64),
                 config=np.array(json.dumps(echo, sort_keys=True)))


def load_prediction_scores(path):
    with np.load(path, allow_pickle=False) as data:
        return data["scores"].copy()


def write_outputs(result: ExperimentResult, bundle, out_dir, echo=None, checkpoints=True, predictions=True):
    """Curves, checkpoints and prediction files for every method in ``result``."""
    out = Path(out_dir)
    header = [f"config {json.dumps(echo, sort_keys=True)}"] if echo is not None else None
    for method, output in result.outputs.items():
        if output.history is not None:
            (out / "curves").mkdir(parents=True, exist_ok=True)
            output.history.to_csv(out / "curves" / f"{method}.csv", header=header)
        if checkpoints and output.model is not None:
            (out / "checkpoints").mkdir(parents=True, exist_ok=True)
            output.model.save(out / "checkpoints" / f"{method}.npz", config=echo)
        if predictions:
            (out / "predictions").mkdir(parents=True, exist_ok=True)
            write_predictions(out / "predictions" / f"{method}.txt", bundle.split.test, output.predictions,
                              bundle.attributes.kind, header=header)
            save_prediction_scores(out / "predictions" / f"{method}.npz", output.predictions, echo)
