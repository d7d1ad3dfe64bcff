"""Comparison generators: neighbour mean pooling, a VAE with latent
neighbour aggregation, and a structure-only GCN regressor."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autograd as ag
from .autograd import SparseMatrix, Tensor
from .errors import InvalidDataError, ShapeError, TrainingDivergedError
from .graph import DatasetBundle, Graph, compute_pos_weight, normalize_adjacency
from .metrics import mean_recall_at_k
from .model import VALIDATION_K, TrainConfig, _mlp, _mlp_params, load_checkpoint, save_checkpoint

LOGVAR_LIMIT = 10.0


def _observed_mask(n, observed):
    mask = np.zeros(n, dtype=bool)
    mask[np.asarray(observed, dtype=np.int64)] = True
    return mask


def neighbor_mean(graph: Graph, values, observed, targets):
    """Mean of ``values`` rows over each target's observed one-hop neighbours.

    Targets without an observed neighbour get a zero row.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != graph.n_nodes:
        raise ShapeError("values must have one row per node")
    targets = np.asarray(targets, dtype=np.int64)
    keep = _observed_mask(graph.n_nodes, observed).astype(np.float64)
    a = graph.adjacency.to_csr()[targets] @ sp.diags(keep)
    counts = np.asarray(a.sum(axis=1)).reshape(-1)
    sums = np.asarray(a @ values)
    out = np.zeros_like(sums)
    has = counts > 0
    out[has] = sums[has] / counts[has, None]
    return out


def neigh_aggre(graph: Graph, x, observed, targets):
    """NeighAggre: training-free mean pooling of observed neighbours' attributes.

    Only rows of ``x`` listed in ``observed`` are read.
    """
    x = np.asarray(x.values if hasattr(x, "values") else x, dtype=np.float64)
    masked = np.zeros_like(x)
    observed = np.asarray(observed, dtype=np.int64)
    masked[observed] = x[observed]
    return neighbor_mean(graph, masked, observed, targets)


def _reconstruction(logits, target, categorical, pos_weight):
    """Per-node reconstruction loss: elementwise mean times feature count."""
    n_features = target.shape[1]
    if categorical:
        loss = ag.weighted_bce_with_logits(logits, target, pos_weight)
    else:
        loss = ag.mse_loss(logits, target)
    return ag.mul(loss, float(n_features))


def _validation_score(pred, truth, categorical):
    if categorical:
        return mean_recall_at_k(pred, truth, min(VALIDATION_K, truth.shape[1]))
    return -float(np.mean((pred - truth) ** 2))


def _check_finite(loss, epoch):
    if not np.isfinite(loss.item()):
        raise TrainingDivergedError("loss is not finite", epoch)


@dataclass
class BaselineHistory:
    loss: list = field(default_factory=list)
    val_metric: list = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self, path, header=None):
        lines = [f"# {line}\n" for line in (header or [])]
        lines.append("epoch,loss,val_metric\n")
        for i, (l, v) in enumerate(zip(self.loss, self.val_metric), start=1):
            lines.append(f"{i},{l!r},{v!r}\n")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("".join(lines))


# ---------------------------------------------------------------------------
# VAE


def kl_standard_normal(mu, logvar):
    """Mean over rows of KL(N(mu, exp(logvar)) || N(0, I))."""
    per_elem = ag.add(ag.add(ag.square(mu), ag.exp(logvar)), ag.add(ag.neg(logvar), -1.0))
    return ag.mul(ag.sum_all(per_elem), 0.5 / mu.shape[0])


class VaeBaselineModel:
    def __init__(self, n_features, hidden_dim=128, latent_dim=64, rng=None, dropout=0.5):
        if rng is None:
            rng = ag.make_rng(0)
        self.n_features, self.hidden_dim, self.latent_dim = int(n_features), int(hidden_dim), int(latent_dim)
        self.dropout = float(dropout)
        h, d = self.hidden_dim, self.latent_dim
        self.params = {
            "enc.w1": ag.glorot_init(self.n_features, h, rng),
            "enc.b1": ag.zeros(1, h),
            "enc.mu_w": ag.glorot_init(h, d, rng),
            "enc.mu_b": ag.zeros(1, d),
            "enc.lv_w": ag.glorot_init(h, d, rng),
            "enc.lv_b": ag.zeros(1, d),
        }
        self.params.update(_mlp_params("dec", d, h, self.n_features, rng))

    def encode(self, x, training=False, rng=None):
        """Return (mu, logvar); logvar is clamped to +-10."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ShapeError(f"expected (n, {self.n_features}) attributes, got {x.shape}")
        p = self.params
        h = ag.relu(ag.linear(x, p["enc.w1"], p["enc.b1"]))
        h = ag.dropout(h, self.dropout, training, rng)
        mu = ag.linear(h, p["enc.mu_w"], p["enc.mu_b"])
        logvar = ag.clip(ag.linear(h, p["enc.lv_w"], p["enc.lv_b"]), -LOGVAR_LIMIT, LOGVAR_LIMIT)
        return mu, logvar

    def decode(self, z):
        z = z if isinstance(z, Tensor) else Tensor(z)
        return _mlp(self.params, "dec", z)

    def dims(self):
        return {"n_features": self.n_features, "hidden_dim": self.hidden_dim,
                "latent_dim": self.latent_dim, "dropout": self.dropout}

    def state_dict(self):
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state):
        for n, p in self.params.items():
            p.data = np.asarray(state[n], dtype=np.float64).copy()

    def save(self, path, config=None):
        save_checkpoint(path, "vae", self.dims(), self.state_dict(), config)

    @classmethod
    def load(cls, path):
        kind, dims, state, _ = load_checkpoint(path)
        if kind != "vae":
            raise InvalidDataError(f"checkpoint holds a {kind!r} model, not vae")
        model = cls(**dims)
        model.load_state_dict(state)
        return model


def elbo_loss(model: VaeBaselineModel, x, categorical=True, pos_weight=1.0, training=False, rng=None,
              noise=None):
    """Negative ELBO per node, returned as (total, reconstruction, kl).

    ``noise`` overrides the reparameterisation draw; all-zero noise makes the
    sampled code equal the posterior mean.
    """
    x = np.asarray(x, dtype=np.float64)
    mu, logvar = model.encode(x, training, rng)
    if noise is None:
        noise = rng.standard_normal(mu.shape) if rng is not None else np.zeros(mu.shape)
    std = ag.exp(ag.mul(logvar, 0.5))
    z = ag.add(mu, ag.mul(std, Tensor(noise)))
    recon = _reconstruction(model.decode(z), x, categorical, pos_weight)
    kl = kl_standard_normal(mu, logvar)
    return ag.add(recon, kl), recon, kl


def vae_generate(model: VaeBaselineModel, graph: Graph, x, observed, targets, categorical=True):
    """Decode the mean posterior code of each target's observed neighbours."""
    observed = np.asarray(observed, dtype=np.int64)
    mu_obs = model.encode(np.asarray(x, dtype=np.float64)[observed])[0].data
    mu = np.zeros((graph.n_nodes, model.latent_dim))
    mu[observed] = mu_obs
    z = neighbor_mean(graph, mu, observed, targets)
    out = model.decode(z)
    return (ag.sigmoid(out) if categorical else out).data.copy()


def train_vae(bundle: DatasetBundle, config: TrainConfig):
    split = bundle.split
    categorical = bundle.attributes.is_categorical
    x = bundle.attributes.values
    x_train = x[split.train]
    pos_weight = compute_pos_weight(x_train) if categorical else 1.0
    init_rng, noise_rng = ag.make_rng(config.seed, 10), ag.make_rng(config.seed, 11)
    model = VaeBaselineModel(bundle.n_features, config.hidden_dim, config.latent_dim, init_rng, config.dropout)
    opt = ag.Adam(list(model.params.values()), lr=config.lr)
    history = BaselineHistory()
    use_val = config.select_best and len(split.val) > 0

    def score():
        if not use_val:
            return float("nan")
        pred = vae_generate(model, bundle.graph, x, split.train, split.val, categorical)
        return _validation_score(pred, x[split.val], categorical)

    best, best_state = score(), model.state_dict()
    for epoch in range(1, config.max_iter + 1):
        total, _, _ = elbo_loss(model, x_train, categorical, pos_weight, training=True, rng=noise_rng)
        _check_finite(total, epoch)
        opt.zero_grad()
        total.backward()
        try:
            opt.step()
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(str(exc), epoch) from None
        metric = score()
        history.loss.append(total.item())
        history.val_metric.append(metric)
        if use_val and metric > best:
            best, best_state, history.best_epoch = metric, model.state_dict(), epoch
    if use_val:
        model.load_state_dict(best_state)
    else:
        history.best_epoch = config.max_iter
    return model, history


def vae_baseline(bundle: DatasetBundle, config: TrainConfig, return_model=False):
    """Train the VAE on observed-train rows and generate attributes for the test nodes."""
    model, history = train_vae(bundle, config)
    pred = vae_generate(model, bundle.graph, bundle.attributes.values, bundle.split.observed,
                        bundle.split.test, bundle.attributes.is_categorical)
    return (pred, model, history) if return_model else pred


# ---------------------------------------------------------------------------
# structure-only GCN regressor


class GcnBaselineModel:
    def __init__(self, n_nodes, n_features, hidden_dim=128, latent_dim=64, rng=None, dropout=0.5):
        if rng is None:
            rng = ag.make_rng(0)
        self.n_nodes, self.n_features = int(n_nodes), int(n_features)
        self.hidden_dim, self.latent_dim, self.dropout = int(hidden_dim), int(latent_dim), float(dropout)
        self.params = {
            "gcn.w1": ag.glorot_init(self.n_nodes, self.hidden_dim, rng),
            "gcn.w2": ag.glorot_init(self.hidden_dim, self.latent_dim, rng),
        }
        self.params.update(_mlp_params("dec", self.latent_dim, self.hidden_dim, self.n_features, rng))

    def embed(self, adj_norm: SparseMatrix, training=False, rng=None):
        if adj_norm.shape != (self.n_nodes, self.n_nodes):
            raise ShapeError("adjacency does not match the model")
        h = ag.relu(ag.spmm(adj_norm, self.params["gcn.w1"]))
        h = ag.dropout(h, self.dropout, training, rng)
        return ag.spmm(adj_norm, ag.matmul(h, self.params["gcn.w2"]))

    def decode(self, z):
        return _mlp(self.params, "dec", z)

    def forward(self, adj_norm, nodes, training=False, rng=None):
        return self.decode(ag.take_rows(self.embed(adj_norm, training, rng), nodes))

    def dims(self):
        return {"n_nodes": self.n_nodes, "n_features": self.n_features, "hidden_dim": self.hidden_dim,
                "latent_dim": self.latent_dim, "dropout": self.dropout}

    def state_dict(self):
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state):
        for n, p in self.params.items():
            p.data = np.asarray(state[n], dtype=np.float64).copy()

    def save(self, path, config=None):
        save_checkpoint(path, "gcn", self.dims(), self.state_dict(), config)

    @classmethod
    def load(cls, path):
        kind, dims, state, _ = load_checkpoint(path)
        if kind != "gcn":
            raise InvalidDataError(f"checkpoint holds a {kind!r} model, not gcn")
        model = cls(**dims)
        model.load_state_dict(state)
        return model


def gcn_generate(model: GcnBaselineModel, adj_norm, nodes, categorical=True):
    out = model.forward(adj_norm, np.asarray(nodes, dtype=np.int64))
    return (ag.sigmoid(out) if categorical else out).data.copy()


def train_gcn_regressor(bundle: DatasetBundle, config: TrainConfig):
    split = bundle.split
    categorical = bundle.attributes.is_categorical
    x = bundle.attributes.values
    x_train = x[split.train]
    pos_weight = compute_pos_weight(x_train) if categorical else 1.0
    adj = normalize_adjacency(bundle.graph)
    init_rng, drop_rng = ag.make_rng(config.seed, 20), ag.make_rng(config.seed, 21)
    model = GcnBaselineModel(bundle.n_nodes, bundle.n_features, config.hidden_dim, config.latent_dim,
                             init_rng, config.dropout)
    opt = ag.Adam(list(model.params.values()), lr=config.lr)
    history = BaselineHistory()
    use_val = config.select_best and len(split.val) > 0

    def score():
        if not use_val:
            return float("nan")
        return _validation_score(gcn_generate(model, adj, split.val, categorical), x[split.val], categorical)

    best, best_state = score(), model.state_dict()
    for epoch in range(1, config.max_iter + 1):
        logits = model.forward(adj, split.train, training=True, rng=drop_rng)
        if categorical:
            loss = ag.weighted_bce_with_logits(logits, x_train, pos_weight)
        else:
            loss = ag.mse_loss(logits, x_train)
        _check_finite(loss, epoch)
        opt.zero_grad()
        loss.backward()
        try:
            opt.step()
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(str(exc), epoch) from None
        metric = score()
        history.loss.append(loss.item())
        history.val_metric.append(metric)
        if use_val and metric > best:
            best, best_state, history.best_epoch = metric, model.state_dict(), epoch
    if use_val:
        model.load_state_dict(best_state)
    else:
        history.best_epoch = config.max_iter
    return model, history


def gcn_baseline(bundle: DatasetBundle, config: TrainConfig, return_model=False):
    """Train the GCN regressor on observed-train rows; predict the test nodes."""
    model, history = train_gcn_regressor(bundle, config)
    pred = gcn_generate(model, normalize_adjacency(bundle.graph), bundle.split.test,
                        bundle.attributes.is_categorical)
    return (pred, model, history) if return_model else pred
