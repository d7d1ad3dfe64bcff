"""Dual auto-encoder with a shared, adversarially regularised latent space.

Attributes of observed nodes and the whole graph structure are encoded into
one latent space. Each latent code is decoded back into both modalities,
and a shared discriminator pushes both codes towards a standard Gaussian
prior. Attributes of unobserved nodes are then generated along the path
structure -> latent -> attributes.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import SparseMatrix, Tensor
from .errors import InvalidArgumentError, InvalidDataError, ShapeError, TrainingDivergedError
from .graph import DatasetBundle, compute_pos_weight, normalize_adjacency
from .metrics import mean_recall_at_k, mmd_rbf

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ABLATIONS = ("full", "cross-only", "self-only")
ADVERSARIAL_FORMS = ("non_saturating", "saturating")
LOSS_KINDS = ("bce", "mse")
VALIDATION_K = 10
MMD_SAMPLE = 512


@dataclass
class TrainConfig:
    lambda_c: float = 10.0
    lr: float = 0.005
    # first-moment decay for both optimisers; 0.9 lets the adversarial game oscillate
    adam_beta1: float = 0.5
    dropout: float = 0.5
    max_iter: int = 1000
    gen_steps: int = 2
    disc_steps: int = 1
    latent_dim: int = 64
    hidden_dim: int = 128
    struct_dim: int = 64
    seed: int = 0
    # None picks bce for categorical and mse for real-valued attributes
    loss_kind: str | None = None
    ablation: str = "full"
    adversarial: str = "non_saturating"
    # also show latents of unobserved nodes to the discriminator
    regularize_unobserved: bool = False
    select_best: bool = True

    def __post_init__(self):
        if not self.lambda_c >= 1.0:
            raise InvalidArgumentError(f"lambda_c must be >= 1, got {self.lambda_c}")
        if not self.lr > 0:
            raise InvalidArgumentError("lr must be positive")
        if not 0.0 <= self.adam_beta1 < 1.0:
            raise InvalidArgumentError("adam_beta1 must lie in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgumentError("dropout must lie in [0, 1)")
        if self.max_iter < 0:
            raise InvalidArgumentError("max_iter must be >= 0")
        if self.gen_steps < 1 or self.disc_steps < 1:
            raise InvalidArgumentError("gen_steps and disc_steps must be >= 1")
        for name in ("latent_dim", "hidden_dim", "struct_dim"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")
        if self.loss_kind not in (None, *LOSS_KINDS):
            raise InvalidArgumentError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.ablation not in ABLATIONS:
            raise InvalidArgumentError(f"ablation must be one of {ABLATIONS}")
        if self.adversarial not in ADVERSARIAL_FORMS:
            raise InvalidArgumentError(f"adversarial must be one of {ADVERSARIAL_FORMS}")

    def replace(self, **changes):
        values = asdict(self)
        values.update(changes)
        return TrainConfig(**values)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class EpochRecord:
    epoch: int
    joint_loss: float
    gan_loss: float
    disc_loss: float
    val_metric: float
    mmd: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    initial_mmd: float = float("nan")
    initial_val_metric: float = float("nan")
    best_epoch: int = 0
    val_metric_name: str = "recall@10"

    CSV_COLUMNS = ("epoch", "joint_loss", "gan_loss", "disc_loss", "val_metric", "mmd")

    def append(self, record):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path, header=None):
        lines = [f"# {line}\n" for line in (header or [])]
        lines.append(",".join(self.CSV_COLUMNS) + "\n")
        for r in self.records:
            lines.append(",".join([str(r.epoch)] + [repr(float(getattr(r, c))) for c in self.CSV_COLUMNS[1:]]) + "\n")
        Path(path).write_text("".join(lines), encoding="utf-8")


@dataclass
class Latents:
    z_x_o: Tensor
    z_a: Tensor
    z_a_o: Tensor
    observed: np.ndarray
    z_t: Tensor | None = None

    @property
    def n_observed(self):
        return len(self.observed)


def _mlp(params, prefix, x, dropout_p=0.0, training=False, rng=None):
    h = ag.relu(ag.linear(x, params[prefix + ".w1"], params[prefix + ".b1"]))
    h = ag.dropout(h, dropout_p, training, rng)
    return ag.linear(h, params[prefix + ".w2"], params[prefix + ".b2"])


def _mlp_params(prefix, n_in, n_hidden, n_out, rng):
    return {
        prefix + ".w1": ag.glorot_init(n_in, n_hidden, rng),
        prefix + ".b1": ag.zeros(1, n_hidden),
        prefix + ".w2": ag.glorot_init(n_hidden, n_out, rng),
        prefix + ".b2": ag.zeros(1, n_out),
    }


GENERATOR_GROUPS = ("gx", "ga", "dx", "da")
DISCRIMINATOR_GROUPS = ("disc",)


class NangModel:
    """Parameters of the two encoders, two decoders and the shared discriminator.

    Parameter names are prefixed by group: ``gx`` (attribute encoder),
    ``ga`` (structure encoder), ``dx`` (attribute decoder), ``da``
    (structure decoder) and ``disc``.
    """

    def __init__(self, n_nodes, n_features, hidden_dim=128, latent_dim=64, struct_dim=64,
                 rng=None, dropout=0.5):
        if rng is None:
            rng = ag.make_rng(0)
        self.n_nodes, self.n_features = int(n_nodes), int(n_features)
        self.hidden_dim, self.latent_dim, self.struct_dim = int(hidden_dim), int(latent_dim), int(struct_dim)
        self.dropout = float(dropout)
        h, d = self.hidden_dim, self.latent_dim
        params = {}
        params.update(_mlp_params("gx", self.n_features, h, d, rng))
        params["ga.w1"] = ag.glorot_init(self.n_nodes, h, rng)
        params["ga.w2"] = ag.glorot_init(h, d, rng)
        params.update(_mlp_params("dx", d, h, self.n_features, rng))
        params.update(_mlp_params("da", d, h, self.struct_dim, rng))
        params.update(_mlp_params("disc", d, h, 1, rng))
        self.params = params

    @classmethod
    def from_config(cls, n_nodes, n_features, config: TrainConfig, rng=None):
        return cls(n_nodes, n_features, config.hidden_dim, config.latent_dim, config.struct_dim,
                   rng=rng, dropout=config.dropout)

    def group(self, *prefixes):
        return [p for name, p in self.params.items() if name.split(".")[0] in prefixes]

    def generator_params(self):
        return self.group(*GENERATOR_GROUPS)

    def discriminator_params(self):
        return self.group(*DISCRIMINATOR_GROUPS)

    # -- forward passes --------------------------------------------------

    def encode_attributes(self, x, training=False, rng=None):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ShapeError(f"expected (n, {self.n_features}) attributes, got {x.shape}")
        return _mlp(self.params, "gx", x, self.dropout, training, rng)

    def encode_structure(self, adj_norm: SparseMatrix, training=False, rng=None):
        """Two-layer GCN on identity features: A (relu(A W1)) W2."""
        if adj_norm.shape != (self.n_nodes, self.n_nodes):
            raise ShapeError(f"expected a {self.n_nodes}x{self.n_nodes} adjacency, got {adj_norm.shape}")
        h = ag.relu(ag.spmm(adj_norm, self.params["ga.w1"]))
        h = ag.dropout(h, self.dropout, training, rng)
        return ag.spmm(adj_norm, ag.matmul(h, self.params["ga.w2"]))

    def _check_latent(self, z):
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"expected (n, {self.latent_dim}) latents, got {z.shape}")
        return z

    def decode_attributes(self, z):
        """Attribute logits (categorical) or predictions (real-valued)."""
        return _mlp(self.params, "dx", self._check_latent(z))

    def structure_logits(self, z):
        h = _mlp(self.params, "da", self._check_latent(z))
        return ag.matmul(h, ag.transpose(h))

    def decode_structure(self, z):
        return ag.sigmoid(self.structure_logits(z))

    def disc_logits(self, z):
        return _mlp(self.params, "disc", self._check_latent(z))

    def discriminate(self, z):
        return ag.sigmoid(self.disc_logits(z))

    # -- parameter state ---------------------------------------------------

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state):
        if set(state) != set(self.params):
            raise InvalidDataError("parameter names do not match the model")
        for name, p in self.params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: shape {value.shape} differs from {p.shape}")
            p.data = value.copy()

    def checksum(self, *prefixes):
        names = [n for n in self.params if not prefixes or n.split(".")[0] in prefixes]
        return {n: float(np.sum(self.params[n].data)) for n in names}

    def dims(self):
        return {"n_nodes": self.n_nodes, "n_features": self.n_features, "hidden_dim": self.hidden_dim,
                "latent_dim": self.latent_dim, "struct_dim": self.struct_dim, "dropout": self.dropout}

    def copy(self):
        return copy.deepcopy(self)

    def save(self, path, config=None, extra=None):
        save_checkpoint(path, "nang", self.dims(), self.state_dict(), config, extra)

    @classmethod
    def load(cls, path):
        kind, dims, state, meta = load_checkpoint(path)
        if kind != "nang":
            raise InvalidDataError(f"checkpoint holds a {kind!r} model, not nang")
        model = cls(**dims)
        model.load_state_dict(state)
        return model


def save_checkpoint(path, kind, dims, state, config=None, extra=None):
    """Write parameters plus a JSON header (version, kind, dims, config echo) to .npz.

    ``config`` may be a dataclass or an already JSON-ready mapping.
    """
    meta = {"version": CHECKPOINT_VERSION, "kind": kind, "dims": dims,
            "config": asdict(config) if is_dataclass(config) else config, "extra": extra or {}}
    arrays = {"param/" + name: value for name, value in state.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise InvalidDataError(f"unsupported checkpoint version {meta.get('version')}")
        state = {k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")}
    return meta["kind"], meta["dims"], state, meta


# ---------------------------------------------------------------------------
# objective


def _off_diagonal_targets(dense):
    """Target, loss mask (diagonal excluded) and positive weight for a 0/1 matrix."""
    n = dense.shape[0]
    mask = 1.0 - np.eye(n)
    ones = float((dense * mask).sum())
    zeros_ = float(mask.sum()) - ones
    pos_weight = zeros_ / ones if ones > 0 else 1.0
    return dense, mask, pos_weight


@dataclass
class TrainingData:
    """Arrays derived once from a bundle and reused at every step."""

    adj_norm: SparseMatrix
    train: np.ndarray
    val: np.ndarray
    x_train: np.ndarray
    x_val: np.ndarray
    categorical: bool
    loss_kind: str
    attr_pos_weight: float
    a_full: np.ndarray
    a_full_mask: np.ndarray
    a_full_pos_weight: float
    a_obs: np.ndarray
    a_obs_mask: np.ndarray
    a_obs_pos_weight: float

    @classmethod
    def from_bundle(cls, bundle: DatasetBundle, config: TrainConfig):
        split = bundle.split
        if len(split.train) == 0:
            raise InvalidDataError("no observed training nodes")
        categorical = bundle.attributes.is_categorical
        loss_kind = config.loss_kind or ("bce" if categorical else "mse")
        if loss_kind == "bce" and not categorical:
            raise InvalidDataError("bce attribute loss needs categorical attributes")
        x_train = bundle.attributes.rows(split.train)
        pos_weight = compute_pos_weight(x_train) if loss_kind == "bce" else 1.0
        dense = bundle.graph.adjacency.to_dense()
        a_full, a_full_mask, a_full_pw = _off_diagonal_targets(dense)
        a_obs, a_obs_mask, a_obs_pw = _off_diagonal_targets(dense[np.ix_(split.train, split.train)])
        return cls(normalize_adjacency(bundle.graph), split.train, split.val, x_train,
                   bundle.attributes.rows(split.val), categorical, loss_kind, pos_weight,
                   a_full, a_full_mask, a_full_pw, a_obs, a_obs_mask, a_obs_pw)

    def attribute_loss(self, logits):
        if self.loss_kind == "bce":
            return ag.weighted_bce_with_logits(logits, self.x_train, self.attr_pos_weight)
        return ag.mse_loss(logits, self.x_train)


def compute_latents(model: NangModel, data: TrainingData, training=False, rng=None) -> Latents:
    x_train = Tensor(data.x_train)
    z_x_o = model.encode_attributes(x_train, training, rng)
    z_a = model.encode_structure(data.adj_norm, training, rng)
    return Latents(z_x_o, z_a, ag.take_rows(z_a, data.train), data.train)


def structure_loss(model, z, target, mask, pos_weight):
    return ag.weighted_bce_with_logits(model.structure_logits(z), target, pos_weight, mask)


def generator_losses(model: NangModel, data, latents: Latents, config: TrainConfig):
    """Return (self-reconstruction, cross-reconstruction, generator adversarial) losses.

    ``data`` is a :class:`TrainingData` or a :class:`DatasetBundle`.
    """
    if isinstance(data, DatasetBundle):
        data = TrainingData.from_bundle(data, config)
    l_self = ag.add(data.attribute_loss(model.decode_attributes(latents.z_x_o)),
                    structure_loss(model, latents.z_a, data.a_full, data.a_full_mask, data.a_full_pos_weight))
    l_cross = ag.add(data.attribute_loss(model.decode_attributes(latents.z_a_o)),
                     structure_loss(model, latents.z_x_o, data.a_obs, data.a_obs_mask, data.a_obs_pos_weight))
    z_struct = latents.z_a if config.regularize_unobserved else latents.z_a_o
    l_adv = ag.add(generator_adversarial_loss(model, latents.z_x_o, config.adversarial),
                   generator_adversarial_loss(model, z_struct, config.adversarial))
    return l_self, l_cross, l_adv


def generator_adversarial_loss(model, z_fake, form="non_saturating"):
    logits = model.disc_logits(z_fake)
    if form == "non_saturating":
        # -mean log D(z)
        return ag.weighted_bce_with_logits(logits, np.ones(logits.shape))
    # mean log(1 - D(z))
    return ag.neg(ag.weighted_bce_with_logits(logits, np.zeros(logits.shape)))


def generator_objective(l_self, l_cross, l_adv, config: TrainConfig):
    total = l_adv
    if config.ablation != "cross-only":
        total = ag.add(total, l_self)
    if config.ablation != "self-only":
        total = ag.add(total, ag.mul(l_cross, config.lambda_c))
    return total


def discriminator_loss(model: NangModel, z_t, z_x_o, z_a_o, z_t2=None):
    """Sum of both adversarial terms; fakes are detached from the encoders.

    ``z_t`` scores against ``z_x_o`` and ``z_t2`` (defaulting to ``z_t``)
    against ``z_a_o``.
    """
    if z_t2 is None:
        z_t2 = z_t
    total = None
    for real, fake in ((z_t, z_x_o), (z_t2, z_a_o)):
        real_logits = model.disc_logits(real.detach() if isinstance(real, Tensor) else Tensor(real))
        fake_logits = model.disc_logits(fake.detach() if isinstance(fake, Tensor) else Tensor(fake))
        term = ag.add(ag.weighted_bce_with_logits(real_logits, np.ones(real_logits.shape)),
                      ag.weighted_bce_with_logits(fake_logits, np.zeros(fake_logits.shape)))
        total = term if total is None else ag.add(total, term)
    return total


# ---------------------------------------------------------------------------
# training


def validation_metric(model: NangModel, data: TrainingData):
    """Recall@10 (categorical) or negative MSE (real-valued) on validation nodes."""
    if len(data.val) == 0:
        return float("nan")
    z = ag.take_rows(model.encode_structure(data.adj_norm), data.val)
    out = model.decode_attributes(z).data
    if data.categorical:
        k = min(VALIDATION_K, out.shape[1])
        return mean_recall_at_k(out, data.x_val, k)
    return -float(np.mean((out - data.x_val) ** 2))


def latent_mmd(model: NangModel, data: TrainingData, reference, index):
    z_x = model.encode_attributes(Tensor(data.x_train)).data
    z_a = model.encode_structure(data.adj_norm).data[data.train]
    pooled = np.concatenate([z_x, z_a])[index]
    return mmd_rbf(pooled, reference)


def _finite(value, what, round_index):
    if not np.isfinite(value):
        raise TrainingDivergedError(f"{what} is not finite", round_index)
    return value


def train_nang(bundle: DatasetBundle, config: TrainConfig, callback=None):
    """Alternate generator and discriminator updates for ``config.max_iter`` rounds.

    Returns the model snapshot with the best validation metric (or the last
    one when ``select_best`` is off or there are no validation nodes) and
    the per-round :class:`TrainHistory`. ``callback(epoch, record)`` is
    invoked after every round.
    """
    data = TrainingData.from_bundle(bundle, config)
    init_rng, drop_rng, prior_rng, mmd_rng = (ag.make_rng(config.seed, stream) for stream in range(4))
    model = NangModel.from_config(bundle.n_nodes, bundle.n_features, config, init_rng)
    gen_opt = ag.Adam(model.generator_params(), lr=config.lr, beta1=config.adam_beta1)
    disc_opt = ag.Adam(model.discriminator_params(), lr=config.lr, beta1=config.adam_beta1)

    n_pooled = 2 * len(data.train)
    mmd_index = np.sort(mmd_rng.permutation(n_pooled)[:MMD_SAMPLE])
    mmd_reference = mmd_rng.standard_normal((len(mmd_index), config.latent_dim))

    history = TrainHistory(val_metric_name="recall@10" if data.categorical else "neg_mse")
    history.initial_mmd = latent_mmd(model, data, mmd_reference, mmd_index)
    history.initial_val_metric = validation_metric(model, data)
    use_val = config.select_best and len(data.val) > 0
    best_metric, best_state = history.initial_val_metric, model.state_dict()

    for epoch in range(1, config.max_iter + 1):
        for _ in range(config.gen_steps):
            lat = compute_latents(model, data, training=True, rng=drop_rng)
            l_self, l_cross, l_adv = generator_losses(model, data, lat, config)
            total = generator_objective(l_self, l_cross, l_adv, config)
            _finite(total.item(), "generator loss", epoch)
            gen_opt.zero_grad()
            total.backward()
            try:
                gen_opt.step()
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(str(exc), epoch) from None
        for _ in range(config.disc_steps):
            lat = compute_latents(model, data, training=True, rng=drop_rng)
            z_fake_a = lat.z_a if config.regularize_unobserved else lat.z_a_o
            z_t1 = ag.sample_gaussian(lat.z_x_o.shape, prior_rng)
            z_t2 = ag.sample_gaussian(z_fake_a.shape, prior_rng)
            d_loss = discriminator_loss(model, z_t1, lat.z_x_o, z_fake_a, z_t2)
            _finite(d_loss.item(), "discriminator loss", epoch)
            disc_opt.zero_grad()
            d_loss.backward()
            try:
                disc_opt.step()
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(str(exc), epoch) from None

        metric = validation_metric(model, data)
        record = EpochRecord(epoch, l_self.item() + l_cross.item(), l_adv.item(), d_loss.item(), metric,
                             latent_mmd(model, data, mmd_reference, mmd_index))
        history.append(record)
        if use_val and metric > best_metric:
            best_metric, best_state = metric, model.state_dict()
            history.best_epoch = epoch
        if callback is not None:
            callback(epoch, record)

    if use_val:
        model.load_state_dict(best_state)
    else:
        history.best_epoch = config.max_iter
    return model, history


def generate_attributes(model: NangModel, adj_norm: SparseMatrix, nodes, categorical=True):
    """Structure-path predictions for ``nodes``: probabilities or raw values."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) and (nodes.min() < 0 or nodes.max() >= model.n_nodes):
        raise InvalidArgumentError("node id out of range")
    z = ag.take_rows(model.encode_structure(adj_norm), nodes)
    out = model.decode_attributes(z)
    return (ag.sigmoid(out) if categorical else out).data.copy()


def latent_embeddings(model: NangModel, adj_norm: SparseMatrix):
    """Structure-path latents for every node (eval mode), for external plotting."""
    return model.encode_structure(adj_norm).data.copy()
