"""End-to-end deep clustering runs.

A run pre-trains the autoencoder on reconstruction alone, initializes the
centers with k-means on the embedding, then trains encoder, decoder, and
centers jointly on ``reconstruction + lambda * clustering loss``. Three
methods share this scaffold:

``ot``           clustering loss is regularized OT with cluster proportions ``w``
``soft_kmeans``  clustering loss is the row-constrained (softmin) variant
``ae_kmeans``    no clustering term; clusters come from k-means on the embedding
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import autodiff as ad
from .data import Dataset, batch_iter, blob_centers, find_mnist, load_idx, make_blobs
from .errors import ContractError, NumericalInstabilityError
from .evaluation import clustering_accuracy
from .kmeans import assign_nearest, kmeans
from .losses import ClusterModel, combined_loss, soft_kmeans_loss
from .nn import AdamState, Autoencoder, StepDecay, adam_step, encoder_forward, save_checkpoint
from .sinkhorn import SinkhornConfig, check_proportions

log = logging.getLogger(__name__)

METHODS = ("ae_kmeans", "soft_kmeans", "ot")
DATA_DIR_ENV = "SINKCLUST_DATA_DIR"
CSV_COLUMNS = ("epoch", "recon_loss", "cluster_loss", "accuracy", "sinkhorn_iters", "marginal_violation")


@dataclass
class SinkhornSettings:
    max_iterations: int = 50
    tolerance: float = 1e-6
    mode: str = "log"
    gradient: str = "unrolled"
    cost_only: bool = False


@dataclass
class TrainConfig:
    method: str = "ot"
    k: int = 10
    epsilon: float = 1e-2
    lam: float = 1.0
    batch_size: int = 300
    n_pretrain: int = 10
    n_epochs: int = 50
    proportions: Optional[list[float]] = None
    base_lr: float = 1e-3
    decay_factor: float = 0.5
    decay_every: int = 40
    seed_weights: int = 0
    seed_shuffle: int = 0
    seed_kmeans: int = 0
    kmeans_restarts: int = 10
    hidden_dims: list[int] = field(default_factory=lambda: [500, 250])
    latent_dim: int = 10
    sinkhorn: SinkhornSettings = field(default_factory=SinkhornSettings)
    dataset: dict[str, Any] = field(default_factory=lambda: {"kind": "mnist", "subset": 10000})

    def __post_init__(self):
        if isinstance(self.sinkhorn, dict):
            self.sinkhorn = SinkhornSettings(**self.sinkhorn)
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ContractError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.k < 1:
            raise ContractError("k must be >= 1")
        if self.method != "ae_kmeans" and not self.epsilon > 0:
            raise ContractError("epsilon must be > 0")
        if self.n_pretrain < 0 or self.n_epochs < 0:
            raise ContractError("epoch counts must be >= 0")
        self.weights()

    def weights(self) -> np.ndarray:
        if self.proportions is None:
            return np.full(self.k, 1.0 / self.k)
        return check_proportions(self.proportions, self.k)

    def sinkhorn_config(self) -> SinkhornConfig:
        s = self.sinkhorn
        return SinkhornConfig(self.epsilon, s.max_iterations, s.tolerance, s.mode,
                              s.gradient, True, s.cost_only)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class EpochRecord:
    epoch: int
    recon_loss: float
    cluster_loss: Optional[float]
    accuracy: Optional[float]
    sinkhorn_iters: Optional[float]
    marginal_violation: Optional[float]
    converged_fraction: Optional[float] = None


@dataclass
class RunMetrics:
    config: dict[str, Any]
    records: list[EpochRecord] = field(default_factory=list)
    init_accuracy: Optional[float] = None
    final_accuracy: Optional[float] = None
    elapsed_seconds: float = 0.0
    error: Optional[str] = None
    params: Optional[Autoencoder] = field(default=None, repr=False, compare=False)
    model: Optional[ClusterModel] = field(default=None, repr=False, compare=False)

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.records:
            writer.writerow([r.epoch] + [_fmt(getattr(r, c)) for c in CSV_COLUMNS[1:]])
        return buf.getvalue()

    def summary(self) -> dict[str, Any]:
        return {
            "final_accuracy": self.final_accuracy,
            "init_accuracy": self.init_accuracy,
            "elapsed_seconds": self.elapsed_seconds,
            "epochs_completed": len(self.records),
            "converged_fraction": [r.converged_fraction for r in self.records],
            "error": self.error,
            "config": self.config,
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(self.csv_text())
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, metrics: Optional[RunMetrics] = None):
        super().__init__(message)
        self.metrics = metrics


@dataclass
class OptimizerState:
    autoencoder: AdamState
    centers: AdamState


def make_optimizer(config: TrainConfig) -> OptimizerState:
    decay = StepDecay(config.decay_factor, config.decay_every)
    return OptimizerState(AdamState(base_lr=config.base_lr, decay=decay),
                          AdamState(base_lr=config.base_lr, decay=decay))


# -- datasets ------------------------------------------------------------------

def _resolve(path, root: Optional[str]) -> Path:
    p = Path(path)
    if not p.is_absolute() and not p.exists() and root:
        p = Path(root) / p
    return p


def load_dataset(spec: dict[str, Any]) -> Dataset:
    """Build the dataset described by a config's ``dataset`` block.

    Kinds: ``blobs`` (synthetic), ``mnist`` (IDX files under ``root`` or
    ``$SINKCLUST_DATA_DIR``), ``idx`` (explicit image/label paths), and
    ``file`` (an ``.npz`` written by :meth:`Dataset.save`).
    """
    spec = dict(spec)
    kind = spec.pop("kind", "blobs")
    root = spec.pop("root", None) or os.environ.get(DATA_DIR_ENV)
    subset = spec.pop("subset", None)
    if kind == "blobs":
        k = int(spec.get("k", 3))
        per = spec.get("n_per_cluster", 300)
        per = [int(per)] * k if isinstance(per, (int, float)) else [int(x) for x in per]
        centers = blob_centers(k, int(spec.get("dim", 20)), float(spec.get("separation", 10.0)),
                               int(spec.get("seed", 0)))
        ds = make_blobs(per, centers, float(spec.get("sigma", 1.0)), int(spec.get("seed", 0)))
    elif kind == "mnist":
        if root is None:
            raise FileNotFoundError(f"MNIST needs dataset.root or ${DATA_DIR_ENV}")
        images, labels = find_mnist(root, spec.get("split", "train"))
        ds = load_idx(images, labels, "mnist")
    elif kind == "idx":
        labels = spec.get("labels")
        ds = load_idx(_resolve(spec["images"], root),
                      None if labels is None else _resolve(labels, root), spec.get("name", "idx"))
    elif kind == "file":
        ds = Dataset.load(_resolve(spec["path"], root))
    else:
        raise ContractError(f"unknown dataset kind {kind!r}")
    if subset is not None:
        ds = ds.subset(int(subset))
    return ds


def build_autoencoder(config: TrainConfig, input_dim: int) -> Autoencoder:
    dims = (input_dim, *config.hidden_dims, config.latent_dim)
    return Autoencoder.init(dims, seed=config.seed_weights)


# -- stages --------------------------------------------------------------------

def _recon_step(params: Autoencoder, batch: np.ndarray, opt: AdamState, epoch: int) -> tuple[Autoencoder, float]:
    tape = ad.Tape()
    leaves = params.on_tape(tape)
    x = tape.constant(batch)
    loss = params.reconstruction_from_embedding(leaves, x, params.encode(leaves, x))
    grads = tape.backward(loss)
    new = adam_step(opt, params.parameters(), [grads[v] for v in leaves], epoch)
    return params.with_parameters(new), loss.item()


def pretrain(config: TrainConfig, dataset: Dataset, params: Autoencoder,
             opt: Optional[OptimizerState] = None) -> Autoencoder:
    """``n_pretrain`` epochs of Adam on the reconstruction loss only."""
    opt = opt or make_optimizer(config)
    for epoch in range(config.n_pretrain):
        losses = []
        for idx in batch_iter(dataset, config.batch_size, config.seed_shuffle, epoch):
            params, value = _recon_step(params, dataset.features[idx], opt.autoencoder, epoch)
            losses.append(value)
        log.info("pretrain epoch %d recon %.6g", epoch + 1, float(np.mean(losses)))
    return params


def _check_proportion_match(assign: np.ndarray, w: np.ndarray) -> None:
    sizes = np.bincount(assign, minlength=len(w)) / len(assign)
    ratio = sizes / w
    if np.any(ratio > 2.0) or np.any(ratio < 0.5):
        log.warning("initial k-means cluster sizes %s disagree with proportions %s by more than 2x",
                    np.round(sizes, 3).tolist(), np.round(w, 3).tolist())


def init_centers(config: TrainConfig, dataset: Dataset, encoder: Autoencoder) -> ClusterModel:
    """k-means++ then Lloyd on the embedded dataset."""
    z = encoder_forward(encoder, dataset.features)
    result = kmeans(z, config.k, seed=config.seed_kmeans, n_init=config.kmeans_restarts)
    w = config.weights()
    _check_proportion_match(result.assignments, w)
    return ClusterModel(result.centers, w)


def final_clustering(params: Autoencoder, model: ClusterModel, dataset: Dataset,
                     method: str = "ot", seed: int = 0, n_init: int = 10) -> np.ndarray:
    """Hard cluster index per row. ``ae_kmeans`` re-runs k-means on the embedding."""
    z = encoder_forward(params, dataset.features)
    if method == "ae_kmeans":
        return kmeans(z, model.k, seed=seed, n_init=n_init).assignments
    return assign_nearest(z, model.centers)


def _accuracy(config: TrainConfig, params, model, dataset) -> Optional[float]:
    if dataset.labels is None:
        return None
    clusters = final_clustering(params, model, dataset, config.method, config.seed_kmeans,
                                config.kmeans_restarts)
    return clustering_accuracy(dataset.labels, clusters)


def _joint_step(config: TrainConfig, params: Autoencoder, model: ClusterModel, batch: np.ndarray,
                opt: OptimizerState, epoch: int):
    if config.method == "ot":
        loss, parts = combined_loss(batch, params, model, config.sinkhorn_config(), config.lam)
        tape, leaves, mu = parts["tape"], parts["params"], parts["centers"]
        plan = parts["plan"]
        diag = (plan.iterations_run, plan.marginal_violation)
        recon, cluster = parts["recon"].item(), parts["cluster"].item()
    else:
        tape = ad.Tape()
        leaves = params.on_tape(tape)
        mu = tape.leaf(model.centers)
        x = tape.constant(batch)
        z = params.encode(leaves, x)
        recon_node = params.reconstruction_from_embedding(leaves, x, z)
        if config.method == "soft_kmeans":
            cluster_node = soft_kmeans_loss(z, mu, config.epsilon, config.sinkhorn.cost_only)
            loss = recon_node + ad.scale(cluster_node, config.lam)
            cluster = cluster_node.item()
        else:
            loss, cluster = recon_node, None
        recon, diag = recon_node.item(), None
    grads = tape.backward(loss)
    params = params.with_parameters(
        adam_step(opt.autoencoder, params.parameters(), [grads[v] for v in leaves], epoch))
    if config.method != "ae_kmeans":
        (centers,) = adam_step(opt.centers, [model.centers], [grads[mu]], epoch)
        model = ClusterModel(centers, model.proportions)
    return params, model, recon, cluster, diag


def train_epoch(config: TrainConfig, dataset: Dataset, params: Autoencoder, model: ClusterModel,
                opt: OptimizerState, epoch: int):
    """One pass over the shuffled batches of joint training.

    ``epoch`` is the 1-based training epoch; the learning-rate schedule sees
    it offset by the pre-training length.

    Returns ``(params, model, opt, record)``.
    """
    lr_epoch = config.n_pretrain + epoch - 1
    recon, cluster, iters, viols = [], [], [], []
    for idx in batch_iter(dataset, config.batch_size, config.seed_shuffle, lr_epoch):
        try:
            params, model, r, c, diag = _joint_step(config, params, model, dataset.features[idx],
                                                    opt, lr_epoch)
        except NumericalInstabilityError as exc:
            raise TrainingAborted(f"epoch {epoch} aborted: {exc}") from exc
        recon.append(r)
        if c is not None:
            cluster.append(c)
        if diag is not None:
            iters.append(diag[0])
            viols.append(diag[1])
    tol = config.sinkhorn.tolerance
    record = EpochRecord(
        epoch=epoch,
        recon_loss=float(np.mean(recon)),
        cluster_loss=float(np.mean(cluster)) if cluster else None,
        accuracy=_accuracy(config, params, model, dataset),
        sinkhorn_iters=float(np.mean(iters)) if iters else None,
        marginal_violation=float(np.max(viols)) if viols else None,
        converged_fraction=float(np.mean(np.asarray(viols) <= tol)) if viols else None,
    )
    return params, model, opt, record


def run_experiment(config: TrainConfig, out_dir=None, dataset: Optional[Dataset] = None) -> RunMetrics:
    """Pre-train, initialize centers, train, cluster; write metrics to ``out_dir``.

    On failure the metrics gathered so far are written before the error is
    re-raised as :class:`TrainingAborted`.
    """
    start = time.perf_counter()
    config.validate()
    metrics = RunMetrics(config=config.to_dict())
    dataset = dataset if dataset is not None else load_dataset(config.dataset)
    params = build_autoencoder(config, dataset.d)
    opt = make_optimizer(config)
    try:
        params = pretrain(config, dataset, params, opt)
        model = init_centers(config, dataset, params)
        metrics.init_accuracy = _accuracy(config, params, model, dataset)
        for epoch in range(1, config.n_epochs + 1):
            params, model, opt, record = train_epoch(config, dataset, params, model, opt, epoch)
            metrics.records.append(record)
            log.info("epoch %d recon %.6g cluster %s acc %s", epoch, record.recon_loss,
                     record.cluster_loss, record.accuracy)
        metrics.final_accuracy = (metrics.records[-1].accuracy if metrics.records
                                  else metrics.init_accuracy)
    except Exception as exc:
        metrics.error = f"{type(exc).__name__}: {exc}"
        metrics.elapsed_seconds = time.perf_counter() - start
        if out_dir is not None:
            metrics.write(out_dir)
        if isinstance(exc, TrainingAborted):
            exc.metrics = metrics
            raise
        raise TrainingAborted(metrics.error, metrics) from exc
    metrics.elapsed_seconds = time.perf_counter() - start
    if out_dir is not None:
        metrics.write(out_dir)
        save_checkpoint(Path(out_dir) / "checkpoint.bin", params, model.centers, model.proportions,
                        seed=config.seed_weights, epoch=config.n_epochs)
    metrics.params = params
    metrics.model = model
    return metrics
