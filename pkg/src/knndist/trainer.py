"""Training corpus construction and estimator training."""

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .binio import read_container, write_container
from .dataset import augment_uniform
from .errors import ValidationError
from .estimators import Estimator, assemble_features, default_hidden, fit_normalization

CORPUS_MAGIC = b"KNNDCORP"
# SGD step sizes the original experiments used on 2D data
DEFAULT_LR = {"querynet": 0.1, "pivnet": 0.03, "pivnet_itr": 0.01}
CORPUS_VERSION = 1


@dataclass
class TrainingCorpus:
    """Training queries with exact k_max-NN distance vectors and an 80/20 split.

    ``queries[:n_sampled]`` come from the source data, the rest are uniform
    augmentations.
    """

    queries: np.ndarray
    ground_truth: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    n_sampled: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def k_max(self):
        return self.ground_truth.shape[1]

    def __len__(self):
        return self.queries.shape[0]

    def features(self, kind, grid, rows):
        """``(inputs, targets)`` for a subset of corpus rows.

        For ``pivnet_itr`` every row expands into k_max (q, k) pairs.
        """
        rows = np.asarray(rows)
        Q = self.queries[rows]
        G = self.ground_truth[rows]
        if kind == "pivnet_itr":
            m, kmax = G.shape
            Qe = np.repeat(Q, kmax, axis=0)
            ks = np.tile(np.arange(1, kmax + 1), m)
            return assemble_features(kind, Qe, grid, ks), G.reshape(-1, 1)
        return assemble_features(kind, Q, grid), G

    def save(self, path):
        write_container(path, CORPUS_MAGIC, CORPUS_VERSION, {"n_sampled": int(self.n_sampled)},
                        {"queries": self.queries, "ground_truth": self.ground_truth,
                         "train_idx": self.train_idx.astype(np.int64),
                         "val_idx": self.val_idx.astype(np.int64)})

    @classmethod
    def load(cls, path):
        meta, a = read_container(path, CORPUS_MAGIC, CORPUS_VERSION)
        return cls(a["queries"], a["ground_truth"], a["train_idx"], a["val_idx"], meta["n_sampled"])


def build_corpus(part, grid, tree, n_augment=None, seed=0, k_max=None, val_fraction=0.2):
    """Sampled plus augmented queries, labelled by exact search over X.

    ``n_augment`` defaults to the number of sampled training queries. The
    uniform augmentations cover the reference bounding box.
    """
    k_max = int(k_max or grid.k_max)
    if k_max > tree.n:
        raise ValidationError(f"k_max={k_max} exceeds |X|={tree.n}")
    if k_max > grid.k_max:
        raise ValidationError(f"k_max={k_max} exceeds grid k_max={grid.k_max}")
    sampled = part.train_queries
    if n_augment is None:
        n_augment = sampled.shape[0]
    rng = np.random.default_rng(seed)
    aug_seed, split_seed = rng.integers(0, 2**63 - 1, size=2)
    aug = augment_uniform(part.reference_set.bbox, n_augment, aug_seed)
    queries = np.vstack([sampled, aug]) if len(aug) else np.array(sampled, dtype=np.float64)
    if queries.shape[0] == 0:
        raise ValidationError("corpus would be empty")
    gt = tree.knn_distances(queries, k_max)
    perm = np.random.default_rng(split_seed).permutation(queries.shape[0])
    n_val = int(round(val_fraction * queries.shape[0]))
    return TrainingCorpus(queries, gt, np.sort(perm[n_val:]), np.sort(perm[:n_val]), sampled.shape[0])


@dataclass
class TrainReport:
    kind: str
    epochs: int
    best_epoch: int
    train_loss: float
    val_loss: float
    val_mae: float
    history: nn.TrainHistory = field(repr=False, default=None)

    def as_dict(self):
        return {"kind": self.kind, "epochs": self.epochs, "best_epoch": self.best_epoch,
                "train_loss": self.train_loss, "val_loss": self.val_loss, "val_mae": self.val_mae}


def default_config(kind, **overrides):
    """:class:`nn.TrainConfig` with the per-kind default learning rate."""
    overrides.setdefault("learning_rate", DEFAULT_LR.get(kind, 0.01))
    return nn.TrainConfig(**overrides)


def train_estimator(kind, corpus, grid, cfg=None, hidden=None, isotonic=False, log=None):
    """Train one estimator kind on the corpus; returns ``(Estimator, TrainReport)``.

    ``cfg`` defaults to :func:`default_config` for the kind and ``hidden``
    to the dimension-dependent sizes of :func:`default_hidden`.
    Losses in the report are in normalized target units; ``val_mae`` is the
    mean absolute error of the returned estimator on the validation queries
    in dataset units.
    """
    if cfg is None:
        cfg = default_config(kind)
    k_max = corpus.k_max
    val_q = corpus.queries[corpus.val_idx]
    val_gt = corpus.ground_truth[corpus.val_idx]
    if kind == "pivot":
        est = Estimator("pivot", k_max, grid=grid, isotonic=isotonic)
        mae = _mae(est, val_q, val_gt)
        return est, TrainReport(kind, 0, 0, float("nan"), float("nan"), mae)
    Xtr, Ytr = corpus.features(kind, grid, corpus.train_idx)
    Xva, Yva = corpus.features(kind, grid, corpus.val_idx)
    norm = fit_normalization(Xtr, Ytr)
    n_out = 1 if kind == "pivnet_itr" else k_max
    if hidden is None:
        hidden = default_hidden(corpus.queries.shape[1])
    sizes = [Xtr.shape[1], *hidden, n_out]
    model = nn.init(sizes, seed=cfg.seed)
    best, hist = nn.train(model, norm.normalize_inputs(Xtr), norm.normalize_targets(Ytr), cfg,
                          validation=(norm.normalize_inputs(Xva), norm.normalize_targets(Yva)), log=log)
    est = Estimator(kind, k_max, grid=None if kind == "querynet" else grid, model=best, norm=norm,
                    isotonic=isotonic)
    mae = _mae(est, val_q, val_gt) if len(val_q) else float("nan")
    b = hist.best_epoch
    return est, TrainReport(kind, hist.epochs, b, hist.train_loss[b - 1], hist.val_loss[b - 1], mae, hist)


def _mae(est, Q, G):
    if len(Q) == 0:
        return float("nan")
    return float(np.mean(np.abs(est.estimate_many(Q) - G)))
