"""Graph-convolutional surrogate that scores a design with one scalar.

Two (or more) propagation layers relu(Â X Θ) with Â = D^-1/2 A D^-1/2,
mean pooling over real nodes, then a small MLP readout. Graphs are padded
to a common node count so a batch is three dense tensors.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch

from . import diffnum as dn
from .diffnum import Adam, MLPSpec, ParamSet
from .graph import ConfigurationError, DesignGraph, adjacency, feature_matrix, get_profile
from .seeding import derive_seed


def normalized_operator(adj: torch.Tensor, deg: torch.Tensor | None = None) -> torch.Tensor:
    """D^-1/2 A D^-1/2 on (..., N, N) with D_ii^-1/2 := 0 for isolated nodes."""
    if deg is None:
        deg = adj.sum(-1)
    elif deg.dim() == adj.dim():
        deg = torch.diagonal(deg, dim1=-2, dim2=-1)
    safe = torch.where(deg > 0, deg, torch.ones_like(deg))
    dinv = torch.where(deg > 0, safe.rsqrt(), torch.zeros_like(deg))
    return dinv.unsqueeze(-1) * adj * dinv.unsqueeze(-2)


def gcn_layer(adj, deg, X, theta, activation: str = "relu") -> torch.Tensor:
    """act(D^-1/2 A D^-1/2 X Θ). ``deg`` may be the diagonal matrix or its diagonal."""
    adj = torch.as_tensor(adj, dtype=dn.DTYPE)
    X = torch.as_tensor(X, dtype=dn.DTYPE)
    deg = None if deg is None else torch.as_tensor(deg, dtype=dn.DTYPE)
    if adj.shape[-1] != adj.shape[-2] or adj.shape[-1] != X.shape[-2]:
        raise dn.ShapeError(f"adjacency {tuple(adj.shape)} does not match features {tuple(X.shape)}")
    if X.shape[-1] != theta.shape[0]:
        raise dn.ShapeError(f"feature width {X.shape[-1]} != theta rows {theta.shape[0]}")
    out = normalized_operator(adj, deg) @ (X @ theta)
    if activation == "relu":
        return torch.relu(out)
    if activation == "identity":
        return out
    raise ValueError(f"unknown activation {activation!r}")


@dataclass
class GraphBatch:
    op: torch.Tensor  # (B, N, N) normalized operator
    x: torch.Tensor  # (B, N, f) raw features
    mask: torch.Tensor  # (B, N) 1 for real nodes

    def __len__(self) -> int:
        return self.op.shape[0]

    def take(self, idx) -> "GraphBatch":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return GraphBatch(self.op[idx], self.x[idx], self.mask[idx])


def pack_graphs(graphs: list[DesignGraph], add_self_loops: bool = False, n_pad: int | None = None) -> GraphBatch:
    n_pad = max([g.n_nodes for g in graphs] + [n_pad or 1])
    f = feature_matrix(graphs[0]).shape[1] if graphs else 0
    B = len(graphs)
    A = np.zeros((B, n_pad, n_pad))
    X = np.zeros((B, n_pad, f))
    M = np.zeros((B, n_pad))
    for b, g in enumerate(graphs):
        n = g.n_nodes
        A[b, :n, :n] = adjacency(g)
        if add_self_loops:
            A[b, np.arange(n), np.arange(n)] += 1.0
        X[b, :n] = feature_matrix(g)
        M[b, :n] = 1.0
    op = normalized_operator(torch.from_numpy(A))
    return GraphBatch(op, torch.from_numpy(X), torch.from_numpy(M))


class EstimatorModel:
    """GCN stack + mean pool + MLP readout with stored input/label scaling.

    ``add_self_loops=False`` gives the plain D^-1/2 A D^-1/2 operator, where a
    node never sees its own features in the first layer; the default adds
    unit self-loops because that plain form underfits flow labels.
    """

    def __init__(
        self,
        n_features: int = 6,
        gcn_widths=(32, 32),
        readout_hidden=(16,),
        add_self_loops: bool = True,
        maximize: bool = True,
        profile: str = "synthetic",
        seed: int = 0,
    ):
        if len(gcn_widths) < 2:
            raise ConfigurationError("need at least two GCN layers")
        self.n_features = int(n_features)
        self.gcn_widths = tuple(int(w) for w in gcn_widths)
        self.readout = MLPSpec.make((self.gcn_widths[-1], *readout_hidden, 1), hidden="relu")
        self.add_self_loops = add_self_loops
        self.maximize = maximize
        self.profile = profile
        self.seed = seed
        self.params = ParamSet(derive_seed(seed, 101))
        widths = (self.n_features,) + self.gcn_widths
        for k in range(len(self.gcn_widths)):
            self.params.add(f"gcn.theta{k}", (widths[k], widths[k + 1]))
        dn.init_mlp(self.params, "readout", self.readout)
        self.feature_scale = np.ones(self.n_features)
        self.label_mean = 0.0
        self.label_std = 1.0
        self.fitted = False

    def fit_scaling(self, graphs, labels) -> None:
        """Per-column RMS feature scale and label standardization from training data."""
        X = np.concatenate([feature_matrix(g) for g in graphs])
        rms = np.sqrt((X**2).mean(axis=0))
        self.feature_scale = np.where(rms > 0, rms, 1.0)
        y = np.asarray(labels, dtype=np.float64)
        self.label_mean = float(y.mean())
        std = float(y.std())
        self.label_std = std if std > 1e-12 else 1.0
        self.fitted = True

    def config(self) -> dict:
        return {
            "n_features": self.n_features,
            "gcn_widths": list(self.gcn_widths),
            "readout_hidden": list(self.readout.widths[1:-1]),
            "add_self_loops": self.add_self_loops,
            "maximize": self.maximize,
            "profile": self.profile,
            "seed": self.seed,
        }

    def check_schema(self, graph: DesignGraph) -> None:
        if graph.profile != self.profile or get_profile(graph.profile).n_features != self.n_features:
            raise ConfigurationError(
                f"graph profile {graph.profile!r} does not match estimator schema {self.profile!r}/{self.n_features}"
            )

    def pack(self, graphs) -> GraphBatch:
        for g in graphs:
            self.check_schema(g)
        return pack_graphs(list(graphs), self.add_self_loops)

    def forward_std(self, batch: GraphBatch) -> torch.Tensor:
        """Standardized prediction per graph, shape (B,)."""
        h = batch.x / torch.from_numpy(self.feature_scale)
        for k in range(len(self.gcn_widths)):
            h = torch.relu(batch.op @ (h @ self.params[f"gcn.theta{k}"]))
        counts = batch.mask.sum(-1, keepdim=True).clamp(min=1.0)
        pooled = (h * batch.mask.unsqueeze(-1)).sum(-2) / counts
        return dn.mlp_forward(self.readout, self.params, pooled, "readout").squeeze(-1)

    def forward(self, batch: GraphBatch) -> torch.Tensor:
        return self.forward_std(batch) * self.label_std + self.label_mean

    def save(self, path) -> None:
        meta = {
            "kind": "estimator",
            "config": self.config(),
            "feature_scale": self.feature_scale.tolist(),
            "label_mean": self.label_mean,
            "label_std": self.label_std,
        }
        dn.save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "EstimatorModel":
        params, meta = dn.load_checkpoint(path)
        if meta.get("kind") != "estimator":
            raise ConfigurationError(f"{path}: not an estimator checkpoint")
        model = cls(**meta["config"])
        model.params.load_snapshot({k: v.detach().numpy() for k, v in params.items()})
        model.feature_scale = np.asarray(meta["feature_scale"])
        model.label_mean = meta["label_mean"]
        model.label_std = meta["label_std"]
        model.fitted = True
        return model


def estimate(model: EstimatorModel, graph: DesignGraph) -> float:
    return float(estimate_batch(model, [graph])[0])


def estimate_batch(model: EstimatorModel, graphs, chunk: int = 256) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(graphs), chunk):
            out.append(model.forward(model.pack(graphs[i : i + chunk])).numpy())
    return np.concatenate(out) if out else np.zeros(0)


def split_indices(n: int, split: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < split < 1.0:
        raise ValueError("split must lie in (0, 1)")
    perm = np.random.default_rng(derive_seed(seed, 7)).permutation(n)
    n_train = min(max(int(round(split * n)), 1), n - 1) if n > 1 else n
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def batch_loss(model: EstimatorModel, batch: GraphBatch, y: torch.Tensor) -> torch.Tensor:
    """MSE in standardized label units."""
    return dn.mse(model.forward_std(batch), (y - model.label_mean) / model.label_std)


def train_estimator(
    model: EstimatorModel,
    dataset,
    split: float = 0.9,
    epochs: int = 50,
    rule=None,
    batch_size: int = 32,
    seed: int = 0,
    indices: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Minibatch training on the train split, keeping the best-validation parameters.

    History rows hold epoch, train_mse and val_mse in label units.
    """
    rule = rule or Adam(3e-3)
    graphs, labels = list(dataset.graphs), np.asarray(dataset.labels, dtype=np.float64)
    train_idx, val_idx = indices if indices is not None else split_indices(len(graphs), split, seed)
    if not model.fitted:
        model.fit_scaling([graphs[i] for i in train_idx], labels[train_idx])
    packed = model.pack(graphs)
    y = torch.from_numpy(labels)
    opt = dn.Optimizer(model.params, rule)
    rng = np.random.default_rng(derive_seed(seed, 11))

    def full_mse(idx):
        if len(idx) == 0:
            return float("nan")
        with torch.no_grad():
            loss = batch_loss(model, packed.take(idx), y[torch.from_numpy(idx)])
        return float(loss) * model.label_std**2

    history = []
    best_val, best_snap = float("inf"), model.params.snapshot()
    for epoch in range(1, epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            loss = batch_loss(model, packed.take(idx), y[torch.from_numpy(idx)])
            if not torch.isfinite(loss):
                raise dn.TrainingDivergenceError(f"non-finite estimator loss at epoch {epoch}")
            loss.backward()
            opt.step()
        train_mse, val_mse = full_mse(train_idx), full_mse(val_idx)
        if not np.isfinite(train_mse):
            raise dn.TrainingDivergenceError(f"non-finite estimator loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_mse": train_mse, "val_mse": val_mse})
        score = val_mse if len(val_idx) else train_mse
        if score < best_val:
            best_val, best_snap = score, model.params.snapshot()
    model.params.load_snapshot(best_snap)
    return model, history


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_mse", "val_mse"], lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in w.fieldnames})


def pearson(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.corrcoef(a, b)[0, 1])
