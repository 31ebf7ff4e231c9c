"""Variational graph autoencoder that grows designs one edge at a time.

Encoder: typed message passing with a GRU update, mapped to per-node
diagonal Gaussians. Decoder: node types from a classifier on z, then a
breadth-first loop over focus nodes that either connects the focus to a
candidate (and labels the new edge with a type) or stops. Every decision is
a masked softmax, so constraints are hard zeros. A per-node gated head
R(z) predicts the performance label from the latents, which lets latent
codes be pushed toward a target before decoding.

Teacher forcing runs batched over padded graphs; free decoding runs one
graph at a time without gradients.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import diffnum as dn
from .diffnum import Adam, GRUCellSpec, MLPSpec, ParamSet
from .graph import (
    ConfigurationError,
    DesignGraph,
    EdgeAttr,
    NodeAttr,
    NodeClass,
    feature_matrix,
    get_profile,
    graph_from_dict,
)
from .seeding import derive_seed


class DecodeRunawayError(RuntimeError):
    pass


class AscentError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 16
    enc_width: int = 32
    enc_rounds: int = 4
    hidden: int = 32
    profile: str = "synthetic"
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


@dataclass(frozen=True)
class LossWeights:
    kl: float = 0.1
    dec: float = 1.0
    perf: float = 1.0


@dataclass
class LatentCode:
    z: torch.Tensor  # (N, d)
    mu: torch.Tensor
    sigma: torch.Tensor
    positions: np.ndarray | None = None  # (N, 2) used for d_ij
    seed: int = 0
    trajectory: tuple = ()

    @property
    def n_nodes(self) -> int:
        return self.z.shape[0]

    def detached(self) -> "LatentCode":
        return LatentCode(
            self.z.detach(), self.mu.detach(), self.sigma.detach(), self.positions, self.seed, self.trajectory
        )


class GeneratorModel:
    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        self.config = config
        profile = get_profile(config.profile)
        self.profile = profile
        d, e, hid = config.latent_dim, config.enc_width, config.hidden
        c, L, f = profile.n_classes, profile.n_edge_types, profile.n_features
        self.d, self.c, self.L, self.f = d, c, L, f
        self.w = w = d + c
        self.phi_width = 4 * w + 1

        p = self.params = ParamSet(derive_seed(config.seed, 202))
        p.add("enc.in.W", (f, e))
        p.add("enc.in.b", (e,), init="zeros")
        p.add("enc.msg", (L, e, e))
        self.enc_gru = GRUCellSpec(e, e)
        dn.init_gru(p, "enc.gru", self.enc_gru)
        p.add("enc.mu.W", (e, d))
        p.add("enc.mu.b", (d,), init="zeros")
        p.add("enc.ls.W", (e, d))
        p.add("enc.ls.b", (d,), init="zeros")

        self.classifier = MLPSpec.make((d, hid, hid, c))
        dn.init_mlp(p, "cls", self.classifier)
        self.edge_spec = MLPSpec.make((self.phi_width, hid, 1))
        dn.init_mlp(p, "edge", self.edge_spec)
        self.type_spec = MLPSpec.make((self.phi_width, hid, 1))
        dn.init_mlp(p, "type", self.type_spec, stack=L)
        self.stop_spec = MLPSpec.make((3 * w, hid, 1))
        dn.init_mlp(p, "stop", self.stop_spec)
        p.add("dec.msg", (w, w))
        self.dec_gru = GRUCellSpec(w, d)
        dn.init_gru(p, "dec.gru", self.dec_gru)

        self.f1 = MLPSpec.make((d, hid, 1))
        self.f2 = MLPSpec.make((d, hid, 1))
        dn.init_mlp(p, "f1", self.f1)
        dn.init_mlp(p, "f2", self.f2)

        self.feature_scale = np.ones(f)
        self.q_scale = 1.0  # R(z) multiplier: label units per unit node contribution
        self.q_unit = 1.0  # label spread used to normalize the performance loss
        self.node_counts: list[int] = []
        self.fitted = False

    def fit_scaling(self, graphs, labels) -> None:
        X = np.concatenate([feature_matrix(g) for g in graphs])
        rms = np.sqrt((X**2).mean(axis=0))
        self.feature_scale = np.where(rms > 0, rms, 1.0)
        y = np.asarray(labels, dtype=np.float64)
        counts = [g.n_nodes for g in graphs]
        self.q_scale = max(float(np.abs(y).mean()), 1e-12) / float(np.mean(counts))
        self.q_unit = float(y.std()) if y.std() > 1e-12 else 1.0
        self.node_counts = sorted(counts)
        self.fitted = True

    def save(self, path) -> None:
        meta = {
            "kind": "generator",
            "config": self.config.to_dict(),
            "feature_scale": self.feature_scale.tolist(),
            "q_scale": self.q_scale,
            "q_unit": self.q_unit,
            "node_counts": self.node_counts,
        }
        dn.save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "GeneratorModel":
        params, meta = dn.load_checkpoint(path)
        if meta.get("kind") != "generator":
            raise ConfigurationError(f"{path}: not a generator checkpoint")
        model = cls(GeneratorConfig.from_dict(meta["config"]))
        model.params.load_snapshot({k: v.detach().numpy() for k, v in params.items()})
        model.feature_scale = np.asarray(meta["feature_scale"])
        model.q_scale = meta["q_scale"]
        model.q_unit = meta["q_unit"]
        model.node_counts = list(meta["node_counts"])
        model.fitted = True
        return model


# ---------------------------------------------------------------------------
# packing


def canonical_sequence(graph: DesignGraph) -> list[tuple[int, int, int]]:
    """Breadth-first decision sequence from node 0 with ascending neighbours.

    Items are (focus, j, type) for a connection and (focus, -1, -1) for a
    stop. Edges outside node 0's component are not part of the sequence.
    """
    if graph.n_nodes == 0:
        return []
    nbrs = graph.neighbors()
    types = {e.key: e.type for e in graph.edges}
    seq = []
    visited = {0}
    added = set()
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in nbrs[i]:
            key = (min(i, j), max(i, j))
            if key in added:
                continue
            added.add(key)
            seq.append((i, j, types[key]))
            if j not in visited:
                visited.add(j)
                queue.append(j)
        seq.append((i, -1, -1))
    return seq


def _distances(pos: np.ndarray) -> np.ndarray:
    diff = pos[:, None, :] - pos[None, :, :]
    return np.sqrt((diff**2).sum(-1))


@dataclass
class GraphTensors:
    """Padded batch of graphs for encoding and teacher forcing."""

    x: torch.Tensor  # (B, N, f) raw features
    adj_types: torch.Tensor  # (B, L, N, N) binary per edge type
    mask: torch.Tensor  # (B, N)
    dist: torch.Tensor  # (B, N, N)
    classes: torch.Tensor  # (B, N) long, 0 on padding
    focus: torch.Tensor  # (B, T) long
    target: torch.Tensor  # (B, T) long: j, N for stop, -1 padding
    etype: torch.Tensor  # (B, T) long
    lengths: np.ndarray  # (B,)

    def take(self, idx) -> "GraphTensors":
        idx_t = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        T = int(self.lengths[np.asarray(idx)].max()) if len(idx) else 0
        return GraphTensors(
            self.x[idx_t],
            self.adj_types[idx_t],
            self.mask[idx_t],
            self.dist[idx_t],
            self.classes[idx_t],
            self.focus[idx_t, :T],
            self.target[idx_t, :T],
            self.etype[idx_t, :T],
            self.lengths[np.asarray(idx)],
        )


def pack_graphs(model: GeneratorModel, graphs: list[DesignGraph]) -> GraphTensors:
    B = len(graphs)
    N = max(g.n_nodes for g in graphs)
    seqs = [canonical_sequence(g) for g in graphs]
    T = max(len(s) for s in seqs)
    x = np.zeros((B, N, model.f))
    adj = np.zeros((B, model.L, N, N))
    mask = np.zeros((B, N))
    dist = np.zeros((B, N, N))
    classes = np.zeros((B, N), dtype=np.int64)
    focus = np.zeros((B, T), dtype=np.int64)
    target = np.full((B, T), -1, dtype=np.int64)
    etype = np.zeros((B, T), dtype=np.int64)
    for b, g in enumerate(graphs):
        if g.profile != model.config.profile:
            raise ConfigurationError(f"graph profile {g.profile!r} != generator profile {model.config.profile!r}")
        n = g.n_nodes
        x[b, :n] = feature_matrix(g)
        for e in g.edges:
            adj[b, e.type, e.u, e.v] = adj[b, e.type, e.v, e.u] = 1.0
        mask[b, :n] = 1.0
        dist[b, :n, :n] = _distances(g.positions())
        classes[b, :n] = g.classes()
        for t, (i, j, ty) in enumerate(seqs[b]):
            focus[b, t] = i
            target[b, t] = N if j < 0 else j
            etype[b, t] = max(ty, 0)
    as_t = torch.from_numpy
    return GraphTensors(
        as_t(x), as_t(adj), as_t(mask), as_t(dist), as_t(classes),
        as_t(focus), as_t(target), as_t(etype), np.array([len(s) for s in seqs]),
    )


# ---------------------------------------------------------------------------
# encoder


def encode_tensors(model: GeneratorModel, batch: GraphTensors) -> tuple[torch.Tensor, torch.Tensor]:
    """(mu, log_sigma), each (B, N, d)."""
    p = model.params
    m = batch.mask.unsqueeze(-1)
    h = torch.tanh((batch.x / torch.from_numpy(model.feature_scale)) @ p["enc.in.W"] + p["enc.in.b"]) * m
    for _ in range(model.config.enc_rounds):
        per_type = torch.einsum("bnk,lkm->blnm", h, p["enc.msg"])
        msg = (batch.adj_types @ per_type).sum(1)
        h = dn.gru_cell(model.enc_gru, p, h, msg, "enc.gru") * m
    mu = h @ p["enc.mu.W"] + p["enc.mu.b"]
    log_sigma = h @ p["enc.ls.W"] + p["enc.ls.b"]
    return mu, log_sigma


def encode(model: GeneratorModel, graph: DesignGraph, seed: int = 0, sample: bool = True) -> LatentCode:
    """Per-node Gaussian parameters and a reparameterized draw z = mu + sigma * eps."""
    batch = pack_graphs(model, [graph])
    mu, ls = encode_tensors(model, batch)
    mu, sigma = mu[0], torch.exp(ls[0])
    if sample:
        eps = torch.from_numpy(np.random.default_rng(seed).standard_normal(mu.shape))
        z = mu + sigma * eps
    else:
        z = mu
    return LatentCode(z, mu, sigma, graph.positions(), seed)


def encode_loss(code: LatentCode) -> torch.Tensor:
    return dn.kl_standard_normal(code.mu, code.sigma)


def prior_code(model: GeneratorModel, n_nodes: int | None = None, seed: int = 0) -> LatentCode:
    """z from the standard normal prior; node count from the training distribution."""
    rng = np.random.default_rng(derive_seed(seed, 31))
    if n_nodes is None:
        n_nodes = int(rng.choice(model.node_counts)) if model.node_counts else 1
    z = torch.from_numpy(rng.standard_normal((n_nodes, model.d)))
    pos = rng.random((n_nodes, 2))
    return LatentCode(z, torch.zeros_like(z), torch.ones_like(z), pos, seed)


# ---------------------------------------------------------------------------
# decoder scoring shared by teacher forcing and free decoding


def _mlp_after_first(spec: MLPSpec, params: ParamSet, name: str, pre0: torch.Tensor) -> torch.Tensor:
    h = dn._ACTIVATIONS[spec.activations[0]](pre0)
    for k in range(1, len(spec.activations)):
        h = dn._ACTIVATIONS[spec.activations[k]](h @ params[f"{name}.W{k}"] + params[f"{name}.b{k}"])
    return h.squeeze(-1)


def _graph_mean(h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return (h * mask.unsqueeze(-1)).sum(-2) / mask.sum(-1, keepdim=True).clamp(min=1.0)


def connect_scores(model, h, H_init, H, dist_row, focus_h):
    """C(phi_ij) for every candidate j and the stop score of the focus node.

    h (B, N, w); H_init, H, focus_h (B, w); dist_row (B, N).
    The first edge-scorer layer is applied block by block over phi's parts.
    """
    p, w = model.params, model.w
    W0 = p["edge.W0"]
    shared = focus_h @ W0[:w] + H_init @ W0[2 * w + 1 : 3 * w + 1] + H @ W0[3 * w + 1 :] + p["edge.b0"]
    pre = shared.unsqueeze(-2) + h @ W0[w : 2 * w] + dist_row.unsqueeze(-1) * W0[2 * w]
    scores = _mlp_after_first(model.edge_spec, p, "edge", pre)
    stop = dn.mlp_forward(model.stop_spec, p, torch.cat([focus_h, H_init, H], -1), "stop").squeeze(-1)
    return scores, stop


def type_scores(model, focus_h, h_j, d_ij, H_init, H) -> torch.Tensor:
    phi = torch.cat([focus_h, h_j, d_ij.unsqueeze(-1), H_init, H], -1)
    return dn.stacked_mlp_forward(model.type_spec, model.params, phi, "type")


def update_latent(model, h_lat, onehot, adj) -> torch.Tensor:
    """GRU step on the latent block with summed neighbour messages."""
    h = torch.cat([h_lat, onehot], -1)
    msg = adj @ (h @ model.params["dec.msg"])
    return dn.gru_cell(model.dec_gru, model.params, h_lat, msg, "dec.gru")


def class_logits(model, z) -> torch.Tensor:
    return dn.mlp_forward(model.classifier, model.params, z, "cls")


def decode_loss_batch(model: GeneratorModel, z: torch.Tensor, batch: GraphTensors) -> torch.Tensor:
    """Teacher-forced negative log-likelihood per graph, shape (B,)."""
    B, N, _ = z.shape
    ar = torch.arange(B)
    mask = batch.mask
    lp_cls = torch.log_softmax(class_logits(model, z), -1)
    ll = (lp_cls.gather(-1, batch.classes.unsqueeze(-1)).squeeze(-1) * mask).sum(-1)
    onehot = torch.nn.functional.one_hot(batch.classes, model.c).to(dn.DTYPE) * mask.unsqueeze(-1)
    h_lat = z
    H_init = _graph_mean(torch.cat([z, onehot], -1), mask)
    adj = torch.zeros(B, N, N, dtype=dn.DTYPE)
    closed = torch.zeros(B, N, dtype=dn.DTYPE)
    eye = torch.eye(N, dtype=dn.DTYPE)
    ones = torch.ones(B, 1, dtype=dn.DTYPE)
    for t in range(batch.target.shape[1]):
        focus, target = batch.focus[:, t], batch.target[:, t]
        valid = target >= 0
        is_conn = valid & (target < N)
        h = torch.cat([h_lat, onehot], -1)
        H = _graph_mean(h, mask)
        focus_h = h[ar, focus]
        scores, stop = connect_scores(model, h, H_init, H, batch.dist[ar, focus], focus_h)
        allowed = (1.0 - adj[ar, focus]) * (1.0 - eye[focus]) * mask * (1.0 - closed)
        lp = dn.masked_log_softmax(torch.cat([scores, stop.unsqueeze(-1)], -1), torch.cat([allowed, ones], -1))
        tgt = torch.where(valid, target, torch.full_like(target, N))
        step_ll = lp.gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
        ll = ll + torch.where(valid, step_ll, torch.zeros_like(step_ll))
        if bool(is_conn.any()):
            j = torch.where(is_conn, target, torch.zeros_like(target))
            lt = torch.log_softmax(type_scores(model, focus_h, h[ar, j], batch.dist[ar, focus, j], H_init, H), -1)
            type_ll = lt.gather(-1, batch.etype[:, t].unsqueeze(-1)).squeeze(-1)
            ll = ll + torch.where(is_conn, type_ll, torch.zeros_like(type_ll))
            rows = ar[is_conn]
            adj = adj.clone()
            adj[rows, focus[is_conn], j[is_conn]] = 1.0
            adj[rows, j[is_conn], focus[is_conn]] = 1.0
            new_lat = update_latent(model, h_lat, onehot, adj)
            h_lat = torch.where(is_conn.view(B, 1, 1), new_lat, h_lat)
        is_stop = valid & (target == N)
        if bool(is_stop.any()):
            closed = closed.clone()
            closed[ar[is_stop], focus[is_stop]] = 1.0
    return -ll


def decode_loss(model: GeneratorModel, code: LatentCode, graph: DesignGraph) -> torch.Tensor:
    return decode_loss_batch(model, code.z.unsqueeze(0), pack_graphs(model, [graph]))[0]


# ---------------------------------------------------------------------------
# performance head and latent ascent


def performance_head_batch(model: GeneratorModel, z: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    p = model.params
    gate = torch.sigmoid(dn.mlp_forward(model.f1, p, z, "f1").squeeze(-1))
    value = dn.mlp_forward(model.f2, p, z, "f2").squeeze(-1)
    contrib = gate * value
    if mask is not None:
        contrib = contrib * mask
    return model.q_scale * contrib.sum(-1)


def performance_head(model: GeneratorModel, code: LatentCode) -> torch.Tensor:
    """R(z) = sum_v sigmoid(f1(z_v)) * f2(z_v), in label units."""
    return performance_head_batch(model, code.z)


def latent_ascent(
    model: GeneratorModel,
    code: LatentCode,
    q_target: float,
    steps: int = 30,
    step_size: float = 0.5,
    max_halvings: int = 12,
) -> LatentCode:
    """Move z (parameters frozen) to reduce |R(z) - q_target|.

    Each step goes along the normalized descent direction; the step length
    is halved until the objective strictly drops, so the recorded
    trajectory is non-increasing.
    """
    z = code.z.detach().clone()

    def objective(zz):
        return (performance_head_batch(model, zz) - q_target).abs()

    with torch.no_grad():
        current = float(objective(z))
    traj = [current]
    for _ in range(steps):
        zg = z.clone().requires_grad_(True)
        (g,) = torch.autograd.grad(objective(zg), zg)
        if not bool(torch.isfinite(g).all()):
            raise AscentError("non-finite gradient during latent ascent")
        norm = float(g.norm())
        if norm == 0.0 or current == 0.0:
            break
        eta = step_size
        accepted = False
        with torch.no_grad():
            for _ in range(max_halvings + 1):
                trial = z - eta * g / norm
                value = float(objective(trial))
                if value < current:
                    z, current, accepted = trial, value, True
                    break
                eta *= 0.5
        if not accepted:
            break
        traj.append(current)
    return LatentCode(z, code.mu.detach(), code.sigma.detach(), code.positions, code.seed, tuple(traj))


# ---------------------------------------------------------------------------
# free decoding


@dataclass
class ExpansionConstraints:
    """Existing design to extend with ``new_nodes`` candidates.

    Base nodes, edges and attributes are locked. ``edge_mask`` (N x N) and
    ``type_mask`` (N x N x L) over the expanded node set restrict new edges
    further; base-base pairs are always masked.
    """

    base: DesignGraph
    new_nodes: int
    edge_mask: np.ndarray | None = None
    type_mask: np.ndarray | None = None

    @property
    def n_total(self) -> int:
        return self.base.n_nodes + self.new_nodes

    @classmethod
    def from_json(cls, text: str) -> "ExpansionConstraints":
        doc = json.loads(text)
        new = doc.get("new_nodes")
        if not isinstance(new, int) or new < 0:
            raise ConfigurationError("constraints need a nonnegative integer 'new_nodes'")
        return cls(graph_from_dict(doc, extra_keys=("new_nodes",)), new)


@dataclass
class GenState:
    h_lat: torch.Tensor  # (N, d)
    onehot: torch.Tensor  # (N, c)
    types: np.ndarray
    H_init: torch.Tensor
    adj: torch.Tensor  # (N, N) binary
    M: np.ndarray  # (N, N) {0, 1}
    m: np.ndarray  # (N, N, L) {0, 1}
    dist: torch.Tensor
    queue: deque
    in_graph: np.ndarray  # reached or locked nodes
    closed: np.ndarray
    pos: np.ndarray
    edges: dict = field(default_factory=dict)  # (u, v) -> type, decoded edges only
    t: int = 0

    @property
    def n_nodes(self) -> int:
        return self.h_lat.shape[0]

    @property
    def h(self) -> torch.Tensor:
        return torch.cat([self.h_lat, self.onehot], -1)

    @property
    def H(self) -> torch.Tensor:
        return self.h.mean(0)


def init_nodes(
    model: GeneratorModel,
    code: LatentCode,
    constraints: ExpansionConstraints | None = None,
    sample_types: bool = False,
    rng: np.random.Generator | None = None,
    types=None,
) -> GenState:
    """Type every node (argmax of the classifier unless sampled or given) and set up masks."""
    N = code.n_nodes
    z = code.z.detach()
    with torch.no_grad():
        logits = class_logits(model, z)
    if types is not None:
        types = np.array(types, dtype=np.int64)
    elif sample_types:
        rng = rng or np.random.default_rng(code.seed)
        probs = torch.softmax(logits, -1).numpy()
        types = np.array([rng.choice(model.c, p=p / p.sum()) for p in probs])
    else:
        types = logits.argmax(-1).numpy()
    M = 1 - np.eye(N, dtype=np.int8)
    m = np.ones((N, N, model.L), dtype=np.int8)
    adj = torch.zeros(N, N, dtype=dn.DTYPE)
    in_graph = np.zeros(N, dtype=bool)
    queue = deque([0])
    in_graph[0] = True
    if constraints is not None:
        base = constraints.base
        nb = base.n_nodes
        if constraints.n_total != N:
            raise ConfigurationError(f"code has {N} rows, constraints need {constraints.n_total}")
        types[:nb] = base.classes()
        M[:nb, :nb] = 0
        for e in base.edges:
            adj[e.u, e.v] = adj[e.v, e.u] = 1.0
        if constraints.edge_mask is not None:
            M = M * (np.asarray(constraints.edge_mask) != 0)
        if constraints.type_mask is not None:
            m = m * (np.asarray(constraints.type_mask) != 0)
        # new candidates first so they get the first chance to attach
        queue = deque(list(range(nb, N)) + list(range(nb)))
        in_graph[:] = True
    M = (M * m.any(-1)).astype(np.int8)
    M = np.minimum(M, M.T)
    onehot = torch.nn.functional.one_hot(torch.from_numpy(np.asarray(types, dtype=np.int64)), model.c).to(dn.DTYPE)
    pos = code.positions
    if pos is None:
        pos = np.random.default_rng(derive_seed(code.seed, 41)).random((N, 2))
    h0 = torch.cat([z, onehot], -1)
    return GenState(
        z.clone(), onehot, np.asarray(types), h0.mean(0), adj, M, m,
        torch.from_numpy(_distances(np.asarray(pos, dtype=np.float64))), queue, in_graph,
        np.zeros(N, dtype=bool), np.asarray(pos, dtype=np.float64),
    )


def edge_feature(state: GenState, i: int, j: int) -> torch.Tensor:
    h = state.h
    return torch.cat([h[i], h[j], state.dist[i, j].reshape(1), state.H_init, state.H])


def _candidate_mask(state: GenState, i: int) -> np.ndarray:
    return state.M[i] * ~state.closed


def edge_probs(model: GeneratorModel, state: GenState, i: int) -> tuple[torch.Tensor, torch.Tensor]:
    """(P over candidates j with stop last, shape N + 1; P(type | i, j), shape N x L).

    Type rows of masked candidates are all zero.
    """
    with torch.no_grad():
        h, H = state.h, state.H
        scores, stop = connect_scores(
            model, h.unsqueeze(0), state.H_init.unsqueeze(0), H.unsqueeze(0),
            state.dist[i].unsqueeze(0), h[i].unsqueeze(0),
        )
        allowed = torch.from_numpy(np.append(_candidate_mask(state, i), 1).astype(np.float64))
        p_conn = dn.masked_softmax(torch.cat([scores[0], stop]), allowed)
        N = state.n_nodes
        t_scores = type_scores(
            model, h[i].expand(N, -1), h, state.dist[i], state.H_init.expand(N, -1), H.expand(N, -1)
        )
        tmask = torch.from_numpy(state.m[i].astype(np.float64))
        has = tmask.sum(-1) > 0
        safe = torch.where(has.unsqueeze(-1), tmask, torch.ones_like(tmask))
        p_type = dn.masked_softmax(t_scores, safe) * has.unsqueeze(-1)
    return p_conn, p_type


def node_update(model: GeneratorModel, state: GenState) -> GenState:
    """Recompute every node's latent block from its current neighbours."""
    state.h_lat = update_latent(model, state.h_lat, state.onehot, state.adj)
    state.t += 1
    return state


def add_edge(model: GeneratorModel, state: GenState, i: int, j: int, ell: int) -> GenState:
    state.edges[(min(i, j), max(i, j))] = int(ell)
    state.adj[i, j] = state.adj[j, i] = 1.0
    state.M[i, j] = state.M[j, i] = 0
    if not state.in_graph[j]:
        state.in_graph[j] = True
        state.queue.append(j)
    with torch.no_grad():
        return node_update(model, state)


def close_focus(state: GenState, i: int) -> GenState:
    if state.queue and state.queue[0] == i:
        state.queue.popleft()
    state.closed[i] = True
    return state


def check_trace(trace: list[DecodeStep], tol: float = 1e-12) -> list[str]:
    """Mask soundness and normalization problems found in a decode trace."""
    problems = []
    for k, st in enumerate(trace):
        if abs(st.p_connect.sum() - 1.0) > tol:
            problems.append(f"step {k}: connect probabilities sum to {st.p_connect.sum()!r}")
        if np.any(st.p_connect[st.allowed == 0] != 0):
            problems.append(f"step {k}: masked candidate has nonzero probability")
        if st.allowed[st.choice] == 0:
            problems.append(f"step {k}: chose masked candidate {st.choice}")
        if st.p_type is not None:
            if abs(st.p_type.sum() - 1.0) > tol:
                problems.append(f"step {k}: type probabilities sum to {st.p_type.sum()!r}")
            if np.any(st.p_type[st.type_allowed == 0] != 0) or st.type_allowed[st.edge_type] == 0:
                problems.append(f"step {k}: masked edge type")
    return problems


def _choose(p: np.ndarray, greedy: bool, rng: np.random.Generator) -> int:
    if greedy:
        return int(np.argmax(p))
    return int(rng.choice(len(p), p=p / p.sum()))


def _choose_connection(p: np.ndarray, greedy: bool, rng: np.random.Generator) -> int:
    """Greedy first decides stop vs connect on the marginal, then the best candidate.

    A plain argmax over candidates plus stop favours stopping whenever the
    connect mass is spread over several candidates.
    """
    if not greedy:
        return _choose(p, False, rng)
    if p[-1] >= 0.5:
        return len(p) - 1
    return int(np.argmax(p[:-1]))


@dataclass
class DecodeStep:
    focus: int
    p_connect: np.ndarray
    allowed: np.ndarray
    choice: int  # N means stop
    p_type: np.ndarray | None = None
    type_allowed: np.ndarray | None = None
    edge_type: int = -1


def decode(
    model: GeneratorModel,
    code: LatentCode,
    mode: str = "greedy",
    constraints: ExpansionConstraints | None = None,
    seed: int = 0,
    max_steps: int | None = None,
    trace: list | None = None,
) -> DesignGraph:
    """Grow a design from ``code``; ``trace`` (a list) receives one DecodeStep per decision."""
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decode mode {mode!r}")
    greedy = mode == "greedy"
    rng = np.random.default_rng(derive_seed(seed, 51))
    state = init_nodes(model, code, constraints, sample_types=not greedy, rng=rng)
    N = state.n_nodes
    max_steps = 4 * N if max_steps is None else max_steps
    profile = model.profile
    with torch.no_grad():
        steps = 0
        while state.queue:
            if steps >= max_steps:
                raise DecodeRunawayError(f"decode exceeded {max_steps} steps")
            steps += 1
            i = state.queue[0]
            h, H = state.h, state.H
            scores, stop = connect_scores(
                model, h.unsqueeze(0), state.H_init.unsqueeze(0), H.unsqueeze(0),
                state.dist[i].unsqueeze(0), h[i].unsqueeze(0),
            )
            allowed = np.append(_candidate_mask(state, i), 1).astype(np.float64)
            p = dn.masked_softmax(torch.cat([scores[0], stop]), torch.from_numpy(allowed)).numpy()
            j = _choose_connection(p, greedy, rng)
            rec = DecodeStep(i, p, allowed, j)
            if trace is not None:
                trace.append(rec)
            if j == N:
                close_focus(state, i)
                continue
            tmask = state.m[i, j].astype(np.float64)
            ts = type_scores(model, h[i], h[j], state.dist[i, j], state.H_init, H)
            pt = dn.masked_softmax(ts, torch.from_numpy(tmask)).numpy()
            ell = _choose(pt, greedy, rng)
            rec.p_type, rec.type_allowed, rec.edge_type = pt, tmask, ell
            add_edge(model, state, i, j, ell)
    return _assemble(profile, state, constraints, derive_seed(seed, 52))


def _assemble(profile, state: GenState, constraints, seed: int) -> DesignGraph:
    """Keep node 0, locked nodes and every node touched by an edge; relabel consecutively."""
    N = state.n_nodes
    nb = constraints.base.n_nodes if constraints is not None else 0
    keep = np.zeros(N, dtype=bool)
    for u, v in state.edges:
        keep[u] = keep[v] = True
    keep[:nb] = True
    keep[0] = True
    remap = {int(old): new for new, old in enumerate(np.flatnonzero(keep))}
    rng = np.random.default_rng(seed)
    nodes = []
    for old, new in remap.items():
        if old < nb:
            nodes.append(constraints.base.nodes[old])
            continue
        cls = int(state.types[old])
        lo, hi = profile.magnitude_ranges.get(cls, (0.0, 0.0))
        mag = float(lo + (hi - lo) * rng.random())
        x, y = state.pos[old]
        nodes.append(NodeAttr(new, cls, mag, (float(x), float(y))))
    edges = list(constraints.base.edges) if constraints is not None else []
    cost = 0.5 * (profile.cost_range[0] + profile.cost_range[1])
    for (u, v), ell in sorted(state.edges.items()):
        edges.append(EdgeAttr(remap[u], remap[v], int(ell), float(profile.capacity_bins[ell]), cost))
    return DesignGraph(tuple(nodes), tuple(edges), profile.name)


# ---------------------------------------------------------------------------
# training


def loss_terms(
    model: GeneratorModel, batch: GraphTensors, labels: torch.Tensor, eps: torch.Tensor
) -> dict[str, torch.Tensor]:
    """Batch-mean KL, batch-mean decode NLL and the normalized performance residual norm."""
    mu, ls = encode_tensors(model, batch)
    m = batch.mask.unsqueeze(-1)
    z = (mu + torch.exp(ls) * eps) * m
    kl = (dn.kl_standard_normal_logsigma(mu, ls) * batch.mask).sum(-1).mean()
    dec = decode_loss_batch(model, z, batch).mean()
    resid = (performance_head_batch(model, z, batch.mask) - labels) / model.q_unit
    perf = torch.sqrt(resid.pow(2).mean() + 1e-12)
    return {"kl": kl, "dec": dec, "perf": perf}


def train_generator(
    model: GeneratorModel,
    dataset,
    epochs: int = 20,
    weights: LossWeights = LossWeights(),
    rule=None,
    batch_size: int = 32,
    seed: int = 0,
    indices=None,
    packed: GraphTensors | None = None,
    kl_warmup: int = 0,
):
    """Joint minimization of w_kl KL + w_dec NLL + w_perf |R(z) - Q|; one history row per epoch.

    With ``kl_warmup=k`` the KL weight ramps linearly from w_kl/k up to w_kl
    over the first k epochs, which keeps the encoder from collapsing onto
    the prior before the decoder learns to read z.
    """
    rule = rule or Adam(2e-3)
    graphs = list(dataset.graphs)
    labels = np.asarray(dataset.labels, dtype=np.float64)
    idx_all = np.arange(len(graphs)) if indices is None else np.asarray(indices)
    if not model.fitted:
        model.fit_scaling([graphs[i] for i in idx_all], labels[idx_all])
    if packed is None:
        packed = pack_graphs(model, graphs)
    y = torch.from_numpy(labels)
    opt = dn.Optimizer(model.params, rule)
    rng = np.random.default_rng(derive_seed(seed, 61))
    history = []
    for epoch in range(1, epochs + 1):
        order = idx_all[rng.permutation(len(idx_all))]
        sums = {"kl": 0.0, "dec": 0.0, "perf": 0.0, "total": 0.0}
        w_kl = weights.kl * min(1.0, epoch / kl_warmup) if kl_warmup > 0 else weights.kl
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            batch = packed.take(idx)
            eps = torch.from_numpy(rng.standard_normal((len(idx), batch.x.shape[1], model.d)))
            terms = loss_terms(model, batch, y[torch.from_numpy(idx)], eps)
            total = w_kl * terms["kl"] + weights.dec * terms["dec"] + weights.perf * terms["perf"]
            if not torch.isfinite(total):
                raise dn.TrainingDivergenceError(f"non-finite generator loss at epoch {epoch}")
            total.backward()
            opt.step()
            for k, v in terms.items():
                sums[k] += float(v.detach()) * len(idx)
            sums["total"] += float(total.detach()) * len(idx)
        row = {"epoch": epoch}
        row.update({k: v / len(order) for k, v in sums.items()})
        history.append(row)
    return model, history
