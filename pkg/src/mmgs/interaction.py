"""Stage 2: scene-graph interaction refinement.

Instances become nodes of a per-frame graph with an undirected edge
whenever their stage-0 axis-aligned bounding boxes intersect (closed
boxes, so touching faces count). A two-layer graph attention network
propagates the fused instance features along edges, and a decoder turns
the aggregated feature of each active instance (degree >= tau) into
per-instance residuals: a squashed center translation, a degree-0 color
shift, and an opacity-logit shift, broadcast to all of the instance's
Gaussians. Rotation and scale keep their stage-1 values.
"""

from __future__ import annotations

import json

import numpy as np

from . import diffgrad as dg
from . import nn
from .diffgrad import Tensor

CENTER_SHIFT_BOUND = 0.05
_NEG_INF = -1e30


def instance_aabb(centers):
    """Closed axis-aligned bounding box [min, max] of an instance."""
    pts = centers.data if isinstance(centers, Tensor) else np.asarray(centers)
    if pts.size == 0:
        raise ValueError("cannot bound an empty instance")
    return pts.min(axis=0), pts.max(axis=0)


def boxes_intersect(box_a, box_b):
    mn_a, mx_a = box_a
    mn_b, mx_b = box_b
    return bool(np.all(mn_a <= mx_b) and np.all(mn_b <= mx_a))


class SceneGraph:
    """Instance nodes with fused features and proximity edges."""

    def __init__(self, node_ids, features, edges):
        self.node_ids = list(node_ids)
        self.features = features
        index = {nid: i for i, nid in enumerate(self.node_ids)}
        canon = set()
        for i, p in edges:
            if i == p:
                raise ValueError("self-edges are not allowed")
            canon.add((min(i, p), max(i, p)))
        self.edges = sorted(canon)
        self._index = index
        deg = np.zeros(len(self.node_ids), dtype=np.int64)
        for i, p in self.edges:
            deg[index[i]] += 1
            deg[index[p]] += 1
        self.degrees = deg

    @property
    def node_count(self):
        return len(self.node_ids)

    def degree(self, node_id):
        return int(self.degrees[self._index[node_id]])

    def adjacency_with_self_loops(self):
        m = self.node_count
        adj = np.eye(m, dtype=bool)
        for i, p in self.edges:
            a, b = self._index[i], self._index[p]
            adj[a, b] = adj[b, a] = True
        return adj

    def to_debug_dict(self, frame, active):
        return {
            "frame": int(frame),
            "nodes": [int(n) for n in self.node_ids],
            "edges": [[int(i), int(p)] for i, p in self.edges],
            "active": [int(a) for a in active],
        }


def build_scene_graph(instance_boxes, features):
    """instance_boxes: {instance_id: (min3, max3)}; features: (M,64) Tensor
    ordered like sorted(instance_boxes)."""
    ids = sorted(instance_boxes)
    edges = []
    for a_pos, i in enumerate(ids):
        for p in ids[a_pos + 1 :]:
            if boxes_intersect(instance_boxes[i], instance_boxes[p]):
                edges.append((i, p))
    return SceneGraph(ids, features, edges)


def active_instances(graph, tau_deg):
    """Node ids with degree (self-loops excluded) >= tau_deg."""
    return [nid for nid in graph.node_ids if graph.degree(nid) >= tau_deg]


class GraphAttention:
    """Two GAT layers: four 16-wide heads concatenated (ELU) then four
    64-wide heads averaged with no output nonlinearity. Dropout on the
    attention coefficients in training mode only."""

    def __init__(self, rng, feature_dim=64, hidden_dim=64, heads=4, dropout=0.1,
                 name="gat"):
        if hidden_dim % heads:
            raise ValueError("hidden_dim must be divisible by the head count")
        self.heads = heads
        self.dropout = dropout
        head_dim = hidden_dim // heads
        self.layer1 = [
            _GatHead(rng, feature_dim, head_dim, f"{name}.l1h{h}")
            for h in range(heads)
        ]
        self.layer2 = [
            _GatHead(rng, hidden_dim, hidden_dim, f"{name}.l2h{h}")
            for h in range(heads)
        ]

    def __call__(self, node_features, graph, training=False, rng=None):
        if training and self.dropout > 0 and rng is None:
            raise ValueError("training-mode GAT needs a dropout rng")
        adj = graph.adjacency_with_self_loops()
        mask = Tensor(
            np.where(adj, 0.0, _NEG_INF).astype(node_features.dtype)
        )
        h1 = dg.concatenate(
            [
                head(node_features, mask, training, rng, self.dropout)
                for head in self.layer1
            ],
            axis=1,
        )
        h1 = dg.elu(h1)
        acc = None
        for head in self.layer2:
            out = head(h1, mask, training, rng, self.dropout)
            acc = out if acc is None else acc + out
        return acc * (1.0 / self.heads)

    def parameters(self):
        return [p for head in self.layer1 + self.layer2 for p in head.parameters()]


class _GatHead:
    def __init__(self, rng, in_dim, out_dim, name):
        self.lin = nn.Linear(rng, in_dim, out_dim, f"{name}.lin")
        self.att_src = nn.Linear(rng, out_dim, 1, f"{name}.att_src")
        self.att_dst = nn.Linear(rng, out_dim, 1, f"{name}.att_dst")

    def __call__(self, x, mask, training, rng, dropout):
        m = x.shape[0]
        wh = self.lin(x)
        s_src = self.att_src(wh).reshape(m, 1)
        s_dst = self.att_dst(wh).reshape(1, m)
        scores = dg.leaky_relu(s_src + s_dst, slope=0.2) + mask
        att = dg.softmax(scores, axis=1)
        att = dg.dropout(att, dropout, rng, training)
        return dg.matmul(att, wh)

    def parameters(self):
        return (
            self.lin.parameters()
            + self.att_src.parameters()
            + self.att_dst.parameters()
        )


def gat_attention_weights(gat, node_features, graph):
    """Evaluation-mode attention matrix of the first head of layer 1
    (rows sum to one over each node's closed neighborhood)."""
    adj = graph.adjacency_with_self_loops()
    mask = Tensor(np.where(adj, 0.0, _NEG_INF).astype(node_features.dtype))
    head = gat.layer1[0]
    m = node_features.shape[0]
    wh = head.lin(node_features)
    s_src = head.att_src(wh).reshape(m, 1)
    s_dst = head.att_dst(wh).reshape(1, m)
    return dg.softmax(dg.leaky_relu(s_src + s_dst, slope=0.2) + mask, axis=1).data


class InteractionDecoder:
    """64-dim aggregated feature -> 7 residuals: center shift (3, squashed
    to |dx| <= 0.05 scene units), degree-0 color shift (3), opacity-logit
    shift (1). Zero-initialized final layer."""

    def __init__(self, rng, feature_dim=64, name="interaction_decoder"):
        self.mlp = nn.Mlp(rng, feature_dim, [64], 7, name, zero_init_last=True)

    def __call__(self, feature):
        raw = self.mlp(feature)
        d_center = dg.tanh(raw[:, 0:3]) * CENTER_SHIFT_BOUND
        d_color0 = raw[:, 3:6]
        d_logit = raw[:, 6]
        return d_center, d_color0, d_logit

    def parameters(self):
        return self.mlp.parameters()


def decode_interaction(decoder, aggregated):
    return decoder(aggregated)


def apply_stage2_updates(stage1_sets, residuals):
    """Broadcast per-instance residuals onto each active instance.

    stage1_sets: {instance_id: GaussianSet} after fusion (centers still
    the stage-0 values). residuals: {instance_id: (d_center, d_color0,
    d_logit)} for the active subset; ids not present pass through.
    """
    out = {}
    for iid, gs in stage1_sets.items():
        if iid not in residuals:
            out[iid] = gs
            continue
        d_center, d_color0, d_logit = residuals[iid]
        sh = dg.concatenate(
            [gs.sh_coeffs[:, 0:1, :] + d_color0.reshape(1, 1, 3),
             gs.sh_coeffs[:, 1:, :]],
            axis=1,
        )
        out[iid] = gs.replace(
            centers=gs.centers + d_center.reshape(1, 3),
            sh_coeffs=sh,
            opacity_logit=gs.opacity_logit + d_logit,
        )
    return out


def dump_scene_graph(path, graph, frame, active):
    with open(path, "w") as f:
        json.dump(graph.to_debug_dict(frame, active), f, indent=1)
        f.write("\n")
