"""Flowline preprocessing into a rooted reach tree.

Reaches are joined by hashing their endpoint coordinates: the downstream
node of a child reach is the upstream node of its parent.  Everything here
is a single pass over the reaches (plus a hash join), so construction time
grows near-linearly with network size.

Internally reaches are addressed by a dense index ``0..R-1``; the public
``reach_id`` values are kept in :attr:`StreamNetwork.reach_ids`.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import MalformedGeometryError, TopologyError, ValidationError

DEFAULT_PRECISION = 3


@dataclass(frozen=True)
class Flowline:
    """One reach as digitised: vertices run from the upstream to the downstream end."""

    reach_id: int
    vertices: np.ndarray
    length: float
    additive_attribute: float

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[0] < 2 or verts.shape[1] != 2:
            raise MalformedGeometryError(
                f"reach {self.reach_id}: need >= 2 (x, y) vertices, got shape {verts.shape}"
            )
        object.__setattr__(self, "vertices", verts)


@dataclass(frozen=True)
class ComplexConfluence:
    """A reach with more than two directly-upstream reaches.

    ``child_ids`` are sorted ascending by subtree additive attribute, ties by
    reach id, so ``child_ids[0]`` is the branch that would be removed first.
    """

    reach_id: int
    node: str
    child_ids: tuple
    subtree_attributes: tuple


def node_key(x, y, precision=DEFAULT_PRECISION):
    rx = round(float(x), precision) + 0.0  # +0.0 folds -0.0 into 0.0
    ry = round(float(y), precision) + 0.0
    return f"{rx:.{precision}f}_{ry:.{precision}f}"


def extract_nodes(flowlines, precision=DEFAULT_PRECISION):
    """Return ``(up_nodes, dn_nodes)``: canonical endpoint keys per reach."""
    up, dn = [], []
    for fl in flowlines:
        verts = np.asarray(fl.vertices)
        if verts.ndim != 2 or verts.shape[0] < 2:
            raise MalformedGeometryError(f"reach {fl.reach_id}: fewer than 2 vertices")
        up.append(node_key(verts[0, 0], verts[0, 1], precision))
        dn.append(node_key(verts[-1, 0], verts[-1, 1], precision))
    return up, dn


@dataclass(frozen=True)
class Adjacency:
    parent: np.ndarray  # -1 for outlets
    children: list
    component_id: np.ndarray
    is_source: np.ndarray
    is_outlet: np.ndarray


def build_adjacency(reach_ids, up_nodes, dn_nodes):
    """Join downstream nodes to upstream nodes and label tree components.

    Reach ``a`` is a child of ``b`` iff ``dn_nodes[a] == up_nodes[b]``.
    Raises :class:`TopologyError` on diverging channels and cycles.
    """
    n = len(reach_ids)
    by_up = {}
    for i, key in enumerate(up_nodes):
        by_up.setdefault(key, []).append(i)

    parent = np.full(n, -1, dtype=np.int64)
    children = [[] for _ in range(n)]
    for i, key in enumerate(dn_nodes):
        targets = by_up.get(key)
        if not targets:
            continue
        if len(targets) > 1:
            ids = [int(reach_ids[i])] + [int(reach_ids[t]) for t in targets]
            raise TopologyError(
                f"reach {reach_ids[i]} flows into {len(targets)} reaches "
                f"{[int(reach_ids[t]) for t in targets]} at node {key} (braided/diverging channel)",
                ids,
            )
        p = targets[0]
        if p == i:
            raise TopologyError(f"reach {reach_ids[i]} flows into itself", [int(reach_ids[i])])
        parent[i] = p
        children[p].append(i)

    component_id = np.full(n, -1, dtype=np.int64)
    outlets = np.flatnonzero(parent < 0)
    for comp, root in enumerate(outlets):
        stack = [root]
        while stack:
            r = stack.pop()
            component_id[r] = comp
            stack.extend(children[r])
    if (component_id < 0).any():
        bad = [int(reach_ids[i]) for i in np.flatnonzero(component_id < 0)]
        raise TopologyError(f"directed cycle among reaches {bad[:20]}", bad)

    is_source = np.array([len(c) == 0 for c in children], dtype=bool)
    return Adjacency(parent, children, component_id, is_source, parent < 0)


@dataclass(frozen=True)
class _Traversal:
    updist_dn: np.ndarray
    afv: np.ndarray
    euler_in: np.ndarray
    euler_out: np.ndarray
    depth: np.ndarray
    preorder: np.ndarray


def compute_updist_afv(parent, children, lengths, attributes):
    """One upstream traversal from every outlet.

    Fills upstream distance of each reach's downstream node, the additive
    function value (attribute share at each confluence, multiplied downstream
    to upstream), Euler interval labels and depth.
    """
    attributes = np.asarray(attributes, dtype=float)
    lengths = np.asarray(lengths, dtype=float)
    if (attributes <= 0).any() or not np.isfinite(attributes).all():
        bad = np.flatnonzero(~(attributes > 0))
        raise ValidationError(f"nonpositive additive attribute at reach index {bad[:20].tolist()}")

    n = len(parent)
    updist = np.zeros(n)
    afv = np.ones(n)
    ein = np.zeros(n, dtype=np.int64)
    eout = np.zeros(n, dtype=np.int64)
    depth = np.zeros(n, dtype=np.int64)
    preorder = np.empty(n, dtype=np.int64)
    clock = 0
    pos = 0
    for root in np.flatnonzero(np.asarray(parent) < 0):
        # (reach, exiting) pairs; exit markers close the Euler interval
        stack = [(int(root), False)]
        while stack:
            r, exiting = stack.pop()
            if exiting:
                eout[r] = clock
                clock += 1
                continue
            ein[r] = clock
            clock += 1
            preorder[pos] = r
            pos += 1
            stack.append((r, True))
            kids = children[r]
            if kids:
                top = updist[r] + lengths[r]
                total = sum(attributes[c] for c in kids)
                for c in reversed(kids):
                    updist[c] = top
                    afv[c] = afv[r] * (attributes[c] / total)
                    depth[c] = depth[r] + 1
                    stack.append((c, False))
    return _Traversal(updist, afv, ein, eout, depth, preorder)


@dataclass(frozen=True, eq=False)
class StreamNetwork:
    """Immutable rooted reach forest with all per-reach derived quantities."""

    flowlines: tuple
    precision: int
    reach_ids: np.ndarray
    lengths: np.ndarray
    attributes: np.ndarray
    up_node: tuple
    dn_node: tuple
    parent: np.ndarray
    children: tuple
    component_id: np.ndarray
    is_source: np.ndarray
    is_outlet: np.ndarray
    updist_dn: np.ndarray
    afv: np.ndarray
    euler_in: np.ndarray
    euler_out: np.ndarray
    depth: np.ndarray
    preorder: np.ndarray
    cleaning_steps: tuple = field(default=())

    @classmethod
    def from_flowlines(cls, flowlines, precision=DEFAULT_PRECISION, cleaning_steps=(), timings=None):
        t0 = time.perf_counter()
        flowlines = tuple(flowlines)
        reach_ids = np.array([fl.reach_id for fl in flowlines], dtype=np.int64)
        if len(np.unique(reach_ids)) != len(reach_ids):
            uniq, counts = np.unique(reach_ids, return_counts=True)
            raise ValidationError(f"duplicate reach_id values: {uniq[counts > 1][:20].tolist()}")
        lengths = np.array([fl.length for fl in flowlines], dtype=float)
        if not (lengths > 0).all():
            bad = reach_ids[~(lengths > 0)]
            raise ValidationError(f"nonpositive reach length for reaches {bad[:20].tolist()}")
        attributes = np.array([fl.additive_attribute for fl in flowlines], dtype=float)
        if not (attributes > 0).all():
            bad = reach_ids[~(attributes > 0)]
            raise ValidationError(f"nonpositive additive attribute for reaches {bad[:20].tolist()}")

        up, dn = extract_nodes(flowlines, precision)
        adj = build_adjacency(reach_ids, up, dn)
        t1 = time.perf_counter()
        trav = compute_updist_afv(adj.parent, adj.children, lengths, attributes)
        if timings is not None:
            timings["configure network"] = timings.get("configure network", 0.0) + t1 - t0
            timings["updist/AFV"] = timings.get("updist/AFV", 0.0) + time.perf_counter() - t1
        for arr in (reach_ids, lengths, attributes, adj.parent, adj.component_id,
                    adj.is_source, adj.is_outlet, trav.updist_dn, trav.afv,
                    trav.euler_in, trav.euler_out, trav.depth, trav.preorder):
            arr.setflags(write=False)
        return cls(
            flowlines=flowlines,
            precision=precision,
            reach_ids=reach_ids,
            lengths=lengths,
            attributes=attributes,
            up_node=tuple(up),
            dn_node=tuple(dn),
            parent=adj.parent,
            children=tuple(tuple(c) for c in adj.children),
            component_id=adj.component_id,
            is_source=adj.is_source,
            is_outlet=adj.is_outlet,
            updist_dn=trav.updist_dn,
            afv=trav.afv,
            euler_in=trav.euler_in,
            euler_out=trav.euler_out,
            depth=trav.depth,
            preorder=trav.preorder,
            cleaning_steps=tuple(cleaning_steps),
        )

    def __len__(self):
        return len(self.reach_ids)

    @property
    def n_components(self):
        return int(self.component_id.max()) + 1 if len(self) else 0

    @cached_property
    def index(self):
        """reach_id -> internal index."""
        return {int(r): i for i, r in enumerate(self.reach_ids)}

    def idx(self, reach_id):
        try:
            return self.index[int(reach_id)]
        except KeyError:
            raise ValidationError(f"unknown reach_id {reach_id}") from None

    @cached_property
    def subtree_attribute(self):
        """Sum of additive attributes over each reach and everything upstream of it."""
        total = self.attributes.copy()
        for r in self.preorder[::-1]:
            p = self.parent[r]
            if p >= 0:
                total[p] += total[r]
        return total

    @cached_property
    def lift(self):
        """Binary-lifting ancestor table, shape ``(levels, R)``; roots point to themselves."""
        n = len(self)
        levels = max(1, int(math.ceil(math.log2(max(int(self.depth.max(initial=0)), 1) + 1))))
        table = np.empty((levels, n), dtype=np.int64)
        base = self.parent.copy()
        roots = base < 0
        base[roots] = np.flatnonzero(roots)
        table[0] = base
        for k in range(1, levels):
            table[k] = table[k - 1][table[k - 1]]
        return table

    def is_ancestor(self, a, b):
        """True where reach ``a`` is ``b`` or lies downstream of ``b`` (vectorised)."""
        a = np.asarray(a)
        b = np.asarray(b)
        return (self.euler_in[a] <= self.euler_in[b]) & (self.euler_out[b] <= self.euler_out[a])

    def ancestor_at_depth(self, r, target_depth):
        """Lift reaches ``r`` to the given depths (vectorised; target <= depth)."""
        r = np.array(r, dtype=np.int64, copy=True)
        jump = self.depth[r] - np.asarray(target_depth)
        table = self.lift
        for k in range(table.shape[0]):
            sel = (jump >> k) & 1 == 1
            if sel.any():
                r[sel] = table[k][r[sel]]
        return r

    def junction_child(self, a, b):
        """For flow-unconnected reach pairs, the reaches directly above their junction.

        Returns ``(ca, cb)``: the ancestors of ``a`` and ``b`` that are children of
        the lowest common ancestor reach.  The junction node's upstream distance
        is ``updist_dn[ca]`` (== ``updist_dn[cb]``).
        """
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        da, db = self.depth[a], self.depth[b]
        common = np.minimum(da, db)
        ca = self.ancestor_at_depth(a, common)
        cb = self.ancestor_at_depth(b, common)
        table = self.lift
        for k in range(table.shape[0] - 1, -1, -1):
            ua, ub = table[k][ca], table[k][cb]
            move = ua != ub
            ca = np.where(move, ua, ca)
            cb = np.where(move, ub, cb)
        return ca, cb

    def subset(self, keep, step):
        """Rebuild from the flowlines where ``keep`` is true, recording ``step``."""
        keep = np.asarray(keep, dtype=bool)
        kept = [fl for fl, k in zip(self.flowlines, keep) if k]
        return StreamNetwork.from_flowlines(kept, self.precision, self.cleaning_steps + (step,))


def build_network(flowlines, precision=DEFAULT_PRECISION, fix_complex_confluences=False,
                  largest_component_only=False, timings=None):
    """Preprocess flowlines end to end, optionally applying the cleaning steps.

    If ``timings`` is a dict, seconds spent building topology and computing
    upstream distances / AFVs are accumulated into it (cleaning rebuilds
    count toward both).
    """
    net = StreamNetwork.from_flowlines(flowlines, precision, timings=timings)
    if fix_complex_confluences:
        for conf in find_complex_confluences(net):
            net = remove_smallest_branch(net, conf.reach_id)
    if largest_component_only:
        net = largest_component(net)
    return net


def find_complex_confluences(network):
    out = []
    sub = network.subtree_attribute
    for r, kids in enumerate(network.children):
        if len(kids) > 2:
            ranked = sorted(kids, key=lambda c: (sub[c], network.reach_ids[c]))
            out.append(ComplexConfluence(
                reach_id=int(network.reach_ids[r]),
                node=network.up_node[r],
                child_ids=tuple(int(network.reach_ids[c]) for c in ranked),
                subtree_attributes=tuple(float(sub[c]) for c in ranked),
            ))
    return out


def remove_smallest_branch(network, confluence):
    """Drop the smallest upstream branches of a confluence until two remain.

    ``confluence`` is a reach id or a :class:`ComplexConfluence`.  Branch size
    is the subtree total additive attribute; ties drop the smaller reach id.
    """
    rid = confluence.reach_id if isinstance(confluence, ComplexConfluence) else int(confluence)
    r = network.idx(rid)
    kids = network.children[r]
    if len(kids) <= 2:
        return network
    sub = network.subtree_attribute
    ranked = sorted(kids, key=lambda c: (sub[c], network.reach_ids[c]))
    drop = ranked[: len(kids) - 2]
    keep = np.ones(len(network), dtype=bool)
    for c in drop:
        inside = (network.euler_in >= network.euler_in[c]) & (network.euler_out <= network.euler_out[c])
        keep &= ~inside
    removed = [int(network.reach_ids[c]) for c in drop]
    step = {
        "step": "remove_smallest_branch",
        "confluence": rid,
        "removed_branch_roots": removed,
        "removed_reaches": int((~keep).sum()),
    }
    return network.subset(keep, step)


def largest_component(network):
    """Restrict to the component with most reaches (ties: smallest component id)."""
    if network.n_components <= 1:
        return network
    counts = np.bincount(network.component_id)
    best = int(np.argmax(counts))
    keep = network.component_id == best
    step = {
        "step": "largest_component",
        "component_id": best,
        "retained_reaches": int(keep.sum()),
        "total_reaches": len(network),
        "retained_fraction": float(keep.sum() / len(network)),
    }
    return network.subset(keep, step)


# --------------------------------------------------------------------- I/O

def read_flowlines_csv(path):
    """Read ``reach_id,length_m,additive_attr,wkt`` rows (LINESTRING WKT)."""
    import pandas as pd
    import shapely

    df = pd.read_csv(path)
    missing = {"reach_id", "length_m", "additive_attr", "wkt"} - set(df.columns)
    if missing:
        raise ValidationError(f"{path}: missing columns {sorted(missing)}")
    try:
        geoms = shapely.from_wkt(df["wkt"].to_numpy())
    except shapely.errors.GEOSException as exc:
        raise MalformedGeometryError(f"{path}: bad WKT ({exc})") from None
    out = []
    for rid, length, attr, geom in zip(df["reach_id"], df["length_m"], df["additive_attr"], geoms):
        if geom is None or geom.geom_type != "LineString":
            raise MalformedGeometryError(f"reach {rid}: expected LINESTRING")
        out.append(Flowline(int(rid), shapely.get_coordinates(geom), float(length), float(attr)))
    return out


def read_flowlines_ndjson(path):
    """Newline-delimited JSON: one object per reach with a ``coordinates`` array."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(Flowline(int(rec["reach_id"]), np.asarray(rec["coordinates"], dtype=float),
                                float(rec["length_m"]), float(rec["additive_attr"])))
    return out


def read_flowlines(path):
    path = Path(path)
    if path.suffix in (".ndjson", ".jsonl"):
        return read_flowlines_ndjson(path)
    return read_flowlines_csv(path)


def linestring_wkt(vertices):
    return "LINESTRING (" + ", ".join(f"{float(x)!r} {float(y)!r}" for x, y in vertices) + ")"


def write_flowlines_csv(flowlines, path):
    import pandas as pd

    pd.DataFrame({
        "reach_id": [fl.reach_id for fl in flowlines],
        "length_m": [fl.length for fl in flowlines],
        "additive_attr": [fl.additive_attribute for fl in flowlines],
        "wkt": [linestring_wkt(fl.vertices) for fl in flowlines],
    }).to_csv(path, index=False)


def save_network(network, directory, extra_manifest=None):
    """Persist as flat CSV tables plus ``manifest.json``."""
    import pandas as pd

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ids = network.reach_ids
    parent_ids = np.where(network.parent >= 0, ids[np.maximum(network.parent, 0)], -1)
    write_flowlines_csv(network.flowlines, d / "flowlines.csv")
    pd.DataFrame({
        "reach_id": ids,
        "length_m": network.lengths,
        "additive_attr": network.attributes,
        "up_node": network.up_node,
        "dn_node": network.dn_node,
        "component_id": network.component_id,
        "is_source": network.is_source,
        "is_outlet": network.is_outlet,
        "euler_in": network.euler_in,
        "euler_out": network.euler_out,
        "depth": network.depth,
    }).to_csv(d / "reaches.csv", index=False)
    has_parent = network.parent >= 0
    pd.DataFrame({"reach_id": ids[has_parent], "parent_id": parent_ids[has_parent]}).to_csv(
        d / "adjacency.csv", index=False)
    pd.DataFrame({"reach_id": ids, "updist_dn": network.updist_dn}).to_csv(d / "updist.csv", index=False)
    pd.DataFrame({"reach_id": ids, "afv": network.afv}).to_csv(d / "afv.csv", index=False)
    manifest = {
        "precision": network.precision,
        "n_reaches": len(network),
        "n_components": network.n_components,
        "cleaning_steps": list(network.cleaning_steps),
    }
    manifest.update(extra_manifest or {})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return d


def load_network(directory):
    """Reload a saved network; derived tables are recomputed and cross-checked."""
    import pandas as pd

    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    flowlines = read_flowlines_csv(d / "flowlines.csv")
    net = StreamNetwork.from_flowlines(flowlines, manifest["precision"], manifest.get("cleaning_steps", ()))
    stored = pd.read_csv(d / "updist.csv")
    if not np.allclose(stored["updist_dn"].to_numpy(), net.updist_dn, rtol=1e-12, atol=0):
        raise ValidationError(f"{d}: updist table does not match flowlines")
    return net
