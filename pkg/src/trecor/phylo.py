"""Binary phylogenies and the leaf <-> internal-node count transform.

Internal nodes are numbered ``0..q-1`` in depth-first (preorder) order, so the
root is node 0 and every matrix indexed by internal node is reported in DFS
order.  Leaves keep the order in which they appear in the Newick string and
are addressed as node ids ``q..2q`` (leaf ``k`` has id ``q + k``).
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, TreeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PhyloTree:
    """Rooted, strictly binary topology over ``q + 1`` named leaves.

    ``children[j] = (left, right)`` holds node ids (internal ``< q``, leaf
    ``>= q``); ``parent`` covers all ``2q + 1`` nodes with -1 at the root.
    """

    leaf_names: tuple[str, ...]
    children: np.ndarray
    parent: np.ndarray
    dfs_order: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        q = self.children.shape[0]
        if len(self.leaf_names) != q + 1:
            raise TreeError(f"tree has {q} internal nodes but {len(self.leaf_names)} leaves")
        if self.dfs_order is None:
            object.__setattr__(self, "dfs_order", np.arange(q))
        self.children.setflags(write=False)
        self.parent.setflags(write=False)

    @property
    def q(self) -> int:
        return self.children.shape[0]

    @property
    def n_leaves(self) -> int:
        return self.q + 1

    def is_leaf(self, node: int) -> bool:
        return node >= self.q

    def leaf_index(self, node: int) -> int:
        return node - self.q

    def clade(self, j: int) -> list[int]:
        """Leaf indices below internal node ``j`` (left subtree first)."""
        out: list[int] = []
        stack = [j]
        while stack:
            node = stack.pop()
            if node >= self.q:
                out.append(node - self.q)
            else:
                left, right = self.children[node]
                stack.append(right)
                stack.append(left)
        return out

    def left_clade(self, j: int) -> list[int]:
        left = int(self.children[j, 0])
        return [left - self.q] if left >= self.q else self.clade(left)

    def clade_names(self, j: int) -> list[str]:
        return [self.leaf_names[k] for k in self.clade(j)]

    def depth(self) -> np.ndarray:
        """Edge depth of each internal node below the root."""
        depth = np.zeros(self.q, dtype=int)
        for j in range(1, self.q):  # preorder: parent precedes child
            depth[j] = depth[self.parent[j]] + 1
        return depth

    def to_newick(self) -> str:
        def render(node: int) -> str:
            if node >= self.q:
                return _quote(self.leaf_names[node - self.q])
            left, right = self.children[node]
            return f"({render(left)},{render(right)})"

        return render(0) + ";"

    def topology_hash(self) -> str:
        return hashlib.sha256(self.to_newick().encode()).hexdigest()[:16]


@dataclass(frozen=True)
class CountMatrix:
    z: np.ndarray
    taxon_names: tuple[str, ...]
    sample_ids: tuple[str, ...]

    def __post_init__(self):
        z = np.asarray(self.z)
        if z.ndim != 2 or z.shape != (len(self.sample_ids), len(self.taxon_names)):
            raise ConfigError(f"count matrix shape {z.shape} does not match labels")
        if np.any(z < 0):
            raise ConfigError("counts must be nonnegative")
        if not np.all(np.equal(np.mod(z, 1), 0)):
            raise ConfigError("counts must be integers")
        object.__setattr__(self, "z", z.astype(np.int64))


@dataclass(frozen=True)
class NodeCounts:
    """Clade totals ``N`` and left-subclade totals ``y``, both ``n x q``."""

    N: np.ndarray
    y: np.ndarray
    sample_ids: tuple[str, ...] = ()
    tree_hash: str = ""

    def __post_init__(self):
        if self.N.shape != self.y.shape:
            raise ConfigError("N and y must have the same shape")
        if np.any(self.y < 0) or np.any(self.y > self.N):
            raise ConfigError("node counts violate 0 <= y <= N")
        if not self.sample_ids:
            object.__setattr__(self, "sample_ids", tuple(f"s{i}" for i in range(self.N.shape[0])))

    @property
    def n(self) -> int:
        return self.N.shape[0]

    @property
    def q(self) -> int:
        return self.N.shape[1]

    def subset(self, rows) -> "NodeCounts":
        rows = np.asarray(rows)
        ids = tuple(np.asarray(self.sample_ids, dtype=object)[rows])
        return NodeCounts(self.N[rows], self.y[rows], ids, self.tree_hash)


# --------------------------------------------------------------------------
# Newick parsing


def _quote(name: str) -> str:
    if any(c in name for c in "(),:;[]' \t"):
        return "'" + name.replace("'", "''") + "'"
    return name


class _Node:
    __slots__ = ("name", "kids")

    def __init__(self, name=None, kids=None):
        self.name = name
        self.kids = kids or []


class _NewickReader:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def fail(self, msg: str):
        raise TreeError(f"Newick syntax error at position {self.pos}: {msg}")

    def skip(self):
        t = self.text
        while self.pos < len(t):
            c = t[self.pos]
            if c.isspace():
                self.pos += 1
            elif c == "[":
                end = t.find("]", self.pos)
                if end < 0:
                    self.fail("unterminated comment")
                self.pos = end + 1
            else:
                break

    def peek(self) -> str:
        self.skip()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def label(self) -> str:
        self.skip()
        t = self.text
        if self.pos < len(t) and t[self.pos] == "'":
            out = []
            self.pos += 1
            while True:
                if self.pos >= len(t):
                    self.fail("unterminated quoted label")
                c = t[self.pos]
                if c == "'":
                    if self.pos + 1 < len(t) and t[self.pos + 1] == "'":
                        out.append("'")
                        self.pos += 2
                        continue
                    self.pos += 1
                    break
                out.append(c)
                self.pos += 1
            return "".join(out)
        start = self.pos
        while self.pos < len(t) and t[self.pos] not in "(),:;[" and not t[self.pos].isspace():
            self.pos += 1
        return t[start:self.pos]

    def branch_length(self):
        if self.peek() == ":":
            self.pos += 1
            self.skip()
            start = self.pos
            while self.pos < len(self.text) and self.text[self.pos] not in "(),;[" and not self.text[self.pos].isspace():
                self.pos += 1
            try:
                float(self.text[start:self.pos])
            except ValueError:
                self.fail("invalid branch length")

    def subtree(self) -> _Node:
        if self.peek() == "(":
            self.pos += 1
            kids = [self.subtree()]
            while self.peek() == ",":
                self.pos += 1
                kids.append(self.subtree())
            if self.peek() != ")":
                self.fail("expected ',' or ')'")
            self.pos += 1
            self.label()  # internal labels / support values are ignored
            self.branch_length()
            return _Node(kids=kids)
        name = self.label()
        if not name:
            self.fail("empty leaf label")
        self.branch_length()
        return _Node(name=name)

    def parse(self) -> _Node:
        root = self.subtree()
        if self.peek() != ";":
            self.fail("expected ';'")
        self.pos += 1
        if self.peek():
            self.fail("trailing characters after ';'")
        return root


def parse_newick(text: str, resolve_multifurcations: bool = False) -> PhyloTree:
    """Parse a Newick string into a strictly binary :class:`PhyloTree`.

    Branch lengths and internal labels are accepted and discarded.  Nodes with
    more than two children are rejected unless ``resolve_multifurcations`` is
    set, in which case they are split left-deep, ``(a,b,c) -> ((a,b),c)``.
    """
    root = _NewickReader(text.strip()).parse()

    def fix(node: _Node) -> _Node:
        if not node.kids:
            return node
        kids = [fix(k) for k in node.kids]
        if len(kids) == 1:
            raise TreeError("unary internal node (one child) in tree")
        if len(kids) > 2:
            if not resolve_multifurcations:
                raise TreeError(f"non-binary node with {len(kids)} children; "
                                "pass resolve_multifurcations=True to binarise")
            log.warning("resolving %d-way multifurcation left-deep", len(kids))
            acc = _Node(kids=kids[:2])
            for k in kids[2:]:
                acc = _Node(kids=[acc, k])
            return acc
        return _Node(kids=kids)

    if not root.kids:
        raise TreeError("tree needs at least 2 leaves")
    if len(root.kids) == 1 and not root.kids[0].kids:
        raise TreeError("tree needs at least 2 leaves")
    root = fix(root)
    return _build(root)


def _build(root: _Node) -> PhyloTree:
    leaves: list[str] = []
    internals: list[_Node] = []

    # leaves in listing order, internals in preorder
    stack = [root]
    while stack:
        node = stack.pop()
        if node.kids:
            internals.append(node)
            stack.extend(reversed(node.kids))
        else:
            leaves.append(node.name)
    if len(set(leaves)) != len(leaves):
        dup = sorted({x for x in leaves if leaves.count(x) > 1})
        raise TreeError(f"duplicate leaf labels: {dup}")

    q = len(internals)
    ids = {id(node): j for j, node in enumerate(internals)}
    leaf_ids = {}
    k = 0
    stack = [root]
    while stack:
        node = stack.pop()
        if node.kids:
            stack.extend(reversed(node.kids))
        else:
            leaf_ids[id(node)] = q + k
            k += 1
    children = np.empty((q, 2), dtype=np.int64)
    parent = np.full(2 * q + 1, -1, dtype=np.int64)
    for j, node in enumerate(internals):
        for side, kid in enumerate(node.kids):
            cid = ids.get(id(kid), leaf_ids.get(id(kid)))
            children[j, side] = cid
            parent[cid] = j
    return PhyloTree(tuple(leaves), children, parent)


def read_newick(path: str | os.PathLike, resolve_multifurcations: bool = False) -> PhyloTree:
    with open(path) as fh:
        return parse_newick(fh.read(), resolve_multifurcations)


def write_newick(tree: PhyloTree, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(tree.to_newick() + "\n")


def random_binary_tree(leaf_names: Sequence[str], rng: np.random.Generator) -> PhyloTree:
    """Coalescent-style topology: repeatedly merge two uniformly chosen subtrees."""
    if len(leaf_names) < 2:
        raise TreeError("tree needs at least 2 leaves")
    pool = [_Node(name=str(nm)) for nm in leaf_names]
    while len(pool) > 1:
        a, b = rng.choice(len(pool), size=2, replace=False)
        merged = _Node(kids=[pool[a], pool[b]])
        pool = [p for i, p in enumerate(pool) if i not in (a, b)]
        pool.append(merged)
    return _build(pool[0])


# --------------------------------------------------------------------------
# count transforms


def read_counts(path: str | os.PathLike) -> CountMatrix:
    """Read a samples x taxa table (CSV or TSV, first column = sample ids)."""
    sep = "\t" if str(path).endswith((".tsv", ".txt")) else ","
    df = pd.read_csv(path, sep=sep, index_col=0)
    return CountMatrix(df.to_numpy(), tuple(map(str, df.columns)), tuple(map(str, df.index)))


def write_counts(counts: CountMatrix, path: str | os.PathLike) -> None:
    df = pd.DataFrame(counts.z, index=list(counts.sample_ids), columns=list(counts.taxon_names))
    df.index.name = "sample"
    df.to_csv(path, sep="\t" if str(path).endswith((".tsv", ".txt")) else ",")


def _align(tree: PhyloTree, taxon_names: Sequence[str]) -> np.ndarray:
    """Column index into the count matrix for each tree leaf."""
    where = {nm: i for i, nm in enumerate(taxon_names)}
    missing = [nm for nm in tree.leaf_names if nm not in where]
    extra = sorted(set(taxon_names) - set(tree.leaf_names))
    if missing or extra:
        raise ConfigError(f"taxa do not match tree leaves: missing={missing[:5]} unmatched={extra[:5]}")
    return np.array([where[nm] for nm in tree.leaf_names])


def clade_totals(tree: PhyloTree, z_leaf: np.ndarray) -> np.ndarray:
    """Totals for all ``2q + 1`` nodes given leaf-ordered values (n x (q+1))."""
    q = tree.q
    tot = np.zeros(z_leaf.shape[:-1] + (2 * q + 1,), dtype=z_leaf.dtype)
    tot[..., q:] = z_leaf
    for j in range(q - 1, -1, -1):
        left, right = tree.children[j]
        tot[..., j] = tot[..., left] + tot[..., right]
    return tot


def leaf_to_node_counts(tree: PhyloTree, counts: CountMatrix, drop_empty: bool = True) -> NodeCounts:
    z = counts.z[:, _align(tree, counts.taxon_names)]
    keep = z.sum(axis=1) > 0
    if not keep.all():
        if not drop_empty:
            raise ConfigError(f"{int((~keep).sum())} samples have zero total count")
        log.warning("dropping %d samples with zero library size", int((~keep).sum()))
    z = z[keep]
    ids = tuple(np.asarray(counts.sample_ids, dtype=object)[keep])
    tot = clade_totals(tree, z)
    q = tree.q
    N = tot[:, :q].copy()
    y = tot[:, tree.children[:, 0]]
    return NodeCounts(N, y, ids, tree.topology_hash())


def node_to_leaf_counts(tree: PhyloTree, nodes: NodeCounts) -> np.ndarray:
    """Leaf counts implied by each leaf's parent pair (``y`` for a left child, ``N - y`` for a right child)."""
    q = tree.q
    z = np.zeros((nodes.n, q + 1), dtype=np.int64)
    for j in range(q):
        left, right = tree.children[j]
        if left >= q:
            z[:, left - q] = nodes.y[:, j]
        if right >= q:
            z[:, right - q] = nodes.N[:, j] - nodes.y[:, j]
    return z


def node_log_odds(nodes: NodeCounts, pseudocount: float = 0.5) -> np.ndarray:
    if pseudocount <= 0:
        raise ConfigError("pseudocount must be positive")
    y = nodes.y.astype(float)
    return np.log((y + pseudocount) / (nodes.N - y + pseudocount))


def node_probabilities(tree: PhyloTree, theta: np.ndarray) -> np.ndarray:
    """Map leaf relative abundances (leaf order, ... x (q+1)) to split probabilities."""
    tot = clade_totals(tree, np.asarray(theta, dtype=float))
    return tot[..., tree.children[:, 0]] / tot[..., : tree.q]


def leaf_probabilities(tree: PhyloTree, p: np.ndarray) -> np.ndarray:
    """Inverse of :func:`node_probabilities`: push mass down from the root."""
    p = np.asarray(p, dtype=float)
    q = tree.q
    mass = np.zeros(p.shape[:-1] + (2 * q + 1,))
    mass[..., 0] = 1.0
    for j in range(q):
        left, right = tree.children[j]
        mass[..., left] = mass[..., j] * p[..., j]
        mass[..., right] = mass[..., j] * (1.0 - p[..., j])
    return mass[..., q:]


def tree_graph_distance(tree: PhyloTree) -> np.ndarray:
    """Edge counts between internal nodes (q x q)."""
    q = tree.q
    anc = [None] * q
    for j in range(q):
        path = {}
        node, steps = j, 0
        while node >= 0:
            path[node] = steps
            node = tree.parent[node]
            steps += 1
        anc[j] = path
    dist = np.zeros((q, q), dtype=np.int64)
    for j in range(q):
        for k in range(j + 1, q):
            # first ancestor of k that is also an ancestor of j
            node, up = k, 0
            while node not in anc[j]:
                node = tree.parent[node]
                up += 1
            dist[j, k] = dist[k, j] = up + anc[j][node]
    return dist


def save_node_counts(nodes: NodeCounts, outdir: str | os.PathLike, tree: PhyloTree | None = None) -> None:
    """Write ``N.csv``, ``y.csv`` and a ``nodecounts.json`` sidecar."""
    os.makedirs(outdir, exist_ok=True)
    cols = [f"node{j}" for j in range(nodes.q)]
    for name, mat in (("N", nodes.N), ("y", nodes.y)):
        df = pd.DataFrame(mat, index=list(nodes.sample_ids), columns=cols)
        df.index.name = "sample"
        df.to_csv(os.path.join(outdir, f"{name}.csv"))
    meta = {
        "n": nodes.n,
        "q": nodes.q,
        "tree_hash": nodes.tree_hash or (tree.topology_hash() if tree else ""),
        "node_order": "dfs-preorder",
    }
    with open(os.path.join(outdir, "nodecounts.json"), "w") as fh:
        json.dump(meta, fh, indent=2)


def load_node_counts(indir: str | os.PathLike) -> NodeCounts:
    N = pd.read_csv(os.path.join(indir, "N.csv"), index_col=0)
    y = pd.read_csv(os.path.join(indir, "y.csv"), index_col=0)
    with open(os.path.join(indir, "nodecounts.json")) as fh:
        meta = json.load(fh)
    return NodeCounts(N.to_numpy().astype(np.int64), y.to_numpy().astype(np.int64),
                      tuple(map(str, N.index)), meta.get("tree_hash", ""))


def dfs_labels(tree: PhyloTree) -> list[str]:
    return [f"node{j}" for j in range(tree.q)]


def iter_edges(tree: PhyloTree) -> Iterable[tuple[int, int]]:
    for j in range(1, tree.q):
        yield int(tree.parent[j]), j


def tree_path(tree: PhyloTree, j: int, k: int) -> list[int]:
    """Internal nodes on the path from ``j`` to ``k`` (both included)."""
    up_j = [j]
    while tree.parent[up_j[-1]] >= 0:
        up_j.append(int(tree.parent[up_j[-1]]))
    pos = {node: i for i, node in enumerate(up_j)}
    up_k = [k]
    while up_k[-1] not in pos:
        up_k.append(int(tree.parent[up_k[-1]]))
    return up_j[: pos[up_k[-1]] + 1] + up_k[-2::-1]


def prune_tree(tree: PhyloTree, keep: Sequence[str]) -> PhyloTree:
    """Restrict to the named leaves, splicing out nodes left with one child."""
    keep_set = set(keep)
    missing = keep_set - set(tree.leaf_names)
    if missing:
        raise TreeError(f"cannot keep unknown leaves: {sorted(missing)[:5]}")
    if len(keep_set) < 2:
        raise TreeError("pruned tree needs at least 2 leaves")

    def rebuild(node: int):
        if node >= tree.q:
            name = tree.leaf_names[node - tree.q]
            return _Node(name=name) if name in keep_set else None
        kids = [k for k in (rebuild(int(c)) for c in tree.children[node]) if k is not None]
        if not kids:
            return None
        return kids[0] if len(kids) == 1 else _Node(kids=kids)

    return _build(rebuild(0))
