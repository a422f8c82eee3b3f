"""Single-linkage agglomeration of trajectories into a birth-indexed tree.

Each merge at distance b creates a cluster node born at b and kills its two
children at the same value. Reading the dendrogram by threshold gives, for any
b >= 0, an "alive" set of nodes (born at or before b, not yet dead) that
partitions the trajectory corpus; the tree-class distance between two nodes is
the birth index of their lowest common ancestor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .geometry import validate_distance_matrix


@dataclass(frozen=True)
class ClusterNode:
    id: int
    members: frozenset
    birth: float
    death: float  # math.inf for the root
    parent: int | None
    children: tuple[int, ...]

    @property
    def is_leaf(self) -> bool:
        return not self.children


class ClusterTree:
    """Immutable cluster hierarchy with level queries.

    Node ids are assigned in creation order: leaves 0..M-1 in corpus order,
    then one id per merge. Children therefore always carry smaller ids than
    their parents, which gives a topological order for free.
    """

    def __init__(self, nodes: dict[int, ClusterNode], root: int, leaf_count: int):
        self.nodes = dict(nodes)
        self.root = root
        self.leaf_count = leaf_count
        self._leaves_under_cache: dict[int, tuple[int, ...]] = {}
        self._leaf_by_member = {}
        for nid, node in self.nodes.items():
            if node.is_leaf:
                for m in node.members:
                    self._leaf_by_member[m] = nid

    def leaves(self) -> list[int]:
        return sorted(n for n, node in self.nodes.items() if node.is_leaf)

    def leaf_for(self, trajectory_id) -> int:
        try:
            return self._leaf_by_member[trajectory_id]
        except KeyError:
            raise InvalidInputError(f"unknown trajectory id {trajectory_id!r}") from None

    def _require(self, node_id: int) -> ClusterNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise InvalidInputError(f"unknown node id {node_id!r}") from None

    def alive_at(self, b: float) -> set[int]:
        """Nodes with birth <= b < death; their members partition the corpus."""
        if b < 0:
            raise InvalidInputError(f"level must be >= 0, got {b}")
        return {n for n, node in self.nodes.items() if node.birth <= b < node.death}

    def leaves_under(self, node_id: int) -> tuple[int, ...]:
        """Sorted leaf node ids in the subtree rooted at node_id."""
        cached = self._leaves_under_cache.get(node_id)
        if cached is not None:
            return cached
        node = self._require(node_id)
        if node.is_leaf:
            out: tuple[int, ...] = (node_id,)
        else:
            acc: list[int] = []
            for ch in node.children:
                acc.extend(self.leaves_under(ch))
            out = tuple(sorted(acc))
        self._leaves_under_cache[node_id] = out
        return out

    def lowest_common_ancestor(self, c1: int, c2: int) -> int:
        """LCA over parent links; every node is its own ancestor."""
        self._require(c1)
        self._require(c2)
        seen = set()
        n: int | None = c1
        while n is not None:
            seen.add(n)
            n = self.nodes[n].parent
        n = c2
        while n not in seen:
            n = self.nodes[n].parent
        return n

    def tree_class_distance(self, c1: int, c2: int) -> float:
        """Birth index of the lowest common ancestor of the two nodes."""
        return self.nodes[self.lowest_common_ancestor(c1, c2)].birth

    def ancestor_alive_at(self, node_id: int, b: float) -> int:
        """The unique node on the path from node_id to the root alive at b."""
        if b < 0:
            raise InvalidInputError(f"level must be >= 0, got {b}")
        n = self._require(node_id)
        nid = node_id
        while not (n.birth <= b < n.death):
            if n.parent is None:
                return nid
            nid = n.parent
            n = self.nodes[nid]
        return nid

    def unique_births(self) -> list[float]:
        return sorted({node.birth for node in self.nodes.values()})

    @property
    def root_birth(self) -> float:
        return self.nodes[self.root].birth

    def to_dict(self) -> dict:
        nodes = []
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            nodes.append({
                "id": n.id,
                "members": sorted(n.members),
                "birth": n.birth,
                "death": None if math.isinf(n.death) else n.death,
                "parent": n.parent,
                "children": list(n.children),
            })
        return {"nodes": nodes, "root": self.root}

    @classmethod
    def from_dict(cls, data: dict) -> "ClusterTree":
        nodes = {}
        for rec in data["nodes"]:
            death = rec["death"]
            nodes[rec["id"]] = ClusterNode(
                id=rec["id"],
                members=frozenset(rec["members"]),
                birth=float(rec["birth"]),
                death=math.inf if death is None else float(death),
                parent=rec["parent"],
                children=tuple(rec["children"]),
            )
        leaf_count = sum(1 for n in nodes.values() if n.is_leaf)
        return cls(nodes, data["root"], leaf_count)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ClusterTree":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def render_text(self) -> str:
        """Indented dendrogram listing birth and member count per node."""
        lines: list[str] = []

        def walk(nid: int, depth: int) -> None:
            n = self.nodes[nid]
            death = "inf" if math.isinf(n.death) else f"{n.death:g}"
            label = f"node {nid} [birth {n.birth:g}, death {death}] {len(n.members)} member(s)"
            if n.is_leaf:
                label += ": " + ", ".join(sorted(map(str, n.members)))
            lines.append("  " * depth + label)
            for ch in n.children:
                walk(ch, depth + 1)

        walk(self.root, 0)
        return "\n".join(lines)


def single_linkage(d, member_ids=None) -> ClusterTree:
    """Single-linkage dendrogram of a distance matrix.

    Repeatedly merges the pair of active clusters at minimum distance,
    breaking ties by the lexicographically smallest (i, j) node-id pair, and
    updates distances with the pointwise minimum rule. Merge distances become
    birth indices; leaves are born at 0 and the root never dies.
    """
    d = validate_distance_matrix(d)
    m = d.shape[0]
    if member_ids is None:
        member_ids = [str(i) for i in range(m)]
    if len(member_ids) != m:
        raise InvalidInputError("member_ids length must match matrix size")

    total = 2 * m - 1
    nodes: dict[int, ClusterNode] = {}
    members: dict[int, frozenset] = {}
    births = {}
    children: dict[int, tuple[int, int]] = {}
    for i in range(m):
        members[i] = frozenset([member_ids[i]])
        births[i] = 0.0

    if m == 1:
        nodes[0] = ClusterNode(0, members[0], 0.0, math.inf, None, ())
        return ClusterTree(nodes, 0, 1)

    # Working matrix indexed by node id; inactive rows masked to +inf.
    work = np.full((total, total), np.inf)
    work[:m, :m] = d
    np.fill_diagonal(work, np.inf)
    active = np.zeros(total, dtype=bool)
    active[:m] = True

    deaths = {}
    parents = {}
    next_id = m
    for _ in range(m - 1):
        sub = work[np.ix_(active, active)]
        flat = int(np.argmin(sub))
        ids = np.flatnonzero(active)
        i = int(ids[flat // sub.shape[0]])
        j = int(ids[flat % sub.shape[0]])
        if i > j:
            i, j = j, i
        dist = float(work[i, j])

        nid = next_id
        next_id += 1
        members[nid] = members[i] | members[j]
        births[nid] = dist
        children[nid] = (i, j)
        deaths[i] = dist
        deaths[j] = dist
        parents[i] = nid
        parents[j] = nid

        merged = np.minimum(work[i], work[j])
        work[nid, :] = merged
        work[:, nid] = merged
        work[nid, nid] = np.inf
        active[i] = False
        active[j] = False
        active[nid] = True

    root = next_id - 1
    for nid in range(total):
        nodes[nid] = ClusterNode(
            id=nid,
            members=members[nid],
            birth=births[nid],
            death=deaths.get(nid, math.inf),
            parent=parents.get(nid),
            children=children.get(nid, ()),
        )
    return ClusterTree(nodes, root, m)


def flat_tree(member_ids, root_birth: float = 1.0) -> ClusterTree:
    """Degenerate hierarchy: one root directly over one leaf per trajectory."""
    m = len(member_ids)
    if m < 1:
        raise InvalidInputError("need at least one member")
    nodes: dict[int, ClusterNode] = {}
    if m == 1:
        nodes[0] = ClusterNode(0, frozenset([member_ids[0]]), 0.0, math.inf, None, ())
        return ClusterTree(nodes, 0, 1)
    for i, mid in enumerate(member_ids):
        nodes[i] = ClusterNode(i, frozenset([mid]), 0.0, float(root_birth), m, ())
    nodes[m] = ClusterNode(m, frozenset(member_ids), float(root_birth), math.inf, None, tuple(range(m)))
    return ClusterTree(nodes, m, m)


def single_class_tree(member_ids) -> ClusterTree:
    """A one-node tree whose sole class pools every trajectory.

    Used to express a classless filter over the combined corpus in the same
    machinery; the usual one-trajectory-per-leaf shape is deliberately relaxed.
    """
    if len(member_ids) < 1:
        raise InvalidInputError("need at least one member")
    nodes = {0: ClusterNode(0, frozenset(member_ids), 0.0, math.inf, None, ())}
    return ClusterTree(nodes, 0, 1)
