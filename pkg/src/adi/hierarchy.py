"""Concept hierarchy over a dataset pool, with local/global probabilities.

Nodes live in an arena indexed by integer id; the root is id 0 and ids are
assigned breadth-first, so siblings are contiguous and ordered left to right.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from adi.datapool import DatasetPool
from adi.errors import EmptyClass, EmptyPool

PROB_FLOOR = 1e-6


@dataclass
class ConceptNode:
    id: int
    level: int
    parent: int | None
    children: list[int] = field(default_factory=list)
    local_prob: float = 1.0
    # (dataset index in the pool, class id); set on leaves only
    leaf_concept: tuple[int, int] | None = None


class LeafProb(NamedTuple):
    leaf: int
    dataset: int
    class_id: int
    prob: float


class ConceptHierarchy:
    def __init__(self, nodes: list[ConceptNode], rng_seed: int | None = None,
                 floor: float = PROB_FLOOR):
        self.nodes = nodes
        self.rng_seed = rng_seed
        self.floor = floor
        self.num_levels = max(n.level for n in nodes)
        self.leaves = [n.id for n in nodes if not n.children]
        self._leaf_pos = {leaf: i for i, leaf in enumerate(self.leaves)}
        self._check_structure()

    # --- construction -------------------------------------------------------

    @classmethod
    def from_pool(cls, pool: DatasetPool, rng_seed: int | None = None) -> "ConceptHierarchy":
        """Three levels: root, one node per dataset, one leaf per class."""
        if not pool.datasets:
            raise EmptyPool("cannot build a hierarchy from an empty pool")
        for ds in pool.datasets:
            for cid, arr in ds.classes.items():
                if len(arr) == 0:
                    raise EmptyClass(f"class {cid} of {ds.name} has no samples")
        nested = [[(i, cid) for cid in ds.class_ids] for i, ds in enumerate(pool.datasets)]
        return cls.from_nested(nested, rng_seed)

    @classmethod
    def from_nested(cls, tree: Sequence, rng_seed: int | None = None) -> "ConceptHierarchy":
        """Build from nested lists whose innermost items are leaf concepts.

        ``[[(0, 0), (0, 1)], [(1, 0)]]`` is a root with two internal nodes.
        Every sibling group starts uniform (1/q for q children).
        """
        nodes = [ConceptNode(0, 1, None)]
        frontier = [(0, tree)]
        while frontier:
            nxt = []
            for parent_id, sub in frontier:
                if not isinstance(sub, list) or not sub:
                    raise ValueError("internal nodes must be non-empty lists")
                q = len(sub)
                for item in sub:
                    node = ConceptNode(len(nodes), nodes[parent_id].level + 1, parent_id,
                                       local_prob=1.0 / q)
                    nodes.append(node)
                    nodes[parent_id].children.append(node.id)
                    if isinstance(item, list):
                        nxt.append((node.id, item))
                    else:
                        node.leaf_concept = (int(item[0]), int(item[1]))
            frontier = nxt
        return cls(nodes, rng_seed)

    def _check_structure(self) -> None:
        L = self.num_levels
        for n in self.nodes:
            if not n.children and n.level != L:
                raise ValueError(f"leaf {n.id} sits at level {n.level}, expected {L}")
        root = self.nodes[0]
        if root.parent is not None or root.level != 1:
            raise ValueError("node 0 must be the root at level 1")
        root.local_prob = 1.0

    def copy(self) -> "ConceptHierarchy":
        return copy.deepcopy(self)

    # --- queries ------------------------------------------------------------

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    def siblings(self, node: int) -> list[int]:
        parent = self.nodes[node].parent
        if parent is None:
            return []
        return [c for c in self.nodes[parent].children if c != node]

    def path(self, leaf: int) -> list[int]:
        """Node ids from the leaf up to (excluding) the root."""
        out = []
        n = leaf
        while self.nodes[n].parent is not None:
            out.append(n)
            n = self.nodes[n].parent
        return out

    def global_probability(self, leaf: int) -> float:
        if self.nodes[leaf].children:
            raise ValueError(f"node {leaf} is not a leaf")
        p = 1.0
        for n in self.path(leaf):
            p *= self.nodes[n].local_prob
        return p

    def global_probabilities(self) -> np.ndarray:
        """Global probability of every leaf, in ``self.leaves`` order."""
        g = np.empty(self.node_count)
        g[0] = 1.0
        for n in self.nodes[1:]:
            # breadth-first ids: a parent always precedes its children
            g[n.id] = g[n.parent] * n.local_prob
        return g[self.leaves]

    def local_probabilities(self) -> np.ndarray:
        return np.array([n.local_prob for n in self.nodes])

    def snapshot(self) -> list[LeafProb]:
        g = self.global_probabilities()
        rows = [LeafProb(leaf, *self.nodes[leaf].leaf_concept, float(p))
                if self.nodes[leaf].leaf_concept is not None
                else LeafProb(leaf, -1, -1, float(p))
                for leaf, p in zip(self.leaves, g)]
        rows.sort(key=lambda r: (-r.prob, r.leaf))
        return rows

    def leaf_for(self, dataset: int, class_id: int) -> int:
        for leaf in self.leaves:
            if self.nodes[leaf].leaf_concept == (dataset, class_id):
                return leaf
        raise KeyError((dataset, class_id))

    # --- sampling -----------------------------------------------------------

    def random_walk(self, rng: np.random.Generator) -> int:
        """Descend from the root choosing each child by its local probability."""
        node = self.nodes[0]
        while node.children:
            u = rng.random()
            acc = 0.0
            chosen = node.children[-1]
            for c in node.children:
                acc += self.nodes[c].local_prob
                if u < acc:
                    chosen = c
                    break
            node = self.nodes[chosen]
        return node.id

    # --- updates ------------------------------------------------------------

    def adjust(self, leaf: int, positive: bool, delta_fn: Callable[[int], float]) -> None:
        """Propagate one feedback signal from ``leaf`` up to the root's children.

        At each level the node gains ``w * delta_fn(level)`` and each of its
        siblings loses an equal share of it (w = +1 positive, -1 negative).
        The group is then rebalanced and clamped to the probability floor.
        Only-child groups are left at probability 1.
        """
        if self.nodes[leaf].children:
            raise ValueError(f"node {leaf} is not a leaf")
        w = 1.0 if positive else -1.0
        for n in self.path(leaf):
            sibs = self.siblings(n)
            if not sibs:
                continue
            step = w * delta_fn(self.nodes[n].level)
            self.nodes[n].local_prob += step
            share = step / len(sibs)
            for k in sibs:
                self.nodes[k].local_prob -= share
            self.rebalance(n)
            self._enforce_floor(self.nodes[n].parent)

    def rebalance(self, node: int) -> None:
        """If the node outweighs all its siblings together, hand the excess to them evenly."""
        sibs = self.siblings(node)
        if not sibs:
            return
        p = self.nodes[node].local_prob
        rest = sum(self.nodes[k].local_prob for k in sibs)
        if p > rest:
            d = p - rest
            self.nodes[node].local_prob = p - d
            share = d / len(sibs)
            for k in sibs:
                self.nodes[k].local_prob += share

    def _enforce_floor(self, parent: int) -> None:
        children = self.nodes[parent].children
        probs = np.array([self.nodes[c].local_prob for c in children])
        clamped = np.zeros(len(probs), dtype=bool)
        # Pin members below the floor, then rescale the others to fill the rest;
        # rescaling can push further members under, so repeat until stable.
        while True:
            low = (probs < self.floor) & ~clamped
            clamped |= low
            probs[clamped] = self.floor
            free = ~clamped
            budget = 1.0 - self.floor * clamped.sum()
            total = probs[free].sum()
            if not free.any() or total <= 0.0:
                probs[:] = 1.0 / len(probs)
                break
            probs[free] *= budget / total
            if not ((probs < self.floor) & ~clamped).any():
                break
        for c, p in zip(children, probs):
            self.nodes[c].local_prob = float(p)

    # --- text format --------------------------------------------------------

    def to_text(self) -> str:
        """Header ``# L=<levels> C=<nodes>`` then ``id level parent local_prob`` per line, tab-separated."""
        lines = [f"# L={self.num_levels}\tC={self.node_count}"]
        for n in self.nodes:
            parent = "-" if n.parent is None else str(n.parent)
            lines.append(f"{n.id}\t{n.level}\t{parent}\t{n.local_prob!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, pool: DatasetPool | None = None) -> "ConceptHierarchy":
        """Inverse of ``to_text``; with ``pool`` the leaves get concepts in pool order."""
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("#"):
            raise ValueError("missing hierarchy header")
        header = dict(part.split("=", 1) for part in lines[0][1:].split())
        nodes: list[ConceptNode] = []
        for ln in lines[1:]:
            nid, level, parent, prob = ln.split("\t")
            node = ConceptNode(int(nid), int(level), None if parent == "-" else int(parent),
                               local_prob=float(prob))
            if node.id != len(nodes):
                raise ValueError(f"node ids must be consecutive, got {node.id}")
            nodes.append(node)
            if node.parent is not None:
                nodes[node.parent].children.append(node.id)
        if int(header["C"]) != len(nodes):
            raise ValueError(f"header says {header['C']} nodes, found {len(nodes)}")
        h = cls(nodes)
        if h.num_levels != int(header["L"]):
            raise ValueError(f"header says {header['L']} levels, found {h.num_levels}")
        if pool is not None:
            concepts = [(i, c) for i, ds in enumerate(pool.datasets) for c in ds.class_ids]
            if len(concepts) != len(h.leaves):
                raise ValueError("pool does not match hierarchy leaves")
            for leaf, concept in zip(h.leaves, concepts):
                h.nodes[leaf].leaf_concept = concept
        return h
