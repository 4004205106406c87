"""Category hierarchy: parsing, indexing, masks, closures, grafting.

A taxonomy is an immutable forest of named category nodes. Each level
carries a dense class index used by the classifier heads; levels >= 2
reserve the last slot for a synthetic STOP class that marks label paths
terminating above max depth. Grafting produces a new taxonomy and never
reindexes existing classes, so trained models stay valid.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .errors import (
    DepthExceeded,
    DuplicateChild,
    EmptyPath,
    EmptySegment,
    UnknownNode,
)

STOP = "<STOP>"

DEFAULT_SEPARATOR = ">"


@dataclass(frozen=True)
class CategoryPath:
    """Ordered category names from the root down, e.g. (Apparel, Shoes)."""

    segments: tuple[str, ...]

    def __post_init__(self):
        if len(self.segments) == 0:
            raise EmptyPath("category path has no segments")
        for seg in self.segments:
            if not seg:
                raise EmptySegment("empty segment in category path")

    def __len__(self) -> int:
        return len(self.segments)

    def __getitem__(self, i):
        return self.segments[i]

    def join(self, separator: str = DEFAULT_SEPARATOR) -> str:
        return f" {separator} ".join(self.segments)

    def __str__(self) -> str:
        return self.join()


def parse_path(raw: str, separator: str = DEFAULT_SEPARATOR) -> CategoryPath:
    """Split a raw path string on the separator, trimming whitespace.

    Raises EmptyPath if nothing remains, EmptySegment if any component
    trims to the empty string.
    """
    if not raw.strip():
        raise EmptyPath(f"blank path string: {raw!r}")
    parts = [p.strip() for p in raw.split(separator)]
    for p in parts:
        if not p:
            raise EmptySegment(f"empty segment in {raw!r}")
        if separator in p:
            raise EmptySegment(f"separator inside segment in {raw!r}")
    return CategoryPath(tuple(parts))


@dataclass(frozen=True)
class Node:
    node_id: int
    name: str
    level: int          # 1 = root level
    parent_id: int | None


@dataclass(frozen=True)
class ChildMask:
    """Binary mask over level_index(level); last bit is STOP."""

    level: int
    bits: tuple[int, ...]

    @property
    def stop_bit(self) -> int:
        return self.bits[-1]


class Taxonomy:
    """Immutable category forest with per-level class indices.

    Built via :func:`build` or :meth:`graft`; do not mutate the internal
    tables after construction.
    """

    def __init__(self, nodes: list[Node], terminal_ids: set[int]):
        self._nodes: dict[int, Node] = {n.node_id: n for n in nodes}
        self._terminals = frozenset(terminal_ids)
        self._children: dict[int, list[int]] = {n.node_id: [] for n in nodes}
        self._child_by_name: dict[tuple[int | None, str], int] = {}
        roots: list[int] = []
        for n in nodes:
            if n.parent_id is None:
                roots.append(n.node_id)
            else:
                self._children[n.parent_id].append(n.node_id)
            self._child_by_name[(n.parent_id, n.name)] = n.node_id
        self._roots = roots
        self.max_depth = max(n.level for n in nodes)
        # class ordering per level: node ids in id order (ids are assigned
        # append-only, so this ordering is stable under grafting)
        self._level_classes: dict[int, list[int]] = {}
        for lvl in range(1, self.max_depth + 1):
            ids = sorted(i for i, n in self._nodes.items() if n.level == lvl)
            self._level_classes[lvl] = ids
        self._index_of: dict[int, int] = {}
        for lvl, ids in self._level_classes.items():
            for pos, nid in enumerate(ids):
                self._index_of[nid] = pos

    # -- lookups ----------------------------------------------------

    def node(self, node_id: int) -> Node:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise UnknownNode(f"no node with id {node_id}") from None

    def __contains__(self, node_id: int) -> bool:
        return node_id in self._nodes

    @property
    def roots(self) -> list[int]:
        return list(self._roots)

    @property
    def node_ids(self) -> list[int]:
        return sorted(self._nodes)

    def children(self, node_id: int) -> list[int]:
        self.node(node_id)
        return list(self._children[node_id])

    def child_by_name(self, parent_id: int | None, name: str) -> int | None:
        return self._child_by_name.get((parent_id, name))

    def is_terminal(self, node_id: int) -> bool:
        """True if a label may legitimately end here: either a path used
        to build/graft the taxonomy ended at this node, or it is a leaf."""
        self.node(node_id)
        return node_id in self._terminals or not self._children[node_id]

    def level_index(self, level: int) -> list[int | str]:
        """Dense class ordering at a level; levels >= 2 end with STOP."""
        if level < 1 or level > self.max_depth:
            raise UnknownNode(f"no level {level} (max_depth={self.max_depth})")
        ids: list[int | str] = list(self._level_classes[level])
        if level >= 2:
            ids.append(STOP)
        return ids

    def level_size(self, level: int) -> int:
        return len(self.level_index(level))

    def class_position(self, node_id: int) -> int:
        """Position of a node inside level_index(node.level)."""
        self.node(node_id)
        return self._index_of[node_id]

    def stop_position(self, level: int) -> int:
        if level < 2:
            raise UnknownNode("no STOP class at level 1")
        return len(self._level_classes[level])

    def node_path(self, node_id: int) -> CategoryPath:
        names = []
        nid: int | None = node_id
        while nid is not None:
            n = self.node(nid)
            names.append(n.name)
            nid = n.parent_id
        return CategoryPath(tuple(reversed(names)))

    def resolve(self, path: CategoryPath) -> int | None:
        """Node id reached by walking the path from a root, or None."""
        nid: int | None = None
        for name in path.segments:
            nid = self._child_by_name.get((nid, name))
            if nid is None:
                return None
        return nid

    # -- contracts ----------------------------------------------------

    def children_mask(self, parent: int) -> ChildMask:
        """Mask over level_index(parent.level+1): children set, plus STOP
        iff the parent is a valid terminal."""
        pnode = self.node(parent)
        if pnode.level >= self.max_depth:
            raise UnknownNode(
                f"node {parent} at level {pnode.level} has no child level"
            )
        child_level = pnode.level + 1
        bits = [0] * self.level_size(child_level)
        for cid in self._children[parent]:
            bits[self._index_of[cid]] = 1
        if self.is_terminal(parent):
            bits[-1] = 1
        return ChildMask(level=child_level, bits=tuple(bits))

    def stop_only_mask(self, level: int) -> ChildMask:
        """Mask permitting only STOP; used below an already-ended path."""
        bits = [0] * self.level_size(level)
        bits[-1] = 1
        return ChildMask(level=level, bits=tuple(bits))

    def ancestor_closure(self, node_id: int) -> set[int]:
        """The node plus all proper ancestors, root included."""
        closure = set()
        nid: int | None = node_id
        while nid is not None:
            n = self.node(nid)
            closure.add(nid)
            nid = n.parent_id
        return closure

    def validate_path(self, path: CategoryPath) -> bool:
        """True iff the path walks parent->child edges from a root and
        ends at a recorded terminal or leaf."""
        nid = self.resolve(path)
        if nid is None:
            return False
        return self.is_terminal(nid)

    # -- mutation (copy-on-write) --------------------------------------

    def graft(
        self,
        parent: int,
        new_subtree,
        max_depth_limit: int | None = None,
    ) -> "Taxonomy":
        """Return a new taxonomy with the given relative paths attached
        under `parent`. Existing node ids and class positions are
        preserved; new classes append before STOP at each level.
        """
        pnode = self.node(parent)
        paths = list(new_subtree)
        for p in paths:
            depth = pnode.level + len(p)
            if max_depth_limit is not None and depth > max_depth_limit:
                raise DepthExceeded(
                    f"graft reaches depth {depth} > limit {max_depth_limit}"
                )
        for p in paths:
            if self._child_by_name.get((parent, p.segments[0])) is not None:
                raise DuplicateChild(
                    f"{p.segments[0]!r} already a child of node {parent}"
                )
        nodes = list(self._nodes.values())
        terminals = set(self._terminals)
        next_id = max(self._nodes) + 1
        ends = [tuple(p.segments) for p in paths]
        # BFS-lexicographic over the new subtree, mirroring build()
        rel_edges: dict[int, set[tuple[tuple[str, ...], str]]] = {}
        for p in paths:
            segs = tuple(p.segments)
            for i, name in enumerate(segs):
                rel_edges.setdefault(i, set()).add((segs[:i], name))
        prefix_to_id: dict[tuple[str, ...], int] = {(): parent}
        for depth in sorted(rel_edges):
            for prefix, name in sorted(rel_edges[depth]):
                pid = prefix_to_id[prefix]
                node = Node(
                    node_id=next_id,
                    name=name,
                    level=pnode.level + depth + 1,
                    parent_id=pid,
                )
                nodes.append(node)
                prefix_to_id[prefix + (name,)] = next_id
                next_id += 1
        for segs in ends:
            terminals.add(prefix_to_id[tuple(segs)])
        return Taxonomy(nodes, terminals)

    # -- serialization ---------------------------------------------------

    def all_paths(self) -> list[CategoryPath]:
        """Paths of every terminal and leaf node, in canonical
        (lexicographic) order. Rebuilding from these reproduces the same
        node set and terminal flags; a freshly built taxonomy also gets
        identical ids and class positions back. Grafted taxonomies
        re-canonicalize on save/load, so model checkpoints embed their
        own node table rather than relying on this file."""
        out = []
        for nid in sorted(self._nodes):
            if self.is_terminal(nid):
                out.append(self.node_path(nid))
        return sorted(out, key=lambda p: p.segments)

    def content_hash(self) -> str:
        """Order-insensitive digest of the terminal path set."""
        text = "\n".join(p.join() for p in self.all_paths())
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def node_table(self) -> list[dict]:
        """Exact node list for embedding in checkpoints."""
        rows = []
        for nid in sorted(self._nodes):
            n = self._nodes[nid]
            rows.append(
                {
                    "id": n.node_id,
                    "name": n.name,
                    "level": n.level,
                    "parent": n.parent_id,
                    "terminal": n.node_id in self._terminals,
                }
            )
        return rows

    @classmethod
    def from_node_table(cls, rows: list[dict]) -> "Taxonomy":
        nodes = [
            Node(node_id=r["id"], name=r["name"], level=r["level"], parent_id=r["parent"])
            for r in rows
        ]
        terminals = {r["id"] for r in rows if r["terminal"]}
        return cls(nodes, terminals)


def build(paths) -> Taxonomy:
    """Construct a taxonomy from label paths.

    Node ids are assigned in BFS order with siblings sorted by name, so
    identical path sets always produce identical taxonomies. Any path
    endpoint is recorded as a terminal.
    """
    paths = list(paths)
    if not paths:
        raise EmptyPath("cannot build a taxonomy from zero paths")
    edges: dict[int, set[tuple[tuple[str, ...], str]]] = {}
    for p in paths:
        segs = tuple(p.segments)
        for i, name in enumerate(segs):
            edges.setdefault(i, set()).add((segs[:i], name))
    nodes: list[Node] = []
    prefix_to_id: dict[tuple[str, ...], int | None] = {(): None}
    next_id = 0
    for depth in sorted(edges):
        for prefix, name in sorted(edges[depth]):
            pid = prefix_to_id[prefix]
            nodes.append(Node(node_id=next_id, name=name, level=depth + 1, parent_id=pid))
            prefix_to_id[prefix + (name,)] = next_id
            next_id += 1
    terminals = {prefix_to_id[tuple(p.segments)] for p in paths}
    return Taxonomy(nodes, {t for t in terminals if t is not None})


def load_taxonomy(path) -> Taxonomy:
    """Read a taxonomy.txt: one path per line, ' > ' separated, '#' comments."""
    lines = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            lines.append(parse_path(line))
    return build(lines)


def save_taxonomy(tax: Taxonomy, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in tax.all_paths():
            fh.write(p.join() + "\n")
