"""Semi-structured space-time meshes stored as refinement trees.

Cells span an interval in every spatial axis and in time. The coarsest grid
is a uniform (nx, ny, nt) tiling of the domain; refinement splits a leaf
isotropically by the per-level ratio, and the resulting forest is the mesh.
Only leaves carry unknowns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum


class MeshError(ValueError):
    """Invalid mesh construction, query, or refinement request."""


class Direction(Enum):
    """Face direction of a cell; ``FUTURE`` is auxiliary only (never assembled)."""

    X_MINUS = ("x", -1)
    X_PLUS = ("x", 1)
    Y_MINUS = ("y", -1)
    Y_PLUS = ("y", 1)
    PAST = ("t", -1)
    FUTURE = ("t", 1)

    @property
    def axis_name(self) -> str:
        return self.value[0]

    @property
    def axis(self) -> int:
        return {"x": 0, "y": 1, "t": 2}[self.value[0]]

    @property
    def sign(self) -> int:
        return self.value[1]

    def opposite(self) -> "Direction":
        return _OPPOSITE[self]


_OPPOSITE = {
    Direction.X_MINUS: Direction.X_PLUS,
    Direction.X_PLUS: Direction.X_MINUS,
    Direction.Y_MINUS: Direction.Y_PLUS,
    Direction.Y_PLUS: Direction.Y_MINUS,
    Direction.PAST: Direction.FUTURE,
    Direction.FUTURE: Direction.PAST,
}


@dataclass(frozen=True)
class SpaceTimeBox:
    """Axis-aligned cell extent: x and y in ft, t in days.

    For 1-D spatial problems the y interval is a dummy unit-width strip that
    is never subdivided; its width still enters areas and volumes.
    """

    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float
    t_lo: float
    t_hi: float

    def __post_init__(self) -> None:
        if not (self.x_lo < self.x_hi and self.y_lo < self.y_hi and self.t_lo < self.t_hi):
            raise MeshError(f"degenerate box {self}")

    @property
    def dx(self) -> float:
        return self.x_hi - self.x_lo

    @property
    def dy(self) -> float:
        return self.y_hi - self.y_lo

    @property
    def dt(self) -> float:
        return self.t_hi - self.t_lo

    @property
    def spatial_area(self) -> float:
        return self.dx * self.dy

    @property
    def measure(self) -> float:
        """Space-time measure (ft^2 * days); multiply by thickness for ft^3 * days."""
        return self.dx * self.dy * self.dt

    def center(self) -> tuple[float, float, float]:
        return (
            0.5 * (self.x_lo + self.x_hi),
            0.5 * (self.y_lo + self.y_hi),
            0.5 * (self.t_lo + self.t_hi),
        )

    def interval(self, axis: int) -> tuple[float, float]:
        return ((self.x_lo, self.x_hi), (self.y_lo, self.y_hi), (self.t_lo, self.t_hi))[axis]

    def contains_point(self, x: float, y: float) -> bool:
        """Spatial containment, half-open so a point lands in exactly one cell."""
        return self.x_lo <= x < self.x_hi and self.y_lo <= y < self.y_hi


@dataclass
class TreeNode:
    id: int
    box: SpaceTimeBox
    level: int
    parent: int | None
    pos: tuple[int, int, int]
    children: list[int] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(frozen=True)
class FaceAdjacency:
    """One sub-face shared by two leaves (or a leaf and the domain boundary).

    ``spatial_measure`` is the facet's spatial content including thickness
    (ft^2 for x/y faces, ft^3 for t faces); ``temporal_extent`` is the shared
    time interval (0 for t faces). ``measure`` is their product for spatial
    faces and the spatial content alone for temporal faces.
    """

    left: int
    right: int | None
    direction: Direction
    spatial_measure: float
    temporal_extent: float
    measure: float

    @property
    def is_boundary(self) -> bool:
        return self.right is None


@dataclass(frozen=True)
class LeafIndex:
    """Bijection between leaf ids and dense block indices 0..N-1."""

    ids: tuple[int, ...]
    index_of: dict[int, int]

    def __len__(self) -> int:
        return len(self.ids)


def _edges(lo: float, hi: float, n: int) -> list[float]:
    # shared-edge construction: identical expressions on both sides of a plane
    out = [lo + k * (hi - lo) / n for k in range(n + 1)]
    out[0] = lo
    out[-1] = hi
    return out


class MeshTree:
    """Refinement tree over a space-time box.

    Root cells tile the domain uniformly; ``ratios[l]`` is the subdivision
    factor applied when splitting a level-l cell (x, t, and y when dim == 2).
    """

    def __init__(
        self,
        domain: SpaceTimeBox,
        nx: int,
        ny: int,
        nt: int,
        ratios: list[int] | tuple[int, ...],
        dim: int = 2,
        thickness: float = 1.0,
    ):
        if dim not in (1, 2):
            raise MeshError(f"spatial dimension must be 1 or 2, got {dim}")
        if nx < 1 or ny < 1 or nt < 1:
            raise MeshError(f"root grid dims must be >= 1, got ({nx}, {ny}, {nt})")
        if dim == 1 and ny != 1:
            raise MeshError("1-D meshes must have ny == 1")
        if thickness <= 0.0:
            raise MeshError("thickness must be positive")
        ratios = list(ratios)
        if any(int(r) != r or r < 2 for r in ratios):
            raise MeshError(f"refinement ratios must be integers >= 2, got {ratios}")

        self.domain = domain
        self.dim = dim
        self.nx = nx
        self.ny = ny
        self.nt = nt
        self.ratios = [int(r) for r in ratios]
        self.max_level = len(self.ratios)
        self.thickness = float(thickness)
        self.nodes: list[TreeNode] = []
        self._leaf_cache: list[int] | None = None

        xs = _edges(domain.x_lo, domain.x_hi, nx)
        ys = _edges(domain.y_lo, domain.y_hi, ny)
        ts = _edges(domain.t_lo, domain.t_hi, nt)
        for it in range(nt):
            for iy in range(ny):
                for ix in range(nx):
                    box = SpaceTimeBox(xs[ix], xs[ix + 1], ys[iy], ys[iy + 1], ts[it], ts[it + 1])
                    self.nodes.append(
                        TreeNode(id=len(self.nodes), box=box, level=0, parent=None, pos=(ix, iy, it))
                    )
        self.n_roots = len(self.nodes)

    # ------------------------------------------------------------------ basics

    def child_dims(self, level: int) -> tuple[int, int, int]:
        """Child grid shape used when splitting a cell at ``level``."""
        r = self.ratios[level]
        return (r, r if self.dim == 2 else 1, r)

    def directions(self) -> list[Direction]:
        if self.dim == 2:
            return list(Direction)
        return [Direction.X_MINUS, Direction.X_PLUS, Direction.PAST, Direction.FUTURE]

    def leaf_ids(self) -> list[int]:
        """Leaves in canonical order: root index, then stored child order (DFS)."""
        if self._leaf_cache is None:
            out: list[int] = []
            stack: list[int] = []
            for rid in range(self.n_roots - 1, -1, -1):
                stack.append(rid)
            while stack:
                nid = stack.pop()
                node = self.nodes[nid]
                if node.is_leaf:
                    out.append(nid)
                else:
                    stack.extend(reversed(node.children))
            self._leaf_cache = out
        return self._leaf_cache

    @property
    def leaf_count(self) -> int:
        return len(self.leaf_ids())

    def spatial_volume(self, leaf_id: int) -> float:
        return self.nodes[leaf_id].box.spatial_area * self.thickness

    def clone(self) -> "MeshTree":
        """Independent copy; refining the copy leaves the original untouched."""
        other = object.__new__(MeshTree)
        other.__dict__.update(
            {k: v for k, v in self.__dict__.items() if k not in ("nodes", "_leaf_cache")}
        )
        other.nodes = [
            TreeNode(n.id, n.box, n.level, n.parent, n.pos, list(n.children)) for n in self.nodes
        ]
        other._leaf_cache = None
        return other

    # -------------------------------------------------------------- refinement

    def refine_cell(self, leaf_id: int) -> list[int]:
        """Split a leaf into ratios[level]^(dim+1) equal children; returns their ids."""
        node = self.nodes[leaf_id]
        if not node.is_leaf:
            raise MeshError(f"cell {leaf_id} is not a leaf")
        if node.level >= self.max_level:
            raise MeshError(f"cell {leaf_id} is already at max level {self.max_level}")
        rx, ry, rt = self.child_dims(node.level)
        box = node.box
        xs = _edges(box.x_lo, box.x_hi, rx)
        ys = _edges(box.y_lo, box.y_hi, ry)
        ts = _edges(box.t_lo, box.t_hi, rt)
        new_ids: list[int] = []
        for it in range(rt):
            for iy in range(ry):
                for ix in range(rx):
                    cid = len(self.nodes)
                    child = TreeNode(
                        id=cid,
                        box=SpaceTimeBox(xs[ix], xs[ix + 1], ys[iy], ys[iy + 1], ts[it], ts[it + 1]),
                        level=node.level + 1,
                        parent=leaf_id,
                        pos=(ix, iy, it),
                    )
                    self.nodes.append(child)
                    node.children.append(cid)
                    new_ids.append(cid)
        self._leaf_cache = None
        return new_ids

    def refine_to_level(self, leaf_id: int, level: int) -> list[int]:
        """Refine a leaf and its offspring until every descendant is at ``level``."""
        node = self.nodes[leaf_id]
        if node.level >= level:
            return [leaf_id]
        out: list[int] = []
        for cid in self.refine_cell(leaf_id):
            out.extend(self.refine_to_level(cid, level))
        return out

    # ---------------------------------------------------------- neighbor search

    def find_neighbors(self, leaf_id: int, direction: Direction) -> list[int]:
        """All leaves sharing a positive-measure facet with ``leaf_id`` in ``direction``.

        Ascends the tree until a sibling exists in the search direction, moves
        laterally, then descends mirroring the recorded child positions (the
        component along the search axis flips to the facing side). If the
        descent runs past the original cell's level, every leaf on the facing
        face of the subtree is a neighbor. Returns [] at the domain boundary.
        """
        node = self.nodes[leaf_id]
        if not node.is_leaf:
            raise MeshError(f"neighbor query requires a leaf, got interior cell {leaf_id}")
        if self.dim == 1 and direction.axis == 1:
            return []
        ax, sg = direction.axis, direction.sign
        path: list[tuple[int, int, int]] = []
        while node.parent is not None:
            parent = self.nodes[node.parent]
            dims = self.child_dims(parent.level)
            stepped = node.pos[ax] + sg
            if 0 <= stepped < dims[ax]:
                q = list(node.pos)
                q[ax] = stepped
                sib = self.nodes[parent.children[self._flat(tuple(q), dims)]]
                return self._descend(sib, path, ax, sg)
            path.append(node.pos)
            node = parent
        rdims = (self.nx, self.ny, self.nt)
        stepped = node.pos[ax] + sg
        if not (0 <= stepped < rdims[ax]):
            return []
        q = list(node.pos)
        q[ax] = stepped
        root = self.nodes[q[0] + self.nx * (q[1] + self.ny * q[2])]
        return self._descend(root, path, ax, sg)

    @staticmethod
    def _flat(pos: tuple[int, int, int], dims: tuple[int, int, int]) -> int:
        return pos[0] + dims[0] * (pos[1] + dims[1] * pos[2])

    def _descend(self, node: TreeNode, path: list[tuple[int, int, int]], ax: int, sg: int) -> list[int]:
        for pos in reversed(path):
            if node.is_leaf:
                return [node.id]
            dims = self.child_dims(node.level)
            q = list(pos)
            q[ax] = 0 if sg > 0 else dims[ax] - 1
            node = self.nodes[node.children[self._flat(tuple(q), dims)]]
        if node.is_leaf:
            return [node.id]
        return self._collect_face(node, ax, sg)

    def _collect_face(self, node: TreeNode, ax: int, sg: int) -> list[int]:
        dims = self.child_dims(node.level)
        facing = 0 if sg > 0 else dims[ax] - 1
        out: list[int] = []
        for cid in node.children:
            child = self.nodes[cid]
            if child.pos[ax] != facing:
                continue
            if child.is_leaf:
                out.append(cid)
            else:
                out.extend(self._collect_face(child, ax, sg))
        return out

    # ----------------------------------------------------------------- faces

    def enumerate_faces(self) -> list[FaceAdjacency]:
        """Every interior sub-face once (at the finer side's resolution) plus
        one boundary record per leaf facet on the domain boundary."""
        plus = {Direction.X_PLUS, Direction.Y_PLUS, Direction.FUTURE}
        faces: list[FaceAdjacency] = []
        for lid in self.leaf_ids():
            for d in self.directions():
                nbrs = self.find_neighbors(lid, d)
                if not nbrs:
                    faces.append(self._face_record(lid, None, d))
                elif d in plus:
                    for nid in nbrs:
                        faces.append(self._face_record(lid, nid, d))
        return faces

    def _face_record(self, left: int, right: int | None, direction: Direction) -> FaceAdjacency:
        a = self.nodes[left].box
        b = self.nodes[right].box if right is not None else a
        ox = min(a.x_hi, b.x_hi) - max(a.x_lo, b.x_lo)
        oy = min(a.y_hi, b.y_hi) - max(a.y_lo, b.y_lo)
        ot = min(a.t_hi, b.t_hi) - max(a.t_lo, b.t_lo)
        ax = direction.axis
        if ax == 0:
            spatial = oy * self.thickness
            temporal = ot
            measure = spatial * temporal
        elif ax == 1:
            spatial = ox * self.thickness
            temporal = ot
            measure = spatial * temporal
        else:
            spatial = ox * oy * self.thickness
            temporal = 0.0
            measure = spatial
        if measure <= 0.0:
            raise MeshError(f"zero-measure face between {left} and {right}")
        return FaceAdjacency(left, right, direction, spatial, temporal, measure)

    # ---------------------------------------------------------------- indexing

    def index_leaves(self) -> LeafIndex:
        ids = tuple(self.leaf_ids())
        return LeafIndex(ids=ids, index_of={lid: k for k, lid in enumerate(ids)})


def build_root_mesh(
    domain: SpaceTimeBox,
    nx: int,
    ny: int,
    nt: int,
    ratios: list[int] | tuple[int, ...],
    max_level: int | None = None,
    dim: int = 2,
    thickness: float = 1.0,
) -> MeshTree:
    """Uniform (nx, ny, nt) root tiling of ``domain`` with the given ratio schedule."""
    if max_level is not None and max_level != len(ratios):
        raise MeshError(f"max_level {max_level} does not match ratios of length {len(ratios)}")
    return MeshTree(domain, nx, ny, nt, ratios, dim=dim, thickness=thickness)


def clone_tree(tree: MeshTree) -> MeshTree:
    return tree.clone()


__all__ = [
    "Direction",
    "FaceAdjacency",
    "LeafIndex",
    "MeshError",
    "MeshTree",
    "SpaceTimeBox",
    "TreeNode",
    "build_root_mesh",
    "clone_tree",
]
