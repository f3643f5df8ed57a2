"""
Conforming triangulations for the Poisson benchmarks.

A Mesh holds counterclockwise triangles, the unique edges with their one or
two incident triangles, a region tag per triangle and a boundary tag per
boundary edge. Local edge i of a triangle runs from its vertex i to vertex
i+1 (mod 3).
"""

import logging
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

DIRICHLET = 1
NEUMANN = 2
BOUNDARY_NAMES = {DIRICHLET: 'dirichlet', NEUMANN: 'neumann'}

INTERIOR = 'interior'
OVERLAP = 'overlap'
EXTERIOR = 'exterior'
SUBDOMAIN_CLASSES = (INTERIOR, OVERLAP, EXTERIOR)

# Node labelling precedence: a node takes the highest class among its elements.
_CLASS_PRIORITY = {EXTERIOR: 1, INTERIOR: 2, OVERLAP: 3}


class MeshError(ValueError):
    """Invalid or degenerate triangulation."""


EdgeKey = Tuple[int, int]


def _edge_key(a: int, b: int) -> EdgeKey:
    return (a, b) if a < b else (b, a)


class Mesh:
    """
    Immutable conforming triangulation.

    Args:
        vertices: (nv, 2) coordinates
        triangles: (nt, 3) vertex indices, counterclockwise
        region: optional (nt,) integer subdomain tag per triangle
        boundary_tags: optional map from sorted vertex pair to boundary tag
        default_tag: tag for boundary edges missing from ``boundary_tags``
    """

    def __init__(self, vertices, triangles, region=None,
                 boundary_tags: Optional[Dict[EdgeKey, int]] = None,
                 default_tag: int = DIRICHLET):
        self.vertices = np.asarray(vertices, dtype=float).reshape(-1, 2)
        self.triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) == 0:
            raise MeshError("Mesh has no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise MeshError("Triangle references a vertex that does not exist")

        self.has_regions = region is not None
        if region is None:
            self.region = np.zeros(len(self.triangles), dtype=np.int64)
        else:
            self.region = np.asarray(region, dtype=np.int64).reshape(-1)
            if len(self.region) != len(self.triangles):
                raise MeshError("region tag count does not match triangle count")

        self.signed_areas = self._signed_areas()
        scale = max(np.ptp(self.vertices, axis=0).max(), 1.0)
        bad = np.flatnonzero(self.signed_areas <= 1e-14 * scale ** 2)
        if len(bad):
            raise MeshError(
                f"{len(bad)} degenerate or clockwise triangle(s), first is {bad[0]}")

        self._build_edges()
        self._tag_boundary(boundary_tags or {}, default_tag)

        for arr in (self.vertices, self.triangles, self.region, self.edges,
                    self.edge_triangles, self.edge_local, self.triangle_edges,
                    self.boundary_tag, self.signed_areas):
            arr.setflags(write=False)

    # ------------------------------------------------------------------ build

    def _signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def _build_edges(self):
        """Unique edges, incident triangles and local edge positions."""
        t = self.triangles
        nt = len(t)
        pairs = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1).reshape(-1, 2)
        edges, inverse = np.unique(np.sort(pairs, axis=1), axis=0, return_inverse=True)
        inverse = np.asarray(inverse).reshape(-1)
        ne = len(edges)

        counts = np.bincount(inverse, minlength=ne)
        if counts.max() > 2:
            raise MeshError("Edge shared by more than two triangles")

        tri_ids = np.repeat(np.arange(nt), 3)
        local_ids = np.tile(np.arange(3), nt)
        order = np.argsort(inverse, kind='stable')
        sorted_edges = inverse[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = sorted_edges[1:] != sorted_edges[:-1]

        edge_triangles = -np.ones((ne, 2), dtype=np.int64)
        edge_local = -np.ones((ne, 2), dtype=np.int64)
        edge_triangles[sorted_edges[first], 0] = tri_ids[order[first]]
        edge_local[sorted_edges[first], 0] = local_ids[order[first]]
        edge_triangles[sorted_edges[~first], 1] = tri_ids[order[~first]]
        edge_local[sorted_edges[~first], 1] = local_ids[order[~first]]

        self.edges = edges.astype(np.int64)
        self.edge_triangles = edge_triangles
        self.edge_local = edge_local
        self.triangle_edges = inverse.reshape(nt, 3).astype(np.int64)

    def _tag_boundary(self, boundary_tags: Dict[EdgeKey, int], default_tag: int):
        tags = np.zeros(len(self.edges), dtype=np.int64)
        for e in np.flatnonzero(self.edge_triangles[:, 1] < 0):
            a, b = self.edges[e]
            tags[e] = boundary_tags.get((int(a), int(b)), default_tag)
        unknown = set(np.unique(tags[tags > 0]).tolist()) - set(BOUNDARY_NAMES)
        if unknown:
            raise MeshError(f"Unknown boundary tag(s): {sorted(unknown)}")
        self.boundary_tag = tags

    # ------------------------------------------------------------ properties

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def is_boundary_edge(self) -> np.ndarray:
        return self.edge_triangles[:, 1] < 0

    def areas(self) -> np.ndarray:
        return np.array(self.signed_areas)

    def edge_lengths(self) -> np.ndarray:
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def diameters(self) -> np.ndarray:
        """Longest edge per triangle (h_K)."""
        return self.edge_lengths()[self.triangle_edges].max(axis=1)

    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def edge_midpoints(self) -> np.ndarray:
        return 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])

    def angles(self) -> np.ndarray:
        """(nt, 3) interior angles at each vertex."""
        p = self.vertices[self.triangles]
        out = np.empty((self.n_triangles, 3))
        for i in range(3):
            u = p[:, (i + 1) % 3] - p[:, i]
            v = p[:, (i + 2) % 3] - p[:, i]
            cross = u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]
            dot = (u * v).sum(axis=1)
            out[:, i] = np.arctan2(np.abs(cross), dot)
        return out

    def min_angle(self) -> float:
        return float(self.angles().min())

    def boundary_edges(self, tag: Optional[int] = None) -> np.ndarray:
        """Indices of boundary edges, optionally restricted to one tag."""
        mask = self.is_boundary_edge
        if tag is not None:
            mask = mask & (self.boundary_tag == tag)
        return np.flatnonzero(mask)

    def boundary_tag_map(self) -> Dict[EdgeKey, int]:
        return {(int(self.edges[e, 0]), int(self.edges[e, 1])): int(self.boundary_tag[e])
                for e in self.boundary_edges()}

    def get_topology(self) -> Dict:
        """Counts used for validation reports and run logs."""
        regions, counts = np.unique(self.region, return_counts=True)
        return {
            'vertices': self.n_vertices,
            'triangles': self.n_triangles,
            'edges': self.n_edges,
            'boundary_edges': {name: int(len(self.boundary_edges(tag)))
                               for tag, name in BOUNDARY_NAMES.items()},
            'triangles_by_region': {int(r): int(c) for r, c in zip(regions, counts)},
            'total_area': float(self.signed_areas.sum()),
        }

    def validate(self) -> Dict:
        """
        Check conformity, orientation and tag consistency.

        Returns:
            Report with ``valid``, a list of ``issues`` and the topology
        """
        issues = []
        counts = np.bincount(self.triangle_edges.ravel(), minlength=self.n_edges)
        interior = ~self.is_boundary_edge
        if np.any(counts[interior] != 2):
            issues.append("interior edge without exactly two incident triangles")
        if np.any(counts[~interior] != 1):
            issues.append("boundary edge without exactly one incident triangle")
        if np.any(self.signed_areas <= 0):
            issues.append("non-positive signed area")
        if np.any(self.boundary_tag[self.is_boundary_edge] == 0):
            issues.append("untagged boundary edge")
        # hanging nodes from bisection sit exactly on edge midpoints
        grid = 1e-9 * self.edge_lengths().min()
        vertex_keys = {tuple(k) for k in np.round(self.vertices / grid).astype(np.int64)}
        hanging = sum(tuple(k) in vertex_keys
                      for k in np.round(self.edge_midpoints() / grid).astype(np.int64))
        if hanging:
            issues.append(f"{hanging} hanging node(s)")
        return {
            'valid': len(issues) == 0,
            'issues': issues,
            'topology': self.get_topology(),
        }

    def __repr__(self) -> str:
        return f"Mesh(vertices={self.n_vertices}, triangles={self.n_triangles})"


# ---------------------------------------------------------------- factories

def _grid_vertex_index(n: int):
    return lambda i, j: j * (n + 1) + i


def unit_square_mesh(n: int, boundary: int = DIRICHLET) -> Mesh:
    """
    Structured mesh of [0,1]^2 with 2n^2 isosceles right triangles.

    Args:
        n: cells per side
        boundary: tag applied to every boundary edge
    """
    if n < 1:
        raise MeshError("unit_square_mesh needs n >= 1")
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    idx = _grid_vertex_index(n)
    triangles = []
    for j in range(n):
        for i in range(n):
            v00, v10, v01, v11 = idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1)
            triangles.append((v00, v10, v11))
            triangles.append((v00, v11, v01))
    return Mesh(vertices, triangles, default_tag=boundary)


def diamond_mesh(ratio: float, cells: int = 4, boundary: int = DIRICHLET) -> Mesh:
    """
    Anisotropic mesh of [0,1]^2 made of flat diamonds.

    Each of the ``cells`` x ``cells`` macro cells carries one extra point on its
    vertical midline at height ``ratio * H / 2`` from its top (even rows) or
    bottom (odd rows) edge, H being the cell size. The four triangles fanned
    around that point include a flat one whose smallest angle is
    ``arctan(ratio)``; flat triangles of neighbouring rows meet across the row
    boundary and form diamonds.

    Args:
        ratio: aspect ratio in (0, 1]; 1 gives the isotropic criss-cross layout
        cells: macro cells per side (4 gives 64 triangles)
        boundary: tag applied to every boundary edge
    """
    if not 0.0 < ratio <= 1.0:
        raise MeshError(f"diamond ratio must lie in (0, 1], got {ratio}")
    H = 1.0 / cells
    xs = np.linspace(0.0, 1.0, cells + 1)
    X, Y = np.meshgrid(xs, xs)
    vertices = [tuple(v) for v in np.column_stack([X.ravel(), Y.ravel()])]
    idx = _grid_vertex_index(cells)
    triangles = []
    for j in range(cells):
        y0, y1 = j * H, (j + 1) * H
        py = y1 - 0.5 * ratio * H if j % 2 == 0 else y0 + 0.5 * ratio * H
        for i in range(cells):
            v00, v10, v01, v11 = idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1)
            p = len(vertices)
            vertices.append(((i + 0.5) * H, py))
            triangles.extend([(v00, v10, p), (v10, v11, p), (v11, v01, p), (v01, v00, p)])
    return Mesh(np.array(vertices), triangles, default_tag=boundary)


# L-shape subdomains with elevated/depressed coefficient: (xmin, xmax, ymin, ymax).
LSHAPE_REGIONS = {
    1: (-0.8, -0.2, 0.2, 0.8),
    2: (-0.8, -0.2, -0.8, -0.2),
    3: (0.2, 0.8, -0.8, -0.2),
}


def lshape_mesh(h: float = 0.2, boundary: int = DIRICHLET) -> Mesh:
    """
    Structured mesh of [-1,1]^2 minus (0,1]^2 with region tags 1..3.

    With the default h = 0.2 the mesh has 150 isosceles right triangles and
    every region boundary runs along mesh edges.
    """
    n = int(round(2.0 / h))
    if abs(n * h - 2.0) > 1e-12 or n % 2:
        raise MeshError(f"h={h} does not split [-1,1] into an even number of cells")
    xs = np.linspace(-1.0, 1.0, n + 1)
    idx = _grid_vertex_index(n)
    triangles = []
    for j in range(n):
        for i in range(n):
            if xs[i] >= -1e-12 and xs[j] >= -1e-12:
                continue
            v00, v10, v01, v11 = idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1)
            triangles.append((v00, v10, v11))
            triangles.append((v00, v11, v01))
    triangles = np.array(triangles, dtype=np.int64)

    X, Y = np.meshgrid(xs, xs)
    all_vertices = np.column_stack([X.ravel(), Y.ravel()])
    used = np.unique(triangles)
    renumber = -np.ones(len(all_vertices), dtype=np.int64)
    renumber[used] = np.arange(len(used))
    vertices = all_vertices[used]
    triangles = renumber[triangles]

    centroids = vertices[triangles].mean(axis=1)
    region = np.zeros(len(triangles), dtype=np.int64)
    for tag, (x0, x1, y0, y1) in LSHAPE_REGIONS.items():
        inside = ((centroids[:, 0] > x0) & (centroids[:, 0] < x1)
                  & (centroids[:, 1] > y0) & (centroids[:, 1] < y1))
        region[inside] = tag
    return Mesh(vertices, triangles, region=region, default_tag=boundary)


# --------------------------------------------------------------- refinement

def refine_marked(mesh: Mesh, marked: Iterable[int]) -> Mesh:
    """
    Red refinement of marked triangles with green closure.

    Every edge of a marked triangle is bisected. Triangles left with two
    bisected edges are promoted to red until the marking is stable; triangles
    with one bisected edge are split green from the opposite vertex. Region
    and boundary tags are inherited by the children.
    """
    marked = np.unique(np.asarray(list(marked), dtype=np.int64))
    if len(marked) and (marked.min() < 0 or marked.max() >= mesh.n_triangles):
        raise MeshError("marked triangle index out of range")
    if len(marked) == 0:
        return Mesh(mesh.vertices, mesh.triangles,
                    region=mesh.region if mesh.has_regions else None,
                    boundary_tags=mesh.boundary_tag_map())

    split = np.zeros(mesh.n_edges, dtype=bool)
    split[mesh.triangle_edges[marked].ravel()] = True
    while True:
        per_triangle = split[mesh.triangle_edges].sum(axis=1)
        promote = per_triangle == 2
        if not promote.any():
            break
        split[mesh.triangle_edges[promote].ravel()] = True

    split_ids = np.flatnonzero(split)
    midpoint = -np.ones(mesh.n_edges, dtype=np.int64)
    midpoint[split_ids] = mesh.n_vertices + np.arange(len(split_ids))
    vertices = np.vstack([mesh.vertices, mesh.edge_midpoints()[split_ids]])

    triangles: List[Tuple[int, int, int]] = []
    region: List[int] = []
    for t in range(mesh.n_triangles):
        v = mesh.triangles[t]
        m = midpoint[mesh.triangle_edges[t]]
        n_split = int((m >= 0).sum())
        if n_split == 0:
            children = [tuple(v)]
        elif n_split == 3:
            children = [(v[0], m[0], m[2]), (m[0], v[1], m[1]),
                        (m[2], m[1], v[2]), (m[0], m[1], m[2])]
        else:
            i = int(np.flatnonzero(m >= 0)[0])
            a, b, c = v[i], v[(i + 1) % 3], v[(i + 2) % 3]
            children = [(a, m[i], c), (m[i], b, c)]
        triangles.extend(children)
        region.extend([mesh.region[t]] * len(children))

    boundary_tags = {}
    for e in mesh.boundary_edges():
        a, b = (int(x) for x in mesh.edges[e])
        tag = int(mesh.boundary_tag[e])
        if split[e]:
            mid = int(midpoint[e])
            boundary_tags[_edge_key(a, mid)] = tag
            boundary_tags[_edge_key(mid, b)] = tag
        else:
            boundary_tags[(a, b)] = tag

    refined = Mesh(vertices, triangles,
                   region=np.array(region) if mesh.has_regions else None,
                   boundary_tags=boundary_tags)
    logger.info("Refined mesh: %d -> %d triangles (%d marked, %d edges bisected)",
                mesh.n_triangles, refined.n_triangles, len(marked), len(split_ids))
    return refined


# ------------------------------------------------------------ dof numbering

class DofLayout:
    """
    Global numbering of degree-N nodes on a mesh.

    Vertices come first, then the N-1 interior nodes of every edge ordered
    from its lower vertex index, then the interior nodes of every triangle.

    Args:
        mesh: the triangulation
        elem: reference element providing the local node layout
    """

    def __init__(self, mesh: Mesh, elem):
        self.mesh = mesh
        self.degree = elem.degree
        N = elem.degree
        nt, nv, ne = mesh.n_triangles, mesh.n_vertices, mesh.n_edges
        n_edge_inner = N - 1
        n_cell_inner = len(elem.interior_nodes)

        l2g = np.empty((nt, elem.n_nodes), dtype=np.int64)
        l2g[:, elem.vertex_nodes] = mesh.triangles
        if n_edge_inner > 0:
            offsets = np.arange(n_edge_inner)
            for i in range(3):
                e = mesh.triangle_edges[:, i]
                forward = mesh.triangles[:, i] == mesh.edges[e, 0]
                local = np.where(forward[:, None], offsets, n_edge_inner - 1 - offsets)
                l2g[:, elem.edge_nodes[i][1:-1]] = nv + e[:, None] * n_edge_inner + local
        if n_cell_inner > 0:
            base = nv + ne * n_edge_inner
            l2g[:, elem.interior_nodes] = (base + np.arange(nt)[:, None] * n_cell_inner
                                           + np.arange(n_cell_inner))
        self.local_to_global = l2g
        self.n_nodes = nv + ne * n_edge_inner + nt * n_cell_inner

        p = mesh.vertices[mesh.triangles]
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        local_xy = p[:, 0][:, None, :] + np.einsum('tij,nj->tni', jac, elem.nodes)
        coords = np.empty((self.n_nodes, 2))
        coords[l2g.ravel()] = local_xy.reshape(-1, 2)
        self.coordinates = coords

    def edge_dofs(self, edge_ids: np.ndarray, elem) -> np.ndarray:
        """All global nodes (endpoints included) lying on the given edges."""
        if len(edge_ids) == 0:
            return np.zeros(0, dtype=np.int64)
        t = self.mesh.edge_triangles[edge_ids, 0]
        li = self.mesh.edge_local[edge_ids, 0]
        edge_nodes = np.asarray(elem.edge_nodes)[li]
        return np.unique(self.local_to_global[t[:, None], edge_nodes])


# ------------------------------------------------------------ subdomains

class SubdomainMask:
    """
    Partition of nodes into interior, overlap and exterior classes.

    Args:
        node_class: per-node label, one of SUBDOMAIN_CLASSES
    """

    def __init__(self, node_class: np.ndarray, element_class: Optional[np.ndarray] = None):
        self.node_class = np.asarray(node_class, dtype=object)
        self.element_class = element_class

    @property
    def masks(self) -> Dict[str, np.ndarray]:
        return {name: (self.node_class == name).astype(np.int64)
                for name in SUBDOMAIN_CLASSES}

    def indices(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.node_class == name)

    def restrict(self, nodes: np.ndarray) -> 'SubdomainMask':
        """Masks over a subset of nodes, e.g. the free dofs."""
        return SubdomainMask(self.node_class[np.asarray(nodes)], self.element_class)

    def counts(self) -> Dict[str, int]:
        return {name: int((self.node_class == name).sum()) for name in SUBDOMAIN_CLASSES}


def interface_edges(mesh: Mesh) -> np.ndarray:
    """Interior edges whose two triangles carry different region tags."""
    interior = np.flatnonzero(~mesh.is_boundary_edge)
    t0 = mesh.edge_triangles[interior, 0]
    t1 = mesh.edge_triangles[interior, 1]
    return interior[mesh.region[t0] != mesh.region[t1]]


def classify_elements(mesh: Mesh) -> np.ndarray:
    """Overlap if any edge is an interface edge, else interior/exterior by region."""
    on_interface = np.zeros(mesh.n_edges, dtype=bool)
    on_interface[interface_edges(mesh)] = True
    overlap = on_interface[mesh.triangle_edges].any(axis=1)
    classes = np.where(mesh.region != 0, INTERIOR, EXTERIOR).astype(object)
    classes[overlap] = OVERLAP
    return classes


def classify_subdomains(mesh: Mesh, layout: DofLayout) -> SubdomainMask:
    """
    Node masks for the subdomain criterion.

    Elements are classified by :func:`classify_elements`; each node takes the
    highest-priority class among its elements (overlap > interior > exterior),
    so the three masks partition the node set.
    """
    if not mesh.has_regions:
        raise MeshError("classify_subdomains needs a mesh with region tags")
    element_class = classify_elements(mesh)
    priority = np.zeros(layout.n_nodes, dtype=np.int64)
    element_priority = np.array([_CLASS_PRIORITY[c] for c in element_class], dtype=np.int64)
    np.maximum.at(priority, layout.local_to_global.ravel(),
                  np.repeat(element_priority, layout.local_to_global.shape[1]))
    by_priority = {p: name for name, p in _CLASS_PRIORITY.items()}
    node_class = np.array([by_priority[p] for p in priority], dtype=object)
    mask = SubdomainMask(node_class, element_class)
    logger.info("Subdomain classes (nodes): %s", mask.counts())
    return mask


# ------------------------------------------------------------------ text IO

def write_mesh(mesh: Mesh, path: str):
    """Plain-text export: ``nv nt nb`` header, vertices, triangles+region, boundary edges+tag."""
    boundary = mesh.boundary_edges()
    with open(path, 'w') as fh:
        fh.write(f"{mesh.n_vertices} {mesh.n_triangles} {len(boundary)}\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g}\n")
        for (a, b, c), r in zip(mesh.triangles, mesh.region):
            fh.write(f"{a} {b} {c} {r}\n")
        for e in boundary:
            a, b = mesh.edges[e]
            fh.write(f"{a} {b} {mesh.boundary_tag[e]}\n")


def read_mesh(path: str) -> Mesh:
    """Inverse of :func:`write_mesh`."""
    with open(path) as fh:
        tokens = fh.read().split()
    try:
        nv, nt, nb = (int(tok) for tok in tokens[:3])
        pos = 3
        vertices = np.array(tokens[pos:pos + 2 * nv], dtype=float).reshape(nv, 2)
        pos += 2 * nv
        tri = np.array(tokens[pos:pos + 4 * nt], dtype=np.int64).reshape(nt, 4)
        pos += 4 * nt
        bnd = np.array(tokens[pos:pos + 3 * nb], dtype=np.int64).reshape(nb, 3)
    except ValueError as exc:
        raise MeshError(f"Malformed mesh file {path}: {exc}") from exc
    tags = {_edge_key(int(a), int(b)): int(tag) for a, b, tag in bnd}
    return Mesh(vertices, tri[:, :3], region=tri[:, 3], boundary_tags=tags)
