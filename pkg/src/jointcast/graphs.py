"""Spatial, temporal and space-time precision structures and their sum-to-zero constraints.

The latent fields used throughout the package are intrinsic Gaussian Markov
random fields.  Each one is described by a sparse symmetric positive
semi-definite structure matrix together with the dimension of its null space,
and is made identifiable by a set of linear sum-to-zero constraints.

Space-time interaction structures are Kronecker products of a temporal factor
(random-walk structure or identity) and a spatial factor (graph Laplacian or
identity).  The flattening convention is fixed once and for all: the entry for
area ``i`` in year ``t`` sits at index ``t * num_areas + i`` (area runs
fastest).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

INTERACTION_KINDS = ("I", "II", "III", "IV")


@dataclass(frozen=True)
class AreaGraph:
    """Undirected neighbourhood graph over areas.

    Edges are stored as unordered pairs ``(i, j)`` with ``i < j``; build
    instances through :func:`build_area_graph` which validates and
    deduplicates the edge list.
    """

    num_areas: int
    edges: frozenset[tuple[int, int]]

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency matrix."""
        a = self.num_areas
        if not self.edges:
            return sp.csr_matrix((a, a))
        i, j = np.array(sorted(self.edges)).T
        data = np.ones(len(i))
        w = sp.coo_matrix((data, (i, j)), shape=(a, a))
        return (w + w.T).tocsr()

    def degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency().sum(axis=1)).ravel()

    def component_labels(self) -> np.ndarray:
        """Connected-component label per area."""
        _, labels = connected_components(self.adjacency(), directed=False)
        return labels

    @property
    def num_components(self) -> int:
        return int(self.component_labels().max()) + 1 if self.num_areas else 0


@dataclass(frozen=True)
class StructureMatrix:
    """Sparse symmetric PSD structure matrix with declared rank deficiency.

    ``null_dim`` is the dimension of the null space; the numeric rank is
    ``dim - null_dim``.
    """

    kind: str  # ICAR | RW1 | IID | TypeI | TypeII | TypeIII | TypeIV
    dim: int
    entries: sp.csr_matrix
    null_dim: int


@dataclass(frozen=True)
class ConstraintSet:
    """Rows of linear constraints ``matrix @ x = 0`` over one latent block."""

    matrix: np.ndarray
    block_label: str


def build_area_graph(num_areas: int, edges) -> AreaGraph:
    """Validate an edge list and return its symmetric closure as an AreaGraph.

    Parameters
    ----------
    num_areas : int
        Number of areas, >= 1.  Indices run from 0 to ``num_areas - 1``.
    edges : iterable of (int, int)
        Unordered index pairs.  Duplicates and reversed duplicates collapse.

    Raises
    ------
    ValueError
        On self-loops or indices outside ``[0, num_areas)``.
    """
    if num_areas < 1:
        raise ValueError(f"num_areas must be >= 1, got {num_areas}")
    canonical = set()
    for i, j in edges:
        i, j = int(i), int(j)
        if i == j:
            raise ValueError(f"self-loop at area {i}")
        if not (0 <= i < num_areas and 0 <= j < num_areas):
            raise ValueError(f"edge ({i}, {j}) out of range for {num_areas} areas")
        canonical.add((min(i, j), max(i, j)))
    return AreaGraph(num_areas=num_areas, edges=frozenset(canonical))


def icar_structure(graph: AreaGraph) -> StructureMatrix:
    """Graph-Laplacian structure, diag(degree) minus adjacency.

    The null space is spanned by the indicator vectors of the connected
    components, so ``null_dim`` equals the component count.
    """
    w = graph.adjacency()
    lap = sp.diags(graph.degrees()) - w
    return StructureMatrix(
        kind="ICAR",
        dim=graph.num_areas,
        entries=lap.tocsr(),
        null_dim=graph.num_components,
    )


def rw1_structure(num_years: int) -> StructureMatrix:
    """First-order random-walk structure over consecutive years.

    Tridiagonal with diagonal (1, 2, ..., 2, 1) and -1 off the diagonal;
    rank deficiency 1 (constant vectors).
    """
    if num_years < 2:
        raise ValueError(f"random walk needs at least 2 years, got {num_years}")
    main = np.full(num_years, 2.0)
    main[0] = main[-1] = 1.0
    off = np.full(num_years - 1, -1.0)
    r = sp.diags([off, main, off], offsets=[-1, 0, 1])
    return StructureMatrix(kind="RW1", dim=num_years, entries=r.tocsr(), null_dim=1)


def iid_structure(dim: int) -> StructureMatrix:
    """Identity structure (exchangeable block), full rank."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    return StructureMatrix(kind="IID", dim=dim, entries=sp.identity(dim, format="csr"), null_dim=0)


def interaction_structure(
    kind: str, r_gamma: StructureMatrix, r_kappa: StructureMatrix
) -> StructureMatrix:
    """Space-time interaction structure as a Kronecker product.

    The four types combine the temporal random-walk structure and the spatial
    Laplacian with identities:

    ======  =========================
    kind    structure
    ======  =========================
    I       I_T  (x) I_A
    II      R_rw (x) I_A
    III     I_T  (x) L_graph
    IV      R_rw (x) L_graph
    ======  =========================

    With the area-fastest flattening the entry indexed by ``(t, i), (t', i')``
    equals ``temporal[t, t'] * spatial[i, i']``.

    Parameters
    ----------
    kind : str
        One of "I", "II", "III", "IV".
    r_gamma : StructureMatrix
        Temporal factor, kind RW1 (only its dimension is used for types I and III).
    r_kappa : StructureMatrix
        Spatial factor, kind ICAR (only its dimension is used for types I and II).
    """
    if kind not in INTERACTION_KINDS:
        raise ValueError(f"unknown interaction kind {kind!r}, expected one of {INTERACTION_KINDS}")
    if r_gamma.kind != "RW1":
        raise ValueError(f"temporal factor must have kind RW1, got {r_gamma.kind}")
    if r_kappa.kind != "ICAR":
        raise ValueError(f"spatial factor must have kind ICAR, got {r_kappa.kind}")
    num_years, num_areas = r_gamma.dim, r_kappa.dim
    eye_t = sp.identity(num_years, format="csr")
    eye_a = sp.identity(num_areas, format="csr")
    if kind == "I":
        temporal, spatial = eye_t, eye_a
        null_t, null_a = 0, 0
    elif kind == "II":
        temporal, spatial = r_gamma.entries, eye_a
        null_t, null_a = r_gamma.null_dim, 0
    elif kind == "III":
        temporal, spatial = eye_t, r_kappa.entries
        null_t, null_a = 0, r_kappa.null_dim
    else:
        temporal, spatial = r_gamma.entries, r_kappa.entries
        null_t, null_a = r_gamma.null_dim, r_kappa.null_dim
    dim = num_years * num_areas
    # rank of a Kronecker product is the product of the factor ranks
    rank = (num_years - null_t) * (num_areas - null_a)
    return StructureMatrix(
        kind=f"Type{kind}",
        dim=dim,
        entries=sp.kron(temporal, spatial, format="csr"),
        null_dim=dim - rank,
    )


def _per_year_rows(num_areas: int, num_years: int, areas: np.ndarray) -> np.ndarray:
    """One row per year summing the given areas in that year."""
    rows = np.zeros((num_years, num_years * num_areas))
    for t in range(num_years):
        rows[t, t * num_areas + areas] = 1.0
    return rows


def _per_area_rows(num_areas: int, num_years: int, areas: np.ndarray) -> np.ndarray:
    """One row per listed area summing its cells over all years."""
    rows = np.zeros((len(areas), num_years * num_areas))
    for k, i in enumerate(areas):
        rows[k, np.arange(num_years) * num_areas + i] = 1.0
    return rows


def interaction_constraints(
    kind: str,
    num_areas: int,
    num_years: int,
    component_labels: np.ndarray | None = None,
    block_label: str = "chi",
) -> ConstraintSet:
    """Identifiability constraints for an interaction block.

    Type I constrains the grand sum; type II the per-area sums over years;
    type III the per-year sums over areas; type IV both families with the
    implied redundancy removed.

    When the spatial graph is disconnected, pass ``component_labels`` so the
    per-year sums of types III and IV are taken within each connected
    component (the structure's null space is larger in that case and
    graph-wide sums would not pin it down).  Redundant rows of type IV are
    dropped deterministically: for each component, the last per-area row of
    that component goes.
    """
    if kind not in INTERACTION_KINDS:
        raise ValueError(f"unknown interaction kind {kind!r}")
    if num_areas < 2 or num_years < 2:
        raise ValueError("need at least 2 areas and 2 years")
    if component_labels is None:
        component_labels = np.zeros(num_areas, dtype=int)
    component_labels = np.asarray(component_labels)
    comps = [np.flatnonzero(component_labels == c) for c in np.unique(component_labels)]

    if kind == "I":
        matrix = np.ones((1, num_areas * num_years))
    elif kind == "II":
        matrix = _per_area_rows(num_areas, num_years, np.arange(num_areas))
    elif kind == "III":
        matrix = np.vstack([_per_year_rows(num_areas, num_years, c) for c in comps])
    else:
        year_rows = [_per_year_rows(num_areas, num_years, c) for c in comps]
        # dropping one per-area row per component removes the double-counted sums
        area_rows = [_per_area_rows(num_areas, num_years, c[:-1]) for c in comps]
        matrix = np.vstack(year_rows + area_rows)
    return ConstraintSet(matrix=matrix, block_label=block_label)


def constraints_for(kind: str, num_areas: int, num_years: int) -> ConstraintSet:
    """Interaction constraints assuming a connected spatial graph.

    Row counts: 1 (type I), ``num_areas`` (II), ``num_years`` (III),
    ``num_areas + num_years - 1`` (IV).
    """
    return interaction_constraints(kind, num_areas, num_years)


def component_constraints(graph: AreaGraph, block_label: str = "kappa") -> ConstraintSet:
    """One sum-to-zero row per connected component for a spatial ICAR block."""
    labels = graph.component_labels()
    rows = np.zeros((labels.max() + 1, graph.num_areas))
    rows[labels, np.arange(graph.num_areas)] = 1.0
    return ConstraintSet(matrix=rows, block_label=block_label)


def sum_to_zero_constraint(dim: int, block_label: str) -> ConstraintSet:
    """Single all-ones row constraining the block total to zero."""
    return ConstraintSet(matrix=np.ones((1, dim)), block_label=block_label)


def read_adjacency(path) -> AreaGraph:
    """Read the plain-text adjacency format.

    A header line ``areas A`` declares the area count; every following
    non-comment line holds one edge as two 0-based indices.  Lines starting
    with ``#`` and blank lines are skipped.
    """
    num_areas = None
    edges = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "areas":
                if num_areas is not None:
                    raise ValueError(f"{path}:{lineno}: duplicate 'areas' header")
                num_areas = int(parts[1])
                continue
            if num_areas is None:
                raise ValueError(f"{path}:{lineno}: edge before 'areas' header")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'i j', got {line!r}")
            edges.append((int(parts[0]), int(parts[1])))
    if num_areas is None:
        raise ValueError(f"{path}: missing 'areas' header")
    return build_area_graph(num_areas, edges)


def write_adjacency(graph: AreaGraph, path) -> None:
    """Write a graph in the format read by :func:`read_adjacency`."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"areas {graph.num_areas}\n")
        for i, j in sorted(graph.edges):
            fh.write(f"{i} {j}\n")
