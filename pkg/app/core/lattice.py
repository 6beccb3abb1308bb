"""
Ladder qubit graphs.

Builds the globally driven ladder, the single row and the reversed-H sub-layout,
and the generic small graphs used by tests. Qubits are indexed row-major over
the grid; mediating inter-row qubits are appended after the grid qubits.
"""

import logging
from dataclasses import dataclass, field

SPECIES = ("A", "B", "C")
ROW_PATTERN = "CABA"
CROSSED_DRIVE_MULTIPLIER = 2

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QubitSpec:
    index: int
    species: str
    crossed: bool
    freq_class: int
    degree: int
    row: int | None = None
    column: int | None = None
    coupler: bool = False

    @property
    def drive_multiplier(self):
        return CROSSED_DRIVE_MULTIPLIER if self.crossed else 1


@dataclass(frozen=True)
class LadderLayout:
    """
    Immutable qubit graph.

    Attributes:
        qubits (tuple[QubitSpec]): One entry per qubit, ordered by index.
        edges (tuple[tuple[int, int]]): Sorted ZZ coupling pairs (i < j).
        rows (int): Number of grid rows.
        columns (int): Number of grid columns.
        name (str): Short identifier used in outputs.
    """
    qubits: tuple
    edges: tuple
    rows: int
    columns: int
    name: str = "custom"
    neighbors: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        adjacency = [[] for _ in self.qubits]
        for i, j in self.edges:
            adjacency[i].append(j)
            adjacency[j].append(i)
        object.__setattr__(self, "neighbors", tuple(tuple(sorted(a)) for a in adjacency))

    @property
    def n_qubits(self):
        return len(self.qubits)

    @property
    def dimension(self):
        return 2 ** len(self.qubits)

    def species_indices(self, species):
        return tuple(q.index for q in self.qubits if q.species == species)

    def column_qubits(self, column):
        """Grid qubits of one column, ordered by row."""
        return tuple(q.index for q in self.qubits if not q.coupler and q.column == column)

    def couplers(self):
        return tuple(q.index for q in self.qubits if q.coupler)


def _row_species(column, start_offset):
    return ROW_PATTERN[(column + start_offset) % len(ROW_PATTERN)]


def _freq_class(species, degree):
    if species == "A":
        return 0
    freq_class = degree - 2
    if freq_class not in (-1, 0, 1):
        raise ValueError(f"Qubit of species {species} with degree {degree} has no frequency correction class.")
    return freq_class


def _finalize(species, edges, crossed, name, rows, columns, positions=None, couplers=()):
    """Validates a graph and assigns degrees and frequency classes."""
    n = len(species)
    normalized = set()
    for i, j in edges:
        if i == j:
            raise ValueError(f"Self-loop on qubit {i}.")
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"Edge ({i}, {j}) references a missing qubit.")
        pair = (min(i, j), max(i, j))
        if pair in normalized:
            raise ValueError(f"Duplicate edge {pair}.")
        if species[i] == species[j]:
            raise ValueError(f"Edge {pair} couples two qubits of species {species[i]}.")
        normalized.add(pair)

    degree = [0] * n
    for i, j in normalized:
        degree[i] += 1
        degree[j] += 1

    crossed = set(crossed)
    qubits = []
    for index, s in enumerate(species):
        if s not in SPECIES:
            raise ValueError(f"Unknown species '{s}'.")
        row, column = positions[index] if positions else (None, None)
        qubits.append(QubitSpec(
            index=index,
            species=s,
            crossed=index in crossed,
            freq_class=_freq_class(s, degree[index]),
            degree=degree[index],
            row=row,
            column=column,
            coupler=index in couplers,
        ))
    return LadderLayout(qubits=tuple(qubits), edges=tuple(sorted(normalized)), rows=rows, columns=columns, name=name)


def _build_grid(rows, columns, start_offset, crossed_columns, coupler_columns, name):
    species, positions, edges, crossed = [], [], [], []
    for r in range(rows):
        for c in range(columns):
            index = r * columns + c
            species.append(_row_species(c, start_offset))
            positions.append((r, c))
            if c > 0:
                edges.append((index - 1, index))
            if c in crossed_columns:
                crossed.append(index)

    couplers = []
    for r, c in enumerate(coupler_columns):
        index = len(species)
        species.append("A")
        # couplers sit between rows r and r + 1
        positions.append((r, c))
        edges.append((r * columns + c, index))
        edges.append(((r + 1) * columns + c, index))
        crossed.append(index)
        couplers.append(index)

    return _finalize(species, edges, crossed, name, rows, columns, positions, couplers)


def _single_qubit_column(n_rows):
    """B/C column nearest the processing-area centre, on its left."""
    centre = n_rows + 1
    return centre if centre % 2 == 0 else centre - 1


def build_ladder(N):
    """
    Builds the N-row ladder with 2N+3 columns.

    Each row follows the CABA pattern. One crossed B/C column hosts the single
    qubit gates and N-1 crossed A couplers join vertically adjacent rows.
    Couplers alternate between the two B/C columns nearest the single-qubit
    column so that no qubit has more than one coupler.

    Args:
        N (int): Number of rows.

    Returns:
        LadderLayout: Layout with 2N^2+4N-1 qubits.
    """
    if not isinstance(N, int) or N <= 0:
        raise ValueError(f"Ladder needs a positive number of rows, got {N}.")
    columns = 2 * N + 3
    sq_column = _single_qubit_column(N)
    candidates = sorted(
        (c for c in range(2, 2 * N + 1, 2) if c != sq_column),
        key=lambda c: (abs(c - sq_column), -c),
    )
    coupler_columns = [candidates[r % len(candidates)] for r in range(N - 1)] if N > 1 else []
    layout = _build_grid(N, columns, 0, {sq_column}, coupler_columns, f"ladder{N}")
    logger.debug(f"Built ladder N={N}: {layout.n_qubits} qubits, couplers at columns {coupler_columns}.")
    return layout


def build_row(n, start="C", crossed=None):
    """
    Builds a single row of n qubits.

    Args:
        n (int): Odd number of qubits, at least 3.
        start (str): Species of the first qubit; 'C' for the CABA phase, 'A' for ABAC.
        crossed (iterable[int] | None): Crossed columns. None places one crossed
            B/C column left of centre for rows of 7 or more qubits.

    Returns:
        LadderLayout: Chain layout.
    """
    if n < 3 or n % 2 == 0:
        raise ValueError(f"Row length must be odd and at least 3, got {n}.")
    if start not in ("C", "A"):
        raise ValueError(f"Row must start on a C or A qubit, got '{start}'.")
    offset = ROW_PATTERN.index(start)
    if crossed is None:
        crossed = ()
        if n >= 7:
            centre = (n - 1) // 2
            crossed = (next(c for c in range(centre, -1, -1) if _row_species(c, offset) != "A"),)
    for c in crossed:
        if not 0 <= c < n:
            raise ValueError(f"Crossed column {c} outside a row of {n}.")
    return _build_grid(1, n, offset, set(crossed), [], f"row{n}")


def build_reversed_h():
    """
    Builds the 7-qubit two-qubit-gate layout: two A-C-A arms joined at their C
    qubits by a crossed A bridge.
    """
    return _build_grid(2, 3, ROW_PATTERN.index("A") + 2, set(), [1], "reversed_h")


def build_layout(species, edges, crossed=(), name="custom"):
    """Builds an arbitrary small graph; used for tests and hand-made layouts."""
    return _finalize(list(species), list(edges), crossed, name, rows=1, columns=len(species))


def layout_by_name(name):
    """Resolves 'row<n>', 'ladder<N>' and 'reversed_h'."""
    if name == "reversed_h":
        return build_reversed_h()
    if name.startswith("ladder"):
        return build_ladder(int(name[len("ladder"):]))
    if name.startswith("row"):
        return build_row(int(name[len("row"):]))
    raise ValueError(f"Unknown layout '{name}'.")


def layout_to_dict(layout):
    return {
        "name": layout.name,
        "rows": layout.rows,
        "columns": layout.columns,
        "qubits": [
            {
                "index": q.index,
                "species": q.species,
                "crossed": q.crossed,
                "freq_class": q.freq_class,
                "degree": q.degree,
                "row": q.row,
                "column": q.column,
                "coupler": q.coupler,
            }
            for q in layout.qubits
        ],
        "edges": [list(e) for e in layout.edges],
    }


def layout_from_dict(data):
    layout = _finalize(
        [q["species"] for q in data["qubits"]],
        [tuple(e) for e in data["edges"]],
        [q["index"] for q in data["qubits"] if q["crossed"]],
        data.get("name", "custom"),
        data["rows"],
        data["columns"],
        [(q.get("row"), q.get("column")) for q in data["qubits"]],
        {q["index"] for q in data["qubits"] if q.get("coupler")},
    )
    for stored, built in zip(data["qubits"], layout.qubits):
        if stored["freq_class"] != built.freq_class:
            raise ValueError(f"Qubit {built.index}: stored freq_class {stored['freq_class']} disagrees with its degree.")
    return layout
