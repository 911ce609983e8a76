"""Molecule ingestion: V2000 parsing, dataset filters, complete-graph features, splits.

Every molecule is represented as a complete graph over its atoms. Unordered
atom pairs are enumerated in row-major upper-triangular order
``(0,1), (0,2), ..., (0,M-1), (1,2), ...`` and every per-pair array in the
package follows that order.
"""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import store
from .elements import ATOMIC_NUMBER, normalize_symbol

log = logging.getLogger(__name__)

BOND_TYPES = ("single", "double", "triple", "aromatic")
EDGE_CLASSES = BOND_TYPES + ("none",)
_V2000_BOND_CODES = {1: "single", 2: "double", 3: "triple", 4: "aromatic"}
_V2000_CHARGE_CODES = {0: 0, 1: 3, 2: 2, 3: 1, 4: 0, 5: -1, 6: -2, 7: -3}

BUNDLE_KIND = "cvgae-dataset"
BUNDLE_VERSION = 1


class MolParseError(ValueError):
    """A single molblock could not be parsed."""


class FeaturizationError(ValueError):
    """An atom or bond is outside the vocabulary."""


@dataclass(frozen=True)
class Atom:
    element: str
    formal_charge: int = 0

    @property
    def is_heavy(self) -> bool:
        return self.element != "H"


@dataclass
class MolecularGraph:
    atoms: list[Atom]
    bonds: list[tuple[int, int, str]]
    name: str = ""
    node_features: np.ndarray | None = None
    edge_features: np.ndarray | None = None

    def __post_init__(self):
        m = len(self.atoms)
        for i, j, order in self.bonds:
            if i == j or not (0 <= i < m and 0 <= j < m):
                raise MolParseError(f"bond ({i}, {j}) invalid for {m} atoms")
            if order not in BOND_TYPES:
                raise MolParseError(f"unknown bond order {order!r}")

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_pairs(self) -> int:
        m = len(self.atoms)
        return m * (m - 1) // 2

    @property
    def heavy_mask(self) -> np.ndarray:
        return np.array([a.is_heavy for a in self.atoms], dtype=bool)

    @property
    def n_heavy(self) -> int:
        return int(self.heavy_mask.sum())

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in self.atoms]
        for i, j, _ in self.bonds:
            adj[i].append(j)
            adj[j].append(i)
        return adj

    def is_connected(self) -> bool:
        m = len(self.atoms)
        if m <= 1:
            return True
        adj = self.neighbors()
        seen = {0}
        stack = [0]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == m

    def featurized(self, vocab: "Vocab") -> "MolecularGraph":
        nodes, edges = featurize(self, vocab)
        return MolecularGraph(list(self.atoms), list(self.bonds), self.name, nodes, edges)


@dataclass
class Conformation:
    coords: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coordinates must be M x 3, got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("non-finite coordinate")

    def __len__(self) -> int:
        return len(self.coords)


@dataclass(frozen=True)
class Vocab:
    elements: tuple[str, ...]
    bond_types: tuple[str, ...] = EDGE_CLASSES

    @classmethod
    def from_graphs(cls, graphs) -> "Vocab":
        found = {a.element for g in graphs for a in g.atoms}
        return cls(tuple(sorted(found, key=ATOMIC_NUMBER.__getitem__)))

    @property
    def node_dim(self) -> int:
        return len(self.elements) + 2

    @property
    def edge_dim(self) -> int:
        return len(self.bond_types)

    def fingerprint(self) -> str:
        text = ",".join(self.elements) + "|" + ",".join(self.bond_types)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class FilterProfile:
    max_heavy: int | None = None
    allowed_elements: frozenset[str] | None = None

    @classmethod
    def preset(cls, name: str) -> "FilterProfile":
        try:
            return PROFILES[name]
        except KeyError:
            raise ValueError(f"unknown filter profile {name!r}; choose from {sorted(PROFILES)}") from None


_COD_ELEMENTS = "B C N O F Si P S Cl Ge As Se Br Te I".split()
_CSD_ELEMENTS = (
    "S N P Be Tc Xe Br Rh Os Zr In As Mo Dy Nb La Te Th Ga Tl Y Cr F Fe Sb Yb Tb Pu Am Re "
    "Eu Hg Mn Lu Nd Ce Ge Sc Gd Ca Ti Sn Ir Al K Tm Ni Er Co Bi Pr Rb Sm O Pt Hf Se Np Cd "
    "Pd Pb Ho Ag Mg Zn Ta V B Ru W Cl Au U Si Li C I"
).split()

PROFILES = {
    "none": FilterProfile(),
    "qm9": FilterProfile(9, frozenset(["H", "C", "N", "O", "F"])),
    "cod": FilterProfile(50, frozenset(["H", *_COD_ELEMENTS])),
    "csd": FilterProfile(50, frozenset(["H", *_CSD_ELEMENTS])),
}


def pair_indices(m: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column index arrays of the upper triangle, in pair order."""
    return np.triu_indices(m, k=1)


def pair_index(i: int, j: int, m: int) -> int:
    if i == j:
        raise ValueError("self pair has no index")
    if i > j:
        i, j = j, i
    return i * m - i * (i + 1) // 2 + (j - i - 1)


# -- parsing -------------------------------------------------------------------------


def _split_records(text: str) -> list[list[str]]:
    records, cur = [], []
    for line in text.splitlines():
        if line.startswith("$$$$"):
            records.append(cur)
            cur = []
        else:
            cur.append(line)
    if any(line.strip() for line in cur):
        records.append(cur)
    return records


def _int_field(text: str, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise MolParseError(f"malformed {what}: {text!r}") from None


def _parse_atom_line(line: str) -> tuple[str, float, float, float, int]:
    try:
        x, y, z = line[0:10], line[10:20], line[20:30]
        sym = line[31:34].strip()
        coords = float(x), float(y), float(z)
        charge_code = int(line[36:39]) if line[36:39].strip() else 0
    except (ValueError, IndexError):
        parts = line.split()
        if len(parts) < 4:
            raise MolParseError(f"malformed atom line: {line!r}") from None
        try:
            coords = float(parts[0]), float(parts[1]), float(parts[2])
        except ValueError:
            raise MolParseError(f"malformed atom line: {line!r}") from None
        sym = parts[3]
        charge_code = int(parts[5]) if len(parts) > 5 and parts[5].lstrip("-").isdigit() else 0
    if not sym:
        raise MolParseError(f"missing element symbol: {line!r}")
    return sym, *coords, _V2000_CHARGE_CODES.get(charge_code, 0)


def parse_molblock(lines: list[str]) -> tuple[MolecularGraph, Conformation]:
    """Parse one V2000 molblock (without the ``$$$$`` terminator)."""
    if len(lines) < 4:
        raise MolParseError("truncated block: missing header or counts line")
    name = lines[0].strip()
    counts = lines[3]
    if "V3000" in counts:
        raise MolParseError("V3000 molblocks are not supported")
    n_atoms = _int_field(counts[0:3], "counts line")
    n_bonds = _int_field(counts[3:6], "counts line")
    if n_atoms < 1 or n_bonds < 0:
        raise MolParseError(f"malformed counts line: {counts!r}")
    if len(lines) < 4 + n_atoms + n_bonds:
        raise MolParseError(
            f"truncated block: counts line declares {n_atoms} atoms and {n_bonds} bonds "
            f"but only {len(lines) - 4} lines follow"
        )

    atoms, coords = [], []
    for line in lines[4 : 4 + n_atoms]:
        sym, x, y, z, charge = _parse_atom_line(line)
        try:
            element = normalize_symbol(sym)
        except KeyError as exc:
            raise MolParseError(str(exc)) from None
        atoms.append([element, charge])
        coords.append((x, y, z))

    bonds = []
    for line in lines[4 + n_atoms : 4 + n_atoms + n_bonds]:
        try:
            a, b, code = int(line[0:3]), int(line[3:6]), int(line[6:9])
        except ValueError:
            parts = line.split()
            if len(parts) < 3:
                raise MolParseError(f"malformed bond line: {line!r}") from None
            a, b, code = (_int_field(p, "bond line") for p in parts[:3])
        if not (1 <= a <= n_atoms and 1 <= b <= n_atoms) or a == b:
            raise MolParseError(f"bond atom index out of range: {line!r}")
        if code not in _V2000_BOND_CODES:
            raise MolParseError(f"unsupported bond type {code}")
        bonds.append((a - 1, b - 1, _V2000_BOND_CODES[code]))

    # property block; M  CHG supersedes the atom-block charge field
    charged = False
    for line in lines[4 + n_atoms + n_bonds :]:
        if line.startswith("M  END"):
            break
        if line.startswith("M  CHG"):
            if not charged:
                for at in atoms:
                    at[1] = 0
                charged = True
            parts = line.split()[3:]
            for k in range(0, len(parts) - 1, 2):
                idx = _int_field(parts[k], "M  CHG entry")
                if not 1 <= idx <= n_atoms:
                    raise MolParseError(f"M  CHG atom index out of range: {line!r}")
                atoms[idx - 1][1] = _int_field(parts[k + 1], "M  CHG entry")

    graph = MolecularGraph([Atom(e, c) for e, c in atoms], bonds, name)
    try:
        conf = Conformation(np.array(coords, dtype=np.float64))
    except ValueError as exc:
        raise MolParseError(str(exc)) from None
    return graph, conf


def filter_molecule(
    graph: MolecularGraph, max_heavy: int | None = None, allowed_elements=None
) -> tuple[bool, str]:
    """Apply the ingestion filters; returns ``(accepted, reason)``."""
    if allowed_elements is not None:
        bad = sorted({a.element for a in graph.atoms} - set(allowed_elements))
        if bad:
            return False, f"element not allowed: {','.join(bad)}"
    if max_heavy is not None and graph.n_heavy > max_heavy:
        return False, f"heavy-atom cap: {graph.n_heavy} > {max_heavy}"
    if not graph.is_connected():
        return False, "disconnected compound"
    return True, "ok"


def parse_sdf(data, profile: FilterProfile | None = None, rejected: list | None = None):
    """Parse a concatenation of V2000 molblocks.

    Returns the accepted ``(graph, conformation)`` pairs. Records that fail to
    parse or fail the filters are skipped; each is logged and, when
    ``rejected`` is given, appended to it as ``(record_index, title, reason)``.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8", errors="replace")
    profile = profile or FilterProfile()
    out = []
    for idx, lines in enumerate(_split_records(data)):
        title = lines[0].strip() if lines else ""
        try:
            graph, conf = parse_molblock(lines)
        except MolParseError as exc:
            reason = f"parse error: {exc}"
        else:
            ok, reason = filter_molecule(graph, profile.max_heavy, profile.allowed_elements)
            if ok:
                if not graph.name:
                    graph.name = f"mol{idx}"
                out.append((graph, conf))
                continue
        log.info("skipping record %d (%s): %s", idx, title or "untitled", reason)
        if rejected is not None:
            rejected.append((idx, title, reason))
    return out


def read_xyz(text: str) -> list[tuple[str, list[str], np.ndarray]]:
    """Read concatenated XYZ blocks as ``(comment, elements, coords)`` triples."""
    lines = text.splitlines()
    blocks = []
    pos = 0
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        try:
            n = int(lines[pos].strip())
        except ValueError:
            raise MolParseError(f"expected atom count at line {pos + 1}") from None
        if pos + 2 + n > len(lines):
            raise MolParseError("truncated XYZ block")
        comment = lines[pos + 1].strip()
        elements, coords = [], []
        for line in lines[pos + 2 : pos + 2 + n]:
            parts = line.split()
            if len(parts) < 4:
                raise MolParseError(f"malformed XYZ line: {line!r}")
            elements.append(normalize_symbol(parts[0]))
            coords.append([float(v) for v in parts[1:4]])
        blocks.append((comment, elements, np.array(coords, dtype=np.float64).reshape(n, 3)))
        pos += 2 + n
    return blocks


def write_xyz(blocks) -> str:
    """Inverse of :func:`read_xyz`; floats use ``repr`` so values round-trip exactly."""
    out = []
    for comment, elements, coords in blocks:
        out.append(str(len(elements)))
        out.append(comment)
        for el, (x, y, z) in zip(elements, np.asarray(coords, dtype=np.float64)):
            out.append(f"{el} {float(x)!r} {float(y)!r} {float(z)!r}")
    return "\n".join(out) + "\n"


# -- features --------------------------------------------------------------------------


def featurize(graph: MolecularGraph, vocab: Vocab) -> tuple[np.ndarray, np.ndarray]:
    """Node features ``[element one-hot, formal charge, heavy-neighbour count]``
    and complete-graph edge features (bond-order one-hot with a ``none`` class)."""
    m = graph.n_atoms
    index = {e: k for k, e in enumerate(vocab.elements)}
    nodes = np.zeros((m, vocab.node_dim))
    heavy = graph.heavy_mask
    heavy_deg = np.zeros(m)
    for i, j, _ in graph.bonds:
        heavy_deg[i] += heavy[j]
        heavy_deg[j] += heavy[i]
    for k, atom in enumerate(graph.atoms):
        if atom.element not in index:
            raise FeaturizationError(f"element {atom.element!r} not in vocabulary")
        nodes[k, index[atom.element]] = 1.0
        nodes[k, -2] = atom.formal_charge
        nodes[k, -1] = heavy_deg[k]

    edge_slot = {b: k for k, b in enumerate(vocab.bond_types)}
    if "none" not in edge_slot:
        raise FeaturizationError("edge vocabulary needs a 'none' class")
    edges = np.zeros((graph.n_pairs, vocab.edge_dim))
    edges[:, edge_slot["none"]] = 1.0
    for i, j, order in graph.bonds:
        if order not in edge_slot:
            raise FeaturizationError(f"bond type {order!r} not in vocabulary")
        p = pair_index(i, j, m)
        edges[p] = 0.0
        edges[p, edge_slot[order]] = 1.0
    return nodes, edges


def distance_matrix(conf) -> np.ndarray:
    x = conf.coords if isinstance(conf, Conformation) else np.asarray(conf, dtype=np.float64)
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def permute(graph: MolecularGraph, conf: Conformation | None, perm) -> tuple:
    """Relabel atoms so that new atom ``k`` is old atom ``perm[k]``."""
    perm = np.asarray(perm)
    inv = np.argsort(perm)
    atoms = [graph.atoms[p] for p in perm]
    bonds = [(int(inv[i]), int(inv[j]), o) for i, j, o in graph.bonds]
    new = MolecularGraph(atoms, bonds, graph.name)
    if graph.node_features is not None:
        new.node_features = graph.node_features[perm]
        m = graph.n_atoms
        r, c = pair_indices(m)
        old_pair = [pair_index(int(perm[a]), int(perm[b]), m) for a, b in zip(r, c)]
        new.edge_features = graph.edge_features[old_pair]
    new_conf = Conformation(conf.coords[perm]) if conf is not None else None
    return new, new_conf


# -- dataset ----------------------------------------------------------------------------


@dataclass
class Dataset:
    entries: list[tuple[MolecularGraph, Conformation]]
    vocab: Vocab
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def split(self, name: str) -> list[int]:
        if name == "all":
            return list(range(len(self.entries)))
        if name not in self.splits:
            raise KeyError(f"dataset has no {name!r} split")
        return [int(i) for i in self.splits[name]]

    def graphs(self, indices=None) -> list[MolecularGraph]:
        idx = range(len(self.entries)) if indices is None else indices
        return [self.entries[i][0] for i in idx]

    def fingerprint(self) -> str:
        return hashlib.sha256(dumps_bundle(self)).hexdigest()[:16]


def build_dataset(records, vocab: Vocab | None = None) -> Dataset:
    graphs = [g for g, _ in records]
    vocab = vocab or Vocab.from_graphs(graphs)
    entries = [(g.featurized(vocab), c) for g, c in records]
    return Dataset(entries, vocab)


def split_dataset(dataset: Dataset, n_valid: int, n_test: int, seed: int) -> Dataset:
    n = len(dataset)
    if n_valid < 0 or n_test < 0 or n_valid + n_test > n:
        raise ValueError(f"cannot hold out {n_valid} + {n_test} molecules from {n}")
    order = np.random.default_rng(seed).permutation(n)
    splits = {
        "valid": np.sort(order[:n_valid]),
        "test": np.sort(order[n_valid : n_valid + n_test]),
        "train": np.sort(order[n_valid + n_test :]),
    }
    return Dataset(dataset.entries, dataset.vocab, splits)


def _bundle_payload(ds: Dataset) -> tuple[dict, dict]:
    graphs = [g for g, _ in ds.entries]
    n_atoms = np.array([g.n_atoms for g in graphs], dtype=np.int64)
    n_bonds = np.array([len(g.bonds) for g in graphs], dtype=np.int64)
    bond_code = {b: k for k, b in enumerate(BOND_TYPES)}
    arrays = {
        "n_atoms": n_atoms,
        "n_bonds": n_bonds,
        "atomic_number": np.array([ATOMIC_NUMBER[a.element] for g in graphs for a in g.atoms], dtype=np.int64),
        "formal_charge": np.array([a.formal_charge for g in graphs for a in g.atoms], dtype=np.int64),
        "bonds": np.array([(i, j, bond_code[o]) for g in graphs for i, j, o in g.bonds], dtype=np.int64).reshape(-1, 3),
        "coords": np.concatenate([c.coords for _, c in ds.entries]) if ds.entries else np.zeros((0, 3)),
        "node_features": np.concatenate([g.node_features for g in graphs]) if graphs else np.zeros((0, ds.vocab.node_dim)),
        "edge_features": np.concatenate([g.edge_features for g in graphs]) if graphs else np.zeros((0, ds.vocab.edge_dim)),
    }
    for name, idx in ds.splits.items():
        arrays[f"split/{name}"] = np.asarray(idx, dtype=np.int64)
    meta = {
        "names": [g.name for g in graphs],
        "elements": list(ds.vocab.elements),
        "bond_types": list(ds.vocab.bond_types),
    }
    return meta, arrays


def dumps_bundle(ds: Dataset) -> bytes:
    meta, arrays = _bundle_payload(ds)
    return store.dumps(BUNDLE_KIND, BUNDLE_VERSION, meta, arrays)


def save_bundle(ds: Dataset, path) -> None:
    Path(path).write_bytes(dumps_bundle(ds))


def load_bundle(path) -> Dataset:
    meta, arrays = store.load(path, BUNDLE_KIND, BUNDLE_VERSION)
    from .elements import SYMBOLS

    vocab = Vocab(tuple(meta["elements"]), tuple(meta["bond_types"]))
    entries = []
    a0 = b0 = p0 = 0
    for k, (m, nb) in enumerate(zip(arrays["n_atoms"], arrays["n_bonds"])):
        m, nb = int(m), int(nb)
        atoms = [
            Atom(SYMBOLS[int(z) - 1], int(q))
            for z, q in zip(arrays["atomic_number"][a0 : a0 + m], arrays["formal_charge"][a0 : a0 + m])
        ]
        bonds = [(int(i), int(j), BOND_TYPES[int(o)]) for i, j, o in arrays["bonds"][b0 : b0 + nb]]
        npair = m * (m - 1) // 2
        g = MolecularGraph(
            atoms,
            bonds,
            meta["names"][k],
            arrays["node_features"][a0 : a0 + m],
            arrays["edge_features"][p0 : p0 + npair],
        )
        entries.append((g, Conformation(arrays["coords"][a0 : a0 + m])))
        a0, b0, p0 = a0 + m, b0 + nb, p0 + npair
    splits = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("split/")}
    return Dataset(entries, vocab, splits)


def element_counts(graph: MolecularGraph) -> Counter:
    return Counter(a.element for a in graph.atoms)
