"""RMSD statistics, diversity, heavy-atom grouping, dataset statistics and a random baseline."""

from __future__ import annotations

import csv
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .align import aligned_rmsd
from .elements import ATOMIC_WEIGHT


@dataclass
class MoleculeEval:
    mol_id: str
    n_heavy: int
    rmsds: np.ndarray
    n_requested: int

    @property
    def n_success(self) -> int:
        return len(self.rmsds)

    @property
    def mean(self) -> float:
        return float(np.mean(self.rmsds)) if len(self.rmsds) else float("nan")

    @property
    def std(self) -> float:
        # population standard deviation
        return float(np.std(self.rmsds)) if len(self.rmsds) else float("nan")

    @property
    def best(self) -> float:
        return float(np.min(self.rmsds)) if len(self.rmsds) else float("nan")

    @property
    def median(self) -> float:
        return float(np.median(self.rmsds)) if len(self.rmsds) else float("nan")


@dataclass
class EvalReport:
    molecules: list[MoleculeEval]
    median_of_mean: float
    median_of_std: float
    median_of_best: float
    success_per_test_set: float
    success_per_molecule: float
    method: str = ""


def _reference(references, mol_id):
    try:
        graph, conf = references[mol_id]
    except KeyError:
        raise KeyError(f"no reference for molecule {mol_id!r}") from None
    return graph, np.asarray(getattr(conf, "coords", conf), dtype=np.float64)


def molecule_evals(samples: dict, references: dict, n_requested: int | None = None) -> list[MoleculeEval]:
    """Heavy-atom aligned RMSD of every sample against its reference.

    ``samples`` maps molecule id to a list of coordinate arrays (possibly
    empty, meaning the method failed); ``references`` maps the same ids to
    ``(graph, conformation)``.
    """
    rows = []
    for mol_id, confs in samples.items():
        graph, ref = _reference(references, mol_id)
        mask = graph.heavy_mask
        r = np.array([aligned_rmsd(ref, np.asarray(x, dtype=np.float64), mask) for x in confs])
        rows.append(MoleculeEval(mol_id, int(mask.sum()), r, n_requested or max(len(confs), 1)))
    return rows


def summarize(rows: list[MoleculeEval], include=None, method: str = "") -> EvalReport:
    """Medians over molecules with at least one conformation (and in ``include`` if given)."""
    ok = [r for r in rows if r.n_success > 0 and (include is None or r.mol_id in include)]
    med = (lambda xs: float(np.median(xs))) if ok else (lambda xs: float("nan"))
    n = len(rows)
    return EvalReport(
        rows,
        med([r.mean for r in ok]),
        med([r.std for r in ok]),
        med([r.best for r in ok]),
        sum(r.n_success > 0 for r in rows) / n if n else float("nan"),
        float(np.mean([min(r.n_success / r.n_requested, 1.0) for r in rows])) if n else float("nan"),
        method,
    )


def eval_method(samples: dict, references: dict, n_requested: int | None = None, method: str = "") -> EvalReport:
    return summarize(molecule_evals(samples, references, n_requested), method=method)


def eval_methods(samples_by_method: dict, references: dict, n_requested: int | None = None) -> dict[str, EvalReport]:
    """Evaluate several methods; medians use only molecules every method succeeded on."""
    rows = {m: molecule_evals(s, references, n_requested) for m, s in samples_by_method.items()}
    common = None
    for rs in rows.values():
        ok = {r.mol_id for r in rs if r.n_success > 0}
        common = ok if common is None else common & ok
    return {m: summarize(rs, common or set(), m) for m, rs in rows.items()}


def diversity(samples: dict, heavy_masks: dict) -> tuple[float, float]:
    """Mean and population std of heavy-atom aligned RMSD over all unordered
    sample pairs, pooled across molecules. Molecules with < 2 samples are skipped."""
    vals = []
    for mol_id, confs in samples.items():
        mask = heavy_masks[mol_id]
        confs = [np.asarray(c, dtype=np.float64) for c in confs]
        for a in range(len(confs)):
            for b in range(a + 1, len(confs)):
                vals.append(aligned_rmsd(confs[a], confs[b], mask))
    if not vals:
        return float("nan"), float("nan")
    return float(np.mean(vals)), float(np.std(vals))


@dataclass
class HeavyAtomGroup:
    n_heavy: int
    count: int
    mean_best: float
    std_best: float
    mean_median: float
    std_median: float


def group_by_heavy_atoms(rows: list[MoleculeEval], min_fraction: float = 0.01):
    """Group successful molecules by heavy-atom count.

    Groups holding fewer than ``min_fraction`` of the mean group population are
    dropped. Returns ``(kept_groups, counts_before_omission)``.
    """
    buckets = defaultdict(list)
    for r in rows:
        if r.n_success:
            buckets[r.n_heavy].append(r)
    counts = {k: len(v) for k, v in sorted(buckets.items())}
    if not counts:
        return [], counts
    cutoff = min_fraction * np.mean(list(counts.values()))
    groups = []
    for k, rs in sorted(buckets.items()):
        if len(rs) < cutoff:
            continue
        best = np.array([r.best for r in rs])
        med = np.array([r.median for r in rs])
        groups.append(HeavyAtomGroup(k, len(rs), best.mean(), best.std(), med.mean(), med.std()))
    return groups, counts


# -- dataset statistics -------------------------------------------------------------


def ring_bonds(graph) -> set[tuple[int, int]]:
    """Bonds lying on at least one cycle (i.e. bonds that are not bridges)."""
    adj = graph.neighbors()
    ring = set()
    for i, j, _ in graph.bonds:
        # is j reachable from i without using the bond (i, j)?
        seen, stack = {i}, [i]
        found = False
        while stack and not found:
            a = stack.pop()
            for b in adj[a]:
                if (a, b) in ((i, j), (j, i)):
                    continue
                if b == j:
                    found = True
                    break
                if b not in seen:
                    seen.add(b)
                    stack.append(b)
        if found:
            ring.add((min(i, j), max(i, j)))
    return ring


def rotatable_bonds(graph) -> int:
    """Acyclic single bonds whose two heavy endpoints each have >= 2 heavy neighbours."""
    heavy = graph.heavy_mask
    hdeg = np.zeros(graph.n_atoms, dtype=int)
    for i, j, _ in graph.bonds:
        hdeg[i] += heavy[j]
        hdeg[j] += heavy[i]
    rings = ring_bonds(graph)
    n = 0
    for i, j, order in graph.bonds:
        if order != "single" or (min(i, j), max(i, j)) in rings:
            continue
        if heavy[i] and heavy[j] and hdeg[i] >= 2 and hdeg[j] >= 2:
            n += 1
    return n


def molecular_mass(graph) -> float:
    return float(sum(ATOMIC_WEIGHT[a.element] for a in graph.atoms))


def dataset_stats(dataset) -> dict:
    """Per-molecule rows and element frequencies for a dataset."""
    per_mol = []
    overall = Counter()
    containing = Counter()
    for g, _ in dataset.entries:
        counts = Counter(a.element for a in g.atoms)
        overall.update(counts)
        containing.update(counts.keys())
        per_mol.append({
            "mol_id": g.name,
            "n_atoms": g.n_atoms,
            "n_heavy": g.n_heavy,
            "n_bonds": len(g.bonds),
            "n_rotatable": rotatable_bonds(g),
            "mass": molecular_mass(g),
            "elements": dict(sorted(counts.items())),
        })
    n = max(len(dataset.entries), 1)
    elements = [
        {"element": e, "atom_count": overall[e], "molecule_fraction": containing[e] / n,
         "mean_per_molecule": overall[e] / n}
        for e in sorted(overall, key=lambda x: (-overall[x], x))
    ]
    return {"molecules": per_mol, "elements": elements}


def random_baseline(graph, S: int, rng, scale: float = 1.0) -> list[np.ndarray]:
    """``S`` i.i.d. normal coordinate sets with std ``scale * M**(1/3)`` Angstrom."""
    if S < 1:
        raise ValueError("S must be at least 1")
    m = graph.n_atoms
    sd = scale * m ** (1.0 / 3.0)
    return [rng.normal(0.0, 1.0, size=(m, 3)) * sd for _ in range(S)]


# -- CSV output ----------------------------------------------------------------------


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return x


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def write_reports(reports: dict[str, EvalReport], out_dir, diversities=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(
        out / "aggregate.csv",
        ["method", "median_of_mean", "median_of_std", "median_of_best", "success_per_test_set", "success_per_molecule"],
        [[m, r.median_of_mean, r.median_of_std, r.median_of_best, r.success_per_test_set, r.success_per_molecule]
         for m, r in reports.items()],
    )
    for m, r in reports.items():
        write_csv(
            out / f"per_molecule_{m}.csv",
            ["mol_id", "n_heavy", "n_success", "mean", "std", "best", "median"],
            [[x.mol_id, x.n_heavy, x.n_success, x.mean, x.std, x.best, x.median] for x in r.molecules],
        )
        groups, _ = group_by_heavy_atoms(r.molecules)
        write_csv(
            out / f"grouped_{m}.csv",
            ["n_heavy", "count", "mean_best", "std_best", "mean_median", "std_median"],
            [[g.n_heavy, g.count, float(g.mean_best), float(g.std_best), float(g.mean_median), float(g.std_median)]
             for g in groups],
        )
    if diversities:
        write_csv(out / "diversity.csv", ["method", "mean", "std"], [[m, *d] for m, d in diversities.items()])


def write_dataset_stats(stats: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(
        out / "elements.csv",
        ["element", "atom_count", "molecule_fraction", "mean_per_molecule"],
        [[e["element"], e["atom_count"], float(e["molecule_fraction"]), float(e["mean_per_molecule"])]
         for e in stats["elements"]],
    )
    write_csv(
        out / "molecules.csv",
        ["mol_id", "n_atoms", "n_heavy", "n_bonds", "n_rotatable", "mass", "elements"],
        [[m["mol_id"], m["n_atoms"], m["n_heavy"], m["n_bonds"], m["n_rotatable"], m["mass"],
          ";".join(f"{k}:{v}" for k, v in m["elements"].items())] for m in stats["molecules"]],
    )
