"""Regenerate data/sample_molecules.sdf: small molecules with embedded 3-D geometry.

Hydrogens are added to fill standard valences, then coordinates come from a
distance-geometry style fit (bond lengths, valence angles, soft non-bonded
repulsion) minimised from random starts. The geometries are plausible rather
than quantum-chemically exact; they exist to exercise the pipeline.

    python scripts/make_sample_data.py [--out data/sample_molecules.sdf]
"""

import argparse

import numpy as np
from scipy.optimize import minimize

VALENCE = {"C": 4, "N": 3, "O": 2, "F": 1}
ORDER = {1: 1.0, 2: 2.0, 3: 3.0, 4: 1.5}
BOND_LEN = {
    ("C", "C"): {1: 1.53, 2: 1.34, 3: 1.20, 4: 1.39},
    ("C", "N"): {1: 1.47, 2: 1.28, 3: 1.16, 4: 1.34},
    ("C", "O"): {1: 1.42, 2: 1.21, 4: 1.36},
    ("C", "F"): {1: 1.35},
    ("N", "N"): {1: 1.45, 2: 1.25, 3: 1.10, 4: 1.33},
    ("N", "O"): {1: 1.40, 2: 1.21, 4: 1.35},
    ("O", "O"): {1: 1.48},
    ("C", "H"): {1: 1.09},
    ("N", "H"): {1: 1.01},
    ("O", "H"): {1: 0.96},
}

# name, heavy atoms, bonds (i, j, order) with 4 = aromatic
MOLECULES = [
    ("acetonitrile", "CCN", [(0, 1, 1), (1, 2, 3)]),
    ("acetaldehyde", "CCO", [(0, 1, 1), (1, 2, 2)]),
    ("ethanol", "CCO", [(0, 1, 1), (1, 2, 1)]),
    ("dimethyl_ether", "COC", [(0, 1, 1), (1, 2, 1)]),
    ("formamide", "CON", [(0, 1, 2), (0, 2, 1)]),
    ("acetic_acid", "CCOO", [(0, 1, 1), (1, 2, 2), (1, 3, 1)]),
    ("methyl_formate", "COCO", [(0, 1, 2), (0, 2, 1), (2, 3, 1)]),
    ("acetamide", "CCON", [(0, 1, 1), (1, 2, 2), (1, 3, 1)]),
    ("acetyl_fluoride", "CCOF", [(0, 1, 1), (1, 2, 2), (1, 3, 1)]),
    ("glycolonitrile", "OCCN", [(0, 1, 1), (1, 2, 1), (2, 3, 3)]),
    ("acrolein", "CCCO", [(0, 1, 2), (1, 2, 1), (2, 3, 2)]),
    ("propynal", "CCCO", [(0, 1, 3), (1, 2, 1), (2, 3, 2)]),
    ("malononitrile", "NCCCN", [(0, 1, 3), (1, 2, 1), (2, 3, 1), (3, 4, 3)]),
    ("trifluoromethane", "CFFF", [(0, 1, 1), (0, 2, 1), (0, 3, 1)]),
    ("tetrafluoromethane", "CFFFF", [(0, 1, 1), (0, 2, 1), (0, 3, 1), (0, 4, 1)]),
    ("aminoacetonitrile", "NCCN", [(0, 1, 1), (1, 2, 1), (2, 3, 3)]),
    ("propiolic_acid", "CCCOO", [(0, 1, 3), (1, 2, 1), (2, 3, 2), (2, 4, 1)]),
    ("oxamide_fragment", "OCCO", [(0, 1, 2), (1, 2, 1), (2, 3, 2)]),
    ("fluoroacetylene", "CCF", [(0, 1, 3), (1, 2, 1)]),
    ("vinyl_fluoride", "CCF", [(0, 1, 2), (1, 2, 1)]),
    ("methylamine", "CN", [(0, 1, 1)]),
    ("methanol", "CO", [(0, 1, 1)]),
    ("methane", "C", []),
    ("water", "O", []),
    ("ammonia", "N", []),
    ("propane", "CCC", [(0, 1, 1), (1, 2, 1)]),
    ("oxirane", "CCO", [(0, 1, 1), (1, 2, 1), (2, 0, 1)]),
    ("aziridine", "CCN", [(0, 1, 1), (1, 2, 1), (2, 0, 1)]),
    ("cyanamide", "NCN", [(0, 1, 1), (1, 2, 3)]),
    ("urea", "NCON", [(0, 1, 1), (1, 2, 2), (1, 3, 1)]),
    ("fluoroacetonitrile", "FCCN", [(0, 1, 1), (1, 2, 1), (2, 3, 3)]),
    ("difluoroacetylene", "FCCF", [(0, 1, 1), (1, 2, 3), (2, 3, 1)]),
]


def add_hydrogens(heavy, bonds):
    atoms = list(heavy)
    used = np.zeros(len(heavy))
    for i, j, o in bonds:
        used[i] += ORDER[o]
        used[j] += ORDER[o]
    out = list(bonds)
    for k, el in enumerate(heavy):
        free = int(round(VALENCE[el] - used[k]))
        for _ in range(max(free, 0)):
            atoms.append("H")
            out.append((k, len(atoms) - 1, 1))
    return atoms, out


def bond_length(a, b, order):
    key = (a, b) if (a, b) in BOND_LEN else (b, a)
    if key not in BOND_LEN:
        key = ("C", "H") if "H" in (a, b) else ("C", "C")
    table = BOND_LEN[key]
    return table.get(order, table[min(table)])


def angle_for(atom_bonds):
    orders = [o for o in atom_bonds]
    if 3 in orders or orders.count(2) >= 2:
        return np.deg2rad(180.0)
    if 2 in orders or 4 in orders:
        return np.deg2rad(120.0)
    return np.deg2rad(109.5)


def targets(atoms, bonds):
    n = len(atoms)
    adj = [[] for _ in range(n)]
    exact = {}
    for i, j, o in bonds:
        adj[i].append((j, o))
        adj[j].append((i, o))
        exact[(min(i, j), max(i, j))] = bond_length(atoms[i], atoms[j], o)
    for c in range(n):
        nbs = adj[c]
        ang = angle_for([o for _, o in nbs])
        for x in range(len(nbs)):
            for y in range(x + 1, len(nbs)):
                a, b = nbs[x][0], nbs[y][0]
                key = (min(a, b), max(a, b))
                if key in exact:
                    continue
                da = exact[(min(a, c), max(a, c))]
                db = exact[(min(b, c), max(b, c))]
                exact[key] = np.sqrt(da * da + db * db - 2 * da * db * np.cos(ang))
    return exact


def embed(atoms, bonds, rng, restarts=8):
    n = len(atoms)
    exact = targets(atoms, bonds)
    pairs = np.array(list(exact.keys()), dtype=int).reshape(-1, 2)
    dist = np.array(list(exact.values()))
    iu = np.triu_indices(n, 1)
    known = set(exact)
    free = np.array([(a, b) for a, b in zip(*iu) if (a, b) not in known], dtype=int).reshape(-1, 2)

    def energy(flat):
        x = flat.reshape(n, 3)
        e = 0.0
        grad = np.zeros_like(x)
        if len(pairs):
            d = x[pairs[:, 0]] - x[pairs[:, 1]]
            r = np.linalg.norm(d, axis=1) + 1e-12
            diff = r - dist
            e += np.sum(diff**2)
            g = (2 * diff / r)[:, None] * d
            np.add.at(grad, pairs[:, 0], g)
            np.add.at(grad, pairs[:, 1], -g)
        if len(free):
            d = x[free[:, 0]] - x[free[:, 1]]
            r = np.linalg.norm(d, axis=1) + 1e-12
            lim = 2.4
            viol = np.minimum(r - lim, 0.0)
            e += 0.5 * np.sum(viol**2)
            g = (viol / r)[:, None] * d
            np.add.at(grad, free[:, 0], g)
            np.add.at(grad, free[:, 1], -g)
        return e, grad.ravel()

    best = None
    for _ in range(restarts):
        x0 = rng.normal(scale=1.5, size=(n, 3)).ravel()
        res = minimize(energy, x0, jac=True, method="L-BFGS-B", options={"maxiter": 2000})
        if best is None or res.fun < best.fun:
            best = res
    x = best.x.reshape(n, 3)
    return x - x.mean(axis=0)


def molblock(name, atoms, bonds, coords):
    lines = [name, "  cvgae-sample-data 3D", ""]
    lines.append(f"{len(atoms):3d}{len(bonds):3d}  0  0  0  0  0  0  0  0999 V2000")
    for el, (x, y, z) in zip(atoms, coords):
        lines.append(f"{x:10.4f}{y:10.4f}{z:10.4f} {el:<3} 0  0  0  0  0  0  0  0  0  0  0  0")
    for i, j, o in bonds:
        lines.append(f"{i + 1:3d}{j + 1:3d}{o:3d}  0")
    lines.append("M  END")
    return "\n".join(lines) + "\n$$$$\n"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/sample_molecules.sdf")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    text = []
    for name, heavy, bonds in MOLECULES:
        atoms, all_bonds = add_hydrogens(heavy, bonds)
        coords = embed(atoms, all_bonds, rng)
        text.append(molblock(name, atoms, all_bonds, coords))
    with open(args.out, "w") as fh:
        fh.write("".join(text))
    print(f"wrote {len(text)} molecules to {args.out}")


if __name__ == "__main__":
    main()
