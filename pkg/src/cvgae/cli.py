"""Command-line entry point: ingest, stats, train, sample, eval, gradcheck."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import evaluate as ev
from . import molgraph as mg
from .model import elbo_loss, init_params, sample_conformations
from .mpnn import GraphBatch, MPNNConfig
from .store import StoreError
from .train import Trainer, TrainConfig, write_trace

log = logging.getLogger("cvgae")


class ConfigError(ValueError):
    pass


class CommandError(RuntimeError):
    pass


# -- run configuration -----------------------------------------------------------------


@dataclass
class DatasetSection:
    paths: list[str] = field(default_factory=list)
    profile: str | dict = "none"
    n_valid: int = 0
    n_test: int = 0

    def filter_profile(self) -> mg.FilterProfile:
        if isinstance(self.profile, str):
            return mg.FilterProfile.preset(self.profile)
        _strict(self.profile, {"max_heavy", "elements"}, "dataset.profile")
        elements = self.profile.get("elements")
        return mg.FilterProfile(self.profile.get("max_heavy"), frozenset(elements) if elements else None)


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: MPNNConfig = field(default_factory=MPNNConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    samples: int = 100
    out_dir: str = "run"
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "dataset": asdict(self.dataset),
            "model": asdict(self.model),
            "train": asdict(self.train),
            "samples": self.samples,
            "out_dir": self.out_dir,
            "seed": self.seed,
        }

    def portable_dict(self) -> dict:
        # locations do not influence results
        d = self.to_dict()
        d.pop("out_dir")
        d["dataset"].pop("paths")
        return d

    def reproducibility_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.portable_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _strict(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def parse_config(data: dict) -> RunConfig:
    _strict(data, _names(RunConfig), "config")
    try:
        ds = data.get("dataset", {})
        _strict(ds, _names(DatasetSection), "dataset")
        model = data.get("model", {})
        _strict(model, _names(MPNNConfig), "model")
        train = data.get("train", {})
        _strict(train, _names(TrainConfig), "train")
        cfg = RunConfig(
            DatasetSection(**ds),
            MPNNConfig(**model),
            TrainConfig(**train),
            int(data.get("samples", 100)),
            str(data.get("out_dir", "run")),
            int(data.get("seed", 0)),
        )
        cfg.dataset.filter_profile()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if cfg.samples < 1:
        raise ConfigError("samples must be at least 1")
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(data)


def _manifest(command: str, **fields_) -> dict:
    return {"command": command, "code_version": __version__, **fields_}


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# -- commands --------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    cfg = load_config(args.config)
    paths = args.paths or cfg.dataset.paths
    if not paths:
        raise CommandError("no SDF input given")
    profile = mg.FilterProfile.preset(args.profile) if args.profile else cfg.dataset.filter_profile()
    records, rejected = [], []
    for p in paths:
        if not Path(p).is_file():
            raise CommandError(f"input file not found: {p}")
        rej = []
        recs = mg.parse_sdf(Path(p).read_bytes(), profile, rej)
        records.extend(recs)
        rejected.extend((Path(p).name, *r) for r in rej)
    if not records:
        raise CommandError("no molecule passed ingestion")
    ds = mg.build_dataset(records)
    n_valid = cfg.dataset.n_valid if args.n_valid is None else args.n_valid
    n_test = cfg.dataset.n_test if args.n_test is None else args.n_test
    seed = cfg.seed if args.seed is None else args.seed
    ds = mg.split_dataset(ds, n_valid, n_test, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    mg.save_bundle(ds, out)
    reasons: dict[str, int] = {}
    for *_, reason in rejected:
        key = reason.split(":")[0]
        reasons[key] = reasons.get(key, 0) + 1
    _write_json(
        out.with_name(out.name + ".manifest.json"),
        _manifest(
            "ingest",
            inputs=[_sha(p) for p in paths],
            profile={"max_heavy": profile.max_heavy,
                     "elements": sorted(profile.allowed_elements) if profile.allowed_elements else None},
            seed=seed,
            accepted=len(ds),
            rejected=len(rejected),
            rejected_reasons=reasons,
            dataset_fingerprint=ds.fingerprint(),
            splits={k: len(v) for k, v in sorted(ds.splits.items())},
        ),
    )
    print(f"accepted {len(ds)} rejected {len(rejected)}")
    for fname, idx, title, reason in rejected:
        print(f"  rejected {fname}#{idx} {title or '-'}: {reason}")
    print("splits: " + ", ".join(f"{k}={len(v)}" for k, v in sorted(ds.splits.items())))
    return 0


def _load_dataset(path) -> mg.Dataset:
    if path is None:
        raise CommandError("--dataset is required")
    if not Path(path).is_file():
        raise CommandError(f"dataset bundle not found: {path}")
    return mg.load_bundle(path)


def cmd_stats(args) -> int:
    ds = _load_dataset(args.dataset)
    stats = ev.dataset_stats(ds)
    ev.write_dataset_stats(stats, args.out)
    _write_json(Path(args.out) / "manifest.json", _manifest("stats", dataset_fingerprint=ds.fingerprint()))
    print(f"wrote dataset statistics for {len(ds)} molecules to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    ds = _load_dataset(args.dataset)
    train_cfg = cfg.train
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["max_steps"] = args.steps
    if overrides:
        train_cfg = TrainConfig(**{**asdict(train_cfg), **overrides})
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_idx = ds.split("train") if "train" in ds.splits else ds.split("all")
    valid_idx = ds.split("valid") if "valid" in ds.splits else []
    if not train_idx:
        raise CommandError("training split is empty")

    extra = {"vocab_fingerprint": ds.vocab.fingerprint(), "d_v": ds.vocab.node_dim, "d_e": ds.vocab.edge_dim}
    if args.checkpoint:
        trainer = Trainer.load(args.checkpoint)
        if trainer.meta.get("vocab_fingerprint") != ds.vocab.fingerprint():
            raise CommandError("checkpoint vocabulary does not match the dataset")
        if trainer.mconfig != cfg.model:
            raise CommandError("checkpoint model configuration differs from the config")
        trainer.tconfig = TrainConfig(**{**asdict(trainer.tconfig), "max_steps": train_cfg.max_steps})
    else:
        trainer = Trainer.create(cfg.model, train_cfg, ds.vocab.node_dim, ds.vocab.edge_dim, extra)

    t0 = time.perf_counter()
    trainer.fit(ds, train_idx, valid_idx, out)
    log.info("trained to step %d in %.1fs", trainer.step, time.perf_counter() - t0)
    trainer.save(out / "final.ckpt")
    write_trace(trainer.trace, out / "loss.csv")
    _write_json(
        out / "manifest.json",
        _manifest(
            "train",
            config=cfg.portable_dict() | {"train": asdict(trainer.tconfig)},
            config_hash=cfg.reproducibility_hash(),
            seed=trainer.tconfig.seed,
            dataset_fingerprint=ds.fingerprint(),
            steps=trainer.step,
        ),
    )
    last = trainer.trace[-1] if trainer.trace else None
    print(f"step {trainer.step}" + (f" loss {-last[4]:.6f}" if last else ""))
    return 0


def write_conformations(path, ds: mg.Dataset, samples: dict[int, list]) -> None:
    blocks = []
    for i, confs in samples.items():
        g = ds.entries[i][0]
        els = [a.element for a in g.atoms]
        for s, x in enumerate(confs):
            blocks.append((f"mol={i} name={g.name} sample={s}", els, x))
    Path(path).write_text(mg.write_xyz(blocks))


def read_conformations(path, ds: mg.Dataset) -> dict[int, list[np.ndarray]]:
    out: dict[int, list] = {}
    for comment, els, coords in mg.read_xyz(Path(path).read_text()):
        tags = dict(t.split("=", 1) for t in comment.split() if "=" in t)
        if "mol" not in tags:
            raise CommandError(f"{path}: block comment lacks a mol= tag")
        i = int(tags["mol"])
        if not 0 <= i < len(ds):
            raise CommandError(f"{path}: molecule index {i} not in dataset")
        g = ds.entries[i][0]
        if els != [a.element for a in g.atoms]:
            raise CommandError(f"{path}: atom order of molecule {i} does not match the dataset")
        out.setdefault(i, []).append(coords)
    return out


def cmd_sample(args) -> int:
    ds = _load_dataset(args.dataset)
    idx = ds.split(args.split) if (args.split in ds.splits or args.split == "all") else None
    if idx is None:
        raise CommandError(f"dataset has no {args.split!r} split")
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    S = args.samples
    samples = {}
    t0 = time.perf_counter()
    if args.method == "random":
        for i in idx:
            samples[i] = ev.random_baseline(ds.entries[i][0], S, rng, args.scale)
        ck = None
    else:
        if not args.checkpoint:
            raise CommandError("--checkpoint is required for cvgae sampling")
        trainer = Trainer.load(args.checkpoint)
        if trainer.meta.get("vocab_fingerprint") != ds.vocab.fingerprint():
            raise CommandError("checkpoint vocabulary does not match the dataset")
        for i in idx:
            samples[i] = sample_conformations(ds.entries[i][0], trainer.params, trainer.mconfig, S, rng)
        ck = _sha(args.checkpoint)
    log.info("sampled %d x %d conformations in %.2fs", len(idx), S, time.perf_counter() - t0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_conformations(out, ds, samples)
    _write_json(
        out.with_name(out.name + ".manifest.json"),
        _manifest("sample", method=args.method, seed=seed, samples=S, split=args.split,
                  checkpoint=ck, dataset_fingerprint=ds.fingerprint()),
    )
    print(f"wrote {sum(len(v) for v in samples.values())} conformations for {len(samples)} molecules")
    return 0


def cmd_eval(args) -> int:
    ds = _load_dataset(args.dataset)
    idx = ds.split(args.split) if (args.split in ds.splits or args.split == "all") else ds.split("all")
    methods = {}
    for spec in args.files:
        name, _, path = spec.rpartition("=") if "=" in spec else (Path(spec).stem, "", spec)
        if not Path(path).is_file():
            raise CommandError(f"conformation file not found: {path}")
        if name in methods:
            raise CommandError(f"duplicate method name {name!r}")
        found = read_conformations(path, ds)
        methods[name] = {i: found.get(i, []) for i in idx}
    if not methods:
        raise CommandError("no conformation files given")
    refs = {i: ds.entries[i] for i in idx}
    n_req = args.samples
    reports = ev.eval_methods(methods, refs, n_req)
    masks = {i: ds.entries[i][0].heavy_mask for i in idx}
    div = {m: ev.diversity(s, masks) for m, s in methods.items()}
    ev.write_reports(reports, args.out, div)
    _write_json(Path(args.out) / "manifest.json",
                _manifest("eval", methods=sorted(methods), split=args.split, dataset_fingerprint=ds.fingerprint()))
    for m, r in reports.items():
        print(f"{m}: median mean {r.median_of_mean:.4f} std {r.median_of_std:.4f} best {r.median_of_best:.4f} "
              f"success/test-set {r.success_per_test_set:.2%} success/molecule {r.success_per_molecule:.2%} "
              f"diversity {div[m][0]:.4f}±{div[m][1]:.4f}")
    return 0


def gradcheck_molecule(ds: mg.Dataset, index: int, config: MPNNConfig, seed: int = 0, h: float = 1e-4,
                       alpha: float = 1e-5, sign_flip: bool = False) -> float:
    """Maximum relative error of the full-objective gradient on one molecule.

    ``sign_flip`` negates the analytic gradient of one tensor, a fault the
    check must detect.
    """
    g, c = ds.entries[index]
    params = init_params(config, ds.vocab.node_dim, ds.vocab.edge_dim, seed)
    # perturb biases off zero so every parameter is exercised
    prng = np.random.default_rng(seed + 100)
    params = {k: v if v.ndim > 1 else prng.normal(0, 0.1, v.shape) for k, v in params.items()}
    batch = GraphBatch.from_graphs([g])
    noise = np.random.default_rng(seed + 200).standard_normal((g.n_atoms, config.d_z))

    def fn(p):
        return elbo_loss(batch, c.coords, p, config, alpha, noise=noise, training=False).objective

    if not sign_flip:
        return ad.grad_check(fn, params, h)

    flip = "likelihood.head.W_mu"

    def flipped(p):
        out = fn(p)
        b = p[flip]
        return out if b.tape is None else _sign_flip(out, b)

    return ad.grad_check(flipped, params, h)


def _sign_flip(out, b):
    (gb,) = b.tape.backward(out, [b])
    # out + (-2 gb) . (b - b): same value, but the analytic gradient for b becomes -gb
    corr = ad.sum(ad.mul(ad.Tensor(-2.0 * gb), ad.sub(b, ad.Tensor(b.value))))
    return ad.add(out, corr)


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    ds = _load_dataset(args.dataset)
    if not 0 <= args.molecule < len(ds):
        raise CommandError(f"molecule index {args.molecule} out of range")
    seed = cfg.seed if args.seed is None else args.seed
    err = gradcheck_molecule(ds, args.molecule, cfg.model, seed, args.h, cfg.train.alpha, args.inject_sign_flip)
    ok = err < args.tol
    print(f"max relative error {err:.3e} (tolerance {args.tol:.0e}): {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


# -- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cvgae", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse SDF files into a dataset bundle")
    p.add_argument("paths", nargs="*")
    p.add_argument("--config")
    p.add_argument("--profile", choices=sorted(mg.PROFILES))
    p.add_argument("--n-valid", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stats", help="dataset statistics as CSV")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="override train.max_steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample conformations")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=["cvgae", "random"], default="cvgae")
    p.add_argument("--scale", type=float, default=1.0, help="random baseline spread factor")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="RMSD and diversity statistics")
    p.add_argument("files", nargs="+", help="conformation files, optionally as name=path")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--samples", type=int, default=None, help="requested samples per molecule")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training objective")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--molecule", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--inject-sign-flip", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CommandError, StoreError, mg.MolParseError, mg.FeaturizationError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
