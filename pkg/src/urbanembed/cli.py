"""Command-line pipeline: synthetic data -> graphs -> KG -> training -> evaluation.

Every subcommand reads one JSON config (``-c``); flags override it. Outputs
land under the output directory together with ``manifest.json``, which holds
the resolved config and SHA-256 hashes of every input and output file.

Exit codes: 0 success, 1 invalid input or config, 2 non-finite training.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import correlation as corr
from . import evaluation as ev
from . import ingest, kg, synth
from . import training as tr
from .errors import ContractError, NumericError, ShapeError, ValidationError

DATA_KEYS = ("regions", "trips", "adjacency", "polygons", "pois", "checkins", "labels")
EVAL_DEFAULTS = {"k": 12, "restarts": 10, "log1p": False, "folds": 5}

# output file names
EMBEDDINGS = "embeddings.csv"
MODEL = "model.npz"
REGION_VECTORS = "kg_region_vectors.csv"


# -- config --------------------------------------------------------------------
def default_config() -> dict:
    training = {f.name: getattr(tr.TrainingConfig(), f.name) for f in fields(tr.TrainingConfig) if f.name not in ("kg", "seed")}
    kgc = {f.name: getattr(kg.KgConfig(), f.name) for f in fields(kg.KgConfig) if f.name != "seed"}
    return {"data": {}, "out": "out", "seed": 0, "variant": "full",
            "training": training, "kg": kgc, "evaluation": dict(EVAL_DEFAULTS)}


def _merge(base: dict, update: dict, where: str) -> None:
    for key, value in update.items():
        if key not in base:
            raise ValidationError(f"{where}: unknown config field {key!r}")
        if isinstance(base[key], dict) and key != "data":
            if not isinstance(value, dict):
                raise ValidationError(f"{where}: field {key!r} must be an object")
            _merge(base[key], value, f"{where}.{key}")
        else:
            base[key] = value


def load_config(path: str | None, args: argparse.Namespace) -> dict:
    """Defaults, then the JSON file, then flags. Data paths become absolute."""
    cfg = default_config()
    root = Path.cwd()
    if path:
        p = Path(path)
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ValidationError(f"{p}: config file not found") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ValidationError(f"{p}: config must be a JSON object")
        _merge(cfg, raw, str(p))
        root = p.resolve().parent
        unknown = set(cfg["data"]) - set(DATA_KEYS)
        if unknown:
            raise ValidationError(f"{p}: unknown data file key(s) {sorted(unknown)}")
    cfg["out"] = str((root / cfg["out"]).resolve())
    cfg["data"] = {k: str((root / v).resolve()) for k, v in cfg["data"].items() if v}

    overrides = {"seed": ("seed",), "dim": ("training", "dim"), "k": ("training", "k"),
                 "alpha": ("training", "alpha"), "epochs": ("training", "epochs"),
                 "variant": ("variant",), "clusters": ("evaluation", "k")}
    for flag, dest in overrides.items():
        value = getattr(args, flag, None)
        if value is not None:
            target = cfg
            for key in dest[:-1]:
                target = target[key]
            target[dest[-1]] = value
    if getattr(args, "swap_od", False):
        cfg["training"]["swap_od"] = True
    if getattr(args, "log1p", False):
        cfg["evaluation"]["log1p"] = True
    if getattr(args, "out", None):
        cfg["out"] = str(Path(args.out).resolve())
    return cfg


def training_config(cfg: dict) -> tr.TrainingConfig:
    try:
        config = tr.TrainingConfig(kg=kg.KgConfig(**cfg["kg"]), **cfg["training"])
        config = config.with_seed(int(cfg["seed"]))
        config.validate()
    except (TypeError, ContractError) as exc:
        raise ValidationError(f"training config: {exc}") from None
    return config


def _need(cfg: dict, key: str) -> Path:
    path = cfg["data"].get(key)
    if not path:
        raise ValidationError(f"config: data.{key} is required for this step")
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"data.{key}: file not found: {p}")
    return p


# -- data loading --------------------------------------------------------------
class Data:
    """Lazily loaded pipeline inputs."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.registry = ingest.load_regions(_need(cfg, "regions"))
        self._cache: dict[str, object] = {}

    def _get(self, key, loader):
        if key not in self._cache:
            self._cache[key] = loader()
        return self._cache[key]

    @property
    def trips(self):
        return self._get("trips", lambda: ingest.load_trips(_need(self.cfg, "trips"), self.registry))

    @property
    def adjacency(self):
        def load():
            if self.cfg["data"].get("adjacency"):
                return ingest.load_adjacency(_need(self.cfg, "adjacency"), self.registry)
            return ingest.adjacency_from_polygons(_need(self.cfg, "polygons"), self.registry)
        return self._get("adjacency", load)

    @property
    def pois(self):
        return self._get("pois", lambda: ingest.load_pois(_need(self.cfg, "pois"), self.registry))

    @property
    def checkins(self):
        return self._get("checkins", lambda: ingest.load_checkins(_need(self.cfg, "checkins"), self.registry))

    @property
    def labels(self):
        return self._get("labels", lambda: ingest.load_labels(_need(self.cfg, "labels"), self.registry))

    def geometries(self):
        path = self.cfg["data"].get("polygons")
        return ingest.read_geometries(path, self.registry) if path and Path(path).is_file() else None


def _out(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _region_vectors(data: Data, config: tr.TrainingConfig, out: Path) -> np.ndarray:
    """KG region vectors from an earlier ``train-kg`` run, else train now."""
    path = out / REGION_VECTORS
    if path.is_file():
        return kg.read_region_vectors(path, data.registry)
    return _train_kg(data, config, out)


def _train_kg(data: Data, config: tr.TrainingConfig, out: Path) -> np.ndarray:
    vocab, triples = kg.build_kg(data.pois, data.registry)
    params = kg.train_kg(triples, vocab, config.kg)
    vectors, _ = kg.region_functionality_vectors(params, vocab, config.fc_readout)
    kg.write_triples(out / "kg_triples.csv", triples, vocab)
    kg.write_region_vectors(out / REGION_VECTORS, vectors, data.registry)
    ingest._write(out / "kg_loss.csv", ["epoch", "loss", "max_norm"],
                  ((i, repr(l), repr(m)) for i, (l, m) in enumerate(zip(params.loss_history, params.max_norm_history))))
    return vectors


def _inputs(data: Data, config: tr.TrainingConfig, variant: tr.Variant, out: Path) -> tr.TrainingInputs:
    streams = variant.streams
    return tr.prepare_inputs(
        data.registry, config,
        trips=data.trips if "AC" in streams else None,
        adjacency=data.adjacency if "VC" in streams else None,
        fc_vectors=_region_vectors(data, config, out) if "FC" in streams else None,
        streams=streams)


def _read_embeddings(path: Path, registry) -> np.ndarray:
    if not path.is_file():
        raise ValidationError(f"embeddings file not found: {path}")
    return kg.read_region_vectors(path, registry)


# -- steps -----------------------------------------------------------------------
def step_build_graphs(cfg: dict, data: Data) -> None:
    config = training_config(cfg)
    out = _out(cfg)
    counts = corr.cooccurrence_counts(data.trips, data.registry.n)
    od = corr.od_distributions(counts)
    matrices = {"AC": corr.accessibility_correlation(od.p_o, od.p_d, config.alpha),
                "VC": corr.vicinity_correlation(data.adjacency)}
    if (out / REGION_VECTORS).is_file():
        matrices["FC"] = corr.functionality_correlation(kg.read_region_vectors(out / REGION_VECTORS, data.registry))
    for name, m in matrices.items():
        _write_graph_files(out, name, m, config.k, data.registry)


def _write_graph_files(out: Path, name: str, matrix: corr.CorrelationMatrix, k: int, registry) -> None:
    corr.write_correlation(out / f"correlation_{name}.csv", matrix, registry)
    corr.write_graph(out / f"graph_{name}.csv", corr.knn_graph(matrix, k), registry)


def step_train_kg(cfg: dict, data: Data) -> None:
    config = training_config(cfg)
    out = _out(cfg)
    vectors = _train_kg(data, config, out)
    _write_graph_files(out, "FC", corr.functionality_correlation(vectors), config.k, data.registry)


def _fit(cfg: dict, data: Data, variant_name: str, out: Path, prefix: str = "") -> np.ndarray:
    config = training_config(cfg)
    variant = tr.make_variant(variant_name)
    inputs = _inputs(data, config, variant, out)
    model = tr.build_model(inputs, config, variant)
    emb, log = tr.fit(inputs, config, variant, model=model,
                      checkpoint_dir=out / f"{prefix}checkpoints" if config.checkpoint_every else None)
    tr.write_training_log(out / f"{prefix}training_log.csv", log)
    tr.save_checkpoint(model, out / f"{prefix}{MODEL}")
    tr.write_embeddings(out / f"{prefix}{EMBEDDINGS}", emb, data.registry)
    return emb


def step_train(cfg: dict, data: Data) -> None:
    _fit(cfg, data, cfg["variant"], _out(cfg))


def step_embed(cfg: dict, data: Data) -> None:
    """Recompute embeddings from the saved model parameters."""
    out = _out(cfg)
    config = training_config(cfg)
    variant = tr.make_variant(cfg["variant"])
    if not (out / MODEL).is_file():
        raise ValidationError(f"no trained model at {out / MODEL}; run 'train' first")
    inputs = _inputs(data, config, variant, out)
    model = tr.build_model(inputs, config, variant)
    tr.load_checkpoint(model, out / MODEL)
    emb, _ = tr.fit(inputs, replace(config, epochs=0), variant, model=model)
    tr.write_embeddings(out / EMBEDDINGS, emb, data.registry)


def _cluster(cfg: dict, data: Data, emb: np.ndarray) -> ev.ClusteringResult:
    e = cfg["evaluation"]
    return ev.evaluate_clustering(emb, data.labels, k=int(e["k"]), seed=int(cfg["seed"]), restarts=int(e["restarts"]))


def _popularity(cfg: dict, data: Data, emb: np.ndarray) -> ev.RegressionResult:
    e = cfg["evaluation"]
    return ev.evaluate_popularity(emb, data.checkins, seed=int(cfg["seed"]), folds=int(e["folds"]), log1p=bool(e["log1p"]))


def step_eval_cluster(cfg: dict, data: Data, embeddings: Path | None = None) -> ev.ClusteringResult:
    out = _out(cfg)
    emb = _read_embeddings(embeddings or out / EMBEDDINGS, data.registry)
    res = _cluster(cfg, data, emb)
    ev.write_clusters_csv(out / "clusters.csv", res.assignment, data.registry)
    geoms = data.geometries()
    if geoms is not None:
        ev.write_cluster_geojson(out / "clusters.geojson", res.assignment, data.registry, geoms)
    ev.write_metrics_json(out / "metrics_cluster.json", ev.metrics_report("cluster", cfg["variant"], cfg["seed"], clustering=res))
    return res


def step_eval_popularity(cfg: dict, data: Data, embeddings: Path | None = None) -> ev.RegressionResult:
    out = _out(cfg)
    emb = _read_embeddings(embeddings or out / EMBEDDINGS, data.registry)
    res = _popularity(cfg, data, emb)
    ev.write_metrics_json(out / "metrics_popularity.json",
                          ev.metrics_report("popularity", cfg["variant"], cfg["seed"], regression=res))
    return res


def step_ablate(cfg: dict, data: Data) -> list[dict]:
    out = _out(cfg)
    rows = []
    for name in tr.VARIANTS:
        sub = out / "ablation" / name
        sub.mkdir(parents=True, exist_ok=True)
        emb = _fit(cfg, data, name, sub)
        c, r = _cluster(cfg, data, emb), _popularity(cfg, data, emb)
        report = ev.metrics_report("ablation", name, cfg["seed"], clustering=c, regression=r)
        ev.write_metrics_json(sub / "metrics.json", report)
        rows.append(report)
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "nmi", "ari", "mae", "rmse", "r2", "lambda"])
        for r in rows:
            w.writerow([r["variant"]] + [repr(r[k]) for k in ("nmi", "ari", "mae", "rmse", "r2", "lambda")])
    return rows


def step_all(cfg: dict, data: Data) -> dict:
    out = _out(cfg)
    for stale in (REGION_VECTORS,):
        (out / stale).unlink(missing_ok=True)
    step_train_kg(cfg, data)
    step_build_graphs(cfg, data)
    step_train(cfg, data)
    c = step_eval_cluster(cfg, data)
    r = step_eval_popularity(cfg, data)
    report = ev.metrics_report("all", cfg["variant"], cfg["seed"], clustering=c, regression=r)
    ev.write_metrics_json(out / "metrics.json", report)
    return report


def step_synth(args: argparse.Namespace) -> Path:
    seed = 0 if args.seed is None else args.seed
    try:
        width, height = synth.parse_grid(args.grid)
        config = synth.SynthConfig(width=width, height=height, communities=args.communities, seed=seed)
        config.validate()
    except ContractError as exc:
        raise ValidationError(f"synth: {exc}") from None
    out = Path(args.out or "data")
    city = synth.generate_city(config)
    paths = synth.write_city(city, out)
    run_config = {"data": {k: paths[k].name for k in DATA_KEYS}, "out": "run", "seed": seed,
                  "evaluation": {"k": args.communities}}
    (out / "config.json").write_text(json.dumps(run_config, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


# -- manifest -------------------------------------------------------------------
def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: dict) -> Path:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    stored = copy.deepcopy(cfg)
    stored.pop("out", None)
    stored["data"] = {k: Path(v).name for k, v in cfg["data"].items()}
    manifest = {
        "command": command,
        "seed": cfg.get("seed"),
        "config": stored,
        "config_sha256": hashlib.sha256(json.dumps(stored, sort_keys=True).encode()).hexdigest(),
        "inputs": {k: sha256(Path(v)) for k, v in sorted(cfg["data"].items()) if Path(v).is_file()},
        "outputs": {p.relative_to(out).as_posix(): sha256(p) for p in files},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# -- argument parsing ---------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="urbanembed", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="JSON pipeline config")
    common.add_argument("--seed", type=int, help="root seed (all randomness derives from it)")
    common.add_argument("--dim", type=int, help="embedding size (default 96)")
    common.add_argument("--k", type=int, help="neighbours per node in the kNN graphs (default 10)")
    common.add_argument("--alpha", type=float, help="origin/destination mix for AC (default 0.5)")
    common.add_argument("--epochs", type=int, help="training epochs")
    common.add_argument("--variant", choices=list(tr.VARIANTS), help="model variant (default full)")
    common.add_argument("--swap-od", action="store_true", help="alternative reading of the O/D likelihood")
    common.add_argument("--log1p", action="store_true", help="regress log1p(check-ins)")
    common.add_argument("--clusters", type=int, help="k-means cluster count (default 12)")
    common.add_argument("-o", "--out", help="output directory")

    sub = parser.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="write a synthetic city")
    s.add_argument("--grid", default="6x6", help="grid size WxH (default 6x6)")
    s.add_argument("--communities", type=int, default=4)
    for name, text in (("build-graphs", "correlation matrices and kNN graphs"),
                       ("train-kg", "KG construction and TransD training"),
                       ("train", "train the embedding model"),
                       ("embed", "recompute embeddings from the saved model"),
                       ("ablate", "train and evaluate every variant"),
                       ("all", "the full pipeline")):
        sub.add_parser(name, parents=[common], help=text)
    for name in ("eval-cluster", "eval-popularity"):
        p = sub.add_parser(name, parents=[common], help=f"{name.split('-')[1]} evaluation")
        p.add_argument("--embeddings", help="embeddings CSV (default: <out>/embeddings.csv)")
    return parser


STEPS = {
    "build-graphs": step_build_graphs,
    "train-kg": step_train_kg,
    "train": step_train,
    "embed": step_embed,
    "ablate": step_ablate,
    "all": step_all,
}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            out = step_synth(args)
            print(f"wrote synthetic city to {out}")
            return 0
        cfg = load_config(args.config, args)
        data = Data(cfg)
        if args.command in STEPS:
            result = STEPS[args.command](cfg, data)
        else:
            emb = Path(args.embeddings).resolve() if args.embeddings else None
            fn = step_eval_cluster if args.command == "eval-cluster" else step_eval_popularity
            result = fn(cfg, data, emb)
        write_manifest(Path(cfg["out"]), args.command, cfg)
        if isinstance(result, dict):
            print(json.dumps(result, sort_keys=True))
        return 0
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, ContractError, ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
