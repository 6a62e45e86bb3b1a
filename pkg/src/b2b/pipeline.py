"""End-to-end batch runs with content-hash stage caching.

A run reads one TOML config, executes ingest -> train (purchase, search) ->
bundle -> fit -> predict -> report, and writes ``manifest.json`` into the
output directory.  A stage is skipped when its recorded input key matches
and its outputs still hash to the recorded values.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import timedelta
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import numpy as np

from . import __version__
from .bundles import STRATEGIES, BundleGenerator, Standardizer, candidate_from_row, featurize, margin_predicate
from .bundles import apply_filters, read_candidate_rows, top_focal_by_views, write_candidates
from .catalog import load_catalog
from .embedding import TrainConfig, load_text, save_text, train
from .glmm import SPECS, HierarchicalFit, fit as fit_model
from .glmm import aggregate_by_aisle_pair, simulate_outcomes, write_heatmap, write_observations, write_zero_copurchase
from .glmm import zero_copurchase_report
from .glmm.model import BundleObservation
from .ingestion import PURCHASE, SEARCH, build_pair_stats, filter_vocabulary, ingest_sessions, read_baskets
from .ingestion import read_events, read_stats, write_baskets, write_stats
from .scoring import Scorer

logger = logging.getLogger(__name__)

ENV_PREFIX = "B2B_"
ARTIFACTS = ("baskets", "stats", "purchase_space", "search_space", "bundles", "model", "predictions")


class ConfigError(ValueError):
    """The configuration does not validate (CLI exit code 2)."""


class StageError(RuntimeError):
    """A stage failed (CLI exit code 3)."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


DEFAULTS: Dict[str, Any] = {
    "paths": {"events": "", "catalog": "", "out_dir": "", "outcomes": ""},
    "run": {"deterministic": True},
    "ingest": {"top_n": 35000, "session_gap_min": 30.0},
    "train": {"purchase": {}, "search": {}},
    "bundle": {"strategies": list(STRATEGIES), "n_focal": 100, "margin_filter": False, "discount_pct": 10.0},
    "model": {"spec": "varying_slopes", "diagonal": False, "include_scores": True, "outcome_seed": 11,
              "mean_views": 40.0, "max_iter": 200},
    "report": {"top_per_aisle": 3},
}


@dataclass
class PipelineConfig:
    events: Path
    catalog: Path
    out_dir: Path
    outcomes: Optional[Path] = None
    deterministic: bool = True
    top_n: int = 35000
    session_gap_min: float = 30.0
    train_purchase: TrainConfig = field(default_factory=TrainConfig)
    train_search: TrainConfig = field(default_factory=TrainConfig)
    strategies: List[str] = field(default_factory=lambda: list(STRATEGIES))
    n_focal: int = 100
    margin_filter: bool = False
    discount_pct: float = 10.0
    spec: str = "varying_slopes"
    diagonal: bool = False
    include_scores: bool = True
    outcome_seed: int = 11
    mean_views: float = 40.0
    max_iter: int = 200
    top_per_aisle: int = 3

    def seeds(self) -> Dict[str, int]:
        return {"train.purchase": self.train_purchase.seed, "train.search": self.train_search.seed,
                "model.outcome_seed": self.outcome_seed}

    def seed_header(self) -> str:
        return "seeds: " + " ".join(f"{k}={v}" for k, v in self.seeds().items())


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_env_value(raw: str) -> Any:
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def env_overrides(environ: Mapping[str, str]) -> dict:
    """``B2B_SECTION__KEY=value`` (``__`` separates nesting levels)."""
    out: dict = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in name[len(ENV_PREFIX):].split("__") if p]
        if len(parts) < 2:
            continue
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_env_value(raw)
    return out


def _train_config(d: Mapping, where: str) -> TrainConfig:
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {', '.join(sorted(unknown))}")
    try:
        return TrainConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def config_from_dict(raw: Mapping, base_dir: Optional[Path] = None) -> PipelineConfig:
    d = _merge(DEFAULTS, raw)
    for section in d:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
    base_dir = base_dir or Path.cwd()

    def path(key: str, required: bool = True) -> Optional[Path]:
        v = d["paths"].get(key, "")
        if not v:
            if required:
                raise ConfigError(f"missing paths.{key}")
            return None
        p = Path(v)
        return p if p.is_absolute() else (base_dir / p)

    cfg = PipelineConfig(
        events=path("events"), catalog=path("catalog"), out_dir=path("out_dir"), outcomes=path("outcomes", False),
        deterministic=bool(d["run"]["deterministic"]),
        top_n=int(d["ingest"]["top_n"]), session_gap_min=float(d["ingest"]["session_gap_min"]),
        train_purchase=_train_config(d["train"]["purchase"], "train.purchase"),
        train_search=_train_config(d["train"]["search"], "train.search"),
        strategies=list(d["bundle"]["strategies"]), n_focal=int(d["bundle"]["n_focal"]),
        margin_filter=bool(d["bundle"]["margin_filter"]), discount_pct=float(d["bundle"]["discount_pct"]),
        spec=str(d["model"]["spec"]), diagonal=bool(d["model"]["diagonal"]),
        include_scores=bool(d["model"]["include_scores"]), outcome_seed=int(d["model"]["outcome_seed"]),
        mean_views=float(d["model"]["mean_views"]), max_iter=int(d["model"]["max_iter"]),
        top_per_aisle=int(d["report"]["top_per_aisle"]),
    )
    validate(cfg)
    return cfg


def load_config(path: os.PathLike, environ: Optional[Mapping[str, str]] = None) -> PipelineConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    raw = _merge(raw, env_overrides(os.environ if environ is None else environ))
    return config_from_dict(raw, base_dir=path.parent)


def validate(cfg: PipelineConfig) -> None:
    if not cfg.events.is_file():
        raise ConfigError(f"events file not found: {cfg.events}")
    if not cfg.catalog.is_file():
        raise ConfigError(f"catalog file not found: {cfg.catalog}")
    if cfg.outcomes is not None and not cfg.outcomes.is_file():
        raise ConfigError(f"outcomes file not found: {cfg.outcomes}")
    paths = [p.resolve() for p in (cfg.events, cfg.catalog, cfg.out_dir, cfg.outcomes) if p is not None]
    if len(set(paths)) != len(paths):
        raise ConfigError("configured paths must be distinct")
    if cfg.top_n < 2:
        raise ConfigError("ingest.top_n must be >= 2")
    if cfg.session_gap_min <= 0:
        raise ConfigError("ingest.session_gap_min must be positive")
    bad = [s for s in cfg.strategies if s not in STRATEGIES]
    if bad or not cfg.strategies:
        raise ConfigError(f"bundle.strategies must be a non-empty subset of {STRATEGIES}")
    if cfg.n_focal < 1:
        raise ConfigError("bundle.n_focal must be >= 1")
    if cfg.spec not in SPECS:
        raise ConfigError(f"model.spec must be one of {SPECS}")
    if cfg.mean_views < 1:
        raise ConfigError("model.mean_views must be >= 1")


# ---------------------------------------------------------------- hashing


def file_hash(path: os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def artifact_hash(paths: Sequence[Path]) -> str:
    """Hash of one artifact that may span several files (e.g. a space and its ``.out``)."""
    if len(paths) == 1:
        return file_hash(paths[0])
    h = hashlib.sha256()
    for p in paths:
        h.update(p.name.encode())
        h.update(file_hash(p).encode())
    return h.hexdigest()


def _key(inputs: Sequence[Path], params: Any) -> str:
    payload = {"version": __version__, "inputs": [[p.name, file_hash(p)] for p in inputs], "params": params}
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


# ---------------------------------------------------------------- stages


@dataclass
class Stage:
    name: str
    inputs: Callable[[], List[Path]]
    outputs: Dict[str, List[Path]]
    params: Any
    run: Callable[[], None]


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        out = cfg.out_dir
        self.paths = {
            "baskets": [out / "baskets.tsv"],
            "stats": [out / "stats.csv"],
            "purchase_space": [out / "purchase_space.txt", out / "purchase_space.txt.out"],
            "search_space": [out / "search_space.txt", out / "search_space.txt.out"],
            "bundles": [out / "bundles.csv", out / "bundles.csv.scaling.json"],
            "model_data": [out / "model_data.csv"],
            "model": [out / "model.json"],
            "predictions": [out / "predictions.csv"],
            "heatmap": [out / "heatmap.csv"],
            "zero_copurchase": [out / "zero_copurchase.csv"],
        }
        self.state_path = out / ".stage_state.json"

    # -- stage bodies

    def _train_cfg(self, tc: TrainConfig) -> TrainConfig:
        if self.cfg.deterministic and tc.parallel_workers != 1:
            tc = TrainConfig(**{**asdict(tc), "parallel_workers": 1})
        return tc

    def do_ingest(self) -> None:
        cfg = self.cfg
        res = ingest_sessions(read_events(cfg.events), timedelta(minutes=cfg.session_gap_min))
        if res.rejected:
            logger.warning("rejected %d malformed events", res.rejected)
        if not res.sessions:
            raise ValueError("no valid sessions in the event log")
        stats = build_pair_stats(res.sessions)
        _, baskets = filter_vocabulary(res.all_baskets(), stats, min(cfg.top_n, max(2, len(stats.views))))
        with open(self.paths["baskets"][0], "w", encoding="utf-8") as fh:
            fh.write(f"# {cfg.seed_header()}\n")
        tmp = self.paths["baskets"][0].with_suffix(".tmp")
        write_baskets(baskets, tmp)
        with open(self.paths["baskets"][0], "a", encoding="utf-8") as fh:
            fh.write(tmp.read_text(encoding="utf-8"))
        tmp.unlink()
        write_stats(stats, self.paths["stats"][0], header=cfg.seed_header())

    def _do_train(self, kind: str, tc: TrainConfig, key: str) -> None:
        baskets = read_baskets(self.paths["baskets"][0], kind)
        space = train(baskets, self._train_cfg(tc), space_kind=kind)
        save_text(space, self.paths[key][0])

    def do_bundle(self) -> None:
        cfg = self.cfg
        catalog = load_catalog(cfg.catalog)
        stats = read_stats(self.paths["stats"][0])
        ps = load_text(self.paths["purchase_space"][0], PURCHASE)
        ss = load_text(self.paths["search_space"][0], SEARCH)
        gen = BundleGenerator(Scorer(ps, catalog), Scorer(ss, catalog), catalog, stats, cfg.discount_pct)
        focals = top_focal_by_views(stats, cfg.n_focal, catalog)
        cands = gen.generate(focals, cfg.strategies)
        if cfg.margin_filter:
            cands = apply_filters(cands, [margin_predicate(catalog)])
        if not cands:
            raise ValueError("no bundle candidates generated")
        std = featurize(cands, stats, catalog)
        write_candidates(cands, catalog, self.paths["bundles"][0], std, header=cfg.seed_header())

    def _candidates(self):
        return [candidate_from_row(r) for r in read_candidate_rows(self.paths["bundles"][0])]

    def do_fit(self) -> None:
        cfg = self.cfg
        catalog = load_catalog(cfg.catalog)
        cands = [c for c in self._candidates() if c.standardized is not None
                 and np.isfinite([c.comp_score, c.sub_score]).all()]
        if cfg.outcomes is not None:
            obs = _join_outcomes(cands, read_candidate_rows(cfg.outcomes), lambda p: catalog[p].aisle)
        else:
            obs = simulate_outcomes(cands, lambda p: catalog[p].aisle, cfg.outcome_seed, mean_views=cfg.mean_views)
        write_observations(obs, self.paths["model_data"][0], header=cfg.seed_header())
        std = Standardizer.from_dict(json.loads(self.paths["bundles"][1].read_text())).to_dict()
        model = fit_model(obs, cfg.spec, include_scores=cfg.include_scores, diagonal=cfg.diagonal,
                          max_iter=cfg.max_iter, standardizer=std)
        d = model.to_dict()
        d["seeds"] = cfg.seeds()
        self.paths["model"][0].write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def do_predict(self) -> None:
        catalog = load_catalog(self.cfg.catalog)
        model = HierarchicalFit.load(self.paths["model"][0])
        with open(self.paths["predictions"][0], "w", encoding="utf-8") as fh:
            fh.write(f"# {self.cfg.seed_header()}\n")
            fh.write("focal_id,addon_id,strategy,focal_aisle,pred_prob\n")
            for c in self._candidates():
                aisle = catalog[c.focal_id].aisle
                ok = c.standardized is not None and np.isfinite([c.comp_score, c.sub_score]).all()
                p = repr(model.predict(c, aisle)) if ok else ""
                fh.write(f"{c.focal_id},{c.addon_id},{c.strategy},{aisle},{p}\n")

    def do_report(self) -> None:
        catalog = load_catalog(self.cfg.catalog)
        model = HierarchicalFit.load(self.paths["model"][0])
        cands = [c for c in self._candidates() if c.standardized is not None
                 and np.isfinite([c.comp_score, c.sub_score]).all()]
        aisles, mat = aggregate_by_aisle_pair(model, cands, catalog)
        write_heatmap(aisles, mat, self.paths["heatmap"][0], header=self.cfg.seed_header())
        rows = zero_copurchase_report(model, cands, catalog, self.cfg.top_per_aisle)
        write_zero_copurchase(rows, self.paths["zero_copurchase"][0], header=self.cfg.seed_header())

    # -- orchestration

    def stages(self) -> List[Stage]:
        cfg, P = self.cfg, self.paths
        return [
            Stage("ingest", lambda: [cfg.events],
                  {"baskets": P["baskets"], "stats": P["stats"]},
                  {"top_n": cfg.top_n, "gap": cfg.session_gap_min, "seeds": cfg.seeds()}, self.do_ingest),
            Stage("train_purchase", lambda: P["baskets"], {"purchase_space": P["purchase_space"]},
                  asdict(self._train_cfg(cfg.train_purchase)),
                  lambda: self._do_train(PURCHASE, cfg.train_purchase, "purchase_space")),
            Stage("train_search", lambda: P["baskets"], {"search_space": P["search_space"]},
                  asdict(self._train_cfg(cfg.train_search)),
                  lambda: self._do_train(SEARCH, cfg.train_search, "search_space")),
            Stage("bundle", lambda: [cfg.catalog, *P["stats"], *P["purchase_space"], *P["search_space"]],
                  {"bundles": P["bundles"]},
                  {"strategies": cfg.strategies, "n_focal": cfg.n_focal, "margin": cfg.margin_filter,
                   "discount": cfg.discount_pct, "seeds": cfg.seeds()}, self.do_bundle),
            Stage("fit", lambda: [cfg.catalog, *P["bundles"]] + ([cfg.outcomes] if cfg.outcomes else []),
                  {"model_data": P["model_data"], "model": P["model"]},
                  {"spec": cfg.spec, "diagonal": cfg.diagonal, "scores": cfg.include_scores,
                   "mean_views": cfg.mean_views, "max_iter": cfg.max_iter, "seeds": cfg.seeds()}, self.do_fit),
            Stage("predict", lambda: [cfg.catalog, *P["bundles"], *P["model"]], {"predictions": P["predictions"]},
                  {"seeds": cfg.seeds()}, self.do_predict),
            Stage("report", lambda: [cfg.catalog, *P["bundles"], *P["model"]],
                  {"heatmap": P["heatmap"], "zero_copurchase": P["zero_copurchase"]},
                  {"top": cfg.top_per_aisle, "seeds": cfg.seeds()}, self.do_report),
        ]

    def _load_state(self) -> dict:
        try:
            return json.loads(self.state_path.read_text(encoding="utf-8"))
        except (OSError, ValueError):
            return {}

    def run(self, force: bool = False) -> dict:
        self.cfg.out_dir.mkdir(parents=True, exist_ok=True)
        state = self._load_state()
        executed, skipped = [], []
        for stage in self.stages():
            try:
                key = _key(stage.inputs(), stage.params)
            except OSError as exc:
                raise StageError(stage.name, exc) from exc
            rec = state.get(stage.name)
            files = [p for ps in stage.outputs.values() for p in ps]
            if not force and rec and rec.get("key") == key and all(
                p.is_file() and rec["outputs"].get(p.name) == file_hash(p) for p in files
            ):
                logger.info("stage %s: up to date", stage.name)
                skipped.append(stage.name)
                continue
            logger.info("stage %s: running", stage.name)
            try:
                stage.run()
            except Exception as exc:
                raise StageError(stage.name, exc) from exc
            state[stage.name] = {"key": key, "outputs": {p.name: file_hash(p) for p in files}}
            self.state_path.write_text(json.dumps(state, indent=2, sort_keys=True) + "\n", encoding="utf-8")
            executed.append(stage.name)

        def entry(name):
            files = self.paths[name]
            return {"path": files[0].name, "files": [p.name for p in files], "sha256": artifact_hash(files)}

        manifest = {
            "version": __version__,
            "seeds": self.cfg.seeds(),
            "artifacts": {n: entry(n) for n in ARTIFACTS},
            "auxiliary": {"model_data": entry("model_data")},
            "reports": {n: entry(n) for n in ("heatmap", "zero_copurchase")},
        }
        (self.cfg.out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        manifest["executed"], manifest["skipped"] = executed, skipped
        return manifest


def run_pipeline(config: PipelineConfig, force: bool = False) -> dict:
    """Run all stages; returns the manifest plus the executed/skipped stage lists."""
    return Pipeline(config).run(force=force)


def _join_outcomes(cands, rows, aisle_of) -> List[BundleObservation]:
    """Attach ``successes``/``failures`` rows keyed by (focal_id, addon_id, strategy)."""
    counts = {}
    for r in rows:
        counts[(r["focal_id"], r["addon_id"], r.get("strategy", ""))] = (int(r["successes"]), int(r["failures"]))
    out = []
    for c in cands:
        k = (c.focal_id, c.addon_id, c.strategy)
        if k not in counts:
            k = (c.focal_id, c.addon_id, "")
        if k in counts:
            s, f = counts[k]
            out.append(BundleObservation(c, aisle_of(c.focal_id), s, f))
    if not out:
        raise ValueError("no outcome rows matched the generated bundles")
    return out


def write_default_config(path: os.PathLike, events: str, catalog: str, out_dir: str, **train_overrides) -> None:
    """A small config suitable for the synthetic corpus."""
    train = {"dimension": 16, "negatives": 5, "epochs": 10, **train_overrides}
    lines = [
        "[paths]", f'events = "{events}"', f'catalog = "{catalog}"', f'out_dir = "{out_dir}"', "",
        "[run]", "deterministic = true", "",
        "[ingest]", "top_n = 35000", "session_gap_min = 30", "",
    ]
    for kind in ("purchase", "search"):
        lines.append(f"[train.{kind}]")
        lines += [f"{k} = {json.dumps(v)}" for k, v in train.items()]
        lines.append("")
    lines += ["[bundle]", "n_focal = 60", "", "[model]", 'spec = "varying_slopes"', "outcome_seed = 11", ""]
    Path(path).write_text("\n".join(lines), encoding="utf-8")
