"""Pipeline stages wired to files: monitor, profile, embed, train-cdr,
reduce, detect, aggregate, plus relationship perturbation."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import aggregator, as_profile, cdr, detector, embedder, route_monitor
from .as_profile import AsGraph, AsMetadata

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


_INPUTS = ("rib", "updates", "relationships", "metadata", "roa")
_OUTPUTS = {
    "changes": "changes.jsonl",
    "segments": "segments.jsonl",
    "store": "embeddings.jsonl",
    "model": "cdr_model.json",
    "reduced_store": "reduced.jsonl",
    "scored": "scored.jsonl",
    "report": "report.json",
    "report_text": "report.txt",
}


@dataclass
class RunConfig:
    rib: Optional[str] = None
    updates: Optional[str] = None
    relationships: Optional[str] = None
    metadata: Optional[str] = None
    roa: Optional[str] = None
    reserved: Optional[str] = None
    workdir: str = "out"
    changes: Optional[str] = None
    segments: Optional[str] = None
    store: Optional[str] = None
    model: Optional[str] = None
    reduced_store: Optional[str] = None
    scored: Optional[str] = None
    report: Optional[str] = None
    report_text: Optional[str] = None

    window_secs: int = detector.DEFAULT_WINDOW
    reduced_dim: int = 16
    neighbor_batch_size: int = as_profile.DEFAULT_BATCH_SIZE
    max_chars: int = as_profile.DEFAULT_MAX_CHARS
    order_slack: int = 0

    provider: str = "mock"
    mock_dim: int = 64
    endpoint: Optional[str] = None
    endpoint_model: Optional[str] = None
    embed_batch: int = 16
    embed_timeout: float = 30.0
    embed_retries: int = 3

    seed: int = 0
    jobs: int = 4
    train_cdr: bool = False
    cdr_hidden: int = 256
    cdr_lr: float = 1e-3
    cdr_iterations: int = 1000
    cdr_batch: int = 64
    cdr_resample_every: int = 25
    fallback: bool = True
    candidate_mode: str = "union"

    base_dir: str = field(default=".", repr=False)

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data, base_dir=str(path.parent), **overrides)

    @classmethod
    def from_dict(cls, data: dict, base_dir: str = ".", **overrides) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged = {**data, **{k: v for k, v in overrides.items() if v is not None}}
        cfg = cls(**merged)
        cfg.base_dir = base_dir
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.window_secs <= 0:
            raise ConfigError("window_secs must be positive")
        if self.reduced_dim < 2:
            raise ConfigError("reduced_dim must be at least 2")
        if self.neighbor_batch_size <= 0:
            raise ConfigError("neighbor_batch_size must be positive")
        if self.provider not in ("mock", "http"):
            raise ConfigError(f"unknown provider {self.provider!r}")
        if self.candidate_mode not in ("union", "intersection"):
            raise ConfigError("candidate_mode must be 'union' or 'intersection'")

    def path(self, name: str) -> Optional[Path]:
        value = getattr(self, name)
        if value is None and name in _OUTPUTS:
            value = os.path.join(self.workdir, _OUTPUTS[name])
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def require(self, *names: str) -> list[Path]:
        out = []
        for n in names:
            p = self.path(n)
            if p is None:
                raise ConfigError(f"no path configured for {n!r}")
            if not p.exists():
                raise ConfigError(f"{n} file not found: {p}")
            out.append(p)
        return out

    def output(self, name: str) -> Path:
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def public(self) -> dict:
        """Settings that shape results, for the report header."""
        skip = set(_INPUTS) | set(_OUTPUTS) | {"base_dir", "workdir", "reserved", "jobs", "endpoint"}
        return {k: v for k, v in dataclasses.asdict(self).items() if k not in skip}


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


# ---------------------------------------------------------------- monitor

def run_monitor(cfg: RunConfig) -> dict:
    rib_path, upd_path = cfg.require("rib", "updates")
    rib_stats, upd_stats = route_monitor.ParseStats(), route_monitor.ParseStats()
    with open(rib_path, encoding="utf-8") as fh:
        trees = route_monitor.build_prefix_trees(route_monitor.read_rib(fh, rib_stats))
    out = cfg.output("changes")
    tmp = out.with_suffix(".tmp")
    with open(upd_path, encoding="utf-8") as fh, open(tmp, "w", encoding="utf-8") as dst:
        n = route_monitor.write_changes(
            route_monitor.extract_route_changes(
                trees, route_monitor.read_updates(fh, upd_stats), cfg.order_slack),
            dst)
    os.replace(tmp, out)
    return {
        "vantages": len(trees),
        "rib_entries": rib_stats.lines - rib_stats.errors,
        "rib_errors": rib_stats.errors,
        "rib_vantage_mismatch": rib_stats.vantage_mismatch,
        "updates": upd_stats.lines - upd_stats.errors,
        "update_errors": upd_stats.errors,
        "changes": n,
    }


# ---------------------------------------------------------------- profile

def load_graph(cfg: RunConfig, relationships: Optional[Path] = None) -> AsGraph:
    path = relationships or cfg.require("relationships")[0]
    with open(path, encoding="utf-8") as fh:
        return as_profile.build_graph(as_profile.read_relationships(fh))


def load_metadata(cfg: RunConfig) -> dict[int, AsMetadata]:
    p = cfg.path("metadata")
    if p is None:
        return {}
    cfg.require("metadata")
    with open(p, encoding="utf-8") as fh:
        return as_profile.read_metadata(fh)


def render_all(graph: AsGraph, meta: dict, batch: int, max_chars: int) -> dict[int, list]:
    asns = sorted(set(graph.nodes()) | set(meta))
    return {a: as_profile.render_auto(a, graph, meta.get(a), batch, max_chars) for a in asns}


def run_profile(cfg: RunConfig) -> dict:
    graph = load_graph(cfg)
    meta = load_metadata(cfg)
    segs = render_all(graph, meta, cfg.neighbor_batch_size, cfg.max_chars)
    lines = []
    for a in sorted(segs):
        for s in segs[a]:
            rec = s.to_dict()
            rec["template_version"] = s.template_version
            lines.append(json.dumps(rec, sort_keys=True))
    _write_atomic(cfg.output("segments"), "\n".join(lines) + ("\n" if lines else ""))
    return {"ases": len(segs), "segments": len(lines), "edges": len(graph.edges)}


# ---------------------------------------------------------------- embed

def make_provider(cfg: RunConfig, dim: Optional[int] = None):
    if cfg.provider == "mock":
        return embedder.MockProvider(cfg.mock_dim, cfg.seed)
    ecfg = embedder.EndpointConfig.from_env(
        base_url=cfg.endpoint, model=cfg.endpoint_model,
        timeout=cfg.embed_timeout, retries=cfg.embed_retries,
        max_batch=cfg.embed_batch, dim=dim)
    return embedder.HttpProvider(ecfg)


def run_embed(cfg: RunConfig) -> dict:
    (seg_path,) = cfg.require("segments")
    with open(seg_path, encoding="utf-8") as fh:
        segs = embedder.segments_from_dump(fh)
    provider = make_provider(cfg)
    version = next((s[0].template_version for s in segs.values() if s), "")
    if provider.dim is None:
        probe = next(iter(segs.values()))
        provider.cfg.dim = int(provider.embed([probe[0].text])[0].shape[0])
    store = embedder.EmbeddingStore(provider.dim, provider.provider_id, version)
    errors = embedder.embed_all(segs, provider, store, cfg.jobs)
    if errors and not len(store):
        first = next(iter(errors.values()))
        raise embedder.FatalEmbeddingError(f"no AS could be embedded: {first}")
    out = cfg.output("store")
    tmp = out.with_suffix(".tmp")
    store.save(tmp)
    os.replace(tmp, out)
    return {"embedded": len(store), "failed": len(errors), "dim": store.dim}


# ---------------------------------------------------------------- cdr

def hyperparams(cfg: RunConfig) -> cdr.Hyperparams:
    return cdr.Hyperparams(
        hidden=cfg.cdr_hidden, out_dim=cfg.reduced_dim, lr=cfg.cdr_lr,
        batch_pos=cfg.cdr_batch, batch_neg=cfg.cdr_batch,
        resample_every=cfg.cdr_resample_every, iterations=cfg.cdr_iterations)


def run_train_cdr(cfg: RunConfig) -> dict:
    (store_path,) = cfg.require("store")
    store = embedder.EmbeddingStore.load(store_path)
    orgs = as_profile.OrgIndex.from_metadata(load_metadata(cfg)).org
    res = cdr.train(store, orgs, hyperparams(cfg), cfg.seed)
    out = cfg.output("model")
    tmp = out.with_suffix(".tmp")
    res.model.save(tmp)
    os.replace(tmp, out)
    return {"iterations": len(res.loss_trace), "loss_first": res.loss_trace[0],
            "loss_last": res.loss_trace[-1], "positives": len(res.pairs.positives),
            "negatives": len(res.pairs.negatives)}


def load_or_init_model(cfg: RunConfig, in_dim: int) -> cdr.ReductionModel:
    p = cfg.path("model")
    if p.exists():
        model = cdr.ReductionModel.load(p)
        if model.in_dim == in_dim and model.out_dim == cfg.reduced_dim:
            return model
        log.warning("model %s has shape %dx%d, expected %dx%d; reinitializing",
                    p, model.in_dim, model.out_dim, in_dim, cfg.reduced_dim)
    log.warning("no trained reduction model; using the seeded untrained projection")
    model = cdr.ReductionModel.init(in_dim, hyperparams(cfg), cfg.seed)
    model.save(cfg.output("model"))
    return model


def run_reduce(cfg: RunConfig) -> dict:
    (store_path,) = cfg.require("store")
    store = embedder.EmbeddingStore.load(store_path)
    model = load_or_init_model(cfg, store.dim)
    reduced = cdr.reduce(model, store)
    out = cfg.output("reduced_store")
    tmp = out.with_suffix(".tmp")
    reduced.save(tmp)
    os.replace(tmp, out)
    return {"reduced": len(reduced), "dim": reduced.dim, "model_checksum": model.checksum()}


# ---------------------------------------------------------------- new ASes

class NewAsEncoder:
    """Describe, embed and reduce an AS missing from the stores, on demand."""

    def __init__(self, provider, model: cdr.ReductionModel, graph: Optional[AsGraph] = None,
                 meta: Optional[dict] = None, batch: int = as_profile.DEFAULT_BATCH_SIZE,
                 max_chars: int = as_profile.DEFAULT_MAX_CHARS):
        self.provider = provider
        self.model = model
        self.graph = graph or AsGraph()
        self.meta = meta or {}
        self.batch = batch
        self.max_chars = max_chars
        self.encoded: dict[int, np.ndarray] = {}

    def embed(self, asn: int) -> embedder.Embedding:
        segs = as_profile.render_auto(asn, self.graph, self.meta.get(asn), self.batch, self.max_chars)
        return embedder.embed_as(segs, self.provider)

    def __call__(self, asn: int) -> np.ndarray:
        if asn not in self.encoded:
            emb = self.embed(asn)
            self.encoded[asn] = self.model.forward(emb.vec[None, :])[0]
        return self.encoded[asn]


def add_new_as(asn: int, encoder: NewAsEncoder, store: embedder.EmbeddingStore,
               reduced: embedder.EmbeddingStore) -> float:
    """Encode one unseen AS into both stores; returns elapsed seconds."""
    t0 = time.perf_counter()
    emb = encoder.embed(asn)
    store.add(emb)
    reduced.put(asn, encoder.model.forward(emb.vec[None, :])[0])
    return time.perf_counter() - t0


# ---------------------------------------------------------------- detect

def run_detect(cfg: RunConfig) -> dict:
    changes_path, reduced_path = cfg.require("changes", "reduced_store")
    reduced = embedder.EmbeddingStore.load(reduced_path)
    fallback = None
    if cfg.fallback:
        (store_path,) = cfg.require("store")
        dim = embedder.EmbeddingStore.load(store_path).dim
        model = load_or_init_model(cfg, dim)
        graph = load_graph(cfg) if cfg.path("relationships") and cfg.path("relationships").exists() else None
        fallback = NewAsEncoder(make_provider(cfg, dim), model, graph, load_metadata(cfg),
                                cfg.neighbor_batch_size, cfg.max_chars)
    table = detector.VectorTable(reduced.vectors, fallback)
    skipped = detector.SkipCounts()
    windows: list = []
    n = flagged = 0
    out = cfg.output("scored")
    tmp = out.with_suffix(".tmp")
    with open(changes_path, encoding="utf-8") as src, open(tmp, "w", encoding="utf-8") as dst:
        scored = detector.score_changes(route_monitor.read_changes(src), table, skipped)
        for sc in detector.detect(scored, cfg.window_secs, windows):
            dst.write(json.dumps(sc.to_dict(), separators=(",", ":")) + "\n")
            n += 1
            flagged += sc.flagged
    os.replace(tmp, out)
    return {"scored": n, "flagged": flagged, "windows": len(windows),
            "skipped_vantage_mismatch": skipped.vantage_mismatch,
            "skipped_unresolved": skipped.unresolved, "new_ases_encoded": table.resolved}


# ---------------------------------------------------------------- aggregate

def run_aggregate(cfg: RunConfig, extra_run: Optional[dict] = None) -> dict:
    (scored_path,) = cfg.require("scored")
    with open(scored_path, encoding="utf-8") as fh:
        flagged = [s for s in (detector.ScoredChange.from_dict(json.loads(l)) for l in fh if l.strip())
                   if s.flagged]
    prefix_events, theta_vp = aggregator.build_prefix_events(flagged, cfg.window_secs, cfg.candidate_mode)
    events = aggregator.link_events(prefix_events)

    graph = load_graph(cfg)
    meta = load_metadata(cfg)
    org_of = as_profile.OrgIndex.from_metadata(meta).org
    roa = None
    roa_path = cfg.path("roa")
    if roa_path is not None:
        cfg.require("roa")
        with open(roa_path, encoding="utf-8") as fh:
            roa = aggregator.RoaTable.from_csv(fh)
    reserved = aggregator.load_reserved(cfg.path("reserved"))
    for e in events:
        e.pattern_labels, e.notes = aggregator.classify_event(e, graph, roa, reserved, org_of)

    run = {
        "config": cfg.public(),
        "flagged_changes": len(flagged),
        "theta_vp": theta_vp,
        "prefix_events": len(prefix_events),
        "rpki": roa is not None,
    }
    run.update(extra_run or {})
    report = aggregator.emit_report(events, run)
    _write_atomic(cfg.output("report"), aggregator.dump_report(report))
    _write_atomic(cfg.output("report_text"), aggregator.render_text(report))
    return {"events": len(events), "flagged": len(flagged), "theta_vp": theta_vp}


# ---------------------------------------------------------------- perturb / run-all

def run_perturb(cfg: RunConfig, noise: str, ratio: float, seed: int, out: Path) -> dict:
    graph = load_graph(cfg)
    noisy = as_profile.perturb_graph(graph, noise, ratio, seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        as_profile.write_relationships(noisy, fh)
    return {"edges_before": len(graph.edges), "edges_after": len(noisy.edges)}


STAGES = ("monitor", "profile", "embed", "train-cdr", "reduce", "detect", "aggregate")

RUNNERS = {
    "monitor": run_monitor,
    "profile": run_profile,
    "embed": run_embed,
    "train-cdr": run_train_cdr,
    "reduce": run_reduce,
    "detect": run_detect,
    "aggregate": run_aggregate,
}


def run_all(cfg: RunConfig) -> tuple[Path, dict]:
    summary = {}
    if not cfg.train_cdr:
        # an earlier trained model must not leak into an untrained run
        mp = cfg.path("model")
        if mp.exists():
            mp.unlink()
    for stage in STAGES:
        if stage == "train-cdr" and not cfg.train_cdr:
            continue
        try:
            if stage == "aggregate":
                summary[stage] = run_aggregate(cfg, {"stages": {k: v for k, v in summary.items()
                                                                if k in ("monitor", "detect")}})
            else:
                summary[stage] = RUNNERS[stage](cfg)
        except (ConfigError, StageError):
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc
        log.info("%s: %s", stage, summary[stage])
    return cfg.path("report"), summary
