"""Stage-wise pipeline: synth -> retrieve -> fuse -> cluster -> eval.

Every stage writes its outputs under the run directory and records a cache
key (sha256 over the stage name, the config values it reads and the digests
of its input files) in ``.stages/<stage>.json``. A later run whose key and
output digests still match reuses the outputs and marks the stage "cached".
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
from filelock import FileLock, Timeout

from . import fusion, retrieval, sskmeans, synth
from .evaluation import EvalReport, subset_report
from .store import BundleError, bundle_digest, load_bundle, write_bundle

log = logging.getLogger(__name__)

STAGES = ("synth", "retrieve", "fuse", "cluster", "eval")
EXIT_OK, EXIT_INTERNAL, EXIT_BAD_INPUT, EXIT_INVALID = 0, 1, 2, 3

# execution details that never change results
_NOT_ECHOED = ("out", "images", "corpus", "workers", "cache")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def exit_code(self) -> int:
        if isinstance(self.cause, (BundleError, ConfigError, FileNotFoundError, ValueError, KeyError)):
            return EXIT_BAD_INPUT
        return EXIT_INTERNAL


@dataclass(frozen=True)
class PipelineConfig:
    out: str = "run"
    images: Optional[str] = None
    corpus: Optional[str] = None
    # synthetic data
    num_classes: int = 10
    known_classes: int = 5
    samples_per_class: int = 100
    dim: int = 32
    class_separation: float = 5.0
    text_noise: float = 0.1
    captions_per_class: int = 5
    distractors_per_class: int = 0
    distractor_noise: float = 5.0
    style_modes: int = 3
    style_strength: float = 3.0
    labeled_fraction: float = 0.5
    seed: int = 7
    # retrieval / fusion
    k: int = 3
    no_text: bool = False
    renormalize_joint: bool = False
    # clustering
    clusters: Optional[int] = None
    tol: float = 1e-6
    max_iters: int = 300
    freeze_known_centers: bool = False
    empty_cluster: str = "keep"
    # loss-check
    tau: float = 0.07
    lam: float = 0.25
    denominator: str = "exclude-positive"
    # execution
    workers: int = 1
    cache: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be positive")
        if self.clusters is not None and self.clusters < 1:
            raise ConfigError("clusters must be positive")
        if (self.images is None) != (self.corpus is None):
            raise ConfigError("images and corpus must be given together")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")

    @property
    def uses_synth(self) -> bool:
        return self.images is None

    def echo(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if k not in _NOT_ECHOED}

    def mixture_spec(self) -> synth.MixtureSpec:
        return synth.MixtureSpec(
            num_classes=self.num_classes,
            dim_img=self.dim,
            dim_txt=self.dim,
            samples_per_class=self.samples_per_class,
            class_separation=self.class_separation,
            text_noise=self.text_noise,
            captions_per_class=self.captions_per_class,
            seed=self.seed,
            distractors_per_class=self.distractors_per_class,
            distractor_noise=self.distractor_noise,
            style_modes=self.style_modes,
            style_strength=self.style_strength,
        )

    def split_spec(self) -> synth.SplitSpec:
        return synth.SplitSpec(
            synth.first_classes(self.known_classes, self.num_classes), self.labeled_fraction, self.seed
        )


def _coerce(field_type: Any, raw: str):
    t = str(field_type)
    raw = raw.strip()
    if "Optional" in t or "None" in t:
        if raw.lower() in ("", "none", "null"):
            return None
        t = t.replace("Optional[", "").rstrip("]")
    if t.startswith("bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if t.startswith("int"):
        return int(raw)
    if t.startswith("float"):
        return float(raw)
    return raw


def read_config(path: os.PathLike | str) -> dict:
    """Parse the ``[pipeline]`` section of an INI-style key = value file."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    if "pipeline" not in parser:
        raise ConfigError(f"{path}: missing [pipeline] section")
    types = {f.name: f.type for f in fields(PipelineConfig)}
    out = {}
    for key, raw in parser["pipeline"].items():
        name = key.replace("-", "_")
        if name not in types:
            raise ConfigError(f"{path}: unknown key {key!r}")
        try:
            out[name] = _coerce(types[name], raw)
        except ValueError as e:
            raise ConfigError(f"{path}: bad value for {key!r}: {e}") from e
    return out


def write_config(cfg: PipelineConfig, path: os.PathLike | str) -> Path:
    parser = configparser.ConfigParser()
    parser["pipeline"] = {k: "none" if v is None else str(v) for k, v in dataclasses.asdict(cfg).items()}
    path = Path(path)
    with open(path, "w") as fh:
        parser.write(fh)
    return path


def make_config(file: Optional[str] = None, **overrides) -> PipelineConfig:
    values = read_config(file) if file else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return PipelineConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def file_digest(path: Path) -> str:
    if path.is_dir():
        return bundle_digest(path)
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _key(stage: str, params: dict, inputs: dict[str, Path]) -> str:
    payload = {
        "stage": stage,
        "params": params,
        "inputs": {name: file_digest(p) for name, p in sorted(inputs.items())},
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class RunResult:
    report: Optional[EvalReport]
    manifest: dict
    out: Path


class Run:
    """One pipeline execution inside a locked output directory."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.stages: dict[str, dict] = {}

    def path(self, name: str) -> Path:
        return self.out / name

    def _stage(self, name: str, params: dict, inputs: dict[str, Path], outputs: dict[str, Path], body: Callable[[], None]):
        marker = self.out / f"{name}.partial"
        state_file = self.out / ".stages" / f"{name}.json"
        try:
            for label, p in inputs.items():
                if not p.exists():
                    raise FileNotFoundError(f"missing input {label}: {p}")
            key = _key(name, params, inputs)
            if self.cfg.cache and state_file.is_file() and not marker.exists():
                state = json.loads(state_file.read_text())
                if state.get("key") == key and all(
                    p.exists() and file_digest(p) == state["outputs"].get(label) for label, p in outputs.items()
                ):
                    self.stages[name] = {"status": "cached", "key": key, "outputs": state["outputs"]}
                    log.info("stage %s: cached", name)
                    return
            marker.write_text(f"stage {name} started\n")
            body()
            digests = {label: file_digest(p) for label, p in outputs.items()}
        except Exception as e:
            if self.out.is_dir():
                marker.write_text(f"stage {name} failed: {e}\n")
            raise StageError(name, e) from e
        state_file.parent.mkdir(exist_ok=True)
        state_file.write_text(json.dumps({"key": key, "outputs": digests}, indent=2, sort_keys=True) + "\n")
        marker.unlink()
        self.stages[name] = {"status": "computed", "key": key, "outputs": digests}
        log.info("stage %s: computed", name)

    # -- stages ----------------------------------------------------------------

    def stage_synth(self) -> tuple[Path, Path]:
        cfg = self.cfg
        if not cfg.uses_synth:
            self.stages["synth"] = {"status": "skipped"}
            return Path(cfg.images), Path(cfg.corpus)
        images, corpus = self.path("synth/images"), self.path("synth/corpus")
        truth_file, old_file = self.path("synth/truth.json"), self.path("synth/old_classes.json")

        def body():
            imgs, caps, truth = synth.generate_mixture(cfg.mixture_spec())
            split = cfg.split_spec()
            write_bundle(synth.apply_split(imgs, split), images)
            write_bundle(caps, corpus)
            truth_file.write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n")
            old_file.write_text(json.dumps(sorted(split.known_classes)) + "\n")

        params = {**dataclasses.asdict(cfg.mixture_spec()), **dataclasses.asdict(cfg.split_spec())}
        params["known_classes"] = sorted(params["known_classes"])
        self._stage(
            "synth", params, {},
            {"images": images, "corpus": corpus, "truth": truth_file, "old_classes": old_file},
            body,
        )
        return images, corpus

    def stage_retrieve(self, images: Path, corpus: Path) -> Optional[Path]:
        if self.cfg.no_text:
            self.stages["retrieve"] = {"status": "skipped"}
            return None
        dump = self.path("retrieval.jsonl")

        def body():
            results = retrieval.batch_retrieve(load_bundle(images), load_bundle(corpus), self.cfg.k, self.cfg.workers)
            retrieval.write_retrievals(results, dump)

        self._stage("retrieve", {"k": self.cfg.k}, {"images": images, "corpus": corpus}, {"retrieval": dump}, body)
        return dump

    def stage_fuse(self, images: Path, corpus: Path, dump: Optional[Path]) -> Path:
        fused = self.path("fused")
        cfg = self.cfg

        def body():
            imgs = load_bundle(images)
            if dump is None:
                out = fusion.image_only(imgs)
            else:
                out = fusion.fuse_dataset(imgs, retrieval.read_retrievals(dump), load_bundle(corpus), cfg.renormalize_joint)
            write_bundle(out, fused)

        inputs = {"images": images}
        if dump is not None:
            inputs.update(corpus=corpus, retrieval=dump)
        params = {"no_text": cfg.no_text, "renormalize_joint": cfg.renormalize_joint}
        self._stage("fuse", params, inputs, {"fused": fused}, body)
        return fused

    def cluster_config(self, fused_bundle=None) -> sskmeans.ClusterConfig:
        cfg = self.cfg
        n = cfg.clusters
        if n is None:
            if cfg.uses_synth:
                n = cfg.num_classes
            else:
                n = len({r.class_truth for r in fused_bundle.records if r.class_truth is not None})
                if n == 0:
                    raise ConfigError("clusters not set and the bundle carries no class_truth to count")
        return sskmeans.ClusterConfig(
            n_clusters=n,
            max_iters=cfg.max_iters,
            tol=cfg.tol,
            seed=cfg.seed,
            freeze_known_centers=cfg.freeze_known_centers,
            empty_cluster=cfg.empty_cluster,
        )

    def stage_cluster(self, fused: Path) -> Path:
        model_file = self.path("model.json")

        def body():
            bundle = load_bundle(fused)
            sskmeans.fit(bundle, self.cluster_config(bundle)).save(model_file)

        cfg = self.cfg
        params = {
            "clusters": cfg.clusters if cfg.clusters is not None else (cfg.num_classes if cfg.uses_synth else "auto"),
            "tol": cfg.tol,
            "max_iters": cfg.max_iters,
            "seed": cfg.seed,
            "freeze_known_centers": cfg.freeze_known_centers,
            "empty_cluster": cfg.empty_cluster,
        }
        self._stage("cluster", params, {"fused": fused}, {"model": model_file}, body)
        return model_file

    def stage_eval(self, fused: Path, model_file: Path) -> Path:
        report_file, tsv_file = self.path("report.json"), self.path("report.tsv")

        def body():
            report = evaluate(load_bundle(fused), sskmeans.ClusterModel.load(model_file))
            report.config = self.cfg.echo()
            report.save(report_file)

        self._stage("eval", self.cfg.echo(), {"fused": fused, "model": model_file},
                    {"report": report_file, "tsv": tsv_file}, body)
        return report_file

    def execute(self) -> RunResult:
        images, corpus = self.stage_synth()
        dump = self.stage_retrieve(images, corpus)
        fused = self.stage_fuse(images, corpus, dump)
        model_file = self.stage_cluster(fused)
        report_file = self.stage_eval(fused, model_file)
        manifest = {
            "config": dataclasses.asdict(self.cfg),
            "inputs": {"images": file_digest(images), "corpus": file_digest(corpus)},
            "stages": self.stages,
        }
        (self.out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return RunResult(load_report(report_file), manifest, self.out)


def evaluate(fused, model: sskmeans.ClusterModel) -> EvalReport:
    """Score the unlabelled rows of ``fused`` against their ``class_truth``."""
    recs = fused.records_by_row()
    if model.sample_ids and model.sample_ids != [r.id for r in recs]:
        raise ValueError("model was fitted on a different bundle (sample ids differ)")
    if len(model.assignments) != len(recs):
        raise ValueError("model assignments do not match bundle rows")
    unl = [i for i, r in enumerate(recs) if r.label is None]
    missing = [recs[i].id for i in unl if recs[i].class_truth is None]
    if missing:
        raise ValueError(f"unlabelled sample {missing[0]!r} has no class_truth to score against")
    old = synth.old_classes_of(fused)
    return subset_report([int(model.assignments[i]) for i in unl], [recs[i].class_truth for i in unl], old)


def load_report(path: os.PathLike | str) -> EvalReport:
    obj = json.loads(Path(path).read_text())
    c = obj["counts"]
    return EvalReport(
        correct_all=c["correct_all"],
        correct_old=c["correct_old"],
        correct_new=c["correct_new"],
        n_all=c["n_all"],
        n_old=c["n_old"],
        n_new=c["n_new"],
        matching={int(k): v for k, v in obj["matching"].items()},
        contingency=np.asarray(obj["contingency"]["counts"], dtype=np.int64),
        clusters=list(obj["contingency"]["clusters"]),
        classes=list(obj["contingency"]["classes"]),
        config=obj.get("config", {}),
    )


def _locked(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise ConfigError(f"output directory {out} is in use by another pipeline process") from None
    return lock


def run_pipeline(cfg: PipelineConfig) -> RunResult:
    lock = _locked(Path(cfg.out))
    try:
        return Run(cfg).execute()
    finally:
        lock.release()


def _dedupe(k_values: Sequence[int]) -> list[int]:
    seen: list[int] = []
    for k in k_values:
        if k in seen:
            log.warning("duplicate k=%d in sweep ignored", k)
        else:
            seen.append(k)
    return seen


def topk_sweep(cfg: PipelineConfig, k_values: Sequence[int]) -> list[dict]:
    """Run the pipeline once per k over shared inputs; writes sweep.csv and sweep_plot.json."""
    if not k_values:
        raise ConfigError("k_values must be nonempty")
    ks = _dedupe([int(k) for k in k_values])
    root = Path(cfg.out)
    lock = _locked(root)
    try:
        base = Run(replace(cfg, out=str(root)))
        images, corpus = base.stage_synth()
        rows = []
        for k in ks:
            sub = replace(cfg, out=str(root / f"k_{k:03d}"), k=k)
            row: dict[str, Any] = {"k": k}
            try:
                run = Run(sub)
                run.out.mkdir(parents=True, exist_ok=True)
                dump = run.stage_retrieve(images, corpus)
                fused = run.stage_fuse(images, corpus, dump)
                model_file = run.stage_cluster(fused)
                rep = load_report(run.stage_eval(fused, model_file))
                row.update(acc_all=rep.acc_all, acc_old=rep.acc_old, acc_new=rep.acc_new, status="ok")
            except Exception as e:  # a failed k is recorded, the sweep goes on
                log.error("sweep k=%d failed: %s", k, e)
                row.update(acc_all=None, acc_old=None, acc_new=None, status=f"failed: {e}")
            rows.append(row)
    finally:
        lock.release()
    write_sweep(rows, root, cfg)
    return rows


def write_sweep(rows: list[dict], root: Path, cfg: PipelineConfig) -> None:
    def fmt(x):
        return "" if x is None else f"{x:.4f}"

    with open(root / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "acc_all", "acc_old", "acc_new", "status"])
        for r in rows:
            w.writerow([r["k"], fmt(r["acc_all"]), fmt(r["acc_old"]), fmt(r["acc_new"]), r["status"]])
    plot = {
        "x": "k",
        "series": {name: [r[name] for r in rows] for name in ("acc_all", "acc_old", "acc_new")},
        "k": [r["k"] for r in rows],
        "config": cfg.echo(),
    }
    (root / "sweep_plot.json").write_text(json.dumps(plot, indent=2, sort_keys=True) + "\n")
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, ys in plot["series"].items():
        pts = [(k, y) for k, y in zip(plot["k"], ys) if y is not None]
        if pts:
            ax.plot(*zip(*pts), marker="o", label=name.replace("acc_", ""))
    ax.set_xscale("log")
    ax.set_xlabel("retrieved captions per image (k)")
    ax.set_ylabel("ACC")
    if ax.lines:
        ax.legend()
    fig.tight_layout()
    fig.savefig(root / "sweep.png", dpi=120)
    plt.close(fig)
