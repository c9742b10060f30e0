"""Run configuration and the two end-to-end workflows: explain and evaluate.

``cmd_explain`` writes, per image, a fused overlay PNG, a comparison panel
PNG and a JSON manifest. ``cmd_evaluate`` scores a folder of images and
writes per-record and aggregate CSVs; progress is journalled as one JSON
line per image so an interrupted run resumes where it stopped.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from PIL import Image

from . import cam, render
from . import metrics as evalm
from .adapter import ModelHandle, available_adapters, load_model, read_rgb
from .errors import FMGCAMError, ParameterError

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "FMGCAM_OUTPUT_ROOT"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
JOURNAL = "journal.ndjson"


@dataclass(frozen=True)
class RunConfig:
    model: dict = field(default_factory=lambda: {"adapter": "testbed", "kind": "tiny_cnn"})
    layer: str = "auto"
    K: int | None = None  # None: 4 for explain, 5 for evaluate
    activation: str = "relu"
    norm: str = "global"
    palette: str = "default"
    alpha: float = render.DEFAULT_ALPHA
    metrics: evalm.PerturbationConfig = field(default_factory=evalm.PerturbationConfig)
    cam_types: tuple[str, ...] = evalm.CAM_TYPES
    output_dir: str = "fmgcam-out"
    seed: int = 0
    workers: int = 1

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        if "metrics" in data and not isinstance(data["metrics"], evalm.PerturbationConfig):
            data["metrics"] = evalm.PerturbationConfig(**(data["metrics"] or {}))
        if "cam_types" in data:
            ct = data["cam_types"]
            data["cam_types"] = tuple(ct.split(",") if isinstance(ct, str) else ct)
        if "model" in data:
            data["model"] = dict(data["model"])
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cam_types"] = list(self.cam_types)
        return d

    def merged(self, overrides: dict) -> "RunConfig":
        """Apply non-None overrides; ``model`` and ``metrics`` merge key by key.

        A ``model`` override naming a different adapter replaces the section.
        """
        base = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            if key in ("model", "metrics"):
                keep = base[key]
                # options of one adapter mean nothing to another
                if key == "model" and value.get("adapter") not in (None, keep.get("adapter")):
                    keep = {}
                base[key] = {**keep, **{k: v for k, v in value.items() if v is not None}}
            else:
                base[key] = value
        return RunConfig.from_dict(base)

    def validate(self) -> "RunConfig":
        if self.K is not None and self.K < 1:
            raise ParameterError("K must be >= 1")
        if self.activation not in cam.ACTIVATIONS:
            raise ParameterError(f"activation must be one of {cam.ACTIVATIONS}")
        if self.norm not in cam.NORM_AXES:
            raise ParameterError(f"norm must be one of {cam.NORM_AXES}")
        if self.palette not in render.PALETTES:
            raise ParameterError(f"unknown palette {self.palette!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError("alpha must lie in [0, 1]")
        if not self.cam_types or any(t not in evalm.CAM_TYPES for t in self.cam_types):
            raise ParameterError(f"cam_types must be a non-empty subset of {evalm.CAM_TYPES}")
        if self.workers < 1:
            raise ParameterError("workers must be >= 1")
        adapter = self.model.get("adapter")
        if adapter not in available_adapters():
            raise ParameterError(f"unknown adapter {adapter!r}; available: {available_adapters()}")
        for key in ("checkpoint", "labels"):
            path = self.model.get(key)
            if path is not None and not Path(path).exists():
                raise ParameterError(f"model {key} {path} does not exist")
        return self

    def k_for(self, command: str) -> int:
        if self.K is not None:
            return self.K
        return cam.RENDER_K if command == "explain" else cam.EVAL_K

    def output_path(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def build_model(self) -> ModelHandle:
        opts = dict(self.model)
        adapter = opts.pop("adapter")
        opts.setdefault("seed", self.seed)
        return load_model(adapter, **opts)

    def fingerprint(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the YAML file at ``path``, then ``overrides``."""
    cfg = RunConfig()
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
        cfg = cfg.merged(data)
    if overrides:
        cfg = cfg.merged(overrides)
    return cfg.validate()


def save_config(path: str | Path, config: RunConfig) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))


def find_images(paths: Sequence[str | Path]) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(q for q in p.rglob("*") if q.suffix.lower() in IMAGE_SUFFIXES and q.is_file()))
        else:
            out.append(p)
    return out


def _fit(m: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if size[0] >= m.shape[0] and size[1] >= m.shape[1]:
        return render.upsample(m, size)
    img = Image.fromarray(np.asarray(m, dtype=np.float32))
    return np.asarray(img.resize((size[1], size[0]), Image.BILINEAR))


def _fit_fused(fused: cam.FusedSaliency, size) -> cam.FusedSaliency:
    if size[0] >= fused.channels.shape[0] and size[1] >= fused.channels.shape[1]:
        return render.upsample_fused(fused, size)
    stack = np.stack([_fit(fused.channel(k), size) for k in range(fused.K)], axis=-1)
    keep = np.arange(fused.K) == np.argmax(np.abs(stack), axis=-1)[..., None]
    return cam.FusedSaliency(np.where(keep, stack, 0), fused.class_ids, fused.stage)


def render_explanation(rgb: np.ndarray, ex: cam.Explanation, config: RunConfig) -> dict:
    """Overlay, panel and legend for one explanation, at the source resolution."""
    size = rgb.shape[:2]
    K = ex.ranked.K
    palette = render.get_palette(config.palette, K)
    labels = [ex.prediction.label(c) for c in ex.ranked.class_ids]
    legend = render.legend_entries(ex.ranked.class_ids, labels, palette)
    heat = render.colorize_fused(_fit_fused(ex.fused, size), palette)
    fused_overlay = render.overlay(rgb, heat, config.alpha, legend)
    cams = [
        render.overlay(rgb, render.colorize_map(_fit(gc.values, size), palette.hues[k]), config.alpha)
        for k, gc in enumerate(ex.grad_cams)
    ]
    captions = [f"#{k + 1} {lbl}\np={p:.3f}" for k, (lbl, p) in enumerate(zip(labels, ex.ranked.probabilities))]
    pan = render.panel(rgb, fused_overlay, cams, captions, fused_title=f"FM-G-CAM\n{config.activation}")
    return {"overlay": fused_overlay, "panel": pan, "legend": legend, "labels": labels}


@dataclass
class ExplainResult:
    manifests: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return 1 if self.failures and not self.manifests else 0


def _unique_stem(path: Path, used: set) -> str:
    stem, n = path.stem, 1
    while stem in used:
        n += 1
        stem = f"{path.stem}_{n}"
    used.add(stem)
    return stem


def cmd_explain(config: RunConfig, image_paths: Sequence[str | Path], model: ModelHandle | None = None) -> ExplainResult:
    config.validate()
    model = model or config.build_model()
    out = config.output_path()
    out.mkdir(parents=True, exist_ok=True)
    K = config.k_for("explain")
    result = ExplainResult()
    used: set = set()
    for path in find_images(image_paths):
        try:
            rgb = read_rgb(path)
            image = model.recipe.apply(rgb, str(path))
            ex = cam.explain(model, image, config.layer, K, config.activation, config.norm)
            art = render_explanation(rgb, ex, config)
        except FMGCAMError as exc:
            log.error("explain failed for %s: %s", path, exc)
            result.failures.append({"source": str(path), "error": str(exc)})
            continue
        stem = _unique_stem(path, used)
        files = {"overlay": f"{stem}_fmgcam.png", "panel": f"{stem}_panel.png"}
        render.save_png(out / files["overlay"], art["overlay"].pixels)
        render.save_png(out / files["panel"], art["panel"])
        manifest = {
            "source": str(path),
            "preprocess_id": image.preprocess_id,
            "model": model.name,
            "layer": ex.layer.layer_id,
            "K": K,
            "activation": config.activation,
            "norm": config.norm,
            "alpha": config.alpha,
            "multilabel": ex.prediction.multilabel,
            "ranked": [
                {
                    "rank": k + 1,
                    "class_id": c,
                    "label": art["labels"][k],
                    "probability": float(ex.ranked.probabilities[k]),
                    "score": float(ex.prediction.scores[c]),
                    "color": art["legend"][k][1],
                }
                for k, c in enumerate(ex.ranked.class_ids)
            ],
            "legend": [{"label": lbl, "color": rgb_} for lbl, rgb_ in art["legend"]],
            "files": files,
        }
        (out / f"{stem}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        result.manifests.append(manifest)
    save_config(out / "run_config.yaml", config)
    return result


# -- evaluate -----------------------------------------------------------------


def read_journal(path: Path, fingerprint: str) -> dict[str, dict]:
    """Completed entries keyed by image id; a torn final line is ignored."""
    done: dict[str, dict] = {}
    if not path.exists():
        return done
    lines = path.read_text().splitlines()
    for n, line in enumerate(lines):
        try:
            entry = json.loads(line)
        except json.JSONDecodeError:
            if n == len(lines) - 1:
                log.warning("ignoring truncated journal line %d", n + 1)
                continue
            raise ParameterError(f"{path}: corrupt journal line {n + 1}") from None
        if "fingerprint" in entry:
            if entry["fingerprint"] != fingerprint:
                raise ParameterError(f"{path} was written by a different configuration; use a fresh output_dir")
            continue
        done[entry["image_id"]] = entry
    return done


def _evaluate_one(model: ModelHandle, config: RunConfig, root: Path, image_id: str) -> dict:
    path = root / image_id
    try:
        image = model.recipe.apply(read_rgb(path), str(path))
        recs = evalm.evaluate_image(
            model,
            image,
            config.k_for("evaluate"),
            config.cam_types,
            config.metrics,
            layer=config.layer,
            fn=config.activation,
            norm=config.norm,
            image_id=image_id,
        )
    except FMGCAMError as exc:
        log.warning("skipping %s: %s", image_id, exc)
        return {"image_id": image_id, "status": "skipped", "error": str(exc)}
    return {"image_id": image_id, "status": "ok", "records": [r.row() for r in recs]}


_WORKER: dict = {}


def _worker_init(config_dict: dict) -> None:
    _WORKER["config"] = RunConfig.from_dict(config_dict)
    _WORKER["model"] = _WORKER["config"].build_model()


def _worker_run(root: str, image_id: str) -> dict:
    return _evaluate_one(_WORKER["model"], _WORKER["config"], Path(root), image_id)


@dataclass
class EvaluateResult:
    records_csv: Path
    records_json: Path
    aggregate_csv: Path
    records: list
    aggregate: list
    skipped: list
    computed: list

    @property
    def exit_code(self) -> int:
        return 0 if self.records else 1


def cmd_evaluate(config: RunConfig, dataset_dir: str | Path, model: ModelHandle | None = None) -> EvaluateResult:
    config.validate()
    root = Path(dataset_dir)
    image_ids = [str(p.relative_to(root)) for p in find_images([root])]
    if not image_ids:
        raise ParameterError(f"no images found under {root}")
    out = config.output_path()
    out.mkdir(parents=True, exist_ok=True)
    fp = config.fingerprint()
    journal = out / JOURNAL
    done = read_journal(journal, fp)
    todo = [i for i in image_ids if i not in done]
    if done:
        log.info("resuming: %d of %d images already journalled", len(done), len(image_ids))
    # rewrite what survived (dropping a torn tail line) atomically, then append
    tmp = journal.with_suffix(".tmp")
    lines = [json.dumps({"fingerprint": fp})] + [json.dumps(e, sort_keys=True) for e in done.values()]
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, journal)
    with open(journal, "a") as fh:

        def append(entry):
            done[entry["image_id"]] = entry
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fh.flush()

        if config.workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(config.workers, initializer=_worker_init, initargs=(config.to_dict(),)) as pool:
                futures = [pool.submit(_worker_run, str(root), i) for i in todo]
                for fut in as_completed(futures):
                    append(fut.result())
        else:
            model = model or (config.build_model() if todo else None)
            for image_id in todo:
                append(_evaluate_one(model, config, root, image_id))

    records, skipped = [], []
    for image_id in image_ids:
        entry = done[image_id]
        if entry["status"] != "ok":
            skipped.append(image_id)
            continue
        records.extend(evalm.MetricRecord(**r) for r in entry["records"])
    res = EvaluateResult(
        out / "records.csv", out / "records.json", out / "aggregate.csv", records, [], skipped, todo
    )
    evalm.write_records_csv(res.records_csv, records)
    evalm.write_records_json(res.records_json, records)
    if records:
        res.aggregate = evalm.aggregate(records)
        evalm.write_aggregate_csv(res.aggregate_csv, res.aggregate)
    save_config(out / "run_config.yaml", config)
    return res
