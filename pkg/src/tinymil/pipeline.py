"""Stage-by-stage orchestration of the bag -> saliency -> instance -> evaluation pipeline.

Each stage reads its predecessors' artifacts from the run directory and
writes its own into a dedicated sub-directory. Three experiment modes share
the stages:

``typical``
    bag model on whole images, evaluated directly.
``baseline_grid``
    bag model fine-tuned on non-overlapping grid tiles (every tile inherits
    its bag's label); bags are scored by ranking their tiles by probability.
``salimap``
    the full method: CAM saliency from the bag model, saliency-ranked
    patches, balanced instance fine-tuning, rank-weighted bag evaluation.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import evaluator, mildata, minimodel, patcher
from .raster import load_image, resize_bilinear, save_image
from .saliency import compute_cam, load_saliency, save_saliency, upsample_to_image

log = logging.getLogger(__name__)

MODES = ("typical", "baseline_grid", "salimap")
STAGES = ("split", "train-bag", "saliency", "extract-patches", "build-instances",
          "train-instance", "evaluate")
MODE_STAGES = {
    "typical": ("split", "train-bag", "evaluate"),
    "baseline_grid": ("split", "train-bag", "extract-patches", "build-instances",
                      "train-instance", "evaluate"),
    "salimap": STAGES,
}
# grid baseline geometry: resize by 897/1200 and tile at 299/400 of the method's patch side
GRID_SCALE = 299 / 400

BASELINE_NOTE = ("baseline_grid inherits bag labels for every grid tile; no manual "
                 "tile annotations are available")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, path, message: str):
        self.stage = stage
        self.path = os.fspath(path) if path is not None else None
        super().__init__(f"[{stage}] {message}" + (f" ({self.path})" if self.path else ""))


def _bag_train_defaults() -> dict:
    return {"batch_size": 16, "epochs": 400, "patience": 80}


def _instance_train_defaults() -> dict:
    return {"batch_size": 16, "epochs": 300, "patience": 60}


@dataclass
class PipelineConfig:
    dataset_root: str = ""
    out_dir: str = "run"
    seed: int = 0
    k: int = 5
    patch_side: int = 64
    ratios: tuple = (0.6, 0.2, 0.2)
    threshold: float = 0.5
    mode: str = "salimap"
    bag_train: dict = field(default_factory=_bag_train_defaults)
    instance_train: dict = field(default_factory=_instance_train_defaults)
    figures: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        patcher.PatchPolicy(k=self.k, l=self.patch_side)
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")
        self.ratios = tuple(float(r) for r in self.ratios)
        self.bag_train = {**_bag_train_defaults(), **dict(self.bag_train)}
        self.instance_train = {**_instance_train_defaults(), **dict(self.instance_train)}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        return d

    def train_config(self, which: str) -> minimodel.TrainConfig:
        params = self.bag_train if which == "bag" else self.instance_train
        return minimodel.TrainConfig(seed=self.seed, **params)

    @property
    def policy(self) -> patcher.PatchPolicy:
        mode = patcher.GRID if self.mode == "baseline_grid" else patcher.SALIMAP
        return patcher.PatchPolicy(k=self.k, l=self.patch_side, mode=mode, seed=self.seed)


class Run:
    """Paths inside a run directory."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = cfg.out_dir
        self._images = {}

    def path(self, *parts) -> str:
        return os.path.join(self.root, *parts)

    def stage_dir(self, name: str) -> str:
        d = self.path(name)
        os.makedirs(d, exist_ok=True)
        return d

    def require(self, stage: str, *parts) -> str:
        p = self.path(*parts)
        if not os.path.exists(p):
            raise PipelineError(stage, p, "missing input artifact; run the preceding stage first")
        return p

    def image(self, stage: str, bag: mildata.Bag) -> np.ndarray:
        p = os.path.join(self.cfg.dataset_root, bag.image_path)
        if p not in self._images:
            try:
                self._images[p] = load_image(p)
            except OSError as exc:
                raise PipelineError(stage, p, str(exc)) from exc
        return self._images[p]

    def manifest(self, stage: str) -> mildata.DatasetManifest:
        return mildata.DatasetManifest.load(self.require(stage, "split", "manifest.json"))


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _labels01(labels) -> np.ndarray:
    return np.array([1.0 if lab == mildata.POSITIVE else 0.0 for lab in labels])


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_split(run: Run) -> mildata.DatasetManifest:
    cfg = run.cfg
    if not os.path.isdir(cfg.dataset_root):
        raise PipelineError("split", cfg.dataset_root, "dataset root does not exist")
    try:
        bags = mildata.load_directory(cfg.dataset_root)
        manifest = mildata.split_bags(bags, cfg.ratios, cfg.seed)
    except (OSError, ValueError) as exc:
        raise PipelineError("split", cfg.dataset_root, str(exc)) from exc
    manifest.k, manifest.l = cfg.k, cfg.patch_side
    manifest.save(os.path.join(run.stage_dir("split"), "manifest.json"))
    return manifest


def stage_train_bag(run: Run) -> minimodel.MiniModel:
    manifest = run.manifest("train-bag")
    tr, va = manifest.bags_in("train"), manifest.bags_in("val")
    model = minimodel.MiniModel()
    try:
        trained, tlog = minimodel.train(
            model, [run.image("train-bag", b) for b in tr], _labels01(b.label for b in tr),
            run.cfg.train_config("bag"),
            [run.image("train-bag", b) for b in va], _labels01(b.label for b in va),
        )
    except ValueError as exc:
        raise PipelineError("train-bag", run.path("split", "manifest.json"), str(exc)) from exc
    trained.training_meta["stage"] = "bag"
    out = run.stage_dir("bag_model")
    trained.save(os.path.join(out, "model.json"))
    tlog.save(os.path.join(out, "train_log.csv"))
    return trained


def _load_model(run: Run, stage: str, which: str) -> minimodel.MiniModel:
    p = run.require(stage, which, "model.json")
    try:
        return minimodel.MiniModel.load(p)
    except (OSError, ValueError, KeyError) as exc:
        raise PipelineError(stage, p, f"cannot load model: {exc}") from exc


def bag_saliency(model: minimodel.MiniModel, img: np.ndarray, bag_id: str):
    feats = minimodel.feature_maps(model, img)
    cam = compute_cam(feats, model.cam_weights(), image_id=bag_id)
    return upsample_to_image(cam, img.shape[0], img.shape[1])


def stage_saliency(run: Run) -> None:
    manifest = run.manifest("saliency")
    model = _load_model(run, "saliency", "bag_model")
    out = run.stage_dir("saliency")
    for bag in manifest.bags:
        sal = bag_saliency(model, run.image("saliency", bag), bag.bag_id)
        save_saliency(sal, os.path.join(out, bag.bag_id + ".salm"))


def grid_geometry(h: int, w: int, patch_side: int) -> tuple[int, int, int]:
    """Tile side and resized frame for the grid baseline."""
    tile = max(2, 2 * int(round(patch_side * GRID_SCALE / 2)))
    rows = max(1, int(round(h / patch_side)))
    cols = max(1, int(round(w / patch_side)))
    return tile, rows * tile, cols * tile


def stage_extract_patches(run: Run) -> list:
    cfg = run.cfg
    manifest = run.manifest("extract-patches")
    out = run.stage_dir("patches")
    rows = []
    for bag in manifest.bags:
        img = run.image("extract-patches", bag)
        if cfg.mode == "baseline_grid":
            tile, rh, rw = grid_geometry(img.shape[0], img.shape[1], cfg.patch_side)
            records = patcher.grid_patches(resize_bilinear(img, rh, rw).clip(0, 1), tile, bag.bag_id)
        else:
            sal_path = run.path("saliency", bag.bag_id + ".salm")

            def source(bag_id, _p=sal_path):
                if not os.path.exists(_p):
                    return None
                return load_saliency(_p, bag_id)
            try:
                records = mildata.bag_patches(bag, img, cfg.policy, source, cfg.seed)
            except ValueError as exc:
                raise PipelineError("extract-patches", sal_path, str(exc)) from exc
        for rec in records:
            name = f"{bag.bag_id}_{rec.origin}_{rec.rank_j}.png"
            save_image(rec.patch, os.path.join(out, name))
            rows.append(rec.manifest_row(name))
    patcher.write_patch_manifest(rows, os.path.join(out, "patches.jsonl"))
    return rows


def stage_build_instances(run: Run) -> mildata.DatasetManifest:
    cfg = run.cfg
    manifest = run.manifest("build-instances")
    rows = patcher.read_patch_manifest(run.require("build-instances", "patches", "patches.jsonl"))
    index = {b.bag_id: b for b in manifest.bags}
    instances = []
    for row in rows:
        bag = index.get(row["bag_id"])
        if bag is None:
            raise PipelineError("build-instances", run.path("patches", "patches.jsonl"),
                                f"patch references unknown bag {row['bag_id']!r}")
        instances.append(mildata.Instance(bag.bag_id, row["rank_j"], bag.label, row["patch_path"],
                                          row["origin"], bag.split))
    built = mildata.DatasetManifest(bags=manifest.bags, instances=instances, seed=manifest.seed,
                                    k=cfg.k, l=cfg.patch_side, ratios=manifest.ratios)
    built.check()
    out = run.stage_dir("instances")
    built.save(os.path.join(out, "manifest.json"))
    audit = mildata.balance_audit(built)
    audit["mode"] = cfg.mode
    if cfg.mode == "salimap" and not audit["ok"]:
        raise PipelineError("build-instances", os.path.join(out, "manifest.json"),
                            f"balancing audit failed: {audit}")
    _write_json(os.path.join(out, "audit.json"), audit)
    return built


def _bag_groups(run: Run, stage: str, manifest: mildata.DatasetManifest, split: str):
    """Per-bag lists of instance patches for ``split``, ordered by rank."""
    groups = {}
    for inst in sorted(manifest.instances_in(split), key=lambda i: (i.bag_id, i.rank_j)):
        p = run.require(stage, "patches", inst.patch_path)
        groups.setdefault(inst.bag_id, []).append(load_image(p))
    bags = [b for b in manifest.bags_in(split) if b.bag_id in groups]
    return bags, [groups[b.bag_id] for b in bags]


def aggregate(instance_probs, mode: str) -> float:
    """Bag probability from rank-ordered instance probabilities.

    Grid tiles carry no saliency rank, so they are ranked by their own
    probability before the rank-weighted average.
    """
    p = np.asarray(instance_probs, dtype=np.float64)
    if mode == "baseline_grid":
        p = np.sort(p)[::-1]
    return evaluator.weighted_evaluate(p)


def _bag_level_val(pooled_groups, labels, mode: str):
    y = np.asarray(labels, dtype=np.float64)

    def val_fn(model):
        P = np.array([
            aggregate(minimodel.sigmoid(model.normalize(g) @ model.head_weights + model.head_bias), mode)
            for g in pooled_groups
        ])
        Pc = np.clip(P, minimodel.PROB_CLIP, 1 - minimodel.PROB_CLIP)
        loss = float(-np.mean(y * np.log(Pc) + (1 - y) * np.log(1 - Pc)))
        return loss, float(np.mean((P >= 0.5) == (y >= 0.5)))
    return val_fn


def stage_train_instance(run: Run) -> minimodel.MiniModel:
    cfg = run.cfg
    mpath = run.require("train-instance", "instances", "manifest.json")
    manifest = mildata.DatasetManifest.load(mpath)
    bag_model = _load_model(run, "train-instance", "bag_model")
    train_inst = sorted(manifest.instances_in("train"), key=lambda i: (i.bag_id, i.origin, i.rank_j))
    if not train_inst:
        raise PipelineError("train-instance", mpath, "no training instances")
    images = [load_image(run.require("train-instance", "patches", i.patch_path)) for i in train_inst]
    labels = _labels01(i.label for i in train_inst)

    val_bags, val_groups = _bag_groups(run, "train-instance", manifest, "val")
    val_fn = None
    if val_bags:
        pooled = [minimodel.pooled_matrix(bag_model, g) for g in val_groups]
        val_fn = _bag_level_val(pooled, _labels01(b.label for b in val_bags), cfg.mode)
    trained, tlog = minimodel.train(bag_model, images, labels, cfg.train_config("instance"),
                                    val_fn=val_fn)
    trained.training_meta["stage"] = "instance"
    out = run.stage_dir("instance_model")
    trained.save(os.path.join(out, "model.json"))
    tlog.save(os.path.join(out, "train_log.csv"))
    return trained


def _predict_split(run: Run, split: str):
    cfg = run.cfg
    stage = "evaluate"
    if cfg.mode == "typical":
        manifest = run.manifest(stage)
        model = _load_model(run, stage, "bag_model")
        bags = manifest.bags_in(split)
        probs = minimodel.predict_proba(model, [run.image(stage, b) for b in bags])
        return [evaluator.BagPrediction.from_instances(b.bag_id, [p], b.label, cfg.threshold)
                for b, p in zip(bags, probs)]
    manifest = mildata.DatasetManifest.load(run.require(stage, "instances", "manifest.json"))
    model = _load_model(run, stage, "instance_model")
    bags, groups = _bag_groups(run, stage, manifest, split)
    preds = []
    for bag, patches in zip(bags, groups):
        probs = minimodel.predict_proba(model, patches)
        preds.append(evaluator.BagPrediction.from_instances(
            bag.bag_id, probs, bag.label, cfg.threshold,
            aggregator=lambda p: aggregate(p, cfg.mode)))
    return preds


def stage_evaluate(run: Run) -> dict:
    cfg = run.cfg
    out = run.stage_dir("eval")
    results = {}
    for split in ("val", "test"):
        preds = _predict_split(run, split)
        if not preds:
            continue
        report = evaluator.metrics(preds)
        evaluator.write_report(preds, report, cfg.threshold, os.path.join(out, f"report_{split}.json"),
                               os.path.join(out, f"summary_{split}.csv"))
        results[split] = (preds, report)
    if "test" not in results:
        raise PipelineError("evaluate", run.path("split", "manifest.json"), "test split is empty")
    test = results["test"][1]
    metrics = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "k": cfg.k,
        "patch_side": cfg.patch_side,
        "threshold": cfg.threshold,
        "split": "test",
        "n_bags": sum(test.confusion.values()),
        **test.to_dict(),
    }
    if "val" in results:
        metrics["val_accuracy"] = results["val"][1].accuracy
        metrics["val_f1"] = results["val"][1].f1
    if cfg.mode == "baseline_grid":
        metrics["deviation"] = BASELINE_NOTE
    _write_json(os.path.join(out, "metrics.json"), metrics)
    _write_summary_csv(os.path.join(out, "metrics.csv"), results)
    if cfg.figures:
        from . import plotting
        plotting.render_run_figures(run, results)
    return metrics


def _write_summary_csv(path, results) -> None:
    with open(path, "w") as fh:
        fh.write("split,accuracy,f1,TP,FP,FN,TN\n")
        for split, (_, rep) in results.items():
            c = rep.confusion
            fh.write(f"{split},{rep.accuracy:.10g},{rep.f1:.10g},{c['TP']},{c['FP']},{c['FN']},{c['TN']}\n")


STAGE_FUNCS = {
    "split": stage_split,
    "train-bag": stage_train_bag,
    "saliency": stage_saliency,
    "extract-patches": stage_extract_patches,
    "build-instances": stage_build_instances,
    "train-instance": stage_train_instance,
    "evaluate": stage_evaluate,
}


def run_stage(cfg: PipelineConfig, stage: str, run: Run | None = None):
    run = run or Run(cfg)
    os.makedirs(run.root, exist_ok=True)
    if stage not in MODE_STAGES[cfg.mode]:
        raise PipelineError(stage, None, f"stage not used in mode {cfg.mode!r}")
    log.info("stage %s (mode %s)", stage, cfg.mode)
    try:
        return STAGE_FUNCS[stage](run)
    except PipelineError:
        raise
    except (OSError, ValueError) as exc:
        raise PipelineError(stage, getattr(exc, "filename", None), str(exc)) from exc


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Run every stage of ``cfg.mode`` in order; returns the test metrics dict."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write_json(os.path.join(cfg.out_dir, "config.json"), cfg.to_dict())
    run = Run(cfg)
    result = None
    for stage in MODE_STAGES[cfg.mode]:
        result = run_stage(cfg, stage, run)
    return result
