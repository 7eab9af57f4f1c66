"""Bags, instances and manifests for multiple-instance training.

Only bags carry ground-truth labels; every instance inherits the label of the
bag it was cut from. Training instances are balanced per bag: positive bags
contribute their two most salient patches, negative bags five random ones.
"""

from __future__ import annotations

import glob
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .patcher import RANDOM, SALIMAP, PatchPolicy, patch_salimap, random_patches
from .raster import load_image, save_image

POSITIVE = "positive"
NEGATIVE = "negative"
LABELS = (POSITIVE, NEGATIVE)
SPLITS = ("train", "val", "test")

POSITIVE_TRAIN_PATCHES = 2
NEGATIVE_TRAIN_PATCHES = 5


@dataclass
class Bag:
    bag_id: str
    image_path: str
    label: str
    split: str | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"bag {self.bag_id!r}: label must be one of {LABELS}, got {self.label!r}")
        if self.split is not None and self.split not in SPLITS:
            raise ValueError(f"bag {self.bag_id!r}: unknown split {self.split!r}")


@dataclass
class Instance:
    bag_id: str
    rank_j: int
    label: str
    patch_path: str
    origin: str = SALIMAP
    split: str | None = None


@dataclass
class DatasetManifest:
    bags: list = field(default_factory=list)
    instances: list = field(default_factory=list)
    seed: int = 0
    k: int = 5
    l: int | None = None
    ratios: tuple = (0.6, 0.2, 0.2)

    def __post_init__(self):
        ids = [b.bag_id for b in self.bags]
        if len(set(ids)) != len(ids):
            raise ValueError("bag_id values must be unique within a dataset")

    def bag(self, bag_id: str) -> Bag:
        return self._index()[bag_id]

    def _index(self) -> dict:
        return {b.bag_id: b for b in self.bags}

    def bags_in(self, split: str) -> list:
        return [b for b in self.bags if b.split == split]

    def instances_in(self, split: str) -> list:
        index = self._index()
        return [i for i in self.instances if index[i.bag_id].split == split]

    def check(self) -> None:
        """Raise if an instance references a missing bag or carries a foreign label."""
        index = self._index()
        for inst in self.instances:
            if inst.bag_id not in index:
                raise ValueError(f"instance references unknown bag {inst.bag_id!r}")
            if inst.label != index[inst.bag_id].label:
                raise ValueError(f"instance {inst.bag_id}#{inst.rank_j} does not carry its bag's label")

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "k": self.k,
            "l": self.l,
            "ratios": list(self.ratios),
            "bags": [asdict(b) for b in self.bags],
            "instances": [asdict(i) for i in self.instances],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            bags=[Bag(**b) for b in d["bags"]],
            instances=[Instance(**i) for i in d.get("instances", [])],
            seed=d.get("seed", 0),
            k=d.get("k", 5),
            l=d.get("l"),
            ratios=tuple(d.get("ratios", (0.6, 0.2, 0.2))),
        )

    def save(self, path) -> None:
        with open(os.fspath(path), "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(os.fspath(path)) as fh:
            return cls.from_dict(json.load(fh))


def load_directory(root) -> list:
    """Bags from ``root/{positive,negative}/*.png``; ``bag_id`` is the file stem.

    Image paths are stored relative to ``root``.
    """
    root = os.fspath(root)
    bags = []
    for label in LABELS:
        for path in sorted(glob.glob(os.path.join(root, label, "*.png"))):
            stem = os.path.splitext(os.path.basename(path))[0]
            bags.append(Bag(stem, os.path.relpath(path, root), label))
    if not bags:
        raise FileNotFoundError(f"no images found under {root}/{{positive,negative}}/")
    return bags


def split_counts(n: int, ratios) -> tuple[int, int, int]:
    """Floor each share; the remainder goes to train."""
    counts = [int(np.floor(n * r + 1e-9)) for r in ratios]
    counts[0] += n - sum(counts)
    return tuple(counts)


def split_bags(bags, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> DatasetManifest:
    """Stratified, seeded train/val/test assignment."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    if ratios[0] <= 0:
        raise ValueError("the train ratio must be positive")
    bags = [Bag(b.bag_id, b.image_path, b.label) for b in bags]
    rng = np.random.default_rng(seed)
    for label in LABELS:
        members = [b for b in bags if b.label == label]
        if not members:
            raise ValueError(f"no bags with label {label!r}; both classes are required")
        order = rng.permutation(len(members))
        n_train, n_val, _ = split_counts(len(members), ratios)
        for pos, idx in enumerate(order):
            members[idx].split = "train" if pos < n_train else "val" if pos < n_train + n_val else "test"
    return DatasetManifest(bags=bags, seed=seed, ratios=ratios)


def negative_patch_seed(seed: int, bag_id: str) -> list:
    """Per-bag seed for random negative patches (stable across runs and platforms)."""
    return [int(seed), *bag_id.encode()]


def _salimap_for(saliency_source, bag: Bag):
    try:
        sal = saliency_source(bag.bag_id) if callable(saliency_source) else saliency_source[bag.bag_id]
    except KeyError:
        sal = None
    if sal is None:
        raise ValueError(f"no saliency map available for bag {bag.bag_id!r} ({bag.split} split)")
    return sal


def bag_patches(bag: Bag, img, policy: PatchPolicy, saliency_source, seed: int):
    """Patch records a bag contributes under the balancing policy."""
    if bag.split == "train" and bag.label == NEGATIVE:
        return random_patches(img, NEGATIVE_TRAIN_PATCHES, policy.l,
                              negative_patch_seed(seed, bag.bag_id), bag_id=bag.bag_id)
    k = POSITIVE_TRAIN_PATCHES if bag.split == "train" else policy.k
    sal = _salimap_for(saliency_source, bag)
    return patch_salimap(img, sal, k, policy.l, bag_id=bag.bag_id)


def build_instance_dataset(manifest: DatasetManifest, patch_policy: PatchPolicy, saliency_source,
                           image_root, patch_dir, image_loader=load_image) -> DatasetManifest:
    """Cut, save and register instances for every bag in the manifest.

    ``saliency_source`` maps ``bag_id`` to a saliency map (mapping or callable).
    Train positives give their top-2 saliency patches, train negatives five
    random patches; validation and test bags give all ``k`` saliency patches.
    Patch files are written to ``patch_dir`` and recorded relative to it.
    """
    os.makedirs(patch_dir, exist_ok=True)
    instances = []
    for bag in manifest.bags:
        if bag.split is None:
            raise ValueError(f"bag {bag.bag_id!r} has no split assigned")
        img = image_loader(os.path.join(image_root, bag.image_path))
        for rec in bag_patches(bag, img, patch_policy, saliency_source, manifest.seed):
            name = f"{bag.bag_id}_{rec.origin}_{rec.rank_j}.png"
            save_image(rec.patch, os.path.join(patch_dir, name))
            instances.append(Instance(bag.bag_id, rec.rank_j, bag.label, name, rec.origin, bag.split))
    out = DatasetManifest(bags=list(manifest.bags), instances=instances, seed=manifest.seed,
                          k=patch_policy.k, l=patch_policy.l, ratios=manifest.ratios)
    out.check()
    return out


def balance_audit(manifest: DatasetManifest) -> dict:
    """Count train instances and check them against the balancing rule."""
    train_bags = manifest.bags_in("train")
    n_pos = sum(b.label == POSITIVE for b in train_bags)
    n_neg = len(train_bags) - n_pos
    inst = manifest.instances_in("train")
    index = manifest._index()
    neg_origins_random = all(i.origin == RANDOM for i in inst if index[i.bag_id].label == NEGATIVE)
    expected = POSITIVE_TRAIN_PATCHES * n_pos + NEGATIVE_TRAIN_PATCHES * n_neg
    return {
        "positive_bags": n_pos,
        "negative_bags": n_neg,
        "instances": len(inst),
        "expected_instances": expected,
        "negatives_random": neg_origins_random,
        "ok": len(inst) == expected and neg_origins_random,
    }
