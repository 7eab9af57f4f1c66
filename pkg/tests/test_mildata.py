import json

import numpy as np
import pytest

from tinymil.mildata import (
    Bag,
    DatasetManifest,
    balance_audit,
    build_instance_dataset,
    load_directory,
    split_bags,
    split_counts,
)
from tinymil.patcher import PatchPolicy
from tinymil.raster import save_image
from tinymil.saliency import SaliencyMap


def _bags(n_pos, n_neg):
    return ([Bag(f"p{i}", f"positive/p{i}.png", "positive") for i in range(n_pos)]
            + [Bag(f"n{i}", f"negative/n{i}.png", "negative") for i in range(n_neg)])


def _counts(manifest, label):
    return tuple(sum(b.label == label and b.split == s for b in manifest.bags) for s in ("train", "val", "test"))


def test_split_exact_division():
    m = split_bags(_bags(10, 10), (0.6, 0.2, 0.2), seed=0)
    assert _counts(m, "positive") == (6, 2, 2)
    assert _counts(m, "negative") == (6, 2, 2)


def test_split_all_train():
    m = split_bags(_bags(3, 4), (1, 0, 0), seed=0)
    assert all(b.split == "train" for b in m.bags)


def test_split_remainder_goes_to_train():
    # floor(4.2)=4, floor(1.4)=1, floor(1.4)=1, remainder 1 -> train
    assert split_counts(7, (0.6, 0.2, 0.2)) == (5, 1, 1)
    m = split_bags(_bags(7, 1), (0.6, 0.2, 0.2), seed=3)
    assert _counts(m, "positive") == (5, 1, 1)


def test_split_partition_and_determinism():
    bags = _bags(23, 17)
    a = split_bags(bags, (0.6, 0.2, 0.2), seed=11)
    b = split_bags(bags, (0.6, 0.2, 0.2), seed=11)
    c = split_bags(bags, (0.6, 0.2, 0.2), seed=12)
    assert [x.split for x in a.bags] == [x.split for x in b.bags]
    assert [x.split for x in a.bags] != [x.split for x in c.bags]
    assert sorted(x.bag_id for x in a.bags) == sorted(x.bag_id for x in bags)
    assert all(x.split in ("train", "val", "test") for x in a.bags)
    for label, n in (("positive", 23), ("negative", 17)):
        counts = _counts(a, label)
        for got, ratio in zip(counts[1:], (0.2, 0.2)):
            assert abs(got - n * ratio) <= 1


def test_split_rejects_bad_ratios_and_empty_class():
    with pytest.raises(ValueError):
        split_bags(_bags(2, 2), (0.5, 0.2, 0.2))
    with pytest.raises(ValueError):
        split_bags(_bags(3, 0), (0.6, 0.2, 0.2))


def test_duplicate_bag_ids_rejected():
    with pytest.raises(ValueError):
        DatasetManifest(bags=[Bag("a", "x", "positive"), Bag("a", "y", "negative")])


def _dataset(tmp_path, splits):
    """Write one 32x32 image per (bag_id, label, split) and return a manifest."""
    rng = np.random.default_rng(0)
    bags = []
    for bag_id, label, split in splits:
        rel = f"{label}/{bag_id}.png"
        (tmp_path / label).mkdir(exist_ok=True)
        save_image(rng.random((32, 32, 1)), tmp_path / rel)
        bags.append(Bag(bag_id, rel, label, split))
    return DatasetManifest(bags=bags, seed=5)


def _saliency(manifest):
    rng = np.random.default_rng(1)
    return {b.bag_id: SaliencyMap(rng.random((32, 32)), image_id=b.bag_id) for b in manifest.bags}


def test_train_instance_counts(tmp_path):
    spec = [(f"p{i}", "positive", "train") for i in range(3)] + [(f"n{i}", "negative", "train") for i in range(2)]
    m = _dataset(tmp_path, spec)
    built = build_instance_dataset(m, PatchPolicy(k=5, l=8), _saliency(m), tmp_path, tmp_path / "patches")
    assert len(built.instances) == 3 * 2 + 2 * 5 == 16
    for inst in built.instances:
        bag = built.bag(inst.bag_id)
        assert inst.label == bag.label
        if bag.label == "negative":
            assert inst.origin == "random"
        else:
            assert inst.origin == "salimap" and inst.rank_j in (1, 2)
        assert (tmp_path / "patches" / inst.patch_path).exists()
    assert balance_audit(built)["ok"]


def test_val_bags_get_k_ranked_instances(tmp_path):
    spec = [("p0", "positive", "val"), ("p1", "positive", "test"), ("n0", "negative", "val"), ("n1", "negative", "val")]
    m = _dataset(tmp_path, spec)
    built = build_instance_dataset(m, PatchPolicy(k=5, l=8), _saliency(m), tmp_path, tmp_path / "patches")
    assert len(built.instances_in("val")) == 15
    assert len(built.instances) == 20
    for bag_id in ("p0", "p1", "n0", "n1"):
        ranks = sorted(i.rank_j for i in built.instances if i.bag_id == bag_id)
        assert ranks == [1, 2, 3, 4, 5]
    assert all(i.origin == "salimap" for i in built.instances)


def test_missing_saliency_names_bag(tmp_path):
    m = _dataset(tmp_path, [("p0", "positive", "train"), ("n0", "negative", "train")])
    with pytest.raises(ValueError, match="p0"):
        build_instance_dataset(m, PatchPolicy(k=5, l=8), {}, tmp_path, tmp_path / "patches")


def test_rebuild_is_byte_identical(tmp_path):
    spec = [("p0", "positive", "train"), ("n0", "negative", "train"), ("p1", "positive", "val")]
    m = _dataset(tmp_path, spec)
    sal = _saliency(m)
    for name in ("a", "b"):
        build_instance_dataset(m, PatchPolicy(k=5, l=8), sal, tmp_path, tmp_path / f"patches_{name}") \
            .save(tmp_path / f"{name}.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    for p in (tmp_path / "patches_a").iterdir():
        assert p.read_bytes() == (tmp_path / "patches_b" / p.name).read_bytes()


def test_manifest_json_schema_round_trip(tmp_path):
    m = split_bags(_bags(5, 5), seed=2)
    m.save(tmp_path / "m.json")
    raw = json.loads((tmp_path / "m.json").read_text())
    assert set(raw) == {"seed", "k", "l", "ratios", "bags", "instances"}
    back = DatasetManifest.load(tmp_path / "m.json")
    assert back.to_dict() == m.to_dict()


def test_pseudo_label_check_catches_mismatch():
    from tinymil.mildata import Instance
    m = DatasetManifest(bags=[Bag("a", "x", "positive", "train")],
                        instances=[Instance("a", 1, "negative", "a.png")])
    with pytest.raises(ValueError):
        m.check()


def test_load_directory(tmp_path):
    for label, names in (("positive", ["b", "a"]), ("negative", ["c"])):
        (tmp_path / label).mkdir()
        for n in names:
            save_image(np.zeros((2, 2, 1)), tmp_path / label / f"{n}.png")
    bags = load_directory(tmp_path)
    assert [(b.bag_id, b.label, b.image_path) for b in bags] == [
        ("a", "positive", "positive/a.png"), ("b", "positive", "positive/b.png"),
        ("c", "negative", "negative/c.png")]


def test_load_directory_empty(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_directory(tmp_path)
