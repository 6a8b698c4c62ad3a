import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from camid import cnn, pipeline, svm
from camid.imageio import write_ppm
from camid.pipeline import ImagePrediction, ImageRecord, Manifest, SplitSpec, split_dataset


def _toy(models=2, instances=2, scenes=4, shots=1):
    recs = [ImageRecord(f"{m}_{i}_{s}_{k}.ppm", f"m{m}", f"m{m}-{i}", f"s{s:02d}")
            for m in range(models) for i in range(instances) for s in range(scenes) for k in range(shots)]
    return Manifest(recs)


def test_toy_split_by_hand():
    man = _toy()
    assert len(man) == 16
    sp = split_dataset(man, SplitSpec(1, 1, seed=0))
    (es,), (vs,) = sp.eval_scenes, sp.val_scenes
    held = sp.held_out
    expect_eval = {r.path for r in man if r.scene == es and r.instance == held[r.model]}
    expect_val = {r.path for r in man if r.scene == vs and r.instance != held[r.model]}
    expect_train = {r.path for r in man
                    if r.scene not in (es, vs) and r.instance != held[r.model]}
    assert {r.path for r in sp.eval} == expect_eval and len(expect_eval) == 2
    assert {r.path for r in sp.val} == expect_val and len(expect_val) == 2
    assert {r.path for r in sp.train} == expect_train and len(expect_train) == 4
    assert pipeline.check_disjoint(sp)


def test_split_is_seeded():
    man = _toy(3, 3, 10)
    a = split_dataset(man, SplitSpec(2, 2, seed=4))
    b = split_dataset(man, SplitSpec(2, 2, seed=4))
    assert a.eval.records == b.eval.records and a.train.records == b.train.records


def test_dresden_shaped_split():
    man = _toy(3, 2, 83)
    sp = split_dataset(man, SplitSpec(11, 10, seed=1))
    assert len(sp.eval_scenes) == 11 and len(sp.val_scenes) == 10
    assert len({r.scene for r in sp.train}) == 62
    assert len(sp.eval) == 3 * 11


def test_split_rejects_single_instance_model():
    recs = [ImageRecord(f"a{s}", "solo", "solo-0", f"s{s}") for s in range(6)]
    recs += [ImageRecord(f"b{i}{s}", "duo", f"duo-{i}", f"s{s}") for i in range(2) for s in range(6)]
    with pytest.raises(ValueError, match="'solo'"):
        split_dataset(Manifest(recs), SplitSpec(1, 1))


def test_split_rejects_too_few_scenes():
    with pytest.raises(ValueError):
        split_dataset(_toy(scenes=4), SplitSpec(2, 2))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5), st.integers(2, 4), st.integers(4, 14), st.integers(1, 2), st.integers(0, 2**31 - 1),
       st.data())
def test_split_never_leaks(models, instances, scenes, shots, seed, data):
    man = _toy(models, instances, scenes, shots)
    n_eval = data.draw(st.integers(1, scenes - 3))
    n_val = data.draw(st.integers(1, scenes - 1 - n_eval))
    sp = split_dataset(man, SplitSpec(n_eval, n_val, seed))
    fit = sp.train.records + sp.val.records
    assert not {r.scene for r in sp.eval} & {r.scene for r in fit}
    assert not {(r.model, r.instance) for r in sp.eval} & {(r.model, r.instance) for r in fit}
    assert not {r.scene for r in sp.train} & {r.scene for r in sp.val}
    assert pipeline.check_disjoint(sp)
    assert len(sp.eval) == models * n_eval * shots


def test_manifest_round_trip_and_validation(tmp_path):
    man = _toy()
    man.root = tmp_path
    (tmp_path / "sub").mkdir()
    man.write(tmp_path / "sub" / "m.csv")
    back = Manifest.read(tmp_path / "sub" / "m.csv")
    assert [back.resolve(r).resolve() for r in back] == [(tmp_path / r.path).resolve() for r in man]
    assert back.labels == ["m0", "m1"]
    (tmp_path / "bad.csv").write_text("file,label\n")
    with pytest.raises(ValueError, match="header"):
        Manifest.read(tmp_path / "bad.csv")
    with pytest.raises(ValueError, match="duplicate"):
        Manifest([ImageRecord("a", "x", "x-0", "s"), ImageRecord("a", "x", "x-1", "s")])
    with pytest.raises(ValueError, match="label table"):
        Manifest([ImageRecord("a", "x", "x-0", "s")], labels=["y"])


# ---------------------------------------------------------------- voting

def _votes(*rows):
    return np.array(rows, dtype=np.int64)


def test_majority_vote_rules():
    assert pipeline.majority_vote([0, 0, 1], _votes([1, 0], [1, 0], [0, 1]), 2)[0] == 0
    # two-two split broken by summed OvO votes
    labels = [0, 0, 1, 1]
    votes = _votes([15, 5], [10, 10], [8, 12], [7, 13])
    votes[:, 0] = [10, 10, 10, 10]
    votes[:, 1] = [9, 9, 10, 10]
    label, tally = pipeline.majority_vote(labels, votes, 2)
    assert list(tally) == [40, 38] and label == 0
    # full tie falls to the smaller label
    assert pipeline.majority_vote([1, 0], _votes([0, 1], [1, 0]), 2)[0] == 0


def test_k1_equals_first_patch():
    pred = ImagePrediction(np.array([2, 0, 0]), _votes([0, 1, 2], [2, 1, 0], [2, 0, 1]))
    assert pred.vote(1)[0] == 2
    assert pred.vote()[0] == 0
    assert ImagePrediction(np.empty(0, np.int64), np.empty((0, 3), np.int64)).vote()[0] is None


def test_confusion_counts():
    preds = [ImagePrediction(np.array([t] * 3), np.tile(np.eye(3, dtype=int)[t] * 2, (3, 1)), true_label=t)
             for t in (0, 1, 2, 2)]
    cm = pipeline.confusion(preds, ["a", "b", "c"])
    np.testing.assert_array_equal(cm.counts, np.diag([1, 1, 2]))
    assert cm.accuracy == 1.0
    np.testing.assert_allclose(cm.percentages(), 100 * np.eye(3))
    preds.append(ImagePrediction(np.empty(0, np.int64), np.empty((0, 3), np.int64), true_label=1))
    cm = pipeline.confusion(preds, ["a", "b", "c"])
    assert list(cm.counts.sum(axis=1) + cm.rejects) == [1, 2, 2]
    assert cm.accuracy == 0.8
    assert pipeline.confusion(preds, ["a", "b", "c"], exclude_rejects=True).accuracy == 1.0


def test_confusion_files(tmp_path):
    preds = [ImagePrediction(np.array([1]), _votes([0, 1]), true_label=0),
             ImagePrediction(np.array([1]), _votes([0, 1]), true_label=1)]
    cm = pipeline.confusion(preds, ["a", "b"])
    cm.write(tmp_path / "c.csv", tmp_path / "p.csv")
    assert (tmp_path / "c.csv").read_text() == "true\\pred,a,b,reject\na,0,1,0\nb,0,1,0\n"
    assert (tmp_path / "p.csv").read_text() == "true\\pred,a,b\na,0.00,100.00\nb,0.00,100.00\n"


# ---------------------------------------------------------------- end to end on a tiny model

@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    """Untrained small network plus a battery fitted on its own features of two colour classes."""
    root = tmp_path_factory.mktemp("tiny")
    rng = np.random.default_rng(0)
    model = cnn.build_network(2, seed=0, classes=["dark", "light"], widths=(4, 4, 4, 8), hidden=128)
    dark = rng.integers(40, 90, (20, 64, 64, 3)).astype(np.uint8)
    light = rng.integers(160, 210, (20, 64, 64, 3)).astype(np.uint8)
    model.mean_patch = np.full((64, 64, 3), 125, np.float32)
    x = cnn.extract_features(model, np.concatenate([dark, light]))
    y = np.repeat([0, 1], 20)
    battery = svm.train_ovo_battery(x, y, 1.0, model.classes)
    recs = []
    for i, (lab, lo, hi) in enumerate([("dark", 40, 90), ("light", 160, 210)] * 2):
        img = rng.integers(lo, hi, (192, 256, 3)).astype(np.uint8)
        write_ppm(root / f"{i}.ppm", img)
        recs.append(ImageRecord(f"{i}.ppm", lab, f"{lab}-0", "s0"))
    man = Manifest(recs, ["dark", "light"], root)
    return model, battery, man


def test_classify_and_evaluate(tiny):
    model, battery, man = tiny
    img = np.full((128, 128, 3), 60, np.uint8)
    res = pipeline.classify_image(img, model, battery, k=32)
    assert res.classified and res.label == 0
    assert len(res.patch_labels) == 4 and res.shortfall == 28
    assert res.tally.sum() == len(res.patch_labels) * 1
    cm = pipeline.evaluate(man, model, battery, k=32)
    assert cm.accuracy == 1.0 and cm.total == 4
    sat = pipeline.classify_image(np.full((128, 128, 3), 255, np.uint8), model, battery)
    assert not sat.classified and sat.shortfall == 32


def test_curve_uses_one_ranking(tiny):
    model, battery, man = tiny
    curve, preds = pipeline.accuracy_vs_patches(man, model, battery, [1, 2, 4, 12])
    assert [k for k, _ in curve] == [1, 2, 4, 12]
    ref = pipeline.predict_manifest(man, model, battery, 12)
    for a, b in zip(preds, ref):
        assert a.patch_labels.tobytes() == b.patch_labels.tobytes()
    single, _ = pipeline.accuracy_vs_patches(man, model, battery, [1])
    assert single[0][1] == pipeline.evaluate(man, model, battery, k=1).accuracy
    with pytest.raises(ValueError):
        pipeline.accuracy_vs_patches(man, model, battery, [4, 2])


def test_localization_map(tiny, tmp_path):
    model, battery, _ = tiny
    img = np.full((192, 256, 3), 60, np.uint8)
    img[:, 128:] = 190
    img[:64, :64] = 255
    grid = pipeline.localization_map(img, model, battery)
    assert grid.shape == (3, 4)
    assert grid[0, 0] == pipeline.REJECT
    assert np.all(grid[1:, :2] == 0) and np.all(grid[:, 2:] == 1)
    sat = pipeline.localization_map(np.full((128, 128, 3), 0, np.uint8), model, battery)
    assert np.all(sat == pipeline.REJECT)
    pipeline.write_label_map(grid, battery.classes, tmp_path / "m.pgm", tmp_path / "legend.csv")
    from camid.imageio import read_pgm
    plane = read_pgm(tmp_path / "m.pgm")
    assert plane[0, 0] == 255 and plane[2, 3] == 1
    assert (tmp_path / "legend.csv").read_text() == "value,label\n0,dark\n1,light\n255,reject\n"
    big = pipeline.localization_map(img, model, battery, block=128)
    # the central crop of the first block overlaps the saturated corner
    assert big.shape == (1, 2) and list(big[0]) == [pipeline.REJECT, 1]
    img[:64, :64] = 60
    assert list(pipeline.localization_map(img, model, battery, block=128)[0]) == [0, 1]
    with pytest.raises(ValueError):
        pipeline.localization_map(img, model, battery, block=32)


def test_collect_patches(tiny):
    _, _, man = tiny
    x, y, info = pipeline.collect_patches(man, 5)
    assert x.shape == (20, 64, 64, 3) and list(y) == [0] * 5 + [1] * 5 + [0] * 5 + [1] * 5
    assert info.shape == (20, 3) and list(np.unique(info[:, 0])) == [0, 1, 2, 3]
