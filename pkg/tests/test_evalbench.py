from __future__ import annotations

import json

import numpy as np
import pytest

from hoseg import ccda, evalbench, toy
from hoseg.dataio import Sample
from hoseg.maskcore import BOUNDARY, LabelMap
from hoseg.segpipeline import TrainConfig


def _pair():
    t1 = np.zeros((4, 4), np.uint8)
    t1[0, :] = 1          # 4 px left hand
    t1[3, :2] = 3         # 2 px left object
    p1 = np.zeros((4, 4), np.uint8)
    p1[0, :3] = 1         # tp 3, fn 1
    p1[1, 0] = 1          # fp 1
    p1[3, 1:3] = 3        # tp 1, fp 1, fn 1
    t2 = np.zeros((4, 4), np.uint8)
    t2[:2, :2] = 2        # 4 px right hand
    p2 = np.zeros((4, 4), np.uint8)
    p2[:2, :] = 2         # tp 4, fp 4
    truth = [Sample("a", np.zeros((4, 4, 3), np.uint8), LabelMap(t1)),
             Sample("b", np.zeros((4, 4, 3), np.uint8), LabelMap(t2))]
    return {"a": LabelMap(p1), "b": LabelMap(p2)}, truth


def test_two_image_fixture_hand_counts():
    preds, truth = _pair()
    rep = evalbench.evaluate_run(preds, truth)
    got = {c: (m.tp, m.fp, m.fn) for c, m in rep.per_class.items()}
    assert got[1] == (3, 1, 1) and got[2] == (4, 4, 0) and got[3] == (1, 1, 1)
    assert rep.included == (1, 2, 3)
    assert rep.miou == pytest.approx((3 / 5 + 4 / 8 + 1 / 3) / 3, abs=1e-15)
    assert rep.mean("iou", (1, 2)) == pytest.approx((3 / 5 + 4 / 8) / 2)


def test_identity_and_all_background():
    _, truth = _pair()
    perfect = evalbench.evaluate_run({s.name: s.labels for s in truth}, truth)
    assert perfect.miou == perfect.mprec == perfect.mrec == perfect.mf1 == 1.0
    bg = evalbench.evaluate_run({s.name: LabelMap.empty(4, 4) for s in truth}, truth)
    assert all(bg.per_class[c].recall == 0 for c in bg.included)


def test_missing_prediction_scored_as_background():
    preds, truth = _pair()
    del preds["b"]
    rep = evalbench.evaluate_run(preds, truth)
    assert rep.metadata["missing"] == ["b"]
    assert (rep.per_class[2].tp, rep.per_class[2].fn) == (0, 4)


def test_permutation_invariance_and_self_consistency():
    preds, truth = _pair()
    a = evalbench.evaluate_run(preds, truth)
    b = evalbench.evaluate_run(preds, truth[::-1])
    assert a.per_class == b.per_class and a.miou == b.miou
    assert a.miou == np.mean([a.per_class[c].iou for c in a.included])


def test_boundary_scored_separately():
    s = toy.make_samples(3, 4, size=16)
    preds = {x.name: (x.labels, x.boundary) for x in s}
    rep = evalbench.evaluate_run(preds, s)
    assert rep.per_class[BOUNDARY].iou == 1.0
    assert BOUNDARY not in rep.included
    assert "boundary" in rep.to_dict()["per_class"]


def test_report_files_and_table(tmp_path):
    preds, truth = _pair()
    rep = evalbench.evaluate_run(preds, truth, metadata={"seed": 0})
    out = evalbench.write_report(rep, tmp_path / "r", {"a": 1})
    data = json.loads((out / "report.json").read_text())
    assert data["means"]["mIoU"] == rep.miou
    table = (out / "report.txt").read_text().splitlines()
    assert table[0].split()[:3] == ["Cell", "L-Hand", "R-Hand"] and len(table) == 2
    assert evalbench.run_id({"a": 1}, 0, "d") == evalbench.run_id({"a": 1}, 0, "d")
    assert evalbench.run_id({"a": 1}, 0, "d") != evalbench.run_id({"a": 1}, 1, "d")


def test_plan_structure():
    plan = evalbench.AblationPlan.default()
    assert [c.name for c in plan.cells] == [
        "Para. Decode", "Para. Decode + CCDA", "Seq. Decode", "Seq. Decode + CCDA",
        "Seq. Decode + CB", "Seq. Decode + CB + CCDA"]
    assert evalbench.AblationCell("sequential").object_in_channels == 5
    assert evalbench.AblationCell("sequential", cb=True).object_in_channels == 6
    assert len(evalbench.AblationPlan.grid().cells) == 6
    with pytest.raises(ValueError):
        evalbench.AblationCell("parallel", cb=True)


CFG = TrainConfig(iterations=4, batch_size=2, hidden=4, flip=False, boundary_radius=1)


def _data(n_aug=0):
    train = toy.make_samples(6, 0, size=16)
    test = toy.make_samples(3, 1, size=16)
    return evalbench.AblationData(train, test, toy.make_samples(n_aug, 2, size=16, prefix="aug"), "toy")


def test_ablation_one_cell_and_duplicates():
    plan = evalbench.AblationPlan([evalbench.AblationCell("sequential", cb=True)] * 2)
    table = evalbench.run_ablation(plan, _data(), CFG)
    assert len(table.rows) == 2
    a, b = (r.report for r in table.rows)
    assert a.to_dict() == b.to_dict()


def test_ablation_records_failures(tmp_path):
    table = evalbench.run_ablation(evalbench.AblationPlan.default(), _data(), CFG)
    assert len(table.rows) == 6
    errors = [r.cell.name for r in table.rows if r.error]
    assert errors == ["Para. Decode + CCDA", "Seq. Decode + CCDA", "Seq. Decode + CB + CCDA"]
    assert {r.report.metadata["seed"] for r in table.rows if r.report} == {0}
    out = table.write(tmp_path)
    assert "failed" in (out / "ablation.txt").read_text()
    with pytest.raises(ValueError):
        evalbench.run_ablation(evalbench.AblationPlan.default(), evalbench.AblationData([], []), CFG)


def test_sweep_points(tmp_path):
    data = _data()
    e = ccda.HistogramEmbedder()
    pool = ccda.build_background_pool(toy.make_backgrounds(4, 3, size=16), ccda.no_hands, ccda.mean_fill,
                                      data.train, e)
    points = evalbench.sweep_augmentation_quantity([0, 2, 4], data, pool, CFG, k=2, embedder=e,
                                                   inpainter=ccda.mean_fill)
    assert [p.n_total for p in points] == [0, 2, 4] and all(p.error is None for p in points)
    base = evalbench.run_cell(evalbench.AblationCell("sequential", cb=True), data, CFG)
    assert points[0].hand_iou == evalbench.group_iou(base, (1, 2))
    csv = evalbench.write_curve(points, tmp_path / "c.csv").read_text().splitlines()
    assert csv[0] == "n_total,hand_iou,object_iou,error" and len(csv) == 4
    assert "peaks" in evalbench.describe_curve(points)
    with pytest.raises(ValueError):
        evalbench.sweep_augmentation_quantity([4, 2], data, pool, CFG)
