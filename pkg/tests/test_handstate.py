from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hoseg import handstate as hs
from hoseg import nn
from hoseg.maskcore import LabelMap
from gradcheck import numeric_grad, rel_error

states = st.sampled_from(hs.STATES)


def _scene():
    c = np.zeros((6, 6), np.uint8)
    c[0, 0], c[0, 1], c[1, 0], c[1, 1], c[2, 2] = 1, 2, 3, 4, 5
    return np.zeros((6, 6, 3), np.uint8), LabelMap(c)


def test_channel_counts():
    img, lm = _scene()
    assert hs.build_state_input(img, "rgb").shape == (3, 6, 6)
    assert hs.build_state_input(img, "rgb+hand", lm).shape == (5, 6, 6)
    assert hs.build_state_input(img, "rgb+hand+object", lm).shape == (8, 6, 6)


def test_mask_channels_are_one_vs_rest():
    img, lm = _scene()
    x = hs.build_state_input(img, "rgb+hand+object", lm)
    for ch, cls in zip(range(3, 8), (1, 2, 3, 4, 5)):
        assert np.array_equal(x[ch], (lm.classes == cls).astype(np.float32))


def test_channel_violations():
    img, lm = _scene()
    with pytest.raises(ValueError):
        hs.build_state_input(img, "rgb+hand")
    with pytest.raises(ValueError):
        hs.build_state_input(img, "rgb", lm)
    with pytest.raises(ValueError):
        hs.build_state_input(img, "depth", lm)
    with pytest.raises(ValueError):
        hs.build_state_input(img, "rgb+hand", np.zeros((3, 6, 6)))
    with pytest.raises(ValueError):
        hs.build_state_input(img, "rgb+hand", np.full((2, 6, 6), 2.0))
    soft = hs.build_state_input(img, "rgb+hand", np.full((2, 6, 6), 0.3))
    assert soft.shape == (5, 6, 6) and hs.mask_source(np.zeros(1)) == "soft"
    assert hs.mask_source(lm) == "hard"


def test_hand_state_validation():
    assert hs.HandState("portable", "not-exist").indices == (0, 4)
    with pytest.raises(ValueError):
        hs.HandState("holding", "portable")


def test_metrics_examples():
    truth = [hs.HandState(s, s) for s in hs.STATES] * 4
    perfect = hs.state_metrics(truth, truth)
    assert perfect.left.accuracy == perfect.right.accuracy == 1.0 and perfect.left.f1 == 1.0
    const = hs.state_metrics([hs.HandState("portable", "portable")] * 20, truth)
    assert const.left.accuracy == const.right.accuracy == 0.2
    with pytest.raises(ValueError):
        hs.head_metrics(["bogus"], ["portable"])
    with pytest.raises(ValueError):
        hs.state_metrics(truth[:2], truth[:3])


@given(st.lists(st.tuples(states, states, states, states), min_size=1, max_size=30), st.randoms())
def test_metrics_properties(rows, rnd):
    pred = [hs.HandState(a, b) for a, b, _, _ in rows]
    truth = [hs.HandState(c, d) for _, _, c, d in rows]
    rep = hs.state_metrics(pred, truth)
    cm = rep.left.confusion
    seen = (cm.sum(0) + cm.sum(1)) > 0
    f1s = []
    for k in np.nonzero(seen)[0]:
        tp = cm[k, k]
        p = tp / cm[:, k].sum() if cm[:, k].sum() else 0.0
        r = tp / cm[k].sum() if cm[k].sum() else 0.0
        f1s.append(2 * p * r / (p + r) if p + r else 0.0)
    assert rep.left.f1 == pytest.approx(np.mean(f1s), abs=1e-12)
    order = list(range(len(rows)))
    rnd.shuffle(order)
    shuffled = hs.state_metrics([pred[i] for i in order], [truth[i] for i in order])
    assert shuffled.left.to_dict() == rep.left.to_dict() and shuffled.right.to_dict() == rep.right.to_dict()
    # right head ignores the left labels
    other = hs.state_metrics([hs.HandState("portable", p.right) for p in pred], truth)
    assert other.right.to_dict() == rep.right.to_dict()


def test_classifier_gradients():
    rng = np.random.default_rng(0)
    clf = hs.StateClassifier(5, hidden=3, dtype=np.float64)
    x = rng.standard_normal((2, 6, 6, 5))
    y = rng.integers(0, 5, (2, 2))

    def loss():
        left, right = clf.forward_train(x)
        return nn.cross_entropy(left, y[:, 0])[0] + nn.cross_entropy(right, y[:, 1])[0]

    left, right = clf.forward_train(x)
    grads = clf.backward(nn.cross_entropy(left, y[:, 0])[1], nn.cross_entropy(right, y[:, 1])[1])
    for g, p in zip(grads, clf.params):
        assert rel_error(g, numeric_grad(loss, p)) < 1e-5


def test_two_heads_five_scores():
    clf = hs.StateClassifier(8)
    left, right = clf(np.zeros((8, 10, 10), np.float32))
    assert left.shape == right.shape == (5,)


def test_memorizes_single_example():
    s = hs.make_state_samples(1, 0)
    res = hs.train_state_classifier(s, "rgb", hs.StateTrainConfig(epochs=30, lr=0.05))
    assert res.log[-1].left_accuracy == res.log[-1].right_accuracy == 1.0


def test_seeded_rerun_identical_logs(tmp_path):
    s = hs.make_state_samples(10, 0)
    cfg = hs.StateTrainConfig(epochs=2)
    a = hs.train_state_classifier(s, "rgb+hand", cfg)
    b = hs.train_state_classifier(s, "rgb+hand", cfg)
    assert a.log == b.log
    assert a.write_log(tmp_path / "a.csv").read_bytes() == b.write_log(tmp_path / "b.csv").read_bytes()


def test_masks_beat_rgb_on_toy_states():
    train, test = hs.make_state_samples(200, 0), hs.make_state_samples(100, 1)
    truth = [s.state for s in test]
    acc = {}
    for mode in ("rgb", "rgb+hand"):
        res = hs.train_state_classifier(train, mode, hs.StateTrainConfig(epochs=15))
        rep = hs.state_metrics(hs.predict_states(res.classifier, test, mode), truth)
        acc[mode] = (rep.left.accuracy + rep.right.accuracy) / 2
    assert acc["rgb+hand"] > acc["rgb"]
    assert acc["rgb+hand"] >= 0.9


def test_annotation_file_roundtrip(tmp_path):
    states = {"a": hs.HandState("portable", "no-contact"), "b": hs.HandState("not-exist", "self-contact")}
    p = hs.write_state_annotations(tmp_path / "s.txt", states)
    assert hs.read_state_annotations(p) == states
    (tmp_path / "bad.txt").write_text("a portable touching\n")
    with pytest.raises(ValueError, match="bad.txt:1"):
        hs.read_state_annotations(tmp_path / "bad.txt")
    (tmp_path / "dup.txt").write_text("a portable portable\na portable portable\n")
    with pytest.raises(ValueError, match="duplicate"):
        hs.read_state_annotations(tmp_path / "dup.txt")


def test_checkpoint_roundtrip(tmp_path):
    s = hs.make_state_samples(4, 0)
    res = hs.train_state_classifier(s, "rgb+hand", hs.StateTrainConfig(epochs=1))
    res.classifier.save(tmp_path / "c.npz", {"mode": "rgb+hand"})
    clf, header = hs.StateClassifier.load(tmp_path / "c.npz")
    assert header["mode"] == "rgb+hand"
    assert hs.predict_states(clf, s, "rgb+hand") == hs.predict_states(res.classifier, s, "rgb+hand")
