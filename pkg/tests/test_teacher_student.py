import json
import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pseudolabel.reliability import ReliabilityConfig
from pseudolabel.synthetic import NoiseModel, SyntheticDetector
from pseudolabel.teacher_student import (DetectorError, EngineConfig, SubprocessDetector,
                                         ema_update, losses_from_trace, report_to_dict,
                                         run_iteration, trace_from_dict, trace_to_dict)

from corpus import NOISY, scenes

CLEAN = NoiseModel(base_confidence=1.0)


def setup(n_unl=4, n_lab=2, noise=NOISY, seed=0):
    sc = scenes(n_unl + n_lab, seed)
    det = SyntheticDetector({k: gt for k, (_, gt) in sc.items()}, noise)
    items = list(sc.items())
    unl = [(k, r) for k, (r, _) in items[:n_unl]]
    lab = [(k, r, gt) for k, (r, gt) in items[n_unl:]]
    return det, lab, unl


def test_ema_examples():
    t, s = np.array([1.0, -2.0]), np.array([0.0, 4.0])
    assert np.array_equal(ema_update(t, s, 1.0), t)
    assert np.array_equal(ema_update(t, s, 0.0), s)
    assert ema_update([1.0], [0.0], 0.999)[0] == pytest.approx(0.999, abs=1e-15)
    with pytest.raises(ValueError):
        ema_update([1.0, 2.0], [1.0], 0.5)
    with pytest.raises(ValueError):
        ema_update([1.0], [1.0], 1.5)


@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6)), min_size=1,
                max_size=8), st.floats(0, 1))
@settings(max_examples=300, deadline=None)
def test_ema_is_convex_combination(vals, m):
    t = np.array([a for a, _ in vals])
    s = np.array([b for _, b in vals])
    out = ema_update(t, s, m)
    assert np.all(out >= np.minimum(t, s)) and np.all(out <= np.maximum(t, s))


def test_single_unlabeled_image_has_empty_plan():
    det, lab, unl = setup(n_unl=1)
    tr = run_iteration(lab, unl, det, EngineConfig(), 0, np.zeros(3), np.ones(3))
    assert tr.mix_plan.pastes == []
    assert tr.losses is not None


def test_zero_noise_iteration_is_exact():
    det, lab, unl = setup(noise=CLEAN)
    cfg = EngineConfig()
    for seed in range(5):
        tr = run_iteration(lab, unl, det, cfg, seed, np.zeros(3), np.ones(3), batch_id=seed)
        assert all(s.reliability == cfg.reliability.r_max for s in tr.scored)
        assert tr.losses.L_PLRW <= 1e-6 and tr.losses.L_CPRL <= 1e-9
        assert tr.losses.L_sup == 0.0
        assert tr.losses.n_plrw > 0


def test_same_seed_gives_identical_trace_bytes():
    det, lab, unl = setup()
    a = run_iteration(lab, unl, det, EngineConfig(), 3, np.zeros(3), np.ones(3))
    det2, lab2, unl2 = setup()
    b = run_iteration(lab2, unl2, det2, EngineConfig(), 3, np.zeros(3), np.ones(3))
    assert a.dumps() == b.dumps()
    c = run_iteration(lab, unl, det, EngineConfig(), 4, np.zeros(3), np.ones(3))
    assert a.dumps() != c.dumps()


def test_trace_replay_reproduces_losses():
    det, lab, unl = setup()
    cfg = EngineConfig()
    tr = run_iteration(lab, unl, det, cfg, 1, np.zeros(3), np.ones(3))
    back = trace_from_dict(json.loads(tr.dumps()))
    assert trace_to_dict(back) == trace_to_dict(tr)
    assert report_to_dict(losses_from_trace(back, cfg)) == report_to_dict(tr.losses)


def test_pipeline_threads_label_ids():
    det, lab, unl = setup()
    cfg = EngineConfig()
    tr = run_iteration(lab, unl, det, cfg, 2, np.zeros(3), np.ones(3))
    scored_ids = {s.label_id for s in tr.scored}
    assert set(tr.reliable_ids) <= scored_ids
    assert tr.mix_plan.target_image_id == unl[0][0]
    mixed = tr.student[0]
    assert mixed.image_id == f"{unl[0][0]}#mixed"
    for lab_ in mixed.labels:
        base = lab_.label_id.split("@")[0]
        assert base in tr.reliable_ids
    for p in tr.mix_plan.pastes:
        assert p.source_label_id in tr.reliable_ids
    paired = {p["teacher_label_id"] for p in tr.losses.pairs}
    student_ids = {lab_.label_id for st_ in tr.student for lab_ in st_.labels}
    assert paired <= student_ids


def test_gamma_above_max_reliability_gives_no_unsupervised_pairs():
    det, lab, unl = setup()
    cfg = EngineConfig(reliability=ReliabilityConfig(gamma_hat=0.99))
    tr = run_iteration(lab, unl, det, cfg, 0, np.zeros(3), np.ones(3))
    assert tr.reliable_ids == [] and tr.losses.n_plrw == 0
    assert tr.losses.L_PLRW == 0.0 and tr.losses.L_CPRL == 0.0


def test_teacher_params_follow_ema():
    det, lab, unl = setup()
    tr = run_iteration(lab, unl, det, EngineConfig(ema_momentum=0.5), 0, np.zeros(2),
                       np.full(2, 4.0))
    assert tr.teacher_params.tolist() == [2.0, 2.0]


def test_detector_failure_is_reported():
    class Broken:
        def predict(self, *a, **k):
            raise RuntimeError("boom")

    _, lab, unl = setup()
    with pytest.raises(DetectorError, match="boom"):
        run_iteration(lab, unl, Broken(), EngineConfig(), 0, np.zeros(1), np.zeros(1))


def test_empty_unlabeled_batch_rejected():
    det, lab, _ = setup()
    with pytest.raises(ValueError):
        run_iteration(lab, [], det, EngineConfig(), 0, np.zeros(1), np.zeros(1))


def test_subprocess_detector(tmp_path):
    script = tmp_path / "det.py"
    script.write_text(textwrap.dedent("""
        import json, sys
        for line in sys.stdin:
            req = json.loads(line)
            box = {"x1": 1.0, "y1": 2.0, "x2": 11.0, "y2": 12.0, "class_id": 0,
                   "score": 0.75}
            print(json.dumps({"image_id": req["image_id"], "view": req["view"],
                              "boxes": [box]}), flush=True)
    """))
    det = SubprocessDetector([sys.executable, str(script)])
    try:
        _, lab, unl = setup(n_unl=2, n_lab=0)
        tr = run_iteration([], unl, det, EngineConfig(), 0, np.zeros(2), np.zeros(2))
        assert len(tr.scored) == 2
        assert all(len(d.boxes) == 1 for d in tr.teacher_detections)
    finally:
        det.close()
