import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpq.bench import (
    PARTS,
    FlopsConfig,
    average_precision,
    count_flops,
    eval_map,
    map_from_detections,
    measure_latency,
    selection_frequency,
    write_flops,
    write_frequency,
)
from gpq.detector import Detection, DetectorModel, ModelConfig, Scene, SceneObject, generate_scenes
from gpq.fileio import read_csv

SMALL = ModelConfig(num_queries=6, embed_dim=8, value_dim=8, hidden_dim=16, heads=2, num_layers=2, frequencies=4,
                    grid=4)


def _model(cfg=SMALL, seed=0):
    return DetectorModel.init(cfg, np.random.default_rng(seed))


class TestFlops:
    def test_all_ones(self):
        # per layer: self 4+4+2+2+5, cross 2+2+2+2+5, kv 2+2, ffn 2+2, heads 2+2+2+8 (4 box outputs); embed 2+2
        rep = count_flops(FlopsConfig(1, 1, 1, 1, 1, 1, 1, 1, embed_in=1))
        assert rep.parts == {"query_embed": 4, "self_attention": 17, "cross_attention": 13, "kv_projection": 4,
                             "ffn": 4, "heads": 14}
        assert rep.total == 56

    def test_small_mixed(self):
        # Nq=2 Nk=3 E=Dv=4 h=8 H=2 C=2, embed_in=4
        rep = count_flops(FlopsConfig(2, 3, 4, 4, 8, 2, 1, 2, embed_in=4))
        assert rep.parts["self_attention"] == 128 + 128 + 32 + 32 + 40
        assert rep.parts["cross_attention"] == 64 + 64 + 48 + 48 + 60
        assert rep.parts["kv_projection"] == 192
        assert rep.parts["ffn"] == 256
        assert rep.parts["heads"] == 64 + 32 + 64 + 64
        assert rep.parts["query_embed"] == 128
        assert rep.total == 1444

    def test_layers_scale_everything_but_embedding(self):
        one = count_flops(FlopsConfig(2, 3, 4, 4, 8, 2, 1, 2, embed_in=4))
        three = count_flops(FlopsConfig(2, 3, 4, 4, 8, 2, 3, 2, embed_in=4))
        assert three.total == 3 * one.total - 2 * one.parts["query_embed"]

    def test_heads_only_touch_softmax(self):
        h1 = count_flops(FlopsConfig(4, 5, 8, 8, 16, 1, 1, 3))
        h4 = count_flops(FlopsConfig(4, 5, 8, 8, 16, 4, 1, 3))
        assert h4.total - h1.total == 5 * 3 * (4 * 4 + 4 * 5)

    def test_large_config_reduction(self):
        big = count_flops(FlopsConfig(900, 4224, 256, 256, 2048, 8, 6, 10))
        small = count_flops(FlopsConfig(300, 4224, 256, 256, 2048, 8, 6, 10))
        reduction = 1 - small.total / big.total
        assert 0.50 <= reduction <= 0.70

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            FlopsConfig(0, 1, 1, 1, 1, 1, 1, 1)

    def test_from_model_uses_alive_count(self):
        m = _model()
        m.bank.remove([0, 3])
        assert FlopsConfig.from_model(m).num_queries == 4

    def test_csv(self, tmp_path):
        rep = count_flops(FlopsConfig(2, 3, 4, 4, 8, 2, 1, 2, embed_in=4))
        header, rows = read_csv(write_flops(tmp_path / "f.csv", rep))
        assert header == ["submodule", "count"]
        assert [r[0] for r in rows] == [*PARTS, "total"]
        assert int(rows[-1][1]) == 1444


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.integers(1, 300), st.sampled_from([(8, 2), (16, 4), (32, 8)]), st.integers(1, 4))
def test_halving_queries(nq, nk, eh, layers):
    e, heads = eh
    full = count_flops(FlopsConfig(2 * nq, nk, e, e, 2 * e, heads, layers, 4)).parts
    half = count_flops(FlopsConfig(nq, nk, e, e, 2 * e, heads, layers, 4)).parts
    assert half["self_attention"] < full["self_attention"] / 2
    assert 2 * half["cross_attention"] == full["cross_attention"]
    assert 2 * half["ffn"] == full["ffn"]
    assert half["kv_projection"] == full["kv_projection"]


def _det(cls, x, y, score):
    return Detection(0, cls, score, (x, y, 0.1, 0.1))


def _scene(*objs):
    return Scene(0, tuple(SceneObject(c, (x, y), (0.1, 0.1)) for c, x, y in objs))


class TestMeanAP:
    def test_perfect(self):
        scenes = [_scene((0, 0.2, 0.2), (1, 0.8, 0.8)), _scene((1, 0.5, 0.5))]
        dets = [[_det(0, 0.2, 0.2, 1.0), _det(1, 0.8, 0.8, 1.0)], [_det(1, 0.5, 0.5, 1.0)]]
        assert map_from_detections(dets, scenes, 2).mean_ap == 1.0

    def test_nothing_above_floor(self):
        scenes = [_scene((0, 0.2, 0.2))]
        res = map_from_detections([[_det(0, 0.2, 0.2, 0.01)]], scenes, 2, score_floor=0.5)
        assert res.mean_ap == 0.0

    def test_hand_pr_curve(self):
        scene = _scene((0, 0.1, 0.1), (0, 0.5, 0.5), (0, 0.9, 0.9))
        dets = [_det(0, 0.1, 0.1, 0.9), _det(0, 0.3, 0.7, 0.8), _det(0, 0.5, 0.5, 0.7), _det(0, 0.9, 0.9, 0.6)]
        # precision 1, 1/2, 2/3, 3/4 at recall 1/3, 1/3, 2/3, 1: envelope 1 up to r=1/3, then 3/4
        expect = (34 * 1.0 + 67 * 0.75) / 101
        res = map_from_detections([dets], [scene], 4, thresholds=(0.1,))
        assert res.mean_ap == pytest.approx(expect, abs=1e-12)
        assert list(res.class_ap) == [0]

    def test_duplicate_detection_is_false_positive(self):
        scene = _scene((0, 0.5, 0.5))
        res = map_from_detections([[_det(0, 0.5, 0.5, 0.9), _det(0, 0.5, 0.5, 0.8)]], [scene], 2, thresholds=(0.1,))
        assert res.mean_ap == 1.0
        ap = average_precision([0.9, 0.8], [False, True], 1)
        assert ap == pytest.approx(0.5)

    def test_distance_threshold(self):
        scene = _scene((0, 0.5, 0.5))
        dets = [[_det(0, 0.58, 0.5, 0.9)]]
        assert map_from_detections(dets, [scene], 2, thresholds=(0.05,)).mean_ap == 0.0
        assert map_from_detections(dets, [scene], 2, thresholds=(0.1,)).mean_ap == 1.0

    def test_no_ground_truth(self):
        assert np.isnan(average_precision([0.5], [False], 0))

    def test_eval_on_model(self):
        m = _model()
        res = eval_map(m, generate_scenes(np.random.default_rng(0), 10))
        assert 0.0 <= res.mean_ap <= 1.0
        assert len(res.table) == 3 * len(res.class_ap)


class TestSelectionFrequency:
    def test_everything_selected(self):
        m = _model()
        counts = selection_frequency(m, generate_scenes(np.random.default_rng(0), 1), k=6 * 4)
        assert dict(counts) == {q: 4 for q in range(6)}

    def test_sum_and_order(self, tmp_path):
        m = _model()
        scenes = generate_scenes(np.random.default_rng(1), 20)
        counts = selection_frequency(m, scenes, k=5)
        assert sum(c for _, c in counts) == 100
        assert [c for _, c in counts] == sorted(c for _, c in counts)
        _, rows = read_csv(write_frequency(tmp_path / "f.csv", counts))
        assert [int(r[1]) for r in rows] == [c for _, c in counts]

    def test_duplicate_queries(self):
        m = _model()
        m.bank.ref_points.data[4] = m.bank.ref_points.data[1]
        scenes = generate_scenes(np.random.default_rng(2), 15)
        preds = [m.forward(s)[-1].scores.data for s in scenes]
        for s in preds:
            assert s[1].tobytes() == s[4].tobytes()
        counts = dict(selection_frequency(m, scenes, k=6 * 4))
        assert counts[1] == counts[4]
        # when k splits the tie, the lower index is kept, so counts can only differ that way
        k = 7
        counts = dict(selection_frequency(m, scenes, k=k))
        splits = 0
        for s in preds:
            flat = np.sort(s.ravel())[::-1]
            splits += sum(1 for c in range(4) if flat[k - 1] == s[1, c] and flat[k] == s[4, c])
        assert 0 <= counts[1] - counts[4] <= splits


class TestLatency:
    def test_stats(self):
        m = _model()
        stats = measure_latency(m, generate_scenes(np.random.default_rng(0), 2), trials=30)
        assert stats.trials == 30 and len(stats.samples_ms) == 30
        assert 0 < stats.median_ms <= stats.p90_ms

    def test_minimum_trials(self):
        with pytest.raises(ValueError):
            measure_latency(_model(), generate_scenes(np.random.default_rng(0), 1), trials=10)
        with pytest.raises(ValueError):
            measure_latency(_model(), generate_scenes(np.random.default_rng(0), 1), warmup=1)
