import numpy as np
import pytest

from archfuzz.detector import (
    CrashEvent,
    DetectorConfig,
    DetectorError,
    Finding,
    chebyshev_distance,
    classify_outcomes,
    compare_traces,
    deduplicate,
    deduplicate_crashes,
    detect_bc,
    detect_fc,
    detect_lc,
    normalize_crash_message,
    vote_localize,
)
from archfuzz.trace import TraceBundle

F32 = np.float32


def chain_bundle(backend, values, *, lo=1.0, lg=None, outcome="ok", model="m0"):
    """input -> node1 -> node2 -> ... with given fc arrays; bc mirrors fc."""
    nodes = {0: {"kind": "input", "preds": []}}
    fc = {}
    bc = {0: np.zeros((1, 2), dtype=F32)}
    for i, v in enumerate(values, start=1):
        nodes[i] = {"kind": f"k{i}", "preds": [i - 1]}
        fc[i] = np.asarray(v, dtype=F32)
        bc[i] = np.asarray(v, dtype=F32)
    lg = np.zeros_like(fc[len(values)]) if lg is None else np.asarray(lg, dtype=F32)
    return TraceBundle(backend_id=backend, model_id=model, outcome=outcome,
                       nodes=nodes, fc=fc,
                       loss_output=np.array([lo], dtype=F32), loss_gradient=lg, bc=bc)


class TestChebyshev:
    def test_known_values(self):
        assert chebyshev_distance(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
        assert chebyshev_distance(np.array([1.0, 5.0]), np.array([2.0, 2.5])) == 2.5

    def test_nan_is_infinite(self):
        assert chebyshev_distance(np.array([np.nan]), np.array([1.0])) == np.inf
        assert chebyshev_distance(np.array([np.inf]), np.array([1.0])) == np.inf

    def test_shape_mismatch_is_infinite(self):
        assert chebyshev_distance(np.zeros(2), np.zeros(3)) == np.inf


class TestConfig:
    def test_defaults(self):
        cfg = DetectorConfig()
        assert cfg.threshold == 0.15
        assert cfg.epsilon == 1e-5

    def test_invariant(self):
        with pytest.raises(DetectorError):
            DetectorConfig(threshold=0.1, epsilon=0.1)
        with pytest.raises(DetectorError):
            DetectorConfig(epsilon=0.0)


class TestStagePredicates:
    def test_fc_flags_first_divergent_node_only(self):
        a = chain_bundle("naive", [[[0.0, 0.0]], [[0.0, 0.0]]])
        b = chain_bundle("reordered", [[[0.0, 0.0]], [[1.0, 1.0]]])
        found = detect_fc(a, b, DetectorConfig())
        assert [f.node_id for f in found] == [2]
        assert found[0].stage == "fc"
        assert found[0].layer_kind == "k2"

    def test_fc_gated_when_predecessor_differs(self):
        a = chain_bundle("naive", [[[0.0, 0.0]], [[0.0, 0.0]]])
        b = chain_bundle("reordered", [[[1.0, 1.0]], [[5.0, 5.0]]])
        found = detect_fc(a, b, DetectorConfig())
        assert [f.node_id for f in found] == [1]  # node 2's pred already differs

    def test_fc_first_layer_can_be_flagged(self):
        # the untraced source counts as agreeing
        a = chain_bundle("naive", [[[0.0, 0.0]]])
        b = chain_bundle("reordered", [[[9.0, 0.0]]])
        assert [f.node_id for f in detect_fc(a, b, DetectorConfig())] == [1]

    def test_lc_gated_on_sink_agreement(self):
        a = chain_bundle("naive", [[[0.0, 0.0]]], lo=1.0)
        b = chain_bundle("reordered", [[[1.0, 1.0]]], lo=9.0)
        assert detect_lc(a, b, DetectorConfig()) == []

    def test_lc_flags_loss_output_and_gradient(self):
        a = chain_bundle("naive", [[[0.0, 0.0]]], lo=1.0, lg=[[0.0, 0.0]])
        b = chain_bundle("reordered", [[[0.0, 0.0]]], lo=2.0, lg=[[1.0, 0.0]])
        found = detect_lc(a, b, DetectorConfig())
        assert len(found) == 2
        assert all(f.stage == "lc" and f.node_id is None for f in found)

    def test_lc_scale_guard(self):
        a = chain_bundle("naive", [[[0.0, 0.0]]], lo=1.0)
        b = chain_bundle("reordered", [[[0.0, 0.0]]], lo=6.0)
        assert detect_lc(a, b, DetectorConfig()) != []
        assert detect_lc(a, b, DetectorConfig(loss_scale=100.0)) == []

    def test_bc_flags_node_with_agreeing_successors(self):
        # gradients flow backward: node 1's successor in the graph is node 2
        a = chain_bundle("naive", [[[0.0, 0.0]], [[0.0, 0.0]]])
        b = chain_bundle("reordered", [[[0.0, 0.0]], [[0.0, 0.0]]])
        b.bc[1] = np.array([[1.0, 0.0]], dtype=F32)
        found = detect_bc(a, b, DetectorConfig())
        assert [f.node_id for f in found] == [1]
        assert found[0].stage == "bc"

    def test_bc_gated_on_loss_gradient(self):
        a = chain_bundle("naive", [[[0.0, 0.0]]], lg=[[0.0, 0.0]])
        b = chain_bundle("reordered", [[[0.0, 0.0]]], lg=[[5.0, 5.0]])
        b.bc[1] = np.array([[9.0, 9.0]], dtype=F32)
        assert detect_bc(a, b, DetectorConfig()) == []

    def test_non_ok_pairs_skipped(self):
        a = chain_bundle("naive", [[[0.0, 0.0]]], outcome="nan")
        b = chain_bundle("reordered", [[[5.0, 5.0]]])
        assert compare_traces(a, b) == []

    def test_model_mismatch_raises(self):
        a = chain_bundle("naive", [[[0.0, 0.0]]], model="m0")
        b = chain_bundle("reordered", [[[0.0, 0.0]]], model="m1")
        with pytest.raises(DetectorError):
            compare_traces(a, b)


class TestOutcomeClassification:
    def test_nan_event_needs_healthy_backend(self):
        bundles = [chain_bundle("a", [[[0.0]]], outcome="nan"),
                   chain_bundle("b", [[[0.0]]], outcome="nan")]
        nan_events, _ = classify_outcomes(bundles)
        assert nan_events == []

    def test_nan_event_records_backends(self):
        bundles = [chain_bundle("a", [[[0.0]]], outcome="nan"),
                   chain_bundle("b", [[[0.0]]])]
        bundles[0].first_nonfinite_node = 1
        nan_events, _ = classify_outcomes(bundles)
        assert len(nan_events) == 1
        assert nan_events[0].affected_backends == ("a",)
        assert nan_events[0].healthy_backends == ("b",)
        assert nan_events[0].first_nonfinite_node == 1

    def test_crash_event_normalized(self):
        bundles = [chain_bundle("a", [[[0.0]]]),
                   chain_bundle("b", [[[0.0]]], outcome="crash")]
        bundles[1].message = "Segfault at 0xdeadbeef in /usr/lib/libfoo.so.2"
        _, crashes = classify_outcomes(bundles)
        assert len(crashes) == 1
        assert "0xdeadbeef" not in crashes[0].normalized
        assert "<addr>" in crashes[0].normalized


class TestNormalizeMessage:
    def test_strips_variable_detail(self):
        a = normalize_crash_message("Error 42 at 0xabc in /tmp/x/run_17.py")
        b = normalize_crash_message("Error 99 at 0xdef in /tmp/y/run_23.py")
        assert a == b

    def test_keeps_last_line(self):
        msg = "Traceback (most recent call last):\n  ...\nValueError: bad shape"
        assert normalize_crash_message(msg) == "ValueError: bad shape"


class TestVoteAndDedup:
    def test_majority_vote_implicates_common_backend(self):
        f1 = Finding("fc", "m0", ("A", "B"), 1, "relu", 1.0)
        f2 = Finding("fc", "m0", ("A", "C"), 1, "relu", 1.0)
        votes = vote_localize([f1, f2], ["A", "B", "C"])
        assert votes[("m0", "fc", 1)] == "A"

    def test_single_pair_is_ambiguous(self):
        f1 = Finding("fc", "m0", ("A", "B"), 1, "relu", 1.0)
        assert vote_localize([f1], ["A", "B", "C"]) == {}

    def test_two_backends_no_vote(self):
        f1 = Finding("fc", "m0", ("A", "B"), 1, "relu", 1.0)
        assert vote_localize([f1], ["A", "B"]) == {}

    def test_dedup_keeps_max_distance(self):
        f1 = Finding("fc", "m0", ("A", "B"), 1, "relu", 1.0)
        f2 = Finding("fc", "m7", ("A", "B"), 4, "relu", 3.0)
        f3 = Finding("bc", "m7", ("A", "B"), 4, "relu", 0.5)
        out = deduplicate([f1, f2, f3])
        assert len(out) == 2
        fc = next(f for f in out if f.stage == "fc")
        assert fc.distance == 3.0

    def test_crash_dedup_by_normalized_message(self):
        e1 = CrashEvent("m0", "A", "boom at 0x1", normalize_crash_message("boom at 0x1"))
        e2 = CrashEvent("m5", "A", "boom at 0x2", normalize_crash_message("boom at 0x2"))
        assert len(deduplicate_crashes([e1, e2])) == 1
