"""Data model, ingestion, and synthetic generator tests."""

import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opfrelax.netmodel import (
    Block,
    Bus,
    Buyer,
    Line,
    MarketInstance,
    Network,
    Seller,
    ValidationError,
    generate_synthetic_instance,
    instance_from_dict,
    instance_to_dict,
    line_admittance,
    load_instance,
    save_instance,
)


def two_bus_doc():
    return {
        "buses": [
            {"id": "a", "v_min": 0.95, "v_max": 1.05},
            {"id": "b", "v_min": 0.95, "v_max": 1.05},
        ],
        "lines": [{"from": "a", "to": "b", "r": 0.01, "x": 0.1, "i_max": 2.0}],
        "ref_bus": "a",
        "periods": 1,
        "buyers": [
            {
                "bus": "b",
                "p_min": 0.0,
                "p_max": 1.0,
                "q_min": 0.0,
                "q_max": 0.3,
                "blocks": [[{"size": 1.0, "price": 30.0}]],
            }
        ],
        "sellers": [
            {
                "bus": "a",
                "p_min": 0.0,
                "p_max": 1.0,
                "q_min": -0.5,
                "q_max": 0.5,
                "blocks": [[{"size": 1.0, "price": 10.0}]],
                "no_load_cost": 2.0,
                "min_uptime": 1,
            }
        ],
    }


class TestLineAdmittance:
    def test_purely_reactive(self):
        g, b = line_admittance(0.0, 0.1)
        assert g == pytest.approx(0.0, abs=1e-12)
        assert b == pytest.approx(-10.0, abs=1e-9)

    def test_purely_resistive(self):
        g, b = line_admittance(1.0, 0.0)
        assert (g, b) == pytest.approx((1.0, 0.0), abs=1e-12)

    def test_hand_evaluated_reciprocal(self):
        # 1 / (0.01 + 0.1j) evaluated by hand: denom = 1.01e-2
        g, b = line_admittance(0.01, 0.1)
        assert g == pytest.approx(0.01 / 0.0101, abs=1e-9)
        assert b == pytest.approx(-0.1 / 0.0101, abs=1e-9)

    def test_zero_impedance_rejected(self):
        with pytest.raises(ValidationError):
            line_admittance(0.0, 0.0)

    @given(st.floats(0.0, 1.0), st.floats(-1.0, 1.0))
    @settings(max_examples=300, deadline=None)
    def test_product_with_impedance_is_one(self, r, x):
        if r * r + x * x < 1e-6:
            return
        g, b = line_admittance(r, x)
        y = complex(g, b) * complex(r, x)
        assert abs(y - 1.0) < 1e-9


class TestValidation:
    def test_minimal_two_bus_instance(self):
        inst = instance_from_dict(two_bus_doc())
        assert inst.network.n_buses == 2
        assert len(inst.network.lines) == 1

    def test_line_referencing_unknown_bus(self):
        doc = two_bus_doc()
        doc["lines"][0]["to"] = "zzz"
        with pytest.raises(ValidationError, match="unknown bus"):
            instance_from_dict(doc)

    def test_disconnected_graph(self):
        doc = two_bus_doc()
        doc["buses"].append({"id": "c", "v_min": 0.9, "v_max": 1.1})
        with pytest.raises(ValidationError, match="not connected"):
            instance_from_dict(doc)

    def test_missing_ref_bus(self):
        doc = two_bus_doc()
        doc["ref_bus"] = "nope"
        with pytest.raises(ValidationError, match="reference bus"):
            instance_from_dict(doc)

    def test_negative_block_size(self):
        doc = two_bus_doc()
        doc["buyers"][0]["blocks"][0][0]["size"] = -1.0
        with pytest.raises(ValidationError, match="block size"):
            instance_from_dict(doc)

    def test_duplicate_undirected_line(self):
        doc = two_bus_doc()
        doc["lines"].append({"from": "b", "to": "a", "g": 1.0, "b": -5.0, "i_max": 1.0})
        with pytest.raises(ValidationError, match="more than once"):
            instance_from_dict(doc)

    def test_voltage_bounds_ordering(self):
        with pytest.raises(ValidationError):
            Bus("a", 1.1, 0.9)
        with pytest.raises(ValidationError):
            Bus("a", 0.0, 1.0)

    def test_self_loop_rejected(self):
        with pytest.raises(ValidationError):
            Line("a", "a", 1.0, 0.0, 1.0)

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ValidationError, match="cannot parse"):
            load_instance(path)

    def test_needs_buyer_and_seller(self):
        doc = two_bus_doc()
        doc["sellers"] = []
        with pytest.raises(ValidationError, match="no sellers"):
            instance_from_dict(doc)


class TestRoundTrip:
    def test_file_round_trip(self, tmp_path):
        inst = instance_from_dict(two_bus_doc())
        path = tmp_path / "inst.json"
        save_instance(inst, path)
        again = load_instance(path)
        assert again == inst

    @pytest.mark.parametrize("seed", [0, 1, 7])
    def test_generated_round_trip(self, tmp_path, seed):
        inst = generate_synthetic_instance(12, seed)
        path = tmp_path / "gen.json"
        save_instance(inst, path)
        assert load_instance(path) == inst

    def test_dict_round_trip_via_json_text(self):
        inst = generate_synthetic_instance(9, 3, periods=2)
        text = json.dumps(instance_to_dict(inst))
        assert instance_from_dict(json.loads(text)) == inst


class TestSyntheticGenerator:
    def test_edge_count_formula(self):
        # n - 1 + ceil(0.35 n); near the 841/617 density of the target network
        inst = generate_synthetic_instance(617, 7)
        expected = 617 - 1 + math.ceil(0.35 * 617)
        assert expected == 832
        assert len(inst.network.lines) == expected
        assert abs(len(inst.network.lines) / 617 - 841 / 617) / (841 / 617) < 0.02

    def test_two_bus_single_line(self):
        inst = generate_synthetic_instance(2, 0)
        assert len(inst.network.lines) == 1

    def test_determinism_byte_identical(self):
        a = json.dumps(instance_to_dict(generate_synthetic_instance(40, 5)))
        b = json.dumps(instance_to_dict(generate_synthetic_instance(40, 5)))
        assert a == b

    @pytest.mark.parametrize("seed", range(8))
    def test_connected_and_viable(self, seed):
        inst = generate_synthetic_instance(10 + seed, seed)
        # Network.__post_init__ BFS-checks connectivity; re-check here anyway
        net = inst.network
        seen = {net.buses[0].id}
        stack = [net.buses[0].id]
        while stack:
            v = stack.pop()
            for w in net.neighbors[v]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        assert len(seen) == net.n_buses
        assert inst.buyers and inst.sellers

    def test_rejects_tiny(self):
        with pytest.raises(ValidationError):
            generate_synthetic_instance(1, 0)

    def test_full_scale_counts_shape(self):
        inst = generate_synthetic_instance(617, 0)
        assert inst.network.n_buses == 617
        # ~15% sellers / ~65% buyers of 617, loose band
        assert 50 <= len(inst.sellers) <= 140
        assert 330 <= len(inst.buyers) <= 470


def test_directed_lines_both_orientations():
    inst = instance_from_dict(two_bus_doc())
    pairs = [(v, w) for v, w, _ in inst.network.directed_lines()]
    assert ("a", "b") in pairs and ("b", "a") in pairs
    assert len(pairs) == 2
