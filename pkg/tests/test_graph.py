import json
import random

import pytest

from swapsim.graph import (
    CycleError, GraphError, GraphSpec, NodeSpec, TensorDesc,
    bfs_depths, graph_from_obj, graph_to_obj, load_graph, save_graph,
    tensor_bytes, topo_order, validate_graph,
)
from swapsim.models import UNetParams, gen_unet3d


def chain_graph(ids=("a", "b", "c")):
    nodes = []
    tensors = []
    prev = None
    for nid in ids:
        inputs = (f"{prev}:0",) if prev else ()
        nodes.append(NodeSpec(id=nid, kind="conv", inputs=inputs, outputs=(f"{nid}:0",),
                              cost_units=1.0, scope=nid))
        tensors.append(TensorDesc(id=f"{nid}:0", producer=nid, shape=(4,), channels=1,
                                  elem_bytes=4, scope=nid))
        prev = nid
    return GraphSpec(nodes=tuple(nodes), tensors=tuple(tensors))


class TestValidate:
    def test_well_formed_chain_is_empty(self):
        assert validate_graph(chain_graph()) == []

    def test_cycle_edge_back_to_head(self):
        g = chain_graph()
        cyclic = GraphSpec(nodes=g.nodes, tensors=g.tensors,
                           control_edges=(("c", "a"),))
        report = validate_graph(cyclic)
        assert [v.code for v in report] == ["cycle"]

    def test_dangling_tensor(self):
        g = chain_graph()
        extra = NodeSpec(id="d", kind="conv", inputs=("ghost",), outputs=("d:0",))
        bad = GraphSpec(nodes=g.nodes + (extra,),
                        tensors=g.tensors + (TensorDesc("d:0", "d", (1,), 1, 4),))
        codes = {v.code for v in validate_graph(bad)}
        assert "dangling-tensor" in codes

    def test_duplicate_ids(self):
        g = chain_graph()
        dup = GraphSpec(nodes=g.nodes + (g.nodes[0],), tensors=g.tensors)
        codes = [v.code for v in validate_graph(dup)]
        assert "duplicate-node-id" in codes

    def test_negative_size(self):
        t = TensorDesc(id="x:0", producer="x", shape=(0,), channels=1, elem_bytes=4)
        n = NodeSpec(id="x", kind="conv", outputs=("x:0",))
        codes = {v.code for v in validate_graph(GraphSpec(nodes=(n,), tensors=(t,)))}
        assert "negative-size" in codes

    def test_io_node_with_cost(self):
        n = NodeSpec(id="s", kind="swap_out", inputs=(), outputs=(), cost_units=2.0,
                     phase="io")
        codes = {v.code for v in validate_graph(GraphSpec(nodes=(n,)))}
        assert "io-cost" in codes


class TestTopoOrder:
    def test_chain(self):
        assert topo_order(chain_graph()) == ["a", "b", "c"]

    def test_diamond_tie_breaks_lexicographically(self):
        nodes = (
            NodeSpec(id="a", kind="conv", outputs=("a:0",)),
            NodeSpec(id="b", kind="conv", inputs=("a:0",), outputs=("b:0",)),
            NodeSpec(id="c", kind="conv", inputs=("a:0",), outputs=("c:0",)),
            NodeSpec(id="d", kind="concat", inputs=("b:0", "c:0"), outputs=("d:0",)),
        )
        tensors = tuple(TensorDesc(f"{n.id}:0", n.id, (2,), 1, 4) for n in nodes)
        assert topo_order(GraphSpec(nodes=nodes, tensors=tensors)) == ["a", "b", "c", "d"]

    def test_empty_graph(self):
        assert topo_order(GraphSpec()) == []

    def test_cycle_names_a_member(self):
        g = chain_graph()
        cyclic = GraphSpec(nodes=g.nodes, tensors=g.tensors, control_edges=(("c", "a"),))
        with pytest.raises(CycleError) as exc:
            topo_order(cyclic)
        assert exc.value.member in {"a", "b", "c"}


class TestBfsDepths:
    def test_chain(self):
        assert bfs_depths(chain_graph()) == {"a": 0, "b": 1, "c": 2}

    def test_shortcut_gives_shallow_depth(self):
        # a feeds z directly and through a long path: depth(z) = 1
        ids = ["a", "b", "c", "d"]
        nodes = []
        tensors = []
        prev = None
        for nid in ids:
            inputs = (f"{prev}:0",) if prev else ()
            nodes.append(NodeSpec(id=nid, kind="conv", inputs=inputs, outputs=(f"{nid}:0",)))
            tensors.append(TensorDesc(f"{nid}:0", nid, (2,), 1, 4))
            prev = nid
        nodes.append(NodeSpec(id="z", kind="concat", inputs=("a:0", "d:0"), outputs=("z:0",)))
        tensors.append(TensorDesc("z:0", "z", (4,), 1, 4))
        depths = bfs_depths(GraphSpec(nodes=tuple(nodes), tensors=tuple(tensors)))
        assert depths["z"] == 1

    def test_unet_first_synthesis_concat_is_shallow(self):
        # The shortcut edge makes the first synthesis concat at most one hop
        # deeper than its analysis level, so it sits above the deepest
        # analysis node -- the structural cause of shallow-synthesis selection.
        g = gen_unet3d(UNetParams(dims=(16, 16, 16), in_channels=1, base_filters=1,
                                  depth=3, convs_per_level=1))
        depths = bfs_depths(g)
        deepest_analysis = max(d for nid, d in depths.items() if nid.startswith("analysis/"))
        first_concat = depths["synthesis/l1/concat"]
        assert first_concat <= deepest_analysis

    def test_edge_property(self):
        g = gen_unet3d(UNetParams(dims=(8, 8, 8), in_channels=1, base_filters=1,
                                  depth=2, convs_per_level=1))
        depths = bfs_depths(g)
        for u, v in g.edges():
            assert depths[v] <= depths[u] + 1
        for n in g.nodes:
            if not n.inputs:
                assert depths[n.id] == 0


class TestTensorBytes:
    def test_full_volume(self):
        t = TensorDesc("x", "p", (192, 192, 192), 4, 4)
        assert tensor_bytes(t) == 113_246_208

    def test_single_element(self):
        assert tensor_bytes(TensorDesc("x", "p", (1, 1, 1), 1, 4)) == 4

    def test_patch_volume(self):
        assert tensor_bytes(TensorDesc("x", "p", (128, 128, 128), 1, 4)) == 8_388_608

    def test_overflow_guard(self):
        t = TensorDesc("x", "p", (2**40, 2**40), 1, 8)
        with pytest.raises(GraphError, match="overflow"):
            tensor_bytes(t)


class TestGraphIO:
    def test_round_trip_identity(self, tmp_path):
        g = chain_graph()
        path = tmp_path / "g.json"
        save_graph(g, path)
        assert load_graph(path) == g

    def test_save_is_idempotent(self, tmp_path):
        g = gen_unet3d(UNetParams(dims=(8, 8, 8), in_channels=1, base_filters=1,
                                  depth=2, convs_per_level=1))
        p1 = tmp_path / "one.json"
        p2 = tmp_path / "two.json"
        save_graph(g, p1)
        save_graph(load_graph(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_unknown_kind_named_in_error(self, tmp_path):
        obj = graph_to_obj(chain_graph())
        obj["nodes"][0]["kind"] = "warp"
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(obj))
        with pytest.raises(GraphError, match="warp"):
            load_graph(path)

    def test_version_mismatch(self, tmp_path):
        obj = graph_to_obj(chain_graph())
        obj["version"] = 99
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(obj))
        with pytest.raises(GraphError, match="version"):
            load_graph(path)

    def test_malformed_file_reports_position(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"version": 1,\n  "nodes": [}\n')
        with pytest.raises(GraphError, match="line"):
            load_graph(path)


def random_dag(rng):
    n = rng.randint(1, 12)
    nodes = []
    tensors = []
    for i in range(n):
        tid = f"t{i:02d}"
        if i and rng.random() < 0.8:
            k = rng.randint(1, min(2, i))
            inputs = tuple(f"t{j:02d}" for j in sorted(rng.sample(range(i), k)))
        else:
            inputs = ()
        kind = "concat" if len(inputs) == 2 else "conv"
        nodes.append(NodeSpec(id=f"n{i:02d}", kind=kind, inputs=inputs, outputs=(tid,),
                              cost_units=float(rng.randint(0, 9))))
        tensors.append(TensorDesc(tid, f"n{i:02d}", (rng.randint(1, 8),), 1, 4))
    return GraphSpec(nodes=tuple(nodes), tensors=tuple(tensors))


class TestProperties:
    def test_topo_is_edge_respecting_permutation(self):
        rng = random.Random(7)
        for _ in range(50):
            g = random_dag(rng)
            order = topo_order(g)
            assert sorted(order) == sorted(n.id for n in g.nodes)
            pos = {nid: i for i, nid in enumerate(order)}
            for u, v in g.edges():
                assert pos[u] < pos[v]

    def test_round_trip_on_random_graphs(self):
        rng = random.Random(11)
        for _ in range(25):
            g = random_dag(rng)
            assert graph_from_obj(graph_to_obj(g)) == g

    def test_validate_empty_iff_topo_succeeds(self):
        rng = random.Random(5)
        for i in range(40):
            g = random_dag(rng)
            if i % 2 and len(g.nodes) >= 2:
                # corrupt: add a back control edge to force a cycle
                g = GraphSpec(nodes=g.nodes, tensors=g.tensors,
                              control_edges=((g.nodes[-1].id, g.nodes[0].id),))
            ok = not validate_graph(g)
            try:
                topo_order(g)
                assert ok
            except GraphError:
                assert not ok
