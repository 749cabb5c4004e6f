import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamvecchia.errors import MalformedGeometryError, TopologyError, ValidationError
from streamvecchia.network import (
    Flowline,
    StreamNetwork,
    build_network,
    extract_nodes,
    find_complex_confluences,
    largest_component,
    load_network,
    read_flowlines,
    remove_smallest_branch,
    save_network,
    write_flowlines_csv,
)
from streamvecchia.simulate import brute_afv

from .conftest import A, B, O, random_network, y_flowlines


def trident(attrs=(1.0, 2.0, 3.0), ids=(11, 12, 13)):
    # three single-reach branches meet at (0, 0) above reach 1
    fls = [Flowline(1, [(0, 0), (0, -1)], 1.0, 10.0)]
    for k, (rid, a) in enumerate(zip(ids, attrs)):
        fls.append(Flowline(rid, [(k - 1.0, 1.0), (0, 0)], 1.0, a))
    return fls


def test_extract_nodes_keys():
    up, dn = extract_nodes([Flowline(1, [(0, 0), (1, 1)], 1.0, 1.0)], 3)
    assert up == ["0.000_0.000"] and dn == ["1.000_1.000"]


def test_extract_nodes_snaps_float_noise():
    fls = [Flowline(1, [(0, 0), (1, 1 + 1e-9)], 1.0, 1.0), Flowline(2, [(1, 1), (2, 0)], 1.0, 1.0)]
    up, dn = extract_nodes(fls, 3)
    assert dn[0] == up[1]


def test_extract_nodes_y_fixture():
    up, dn = extract_nodes(y_flowlines(), 3)
    assert dn[0] == dn[1] == up[2]


def test_negative_zero_is_canonical():
    up, _ = extract_nodes([Flowline(1, [(-0.0001, 0.0), (1, 1)], 1.0, 1.0)], 3)
    assert up[0] == "0.000_0.000"


def test_malformed_geometry():
    with pytest.raises(MalformedGeometryError):
        Flowline(1, [(0, 0)], 1.0, 1.0)


def test_adjacency_y_fixture(ynet):
    o = ynet.idx(O)
    assert sorted(ynet.reach_ids[list(ynet.children[o])]) == [A, B]
    assert set(ynet.reach_ids[ynet.is_source]) == {A, B}
    assert set(ynet.reach_ids[ynet.is_outlet]) == {O}
    assert ynet.n_components == 1


def test_single_reach():
    net = build_network([Flowline(7, [(0, 0), (1, 0)], 2.0, 1.0)])
    assert net.is_source[0] and net.is_outlet[0]
    assert net.children[0] == () and net.parent[0] == -1


def test_disjoint_union():
    shifted = [Flowline(f.reach_id + 10, f.vertices + 100.0, f.length, f.additive_attribute)
               for f in y_flowlines()]
    net = build_network(y_flowlines() + shifted)
    assert net.n_components == 2
    assert net.is_outlet.sum() == 2


def test_braided_channel_rejected():
    fls = [
        Flowline(1, [(0, 0), (1, 0)], 1.0, 1.0),
        Flowline(2, [(1, 0), (2, 0)], 1.0, 1.0),
        Flowline(3, [(1, 0), (2, 1)], 1.0, 1.0),
    ]
    with pytest.raises(TopologyError) as exc:
        build_network(fls)
    assert {1, 2, 3} <= set(exc.value.reach_ids)


def test_cycle_rejected():
    fls = [
        Flowline(1, [(0, 0), (1, 0)], 1.0, 1.0),
        Flowline(2, [(1, 0), (1, 1)], 1.0, 1.0),
        Flowline(3, [(1, 1), (0, 0)], 1.0, 1.0),
    ]
    with pytest.raises(TopologyError):
        build_network(fls)


def test_duplicate_reach_ids_rejected():
    fls = y_flowlines()
    fls[1] = Flowline(1, fls[1].vertices, 3.0, 3.0)
    with pytest.raises(ValidationError):
        build_network(fls)


def test_nonpositive_attribute_rejected():
    fls = y_flowlines()
    fls[0] = Flowline(1, fls[0].vertices, 5.0, 0.0)
    with pytest.raises(ValidationError):
        build_network(fls)


def test_complex_confluences():
    assert find_complex_confluences(build_network(y_flowlines())) == []
    found = find_complex_confluences(build_network(trident()))
    assert len(found) == 1
    assert found[0].reach_id == 1
    assert found[0].child_ids == (11, 12, 13)
    assert found[0].subtree_attributes == (1.0, 2.0, 3.0)


def test_complex_confluence_sorted_by_subtree_attribute():
    # branch 11 has own attribute 5 but a subtree total of 5 + 10
    fls = trident(attrs=(5.0, 2.0, 3.0))
    fls.append(Flowline(21, [(-5.0, 5.0), (-1.0, 1.0)], 1.0, 10.0))
    conf = find_complex_confluences(build_network(fls))[0]
    assert conf.child_ids == (12, 13, 11)


def test_remove_smallest_branch():
    net = build_network(trident())
    out = remove_smallest_branch(net, 1)
    assert sorted(out.reach_ids.tolist()) == [1, 12, 13]
    assert len(out.children[out.idx(1)]) == 2
    assert out.cleaning_steps[-1]["removed_branch_roots"] == [11]


def test_remove_smallest_branch_drops_whole_subtree():
    fls = trident(attrs=(1.0, 20.0, 30.0))
    fls.append(Flowline(21, [(-5.0, 5.0), (-1.0, 1.0)], 1.0, 0.5))
    out = remove_smallest_branch(build_network(fls), 1)
    assert 21 not in out.index and 11 not in out.index


def test_remove_smallest_branch_tie_breaks_on_reach_id():
    net = build_network(trident(attrs=(1.0, 1.0, 3.0), ids=(15, 12, 13)))
    out = remove_smallest_branch(net, 1)
    assert 12 not in out.index and 15 in out.index


def test_remove_smallest_branch_noop_on_binary(ynet):
    assert remove_smallest_branch(ynet, O) is ynet


def test_largest_component():
    chain5 = [Flowline(i, [(0, i), (0, i - 1)], 1.0, 1.0) for i in range(1, 6)]
    chain3 = [Flowline(10 + i, [(50, i), (50, i - 1)], 1.0, 1.0) for i in range(1, 4)]
    net = build_network(chain3 + chain5)
    out = largest_component(net)
    assert sorted(out.reach_ids.tolist()) == [1, 2, 3, 4, 5]
    assert out.cleaning_steps[-1]["retained_fraction"] == pytest.approx(5 / 8)
    single = build_network(chain5)
    assert largest_component(single) is single


def test_updist_afv_y_fixture(ynet):
    updist = dict(zip(ynet.reach_ids.tolist(), ynet.updist_dn))
    afv = dict(zip(ynet.reach_ids.tolist(), ynet.afv))
    assert updist == {A: 10.0, B: 10.0, O: 0.0}
    assert afv[O] == 1.0
    assert afv[A] == pytest.approx(0.4, abs=1e-15)
    assert afv[B] == pytest.approx(0.6, abs=1e-15)


def test_updist_afv_chain():
    fls = [Flowline(i, [(0, i), (0, i - 1)], 1.0, 7.0) for i in range(1, 4)]
    net = build_network(fls)
    assert net.afv.tolist() == [1.0, 1.0, 1.0]
    assert dict(zip(net.reach_ids.tolist(), net.updist_dn.tolist())) == {1: 0.0, 2: 1.0, 3: 2.0}


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_tree_invariants(seed):
    net = random_network(seed)
    for r in range(len(net)):
        p = net.parent[r]
        if p < 0:
            assert net.updist_dn[r] == 0.0 and net.afv[r] == 1.0
            continue
        expected = net.updist_dn[p] + net.lengths[p]
        assert abs(net.updist_dn[r] - expected) <= 1e-9 * max(1.0, expected)
        assert net.afv[r] <= net.afv[p]
        assert 0 < net.afv[r] <= 1
        assert net.afv[r] == pytest.approx(brute_afv(net, r), rel=1e-12)
    for r, kids in enumerate(net.children):
        if kids:
            assert sum(net.afv[c] for c in kids) == pytest.approx(net.afv[r], rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_euler_ancestry_matches_parent_walk(seed):
    net = random_network(seed, n_reaches=int(np.random.default_rng(seed).integers(1, 500)))
    R = len(net)
    walk = np.zeros((R, R), dtype=bool)
    for b in range(R):
        r = b
        while r >= 0:
            walk[r, b] = True
            r = net.parent[r]
    a_idx, b_idx = np.meshgrid(np.arange(R), np.arange(R), indexing="ij")
    assert np.array_equal(net.is_ancestor(a_idx, b_idx), walk)


def test_every_generated_network_is_valid():
    from streamvecchia.simulate import SyntheticNetworkSpec, generate_network

    rng = np.random.default_rng(0)
    for k in range(1000):
        spec = SyntheticNetworkSpec(int(rng.integers(1, 60)), branching_prob=float(rng.uniform()), seed=k)
        net = build_network(generate_network(spec))
        assert len(net) == spec.n_reaches
        assert net.n_components == 1
        assert find_complex_confluences(net) == []


def test_generator_degenerate_cases():
    from streamvecchia.simulate import SyntheticNetworkSpec, generate_network

    assert len(build_network(generate_network(SyntheticNetworkSpec(1)))) == 1
    chain = build_network(generate_network(SyntheticNetworkSpec(25, branching_prob=0.0, seed=3)))
    assert max(len(c) for c in chain.children) == 1


def test_generator_reproducible():
    from streamvecchia.simulate import SyntheticNetworkSpec, generate_network

    a = generate_network(SyntheticNetworkSpec(50, seed=9))
    b = generate_network(SyntheticNetworkSpec(50, seed=9))
    assert all(np.array_equal(x.vertices, y.vertices) and x.length == y.length for x, y in zip(a, b))


def test_csv_roundtrip_and_persistence(tmp_path, ynet):
    write_flowlines_csv(y_flowlines(), tmp_path / "fl.csv")
    again = build_network(read_flowlines(tmp_path / "fl.csv"))
    assert np.array_equal(again.updist_dn, ynet.updist_dn)
    save_network(ynet, tmp_path / "net")
    loaded = load_network(tmp_path / "net")
    assert isinstance(loaded, StreamNetwork)
    assert np.array_equal(loaded.afv, ynet.afv)
    for name in ("reaches.csv", "adjacency.csv", "updist.csv", "afv.csv", "manifest.json"):
        assert (tmp_path / "net" / name).exists()


def test_ndjson_reader(tmp_path):
    import json

    path = tmp_path / "fl.ndjson"
    with open(path, "w") as fh:
        for f in y_flowlines():
            fh.write(json.dumps({"reach_id": f.reach_id, "length_m": f.length,
                                 "additive_attr": f.additive_attribute,
                                 "coordinates": f.vertices.tolist()}) + "\n")
    net = build_network(read_flowlines(path))
    assert sorted(net.reach_ids.tolist()) == [1, 2, 3]


def test_build_network_cleaning_pipeline():
    fls = trident() + [Flowline(99, [(500, 500), (501, 500)], 1.0, 1.0)]
    net = build_network(fls, fix_complex_confluences=True, largest_component_only=True)
    assert sorted(net.reach_ids.tolist()) == [1, 12, 13]
    assert [s["step"] for s in net.cleaning_steps] == ["remove_smallest_branch", "largest_component"]
