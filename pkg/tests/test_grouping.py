import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from certagg.core import CertifiedCurve, ClientRecord, LabelDistribution, RadiusGrid, ValidationError
from certagg.synthdata import OracleModel, PartitionSpec, SampleSet, partition, realize_population
from certagg.grouping import GroupingConfig, group_clients, virtualize, write_grouping_csv

GRID = RadiusGrid([0.0, 0.25, 0.5])


def client(cid, n, probs=(0.5, 0.5), curve=(0.8, 0.5, 0.2)):
    return ClientRecord(cid, n, LabelDistribution(probs), CertifiedCurve(GRID, curve))


def sizes(groups):
    return [[m.n for m in g.members] for g in groups]


class TestExamples:
    def test_mixed_sizes(self):
        groups = group_clients([client(0, 10), client(1, 20), client(2, 60)], GroupingConfig(tau=50))
        assert sizes(groups) == [[60], [10, 20]]
        assert not groups[0].is_virtual and groups[1].is_virtual
        assert groups[1].virtual_record.n == 30

    def test_equal_small_clients(self):
        groups = group_clients([client(i, 10) for i in range(6)], GroupingConfig(tau=25))
        assert sizes(groups) == [[10, 10, 10], [10, 10, 10]]
        assert [g.virtual_record.id for g in groups] == [(0, 1, 2), (3, 4, 5)]

    def test_trailing_group_below_threshold(self):
        groups = group_clients([client(i, 10) for i in range(4)], GroupingConfig(tau=25))
        assert sizes(groups) == [[10, 10, 10], [10]]
        merged = group_clients([client(i, 10) for i in range(4)], GroupingConfig(tau=25, merge_trailing=True))
        assert sizes(merged) == [[10, 10, 10, 10]]

    def test_all_large_unchanged(self):
        clients = [client(i, 100 + i) for i in range(3)]
        groups = group_clients(clients, GroupingConfig(tau=50))
        assert [g.virtual_record for g in groups] == clients

    def test_ascending_order(self):
        groups = group_clients([client("a", 30), client("b", 5), client("c", 12)], GroupingConfig(tau=15))
        assert sizes(groups) == [[30], [5, 12]]

    def test_empty(self):
        with pytest.raises(ValidationError):
            group_clients([])

    def test_bad_tau(self):
        with pytest.raises(ValidationError):
            GroupingConfig(tau=0)


class TestVirtualize:
    def test_single_member_is_identity(self):
        c = client(3, 7)
        assert virtualize([c]) is c

    def test_equal_volumes_average(self):
        a = client("a", 8, curve=(1.0, 1.0, 0.0))
        b = client("b", 8, curve=(0.0, 0.0, 0.0))
        np.testing.assert_allclose(virtualize([a, b]).curve.values, [0.5, 0.5, 0.0])

    def test_realized_clients_match_pooled_recount(self):
        grid = RadiusGrid.uniform()
        oracle = OracleModel.exponential(grid, 4, seed=3)
        counts = partition(PartitionSpec("dirichlet", 0.2, 12, (80, 60, 40, 20), seed=3))
        samples, records = realize_population(oracle, counts, seed=5)
        pooled = SampleSet.concat(samples).radii
        recount = [np.count_nonzero(pooled >= r) / pooled.size for r in grid.radii]
        np.testing.assert_allclose(virtualize(records).curve.values, recount, atol=1e-12)

    def test_pooled_by_hand(self):
        a = client("a", 10, (1.0, 0.0), (1.0, 0.6, 0.2))
        b = client("b", 30, (0.2, 0.8), (0.6, 0.2, 0.0))
        v = virtualize([a, b])
        # recount: 10 + 6 robust samples at r=0 out of 40, and so on
        np.testing.assert_allclose(v.dist.probs, [(10 + 6) / 40, 24 / 40])
        np.testing.assert_allclose(v.curve.values, [(10 + 18) / 40, (6 + 6) / 40, 2 / 40])
        assert v.n == 40 and v.id == ("a", "b")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 120), min_size=1, max_size=40), st.integers(1, 100), st.booleans())
def test_grouping_properties(ns, tau, merge):
    clients = [client(i, n) for i, n in enumerate(ns)]
    groups = group_clients(clients, GroupingConfig(tau=tau, merge_trailing=merge))
    members = [m.id for g in groups for m in g.members]
    assert sorted(members) == list(range(len(ns)))
    assert sum(g.virtual_record.n for g in groups) == sum(ns)
    virtual = [g for g in groups if any(m.n < tau for m in g.members)]
    for g in groups:
        if len(g.members) == 1 and g.members[0].n >= tau:
            continue
        assert all(m.n < tau for m in g.members)
    # every virtual client but the last reaches tau
    for g in virtual[:-1]:
        assert g.virtual_record.n >= tau
    assert group_clients(clients, GroupingConfig(tau=tau, merge_trailing=merge)) == groups


def test_grouping_csv(tmp_path):
    groups = group_clients([client(0, 10), client(1, 20), client(2, 60)], GroupingConfig(tau=50))
    write_grouping_csv(tmp_path / "g.csv", groups)
    assert (tmp_path / "g.csv").read_text().splitlines() == [
        "group_id,member_client_id,n,n_V", "0,2,60,60", "1,0,10,30", "1,1,20,30",
    ]
