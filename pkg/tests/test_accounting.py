import itertools
import json

import pytest
from hypothesis import given, strategies as st

from reluplan import accounting as acc
from reluplan import cellgraph as cg
from reluplan.cellgraph import CellDims, CellSpec, Genotype
from reluplan.errors import GenotypeError, PlanError
from reluplan.plan import NetworkPlan


def _per_cell_oracle(h0, w0, c, depth, placement, factor):
    """Walk the cells one by one, halving H, W and scaling C at each reduce."""
    h, w, ch, out = h0, w0, c, []
    for i in range(depth):
        if i in placement:
            h, w, ch = h // 2, w // 2, ch * factor
        out.append(h * w * ch)
    return out


@pytest.mark.parametrize("c,d,expected", [
    (5, 5, 25600), (5, 6, 30720), (5, 8, 40960), (5, 10, 51200),
    (7, 10, 71680), (10, 10, 102400), (15, 15, 230400),
])
def test_cifar_rows(c, d, expected):
    ledger = acc.count_sphynx(NetworkPlan(32, 32, c, d, (d // 3, 2 * d // 3)))
    assert ledger.relus == expected
    assert ledger.stem_relus == 0


@pytest.mark.parametrize("c,d,expected", [(5, 5, 102400), (5, 10, 204800), (7, 10, 286720), (20, 10, 819200)])
def test_tiny_rows(c, d, expected):
    assert acc.count_sphynx(NetworkPlan(64, 64, c, d, (1, 3))).relus == expected


def test_imagenet_stem_decomposition():
    ledger = acc.count_sphynx(NetworkPlan(28, 28, 10, 10, (3, 6), stem="imagenet3"))
    assert ledger.stem_relus == 112 * 112 * 5 + 56 * 56 * 10 == 62720 + 31360
    assert ledger.relus == 172480 == 62720 + 31360 + 78400


def test_imagenet_odd_channels():
    with pytest.raises(PlanError, match="stem channel split"):
        NetworkPlan(28, 28, 7, 10, (3, 6), stem="imagenet3")


@pytest.mark.parametrize("kw", [
    dict(channels=0), dict(depth=1), dict(placement=(2, 1)), dict(placement=(1, 1)),
    dict(placement=(0, 9), depth=5), dict(h0=30), dict(stem="other"), dict(balancing="x"),
])
def test_plan_preconditions(kw):
    base = dict(h0=32, w0=32, channels=5, depth=5, placement=(0, 1))
    base.update(kw)
    with pytest.raises(PlanError):
        NetworkPlan(**base)


def test_count_sphynx_requires_relu_balancing():
    with pytest.raises(PlanError):
        acc.count_sphynx(NetworkPlan(32, 32, 5, 5, (0, 1), balancing="flop"))


@pytest.mark.parametrize("c,d,placement,expected", [
    (17, 5, (0, 1), 26112), (14, 10, (0, 5), 53760), (17, 6, (0, 1), 30464), (12, 8, (1, 3), 39936),
])
def test_flop_balanced_rows(c, d, placement, expected):
    plan = NetworkPlan(32, 32, c, d, placement, balancing="flop")
    ledger = acc.count_flop_balanced(plan)
    assert ledger.relus == expected == sum(_per_cell_oracle(32, 32, c, d, placement, 2))
    assert ledger.per_cell_relus == _per_cell_oracle(32, 32, c, d, placement, 2)


def test_flop_balanced_decomposition():
    ledger = acc.count_flop_balanced(NetworkPlan(32, 32, 17, 5, (0, 1), balancing="flop"))
    assert ledger.per_cell_relus == [8704, 4352, 4352, 4352, 4352]


@given(st.integers(2, 10), st.integers(1, 16), st.data())
def test_flop_balanced_monotone(depth, c, data):
    i, j = data.draw(st.sampled_from(list(itertools.combinations(range(depth), 2))))
    total = acc.count_flop_balanced(NetworkPlan(32, 32, c, depth, (i, j), balancing="flop")).relus
    if i > 0:
        earlier = acc.count_flop_balanced(NetworkPlan(32, 32, c, depth, (i - 1, j), balancing="flop")).relus
        assert earlier <= total
    if j - 1 > i:
        earlier = acc.count_flop_balanced(NetworkPlan(32, 32, c, depth, (i, j - 1), balancing="flop")).relus
        assert earlier <= total


def test_ledger_additivity_and_csv():
    ledger = acc.count_sphynx(NetworkPlan(32, 32, 5, 5, (0, 1)))
    assert ledger.relus == ledger.stem_relus + sum(ledger.per_cell_relus)
    lines = ledger.to_csv().splitlines()
    assert lines[0] == "cell_index,H,W,C,relus,flops,params"
    assert lines[1].startswith("stem,32,32,5,0,")
    assert lines[2].startswith("0,16,16,20,5120,")
    assert lines[-1].startswith("classifier,")
    assert json.loads(ledger.to_json())["relus"] == 25600


def _edges(n, ops):
    return CellSpec.from_edges(n, ops)


def test_legacy_eight_conv_edges():
    cell = _edges(6, [(0, 2, "sepconv3x3"), (1, 2, "sepconv3x3"), (0, 3, "sepconv3x3"), (2, 3, "sepconv5x5"),
                      (1, 4, "sepconv3x3"), (3, 4, "sepdilconv3x3"), (2, 4, "sepconv3x3"),
                      (3, 4, "sepconv3x3")])
    tally = acc.count_legacy_cell(cell, CellDims(32, 32, 5))
    assert tally.relus == 8 * 32 * 32 * 5 + 2 * 4 * 32 * 32 * 5 == 81920


def test_legacy_sharing_reduces_by_saved():
    cell = _edges(5, [(0, 2, "sepconv3x3"), (1, 2, "sepconv3x3"), (0, 3, "sepconv5x5"), (2, 3, "identity")])
    dims = CellDims(32, 32, 5)
    plain = acc.count_legacy_cell(cell, dims)
    shared = acc.count_legacy_cell(cell, dims, share_relus=True)
    assert plain.relus - shared.relus == 32 * 32 * 5 == shared.saved_relus


def test_legacy_no_convs_is_preprocessing_only():
    cell = _edges(4, [(0, 2, "identity"), (1, 2, "maxpool3x3")])
    tally = acc.count_legacy_cell(cell, CellDims(8, 8, 3))
    assert tally.relus == 2 * 4 * 8 * 8 * 3
    assert tally.maxpool_units == 8 * 8 * 3


def test_legacy_network_sharing_difference(data_dir):
    g = cg.load(data_dir / "legacy_darts_v2.json")
    plan = NetworkPlan(32, 32, 16, 8, (2, 5), balancing="flop")
    plain = acc.count_legacy(plan, g)
    shared = acc.count_legacy(plan, g, share_relus=True)
    saved = 0
    for kind, h, w, c in acc.cell_dims(plan):
        cell = g.reduce if kind == "reduce" else g.normal
        saved += cg.relu_sharing_pass(cell, CellDims(h, w, c))[1]
    assert plain.relus - shared.relus == saved > 0
    assert plain.maxpool_units > 0


def test_legacy_space_mismatch(data_dir):
    g = cg.load(data_dir / "genotype_n7.json")
    with pytest.raises(GenotypeError, match="space mismatch"):
        acc.count_legacy(NetworkPlan(32, 32, 5, 5, (0, 1)), g)


def test_conv_cost_closed_forms():
    assert acc.conv_cost(1, 8, 2, 4, 4) == (512, 16 + 4)
    assert acc.conv_cost(3, 1, 1, 2, 2, bn=False)[0] == 72
    f1 = acc.conv_cost(3, 8, 8, 8, 8)[0]
    f2 = acc.conv_cost(3, 16, 16, 8, 8)[0]
    assert f2 == 4 * f1


def test_flops_params_positive_and_grow_with_channels():
    a = acc.count_flops_params(NetworkPlan(32, 32, 5, 5, (1, 3)))
    b = acc.count_flops_params(NetworkPlan(32, 32, 10, 5, (1, 3)))
    assert 0 < a.flops < b.flops and 0 < a.params < b.params


def test_resnet18_layered_fixture(data_dir):
    spec = json.loads((data_dir / "resnet18_imagenet_c8.json").read_text())
    ledger = acc.count_layered(spec)
    # 112^2 stem conv, then two blocks x two ReLUs per stage at 56^2, 28^2, 14^2, 7^2
    assert ledger.relus == 8 * (112 * 112 + 4 * 56 * 56 + 4 * 28 * 28 * 2 + 4 * 14 * 14 * 4 + 4 * 7 * 7 * 8)
    assert ledger.relus == 288512


def _budget_oracle(budget, c_range, d_range, tol):
    rows = [(c, d, 1024 * c * d) for c in range(c_range[0], c_range[1] + 1)
            for d in range(d_range[0], d_range[1] + 1) if abs(1024 * c * d - budget) <= tol * budget]
    return sorted(rows, key=lambda r: (abs(r[2] - budget), r[0], r[1]))


def test_plan_budget_table_rows():
    rows = acc.plan_budget(50000, 32, 32, (5, 10), (5, 10), 0.05)
    assert {(5, 10, 51200), (6, 8, 49152), (7, 7, 50176), (8, 6, 49152), (10, 5, 51200)} <= set(rows)
    assert rows == _budget_oracle(50000, (5, 10), (5, 10), 0.05)


def test_plan_budget_exact_and_empty():
    assert acc.plan_budget(25600, 32, 32, (5, 10), (5, 10), 0.0) == [(5, 5, 25600)]
    assert acc.plan_budget(1, 32, 32, (5, 10), (5, 10), 0.0) == []
    with pytest.raises(PlanError):
        acc.plan_budget(0, 32, 32, (5, 10), (5, 10), 0.0)


@given(st.integers(1000, 200000), st.integers(1, 12), st.integers(2, 12), st.floats(0, 0.3))
def test_plan_budget_matches_brute_force(budget, c_hi, d_hi, tol):
    assert acc.plan_budget(budget, 32, 32, (1, c_hi), (2, d_hi), tol) == \
        _budget_oracle(budget, (1, c_hi), (2, d_hi), tol)
