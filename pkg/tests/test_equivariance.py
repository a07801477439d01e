import numpy as np
import numpy.testing as npt
import pytest

from ien.equivariance import (
    ElementPolicy,
    EquivConfig,
    build_c4_oracle,
    channels_for_element,
    equiv_meter,
    layer_equiv_loss,
    network_equiv_loss,
    total_objective,
)
from ien.groups import GroupSpec, apply_action
from ien.layers import GroupLayout, group_pool, relu, conv2d
from ien.tensor import Tensor, grad_check, tsum

R4 = GroupSpec.rotations(4)
ROT90 = R4.elements[1]


def _maps(seed, n=2, c=3, h=6):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((n, c, h, h)).astype(np.float32),
            rng.standard_normal((n, c, h, h)).astype(np.float32))


def test_layer_loss_identity_pair_is_zero():
    a, _ = _maps(0)
    ident = R4.elements[0]
    assert layer_equiv_loss(Tensor(a), Tensor(a), ident).item() == 0.0


def test_layer_loss_perfectly_equivariant_pair():
    _, q = _maps(1)
    h_q = Tensor(q)
    h_p, _ = apply_action(ROT90, h_q)      # exactly the rotated map
    loss = layer_equiv_loss(h_p, h_q, ROT90)
    assert loss.item() == 0.0


def _scalar_rot90(m):
    h, w = m.shape
    out = np.zeros((w, h), dtype=m.dtype)
    for i in range(h):
        for j in range(w):
            out[w - 1 - j, i] = m[i, j]
    return out


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_layer_loss_matches_scalar_oracle(seed):
    p, q = _maps(seed)
    got = layer_equiv_loss(Tensor(p), Tensor(q), ROT90).item()
    total = 0.0
    for ni in range(p.shape[0]):
        for ci in range(p.shape[1]):
            rot_q = _scalar_rot90(q[ni, ci].astype(np.float64))
            total += np.mean((p[ni, ci].astype(np.float64) - rot_q) ** 2)
    want = total / (p.shape[0] * p.shape[1])
    npt.assert_allclose(got, want, rtol=1e-6)


def test_layer_loss_swap_symmetry():
    # loss(h_p, h_q, g) == loss(h_q, h_p, g^-1) for exact g
    p, q = _maps(3)
    for g in R4.non_identity():
        a = layer_equiv_loss(Tensor(p), Tensor(q), g).item()
        b = layer_equiv_loss(Tensor(q), Tensor(p), g.inverse()).item()
        npt.assert_allclose(a, b, rtol=1e-6)


def test_layer_loss_grad_check():
    rng = np.random.default_rng(4)
    p = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True, dtype="f64")
    q = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True, dtype="f64")
    assert grad_check(lambda t: layer_equiv_loss(t, q, ROT90), p).passed
    assert grad_check(lambda t: layer_equiv_loss(p, t, ROT90), q).passed


def test_network_loss_zero_betas():
    p, q = _maps(5)
    cfg = EquivConfig(groups=(R4,), alpha={"R4": 1.0}, beta={})
    loss = network_equiv_loss({0: Tensor(p)}, {0: Tensor(q)}, ROT90, cfg,
                              {0: GroupLayout.homogeneous(4, 3)})
    assert loss.item() == 0.0


def test_network_loss_single_layer_equals_layer_loss():
    p, q = _maps(6)
    cfg = EquivConfig(groups=(R4,), alpha={"R4": 1.0}, beta={0: 1.0})
    layouts = {0: GroupLayout(4, ((1, 3),))}   # all-singleton: unaffected channels
    got = network_equiv_loss({0: Tensor(p)}, {0: Tensor(q)}, ROT90, cfg, layouts)
    # singleton groups exclude every channel from non-identity elements
    assert got.item() == 0.0

    layouts = {0: GroupLayout.homogeneous(4, 3)}
    got = network_equiv_loss({0: Tensor(p)}, {0: Tensor(q)}, ROT90, cfg, layouts)
    want = layer_equiv_loss(Tensor(p), Tensor(q), ROT90).item()
    npt.assert_allclose(got.item(), want, rtol=1e-6)


def test_network_loss_weighted_sum():
    betas = (0.01, 0.1, 1.0)
    cfg = EquivConfig(groups=(R4,), alpha={"R4": 1.0},
                      beta={i: b for i, b in enumerate(betas)})
    pooled_p, pooled_q, want = {}, {}, 0.0
    layouts = {}
    for i in range(3):
        p, q = _maps(10 + i)
        pooled_p[i], pooled_q[i] = Tensor(p), Tensor(q)
        layouts[i] = GroupLayout.homogeneous(4, 3)
        want += betas[i] * layer_equiv_loss(Tensor(p), Tensor(q), ROT90).item()
    got = network_equiv_loss(pooled_p, pooled_q, ROT90, cfg, layouts)
    npt.assert_allclose(got.item(), want, rtol=1e-5)


def test_network_loss_missing_tap():
    cfg = EquivConfig(groups=(R4,), alpha={"R4": 1.0}, beta={0: 1.0, 1: 1.0})
    p, q = _maps(10)
    with pytest.raises(ValueError, match="missing"):
        network_equiv_loss({0: Tensor(p)}, {0: Tensor(q)}, ROT90, cfg,
                           {0: GroupLayout.homogeneous(4, 3)})


def test_total_objective_degenerate_and_weighted():
    cfg = EquivConfig(groups=(R4,), alpha={"R4": 0.0}, beta={0: 1.0})
    primary = Tensor(np.asarray(2.0, dtype=np.float32))
    eq = {"R4": Tensor(np.asarray(0.5, dtype=np.float32))}
    out = total_objective(primary, eq, cfg)
    assert out is primary            # alpha 0 short-circuits, graph unchanged

    cfg = EquivConfig(groups=(R4,), alpha={"R4": 1.0}, beta={0: 1.0})
    assert total_objective(primary, eq, cfg).item() == pytest.approx(2.5)


def test_total_objective_two_groups():
    scale = GroupSpec.scales()
    cfg = EquivConfig(groups=(R4, scale),
                      alpha={"R4": 1.0, scale.name: 0.5}, beta={0: 1.0})
    primary = Tensor(np.asarray(1.0, dtype=np.float32))
    eq = {"R4": Tensor(np.asarray(0.4, dtype=np.float32)),
          scale.name: Tensor(np.asarray(0.2, dtype=np.float32))}
    got = total_objective(primary, eq, cfg).item()
    npt.assert_allclose(got, 1.0 + 0.4 + 0.5 * 0.2, rtol=1e-6)


def test_total_objective_negative_alpha_rejected():
    with pytest.raises(ValueError, match="alpha"):
        EquivConfig(groups=(R4,), alpha={"R4": -1.0}, beta={})
    cfg = EquivConfig(groups=(R4,), alpha={}, beta={})
    cfg.alpha["R4"] = -0.5
    with pytest.raises(ValueError, match="alpha"):
        total_objective(Tensor(np.asarray(1.0)), {"R4": Tensor(np.asarray(1.0))}, cfg)


def test_total_objective_grad_composition():
    # d(total)/dw equals the sum of the component gradients
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 3, 4, 4))
    w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True, dtype="f64")

    def composite(t):
        from ien.layers import ConvLayer
        h = relu(conv2d(Tensor(x, dtype="f64"),
                        ConvLayer(weight=t, stride=1, padding=1)))
        pooled = group_pool(h, GroupLayout.homogeneous(4, 1))
        rotated, _ = apply_action(ROT90, pooled)
        primary = tsum(pooled * pooled) * 0.01
        eq = layer_equiv_loss(rotated, pooled, ROT90)
        cfg = EquivConfig(groups=(R4,), alpha={"R4": 0.7}, beta={0: 1.0})
        return total_objective(primary, {"R4": eq}, cfg)

    assert grad_check(composite, w).passed


# ---------------------------------------------------------------------------
# heterogeneous channel membership


def test_channels_for_element_subgroups():
    layout = GroupLayout(8, ((8, 2), (4, 1), (2, 1), (1, 1)))
    spec = GroupSpec.rotations(8)
    # element index 1 (45 deg): only the full-order groups
    idx = channels_for_element(layout, spec, spec.elements[1])
    npt.assert_array_equal(idx, [0, 1])
    # element index 2 (90 deg): full groups + the size-4 subgroup
    idx = channels_for_element(layout, spec, spec.elements[2])
    npt.assert_array_equal(idx, [0, 1, 2])
    # element index 4 (180 deg): everything but singletons
    idx = channels_for_element(layout, spec, spec.elements[4])
    npt.assert_array_equal(idx, [0, 1, 2, 3])
    # identity: all channels (None)
    assert channels_for_element(layout, spec, spec.elements[0]) is None
    # homogeneous layout: all channels
    assert channels_for_element(GroupLayout.homogeneous(8, 4), spec,
                                spec.elements[1]) is None


def test_channels_for_element_rotoreflection():
    spec = GroupSpec.rotoreflections(4)
    layout = GroupLayout(8, ((8, 1), (4, 1), (2, 1), (1, 1)))
    flipped = spec.elements[5]
    idx = channels_for_element(layout, spec, flipped)
    npt.assert_array_equal(idx, [0])        # only full-size groups see flips
    rot180 = spec.elements[2]
    idx = channels_for_element(layout, spec, rot180)
    npt.assert_array_equal(idx, [0, 1, 2])  # C4 and C2 subgroups contain 180


# ---------------------------------------------------------------------------
# the C4 oracle


def test_oracle_single_layer_pooled_commutes():
    model = build_c4_oracle(seed=0, channels_per_group=1, layers=1)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 1, 12, 12))
    _, pooled_x = model.eval().forward(Tensor(x, dtype="f64"), collect=True)
    xr, _ = apply_action(ROT90, Tensor(x, dtype="f64"))
    _, pooled_xr = model.forward(xr, collect=True)
    rotated_pool, _ = apply_action(ROT90, pooled_x[0])
    npt.assert_allclose(pooled_xr[0].data, rotated_pool.data, atol=1e-12)


def test_oracle_meter_reads_near_zero_everywhere():
    model = build_c4_oracle(seed=3, channels_per_group=2, layers=3)
    rng = np.random.default_rng(2)
    sample = rng.standard_normal((16, 1, 12, 12))
    report = equiv_meter(model, sample, R4)
    assert set(report.layer_totals) == {"conv1", "conv2", "conv3"}
    for layer, total in report.layer_totals.items():
        assert total <= 1e-10, (layer, total)
    for layer, element, value in report.rows:
        assert value <= 1e-10


def test_oracle_perturbation_breaks_equivariance():
    model = build_c4_oracle(seed=3, channels_per_group=2, layers=3)
    rng = np.random.default_rng(2)
    sample = rng.standard_normal((16, 1, 12, 12))
    # perturb one orientation copy of one filter in the middle layer
    conv = model.conv_layers()[1]
    conv.weight.data[4 + 1] += 1e-2
    report = equiv_meter(model, sample, R4)
    assert report.max_total() >= 1e-6


def test_fresh_cnn_has_strictly_positive_loss():
    from ien.models import rot_mini_config, build_model
    model = build_model(rot_mini_config(base_groups=2), seed=7)
    rng = np.random.default_rng(5)
    sample = rng.random((4, 1, 28, 28)).astype(np.float32)
    report = equiv_meter(model, sample, R4)
    for layer, total in report.layer_totals.items():
        assert total > 0.0, layer


def test_meter_report_serialization(tmp_path):
    model = build_c4_oracle(seed=1, channels_per_group=1, layers=2)
    rng = np.random.default_rng(0)
    sample = rng.standard_normal((4, 1, 12, 12))
    report = equiv_meter(model, sample, R4, meta={"seed": 0})
    csv_path = tmp_path / "report.csv"
    json_path = tmp_path / "report.json"
    report.to_csv(csv_path)
    doc = report.to_json(json_path)
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "layer,element,mse"
    assert len(lines) == 1 + 2 * 4          # two taps, four elements each
    assert "conv1" in doc["layers"]
    assert doc["layers"]["conv1"]["magnitude"] is None or \
        doc["layers"]["conv1"]["magnitude"] < -9


def test_element_policy_validation():
    with pytest.raises(ValueError):
        ElementPolicy(kind="bogus")
    with pytest.raises(ValueError):
        ElementPolicy(kind="sample", k=0)
    p = ElementPolicy(kind="sample", k=1, seed=3)
    assert p.k == 1
