import json
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrpet.compress import (
    FormatError,
    compression_report,
    count_flops,
    decode_model,
    encode_model,
    fold_layer,
    load_model,
    save_model,
    truncate_and_factor,
)
from lrpet.lrpet import RankPlan
from lrpet.nn import BatchNorm, Conv2d, Flatten, Linear, Network, desk_cnn, small_resnet
from lrpet.tensor import conv2d, frobenius_norm, low_rank_project, matrix_to_kernel

DESK = (1, 12, 12)

# desk CNN: conv 1->16 (3x3, 12x12 out), BN, conv 16->32 (3x3, 6x6 out), BN, linear 288->10 (+bias)
DESK_PARAMS = 16 * 9 + 2 * 16 + 32 * 144 + 2 * 32 + 288 * 10 + 10
DESK_MACS = 16 * 9 * 144 + 32 * 144 * 36 + 2880
# (p, params after, MACs after) with the head kept dense; ranks conv1 6/5/3, conv2 22/16/10
DESK_TABLE = [
    (0.3, 25 * 6 + 16 + 176 * 22 + 32 + 2890, 25 * 6 * 144 + 176 * 22 * 36 + 2880),
    (0.5, 25 * 5 + 16 + 176 * 16 + 32 + 2890, 25 * 5 * 144 + 176 * 16 * 36 + 2880),
    (0.7, 25 * 3 + 16 + 176 * 10 + 32 + 2890, 25 * 3 * 144 + 176 * 10 * 36 + 2880),
]


def desk_net(seed=0):
    return Network(desk_cnn(DESK, 10), DESK, seed=seed)


def trained_like(net, seed=0):
    """Random non-trivial BN parameters and statistics so folding matters."""
    rng = np.random.default_rng(seed)
    for i, layer in enumerate(net.layers):
        if isinstance(layer, BatchNorm):
            c = layer.channels
            net.params[f"{i}.weight"] = rng.uniform(0.5, 1.5, c)
            net.params[f"{i}.bias"] = rng.normal(0, 0.2, c)
            net.buffers[f"{i}.running_mean"] = rng.normal(0, 0.3, c)
            net.buffers[f"{i}.running_var"] = rng.uniform(0.5, 2.0, c)
    net.eval()
    return net


def test_desk_constants():
    assert DESK_PARAMS == 7738 and DESK_MACS == 189504
    assert [row[1:] for row in DESK_TABLE] == [(6960, 163872), (5879, 122256), (4773, 77040)]


def test_linear_flops():
    net = Network([Linear(10, 10)], (10,))
    assert count_flops(net)["total"] == 100


def test_conv_flops():
    net = Network([Conv2d(3, 8, 3, 3, pad=1), Flatten()], (3, 32, 32))
    assert count_flops(net)["total"] == 221184


def test_report_formula_64x576():
    net = Network([Linear(576, 64, bias=False)], (576,))
    rep = compression_report(net, RankPlan({0: 0.5}))
    assert rep.layers[0].params_before == 36864
    assert rep.layers[0].params_after == 20480


@pytest.mark.parametrize("p,params,macs", DESK_TABLE)
def test_desk_accounting(p, params, macs):
    net = desk_net()
    rep = compression_report(net, RankPlan.uniform(net, p, keep_dense={9}))
    assert rep.params_before == DESK_PARAMS
    assert rep.flops_before == DESK_MACS
    assert rep.params_after == params
    assert rep.flops_after == macs
    assert rep.pr_params == pytest.approx(1 - params / DESK_PARAMS)
    factored, _ = truncate_and_factor(net, RankPlan.uniform(net, p, keep_dense={9}), warn_tol=1.0)
    assert factored.num_params() == params
    assert count_flops(factored)["total"] == macs


def test_desk_accounting_all_layers():
    net = desk_net()
    rep = compression_report(net, RankPlan.uniform(net, 0.5))
    # ranks 5, 16, 5; the head carries its bias on the second factor
    assert rep.params_after == (25 * 5 + 16) + (176 * 16 + 32) + (298 * 5 + 10)
    assert rep.flops_after == 25 * 5 * 144 + 176 * 16 * 36 + 298 * 5


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 0.95), st.floats(0.0, 0.05))
def test_pr_monotone_in_p(p, dp):
    net = desk_net()
    a = compression_report(net, RankPlan.uniform(net, p, keep_dense={9}))
    b = compression_report(net, RankPlan.uniform(net, min(1.0, p + dp), keep_dense={9}))
    assert b.params_after <= a.params_after
    assert b.flops_after <= a.flops_after


def test_diag_linear_factorization():
    net = Network([Linear(4, 4, bias=False)], (4,))
    net.params["0.weight"] = np.diag([3.0, 2.0, 1.0, 0.1])
    factored, rep = truncate_and_factor(net, RankPlan({0: 0.5}), warn_tol=1.0)
    a, b = factored.params["0.weight"], factored.params["1.weight"]
    np.testing.assert_allclose(b @ a, np.diag([3.0, 2.0, 0.0, 0.0]), atol=1e-14)
    assert rep.layers[0].params_after == 16


def test_fold_layer_matches_eval_bn():
    net = trained_like(desk_net(1), 1)
    w, bias = fold_layer(net, 0)
    x = np.random.default_rng(2).standard_normal((3,) + DESK)
    conv = conv2d(x, net.params["0.weight"], 1, 1)
    g, b = net.params["1.weight"], net.params["1.bias"]
    mu, var = net.buffers["1.running_mean"], net.buffers["1.running_var"]
    view = lambda v: v[None, :, None, None]  # noqa: E731
    ref = view(g) * (conv - view(mu)) / np.sqrt(view(var) + 1e-5) + view(b)
    direct = conv2d(x, matrix_to_kernel(w, 1, 3, 3), 1, 1) + view(bias)
    np.testing.assert_allclose(direct, ref, atol=1e-12)


def in_place_truncated(net, plan):
    """Oracle: fold BN into the weight in place, truncate, keep the original architecture."""
    out = net.clone()
    for i, r in plan.ranks(net).items():
        w, bias = fold_layer(net, i)
        out.set_weight_matrix(i, low_rank_project(w, r))
        j = net.following_bn(i)
        if j is not None:
            out.params[f"{j}.weight"] = np.ones_like(bias)
            out.params[f"{j}.bias"] = bias
            out.buffers[f"{j}.running_mean"] = np.zeros_like(bias)
            out.buffers[f"{j}.running_var"] = np.full_like(bias, 1.0 - net.layers[j].eps)
        elif f"{i}.bias" in out.params:
            out.params[f"{i}.bias"] = bias
    out.eval()
    return out


@pytest.mark.parametrize("builder", ["desk", "resnet"])
def test_factorized_matches_in_place_truncation(builder):
    if builder == "desk":
        net = trained_like(desk_net(3), 3)
    else:
        net = trained_like(Network(small_resnet(DESK, 10, (4, 8), "B"), DESK, seed=3), 3)
    plan = RankPlan.uniform(net, 0.5)
    factored, _ = truncate_and_factor(net, plan, warn_tol=1.0)
    x = np.random.default_rng(4).standard_normal((100,) + DESK)
    ref = in_place_truncated(net, plan).predict(x)
    assert np.max(np.abs(factored.predict(x) - ref)) <= 1e-6


def test_factorized_exactness():
    net = trained_like(desk_net(5), 5)
    plan = RankPlan.uniform(net, 0.5)
    factored, _ = truncate_and_factor(net, plan, warn_tol=1.0)
    ranks = plan.ranks(net)
    w, _ = fold_layer(net, 4)
    target = low_rank_project(w, ranks[4])
    names = [k for k in factored.params if k.endswith(".weight")]
    # conv1 pair, conv2 pair, linear pair: the conv2 pair is the third/fourth weight
    first = factored.params[names[2]].reshape(ranks[4], -1)
    second = factored.params[names[3]].reshape(32, ranks[4])
    assert frobenius_norm(second @ first - target) <= 1e-10 * frobenius_norm(target)


def test_untrained_plan_warns(caplog):
    net = trained_like(desk_net(6), 6)
    truncate_and_factor(net, RankPlan.uniform(net, 0.9))
    assert any("energy" in r.message for r in caplog.records)


def test_save_load_bit_identical(tmp_path):
    net = trained_like(desk_net(7), 7)
    save_model(net, tmp_path / "m.lrpt", {"note": "x"})
    back, meta = load_model(tmp_path / "m.lrpt", with_meta=True)
    assert meta["note"] == "x"
    assert back.layers == net.layers
    for k in net.params:
        assert back.params[k].tobytes() == net.params[k].tobytes()
    for k in net.buffers:
        assert back.buffers[k].tobytes() == net.buffers[k].tobytes()


def test_factorized_round_trip_logits(tmp_path):
    net = trained_like(desk_net(8), 8)
    factored, _ = truncate_and_factor(net, RankPlan.uniform(net, 0.5), warn_tol=1.0)
    save_model(factored, tmp_path / "f.lrpt")
    back = load_model(tmp_path / "f.lrpt")
    x = np.random.default_rng(8).standard_normal((10,) + DESK)
    assert np.array_equal(back.predict(x), factored.predict(x))


def test_corrupt_payload_detected():
    raw = bytearray(encode_model(desk_net()))
    raw[-20] ^= 0xFF
    with pytest.raises(FormatError, match="checksum"):
        decode_model(bytes(raw))


def test_truncated_file_detected():
    raw = encode_model(desk_net())
    with pytest.raises(FormatError):
        decode_model(raw[:-100])
    with pytest.raises(FormatError):
        decode_model(raw[:5])


def test_version_mismatch_detected():
    raw = bytearray(encode_model(desk_net()))
    raw[4:6] = struct.pack("<H", 99)
    body = bytes(raw[:-4])
    raw[-4:] = struct.pack("<I", zlib.crc32(body))
    with pytest.raises(FormatError, match="version"):
        decode_model(bytes(raw))


def test_bad_magic_detected():
    raw = bytearray(encode_model(desk_net()))
    raw[:4] = b"NOPE"
    with pytest.raises(FormatError):
        decode_model(bytes(raw))


def test_report_json(tmp_path):
    net = desk_net()
    rep = compression_report(net, RankPlan.uniform(net, 0.5, keep_dense={9}))
    rep.to_json(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["params_after"] == rep.params_after
    assert "PR" in rep.table()
