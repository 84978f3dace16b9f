import math

import numpy as np
import pytest

from gfmud.datagen import Dataset
from gfmud.neural import (
    AdamState,
    Architecture,
    NetworkError,
    TrainConfig,
    adam_step,
    backward,
    bce_l2_loss,
    detect,
    forward,
    init_network,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from oracles import gradient_check


def small_net(dtype=np.float64, **kw):
    arch = Architecture(kw.pop("n_features", 6), kw.pop("n_outputs", 5),
                        kw.pop("width", 8), kw.pop("blocks", 2), **kw)
    return init_network(arch, seed=0, dtype=dtype)


class TestForward:
    def test_zero_blocks_reduce_to_input_path(self):
        net = small_net(dropout=0.0)
        for k in net.params:
            if k.startswith("b") and k.endswith(".W"):
                net.params[k][:] = 0
            if k.startswith("b") and (k.endswith(".e") or k.endswith(".b")):
                net.params[k][:] = 0
        x = np.random.default_rng(0).standard_normal((7, 6))
        P = net.params
        z0 = np.maximum(x @ P["in.W"].T + P["in.b"], 0)
        ref = 1 / (1 + np.exp(-(z0 @ P["out.W"].T + P["out.b"])))
        np.testing.assert_allclose(forward(net, x, bn=False), ref, rtol=1e-12)

    def test_outputs_in_open_interval(self):
        net = small_net()
        x = np.random.default_rng(1).standard_normal((50, 6))
        p = forward(net, x)
        assert np.all((p > 0) & (p < 1))

    def test_outputs_bounded_for_extreme_input(self):
        # float64 sigmoid saturates, so only the closed interval is guaranteed
        p = forward(small_net(), 1e6 * np.ones((2, 6)))
        assert np.all((p >= 0) & (p <= 1)) and np.isfinite(p).all()

    def test_batch_norm_statistics(self):
        net = small_net(bn_eps=1e-12)
        x = np.random.default_rng(2).standard_normal((64, 6))
        _, tr = forward(net, x, "train", np.random.default_rng(0))
        names = [k for k in tr.cache if "bn" in k]
        assert len(names) == 1 + 4 * 2
        for name in names:
            xh = tr.cache[name][0]
            live = tr.stats[name][1] > 1e-6
            np.testing.assert_allclose(xh.mean(axis=0), 0, atol=1e-10)
            np.testing.assert_allclose(xh.var(axis=0)[live], 1, atol=1e-6)

    def test_normalised_variance_matches_eps(self):
        net = small_net()
        x = np.random.default_rng(3).standard_normal((256, 6))
        _, tr = forward(net, x, "train", np.random.default_rng(0))
        z_var = tr.stats["in.bn"][1]
        xh = tr.cache["in.bn"][0]
        np.testing.assert_allclose(xh.var(axis=0), z_var / (z_var + net.arch.bn_eps), rtol=1e-10)

    def test_wrong_shape(self):
        with pytest.raises(NetworkError):
            forward(small_net(), np.zeros((3, 5)))

    def test_running_stats_updated(self):
        net = small_net()
        before = net.buffers["in.bn.mean"].copy()
        forward(net, np.random.default_rng(0).standard_normal((32, 6)) + 3, "train",
                np.random.default_rng(0), update_stats=True)
        assert not np.allclose(before, net.buffers["in.bn.mean"])

    def test_tapered_shapes(self):
        net = small_net(block_widths=(16, 12, 10, 4))
        assert net.arch.tapered
        assert net.params["b0.P"].shape == (8, 4)
        assert forward(net, np.zeros((2, 6))).shape == (2, 5)


class TestLoss:
    def test_perfect_predictions(self):
        y = np.array([[1, 0, 1]])
        p = y.astype(float)
        assert bce_l2_loss(p, y) == pytest.approx(-math.log(1 - 1e-7), rel=1e-6)

    def test_half(self):
        y = np.random.default_rng(0).integers(0, 2, (10, 4))
        assert bce_l2_loss(np.full((10, 4), 0.5), y) == pytest.approx(math.log(2))

    def test_second_implementation(self):
        rng = np.random.default_rng(1)
        p = rng.random((20, 5))
        y = rng.integers(0, 2, (20, 5))
        net = small_net()
        ref = 0.0
        for i in range(20):
            for j in range(5):
                q = min(max(p[i, j], 1e-7), 1 - 1e-7)
                ref -= y[i, j] * math.log(q) + (1 - y[i, j]) * math.log(1 - q)
        ref /= 100
        ref += sum(0.005 * float((net.params[f"b{l}.d1.W"] ** 2).sum()) for l in range(2))
        assert bce_l2_loss(p, y, net) == pytest.approx(ref, abs=1e-10)


class TestBackward:
    def test_finite_differences(self):
        assert gradient_check(probes=60, seed=3) <= 1e-4

    def test_finite_differences_tapered(self):
        assert gradient_check(probes=60, seed=4, tapered=True) <= 1e-4

    def test_output_bias_stationary_point(self):
        net = small_net(dropout=0.0)
        net.params["out.W"][:] = 0
        net.params["out.b"][:] = 0
        x = np.random.default_rng(0).standard_normal((8, 6))
        y = np.tile([[1, 0, 1, 0, 1], [0, 1, 0, 1, 0]], (4, 1))
        _, tr = forward(net, x, "train", np.random.default_rng(0))
        g = backward(net, tr, y)
        np.testing.assert_allclose(g["out.b"], 0, atol=1e-15)

    def test_l2_gradient(self):
        net = small_net(dropout=0.0)
        x = np.random.default_rng(0).standard_normal((8, 6))
        y = np.zeros((8, 5))
        _, tr = forward(net, x, "train", np.random.default_rng(0))
        g_with = backward(net, tr, y)["b0.d1.W"]
        net.arch.l2 = 0.0
        g_without = backward(net, tr, y)["b0.d1.W"]
        np.testing.assert_allclose(g_with - g_without, 0.01 * net.params["b0.d1.W"], atol=1e-15)

    def test_all_parameters_have_gradients(self):
        net = small_net()
        _, tr = forward(net, np.ones((4, 6)) * np.arange(4)[:, None], "train",
                        np.random.default_rng(0))
        g = backward(net, tr, np.zeros((4, 5)))
        assert set(g) == set(net.params)


class TestAdam:
    def test_first_step(self):
        net = small_net()
        net.params = {"theta": np.zeros(1)}
        cfg = TrainConfig(lr=0.1)
        adam_step(net, {"theta": np.ones(1)}, 1, cfg, AdamState())
        np.testing.assert_allclose(net.params["theta"], -0.1, rtol=1e-6)

    def test_zero_gradient(self):
        net = small_net()
        net.params = {"theta": np.array([0.5])}
        st = AdamState()
        cfg = TrainConfig(lr=0.1)
        adam_step(net, {"theta": np.ones(1)}, 1, cfg, st)
        theta = net.params["theta"].copy()
        m, v = st.m["theta"].copy(), st.v["theta"].copy()
        adam_step(net, {"theta": np.zeros(1)}, 2, cfg, st)
        np.testing.assert_allclose(st.m["theta"], 0.9 * m)
        np.testing.assert_allclose(st.v["theta"], 0.999 * v)
        # update is driven by the decayed moment only
        assert net.params["theta"][0] < theta[0]

    def test_exact_zero_state_no_change(self):
        net = small_net()
        net.params = {"theta": np.array([0.5])}
        adam_step(net, {"theta": np.zeros(1)}, 1, TrainConfig(), AdamState())
        assert net.params["theta"][0] == 0.5


def separable_dataset(D, seed):
    # 5 devices, orthogonal 4-dim codes with a fifth as a sum; noiseless single activity
    rng = np.random.default_rng(seed)
    Phi = np.eye(4, 5, dtype=complex)
    Phi[:, 4] = np.array([1, 1, 1, 1]) / 2
    a = np.zeros((D, 5), dtype=np.uint8)
    a[np.arange(D), rng.integers(0, 5, D)] = 1
    h = rng.standard_normal((D, 5)) + 1j * rng.standard_normal((D, 5))
    h /= np.abs(h)
    y = (a * h) @ Phi.T
    return Dataset(np.concatenate([y.real, y.imag], axis=1).astype(np.float32), a)


class TestTrain:
    def test_separable_task(self):
        ds = separable_dataset(4000, 0)
        net = init_network(Architecture(8, 5, 32, 2, dropout=0.1), seed=0)
        net, log = train(net, ds, TrainConfig(epochs=20, batch_size=100, lr=3e-3, seed=0))
        assert log[-1]["val_recall"] >= 0.99

    def test_reproducible(self):
        ds = separable_dataset(1000, 1)
        logs = []
        for _ in range(2):
            net = init_network(Architecture(8, 5, 16, 1), seed=0)
            net, log = train(net, ds, TrainConfig(epochs=2, batch_size=100, seed=3))
            logs.append((log, net.params["out.W"].copy()))
        assert [r["loss"] for r in logs[0][0]] == [r["loss"] for r in logs[1][0]]
        np.testing.assert_array_equal(logs[0][1], logs[1][1])

    def test_log_file(self, tmp_path):
        ds = separable_dataset(500, 2)
        net = init_network(Architecture(8, 5, 8, 1), seed=0)
        train(net, ds, TrainConfig(epochs=2, batch_size=100, log_path=str(tmp_path / "l.csv")))
        lines = (tmp_path / "l.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss,val_recall,val_precision,val_auc" and len(lines) == 3

    def test_dimension_mismatch(self):
        ds = separable_dataset(100, 0)
        net = init_network(Architecture(6, 5, 8, 1), seed=0)
        with pytest.raises(NetworkError):
            train(net, ds, TrainConfig(epochs=1))


class TestDetect:
    def test_support(self):
        idx, n = detect(np.array([0.7, 0.2, 0.9]))
        np.testing.assert_array_equal(idx, [0, 2])
        assert n == 2

    def test_empty(self):
        idx, n = detect(np.array([0.1, 0.4]))
        assert n == 0 and idx.size == 0

    def test_closed_threshold(self):
        idx, _ = detect(np.array([0.5, 0.49999]))
        np.testing.assert_array_equal(idx, [0])

    def test_batch(self):
        hard, n = detect(np.array([[0.6, 0.1], [0.5, 0.5]]))
        np.testing.assert_array_equal(hard, [[1, 0], [1, 1]])
        np.testing.assert_array_equal(n, [1, 2])


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        ds = separable_dataset(300, 0)
        net = init_network(Architecture(8, 5, 8, 2, block_widths=(10, 9, 8, 4)), seed=0)
        state = AdamState()
        net, _ = train(net, ds, TrainConfig(epochs=1, batch_size=50), state=state)
        save_checkpoint(net, tmp_path / "m.nmnn", state, extra={"tag": 1})
        back, st, extra = load_checkpoint(tmp_path / "m.nmnn")
        assert extra == {"tag": 1} and st.t == state.t
        np.testing.assert_array_equal(predict(back, ds.features), predict(net, ds.features))
        for k in net.params:
            np.testing.assert_array_equal(st.m[k], state.m[k].astype(np.float32))

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "m.nmnn"
        p.write_bytes(b"ABCD" + bytes(20))
        with pytest.raises(NetworkError, match="magic"):
            load_checkpoint(p)

    def test_truncated(self, tmp_path):
        net = small_net(dtype=np.float32)
        p = tmp_path / "m.nmnn"
        save_checkpoint(net, p)
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(NetworkError, match="truncated"):
            load_checkpoint(p)
