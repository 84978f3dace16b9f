import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gfmud.channel import InfScenario, MacroChannelConfig
from gfmud.codes import CodeSet, select_musa_sequences
from gfmud.datagen import (
    ActivityModel,
    DataConfig,
    DatasetError,
    FormatError,
    TruncationError,
    VersionError,
    generate_dataset,
    load_dataset,
    sample_activity,
    save_dataset,
    stack_features_mmv,
    stack_features_smv,
    synthesize_pilot,
    unstack_features_smv,
)


@pytest.fixture(scope="module")
def musa():
    return select_musa_sequences(0.6, 21, seed=0, K=14).to_codeset()


class TestActivity:
    def test_full(self):
        a = sample_activity(6, ActivityModel("fixed", (6,)), size=5, seed=0)
        np.testing.assert_array_equal(a, 1)

    def test_exact_weight(self):
        a = sample_activity(90, ActivityModel("fixed", (3,)), size=2000, seed=1)
        np.testing.assert_array_equal(a.sum(axis=1), 3)

    def test_bernoulli_mean(self):
        a = sample_activity(21, ActivityModel("bernoulli", p=1 / 21, require_active=False),
                            size=10**6, seed=2)
        assert a.sum(axis=1).mean() == pytest.approx(1.0, abs=0.01)

    def test_bernoulli_nonempty(self):
        a = sample_activity(21, ActivityModel("bernoulli", p=0.02), size=5000, seed=3)
        assert (a.sum(axis=1) >= 1).all()

    def test_uniform_support(self):
        a = sample_activity(7, ActivityModel("fixed", (2,)), size=70000, seed=4)
        counts = a.sum(axis=0)
        np.testing.assert_allclose(counts, 70000 * 2 / 7, rtol=0.03)

    def test_infeasible(self):
        with pytest.raises(DatasetError):
            sample_activity(5, ActivityModel("fixed", (6,)))
        with pytest.raises(DatasetError):
            sample_activity(5, ActivityModel("bernoulli", p=0.0))


class TestPilot:
    def test_single_device(self):
        Phi = np.random.default_rng(0).normal(size=(4, 6)) + 0j
        a = np.zeros(6, dtype=int)
        a[2] = 1
        np.testing.assert_array_equal(synthesize_pilot(Phi, a, np.ones(6)), Phi[:, 2])

    def test_no_devices(self):
        Phi = np.ones((4, 6), dtype=complex)
        np.testing.assert_array_equal(synthesize_pilot(Phi, np.zeros(6), np.ones(6)), 0)

    def test_two_devices_sum(self):
        rng = np.random.default_rng(1)
        Phi = rng.normal(size=(5, 8)) + 1j * rng.normal(size=(5, 8))
        h = rng.normal(size=8) + 1j * rng.normal(size=8)
        a = np.zeros(8, dtype=int)
        a[[1, 6]] = 1
        y = synthesize_pilot(Phi, a, h)
        ref = np.array([Phi[k, 1] * h[1] + Phi[k, 6] * h[6] for k in range(5)])
        np.testing.assert_allclose(y, ref)

    def test_mmv_shape(self):
        Phi = np.ones((4, 6), dtype=complex)
        assert synthesize_pilot(Phi, np.ones(6), np.ones((6, 3))).shape == (4, 3)

    def test_dimension_mismatch(self):
        with pytest.raises(DatasetError):
            synthesize_pilot(np.ones((4, 6)), np.ones(5), np.ones(6))


class TestStacking:
    def test_smv_order(self):
        np.testing.assert_array_equal(stack_features_smv(np.array([1 + 2j, 3 - 1j])), [1, 3, 2, -1])

    def test_real_input(self):
        v = stack_features_smv(np.array([1.0, 2.0, 3.0]) + 0j)
        np.testing.assert_array_equal(v[3:], 0)

    def test_mmv_k1(self):
        a, b = 1 + 2j, 3 - 4j
        np.testing.assert_array_equal(stack_features_mmv(np.array([[a, b]])), [1, 2, 3, -4])

    def test_mmv_x1_matches_smv(self):
        y = np.array([1 + 2j, 3 - 1j, -2 + 0.5j])
        np.testing.assert_array_equal(stack_features_mmv(y[:, None]), stack_features_smv(y))

    def test_antenna_permutation(self):
        rng = np.random.default_rng(0)
        Y = rng.normal(size=(3, 4)) + 1j * rng.normal(size=(3, 4))
        perm = [2, 0, 3, 1]
        blocks = stack_features_mmv(Y).reshape(4, 6)
        np.testing.assert_array_equal(stack_features_mmv(Y[:, perm]).reshape(4, 6), blocks[perm])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.complex_numbers(max_magnitude=1e6, allow_nan=False, allow_infinity=False),
                min_size=1, max_size=20))
def test_stack_roundtrip(values):
    y = np.array(values, dtype=complex)
    np.testing.assert_array_equal(unstack_features_smv(stack_features_smv(y)), y)


class TestGenerate:
    def test_labels_weight(self, musa):
        ds = generate_dataset(DataConfig(musa, 1000, activity=ActivityModel("fixed", (2,)), seed=0))
        np.testing.assert_array_equal(ds.labels.sum(axis=1), 2)
        assert ds.features.shape == (1000, 28) and ds.features.dtype == np.float32

    def test_class_balance(self, musa):
        ds = generate_dataset(DataConfig(musa, 21000, activity=ActivityModel("fixed", (2,)), seed=1))
        np.testing.assert_allclose(ds.labels.sum(axis=0), 21000 * 2 / 21, rtol=0.05)

    def test_deterministic(self, musa):
        cfg = DataConfig(musa, 3000, seed=5, activity=ActivityModel("fixed", (1, 2)))
        a, b = generate_dataset(cfg), generate_dataset(cfg)
        assert a.features.tobytes() == b.features.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_workers_invariant(self, musa):
        cfg = DataConfig(musa, 5000, seed=6)
        a, b = generate_dataset(cfg), generate_dataset(cfg, workers=3)
        np.testing.assert_array_equal(a.features, b.features)

    def test_noiseless_matches_sensing_matrix(self, musa):
        # at very high SNR the features lie in the span of the active columns
        ds = generate_dataset(DataConfig(musa, 50, snr_db=300.0, seed=2,
                                         activity=ActivityModel("fixed", (1,))))
        Phi = musa.sensing_matrix()
        y = unstack_features_smv(ds.features.astype(float))
        for i in range(50):
            j = int(np.flatnonzero(ds.labels[i])[0])
            c = np.vdot(Phi[:, j], y[i]) / np.vdot(Phi[:, j], Phi[:, j])
            np.testing.assert_allclose(y[i], c * Phi[:, j], atol=1e-5 * np.abs(c))

    def test_snr_normalisation(self, musa):
        ds = generate_dataset(DataConfig(musa, 20000, snr_db=10.0, seed=3,
                                         activity=ActivityModel("fixed", (1,))))
        y = unstack_features_smv(ds.features.astype(float))
        # per resource: unit signal energy plus noise 0.1
        assert np.mean(np.abs(y) ** 2) == pytest.approx(1.1, rel=0.03)

    def test_mmv_features(self, musa):
        ds = generate_dataset(DataConfig(musa, 100, X=2, seed=0))
        assert ds.features.shape == (100, 56) and ds.mode == "mmv" and ds.K == 14

    @pytest.mark.parametrize("channel", [MacroChannelConfig(), InfScenario.preset("DH")])
    def test_large_scale_channels(self, musa, channel):
        ds = generate_dataset(DataConfig(musa, 500, channel=channel, seed=0))
        assert np.isfinite(ds.features).all()
        ds2 = generate_dataset(DataConfig(musa, 500, channel=channel, seed=0, normalize_power=False))
        assert np.isfinite(ds2.features).all()


class TestFile:
    def test_roundtrip(self, musa, tmp_path):
        ds = generate_dataset(DataConfig(musa, 300, seed=0, X=2))
        save_dataset(ds, tmp_path / "d.nmud")
        back = load_dataset(tmp_path / "d.nmud")
        assert back.features.tobytes() == ds.features.tobytes()
        assert back.labels.tobytes() == ds.labels.tobytes()
        assert back.X == 2 and back.config_hash == ds.config_hash
        np.testing.assert_array_equal(back.snr_db, ds.snr_db)

    def test_truncated(self, musa, tmp_path):
        ds = generate_dataset(DataConfig(musa, 50, seed=0))
        p = tmp_path / "d.nmud"
        save_dataset(ds, p)
        p.write_bytes(p.read_bytes()[:-100])
        with pytest.raises(TruncationError):
            load_dataset(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "d.nmud"
        p.write_bytes(b"XXXX" + bytes(60))
        with pytest.raises(FormatError):
            load_dataset(p)

    def test_bad_version(self, musa, tmp_path):
        ds = generate_dataset(DataConfig(musa, 5, seed=0))
        p = tmp_path / "d.nmud"
        save_dataset(ds, p)
        raw = bytearray(p.read_bytes())
        raw[4] = 9
        p.write_bytes(bytes(raw))
        with pytest.raises(VersionError):
            load_dataset(p)
