import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trimodal.augment import AugmentConfig, compose_batch, mix_modalities, zero_mask
from trimodal.errors import InvalidArgument


def batch(n=8, seed=0):
    gen = np.random.default_rng(seed)
    return {"audio": gen.standard_normal((n, 3, 10)).astype(np.float32),
            "face": gen.uniform(0.1, 1, (n, 2, 1, 4, 4)).astype(np.float32),
            "road": gen.uniform(0.1, 1, (n, 2, 1, 4, 4)).astype(np.float32),
            "label": np.arange(n) % 2}


def test_config_validation():
    with pytest.raises(InvalidArgument):
        AugmentConfig(p_zero=1.5)
    with pytest.raises(InvalidArgument):
        AugmentConfig(mix_low=0.0)
    with pytest.raises(InvalidArgument):
        AugmentConfig.from_dict({"p_mixx": 0.1})


def test_alpha_one_is_identity():
    b = batch()
    out = mix_modalities(b, np.random.default_rng(0), AugmentConfig(p_mix=1.0), alpha=1.0)
    for k in ("audio", "face", "road"):
        np.testing.assert_array_equal(out[k], b[k])


def test_alpha_zero_takes_same_label_partner():
    b = batch()
    log = []
    out = mix_modalities(b, np.random.default_rng(1), AugmentConfig(p_mix=1.0), log, alpha=0.0)
    assert log
    for line in log:
        i, key, op, params = line.split("\t")
        j = int(params.split("partner=")[1])
        assert op == "mix" and b["label"][int(i)] == b["label"][j]
        np.testing.assert_array_equal(out[key][int(i)], b[key][j])


def test_mix_replays_from_log():
    b = batch(12, seed=3)
    log = []
    out = mix_modalities(b, np.random.default_rng(5), AugmentConfig(p_mix=0.6), log)
    touched = set()
    for line in log:
        i, key, _, params = line.split("\t")
        fields = dict(kv.split("=") for kv in params.split(","))
        a, j = float(fields["alpha"]), int(fields["partner"])
        i = int(i)
        touched.add((i, key))
        np.testing.assert_allclose(out[key][i], a * b[key][i] + (1 - a) * b[key][j], atol=1e-6)
        assert 0.3 <= a <= 0.7
    for key in ("audio", "face", "road"):
        for i in range(12):
            if (i, key) not in touched:
                np.testing.assert_array_equal(out[key][i], b[key][i])
    np.testing.assert_array_equal(out["label"], b["label"])


def test_singleton_class_left_unmixed():
    b = batch(3)
    b["label"] = np.array([0, 0, 1])
    out = mix_modalities(b, np.random.default_rng(0), AugmentConfig(p_mix=1.0), alpha=0.0)
    np.testing.assert_array_equal(out["audio"][2], b["audio"][2])


def test_zero_mask_extremes():
    b = batch()
    same = zero_mask(b, np.random.default_rng(0), AugmentConfig(p_zero=0.0))
    for k in ("audio", "face", "road"):
        np.testing.assert_array_equal(same[k], b[k])
    out = zero_mask(b, np.random.default_rng(0), AugmentConfig(p_zero=1.0))
    alive = np.stack([np.any(out[k].reshape(8, -1), axis=1) for k in ("audio", "face", "road")], 1)
    np.testing.assert_array_equal(alive.sum(axis=1), 1)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.integers(0, 10_000))
def test_guard_keeps_a_live_modality(p, seed):
    b = batch(6, seed=seed % 7)
    b["audio"][0] = 0   # already-dead modality cannot be the restored one
    out = zero_mask(b, np.random.default_rng(seed), AugmentConfig(p_zero=p))
    for i in range(6):
        assert any(np.any(out[k][i]) for k in ("audio", "face", "road"))
    np.testing.assert_array_equal(out["label"], b["label"])


def test_partial_batch_keys():
    b = batch()
    b["road"] = None
    out = zero_mask(b, np.random.default_rng(0), AugmentConfig(p_zero=1.0))
    assert out["road"] is None


def test_compose_sizes_and_labels():
    b = batch(8)
    out0 = compose_batch(b, np.random.default_rng(0), AugmentConfig(copies=0))
    assert len(out0["label"]) == 8
    assert sorted(map(tuple, out0["audio"].reshape(8, -1))) == sorted(map(tuple, b["audio"].reshape(8, -1)))
    out = compose_batch(b, np.random.default_rng(0), AugmentConfig(copies=1))
    assert len(out["label"]) == 16
    assert np.bincount(out["label"]).tolist() == [8, 8]


def test_compose_deterministic_and_logged():
    b = batch(8)
    log1, log2 = [], []
    x = compose_batch(b, np.random.default_rng(9), AugmentConfig(p_zero=0.5, p_mix=0.5), log1)
    y = compose_batch(b, np.random.default_rng(9), AugmentConfig(p_zero=0.5, p_mix=0.5), log2)
    for k in x:
        np.testing.assert_array_equal(x[k], y[k])
    assert log1 == log2 and log1[-1].startswith("-1\t*\tpermute\t")
    for line in log1[:-1]:
        idx, modality, op, _ = line.split("\t")
        assert 8 <= int(idx) < 16 and modality in ("audio", "face", "road") and op in ("mix", "zero")
