import itertools

import numpy as np
import pytest

from trimodal import diffcore as dc
from trimodal.config import RunConfig
from trimodal.errors import CheckpointIncompatible, InvalidArgument
from trimodal.model import (ABLATION_MASKS, ModelConfig, TriModalNet, load_checkpoint, mask_name,
                            modulate, pairwise_attention, parse_mask, save_checkpoint,
                            score_aggregate)

DESK = RunConfig.for_profile("desk").model
SMALL = ModelConfig(frame_channels=1, n_mfcc=5, stem_channels=4, stem_kernel=4, stem_stride=4,
                    block_channels=(4, 4), block_strides=(2, 1), stage2_channels=6,
                    stage3_channels=8, audio_channels=(4, 6, 8, 6), latent_dim=3)


def inputs(n=3, seed=0, t=24, f=4, side=16):
    gen = np.random.default_rng(seed)
    return {"audio": gen.standard_normal((n, SMALL.n_mfcc, t)).astype(np.float32),
            "face": gen.standard_normal((n, f, 1, side, side)).astype(np.float32),
            "road": gen.standard_normal((n, f, 1, side, side)).astype(np.float32)}


def net(mask="A-V-R", seed=0, cfg=SMALL, dtype=np.float32):
    return TriModalNet(cfg, mask, np.random.default_rng(seed), dtype=dtype)


def val(x):
    return np.asarray(x.value, dtype=np.float64)


# -- masks and config ---------------------------------------------------------------------

@pytest.mark.parametrize("raw,expected", [("A-V-R", ("A", "V", "R")), ("rv", ("V", "R")),
                                          ({"A"}, ("A",)), ("V,A", ("A", "V"))])
def test_parse_mask(raw, expected):
    assert parse_mask(raw) == expected


@pytest.mark.parametrize("bad", ["", "X", "A-Q"])
def test_parse_mask_rejects(bad):
    with pytest.raises(InvalidArgument):
        parse_mask(bad)


def test_ablation_order():
    assert ABLATION_MASKS == ("A-V-R", "A-V", "A-R", "V-R", "A", "V", "R")


def test_config_validation():
    with pytest.raises(InvalidArgument):
        ModelConfig(audio_channels=(1, 2, 3))
    with pytest.raises(InvalidArgument):
        ModelConfig(stem_channels=3, expansion=1)
    with pytest.raises(InvalidArgument):
        ModelConfig.from_dict({"widht": 3})


def test_parameter_names_unique_and_per_pair_fusion():
    m = net()
    names = [p.name for p in m.parameters()]
    assert len(names) == len(set(names))
    pairs = {n.split(".")[1] for n in names if n.startswith("fusion.")}
    assert pairs == {"AV", "AR", "VA", "VR", "RA", "RV"}
    assert not any(n.startswith("fusion.") for n in (p.name for p in net("V").parameters()))


# -- blocks ---------------------------------------------------------------------------------

def test_face_block_zero_weights_is_identity():
    m = net("V")
    for p in m.parameters():
        if p.name.startswith("face.block1."):
            p.value[...] = 0
    x = np.random.default_rng(1).standard_normal((2, 4, 4, 4)).astype(np.float32)
    out = val(m.efficient_block(x, "face.block1", "face", 1, train=True))
    np.testing.assert_allclose(out, x, atol=1e-6)


def test_zero_input_gives_zero_output():
    m = net("V")
    for name, p in m.params.items():
        if name.endswith(".beta") or name.endswith(".b"):
            assert not np.any(p.value)
    out = val(m.efficient_block(np.zeros((2, 4, 4, 4), np.float32), "face.block1", "face", 1, True))
    assert not np.any(out)


def test_road_gates_start_at_one_half():
    m = net("R")
    x = np.random.default_rng(2).standard_normal((2, 4, 4, 4)).astype(np.float32)
    gated = val(m.efficient_block(x, "road.block1", "road", 1, train=False))
    # Disable both gates by pushing them to 1 and compare: zero params give 0.5 * 0.5.
    m.params["road.block1.gate_c.b"].value[...] = 50
    m.params["road.block1.gate_s.b"].value[...] = 50
    ungated = val(m.efficient_block(x, "road.block1", "road", 1, train=False))
    np.testing.assert_allclose(gated - x, 0.25 * (ungated - x), atol=1e-5)


def test_frame_extractor_shares_parameters():
    m = net("V")
    frames = inputs()["face"]
    frames[:, 1] = frames[:, 0]
    out = val(m.frame_extractor(frames, "face", train=False))
    assert out.shape == (3, 4, 4)
    np.testing.assert_allclose(out[:, 0], out[:, 1], atol=1e-6)
    perm = [2, 0, 3, 1]
    permuted = val(m.frame_extractor(frames[:, perm], "face", train=False))
    np.testing.assert_allclose(permuted, out[:, perm], atol=1e-6)


def test_desk_extractor_shape():
    m = TriModalNet(DESK, "V")
    out = m.frame_extractor(np.zeros((1, 8, 1, 32, 32), np.float32), "face", train=False)
    assert out.shape == (1, 8, DESK.block_channels[-1])


def test_stage2_lengths():
    m = net()
    x = inputs(t=32)
    assert m.stage2("A", x["audio"], False).shape == (3, 2, 6)     # 32 -> 16 -> 8 -> 4 -> 2
    assert m.stage2("V", x["face"], False).shape == (3, 4, 6)      # same padding keeps F
    with pytest.raises(InvalidArgument):
        m.stage2("A", inputs(t=8)["audio"], False)


def test_stage2_zero_input_zero_features():
    m = net("V")
    out = val(m.stage2("V", np.zeros((2, 4, 1, 16, 16), np.float32), train=False))
    assert not np.any(out)


# -- fusion -----------------------------------------------------------------------------------

def test_attention_single_step_is_one():
    a = val(pairwise_attention(np.ones((1, 4)), np.ones((1, 4)), np.eye(4), np.eye(4)))
    np.testing.assert_array_equal(a, [[1.0]])


def test_attention_hand_computed():
    phi_i = np.array([[1.0, 0.0], [0.0, 1.0]])
    phi_j = np.array([[2.0, 0.0], [0.0, 0.0]])
    a = val(pairwise_attention(phi_i, phi_j, np.eye(2), np.eye(2)))
    s = 2 / np.sqrt(2)
    row0 = np.exp([s, 0]) / np.exp([s, 0]).sum()
    np.testing.assert_allclose(a, [row0, [0.5, 0.5]], atol=1e-12)


def test_attention_rows_and_scores_sum_to_one():
    gen = np.random.default_rng(0)
    for _ in range(10):
        a = val(pairwise_attention(gen.standard_normal((2, 5, 4)), gen.standard_normal((2, 7, 3)),
                                   gen.standard_normal((4, 6)), gen.standard_normal((3, 6))))
        np.testing.assert_allclose(a.sum(axis=-1), 1, atol=1e-6)
        np.testing.assert_allclose(val(score_aggregate(a)).sum(axis=-1), 1, atol=1e-6)


def test_score_aggregate_examples():
    row = np.array([[0.2, 0.3, 0.5]])
    np.testing.assert_allclose(val(score_aggregate(row)), row[0])
    np.testing.assert_allclose(val(score_aggregate(np.full((4, 3), 1 / 3))), [1 / 3] * 3)


def test_modulate_examples():
    phi = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_array_equal(val(modulate(phi, [])), phi)
    np.testing.assert_allclose(val(modulate(phi, [np.full(4, 0.25)])), phi, atol=1e-12)
    out = val(modulate(phi, [np.array([1.0, 0, 0, 0])]))
    np.testing.assert_allclose(out[0], 4 * phi[0])
    assert not np.any(out[1:])


def test_gate_mean_is_one():
    m = net()
    phis = {k: m.stage2(k, inputs()[v], False) for k, v in (("A", "audio"), ("V", "face"), ("R", "road"))}
    for k, s in m.fusion_scores(phis).items():
        t = phis[k].shape[1]
        gate = t * np.mean([val(x) for x in s], axis=0)
        np.testing.assert_allclose(gate.mean(axis=-1), 1, atol=1e-6)


def test_scores_invariant_to_query_permutation():
    m = net(dtype=np.float64)
    x = inputs()
    phis = {k: m.stage2(k, x[v], False) for k, v in (("A", "audio"), ("V", "face"), ("R", "road"))}
    base = m.fusion_scores(phis)
    perm = np.random.default_rng(3).permutation(phis["V"].shape[1])
    shuffled = dict(phis, V=dc.autograd.Node(val(phis["V"])[:, perm]))
    moved = m.fusion_scores(shuffled)
    for mine in ("A", "R"):
        # the contribution V makes to the other modalities' gates
        idx = [j for j in phis if j != mine].index("V")
        np.testing.assert_allclose(val(moved[mine][idx]), val(base[mine][idx]), atol=1e-12)


# -- forward ------------------------------------------------------------------------------------

@pytest.mark.parametrize("mask", ABLATION_MASKS)
def test_forward_shapes_every_mask(mask):
    out = val(net(mask)(inputs(), train=False))
    assert out.shape == (3, 2) and np.all(np.isfinite(out))


def test_desk_forward_shape():
    m = TriModalNet(DESK)
    gen = np.random.default_rng(0)
    x = {"audio": gen.standard_normal((2, 13, 118)), "face": gen.standard_normal((2, 8, 1, 32, 32)),
         "road": gen.standard_normal((2, 8, 1, 32, 32))}
    assert m(x).shape == (2, 2)


def test_unimodal_ignores_other_inputs():
    m = net("V")
    x = inputs()
    y = dict(x, audio=x["audio"] + 10, road=None)
    np.testing.assert_array_equal(val(m(x)), val(m(y)))


@pytest.mark.parametrize("mask", ["A", "V", "R"])
def test_unimodal_forward_equals_fusion_free(mask):
    m = net(mask)
    x = inputs()
    np.testing.assert_array_equal(val(m(x, fuse=True)), val(m(x, fuse=False)))


def test_eval_logits_ignore_dropout_rng():
    m = net()
    x = inputs()
    a = val(m(x, train=False, rng=np.random.default_rng(0)))
    b = val(m(x, train=False, rng=np.random.default_rng(1)))
    np.testing.assert_array_equal(a, b)


def test_missing_input_and_empty_mask():
    with pytest.raises(InvalidArgument):
        net("A-V")({"audio": inputs()["audio"]})
    with pytest.raises(InvalidArgument):
        net("")


def test_zeroed_modality_gives_zero_stage1_activity():
    m = net("V")
    out = val(m.frame_extractor(np.zeros((2, 4, 1, 16, 16), np.float32), "face", train=False))
    assert not np.any(out)


# -- checkpoints -------------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    m = net()
    m.fit_input_stats(inputs())
    m(inputs(), train=True, rng=np.random.default_rng(0))   # move BN running stats
    save_checkpoint(m, tmp_path / "ck", step=7)
    back = load_checkpoint(tmp_path / "ck", mask="A-V-R")
    x = m.standardize(inputs(seed=5))
    np.testing.assert_array_equal(val(m(x)), val(back(x)))
    assert back.config_hash() == m.config_hash()


def test_checkpoint_mask_mismatch(tmp_path):
    save_checkpoint(net("V"), tmp_path / "ck")
    with pytest.raises(CheckpointIncompatible, match="checkpoint-incompatible"):
        load_checkpoint(tmp_path / "ck", mask="A-V-R")
    with pytest.raises(CheckpointIncompatible):
        load_checkpoint(tmp_path / "ck", config=DESK)


def test_checkpoint_shape_tamper(tmp_path):
    from trimodal import tmf
    save_checkpoint(net("A"), tmp_path / "ck")
    tmf.save(tmp_path / "ck" / "head.w.tmf", np.zeros((3, 3)))
    with pytest.raises(CheckpointIncompatible):
        load_checkpoint(tmp_path / "ck")


def test_mask_name_roundtrip():
    for m in ABLATION_MASKS:
        assert mask_name(parse_mask(m)) == m
    assert all(mask_name("".join(p)) == "A-V-R" for p in itertools.permutations("AVR"))
