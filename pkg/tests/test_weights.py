import numpy as np
import pytest

from pointvox.aggregate import AttentionWeights, ResidualPointNetWeights
from pointvox.sampling import MlpWeights
from pointvox.weights import (
    PipelineWeights,
    WeightFormatError,
    load_weights,
    save_weights,
)


def assert_mlp_equal(a: MlpWeights, b: MlpWeights):
    assert len(a.layers) == len(b.layers)
    for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
        np.testing.assert_array_equal(wa, wb)
        np.testing.assert_array_equal(ba, bb)


class TestWeightFile:
    def test_round_trip_all_kinds(self, tmp_path):
        rng = np.random.default_rng(0)
        mlp = MlpWeights.random((5, 8, 3), rng)
        att = AttentionWeights.random(4, 6, 7, rng)
        rpn = ResidualPointNetWeights.random((4, 9, 9), rng)
        path = tmp_path / "w.bin"
        save_weights(path, {"head": mlp, "attention": att, "pointnet": rpn})
        back = load_weights(path)
        assert set(back) == {"head", "attention", "pointnet"}
        assert_mlp_equal(back["head"], mlp)
        np.testing.assert_array_equal(back["attention"].w_q, att.w_q)
        np.testing.assert_array_equal(back["attention"].w_v, att.w_v)
        got_rpn = back["pointnet"]
        assert got_rpn.eps == np.float32(rpn.eps)
        for ga, gb in zip(got_rpn.blocks, rpn.blocks):
            np.testing.assert_array_equal(ga.weight, gb.weight)
            np.testing.assert_array_equal(ga.norm.var, gb.norm.var)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(WeightFormatError, match="bad magic"):
            load_weights(path)

    def test_truncated_payload(self, tmp_path):
        rng = np.random.default_rng(1)
        path = tmp_path / "w.bin"
        save_weights(path, {"head": MlpWeights.random((4, 2), rng)})
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(WeightFormatError):
            load_weights(path)

    def test_empty_file_is_rejected(self, tmp_path):
        path = tmp_path / "w.bin"
        path.write_bytes(b"")
        with pytest.raises(WeightFormatError):
            load_weights(path)


class TestPipelineWeights:
    def test_synthetic_is_deterministic(self):
        a = PipelineWeights.synthetic(7)
        b = PipelineWeights.synthetic(7)
        np.testing.assert_array_equal(a.attention.w_q, b.attention.w_q)
        assert_mlp_equal(a.sa_group[2], b.sa_group[2])
        c = PipelineWeights.synthetic(8)
        assert not np.array_equal(a.attention.w_q, c.attention.w_q)

    def test_dimension_wiring(self):
        w = PipelineWeights.synthetic(0, raw_feat_dim=1, sa_out=16, pointnet_out=24)
        assert w.sa_seg[0] is None
        assert w.sa_group[0].in_dim == 4 + 3
        # later stages consume the previous stage's 2 * sa_out features
        for i in (1, 2, 3):
            assert w.sa_seg[i].in_dim == 32
            assert w.sa_seg[i].out_dim == 1
            assert w.sa_group[i].in_dim == 32 + 3
        assert w.attention.feat_dim == 4
        assert w.pointnet.in_dim == w.attention.value_dim + 4
        assert w.keypoint_feature_dim == 5 * 24 + 4
        assert w.roi_group.in_dim == w.keypoint_feature_dim + 3
        assert w.roi_out.in_dim == 216 * 2 * w.roi_group.out_dim
        assert w.roi_out.out_dim == 256

    def test_save_load_round_trip(self, tmp_path):
        w = PipelineWeights.synthetic(3, hidden=8, sa_out=4, roi_hidden=8, roi_out_dim=16,
                                      attn_key_dim=4, attn_value_dim=4, pointnet_out=4,
                                      roi_group_out=4, roi_resolution=2)
        path = tmp_path / "pipeline.bin"
        w.save(path)
        back = PipelineWeights.load(path)
        assert back.sa_seg[0] is None
        assert_mlp_equal(back.sa_seg[1], w.sa_seg[1])
        assert_mlp_equal(back.roi_out, w.roi_out)
        np.testing.assert_array_equal(back.attention.w_k, w.attention.w_k)
        np.testing.assert_array_equal(back.pointnet.blocks[0].weight, w.pointnet.blocks[0].weight)

    def test_load_missing_section(self, tmp_path):
        rng = np.random.default_rng(2)
        path = tmp_path / "incomplete.bin"
        save_weights(path, {"sa1.group": MlpWeights.random((4, 2), rng)})
        with pytest.raises(WeightFormatError, match="missing section"):
            PipelineWeights.load(path)
