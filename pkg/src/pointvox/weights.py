"""Binary weight-file serialization and synthetic weight bundles.

File layout (all little-endian):

    magic  b"PVWB"
    u32    format version (1)
    u32    section count
    per section:
        u32    name length, then UTF-8 name bytes
        4s     kind tag: b"MLP\\0", b"ATT\\0", or b"RPN\\0"
        u32    payload byte length
        bytes  payload

MLP payload:   u32 n_layers; per layer u32 in_dim, u32 out_dim;
               then per layer float32 W (row-major, out x in) and float32 b.
ATT payload:   u32 d_f, d_k, d_v; float32 W_q, W_k, W_v (row-major).
RPN payload:   f32 eps; u32 n_blocks; per block u32 in_dim, out_dim;
               then per block float32 W, bias, scale, shift, mean, var.

Weights are stored as 32-bit floats, so a save/load round-trip is exact
whenever the in-memory values are float32-representable (the synthetic
generators below always produce such values).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .aggregate import AttentionWeights, NormParams, ResidualBlock, ResidualPointNetWeights
from .sampling import MlpWeights

MAGIC = b"PVWB"
VERSION = 1

_TAG_MLP = b"MLP\0"
_TAG_ATT = b"ATT\0"
_TAG_RPN = b"RPN\0"

WeightSection = MlpWeights | AttentionWeights | ResidualPointNetWeights


class WeightFormatError(ValueError):
    """Raised when a weight file is malformed."""


def _f32(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _read_f32(buf: io.BytesIO, count: int, shape) -> np.ndarray:
    raw = buf.read(4 * count)
    if len(raw) != 4 * count:
        raise WeightFormatError(f"truncated float block: wanted {4 * count} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


def _read_u32(buf: io.BytesIO, n: int = 1):
    raw = buf.read(4 * n)
    if len(raw) != 4 * n:
        raise WeightFormatError("truncated header field")
    vals = struct.unpack(f"<{n}I", raw)
    return vals[0] if n == 1 else vals


def _encode_mlp(w: MlpWeights) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(w.layers)))
    for mat, bias in w.layers:
        out.write(struct.pack("<II", mat.shape[1], mat.shape[0]))
    for mat, bias in w.layers:
        out.write(_f32(mat))
        out.write(_f32(bias))
    return out.getvalue()


def _decode_mlp(payload: bytes) -> MlpWeights:
    buf = io.BytesIO(payload)
    n_layers = _read_u32(buf)
    dims = [_read_u32(buf, 2) for _ in range(n_layers)]
    layers = []
    for d_in, d_out in dims:
        mat = _read_f32(buf, d_in * d_out, (d_out, d_in))
        bias = _read_f32(buf, d_out, (d_out,))
        layers.append((mat, bias))
    return MlpWeights(tuple(layers))


def _encode_att(w: AttentionWeights) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<III", w.feat_dim, w.key_dim, w.value_dim))
    for mat in (w.w_q, w.w_k, w.w_v):
        out.write(_f32(mat))
    return out.getvalue()


def _decode_att(payload: bytes) -> AttentionWeights:
    buf = io.BytesIO(payload)
    d_f, d_k, d_v = _read_u32(buf, 3)
    w_q = _read_f32(buf, d_k * d_f, (d_k, d_f))
    w_k = _read_f32(buf, d_k * d_f, (d_k, d_f))
    w_v = _read_f32(buf, d_v * d_f, (d_v, d_f))
    return AttentionWeights(w_q, w_k, w_v)


def _encode_rpn(w: ResidualPointNetWeights) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<f", w.eps))
    out.write(struct.pack("<I", len(w.blocks)))
    for blk in w.blocks:
        out.write(struct.pack("<II", blk.weight.shape[1], blk.weight.shape[0]))
    for blk in w.blocks:
        out.write(_f32(blk.weight))
        for arr in (blk.bias, blk.norm.scale, blk.norm.shift, blk.norm.mean, blk.norm.var):
            out.write(_f32(arr))
    return out.getvalue()


def _decode_rpn(payload: bytes) -> ResidualPointNetWeights:
    buf = io.BytesIO(payload)
    raw = buf.read(4)
    if len(raw) != 4:
        raise WeightFormatError("truncated eps field")
    (eps,) = struct.unpack("<f", raw)
    n_blocks = _read_u32(buf)
    dims = [_read_u32(buf, 2) for _ in range(n_blocks)]
    blocks = []
    for d_in, d_out in dims:
        weight = _read_f32(buf, d_in * d_out, (d_out, d_in))
        bias, scale, shift, mean, var = (_read_f32(buf, d_out, (d_out,)) for _ in range(5))
        blocks.append(ResidualBlock(weight, bias, NormParams(scale, shift, mean, var)))
    return ResidualPointNetWeights(tuple(blocks), eps=float(eps))


_ENCODERS = {
    MlpWeights: (_TAG_MLP, _encode_mlp),
    AttentionWeights: (_TAG_ATT, _encode_att),
    ResidualPointNetWeights: (_TAG_RPN, _encode_rpn),
}
_DECODERS = {
    _TAG_MLP: _decode_mlp,
    _TAG_ATT: _decode_att,
    _TAG_RPN: _decode_rpn,
}


def save_weights(path, sections: dict[str, WeightSection]) -> None:
    """Write named weight sections to ``path`` in the documented binary format."""
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(sections)))
    for name, section in sections.items():
        tag, encode = _ENCODERS[type(section)]
        payload = encode(section)
        encoded_name = name.encode("utf-8")
        out.write(struct.pack("<I", len(encoded_name)))
        out.write(encoded_name)
        out.write(tag)
        out.write(struct.pack("<I", len(payload)))
        out.write(payload)
    Path(path).write_bytes(out.getvalue())


def load_weights(path) -> dict[str, WeightSection]:
    """Read a weight file back into a name -> section mapping."""
    data = Path(path).read_bytes()
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise WeightFormatError(f"{path}: bad magic, not a weight file")
    version = _read_u32(buf)
    if version != VERSION:
        raise WeightFormatError(f"{path}: unsupported format version {version}")
    count = _read_u32(buf)
    sections: dict[str, WeightSection] = {}
    for _ in range(count):
        name_len = _read_u32(buf)
        name = buf.read(name_len).decode("utf-8")
        tag = buf.read(4)
        decoder = _DECODERS.get(tag)
        if decoder is None:
            raise WeightFormatError(f"{path}: unknown section kind {tag!r} for {name!r}")
        payload_len = _read_u32(buf)
        payload = buf.read(payload_len)
        if len(payload) != payload_len:
            raise WeightFormatError(f"{path}: truncated payload for section {name!r}")
        sections[name] = decoder(payload)
    return sections


@dataclass(frozen=True)
class PipelineWeights:
    """All forward-pass weights used by the end-to-end pipeline.

    ``sa_seg[0]`` is None: the first selection stage uses plain furthest point
    sampling and needs no score head.
    """

    sa_seg: tuple[MlpWeights | None, ...]
    sa_group: tuple[MlpWeights, ...]
    attention: AttentionWeights
    pointnet: ResidualPointNetWeights
    roi_group: MlpWeights
    roi_out: MlpWeights

    @property
    def keypoint_feature_dim(self) -> int:
        # four voxel strides + the raw branch, each pooled by the pointnet,
        # plus the BEV sample (same width as the voxel features)
        return 5 * self.pointnet.out_dim + self.attention.feat_dim

    def save(self, path) -> None:
        sections: dict[str, WeightSection] = {}
        for i, w in enumerate(self.sa_seg, start=1):
            if w is not None:
                sections[f"sa{i}.seg"] = w
        for i, w in enumerate(self.sa_group, start=1):
            sections[f"sa{i}.group"] = w
        sections["attention"] = self.attention
        sections["pointnet"] = self.pointnet
        sections["roi.group"] = self.roi_group
        sections["roi.out"] = self.roi_out
        save_weights(path, sections)

    @classmethod
    def load(cls, path, num_layers: int = 4) -> "PipelineWeights":
        sections = load_weights(path)
        try:
            sa_seg = tuple(
                sections.get(f"sa{i}.seg") for i in range(1, num_layers + 1)
            )
            sa_group = tuple(sections[f"sa{i}.group"] for i in range(1, num_layers + 1))
            return cls(
                sa_seg=sa_seg,
                sa_group=sa_group,
                attention=sections["attention"],
                pointnet=sections["pointnet"],
                roi_group=sections["roi.group"],
                roi_out=sections["roi.out"],
            )
        except KeyError as exc:
            raise WeightFormatError(f"{path}: missing section {exc}") from exc

    @classmethod
    def synthetic(
        cls,
        seed: int,
        raw_feat_dim: int = 1,
        hidden: int = 64,
        sa_out: int = 32,
        attn_key_dim: int = 16,
        attn_value_dim: int = 16,
        pointnet_out: int = 32,
        roi_group_out: int = 32,
        roi_hidden: int = 128,
        roi_out_dim: int = 256,
        roi_resolution: int = 6,
        num_layers: int = 4,
    ) -> "PipelineWeights":
        """Deterministic random weights sized for the standard pipeline wiring.

        Layer 1 consumes raw [xyz | feat] vectors; later stages consume the
        previous stage's pooled features (2 * sa_out wide). Voxel features
        from mean voxelization are (3 + raw_feat_dim) wide, which fixes the
        attention input width for all five aggregation branches.
        """
        rng = np.random.default_rng(seed)
        point_dim = 3 + raw_feat_dim
        sa_seg: list[MlpWeights | None] = [None]
        sa_group: list[MlpWeights] = [MlpWeights.random((point_dim + 3, hidden, sa_out), rng)]
        stage_dim = 2 * sa_out
        for _ in range(1, num_layers):
            sa_seg.append(MlpWeights.random((stage_dim, hidden, 1), rng))
            sa_group.append(MlpWeights.random((stage_dim + 3, hidden, sa_out), rng))
            stage_dim = 2 * sa_out
        voxel_dim = point_dim
        attention = AttentionWeights.random(voxel_dim, attn_key_dim, attn_value_dim, rng)
        pointnet = ResidualPointNetWeights.random(
            (attn_value_dim + voxel_dim, pointnet_out, pointnet_out), rng
        )
        kp_dim = 5 * pointnet.out_dim + voxel_dim
        roi_group = MlpWeights.random((kp_dim + 3, roi_hidden, roi_group_out), rng)
        roi_in = roi_resolution**3 * 2 * roi_group_out
        roi_out = MlpWeights.random((roi_in, roi_hidden, roi_out_dim), rng)
        return cls(
            sa_seg=tuple(sa_seg),
            sa_group=tuple(sa_group),
            attention=attention,
            pointnet=pointnet,
            roi_group=roi_group,
            roi_out=roi_out,
        )
