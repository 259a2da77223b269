"""Tests for the intra codec: mode syntax, RDO, partitioning and round trips."""

from __future__ import annotations

import numpy as np
import pytest

from itnn_codec.bitstream import BitReader, BitWriter
from itnn_codec.codec import (
    DEFAULT_MPM,
    NN_MODE,
    BlockRecord,
    RateDistortionConfig,
    decode_frame,
    decode_mode,
    encode_frame,
    encode_mode,
    measure_holes,
    mode_bits,
    mpm_list,
    pad_to_ctb,
    parse_container,
    rd_select,
    signalling_gate,
)
from itnn_codec.errors import (
    DimensionMismatchError,
    MalformedStreamError,
    ModelFormatError,
    ModeNotRepresentableError,
    ReconstructionMismatchError,
    TruncatedStreamError,
)
from itnn_codec.frame_io import LuminancePlane, psnr
from itnn_codec.intra_classic import DC, NUM_CLASSIC_MODES, PLANAR, VERTICAL, ReferenceSamples

from tests.helpers import SIZES, zero_network


def _constant(width, height, value=100):
    return LuminancePlane(np.full((height, width), value, dtype=np.uint8))


def _assert_tiles(records, width, height):
    covered = np.zeros((height, width), dtype=int)
    for record in records:
        covered[record.y : record.y + record.h, record.x : record.x + record.w] += 1
    assert np.all(covered == 1)


def test_lambda_rd():
    assert RateDistortionConfig(qp=12).lambda_rd == pytest.approx(0.57)
    assert RateDistortionConfig(qp=15).lambda_rd == pytest.approx(1.14)
    with pytest.raises(DimensionMismatchError):
        RateDistortionConfig(qp=256)


def test_mode_bit_examples():
    assert mode_bits(NN_MODE, True, DEFAULT_MPM) == 1
    assert mode_bits(PLANAR, False, DEFAULT_MPM) == 2
    assert mode_bits(DC, False, DEFAULT_MPM) == 3
    assert mode_bits(PLANAR, True, DEFAULT_MPM) == 3
    assert mode_bits(18, False, DEFAULT_MPM) == 6
    assert mode_bits(18, True, DEFAULT_MPM) == 7
    with pytest.raises(ModeNotRepresentableError):
        mode_bits(NN_MODE, False, DEFAULT_MPM)


@pytest.mark.parametrize("gate_open", [True, False])
@pytest.mark.parametrize("mpm", [DEFAULT_MPM, (10, 9, 11)])
def test_mode_syntax_round_trip(gate_open, mpm):
    modes = list(range(NUM_CLASSIC_MODES)) + ([NN_MODE] if gate_open else [])
    writer = BitWriter()
    for mode in modes:
        assert encode_mode(writer, mode, gate_open, mpm) == mode_bits(mode, gate_open, mpm)
    reader = BitReader(writer.to_bytes(), len(writer))
    assert [decode_mode(reader, gate_open, mpm) for _ in modes] == modes
    assert reader.remaining == 0


def test_gate_open_writes_itnn_flag_first():
    writer = BitWriter()
    encode_mode(writer, PLANAR, True, DEFAULT_MPM)
    assert writer.to_bytes() == bytes([0b00000000])
    assert len(writer) == 3
    writer = BitWriter()
    encode_mode(writer, NN_MODE, True, DEFAULT_MPM)
    assert writer.to_bytes() == bytes([0b10000000])


def test_signalling_gate():
    sizes = {(8, 8), (16, 16)}
    assert signalling_gate(8, 8, 8, 8, sizes)
    assert not signalling_gate(4, 8, 8, 8, sizes)
    assert not signalling_gate(8, 0, 8, 8, sizes)
    assert not signalling_gate(32, 32, 4, 4, sizes)


def test_mpm_derivation():
    assert mpm_list(None, None) == (PLANAR, DC, VERTICAL)
    assert mpm_list(NN_MODE, None) == (PLANAR, DC, VERTICAL)
    assert mpm_list(10, 10) == (10, 9, 11)
    assert mpm_list(2, 2) == (2, 33, 3)
    assert mpm_list(10, 26) == (10, 26, PLANAR)
    assert mpm_list(PLANAR, 26) == (PLANAR, 26, DC)


def test_rd_select_prefers_exact_cheap_dc():
    refs = ReferenceSamples(
        np.array([100, 90, 110, 90, 110, 100, 100, 100, 100], dtype=np.int32),
        np.array([110, 90, 110, 90, 100, 100, 100, 100], dtype=np.int32),
        np.ones(9, bool),
        np.ones(8, bool),
    )
    decision = rd_select(np.full((4, 4), 100), refs, None, {}, RateDistortionConfig(qp=4))
    assert decision.mode == DC
    assert decision.distortion == 0.0
    assert not decision.gate_open
    assert decision.d_nn is None
    assert decision.cost <= decision.costs.min()
    assert len(decision.costs) == NUM_CLASSIC_MODES


def test_rd_select_with_nn_candidate():
    recon = np.full((16, 16), 100)
    decoded = np.ones((16, 16), dtype=bool)
    decoded[8:12, 8:12] = False
    from itnn_codec.nn_predict import extract_context, preprocess

    context = preprocess(extract_context(recon, decoded, 8, 8, 4, 4))
    decision = rd_select(
        np.full((4, 4), 100),
        ReferenceSamples.constant(4, 4, 100),
        context,
        {(4, 4): zero_network(4, 4)},
        RateDistortionConfig(qp=32),
    )
    assert decision.gate_open
    assert decision.d_nn == 0.0
    assert decision.mode == NN_MODE
    assert len(decision.costs) == NUM_CLASSIC_MODES + 1


def test_pad_to_ctb_replicates_edges():
    samples = np.arange(70 * 50, dtype=np.int32).reshape(50, 70)
    padded = pad_to_ctb(samples)
    assert padded.shape == (64, 128)
    assert np.array_equal(padded[49:, 69], np.full(15, samples[49, 69]))


def test_measure_holes():
    decoded = np.zeros((64, 64), dtype=bool)
    decoded[:16, :] = True
    decoded[16:24, :16] = True
    # 8x8 block at (16, 16): left rows 16..31 decoded up to 23, above columns 8..31 all decoded
    assert measure_holes(decoded, 16, 16, 8, 8) == (8, 0)
    assert measure_holes(np.ones((64, 64), bool), 16, 16, 8, 8) == (0, 0)


def test_round_trip_without_nn(make_plane):
    plane = make_plane(64, 64, seed=3)
    result = encode_frame(plane, 27, False)
    assert result.payload_bits == result.rd_bits
    assert all(record.s < NN_MODE for record in result.records)
    assert all(record.d_nn is None for record in result.records)
    _assert_tiles(result.records, 64, 64)
    decoded = decode_frame(result.bitstream)
    assert np.array_equal(decoded.samples, result.recon.samples)


def test_round_trip_with_random_networks(make_plane, tiny_models):
    plane = make_plane(128, 64, seed=5)
    result = encode_frame(plane, 32, True, tiny_models)
    header, _, _ = parse_container(result.bitstream)
    assert header.sizes == SIZES
    assert header.nn_enabled
    assert result.payload_bits == result.rd_bits
    assert any(record.d_nn is not None for record in result.records)
    _assert_tiles(result.records, 128, 64)
    assert np.array_equal(decode_frame(result.bitstream, tiny_models).samples, result.recon.samples)


def test_round_trip_of_unaligned_frame(make_plane):
    plane = make_plane(70, 50, seed=1)
    result = encode_frame(plane, 32, False)
    decoded = decode_frame(result.bitstream)
    assert (decoded.width, decoded.height) == (70, 50)
    assert np.array_equal(decoded.samples, result.recon.samples)


def test_constant_frame_uses_32x32_planar_leaves():
    result = encode_frame(_constant(64, 64), 32, False)
    assert [(record.x, record.y, record.h) for record in result.records] == [
        (0, 0, 32),
        (32, 0, 32),
        (0, 32, 32),
        (32, 32, 32),
    ]
    assert all(record.s == PLANAR for record in result.records)
    assert np.all(result.recon.samples == 100)
    # only the first leaf lacks decoded neighbours
    assert [record.d_c for record in result.records] == [28.0**2, 0.0, 0.0, 0.0]


def test_context_mean_network_wins_on_flat_content():
    models = {size: zero_network(*size) for size in SIZES}
    result = encode_frame(_constant(128, 128), 32, True, models)
    nn_records = [record for record in result.records if record.s == NN_MODE]
    assert nn_records
    assert all(record.x >= record.w and record.y >= record.h for record in nn_records)
    assert result.nn_ratio() > 0
    assert np.array_equal(decode_frame(result.bitstream, models).samples, result.recon.samples)

    with pytest.raises(ModelFormatError):
        decode_frame(result.bitstream)

    shifted = {size: zero_network(*size, output_bias=5.0) for size in SIZES}
    with pytest.raises(ReconstructionMismatchError):
        decode_frame(result.bitstream, shifted)


def test_nn_disabled_never_signals(tiny_models, make_plane):
    result = encode_frame(make_plane(128, 64, seed=2), 32, False, tiny_models)
    header, _, _ = parse_container(result.bitstream)
    assert header.sizes == ()
    assert not header.nn_enabled
    assert all(record.s != NN_MODE for record in result.records)
    assert np.array_equal(decode_frame(result.bitstream).samples, result.recon.samples)


def test_rate_falls_and_quality_drops_with_qp(make_plane):
    plane = make_plane(64, 64, seed=7)
    fine = encode_frame(plane, 22, False)
    coarse = encode_frame(plane, 37, False)
    assert fine.bits_per_pixel() > coarse.bits_per_pixel()
    assert psnr(plane, fine.recon) > psnr(plane, coarse.recon)


def test_rate_never_grows_with_qp(make_plane):
    qps = (22, 27, 32, 37, 42)
    pairs = violations = 0
    for seed in range(4):
        plane = make_plane(64, 64, seed=seed)
        rates = [encode_frame(plane, qp, False).bits_per_pixel() for qp in qps]
        for finer, coarser in zip(rates, rates[1:]):
            pairs += 1
            violations += coarser > finer
    assert pairs == 16
    assert violations <= 0.05 * pairs


def test_corrupted_containers(make_plane):
    stream = encode_frame(make_plane(64, 64), 32, False).bitstream
    with pytest.raises(TruncatedStreamError):
        decode_frame(stream[:-1])
    with pytest.raises(TruncatedStreamError):
        decode_frame(stream[:5])
    with pytest.raises(MalformedStreamError):
        decode_frame(stream + b"\x00")
    with pytest.raises(MalformedStreamError):
        decode_frame(b"XXXX" + stream[4:])


def test_block_record_row_round_trip():
    record = BlockRecord(x=8, y=16, h=8, w=8, n0=8, n1=0, s=NN_MODE, d_nn=1.5, d_c=None, qp=27)
    row = {key: str(value) for key, value in record.to_row().items()}
    assert row["isSplitTBs"] == "0"
    assert BlockRecord.from_row(row) == record
