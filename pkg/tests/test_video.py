import numpy as np
import pytest

from util import translating_sequence

from stec._kernels import get_backend
from stec.codec import ImageCodec
from stec.errors import StecError
from stec.media_io import FrameSequence, ImageTensor
from stec.transforms import ArchitectureConfig, init_params
from stec.video_coder import (
    GopPlan,
    InterpolatorConfig,
    ReconBuffer,
    SchedulerConfig,
    build_schedule,
    decode_gop,
    decode_sequence_records,
    encode_gop,
    encode_sequence,
    interpolate,
    make_plan,
    plan_segments,
    select_gop_size,
    temporal_entropy,
    temporal_residual,
)

LIN16 = ArchitectureConfig(
    n=2, K=16, unit_channels=1, backend="linear", activation="identity", in_channels=1
)


@pytest.fixture(scope="module")
def toy_codec():
    params = init_params(LIN16, seed=1, orthonormal=True)
    return ImageCodec(params, LIN16)


def recursion_oracle(t_size):
    """Independent midpoint recursion enumerator (depth-first per level)."""
    out = []
    spans = [(0, t_size)]
    while spans:
        nxt = []
        for lo, hi in spans:
            if hi - lo >= 2:
                mid = (lo + hi) // 2
                out.append((mid, lo, hi))
                nxt.extend([(lo, mid), (mid, hi)])
        spans = nxt
    return out


class TestTemporalResidual:
    def test_identical_frames_zero(self):
        f = ImageTensor(np.random.default_rng(0).random((8, 8, 1)))
        assert np.all(temporal_residual(f, f) == 0)

    def test_constant_step_gives_plus_one(self):
        a = ImageTensor(np.full((8, 8, 1), 100 / 255))
        b = ImageTensor(np.full((8, 8, 1), 101 / 255))
        assert np.all(temporal_residual(a, b) == 1)

    def test_matches_subtraction_oracle(self):
        rng = np.random.default_rng(1)
        a = ImageTensor(rng.integers(0, 256, (8, 8, 3)).astype(np.float64) / 255)
        b = ImageTensor(rng.integers(0, 256, (8, 8, 3)).astype(np.float64) / 255)
        oracle = np.rint(b.samples * 255).astype(int) - np.rint(a.samples * 255).astype(int)
        assert np.array_equal(temporal_residual(a, b), oracle)

    def test_dim_mismatch(self):
        with pytest.raises(StecError):
            temporal_residual(
                ImageTensor(np.zeros((8, 8, 1))), ImageTensor(np.zeros((4, 4, 1)))
            )


class TestTemporalEntropy:
    def test_all_zero_differences(self):
        assert temporal_entropy(np.zeros((16, 16), dtype=np.int16)) == 0.0

    def test_balanced_plus_minus_one(self):
        diff = np.array([1, -1] * 50, dtype=np.int16)
        assert temporal_entropy(diff) == pytest.approx(1.0)

    def test_uniform_noise_difference_exceeds_upper_bound(self):
        rng = np.random.default_rng(2)
        a = rng.integers(0, 256, (64, 64)).astype(np.int16)
        b = rng.integers(0, 256, (64, 64)).astype(np.int16)
        h = temporal_entropy(b - a)
        assert h >= 8.0  # ~8.9 bits for the triangular difference law


class TestSelectGopSize:
    @pytest.mark.parametrize(
        "h_t,expected",
        [
            (2.673, 16),  # low-motion anchor
            (7.999, 8),  # high-motion anchor just below U
            (0.0, 16),
            (5.999, 16),  # L - eps
            (6.0, 8),  # closed-left at L
            (7.9999, 8),  # U - eps
            (8.0, 2),  # closed-left at U
            (12.0, 2),
        ],
    )
    def test_mapping(self, h_t, expected):
        assert select_gop_size(h_t, SchedulerConfig()) == expected

    def test_custom_bounds(self):
        cfg = SchedulerConfig(lower=1.0, upper=2.0)
        assert select_gop_size(0.5, cfg) == 16
        assert select_gop_size(1.5, cfg) == 8
        assert select_gop_size(2.5, cfg) == 2

    def test_invalid_bounds(self):
        with pytest.raises(StecError):
            SchedulerConfig(lower=8.0, upper=6.0)


class TestBuildSchedule:
    def test_t2_base_case(self):
        assert build_schedule(2) == [(1, 0, 2)]

    def test_t8_unrolled(self):
        assert build_schedule(8) == [
            (4, 0, 8),
            (2, 0, 4),
            (6, 4, 8),
            (1, 0, 2),
            (3, 2, 4),
            (5, 4, 6),
            (7, 6, 8),
        ]

    def test_t16_matches_recursion_oracle(self):
        steps = build_schedule(16)
        assert len(steps) == 15
        assert steps[0] == (8, 0, 16)
        assert steps == recursion_oracle(16)
        last_level = steps[-8:]
        assert all(t % 2 == 1 for t, _, _ in last_level)

    @pytest.mark.parametrize("bad", [0, 1, 3, 6, 12])
    def test_invalid_sizes(self, bad):
        with pytest.raises(StecError):
            build_schedule(bad)

    @pytest.mark.parametrize("t_size", [2, 8, 16])
    def test_plans_validate(self, t_size):
        plan = make_plan(t_size)
        assert plan.T == t_size

    def test_plan_invariants_reject_bad_schedules(self):
        with pytest.raises(StecError, match="exactly once"):
            GopPlan(T=2, h_t=0.0, steps=((1, 0, 2), (1, 0, 2)))
        with pytest.raises(StecError, match="not yet decoded"):
            GopPlan(T=4, h_t=0.0, steps=((1, 0, 2), (2, 0, 4), (3, 2, 4)))


class TestReconBuffer:
    def test_unwritten_read_rejected(self):
        buf = ReconBuffer()
        with pytest.raises(StecError):
            buf.get(3)
        frame = ImageTensor(np.zeros((4, 4, 1)))
        buf.put(3, frame)
        assert buf.get(3) is frame


class TestInterpolate:
    def test_equal_references_identity(self):
        f = ImageTensor(np.random.default_rng(0).random((16, 16, 1)))
        out = interpolate(f, f, InterpolatorConfig())
        assert np.allclose(out.samples, f.samples)

    def test_black_white_average(self):
        black = ImageTensor(np.zeros((8, 8, 1)))
        white = ImageTensor(np.ones((8, 8, 1)))
        out = interpolate(black, white, InterpolatorConfig(kind="Average"))
        assert np.allclose(out.samples, 0.5)

    def test_motion_compensation_beats_average_on_translation(self):
        # 4 px shift between references; the true middle sits at +2 px
        frames = translating_sequence(3, 32, px_per_frame=2, seed=3)
        left, middle, right = frames
        mc_cfg = InterpolatorConfig(kind="MotionCompensated", block_size=8, search_range=4)
        pred_mc = interpolate(left, right, mc_cfg)
        pred_avg = interpolate(left, right, InterpolatorConfig(kind="Average"))
        mse_mc = np.mean((pred_mc.samples - middle.samples) ** 2)
        mse_avg = np.mean((pred_avg.samples - middle.samples) ** 2)
        assert mse_mc < mse_avg

    def test_mc_backends_agree(self):
        pure = get_backend("python")
        try:
            core = get_backend("cython")
        except ImportError:
            pytest.skip("compiled kernels unavailable")
        rng = np.random.default_rng(4)
        left = rng.integers(0, 256, (24, 24, 1)).astype(np.int32)
        right = np.roll(left, 3, axis=1)
        va = core.mc_search(left, right, 8, 5)
        vb = pure.mc_search(left, right, 8, 5)
        assert np.array_equal(va, vb)

    def test_dim_mismatch(self):
        with pytest.raises(StecError):
            interpolate(
                ImageTensor(np.zeros((8, 8, 1))), ImageTensor(np.zeros((4, 4, 1))),
                InterpolatorConfig(),
            )


class TestGopCoding:
    def test_decoder_reproduces_encoder_loop_exactly(self, toy_codec):
        frames = translating_sequence(9, 32, px_per_frame=1, seed=5)
        record, enc_buf = encode_gop(
            frames, 0, 8, 3.0, toy_codec, InterpolatorConfig(), recon_left=None
        )
        dec_buf = decode_gop(record, toy_codec, InterpolatorConfig(), 32, 32)
        for idx in range(9):
            a = enc_buf.get(idx).samples
            b = dec_buf.get(idx).samples
            assert np.array_equal(a, b), f"frame {idx} differs"

    def test_shared_boundary_not_recoded(self, toy_codec):
        frames = translating_sequence(17, 32, px_per_frame=1, seed=6)
        seq = FrameSequence(frames=frames)
        records, recons = encode_sequence(
            seq, toy_codec, SchedulerConfig(), InterpolatorConfig()
        )
        starts = [r.start for r in records]
        for prev, rec in zip(records, records[1:]):
            boundary = prev.start + prev.T
            assert rec.start == boundary
            assert all(u.index != boundary for u in rec.units if u.kind == "I")

    def test_t2_gop_structure(self, toy_codec):
        frames = translating_sequence(3, 32, px_per_frame=1, seed=7)
        record, _ = encode_gop(frames, 0, 2, 9.0, toy_codec, InterpolatorConfig())
        kinds = [u.kind for u in record.units]
        assert kinds.count("I") == 2
        assert kinds.count("residual") == 1


class TestSequenceCoding:
    def test_static_sequence_plans_single_t16(self, toy_codec):
        frame = ImageTensor(np.random.default_rng(8).random((32, 32, 1)))
        seq = FrameSequence(frames=[frame] * 17)
        segments = plan_segments(seq, SchedulerConfig())
        assert segments == [(0, 16, 0.0)]
        records, recons = encode_sequence(seq, toy_codec, SchedulerConfig(), InterpolatorConfig())
        iframes = [u for r in records for u in r.units if u.kind == "I"]
        assert len(iframes) == 2

    def test_noise_sequence_gets_t2_and_9_iframes(self, toy_codec):
        rng = np.random.default_rng(9)
        seq = FrameSequence(
            frames=[ImageTensor(rng.random((32, 32, 1))) for _ in range(17)]
        )
        segments = plan_segments(seq, SchedulerConfig())
        assert all(t == 2 for _, t, _ in segments)
        assert all(h >= 8.0 for _, _, h in segments)
        records, _ = encode_sequence(seq, toy_codec, SchedulerConfig(), InterpolatorConfig())
        iframes = [u for r in records for u in r.units if u.kind == "I"]
        assert len(iframes) == 9

    def test_tail_shorter_than_t_shrinks(self, toy_codec):
        frame = ImageTensor(np.random.default_rng(10).random((32, 32, 1)))
        seq = FrameSequence(frames=[frame] * 20)  # 19 intervals: 16 + 2 + 1
        segments = plan_segments(seq, SchedulerConfig())
        assert [t for _, t, _ in segments] == [16, 2, 1]
        records, recons = encode_sequence(seq, toy_codec, SchedulerConfig(), InterpolatorConfig())
        decoded = decode_sequence_records(
            records, toy_codec, InterpolatorConfig(), 32, 32, 20
        )
        assert len(decoded.frames) == 20

    def test_roundtrip_preserves_count_and_dims(self, toy_codec):
        frames = translating_sequence(11, 32, px_per_frame=1, seed=11)
        seq = FrameSequence(frames=frames, frame_rate=24.0)
        records, enc_recons = encode_sequence(
            seq, toy_codec, SchedulerConfig(), InterpolatorConfig()
        )
        decoded = decode_sequence_records(
            records, toy_codec, InterpolatorConfig(), 32, 32, 11, 24.0
        )
        assert len(decoded.frames) == 11
        assert decoded.frames[0].samples.shape == (32, 32, 1)
        for a, b in zip(enc_recons, decoded.frames):
            assert np.array_equal(a.samples, b.samples)

    def test_too_short_sequence(self, toy_codec):
        seq = FrameSequence(frames=[ImageTensor(np.zeros((8, 8, 1)))])
        with pytest.raises(StecError):
            plan_segments(seq, SchedulerConfig())
