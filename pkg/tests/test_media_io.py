import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stec.errors import MediaFormatError
from stec.media_io import (
    FrameSequence,
    ImageTensor,
    extract_patches,
    load_image,
    load_sequence,
    store_image,
    store_sequence_pngs,
    store_sequence_y4m,
)


def write_ppm(path, arr):
    h, w, _ = arr.shape
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.astype(np.uint8).tobytes())


class TestImageTensor:
    def test_channel_validation(self):
        with pytest.raises(MediaFormatError):
            ImageTensor(np.zeros((4, 4, 2)))

    def test_nonfinite_rejected(self):
        bad = np.zeros((4, 4, 1))
        bad[0, 0, 0] = np.nan
        with pytest.raises(MediaFormatError):
            ImageTensor(bad)

    def test_2d_promoted_to_single_channel(self):
        img = ImageTensor(np.zeros((4, 5)))
        assert img.samples.shape == (4, 5, 1)


class TestLoadImage:
    def test_white_1x1_ppm_maps_to_one(self, tmp_path):
        write_ppm(tmp_path / "w.ppm", np.full((1, 1, 3), 255))
        img = load_image(tmp_path / "w.ppm")
        assert img.samples.shape == (1, 1, 3)
        assert np.all(img.samples == 1.0)

    def test_black_1x1_ppm_maps_to_zero(self, tmp_path):
        write_ppm(tmp_path / "b.ppm", np.zeros((1, 1, 3)))
        assert np.all(load_image(tmp_path / "b.ppm").samples == 0.0)

    def test_kodak_sized_png_header_passthrough(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.integers(0, 256, (512, 768, 3), dtype=np.uint8)
        store_image(ImageTensor(arr / 255.0), tmp_path / "k.png")
        img = load_image(tmp_path / "k.png")
        assert (img.height, img.width, img.channels) == (512, 768, 3)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MediaFormatError):
            load_image(tmp_path / "nope.png")

    def test_truncated_ppm(self, tmp_path):
        p = tmp_path / "t.ppm"
        p.write_bytes(b"P6\n4 4\n255\n" + b"\x00" * 10)
        with pytest.raises(MediaFormatError, match="truncated"):
            load_image(p)

    def test_unsupported_bit_depth(self, tmp_path):
        p = tmp_path / "d.ppm"
        p.write_bytes(b"P6\n1 1\n65535\n" + b"\x00" * 6)
        with pytest.raises(MediaFormatError, match="bit depth"):
            load_image(p)

    @pytest.mark.parametrize("suffix", [".png", ".ppm"])
    def test_store_load_roundtrip_bit_exact(self, tmp_path, suffix):
        rng = np.random.default_rng(3)
        arr = rng.integers(0, 256, (16, 12, 3), dtype=np.uint8)
        img = ImageTensor(arr / 255.0)
        store_image(img, tmp_path / f"x{suffix}")
        back = load_image(tmp_path / f"x{suffix}")
        assert np.array_equal(np.rint(back.samples * 255), arr)

    def test_grayscale_roundtrip(self, tmp_path):
        arr = np.arange(64, dtype=np.uint8).reshape(8, 8, 1)
        store_image(ImageTensor(arr / 255.0), tmp_path / "g.pgm")
        back = load_image(tmp_path / "g.pgm")
        assert np.array_equal(np.rint(back.samples * 255), arr)


class TestLoadSequence:
    def test_png_directory(self, tmp_path):
        img = ImageTensor(np.zeros((8, 8, 1)))
        store_image(img, tmp_path / "f0.png")
        store_image(img, tmp_path / "f1.png")
        seq = load_sequence(tmp_path)
        assert len(seq) == 2
        assert np.array_equal(seq.frames[0].samples, seq.frames[1].samples)

    def test_mixed_resolutions_error(self, tmp_path):
        store_image(ImageTensor(np.zeros((64, 64, 1))), tmp_path / "f0.png")
        store_image(ImageTensor(np.zeros((32, 32, 1))), tmp_path / "f1.png")
        with pytest.raises(MediaFormatError):
            load_sequence(tmp_path)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(MediaFormatError):
            load_sequence(tmp_path)

    def test_natural_frame_order(self, tmp_path):
        for i in (0, 2, 10):
            val = i / 255.0
            store_image(ImageTensor(np.full((4, 4, 1), val)), tmp_path / f"f{i}.png")
        seq = load_sequence(tmp_path)
        vals = [int(round(f.samples[0, 0, 0] * 255)) for f in seq.frames]
        assert vals == [0, 2, 10]

    def test_y4m_roundtrip_header(self, tmp_path):
        rng = np.random.default_rng(1)
        frames = [ImageTensor(rng.random((48, 64, 3))) for _ in range(10)]
        store_sequence_y4m(FrameSequence(frames=frames, frame_rate=25.0), tmp_path / "v.y4m")
        seq = load_sequence(tmp_path / "v.y4m")
        assert len(seq) == 10
        assert seq.frames[0].samples.shape == (48, 64, 3)
        assert seq.frame_rate == pytest.approx(25.0)

    def test_y4m_420(self, tmp_path):
        # hand-built 4:2:0 stream: gray frames, two of them
        w, h = 16, 8
        header = b"YUV4MPEG2 W16 H8 F30:1 Ip A1:1 C420jpeg\n"
        y = bytes([128] * (w * h))
        c = bytes([128] * (w * h // 4))
        blob = header + b"".join([b"FRAME\n" + y + c + c] * 2)
        (tmp_path / "g.y4m").write_bytes(blob)
        seq = load_sequence(tmp_path / "g.y4m")
        assert len(seq) == 2
        assert seq.frames[0].samples.shape == (8, 16, 3)

    def test_y4m_truncated_frame(self, tmp_path):
        header = b"YUV4MPEG2 W16 H8 F30:1 C444\n"
        (tmp_path / "t.y4m").write_bytes(header + b"FRAME\n" + b"\x00" * 10)
        with pytest.raises(MediaFormatError, match="truncated"):
            load_sequence(tmp_path / "t.y4m")

    def test_store_pngs_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        frames = [
            ImageTensor(rng.integers(0, 256, (8, 8, 1)).astype(np.float64) / 255)
            for _ in range(3)
        ]
        store_sequence_pngs(FrameSequence(frames=frames), tmp_path / "seq")
        seq = load_sequence(tmp_path / "seq")
        assert len(seq) == 3
        for a, b in zip(frames, seq.frames):
            assert np.allclose(a.samples, b.samples, atol=1 / 510)


class TestExtractPatches:
    def test_exact_tile(self):
        img = ImageTensor(np.random.default_rng(0).random((128, 128, 1)))
        patches = extract_patches(img, 128, 128)
        assert len(patches) == 1
        assert np.array_equal(patches[0].samples, img.samples)

    def test_four_tiles(self):
        img = ImageTensor(np.random.default_rng(0).random((256, 256, 1)))
        assert len(extract_patches(img, 128, 128)) == 4

    def test_offsets_130_image_stride_2(self):
        # oracle: enumerate valid offsets by hand for 130px, size 128, stride 2
        offsets = [
            (i, j)
            for i in range(0, 130 - 128 + 1, 2)
            for j in range(0, 130 - 128 + 1, 2)
        ]
        assert sorted(offsets) == [(0, 0), (0, 2), (2, 0), (2, 2)]
        img = ImageTensor(np.random.default_rng(1).random((130, 130, 1)))
        patches = extract_patches(img, 128, 2)
        assert len(patches) == 4
        corners = {tuple(p.samples[0, 0]) for p in patches}
        expected = {tuple(img.samples[i, j]) for i, j in offsets}
        assert corners == expected

    def test_size_exceeds_image(self):
        with pytest.raises(MediaFormatError):
            extract_patches(ImageTensor(np.zeros((16, 16, 1))), 32, 1)

    @settings(max_examples=40, deadline=None)
    @given(
        h=st.integers(8, 40),
        w=st.integers(8, 40),
        size=st.integers(1, 8),
        stride=st.integers(1, 9),
    )
    def test_count_formula(self, h, w, size, stride):
        img = ImageTensor(np.zeros((h, w, 1)))
        patches = extract_patches(img, size, stride)
        expected = ((h - size) // stride + 1) * ((w - size) // stride + 1)
        assert len(patches) == expected
