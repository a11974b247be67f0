import numpy as np
import pytest

from util import easy_patches

from stec import container as ct
from stec.codec import ImageCodec
from stec.errors import ContainerFormatError
from stec.transforms import ArchitectureConfig, init_params, model_content_hash, serialize_model
from stec.video_coder import CodedUnit, GopRecord, InterpolatorConfig, SchedulerConfig

CFG = ArchitectureConfig(n=2, K=8, unit_channels=8, in_channels=1)


def image_container(payload=b"\x01\x02\x03\x04", embed=None):
    header = ct.ContainerHeader(
        mode=ct.MODE_IMAGE,
        width=32,
        height=16,
        channels=1,
        cfg=CFG,
        model_hash=0xDEADBEEFCAFEF00D,
        embedded_model=embed,
    )
    rec = GopRecord(0, 0, 0.0, [CodedUnit("I", 0, payload)])
    return header, [rec]


def video_container():
    header = ct.ContainerHeader(
        mode=ct.MODE_VIDEO,
        width=32,
        height=16,
        channels=1,
        cfg=CFG,
        model_hash=7,
        frame_count=17,
        frame_rate=29.97,
        scheduler=SchedulerConfig(tau=16, lower=6.0, upper=8.0),
        interpolator=InterpolatorConfig(kind="MotionCompensated", block_size=8, search_range=4),
    )
    records = [
        GopRecord(0, 8, 5.5, [CodedUnit("I", 0, b"aa"), CodedUnit("residual", 4, b"bbb")]),
        GopRecord(8, 8, 7.25, [CodedUnit("I", 16, b"cc"), CodedUnit("residual", 12, b"d")]),
        GopRecord(16, 1, 0.0, [CodedUnit("I", 17, b"ee")]),
    ]
    return header, records


class TestRoundTrip:
    def test_image_identity(self):
        header, records = image_container()
        blob = ct.write_container(header, records)
        h2, r2 = ct.read_container(blob)
        assert h2.mode == ct.MODE_IMAGE
        assert (h2.width, h2.height, h2.channels) == (32, 16, 1)
        assert h2.cfg == CFG
        assert h2.model_hash == header.model_hash
        assert len(r2) == 1 and r2[0].units[0].payload == b"\x01\x02\x03\x04"

    def test_empty_payload_roundtrip(self):
        header, records = image_container(payload=b"")
        h2, r2 = ct.read_container(ct.write_container(header, records))
        assert r2[0].units[0].payload == b""

    def test_video_records_in_order(self):
        header, records = video_container()
        h2, r2 = ct.read_container(ct.write_container(header, records))
        assert len(r2) == 3
        assert [r.start for r in r2] == [0, 8, 16]
        assert [r.T for r in r2] == [8, 8, 1]
        assert r2[0].h_t == pytest.approx(5.5, abs=1 / 65536)
        assert r2[1].units[1].kind == "residual"
        assert h2.scheduler.tau == 16
        assert h2.scheduler.lower == pytest.approx(6.0, abs=1 / 65536)
        assert h2.interpolator.kind == "MotionCompensated"
        assert h2.frame_rate == pytest.approx(29.97, abs=1e-3)

    def test_embedded_model_roundtrip(self):
        params = init_params(CFG, seed=1)
        blob_model = serialize_model(params, CFG)
        header, records = image_container(embed=blob_model)
        h2, _ = ct.read_container(ct.write_container(header, records))
        assert h2.embedded_model == blob_model

    def test_write_read_write_stable(self):
        header, records = video_container()
        blob = ct.write_container(header, records)
        h2, r2 = ct.read_container(blob)
        blob2 = ct.write_container(h2, r2)
        assert blob == blob2


class TestCorruption:
    def test_every_single_bit_flip_detected(self):
        header, records = image_container()
        blob = bytearray(ct.write_container(header, records))
        for byte_idx in range(len(blob)):
            for bit in range(8):
                corrupted = bytearray(blob)
                corrupted[byte_idx] ^= 1 << bit
                with pytest.raises(ContainerFormatError):
                    ct.read_container(bytes(corrupted))

    def test_truncation_detected(self):
        header, records = image_container()
        blob = ct.write_container(header, records)
        for cut in (0, 3, 7, len(blob) // 2, len(blob) - 1):
            with pytest.raises(ContainerFormatError):
                ct.read_container(blob[:cut])

    def test_future_version_rejected(self):
        header, records = image_container()
        blob = bytearray(ct.write_container(header, records))
        import struct
        import zlib

        blob[4] = 99  # version byte, then re-seal the global checksum
        body = bytes(blob[:-4])
        blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
        with pytest.raises(ContainerFormatError, match="version"):
            ct.read_container(blob)

    def test_bad_magic_rejected(self):
        import struct
        import zlib

        body = b"NOPE" + b"\x00" * 40
        blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
        with pytest.raises(ContainerFormatError, match="magic"):
            ct.read_container(blob)


class TestCodecDeterminism:
    def test_cross_run_byte_identical_encode(self):
        params = init_params(CFG, seed=5)
        img = easy_patches(1, 32, seed=6)[0]
        blobs = []
        for _ in range(2):
            codec = ImageCodec(params, CFG)
            payload = codec.encode(img)
            header = ct.ContainerHeader(
                mode=ct.MODE_IMAGE,
                width=img.width,
                height=img.height,
                channels=1,
                cfg=CFG,
                model_hash=model_content_hash(params, CFG),
            )
            rec = GopRecord(0, 0, 0.0, [CodedUnit("I", 0, payload)])
            blobs.append(ct.write_container(header, [rec]))
        assert blobs[0] == blobs[1]

    def test_decode_reproduces_encoder_reconstruction(self):
        params = init_params(CFG, seed=5)
        codec1 = ImageCodec(params, CFG)
        codec2 = ImageCodec(params, CFG)
        img = easy_patches(1, 32, seed=8)[0]
        payload = codec1.encode(img)
        a = codec1.decode(payload, img.height, img.width)
        b = codec2.decode(payload, img.height, img.width)
        assert np.array_equal(a.samples, b.samples)
