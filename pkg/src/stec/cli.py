"""Command-line interface.

Subcommands: train, encode-image, decode-image, encode-video,
decode-video, analyze-energy, gop-plan, eval, rd-sweep. All commands exit
0 on success and nonzero with a diagnostic on stderr otherwise.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from stec import container as ct
from stec import media_io, metrics, video_coder
from stec import energy_compaction as ec
from stec.codec import ImageCodec
from stec.errors import StecError
from stec.training import LossConfig, TrainSchedule, train
from stec.transforms import ArchitectureConfig, load_model, save_model, serialize_model


def _load_patch_dataset(data_dir, patch_size, stride, seed, channels):
    paths = sorted(Path(data_dir).iterdir())
    patches = []
    for p in paths:
        if p.suffix.lower() not in (".png", ".ppm", ".pgm"):
            continue
        img = media_io.load_image(p)
        if img.channels != channels:
            if channels == 1 and img.channels == 3:
                img = media_io.ImageTensor(img.samples.mean(axis=2, keepdims=True))
            else:
                continue
        if min(img.height, img.width) < patch_size:
            continue
        patches.extend(media_io.extract_patches(img, patch_size, stride, rng_seed=seed))
    if not patches:
        raise StecError(f"no usable training patches under {data_dir}")
    return patches


def cmd_train(args):
    cfg = ArchitectureConfig(
        n=args.n,
        K=args.latent_channels,
        unit_channels=args.unit_channels,
        kernel_size=args.kernel,
        backend=args.backend,
        in_channels=args.channels,
    )
    patches = _load_patch_dataset(args.data, args.patch_size, args.stride, args.seed, args.channels)
    schedule = TrainSchedule(
        phase1_max_iters=args.phase1_iters,
        total_iters=args.iters,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    loss_cfg = LossConfig(lam=args.lam, beta=args.beta, distortion_kind=args.distortion)
    params, tlog = train(patches, cfg, loss_cfg, schedule)
    save_model(params, cfg, args.out)
    if args.log:
        Path(args.log).write_text(tlog.to_csv())
    last = tlog[-1] if tlog else None
    if last:
        print(f"trained {len(tlog)} iters: J={last[4]:.4f} D={last[1]:.4f} "
              f"R={last[2]:.4f} max_Ak={last[5]:.3f} phase={last[6]}")
    print(f"model written to {args.out}")
    return 0


def _open_codec(model_path):
    params, cfg = load_model(model_path)
    return ImageCodec(params, cfg), params, cfg


def cmd_encode_image(args):
    codec, params, cfg = _open_codec(args.model)
    img = media_io.load_image(args.input)
    if img.channels != cfg.in_channels:
        if cfg.in_channels == 1 and img.channels == 3:
            img = media_io.ImageTensor(img.samples.mean(axis=2, keepdims=True))
        else:
            raise StecError(f"model expects {cfg.in_channels} channels, image has {img.channels}")
    payload = codec.encode(img)
    header = ct.ContainerHeader(
        mode=ct.MODE_IMAGE,
        width=img.width,
        height=img.height,
        channels=img.channels,
        cfg=cfg,
        model_hash=codec.model_hash,
        embedded_model=serialize_model(params, cfg) if args.embed_model else None,
    )
    rec = video_coder.GopRecord(0, 0, 0.0, [video_coder.CodedUnit(video_coder.UNIT_IFRAME, 0, payload)])
    blob = ct.write_container(header, [rec])
    Path(args.output).write_bytes(blob)
    recon = codec.decode(payload, img.height, img.width)
    point = metrics.rd_point(img, recon, len(payload) * 8, label=str(args.input))
    print(f"{args.output}: {len(blob)} bytes, bpp={point.bpp:.4f}, "
          f"ms_ssim={point.ms_ssim:.6f} ({point.ms_ssim_db:.2f} dB), psnr={point.psnr:.2f} dB")
    return 0


def _codec_for_container(header, model_path):
    if model_path:
        codec, params, cfg = _open_codec(model_path)
    elif header.embedded_model is not None:
        from stec.transforms import deserialize_model

        params, cfg = deserialize_model(header.embedded_model)
        codec = ImageCodec(params, cfg)
    else:
        raise StecError("container has no embedded model; pass -m/--model")
    if codec.model_hash != header.model_hash:
        raise StecError(
            f"model hash mismatch: container wants {header.model_hash:#x}, "
            f"model file is {codec.model_hash:#x}"
        )
    return codec


def cmd_decode_image(args):
    header, records = ct.read_container(Path(args.input).read_bytes())
    if header.mode != ct.MODE_IMAGE:
        raise StecError("not an image container")
    codec = _codec_for_container(header, args.model)
    payload = records[0].units[0].payload
    img = codec.decode(payload, header.height, header.width)
    media_io.store_image(img, args.output)
    print(f"decoded {header.width}x{header.height}x{header.channels} -> {args.output}")
    return 0


def cmd_encode_video(args):
    codec, params, cfg = _open_codec(args.model)
    seq = media_io.load_sequence(args.input)
    if seq.frames[0].channels != cfg.in_channels:
        if cfg.in_channels == 1:
            seq = media_io.FrameSequence(
                frames=[media_io.ImageTensor(f.samples.mean(axis=2, keepdims=True))
                        for f in seq.frames],
                frame_rate=seq.frame_rate,
            )
        else:
            raise StecError("channel count mismatch between sequence and model")
    scfg = video_coder.SchedulerConfig(tau=args.tau, lower=args.lower, upper=args.upper)
    icfg = video_coder.InterpolatorConfig(
        kind=args.interp, block_size=args.block_size, search_range=args.search_range
    )
    records, recons = video_coder.encode_sequence(seq, codec, scfg, icfg)
    first = seq.frames[0]
    header = ct.ContainerHeader(
        mode=ct.MODE_VIDEO,
        width=first.width,
        height=first.height,
        channels=first.channels,
        cfg=cfg,
        model_hash=codec.model_hash,
        frame_count=len(seq.frames),
        frame_rate=seq.frame_rate,
        scheduler=scfg,
        interpolator=icfg,
        embedded_model=serialize_model(params, cfg) if args.embed_model else None,
    )
    blob = ct.write_container(header, records)
    Path(args.output).write_bytes(blob)
    total_bits = 8 * sum(len(u.payload) for r in records for u in r.units)
    pixels = first.height * first.width * len(seq.frames)
    avg_msssim = float(np.mean([metrics.ms_ssim(a, b) for a, b in zip(seq.frames, recons)]))
    print(f"{args.output}: {len(blob)} bytes, {len(records)} GOPs, "
          f"bpp={total_bits / pixels:.4f}, avg ms_ssim={avg_msssim:.6f}")
    return 0


def cmd_decode_video(args):
    header, records = ct.read_container(Path(args.input).read_bytes())
    if header.mode != ct.MODE_VIDEO:
        raise StecError("not a video container")
    codec = _codec_for_container(header, args.model)
    seq = video_coder.decode_sequence_records(
        records, codec, header.interpolator, header.height, header.width,
        header.frame_count, header.frame_rate,
    )
    out = Path(args.output)
    if out.suffix.lower() == ".y4m":
        media_io.store_sequence_y4m(seq, out)
    else:
        media_io.store_sequence_pngs(seq, out)
    print(f"decoded {len(seq.frames)} frames -> {args.output}")
    return 0


def cmd_analyze_energy(args):
    codec, params, cfg = _open_codec(args.model)
    patches = _load_patch_dataset(args.data, args.patch_size, args.patch_size, 0, cfg.in_channels)
    batch = patches[: args.batch]
    prof = ec.compute_Ak(batch, params, cfg)
    b_probe = ec.estimate_Bk_probe(params, cfg)
    b_impulse = None
    if cfg.backend == "linear":
        b_impulse = ec.estimate_Bk_impulse(params, cfg)
    b_default = b_impulse if cfg.backend == "linear" else b_probe
    score = ec.compaction_score(prof.A, b_default)
    lines = ["channel,variance,A_k,B_probe,B_impulse"]
    for k in range(cfg.K):
        imp = f"{b_impulse[k]:.9g}" if b_impulse is not None else ""
        lines.append(f"{k},{prof.channel_variances[k]:.9g},{prof.A[k]:.9g},{b_probe[k]:.9g},{imp}")
    lines.append(f"# compaction_score,{score:.9g}")
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    print(text, end="")
    return 0


def cmd_gop_plan(args):
    seq = media_io.load_sequence(args.input)
    scfg = video_coder.SchedulerConfig(tau=args.tau, lower=args.lower, upper=args.upper)
    for i, (start, t_use, h_t) in enumerate(video_coder.plan_segments(seq, scfg)):
        steps = video_coder.build_schedule(t_use) if t_use >= 2 else []
        print(json.dumps({
            "segment": i,
            "start": start,
            "H_T": round(h_t, 4),
            "T": t_use,
            "steps": [[t, l, r] for t, l, r in steps],
        }))
    return 0


def _eval_image(codec, img, label):
    payload = codec.encode(img)
    recon = codec.decode(payload, img.height, img.width)
    return metrics.rd_point(img, recon, len(payload) * 8, label=label)


def cmd_eval(args):
    codec, params, cfg = _open_codec(args.model)
    print(metrics.RdPoint.csv_header())
    for path in args.images:
        img = media_io.load_image(path)
        if img.channels != cfg.in_channels and cfg.in_channels == 1:
            img = media_io.ImageTensor(img.samples.mean(axis=2, keepdims=True))
        point = _eval_image(codec, img, Path(path).name)
        print(point.csv_row())
    return 0


def cmd_rd_sweep(args):
    images = [media_io.load_image(p) for p in args.images]
    print(metrics.RdPoint.csv_header())
    for model_path in args.models:
        codec, params, cfg = _open_codec(model_path)
        imgs = [
            media_io.ImageTensor(i.samples.mean(axis=2, keepdims=True))
            if i.channels != cfg.in_channels and cfg.in_channels == 1 else i
            for i in images
        ]
        points = [_eval_image(codec, i, Path(model_path).stem) for i in imgs]
        bpp = float(np.mean([p.bpp for p in points]))
        ss = float(np.mean([p.ms_ssim for p in points]))
        ps = float(np.mean([p.psnr for p in points]))
        row = metrics.RdPoint(bpp=bpp, ms_ssim=ss, ms_ssim_db=metrics.msssim_to_db(ss),
                              psnr=ps, label=Path(model_path).stem)
        print(row.csv_row())
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="stec", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on an image directory")
    p.add_argument("--data", required=True, help="directory of training images")
    p.add_argument("--out", required=True, help="output .stem model path")
    p.add_argument("--log", help="training log CSV path")
    p.add_argument("--lambda", dest="lam", type=float, default=8.0)
    p.add_argument("--beta", type=float, default=0.001)
    p.add_argument("--distortion", choices=["MS-SSIM", "MSE"], default="MS-SSIM")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--phase1-iters", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--stride", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--backend", choices=["conv", "linear"], default="conv")
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--latent-channels", "-K", type=int, default=8)
    p.add_argument("--unit-channels", type=int, default=16)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--channels", type=int, choices=[1, 3], default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode-image", help="encode a still image")
    p.add_argument("input")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--embed-model", action="store_true")
    p.set_defaults(func=cmd_encode_image)

    p = sub.add_parser("decode-image", help="decode a still image container")
    p.add_argument("input")
    p.add_argument("-m", "--model")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_decode_image)

    p = sub.add_parser("encode-video", help="encode a frame sequence")
    p.add_argument("input", help="Y4M file or directory of frames")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--tau", type=int, default=16)
    p.add_argument("--lower", type=float, default=6.0)
    p.add_argument("--upper", type=float, default=8.0)
    p.add_argument("--interp", choices=["Average", "MotionCompensated"], default="Average")
    p.add_argument("--block-size", type=int, default=8)
    p.add_argument("--search-range", type=int, default=8)
    p.add_argument("--embed-model", action="store_true")
    p.set_defaults(func=cmd_encode_video)

    p = sub.add_parser("decode-video", help="decode a video container")
    p.add_argument("input")
    p.add_argument("-m", "--model")
    p.add_argument("-o", "--output", required=True, help=".y4m file or output directory")
    p.set_defaults(func=cmd_decode_video)

    p = sub.add_parser("analyze-energy", help="channel energy profile CSV")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_analyze_energy)

    p = sub.add_parser("gop-plan", help="print per-segment H_T, T and schedule")
    p.add_argument("input")
    p.add_argument("--tau", type=int, default=16)
    p.add_argument("--lower", type=float, default=6.0)
    p.add_argument("--upper", type=float, default=8.0)
    p.set_defaults(func=cmd_gop_plan)

    p = sub.add_parser("eval", help="RD points for images through a model")
    p.add_argument("images", nargs="+")
    p.add_argument("-m", "--model", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rd-sweep", help="RD CSV across a ladder of models")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.set_defaults(func=cmd_rd_sweep)

    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except StecError as exc:
        print(f"stec: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"stec: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
