"""Command-line entry point.

Every subcommand writes its outputs plus one JSON run manifest next to them::

    satem-denoise gen-data --out train.ds --count 2000
    satem-denoise --set train.epochs=5 train --dataset train.ds --out model.ckpt
    satem-denoise denoise --checkpoint model.ckpt --dataset test.ds --out denoised/
    satem-denoise eval --denoised denoised/ --out report/
    satem-denoise swap-test --checkpoint model.ckpt --dataset test.ds --out swap/
    satem-denoise bench-kernel --lengths 256,512,1024 --out bench.csv
"""
import argparse
import glob
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from .config import ConfigError, load_config
from .cowkv import bench_kernel
from .data import (
    DataConfig,
    DatasetFormatError,
    NoiseConfig,
    SignalDataset,
    dataset_read,
    dataset_write,
    denormalize,
    generate_dataset,
    import_forward_csv,
    import_noise_bank,
    normalize,
    write_csv,
)
from .metrics import batch_report, histogram, mse, snr, write_report
from .model import CheckpointError, atomic_write_bytes, load_training_state, swap_decodings
from .numerics import NonDeterministicError, NonFiniteError, ShapeError
from .train import Trainer, TrainConfig

logger = logging.getLogger(__name__)

ERRORS = (
    ConfigError,
    CheckpointError,
    DatasetFormatError,
    ShapeError,
    NonFiniteError,
    NonDeterministicError,
    ValueError,
    RuntimeError,
    OSError,
)
DENOISED_PATTERN = "record_*.csv"


@dataclass
class RunManifest(object):
    """
    What a command was run with and what it produced
    """

    command: str
    config: Dict[str, Any]
    seed: Optional[int]
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    wall_time: float = 0.0
    hashes: Dict[str, str] = field(default_factory=dict)

    def finalize(self, started: float) -> "RunManifest":
        self.wall_time = time.perf_counter() - started
        self.hashes = {path: file_sha256(path) for path in self.inputs + self.outputs}
        return self

    def write(self, path: str):
        payload = json.dumps(asdict(self), indent=2, sort_keys=True, default=str)
        atomic_write_bytes(path, payload.encode())


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    if os.path.isdir(path):
        for name in sorted(os.listdir(path)):
            full = os.path.join(path, name)
            if os.path.isfile(full) and not name.endswith(".manifest.json"):
                digest.update(name.encode())
                digest.update(file_sha256(full).encode())
        return digest.hexdigest()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def manifest_path(out: str) -> str:
    if os.path.isdir(out):
        return os.path.join(out, "run.manifest.json")
    return f"{out}.manifest.json"


def _record_name(i: int) -> str:
    return f"record_{i:05d}.csv"


# --------- commands --------- #
def cmd_gen_data(args, config: Dict[str, Dict[str, Any]], manifest: RunManifest):
    """write a synthetic (or imported-and-noised) dataset"""
    data_cfg = DataConfig.from_params(config["data"])
    noise_cfg = NoiseConfig.from_params(config["noise"])
    seed = data_cfg.seed if args.seed is None else args.seed
    manifest.seed = seed

    bank = None
    if args.noise_bank:
        manifest.inputs.append(args.noise_bank)
        bank = import_noise_bank(args.noise_bank)

    if args.forward_csv:
        manifest.inputs.append(args.forward_csv)
        records = import_forward_csv(args.forward_csv, data_cfg.eps, data_cfg.scale)
        if not records:
            raise DatasetFormatError(f"{args.forward_csv}: no forward responses")
        dataset = SignalDataset.from_records(records)
        if bank is not None and len(bank) and bank.shape[1] != dataset.n_gates:
            raise DatasetFormatError("noise bank and forward responses differ in gate count")
        dataset = generate_dataset(
            len(dataset),
            data_cfg,
            noise_cfg,
            seed,
            bank=bank,
            clean=dataset.clean,
            gate_times=dataset.gate_times,
        )
    else:
        dataset = generate_dataset(args.count, data_cfg, noise_cfg, seed, bank=bank)

    dataset_write(dataset, args.out)
    manifest.outputs.append(args.out)


def _train_arrays(dataset: SignalDataset, data_cfg: DataConfig):
    if not dataset.has_clean:
        raise DatasetFormatError("training needs a dataset with clean signals")
    if dataset.n_gates != data_cfg.n_gates:
        raise ValueError(
            f"dataset has {dataset.n_gates} gates, config data.n_gates is {data_cfg.n_gates}"
        )
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    return dataset.normalized()


def cmd_train(args, config: Dict[str, Dict[str, Any]], manifest: RunManifest):
    """train and checkpoint; ``train.epochs`` is the total, resumed runs continue to it"""
    data_cfg = DataConfig.from_params(config["data"])
    train_cfg = TrainConfig.from_params(config["train"])
    manifest.seed = train_cfg.seed
    manifest.inputs.append(args.dataset)

    dataset = dataset_read(args.dataset)
    clean, noisy = _train_arrays(dataset, data_cfg)

    if args.resume:
        manifest.inputs.append(args.resume)
        trainer = Trainer.resume(args.resume, train_cfg)
    else:
        trainer = Trainer.from_config(train_cfg)
    meta = {"data": {"eps": dataset.eps, "scale": dataset.scale, "n_gates": dataset.n_gates}}

    loss_csv = args.loss_csv or f"{args.out}.losses.csv"
    previous = pd.DataFrame()
    if args.resume and os.path.exists(loss_csv):
        previous = pd.read_csv(loss_csv)

    def checkpoint():
        trainer.save(args.out, meta)
        losses = trainer.loss_frame()
        if not previous.empty:
            losses = pd.concat([previous, losses], ignore_index=True)
        write_csv(losses, loss_csv)

    checkpoint()
    while trainer.epoch < train_cfg.epochs:
        trainer.train_epoch(clean, noisy)
        if train_cfg.checkpoint_every > 0 and trainer.epoch % train_cfg.checkpoint_every == 0:
            checkpoint()
    checkpoint()
    manifest.outputs.extend([args.out, loss_csv])


def _load_for_dataset(checkpoint: str, dataset: SignalDataset):
    model, _, meta = load_training_state(checkpoint)
    trained = meta.get("data")
    if trained is not None:
        if (trained["eps"], trained["scale"]) != (dataset.eps, dataset.scale):
            raise CheckpointError(
                f"{checkpoint}: trained with normalization (eps, scale) = "
                f"({trained['eps']}, {trained['scale']}), dataset uses "
                f"({dataset.eps}, {dataset.scale})"
            )
    return model


def cmd_denoise(args, config: Dict[str, Dict[str, Any]], manifest: RunManifest):
    """one ``time_s,noisy,denoised[,clean]`` CSV per record"""
    manifest.inputs.extend([args.checkpoint, args.dataset])
    dataset = dataset_read(args.dataset)
    model = _load_for_dataset(args.checkpoint, dataset)

    _, noisy_n = dataset.normalized()
    os.makedirs(args.out, exist_ok=True)
    for i in range(len(dataset)):
        denoised_n = model.denoise_infer(noisy_n[i])
        frame = {
            "time_s": dataset.gate_times,
            "noisy": dataset.noisy[i],
            "denoised": denormalize(denoised_n, dataset.eps, dataset.scale),
        }
        if dataset.has_clean:
            frame["clean"] = dataset.clean[i]
        write_csv(pd.DataFrame(frame), os.path.join(args.out, _record_name(i)))
    logger.info("denoised %d records into %s", len(dataset), args.out)
    manifest.outputs.append(args.out)


def read_denoised(directory: str) -> List[pd.DataFrame]:
    paths = sorted(glob.glob(os.path.join(directory, DENOISED_PATTERN)))
    return [pd.read_csv(p) for p in paths]


def cmd_eval(args, config: Dict[str, Dict[str, Any]], manifest: RunManifest):
    """metric report of denoised curves against ground truth, in the normalized domain"""
    manifest.inputs.append(args.denoised)
    frames = read_denoised(args.denoised)
    if not frames:
        raise DatasetFormatError(f"{args.denoised}: no denoised records")

    eps, scale = config["data"]["eps"], config["data"]["scale"]
    if args.dataset:
        manifest.inputs.append(args.dataset)
        truth_set = dataset_read(args.dataset)
        if not truth_set.has_clean:
            raise DatasetFormatError(f"{args.dataset}: no clean signals to evaluate against")
        if len(truth_set) != len(frames):
            raise ValueError(
                f"{len(frames)} denoised records but {len(truth_set)} in {args.dataset}"
            )
        truth = list(truth_set.clean)
        eps, scale = truth_set.eps, truth_set.scale
    else:
        missing = [i for i, f in enumerate(frames) if "clean" not in f.columns]
        if missing:
            raise DatasetFormatError(
                f"records {missing[:5]} carry no clean column; pass --dataset"
            )
        truth = [f["clean"].to_numpy() for f in frames]

    pairs = []
    for i, (frame, x_t) in enumerate(zip(frames, truth)):
        if len(frame) != len(x_t):
            raise ValueError(f"record {i}: {len(frame)} denoised gates, {len(x_t)} reference gates")
        x_d = normalize(frame["denoised"].to_numpy(), eps, scale)
        pairs.append((x_d, normalize(x_t, eps, scale)))

    os.makedirs(args.out, exist_ok=True)
    report = batch_report(pairs, bins=args.bins)
    manifest.outputs.extend(write_report(report, args.out))

    if all("noisy" in f.columns for f in frames):
        noisy = [normalize(f["noisy"].to_numpy(), eps, scale) for f in frames]
        before = np.array([snr(x_n, x_t) for x_n, (_, x_t) in zip(noisy, pairs)])
        after = report.records["snr_db"].to_numpy()
        comparison = pd.DataFrame(
            {
                "record_id": report.records["record_id"],
                "snr_noisy_db": before,
                "snr_denoised_db": after,
                "snr_gain_db": after - before,
            }
        )
        path = os.path.join(args.out, "snr_gain.csv")
        write_csv(comparison, path)
        manifest.outputs.append(path)
        gain = comparison["snr_gain_db"].to_numpy()
        logger.info("mean SNR gain %.2f dB", np.mean(gain[np.isfinite(gain)]))


def cmd_swap_test(args, config: Dict[str, Dict[str, Any]], manifest: RunManifest):
    """MSE of every decoder/pairing combination against the clean and the noisy signal"""
    manifest.inputs.extend([args.checkpoint, args.dataset])
    dataset = dataset_read(args.dataset)
    if not dataset.has_clean:
        raise DatasetFormatError(f"{args.dataset}: the swap test needs clean signals")
    model = _load_for_dataset(args.checkpoint, dataset)
    clean, noisy = dataset.normalized()

    rows = []
    for i in range(len(dataset)):
        row: Dict[str, Any] = {"record_id": i}
        for key, decoded in swap_decodings(model, clean[i], noisy[i]).items():
            row[f"mse_{key}_clean"] = mse(decoded, clean[i])
            row[f"mse_{key}_noisy"] = mse(decoded, noisy[i])
        rows.append(row)
    frame = pd.DataFrame(rows)

    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "swap_report.csv")
    hist_path = os.path.join(args.out, "swap_hist_gn_s2n1_noisy.csv")
    write_csv(frame, report_path)
    column = "mse_gn_s2n1_noisy"
    values = frame[column].to_numpy() if len(frame) else np.zeros(0)
    write_csv(histogram(values, args.bins), hist_path)
    if len(frame):
        closer = np.mean(frame["mse_gn_s2n1_noisy"] < frame["mse_gn_s2n1_clean"])
        logger.info("G_n(Z_s clean, Z_n noisy) closer to noisy on %.1f%% of records", 100 * closer)
    manifest.outputs.extend([report_path, hist_path])


def _lengths(text: str) -> List[int]:
    try:
        lengths = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from exc
    if not lengths or min(lengths) < 1:
        raise argparse.ArgumentTypeError("lengths must be positive integers")
    return lengths


def cmd_bench_kernel(args, config: Dict[str, Dict[str, Any]], manifest: RunManifest):
    """``T,impl,seconds`` timings of the quadratic and the linear kernel"""
    manifest.seed = args.seed
    frame = bench_kernel(
        args.lengths, args.channels, args.repeats, seed=args.seed, naive_max=args.naive_max
    )
    write_csv(frame[["T", "impl", "seconds"]], args.out, float_format="%.6g")
    manifest.outputs.append(args.out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "denoise": cmd_denoise,
    "eval": cmd_eval,
    "swap-test": cmd_swap_test,
    "bench-kernel": cmd_bench_kernel,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="satem-denoise", description="Disentangled denoising of transient EM decay curves"
    )
    parser.add_argument("--config", help="flat 'section.key = value' config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )
    parser.add_argument("--log-level", default="INFO", help="logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None, help="defaults to data.seed")
    p.add_argument("--forward-csv", help="noise imported forward responses instead")
    p.add_argument("--noise-bank", help="recorded noise traces in the same CSV block format")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--loss-csv", help="defaults to <out>.losses.csv")

    p = sub.add_parser("denoise", help="denoise every record of a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="metric report of denoised records")
    p.add_argument("--denoised", required=True, help="directory written by denoise")
    p.add_argument("--dataset", help="ground truth; defaults to the clean column")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--bins", type=int, default=20)

    p = sub.add_parser("swap-test", help="factor swap experiment")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--bins", type=int, default=20)

    p = sub.add_parser("bench-kernel", help="time the naive and scan kernels")
    p.add_argument("--lengths", type=_lengths, default=[256, 512, 1024, 2048, 4096])
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--naive-max", type=int, default=None)
    p.add_argument("--out", required=True)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    started = time.perf_counter()
    try:
        config = load_config(args.config, args.overrides)
        manifest = RunManifest(args.command, config, seed=None)
        if args.config:
            manifest.inputs.append(args.config)
        COMMANDS[args.command](args, config, manifest)
        manifest.finalize(started)
        manifest.write(manifest_path(manifest.outputs[0]))
    except ERRORS as exc:
        logger.error("%s failed: %s", args.command, exc)
        return 1
    logger.info("%s finished in %.2fs", args.command, manifest.wall_time)
    return 0


if __name__ == "__main__":
    sys.exit(main())
