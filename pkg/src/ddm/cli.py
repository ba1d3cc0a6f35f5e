"""``ddm`` command line: gen-data, train, sample, uncertainty, eval.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 numerical failure.
Every command writes ``<output>.manifest.json`` naming the hash of the config
it consumed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ddm import archive, config as cfgmod, metrics, nn
from ddm import uncertainty as uq
from ddm.diffusion import DDMRestorer, reconstruct, uniform_steps
from ddm.dpm import DPMRestorer, gamma_schedule, respace_quadratic, sample as dpm_sample
from ddm.exceptions import (ArchiveFormatError, DomainError, NumericalError, ShapeError,
                            UsageError)
from ddm.optics import make_dataset, make_operator
from ddm.schedule import alpha_cosine
from ddm.tensor import RngStream

log = logging.getLogger("ddm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MAX_PREVIEWS = 8


# -- small file helpers -------------------------------------------------------

def write_pgm(path, img, scale=1.0) -> None:
    """Binary P5 greyscale, maxval 255; ``img / scale`` is clipped to [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"PGM needs a 2-D image, got {img.shape}")
    q = np.round(np.clip(img / scale, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    archive.atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ArchiveFormatError(f"{path}: not an 8-bit P5 image")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


def write_manifest(out_path, command: str, cfg_hash: str, **extra) -> Path:
    path = Path(str(out_path) + ".manifest.json")
    body = {"command": command, "config_hash": cfg_hash, **extra}
    archive.atomic_write(path, (json.dumps(body, indent=2, sort_keys=True) + "\n").encode())
    return path


def _config_of(entries: dict, what: str) -> cfgmod.RunConfig:
    if "config" not in entries:
        raise ArchiveFormatError(f"{what} carries no config echo")
    return cfgmod.from_dict(archive.entry_json(entries["config"]))


def _previews(folder: Path, stem: str, images, scale=1.0):
    folder.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images[:MAX_PREVIEWS]):
        write_pgm(folder / f"{stem}_{i:03d}.pgm", img, scale)


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, kind: str, net: nn.RestorationNet, cfg: cfgmod.RunConfig, sched_vec):
    entries = {"config": archive.json_entry(cfg.to_dict()),
               "meta": archive.json_entry({"model": kind, "net": net.config()}),
               "schedule": np.asarray(sched_vec, dtype=np.float64)}
    for k, v in sorted(net.state_dict().items()):
        entries[f"param/{k}"] = v
    archive.write_archive(path, entries)


def load_checkpoint(path):
    """``(kind, net, schedule, config)`` from a checkpoint archive."""
    entries = archive.read_archive(path)
    cfg = _config_of(entries, str(path))
    if "meta" not in entries:
        raise ArchiveFormatError(f"{path}: not a checkpoint")
    meta = archive.entry_json(entries["meta"])
    nc = dict(meta["net"])
    nc["image_shape"] = tuple(nc["image_shape"])
    net = nn.RestorationNet(**nc)
    net.load_state_dict({k[6:]: v for k, v in entries.items() if k.startswith("param/")})
    m = cfg.model
    if meta["model"] == "ddm":
        sched = alpha_cosine(m.T)
    else:
        sched = gamma_schedule(m.T, m.beta_start, m.beta_end)
    return meta["model"], net, sched, cfg


# -- commands -----------------------------------------------------------------

def _dataset_path(cfg, base) -> Path:
    return cfg.workdir(base) / "data.ddt"


def cmd_init_config(args) -> int:
    text = cfgmod.dumps(cfgmod.RunConfig())
    if args.out == "-":
        sys.stdout.write(text)
    else:
        archive.atomic_write(args.out, text.encode())
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = cfgmod.load(args.config)
    base = Path(args.config).resolve().parent
    wd = cfg.workdir(base)
    wd.mkdir(parents=True, exist_ok=True)
    op = make_operator(cfg.operator.kind, cfg.operator.seed, cfg.operator.noise_level)
    d = cfg.data
    ds = make_dataset(op, d.count, d.height, d.width, d.seed, d.train_fraction)
    out = _dataset_path(cfg, base)
    archive.write_archive(out, {
        "X": ds.X.astype(np.float64),
        "Y_T": ds.Y_T.astype(np.float64),
        "train_idx": ds.train_idx.astype(np.float64),
        "test_idx": ds.test_idx.astype(np.float64),
        "config": archive.json_entry(cfg.to_dict()),
    })
    write_manifest(out, "gen-data", cfg.hash(),
                   operator={"kind": cfg.operator.kind, "seed": cfg.operator.seed,
                             "noise_level": cfg.operator.noise_level},
                   data_seed=d.seed, dims=[d.height, d.width], count=d.count)
    print(out)
    return EXIT_OK


def _load_dataset(path):
    e = archive.read_archive(path)
    for k in ("X", "Y_T", "train_idx", "test_idx"):
        if k not in e:
            raise ArchiveFormatError(f"{path}: missing entry {k!r}")
    return e


def cmd_train(args) -> int:
    cfg = cfgmod.load(args.config)
    base = Path(args.config).resolve().parent
    data_path = Path(args.data) if args.data else _dataset_path(cfg, base)
    e = _load_dataset(data_path)
    if e["X"].shape[1:] != (cfg.data.height, cfg.data.width):
        raise ShapeError(f"dataset dims {e['X'].shape[1:]} disagree with the config")
    tr = e["train_idx"].astype(int)
    X, Y = e["X"][tr], e["Y_T"][tr]
    m, t = cfg.model, cfg.trainer
    if args.model == "ddm":
        est = DDMRestorer(n_steps=m.T, width=m.width, time_dim=m.time_dim, dropout=m.dropout,
                          uncertainty=m.heads == "mean+logvar", learning_rate=t.learning_rate,
                          batch_size=t.batch_size, max_iter=t.steps, random_state=t.seed)
    else:
        est = DPMRestorer(n_steps=m.T, beta_start=m.beta_start, beta_end=m.beta_end,
                          width=m.width, time_dim=m.time_dim, dropout=m.dropout,
                          learning_rate=t.learning_rate,
                          batch_size=t.batch_size, max_iter=t.steps, random_state=t.seed)
    est.fit(Y, X)
    wd = cfg.workdir(base)
    wd.mkdir(parents=True, exist_ok=True)
    out = Path(args.out) if args.out else wd / f"ckpt_{args.model}.ddt"
    if args.model == "ddm":
        sched_vec = est.schedule_.alphas
    else:
        sched_vec = est.schedule_.gammas
    save_checkpoint(out, args.model, est.net_, cfg, sched_vec)
    rows = "".join(f"{i},{v:.9g}\n" for i, v in enumerate(est.epoch_losses_))
    loss_csv = out.with_suffix(".loss.csv")
    archive.atomic_write(loss_csv, ("epoch,loss\n" + rows).encode())
    write_manifest(out, "train", cfg.hash(), model=args.model, steps=int(est.n_iter_),
                   dataset=str(data_path), loss_csv=str(loss_csv))
    print(out)
    return EXIT_OK


def _test_split(cfg, ckpt_path, data_arg, shape):
    data_path = Path(data_arg) if data_arg else Path(ckpt_path).resolve().parent / "data.ddt"
    e = _load_dataset(data_path)
    if e["Y_T"].shape[1:] != tuple(shape):
        raise ShapeError(f"checkpoint expects {tuple(shape)} images, dataset has {e['Y_T'].shape[1:]}")
    ids = e["test_idx"].astype(int)
    return data_path, ids, e["Y_T"][ids], e["X"][ids]


def cmd_sample(args) -> int:
    kind, net, sched, cfg = load_checkpoint(args.ckpt)
    data_path, ids, Y_T, _ = _test_split(cfg, args.ckpt, args.data, net.image_shape)
    steps_arg = args.steps or sched.T
    entries = {}
    if kind == "ddm":
        steps = uniform_steps(sched.T, steps_arg)
        traj = reconstruct(net, sched, Y_T.astype(net.dtype), args.mode, steps, None,
                           keep_states=args.trajectory)
        recon = np.asarray(traj.y_0, dtype=np.float64)
        if args.trajectory:
            entries["trajectory"] = np.stack(traj.y).astype(np.float64)
    else:
        if args.mode != "indirect":
            log.info("--mode is ignored for the dpm baseline")
        steps = respace_quadratic(sched.T, steps_arg)
        rng = RngStream(cfg.trainer.seed).child("sample")
        y = dpm_sample(net, sched, 2.0 * Y_T - 1.0, rng, steps)
        recon = np.clip((y + 1.0) / 2.0, 0.0, 1.0)
        steps = steps[::-1]
    entries.update({"recon": recon, "ids": ids.astype(np.float64),
                    "steps": np.asarray(steps, dtype=np.float64),
                    "config": archive.json_entry(cfg.to_dict())})
    out = Path(args.out) if args.out else Path(args.ckpt).with_name(
        f"recon_{kind}_{args.mode}_{len(steps) - 1}.ddt")
    archive.write_archive(out, entries)
    _previews(out.with_suffix(".pgm.d"), "recon", recon)
    write_manifest(out, "sample", cfg.hash(), model=kind, mode=args.mode,
                   n_steps=len(steps) - 1, steps=[int(s) for s in steps], dataset=str(data_path))
    print(out)
    return EXIT_OK


def cmd_uncertainty(args) -> int:
    kind, net, sched, cfg = load_checkpoint(args.ckpt)
    if kind != "ddm" or net.heads != "mean+logvar":
        raise UsageError("uncertainty needs a ddm checkpoint trained with a sigma head")
    u = cfg.uq
    S = args.S or u.S
    H = args.H or u.H
    mode = args.mode or u.mode
    P = args.paths or u.P_paths
    n = args.n_images or u.n_images
    data_path, ids, Y_T, _ = _test_split(cfg, args.ckpt, args.data, net.image_shape)
    ids, Y_T = ids[:n], Y_T[:n]
    root = RngStream(u.seed)
    reports, trusted = [], []
    for i, y in zip(ids, Y_T):
        rng = root.child(f"image{i}")
        reports.append(uq.quantify(net, sched, y, S=S, H=H, mode=mode, rng=rng.child("uq")))
        trusted.append(uq.most_trusted_path(net, sched, y, P, S, rng.child("paths")))
    entries = {
        "ids": ids.astype(np.float64),
        "sigma_model": np.stack([r.total_model for r in reports]).astype(np.float64),
        "sigma_data": np.stack([r.total_data for r in reports]).astype(np.float64),
        "most_trusted": np.stack(trusted).astype(np.float64),
        "steps": np.asarray(reports[0].steps, dtype=np.float64),
    }
    for name in ("mu_hat", "sigma_model", "sigma_data"):
        entries[f"step/{name}"] = np.stack(
            [np.stack([np.asarray(getattr(s, name), dtype=np.float64) for s in r.per_step])
             for r in reports])
    if mode == "full":
        entries["cov_model"] = np.stack(
            [np.stack([r.cov_model[t] for t in r.steps]) for r in reports]).astype(np.float64)
        entries["cov_data"] = np.stack(
            [np.stack([r.cov_data[t] for t in r.steps]) for r in reports]).astype(np.float64)
    entries["config"] = archive.json_entry(cfg.to_dict())
    out = Path(args.out) if args.out else Path(args.ckpt).with_name(f"uq_{mode}.ddt")
    archive.write_archive(out, entries)
    folder = out.with_suffix(".pgm.d")
    _previews(folder, "sigma_model", entries["sigma_model"], max(entries["sigma_model"].max(), 1e-12))
    _previews(folder, "sigma_data", entries["sigma_data"], max(entries["sigma_data"].max(), 1e-12))
    _previews(folder, "most_trusted", entries["most_trusted"])
    write_manifest(out, "uncertainty", cfg.hash(), S=S, H=H, mode=mode, T=sched.T, paths=P,
                   clamped_model=[int(r.clamped_model) for r in reports],
                   clamped_data=[int(r.clamped_data) for r in reports], dataset=str(data_path))
    print(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    rec = archive.read_archive(args.recon)
    if "recon" not in rec or "ids" not in rec:
        raise ArchiveFormatError(f"{args.recon}: not a reconstruction archive")
    cfg = _config_of(rec, args.recon)
    data = _load_dataset(args.data)
    ids = rec["ids"].astype(int)
    if ids.size != len(rec["recon"]) or ids.min(initial=0) < 0 or ids.max(initial=0) >= len(data["X"]):
        raise ArchiveFormatError("reconstruction ids do not match the dataset")
    if not np.array_equal(np.sort(ids), np.sort(data["test_idx"].astype(int))):
        raise ArchiveFormatError("reconstruction ids differ from the dataset's test split")
    rows = metrics.evaluate(rec["recon"], data["X"][ids], ids)
    out = Path(args.out) if args.out else Path(args.recon).with_suffix(".metrics.csv")
    archive.atomic_write(out, metrics.metrics_csv(rows).encode())
    line = metrics.summary_line(rows)
    write_manifest(out, "eval", cfg.hash(), recon=str(args.recon), dataset=str(args.data),
                   summary=line)
    print(line)
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddm", description="Deterministic diffusion restoration pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-config", help="write a default config")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_init_config)

    s = sub.add_parser("gen-data", help="simulate a dataset")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", required=True)
    s.add_argument("--model", choices=("ddm", "dpm"), default="ddm")
    s.add_argument("--data")
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="reconstruct the test split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--mode", choices=("direct", "indirect"), default="indirect")
    s.add_argument("--steps", type=int)
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--trajectory", action="store_true", help="also store every visited state")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("uncertainty", help="model and data uncertainty maps")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--S", type=int)
    s.add_argument("--H", type=int)
    s.add_argument("--mode", choices=("naive", "full"))
    s.add_argument("--paths", type=int)
    s.add_argument("--n-images", type=int)
    s.add_argument("--data")
    s.add_argument("--out")
    s.set_defaults(func=cmd_uncertainty)

    s = sub.add_parser("eval", help="score reconstructions")
    s.add_argument("--recon", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ddm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"ddm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ArchiveFormatError, ShapeError, DomainError, OSError, ValueError) as exc:
        print(f"ddm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
