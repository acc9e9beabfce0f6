"""Command-line entry point.

Subcommands: synth, embed-synthetic, train, eval, router-dump, gradcheck.
Exit codes: 0 success, 1 usage error, 2 data/config error, 3 internal
invariant failure. All randomness derives from --seed; no subcommand
writes outside its --out directory.
"""

import argparse
import json
import os
import sys

from .backbone import ModelConfig, load_model, build, full_config, toy_config
from .degrade import DatasetManifest, build_dataset, generate_clean_images
from .errors import (ConfigError, ContractError, DataError, DimensionError,
                     StoreError)
from .gradcheck import TOLERANCE, run_suite
from .guidance import read_store, synth_store, write_store
from .losses import LossConfig
from .train import (StageSchedule, desk_schedule, evaluate,
                    allinone_schedule, composite_schedule,
                    router_dump, train)

USAGE_EXIT, DATA_EXIT, INTERNAL_EXIT = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _dims(text):
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("dims must be D or D_image,D_joint,D_answer")
    return tuple(parts)


def _combos(text):
    return [tuple(part.split("+")) for part in text.split(",") if part]


def build_parser():
    parser = _Parser(prog="freqmoe",
                     description="Frequency-expert image restoration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a composite-degradation dataset")
    p.add_argument("--clean", help="directory of clean source images")
    p.add_argument("--out", required=True)
    p.add_argument("--per-combo", type=int, default=2)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--combos", type=_combos, default=None,
                   help="comma list like L,H,L+H+R (default: the 11 standard combos)")
    p.add_argument("--no-noise", action="store_true",
                   help="skip the N15/N25/N50 noise-only profiles")
    p.add_argument("--make-clean", type=int, default=0, metavar="N",
                   help="first generate N procedural clean images inside --out")

    p = sub.add_parser("embed-synthetic", help="write synthetic guidance embeddings")
    p.add_argument("--data", required=True, help="dataset dir or manifest.json")
    p.add_argument("--out", required=True, help="output embedding store file")
    p.add_argument("--dims", type=_dims, default=(64, 64, 64))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma-eps", type=float, default=0.01)

    p = sub.add_parser("train", help="train a restoration model")
    p.add_argument("--data", help="dataset dir or manifest.json (or 'data' in --config)")
    p.add_argument("--embeddings", help="embedding store (or 'embeddings' in --config)")
    p.add_argument("--out", help="output dir (or 'out' in --config)")
    p.add_argument("--profile", choices=("toy", "full"), default="toy")
    p.add_argument("--schedule", choices=("desk", "composite", "allinone"),
                   default="desk")
    p.add_argument("--config", help="JSON config overriding model/schedule/loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-mgl", action="store_true")
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--lambda-mgl", type=float, default=None)
    p.add_argument("--alpha-freq", type=float, default=None)
    p.add_argument("--grad-clip", type=float, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint, write a report CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("router-dump", help="dump router gates and similarity matrices")
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ids", help="comma-separated record ids (default: --limit records)")
    p.add_argument("--limit", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="finite-difference check every block")
    p.add_argument("--profile", choices=("toy",), default="toy")
    p.add_argument("--seed", type=int, default=0)

    return parser


def _manifest_path(data):
    if os.path.isdir(data):
        return os.path.join(data, "manifest.json")
    return data


def _cmd_synth(args):
    clean_dir = args.clean
    if args.make_clean:
        clean_dir = os.path.join(args.out, "clean_src")
        generate_clean_images(clean_dir, args.make_clean, args.size, args.seed)
    if not clean_dir:
        raise ConfigError("synth: provide --clean DIR or --make-clean N")
    manifest = build_dataset(clean_dir, args.out, per_combo=args.per_combo,
                             size=args.size, seed=args.seed, combos=args.combos,
                             include_noise=not args.no_noise)
    print(f"wrote {len(manifest.records)} records under {args.out}")
    return 0


def _cmd_embed_synthetic(args):
    manifest = DatasetManifest.load(_manifest_path(args.data))
    store = synth_store(manifest, dims=args.dims, seed=args.seed,
                        sigma_eps=args.sigma_eps)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_store(store, args.out)
    print(f"wrote {store.count} embedding records to {args.out}")
    return 0


_SCHEDULES = {
    "desk": desk_schedule,
    "composite": composite_schedule,
    "allinone": allinone_schedule,
}


def _cmd_train(args):
    file_cfg = {}
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
    data = args.data or file_cfg.get("data")
    embeddings = args.embeddings or file_cfg.get("embeddings")
    out = args.out or file_cfg.get("out")
    for name, value in (("--data", data), ("--embeddings", embeddings), ("--out", out)):
        if not value:
            raise ConfigError(f"train: {name} missing (flag or config key)")
    manifest = DatasetManifest.load(_manifest_path(data))
    store = read_store(embeddings)

    if "model" in file_cfg:
        model_cfg = ModelConfig.from_dict(file_cfg["model"])
    else:
        base = full_config if args.profile == "full" else toy_config
        model_cfg = base(embed_dims=(store.dim_image, store.dim_joint, store.dim_answer))

    if "schedule" in file_cfg:
        schedule = StageSchedule.from_dict(file_cfg["schedule"])
    else:
        schedule = _SCHEDULES[args.schedule]()

    loss_cfg = LossConfig(**file_cfg.get("loss", {}))
    if args.lambda_mgl is not None:
        loss_cfg.lambda_mgl = args.lambda_mgl
    if args.alpha_freq is not None:
        loss_cfg.alpha_freq = args.alpha_freq
    loss_cfg.validate()
    lr0 = file_cfg.get("lr0", args.lr)
    seed = file_cfg.get("seed", args.seed)

    model = build(model_cfg, seed)
    result = train(model, manifest, store, schedule, loss_cfg, seed, out,
                   no_mgl=args.no_mgl, lr0=lr0, grad_clip=args.grad_clip)
    last = result.log_rows[-1]
    print(f"trained {len(result.log_rows)} steps; final rec={last[3]:.5f} "
          f"mgl={last[4]:.5f}; log: {result.log_path}")
    print(f"final checkpoint: {result.final_checkpoint}")
    return 0


def _cmd_eval(args):
    manifest = DatasetManifest.load(_manifest_path(args.data))
    store = read_store(args.embeddings)
    model = load_model(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, "report.csv")
    rows = evaluate(model, manifest, store, out_csv=out_csv)
    overall = rows[-1]
    print(f"evaluated {len(manifest.records)} records; overall "
          f"psnr={overall['psnr_db']:.3f} dB ssim={overall['ssim']:.4f}")
    print(f"report: {out_csv}")
    return 0


def _cmd_router_dump(args):
    manifest = DatasetManifest.load(_manifest_path(args.data))
    store = read_store(args.embeddings)
    model = load_model(args.checkpoint)
    if args.ids:
        ids = [p for p in args.ids.split(",") if p]
    else:
        ids = [rec.id for rec in manifest.records[:args.limit]]
    os.makedirs(args.out, exist_ok=True)
    weights_csv = os.path.join(args.out, "router_weights.csv")
    sims_csv = os.path.join(args.out, "router_sims.csv")
    router_dump(model, store, ids, manifest, weights_csv, sims_csv)
    print(f"dumped {len(ids)} samples x {len(model.active_sites())} sites")
    print(f"gates: {weights_csv}\nsimilarities: {sims_csv}")
    return 0


def _cmd_gradcheck(args):
    results = run_suite(seed=args.seed)
    width = max(len(name) for name, _ in results)
    failed = 0
    for name, err in results:
        ok = err <= TOLERANCE
        failed += not ok
        print(f"{name:<{width}}  rel_err={err:.3e}  {'pass' if ok else 'FAIL'}")
    print(f"{len(results) - failed}/{len(results)} blocks within {TOLERANCE:g}")
    return 0 if failed == 0 else INTERNAL_EXIT


_COMMANDS = {
    "synth": _cmd_synth,
    "embed-synthetic": _cmd_embed_synthetic,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "router-dump": _cmd_router_dump,
    "gradcheck": _cmd_gradcheck,
}


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else USAGE_EXIT
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DataError, StoreError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except (ContractError, DimensionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return INTERNAL_EXIT


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
