"""End-to-end study on synthetic scans: generate -> train -> infer -> eval -> bench.

Runs the packaged CLI in-process with a small default budget (minutes on
one core). Outputs land under --workdir: volume pairs, a checkpoint per
variant, reconstruction volumes, the per-slice PSNR report, and the
inference timing table.

Example:
    python scripts/run_pipeline.py --workdir runs/demo --epochs 4
"""

import argparse
import os
import sys

from ctrefine import cli


def run(argv):
    print(f"$ ctrefine {' '.join(argv)}", flush=True)
    code = cli.main(argv)
    if code != cli.EXIT_OK:
        sys.exit(f"step failed with exit code {code}: ctrefine {' '.join(argv)}")


def main():
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--workdir", default="runs/pipeline")
    ap.add_argument("--seed", type=int, default=100)
    ap.add_argument("--dims", default="16 64 64")
    ap.add_argument("--views", type=int, default=24)
    ap.add_argument("--noise-sigma", type=float, default=15.0)
    ap.add_argument("--variants", nargs="+", default=["2d", "2.5d"],
                    choices=["2d", "2.5d", "3d"])
    ap.add_argument("--depth", type=int, default=7)
    ap.add_argument("--width", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--patch-size", type=int, default=24)
    ap.add_argument("--patch-count", type=int, default=20000)
    ap.add_argument("--learning-rate", type=float, default=6e-3)
    args = ap.parse_args()

    data_dir = os.path.join(args.workdir, "data")
    run(["generate", "--seed", str(args.seed), "--volumes", "3",
         "--dims", args.dims, "--views", str(args.views),
         "--noise-sigma", str(args.noise_sigma), "--out", data_dir])

    # the third generated volume is held out: training reads only the pairs
    # listed in a manifest we rewrite without it
    manifest = os.path.join(data_dir, "generate_manifest.txt")
    train_manifest = os.path.join(args.workdir, "train_data", "generate_manifest.txt")
    os.makedirs(os.path.dirname(train_manifest), exist_ok=True)
    kept = [line for line in open(manifest, encoding="utf-8")
            if not line.startswith("vol2_")]
    with open(train_manifest, "w", encoding="utf-8") as fh:
        fh.writelines(kept)
    for name in os.listdir(data_dir):
        if name.startswith(("vol00", "vol01")):
            link = os.path.join(os.path.dirname(train_manifest), name)
            if not os.path.exists(link):
                os.link(os.path.join(data_dir, name), link)

    checkpoints = []
    method_flags = []
    for variant in args.variants:
        out_dir = os.path.join(args.workdir, f"train_{variant.replace('.', '')}")
        run(["train", "--data", os.path.dirname(train_manifest), "--variant", variant,
             "--depth", str(args.depth), "--width", str(args.width),
             "--epochs", str(args.epochs), "--patch-size", str(args.patch_size),
             "--patch-count", str(args.patch_count),
             "--learning-rate", str(args.learning_rate),
             "--val-fraction", "0.1", "--out", out_dir])
        ckpt = os.path.join(out_dir, "final.ckpt")
        recon = os.path.join(args.workdir, f"recon_{variant.replace('.', '')}.vol")
        run(["infer", "--checkpoint", ckpt,
             "--input", os.path.join(data_dir, "vol02_fbp.vol"), "--out", recon])
        checkpoints.append(ckpt)
        method_flags += ["--method", f"{variant}={recon}"]

    run(["eval", "--reference", os.path.join(data_dir, "vol02_truth.vol"),
         "--fbp", os.path.join(data_dir, "vol02_fbp.vol"),
         *method_flags, "--plots", "true",
         "--out", os.path.join(args.workdir, "report.csv")])

    bench_args = ["bench", "--volume", os.path.join(data_dir, "vol02_fbp.vol"),
                  "--out", os.path.join(args.workdir, "bench.csv")]
    for ckpt in checkpoints:
        bench_args += ["--checkpoint", ckpt]
    run(bench_args)

    print(f"\nall outputs under {args.workdir}/")


if __name__ == "__main__":
    main()
