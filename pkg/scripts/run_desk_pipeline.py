"""Run the full desk-scale pipeline (train, attack, transfer, universal, t-SNE, report).

usage: python scripts/run_desk_pipeline.py OUT_DIR [--seed 0] [--data-dir /root/data] [--resume]
"""
import argparse
import logging

from capsadv import harness as H


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data-dir", default=None)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--resume", action="store_true", help="reuse cached stage outputs in OUT/cache")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    report, _ = H.run_pipeline(H.desk_pipeline_config(args.seed, args.workers), args.out, args.data_dir, args.resume)
    print(report.table(), end="")


if __name__ == "__main__":
    main()
