"""Command-line interface mirroring ExtractorConfig."""

import argparse
import logging
import sys

from .backends import make_backend
from .extract import DEFAULT_PROMPT, ExtractorConfig, extract, load_manifest_records


def build_parser():
    parser = argparse.ArgumentParser(
        prog="guidance-extractor",
        description="Write guidance embeddings for every record of a dataset manifest")
    parser.add_argument("--manifest", required=True, help="dataset manifest.json")
    parser.add_argument("--out", required=True, help="output embedding store file")
    parser.add_argument("--model", default="Qwen/Qwen2.5-VL-3B-Instruct")
    parser.add_argument("--prompt", default=DEFAULT_PROMPT)
    parser.add_argument("--pooling", choices=("mean",), default="mean")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--max-new-tokens", type=int, default=64)
    parser.add_argument("--backend", choices=("hf", "mock"), default="hf",
                        help="'mock' runs a deterministic offline stand-in")
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    config = ExtractorConfig(
        model_id=args.model, prompt=args.prompt, pooling=args.pooling,
        device=args.device, max_new_tokens=args.max_new_tokens,
        output_path=args.out, manifest_path=args.manifest).validate()
    records = load_manifest_records(config.manifest_path)
    backend = make_backend(args.backend, config)
    path, written, skipped = extract(config, records, backend)
    print(f"wrote {written} records to {path}"
          + (f" ({len(skipped)} skipped)" if skipped else ""))
    return 0 if written else 2


if __name__ == "__main__":
    sys.exit(main())
