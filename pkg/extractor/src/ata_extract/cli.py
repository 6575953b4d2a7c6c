"""Command line front end: ``ata-extract --model ID --images DIR --instructions FILE --out DIR``.

Image directory layout: optional top-level label directories ``ID``, ``pOOD``
and ``OOD`` (anything else under --images is an ID sample). Inside a label
directory, a plain file is a single-camera sample and a subdirectory holds one
file per camera. The instructions file is either a JSON object mapping sample
id to instruction, a single line applied to every sample, or one line per
sample in scan order.

Exit codes: 0 success, 1 usage, 2 extraction/data failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .dump import ExtractionSpec, Sample, dump
from .errors import ExtractError

LABEL_DIRS = {"ID": "ID", "pOOD": "PartialOOD", "OOD": "FullOOD"}


def scan_images(images_dir: Path) -> list[tuple[str, str, list[Path]]]:
    """Return (sample id, label, camera files) triples in deterministic order."""
    if not images_dir.is_dir():
        raise ExtractError(f"image directory {images_dir} does not exist")
    groups: list[tuple[Path, str, str]] = []  # (dir, label, id prefix)
    labelled = [d for d in sorted(images_dir.iterdir()) if d.is_dir() and d.name in LABEL_DIRS]
    if labelled:
        groups = [(d, LABEL_DIRS[d.name], f"{d.name}/") for d in labelled]
    else:
        groups = [(images_dir, "ID", "")]
    samples = []
    for group_dir, label, prefix in groups:
        for entry in sorted(group_dir.iterdir()):
            if entry.name.startswith("."):
                continue
            if entry.is_dir():
                cameras = sorted(p for p in entry.iterdir() if p.is_file())
                if not cameras:
                    raise ExtractError(f"sample directory {entry} contains no camera files")
            else:
                cameras = [entry]
            samples.append((prefix + entry.stem, label, cameras))
    if not samples:
        raise ExtractError(f"no samples found under {images_dir}")
    return samples


def load_instructions(path: Path, sample_ids: list[str]) -> dict[str, str]:
    if not path.is_file():
        raise ExtractError(f"instructions file {path} does not exist")
    text = path.read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        mapping = {str(k): str(v) for k, v in json.loads(text).items()}
        missing = [sid for sid in sample_ids if sid not in mapping]
        if missing:
            raise ExtractError(f"no instruction for sample id {missing[0]!r}")
        return {sid: mapping[sid] for sid in sample_ids}
    lines = [line for line in text.splitlines() if line.strip()]
    if len(lines) == 1:
        return {sid: lines[0] for sid in sample_ids}
    if len(lines) == len(sample_ids):
        return dict(zip(sample_ids, lines))
    raise ExtractError(
        f"{len(lines)} instructions for {len(sample_ids)} samples; "
        "provide one line, one per sample, or a JSON id->instruction mapping"
    )


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="ata-extract",
        description="Extract pooled backbone embeddings as ATAF files plus a manifest.",
    )
    parser.add_argument("--model", required=True, help="checkpoint id, or stub:NAME for the deterministic stub")
    parser.add_argument("--images", required=True, type=Path, help="image directory (see module docs for layout)")
    parser.add_argument("--instructions", required=True, type=Path, help="instructions file")
    parser.add_argument("--out", required=True, type=Path, help="output directory")
    parser.add_argument("--batch-size", type=int, default=32)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; fold that into our usage code 1
        return 0 if not exc.code else 1

    try:
        scanned = scan_images(args.images)
        instructions = load_instructions(args.instructions, [sid for sid, _, _ in scanned])
        n_cameras = len(scanned[0][2])
        samples = [
            Sample(id=sid, label=label, images=[p.read_bytes() for p in cameras],
                   instruction=instructions[sid])
            for sid, label, cameras in scanned
        ]
        spec = ExtractionSpec(
            model=args.model, out_dir=args.out, n_cameras=n_cameras, batch_size=args.batch_size
        )
        paths = dump(spec, samples)
    except ExtractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {len(samples)} samples: {paths['vision']}, {paths['text']}, {paths['manifest']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
