#!/usr/bin/env python3
"""Flatten a nested class tree into the flat root/<class>/<image> layout.

Handwriting corpora often ship as group/character/image trees; the loader
wants one directory per class. Every directory that directly contains image
files becomes a class named by its path joined with the separator.

    python3 scripts/flatten_class_tree.py omniglot/images_background data/images
"""
import argparse
import shutil
import sys
from pathlib import Path

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tiff"}


def leaf_class_dirs(root: Path):
    for path in sorted(root.rglob("*")):
        if path.is_dir() and any(
            f.suffix.lower() in IMAGE_SUFFIXES for f in path.iterdir() if f.is_file()
        ):
            yield path


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("root", type=Path, help="nested tree to flatten")
    parser.add_argument("out", type=Path, help="flat layout destination")
    parser.add_argument("--copy", action="store_true",
                        help="copy files instead of symlinking")
    parser.add_argument("--sep", default="_", help="path join separator")
    args = parser.parse_args(argv)

    if not args.root.is_dir():
        print(f"not a directory: {args.root}", file=sys.stderr)
        return 1
    args.out.mkdir(parents=True, exist_ok=True)

    n_classes = n_files = 0
    for class_dir in leaf_class_dirs(args.root):
        flat_name = args.sep.join(class_dir.relative_to(args.root).parts)
        dest = args.out / flat_name
        dest.mkdir(exist_ok=True)
        for image in sorted(class_dir.iterdir()):
            if image.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            target = dest / image.name
            if target.exists():
                target.unlink()
            if args.copy:
                shutil.copyfile(image, target)
            else:
                target.symlink_to(image.resolve())
            n_files += 1
        n_classes += 1

    if n_classes == 0:
        print(f"no image directories under {args.root}", file=sys.stderr)
        return 1
    print(f"flattened {n_classes} classes ({n_files} images) -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
