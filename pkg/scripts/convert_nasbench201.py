"""Convert a NAS-Bench-201 export into the benchmark table text format.

Two input forms are accepted:

* the public `.pth` export (needs torch installed; the file is large and the
  load takes a while)
* a `.json` file holding either {"arch string": accuracy} directly or a list
  of {"arch": ..., "accuracy": ...} objects, for pre-extracted dumps

Accuracies are written normalized to [0,1]. Op names are translated from the
benchmark's vocabulary (`none`, `nor_conv_1x1`, ...) to the cell-space op set
(`zero`, `conv1x1`, ...); the node wiring notation is shared, so keys in the
output table parse directly against `CellSpace`.

    python3 scripts/convert_nasbench201.py nb201.json --out table.tsv \
        --dataset cifar10
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from pinas.search import BenchmarkTable
from pinas.space import CellSpace, parse_arch

OP_NAMES = {
    "none": "zero",
    "skip_connect": "skip_connect",
    "nor_conv_1x1": "conv1x1",
    "nor_conv_3x3": "conv3x3",
    "avg_pool_3x3": "avgpool3x3",
}


def translate_arch(nb_arch: str) -> str:
    """Benchmark genotype string -> cell-space genotype string."""
    out = nb_arch
    for src, dst in sorted(OP_NAMES.items(), key=lambda kv: -len(kv[0])):
        out = out.replace(src + "~", dst + "~")
    return out


def _normalize(acc: float) -> float:
    return acc / 100.0 if acc > 1.0 else acc


def from_json(path: Path) -> dict[str, float]:
    obj = json.loads(path.read_text())
    if isinstance(obj, dict):
        items = obj.items()
    else:
        items = ((row["arch"], row["accuracy"]) for row in obj)
    return {translate_arch(a): _normalize(float(v)) for a, v in items}


def from_pth(path: Path, dataset: str) -> dict[str, float]:
    try:
        import torch
    except ImportError:
        sys.exit(
            "error: reading a .pth export needs torch; install it or convert "
            "the export to the json form first"
        )
    blob = torch.load(path, map_location="cpu", weights_only=False)
    # the export keys rotate between releases; probe the two known layouts
    table = {}
    if "arch2infos" in blob:
        meta = blob.get("meta_archs", [])
        for idx, infos in blob["arch2infos"].items():
            info = infos.get("200") or infos.get("12") or next(iter(infos.values()))
            arch = meta[int(idx)] if meta else info["arch_str"]
            results = info["all_results"]
            accs = [
                r["eval_acc1es"][f"ori-test@{info['total_epochs'] - 1}"]
                for (ds, _seed), r in results.items()
                if ds == dataset
            ]
            if accs:
                table[translate_arch(arch)] = _normalize(sum(accs) / len(accs))
    else:
        for arch, per_dataset in blob.items():
            if dataset in per_dataset:
                table[translate_arch(arch)] = _normalize(float(per_dataset[dataset]))
    if not table:
        sys.exit(f"error: no '{dataset}' accuracies found in {path}")
    return table


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source", help="NAS-Bench-201 export (.pth or .json)")
    ap.add_argument("--out", required=True, help="output table path")
    ap.add_argument("--dataset", default="cifar10", help="dataset key in the export")
    ap.add_argument(
        "--check", action="store_true",
        help="also parse every key against the cell space before writing",
    )
    args = ap.parse_args()

    src = Path(args.source)
    if src.suffix == ".json":
        mapping = from_json(src)
    else:
        mapping = from_pth(src, args.dataset)

    if args.check:
        space = CellSpace()
        for key in mapping:
            parse_arch(key, space)

    Path(args.out).write_text(BenchmarkTable(mapping).to_text())
    print(f"wrote {len(mapping)} architectures to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
