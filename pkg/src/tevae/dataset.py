"""Dataset directory format.

Every sequence is a CSV file (header row of channel names, one row per time
step) next to a JSON sidecar with id, rate, split and ground truth::

    <root>/<split>/<id>.csv
    <root>/<split>/<id>.json
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import NORMAL, GroundTruth
from .preprocess import Sequence


@dataclass
class Record:
    seq: Sequence
    gt: GroundTruth
    split: str
    meta: dict


def write_sequence(directory, seq: Sequence, gt: GroundTruth | None, split: str, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savetxt(directory / f"{seq.id}.csv", seq.values, delimiter=",",
               header=",".join(seq.channel_names), comments="", fmt="%.9g")
    gt = gt or GroundTruth(NORMAL, seq.T)
    meta = {"id": seq.id, "rate": seq.rate, "split": split, "ground_truth": gt.to_dict()}
    if extra:
        meta.update(extra)
    (directory / f"{seq.id}.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def read_sequence(csv_path) -> Record:
    csv_path = Path(csv_path)
    meta = json.loads(csv_path.with_suffix(".json").read_text())
    with open(csv_path) as fh:
        names = fh.readline().strip().split(",")
    values = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    seq = Sequence(values, float(meta["rate"]), names, meta["id"])
    gt = GroundTruth.from_dict(meta["ground_truth"]) if "ground_truth" in meta else GroundTruth(NORMAL, seq.T)
    return Record(seq, gt, meta.get("split", csv_path.parent.name), meta)


def load_split(root, split: str) -> list[Record]:
    directory = Path(root) / split
    if not directory.is_dir():
        raise FileNotFoundError(f"no {split!r} split under {root}")
    return [read_sequence(p) for p in sorted(directory.glob("*.csv"))]
