#!/usr/bin/env python3
"""Build example edit-request JSONs from a dataset's oracle part masks.

Usage: make_edit_requests.py <dataset_dir> <out_dir>
Writes color_edit.json (recolor instance 0's seat toward its reference
twin) and remove_leg.json (remove instance 1's first leg).
"""

import json
import sys

import numpy as np

from cnerf.scene import load_dataset, oracle_part_mask


def main():
    dataset_dir, out_dir = sys.argv[1], sys.argv[2]
    ds = load_dataset(dataset_dir)
    rng = np.random.default_rng(0)
    view = ds.train_view_ids()[0]

    seat = ds.instances[0].part_indices("seat")[0]
    mask = oracle_part_mask(ds.instances[0], ds.camera(view), seat)
    fg = np.argwhere(mask)
    bg = np.argwhere(~mask)
    fg = fg[rng.choice(len(fg), size=min(50, len(fg)), replace=False)]
    bg = bg[rng.choice(len(bg), size=50, replace=False)]
    twin_seat = ds.references["recolor_0"].part_indices("seat")[0]
    target = ds.references["recolor_0"].parts[twin_seat].color
    color_req = {
        "kind": "color", "instance": 0, "target_color": list(target),
        "scribbles": [{"view_id": view, "fg": fg.tolist(), "bg": bg.tolist()}],
        "hyper": {"iterations": 100, "seed": 0},
    }
    with open(f"{out_dir}/color_edit.json", "w") as f:
        json.dump(color_req, f)

    leg = ds.instances[1].part_indices("leg")[0]
    mask = oracle_part_mask(ds.instances[1], ds.camera(view), leg)
    grown = mask.copy()
    grown[1:] |= mask[:-1]
    grown[:-1] |= mask[1:]
    grown[:, 1:] |= mask[:, :-1]
    grown[:, :-1] |= mask[:, 1:]
    remove_req = {
        "kind": "shape_remove", "instance": 1,
        "scribbles": [{"view_id": view, "fg": np.argwhere(grown).tolist(),
                       "bg": np.argwhere(~grown).tolist()}],
        "hyper": {"iterations": 100, "seed": 0},
    }
    with open(f"{out_dir}/remove_leg.json", "w") as f:
        json.dump(remove_req, f)
    print(f"wrote {out_dir}/color_edit.json and {out_dir}/remove_leg.json")


if __name__ == "__main__":
    main()
