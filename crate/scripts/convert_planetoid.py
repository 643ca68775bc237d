#!/usr/bin/env python3
"""Convert Planetoid raw files (ind.<name>.{x,tx,allx,y,ty,ally,graph,test.index})
into the fgu graph format: a JSON header plus a little-endian f64 feature blob.

Split: the standard Planetoid one (20 labelled nodes per class for training,
the next 500 nodes for validation, the listed 1000 test nodes).

    python3 scripts/convert_planetoid.py data/raw cora data/cora.json
"""

import argparse
import json
import os
import pickle
import sys

import numpy as np
import scipy.sparse as sp


def load(raw, name, part):
    with open(os.path.join(raw, f"ind.{name}.{part}"), "rb") as f:
        return pickle.load(f, encoding="latin1")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("raw_dir")
    ap.add_argument("name")
    ap.add_argument("out_json")
    args = ap.parse_args()

    x, tx, allx, y, ty, ally, graph = (load(args.raw_dir, args.name, p) for p in ("x", "tx", "allx", "y", "ty", "ally", "graph"))
    with open(os.path.join(args.raw_dir, f"ind.{args.name}.test.index")) as f:
        test_idx = [int(line) for line in f if line.strip()]
    test_sorted = sorted(test_idx)

    # Citeseer has isolated test nodes missing from tx/ty; pad them with zeros.
    full_range = range(test_sorted[0], test_sorted[-1] + 1)
    if len(full_range) != len(test_sorted):
        tx_ext = sp.lil_matrix((len(full_range), x.shape[1]))
        tx_ext[np.array(test_sorted) - test_sorted[0], :] = tx
        tx = tx_ext
        ty_ext = np.zeros((len(full_range), y.shape[1]))
        ty_ext[np.array(test_sorted) - test_sorted[0], :] = ty
        ty = ty_ext

    features = sp.vstack((allx, tx)).tolil()
    features[test_idx, :] = features[test_sorted, :]
    labels = np.vstack((ally, ty))
    labels[test_idx, :] = labels[test_sorted, :]
    n = features.shape[0]

    # Unlabelled padding rows get class 0; they are in no mask.
    label_ids = labels.argmax(axis=1).astype(int).tolist()
    edges = set()
    for u, nbrs in graph.items():
        for v in nbrs:
            if u != v and u < n and v < n:
                edges.add((min(u, v), max(u, v)))

    out_json = args.out_json
    blob = os.path.splitext(out_json)[0] + ".features.bin"
    np.asarray(features.todense(), dtype="<f8").tofile(blob)
    header = {
        "num_nodes": n,
        "num_features": features.shape[1],
        "num_classes": labels.shape[1],
        "edges": sorted([list(e) for e in edges]),
        "labels": label_ids,
        "masks": {
            "train": list(range(y.shape[0])),
            "val": list(range(y.shape[0], min(y.shape[0] + 500, allx.shape[0]))),
            "test": sorted(test_idx),
        },
        "features": {"blob": os.path.basename(blob)},
    }
    with open(out_json, "w") as f:
        json.dump(header, f)
    print(f"{args.name}: {n} nodes, {len(edges)} undirected edges, {features.shape[1]} features -> {out_json}", file=sys.stderr)


if __name__ == "__main__":
    main()
