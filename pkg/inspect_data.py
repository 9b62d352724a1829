import json
import os
import sys

import pandas as pd

root = sys.argv[1] if len(sys.argv) > 1 else 'data'

manifest_path = os.path.join(root, 'manifest.json')
if os.path.exists(manifest_path):
    print(f"--- {manifest_path} ---")
    with open(manifest_path) as f:
        manifest = json.load(f)
    print("World:", manifest["world"])
    rows = []
    for sample in manifest["samples"]:
        rows.append({
            "split": sample["split"],
            "provenance": sample.get("provenance", "rendered"),
            "n_defects": len(sample["annotations"]),
        })
    df = pd.DataFrame(rows, columns=["split", "provenance", "n_defects"])
    print("Shape:", df.shape)
    if len(df):
        print(df.groupby(["split", "provenance"])["n_defects"].agg(["count", "sum", "mean"]))
        classes = pd.Series([a["class_id"] for s in manifest["samples"] for a in s["annotations"]], dtype=int)
        print("Defects per class:")
        print(classes.value_counts().sort_index())
    print("\n")

files = [f for f in sorted(os.listdir(root)) if f.endswith('.csv')] if os.path.isdir(root) else []
for file in files:
    print(f"--- {file} ---")
    try:
        df = pd.read_csv(os.path.join(root, file))
        print("Columns:", df.columns.tolist())
        print("Shape:", df.shape)
        print("Last 2 rows:")
        print(df.tail(2))
    except Exception as e:
        print(f"Error reading {file}: {e}")
    print("\n")
