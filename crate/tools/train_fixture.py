#!/usr/bin/env python3
"""Train the small CNN used as the test fixture and export it to the
manifest + f64 blob format.

    cargo build --release -p lrp-core
    python3 tools/train_fixture.py --lrp target/release/lrp \
        --out crates/core/tests/fixtures

Training data comes from `lrp synth` with a seed disjoint from the
evaluation set (seed 0), so the reported accuracy is on unseen images.
"""
import argparse
import json
import struct
import subprocess
import tempfile
import zlib
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

CLASSES = ["hstripes", "vstripes", "checker", "diagonal"]


def load(dir_: Path):
    xs, ys, ids = [], [], []
    for ann in sorted((dir_ / "annotations").glob("*.json")):
        a = json.loads(ann.read_text())
        img = np.asarray(Image.open(dir_ / "images" / f"{a['image_id']}.png").convert("RGB"))
        xs.append(img.transpose(2, 0, 1).astype(np.float64) / 255.0)
        ys.append(CLASSES.index(a["boxes"][0]["label"]))
        ids.append(a["image_id"])
    return torch.tensor(np.stack(xs)), torch.tensor(ys), ids


def synth(lrp, out, seed, count):
    subprocess.run([lrp, "synth", "--out", str(out), "--seed", str(seed), "--count", str(count)],
                   check=True, stdout=subprocess.DEVNULL)
    return load(out)


def build():
    return nn.Sequential(
        nn.Conv2d(3, 8, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(8, 16, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Flatten(), nn.Linear(16 * 8 * 8, 32), nn.ReLU(), nn.Linear(32, len(CLASSES)),
    )


def export(net, out: Path, stem: str):
    blob, layers = [], []

    def push(t):
        off = len(blob)
        blob.extend(t.detach().double().flatten().tolist())
        return off

    for m in net:
        if isinstance(m, nn.Conv2d):
            p = m.padding[0]
            layers.append({
                "type": "conv2d", "in_channels": m.in_channels, "out_channels": m.out_channels,
                "kernel": list(m.kernel_size), "stride": list(m.stride), "padding": [p, p, p, p],
                "weight_offset": push(m.weight), "bias_offset": push(m.bias),
            })
        elif isinstance(m, nn.Linear):
            layers.append({
                "type": "dense", "inputs": m.in_features, "outputs": m.out_features,
                "weight_offset": push(m.weight), "bias_offset": push(m.bias),
            })
        elif isinstance(m, nn.MaxPool2d):
            layers.append({"type": "maxpool2d", "window": [m.kernel_size] * 2, "stride": [m.stride] * 2})
        elif isinstance(m, nn.ReLU):
            layers.append({"type": "relu"})
        elif isinstance(m, nn.Flatten):
            layers.append({"type": "flatten"})
    raw = struct.pack(f"<{len(blob)}d", *blob)
    (out / f"{stem}.bin").write_bytes(raw)
    manifest = {
        "input_shape": [3, 32, 32], "class_labels": CLASSES, "weights_blob": f"{stem}.bin",
        "checksum": zlib.crc32(raw), "layers": layers,
    }
    (out / f"{stem}.json").write_text(json.dumps(manifest, indent=2) + "\n")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lrp", required=True)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--train-count", type=int, default=6000)
    ap.add_argument("--epochs", type=int, default=12)
    args = ap.parse_args()
    torch.manual_seed(0)
    with tempfile.TemporaryDirectory() as tmp:
        xtr, ytr, _ = synth(args.lrp, Path(tmp) / "train", 1000, args.train_count)
        xte, yte, ids = synth(args.lrp, Path(tmp) / "eval", 0, 2000)
    xtr, xte = xtr.float(), xte
    net = build()
    opt = torch.optim.Adam(net.parameters(), lr=2e-3)
    loss_fn = nn.CrossEntropyLoss()
    for epoch in range(args.epochs):
        perm = torch.randperm(len(xtr))
        net.train()
        for i in range(0, len(xtr), 64):
            idx = perm[i:i + 64]
            opt.zero_grad()
            loss = loss_fn(net(xtr[idx]), ytr[idx])
            loss.backward()
            opt.step()
        net.eval()
        with torch.no_grad():
            acc = (net(xte.float()).argmax(1) == yte).float().mean().item()
        print(f"epoch {epoch + 1}: eval accuracy {acc:.4f}")

    args.out.mkdir(parents=True, exist_ok=True)
    export(net, args.out, "synth_cnn")
    net = net.double().eval()
    with torch.no_grad():
        logits = net(xte[:16])
    ref = [{"image_id": i, "logits": l.tolist()} for i, l in zip(ids[:16], logits)]
    (args.out / "synth_cnn_reference.json").write_text(json.dumps(ref, indent=1) + "\n")
    (args.out / "synth_cnn_accuracy.txt").write_text(f"{acc:.4f}\n")


if __name__ == "__main__":
    main()
