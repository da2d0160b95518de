"""Export a torch model to the interchange format, then prune it.

A small torch CNN is trained for a few epochs on the blob dataset, exported
with parity verification against 16 random probes, reloaded from the
interchange file, and finally swept with relevance-ordered filter pruning.
The point of the exercise: a model that never touched this library's own
trainer still gets attribution-faithful pruning after one export call.

Requires torch and the companion exporter package (nnixport).

Run:
    python demos/export_and_prune.py --out /tmp/exported
"""

import argparse
from pathlib import Path

import numpy as np

from relprune import (
    SweepConfig,
    evaluate_pruning,
    get_preset,
    load_model_file,
    make_blob_dataset,
    top1_accuracy,
)

try:
    import torch
    from torch import nn

    from nnixport import export, report_path_for
except ImportError as err:  # pragma: no cover - environment guard
    raise SystemExit(f"this demo needs torch and nnixport installed: {err}")


def train_torch_cnn(x, y, epochs: int, seed: int) -> nn.Sequential:
    torch.manual_seed(seed)
    model = nn.Sequential(
        nn.Conv2d(1, 8, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(8, 16, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Flatten(), nn.Linear(16 * 2 * 2, 5),
    )
    opt = torch.optim.Adam(model.parameters(), lr=1e-2)
    loss_fn = nn.CrossEntropyLoss()
    inputs = torch.from_numpy(x)
    targets = torch.from_numpy(y.astype(np.int64))
    for epoch in range(epochs):
        opt.zero_grad()
        loss = loss_fn(model(inputs), targets)
        loss.backward()
        opt.step()
        if epoch % 10 == 0 or epoch == epochs - 1:
            acc = (model(inputs).argmax(1) == targets).float().mean().item()
            print(f"  epoch {epoch:3d}  loss {loss.item():.4f}  train acc {acc:.3f}")
    model.eval()
    return model


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="/tmp/exported", help="export directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=60)
    parser.add_argument("--steps", type=int, default=8, help="pruning rate grid size")
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    x_tr, y_tr, x_te, y_te = make_blob_dataset((1, 8, 8), 5, 80, 40, rng)

    print("training a torch CNN on the blob dataset:")
    model = train_torch_cnn(x_tr, y_tr, args.epochs, args.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "cnn.nnix"
    report = export(model, model_path, probes=16, input_shape=(1, 8, 8), arch="demo-cnn")
    print(f"\nexported to {model_path}")
    print(f"  parity on 16 probes: max deviation {report.max_deviation:.2e}")
    print(f"  report: {report_path_for(model_path)}")
    for row in report.layer_mapping:
        print(f"  {row['source']:<12s} -> {row['target']:<8s} ({row['action']})")

    graph = load_model_file(model_path)
    acc = top1_accuracy(graph, x_te, y_te)
    print(f"\nreloaded graph test accuracy: {acc:.3f}")

    result = evaluate_pruning(
        graph, x_tr, y_tr, x_te, y_te, SweepConfig("conv_filter", steps=args.steps),
        composite=get_preset("eps-all"), seeds=(0, 1, 2),
    )
    print("\nrelevance-ordered filter pruning on the exported model:")
    for rate, mean, sem in zip(result.rates, result.acc_mean, result.acc_sem):
        print(f"  rate {rate:.3f}  accuracy {mean:.4f} +/- {sem:.4f}")
    print(f"  a_pr {result.a_pr_mean:.4f}  top_pr {result.top_pr:.3f}")


if __name__ == "__main__":
    main()
