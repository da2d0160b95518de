"""Compare scoring methods by the area under the accuracy-over-rate curve.

On a trained convolutional fixture, conv filters are ranked four ways:
relevance propagation under two rule composites, integrated gradients,
and a random ordering.  Each ranking drives the same pruning sweep; the
table reports the mean area (A_PR) and the highest rate that keeps 95%
of the unpruned accuracy (top_PR), averaged over seeds.

Run:
    python demos/method_showdown.py --seeds 5
"""

import argparse
import time

from relprune import SweepConfig, evaluate_pruning, get_preset, make_fixture


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--fixture-seed", type=int, default=0, dest="fixture_seed")
    parser.add_argument("--seeds", type=int, default=5, help="reference draws per method")
    parser.add_argument("--steps", type=int, default=8, help="pruning rate grid size")
    args = parser.parse_args()

    bundle = make_fixture("trained-cnn", args.fixture_seed)
    (x_tr, y_tr), (x_te, y_te) = bundle.train, bundle.test
    cfg = SweepConfig("conv_filter", steps=args.steps)
    seeds = range(args.seeds)

    contenders = [
        ("lrp eps-all", dict(method="lrp", composite=get_preset("eps-all"))),
        ("lrp faithful-cnn", dict(method="lrp", composite=get_preset("faithful-cnn"))),
        ("integrated gradients", dict(method="ig")),
        ("random", dict(method="random")),
    ]

    print(f"fixture: trained-cnn seed={args.fixture_seed}, "
          f"{len(x_te)} eval samples, {args.seeds} seeds, {args.steps} rates")
    print(f"\n{'method':<22s} {'a_pr':>8s} {'sem':>8s} {'top_pr':>7s} {'time':>7s}")
    rows = []
    for name, kwargs in contenders:
        start = time.perf_counter()
        result = evaluate_pruning(
            bundle.graph, x_tr, y_tr, x_te, y_te, cfg, seeds=seeds, **kwargs
        )
        elapsed = time.perf_counter() - start
        rows.append((name, result))
        print(f"{name:<22s} {result.a_pr_mean:8.4f} {result.a_pr_sem:8.4f} "
              f"{result.top_pr:7.3f} {elapsed:6.1f}s")

    best = max(rows, key=lambda r: r[1].a_pr_mean)
    worst = min(rows, key=lambda r: r[1].a_pr_mean)
    print(f"\nbest ordering: {best[0]} "
          f"(+{best[1].a_pr_mean - worst[1].a_pr_mean:.4f} A_PR over {worst[0]})")


if __name__ == "__main__":
    main()
