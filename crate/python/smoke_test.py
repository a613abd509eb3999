#!/usr/bin/env python3
"""Smoke test for the mixopt extension module.

Builds nothing itself; expects `cargo build -p mixopt-py` (or --release) to
have produced libmixopt_native.so. Copies it into a temp dir under the
importable name and exercises each binding against hand-computed values.
"""

import math
import pathlib
import shutil
import struct
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    candidates = [
        ROOT / "target" / "release" / "libmixopt_native.so",
        ROOT / "target" / "debug" / "libmixopt_native.so",
    ]
    built = [p for p in candidates if p.exists()]
    if not built:
        sys.exit("no libmixopt_native.so found; run: cargo build -p mixopt-py")
    src = max(built, key=lambda p: p.stat().st_mtime)
    tmp = tempfile.mkdtemp(prefix="mixopt-smoke-")
    shutil.copy(src, pathlib.Path(tmp) / "mixopt.so")
    sys.path.insert(0, tmp)
    import mixopt

    print(f"loaded {src.relative_to(ROOT)}")
    return mixopt


def bits(x):
    return struct.pack("<d", x)


def check(name, ok):
    status = "ok" if ok else "FAIL"
    print(f"  {name}: {status}")
    if not ok:
        sys.exit(1)


def main():
    mixopt = load_module()

    print("ensemble loss")
    cache = mixopt.Cache.from_probs("toy", ["a", "b"], [[0.4, 0.4], [0.2, 0.6]])
    loss = cache.ensemble_loss([0.5, 0.5])
    expected = -(math.log(0.4) + math.log(0.4)) / 2.0
    check("mixed probabilities", abs(loss - expected) < 1e-15)
    one_hot = cache.ensemble_loss([0.0, 1.0])
    manual = -(math.log(0.4) + math.log(0.6)) / 2.0
    check("one-hot column is bitwise", bits(one_hot) == bits(manual))

    print("mixture smoothing")
    smoothed = mixopt.smooth_mixture([1.0, 0.0, 0.0])
    share = 0.01 / 3.0
    check(
        "0.99*lambda + 0.01*uniform exactly",
        bits(smoothed[0]) == bits(0.99 + share)
        and bits(smoothed[1]) == bits(share)
        and bits(smoothed[2]) == bits(share),
    )

    print("rank metrics")
    rho = mixopt.spearman([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 2.0, 4.0])
    check("tie case matches 4.5/sqrt(22.5)", abs(rho - 4.5 / math.sqrt(22.5)) < 1e-12)
    acc = mixopt.pairwise_accuracy([1.0, 2.0, 3.0], [1.0, 3.0, 2.0])
    check("pairwise accuracy 2/3", abs(acc - 2.0 / 3.0) < 1e-15)

    print("experts and caches")
    data = [
        [0, 1, 2, 3] * 500,  # cycles forward
        [3, 2, 1, 0] * 500,  # cycles backward
    ]
    experts = [
        mixopt.Expert.train(toks, 4, order=2, delta=0.5, name=f"d{i}")
        for i, toks in enumerate(data)
    ]
    check("expert metadata", experts[0].name == "d0" and experts[0].vocab_size == 4)
    val = mixopt.Cache.build(experts, [0, 1, 2, 3] * 100, "val-fwd")
    check("cache shape", val.expert_ids == ["d0", "d1"] and val.num_tokens == 400)
    fwd = val.ensemble_loss([1.0, 0.0])
    bwd = val.ensemble_loss([0.0, 1.0])
    check("matching expert wins on its own stream", fwd < bwd)
    per_domain = mixopt.ensemble_loss_vector([val], [0.5, 0.5])
    check("loss vector keyed by domain", set(per_domain) == {"val-fwd"})

    print("fit and optimize")
    lambdas, losses = [], []
    for i in range(12):
        a = i / 11.0
        lam = [a, 1.0 - a]
        lambdas.append(lam)
        losses.append({"val-fwd": (a - 0.7) ** 2 + 1.0})
    model = mixopt.fit("linear-ridge", lambdas, losses, features="lambda-only")
    check(
        "model metadata",
        model.family == "linear-ridge"
        and model.feature_mode == "lambda-only"
        and model.target_domains == ["val-fwd"],
    )
    pred = model.predict([0.7, 0.3])
    check("prediction near curve minimum", abs(pred["val-fwd"] - 1.0) < 0.2)

    gp = mixopt.fit("gp", lambdas, losses)
    result = mixopt.optimize(gp, seed=3)
    check("search stays on the simplex", abs(sum(result.best) - 1.0) < 1e-9)
    check("search finds the low region", abs(result.best[0] - 0.7) < 0.1)
    check("search reports evaluations", result.evaluations > 0)

    gp_mde = mixopt.fit(
        "gp",
        lambdas,
        losses,
        features="lambda-mde",
        caches=[mixopt.Cache.from_probs("val-fwd", ["d0", "d1"], [[0.5, 0.25]] * 4)],
    )
    check("mde features flow through fit", gp_mde.feature_mode == "lambda-mde")

    print("identity sweep")
    report = mixopt.verify_identity(seed=20260816, instances=200)
    check(
        "reweighted-expert identity on 200 instances",
        report.passed and report.max_abs_diff <= 1e-12 and not report.failed_instances,
    )

    print("all smoke checks passed")


if __name__ == "__main__":
    main()
