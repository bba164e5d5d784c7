"""Smoke test for the evctx extension module.

Build and stage the module first (see the README), then run
`python python/smoke_test.py`.
"""

import math
import tempfile

import evctx


def unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def main():
    size, start = evctx.sample_mask(5, 0.6, seed=3)
    assert 1 <= size <= evctx.max_mask_size(5, 0.6) == 3
    assert 1 <= start <= 5 - size + 1

    assert evctx.max_discrepancy_start([0.1, 0.9, 0.2, 0.2, 0.2], 1) == 2
    assert evctx.max_discrepancy_start([0.5, 0.1, 0.1, 0.6, 0.5], 2) == 4

    pred = [unit([1.0, 0.2]), unit([0.3, -1.0])]
    target = [unit([0.9, 0.1]), unit([0.2, -1.0])]
    distractors = [unit([-1.0, 0.5]), unit([0.0, 1.0])]
    loss = evctx.mask_pred_loss(pred, target, distractors, 0.1)
    expect = 0.0
    for p, t in zip(pred, target):
        pos = math.exp(sum(a * b for a, b in zip(p, t)) / 0.1)
        neg = sum(math.exp(sum(a * b for a, b in zip(p, q)) / 0.1) for q in distractors)
        expect -= math.log(pos / (pos + neg))
    expect /= len(pred)
    assert abs(loss - expect) < 1e-9, (loss, expect)
    assert evctx.info_nce(pred, target, 0.2) > 0.0

    try:
        evctx.info_nce([[2.0, 0.0], [0.0, 1.0]], target, 0.2)
    except evctx.EvctxError as e:
        assert str(e).startswith("not_unit_norm"), e
    else:
        raise AssertionError("non-unit rows accepted")

    checks = evctx.gradcheck(seed=0)
    assert checks and all(ok for _, _, ok in checks), [c for c in checks if not c[2]]

    cfg = evctx.Config("desk-scale")
    for key, value in {
        "data.n_movies": "6",
        "data.eval_movies": "4",
        "contrastive.steps": "3",
        "mask.steps": "3",
        "probe.epochs": "1",
        "probe.e2e_epochs": "1",
        "retrieval.pool_size": "16",
    }.items():
        cfg.set(key, value)
    assert cfg.get("mask.steps") == "3"

    with tempfile.TemporaryDirectory() as out:
        session = evctx.Session(cfg, out)
        n_train, n_eval = session.generate_data()
        assert n_train > 0 and n_eval > 0
        session.pretrain_backbone()
        session.pretrain_txe()
        tasks = {task: values for task, _, values in session.probe() + session.eval()}
        assert 0.0 <= tasks["verb/backbone"]["acc@1"] <= 1.0
        assert "retrieval@1" in tasks["retrieval"]
        info = evctx.inspect_features(f"{out}/train.evsq")
        assert info["events"] == n_train
        del session

    print(f"ok: {len(checks)} gradient checks, {len(tasks)} metric records")


if __name__ == "__main__":
    main()
