"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (or ``python3 tests/test_acceptance.py``).
"""
import hashlib
import io
import math
import sys
import time

import numpy as np
import pytest

from helpers import bce_on, conv_pool_dense_net, projection_loss, single_layer_cases, \
    synthetic_two_class
from oracles import adam_oracle, bce_oracle, scalar_steps, table_consistent
from sightline.cli import main as cli_main
from sightline.data import split_dataset
from sightline.nn import grad_check
from sightline.optim import ConfusionMatrix, bce_loss, report_from_confusion
from sightline.pipeline import Description, decide, render_text
from sightline.train import TrainConfig, run_training, stats_csv
from sightline.vgg import VGG16, build_vgg_mini, dump_archive, parse_archive, replace_head

from conftest import FIXTURES


@pytest.fixture
def verdict(capsys):
    def record(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, detail
    return record


def test_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    worst, where = 0.0, None
    for seed in range(20):
        for name, net, x in single_layer_cases(seed):
            err = grad_check(net, x, projection_loss(net.forward(x, "eval").shape, seed))
            if err > worst:
                worst, where = err, f"{name}@{seed}"
        net = conv_pool_dense_net(seed)
        g = np.random.default_rng(seed)
        x = g.normal(size=(4, 1, 8, 8))
        err = grad_check(net, x, bce_on(g.integers(0, 2, 4).astype(float)))
        if err > worst:
            worst, where = err, f"conv_pool_dense@{seed}"
    secs = time.perf_counter() - t0
    verdict("gradient fidelity", worst < 1e-3 and secs < 60,
            f"max rel err {worst:.2e} ({where}) over 20 seeds, {secs:.1f}s")


def test_bce_oracle(verdict):
    g = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(g.integers(1, 33))
        y = g.integers(0, 2, n).astype(float)
        p = g.uniform(0, 1, n)
        p[g.uniform(size=n) < 0.05] = g.choice([0.0, 1.0, 1e-9, 1 - 1e-9])
        worst = max(worst, abs(bce_loss(y, p)[0] - float(bce_oracle(y, p))))
    ln2 = abs(bce_loss([1, 0], [0.5, 0.5])[0] - math.log(2))
    verdict("bce oracle", worst < 1e-10 and ln2 < 1e-12,
            f"max |err| {worst:.1e} over 1000 batches; ln2 case err {ln2:.1e}")


def test_adam_oracle(verdict):
    grads = np.random.default_rng(1).normal(size=100)
    got = scalar_steps(grads, lr=1e-4, theta=0.5)
    want = adam_oracle(grads, 1e-4, theta=0.5)
    replay = max(abs(a - float(b)) for a, b in zip(got, want))
    first = scalar_steps([1.0])[0] == -(1e-4 / (1 + 1e-8))
    g = np.random.default_rng(2).normal(size=100)
    invariant = all(
        np.array(scalar_steps(g, 1e-3, 0.0, 0.3)).tobytes()
        == np.array(scalar_steps(c * g, 1e-3, 0.0, 0.3)).tobytes() for c in (2.0, 0.25, 1024.0))
    verdict("adam oracle", replay < 1e-9 and first and invariant,
            f"100-step replay err {replay:.1e}; first step exact={first}; eps=0 rescale bitwise={invariant}")


def test_report_arithmetic(verdict):
    t1 = {"cat": (0.99, 0.98, 0.99, 1011), "dog": (0.98, 0.99, 0.99, 1012), "accuracy": 0.99}
    t2 = {"indoor": (0.97, 0.98, 0.98, 1000), "outdoor": (0.98, 0.97, 0.98, 1001), "accuracy": 0.98}
    r1 = report_from_confusion(ConfusionMatrix(["cat", "dog"], np.array([[992, 19], [10, 1002]])))
    r2 = report_from_confusion(ConfusionMatrix(["indoor", "outdoor"], np.array([[980, 20], [26, 975]])))
    h1 = table_consistent((1011, 1012), 29, t1, ("cat", "dog"))
    h2 = table_consistent((1000, 1001), 46, t2, ("indoor", "outdoor"))
    ok = r1.rounded() == t1 and r2.rounded() == t2
    verdict("report arithmetic", ok and h1 and h2,
            f"cat/dog report via [[992,19],[10,1002]], indoor/outdoor via [[980,20],[26,975]]; "
            f"consistent error splits {h1[0]}..{h1[-1]} and {h2[0]}..{h2[-1]}")


def _scripted(losses, snaps):
    from sightline.optim import classification_report
    it = iter(losses)

    def validate(net, ds):
        snaps.append(net.state_dict())
        return classification_report(ds.class_names[:1], ds.class_names[:1], ds.class_names), next(it)
    return validate


def test_early_stopping(verdict):
    ds = synthetic_two_class(2, seed=1)
    results = []
    for best, stop in ((8, 10), (10, 12)):
        losses = [1 - 0.05 * e for e in range(1, best + 1)] + [1.0] * (20 - best)
        snaps = []
        net = replace_head(build_vgg_mini(seed=0), 1, freeze_backbone=False)
        net, stats = run_training(net, ds, ds, TrainConfig(batch_size=4, learning_rate=1e-3,
                                                           augment=False, freeze_backbone=False),
                                  validate=_scripted(losses, snaps))
        final = net.state_dict()
        restored = all(np.array_equal(final[k], snaps[best - 1][k]) for k in final)
        results.append((len(stats) == stop and restored, f"best {best} -> stopped {len(stats)}, "
                        f"restored epoch-{best} weights={restored}"))
    verdict("early stopping", all(r[0] for r in results), "; ".join(r[1] for r in results))


def test_overfit(verdict):
    ds = synthetic_two_class(16, seed=7)
    t0 = time.process_time()
    net = replace_head(build_vgg_mini(seed=0), 1, freeze_backbone=False)
    _, stats = run_training(net, ds, ds, TrainConfig(max_epochs=50, patience=49, learning_rate=1e-3,
                                                     augment=False, freeze_backbone=False))
    secs = time.process_time() - t0
    hit = next((s.epoch for s in stats if s.train_acc == 1.0), None)
    verdict("overfit", hit is not None and secs < 300 and stats[-1].train_loss < stats[0].train_loss,
            f"train acc 1.0 first at epoch {hit} of {len(stats)}; "
            f"loss {stats[0].train_loss:.3f} -> {stats[-1].train_loss:.4f}; {secs:.1f}s CPU")


def test_vgg16_structure(verdict, vgg16_net):
    net = vgg16_net
    n_weight = len(net.weight_layers)
    flat = net.shapes()[[l.name for l in net.layers].index("flatten")]
    count = net.count_params()
    closed = VGG16.param_count()
    digest = {k: hashlib.sha256(v.tobytes()).hexdigest()
              for k, v in net.named_params() if not k.startswith("fc3.")}
    head = replace_head(net, 1, freeze_backbone=True)
    same = all(hashlib.sha256(v.tobytes()).hexdigest() == digest[k]
               for k, v in head.named_params() if k in digest)
    trainable = head.count_params(trainable_only=True)
    net.set_trainable(True)
    ok = (n_weight == 16 and flat == (25088,) and count == closed == 138_357_544 and same
          and trainable == 4097)
    verdict("vgg16 structure", ok, f"{n_weight} weight layers, flatten {flat}, {count} params "
            f"(closed form {closed}), backbone identical={same}, trainable after head swap {trainable}")


def _det_run():
    ds = synthetic_two_class(6, seed=4)
    tr, va = split_dataset(ds, 0.75, seed=5)
    net = replace_head(build_vgg_mini(seed=0), 1, freeze_backbone=False)
    net, stats = run_training(net, tr, va, TrainConfig(batch_size=4, max_epochs=4, seed=5,
                                                       learning_rate=1e-3, freeze_backbone=False))
    return stats_csv(stats), dump_archive(dict(net.named_params()))


def test_determinism(verdict):
    (csv_a, arc_a), (csv_b, arc_b) = _det_run(), _det_run()
    round_trip = dump_archive(parse_archive(arc_a)) == arc_a
    verdict("determinism", csv_a == csv_b and arc_a == arc_b and round_trip,
            f"stats csv identical={csv_a == csv_b}, archive identical={arc_a == arc_b} "
            f"({len(arc_a)} bytes), round trip bit-exact={round_trip}")


def test_cascade(verdict):
    grid = np.linspace(0, 1, 101)
    taus = np.linspace(0.5, 1, 26)
    always_pet = all(decide(s, p).pet_label in ("cat", "dog") for s in grid[::10] for p in grid)
    monotone = True
    for s in grid[::10]:
        for p in grid:
            ds = [decide(s, p, t) for t in taus]
            monotone &= len({d.scene_label for d in ds}) == 1
            monotone &= all(b.pet_label in (a.pet_label, "none") for a, b in zip(ds, ds[1:]))
    expected = {}
    for scene in ("indoor", "outdoor"):
        for pet in ("cat", "dog"):
            expected[scene, pet] = f"This photo appears to be {scene}. A {pet} appears in the photo."
        expected[scene, "none"] = f"This photo appears to be {scene}. No cat or dog was detected."
    rendered = {k: render_text(Description(k[0], 0.9, k[1], None if k[1] == "none" else 0.9))
                for k in expected}
    templates = rendered == expected and len(set(rendered.values())) == 6
    verdict("cascade", always_pet and monotone and templates,
            f"tau=0.5 always cat/dog={always_pet}, tau monotone={monotone}, 6 templates exact={templates}")


def test_cli_end_to_end(verdict, tmp_path):
    flags = ["--arch", "mini", "--unfreeze-backbone", "--lr", "1e-3", "--epochs", "30",
             "--patience", "5", "--batch", "8", "--no-augment"]
    t0 = time.process_time()
    codes, out = [], io.StringIO()
    for task, folder in (("pet", "pets"), ("scene", "scenes")):
        codes.append(cli_main(["train", "--task", task, "--data", str(FIXTURES / folder),
                               "--out", str(tmp_path / f"{task}.vggw"), *flags], out=out))
    codes.append(cli_main(["eval", "--weights", str(tmp_path / "pet.vggw"),
                           "--data", str(FIXTURES / "pets_test")], out=out))
    desc = io.StringIO()
    image = sorted((FIXTURES / "profiles" / "dog-outdoor").iterdir())[0]
    codes.append(cli_main(["describe", "--scene-weights", str(tmp_path / "scene.vggw"),
                           "--pet-weights", str(tmp_path / "pet.vggw"), "--image", str(image),
                           "--out", str(tmp_path / "x.audio")], out=desc))
    secs = time.process_time() - t0
    line = desc.getvalue().rstrip("\n")
    well_formed = line in {render_text(Description(s, .9, p, None if p == "none" else .9))
                           for s in ("indoor", "outdoor") for p in ("cat", "dog", "none")}
    verdict("cli end to end", codes == [0, 0, 0, 0] and well_formed and secs < 120,
            f"exit codes {codes}, description {line!r}, {secs:.1f}s CPU")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
