import math

import numpy as np
import pytest

import tmblock


def test_exact_solver_tie_rules():
    p, q = tmblock.solve_exact([1.0, 3.0, 3.0], 0.5)
    assert q == 0.0 and p == [0.0, 1.0, 0.0]
    p, q = tmblock.solve_exact([2.0, 1.0], 2.0)
    assert q == 1.0 and p == [0.0, 0.0]
    assert tmblock.brute_force_vertices([2.0, 1.0], 2.0) == (p, q)


def test_entropy_solver_is_margin_softmax():
    a, mu, eps = [0.3, -1.0, 2.0], 0.5, 1.7
    p, q = tmblock.solve_entropy(a, mu, eps)
    z = np.exp(eps * np.array([mu] + a))
    z /= z.sum()
    assert q == pytest.approx(z[0], abs=1e-14)
    assert p == pytest.approx(z[1:], abs=1e-14)
    jac = tmblock.jacobian_entropy(a, mu, eps)
    pv = np.array(p)
    assert np.allclose(jac, eps * (np.diag(pv) - np.outer(pv, pv)), atol=1e-14)


def test_solver_checks_pass():
    results = tmblock.run_checks("solvers")
    assert all(r["passed"] for r in results), results
    oracle = next(r for r in results if r["name"] == "solver_oracle")
    assert oracle["instances"] >= 1000 and oracle["tie_cases"] >= 50


def test_entropy_and_kmeans():
    assert tmblock.entropy([0.1] * 10) == pytest.approx(math.log(10))
    rng = np.random.default_rng(0)
    pts = np.vstack([rng.normal(-3, 0.3, (20, 2)), rng.normal(3, 0.3, (20, 2))])
    km = tmblock.kmeans(pts, 2, seed=1)
    hist = km["inertia_history"]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(hist, hist[1:]))
    labels = np.array(km["assignments"])
    assert len(set(labels[:20])) == 1 and len(set(labels[20:])) == 1 and labels[0] != labels[20]


def test_synth_dataset_balanced_and_deterministic():
    images, labels = tmblock.synth_dataset(classes=4, samples=40, size=16, seed=3)
    assert images.shape == (40, 3, 16, 16) and images.dtype == np.uint8
    assert np.bincount(labels).tolist() == [10] * 4
    again, _ = tmblock.synth_dataset(classes=4, samples=40, size=16, seed=3)
    assert np.array_equal(images, again)


def tiny_config():
    text = tmblock.default_config(True)
    for key, value in [("synth_train", 80), ("synth_val", 40), ("synth_test", 40)]:
        old = next(line for line in text.splitlines() if line.startswith(key + " "))
        text = text.replace(old, f"{key} = {value}")
    return text


def test_train_evaluate_and_reload(tmp_path):
    cfg = tiny_config()
    run = tmblock.train(cfg, tmp_path / "run", seed=1, epochs=1)
    assert len(run["history"]) == 1
    for name in ("history.csv", "best.ckpt", "config.txt"):
        assert (tmp_path / "run" / name).exists()
    acc = tmblock.evaluate(tmp_path / "run" / "best.ckpt", cfg, "test")
    assert acc == pytest.approx(run["test_acc"])

    model = tmblock.Model.load(tmp_path / "run" / "best.ckpt")
    assert model.has_block
    images, _ = tmblock.synth_dataset(4, 8, 16, 5)
    logits = model.logits(images)
    assert logits.shape == (8, 4) and np.isfinite(logits).all()
    model.save(tmp_path / "copy.ckpt")
    assert (tmp_path / "copy.ckpt").read_bytes() == (tmp_path / "run" / "best.ckpt").read_bytes()


def test_untrained_model_needs_calibration():
    net_text = tmblock.default_config(False).split("[train]")[0]
    model = tmblock.Model.build(net_text, seed=2)
    images, _ = tmblock.synth_dataset(4, 8, 16, 5)
    with pytest.raises(Exception):
        model.logits(images)
    model.calibrate(images)
    assert model.logits(images).shape == (8, 4)


def test_missing_checkpoint_raises():
    with pytest.raises(tmblock.CheckpointError):
        tmblock.Model.load("/nonexistent/best.ckpt")
