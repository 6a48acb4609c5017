import numpy as np
import pytest

from capsadv import attacks as A
from capsadv import models as M


def affine(A_mat, b, shape):
    return M.AffineModel(A_mat, b, shape)


def tiny_capsnet():
    cfg = M.CapsNetConfig(conv_channels=(4,), conv_kernels=(3,), primary_channels=2, primary_dim=4,
                          primary_kernel=3, primary_stride=2, class_dim=4, decoder_hidden=(8,), image_size=9)
    m = M.CapsNet(cfg, seed=0)
    m.params["caps.w"] *= 30.0
    m.params["primary.w"] *= 10.0
    return m


def hyperplane_distance(model, x, c):
    """Exact L2 distance from x to the nearest decision boundary of an affine model."""
    Am, b = model.params["A"], model.params["b"]
    z = Am @ x.reshape(-1) + b
    return min(abs(z[j] - z[c]) / np.linalg.norm(Am[j] - Am[c]) for j in range(len(z)) if j != c)


# Carlini-Wagner ------------------------------------------------------------------

@pytest.mark.parametrize("kappa", [0.0, 1.0])
def test_cw_matches_affine_projection(kappa):
    rng = np.random.default_rng(0)
    Am = rng.standard_normal((2, 16))
    x = np.full((4, 4), 0.5) + 0.05 * rng.standard_normal((4, 4))
    m = affine(Am, np.zeros(2), (4, 4))
    z = m.logits(x)
    src = int(np.argmax(z))
    t = 1 - src
    # the target logit must exceed the other by kappa: shift the hyperplane
    normal = Am[t] - Am[src]
    expected = (z[src] - z[t] + kappa) / np.linalg.norm(normal)
    projected = x.reshape(-1) + expected * normal / np.linalg.norm(normal)
    assert projected.min() > 0 and projected.max() < 1  # unconstrained optimum is feasible
    res = A.cw_attack(m, x, t, A.CwConfig(kappa=kappa, steps=1000, lr=1e-2), label=src)
    assert res.success
    assert res.norm == pytest.approx(expected, rel=0.05)
    zz = m.logits(x + res.delta)
    assert zz[t] - zz[src] >= kappa - 1e-6


def test_cw_already_target_gives_tiny_delta():
    rng = np.random.default_rng(1)
    Am = rng.standard_normal((3, 9))
    m = affine(Am, np.array([0.0, 50.0, 0.0]), (3, 3))
    x = rng.uniform(0.2, 0.8, (3, 3))
    res = A.cw_attack(m, x, 1, A.CwConfig(steps=200), label=0)
    assert res.success
    assert res.norm <= 1e-3


def test_cw_result_invariants_on_capsnet():
    m = tiny_capsnet()
    xs = np.random.default_rng(2).random((3, 9, 9))
    preds = m.predict(xs)
    targets = (preds + 1) % 10
    res = A.cw_attack_batch(m, xs, targets, A.CwConfig(steps=60, binary_steps=2, initial_c=1.0, lr=5e-2))
    for r, t in zip(res, targets):
        adv = r.x + r.delta
        assert adv.min() >= -1e-12 and adv.max() <= 1 + 1e-12
        assert abs(np.linalg.norm(r.delta) - r.norm) <= 1e-9
        assert r.target == t
        if r.success:
            z = m.logits(adv)
            assert z[t] - np.max(np.delete(z, t)) >= 1.0 - 1e-6
            assert r.predicted_label == t


def test_cw_failure_is_reported():
    # a model whose logits do not depend on the input cannot be attacked
    m = affine(np.zeros((2, 4)), np.array([5.0, 0.0]), (2, 2))
    res = A.cw_attack(m, np.full((2, 2), 0.5), 1, A.CwConfig(steps=20, max_doublings=2, binary_steps=1), label=0)
    assert not res.success
    assert res.extra["margin"] is None


def test_cw_config_validation():
    with pytest.raises(ValueError):
        A.CwConfig(kappa=-1)


# boundary ------------------------------------------------------------------------

def test_boundary_linear_2d_distance():
    w = np.array([1.0, -2.0])
    m = affine(np.stack([np.zeros(2), w]), np.array([0.0, 0.35]), (1, 2))
    x = np.array([[0.5, 0.3]])
    label = int(m.predict(x))
    z = m.logits(x)
    exact = abs(z[1] - z[0]) / np.linalg.norm(w)
    res = A.boundary_attack(m, x, label, np.random.default_rng(0), A.BoundaryConfig(max_steps=5000))
    assert res.success
    assert res.norm == pytest.approx(exact, rel=0.2)
    d = res.extra["distances"]
    assert all(b <= a for a, b in zip(d, d[1:]))


def test_boundary_already_misclassified():
    m = affine(np.zeros((2, 4)), np.array([1.0, 0.0]), (2, 2))
    res = A.boundary_attack(m, np.full((2, 2), 0.3), 1, np.random.default_rng(0))
    assert res.success and res.norm == 0.0 and res.iterations == 0


def test_boundary_init_cap_exhausted_is_failure():
    m = affine(np.zeros((2, 4)), np.array([1.0, 0.0]), (2, 2))
    res = A.boundary_attack(m, np.full((2, 2), 0.3), 0, np.random.default_rng(0), A.BoundaryConfig(init_cap=5))
    assert not res.success and res.extra["init_failed"]


def test_boundary_uses_decisions_only():
    class DecisionOnly(M.AffineModel):
        def forward(self, *a, **k):
            raise AssertionError("boundary attack must not build gradient graphs")

        def logits(self, x):
            return M.AffineModel.logits(self, x)

    rng = np.random.default_rng(3)
    base = affine(rng.standard_normal((3, 9)), np.zeros(3), (3, 3))

    class Wrapped:
        def predict(self, x):
            return base.predict(x)

    xs = rng.random((2, 3, 3))
    labels = base.predict(xs)
    res = A.boundary_attack_batch(Wrapped(), xs, labels, [A.sample_rng(0, i) for i in range(2)],
                                  A.BoundaryConfig(max_steps=50))
    assert all(r.success for r in res)


def test_boundary_monotone_and_in_box_on_capsnet():
    m = tiny_capsnet()
    xs = np.random.default_rng(4).random((3, 9, 9))
    labels = m.predict(xs)
    res = A.boundary_attack_batch(m, xs, labels, [A.sample_rng(9, i) for i in range(3)],
                                  A.BoundaryConfig(max_steps=200))
    for r in res:
        assert r.success
        d = r.extra["distances"]
        assert all(b <= a for a, b in zip(d, d[1:]))
        adv = r.x + r.delta
        assert adv.min() >= -1e-12 and adv.max() <= 1 + 1e-12
        assert abs(np.linalg.norm(r.delta) - r.norm) <= 1e-9
        assert d[-1] == pytest.approx(r.norm, abs=1e-9)


# DeepFool ------------------------------------------------------------------------

def test_deepfool_affine_one_step_exact():
    rng = np.random.default_rng(5)
    Am = rng.standard_normal((10, 9))
    x = np.full((3, 3), 0.5)
    m = affine(Am, np.zeros(10), (3, 3))
    m.params["b"] = -Am @ x.reshape(-1) + rng.normal(0, 0.05, 10)
    c = int(m.predict(x))
    exact = hyperplane_distance(m, x, c)
    res = A.deepfool_attack(m, x, c, A.DeepFoolConfig(step_cap=10.0))
    assert res.success
    assert res.iterations == 1
    assert abs(res.extra["pre_overshoot_norm"] - exact) <= 1e-6
    assert res.norm == pytest.approx(1.02 * res.extra["pre_overshoot_norm"], rel=1e-9)
    assert res.norm == pytest.approx(1.02 * exact, rel=1e-6)


def test_deepfool_already_misclassified():
    m = affine(np.eye(2, 4), np.array([0.0, 5.0]), (2, 2))
    res = A.deepfool_attack(m, np.full((2, 2), 0.2), 0)
    assert res.success and res.iterations == 0 and res.norm == 0.0


def test_deepfool_flat_logits_fail():
    m = affine(np.zeros((3, 4)), np.array([1.0, 0.0, 0.0]), (2, 2))
    res = A.deepfool_attack(m, np.full((2, 2), 0.2), 0)
    assert not res.success and res.extra["flat"]


def test_deepfool_step_cap_limits_each_step():
    rng = np.random.default_rng(6)
    Am = rng.standard_normal((2, 9))
    x = np.full((3, 3), 0.5)
    m = affine(Am, np.zeros(2), (3, 3))
    m.params["b"] = -Am @ x.reshape(-1) + np.array([0.6, 0.0])
    c = int(m.predict(x))
    exact = hyperplane_distance(m, x, c)
    res = A.deepfool_attack(m, x, c, A.DeepFoolConfig(step_cap=exact / 3.5))
    assert res.success
    assert res.iterations == 4


def test_deepfool_flips_capsnet():
    m = tiny_capsnet()
    xs = np.random.default_rng(7).random((4, 9, 9))
    labels = m.predict(xs)
    res = A.deepfool_attack_batch(m, xs, labels)
    for r in res:
        assert r.success
        assert r.predicted_label != r.original_label
        adv = r.x + r.delta
        assert adv.min() >= 0 and adv.max() <= 1


# FGSM / universal --------------------------------------------------------------------

def test_fgsm_zero_eps():
    m = affine(np.random.default_rng(0).standard_normal((3, 4)), np.zeros(3), (2, 2))
    np.testing.assert_array_equal(A.fgsm_step(m, np.full((2, 2), 0.5), 1, 0.0), np.zeros((2, 2)))


def test_fgsm_sign_pattern():
    # cross-entropy gradient wrt x is A^T (p - onehot); with two classes and a
    # zero column the three components have signs (+, -, 0)
    Am = np.array([[-1.0, 1.0, 0.0], [1.0, -1.0, 0.0]])
    m = affine(Am, np.zeros(2), (1, 3))
    delta = A.fgsm_step(m, np.full((1, 3), 0.5), 0, 0.1)
    np.testing.assert_array_equal(delta, [[0.1, -0.1, 0.0]])


def test_fgsm_components_in_three_values():
    m = tiny_capsnet()
    xs = np.random.default_rng(8).random((3, 9, 9))
    d = A.fgsm_step(m, xs, np.array([1, 2, 3]), 0.07)
    assert set(np.unique(d)).issubset({-0.07, 0.0, 0.07})
    with pytest.raises(ValueError):
        A.fgsm_step(m, xs, np.array([1, 2, 3]), -1.0)


def test_universal_zero_accuracy_returns_zero_delta():
    m = affine(np.zeros((2, 4)), np.array([1.0, 0.0]), (2, 2))
    images = np.random.default_rng(0).random((20, 2, 2))
    res = A.universal_perturbation(m, images, np.ones(20, int), A.UniversalConfig(), np.random.default_rng(0))
    assert res.success and res.iterations == 0
    np.testing.assert_array_equal(res.delta, 0.0)


@pytest.mark.parametrize("eval_every", [1, 3])
def test_universal_drives_affine_accuracy_below_threshold(eval_every):
    rng = np.random.default_rng(1)
    Am = rng.standard_normal((3, 9))
    m = affine(Am, np.zeros(3), (3, 3))
    images = rng.random((300, 3, 3))
    labels = m.predict(images)
    cfg = A.UniversalConfig(eps=0.05, batch_size=16, eval_every=eval_every)
    res = A.universal_perturbation(m, images, labels, cfg, np.random.default_rng(2))
    assert res.success
    assert res.accuracy < 0.5
    assert res.trace[0] == 1.0
    assert m.accuracy(np.clip(images + res.delta, 0, 1), labels) == pytest.approx(res.accuracy)


def test_universal_config_validation():
    with pytest.raises(ValueError):
        A.UniversalConfig(threshold=1.5)
    with pytest.raises(ValueError):
        A.UniversalConfig(eps=0)


# transfer and records ----------------------------------------------------------------

def test_self_transfer_of_successful_untargeted_results_is_one():
    m = tiny_capsnet()
    xs = np.random.default_rng(9).random((5, 9, 9))
    res = [r for r in A.deepfool_attack_batch(m, xs, m.predict(xs)) if r.success]
    assert res
    assert A.transfer_evaluate(res, m) == 1.0


def test_zero_perturbation_transfer_is_base_error():
    rng = np.random.default_rng(10)
    m = affine(rng.standard_normal((3, 4)), np.zeros(3), (2, 2))
    xs = rng.random((40, 2, 2))
    labels = rng.integers(0, 3, 40)
    results = [A.AttackResult(i, xs[i], np.zeros((2, 2)), 0.0, False, int(labels[i]), 0) for i in range(40)]
    assert A.transfer_evaluate(results, m) == pytest.approx(1 - m.accuracy(xs, labels))


def test_targeted_transfer_counts_target_hits():
    m = affine(np.zeros((3, 4)), np.array([0.0, 0.0, 1.0]), (2, 2))
    x = np.zeros((2, 2))
    hit = A.AttackResult(0, x, x, 0.0, True, 0, 2, target=2)
    miss = A.AttackResult(1, x, x, 0.0, True, 0, 1, target=1)
    assert A.transfer_evaluate([hit, miss], m) == 0.5


def test_universal_transfer_shape_check():
    m = affine(np.zeros((2, 4)), np.zeros(2), (2, 2))
    with pytest.raises(ValueError):
        A.universal_transfer_accuracy([np.zeros((3, 3))], m, np.zeros((4, 2, 2)), np.zeros(4, int))


def test_records_and_sidecar_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    xs = rng.random((3, 4, 4))
    res = [A.AttackResult(i * 7, xs[i], rng.normal(0, 0.1, (4, 4)), 0.0, bool(i % 2), 3, 4,
                          target=None if i else 5, iterations=i) for i in range(3)]
    for r in res:
        r.norm = float(np.linalg.norm(r.delta))
    A.write_records(res, tmp_path / "r.jsonl")
    A.write_deltas([r.index for r in res], [r.delta for r in res], tmp_path / "d.bin")
    recs = A.read_records(tmp_path / "r.jsonl")
    assert [r["index"] for r in recs] == [0, 7, 14]
    assert recs[0]["target"] == 5 and recs[1]["target"] is None
    idx, arrays = A.read_deltas(tmp_path / "d.bin")
    assert idx == [0, 7, 14]
    for r, a in zip(res, arrays):
        assert a.tobytes() == r.delta.tobytes()
    images = np.zeros((20, 4, 4))
    for r in res:
        images[r.index] = r.x
    rebuilt = A.results_from_files(recs, (idx, arrays), images)
    assert all(np.array_equal(a.delta, b.delta) and a.norm == b.norm for a, b in zip(rebuilt, res))


def test_attacks_are_deterministic():
    m = tiny_capsnet()
    xs = np.random.default_rng(12).random((2, 9, 9))
    labels = m.predict(xs)

    def run():
        b = A.boundary_attack_batch(m, xs, labels, [A.sample_rng(5, i) for i in range(2)],
                                    A.BoundaryConfig(max_steps=40))
        c = A.cw_attack_batch(m, xs, (labels + 3) % 10, A.CwConfig(steps=20, binary_steps=1, initial_c=1.0))
        d = A.deepfool_attack_batch(m, xs, labels)
        return b + c + d

    first, second = run(), run()
    for a, b in zip(first, second):
        assert a.delta.tobytes() == b.delta.tobytes()
        assert a.record() == b.record()
