import numpy as np
import pytest

from ssvd import losses


def test_focal_loss_balanced_coin():
    # p = 0.5 on a positive: -0.25 * 0.25 * ln 2
    val = losses.focal_loss(np.array([0.5]), np.array([True]))[0]
    assert np.isclose(val, 0.25 * 0.25 * np.log(2.0), rtol=0, atol=1e-12)


def test_focal_loss_reduces_to_bce():
    # gamma = 0, alpha = 0.5 -> 0.5 * binary cross-entropy
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, 40)
    pos = rng.uniform(size=40) < 0.5
    got = losses.focal_loss(p, pos, alpha=0.5, gamma=0.0)
    bce = np.where(pos, -np.log(p), -np.log(1.0 - p))
    assert np.allclose(got, 0.5 * bce, rtol=1e-12)


def test_focal_down_weights_easy_examples():
    easy = losses.focal_loss(np.array([0.99]), np.array([True]))[0]
    hard = losses.focal_loss(np.array([0.01]), np.array([True]))[0]
    bce_ratio = -np.log(0.01) / -np.log(0.99)
    assert hard / easy > bce_ratio  # modulation amplifies the gap


def test_focal_clamp_keeps_loss_finite():
    v = losses.focal_loss(np.array([0.0, 1.0]), np.array([True, False]))
    assert np.isfinite(v).all()


def test_smooth_l1_values():
    assert np.isclose(losses.smooth_l1(np.array([0.5]))[0], 0.125)
    assert np.isclose(losses.smooth_l1(np.array([-3.0]))[0], 2.5)
    assert np.isclose(losses.smooth_l1(np.array([1.0]))[0], 0.5)
    assert losses.smooth_l1(np.array([0.0]))[0] == 0.0


def test_smooth_l1_grad_values():
    d = np.array([-3.0, -0.5, 0.0, 0.25, 2.0])
    assert np.allclose(losses.smooth_l1_grad(d), [-1.0, -0.5, 0.0, 0.25, 1.0])


def _random_case(rng, n=60, k=3):
    labels = rng.choice([-1, 0, 0, 0, 1, 2, 3], size=n)
    logits_m = rng.uniform(-4, 4, (n, k))
    logits_s = rng.uniform(-4, 4, (n, k))
    deltas_m = rng.uniform(-2, 2, (n, 4))
    deltas_s = rng.uniform(-2, 2, (n, 4))
    targets = rng.uniform(-1, 1, (n, 4))
    return (logits_m, deltas_m), (logits_s, deltas_s), labels, targets


def test_total_loss_breakdown_consistency():
    rng = np.random.default_rng(1)
    mo, sa, labels, targets = _random_case(rng)
    br = losses.total_loss(mo, sa, labels, targets)
    n_fg = int(np.count_nonzero(labels >= 1))
    assert br.num_foreground == n_fg
    total = (br.focal_motion + br.focal_sampling + br.loc_motion + br.loc_sampling)
    assert np.isclose(br.total, total / max(n_fg, 1))
    d = br.to_dict()
    assert set(d) >= {"focal_motion", "focal_sampling", "loc_motion",
                      "loc_sampling", "num_foreground", "total"}


def test_ignore_rows_do_not_contribute():
    rng = np.random.default_rng(2)
    mo, sa, labels, targets = _random_case(rng)
    br1 = losses.total_loss(mo, sa, labels, targets)
    # perturb logits and deltas on ignore rows only
    ig = labels == -1
    assert ig.any()
    mo2 = (mo[0].copy(), mo[1].copy())
    mo2[0][ig] += 3.0
    mo2[1][ig] -= 2.0
    br2 = losses.total_loss(mo2, sa, labels, targets)
    assert br1.total == br2.total


def test_background_rows_have_no_loc_loss():
    rng = np.random.default_rng(3)
    mo, sa, labels, targets = _random_case(rng)
    mo2 = (mo[0], mo[1].copy())
    mo2[1][labels == 0] += 5.0
    br1 = losses.total_loss(mo, sa, labels, targets)
    br2 = losses.total_loss(mo2, sa, labels, targets)
    assert br1.loc_motion == br2.loc_motion


def test_no_foreground_normalizer_is_one():
    n, k = 10, 3
    zeros = (np.zeros((n, k)), np.zeros((n, 4)))
    labels = np.zeros(n, np.int64)
    br = losses.total_loss(zeros, zeros, labels, np.zeros((n, 4)))
    assert br.num_foreground == 0
    assert br.total == (br.focal_motion + br.focal_sampling)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    mo, sa, labels, targets = _random_case(rng, n=75)  # 75*7*2 = 1050 coords
    grads = losses.loss_gradients(mo, sa, labels, targets)
    h = 1e-5
    checked = 0
    for stream, (logits, deltas) in (("motion", mo), ("sampling", sa)):
        for arr, g, key in ((logits, grads[stream]["logits"], "logits"),
                            (deltas, grads[stream]["deltas"], "deltas")):
            it = list(np.ndindex(arr.shape))
            for idx in it:
                plus = arr.copy(); plus[idx] += h
                minus = arr.copy(); minus[idx] -= h
                if stream == "motion":
                    mo_p = (plus, mo[1]) if key == "logits" else (mo[0], plus)
                    mo_m = (minus, mo[1]) if key == "logits" else (mo[0], minus)
                    lp = losses.total_loss(mo_p, sa, labels, targets).total
                    lm = losses.total_loss(mo_m, sa, labels, targets).total
                else:
                    sa_p = (plus, sa[1]) if key == "logits" else (sa[0], plus)
                    sa_m = (minus, sa[1]) if key == "logits" else (sa[0], minus)
                    lp = losses.total_loss(mo, sa_p, labels, targets).total
                    lm = losses.total_loss(mo, sa_m, labels, targets).total
                fd = (lp - lm) / (2 * h)
                an = g[idx]
                # 1e-6 magnitude floor: below it central differences are all
                # cancellation noise while the absolute error stays ~1e-11
                rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
                assert rel < 1e-4, f"{stream}.{key}{idx}: analytic {an} vs fd {fd}"
                checked += 1
    assert checked >= 1000


def test_gradient_zero_on_ignore_rows():
    rng = np.random.default_rng(5)
    mo, sa, labels, targets = _random_case(rng)
    grads = losses.loss_gradients(mo, sa, labels, targets)
    ig = labels == -1
    for stream in ("motion", "sampling"):
        assert np.all(grads[stream]["logits"][ig] == 0.0)
        assert np.all(grads[stream]["deltas"][ig] == 0.0)
        assert np.all(grads[stream]["deltas"][labels == 0] == 0.0)


def test_loss_is_float64_and_deterministic():
    rng = np.random.default_rng(6)
    mo, sa, labels, targets = _random_case(rng)
    a = losses.total_loss(mo, sa, labels, targets).total
    b = losses.total_loss(mo, sa, labels, targets).total
    assert isinstance(a, float) and a == b
