import dataclasses

import numpy as np
import pytest
import torch

from pestsim import cmmformer as cm
from pestsim.device import DeviceConfig
from pestsim.dropsim import build_reference_drops

CFG = cm.ModelConfig()


def _pool(gain, offset, n=20, seed=0):
    dev = DeviceConfig(device_id=f"g{gain}", seed=7, channel_gain=gain, channel_offset=offset)
    return np.stack([r.as_array() for r in build_reference_drops(dev, n, seed)])


@pytest.fixture(scope="module")
def pools():
    return {"a": _pool((0.6, 0.65), (-80.0, 40.0)), "b": _pool((1.5, 1.4), (60.0, -50.0))}


def _batch(n=6, seed=0):
    rng = np.random.default_rng(seed)
    x = 2000 + rng.normal(0, 40, size=(n, CFG.T, CFG.C))
    x[:, 50:70] += rng.uniform(100, 900, size=(n, 1, CFG.C))
    y = rng.integers(0, CFG.classes, n)
    stats = np.stack([cm.ref_stats(2000 + rng.normal(0, 30, (CFG.k_ref, CFG.T, CFG.C))) for _ in range(n)])
    return x, stats, y


# --- reference sampling and normalisation ---------------------------------


def test_sample_refwaves():
    pool = np.arange(10 * 4 * 2).reshape(10, 4, 2)
    full = cm.sample_refwaves(pool, 10, 3)
    assert sorted(full[:, 0, 0]) == sorted(pool[:, 0, 0])
    assert cm.sample_refwaves(pool, 1, 3).shape == (1, 4, 2)
    assert np.array_equal(cm.sample_refwaves(pool, 4, 9), cm.sample_refwaves(pool, 4, 9))
    picked = cm.sample_refwaves(pool, 6, 1)[:, 0, 0]
    assert len(set(picked)) == 6


def test_k_above_pool_size_is_rejected():
    with pytest.raises(ValueError):
        cm.sample_refwaves(np.zeros((5, 4, 2)), 6, 0)
    with pytest.raises(ValueError):
        cm.ModelConfig(k_ref=101, N_pool=100)


def test_normalize_examples():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(128, 2))
    z = cm.normalize(x)
    assert np.allclose(cm.normalize(z), z, atol=1e-9 * 1e3)
    assert np.allclose(cm.normalize(3.5 * x - 40), z, atol=1e-9)
    assert np.array_equal(cm.normalize(np.full((128, 2), 2000.0)), np.zeros((128, 2)))
    t = cm.normalize(torch.as_tensor(x))
    assert np.allclose(t.numpy(), z, atol=1e-12)


def test_normalize_idempotent_tolerance():
    z = cm.normalize(np.random.default_rng(1).normal(size=(128, 2)))
    # eps in the denominator moves an already unit-sd channel by about 1e-6
    assert np.abs(cm.normalize(z) - z).max() < 1e-5


# --- module contracts --------------------------------------------------------


def test_residual_identity_at_zero_merge():
    x, stats, _ = _batch()
    params = cm.init_params(CFG, 0, zero_merge=True)
    logits, aux = cm.model_forward(x, stats, params, CFG, return_aux=True)
    h0 = aux["hidden"][0]
    for h in aux["hidden"][1:]:
        assert torch.equal(h, h0)
    z = torch.nn.functional.gelu(h0.mean(dim=1) @ params["head_w1"] + params["head_b1"])
    assert torch.equal(logits, z @ params["head_w2"] + params["head_b2"])


def test_attention_rows_are_distributions():
    x, stats, _ = _batch()
    _, aux = cm.model_forward(x, stats, cm.init_params(CFG, 1), CFG, return_aux=True)
    for att in aux["attention"]:
        assert att.shape == (6, CFG.heads, CFG.T, CFG.T)
        assert torch.all(att >= 0)
        assert torch.allclose(att.sum(-1), torch.ones((), dtype=att.dtype), atol=1e-9)


def test_projection_depends_on_device_pool(pools):
    params = cm.init_params(CFG, 0)
    sa = cm.ref_stats(cm.sample_refwaves(pools["a"], CFG.k_ref, 0))
    sb = cm.ref_stats(cm.sample_refwaves(pools["b"], CFG.k_ref, 0))
    w = cm.projection(torch.as_tensor(np.stack([sa, sb])), params, 0, CFG)
    assert not torch.allclose(w[0], w[1])
    ident = cm.projection(torch.as_tensor(np.stack([sa, sb])), params, 0, CFG.ablated("cmm"))
    assert torch.equal(ident[0], ident[1])


def test_logits_shape_and_finiteness():
    x, stats, _ = _batch()
    logits = cm.model_forward(x, stats, cm.init_params(CFG, 2), CFG)
    assert logits.shape == (6, 5) and torch.isfinite(logits).all()


def test_time_permutation_changes_logits():
    x, stats, _ = _batch()
    params = cm.init_params(CFG, 3)
    perm = np.random.default_rng(0).permutation(CFG.T)
    a = cm.model_forward(x, stats, params, CFG)
    b = cm.model_forward(x[:, perm], stats, params, CFG)
    assert not torch.allclose(a, b, atol=1e-8)


def test_forward_is_deterministic():
    x, stats, _ = _batch()
    params = cm.init_params(CFG, 4)
    assert torch.equal(cm.model_forward(x, stats, params, CFG), cm.model_forward(x, stats, params, CFG))


def test_shape_errors():
    params = cm.init_params(CFG, 0)
    with pytest.raises(ValueError):
        cm.cmm_forward(torch.zeros(2, 64, 2, dtype=torch.float64), torch.zeros(2, 4, dtype=torch.float64),
                       params, 0, CFG)
    with pytest.raises(ValueError):
        cm.cmm_forward(torch.zeros(2, 128, 2, dtype=torch.float64), torch.zeros(3, 4, dtype=torch.float64),
                       params, 0, CFG)


@pytest.mark.parametrize("name", cm.ABLATIONS)
def test_ablations_run(name):
    x, stats, _ = _batch()
    cfg = CFG.ablated(name)
    assert torch.isfinite(cm.model_forward(x, stats, cm.init_params(cfg, 0), cfg)).all()
    with pytest.raises(ValueError):
        CFG.ablated("head")


# --- gradients ---------------------------------------------------------------


def test_grad_check():
    x, stats, y = _batch(4)
    assert cm.grad_check(cm.init_params(CFG, 0), x, stats, y, CFG, n_params=200) < 1e-4


def test_grad_check_on_zero_input():
    _, stats, y = _batch(4)
    x = np.zeros((4, CFG.T, CFG.C))
    a, n = cm.fd_errors(cm.init_params(CFG, 0), x, stats, y, CFG, n_params=200)
    assert np.all(np.isfinite(a)) and np.all(np.isfinite(n))
    # with H^0 = 0 some gradients are ~1e-10, where the stencil's rounding dominates
    ok = (cm.relative_errors(a, n) < 1e-4) | (np.abs(a - n) < 1e-10)
    assert ok.all() and np.count_nonzero(a) > 50


def test_step_doubling_is_second_order():
    x, stats, y = _batch(4)
    params = cm.init_params(CFG, 0)
    a1, n1 = cm.fd_errors(params, x, stats, y, CFG, n_params=60, step=2e-3)
    a2, n2 = cm.fd_errors(params, x, stats, y, CFG, n_params=60, step=4e-3)
    e1, e2 = np.abs(a1 - n1), np.abs(a2 - n2)
    usable = e1 > 1e-10  # stay clear of rounding noise
    ratio = np.median(e2[usable] / e1[usable])
    assert 3.0 < ratio < 5.0


# --- training ----------------------------------------------------------------


def _device_batch(pools, n=32, seed=0):
    rng = np.random.default_rng(seed)
    devs = ["a" if k % 2 else "b" for k in range(n)]
    x = np.stack([pools[d][rng.integers(len(pools[d]))] for d in devs]).astype(float)
    x += rng.normal(0, 5, x.shape)
    y = rng.integers(0, 5, n)
    return x, y, devs


def test_one_epoch_smoke(pools):
    x, y, devs = _device_batch(pools)
    params, hist = cm.train(x, y, devs, pools, CFG, cm.TrainConfig(max_epochs=1))
    assert len(hist) == 1 and np.isfinite(hist[0]["loss"])
    assert all(v.dtype == torch.float64 for v in params.values())


def test_single_step_descends(pools):
    x, y, devs = _device_batch(pools, 16)
    stats = cm.batch_stats(devs, pools, CFG.k_ref, 0)
    wins = 0
    for seed in range(5):
        p = {k: v.clone().requires_grad_(True) for k, v in cm.init_params(CFG, seed).items()}
        opt = torch.optim.Adam(p.values(), lr=1e-3)
        before = cm.loss_fn(p, x, stats, y, CFG)
        opt.zero_grad()
        before.backward()
        opt.step()
        with torch.no_grad():
            wins += cm.loss_fn(p, x, stats, y, CFG).item() < before.item()
    assert wins >= 4


def test_seeded_training_is_reproducible(pools):
    x, y, devs = _device_batch(pools)
    tc = cm.TrainConfig(max_epochs=2, seed=5)
    a, ha = cm.train(x, y, devs, pools, CFG, tc)
    b, hb = cm.train(x, y, devs, pools, CFG, tc)
    assert ha == hb
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_missing_pool_is_an_error(pools):
    x, y, devs = _device_batch(pools, 4)
    with pytest.raises(KeyError):
        cm.train(x, y, devs[:-1] + ["c"], pools, CFG, cm.TrainConfig(max_epochs=1))
    with pytest.raises(KeyError):
        cm.batch_stats(["c"], pools, 2, 0)


def test_checkpoint_roundtrip(tmp_path):
    cfg = dataclasses.replace(CFG, C_prime=8, cmm=False)
    params = cm.init_params(cfg, 11)
    path = tmp_path / "model.pstm"
    cm.save_checkpoint(path, params, cfg)
    assert path.read_bytes()[:4] == b"PSTM"
    back, cfg2 = cm.load_checkpoint(path)
    assert cfg2 == cfg and set(back) == set(params)
    assert all(torch.equal(back[k], params[k]) for k in params)
    (tmp_path / "junk").write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        cm.load_checkpoint(tmp_path / "junk")


def test_config_json_roundtrip():
    assert cm.ModelConfig.from_json(CFG.to_json()) == CFG
