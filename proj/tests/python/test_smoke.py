import json
import math
import os
import tempfile

import numpy as np
import pytest

import dimae


def test_fft_round_trip():
    rng = np.random.default_rng(0)
    img = rng.random((3, 16, 16))
    amp, phase = dimae.fft_decompose(img)
    assert amp.shape == img.shape
    np.testing.assert_allclose(dimae.fft_compose(amp, phase), img, atol=1e-10)
    np.testing.assert_allclose(amp, np.abs(np.fft.fft2(img)), rtol=1e-10, atol=1e-9)


def test_style_view_keeps_phase():
    rng = np.random.default_rng(1)
    x, aux = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    out = dimae.style_view(x, aux, 1.0)
    _, phase_x = dimae.fft_decompose(x)
    amp_aux, _ = dimae.fft_decompose(aux)
    expected = np.real(np.fft.ifft2(amp_aux * np.exp(1j * phase_x)))
    np.testing.assert_allclose(out, expected, atol=1e-9)
    np.testing.assert_allclose(dimae.style_view(x, aux, 0.0), x, atol=1e-10)


def test_cp_style_mix_record():
    rng = np.random.default_rng(2)
    x = rng.random((3, 16, 16))
    aux = [rng.random((3, 16, 16)) for _ in range(2)]
    out, record = dimae.cp_style_mix(x, aux, seed=5)
    assert out.shape == x.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert math.isclose(sum(record["mu"]), 1.0, abs_tol=1e-12)
    again, _ = dimae.cp_style_mix(x, aux, seed=5)
    np.testing.assert_array_equal(out, again)


def test_patchify_and_mask():
    img = np.arange(3 * 8 * 8, dtype=float).reshape(3, 8, 8)
    patches = dimae.patchify(img, 4)
    assert patches.shape == (4, 48)
    visible, masked = dimae.sample_mask(16, 0.25, 3)
    assert len(visible) == 4 and len(masked) == 12
    assert sorted(visible + masked) == list(range(16))


def test_masked_mse_oracle():
    rng = np.random.default_rng(4)
    img = rng.random((3, 8, 8))
    target = dimae.patchify(img, 2)
    # The grid is 4x4 = 16 patches of 2x2.
    pred = rng.random((16, 12))
    _, masked = dimae.sample_mask(16, 0.5, 9)
    expected = np.mean((pred[masked] - target[masked]) ** 2)
    assert math.isclose(dimae.masked_mse(pred, img, 2, 0.5, 9), expected, rel_tol=1e-12)


def test_lr_schedule_endpoints():
    cfg = {"base_lr": 1e-3, "epochs": 10, "warmup_epochs": 1}
    assert dimae.lr_at(0, 1000, cfg) < 1e-3
    lrs = [dimae.lr_at(s, 1000, cfg) for s in range(1000)]
    assert max(lrs) <= 1e-3 + 1e-15
    assert lrs[-1] < 1e-5
    with pytest.raises(ValueError):
        dimae.lr_at(1000, 1000, cfg)


def test_generate_synthetic_and_probe():
    ds = dimae.generate_synthetic({"num_classes": 3, "image_size": 16, "samples_per_class_per_domain": 4})
    assert ds["images"].shape == (36, 3, 16, 16)
    assert ds["domain_names"] == ["solid", "stripes", "sketch"]
    assert set(ds["labels"].tolist()) == {0, 1, 2}

    rng = np.random.default_rng(0)
    centers = rng.normal(size=(3, 5)) * 4
    y = np.repeat(np.arange(3), 20)
    x = centers[y] + rng.normal(size=(60, 5))
    assert dimae.linear_probe(x, y.tolist(), x, y.tolist(), 3) == 1.0


def test_validation_error_maps_to_value_error():
    with pytest.raises(ValueError):
        dimae.generate_synthetic({"domains": ["nope"]})


def test_run_cli():
    code, out, _ = dimae.run_cli(["--help"])
    assert code == 0 and "pretrain" in out
    code, _, err = dimae.run_cli(["no-such-command"])
    assert code == 2 and "error" in err
    with tempfile.TemporaryDirectory() as tmp:
        dest = os.path.join(tmp, "data")
        spec = os.path.join(tmp, "spec.json")
        with open(spec, "w") as f:
            json.dump({"num_classes": 2, "image_size": 8, "samples_per_class_per_domain": 1}, f)
        code, _, err = dimae.run_cli(["generate-data", "--spec", spec, "--out", dest])
        assert code == 0, err
        manifest = json.load(open(os.path.join(dest, "manifest.json")))
        assert manifest["command"] == "generate-data"
