import json

import numpy as np
import pytest

from conftest import random_scene, random_variational
from sgsplat.errors import ConfigurationError, ContractError
from sgsplat.io import (
    CHECKPOINT_VERSION, Checkpoint, CheckpointError, ChecksumError, DatasetError, VersionError, export_curve,
    export_image, export_uncertainty, load_checkpoint, load_config, load_curve, load_dataset, read_image,
    save_checkpoint, save_config, save_dataset, sidecar_path, to_uint8,
)
from sgsplat.metrics import LossWeights, sparsification
from sgsplat.synthetic import SynthSpec, generate
from sgsplat.trainer import TrainConfig


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds")
    generate(SynthSpec(n_kernels=4, width=16, height=12, n_train=3, n_test=1, seed=2), d)
    return d


def test_uint8_endpoints():
    np.testing.assert_array_equal(to_uint8([0.0, 1.0, 0.5, 1.5, -0.2]), [0, 255, 128, 255, 0])
    np.testing.assert_array_equal(to_uint8([0.5 / 255, 1.5 / 255, 0.49 / 255]), [1, 2, 0])
    with pytest.raises(ContractError):
        to_uint8([np.nan])


def test_image_round_trip(tmp_path, rng):
    img = to_uint8(rng.random((5, 7, 3))) / 255.0
    export_image(img, tmp_path / "a.png")
    np.testing.assert_array_equal(read_image(tmp_path / "a.png"), img)
    with pytest.raises(ContractError):
        export_image(rng.random((5, 7, 4)), tmp_path / "b.png")


def test_uncertainty_export(tmp_path, rng):
    u = rng.random((6, 8)) * 0.02
    peak = export_uncertainty(u, tmp_path / "u.png")
    assert peak == u.max()
    assert float(sidecar_path(tmp_path / "u.png").read_text()) == u.max()
    from PIL import Image
    with Image.open(tmp_path / "u.png") as im:
        assert im.mode == "L"
        px = np.asarray(im)
    np.testing.assert_array_equal(px, to_uint8(u / u.max()))
    assert px.max() == 255


def test_all_zero_uncertainty(tmp_path):
    export_uncertainty(np.zeros((4, 4)), tmp_path / "z.png")
    from PIL import Image
    with Image.open(tmp_path / "z.png") as im:
        np.testing.assert_array_equal(np.asarray(im), 0)
    assert float((tmp_path / "z.max.txt").read_text()) == 0.0


def test_unwritable_path(rng):
    with pytest.raises(OSError):
        export_image(rng.random((3, 3, 3)), "/nonexistent-dir/x.png")


def test_curve_round_trip(tmp_path, rng):
    e = rng.random(300) / 3
    curve = sparsification(e, rng.random(300), 100)
    export_curve(curve, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "fraction,retained_error"
    back = load_curve(tmp_path / "c.csv")
    assert len(back.fractions) == 101
    np.testing.assert_array_equal(back.retained_error, [float(f"{v:.9g}") for v in curve.retained_error])
    np.testing.assert_allclose(back.retained_error, curve.retained_error, rtol=5e-9)


def test_checkpoint_round_trip_variational(tmp_path, rng):
    vs = random_variational(rng, 6)
    cfg = TrainConfig(seed=9, weights=LossWeights(lambda_ause=0.0))
    save_checkpoint(tmp_path / "m.ckpt", Checkpoint(vs, "bayesian", cfg, 1234, 9))
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert ck.phase == "bayesian" and ck.iteration == 1234 and ck.seed == 9 and ck.config == cfg
    assert ck.version == CHECKPOINT_VERSION
    for name in ("mean_mu", "sqrt_gamma", "mean_logit_alpha", "sqrt_pi", "mean_c", "sqrt_xi"):
        assert getattr(ck.model.posterior, name).tobytes() == getattr(vs.posterior, name).tobytes()
    for name in ("mu", "gamma", "logit_alpha", "pi", "c", "xi"):
        assert getattr(ck.model.prior, name).tobytes() == getattr(vs.prior, name).tobytes()
    assert ck.model.prior.frozen
    assert ck.model.rotations.tobytes() == vs.rotations.tobytes()


def test_checkpoint_round_trip_scene(tmp_path, rng):
    s = random_scene(rng, 4, sh_degree=2)
    save_checkpoint(tmp_path / "s.ckpt", Checkpoint(s))
    ck = load_checkpoint(tmp_path / "s.ckpt")
    assert ck.phase == "deterministic" and ck.config is None and ck.model.sh_degree == 2
    assert ck.model.sh.tobytes() == s.sh.tobytes()
    save_checkpoint(tmp_path / "t.ckpt", Checkpoint(s))
    assert (tmp_path / "s.ckpt").read_bytes() == (tmp_path / "t.ckpt").read_bytes()


def test_truncated_checkpoint(tmp_path, rng):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, Checkpoint(random_variational(rng, 3), "bayesian"))
    data = path.read_bytes()
    for cut in (10, 70, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(ChecksumError):
            load_checkpoint(path)


def test_corrupt_checkpoint(tmp_path, rng):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, Checkpoint(random_scene(rng, 3)))
    data = bytearray(path.read_bytes())
    data[-3] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + bytes(data[8:]))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_version_mismatch(tmp_path, rng):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, Checkpoint(random_scene(rng, 3)))
    data = bytearray(path.read_bytes())
    data[8:12] = (CHECKPOINT_VERSION + 1).to_bytes(4, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(VersionError, match="version 2 is not supported"):
        load_checkpoint(path)


def test_phase_tag_validated(rng):
    with pytest.raises(ContractError):
        Checkpoint(random_scene(rng, 2), phase="warmup")


def test_dataset_round_trip(dataset_dir, tmp_path):
    m = load_dataset(dataset_dir)
    assert len(m.train) == 3 and len(m.test) == 1
    save_dataset(m, tmp_path)
    m2 = load_dataset(tmp_path)
    assert json.loads((tmp_path / "cameras.json").read_text()) == json.loads((dataset_dir / "cameras.json").read_text())
    for a, b in zip(m.views, m2.views):
        assert a.image_path == b.image_path and a.split == b.split
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.camera.world_to_camera, b.camera.world_to_camera)
    np.testing.assert_array_equal(m.scene_box()[0], m2.scene_box()[0])


def test_dataset_missing_images(dataset_dir, tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "cameras.json").write_text((dataset_dir / "cameras.json").read_text())
    with pytest.raises(DatasetError, match="missing image files: images/000.png, images/001.png"):
        load_dataset(tmp_path)


def test_dataset_bad_json(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "cameras.json").write_text('{\n  "views": [\n    {"image": }\n  ]\n}\n')
    with pytest.raises(DatasetError, match=r"cameras.json:3:"):
        load_dataset(tmp_path)
    with pytest.raises(DatasetError, match="not found"):
        load_dataset(tmp_path / "nowhere")


def test_dataset_size_mismatch(dataset_dir, tmp_path):
    save_dataset(load_dataset(dataset_dir), tmp_path)
    doc = json.loads((tmp_path / "cameras.json").read_text())
    doc["views"][1]["width"] = 15
    (tmp_path / "cameras.json").write_text(json.dumps(doc))
    with pytest.raises(DatasetError, match="16x12 but camera is 15x12"):
        load_dataset(tmp_path)


def test_dataset_bad_split(dataset_dir, tmp_path):
    save_dataset(load_dataset(dataset_dir), tmp_path)
    doc = json.loads((tmp_path / "cameras.json").read_text())
    doc["views"][0]["split"] = "val"
    (tmp_path / "cameras.json").write_text(json.dumps(doc))
    with pytest.raises(DatasetError, match="view 0"):
        load_dataset(tmp_path)


def test_config_round_trip(tmp_path):
    cfg = TrainConfig(warmup_iters=300, total_iters=900, densify_until=200, seed=11, cull=False,
                      weights=LossWeights(0.1, 2e-3, 0.0), lr={**TrainConfig().lr, "mean": 3e-3})
    save_config(cfg, tmp_path / "c.ini")
    assert load_config(tmp_path / "c.ini") == cfg


def test_config_partial_and_errors(tmp_path):
    (tmp_path / "a.ini").write_text("[train]\nseed = 3\n[weights]\nlambda_ause = 0\n")
    cfg = load_config(tmp_path / "a.ini")
    assert cfg.seed == 3 and cfg.weights.lambda_ause == 0.0 and cfg.total_iters == 10000
    (tmp_path / "b.ini").write_text("[train]\nsed = 3\n")
    with pytest.raises(ConfigurationError, match="unknown key"):
        load_config(tmp_path / "b.ini")
    (tmp_path / "c.ini").write_text("[train]\nseed = three\n")
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "c.ini")
    (tmp_path / "d.ini").write_text("[optim]\nseed = 3\n")
    with pytest.raises(ConfigurationError, match="unknown sections"):
        load_config(tmp_path / "d.ini")
