import hashlib
import json
from importlib import resources

import jsonschema
import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import random_scene
from splattrace import imageio
from splattrace.scene import (SceneError, SceneFormatError, SceneSpec, generate_scene, load_scene,
                              save_scene, spec_from_dict, straddle_scene)


def _schema(name):
    return json.loads((resources.files("splattrace") / "schemas" / name).read_text())


@given(seed=st.integers(0, 10_000))
def test_scene_roundtrip_is_exact(seed):
    scene = random_scene(seed, n_views=2)
    back = load_scene(save_scene(scene))
    assert back.equals(scene)
    assert save_scene(back) == save_scene(scene)


def test_scene_file_matches_schema():
    scene = random_scene(1, n_views=2)
    jsonschema.validate(json.loads(save_scene(scene)), _schema("scene.schema.json"))


def _doc():
    return json.loads(save_scene(random_scene(2, n=2)))


@pytest.mark.parametrize("mutate, where", [
    (lambda d: d.update(magic="nope"), "$.magic"),
    (lambda d: d.update(version=9), "$.version"),
    (lambda d: d["gaussians"][1].update(scale_u="-1.0"), "$.gaussians[1].scale_u"),
    (lambda d: d["gaussians"][0].update(opacity="1.5"), "$.gaussians[0].opacity"),
    (lambda d: d["gaussians"][0].update(tangent_u=["1.0", "1.0", "0.0"]), "$.gaussians[0].tangent_u"),
])
def test_malformed_scene_reports_path(mutate, where):
    d = _doc()
    mutate(d)
    with pytest.raises(SceneFormatError) as e:
        load_scene(json.dumps(d))
    assert e.value.path == where


def test_truncated_scene_reports_offset():
    data = save_scene(random_scene(0, n=2))
    with pytest.raises(SceneFormatError) as e:
        load_scene(data[:50])
    assert e.value.offset is not None


def test_generation_is_seeded():
    spec = SceneSpec(n_objects=3, disks_per_side=6, image_size=(24, 24), n_views=2, seed=9)
    a, b = generate_scene(spec), generate_scene(spec)
    assert save_scene(a) == save_scene(b)
    assert len(a) == 3 * 36 and a.n_views == 2 and len(a.holdout_views) == 4
    assert sorted(set(a.gt_instance.tolist())) == [1, 2, 3]
    c = generate_scene(SceneSpec(n_objects=3, disks_per_side=6, image_size=(24, 24), n_views=2,
                                 seed=10))
    assert save_scene(c) != save_scene(a)


def test_spec_validation():
    with pytest.raises(SceneError):
        SceneSpec(n_objects=0).validate()
    with pytest.raises(SceneError):
        spec_from_dict({"bogus": 1})


def test_golden_scene_digest():
    from splattrace.cli import default_config_path
    from splattrace.config import load_config

    cfg = load_config(default_config_path())
    digest = (resources.files("splattrace") / "configs" / "golden_scene.sha256").read_text().split()[0]
    data = save_scene(generate_scene(cfg.scene))
    assert hashlib.sha256(data).hexdigest() == digest


def test_straddle_scene_layout():
    clean, scene = straddle_scene()
    assert len(scene) == len(clean) + 1
    assert scene.gt_instance[-1] == -1
    assert np.array_equal(scene.centers[:-1], clean.centers)


# ---------------------------------------------------------------------------
# image formats


@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2 ** 31))
def test_pgm16_roundtrip(h, w, seed):
    lab = np.random.default_rng(seed).integers(0, 65536, (h, w))
    assert np.array_equal(imageio.decode_pgm16(imageio.encode_pgm16(lab)), lab)


def test_ppm_roundtrip_quantises():
    img = np.random.default_rng(0).random((5, 4, 3))
    back = imageio.decode_ppm(imageio.encode_ppm(img))
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_raw_roundtrip_float32():
    a = np.random.default_rng(0).random((3, 5))
    back = imageio.decode_raw(imageio.encode_raw(a))
    assert back.shape == (3, 5, 1)
    assert np.array_equal(back[..., 0], a.astype(np.float32))


def test_netpbm_header_comments_and_errors():
    data = b"P5\n# comment\n2 1\n65535\n" + np.array([1, 2], ">u2").tobytes()
    assert imageio.decode_pgm16(data).tolist() == [[1, 2]]
    with pytest.raises(imageio.ImageFormatError):
        imageio.decode_pgm16(data[:-1])
    with pytest.raises(imageio.ImageFormatError):
        imageio.decode_ppm(data)
    with pytest.raises(imageio.ImageFormatError):
        imageio.encode_pgm16(np.array([[70000]]))
    with pytest.raises(imageio.ImageFormatError):
        imageio.decode_raw(b"SPRF" + b"\0" * 4)
