import numpy as np
import pytest

from tcpdm import data_io as dio
from tcpdm.errors import (
    BadMagic,
    ChannelMismatch,
    InvalidConfig,
    ShapeOutOfFrame,
    TruncatedPayload,
    UnsupportedDtype,
)


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.uint8])
@pytest.mark.parametrize("ndim", [1, 2, 3, 4])
def test_container_round_trip(tmp_path, dtype, ndim):
    rng = np.random.default_rng(hash((str(dtype), ndim)) % 2**32)
    shape = tuple(rng.integers(1, 6, size=ndim))
    if dtype == np.uint8:
        arr = rng.integers(0, 256, size=shape).astype(np.uint8)
    else:
        arr = rng.standard_normal(shape).astype(dtype)
    path = tmp_path / "t.tct"
    dio.write_tensor(path, arr)
    back = dio.read_tensor(path)
    assert back.dtype == arr.dtype
    assert back.shape == arr.shape
    assert np.array_equal(back.view(np.uint8), arr.view(np.uint8))  # bit-identity


def test_container_file_size(tmp_path):
    arr = np.zeros((2, 3), dtype=np.float32)
    path = tmp_path / "t.tct"
    dio.write_tensor(path, arr)
    # magic(4) + dtype(1) + ndim(1) + dims(2*4) + payload(6*4)
    assert path.stat().st_size == 38


def test_container_bad_magic(tmp_path):
    path = tmp_path / "bad.tct"
    path.write_bytes(b"XXXX" + bytes(10))
    with pytest.raises(BadMagic):
        dio.read_tensor(path)


def test_container_truncated(tmp_path):
    arr = np.zeros((4, 4), dtype=np.float32)
    path = tmp_path / "t.tct"
    dio.write_tensor(path, arr)
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(TruncatedPayload):
        dio.read_tensor(path)


def test_container_unsupported_dtype(tmp_path):
    with pytest.raises(UnsupportedDtype):
        dio.write_tensor(tmp_path / "x.tct", np.zeros(3, dtype=np.int32))
    path = tmp_path / "y.tct"
    arr = np.zeros(3, dtype=np.float32)
    dio.write_tensor(path, arr)
    blob = bytearray(path.read_bytes())
    blob[4] = 9  # unknown dtype code
    path.write_bytes(bytes(blob))
    with pytest.raises(UnsupportedDtype):
        dio.read_tensor(path)


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    rgb = rng.integers(0, 256, size=(7, 9, 3)).astype(np.uint8)
    gray = rng.integers(0, 256, size=(7, 9, 1)).astype(np.uint8)
    dio.write_png(tmp_path / "rgb.png", rgb)
    dio.write_png(tmp_path / "gray.png", gray)
    assert np.array_equal(dio.read_png(tmp_path / "rgb.png"), rgb)
    assert np.array_equal(dio.read_png(tmp_path / "gray.png"), gray)


def test_ycbcr_known_values():
    white = np.ones((1, 1, 3))
    assert np.isclose(dio.rgb_to_ycbcr(white)[0, 0, 0], 1.0)
    red = np.zeros((1, 1, 3))
    red[..., 0] = 1.0
    assert np.isclose(dio.rgb_to_ycbcr(red)[0, 0, 0], 0.299)


def test_ycbcr_round_trip():
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 1, size=(8, 5, 3))
    back = dio.ycbcr_to_rgb(dio.rgb_to_ycbcr(img))
    assert np.max(np.abs(back - img)) < 1e-6


def test_ycbcr_channel_mismatch():
    with pytest.raises(ChannelMismatch):
        dio.rgb_to_ycbcr(np.zeros((4, 4, 1)))


def test_model_range_endpoints():
    u8 = np.array([[[0], [255], [128]]], dtype=np.uint8)
    x = dio.to_model_range(u8)
    assert x[0, 0, 0] == -1.0
    assert x[0, 1, 0] == 1.0
    assert np.isclose(x[0, 2, 0], 2 * 128 / 255 - 1)


def test_model_range_exhaustive_round_trip():
    u8 = np.arange(256, dtype=np.uint8).reshape(16, 16, 1)
    back = dio.from_model_range(dio.to_model_range(u8))
    assert np.array_equal(back, u8)


def test_from_model_range_clamps():
    x = np.array([[[-2.0], [2.0]]], dtype=np.float32)
    out = dio.from_model_range(x)
    assert out[0, 0, 0] == 0 and out[0, 1, 0] == 255


def _toy_cfg(**kw):
    shapes = kw.pop(
        "shapes",
        (
            dio.ShapeSpec("rectangle", (4, 3), (1, 1), (0, 2), (0.9, 0.1, 0.1), 0.8, 1),
            dio.ShapeSpec("disk", (2,), (10, 10), (1, -1), (0.1, 0.2, 0.9), 0.5, 2),
        ),
    )
    base = dict(
        height=16, width=16, n_frames=4, shapes=shapes, num_categories=4, tau=0.25
    )
    base.update(kw)
    return dio.SyntheticSceneConfig(**base)


def test_synth_scene_shapes_and_flow():
    scene = dio.synth_scene(_toy_cfg())
    assert scene.ir.shape == (4, 16, 16, 1)
    assert scene.vis.shape == (4, 16, 16, 3)
    assert scene.logits.shape == (4, 16, 16, 4)
    assert scene.flows.shape == (3, 16, 16, 2)
    # flow inside the rectangle support at frame 0 equals its velocity
    rect = scene.masks[0] == 1
    assert np.all(scene.flows[0][rect] == np.array([0.0, 2.0], dtype=np.float32))
    background = scene.masks[0] == 0
    assert np.all(scene.flows[0][background] == 0.0)


def test_synth_scene_logits_normalized():
    scene = dio.synth_scene(_toy_cfg(tau=0.37))
    sums = scene.logits.sum(axis=-1)
    assert np.max(np.abs(sums - 1.0)) < 1e-5
    assert np.all(scene.logits >= 0.0)


def test_synth_scene_tau_zero_one_hot():
    scene = dio.synth_scene(_toy_cfg(tau=0.0))
    assert np.array_equal(np.argmax(scene.logits, axis=-1), scene.masks)
    assert set(np.unique(scene.logits)) == {0.0, 1.0}


def test_synth_scene_flow_warps_masks_exactly():
    scene = dio.synth_scene(_toy_cfg())
    H, W = 16, 16
    for i in range(scene.masks.shape[0] - 1):
        warped = np.zeros((H, W), dtype=np.uint8)
        flow = scene.flows[i]
        # scatter in z-order: background first, then shapes by category
        order = np.argsort(scene.masks[i].ravel(), kind="stable")
        uu, vv = np.divmod(np.arange(H * W)[order], W)
        tu = uu + flow[uu, vv, 0].astype(np.int64)
        tv = vv + flow[uu, vv, 1].astype(np.int64)
        warped[tu, tv] = scene.masks[i][uu, vv]
        assert np.array_equal(warped, scene.masks[i + 1])


def test_synth_scene_out_of_frame():
    bad = dio.ShapeSpec("rectangle", (4, 4), (13, 13), (1, 1), (1, 1, 1), 0.5, 1)
    with pytest.raises(ShapeOutOfFrame):
        dio.synth_scene(_toy_cfg(shapes=(bad,)))


def test_synth_scene_category_bounds():
    bad = dio.ShapeSpec("rectangle", (2, 2), (1, 1), (0, 0), (1, 1, 1), 0.5, 7)
    with pytest.raises(InvalidConfig):
        dio.synth_scene(_toy_cfg(shapes=(bad,)))


def test_synth_scene_deterministic():
    a = dio.synth_scene(_toy_cfg(noise=0.1, seed=5))
    b = dio.synth_scene(_toy_cfg(noise=0.1, seed=5))
    assert np.array_equal(a.vis, b.vis)
    assert np.array_equal(a.ir, b.ir)


def test_dataset_round_trip(tmp_path):
    scene = dio.synth_scene(_toy_cfg())
    root = tmp_path / "ds"
    dio.save_dataset(root, scene)
    ds = dio.load_dataset(root)
    assert ds.n_frames == 4
    assert ds.manifest["L"] == "4"
    assert np.array_equal(ds.logits, scene.logits)
    assert np.array_equal(ds.flows, scene.flows)
    assert np.array_equal(ds.masks, scene.masks)
    assert np.array_equal(ds.ir, dio.unit_to_u8(scene.ir))
    assert np.array_equal(ds.vis, dio.unit_to_u8(scene.vis))


def test_dataset_regeneration_byte_identical(tmp_path):
    import filecmp

    cfg = _toy_cfg(noise=0.05, seed=11)
    r1, r2 = tmp_path / "a", tmp_path / "b"
    dio.save_dataset(r1, dio.synth_scene(cfg))
    dio.save_dataset(r2, dio.synth_scene(cfg))
    for sub in ("ir", "vis", "logits", "flow", "masks"):
        d1, d2 = r1 / sub, r2 / sub
        names = sorted(p.name for p in d1.iterdir())
        match, mismatch, errors = filecmp.cmpfiles(d1, d2, names, shallow=False)
        assert not mismatch and not errors


def test_make_scene_config_presets():
    cfg = dio.make_scene_config("two_shapes", 32, 32, 6, 4)
    scene = dio.synth_scene(cfg)
    assert scene.vis.shape == (6, 32, 32, 3)
    # both shapes actually move
    for sh in cfg.shapes:
        assert sh.velocity != (0, 0)
    cfg3 = dio.make_scene_config("three_shapes", 48, 40, 5, 8)
    scene3 = dio.synth_scene(cfg3)
    assert len(cfg3.shapes) == 3
    assert scene3.logits.shape[-1] == 8
    with pytest.raises(InvalidConfig):
        dio.make_scene_config("nope", 32, 32, 4, 4)
    with pytest.raises(InvalidConfig):
        dio.make_scene_config("two_shapes", 32, 32, 4, 2)
