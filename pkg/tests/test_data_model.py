import struct

import numpy as np
import pytest

from splitwire import container, data
from splitwire import model as model_io
from splitwire.model import build_toy_resnet
from splitwire.nn import ShapeError

# ---- container ----------------------------------------------------------------


def test_container_golden_bytes():
    rec = container.Record("dense", {"a": 1}, {"w": np.array([[1.0, -2.0]])})
    blob = container.dumps(b"SWML", {"k": 2}, [rec])
    expected = (
        b"SWML" + struct.pack("<HII", 1, 1, 7) + b'{"k":2}'
        + b"\x05dense" + struct.pack("<I", 7) + b'{"a":1}' + struct.pack("<H", 1)
        + b"\x01w" + b"\x02" + struct.pack("<II", 1, 2) + struct.pack("<dd", 1.0, -2.0)
    )
    assert blob == expected


def test_container_round_trip_is_bit_exact():
    r = np.random.default_rng(0)
    recs = [container.Record("x", {"n": [1, 2]}, {"a": r.standard_normal((2, 3, 4)),
                                                 "b": np.array([np.pi])})]
    meta, back = container.loads(container.dumps(b"SWDS", {"m": "v"}, recs), b"SWDS")
    assert meta == {"m": "v"}
    for name, arr in recs[0].tensors.items():
        assert back[0].tensors[name].tobytes() == arr.tobytes()


@pytest.mark.parametrize("mutate", [
    lambda b: b[:-1],
    lambda b: b + b"\x00",
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + struct.pack("<H", 9) + b[6:],
])
def test_container_rejects_damage(mutate):
    blob = container.dumps(b"SWML", {}, [container.Record("r", {}, {"t": np.ones(3)})])
    with pytest.raises(container.ContainerError):
        container.loads(mutate(blob), b"SWML")


# ---- data ---------------------------------------------------------------------


def test_generate_is_deterministic_and_seed_sensitive():
    a = data.generate(7, 100, 4, 32)
    b = data.generate(7, 100, 4, 32)
    c = data.generate(8, 100, 4, 32)
    assert a.images.tobytes() == b.images.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, c.images)
    assert a.images.shape == (100, 3, 32, 32)


def test_class_balance():
    counts = np.bincount(data.generate(0, 103, 4).labels)
    assert sorted(counts.tolist()) == [25, 26, 26, 26]


def test_generate_rejects_bad_arguments():
    with pytest.raises(ValueError):
        data.generate(0, 100, 4, image_size=7)
    with pytest.raises(ValueError):
        data.generate(0, 3, 4)
    with pytest.raises(ValueError):
        data.generate(0, 10, 1)


def test_labels_in_range_and_classes_distinct():
    ds = data.generate(1, 180, 18, 16)
    assert ds.labels.min() >= 0 and ds.labels.max() < 18
    recipes = {data.class_recipe(k) for k in range(18)}
    assert len(recipes) == 18


def test_batches_partition():
    ds = data.generate(0, 10, 2, 8)
    bs = data.batches(ds, 4, seed=3)
    assert [len(y) for _, y in bs] == [4, 4, 2]
    again = data.batches(ds, 4, seed=3)
    for (xa, ya), (xb, yb) in zip(bs, again):
        np.testing.assert_array_equal(xa, xb)
    seen = np.concatenate([x for x, _ in bs])
    assert sorted(map(bytes, seen)) == sorted(map(bytes, ds.images))
    with pytest.raises(ValueError):
        data.batches(ds, 0, seed=0)


def test_split_is_fixed_80_20_and_disjoint():
    ds = data.generate(2, 200, 4, 8)
    tr, te = data.train_test_split(ds)
    assert (len(tr), len(te)) == (160, 40)
    tr2, _ = data.train_test_split(ds)
    np.testing.assert_array_equal(tr.images, tr2.images)


def test_dataset_save_load(tmp_path):
    ds = data.generate(0, 12, 3, 8)
    data.save(ds, tmp_path / "d.swds")
    back = data.load(tmp_path / "d.swds")
    assert back.images.tobytes() == ds.images.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert (back.class_count, back.seed) == (3, 0)


# ---- model --------------------------------------------------------------------


def test_default_split_shapes():
    m = build_toy_resnet(10)
    assert m.split_points == [1, 2, 3]
    assert m.intermediate_shape(1) == (16, 16, 16)
    assert m.intermediate_shape(2) == (16, 8, 8)
    assert m.intermediate_shape(3) == (32, 4, 4)
    assert build_toy_resnet(10, width=64).forward_device(1, np.zeros((3, 32, 32))).shape == (64, 16, 16)


def test_same_seed_same_parameters():
    a, b = build_toy_resnet(5, seed=3), build_toy_resnet(5, seed=3)
    for k, v in a.parameters().items():
        assert v.tobytes() == b.parameters()[k].tobytes()


def test_build_rejects_bad_sizes():
    with pytest.raises(ValueError):
        build_toy_resnet(5, width=3)
    with pytest.raises(ValueError):
        build_toy_resnet(5, block_count=0)


@pytest.mark.parametrize("l", [1, 2, 3])
def test_split_composition_is_bitwise(l):
    m = build_toy_resnet(6, width=8, seed=1)
    x = np.random.default_rng(0).standard_normal((4, 3, 32, 32))
    full = m.forward(x)
    split = m.forward_server(l, m.forward_device(l, x))
    assert full.tobytes() == split.tobytes()
    assert full.shape == (4, 6)


def test_invalid_split_and_shape_mismatch():
    m = build_toy_resnet(4, width=8)
    with pytest.raises(ValueError):
        m.forward_device(9, np.zeros((3, 32, 32)))
    with pytest.raises(ShapeError):
        m.forward_server(1, np.zeros((7, 16, 16)))
    with pytest.raises(ShapeError):
        m.forward_device(1, np.zeros((3, 30, 30)))


def test_server_half_sensitive_to_one_channel():
    m = build_toy_resnet(4, width=8, seed=2)
    h = np.abs(np.random.default_rng(1).standard_normal((8, 16, 16)))
    h2 = h.copy()
    h2[3] += 1.0
    assert not np.array_equal(m.forward_server(1, h), m.forward_server(1, h2))


def test_model_save_load_round_trip(tmp_path):
    m = build_toy_resnet(4, width=8, seed=5)
    model_io.save(m, tmp_path / "m.swml")
    back = model_io.load(tmp_path / "m.swml")
    assert model_io.dumps(back) == model_io.dumps(m)
    x = np.random.default_rng(0).standard_normal((2, 3, 32, 32))
    assert back.forward(x).tobytes() == m.forward(x).tobytes()
