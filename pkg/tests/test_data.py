import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from segadapt.data import (
    ISPRS_CLASSES,
    ISPRS_PALETTE,
    DatasetSchema,
    DomainDataset,
    LabeledPatch,
    SynthConfig,
    class_distribution,
    decode_mask,
    denormalize,
    encode_mask,
    format_distribution,
    ingest,
    load_dataset,
    normalize,
    render_mask,
    save_dataset,
    synth_generate,
    tile,
    untile,
)
from segadapt.errors import DataError, ParameterError, ShapeError

PALETTE = DatasetSchema().palette_array()


def small_cfg(**kw):
    base = dict(n_source_train=6, n_source_test=2, n_target_train=6, n_target_test=2)
    base.update(kw)
    return SynthConfig(**base)


# --- tiling ------------------------------------------------------------------------

def test_exact_division_gives_four_tiles():
    assert len(tile(np.zeros((1, 1024, 1024), np.float32), None, 512)) == 4


@pytest.mark.parametrize("size,expected", [(6000, 121), (2000, 9)])
def test_drop_policy_uses_floor_division(size, expected):
    tiles = tile(np.zeros((1, size, size), np.float32), None, 512, "drop")
    assert len(tiles) == expected == (size // 512) ** 2


def test_reflect_pad_covers_every_pixel_once():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (3, 2000, 2000), dtype=np.uint8)
    mask = rng.integers(0, 6, (2000, 2000), dtype=np.uint8)
    tiles = tile(img, mask, 512, "reflect_pad")
    assert len(tiles) == 16 == math.ceil(2000 / 512) ** 2
    cover = np.zeros((2000, 2000), int)
    for p in tiles:
        _, y, x = p.origin
        cover[y : y + 512, x : x + 512][: 2000 - y, : 2000 - x] += 1
    assert (cover == 1).all()
    back_img, back_mask = untile(tiles, 2000, 2000)
    np.testing.assert_array_equal(back_img, normalize(img))
    np.testing.assert_array_equal(back_mask, mask)


def test_reflect_pad_when_padding_exceeds_image():
    img = np.random.default_rng(1).uniform(-1, 1, (2, 20, 37)).astype(np.float32)
    tiles = tile(img, None, 32, "reflect_pad")
    assert len(tiles) == 2
    back, _ = untile(tiles, 20, 37)
    np.testing.assert_array_equal(back, img)


def test_image_and_mask_share_offsets():
    img = np.arange(64 * 96, dtype=np.float32).reshape(1, 64, 96) / (64 * 96)
    mask = (np.arange(64 * 96) % 5).reshape(64, 96).astype(np.uint8)
    for p in tile(img, mask, 32):
        _, y, x = p.origin
        np.testing.assert_array_equal(p.image[0], img[0, y : y + 32, x : x + 32])
        np.testing.assert_array_equal(p.mask, mask[y : y + 32, x : x + 32])


def test_undersized_image_yields_no_tiles_and_a_warning():
    with pytest.warns(UserWarning, match="smaller than one"):
        assert tile(np.zeros((1, 100, 600), np.float32), None, 512) == []


@pytest.mark.parametrize("size", [8, 24, 100])
def test_invalid_tile_size(size):
    with pytest.raises(ParameterError):
        tile(np.zeros((1, 64, 64), np.float32), None, size)


def test_tile_rejects_mismatched_mask_and_policy():
    with pytest.raises(ShapeError):
        tile(np.zeros((1, 64, 64), np.float32), np.zeros((64, 63)), 32)
    with pytest.raises(ParameterError):
        tile(np.zeros((1, 64, 64), np.float32), None, 32, "wrap")


def test_tile_order_is_row_major():
    origins = [p.origin[1:] for p in tile(np.zeros((1, 64, 96), np.float32), None, 32)]
    assert origins == [(0, 0), (0, 32), (0, 64), (32, 0), (32, 32), (32, 64)]


# --- normalization ---------------------------------------------------------------------

def test_normalization_round_trip():
    x = np.arange(256, dtype=np.uint8)
    n = normalize(x)
    assert n.min() == -1.0 and n.max() == 1.0
    assert np.abs(denormalize(n).astype(int) - x.astype(int)).max() <= 1
    np.testing.assert_array_equal(denormalize(n), x)


# --- palette codec ------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=2, max_dims=2, max_side=20), elements=st.integers(0, 5)))
def test_mask_codec_round_trip(mask):
    np.testing.assert_array_equal(decode_mask(encode_mask(mask, PALETTE), PALETTE), mask)


def test_off_palette_colour_is_reported():
    colour = encode_mask(np.zeros((4, 4), np.uint8), PALETTE)
    colour[1, 2] = (12, 34, 56)
    colour[3, 3] = (12, 34, 56)
    with pytest.raises(DataError, match=r"\(12, 34, 56\) x2"):
        decode_mask(colour, PALETTE)


def test_isprs_palette_is_a_bijection():
    colours = [ISPRS_PALETTE[c] for c in ISPRS_CLASSES]
    assert len(set(colours)) == 6
    decoded = decode_mask(np.array([colours], dtype=np.uint8), PALETTE)
    np.testing.assert_array_equal(decoded[0], np.arange(6))


def test_schema_rejects_duplicate_colours_and_single_class():
    with pytest.raises(ParameterError):
        DatasetSchema(("a", "b"), {"a": (1, 2, 3), "b": (1, 2, 3)})
    with pytest.raises(ParameterError):
        DatasetSchema(("a",), {"a": (1, 2, 3)})


# --- datasets and statistics ---------------------------------------------------------------

def _patch(value, cls, split="train"):
    return LabeledPatch(np.full((3, 16, 16), value, np.float32), np.full((16, 16), cls, np.uint8), ("x", 0, 0), split)


def test_single_class_is_one_hundred_percent():
    d = class_distribution(DomainDataset(DatasetSchema(), [_patch(0, 3)]))
    assert d["tree"] == 100.0
    assert sum(d.values()) == pytest.approx(100.0, abs=1e-6)


def test_two_patches_split_fifty_fifty():
    d = class_distribution(DomainDataset(DatasetSchema(), [_patch(0, 0), _patch(0, 1)]))
    assert d["impervious_surfaces"] == d["building"] == 50.0
    assert "total" in format_distribution(d)


def test_distribution_needs_labels():
    ds = DomainDataset(DatasetSchema(), [_patch(0, 0)]).without_masks()
    with pytest.raises(DataError):
        class_distribution(ds)


def test_dataset_validation():
    with pytest.raises(ShapeError):
        DomainDataset(DatasetSchema(), [_patch(0, 0), LabeledPatch(np.zeros((3, 8, 8), np.float32))])
    with pytest.raises(DataError):
        DomainDataset(DatasetSchema(), [_patch(0, 7)])
    with pytest.raises(ShapeError):
        DomainDataset(DatasetSchema(channels=("R", "G")), [_patch(0, 0)])


def test_splits_partition_patches():
    ds = DomainDataset(DatasetSchema(), [_patch(0, 0, "train"), _patch(0, 1, "test"), _patch(0, 2, "train")])
    assert ds.splits() == ["test", "train"]
    assert len(ds.split("train")) + len(ds.split("test")) == len(ds)


def test_save_load_round_trip(tmp_path):
    bench = synth_generate(small_cfg(), 3)
    save_dataset(bench.source, tmp_path / "src")
    back = load_dataset(tmp_path / "src")
    assert len(back) == len(bench.source)
    assert back.schema.to_dict() == bench.source.schema.to_dict()
    for a, b in zip(bench.source, back):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert a.origin == b.origin and a.split == b.split
    assert back.mask_checksum() == bench.source.mask_checksum()


def test_load_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path)


def test_ingest_with_channel_map(tmp_path):
    rng = np.random.default_rng(5)
    rgbi = rng.integers(0, 256, (80, 64, 4), dtype=np.uint8)
    Image.fromarray(rgbi, mode="RGBA").save(tmp_path / "top.png")
    mask = rng.integers(0, 6, (80, 64), dtype=np.uint8)
    Image.fromarray(encode_mask(mask, PALETTE), mode="RGB").save(tmp_path / "label.png")
    schema = DatasetSchema(channels=("IR", "R", "G"))
    ds = ingest([tmp_path / "top.png"], [tmp_path / "label.png"], schema, tile_size=32, channel_map=[3, 0, 1])
    assert len(ds) == 4
    first = ds[0]
    np.testing.assert_array_equal(denormalize(first.image), rgbi[:32, :32, [3, 0, 1]].transpose(2, 0, 1))
    np.testing.assert_array_equal(first.mask, mask[:32, :32])


def test_ingest_rejects_bad_channel_map(tmp_path):
    Image.fromarray(np.zeros((32, 32, 3), np.uint8)).save(tmp_path / "a.png")
    with pytest.raises(DataError):
        ingest([tmp_path / "a.png"], None, DatasetSchema(), tile_size=32, channel_map=[0, 1])
    with pytest.raises(DataError):
        ingest([tmp_path / "missing.png"], None, DatasetSchema(), tile_size=32)


# --- synthetic benchmark --------------------------------------------------------------------

def test_synth_is_deterministic():
    a, b = synth_generate(small_cfg(), 11), synth_generate(small_cfg(), 11)
    for pa, pb in zip(a.source.patches + a.target.patches, b.source.patches + b.target.patches):
        assert pa.image.tobytes() == pb.image.tobytes()
    assert a.source.mask_checksum() == b.source.mask_checksum()
    assert all(np.array_equal(x, y) for x, y in zip(a.target_labels, b.target_labels))


def test_synth_counts_splits_and_hidden_labels():
    bench = synth_generate(small_cfg(), 0)
    assert len(bench.source.split("train")) == 6 and len(bench.source.split("test")) == 2
    assert not any(p.mask is not None for p in bench.target)
    assert len(bench.target_eval()) == 2 and bench.target_eval().is_labeled
    assert bench.target.schema.channels == ("IR", "R", "G")


def test_null_shift_domains_match_in_channel_means():
    cfg = SynthConfig(n_source_train=60, n_source_test=0, n_target_train=60, n_target_test=0, sensor_shift=False)
    bench = synth_generate(cfg, 2)
    s = bench.source.images().mean(axis=(2, 3))
    t = bench.target.images().mean(axis=(2, 3))
    se = np.sqrt(s.var(axis=0, ddof=1) / len(s) + t.var(axis=0, ddof=1) / len(t))
    assert (np.abs(s.mean(axis=0) - t.mean(axis=0)) < 3 * se).all()


def test_sensor_shift_leaves_masks_untouched():
    plain = synth_generate(small_cfg(sensor_shift=False), 4)
    shifted = synth_generate(small_cfg(sensor_shift=True), 4)
    for a, b in zip(plain.target_labels, shifted.target_labels):
        np.testing.assert_array_equal(a, b)
    gaps = [np.abs(a.image - b.image).mean() for a, b in zip(plain.target, shifted.target)]
    assert min(gaps) > 0.05


def test_sensor_shift_moves_channel_statistics():
    def gap(shift):
        cfg = SynthConfig(n_source_train=30, n_source_test=0, n_target_train=30, n_target_test=0, sensor_shift=shift)
        bench = synth_generate(cfg, 0)
        s = bench.source.images().mean(axis=(0, 2, 3))
        t = bench.target.images().mean(axis=(0, 2, 3))
        return float(np.abs(s - t).mean())

    assert gap(True) > 5 * gap(False)


def test_class_frequencies_match_targets():
    cfg = SynthConfig(n_source_train=120, n_source_test=0, n_target_train=0, n_target_test=0)
    dist = class_distribution(synth_generate(cfg, 1).source)
    for name, target in cfg.frequencies.items():
        assert abs(dist[name] - target) <= 2.0, name


def test_masks_can_be_rebuilt_from_primitives():
    bench, shapes = synth_generate(small_cfg(class_representation_shift=True), 6, return_shapes=True)
    for p, sh in zip(bench.source, shapes["source"]):
        np.testing.assert_array_equal(render_mask(sh, 64), p.mask)
    for m, sh in zip(bench.target_labels, shapes["target"]):
        np.testing.assert_array_equal(render_mask(sh, 64), m)


def test_class_representation_shift_changes_geometry_of_listed_classes():
    cfg = SynthConfig(
        n_source_train=0, n_source_test=0, n_target_train=40, n_target_test=0, sensor_shift=False
    )
    _, plain = synth_generate(cfg, 8, return_shapes=True)
    cfg.class_representation_shift = True
    _, alt = synth_generate(cfg, 8, return_shapes=True)
    kinds = lambda shapes, cls: {s.kind for tile_shapes in shapes["target"] for s in tile_shapes if s.cls == cls}
    lv = ISPRS_CLASSES.index("low_vegetation")
    assert kinds(plain, lv) == {"blob"} and kinds(alt, lv) == {"field"}
    car = ISPRS_CLASSES.index("car")
    assert kinds(plain, car) == kinds(alt, car) == {"rect"}


def test_resolution_shift_blurs_and_records_resolution():
    sharp = synth_generate(small_cfg(sensor_shift=False), 9)
    blurred = synth_generate(small_cfg(sensor_shift=False, resolution_shift=True), 9)
    assert blurred.target.schema.resolution_cm == 9.0

    def edge_energy(ds):
        x = ds.images()
        return float(np.abs(np.diff(x, axis=3)).mean())

    assert edge_energy(blurred.target) < 0.8 * edge_energy(sharp.target)


def test_fewer_classes_are_supported():
    cfg = small_cfg(classes=("impervious_surfaces", "building", "tree", "car"))
    bench = synth_generate(cfg, 0)
    assert bench.source.schema.num_classes == 4
    assert int(bench.source.masks().max()) <= 3


@pytest.mark.parametrize(
    "kw",
    [
        dict(tile_size=40),
        dict(classes=("building", "tree")),
        dict(classes=("impervious_surfaces",)),
        dict(channel_permutation=(0, 0, 1)),
        dict(resolution_factor=0.0),
        dict(n_source_train=-1),
    ],
)
def test_invalid_synth_config(kw):
    with pytest.raises(ParameterError):
        synth_generate(small_cfg(**kw), 0)


def test_quiet_when_tiles_are_whole():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        tile(np.zeros((3, 64, 64), np.float32), None, 64)
