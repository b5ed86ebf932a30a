import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from frontseg.data import (
    DatasetError,
    SynthConfig,
    load_dataset,
    rasterize_front,
    split_counts,
    split_dataset,
    synth_generate,
    synth_sample,
    write_dataset,
)
from frontseg.losses import imbalance_ratio


def test_synth_is_deterministic_and_seed_dependent():
    a = synth_generate(SynthConfig(side=48, seed=3), 3)
    b = synth_generate(SynthConfig(side=48, seed=3), 3)
    for (ia, ma), (ib, mb) in zip(a, b):
        assert ia.pixels.tobytes() == ib.pixels.tobytes() and ma.pixels.tobytes() == mb.pixels.tobytes()
        assert ia.resolution == ib.resolution
    c = synth_sample(SynthConfig(side=48, seed=4), 0)
    assert c[0].pixels.tobytes() != a[0][0].pixels.tobytes()


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(side=16).validate()
    with pytest.raises(ValueError):
        SynthConfig(melange_probability=1.5).validate()
    with pytest.raises(ValueError):
        SynthConfig(resolution_range_m=(30, 10)).validate()
    with pytest.raises(ValueError):
        synth_generate(SynthConfig(), 0)


def _four_neighbours(m):
    p = np.pad(m, 1)
    return p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:]


@pytest.mark.parametrize("seed", range(3))
def test_synth_masks_are_thin_connected_curves(seed):
    for img, mask in synth_generate(SynthConfig(side=96, seed=seed, melange_probability=1.0), 8):
        m = mask.pixels
        assert np.isfinite(img.pixels).all() and img.pixels.min() >= 0 and img.pixels.max() <= 1
        labels, n = ndimage.label(m)  # 4-connectivity
        assert n == 1
        assert m[:, 0].any() and m[:, -1].any()
        assert _four_neighbours(m)[m == 1].max() <= 2
        lo, hi = SynthConfig().resolution_range_m
        assert lo <= img.resolution <= hi


def test_synth_imbalance_at_full_size():
    for _, mask in synth_generate(SynthConfig(side=512, seed=0), 6):
        assert imbalance_ratio(mask.pixels) > 400


def test_synth_front_separates_bright_glacier_from_dark_sea():
    img, mask = synth_sample(SynthConfig(side=128, seed=1, melange_probability=0.0), 0)
    rows = mask.pixels.argmax(axis=0)
    rr = np.arange(128)[:, None]
    assert img.pixels[rr < rows - 3].mean() > 2 * img.pixels[rr > rows + 3].mean()


def test_rasterize_front_vertical_jump_is_bridged():
    m = rasterize_front(np.array([2, 6, 6, 6, 5, 5, 5, 5]), 8)
    assert m[2:7, 1].all() and m[:, 0].sum() == 1 and m[:, 2].sum() == 1 and m[5:7, 4].all()


def test_write_and_load_roundtrip(tmp_path):
    samples = synth_generate(SynthConfig(side=32, seed=0), 3)
    write_dataset(tmp_path, samples, ["train", "val", "test"])
    index = load_dataset(tmp_path)
    assert len(index) == 3 and index.counts() == {"train": 1, "val": 1, "test": 1}
    img, mask = index.load(1)
    np.testing.assert_allclose(img.pixels, samples[1][0].pixels, atol=1 / 65535)
    np.testing.assert_array_equal(mask.pixels, samples[1][1].pixels)
    assert img.resolution == samples[1][0].resolution


def test_load_reports_every_problem(tmp_path):
    samples = synth_generate(SynthConfig(side=32, seed=0), 4)
    index = write_dataset(tmp_path, samples)
    ids = [e.id for e in index.entries]
    Image.fromarray(np.full((32, 32), 37, np.uint8)).save(tmp_path / "masks" / f"{ids[0]}.png")
    Image.fromarray(np.zeros((16, 32), np.uint8)).save(tmp_path / "images" / f"{ids[1]}.png")
    (tmp_path / "masks" / f"{ids[2]}.png").unlink()
    with pytest.raises(DatasetError) as err:
        load_dataset(tmp_path)
    text = str(err.value)
    assert len(err.value.problems) == 3
    assert f"{ids[0]}: non-binary mask" in text
    assert ids[1] in text and "mismatch" in text
    assert ids[2] in text and "missing" in text


def test_load_rejects_duplicates_bad_split_and_empty_mask(tmp_path):
    samples = synth_generate(SynthConfig(side=32, seed=0), 2)
    index = write_dataset(tmp_path, samples)
    lines = (tmp_path / "index.csv").read_text().splitlines()
    lines.append(lines[1].replace(",train", ",holdout"))
    (tmp_path / "index.csv").write_text("\n".join(lines) + "\n")
    Image.fromarray(np.zeros((32, 32), np.uint8)).save(tmp_path / "masks" / f"{index.entries[1].id}.png")
    with pytest.raises(DatasetError) as err:
        load_dataset(tmp_path)
    text = str(err.value)
    assert "duplicate id" in text and "unknown split" in text and "empty mask" in text


def test_load_missing_index(tmp_path):
    with pytest.raises(DatasetError, match="index"):
        load_dataset(tmp_path)


@pytest.mark.parametrize("n,expected", [(244, (144, 50, 50)), (10, (6, 2, 2)), (0, (0, 0, 0)), (1, (1, 0, 0))])
def test_split_counts(n, expected):
    assert split_counts(n) == expected


def test_split_counts_within_one_of_exact():
    for n in range(1, 300):
        exact = np.array([144, 50, 50]) * n / 244
        counts = np.array(split_counts(n))
        assert counts.sum() == n and np.all(np.abs(counts - exact) < 1)


def test_split_dataset_deterministic_and_disjoint(tmp_path):
    index = write_dataset(tmp_path, synth_generate(SynthConfig(side=32, seed=0), 10))
    a, b = split_dataset(index, seed=5), split_dataset(index, seed=5)
    assert [e.split for e in a.entries] == [e.split for e in b.entries]
    assert a.counts() == {"train": 6, "val": 2, "test": 2}
    ids = [set(e.id for e in a.select(s).entries) for s in ("train", "val", "test")]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    with pytest.raises(ValueError):
        a.select("holdout")
