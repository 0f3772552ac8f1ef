import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rdstn.data import (
    CropTooSmall,
    DatasetSplit,
    EmptyDatasetError,
    PairSampler,
    add_gaussian_noise,
    coord_to_index,
    downsample_bicubic,
    load_image,
    make_coord_grid,
    pair_rng,
    save_image,
    split_dataset,
    synthesize_training_pair,
)

from conftest import shapes_image


# --- oracle: scalar Catmull-Rom evaluation ---------------------------------


def catmull_rom(x: float) -> float:
    x = abs(x)
    if x <= 1:
        return 1.5 * x**3 - 2.5 * x**2 + 1
    if x < 2:
        return -0.5 * x**3 + 2.5 * x**2 - 4 * x + 2
    return 0.0


def mirror(i: int, n: int) -> int:
    while i < 0 or i >= n:
        i = -i - 1 if i < 0 else 2 * n - 1 - i
    return i


def oracle_resample_1d(row, n_out):
    n_in = len(row)
    s = n_in / n_out
    stretch = max(s, 1.0)
    out = []
    for i in range(n_out):
        x = (i + 0.5) * s - 0.5
        num = den = 0.0
        for j in range(math.floor(x - 2 * stretch) - 1, math.ceil(x + 2 * stretch) + 2):
            k = catmull_rom((x - j) / stretch)
            num += k * row[mirror(j, n_in)]
            den += k
        out.append(num / den)
    return out


def oracle_resample(img2d, out_h, out_w):
    rows = [oracle_resample_1d(list(r), out_w) for r in img2d]
    cols = [oracle_resample_1d([rows[y][x] for y in range(len(rows))], out_h) for x in range(out_w)]
    return np.array(cols).T


# --- coordinates ------------------------------------------------------------


def test_coord_grid_single_cell():
    assert make_coord_grid(1, 1, flatten=True).tolist() == [[0.0, 0.0]]


def test_coord_grid_two_by_two():
    g = make_coord_grid(2, 2, dtype=torch.float64)
    assert sorted(set(g[..., 0].flatten().tolist())) == [-0.5, 0.5]
    assert sorted(set(g[..., 1].flatten().tolist())) == [-0.5, 0.5]


def test_coord_grid_three_rows():
    g = make_coord_grid(3, 1, dtype=torch.float64)
    np.testing.assert_allclose(g[:, 0, 0].numpy(), [-2 / 3, 0.0, 2 / 3], atol=1e-15)


@pytest.mark.parametrize("h,w", [(0, 3), (3, 0), (-1, 2)])
def test_coord_grid_rejects_empty(h, w):
    with pytest.raises(ValueError):
        make_coord_grid(h, w)


def test_coord_roundtrip_all_sizes():
    for n in range(1, 1025):
        idx = torch.arange(n)
        c = make_coord_grid(n, 1, dtype=torch.float64)[:, 0, 0]
        np.testing.assert_array_equal(coord_to_index(c, n).numpy(), idx.numpy())
        assert torch.all(c[1:] > c[:-1])
        np.testing.assert_allclose(c.numpy(), -c.flip(0).numpy(), atol=1e-15)


# --- bicubic ----------------------------------------------------------------


def test_bicubic_preserves_constant():
    img = torch.full((1, 37, 23), 0.7, dtype=torch.float64)
    for size in [(10, 9), (37, 23), (80, 41), (5, 60)]:
        out = downsample_bicubic(img, *size)
        assert out.shape == (1, *size)
        np.testing.assert_allclose(out.numpy(), 0.7, atol=1e-12)


def test_bicubic_identity_at_same_size():
    img = torch.rand(1, 17, 11)
    assert torch.equal(downsample_bicubic(img, 17, 11), img)


def test_bicubic_ramp_matches_kernel_oracle():
    ramp = np.tile(np.linspace(0.1, 0.9, 8), (8, 1))
    out = downsample_bicubic(torch.from_numpy(ramp[None]), 4, 4)[0].numpy()
    expected = oracle_resample(ramp, 4, 4)
    assert np.max(np.abs(out - expected)) < 1e-6


def test_bicubic_ramp_is_exact_away_from_borders():
    n = 32
    ramp = np.tile(np.arange(n) / n, (n, 1)) * 0.9 + 0.05
    out = downsample_bicubic(torch.from_numpy(ramp[None]), 16, 16)[0].numpy()
    centers = (np.arange(16) + 0.5) * 2 - 0.5
    analytic = centers / n * 0.9 + 0.05
    interior = slice(3, 13)
    np.testing.assert_allclose(out[:, interior], np.tile(analytic, (16, 1))[:, interior], atol=1e-6)


@pytest.mark.parametrize("size", [(5, 7), (13, 13), (20, 9)])
def test_bicubic_general_sizes_match_oracle(size, rng):
    img = rng.uniform(0.2, 0.8, (11, 10))
    out = downsample_bicubic(torch.from_numpy(img[None]), *size)[0].numpy()
    expected = np.clip(oracle_resample(img, *size), 0, 1)
    np.testing.assert_allclose(out, expected, atol=1e-10)


def test_bicubic_translation_equivariant(rng):
    img = torch.from_numpy(rng.uniform(0, 1, (1, 64, 64)))
    shifted = torch.roll(img, shifts=(4, 6), dims=(1, 2))
    a = downsample_bicubic(img, 32, 32)
    b = downsample_bicubic(shifted, 32, 32)
    np.testing.assert_allclose(b[:, 8:24, 8:24].numpy(), a[:, 6:22, 5:21].numpy(), atol=1e-12)


def test_bicubic_output_is_clamped(rng):
    img = torch.from_numpy((rng.uniform(0, 1, (1, 16, 16)) > 0.5).astype(np.float64))
    out = downsample_bicubic(img, 40, 40)
    assert out.min() >= 0 and out.max() <= 1


def test_bicubic_rejects_bad_size():
    with pytest.raises(ValueError):
        downsample_bicubic(torch.rand(1, 4, 4), 0, 3)


# --- noise ------------------------------------------------------------------


def test_noise_zero_sigma_is_identity(rng):
    img = torch.rand(1, 8, 8)
    assert torch.equal(add_gaussian_noise(img, 0.0, rng), img)


def test_noise_standard_deviation(rng):
    img = torch.full((1, 256, 256), 0.5, dtype=torch.float64)
    out = add_gaussian_noise(img, 0.05, rng)
    assert abs(float((out - img).std()) - 0.05) < 0.005


def test_noise_huge_sigma_stays_in_range(rng):
    out = add_gaussian_noise(torch.full((1, 64, 64), 0.5), 10.0, rng)
    assert out.min() >= 0 and out.max() <= 1
    assert float(((out == 0) | (out == 1)).float().mean()) > 0.9


def test_noise_rejects_negative_sigma(rng):
    with pytest.raises(ValueError):
        add_gaussian_noise(torch.rand(1, 2, 2), -0.1, rng)


# --- training pairs ---------------------------------------------------------


def test_pair_scale_one_is_the_crop(rng):
    hr = shapes_image(64, 0)
    pair = synthesize_training_pair(hr, 48, 2304, 1.0, rng)
    assert pair.hr_side == 48
    assert pair.lr_patch.shape == (1, 48, 48)
    assert pair.query_coords.shape == (2304, 2)
    # every HR pixel is drawn exactly once, so targets are a permutation of the LR patch
    assert torch.equal(pair.targets.flatten().sort().values, pair.lr_patch.flatten().sort().values)


@pytest.mark.parametrize("scale,side", [(2.0, 96), (2.3, 110)])
def test_pair_crop_side(scale, side, rng):
    hr = torch.rand(1, 128, 130)
    pair = synthesize_training_pair(hr, 48, 2304, scale, rng)
    assert pair.hr_side == side
    assert pair.lr_patch.shape == (1, 48, 48)
    assert pair.query_coords.shape == (2304, 2)
    assert pair.query_coords.abs().max() <= 1
    assert len({tuple(c) for c in pair.query_coords.tolist()}) == 2304


def test_pair_targets_match_coordinates(rng):
    hr = torch.rand(1, 40, 40)
    pair = synthesize_training_pair(hr, 10, 50, 3.0, rng)
    # with a 30x30 crop, recover each target by locating its coordinate in the crop
    side = pair.hr_side
    idx_y = coord_to_index(pair.query_coords[:, 0], side)
    idx_x = coord_to_index(pair.query_coords[:, 1], side)
    found = False
    for y0 in range(40 - side + 1):
        for x0 in range(40 - side + 1):
            crop = hr[0, y0 : y0 + side, x0 : x0 + side]
            if torch.equal(crop[idx_y, idx_x], pair.targets[:, 0]):
                found = True
    assert found


def test_pair_scale_grid():
    hr = torch.rand(1, 200, 200)
    for s in np.linspace(1, 4, 100):
        pair = synthesize_training_pair(hr, 48, 64, float(s), pair_rng(0, 0, 0))
        assert pair.hr_side == round(s * 48)
        assert pair.lr_patch.shape[-2:] == (48, 48)


def test_pair_too_small_signals(rng):
    with pytest.raises(CropTooSmall):
        synthesize_training_pair(torch.rand(1, 50, 50), 48, 10, 2.0, rng)


def test_sampler_independent_of_workers():
    images = [shapes_image(64, i) for i in range(3)]
    a = PairSampler(images, 16, 64, 4, 1.0, 4.0, seed=3, workers=0).batch_at(7)
    b = PairSampler(images, 16, 64, 4, 1.0, 4.0, seed=3, workers=3).batch_at(7)
    assert torch.equal(a.lr, b.lr) and torch.equal(a.targets, b.targets)


def test_sampler_retries_small_images():
    images = [torch.rand(1, 20, 20), torch.rand(1, 100, 100)]
    batch = PairSampler(images, 16, 32, 6, 1.0, 4.0, seed=0).batch_at(0)
    assert batch.lr.shape == (6, 1, 16, 16)


# --- splits and I/O ---------------------------------------------------------


def test_split_counts(dataset_dir):
    split = split_dataset(dataset_dir, 0.8, seed=1)
    assert (len(split.train_paths), len(split.test_paths)) == (8, 2)
    assert not set(split.train_paths) & set(split.test_paths)
    assert sorted(split.train_paths + split.test_paths) == sorted(p.name for p in dataset_dir.iterdir())


def test_split_deterministic(dataset_dir):
    assert split_dataset(dataset_dir, 0.8, 5) == split_dataset(dataset_dir, 0.8, 5)
    assert split_dataset(dataset_dir, 0.8, 5).train_paths != split_dataset(dataset_dir, 0.8, 6).train_paths


def test_split_busi_sized(tmp_path):
    root = tmp_path / "busi"
    root.mkdir()
    img = torch.zeros(1, 2, 2)
    for i in range(779):
        save_image(img, root / f"benign ({i}).png")
        if i % 7 == 0:
            save_image(img, root / f"benign ({i})_mask.png")
    split = split_dataset(root, 0.8, 0)
    assert (len(split.train_paths), len(split.test_paths)) == (624, 155)


def test_split_empty_dir(tmp_path):
    with pytest.raises(EmptyDatasetError):
        split_dataset(tmp_path, 0.8, 0)


def test_manifest_roundtrip(dataset_dir, tmp_path):
    split = split_dataset(dataset_dir, 0.8, 2)
    path = tmp_path / "split.json"
    split.save(path)
    obj = json.loads(path.read_text())
    assert set(obj) >= {"seed", "ratio", "train", "test"}
    assert DatasetSplit.load(path) == split


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 300), ratio=st.floats(0.05, 1.0), seed=st.integers(0, 2**31))
def test_split_partition_property(tmp_path_factory, n, ratio, seed):
    # exercises the counting/shuffling logic without touching disk for every n
    from rdstn.data import split_count

    k = split_count(n, ratio)
    assert k == math.ceil(round(ratio * n, 9))
    order = np.random.default_rng(seed).permutation(n)
    assert sorted(order[:k].tolist() + order[k:].tolist()) == list(range(n))


def test_load_8bit_and_16bit(tmp_path):
    from PIL import Image

    a8 = np.array([[0, 128, 255]], dtype=np.uint8)
    Image.fromarray(a8).save(tmp_path / "a.png")
    a16 = np.array([[0, 32768, 65535]], dtype=np.uint16)
    Image.fromarray(a16).save(tmp_path / "b.png")
    rgb = np.zeros((1, 2, 3), dtype=np.uint8)
    rgb[0, 1] = 255
    Image.fromarray(rgb).save(tmp_path / "c.png")
    np.testing.assert_allclose(load_image(tmp_path / "a.png")[0, 0].numpy(), [0, 128 / 255, 1], atol=1e-7)
    np.testing.assert_allclose(load_image(tmp_path / "b.png")[0, 0].numpy(), [0, 32768 / 65535, 1], atol=1e-7)
    assert load_image(tmp_path / "c.png").shape == (1, 1, 2)
    assert load_image(tmp_path / "c.png", channels=3).shape == (3, 1, 2)
    assert load_image(tmp_path / "a.png", channels=3).shape == (3, 1, 3)
