import numpy as np
import pytest

from mmgen.imagecodec import (
    Codebook,
    RasterImage,
    build_codebook,
    decode_grid,
    encode_image,
    extract_patches,
    read_ppm,
    write_ppm,
)
from mmgen.unirep import ImageTokenGrid

P = 8


def random_codebook(size, seed=0, patch=P):
    rng = np.random.default_rng(seed)
    return Codebook(patch, rng.random((size, patch, patch, 3)))


def tile(codebook, rows):
    """Image whose patches are exactly the given codebook entries."""
    return RasterImage(np.concatenate([np.concatenate([codebook.entries[c] for c in row], axis=1) for row in rows]))


def test_black_white_clusters():
    imgs = [RasterImage.solid(16, 16, (0, 0, 0)), RasterImage.solid(16, 16, (1, 1, 1))]
    cb = build_codebook(imgs, 2, P, seed=0)
    means = sorted(float(e.mean()) for e in cb.entries)
    assert means[0] == pytest.approx(0.0, abs=1e-6)
    assert means[1] == pytest.approx(1.0, abs=1e-6)
    for e in cb.entries:
        assert np.ptp(e) < 1e-6


def test_single_entry_is_global_mean():
    rng = np.random.default_rng(1)
    imgs = [RasterImage(rng.random((16, 24, 3))), RasterImage(rng.random((8, 8, 3)))]
    cb = build_codebook(imgs, 1, P, seed=5)
    expected = np.concatenate([extract_patches(im, P) for im in imgs]).mean(axis=0)
    np.testing.assert_allclose(cb.entries[0].reshape(-1), expected, atol=1e-12)


def test_codebook_deterministic():
    rng = np.random.default_rng(2)
    imgs = [RasterImage(rng.random((32, 32, 3))) for _ in range(3)]
    assert build_codebook(imgs, 6, P, seed=11) == build_codebook(imgs, 6, P, seed=11)


def test_codebook_errors():
    with pytest.raises(ValueError):
        build_codebook([RasterImage.solid(8, 8, (0, 0, 0))], 2, P)
    with pytest.raises(ValueError):
        build_codebook([RasterImage.solid(12, 8, (0, 0, 0))], 1, P)


def test_empty_clusters_reseeded():
    # only two distinct patches but four clusters: still four valid entries
    imgs = [RasterImage.solid(16, 16, (0, 0, 0)), RasterImage.solid(16, 16, (1, 0, 0))]
    cb = build_codebook(imgs, 4, P, seed=0)
    assert cb.size == 4
    assert np.all((cb.entries >= 0) & (cb.entries <= 1))


def test_encode_white():
    entries = np.zeros((3, P, P, 3))
    entries[0] = 1.0
    cb = Codebook(P, entries)
    grid = encode_image(RasterImage.solid(16, 16, (1, 1, 1)), cb)
    assert (grid.height, grid.width, grid.codes) == (2, 2, (0, 0, 0, 0))


def test_encode_exact_tiling():
    cb = random_codebook(8)
    img = tile(cb, [[3, 5, 3], [5, 3, 5]])
    assert encode_image(img, cb).codes == (3, 5, 3, 5, 3, 5)


def test_tie_breaks_to_lowest_index():
    entries = np.zeros((3, P, P, 3))
    entries[0] = 0.0
    entries[1] = 0.25
    entries[2] = 0.75
    cb = Codebook(P, entries)
    patch = RasterImage.solid(P, P, (0.5, 0.5, 0.5))
    flat = extract_patches(patch, P)[0]
    d = [float(((flat - e.reshape(-1)) ** 2).sum()) for e in entries]
    assert d[1] == d[2] and d[0] > d[1]  # oracle: equidistant between 1 and 2
    assert encode_image(patch, cb).codes == (1,)


def test_encode_dimension_errors():
    cb = random_codebook(2)
    with pytest.raises(ValueError):
        encode_image(RasterImage.solid(12, 8, (0, 0, 0)), cb)
    with pytest.raises(ValueError):
        encode_image(RasterImage.solid(40, 8, (0, 0, 0)), cb, max_side=4)


def test_decode_fixed_point_and_single():
    cb = random_codebook(8, seed=3)
    img = tile(cb, [[0, 1], [7, 2], [4, 4]])
    assert decode_grid(encode_image(img, cb), cb) == img
    np.testing.assert_array_equal(decode_grid(ImageTokenGrid(1, 1, [6]), cb).pixels, cb.entries[6])
    with pytest.raises(ValueError):
        decode_grid(ImageTokenGrid(1, 1, [8]), cb)


def test_quantization_error_matches_brute_force():
    cb = random_codebook(8, seed=4)
    img = RasterImage(np.random.default_rng(5).random((24, 16, 3)))
    recon = decode_grid(encode_image(img, cb), cb)
    flat_entries = cb.entries.reshape(cb.size, -1)
    for x, y in zip(extract_patches(img, P), extract_patches(recon, P)):
        nearest = min(float(((x - e) ** 2).sum()) for e in flat_entries)
        assert float(((x - y) ** 2).sum()) <= nearest + 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_idempotent_and_optimal(seed):
    rng = np.random.default_rng(seed)
    cb = random_codebook(6, seed=seed + 10)
    img = RasterImage(rng.random((16, 32, 3)))
    grid = encode_image(img, cb)
    assert encode_image(decode_grid(grid, cb), cb) == grid
    flat = cb.entries.reshape(cb.size, -1)
    for x, c in zip(extract_patches(img, P), grid.codes):
        dists = ((flat - x) ** 2).sum(axis=1)
        assert dists[c] == dists.min()


def test_codebook_file_round_trip(tmp_path):
    cb = random_codebook(4)
    cb.save(tmp_path / "cb.npz")
    assert Codebook.load(tmp_path / "cb.npz") == cb


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    px = rng.integers(0, 256, size=(5, 7, 3)) / 255.0
    write_ppm(tmp_path / "a.ppm", RasterImage(px))
    back = read_ppm(tmp_path / "a.ppm")
    assert (back.width, back.height) == (7, 5)
    np.testing.assert_allclose(back.pixels, px, atol=1e-12)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")


def test_ppm_with_comment(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6\n# comment\n1 1\n255\n" + bytes([255, 0, 0]))
    np.testing.assert_array_equal(read_ppm(tmp_path / "c.ppm").pixels, [[[1.0, 0.0, 0.0]]])
