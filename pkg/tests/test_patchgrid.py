import itertools
import json

import numpy as np
import pytest
import torch

from latent_ofer.encoder import AttentionMap
from latent_ofer.errors import DataError, DimensionMismatchError
from latent_ofer.patchgrid import (
    FILL_VALUE,
    OcclusionMask,
    PatchGrid,
    fill_patches,
    grad_occlusion,
    load_image,
    mask_to_pixels,
    occlude,
    occluded_count,
    partition,
    random_sampling_occlusion,
    reassemble,
    save_image,
    synth_occlude,
    to_image,
    to_tensor,
    top_patches,
)


def test_partition_224_gives_196_patches(rng):
    grid = partition(rng.random((224, 224, 3)), 16)
    assert len(grid) == 196
    assert grid.shape == (14, 14)
    assert grid.patches.shape == (196, 16, 16, 3)


def test_single_patch_equals_image(rng):
    image = rng.random((16, 16, 3))
    grid = partition(image, 16)
    assert len(grid) == 1
    np.testing.assert_array_equal(grid.patches[0], image)


def test_round_trip_is_exact(rng):
    image = rng.random((32, 48, 3)).astype(np.float32)
    grid = partition(image, 16)
    assert grid.shape == (2, 3)
    np.testing.assert_array_equal(reassemble(grid), image)


def test_raster_order(rng):
    image = rng.random((32, 32, 1))
    grid = partition(image, 16)
    np.testing.assert_array_equal(grid.patches[1], image[:16, 16:])
    np.testing.assert_array_equal(grid.patches[2], image[16:, :16])


def test_partition_rejects_unaligned_image(rng):
    with pytest.raises(DimensionMismatchError):
        partition(rng.random((30, 32, 3)), 16)


def test_partition_rejects_out_of_range_values():
    with pytest.raises(ValueError):
        partition(np.full((16, 16, 3), 1.5), 16)


def test_reassemble_zeroed_patch(rng):
    image = rng.random((32, 32, 3))
    grid = partition(image, 16)
    patches = grid.patches.copy()
    patches[3] = 0.0
    out = reassemble(PatchGrid(patches, 2, 2, 16))
    assert (out[16:, 16:] == 0).all()
    np.testing.assert_array_equal(out[:16], image[:16])


def test_only_identity_permutation_reassembles_original(rng):
    image = rng.random((32, 32, 3))
    grid = partition(image, 16)
    matches = []
    for perm in itertools.permutations(range(4)):
        out = reassemble(PatchGrid(grid.patches[list(perm)], 2, 2, 16))
        matches.append(np.array_equal(out, image))
    assert sum(matches) == 1
    assert matches[0]


def test_patch_grid_checks_count(rng):
    with pytest.raises(DimensionMismatchError):
        PatchGrid(rng.random((3, 16, 16, 3)), 2, 2, 16)


@pytest.mark.parametrize("proportion,expected", [(0.0, 0), (0.25, 49), (0.5, 98), (1.0, 196), (0.1, 20)])
def test_occluded_count(proportion, expected):
    assert occluded_count(proportion, 196) == expected


def test_occluded_count_rounds_half_up():
    assert occluded_count(0.125, 4) == 1
    assert occluded_count(0.375, 4) == 2


def test_random_sampling_proportion_zero_and_one(rng):
    image = rng.random((64, 64, 3))
    out, mask = random_sampling_occlusion(image, 0.0, seed=1)
    np.testing.assert_array_equal(out, image)
    assert not mask.flags.any()

    out, mask = random_sampling_occlusion(image, 1.0, seed=1)
    assert mask.flags.all()
    assert (out == FILL_VALUE).all()


def test_random_sampling_quarter_of_196(rng):
    image = rng.random((224, 224, 3))
    out, mask = random_sampling_occlusion(image, 0.25, seed=5)
    assert mask.flags.sum() == 49
    assert mask.proportion == pytest.approx(49 / 196)
    grid = partition(out, 16)
    original = partition(image, 16)
    for i in range(196):
        if mask.flags[i]:
            assert (grid.patches[i] == FILL_VALUE).all()
        else:
            np.testing.assert_array_equal(grid.patches[i], original.patches[i])


def test_random_sampling_is_seeded(rng):
    image = rng.random((64, 64, 3))
    _, a = random_sampling_occlusion(image, 0.4, seed=9)
    _, b = random_sampling_occlusion(image, 0.4, seed=9)
    _, c = random_sampling_occlusion(image, 0.4, seed=10)
    np.testing.assert_array_equal(a.flags, b.flags)
    assert a.flags.sum() == c.flags.sum()


def test_random_sampling_rejects_bad_proportion(rng):
    with pytest.raises(ValueError):
        random_sampling_occlusion(rng.random((32, 32, 3)), 1.5, seed=0)


def test_top_patches_ties_go_to_lower_index():
    np.testing.assert_array_equal(top_patches(np.full(6, 1 / 6), 3), [0, 1, 2])
    np.testing.assert_array_equal(top_patches([0.1, 0.3, 0.3, 0.3], 2), [1, 2])


def test_grad_occlusion_uniform_attention_is_prefix(rng):
    image = rng.random((64, 64, 3))
    _, mask = grad_occlusion(image, 0.25, AttentionMap.uniform(4, 4))
    np.testing.assert_array_equal(mask.indices, [0, 1, 2, 3])


def test_grad_occlusion_peaked_attention(rng):
    image = rng.random((64, 64, 3))
    weights = np.full(16, 0.01)
    weights[11] = 1.0
    attention = AttentionMap.from_scores(weights, 4, 4)
    _, mask = grad_occlusion(image, 1 / 16, attention)
    np.testing.assert_array_equal(mask.indices, [11])


def test_grad_occlusion_matches_sort_oracle(rng):
    image = rng.random((64, 64, 3))
    weights = rng.random(16)
    _, mask = grad_occlusion(image, 0.5, AttentionMap.from_scores(weights, 4, 4))
    expected = sorted(range(16), key=lambda i: -weights[i])[:8]
    assert set(mask.indices) == set(expected)


def test_grad_occlusion_grid_mismatch(rng):
    with pytest.raises(DimensionMismatchError):
        grad_occlusion(rng.random((64, 64, 3)), 0.5, AttentionMap.uniform(2, 2))


def test_synth_occlude_transparent_occluder(rng):
    image = rng.random((32, 32, 3))
    occluder = np.zeros((12, 12, 4))
    out, mask = synth_occlude(image, occluder, (3, 5))
    np.testing.assert_array_equal(out, image)
    assert not mask.flags.any()


def test_synth_occlude_one_full_patch(rng):
    image = rng.random((48, 48, 3))
    occluder = np.ones((16, 16, 4))
    out, mask = synth_occlude(image, occluder, (16, 16))
    np.testing.assert_array_equal(mask.indices, [4])
    assert (out[16:32, 16:32] == 1.0).all()


def test_synth_occlude_coverage_oracle(rng):
    image = rng.random((64, 64, 3))
    occluder = np.ones((24, 24, 4))
    _, mask = synth_occlude(image, occluder, (16, 16))

    covered = np.zeros((64, 64), dtype=bool)
    covered[16:40, 16:40] = True
    expected = []
    for r in range(4):
        for c in range(4):
            fraction = covered[r * 16:(r + 1) * 16, c * 16:(c + 1) * 16].mean()
            expected.append(fraction > 0.25)
    np.testing.assert_array_equal(mask.flags, expected)
    # 24x24 from a patch corner: full patch, two half patches and a quarter patch (not above 25%)
    np.testing.assert_array_equal(mask.indices, [5, 6, 9])


def test_synth_occlude_changes_only_alpha_region(rng):
    image = rng.random((32, 32, 3))
    occluder = np.concatenate([rng.random((10, 10, 3)), np.full((10, 10, 1), 0.5)], axis=-1)
    out, _ = synth_occlude(image, occluder, (4, 4))
    outside = np.ones((32, 32), dtype=bool)
    outside[4:14, 4:14] = False
    np.testing.assert_array_equal(out[outside], image[outside])


def test_synth_occlude_out_of_bounds(rng):
    with pytest.raises(ValueError):
        synth_occlude(rng.random((32, 32, 3)), np.ones((16, 16, 4)), (20, 0))


def test_occlude_dispatch(rng):
    image = rng.random((32, 32, 3))
    out, mask = occlude(image, "random", 0.5, seed=2)
    assert mask.flags.sum() == 2
    with pytest.raises(ValueError):
        occlude(image, "grad", 0.5)
    with pytest.raises(ValueError):
        occlude(image, "sideways", 0.5)


def test_fill_patches_checks_mask_shape(rng):
    with pytest.raises(DimensionMismatchError):
        fill_patches(rng.random((32, 32, 3)), OcclusionMask.empty(3, 3), 16)


def test_mask_json_layout(tmp_path):
    mask = OcclusionMask([True, False, False, True], 2, 2)
    path = tmp_path / "masks" / "m.json"
    mask.save(str(path))
    assert json.loads(path.read_text()) == {"rows": 2, "cols": 2, "flags": [1, 0, 0, 1]}
    loaded = OcclusionMask.load(str(path))
    np.testing.assert_array_equal(loaded.flags, mask.flags)
    assert loaded.proportion == 0.5


def test_mask_load_missing(tmp_path):
    with pytest.raises(DataError) as excinfo:
        OcclusionMask.load(str(tmp_path / "absent.json"))
    assert excinfo.value.code == "missing-file"


def test_mask_to_pixels():
    flags = torch.tensor([[True, False, False, True]])
    pixels = mask_to_pixels(flags, 2, 2, 4)
    assert pixels.shape == (1, 1, 8, 8)
    assert pixels[0, 0, :4, :4].all()
    assert not pixels[0, 0, :4, 4:].any()
    assert pixels[0, 0, 4:, 4:].all()


def test_tensor_conversion(rng):
    image = rng.random((16, 32, 3)).astype(np.float32)
    tensor = to_tensor(image)
    assert tensor.shape == (1, 3, 16, 32)
    np.testing.assert_array_equal(to_image(tensor), image)


def test_png_io(tmp_path, rng):
    image = np.round(rng.random((16, 16, 3)) * 255) / 255
    path = str(tmp_path / "img" / "x.png")
    save_image(image, path)
    np.testing.assert_allclose(load_image(path), image, atol=1e-6)


def test_load_image_errors(tmp_path):
    with pytest.raises(DataError) as excinfo:
        load_image(str(tmp_path / "nope.png"))
    assert excinfo.value.code == "missing-file"

    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(DataError) as excinfo:
        load_image(str(bad))
    assert excinfo.value.code == "unreadable-image"
