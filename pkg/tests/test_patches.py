"""Patch extraction, normalization, and augmentation geometry.

Oracles here are written independently of the module: normalization from
the stated formulas, extraction by direct slicing, spatial transforms by
per-point coordinate mapping of delta patterns.
"""

import numpy as np
import pytest

from dynaclr.errors import (
    ConfigurationError,
    DegenerateStatisticsError,
    ValidationError,
)
from dynaclr.patches import (
    AugmentationConfig,
    Patch,
    PatchPipeline,
    PatchSpec,
    augment_patch,
    center_crop,
    channel_kind,
    extract_patch,
    normalize_channel,
)

CH = ("phase", "rfp")


def _desk_spec():
    return PatchSpec(final_size=(5, 32, 32), source_crop=(5, 64, 64), channels=CH)


def identity_cfg():
    return AugmentationConfig.identity(CH)


def forced(cfg_kwargs):
    """Identity config with selected transforms forced on."""
    base = identity_cfg().to_dict()
    for stage, params in cfg_kwargs.items():
        base[stage].update(params)
    return AugmentationConfig.from_dict(base)


def random_patch(rng, spec=None, scale=1.0):
    spec = spec or _desk_spec()
    data = rng.normal(0.0, scale, (len(spec.channels),) + spec.source_crop)
    return Patch(data=data.astype(np.float32), key=("A1", 1, 0), valid=True,
                 channels=spec.channels)


# -- normalization --------------------------------------------------------


def test_fluorescence_normalization_formula():
    rng = np.random.default_rng(0)
    vol = rng.gamma(2.0, 5.0, (5, 16, 16))
    out = normalize_channel(vol, "fluorescence")
    median, p99 = np.median(vol), np.percentile(vol, 99)
    np.testing.assert_allclose(out, (vol - median) / (p99 - median),
                               rtol=1e-5, atol=1e-6)
    assert abs(np.median(out)) < 1e-6
    assert abs(np.percentile(out, 99) - 1.0) < 1e-6


def test_fluorescence_fixed_points():
    vol = np.linspace(0.0, 200.0, 4096).reshape(4, 32, 32)
    median, p99 = np.median(vol), np.percentile(vol, 99)
    out = normalize_channel(vol, "fluorescence")
    idx_med = np.unravel_index(np.argmin(np.abs(vol - median)), vol.shape)
    idx_p99 = np.unravel_index(np.argmin(np.abs(vol - p99)), vol.shape)
    assert out[idx_med] == pytest.approx(0.0, abs=1e-3)
    assert out[idx_p99] == pytest.approx(1.0, abs=1e-3)


def test_fluorescence_idempotent():
    rng = np.random.default_rng(1)
    vol = rng.gamma(2.0, 5.0, (5, 16, 16))
    once = normalize_channel(vol, "fluorescence")
    twice = normalize_channel(once, "fluorescence")
    np.testing.assert_allclose(twice, once, atol=1e-6)


def test_phase_normalization_uses_supplied_stats():
    rng = np.random.default_rng(2)
    vol = rng.normal(5.0, 2.0, (5, 8, 8))
    out = normalize_channel(vol, "phase", fov_stats=(5.0, 2.0))
    np.testing.assert_allclose(out, (vol - 5.0) / 2.0, rtol=1e-5, atol=1e-6)
    with pytest.raises(ConfigurationError):
        normalize_channel(vol, "phase")  # stats are mandatory for phase


def test_degenerate_statistics_errors():
    with pytest.raises(DegenerateStatisticsError):
        normalize_channel(np.ones((2, 4, 4)), "fluorescence")
    with pytest.raises(DegenerateStatisticsError):
        normalize_channel(np.ones((2, 4, 4)), "phase", fov_stats=(1.0, 0.0))


def test_channel_kind():
    assert channel_kind("phase") == "phase"
    assert channel_kind("rfp") == "fluorescence"
    assert channel_kind("gfp") == "fluorescence"


# -- extraction -----------------------------------------------------------


def test_extract_patch_matches_manual_slice():
    rng = np.random.default_rng(3)
    vol = rng.normal(size=(2, 5, 80, 90)).astype(np.float32)
    spec = _desk_spec()
    patch = extract_patch(vol, (2.2, 40.6, 45.4), spec)
    assert patch.valid
    # rounded centroid (2, 41, 45); crop start = center - size//2
    manual = vol[:, 0:5, 41 - 32:41 + 32, 45 - 32:45 + 32]
    np.testing.assert_array_equal(patch.data, manual)


def test_extract_patch_boundary_invalid():
    vol = np.zeros((2, 5, 80, 80), dtype=np.float32)
    spec = _desk_spec()
    assert not extract_patch(vol, (2.0, 3.0, 40.0), spec).valid
    assert not extract_patch(vol, (2.0, 40.0, 78.0), spec).valid
    assert not extract_patch(vol, (0.5, 40.0, 40.0), spec).valid  # z off-center
    assert extract_patch(vol, (2.0, 40.0, 40.0), spec).valid


def test_extract_patch_full_scale_margin():
    """3 voxels from the lateral edge cannot supply a full-scale crop."""
    spec = PatchSpec.full_scale()
    assert spec.source_crop[1] >= 240
    vol = np.zeros((2, 15, 256, 256), dtype=np.float32)
    assert not extract_patch(vol, (7.0, 3.0, 128.0), spec).valid
    assert extract_patch(vol, (7.0, 128.0, 128.0), spec).valid


def test_extract_patch_deterministic():
    rng = np.random.default_rng(4)
    vol = rng.normal(size=(2, 5, 80, 80)).astype(np.float32)
    a = extract_patch(vol, (2.0, 40.0, 40.0), _desk_spec())
    b = extract_patch(vol, (2.0, 40.0, 40.0), _desk_spec())
    np.testing.assert_array_equal(a.data, b.data)


def test_patch_spec_margin_invariant():
    with pytest.raises(ConfigurationError):
        PatchSpec(final_size=(5, 32, 32), source_crop=(5, 40, 40),
                  channels=CH).validate(max_scale=0.3)
    # for_final honors the sqrt(2)*(1+max_scale) rule with margin rounding
    assert PatchSpec.for_final((5, 32, 32), CH).source_crop == (5, 64, 64)
    assert PatchSpec.for_final((15, 128, 128), CH).source_crop == (15, 240, 240)
    with pytest.raises(ConfigurationError):
        PatchSpec(final_size=(5, 32, 32), source_crop=(4, 64, 64),
                  channels=CH).validate()


def test_patch_spec_json_round_trip():
    spec = _desk_spec()
    again = PatchSpec.from_dict(spec.to_dict())
    assert again == spec
    with pytest.raises(ConfigurationError):
        PatchSpec.from_dict({"final_size": [5, 32]})


def test_center_crop_offsets():
    data = np.arange(2 * 5 * 8 * 8, dtype=np.float32).reshape(2, 5, 8, 8)
    out = center_crop(data, (5, 4, 4))
    np.testing.assert_array_equal(out, data[:, :, 2:6, 2:6])


# -- augmentation ---------------------------------------------------------


def test_identity_augmentation_equals_center_crop():
    rng = np.random.default_rng(5)
    patch = random_patch(rng)
    out = augment_patch(patch, identity_cfg(), rng_seed=7, spec=_desk_spec())
    np.testing.assert_array_equal(out.data, center_crop(patch.data, (5, 32, 32)))


def test_augmentation_deterministic_per_seed():
    rng = np.random.default_rng(6)
    patch = random_patch(rng)
    cfg = AugmentationConfig()
    a = augment_patch(patch, cfg, rng_seed=42, spec=_desk_spec())
    b = augment_patch(patch, cfg, rng_seed=42, spec=_desk_spec())
    c = augment_patch(patch, cfg, rng_seed=43, spec=_desk_spec())
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_forced_quarter_rotation_matches_rot90():
    """theta=pi/2 on the source then center crop equals a rot90 center crop."""
    rng = np.random.default_rng(7)
    patch = random_patch(rng)
    cfg = forced({"rotation": {"p": 1.0, "theta_z_range": [np.pi / 2, np.pi / 2]}})
    out = augment_patch(patch, cfg, rng_seed=1, spec=_desk_spec())
    candidates = [
        center_crop(np.rot90(patch.data, k, axes=(-2, -1)).copy(), (5, 32, 32))
        for k in (1, 3)
    ]
    err = min(np.abs(out.data - c).max() for c in candidates)
    assert err < 1e-5


def test_rotation_moves_delta_to_predicted_position():
    """Track a single bright voxel through a forced 90-degree rotation."""
    spec = _desk_spec()
    data = np.zeros((2, 5, 64, 64), dtype=np.float32)
    data[:, 2, 31, 40] = 100.0  # lateral offset (-0.5, +8.5) from the 31.5 center
    patch = Patch(data=data, key=("A1", 1, 0), valid=True, channels=CH)
    cfg = forced({"rotation": {"p": 1.0, "theta_z_range": [np.pi / 2, np.pi / 2]}})
    out = augment_patch(patch, cfg, rng_seed=1, spec=spec)
    zi, yi, xi = np.unravel_index(np.argmax(out.data[0]), out.data[0].shape)
    assert zi == 2
    # rotation preserves the radius about the final 15.5 lateral center
    r = np.hypot(yi - 15.5, xi - 15.5)
    assert abs(r - np.hypot(0.5, 8.5)) < 1.0
    # and moves the voxel off its un-rotated center-crop position
    assert (yi, xi) != (15, 24)


def test_overzoom_never_samples_padding():
    """Sentinel voxels outside the source crop can never reach the output.

    The volume is poisoned with a huge sentinel, the patch is cut from the
    interior, and worst-case rotation plus maximum zoom-out is forced. The
    margin invariant says every output sample lands inside the source
    crop, so no output value can carry sentinel-scale magnitude.
    """
    sentinel = 1e9
    vol = np.full((2, 5, 200, 200), sentinel, dtype=np.float32)
    rng = np.random.default_rng(8)
    inner = rng.normal(size=(2, 5, 64, 64)).astype(np.float32)
    vol[:, :, 60:124, 60:124] = inner
    spec = _desk_spec()
    patch = extract_patch(vol, (2.0, 92.0, 92.0), spec)
    np.testing.assert_array_equal(patch.data, inner)

    cfg = forced({
        "rotation": {"p": 1.0, "theta_z_range": [np.pi / 4, np.pi / 4]},
        "spatial_scaling": {"p": 1.0, "alpha_range": [0.3, 0.3]},
        "shearing": {"p": 1.0, "s_range": [0.01, 0.01]},
        "gaussian_smoothing": {"p": 1.0, "sigma_range": [0.75, 0.75]},
    })
    for seed in range(5):
        out = augment_patch(patch, cfg, rng_seed=seed, spec=spec)
        assert np.all(np.isfinite(out.data))
        assert np.abs(out.data).max() < 1e6


def test_spatial_transform_shared_across_channels():
    """A duplicated channel stays identical under spatial-only augmentation."""
    rng = np.random.default_rng(9)
    plane = rng.normal(size=(5, 64, 64)).astype(np.float32)
    data = np.stack([plane, plane])
    patch = Patch(data=data, key=("A1", 1, 0), valid=True, channels=CH)
    cfg = forced({
        "rotation": {"p": 1.0, "theta_z_range": [0.7, 0.7]},
        "spatial_scaling": {"p": 1.0, "alpha_range": [-0.2, -0.2]},
    })
    out = augment_patch(patch, cfg, rng_seed=3, spec=_desk_spec())
    np.testing.assert_array_equal(out.data[0], out.data[1])


def test_intensity_stages_gate_per_channel():
    """With p_phase=0 and p_rfp=1, only the rfp channel changes."""
    rng = np.random.default_rng(10)
    patch = random_patch(rng)
    cfg = forced({
        "intensity_scaling": {"p": {"phase": 0.0, "rfp": 1.0},
                              "alpha_range": [0.5, 0.5]},
    })
    out = augment_patch(patch, cfg, rng_seed=11, spec=_desk_spec())
    ref = center_crop(patch.data, (5, 32, 32))
    np.testing.assert_array_equal(out.data[0], ref[0])
    np.testing.assert_allclose(out.data[1], ref[1] * 1.5, rtol=1e-6)


def test_gamma_is_monotone_and_range_preserving():
    rng = np.random.default_rng(12)
    patch = random_patch(rng)
    cfg = forced({"adjust_contrast": {"p": 1.0, "gamma_range": [1.2, 1.2]}})
    out = augment_patch(patch, cfg, rng_seed=13, spec=_desk_spec())
    ref = center_crop(patch.data, (5, 32, 32))
    for c in range(2):
        flat_in = ref[c].ravel()
        flat_out = out.data[c].ravel()
        order = np.argsort(flat_in, kind="stable")
        assert np.all(np.diff(flat_out[order]) >= -1e-6)
        assert flat_out.min() == pytest.approx(flat_in.min(), abs=1e-5)
        assert flat_out.max() == pytest.approx(flat_in.max(), abs=1e-5)


def test_noise_statistics():
    patch = Patch(data=np.zeros((2, 5, 64, 64), dtype=np.float32),
                  key=("A1", 1, 0), valid=True, channels=CH)
    cfg = forced({
        "gaussian_noise": {"p": 1.0,
                           "sigma_range": {"phase": [0.2, 0.2],
                                           "rfp": [0.5, 0.5]}},
    })
    # pool over seeds: per-channel std must match the drawn sigma
    phase_vals, rfp_vals = [], []
    for seed in range(10):
        out = augment_patch(patch, cfg, rng_seed=seed, spec=_desk_spec())
        phase_vals.append(out.data[0].ravel())
        rfp_vals.append(out.data[1].ravel())
    assert np.std(np.concatenate(phase_vals)) == pytest.approx(0.2, rel=0.05)
    assert np.std(np.concatenate(rfp_vals)) == pytest.approx(0.5, rel=0.05)


def test_smoothing_is_lateral_only():
    """A single z-plane impulse never leaks into neighboring z planes."""
    data = np.zeros((2, 5, 64, 64), dtype=np.float32)
    data[:, 2, 32, 32] = 1.0
    patch = Patch(data=data, key=("A1", 1, 0), valid=True, channels=CH)
    cfg = forced({"gaussian_smoothing": {"p": 1.0,
                                         "sigma_range": [0.75, 0.75]}})
    out = augment_patch(patch, cfg, rng_seed=2, spec=_desk_spec())
    assert out.data[:, 2].max() > 0
    for z in (0, 1, 3, 4):
        np.testing.assert_array_equal(out.data[:, z], 0.0)


def test_augmentation_config_validation():
    cfg = identity_cfg().to_dict()
    cfg["rotation"]["p"] = 1.4
    with pytest.raises(ConfigurationError):
        AugmentationConfig.from_dict(cfg)
    cfg = identity_cfg().to_dict()
    cfg["spatial_scaling"]["alpha_range"] = [0.4, -0.4]
    with pytest.raises(ConfigurationError):
        AugmentationConfig.from_dict(cfg)


def test_augmentation_config_json_round_trip():
    cfg = AugmentationConfig()
    again = AugmentationConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert cfg.max_scale == pytest.approx(0.3)


# -- pipeline -------------------------------------------------------------


def test_pipeline_source_patch_is_normalized(small_handle, small_table,
                                             plain_pipeline):
    node = next(n for n in small_table.nodes if plain_pipeline.node_valid(n))
    patch = plain_pipeline.source_patch(node)
    assert patch.valid
    vol = small_handle.read_volume(node.fov_id, node.t)
    spec = plain_pipeline.spec
    zc, yc, xc = (int(np.floor(c + 0.5)) for c in node.centroid)
    sz, sy, sx = spec.source_crop
    raw = vol[:, zc - sz // 2:zc - sz // 2 + sz,
              yc - sy // 2:yc - sy // 2 + sy,
              xc - sx // 2:xc - sx // 2 + sx]
    mean, std = small_handle.fov_series_stats(node.fov_id, 0)
    np.testing.assert_allclose(patch.data[0], (raw[0] - mean) / std,
                               rtol=1e-5, atol=1e-5)
    median, p99 = small_handle.volume_stats(node.fov_id, node.t, 1)
    np.testing.assert_allclose(patch.data[1], (raw[1] - median) / (p99 - median),
                               rtol=1e-5, atol=1e-5)


def test_pipeline_center_is_final_size(small_table, plain_pipeline):
    node = next(n for n in small_table.nodes if plain_pipeline.node_valid(n))
    patch = plain_pipeline.center(node)
    assert patch.data.shape == (2, 5, 32, 32)
    assert np.all(np.isfinite(patch.data))


def test_pipeline_rejects_mismatched_margin(small_handle):
    tight = PatchSpec(final_size=(5, 32, 32), source_crop=(5, 46, 46),
                      channels=CH)
    with pytest.raises(ConfigurationError):
        PatchPipeline(small_handle, tight, aug=AugmentationConfig())


def test_pipeline_rejects_unknown_channel(small_handle):
    spec = PatchSpec(final_size=(5, 32, 32), source_crop=(5, 64, 64),
                     channels=("phase", "dapi"))
    with pytest.raises(ConfigurationError):
        PatchPipeline(small_handle, spec, aug=None)


def test_pipeline_requires_augmentation_for_augmented(small_table,
                                                      plain_pipeline):
    node = next(n for n in small_table.nodes if plain_pipeline.node_valid(n))
    with pytest.raises(ConfigurationError):
        plain_pipeline.augmented(node, rng_seed=0)


def test_patch_require_valid():
    p = Patch(data=None, key=("A1", 1, 0), valid=False, channels=CH)
    with pytest.raises(ValidationError):
        p.require_valid()
