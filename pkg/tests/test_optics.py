import math

import numpy as np
import pytest

from deepz.evalsuite import FWHM_FACTOR, fit_lateral
from deepz.optics import GridSpec, NoiseModel, PsfModel, SampleField, render_plane, render_stack

GRID = GridSpec(96, 96, 0.325)


def single_emitter(z_um=0.0, radius=0.02, brightness=1.0, grid=GRID):
    x = grid.width / 2 * grid.pixel_size_um
    return SampleField(np.array([[x, x, z_um, brightness, radius]]), extent_um=grid.extent_um, seed=3)


class TestRenderPlane:
    def test_in_focus_fwhm_matches_closed_form(self):
        psf = PsfModel(sigma0_um=0.4, ring_amplitude=0.15)
        img = render_plane(single_emitter(0.0), psf, 0.0, GRID)
        fit = fit_lateral(img, (47.5, 47.5), pixel_size_um=GRID.pixel_size_um)
        expected = FWHM_FACTOR * 0.4
        assert fit.fwhm_lateral_um == pytest.approx(expected, rel=0.01)

    def test_axial_asymmetry_changes_image(self):
        psf = PsfModel(asymmetry=0.25)
        plus = render_plane(single_emitter(0.0), psf, +3.0, GRID)
        minus = render_plane(single_emitter(0.0), psf, -3.0, GRID)
        assert np.max(np.abs(plus - minus)) > 0

    def test_energy_conserved_across_defocus(self):
        psf = PsfModel(sigma0_um=0.4, asymmetry=0.25, ring_amplitude=0.2)
        ref = render_plane(single_emitter(0.0), psf, 0.0, GRID).sum()
        for zf in (-4.0, -1.5, 2.0, 5.0):
            total = render_plane(single_emitter(0.0), psf, zf, GRID).sum()
            assert total == pytest.approx(ref, rel=0.01)

    def test_empty_sample_is_background(self):
        sample = SampleField(np.zeros((0, 5)), extent_um=GRID.extent_um)
        img = render_plane(sample, PsfModel(), 0.0, GRID)
        assert img.shape == (96, 96)
        assert np.all(img == 0)

    def test_noise_is_seeded_and_reproducible(self):
        noise = NoiseModel(photon_scale=500.0, read_sigma=0.01, background=0.05)
        a = render_plane(single_emitter(), PsfModel(), 0.0, GRID, noise=noise)
        b = render_plane(single_emitter(), PsfModel(), 0.0, GRID, noise=noise)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, render_plane(single_emitter(), PsfModel(), 0.0, GRID))


class TestRenderStack:
    def test_41_plane_convention(self):
        stack = render_stack(single_emitter(), PsfModel(), (-10.0, 10.0), 0.5, GRID)
        assert stack.nz == 41
        assert stack.z_of(0) == -10.0
        assert stack.z_of(40) == 10.0

    def test_degenerate_range_is_single_plane(self):
        stack = render_stack(single_emitter(), PsfModel(), (0.0, 0.0), 0.5, GRID)
        assert stack.nz == 1
        direct = render_plane(single_emitter(), PsfModel(), 0.0, GRID)
        assert np.allclose(stack.planes[0], direct.astype(np.float32))

    def test_peak_plane_matches_emitter_depth(self):
        sample = single_emitter(z_um=2.5)
        stack = render_stack(sample, PsfModel(), (-5.0, 5.0), 0.5, GRID)
        peaks = stack.planes.max(axis=(1, 2))
        best = int(peaks.argmax())
        assert stack.z_of(best) == pytest.approx(2.5, abs=0.25)

    def test_noiseless_renders_bit_identical(self):
        a = render_stack(single_emitter(), PsfModel(), (-2.0, 2.0), 1.0, GRID)
        b = render_stack(single_emitter(), PsfModel(), (-2.0, 2.0), 1.0, GRID)
        assert np.array_equal(a.planes, b.planes)


class TestPsfProperties:
    def test_fwhm_monotone_in_defocus(self):
        psf = PsfModel(sigma0_um=0.4, asymmetry=0.25, ring_amplitude=0.0)
        big = GridSpec(160, 160, 0.325)
        widths = []
        for dz in np.arange(0.0, 10.1, 1.0):
            img = render_plane(single_emitter(z_um=dz, grid=big), psf, 0.0, big)
            fit = fit_lateral(img, (79.5, 79.5), pixel_size_um=0.325)
            widths.append(fit.fwhm_lateral_um)
        diffs = np.diff(widths)
        assert np.all(diffs > -1e-3)

    def test_fwhm_asymmetric_between_sides(self):
        psf = PsfModel(sigma0_um=0.4, asymmetry=0.25, ring_amplitude=0.0)
        for dz in (2.0, 3.0, 4.0):
            up = render_plane(single_emitter(z_um=+dz), psf, 0.0, GRID)
            down = render_plane(single_emitter(z_um=-dz), psf, 0.0, GRID)
            w_up = fit_lateral(up, (47.5, 47.5)).fwhm_lateral_um
            w_down = fit_lateral(down, (47.5, 47.5)).fwhm_lateral_um
            assert abs(w_up - w_down) > 0.1  # well above fit noise

    def test_width_law(self):
        psf = PsfModel(sigma0_um=0.4, rayleigh_um=1.5, asymmetry=0.25)
        dz = 3.0
        up = psf.width(dz)
        down = psf.width(-dz)
        assert up == pytest.approx(0.4 * math.sqrt(1 + (dz / 1.5 * 1.25) ** 2))
        assert down == pytest.approx(0.4 * math.sqrt(1 + (dz / 1.5 * 0.75) ** 2))
        assert psf.width(0.0) == pytest.approx(0.4)

    def test_ring_only_on_positive_side(self):
        psf = PsfModel(ring_amplitude=0.3)
        assert psf.ring_strength(2.0) > 0
        assert psf.ring_strength(-2.0) == 0
        assert psf.ring_strength(0.0) == 0


class TestSampleValidation:
    def test_negative_brightness_rejected(self):
        with pytest.raises(ValueError):
            SampleField(np.array([[1.0, 1.0, 0.0, -1.0, 0.1]]))

    def test_zero_radius_rejected(self):
        with pytest.raises(ValueError):
            SampleField(np.array([[1.0, 1.0, 0.0, 1.0, 0.0]]))
