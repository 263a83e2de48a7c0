import numpy as np
import pytest

from quadrecon.errors import DatasetError
from quadrecon.imageio import (
    linear_to_srgb,
    read_hdr,
    read_image,
    read_mask,
    resize_image,
    srgb_to_linear,
    write_hdr,
    write_image,
    write_mask,
)


class TestTransfer:
    def test_round_trip(self):
        x = np.linspace(0.0, 1.0, 101)
        np.testing.assert_allclose(srgb_to_linear(linear_to_srgb(x)), x, atol=1e-12)

    def test_known_values(self):
        assert linear_to_srgb(0.0) == 0.0
        assert linear_to_srgb(1.0) == pytest.approx(1.0)
        assert srgb_to_linear(0.5) == pytest.approx(0.21404, abs=1e-5)

    def test_clamps(self):
        np.testing.assert_allclose(linear_to_srgb([-1.0, 2.0]), [0.0, 1.0], atol=1e-12)


class TestPngFiles:
    def test_image_round_trip_within_quantization(self, tmp_path, rng):
        image = rng.uniform(size=(6, 5, 3))
        write_image(tmp_path / "a.png", image)
        back = read_image(tmp_path / "a.png")
        assert back.shape == (6, 5, 3)
        np.testing.assert_allclose(linear_to_srgb(back), linear_to_srgb(image), atol=0.5 / 255 + 1e-9)

    def test_mask_is_binarized(self, tmp_path):
        write_mask(tmp_path / "m.png", np.array([[0.0, 0.3], [0.6, 1.0]]))
        np.testing.assert_array_equal(read_mask(tmp_path / "m.png"), [[0.0, 0.0], [1.0, 1.0]])

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError) as exc:
            read_image(tmp_path / "absent.png")
        assert exc.value.path.endswith("absent.png")

    def test_unreadable_file(self, tmp_path):
        (tmp_path / "junk.png").write_bytes(b"not a png")
        with pytest.raises(DatasetError):
            read_mask(tmp_path / "junk.png")


class TestHdr:
    def test_round_trip_in_float32(self, tmp_path, rng):
        image = rng.uniform(0.0, 8.0, size=(4, 7, 3))
        sidecar = write_hdr(tmp_path / "out.hdr", image)
        assert sidecar.name == "out.hdr.json"
        np.testing.assert_array_equal(read_hdr(tmp_path / "out.hdr"), image.astype(np.float32).astype(np.float64))

    def test_planar_layout(self, tmp_path):
        image = np.zeros((2, 2, 3))
        image[:, :, 1] = 1.0
        write_hdr(tmp_path / "out.hdr", image)
        raw = np.fromfile(tmp_path / "out.hdr", dtype="<f4")
        np.testing.assert_array_equal(raw, [0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0])

    def test_grayscale_gets_one_channel(self, tmp_path):
        write_hdr(tmp_path / "depth.hdr", np.ones((3, 2)))
        assert read_hdr(tmp_path / "depth.hdr").shape == (3, 2, 1)

    def test_size_mismatch(self, tmp_path):
        write_hdr(tmp_path / "out.hdr", np.ones((2, 2, 3)))
        (tmp_path / "out.hdr").write_bytes(b"\x00" * 8)
        with pytest.raises(DatasetError):
            read_hdr(tmp_path / "out.hdr")

    def test_missing_header(self, tmp_path):
        np.ones(4, dtype="<f4").tofile(tmp_path / "out.hdr")
        with pytest.raises(DatasetError):
            read_hdr(tmp_path / "out.hdr")


class TestResize:
    def test_identity_returns_input(self):
        image = np.ones((4, 6, 3))
        assert resize_image(image, (6, 4)) is image

    def test_target_shape_and_constant_preserved(self):
        out = resize_image(np.full((32, 16, 3), 0.25), (8, 16))
        assert out.shape == (16, 8, 3)
        np.testing.assert_allclose(out, 0.25)

    def test_single_channel(self):
        assert resize_image(np.ones((10, 10)), (5, 5)).shape == (5, 5)
