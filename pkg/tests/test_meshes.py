import math

import numpy as np
import pytest

from slicesolver.errors import MeshFormatError, ShapeError
from slicesolver.linalg import make_rng
from slicesolver.meshes import (MeshBatch, concat_meshes, gen_random_sphere_mesh,
                                gen_sphere_mesh, manufactured_field,
                                manufactured_shear, read_mesh, read_mesh_chunks,
                                write_mesh)


class TestSphere:
    def test_areas_sum_to_sphere_area(self):
        mesh = gen_sphere_mesh(1234)
        assert abs(mesh.areas.sum() - 4 * np.pi) <= 1e-12

    def test_closed_surface_identity(self):
        # sum of n dS over a closed surface tends to the zero vector.
        mesh = gen_sphere_mesh(1000)
        resultant = (mesh.normals * mesh.areas[:, None]).sum(axis=0)
        assert np.linalg.norm(resultant) <= 0.2

    def test_closed_surface_identity_rate(self):
        norms = []
        for n in (100, 400, 1600, 6400):
            mesh = gen_sphere_mesh(n)
            norms.append(np.linalg.norm((mesh.normals * mesh.areas[:, None]).sum(axis=0)))
        assert norms[-1] < norms[0]

    def test_normals_are_unit(self):
        mesh = gen_sphere_mesh(512, make_rng(1))
        assert np.abs(np.linalg.norm(mesh.normals, axis=1) - 1.0).max() <= 1e-12

    def test_rotation_preserves_measures(self):
        plain = gen_sphere_mesh(200)
        rot = gen_sphere_mesh(200, make_rng(2))
        assert np.allclose(np.linalg.norm(rot.coords, axis=1), 1.0, atol=1e-12)
        assert np.array_equal(plain.areas, rot.areas)
        assert not np.allclose(plain.coords, rot.coords)

    def test_minimum_size(self):
        with pytest.raises(ValueError):
            gen_sphere_mesh(3)

    def test_random_sphere_uniform(self):
        mesh = gen_random_sphere_mesh(4000, make_rng(3))
        assert np.abs(np.linalg.norm(mesh.coords, axis=1) - 1.0).max() <= 1e-12
        # Octant occupancy close to uniform.
        octant = (mesh.coords > 0).astype(int) @ np.array([1, 2, 4])
        counts = np.bincount(octant, minlength=8)
        assert counts.min() > 4000 / 8 * 0.7


class TestManufacturedFields:
    def test_pointwise_closed_form(self):
        pt = np.array([[0.1, -0.2, 0.3]])
        expect = math.sin(0.3) * math.cos(-0.4) + 0.09
        assert abs(manufactured_field(pt)[0, 0] - expect) <= 1e-15

    def test_reproducible_bit_exact(self):
        coords = gen_sphere_mesh(100, make_rng(4)).coords
        assert np.array_equal(manufactured_field(coords), manufactured_field(coords))

    def test_shear_is_tangential(self):
        mesh = gen_sphere_mesh(300, make_rng(5))
        tau = manufactured_shear(mesh.coords, mesh.normals)
        assert np.abs((tau * mesh.normals).sum(axis=1)).max() <= 1e-12

    def test_requires_three_columns(self):
        with pytest.raises(ShapeError):
            manufactured_field(np.zeros((5, 2)))


class TestMeshBatch:
    def test_validation(self):
        mesh = gen_sphere_mesh(10)
        mesh.validate()
        mesh.normals = mesh.normals * 1.001
        with pytest.raises(ValueError, match="unit"):
            mesh.validate()

    def test_positive_areas(self):
        mesh = gen_sphere_mesh(10)
        mesh.areas = mesh.areas.copy()
        mesh.areas[0] = 0.0
        with pytest.raises(ValueError, match="positive"):
            mesh.validate()

    def test_take_tracks_indices_through_nesting(self):
        mesh = gen_sphere_mesh(20)
        a = mesh.take(np.array([5, 7, 9, 11]))
        b = a.take(np.array([2, 0]))
        assert b.indices.tolist() == [9, 5]
        assert np.array_equal(b.coords[0], mesh.coords[9])


def roundtrip(tmp_path, mesh, name="m.csv"):
    path = tmp_path / name
    write_mesh(path, mesh)
    return read_mesh(path)


class TestMeshIO:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = make_rng(6)
        mesh = gen_sphere_mesh(50, rng)
        mesh.targets = np.concatenate(
            [manufactured_field(mesh.coords),
             manufactured_shear(mesh.coords, mesh.normals)], axis=1)
        back = roundtrip(tmp_path, mesh)
        assert np.array_equal(back.coords, mesh.coords)
        assert np.array_equal(back.normals, mesh.normals)
        assert np.array_equal(back.areas, mesh.areas)
        assert np.array_equal(back.targets, mesh.targets)

    def test_round_trip_coordinates_only(self, tmp_path):
        mesh = MeshBatch(coords=make_rng(7).standard_normal((9, 3)))
        back = roundtrip(tmp_path, mesh)
        assert np.array_equal(back.coords, mesh.coords)
        assert back.normals is None and back.areas is None and back.targets is None

    def test_chunked_reader_matches_whole_read(self, tmp_path):
        mesh = gen_sphere_mesh(100, make_rng(8))
        mesh.targets = manufactured_field(mesh.coords)
        path = tmp_path / "m.csv"
        write_mesh(path, mesh)
        whole = read_mesh(path)
        chunks = list(read_mesh_chunks(path, chunk_size=7))
        assert [c.n for c in chunks] == [7] * 14 + [2]
        cat = concat_meshes(chunks)
        assert np.array_equal(cat.coords, whole.coords)
        assert np.array_equal(cat.targets, whole.targets)

    def test_truncated_row_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x,y,z\n1,2,3\n4,5\n")
        with pytest.raises(MeshFormatError, match="line 3"):
            read_mesh(path)

    def test_unparseable_value_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x,y,z\n1,2,zebra\n")
        with pytest.raises(MeshFormatError, match="line 2"):
            read_mesh(path)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(MeshFormatError, match="line 1"):
            read_mesh(path)

    def test_header_only_file_is_empty_mesh(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("x,y,z,t1\n")
        mesh = read_mesh(path)
        assert mesh.n == 0 and mesh.targets.shape == (0, 1)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "none.csv"
        path.write_text("")
        with pytest.raises(MeshFormatError, match="header"):
            read_mesh(path)

    def test_seventeen_digit_serialization(self, tmp_path):
        coords = np.array([[1 / 3, math.pi, -1e-17]])
        back = roundtrip(tmp_path, MeshBatch(coords=coords))
        assert np.array_equal(back.coords, coords)
