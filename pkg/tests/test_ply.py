import numpy as np
import pytest

from cluttershape.geometry import PointCloud, TriangleMesh
from cluttershape.ply import read_ply_cloud, read_ply_mesh, write_ply


def float32_cloud(seed: int, n: int = 37, labels: bool = False) -> PointCloud:
    rng = np.random.default_rng(seed)
    points = rng.normal(size=(n, 3)).astype(np.float32).astype(np.float64)
    return PointCloud(points, labels=rng.integers(0, 5, size=n) if labels else None)


@pytest.mark.parametrize("binary", [True, False])
def test_cloud_round_trip(tmp_path, binary):
    cloud = float32_cloud(0)
    path = tmp_path / "cloud.ply"
    write_ply(path, cloud, binary=binary)
    back = read_ply_cloud(path)
    assert np.array_equal(back.points, cloud.points)
    assert back.labels is None


@pytest.mark.parametrize("binary", [True, False])
def test_labeled_cloud_round_trip(tmp_path, binary):
    cloud = float32_cloud(1, labels=True)
    path = tmp_path / "cloud.ply"
    write_ply(path, cloud, binary=binary)
    back = read_ply_cloud(path)
    assert np.array_equal(back.points, cloud.points)
    assert np.array_equal(back.labels, cloud.labels)


@pytest.mark.parametrize("binary", [True, False])
def test_mesh_round_trip(tmp_path, binary):
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    mesh = TriangleMesh(verts, np.array([[0, 1, 2], [0, 1, 3]]))
    path = tmp_path / "mesh.ply"
    write_ply(path, mesh, binary=binary)
    back = read_ply_mesh(path)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.triangles, mesh.triangles)


def test_write_quantizes_to_float32(tmp_path):
    exact = np.array([[0.1, 0.2, 0.3]])  # not float32-representable
    path = tmp_path / "q.ply"
    write_ply(path, PointCloud(exact))
    back = read_ply_cloud(path)
    assert np.array_equal(back.points, exact.astype(np.float32).astype(np.float64))


def test_empty_cloud_round_trip(tmp_path):
    path = tmp_path / "empty.ply"
    write_ply(path, PointCloud(np.zeros((0, 3))))
    back = read_ply_cloud(path)
    assert len(back) == 0


def test_rejects_non_ply(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_bytes(b"obj nonsense\n")
    with pytest.raises(ValueError):
        read_ply_cloud(path)


def test_rejects_truncated_header(tmp_path):
    path = tmp_path / "trunc.ply"
    path.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 3\n")
    with pytest.raises(ValueError):
        read_ply_cloud(path)


def test_cloud_reader_requires_mesh_elements(tmp_path):
    path = tmp_path / "cloud.ply"
    write_ply(path, float32_cloud(2))
    with pytest.raises(ValueError):
        read_ply_mesh(path)


def test_write_rejects_other_types(tmp_path):
    with pytest.raises(TypeError):
        write_ply(tmp_path / "x.ply", [1, 2, 3])
