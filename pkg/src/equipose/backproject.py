"""Depth-image back-projection to camera-frame point clouds, and the reverse projection.

Pixel convention: (x, y) are zero-based column/row indices taken at pixel
centers. Depths are meters everywhere in memory; file loaders apply a tick
scale on the way in/out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepth, SingularIntrinsics


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    @property
    def k(self) -> np.ndarray:
        return np.array(
            [
                [self.fx, self.skew, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )

    def k_inv(self) -> np.ndarray:
        k = self.k
        if abs(np.linalg.det(k)) <= 1e-12:
            raise SingularIntrinsics(f"intrinsic matrix is singular: det={np.linalg.det(k)}")
        return np.linalg.inv(k)

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            skew=float(d.get("skew", 0.0)),
        )

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "skew": self.skew}

    @classmethod
    def load_json(cls, path) -> "CameraIntrinsics":
        import json

        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save_json(self, path) -> None:
        import json

        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")


@dataclass(frozen=True)
class DepthImage:
    """Depth map in meters, shape (height, width). Zero marks invalid pixels."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError(f"depth data must be 2-D, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("depth data contains non-finite values")
        if np.any(d < 0.0):
            raise ValueError("negative depths are forbidden")
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def valid_mask(self) -> np.ndarray:
        return self.data > 0.0


@dataclass
class PointCloud:
    """Camera-frame points with optional per-point appearance attributes.

    attributes: (N, A) floats, e.g. RGB in [0, 1].
    pixel_origin: (N, 2) integer (x, y) source pixels, when back-projected.
    image_size: (width, height) of the source image, when known.
    """

    points: np.ndarray
    attributes: np.ndarray = None
    pixel_origin: np.ndarray = None
    image_size: tuple = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.points = pts
        n = pts.shape[0]
        if self.attributes is not None:
            a = np.asarray(self.attributes, dtype=np.float64)
            if a.shape[0] != n:
                raise ValueError(f"attributes rows {a.shape[0]} != point count {n}")
            self.attributes = a
        if self.pixel_origin is not None:
            p = np.asarray(self.pixel_origin)
            if p.shape != (n, 2):
                raise ValueError(f"pixel_origin must be ({n}, 2), got {p.shape}")
            self.pixel_origin = p

    def __len__(self) -> int:
        return self.points.shape[0]


def depth_to_cloud(
    depth: DepthImage,
    intrinsics: CameraIntrinsics,
    mask: np.ndarray = None,
    attribute_image: np.ndarray = None,
) -> PointCloud:
    """Back-project valid depth pixels: point = D(x, y) * K^-1 @ [x, y, 1].

    mask optionally restricts to a boolean (H, W) pixel set. attribute_image
    (H, W, A) attaches per-pixel values (e.g. RGB) to the resulting points.
    """
    k_inv = intrinsics.k_inv()
    select = depth.valid_mask
    if mask is not None:
        select = select & np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(select)
    d = depth.data[ys, xs]
    rays = np.column_stack([xs, ys, np.ones_like(d)]) @ k_inv.T
    points = rays * d[:, None]
    attrs = None
    if attribute_image is not None:
        attrs = np.asarray(attribute_image, dtype=np.float64)[ys, xs]
        if attrs.ndim == 1:
            attrs = attrs[:, None]
    return PointCloud(
        points=points.reshape(-1, 3),
        attributes=attrs,
        pixel_origin=np.column_stack([xs, ys]) if len(d) else np.zeros((0, 2), dtype=int),
        image_size=(depth.width, depth.height),
    )


def project_to_pixels(cloud: PointCloud, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Project points to (pixel x, pixel y, depth) rows; requires z > 0."""
    pts = cloud.points
    if np.any(pts[:, 2] <= 0.0):
        raise NonPositiveDepth("all points must have z > 0 to project")
    uvw = pts @ intrinsics.k.T
    return np.column_stack([uvw[:, 0] / uvw[:, 2], uvw[:, 1] / uvw[:, 2], uvw[:, 2]])


def write_pgm_depth(path, depth: DepthImage, ticks_per_meter: float = 10000.0) -> None:
    """Write a binary 16-bit PGM (P5, big-endian samples per the netpbm spec)."""
    ticks = np.round(depth.data * ticks_per_meter)
    if np.any(ticks > 65535):
        raise ValueError("depth exceeds 16-bit range at this tick scale")
    header = f"P5\n{depth.width} {depth.height}\n65535\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(ticks.astype(">u2").tobytes())


def read_pgm_depth(path, ticks_per_meter: float = 10000.0) -> DepthImage:
    with open(path, "rb") as f:
        raw = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    magic, width, height, maxval = fields
    if magic != b"P5":
        raise ValueError(f"not a binary PGM file: magic {magic!r}")
    if int(maxval) != 65535:
        raise ValueError("only 16-bit PGM depth images are supported")
    w, h = int(width), int(height)
    ticks = np.frombuffer(raw, dtype=">u2", count=w * h, offset=pos).reshape(h, w)
    return DepthImage(ticks.astype(np.float64) / ticks_per_meter)


def write_ply_cloud(path, cloud: PointCloud) -> None:
    """ASCII PLY with x,y,z and, when attributes are present, r,g,b floats."""
    has_rgb = cloud.attributes is not None and cloud.attributes.shape[1] >= 3
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float64 x",
        "property float64 y",
        "property float64 z",
    ]
    if has_rgb:
        lines += ["property float64 r", "property float64 g", "property float64 b"]
    lines.append("end_header")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
        for i in range(len(cloud)):
            row = [f"{v:.17g}" for v in cloud.points[i]]
            if has_rgb:
                row += [f"{v:.17g}" for v in cloud.attributes[i, :3]]
            f.write(" ".join(row) + "\n")


def read_ply_cloud(path) -> PointCloud:
    names, rows = _read_ascii_ply(path)
    pts = rows[:, [names.index("x"), names.index("y"), names.index("z")]]
    attrs = None
    if "r" in names:
        attrs = rows[:, [names.index("r"), names.index("g"), names.index("b")]]
    return PointCloud(points=pts, attributes=attrs)


def _read_ascii_ply(path):
    """Parse an ASCII PLY vertex table into (property names, float rows)."""
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError("not a PLY file")
        names = []
        n_vertex = 0
        for line in f:
            tok = line.split()
            if tok[0] == "format" and tok[1] != "ascii":
                raise ValueError("only ASCII PLY is supported")
            elif tok[0] == "element":
                if tok[1] != "vertex":
                    raise ValueError("only vertex-element PLY files are supported")
                n_vertex = int(tok[2])
            elif tok[0] == "property":
                names.append(tok[2])
            elif tok[0] == "end_header":
                break
        rows = np.loadtxt(f, dtype=np.float64, max_rows=n_vertex, ndmin=2)
    if n_vertex and rows.shape != (n_vertex, len(names)):
        raise ValueError("PLY vertex table has unexpected shape")
    if n_vertex == 0:
        rows = np.zeros((0, len(names)))
    return names, rows
