"""Survey records, design matrices, prediction grids and their file formats.

Input is one CSV row per survey-location-time with columns
``id,lon,lat,t,n_tested,n_positive,<covariate...>`` (or ``x_km,y_km`` for
pre-projected coordinates). Loading validates counts, projects lon/lat to
planar km, and keeps covariates by name. Prediction grids are built from a
bounding box plus resolution or read from a CSV of cell centers, optionally
masked by a GeoJSON region polygon.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
import shapely
import shapely.geometry

from .errors import (
    AgeOrderError,
    InvalidCountError,
    MissingColumnError,
    NonNumericCellError,
    PoleProximityError,
    ValidationError,
)

EARTH_RADIUS_KM = 6371.0

RESERVED_COLUMNS = ("id", "lon", "lat", "x_km", "y_km", "t", "n_tested", "n_positive")


@dataclass(frozen=True)
class SurveyRecord:
    """One prevalence survey at a location and time."""

    id: str
    x: float
    y: float
    t: float
    n_tested: int
    n_positive: int
    covariates: dict

    def __post_init__(self):
        if self.n_tested < 1:
            raise InvalidCountError(f"record {self.id}: n_tested must be >= 1, got {self.n_tested}")
        if not (0 <= self.n_positive <= self.n_tested):
            raise InvalidCountError(
                f"record {self.id}: need 0 <= n_positive <= n_tested, "
                f"got y={self.n_positive}, n={self.n_tested}")
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.t)):
            raise ValidationError(f"record {self.id}: non-finite coordinates")


@dataclass(frozen=True)
class SurveyDataset:
    """Validated collection of survey records with shared covariate names."""

    records: list
    design_columns: tuple
    region_bbox: tuple  # (xmin, ymin, xmax, ymax) in km

    def __post_init__(self):
        for r in self.records:
            if tuple(sorted(r.covariates)) != tuple(sorted(self.design_columns)):
                raise ValidationError(f"record {r.id}: covariate names differ from dataset columns")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def coords(self) -> np.ndarray:
        """(n, 3) array of (x, y, t)."""
        return np.array([[r.x, r.y, r.t] for r in self.records], dtype=float)

    @property
    def y(self) -> np.ndarray:
        return np.array([r.n_positive for r in self.records], dtype=float)

    @property
    def n(self) -> np.ndarray:
        return np.array([r.n_tested for r in self.records], dtype=float)

    def covariate(self, name: str) -> np.ndarray:
        if name not in self.design_columns:
            raise MissingColumnError(f"unknown covariate {name!r}")
        return np.array([r.covariates[name] for r in self.records], dtype=float)

    def n_distinct_locations(self) -> int:
        return len({(r.x, r.y) for r in self.records})


def _parse_float(value: str, row_label: str, column: str) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise NonNumericCellError(f"row {row_label}: column {column!r} has non-numeric value {value!r}")
    if not math.isfinite(out):
        raise NonNumericCellError(f"row {row_label}: column {column!r} is not finite")
    return out


def _parse_count(value: str, row_label: str, column: str) -> int:
    out = _parse_float(value, row_label, column)
    if out != int(out):
        raise NonNumericCellError(f"row {row_label}: column {column!r} must be an integer, got {value!r}")
    return int(out)


def project_lonlat(points, ref_lat: float):
    """Equirectangular projection of (lon, lat) degrees to planar km.

    x = R cos(ref_lat) dlon, y = R dlat, with R = 6371 km and offsets taken
    from the centroid of ``points``. Adequate for regions a few hundred km
    across; distances distort near the poles, so |lat| >= 89 is rejected.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if np.any(np.abs(pts[:, 1]) >= 89.0) or abs(ref_lat) >= 89.0:
        raise PoleProximityError("projection undefined within 1 degree of the poles")
    lon0, lat0 = pts.mean(axis=0)
    x = EARTH_RADIUS_KM * math.cos(math.radians(ref_lat)) * np.radians(pts[:, 0] - lon0)
    y = EARTH_RADIUS_KM * np.radians(pts[:, 1] - lat0)
    return np.column_stack([x, y])


def haversine_km(lon1, lat1, lon2, lat2) -> float:
    """Great-circle distance in km (used as the projection oracle)."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dlat = p2 - p1
    dlon = math.radians(lon2 - lon1)
    a = math.sin(dlat / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(math.sqrt(a))


def build_age_splines(a: float, A: float, knot_a: float = 5.0, knot_A: float = 20.0):
    """Linear-spline covariates (a, (a-knot_a)+, A, (A-knot_A)+) for an age range."""
    if a > A:
        raise AgeOrderError(f"minimum age {a} exceeds maximum age {A}")
    if a < 0:
        raise ValidationError(f"ages must be non-negative, got a={a}")
    return (float(a), max(float(a) - knot_a, 0.0), float(A), max(float(A) - knot_A, 0.0))


def load_surveys(path, schema: dict | None = None) -> SurveyDataset:
    """Read a survey CSV into a validated SurveyDataset.

    ``schema`` maps canonical column names (id, lon, lat / x_km, y_km, t,
    n_tested, n_positive) to the file's header names; unmapped extra columns
    become covariates. lon/lat input is projected to km about its centroid.
    """
    schema = dict(schema or {})
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file")
        rows = list(reader)

    col_of = {name: schema.get(name, name) for name in RESERVED_COLUMNS}
    index = {name: header.index(col) for name, col in col_of.items() if col in header}
    for required in ("id", "t", "n_tested", "n_positive"):
        if required not in index:
            raise MissingColumnError(f"{path}: required column {col_of[required]!r} not found")
    lonlat = "lon" in index and "lat" in index
    planar = "x_km" in index and "y_km" in index
    if not (lonlat or planar):
        raise MissingColumnError(f"{path}: need either lon/lat or x_km/y_km columns")

    mapped = set(index.values())
    covariate_cols = [(i, name) for i, name in enumerate(header) if i not in mapped]

    ids, ts, ns, ys, covs = [], [], [], [], []
    raw_xy = []
    for k, row in enumerate(rows):
        label = f"{k + 2}"  # 1-based file line, after the header
        if len(row) != len(header):
            raise ValidationError(f"row {label}: expected {len(header)} cells, got {len(row)}")
        rid = row[index["id"]]
        y = _parse_count(row[index["n_positive"]], label, col_of["n_positive"])
        n = _parse_count(row[index["n_tested"]], label, col_of["n_tested"])
        if n < 1 or y < 0 or y > n:
            raise InvalidCountError(f"row {label} (id {rid}): invalid counts y={y}, n={n}")
        if planar:
            raw_xy.append((_parse_float(row[index["x_km"]], label, col_of["x_km"]),
                           _parse_float(row[index["y_km"]], label, col_of["y_km"])))
        else:
            raw_xy.append((_parse_float(row[index["lon"]], label, col_of["lon"]),
                           _parse_float(row[index["lat"]], label, col_of["lat"])))
        ids.append(rid)
        ts.append(_parse_float(row[index["t"]], label, col_of["t"]))
        ns.append(n)
        ys.append(y)
        covs.append({name: _parse_float(row[i], label, name) for i, name in covariate_cols})

    if not ids:
        raise ValidationError(f"{path}: no data rows")
    xy = np.asarray(raw_xy, dtype=float)
    if lonlat and not planar:
        xy = project_lonlat(xy, ref_lat=float(np.mean(xy[:, 1])))

    records = [SurveyRecord(id=ids[k], x=float(xy[k, 0]), y=float(xy[k, 1]), t=ts[k],
                            n_tested=ns[k], n_positive=ys[k], covariates=covs[k])
               for k in range(len(ids))]
    bbox = (float(xy[:, 0].min()), float(xy[:, 1].min()),
            float(xy[:, 0].max()), float(xy[:, 1].max()))
    return SurveyDataset(records=records,
                         design_columns=tuple(name for _, name in covariate_cols),
                         region_bbox=bbox)


def save_surveys(dataset: SurveyDataset, path) -> None:
    """Write a dataset to CSV in canonical (byte-stable) form."""
    header = ["id", "x_km", "y_km", "t", "n_tested", "n_positive", *dataset.design_columns]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in dataset.records:
            writer.writerow([r.id, repr(r.x), repr(r.y), repr(r.t), r.n_tested, r.n_positive,
                             *[repr(float(r.covariates[c])) for c in dataset.design_columns]])


# --- design matrices ---------------------------------------------------------

@dataclass(frozen=True)
class DesignMatrix:
    """Regression design with an explicit column recipe.

    column_spec rows are (source, transform) where transform is one of
    "intercept", "linear" or "hinge:<knot>"; the recipe lets prediction code
    rebuild the same columns at grid locations from target covariate values.
    """

    rows: np.ndarray
    column_spec: tuple

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim != 2:
            raise ValidationError("design rows must be 2-d")
        if not np.all(rows[:, 0] == 1.0):
            raise ValidationError("first design column must be the intercept")
        if not np.all(np.isfinite(rows)):
            raise ValidationError("design matrix contains non-finite entries")
        object.__setattr__(self, "rows", rows)

    @property
    def p(self) -> int:
        return self.rows.shape[1]

    def spec_as_json(self) -> list:
        return [[src, tr] for src, tr in self.column_spec]


def _apply_transform(values: np.ndarray, transform: str) -> np.ndarray:
    if transform == "linear":
        return values
    if transform.startswith("hinge:"):
        knot = float(transform.split(":", 1)[1])
        return np.maximum(values - knot, 0.0)
    raise ValidationError(f"unknown design transform {transform!r}")


def design_from_columns(values: dict, terms, n_rows: int) -> DesignMatrix:
    """Assemble a DesignMatrix from named value arrays and term specs.

    ``terms`` is a sequence of either ``name`` (linear) or ``(name,
    transform)`` entries; an intercept column is always prepended.
    """
    spec = [("1", "intercept")]
    cols = [np.ones(n_rows)]
    for term in terms:
        if isinstance(term, str):
            name, transform = term, "linear"
        else:
            name, transform = term
        if name not in values:
            raise MissingColumnError(f"design term {name!r} not among covariates")
        vals = np.asarray(values[name], dtype=float)
        cols.append(_apply_transform(vals, transform))
        spec.append((name, transform))
    return DesignMatrix(rows=np.column_stack(cols), column_spec=tuple(spec))


def build_design(dataset: SurveyDataset, terms) -> DesignMatrix:
    """DesignMatrix for the dataset's records (intercept always included)."""
    values = {name: dataset.covariate(name) for name in dataset.design_columns}
    return build_design_from_values(values, terms, len(dataset))


def build_design_from_values(values: dict, terms, n_rows: int) -> DesignMatrix:
    return design_from_columns(values, terms, n_rows)


def age_spline_terms(min_age_col: str = "age_lo", max_age_col: str = "age_hi",
                     knot_min: float = 5.0, knot_max: float = 20.0):
    """Design terms reproducing the hinge basis of build_age_splines."""
    return [
        (min_age_col, "linear"),
        (min_age_col, f"hinge:{knot_min:g}"),
        (max_age_col, "linear"),
        (max_age_col, f"hinge:{knot_max:g}"),
    ]


# --- prediction grids and regions -------------------------------------------

@dataclass(frozen=True)
class PredictionGrid:
    """Raster (or free-form) set of prediction cells and target times."""

    cell_centers: np.ndarray  # (n_cells, 2) km
    cell_area: float          # km^2
    times: tuple
    mask: np.ndarray          # bool per cell, True = inside region
    raster: dict | None = None  # {"nx", "ny", "x0", "y0", "dx", "dy"} if regular

    def __post_init__(self):
        centers = np.asarray(self.cell_centers, dtype=float).reshape(-1, 2)
        mask = np.asarray(self.mask, dtype=bool).reshape(-1)
        if self.cell_area <= 0:
            raise ValidationError("cell_area must be > 0")
        if mask.shape[0] != centers.shape[0]:
            raise ValidationError("mask length must equal number of cells")
        if int(mask.sum()) < 1:
            raise ValidationError("no grid cells fall inside the region")
        if len(self.times) < 1:
            raise ValidationError("at least one prediction time required")
        object.__setattr__(self, "cell_centers", centers)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))

    @property
    def n_cells(self) -> int:
        return self.cell_centers.shape[0]

    @property
    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def active_centers(self) -> np.ndarray:
        return self.cell_centers[self.mask]

    def to_dict(self) -> dict:
        return {
            "cell_area": self.cell_area,
            "times": list(self.times),
            "raster": self.raster,
            "cell_centers": [[float(x), float(y)] for x, y in self.cell_centers],
            "mask": [int(m) for m in self.mask],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionGrid":
        return cls(cell_centers=np.asarray(d["cell_centers"], dtype=float),
                   cell_area=float(d["cell_area"]), times=tuple(d["times"]),
                   mask=np.asarray(d["mask"], dtype=bool), raster=d.get("raster"))


def grid_from_bbox(bbox, resolution_km: float, times, region=None) -> PredictionGrid:
    """Regular grid of cell centers covering bbox = (xmin, ymin, xmax, ymax)."""
    xmin, ymin, xmax, ymax = (float(b) for b in bbox)
    if not (xmax > xmin and ymax > ymin and resolution_km > 0):
        raise ValidationError("degenerate bounding box or non-positive resolution")
    nx = max(int(math.ceil((xmax - xmin) / resolution_km)), 1)
    ny = max(int(math.ceil((ymax - ymin) / resolution_km)), 1)
    xs = xmin + (np.arange(nx) + 0.5) * resolution_km
    ys = ymin + (np.arange(ny) + 0.5) * resolution_km
    gx, gy = np.meshgrid(xs, ys)  # row-major: y varies by row
    centers = np.column_stack([gx.ravel(), gy.ravel()])
    mask = mask_by_region(centers, region) if region is not None else np.ones(centers.shape[0], bool)
    raster = {"nx": nx, "ny": ny, "x0": float(xs[0]), "y0": float(ys[0]),
              "dx": float(resolution_km), "dy": float(resolution_km)}
    return PredictionGrid(cell_centers=centers, cell_area=resolution_km ** 2,
                          times=times, mask=mask, raster=raster)


def grid_from_csv(path, cell_area: float, times, region=None) -> PredictionGrid:
    """Grid from a CSV of cell centers with columns x_km,y_km."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        try:
            ix, iy = header.index("x_km"), header.index("y_km")
        except ValueError:
            raise MissingColumnError(f"{path}: grid CSV needs x_km,y_km columns")
        centers = np.array([[float(row[ix]), float(row[iy])] for row in reader], dtype=float)
    mask = mask_by_region(centers, region) if region is not None else np.ones(centers.shape[0], bool)
    return PredictionGrid(cell_centers=centers, cell_area=cell_area, times=times, mask=mask)


def load_region_polygons(path) -> dict:
    """Named shapely geometries from a GeoJSON file (km coordinates).

    Returns {name: geometry}; features are named by their "id"/"name"
    property, falling back to feature order.
    """
    with open(path) as fh:
        gj = json.load(fh)
    if gj.get("type") == "FeatureCollection":
        features = gj["features"]
    elif gj.get("type") == "Feature":
        features = [gj]
    else:
        features = [{"type": "Feature", "properties": {}, "geometry": gj}]
    out = {}
    for k, feat in enumerate(features):
        props = feat.get("properties") or {}
        name = str(props.get("id", props.get("name", f"region_{k}")))
        out[name] = shapely.geometry.shape(feat["geometry"])
    if not out:
        raise ValidationError(f"{path}: no polygon features found")
    return out


def mask_by_region(centers: np.ndarray, region) -> np.ndarray:
    """Boolean mask of which cell centers lie in the region geometry."""
    pts = shapely.points(np.asarray(centers, dtype=float))
    return shapely.covers(region, pts)
