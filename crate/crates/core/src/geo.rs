//! Great-circle distance, 0.1 degree block indexing and a radius query index.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{CrispError, Result};

/// IUGG mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Default edge length of a spatial holdout block, in degrees.
pub const DEFAULT_CELL_DEG: f64 = 0.1;

/// A latitude/longitude pair in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        let p = Self { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon) {
            Ok(())
        } else {
            Err(CrispError::InvalidCoordinate {
                lat: self.lat,
                lon: self.lon,
            })
        }
    }

    fn unit_vector(&self) -> [f64; 3] {
        let (phi, lambda) = (self.lat.to_radians(), self.lon.to_radians());
        [phi.cos() * lambda.cos(), phi.cos() * lambda.sin(), phi.sin()]
    }
}

/// Haversine distance in meters.
pub fn haversine_m(p: GeoPoint, q: GeoPoint) -> Result<f64> {
    p.validate()?;
    q.validate()?;
    Ok(haversine_unchecked(p, q))
}

pub(crate) fn haversine_unchecked(p: GeoPoint, q: GeoPoint) -> f64 {
    let (phi1, phi2) = (p.lat.to_radians(), q.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (q.lon - p.lon).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// Index of a half-open `cell_deg x cell_deg` block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId {
    pub lat_index: i64,
    pub lon_index: i64,
}

/// `(floor(lat / cell_deg), floor(lon / cell_deg))`.
pub fn block_of(lat: f64, lon: f64, cell_deg: f64) -> Result<BlockId> {
    GeoPoint::new(lat, lon)?;
    if !(cell_deg > 0.0 && cell_deg.is_finite()) {
        return Err(CrispError::InvalidConfig(format!(
            "cell_deg must be positive, got {cell_deg}"
        )));
    }
    Ok(BlockId {
        lat_index: (lat / cell_deg).floor() as i64,
        lon_index: (lon / cell_deg).floor() as i64,
    })
}

/// Answers "is any indexed point within `radius_m` of this query?".
///
/// Points are bucketed on a 3-D grid over their positions on the sphere with
/// cell edge equal to the chord length of `radius_m`, so a query only has to
/// look at the 27 surrounding cells. Candidates are confirmed with the
/// haversine distance.
#[derive(Debug)]
pub struct ProximityIndex {
    points: Vec<GeoPoint>,
    cells: HashMap<[i64; 3], Vec<usize>>,
    cell: f64,
    radius_m: f64,
}

impl ProximityIndex {
    pub fn new(points: Vec<GeoPoint>, radius_m: f64) -> Result<Self> {
        if !(radius_m >= 0.0 && radius_m.is_finite()) {
            return Err(CrispError::InvalidConfig(format!(
                "radius must be nonnegative, got {radius_m}"
            )));
        }
        let half_angle = (radius_m / (2.0 * EARTH_RADIUS_M)).min(std::f64::consts::FRAC_PI_2);
        // Padded so rounding in the chord never pushes a true neighbor two cells away.
        let cell = (2.0 * EARTH_RADIUS_M * half_angle.sin()).max(1.0) * (1.0 + 1e-9);
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            p.validate()?;
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Ok(Self {
            points,
            cells,
            cell,
            radius_m,
        })
    }

    fn key(p: &GeoPoint, cell: f64) -> [i64; 3] {
        let v = p.unit_vector();
        [
            (v[0] * EARTH_RADIUS_M / cell).floor() as i64,
            (v[1] * EARTH_RADIUS_M / cell).floor() as i64,
            (v[2] * EARTH_RADIUS_M / cell).floor() as i64,
        ]
    }

    /// True if some indexed point is within the radius (inclusive).
    pub fn any_within(&self, q: GeoPoint) -> bool {
        let k = Self::key(&q, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        if bucket
                            .iter()
                            .any(|&i| haversine_unchecked(self.points[i], q) <= self.radius_m)
                        {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}
