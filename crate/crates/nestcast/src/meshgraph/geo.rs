//! Spherical geometry primitives: unit vectors, lat-lon coordinates,
//! great-circle distances, and lat-lon region boxes.

use serde::{Deserialize, Serialize};

/// Mean Earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// A point on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitVec3 {
    /// Normalize an arbitrary vector onto the unit sphere.
    pub fn normalize(x: f64, y: f64, z: f64) -> Self {
        let n = (x * x + y * y + z * z).sqrt();
        assert!(n > 0.0, "cannot normalize the zero vector");
        UnitVec3 {
            x: x / n,
            y: y / n,
            z: z / n,
        }
    }

    pub fn dot(&self, other: &UnitVec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(&self, other: &UnitVec3) -> (f64, f64, f64) {
        (
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    /// Arc length in radians to another unit vector.
    pub fn arc_to(&self, other: &UnitVec3) -> f64 {
        self.dot(other).clamp(-1.0, 1.0).acos()
    }

    /// Midpoint of the chord, projected back to the sphere.
    pub fn midpoint(&self, other: &UnitVec3) -> UnitVec3 {
        UnitVec3::normalize(self.x + other.x, self.y + other.y, self.z + other.z)
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn to_latlon(&self) -> LatLon {
        let lat = self.z.clamp(-1.0, 1.0).asin().to_degrees();
        // Canonicalize longitude to 0 at the poles where it is undefined.
        let lon = if self.x == 0.0 && self.y == 0.0 {
            0.0
        } else {
            self.y.atan2(self.x).to_degrees()
        };
        LatLon::new(lat, lon)
    }
}

/// Geographic coordinates in degrees, `lat` in [-90, 90], `lon` in [-180, 180).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    /// Construct with longitude wrapped into [-180, 180).
    pub fn new(lat: f64, lon: f64) -> Self {
        assert!((-90.0..=90.0).contains(&lat), "latitude {lat} out of range");
        LatLon {
            lat,
            lon: wrap_lon(lon),
        }
    }

    pub fn to_unit(&self) -> UnitVec3 {
        let lat = self.lat.to_radians();
        let lon = self.lon.to_radians();
        UnitVec3 {
            x: lat.cos() * lon.cos(),
            y: lat.cos() * lon.sin(),
            z: lat.sin(),
        }
    }
}

/// Wrap a longitude in degrees into [-180, 180).
pub fn wrap_lon(lon: f64) -> f64 {
    let mut l = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if l == 180.0 {
        l = -180.0;
    }
    l
}

/// Great-circle distance in kilometers.
pub fn great_circle_km(a: LatLon, b: LatLon) -> f64 {
    if a == b {
        return 0.0;
    }
    a.to_unit().arc_to(&b.to_unit()) * EARTH_RADIUS_KM
}

/// A lat-lon box, possibly crossing the antimeridian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl RegionBox {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Self {
        assert!(lat_min < lat_max, "empty region box: lat_min >= lat_max");
        RegionBox {
            lat_min,
            lat_max,
            lon_min: wrap_lon(lon_min),
            lon_max: wrap_lon(lon_max),
        }
    }

    /// Box membership with longitudinal wraparound: when `lon_min > lon_max`
    /// the box crosses the antimeridian.
    pub fn contains(&self, p: LatLon) -> bool {
        if p.lat < self.lat_min || p.lat > self.lat_max {
            return false;
        }
        let lon = wrap_lon(p.lon);
        if self.lon_min <= self.lon_max {
            lon >= self.lon_min && lon <= self.lon_max
        } else {
            lon >= self.lon_min || lon <= self.lon_max
        }
    }
}
