//! Analytic-surface shape families used as a desk-scale classification set.

use std::f64::consts::{PI, TAU};
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};

const TORUS_MAJOR: f64 = 0.7;
const TORUS_MINOR: f64 = 0.3;
const ELLIPSOID_AXES: [f64; 3] = [1.0, 0.6, 0.4];
const HELIX_RADIUS: f64 = 0.8;
const HELIX_TURNS: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Pyramid,
    Ellipsoid,
    Helix,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 8] = [
        ShapeFamily::Sphere,
        ShapeFamily::Cube,
        ShapeFamily::Cylinder,
        ShapeFamily::Cone,
        ShapeFamily::Torus,
        ShapeFamily::Pyramid,
        ShapeFamily::Ellipsoid,
        ShapeFamily::Helix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Cube => "cube",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Cone => "cone",
            ShapeFamily::Torus => "torus",
            ShapeFamily::Pyramid => "pyramid",
            ShapeFamily::Ellipsoid => "ellipsoid",
            ShapeFamily::Helix => "helix",
        }
    }

    /// Draws a point on the canonical (untransformed) surface.
    fn sample(self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        match self {
            ShapeFamily::Sphere => unit_sphere(rng),
            ShapeFamily::Ellipsoid => {
                let [x, y, z] = unit_sphere(rng);
                [x * ELLIPSOID_AXES[0], y * ELLIPSOID_AXES[1], z * ELLIPSOID_AXES[2]]
            }
            ShapeFamily::Cube => {
                let face = rng.random_range(0..6);
                let u = rng.random_range(-1.0..1.0);
                let v = rng.random_range(-1.0..1.0);
                let s = if face % 2 == 0 { 1.0 } else { -1.0 };
                match face / 2 {
                    0 => [s, u, v],
                    1 => [u, s, v],
                    _ => [u, v, s],
                }
            }
            ShapeFamily::Cylinder => {
                // lateral area 4π vs two caps of π each
                let t = rng.random_range(0.0..6.0 * PI);
                if t < 4.0 * PI {
                    let a = rng.random_range(0.0..TAU);
                    [a.cos(), a.sin(), rng.random_range(-1.0..1.0)]
                } else {
                    let [x, y] = unit_disc(rng);
                    let z = if t < 5.0 * PI { 1.0 } else { -1.0 };
                    [x, y, z]
                }
            }
            ShapeFamily::Cone => {
                // apex (0,0,1), base radius 1 at z = -1; slant area π√5 vs base π
                let slant = 5f64.sqrt();
                if rng.random_range(0.0..slant + 1.0) < slant {
                    // radius grows linearly from the apex, so area density ∝ r
                    let r = rng.random::<f64>().sqrt();
                    let a = rng.random_range(0.0..TAU);
                    [r * a.cos(), r * a.sin(), 1.0 - 2.0 * r]
                } else {
                    let [x, y] = unit_disc(rng);
                    [x, y, -1.0]
                }
            }
            ShapeFamily::Torus => loop {
                // rejection sampling for uniform area density
                let u = rng.random_range(0.0..TAU);
                let v = rng.random_range(0.0..TAU);
                let w = rng.random_range(0.0..1.0);
                if w <= (TORUS_MAJOR + TORUS_MINOR * v.cos()) / (TORUS_MAJOR + TORUS_MINOR) {
                    let ring = TORUS_MAJOR + TORUS_MINOR * v.cos();
                    break [ring * u.cos(), ring * u.sin(), TORUS_MINOR * v.sin()];
                }
            },
            ShapeFamily::Pyramid => {
                // four triangular faces plus the square base at z = -1
                let face_area = 5f64.sqrt() * 2.0 / 2.0;
                let pick = rng.random_range(0.0..4.0 * face_area + 4.0);
                if pick >= 4.0 * face_area {
                    [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -1.0]
                } else {
                    let face = (pick / face_area) as usize;
                    let h = rng.random::<f64>().sqrt();
                    let half = h;
                    let t = rng.random_range(-half..=half);
                    let z = 1.0 - 2.0 * h;
                    match face {
                        0 => [half, t, z],
                        1 => [-half, t, z],
                        2 => [t, half, z],
                        _ => [t, -half, z],
                    }
                }
            }
            ShapeFamily::Helix => {
                let s = rng.random_range(-1.0..1.0);
                let a = s * PI * HELIX_TURNS;
                [HELIX_RADIUS * a.cos(), HELIX_RADIUS * a.sin(), s]
            }
        }
    }

    /// Zero exactly on the canonical surface; grows with distance from it.
    pub fn surface_residual(self, p: [f64; 3]) -> f64 {
        let [x, y, z] = p;
        let r = (x * x + y * y).sqrt();
        match self {
            ShapeFamily::Sphere => ((x * x + y * y + z * z).sqrt() - 1.0).abs(),
            ShapeFamily::Ellipsoid => {
                let [a, b, c] = ELLIPSOID_AXES;
                (((x / a).powi(2) + (y / b).powi(2) + (z / c).powi(2)).sqrt() - 1.0).abs()
            }
            ShapeFamily::Cube => (x.abs().max(y.abs()).max(z.abs()) - 1.0).abs(),
            ShapeFamily::Cylinder => {
                let lateral = if z.abs() <= 1.0 { (r - 1.0).abs() } else { f64::INFINITY };
                let cap = if r <= 1.0 { (z.abs() - 1.0).abs() } else { f64::INFINITY };
                lateral.min(cap)
            }
            ShapeFamily::Cone => {
                let lateral = if (-1.0..=1.0).contains(&z) {
                    (r - (1.0 - z) / 2.0).abs()
                } else {
                    f64::INFINITY
                };
                let base = if r <= 1.0 { (z + 1.0).abs() } else { f64::INFINITY };
                lateral.min(base)
            }
            ShapeFamily::Torus => (((r - TORUS_MAJOR).powi(2) + z * z).sqrt() - TORUS_MINOR).abs(),
            ShapeFamily::Pyramid => {
                let lateral = if (-1.0..=1.0).contains(&z) {
                    (x.abs().max(y.abs()) - (1.0 - z) / 2.0).abs()
                } else {
                    f64::INFINITY
                };
                let base = if x.abs() <= 1.0 && y.abs() <= 1.0 {
                    (z + 1.0).abs()
                } else {
                    f64::INFINITY
                };
                lateral.min(base)
            }
            ShapeFamily::Helix => {
                let a = z * PI * HELIX_TURNS;
                let dx = x - HELIX_RADIUS * a.cos();
                let dy = y - HELIX_RADIUS * a.sin();
                (dx * dx + dy * dy).sqrt()
            }
        }
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config(format!("unknown shape family '{s}'")))
    }
}

fn unit_sphere(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let x: f64 = StandardNormal.sample(rng);
        let y: f64 = StandardNormal.sample(rng);
        let z: f64 = StandardNormal.sample(rng);
        let n = (x * x + y * y + z * z).sqrt();
        if n > 1e-12 {
            return [x / n, y / n, z / n];
        }
    }
}

fn unit_disc(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let r = rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..TAU);
    [r * a.cos(), r * a.sin()]
}

/// Configuration of the synthetic shape dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Ordered class names; labels follow this order.
    pub class_catalog: Vec<String>,
    pub points_per_cloud: usize,
    pub noise_sigma: f64,
    /// Per-instance anisotropic scale jitter: each axis is scaled by a factor
    /// drawn uniformly from `[1 - v, 1 + v]`.
    pub shape_variation: f64,
    /// Random rotation about the vertical axis per instance.
    pub random_yaw: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            class_catalog: ShapeFamily::ALL.iter().map(|f| f.name().to_string()).collect(),
            points_per_cloud: 256,
            noise_sigma: 0.02,
            shape_variation: 0.25,
            random_yaw: true,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn families(&self) -> Result<Vec<ShapeFamily>> {
        if self.class_catalog.is_empty() {
            return Err(Error::config("class catalog is empty"));
        }
        let mut out = Vec::with_capacity(self.class_catalog.len());
        for name in &self.class_catalog {
            let f: ShapeFamily = name.parse()?;
            if out.contains(&f) {
                return Err(Error::config(format!("duplicate class '{name}'")));
            }
            out.push(f);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.families()?;
        if self.points_per_cloud == 0 {
            return Err(Error::config("points_per_cloud must be >= 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.shape_variation) {
            return Err(Error::config("shape_variation must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One generated sample: its family, the transform applied to the canonical
/// surface, and the resulting cloud.
#[derive(Clone, Debug)]
pub struct ShapeInstance {
    pub family: ShapeFamily,
    pub scale: [f64; 3],
    pub yaw: f64,
    pub cloud: PointCloud,
}

impl ShapeInstance {
    /// Maps a world-space point back to the canonical frame and measures its
    /// residual against the family's surface.
    pub fn surface_residual(&self, p: [f64; 3]) -> f64 {
        let (s, c) = self.yaw.sin_cos();
        // inverse yaw
        let x = c * p[0] + s * p[1];
        let y = -s * p[0] + c * p[1];
        let q = [x / self.scale[0], y / self.scale[1], p[2] / self.scale[2]];
        self.family.surface_residual(q)
    }
}

/// Generates `samples_per_class` instances of every catalog family, in
/// catalog order.
pub fn generate_instances(spec: &SyntheticSpec, samples_per_class: usize) -> Result<Vec<ShapeInstance>> {
    spec.validate()?;
    if samples_per_class == 0 {
        return Err(Error::config("samples_per_class must be >= 1"));
    }
    let families = spec.families()?;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let mut out = Vec::with_capacity(families.len() * samples_per_class);
    for (label, &family) in families.iter().enumerate() {
        for i in 0..samples_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream((label * samples_per_class + i) as u64);
            let v = spec.shape_variation;
            let scale = [0, 1, 2].map(|_| if v > 0.0 { rng.random_range(1.0 - v..=1.0 + v) } else { 1.0 });
            let yaw = if spec.random_yaw { rng.random_range(0.0..TAU) } else { 0.0 };
            let (sy, cy) = yaw.sin_cos();
            let mut points = Array2::zeros((spec.points_per_cloud, 3));
            for mut row in points.rows_mut() {
                let [x, y, z] = family.sample(&mut rng);
                let (x, y, z) = (x * scale[0], y * scale[1], z * scale[2]);
                let p = [cy * x - sy * y, sy * x + cy * y, z];
                for d in 0..3 {
                    row[d] = p[d] + if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                }
            }
            let id = format!("{}_{:05}", family.name(), i);
            out.push(ShapeInstance {
                family,
                scale,
                yaw,
                cloud: PointCloud {
                    points,
                    label: Some(label),
                    id,
                },
            });
        }
    }
    Ok(out)
}

pub fn generate_dataset(spec: &SyntheticSpec, samples_per_class: usize) -> Result<Vec<PointCloud>> {
    Ok(generate_instances(spec, samples_per_class)?
        .into_iter()
        .map(|i| i.cloud)
        .collect())
}
