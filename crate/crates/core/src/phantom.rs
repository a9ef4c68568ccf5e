//! Procedural phantoms and threshold segmentation into bone/water density maps.
//!
//! Phantom intensities are a mono-energetic CT surrogate: water-equivalent
//! density at 70 keV, so water reads 1000 and a bone of density `d` reads
//! `d · φ_bone(70)/φ_water(70)`.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::MaterialImage;
use crate::spectral::MassAttenuationTable;

pub const REFERENCE_ENERGY_KEV: f64 = 70.0;
const SUPERSAMPLE: usize = 4;

/// Intensity of unit-density bone relative to unit-density water at the
/// reference energy.
pub fn bone_intensity_ratio() -> f64 {
    MassAttenuationTable::cortical_bone().eval(REFERENCE_ENERGY_KEV)
        / MassAttenuationTable::water().eval(REFERENCE_ENERGY_KEV)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeMaterial {
    Water,
    Bone,
}

/// Axis lengths and centre in mm; `angle` in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
    pub material: ShapeMaterial,
    /// Physical density of the material, mg/cm³.
    pub density: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.to_radians().sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn intensity(&self) -> f64 {
        match self.material {
            ShapeMaterial::Water => self.density,
            ShapeMaterial::Bone => self.density * bone_intensity_ratio(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub name: String,
    /// Mono-energetic surrogate image, row 0 at the top.
    pub intensity: Array2<f64>,
    pub provenance: String,
    /// Shapes painted in order; later shapes overwrite earlier ones.
    pub shapes: Vec<Ellipse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorsoParams {
    pub body_a: (f64, f64),
    pub body_b: (f64, f64),
    pub n_inserts: (usize, usize),
    pub insert_density: (f64, f64),
    pub insert_axis: (f64, f64),
    pub n_organs: (usize, usize),
    pub organ_density: (f64, f64),
    pub organ_axis: (f64, f64),
}

impl Default for TorsoParams {
    fn default() -> Self {
        TorsoParams {
            body_a: (95.0, 120.0),
            body_b: (70.0, 95.0),
            n_inserts: (1, 4),
            insert_density: (800.0, 2000.0),
            insert_axis: (6.0, 22.0),
            n_organs: (0, 3),
            organ_density: (950.0, 1040.0),
            organ_axis: (15.0, 40.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhantomKind {
    DiskSet { disks: Vec<Ellipse> },
    EllipseTorso(TorsoParams),
    ResolutionBars { bar_widths: Vec<f64>, bone_density: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub size: usize,
    /// mm
    pub pitch: f64,
}

pub fn make_phantom(kind: &PhantomKind, grid: Grid, seed: u64) -> Result<Phantom> {
    if grid.size == 0 || !(grid.pitch > 0.0) {
        return Err(Error::param("phantom grid must be non-empty"));
    }
    let (name, shapes) = match kind {
        PhantomKind::DiskSet { disks } => {
            for d in disks {
                if !(d.a > 0.0 && d.b > 0.0 && d.density >= 0.0) {
                    return Err(Error::param("disk axes must be positive and density non-negative"));
                }
            }
            ("disk_set".to_string(), disks.clone())
        }
        PhantomKind::EllipseTorso(p) => (format!("ellipse_torso_{seed}"), torso_shapes(p, seed)?),
        PhantomKind::ResolutionBars { bar_widths, bone_density } => {
            if bar_widths.iter().any(|w| !(*w > 0.0)) || !(*bone_density > 0.0) {
                return Err(Error::param("bar widths and density must be positive"));
            }
            ("resolution_bars".to_string(), bar_shapes(bar_widths, *bone_density))
        }
    };
    Ok(Phantom {
        name,
        intensity: render(&shapes, grid),
        provenance: format!("procedural seed={seed}"),
        shapes,
    })
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

fn torso_shapes(p: &TorsoParams, seed: u64) -> Result<Vec<Ellipse>> {
    let ranges = [p.body_a, p.body_b, p.insert_density, p.insert_axis, p.organ_density, p.organ_axis];
    if ranges.iter().any(|r| r.0 > r.1 || r.0 <= 0.0) {
        return Err(Error::param("torso ranges must be positive and ordered"));
    }
    if p.n_inserts.0 > p.n_inserts.1 || p.n_organs.0 > p.n_organs.1 {
        return Err(Error::param("count ranges must be ordered"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = Ellipse {
        cx: uniform(&mut rng, (-5.0, 5.0)),
        cy: uniform(&mut rng, (-5.0, 5.0)),
        a: uniform(&mut rng, p.body_a),
        b: uniform(&mut rng, p.body_b),
        angle: uniform(&mut rng, (-15.0, 15.0)),
        material: ShapeMaterial::Water,
        density: 1000.0,
    };
    let inside = |rng: &mut ChaCha8Rng, body: &Ellipse, margin: f64| -> (f64, f64) {
        let r = margin * rng.random::<f64>().sqrt();
        let th = rng.random_range(0.0..std::f64::consts::TAU);
        let (u, v) = (r * body.a * th.cos(), r * body.b * th.sin());
        let (s, c) = body.angle.to_radians().sin_cos();
        (body.cx + u * c - v * s, body.cy + u * s + v * c)
    };
    let mut shapes = vec![body.clone()];
    let n_organs = rng.random_range(p.n_organs.0..=p.n_organs.1);
    for _ in 0..n_organs {
        let (cx, cy) = inside(&mut rng, &body, 0.5);
        shapes.push(Ellipse {
            cx,
            cy,
            a: uniform(&mut rng, p.organ_axis),
            b: uniform(&mut rng, p.organ_axis),
            angle: uniform(&mut rng, (0.0, 180.0)),
            material: ShapeMaterial::Water,
            density: uniform(&mut rng, p.organ_density),
        });
    }
    let n_inserts = rng.random_range(p.n_inserts.0..=p.n_inserts.1);
    for _ in 0..n_inserts {
        let (cx, cy) = inside(&mut rng, &body, 0.65);
        shapes.push(Ellipse {
            cx,
            cy,
            a: uniform(&mut rng, p.insert_axis),
            b: uniform(&mut rng, p.insert_axis),
            angle: uniform(&mut rng, (0.0, 180.0)),
            material: ShapeMaterial::Bone,
            density: uniform(&mut rng, p.insert_density),
        });
    }
    Ok(shapes)
}

fn bar_shapes(widths: &[f64], bone_density: f64) -> Vec<Ellipse> {
    let mut shapes = vec![Ellipse {
        cx: 0.0,
        cy: 0.0,
        a: 110.0,
        b: 110.0,
        angle: 0.0,
        material: ShapeMaterial::Water,
        density: 1000.0,
    }];
    // each group: three bars of width w separated by w, stacked vertically
    let mut y = -60.0;
    for &w in widths {
        for i in 0..3 {
            shapes.push(Ellipse {
                // long thin ellipses approximate bars
                cx: -40.0 + (2 * i) as f64 * w * 1.0,
                cy: y,
                a: w / 2.0,
                b: 12.0,
                angle: 0.0,
                material: ShapeMaterial::Bone,
                density: bone_density,
            });
        }
        y += 30.0;
    }
    shapes
}

fn render(shapes: &[Ellipse], grid: Grid) -> Array2<f64> {
    let n = grid.size;
    let half = (n as f64 - 1.0) / 2.0;
    let ss = SUPERSAMPLE as f64;
    let values: Vec<f64> = shapes.iter().map(Ellipse::intensity).collect();
    Array2::from_shape_fn((n, n), |(r, c)| {
        let mut acc = 0.0;
        for sr in 0..SUPERSAMPLE {
            for sc in 0..SUPERSAMPLE {
                let x = (c as f64 - half - 0.5 + (sc as f64 + 0.5) / ss) * grid.pitch;
                let y = (half - r as f64 + 0.5 - (sr as f64 + 0.5) / ss) * grid.pitch;
                let mut v = 0.0;
                for (shape, &val) in shapes.iter().zip(&values) {
                    if shape.contains(x, y) {
                        v = val;
                    }
                }
                acc += v;
            }
        }
        acc / (ss * ss)
    })
}

/// Two-threshold segmentation. Intensities at or below `t_low` are water,
/// at or above `t_high` bone, with linear mixing in between. Each channel's
/// density is its weight times the intensity times the channel's scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdParams {
    pub t_low: f64,
    pub t_high: f64,
    /// Bone density per unit intensity, mg/cm³.
    pub bone_scale: f64,
    /// Water density per unit intensity, mg/cm³.
    pub water_scale: f64,
}

impl ThresholdParams {
    /// Thresholds bracketing the gap between the densest soft tissue of the
    /// torso phantom (1040) and its least dense bone (800 mg/cm³).
    pub fn for_torso() -> Self {
        ThresholdParams {
            t_low: 1050.0,
            t_high: 1075.0,
            bone_scale: 1.0 / bone_intensity_ratio(),
            water_scale: 1.0,
        }
    }

    /// Bone fraction of a pixel with intensity `v`.
    pub fn bone_weight(&self, v: f64) -> f64 {
        if v >= self.t_high {
            1.0
        } else if v <= self.t_low {
            0.0
        } else {
            (v - self.t_low) / (self.t_high - self.t_low)
        }
    }
}

pub fn threshold_segment(img: &Array2<f64>, params: &ThresholdParams) -> Result<MaterialImage> {
    if !(params.t_low <= params.t_high) {
        return Err(Error::param("t_low must not exceed t_high"));
    }
    if !(params.bone_scale >= 0.0 && params.water_scale >= 0.0) {
        return Err(Error::param("density scales must be non-negative"));
    }
    if img.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("segmentation input"));
    }
    let (h, w) = img.dim();
    if h != w {
        return Err(Error::DimensionMismatch {
            expected: vec![h, h],
            actual: vec![h, w],
        });
    }
    let mut out = Array3::zeros((2, h, w));
    for ((r, c), &v) in img.indexed_iter() {
        let v = v.max(0.0);
        let wb = params.bone_weight(v);
        out[[0, r, c]] = wb * v * params.bone_scale;
        out[[1, r, c]] = (1.0 - wb) * v * params.water_scale;
    }
    MaterialImage::new(out)
}
