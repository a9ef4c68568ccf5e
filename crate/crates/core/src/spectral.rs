//! Poly-energetic dual-energy physics: source spectra, basis-material mass
//! attenuation, the per-ray map from material line integrals to expected
//! log-attenuation and its Newton inverse, and Poisson count simulation.

use std::path::Path;

use ndarray::{Array3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{forward_project, DualEnergyScan, MaterialImage};

pub type Vec2 = [f64; 2];
pub type Mat2 = [[f64; 2]; 2];

pub const WATER_TABLE: &str = include_str!("../data/water.txt");
pub const BONE_TABLE: &str = include_str!("../data/bone_cortical.txt");
const ALUMINIUM_TABLE: &str = include_str!("../data/aluminum.txt");
const COPPER_TABLE: &str = include_str!("../data/copper.txt");

const ALUMINIUM_DENSITY: f64 = 2.699;
const COPPER_DENSITY: f64 = 8.96;

/// Parses `# comment` lines and two whitespace-separated numeric columns.
pub fn parse_two_column(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split_whitespace();
        let parse = |c: Option<&str>| -> Result<f64> {
            c.and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::param(format!("line {}: expected two numeric columns", lineno + 1)))
        };
        let a = parse(cols.next())?;
        let b = parse(cols.next())?;
        if cols.next().is_some() {
            return Err(Error::param(format!("line {}: more than two columns", lineno + 1)));
        }
        rows.push((a, b));
    }
    Ok(rows)
}

/// Source spectrum on 1 keV bins; `energies` are the bin midpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub energies: Vec<f64>,
    pub weights: Vec<f64>,
    pub kvp_label: String,
}

impl Spectrum {
    pub fn new(energies: Vec<f64>, weights: Vec<f64>, kvp_label: impl Into<String>) -> Result<Self> {
        if energies.len() != weights.len() || energies.is_empty() {
            return Err(Error::param("spectrum needs matching, non-empty energy and weight columns"));
        }
        if energies.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param("spectrum energies must be strictly increasing"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::param("spectrum weights must be finite and non-negative"));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::param("spectrum has no positive bin"));
        }
        Ok(Spectrum {
            energies,
            weights,
            kvp_label: kvp_label.into(),
        })
    }

    pub fn parse(text: &str, kvp_label: impl Into<String>) -> Result<Self> {
        let rows = parse_two_column(text)?;
        Self::new(
            rows.iter().map(|r| r.0).collect(),
            rows.iter().map(|r| r.1).collect(),
            kvp_label,
        )
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::parse(&text, label)
    }

    /// Kramers bremsstrahlung shape `(kVp - E)/E` hardened by slab filters of
    /// aluminium and copper (thicknesses in mm), binned at 1 keV from 10 keV.
    pub fn kramers(kvp: f64, al_mm: f64, cu_mm: f64) -> Result<Self> {
        let density = kramers_density(kvp, al_mm, cu_mm)?;
        let n_bins = (kvp - 10.0).floor() as usize;
        let energies: Vec<f64> = (0..n_bins).map(|i| 10.5 + i as f64).collect();
        let weights = energies.iter().map(|&e| density(e)).collect();
        Self::new(energies, weights, format!("{kvp:.0}kVp"))
    }

    pub fn kvp(&self) -> f64 {
        self.energies.last().copied().unwrap_or(0.0) + 0.5
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# {} spectrum: keV, relative fluence per 1 keV bin\n", self.kvp_label);
        for (e, w) in self.energies.iter().zip(&self.weights) {
            s.push_str(&format!("{e:.1}\t{w:.9e}\n"));
        }
        s
    }
}

/// Continuous (unbinned) filtered Kramers fluence density, exposed so tests can
/// integrate it on finer grids than the 1 keV bins.
pub fn kramers_density(kvp: f64, al_mm: f64, cu_mm: f64) -> Result<impl Fn(f64) -> f64> {
    if !(kvp > 11.0 && kvp <= 200.0) {
        return Err(Error::param(format!("kVp {kvp} outside the tabulated 11-200 range")));
    }
    let al = MassAttenuationTable::parse(ALUMINIUM_TABLE, "aluminium")?;
    let cu = MassAttenuationTable::parse(COPPER_TABLE, "copper")?;
    Ok(move |e: f64| {
        if e <= 0.0 || e >= kvp {
            return 0.0;
        }
        // attenuation tables hold cm²/mg; densities are g/cm³ and thickness mm
        let mu_t = al.eval(e) * 1000.0 * ALUMINIUM_DENSITY * al_mm / 10.0
            + cu.eval(e) * 1000.0 * COPPER_DENSITY * cu_mm / 10.0;
        (kvp - e) / e * (-mu_t).exp()
    })
}

/// Mass attenuation coefficients of a basis material, stored in cm²/mg.
#[derive(Debug, Clone, PartialEq)]
pub struct MassAttenuationTable {
    pub material_name: String,
    pub energies: Vec<f64>,
    pub values: Vec<f64>,
}

impl MassAttenuationTable {
    /// `values` in cm²/mg.
    pub fn new(material_name: impl Into<String>, energies: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if energies.len() != values.len() || energies.len() < 2 {
            return Err(Error::param("attenuation table needs at least two rows"));
        }
        if energies.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param("attenuation energies must be strictly increasing"));
        }
        if values.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::param("attenuation values must be positive"));
        }
        Ok(MassAttenuationTable {
            material_name: material_name.into(),
            energies,
            values,
        })
    }

    /// Text tables are in cm²/g, the customary unit of published data.
    pub fn parse(text: &str, material_name: impl Into<String>) -> Result<Self> {
        let rows = parse_two_column(text)?;
        Self::new(
            material_name,
            rows.iter().map(|r| r.0).collect(),
            rows.iter().map(|r| r.1 / 1000.0).collect(),
        )
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::parse(&text, name)
    }

    pub fn water() -> Self {
        Self::parse(WATER_TABLE, "water").expect("embedded table")
    }

    pub fn cortical_bone() -> Self {
        Self::parse(BONE_TABLE, "bone").expect("embedded table")
    }

    pub fn covers(&self, e_lo: f64, e_hi: f64) -> bool {
        self.energies[0] <= e_lo && *self.energies.last().unwrap() >= e_hi
    }

    /// Log-log linear interpolation; clamps to the end segments outside the table.
    pub fn eval(&self, e: f64) -> f64 {
        let n = self.energies.len();
        let i = match self.energies.iter().position(|&x| x > e) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => n - 2,
        };
        let (e0, e1) = (self.energies[i].ln(), self.energies[i + 1].ln());
        let (v0, v1) = (self.values[i].ln(), self.values[i + 1].ln());
        let t = (e.ln() - e0) / (e1 - e0);
        (v0 + t * (v1 - v0)).exp()
    }
}

/// One energy channel, pre-sampled on its spectrum's bins.
#[derive(Debug, Clone)]
struct Channel {
    log_weights: Vec<f64>,
    /// `phi[s][i]`: attenuation of material `s` at bin `i`, cm²/mg.
    phi: [Vec<f64>; 2],
}

impl Channel {
    fn exponents(&self, p: Vec2, out: &mut Vec<f64>) -> f64 {
        out.clear();
        let mut max = f64::NEG_INFINITY;
        for i in 0..self.log_weights.len() {
            let a = self.log_weights[i] - p[0] * self.phi[0][i] - p[1] * self.phi[1][i];
            max = max.max(a);
            out.push(a);
        }
        max
    }

    /// `-log Σ_E Ŝ(E) exp(-p·φ(E))` evaluated with log-sum-exp.
    fn h(&self, p: Vec2) -> f64 {
        let mut buf = Vec::with_capacity(self.log_weights.len());
        let max = self.exponents(p, &mut buf);
        let sum: f64 = buf.iter().map(|a| (a - max).exp()).sum();
        -(max + sum.ln())
    }

    /// Returns `h` and its gradient: the attenuation averaged under the
    /// transmitted (re-weighted) spectrum.
    fn h_and_grad(&self, p: Vec2) -> (f64, Vec2) {
        let mut buf = Vec::with_capacity(self.log_weights.len());
        let max = self.exponents(p, &mut buf);
        let mut sum = 0.0;
        let mut g = [0.0; 2];
        for (i, a) in buf.iter().enumerate() {
            let w = (a - max).exp();
            sum += w;
            g[0] += w * self.phi[0][i];
            g[1] += w * self.phi[1][i];
        }
        (-(max + sum.ln()), [g[0] / sum, g[1] / sum])
    }
}

#[derive(Debug, Clone)]
pub struct SpectralModel {
    pub spectra: [Spectrum; 2],
    pub tables: [MassAttenuationTable; 2],
    channels: [Channel; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-10,
            max_iter: 50,
        }
    }
}

impl SpectralModel {
    /// `spectra = [low, high]`, `tables = [bone, water]`.
    pub fn new(spectra: [Spectrum; 2], tables: [MassAttenuationTable; 2]) -> Result<Self> {
        let build = |spec: &Spectrum| -> Result<Channel> {
            let lo = spec.energies[0];
            let hi = *spec.energies.last().unwrap();
            for t in &tables {
                if !t.covers(lo, hi) {
                    return Err(Error::param(format!(
                        "{} table does not cover the {} spectrum support [{lo}, {hi}] keV",
                        t.material_name, spec.kvp_label
                    )));
                }
            }
            let w = spec.normalized_weights();
            let keep: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 0.0).collect();
            Ok(Channel {
                log_weights: keep.iter().map(|&i| w[i].ln()).collect(),
                phi: [
                    keep.iter().map(|&i| tables[0].eval(spec.energies[i])).collect(),
                    keep.iter().map(|&i| tables[1].eval(spec.energies[i])).collect(),
                ],
            })
        };
        let channels = [build(&spectra[0])?, build(&spectra[1])?];
        let model = SpectralModel {
            spectra,
            tables,
            channels,
        };
        let h0 = model.h_forward([0.0, 0.0]);
        if h0[0].abs() > 1e-12 || h0[1].abs() > 1e-12 {
            return Err(Error::param(format!("h(0) = {h0:?}, spectra not normalised")));
        }
        Ok(model)
    }

    /// 90 kVp (1.5 mm Al + 0.2 mm Cu) and 150 kVp (1.5 mm Al + 1.2 mm Cu)
    /// filtered Kramers spectra with the embedded bone and water tables.
    pub fn reference() -> Self {
        let low = Spectrum::kramers(90.0, 1.5, 0.2).expect("valid spectrum");
        let high = Spectrum::kramers(150.0, 1.5, 1.2).expect("valid spectrum");
        Self::new(
            [low, high],
            [MassAttenuationTable::cortical_bone(), MassAttenuationTable::water()],
        )
        .expect("embedded model is consistent")
    }

    /// Expected log-attenuation of both energy channels for material line
    /// integrals `p = (bone, water)` in mg/cm².
    pub fn h_forward(&self, p: Vec2) -> Vec2 {
        [self.channels[0].h(p), self.channels[1].h(p)]
    }

    /// `J[k][s] = ∂h_k/∂p_s`.
    pub fn h_jacobian(&self, p: Vec2) -> Mat2 {
        [self.channels[0].h_and_grad(p).1, self.channels[1].h_and_grad(p).1]
    }

    fn h_with_jacobian(&self, p: Vec2) -> (Vec2, Mat2) {
        let (h0, g0) = self.channels[0].h_and_grad(p);
        let (h1, g1) = self.channels[1].h_and_grad(p);
        ([h0, h1], [g0, g1])
    }

    /// Damped Newton solve of `h(p) = y`, started from the linearisation at zero.
    pub fn h_inverse_newton(&self, y: Vec2, opts: NewtonOptions) -> Result<Vec2> {
        if !(y[0].is_finite() && y[1].is_finite()) {
            return Err(Error::NonFinite("energy pair"));
        }
        let j0 = self.h_jacobian([0.0, 0.0]);
        let mut p = mat_vec(inv2(&j0).expect("attenuation curves are independent"), y);
        let (hp, mut jac) = self.h_with_jacobian(p);
        let mut res = [hp[0] - y[0], hp[1] - y[1]];
        let mut res_norm = res[0].abs().max(res[1].abs());
        let mut converged_at = None;
        for it in 0..opts.max_iter {
            if res_norm < opts.tol {
                converged_at = Some(it);
                break;
            }
            let Some(jinv) = inv2(&jac) else {
                break;
            };
            let step = mat_vec(jinv, res);
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let cand = [p[0] - scale * step[0], p[1] - scale * step[1]];
                let (hc, jc) = self.h_with_jacobian(cand);
                let rc = [hc[0] - y[0], hc[1] - y[1]];
                let nc = rc[0].abs().max(rc[1].abs());
                if nc < res_norm {
                    p = cand;
                    jac = jc;
                    res = rc;
                    res_norm = nc;
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if converged_at.is_none() && res_norm >= opts.tol {
            return Err(Error::NonConvergence {
                iterations: opts.max_iter,
                residual: res_norm,
            });
        }
        // one polishing step: quadratic convergence takes the residual to rounding level
        if let Some(jinv) = inv2(&jac) {
            let step = mat_vec(jinv, res);
            let cand = [p[0] - step[0], p[1] - step[1]];
            let hc = self.h_forward(cand);
            let nc = (hc[0] - y[0]).abs().max((hc[1] - y[1]).abs());
            if nc <= res_norm {
                p = cand;
            }
        }
        Ok(p)
    }

    /// Expected photon count `I0 · exp(-h_k(p))`.
    pub fn mean_counts(&self, p: Vec2, photons: f64) -> Vec2 {
        let h = self.h_forward(p);
        [photons * (-h[0]).exp(), photons * (-h[1]).exp()]
    }
}

pub fn mat_vec(m: Mat2, v: Vec2) -> Vec2 {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

pub fn inv2(m: &Mat2) -> Option<Mat2> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let scale = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    if !det.is_finite() || det.abs() <= 1e-14 * scale * scale {
        return None;
    }
    Some([
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ])
}

/// Log-attenuation sinogram `[2, views, detectors]` (low, high energy) with the
/// photon counts it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergySinogram {
    pub y: Array3<f64>,
    pub counts: Option<Array3<f64>>,
    /// Number of sampled zero counts that were raised to one before the log.
    pub clipped_zeros: usize,
}

impl EnergySinogram {
    pub fn new(y: Array3<f64>, counts: Option<Array3<f64>>) -> Result<Self> {
        if y.shape()[0] != 2 {
            return Err(Error::DimensionMismatch {
                expected: vec![2, y.shape()[1], y.shape()[2]],
                actual: y.shape().to_vec(),
            });
        }
        if let Some(c) = &counts {
            if c.shape() != y.shape() {
                return Err(Error::DimensionMismatch {
                    expected: y.shape().to_vec(),
                    actual: c.shape().to_vec(),
                });
            }
            if c.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::param("photon counts must be positive"));
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("energy sinogram"));
        }
        Ok(EnergySinogram {
            y,
            counts,
            clipped_zeros: 0,
        })
    }

    pub fn n_rays(&self) -> usize {
        self.y.shape()[1] * self.y.shape()[2]
    }

    pub fn ray(&self, view: usize, det: usize) -> Vec2 {
        [self.y[[0, view, det]], self.y[[1, view, det]]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountSimulation {
    /// Incident photons per ray and energy.
    pub photons: f64,
    pub seed: u64,
    /// Skip Poisson sampling: `y = h(Ax)` exactly and every count equals `photons`.
    pub noiseless: bool,
}

/// Simulates both energy channels of a fast-switching scan. Channel `k` is
/// projected on its own view set, counts are Poisson with mean
/// `I0 Σ Ŝ_k exp(-[A x]φ)` and `y = -log(I / I0)`.
pub fn simulate_counts(
    x: &MaterialImage,
    scan: &DualEnergyScan,
    model: &SpectralModel,
    sim: CountSimulation,
) -> Result<EnergySinogram> {
    if x.data.iter().any(|&v| v < 0.0) {
        return Err(Error::param("material densities must be non-negative"));
    }
    if !(sim.photons > 0.0) {
        return Err(Error::param("incident photon count must be positive"));
    }
    let (nv, nd) = scan.low.sino_shape();
    if scan.high.sino_shape() != (nv, nd) {
        return Err(Error::InvalidGeometry("energy channels differ in ray count".into()));
    }
    let mut y = Array3::zeros((2, nv, nd));
    let mut counts = Array3::zeros((2, nv, nd));
    let mut clipped = 0usize;
    for k in 0..2 {
        let p = forward_project(x, scan.channel(k))?;
        let rays: Vec<(f64, f64, bool)> = (0..nv * nd)
            .into_par_iter()
            .map(|ray| {
                let (v, d) = (ray / nd, ray % nd);
                let pk = [p.data[[0, v, d]], p.data[[1, v, d]]];
                let hk = model.h_forward(pk)[k];
                if sim.noiseless {
                    return (hk, sim.photons, false);
                }
                let mean = sim.photons * (-hk).exp();
                let mut rng = ray_rng(sim.seed, k, ray);
                let drawn: f64 = if mean > 0.0 {
                    rng.sample(Poisson::new(mean).expect("positive mean"))
                } else {
                    0.0
                };
                let zero = drawn < 1.0;
                let c = drawn.max(1.0);
                (-(c / sim.photons).ln(), c, zero)
            })
            .collect();
        for (ray, (yv, c, zero)) in rays.into_iter().enumerate() {
            let (v, d) = (ray / nd, ray % nd);
            y[[k, v, d]] = yv;
            counts[[k, v, d]] = c;
            clipped += zero as usize;
        }
    }
    let mut sino = EnergySinogram::new(y, Some(counts))?;
    sino.clipped_zeros = clipped;
    Ok(sino)
}

/// Independent, reproducible stream per (channel, ray) so results do not
/// depend on scheduling.
fn ray_rng(seed: u64, channel: usize, ray: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((ray as u64) << 1) | channel as u64);
    rng
}

/// Inverse-variance weights of the log measurements, `w ≈ I`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatWeights {
    pub w: Array3<f64>,
}

pub fn stat_weights(sino: &EnergySinogram) -> Result<StatWeights> {
    let counts = sino.counts.as_ref().ok_or(Error::MissingCounts)?;
    let mut w = counts.clone();
    Zip::from(&mut w).for_each(|v| {
        if !(*v > 0.0) {
            *v = 1.0;
        }
    });
    Ok(StatWeights { w })
}

impl StatWeights {
    pub fn uniform(shape: (usize, usize), value: f64) -> Self {
        StatWeights {
            w: Array3::from_elem((2, shape.0, shape.1), value),
        }
    }

    pub fn channel_mean(&self, k: usize) -> f64 {
        self.w.index_axis(Axis(0), k).mean().unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FanBeamGeometry;

    fn mono(e0: f64) -> SpectralModel {
        let s = Spectrum::new(vec![e0], vec![3.0], "mono").unwrap();
        SpectralModel::new(
            [s.clone(), s],
            [MassAttenuationTable::cortical_bone(), MassAttenuationTable::water()],
        )
        .unwrap()
    }

    #[test]
    fn h_at_origin_is_zero() {
        let m = SpectralModel::reference();
        let h = m.h_forward([0.0, 0.0]);
        assert!(h[0].abs() < 1e-12 && h[1].abs() < 1e-12);
    }

    #[test]
    fn monoenergetic_collapse() {
        let m = mono(60.5);
        let phi_b = m.tables[0].eval(60.5);
        let phi_w = m.tables[1].eval(60.5);
        let p = [123.0, 4567.0];
        let h = m.h_forward(p);
        let expect = p[0] * phi_b + p[1] * phi_w;
        for k in 0..2 {
            assert!((h[k] - expect).abs() <= 1e-12 * expect);
        }
        let j = m.h_jacobian(p);
        assert_eq!(j[0], [phi_b, phi_w]);
        assert_eq!(j[1], [phi_b, phi_w]);
    }

    #[test]
    fn jacobian_at_zero_is_spectral_average() {
        let m = SpectralModel::reference();
        let j = m.h_jacobian([0.0, 0.0]);
        for k in 0..2 {
            let w = m.spectra[k].normalized_weights();
            for s in 0..2 {
                let avg: f64 = m.spectra[k]
                    .energies
                    .iter()
                    .zip(&w)
                    .map(|(&e, &wi)| wi * m.tables[s].eval(e))
                    .sum();
                assert!((j[k][s] - avg).abs() < 1e-12 * avg);
            }
        }
    }

    #[test]
    fn jacobian_entries_positive_and_beam_hardening_lowers_them() {
        let m = SpectralModel::reference();
        let j0 = m.h_jacobian([0.0, 0.0]);
        let j1 = m.h_jacobian([500.0, 20000.0]);
        for k in 0..2 {
            for s in 0..2 {
                assert!(j1[k][s] > 0.0);
                assert!(j1[k][s] < j0[k][s]);
            }
        }
    }

    #[test]
    fn newton_at_zero() {
        let m = SpectralModel::reference();
        let p = m.h_inverse_newton([0.0, 0.0], NewtonOptions::default()).unwrap();
        assert!(p[0].abs() < 1e-9 && p[1].abs() < 1e-9);
    }

    #[test]
    fn newton_reports_non_convergence() {
        let m = SpectralModel::reference();
        let opts = NewtonOptions { tol: 1e-10, max_iter: 0 };
        let err = m.h_inverse_newton([2.0, 1.5], opts).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }));
        assert!(m.h_inverse_newton([f64::NAN, 0.0], NewtonOptions::default()).is_err());
    }

    #[test]
    fn table_coverage_is_checked() {
        let s = Spectrum::new(vec![5.0, 6.0], vec![1.0, 1.0], "soft").unwrap();
        let r = SpectralModel::new(
            [s.clone(), s],
            [MassAttenuationTable::cortical_bone(), MassAttenuationTable::water()],
        );
        assert!(r.is_err());
    }

    #[test]
    fn spectrum_validation() {
        assert!(Spectrum::new(vec![1.0, 2.0], vec![0.0, 0.0], "x").is_err());
        assert!(Spectrum::new(vec![2.0, 1.0], vec![1.0, 1.0], "x").is_err());
        assert!(Spectrum::new(vec![1.0], vec![-1.0], "x").is_err());
        let k = Spectrum::kramers(90.0, 1.5, 0.2).unwrap();
        assert!(k.energies.iter().all(|&e| e < 90.0));
        let parsed = Spectrum::parse(&k.to_text(), "90kVp").unwrap();
        assert_eq!(parsed.energies, k.energies);
    }

    #[test]
    fn table_parse_errors() {
        assert!(parse_two_column("# c\n10 1\n20\n").is_err());
        assert!(parse_two_column("10 1 3\n").is_err());
        assert_eq!(parse_two_column("# c\n\n10 1\n").unwrap(), vec![(10.0, 1.0)]);
    }

    #[test]
    fn noiseless_simulation_is_h_of_projection() {
        let g = FanBeamGeometry::desk(16, 8);
        let scan = DualEnergyScan::fast_switching(&g, 8).unwrap();
        let m = SpectralModel::reference();
        let mut x = MaterialImage::zeros(16);
        x.data.slice_mut(ndarray::s![0, 6..10, 6..10]).fill(1500.0);
        x.data.slice_mut(ndarray::s![1, 3..13, 3..13]).fill(1000.0);
        let sim = CountSimulation {
            photons: 2e6,
            seed: 3,
            noiseless: true,
        };
        let sino = simulate_counts(&x, &scan, &m, sim).unwrap();
        for k in 0..2 {
            let p = forward_project(&x, scan.channel(k)).unwrap();
            for v in 0..8 {
                for d in 0..g.n_detectors {
                    let h = m.h_forward([p.data[[0, v, d]], p.data[[1, v, d]]]);
                    assert_eq!(sino.y[[k, v, d]], h[k]);
                }
            }
        }
        let w = stat_weights(&sino).unwrap();
        assert!(w.w.iter().all(|&v| v == 2e6));
    }

    #[test]
    fn counts_are_required_for_weights() {
        let s = EnergySinogram::new(Array3::zeros((2, 2, 2)), None).unwrap();
        assert!(matches!(stat_weights(&s), Err(Error::MissingCounts)));
        let c = Array3::from_elem((2, 2, 2), 7.0);
        let s = EnergySinogram::new(Array3::zeros((2, 2, 2)), Some(c)).unwrap();
        assert!(stat_weights(&s).unwrap().w.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn simulation_rejects_negative_density() {
        let g = FanBeamGeometry::desk(8, 4);
        let scan = DualEnergyScan::coincident(&g, 4).unwrap();
        let mut x = MaterialImage::zeros(8);
        x.data[[0, 1, 1]] = -1.0;
        let sim = CountSimulation {
            photons: 1e3,
            seed: 0,
            noiseless: false,
        };
        assert!(simulate_counts(&x, &scan, &SpectralModel::reference(), sim).is_err());
    }

    #[test]
    fn zero_counts_are_clipped_and_flagged() {
        let g = FanBeamGeometry::desk(8, 4);
        let scan = DualEnergyScan::coincident(&g, 4).unwrap();
        let mut x = MaterialImage::zeros(8);
        x.data.fill(3000.0);
        let sim = CountSimulation {
            photons: 1.0,
            seed: 0,
            noiseless: false,
        };
        let sino = simulate_counts(&x, &scan, &SpectralModel::reference(), sim).unwrap();
        assert!(sino.clipped_zeros > 0);
        assert!(sino.counts.as_ref().unwrap().iter().all(|&c| c >= 1.0));
        assert!(sino.y.iter().all(|v| v.is_finite()));
    }
}
