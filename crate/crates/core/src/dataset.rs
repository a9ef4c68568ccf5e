//! Simulated dual-energy datasets: manifest, per-record simulation and the
//! on-disk layout with a checksum index.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{forward_project, DualEnergyScan, FanBeamGeometry, MaterialImage, MaterialSinogram};
use crate::io::{read_array_f64, sha256_file, to_storage_precision, write_array_f64};
use crate::phantom::{make_phantom, threshold_segment, Grid, PhantomKind, ThresholdParams, TorsoParams};
use crate::spectral::{simulate_counts, CountSimulation, EnergySinogram, SpectralModel};

/// Scanner layout without view angles; angles come from the acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometrySpec {
    pub image_size: usize,
    /// mm
    pub pixel_pitch: f64,
    pub n_detectors: usize,
    /// mm, at the detector plane
    pub detector_width: f64,
    pub source_origin_dist: f64,
    pub source_detector_dist: f64,
}

impl GeometrySpec {
    pub fn desk(image_size: usize) -> Self {
        Self::from_geometry(&FanBeamGeometry::desk(image_size, 1))
    }

    pub fn from_geometry(g: &FanBeamGeometry) -> Self {
        GeometrySpec {
            image_size: g.image_size,
            pixel_pitch: g.pixel_pitch,
            n_detectors: g.n_detectors,
            detector_width: g.detector_width,
            source_origin_dist: g.source_origin_dist,
            source_detector_dist: g.source_detector_dist,
        }
    }

    pub fn with_views(&self, n_views: usize) -> Result<FanBeamGeometry> {
        FanBeamGeometry::new(
            self.image_size,
            self.pixel_pitch,
            self.n_detectors,
            self.detector_width,
            self.source_origin_dist,
            self.source_detector_dist,
            FanBeamGeometry::uniform_angles(n_views, 0.0),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    pub geometry: GeometrySpec,
    pub views_per_channel: usize,
    /// Interleave the two energies (fast kVp switching) instead of measuring
    /// both at every angle.
    pub kvp_switching: bool,
    pub photons: f64,
    pub noiseless: bool,
    /// Provenance labels of the low and high spectra.
    pub spectra: [String; 2],
}

impl Acquisition {
    pub fn desk(image_size: usize, views_per_channel: usize) -> Self {
        Acquisition {
            geometry: GeometrySpec::desk(image_size),
            views_per_channel,
            kvp_switching: true,
            photons: 2e6,
            noiseless: false,
            spectra: ["90kVp".into(), "150kVp".into()],
        }
    }

    pub fn scan(&self) -> Result<DualEnergyScan> {
        self.scan_with_views(self.views_per_channel)
    }

    pub fn scan_with_views(&self, views: usize) -> Result<DualEnergyScan> {
        let base = self.geometry.with_views(views.max(1))?;
        DualEnergyScan::build(&base, views, self.kvp_switching)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub phantom: PhantomKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub acquisition: Acquisition,
    pub threshold: ThresholdParams,
    pub records: Vec<DatasetRecord>,
}

impl DatasetManifest {
    /// `n_train + n_test` torso phantoms with consecutive seeds from `base_seed`.
    pub fn torso(acquisition: Acquisition, n_train: usize, n_test: usize, base_seed: u64) -> Self {
        let records = (0..n_train + n_test)
            .map(|i| {
                let split = if i < n_train { Split::Train } else { Split::Test };
                DatasetRecord {
                    id: format!("{}_{:04}", if i < n_train { "train" } else { "test" }, i),
                    seed: base_seed.wrapping_add(i as u64),
                    split,
                    phantom: PhantomKind::EllipseTorso(TorsoParams::default()),
                }
            })
            .collect();
        DatasetManifest {
            acquisition,
            threshold: ThresholdParams::for_torso(),
            records,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut seeds = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Config(format!("duplicate record id `{}`", r.id)));
            }
            if !seeds.insert(r.seed) {
                return Err(Error::Config(format!("seed {} used by more than one record", r.seed)));
            }
            if r.id.is_empty() || r.id.contains(['/', '\\', '\t', '\n']) {
                return Err(Error::Config(format!("record id `{}` is not a plain file stem", r.id)));
            }
        }
        if !(self.acquisition.photons > 0.0) {
            return Err(Error::Config("photon count must be positive".into()));
        }
        self.acquisition.scan()?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Ground truth and measurements of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordData {
    /// Material images at storage (`f32`) precision.
    pub x: MaterialImage,
    /// `p* = A x*` on the material geometry, at storage precision.
    pub p: MaterialSinogram,
    pub y: EnergySinogram,
}

/// Counts are drawn from a stream derived from the record seed, distinct from
/// the phantom's own stream.
pub const NOISE_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn simulate_record(
    rec: &DatasetRecord,
    acq: &Acquisition,
    threshold: &ThresholdParams,
    model: &SpectralModel,
) -> Result<RecordData> {
    let scan = acq.scan()?;
    let g = scan.material_geometry();
    let grid = Grid {
        size: g.image_size,
        pitch: g.pixel_pitch,
    };
    let phantom = make_phantom(&rec.phantom, grid, rec.seed)?;
    let mut x = threshold_segment(&phantom.intensity, threshold)?;
    to_storage_precision(&mut x.data);
    let mut p = forward_project(&x, g)?;
    to_storage_precision(&mut p.data);
    let mut y = simulate_counts(
        &x,
        &scan,
        model,
        CountSimulation {
            photons: acq.photons,
            seed: rec.seed ^ NOISE_SEED_SALT,
            noiseless: acq.noiseless,
        },
    )?;
    to_storage_precision(&mut y.y);
    if let Some(c) = y.counts.as_mut() {
        to_storage_precision(c);
    }
    Ok(RecordData { x, p, y })
}

pub fn simulate_dataset(manifest: &DatasetManifest, model: &SpectralModel) -> Result<Vec<RecordData>> {
    manifest.validate()?;
    manifest
        .records
        .par_iter()
        .map(|r| simulate_record(r, &manifest.acquisition, &manifest.threshold, model))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub path: String,
    pub sha256: String,
    pub role: String,
}

pub const INDEX_FILE: &str = "index.tsv";
pub const MANIFEST_FILE: &str = "manifest.toml";

pub fn record_paths(dir: &Path, id: &str) -> [(PathBuf, &'static str); 4] {
    [
        (dir.join(format!("{id}_x.sdmp")), "material_image"),
        (dir.join(format!("{id}_p.sdmp")), "material_sinogram"),
        (dir.join(format!("{id}_y.sdmp")), "energy_sinogram"),
        (dir.join(format!("{id}_counts.sdmp")), "counts"),
    ]
}

/// Simulates every record and writes four arrays per record plus
/// `index.tsv` (`path<TAB>sha256<TAB>role`) and a copy of the manifest.
pub fn generate_dataset(manifest: &DatasetManifest, model: &SpectralModel, out_dir: &Path) -> Result<(Vec<RecordData>, Vec<IndexEntry>)> {
    let data = simulate_dataset(manifest, model)?;
    let index = write_dataset(manifest, &data, out_dir)?;
    Ok((data, index))
}

pub fn write_dataset(manifest: &DatasetManifest, data: &[RecordData], out_dir: &Path) -> Result<Vec<IndexEntry>> {
    fs::create_dir_all(out_dir)?;
    let mut index = vec![];
    for (rec, d) in manifest.records.iter().zip(data) {
        let counts = d.y.counts.as_ref().ok_or(Error::MissingCounts)?;
        let arrays: [&Array3<f64>; 4] = [&d.x.data, &d.p.data, &d.y.y, counts];
        for ((path, role), arr) in record_paths(out_dir, &rec.id).into_iter().zip(arrays) {
            write_array_f64(&path, &arr.view().into_dyn())?;
            index.push(IndexEntry {
                path: path.file_name().unwrap().to_string_lossy().into_owned(),
                sha256: sha256_file(&path)?,
                role: role.to_string(),
            });
        }
    }
    let mut f = fs::File::create(out_dir.join(INDEX_FILE))?;
    for e in &index {
        writeln!(f, "{}\t{}\t{}", e.path, e.sha256, e.role)?;
    }
    let text = toml::to_string(manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(out_dir.join(MANIFEST_FILE), text)?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    let text = fs::read_to_string(dir.join(INDEX_FILE))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let parts: Vec<&str> = l.split('\t').collect();
            match parts.as_slice() {
                [p, h, r] => Ok(IndexEntry {
                    path: p.to_string(),
                    sha256: h.to_string(),
                    role: r.to_string(),
                }),
                _ => Err(Error::format(dir.join(INDEX_FILE), format!("malformed index line `{l}`"))),
            }
        })
        .collect()
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))
}

fn to3(a: ndarray::ArrayD<f64>, path: &Path) -> Result<Array3<f64>> {
    a.into_dimensionality().map_err(|_| Error::format(path, "expected a 3-d array"))
}

/// Loads one record written by [`write_dataset`].
pub fn load_record(dir: &Path, id: &str) -> Result<RecordData> {
    let [(xp, _), (pp, _), (yp, _), (cp, _)] = record_paths(dir, id);
    let x = MaterialImage::new(to3(read_array_f64(&xp)?, &xp)?)?;
    let p = MaterialSinogram::new(to3(read_array_f64(&pp)?, &pp)?)?;
    let y = EnergySinogram::new(to3(read_array_f64(&yp)?, &yp)?, Some(to3(read_array_f64(&cp)?, &cp)?))?;
    Ok(RecordData { x, p, y })
}

/// Loads a dataset directory after checking every file against `index.tsv`.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<RecordData>)> {
    let manifest = read_manifest(dir)?;
    manifest.validate()?;
    for e in read_index(dir)? {
        let path = dir.join(&e.path);
        if sha256_file(&path)? != e.sha256 {
            return Err(Error::format(path, "checksum does not match index.tsv"));
        }
    }
    let data = manifest.records.iter().map(|r| load_record(dir, &r.id)).collect::<Result<_>>()?;
    Ok((manifest, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_manifest() -> DatasetManifest {
        DatasetManifest::torso(Acquisition::desk(32, 30), 1, 0, 5)
    }

    #[test]
    fn one_record_writes_four_arrays_and_replays() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_manifest();
        let model = SpectralModel::reference();
        let (data, index) = generate_dataset(&m, &model, dir.path()).unwrap();
        assert_eq!(index.len(), 4);
        assert_eq!(read_index(dir.path()).unwrap(), index);
        for e in &index {
            assert_eq!(sha256_file(dir.path().join(&e.path)).unwrap(), e.sha256);
        }
        let back = load_record(dir.path(), &m.records[0].id).unwrap();
        assert_eq!(back.x, data[0].x);
        let scan = m.acquisition.scan().unwrap();
        let mut replay = forward_project(&back.x, scan.material_geometry()).unwrap();
        to_storage_precision(&mut replay.data);
        assert_eq!(replay.data, back.p.data);
        assert_eq!(read_manifest(dir.path()).unwrap(), m);

        let dir2 = tempfile::tempdir().unwrap();
        let (_, index2) = generate_dataset(&m, &model, dir2.path()).unwrap();
        assert_eq!(index, index2);
    }

    #[test]
    fn manifest_validation() {
        let mut m = DatasetManifest::torso(Acquisition::desk(32, 30), 2, 1, 5);
        assert!(m.validate().is_ok());
        assert_eq!(m.split(Split::Test).count(), 1);
        m.records[1].seed = m.records[0].seed;
        assert!(m.validate().is_err());
        let mut m = DatasetManifest::torso(Acquisition::desk(32, 30), 2, 0, 5);
        m.records[1].id = m.records[0].id.clone();
        assert!(m.validate().is_err());
    }
}
