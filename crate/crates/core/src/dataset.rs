//! On-disk dataset directories.
//!
//! A dataset directory holds `manifest.json`, `params.bin` (n × 2 row-major
//! `(λ, ν)`) and `fields.bin` (n × nx × ny row-major). All floats are 64-bit
//! little-endian. Files are written under temporary names and renamed once
//! complete, so a failed run leaves no partial dataset behind.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::simulate::{
    generate_pair, FieldSample, GridSpec, PriorBox, SimulationMethod, TrainingSet,
    DEFAULT_VALIDATION_FRACTION,
};
use crate::spatial::{ModelFamily, ParameterVector};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const FIELDS_FILE: &str = "fields.bin";
pub const COORDS_FILE: &str = "coords.bin";

const FORMAT_VERSION: u32 = 1;

/// Default memory budget for fields held at once while generating.
pub const DEFAULT_MEMORY_BUDGET: usize = 256 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub grid: GridSpec,
    pub family: ModelFamily,
    pub prior: PriorBox,
    pub seed: u64,
    pub count: usize,
    #[serde(default)]
    pub method: SimulationMethod,
    pub validation_fraction: f64,
    pub dtype: String,
    pub byte_order: String,
}

impl Manifest {
    pub fn new(
        grid: GridSpec,
        family: ModelFamily,
        prior: PriorBox,
        seed: u64,
        count: usize,
        method: SimulationMethod,
    ) -> Self {
        Manifest {
            version: FORMAT_VERSION,
            grid,
            family,
            prior,
            seed,
            count,
            method,
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            dtype: "f64".into(),
            byte_order: "little-endian".into(),
        }
    }

    fn check(&self, path: &Path) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported version {}", self.version)));
        }
        if self.dtype != "f64" || self.byte_order != "little-endian" {
            return Err(Error::format(
                path,
                format!("unsupported encoding {} / {}", self.dtype, self.byte_order),
            ));
        }
        self.grid.validate()
    }
}

pub fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let mut bytes = Vec::with_capacity(expected * 8);
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() != expected * 8 {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", expected * 8, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

struct DatasetWriter {
    dir: PathBuf,
    params: BufWriter<File>,
    fields: BufWriter<File>,
    written: usize,
}

impl DatasetWriter {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(DatasetWriter {
            dir: dir.to_path_buf(),
            params: BufWriter::new(File::create(tmp_path(&dir.join(PARAMS_FILE)))?),
            fields: BufWriter::new(File::create(tmp_path(&dir.join(FIELDS_FILE)))?),
            written: 0,
        })
    }

    fn push(&mut self, p: &ParameterVector, field: &FieldSample) -> Result<()> {
        write_f64s(&mut self.params, &[p.lambda, p.nu])?;
        write_f64s(&mut self.fields, &field.values)?;
        self.written += 1;
        Ok(())
    }

    fn finish(mut self, manifest: &Manifest) -> Result<()> {
        self.params.flush()?;
        self.fields.flush()?;
        drop(self.params);
        drop(self.fields);
        for name in [PARAMS_FILE, FIELDS_FILE] {
            let path = self.dir.join(name);
            fs::rename(tmp_path(&path), path)?;
        }
        let manifest_path = self.dir.join(MANIFEST_FILE);
        fs::write(tmp_path(&manifest_path), serde_json::to_vec_pretty(manifest)?)?;
        fs::rename(tmp_path(&manifest_path), manifest_path)?;
        Ok(())
    }

    fn abort(self) {
        let dir = self.dir.clone();
        drop(self);
        for name in [PARAMS_FILE, FIELDS_FILE, MANIFEST_FILE] {
            let _ = fs::remove_file(tmp_path(&dir.join(name)));
        }
    }
}

/// Writes an in-memory training set to `dir`.
pub fn write_dataset(dir: &Path, set: &TrainingSet, method: SimulationMethod) -> Result<Manifest> {
    let mut manifest = Manifest::new(set.grid, set.family, set.prior, set.seed, set.len(), method);
    manifest.validation_fraction = set.validation_fraction;
    let mut writer = DatasetWriter::create(dir)?;
    for (p, field) in &set.pairs {
        if let Err(e) = writer.push(p, field) {
            writer.abort();
            return Err(e);
        }
    }
    writer.finish(&manifest)?;
    Ok(manifest)
}

/// Simulates `n` prior/field pairs straight to disk, holding at most
/// `memory_budget` bytes of field values at once.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    dir: &Path,
    prior: &PriorBox,
    n: usize,
    family: ModelFamily,
    grid: &GridSpec,
    method: SimulationMethod,
    seed: u64,
    memory_budget: usize,
) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::domain("dataset size must be at least 1"));
    }
    prior.validate(family)?;
    grid.validate()?;
    let chunk = (memory_budget / (grid.n_sites() * 8).max(1)).clamp(1, n);
    let manifest = Manifest::new(*grid, family, *prior, seed, n, method);
    let mut writer = DatasetWriter::create(dir)?;
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let pairs = (start as u64..end as u64)
            .into_par_iter()
            .map(|i| generate_pair(prior, family, grid, method, seed, i))
            .collect::<Result<Vec<_>>>();
        let pushed = pairs.and_then(|pairs| pairs.iter().try_for_each(|(p, f)| writer.push(p, f)));
        if let Err(e) = pushed {
            writer.abort();
            return Err(e);
        }
    }
    writer.finish(&manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&path)?)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    manifest.check(&path)?;
    Ok(manifest)
}

/// Hex SHA-256 of the manifest file, used to tie checkpoints to their data.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    let bytes = fs::read(dir.join(MANIFEST_FILE))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_dataset(dir: &Path) -> Result<TrainingSet> {
    let manifest = read_manifest(dir)?;
    let n = manifest.count;
    let k = manifest.grid.n_sites();
    let params = read_f64s(&dir.join(PARAMS_FILE), n * 2)?;
    let fields = read_f64s(&dir.join(FIELDS_FILE), n * k)?;
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let p = ParameterVector::new(manifest.family, params[2 * i], params[2 * i + 1])
            .map_err(|e| Error::format(dir.join(PARAMS_FILE), format!("row {i}: {e}")))?;
        let field = FieldSample {
            grid: manifest.grid,
            values: fields[i * k..(i + 1) * k].to_vec(),
            params: p,
            seed: manifest.seed,
            index: i as u64,
        };
        pairs.push((p, field));
    }
    Ok(TrainingSet {
        pairs,
        prior: manifest.prior,
        family: manifest.family,
        grid: manifest.grid,
        seed: manifest.seed,
        validation_fraction: manifest.validation_fraction,
    })
}

/// Long-format CSV: `index,lambda,nu,ix,iy,x,y,value`.
pub fn export_csv(set: &TrainingSet, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "lambda", "nu", "ix", "iy", "x", "y", "value"])?;
    for (i, (p, field)) in set.pairs.iter().enumerate() {
        for ix in 0..field.grid.nx {
            for iy in 0..field.grid.ny {
                let [x, y] = field.grid.coord(ix, iy);
                w.serialize((i, p.lambda, p.nu, ix, iy, x, y, field.get(ix, iy)))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a single field from CSV rows `ix,iy,value` on a unit-spaced grid.
pub fn read_field_csv(path: &Path) -> Result<(GridSpec, Vec<f64>)> {
    #[derive(Deserialize)]
    struct Row {
        ix: usize,
        iy: usize,
        value: f64,
    }
    let mut rows = Vec::new();
    for (line, row) in csv::Reader::from_path(path)?.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::format(path, format!("row {}: {e}", line + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::format(path, "no cells"));
    }
    let nx = rows.iter().map(|r| r.ix + 1).max().unwrap_or(0);
    let ny = rows.iter().map(|r| r.iy + 1).max().unwrap_or(0);
    if rows.len() != nx * ny {
        return Err(Error::format(
            path,
            format!("expected {} cells for a {nx}×{ny} grid, found {}", nx * ny, rows.len()),
        ));
    }
    let mut values = vec![f64::NAN; nx * ny];
    for r in rows {
        values[r.ix * ny + r.iy] = r.value;
    }
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(Error::format(path, format!("missing cell ({}, {})", i / ny, i % ny)));
    }
    Ok((GridSpec { nx, ny, extent: [0.0, nx as f64, 0.0, ny as f64] }, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::generate_training_set;

    #[test]
    fn round_trip_and_streaming_agree() {
        let tmp = tempfile::tempdir().unwrap();
        let grid = GridSpec::square(6);
        let prior = PriorBox::default();
        let set = generate_training_set(&prior, 7, ModelFamily::BrownResnick, &grid, 3).unwrap();
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        write_dataset(&a, &set, SimulationMethod::Exact).unwrap();
        // Budget of two fields per chunk forces several chunks.
        generate_dataset(&b, &prior, 7, ModelFamily::BrownResnick, &grid, SimulationMethod::Exact, 3, 2 * 36 * 8)
            .unwrap();
        for name in [PARAMS_FILE, FIELDS_FILE, MANIFEST_FILE] {
            assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
        }
        let loaded = load_dataset(&a).unwrap();
        assert_eq!(loaded.pairs, set.pairs);
        assert_eq!(manifest_hash(&a).unwrap(), manifest_hash(&b).unwrap());
        assert!(!a.join("params.bin.partial").exists());
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let set = generate_training_set(&PriorBox::default(), 2, ModelFamily::SchlatherPowExp, &GridSpec::square(4), 1)
            .unwrap();
        write_dataset(tmp.path(), &set, SimulationMethod::Exact).unwrap();
        let path = tmp.path().join(FIELDS_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_dataset(tmp.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn invalid_prior_leaves_no_output() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("out");
        let prior = PriorBox { lambda: (5.0, 1.0), nu: (0.3, 1.8) };
        let grid = GridSpec::square(4);
        assert!(generate_dataset(&dir, &prior, 3, ModelFamily::BrownResnick, &grid, SimulationMethod::Exact, 1, 1 << 20)
            .is_err());
        assert!(!dir.exists());
    }

    #[test]
    fn field_csv_reports_missing_cells() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("f.csv");
        fs::write(&path, "ix,iy,value\n0,0,1.0\n0,1,2.0\n1,0,3.0\n1,1,4.0\n").unwrap();
        assert_eq!(read_field_csv(&path).unwrap(), (GridSpec::square(2), vec![1.0, 2.0, 3.0, 4.0]));
        fs::write(&path, "ix,iy,value\n0,0,1.0\n1,1,4.0\n0,1,2.0\n").unwrap();
        assert!(read_field_csv(&path).is_err());
    }
}
