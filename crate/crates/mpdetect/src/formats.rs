//! Binary dataset (`GMPD`) and checkpoint (`GMPW`) files, little-endian,
//! each with a JSON sidecar next to it (`<file>.json`).

use std::fs;
use std::path::{Path, PathBuf};

use mpdetect_core::cnn::{ModelSpec, MultipathCnn, TrainConfig};
use mpdetect_core::dataset::{Dataset, ScenarioConfig, Snapshot};
use mpdetect_core::nn::network::LayerParams;
use mpdetect_core::nn::{LayerSpec, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ExperimentConfig;

pub const DATASET_MAGIC: [u8; 4] = *b"GMPD";
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GMPW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid content: {0}")]
    Invalid(String),
    #[error("sidecar {path}: {source}")]
    Sidecar {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Model(#[from] mpdetect_core::Error),
}

pub type FormatResult<T> = Result<T, FormatError>;

/// `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read_file(path: &Path) -> FormatResult<Vec<u8>> {
    fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> FormatResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| FormatError::Io {
            path: dir.to_owned(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| FormatError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> FormatResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| FormatError::Sidecar {
        path: path.to_owned(),
        source,
    })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> FormatResult<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|source| FormatError::Sidecar {
        path: path.to_owned(),
        source,
    })
}

/// Little-endian reader that reports running out of bytes as truncation.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> FormatResult<&'a [u8]> {
        if self.remaining() < n {
            return Err(FormatError::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> FormatResult<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> FormatResult<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> FormatResult<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize, what: &str) -> FormatResult<Vec<f32>> {
        let bytes = self.take(count * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn header(&mut self, magic: [u8; 4], version: u32) -> FormatResult<()> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().unwrap();
        if found != magic {
            return Err(FormatError::BadMagic { expected: magic, found });
        }
        let v = self.u32("version")?;
        if v != version {
            return Err(FormatError::UnsupportedVersion {
                found: v,
                supported: version,
            });
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> FormatResult<()> {
    let v = u32::try_from(v).map_err(|_| FormatError::Invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// What a dataset file was generated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub n_samples: usize,
    pub n: usize,
    pub seed: u64,
    pub samples_per_class: usize,
    pub scenario: ScenarioConfig,
    pub experiment: ExperimentConfig,
}

impl DatasetManifest {
    pub fn new(ds: &Dataset, seed: u64, scenario: ScenarioConfig, experiment: ExperimentConfig) -> Self {
        DatasetManifest {
            format: "GMPD".into(),
            version: DATASET_VERSION,
            n_samples: ds.len(),
            n: ds.n,
            seed,
            samples_per_class: ds.len() / 2,
            scenario,
            experiment,
        }
    }
}

pub fn encode_dataset(ds: &Dataset) -> FormatResult<Vec<u8>> {
    let plane = 2 * ds.n * ds.n;
    let mut out = Vec::with_capacity(24 + ds.len() * (1 + 4 * plane));
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    put_u32(&mut out, ds.len())?;
    put_u32(&mut out, ds.n)?;
    put_u32(&mut out, 2)?;
    put_u32(&mut out, 1)?;
    for s in &ds.samples {
        if s.n != ds.n || s.tensor.len() != plane {
            return Err(FormatError::ShapeMismatch(format!(
                "sample with n = {} and {} values in a dataset with n = {}",
                s.n,
                s.tensor.len(),
                ds.n
            )));
        }
        out.push(s.label);
        for v in &s.tensor {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> FormatResult<Dataset> {
    let mut c = Cursor::new(bytes);
    c.header(DATASET_MAGIC, DATASET_VERSION)?;
    let n_samples = c.u32("sample count")? as usize;
    let n = c.u32("grid side")? as usize;
    let channels = c.u32("channel count")?;
    let label_width = c.u32("label width")?;
    if channels != 2 || label_width != 1 {
        return Err(FormatError::ShapeMismatch(format!(
            "expected 2 channels and 1-byte labels, header says {channels} and {label_width}"
        )));
    }
    let plane = 2 * n * n;
    let record = 1 + 4 * plane;
    if c.remaining() < n_samples * record {
        return Err(FormatError::Truncated(format!(
            "{n_samples} records of {record} bytes need {} bytes, {} present",
            n_samples * record,
            c.remaining()
        )));
    }
    if c.remaining() > n_samples * record {
        return Err(FormatError::ShapeMismatch(format!(
            "{} bytes after {n_samples} records of {record} bytes",
            c.remaining() - n_samples * record
        )));
    }
    let mut samples = Vec::with_capacity(n_samples);
    for k in 0..n_samples {
        let label = c.u8("label")?;
        if label > 1 {
            return Err(FormatError::Invalid(format!("record {k} has label {label}")));
        }
        let tensor = c.f32s(plane, "snapshot")?;
        if tensor.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::Invalid(format!("record {k} has non-finite values")));
        }
        samples.push(Snapshot {
            n,
            tensor,
            label,
            scenario: None,
        });
    }
    Ok(Dataset { n, samples })
}

pub fn write_dataset(path: &Path, ds: &Dataset, manifest: &DatasetManifest) -> FormatResult<()> {
    write_file(path, &encode_dataset(ds)?)?;
    write_json(&sidecar_path(path), manifest)
}

pub fn read_dataset(path: &Path) -> FormatResult<Dataset> {
    decode_dataset(&read_file(path)?)
}

pub fn read_manifest(path: &Path) -> FormatResult<DatasetManifest> {
    read_json(&sidecar_path(path))
}

/// Layer plan and training settings stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub layers: Vec<LayerSpec>,
    pub train: Option<TrainConfig>,
    pub init_seed: u64,
}

impl CheckpointMeta {
    pub fn new(model: &MultipathCnn, train: Option<TrainConfig>, init_seed: u64) -> Self {
        CheckpointMeta {
            model: model.spec.clone(),
            layers: model.spec.layers(),
            train,
            init_seed,
        }
    }
}

pub fn encode_checkpoint(model: &MultipathCnn) -> FormatResult<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in model.named_tensors() {
        let len =
            u16::try_from(name.len()).map_err(|_| FormatError::Invalid(format!("tensor name {name} too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            put_u32(&mut out, e)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Reads the tensor list of a checkpoint and checks it against the plan of
/// `spec`: same names, same order, same shapes.
pub fn decode_checkpoint(bytes: &[u8], spec: &ModelSpec) -> FormatResult<MultipathCnn> {
    let mut c = Cursor::new(bytes);
    c.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let names = spec.param_names();
    let shapes: Vec<Vec<usize>> = spec
        .layers()
        .iter()
        .filter_map(|l| l.param_shapes())
        .flat_map(|(w, b)| [w, b])
        .collect();
    let mut tensors = Vec::with_capacity(names.len());
    for (expected, shape) in names.iter().zip(&shapes) {
        if c.remaining() == 0 {
            return Err(FormatError::Truncated(format!("missing tensor {expected}")));
        }
        let len = c.u16("name length")? as usize;
        let name = String::from_utf8(c.take(len, "name")?.to_vec())
            .map_err(|_| FormatError::Invalid("tensor name is not UTF-8".into()))?;
        if &name != expected {
            return Err(FormatError::ShapeMismatch(format!(
                "expected tensor {expected}, found {name}"
            )));
        }
        let rank = c.u8("rank")? as usize;
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(c.u32("extent")? as usize);
        }
        if &extents != shape {
            return Err(FormatError::ShapeMismatch(format!(
                "{name}: expected {shape:?}, found {extents:?}"
            )));
        }
        let data = c.f32s(extents.iter().product(), &name)?;
        tensors.push(Tensor::from_vec(&extents, data)?);
    }
    if c.remaining() != 0 {
        return Err(FormatError::ShapeMismatch(format!(
            "{} bytes after the last expected tensor",
            c.remaining()
        )));
    }
    let mut it = tensors.into_iter();
    let mut params = Vec::new();
    while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
        params.push(LayerParams { weight, bias });
    }
    Ok(MultipathCnn::from_params(spec.clone(), params)?)
}

pub fn save_checkpoint(path: &Path, model: &MultipathCnn, meta: &CheckpointMeta) -> FormatResult<()> {
    write_file(path, &encode_checkpoint(model)?)?;
    write_json(&sidecar_path(path), meta)
}

pub fn load_checkpoint(path: &Path) -> FormatResult<(MultipathCnn, CheckpointMeta)> {
    let meta: CheckpointMeta = read_json(&sidecar_path(path))?;
    if meta.layers != meta.model.layers() {
        return Err(FormatError::ShapeMismatch(
            "sidecar layer list disagrees with the model plan".into(),
        ));
    }
    let model = decode_checkpoint(&read_file(path)?, &meta.model)?;
    Ok((model, meta))
}

pub fn save_svm(path: &Path, model: &mpdetect_core::svm::SvmModel) -> FormatResult<()> {
    write_json(path, model)
}

pub fn load_svm(path: &Path) -> FormatResult<mpdetect_core::svm::SvmModel> {
    read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use mpdetect_core::dataset::{build_dataset, PhaseRule, ScenarioConfig};

    fn small_dataset() -> (mpdetect_core::dataset::Dataset, ScenarioConfig) {
        let cfg = ScenarioConfig::new(1e-3, 40.0, PhaseRule::Fixed(0.0));
        (build_dataset(&cfg, 6, 3, 11).unwrap(), cfg)
    }

    #[test]
    fn dataset_round_trip_keeps_tensors_and_labels() {
        let (ds, cfg) = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.gmpd");
        let manifest = DatasetManifest::new(&ds, 11, cfg.clone(), ExperimentConfig::default());
        write_dataset(&path, &ds, &manifest).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.n, 6);
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.tensor, b.tensor);
            assert_eq!(a.label, b.label);
            assert!(b.scenario.is_none());
        }
        let m = read_manifest(&path).unwrap();
        assert_eq!(m, manifest);
        assert_eq!(m.scenario, cfg);
    }

    #[test]
    fn dataset_header_layout() {
        let (ds, _) = small_dataset();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(&bytes[..4], b"GMPD");
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        assert_eq!([word(0), word(1), word(2), word(3), word(4)], [1, 6, 6, 2, 1]);
        assert_eq!(bytes.len(), 24 + 6 * (1 + 4 * 72));
        assert_eq!(bytes[24], ds.samples[0].label);
    }

    #[test]
    fn corrupt_datasets_give_distinct_errors() {
        let (ds, _) = small_dataset();
        let good = encode_dataset(&ds).unwrap();

        let mut magic = good.clone();
        magic[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_dataset(&magic), Err(FormatError::BadMagic { .. })));

        let mut version = good.clone();
        version[4] = 9;
        assert!(matches!(
            decode_dataset(&version),
            Err(FormatError::UnsupportedVersion { found: 9, supported: 1 })
        ));

        assert!(matches!(
            decode_dataset(&good[..good.len() - 3]),
            Err(FormatError::Truncated(_))
        ));
        assert!(matches!(decode_dataset(&good[..10]), Err(FormatError::Truncated(_))));

        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(decode_dataset(&extra), Err(FormatError::ShapeMismatch(_))));

        let mut channels = good.clone();
        channels[16] = 3;
        assert!(matches!(decode_dataset(&channels), Err(FormatError::ShapeMismatch(_))));

        let mut label = good.clone();
        label[24] = 7;
        assert!(matches!(decode_dataset(&label), Err(FormatError::Invalid(_))));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_dataset(&dir.path().join("nope.gmpd")),
            Err(FormatError::Io { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_reproduces_predictions() {
        let (ds, _) = small_dataset();
        let model = MultipathCnn::new(6, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gmpw");
        save_checkpoint(&path, &model, &CheckpointMeta::new(&model, None, 5)).unwrap();
        let (back, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta.init_seed, 5);
        assert_eq!(meta.model, model.spec);
        assert_eq!(back.predict(&ds.samples).unwrap(), model.predict(&ds.samples).unwrap());
    }

    #[test]
    fn checkpoint_layout_and_errors() {
        let model = MultipathCnn::new(6, 1).unwrap();
        let bytes = encode_checkpoint(&model).unwrap();
        assert_eq!(&bytes[..4], b"GMPW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let name_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!(&bytes[10..10 + name_len], b"conv1_1.weight");
        assert_eq!(bytes[10 + name_len], 4);

        let spec = model.spec.clone();
        assert!(decode_checkpoint(&bytes, &spec).is_ok());
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1], &spec),
            Err(FormatError::Truncated(_))
        ));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0, 0]);
        assert!(matches!(
            decode_checkpoint(&extra, &spec),
            Err(FormatError::ShapeMismatch(_))
        ));
        // n = 6 and n = 10 share every shape; n = 20 widens the first dense layer
        let other = ModelSpec::for_grid(20).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes, &other),
            Err(FormatError::ShapeMismatch(_))
        ));
        let mut magic = bytes.clone();
        magic[0] = b'Z';
        assert!(matches!(
            decode_checkpoint(&magic, &spec),
            Err(FormatError::BadMagic { .. })
        ));
    }
}
