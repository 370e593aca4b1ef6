//! Synthetic fault-signal domains, windowing and signal-file ingestion.
//!
//! A domain is one operating condition: shaft speed, load (carrier
//! amplitude) and sensor noise. Fault classes differ by the rate of
//! periodic impacts per revolution and the resonance they excite.

use std::f64::consts::PI;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultClass {
    pub class_id: usize,
    #[serde(default)]
    pub name: String,
    /// Impacts per revolution; 0 for a healthy bearing.
    pub impulse_rate: f64,
    pub impulse_amplitude: f64,
    pub resonance_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    pub rotation_hz: f64,
    pub load_scale: f64,
    pub noise_sigma: f64,
    pub n_per_class: usize,
    pub classes: Vec<FaultClass>,
    pub sample_rate_hz: f64,
    /// Damping ratio of the excited resonance.
    #[serde(default = "default_damping")]
    pub damping: f64,
}

fn default_damping() -> f64 {
    0.06
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("domain {}: {m}", self.domain_id)));
        if !(self.rotation_hz > 0.0) {
            return bad("rotation_hz must be > 0".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0".into());
        }
        if self.n_per_class < 1 {
            return bad("n_per_class must be >= 1".into());
        }
        if !(self.sample_rate_hz > 0.0) || !(self.damping > 0.0) {
            return bad("sample_rate_hz and damping must be > 0".into());
        }
        if self.classes.len() < 2 {
            return bad("at least two classes are required".into());
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.class_id != i {
                return bad(format!("class ids must be 0..C in order, found {} at {i}", c.class_id));
            }
            if !(c.impulse_rate >= 0.0) {
                return bad(format!("class {i}: impulse_rate must be >= 0"));
            }
        }
        Ok(())
    }
}

/// Fixed-length single-channel segments of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain_id: String,
    pub window_len: usize,
    pub num_classes: usize,
    segments: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl DomainDataset {
    pub fn new(
        domain_id: impl Into<String>,
        window_len: usize,
        num_classes: usize,
        segments: Vec<f64>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if window_len == 0 || !segments.len().is_multiple_of(window_len) {
            return Err(Error::Dataset(format!(
                "{} values do not split into windows of {window_len}",
                segments.len()
            )));
        }
        let n = segments.len() / window_len;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Dataset(format!("{} labels for {n} segments", l.len())));
            }
            if let Some(&bad) = l.iter().find(|&&v| v >= num_classes) {
                return Err(Error::Label {
                    label: bad,
                    classes: num_classes,
                });
            }
        }
        Ok(Self {
            domain_id: domain_id.into(),
            window_len,
            num_classes,
            segments,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len() / self.window_len
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn segment(&self, i: usize) -> &[f64] {
        &self.segments[i * self.window_len..(i + 1) * self.window_len]
    }

    pub fn segments_flat(&self) -> &[f64] {
        &self.segments
    }

    /// Copy with labels removed, as handed to unsupervised adaptation.
    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    /// `[rows.len(), 1, window_len]` batch.
    pub fn batch(&self, rows: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * self.window_len);
        for &r in rows {
            data.extend_from_slice(self.segment(r));
        }
        Tensor::new(vec![rows.len(), 1, self.window_len], data).expect("consistent")
    }

    pub fn all(&self) -> Tensor {
        Tensor::new(vec![self.len(), 1, self.window_len], self.segments.clone()).expect("consistent")
    }

    /// Per-segment zero mean, unit variance.
    pub fn standardized(&self) -> Self {
        let mut out = self.clone();
        normalize_per_segment(&mut out.segments, self.window_len);
        out
    }

    pub fn save(&self, dir: &Path, class_names: &[String]) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut seg = Vec::with_capacity(self.segments.len() * 8);
        for v in &self.segments {
            seg.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(SEGMENTS_FILE), seg)?;
        if let Some(labels) = &self.labels {
            let mut lb = Vec::with_capacity(labels.len() * 4);
            for &l in labels {
                lb.extend_from_slice(&(l as u32).to_le_bytes());
            }
            fs::write(dir.join(LABELS_FILE), lb)?;
        }
        let manifest = DatasetManifest {
            domain_id: self.domain_id.clone(),
            window_len: self.window_len,
            count: self.len(),
            num_classes: self.num_classes,
            class_map: class_names.to_vec(),
            has_labels: self.labels.is_some(),
            segments_file: SEGMENTS_FILE.into(),
            labels_file: self.labels.as_ref().map(|_| LABELS_FILE.to_string()),
            encoding: "f64-le / u32-le".into(),
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        if !mpath.exists() {
            return Err(Error::Missing(mpath));
        }
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
        let raw = fs::read(dir.join(&manifest.segments_file))?;
        let expected = manifest.count * manifest.window_len * 8;
        if raw.len() != expected {
            return Err(Error::Format {
                offset: raw.len() as u64,
                message: format!("segments file holds {} bytes, expected {expected}", raw.len()),
            });
        }
        let segments: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let labels = match &manifest.labels_file {
            Some(f) => {
                let raw = fs::read(dir.join(f))?;
                if raw.len() != manifest.count * 4 {
                    return Err(Error::Format {
                        offset: raw.len() as u64,
                        message: format!("labels file holds {} bytes, expected {}", raw.len(), manifest.count * 4),
                    });
                }
                Some(
                    raw.chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
                        .collect(),
                )
            }
            None => None,
        };
        Self::new(manifest.domain_id, manifest.window_len, manifest.num_classes, segments, labels)
    }
}

const MANIFEST_FILE: &str = "manifest.json";
const SEGMENTS_FILE: &str = "segments.bin";
const LABELS_FILE: &str = "labels.bin";

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    domain_id: String,
    window_len: usize,
    count: usize,
    num_classes: usize,
    class_map: Vec<String>,
    has_labels: bool,
    segments_file: String,
    labels_file: Option<String>,
    encoding: String,
}

/// Independent RNG stream for one sample, derived from its identity only.
fn sample_rng(seed: u64, domain_id: &str, split: &str, class_id: usize, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain_id.as_bytes());
    h.update([0u8]);
    h.update(split.as_bytes());
    h.update([0u8]);
    h.update((class_id as u64).to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn synthesize(spec: &DomainSpec, class: &FaultClass, window_len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = spec.sample_rate_hz;
    let phase = rng.random_range(0.0..2.0 * PI);
    let mut x: Vec<f64> = (0..window_len)
        .map(|n| spec.load_scale * (2.0 * PI * spec.rotation_hz * n as f64 / fs + phase).sin())
        .collect();
    if class.impulse_rate > 0.0 {
        let period = 1.0 / (class.impulse_rate * spec.rotation_hz);
        let decay = 2.0 * PI * class.resonance_hz * spec.damping;
        let horizon = 8.0 / decay;
        let duration = window_len as f64 / fs;
        // first impact may precede the window so ringing is already underway
        let mut t_k = -rng.random_range(0.0..period);
        let jitter = Normal::new(0.0, 0.02 * period).expect("valid");
        while t_k < duration {
            let onset = t_k + jitter.sample(rng);
            let first = ((onset * fs).ceil().max(0.0)) as usize;
            let last = (((onset + horizon) * fs).floor().max(0.0) as usize).min(window_len);
            for (n, v) in x.iter_mut().enumerate().take(last).skip(first) {
                let dt = n as f64 / fs - onset;
                *v += class.impulse_amplitude * (-decay * dt).exp() * (2.0 * PI * class.resonance_hz * dt).sin();
            }
            t_k += period;
        }
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma >= 0");
        x.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    x
}

/// Generates `n_per_class` raw segments per class, labels attached.
pub fn generate_domain(spec: &DomainSpec, window_len: usize, seed: u64) -> Result<DomainDataset> {
    generate_domain_split(spec, window_len, seed, "train")
}

/// Like [`generate_domain`] with a split tag mixed into every sample's seed,
/// so train and test draws never coincide.
pub fn generate_domain_split(
    spec: &DomainSpec,
    window_len: usize,
    seed: u64,
    split: &str,
) -> Result<DomainDataset> {
    spec.validate()?;
    if window_len == 0 {
        return Err(Error::Config("window_len must be positive".into()));
    }
    let mut segments = Vec::with_capacity(spec.classes.len() * spec.n_per_class * window_len);
    let mut labels = Vec::with_capacity(spec.classes.len() * spec.n_per_class);
    for i in 0..spec.n_per_class {
        for class in &spec.classes {
            let mut rng = sample_rng(seed, &spec.domain_id, split, class.class_id, i);
            segments.extend(synthesize(spec, class, window_len, &mut rng));
            labels.push(class.class_id);
        }
    }
    DomainDataset::new(spec.domain_id.clone(), window_len, spec.classes.len(), segments, Some(labels))
}

/// Windows at offsets `0, stride, 2·stride, …` that lie fully inside `signal`.
pub fn segment_signal(signal: &[f64], window: usize, stride: usize) -> Result<Vec<Vec<f64>>> {
    if window == 0 || stride == 0 {
        return Err(Error::Parameter("window and stride must be positive".into()));
    }
    if window > signal.len() {
        return Err(Error::SetSize(format!(
            "window {window} longer than signal of {} samples",
            signal.len()
        )));
    }
    Ok((0..=signal.len() - window)
        .step_by(stride)
        .map(|s| signal[s..s + window].to_vec())
        .collect())
}

/// Standardizes each `window`-length chunk in place (variance floor 1e-8).
pub fn normalize_per_segment(segments: &mut [f64], window: usize) {
    for seg in segments.chunks_mut(window.max(1)) {
        let n = seg.len() as f64;
        let mean = seg.iter().sum::<f64>() / n;
        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.max(1e-8).sqrt();
        seg.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
}

/// Layout of an external signal file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalSchema {
    /// One value per line; blank lines ignored.
    Text,
    /// Comma-separated; `column` is zero-based.
    Csv { column: usize, has_header: bool },
    /// `b"SIGF"`, `u32` sample width (4 or 8), `u64` sample count, then
    /// little-endian floats. All header integers little-endian.
    Binary,
}

pub const BINARY_MAGIC: &[u8; 4] = b"SIGF";
const BINARY_HEADER: usize = 16;

fn check_finite(values: &[f64]) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite sample at index {i}")));
    }
    Ok(())
}

pub fn load_signal_file(path: &Path, schema: &SignalSchema) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let values = match schema {
        SignalSchema::Text => {
            let text = fs::read_to_string(path)?;
            let mut out = Vec::new();
            let mut offset = 0u64;
            for line in text.split_inclusive('\n') {
                let t = line.trim();
                if !t.is_empty() {
                    out.push(t.parse::<f64>().map_err(|e| Error::Format {
                        offset,
                        message: format!("cannot parse {t:?}: {e}"),
                    })?);
                }
                offset += line.len() as u64;
            }
            out
        }
        SignalSchema::Csv { column, has_header } => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(*has_header)
                .flexible(true)
                .from_path(path)?;
            let mut out = Vec::new();
            for rec in reader.records() {
                let rec = rec?;
                let offset = rec.position().map_or(0, |p| p.byte());
                let cell = rec.get(*column).ok_or_else(|| Error::Format {
                    offset,
                    message: format!("row has {} columns, need column {column}", rec.len()),
                })?;
                out.push(cell.trim().parse::<f64>().map_err(|e| Error::Format {
                    offset,
                    message: format!("cannot parse {cell:?}: {e}"),
                })?);
            }
            out
        }
        SignalSchema::Binary => {
            let mut raw = Vec::new();
            fs::File::open(path)?.read_to_end(&mut raw)?;
            if raw.len() < BINARY_HEADER {
                return Err(Error::Format {
                    offset: raw.len() as u64,
                    message: format!("header needs {BINARY_HEADER} bytes, file has {}", raw.len()),
                });
            }
            if &raw[..4] != BINARY_MAGIC {
                return Err(Error::Format {
                    offset: 0,
                    message: "bad magic".into(),
                });
            }
            let width = u32::from_le_bytes(raw[4..8].try_into().expect("4 bytes")) as usize;
            let count = u64::from_le_bytes(raw[8..16].try_into().expect("8 bytes")) as usize;
            if width != 4 && width != 8 {
                return Err(Error::Format {
                    offset: 4,
                    message: format!("sample width {width} is not 4 or 8"),
                });
            }
            let body = &raw[BINARY_HEADER..];
            let expected = count * width;
            if body.len() != expected {
                return Err(Error::Format {
                    offset: raw.len() as u64,
                    message: format!(
                        "header declares {count} samples ({expected} bytes), found {} bytes",
                        body.len()
                    ),
                });
            }
            if width == 4 {
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect()
            } else {
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect()
            }
        }
    };
    check_finite(&values)?;
    Ok(values)
}

/// Serializes `values` in the [`SignalSchema::Binary`] layout.
pub fn encode_binary_signal(values: &[f64], width: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(BINARY_HEADER + values.len() * width);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for &v in values {
        if width == 4 {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Source domain followed by the ordered target domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub source: String,
    pub targets: Vec<String>,
}

impl Scenario {
    pub fn validate(&self, known: &[&str]) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("scenario.targets must list at least one domain".into()));
        }
        for id in std::iter::once(&self.source).chain(&self.targets) {
            if !known.contains(&id.as_str()) {
                return Err(Error::Config(format!("scenario references unknown domain {id:?}")));
            }
        }
        Ok(())
    }
}

/// Train and held-out test segments of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSplit {
    pub train: DomainDataset,
    pub test: DomainDataset,
}

impl DomainSplit {
    pub fn domain_id(&self) -> &str {
        &self.train.domain_id
    }
}
