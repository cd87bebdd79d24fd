//! Datasets, class balancing, per-group normalization, the synthetic order
//! task, WAV ingestion and log-mel features.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::WavError;
use crate::{Error, Matrix, Result, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceExample {
    /// `k x l`, one column per frame.
    pub features: Matrix,
    pub label: usize,
    /// Speaker or other normalization group.
    pub group: String,
    pub source_id: String,
    /// Set on copies appended by [`balance_classes`].
    pub duplicate: bool,
}

impl SequenceExample {
    pub fn new(features: Matrix, label: usize, group: impl Into<String>, source_id: impl Into<String>) -> Self {
        Self {
            features,
            label,
            group: group.into(),
            source_id: source_id.into(),
            duplicate: false,
        }
    }

    pub fn len(&self) -> usize {
        self.features.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.features.cols() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<SequenceExample>,
    pub classes: usize,
    pub input_dim: usize,
}

impl Dataset {
    pub fn new(examples: Vec<SequenceExample>, classes: usize) -> Result<Self> {
        let input_dim = examples.first().map_or(0, |e| e.features.rows());
        for (i, e) in examples.iter().enumerate() {
            if e.features.rows() != input_dim {
                return Err(Error::Data(format!(
                    "example {i} ({}) has {} features, expected {input_dim}",
                    e.source_id,
                    e.features.rows()
                )));
            }
            if e.is_empty() {
                return Err(Error::Data(format!("example {i} ({}) has no frames", e.source_id)));
            }
            if e.label >= classes {
                return Err(Error::LabelOutOfRange {
                    label: e.label,
                    classes,
                });
            }
        }
        Ok(Self {
            examples,
            classes,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }
}

/// Brings every class up to the majority count by appending duplicates.
///
/// Duplicates are drawn in rounds: each round visits every original of the
/// class once, in random order, before any original is used again.
pub fn balance_classes(d: &Dataset, rng: &mut Rng) -> Result<Dataset> {
    let counts = d.class_counts();
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(c));
    }
    let target = counts.iter().copied().max().unwrap_or(0);
    let mut examples = d.examples.clone();
    for (class, &count) in counts.iter().enumerate() {
        let originals: Vec<usize> = d
            .examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == class)
            .map(|(i, _)| i)
            .collect();
        let mut need = target - count;
        while need > 0 {
            let mut round = originals.clone();
            rng.shuffle(&mut round);
            for &i in round.iter().take(need) {
                let mut copy = d.examples[i].clone();
                copy.duplicate = true;
                examples.push(copy);
            }
            need -= need.min(round.len());
        }
    }
    Dataset::new(examples, d.classes)
}

/// Per-group, per-feature mean and standard deviation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub groups: BTreeMap<String, FeatureStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const MIN_STD: f64 = 1e-8;

pub fn group_stats(d: &Dataset) -> GroupStats {
    let k = d.input_dim;
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for e in &d.examples {
        let entry = sums.entry(&e.group).or_insert_with(|| (vec![0.0; k], 0));
        for (f, s) in entry.0.iter_mut().enumerate() {
            *s += e.features.row(f).iter().sum::<f64>();
        }
        entry.1 += e.len();
    }
    let means: BTreeMap<&str, Vec<f64>> = sums
        .into_iter()
        .map(|(g, (s, n))| (g, s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let mut sq: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for e in &d.examples {
        let mean = &means[e.group.as_str()];
        let entry = sq.entry(&e.group).or_insert_with(|| (vec![0.0; k], 0));
        for (f, s) in entry.0.iter_mut().enumerate() {
            *s += e.features.row(f).iter().map(|v| (v - mean[f]).powi(2)).sum::<f64>();
        }
        entry.1 += e.len();
    }
    let groups = sq
        .into_iter()
        .map(|(g, (s, n))| {
            let std = s.into_iter().map(|v| (v / n as f64).sqrt()).collect();
            (
                g.to_string(),
                FeatureStats {
                    mean: means[g].clone(),
                    std,
                },
            )
        })
        .collect();
    GroupStats { groups }
}

/// Applies stored statistics. Features whose std is below `1e-8` become 0.
pub fn apply_normalization(d: &Dataset, stats: &GroupStats) -> Result<Dataset> {
    let mut out = d.clone();
    for e in &mut out.examples {
        let s = stats
            .groups
            .get(&e.group)
            .ok_or_else(|| Error::Data(format!("no normalization statistics for group `{}`", e.group)))?;
        let cols = e.features.cols();
        let data = e.features.data_mut();
        for f in 0..s.mean.len() {
            for v in &mut data[f * cols..(f + 1) * cols] {
                *v = if s.std[f] < MIN_STD {
                    0.0
                } else {
                    (*v - s.mean[f]) / s.std[f]
                };
            }
        }
    }
    Ok(out)
}

pub fn normalize_per_group(d: &Dataset) -> (Dataset, GroupStats) {
    let stats = group_stats(d);
    let out = apply_normalization(d, &stats).expect("statistics cover every group");
    (out, stats)
}

/// Frames per ramp in [`gen_order_task`].
pub const RAMP_LEN: usize = 5;
pub const ORDER_NOISE: f64 = 0.05;

/// Two-class sequences built from 5-frame ramps per feature: class 0 ramps
/// ascend, class 1 ramps hold the same values in descending order.
///
/// Ramp `j` of a feature takes the values `a + s * t`, `t = 0..5`, with
/// `a ~ U[-1, -0.6]` and `s ~ U[0.3, 0.5]`, so window sums and maxima have
/// the same distribution in both classes. Labels alternate, starting with 0.
pub fn gen_order_task(count: usize, k: usize, l: usize, rng: &mut Rng) -> Result<Dataset> {
    if l < RAMP_LEN {
        return Err(Error::Config(format!(
            "order task needs l >= {RAMP_LEN}, got {l}"
        )));
    }
    if k == 0 {
        return Err(Error::Config("order task needs k >= 1".into()));
    }
    let ramps = l.div_ceil(RAMP_LEN);
    let mut examples = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % 2;
        let mut m = Matrix::zeros(k, l);
        for f in 0..k {
            for r in 0..ramps {
                let a = rng.uniform(-1.0, -0.6);
                let s = rng.uniform(0.3, 0.5);
                for t in 0..RAMP_LEN {
                    let col = r * RAMP_LEN + t;
                    if col >= l {
                        break;
                    }
                    let step = if label == 0 { t } else { RAMP_LEN - 1 - t };
                    m.set(f, col, a + s * step as f64);
                }
            }
        }
        for v in m.data_mut() {
            *v += rng.normal(0.0, ORDER_NOISE);
        }
        examples.push(SequenceExample::new(m, label, "synthetic", format!("order-{i}")));
    }
    Dataset::new(examples, 2)
}

// ---------------------------------------------------------------------------
// WAV

/// Decodes a RIFF/WAVE PCM16 byte stream into samples in `[-1, 1)`.
/// Stereo frames are averaged.
pub fn parse_wav(bytes: &[u8]) -> Result<(Vec<f64>, u32)> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(WavError::BadMagic.into());
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let mut pos = 12;
    let mut format: Option<(u16, u32)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if body + 16 > bytes.len() {
                    return Err(WavError::Truncated {
                        declared: size,
                        available: bytes.len() - body,
                    }
                    .into());
                }
                let code = u16_at(body);
                if code != 1 {
                    return Err(WavError::NotPcm(code).into());
                }
                let channels = u16_at(body + 2);
                let bits = u16_at(body + 14);
                if bits != 16 || !(1..=2).contains(&channels) {
                    return Err(WavError::Layout { channels, bits }.into());
                }
                format = Some((channels, u32_at(body + 4)));
            }
            b"data" => {
                let (channels, rate) = format.ok_or(WavError::MissingFmt)?;
                let available = bytes.len() - body;
                if available < size {
                    return Err(WavError::Truncated {
                        declared: size,
                        available,
                    }
                    .into());
                }
                let frame_bytes = 2 * channels as usize;
                let samples = bytes[body..body + size]
                    .chunks_exact(frame_bytes)
                    .map(|frame| {
                        let sum: f64 = frame
                            .chunks_exact(2)
                            .map(|s| i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0)
                            .sum();
                        sum / channels as f64
                    })
                    .collect();
                return Ok((samples, rate));
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(WavError::MissingData.into())
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes)
}

/// Encodes mono PCM16. Samples are clamped to `[-1, 1]` and scaled by 32768.
pub fn encode_wav(samples: &[f64], rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], rate: u32) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(samples, rate)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Log-mel filterbank

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub filters: usize,
    pub low_hz: f64,
    /// Upper edge; `None` means the Nyquist frequency.
    pub high_hz: Option<f64>,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            hop_ms: 10.0,
            filters: 26,
            low_hz: 0.0,
            high_hz: None,
            log_floor: 1e-10,
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hop_ms > 0.0 && self.window_ms > self.hop_ms) {
            return Err(Error::Config(format!(
                "mel window ({} ms) must exceed hop ({} ms) > 0",
                self.window_ms, self.hop_ms
            )));
        }
        if self.filters == 0 {
            return Err(Error::Config("mel filter count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn window_samples(&self, rate: u32) -> usize {
        (rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, rate: u32) -> usize {
        (rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn fft_size(&self, rate: u32) -> usize {
        self.window_samples(rate).next_power_of_two()
    }

    pub fn frame_count(&self, samples: usize, rate: u32) -> usize {
        let win = self.window_samples(rate);
        if samples < win {
            0
        } else {
            1 + (samples - win) / self.hop_samples(rate)
        }
    }

    /// Center frequencies of the filters, in Hz.
    pub fn centers(&self, rate: u32) -> Vec<f64> {
        self.edges(rate)[1..=self.filters].to_vec()
    }

    /// `filters + 2` points equally spaced on the mel scale.
    fn edges(&self, rate: u32) -> Vec<f64> {
        let lo = hz_to_mel(self.low_hz);
        let hi = hz_to_mel(self.high_hz.unwrap_or(rate as f64 / 2.0));
        let step = (hi - lo) / (self.filters + 1) as f64;
        (0..self.filters + 2)
            .map(|i| mel_to_hz(lo + step * i as f64))
            .collect()
    }

    /// Triangular weights, `filters x (fft_size / 2 + 1)`, peaking at 1.
    pub fn filterbank(&self, rate: u32) -> Matrix {
        let n_fft = self.fft_size(rate);
        let bins = n_fft / 2 + 1;
        let edges = self.edges(rate);
        let mut fb = Matrix::zeros(self.filters, bins);
        for j in 0..self.filters {
            let (left, center, right) = (edges[j], edges[j + 1], edges[j + 2]);
            for b in 0..bins {
                let f = b as f64 * rate as f64 / n_fft as f64;
                let w = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                fb.set(j, b, w);
            }
        }
        fb
    }
}

/// Symmetric Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// `filters x frames` log-mel energies.
pub fn log_mel(samples: &[f64], rate: u32, cfg: &MelConfig) -> Result<Matrix> {
    cfg.validate()?;
    let win = cfg.window_samples(rate);
    let hop = cfg.hop_samples(rate);
    if win == 0 || hop == 0 {
        return Err(Error::Config(format!("sample rate {rate} too low for the mel window")));
    }
    let frames = cfg.frame_count(samples.len(), rate);
    if frames == 0 {
        return Err(Error::SequenceTooShort {
            len: samples.len(),
            width: win,
        });
    }
    let n_fft = cfg.fft_size(rate);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(n_fft);
    let window = hann(win);
    let fb = cfg.filterbank(rate);
    let bins = n_fft / 2 + 1;
    let mut out = Matrix::zeros(cfg.filters, frames);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; bins];
    for t in 0..frames {
        let start = t * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < win {
                Complex::new(samples[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for j in 0..cfg.filters {
            let e: f64 = fb.row(j).iter().zip(&power).map(|(w, p)| w * p).sum();
            out.set(j, t, e.max(cfg.log_floor).ln());
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Manifests and feature files

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub group: String,
}

/// Parses `path,label,group` lines. Blank lines and `#` comments are
/// skipped; relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 || fields[0].is_empty() {
            return Err(Error::Data(format!(
                "manifest line {}: expected `path,label,group`, got `{line}`",
                i + 1
            )));
        }
        let label = fields[1].parse().map_err(|_| {
            Error::Data(format!("manifest line {}: bad label `{}`", i + 1, fields[1]))
        })?;
        let p = Path::new(fields[0]);
        entries.push(ManifestEntry {
            path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
            label,
            group: fields[2].to_string(),
        });
    }
    Ok(entries)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!("{},{},{}\n", e.path.display(), e.label, e.group));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Three header lines (`k=`, `l=`, `order=row-major`) then `k` rows of `l`
/// comma-separated values.
pub fn format_feature_csv(m: &Matrix) -> String {
    let mut s = format!("k={}\nl={}\norder=row-major\n", m.rows(), m.cols());
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn parse_feature_csv(text: &str) -> Result<Matrix> {
    let mut lines = text.lines();
    let mut header = |key: &str| -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| Error::Data(format!("feature file: missing `{key}=` header")))?;
        line.trim()
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .map(str::to_string)
            .ok_or_else(|| Error::Data(format!("feature file: expected `{key}=`, got `{line}`")))
    };
    let dim = |v: String, key: &str| {
        v.parse::<usize>()
            .map_err(|_| Error::Data(format!("feature file: bad {key} `{v}`")))
    };
    let k = dim(header("k")?, "k")?;
    let l = dim(header("l")?, "l")?;
    let order = header("order")?;
    if order != "row-major" {
        return Err(Error::Data(format!("feature file: unsupported order `{order}`")));
    }
    let mut data = Vec::with_capacity(k * l);
    let mut rows = 0;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let before = data.len();
        for v in line.split(',') {
            let x: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("feature file: bad value `{v}`")))?;
            data.push(x);
        }
        if data.len() - before != l {
            return Err(Error::Data(format!(
                "feature file: row {} has {} values, expected {l}",
                rows + 1,
                data.len() - before
            )));
        }
        rows += 1;
    }
    if rows != k {
        return Err(Error::Data(format!("feature file: {rows} rows, expected {k}")));
    }
    Matrix::from_vec(k, l, data)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_csv(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_features(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_feature_csv(m)).map_err(|e| Error::io(path, e))
}

/// Loads every manifest entry. `.wav` entries are converted with `mel`;
/// anything else is read as a feature file.
pub fn load_dataset(path: impl AsRef<Path>, classes: usize, mel: &MelConfig) -> Result<Dataset> {
    let entries = read_manifest(path)?;
    let mut examples = Vec::with_capacity(entries.len());
    for e in entries {
        let is_wav = e
            .path
            .extension()
            .is_some_and(|x| x.eq_ignore_ascii_case("wav"));
        let features = if is_wav {
            let (samples, rate) = read_wav(&e.path)?;
            log_mel(&samples, rate, mel)?
        } else {
            read_features(&e.path)?
        };
        examples.push(SequenceExample::new(
            features,
            e.label,
            e.group,
            e.path.display().to_string(),
        ));
    }
    Dataset::new(examples, classes)
}
