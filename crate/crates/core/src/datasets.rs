//! Synthetic generators, CSV ingestion, normalization and windowing.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::artifact::write_atomic;
use crate::error::{Error, Result};
use crate::numcore::{Matrix, RngStream};

/// Per-channel affine map: `normalized = (raw - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl NormStats {
    pub fn channels(&self) -> usize {
        self.shift.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.shift.len() != self.scale.len() {
            return Err(Error::shape("normalization shift/scale length mismatch"));
        }
        if self.shift.iter().any(|v| !v.is_finite())
            || self.scale.iter().any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::numeric("normalization stats must be finite with scale > 0"));
        }
        Ok(())
    }

    /// Applies the forward map to an `S x D` window.
    pub fn apply(&self, w: &Matrix) -> Matrix {
        self.map(w, |x, shift, scale| (x - shift) / scale)
    }

    pub fn invert(&self, w: &Matrix) -> Matrix {
        self.map(w, |x, shift, scale| x * scale + shift)
    }

    fn map(&self, w: &Matrix, f: impl Fn(f64, f64, f64) -> f64) -> Matrix {
        let mut out = w.clone();
        let d = w.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % d;
            *v = f(*v, self.shift[c], self.scale[c]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    Sines(SinesParams),
    BimodalFrequency(BimodalParams),
    File { path: PathBuf, stride: Option<usize> },
    Generated,
    InMemory,
}

/// A set of equally shaped `S x D` windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    windows: Vec<Matrix>,
    seq_len: usize,
    channels: usize,
    stats: Option<NormStats>,
    labels: Option<Vec<usize>>,
    channel_names: Vec<String>,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(
        seq_len: usize,
        channels: usize,
        windows: Vec<Matrix>,
        provenance: Provenance,
    ) -> Result<Self> {
        if seq_len == 0 || channels == 0 {
            return Err(Error::shape("windows need S >= 1 and D >= 1"));
        }
        for (i, w) in windows.iter().enumerate() {
            if w.rows() != seq_len || w.cols() != channels {
                return Err(Error::shape(format!(
                    "window {i} is {}x{}, expected {seq_len}x{channels}",
                    w.rows(),
                    w.cols()
                )));
            }
        }
        Ok(Self {
            windows,
            seq_len,
            channels,
            stats: None,
            labels: None,
            channel_names: default_names(channels),
            provenance,
        })
    }

    /// Builds a dataset from flattened row-major windows of length `S*D`.
    pub fn from_flat(
        seq_len: usize,
        channels: usize,
        flat: Vec<Vec<f64>>,
        provenance: Provenance,
    ) -> Result<Self> {
        let windows = flat
            .into_iter()
            .map(|v| Matrix::from_vec(seq_len, channels, v))
            .collect::<Result<Vec<_>>>()?;
        Self::new(seq_len, channels, windows, provenance)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.windows.len() {
            return Err(Error::shape("one label per window required"));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_channel_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.channels {
            return Err(Error::shape("one name per channel required"));
        }
        self.channel_names = names;
        Ok(self)
    }

    pub fn with_stats(mut self, stats: Option<NormStats>) -> Result<Self> {
        if let Some(s) = &stats {
            s.validate()?;
            if s.channels() != self.channels {
                return Err(Error::shape("normalization stats channel count mismatch"));
            }
        }
        self.stats = stats;
        Ok(self)
    }

    pub fn windows(&self) -> &[Matrix] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stats(&self) -> Option<&NormStats> {
        self.stats.as_ref()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn flat(&self) -> Vec<Vec<f64>> {
        self.windows.iter().map(|w| w.data().to_vec()).collect()
    }

    /// The windows at `idx`, keeping labels aligned.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            windows: idx.iter().map(|&i| self.windows[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            ..self.clone_empty()
        }
    }

    fn clone_empty(&self) -> Dataset {
        Dataset {
            windows: Vec::new(),
            seq_len: self.seq_len,
            channels: self.channels,
            stats: self.stats.clone(),
            labels: None,
            channel_names: self.channel_names.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Min-max statistics mapping each channel onto `[-1, 1]`.
    /// Constant channels get shift 0 and scale 1.
    pub fn min_max_stats(&self) -> NormStats {
        let d = self.channels;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for w in &self.windows {
            for (i, &v) in w.data().iter().enumerate() {
                let c = i % d;
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
        let mut shift = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for c in 0..d {
            if hi[c] > lo[c] {
                shift[c] = 0.5 * (hi[c] + lo[c]);
                scale[c] = 0.5 * (hi[c] - lo[c]);
            }
        }
        NormStats { shift, scale }
    }

    /// Normalizes with freshly computed min-max statistics, which are stored.
    pub fn normalize(&self) -> Dataset {
        let stats = self.min_max_stats();
        self.normalize_with(&stats)
    }

    pub fn normalize_with(&self, stats: &NormStats) -> Dataset {
        Dataset {
            windows: self.windows.iter().map(|w| stats.apply(w)).collect(),
            labels: self.labels.clone(),
            stats: Some(stats.clone()),
            ..self.clone_empty()
        }
    }

    /// Inverts the stored normalization. Without stats this is a copy.
    pub fn denormalize(&self) -> Dataset {
        match &self.stats {
            None => self.clone(),
            Some(stats) => Dataset {
                windows: self.windows.iter().map(|w| stats.invert(w)).collect(),
                labels: self.labels.clone(),
                stats: None,
                ..self.clone_empty()
            },
        }
    }
}

fn default_names(channels: usize) -> Vec<String> {
    (0..channels).map(|c| format!("c{c}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinesParams {
    pub n: usize,
    pub seq_len: usize,
    pub channels: usize,
    /// Cycles per window.
    pub freq: (f64, f64),
    pub phase: (f64, f64),
}

impl Default for SinesParams {
    fn default() -> Self {
        Self {
            n: 1000,
            seq_len: 24,
            channels: 5,
            freq: (0.0, 1.0),
            phase: (-PI, PI),
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::config(format!("invalid {name} range ({lo}, {hi})")));
    }
    Ok(())
}

/// Channel `i` of each window is `sin(2 pi eta s / S + theta)` with `eta` and
/// `theta` drawn per channel.
pub fn gen_sines(params: &SinesParams, rng: &mut RngStream) -> Result<Dataset> {
    check_range("frequency", params.freq)?;
    check_range("phase", params.phase)?;
    if params.n == 0 {
        return Err(Error::config("sines needs n >= 1"));
    }
    let (s_len, d) = (params.seq_len, params.channels);
    let mut windows = Vec::with_capacity(params.n);
    for _ in 0..params.n {
        let mut w = Matrix::zeros(s_len, d);
        for c in 0..d {
            let eta = rng.uniform_in(params.freq.0, params.freq.1);
            let theta = rng.uniform_in(params.phase.0, params.phase.1);
            for s in 0..s_len {
                w.set(s, c, (2.0 * PI * eta * s as f64 / s_len as f64 + theta).sin());
            }
        }
        windows.push(w);
    }
    Dataset::new(s_len, d, windows, Provenance::Sines(params.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BimodalParams {
    pub n: usize,
    pub seq_len: usize,
    pub channels: usize,
    pub f_low: f64,
    pub f_high: f64,
}

impl Default for BimodalParams {
    fn default() -> Self {
        Self {
            n: 2000,
            seq_len: 64,
            channels: 1,
            f_low: 2.0,
            f_high: 8.0,
        }
    }
}

/// Each window is a pure tone at `f_low` (label 0) or `f_high` (label 1)
/// cycles per window, chosen with equal probability, with a random phase per
/// channel.
pub fn gen_bimodal_frequency(params: &BimodalParams, rng: &mut RngStream) -> Result<Dataset> {
    let nyquist = params.seq_len as f64 / 2.0;
    for f in [params.f_low, params.f_high] {
        if !(f > 0.0 && f < nyquist) {
            return Err(Error::config(format!(
                "frequency {f} is not resolvable below S/2 = {nyquist}"
            )));
        }
    }
    if params.f_low == params.f_high {
        return Err(Error::config("the two regimes need distinct frequencies"));
    }
    if params.n == 0 {
        return Err(Error::config("bimodal set needs n >= 1"));
    }
    let (s_len, d) = (params.seq_len, params.channels);
    let mut windows = Vec::with_capacity(params.n);
    let mut labels = Vec::with_capacity(params.n);
    for _ in 0..params.n {
        let label = usize::from(rng.bernoulli(0.5));
        let f = if label == 0 { params.f_low } else { params.f_high };
        let mut w = Matrix::zeros(s_len, d);
        for c in 0..d {
            let theta = rng.uniform_in(-PI, PI);
            for s in 0..s_len {
                w.set(s, c, (2.0 * PI * f * s as f64 / s_len as f64 + theta).sin());
            }
        }
        windows.push(w);
        labels.push(label);
    }
    Dataset::new(s_len, d, windows, Provenance::BimodalFrequency(params.clone()))?
        .with_labels(labels)
}

/// Two-mode velocity diagnostic: `u = x1 - x0 = +-c` in every coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSpec {
    pub c: f64,
    /// Weight of the `+c` mode; the `-c` mode gets `1 - w`.
    pub w: f64,
    pub n: usize,
    pub dim: usize,
}

impl Default for DiagnosticSpec {
    fn default() -> Self {
        Self {
            c: 2.0,
            w: 0.5,
            n: 5000,
            dim: 1,
        }
    }
}

impl DiagnosticSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.c.is_finite() {
            return Err(Error::config("separation c must be finite"));
        }
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::config("mixture weight must lie in [0, 1]"));
        }
        if self.n == 0 || self.dim == 0 {
            return Err(Error::config("diagnostic needs n >= 1 and dim >= 1"));
        }
        Ok(())
    }

    pub fn weights(&self) -> [f64; 2] {
        [self.w, 1.0 - self.w]
    }

    /// Population values: mean velocity `(w+ - w-) c`, energy `c^2`, and
    /// gap `c^2 (1 - (w+ - w-)^2)`.
    pub fn expected(&self) -> (f64, f64, f64) {
        let m = (2.0 * self.w - 1.0) * self.c;
        let energy = self.c * self.c;
        (m, energy, energy - m * m)
    }
}

/// Parses `key=value` pairs separated by commas, e.g. `c=2,w=0.5,n=5000`.
impl FromStr for DiagnosticSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = DiagnosticSpec::default();
        for (i, part) in s.split(',').enumerate() {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("item {} ({part:?}) is not key=value", i + 1)))?;
            let bad = || Error::config(format!("bad value for {key}: {value:?}"));
            match key.trim() {
                "c" => spec.c = value.trim().parse().map_err(|_| bad())?,
                "w" => spec.w = value.trim().parse().map_err(|_| bad())?,
                "n" => spec.n = value.trim().parse().map_err(|_| bad())?,
                "dim" => spec.dim = value.trim().parse().map_err(|_| bad())?,
                other => return Err(Error::config(format!("unknown diagnostic key {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticPairs {
    pub x0: Vec<Vec<f64>>,
    pub x1: Vec<Vec<f64>>,
    /// `+1` or `-1` per pair.
    pub signs: Vec<f64>,
}

impl DiagnosticPairs {
    pub fn velocities(&self) -> Vec<Vec<f64>> {
        self.x0
            .iter()
            .zip(&self.x1)
            .map(|(a, b)| b.iter().zip(a).map(|(b, a)| b - a).collect())
            .collect()
    }
}

pub fn gen_velocity_mixture_diagnostic(
    spec: &DiagnosticSpec,
    rng: &mut RngStream,
) -> Result<DiagnosticPairs> {
    spec.validate()?;
    let mut pairs = DiagnosticPairs {
        x0: Vec::with_capacity(spec.n),
        x1: Vec::with_capacity(spec.n),
        signs: Vec::with_capacity(spec.n),
    };
    for _ in 0..spec.n {
        let x0 = rng.normal_vec(spec.dim);
        let s = if rng.bernoulli(spec.w) { 1.0 } else { -1.0 };
        pairs.x1.push(x0.iter().map(|v| v + s * spec.c).collect());
        pairs.x0.push(x0);
        pairs.signs.push(s);
    }
    Ok(pairs)
}

/// Empirical velocity statistics. Norms are averaged over coordinates so the
/// values do not scale with `dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub mean_velocity: f64,
    /// `||mean u||^2`.
    pub mean_energy_of_mean: f64,
    /// `mean ||u||^2`.
    pub mean_energy: f64,
    pub gap: f64,
    pub expected_mean_velocity: f64,
    pub expected_gap: f64,
}

pub fn diagnostic_report(spec: &DiagnosticSpec, pairs: &DiagnosticPairs) -> DiagnosticReport {
    let u = pairs.velocities();
    let n = u.len().max(1) as f64;
    let dim = spec.dim as f64;
    let mut mean = vec![0.0; spec.dim];
    let mut energy = 0.0;
    for row in &u {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
        energy += row.iter().map(|v| v * v).sum::<f64>() / (n * dim);
    }
    let energy_of_mean = mean.iter().map(|m| m * m).sum::<f64>() / dim;
    let (em, _, eg) = spec.expected();
    DiagnosticReport {
        mean_velocity: mean.iter().sum::<f64>() / dim,
        mean_energy_of_mean: energy_of_mean,
        mean_energy: energy,
        gap: energy - energy_of_mean,
        expected_mean_velocity: em,
        expected_gap: eg,
    }
}

/// How a CSV file is cut into windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    /// Each blank-line separated block is one window.
    Blocks,
    /// Sliding windows of `seq_len` rows, never crossing a blank line.
    Sliding { seq_len: usize, stride: usize },
}

struct Table<T> {
    header: Vec<String>,
    blocks: Vec<Vec<Vec<T>>>,
}

fn parse_table<T>(text: &str, cell: impl Fn(&str) -> Option<T>) -> Result<Table<T>> {
    let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, head) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| Error::Parse {
            line: 1,
            column: 1,
            message: "missing header row".into(),
        })?;
    let header: Vec<String> = head.split(',').map(|h| h.trim().to_string()).collect();
    if let Some(c) = header.iter().position(|h| h.is_empty()) {
        return Err(Error::Parse {
            line: 1,
            column: c + 1,
            message: "empty channel name".into(),
        });
    }
    let mut blocks: Vec<Vec<Vec<T>>> = Vec::new();
    let mut current: Vec<Vec<T>> = Vec::new();
    for (line, raw) in lines {
        if raw.trim().is_empty() {
            if !current.is_empty() {
                blocks.push(std::mem::take(&mut current));
            }
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != header.len() {
            return Err(Error::Parse {
                line,
                column: fields.len().min(header.len()) + 1,
                message: format!("expected {} cells, found {}", header.len(), fields.len()),
            });
        }
        let row = fields
            .iter()
            .enumerate()
            .map(|(c, f)| {
                cell(f.trim()).ok_or_else(|| Error::Parse {
                    line,
                    column: c + 1,
                    message: format!("invalid cell {:?}", f.trim()),
                })
            })
            .collect::<Result<Vec<T>>>()?;
        current.push(row);
    }
    if !current.is_empty() {
        blocks.push(current);
    }
    Ok(Table { header, blocks })
}

fn real_cell(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Parses CSV text in the dataset format.
pub fn parse_csv_windows(text: &str, mode: WindowMode) -> Result<Dataset> {
    let table = parse_table(text, real_cell)?;
    let d = table.header.len();
    let rows_to_matrix = |rows: &[Vec<f64>]| {
        Matrix::from_vec(rows.len(), d, rows.iter().flatten().copied().collect())
    };
    let (seq_len, windows) = match mode {
        WindowMode::Blocks => {
            let s = table.blocks.first().map_or(0, |b| b.len());
            if let Some(i) = table.blocks.iter().position(|b| b.len() != s) {
                return Err(Error::contract(format!(
                    "block {} has {} rows, expected {s}",
                    i + 1,
                    table.blocks[i].len()
                )));
            }
            let windows = table
                .blocks
                .iter()
                .map(|b| rows_to_matrix(b))
                .collect::<Result<Vec<_>>>()?;
            (s.max(1), windows)
        }
        WindowMode::Sliding { seq_len, stride } => {
            if seq_len == 0 || stride == 0 {
                return Err(Error::config("window length and stride must be >= 1"));
            }
            let mut windows = Vec::new();
            for block in &table.blocks {
                if block.len() < seq_len {
                    log::warn!(
                        "skipping a block of {} rows, shorter than the window length {seq_len}",
                        block.len()
                    );
                    continue;
                }
                let count = (block.len() - seq_len) / stride + 1;
                for k in 0..count {
                    windows.push(rows_to_matrix(&block[k * stride..k * stride + seq_len])?);
                }
            }
            if windows.is_empty() {
                return Err(Error::contract(format!(
                    "fewer than {seq_len} rows available for a window"
                )));
            }
            (seq_len, windows)
        }
    };
    Dataset::new(seq_len, d, windows, Provenance::InMemory)?.with_channel_names(table.header)
}

/// Loads sliding windows of `seq_len` rows every `stride` rows.
pub fn load_csv_windows(path: &Path, seq_len: usize, stride: usize) -> Result<Dataset> {
    load_csv(path, WindowMode::Sliding { seq_len, stride })
}

pub fn load_csv(path: &Path, mode: WindowMode) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ds = parse_csv_windows(&text, mode)?;
    let stride = match mode {
        WindowMode::Blocks => None,
        WindowMode::Sliding { stride, .. } => Some(stride),
    };
    Ok(Dataset {
        provenance: Provenance::File {
            path: path.to_path_buf(),
            stride,
        },
        ..ds
    })
}

/// Parses a 0/1 mask file (same layout as the data format) into blocks of
/// `rows x channels` booleans.
pub fn parse_mask_csv(text: &str) -> Result<Vec<Vec<Vec<bool>>>> {
    let table = parse_table(text, |s| match s {
        "1" | "true" => Some(true),
        "0" | "false" => Some(false),
        _ => None,
    })?;
    Ok(table.blocks)
}

/// Blank-line separated CSV; an empty dataset yields only the header.
pub fn write_csv(ds: &Dataset) -> String {
    let mut out = ds.channel_names.join(",");
    out.push('\n');
    for (i, w) in ds.windows.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for s in 0..w.rows() {
            for (c, v) in w.row(s).iter().enumerate() {
                if c > 0 {
                    out.push(',');
                }
                write!(out, "{v}").expect("writing to a string");
            }
            out.push('\n');
        }
    }
    out
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, write_csv(ds).as_bytes())
}
