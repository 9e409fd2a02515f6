//! IQ capture → 128×128 magnitude spectrogram.
//!
//! Frames of `FFT_LEN` samples start at `m·HOP`, are multiplied by a periodic
//! Hann window and transformed with a full complex DFT (no one-sided folding,
//! no DC centering unless [`StftConfig::fftshift`] is set). Magnitudes are
//! then right-padded with zero columns or cropped to `SPEC_SIZE` frames.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex32;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FRAME_LEN: usize = 1024;
pub const FFT_LEN: usize = 128;
pub const HOP: usize = 8;
pub const SPEC_SIZE: usize = 128;

/// Number of full frames that fit in one IQ frame: ⌊(1024−128)/8⌋+1.
pub const fn frame_count(len: usize, fft_len: usize, hop: usize) -> usize {
    if len < fft_len {
        0
    } else {
        (len - fft_len) / hop + 1
    }
}

/// A labeled complex baseband capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqRecord {
    pub samples: Vec<Complex32>,
    pub label: usize,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl IqRecord {
    pub fn new(samples: Vec<Complex32>, label: usize) -> Result<Self> {
        let rec = Self {
            samples,
            label,
            meta: BTreeMap::new(),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Data("IQ record has no samples".into()));
        }
        if self
            .samples
            .iter()
            .any(|s| !s.re.is_finite() || !s.im.is_finite())
        {
            return Err(Error::Data("IQ record contains non-finite samples".into()));
        }
        Ok(())
    }
}

/// Exactly [`FRAME_LEN`] complex samples.
#[derive(Debug, Clone, PartialEq)]
pub struct IqFrame {
    samples: Vec<Complex32>,
}

impl IqFrame {
    pub fn new(samples: Vec<Complex32>) -> Result<Self> {
        if samples.len() != FRAME_LEN {
            return Err(Error::Data(format!(
                "IQ frame must hold {FRAME_LEN} samples, got {}",
                samples.len()
            )));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Complex32] {
        &self.samples
    }
}

/// Non-negative `SPEC_SIZE × SPEC_SIZE` magnitude grid, row = frequency bin,
/// column = time frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    values: Vec<f32>,
    pub frame_id: Option<u64>,
}

impl Spectrogram {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != SPEC_SIZE * SPEC_SIZE {
            return Err(Error::Data(format!(
                "spectrogram must hold {} values, got {}",
                SPEC_SIZE * SPEC_SIZE,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data(
                "spectrogram values must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            values,
            frame_id: None,
        })
    }

    pub fn zeros() -> Self {
        Self {
            values: vec![0.0; SPEC_SIZE * SPEC_SIZE],
            frame_id: None,
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, freq: usize, time: usize) -> f32 {
        self.values[freq * SPEC_SIZE + time]
    }

    pub fn size(&self) -> usize {
        SPEC_SIZE
    }
}

/// Raw STFT magnitudes before the pad/crop step.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeGrid {
    pub bins: usize,
    pub frames: usize,
    /// Row-major `bins × frames`.
    pub values: Vec<f32>,
}

impl MagnitudeGrid {
    pub fn get(&self, bin: usize, frame: usize) -> f32 {
        self.values[bin * self.frames + frame]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_len: usize,
    pub hop: usize,
    /// Periodic (default) or symmetric Hann.
    pub periodic_window: bool,
    /// Move DC to the middle row. Off by default.
    pub fftshift: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_len: FFT_LEN,
            hop: HOP,
            periodic_window: true,
            fftshift: false,
        }
    }
}

/// First 1024 samples, zero-padded at the end when shorter.
pub fn frame_signal(rec: &IqRecord) -> Result<IqFrame> {
    if rec.samples.is_empty() {
        return Err(Error::Data("cannot frame an empty record".into()));
    }
    let mut samples: Vec<Complex32> = rec.samples.iter().take(FRAME_LEN).copied().collect();
    samples.resize(FRAME_LEN, Complex32::new(0.0, 0.0));
    IqFrame::new(samples)
}

/// Periodic Hann window `0.5·(1 − cos(2πk/n))`.
pub fn hann_window(n: usize) -> Result<Vec<f32>> {
    window(n, true)
}

fn window(n: usize, periodic: bool) -> Result<Vec<f32>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "Hann window needs at least 2 points, got {n}"
        )));
    }
    let denom = if periodic { n } else { n - 1 } as f64;
    Ok((0..n)
        .map(|k| (0.5 * (1.0 - (2.0 * std::f64::consts::PI * k as f64 / denom).cos())) as f32)
        .collect())
}

/// Short-time magnitude spectrum with the default configuration.
pub fn stft_magnitude(frame: &IqFrame) -> MagnitudeGrid {
    Stft::new(StftConfig::default())
        .expect("default STFT config is valid")
        .magnitude(frame.samples())
}

/// Reusable STFT with a cached FFT plan and window.
pub struct Stft {
    config: StftConfig,
    window: Vec<f32>,
    fft: std::sync::Arc<dyn rustfft::Fft<f32>>,
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self> {
        if config.hop == 0 {
            return Err(Error::Config("STFT hop must be positive".into()));
        }
        let window = window(config.fft_len, config.periodic_window)?;
        let fft = FftPlanner::new().plan_fft_forward(config.fft_len);
        Ok(Self {
            config,
            window,
            fft,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn magnitude(&self, samples: &[Complex32]) -> MagnitudeGrid {
        let n = self.config.fft_len;
        let frames = frame_count(samples.len(), n, self.config.hop);
        let mut values = vec![0.0f32; n * frames];
        let mut buf = vec![Complex32::new(0.0, 0.0); n];
        let mut scratch = vec![Complex32::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for m in 0..frames {
            let start = m * self.config.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = samples[start + i] * self.window[i];
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..n {
                let row = if self.config.fftshift {
                    (k + n / 2) % n
                } else {
                    k
                };
                values[row * frames + m] = buf[k].norm();
            }
        }
        MagnitudeGrid {
            bins: n,
            frames,
            values,
        }
    }

    pub fn spectrogram(&self, rec: &IqRecord) -> Result<Spectrogram> {
        let frame = frame_signal(rec)?;
        pad_crop_to_square(&self.magnitude(frame.samples()))
    }
}

/// Right-pads the time axis with zero columns or keeps the first
/// `SPEC_SIZE` frames.
pub fn pad_crop_to_square(raw: &MagnitudeGrid) -> Result<Spectrogram> {
    if raw.bins != SPEC_SIZE {
        return Err(Error::Data(format!(
            "expected {SPEC_SIZE} frequency rows, got {}",
            raw.bins
        )));
    }
    let keep = raw.frames.min(SPEC_SIZE);
    let mut values = vec![0.0f32; SPEC_SIZE * SPEC_SIZE];
    for k in 0..SPEC_SIZE {
        values[k * SPEC_SIZE..k * SPEC_SIZE + keep]
            .copy_from_slice(&raw.values[k * raw.frames..k * raw.frames + keep]);
    }
    Spectrogram::new(values)
}

/// frame → STFT magnitude → pad/crop. No normalization.
pub fn iq_to_spectrogram(rec: &IqRecord) -> Result<Spectrogram> {
    Stft::new(StftConfig::default())?.spectrogram(rec)
}

// ---------------------------------------------------------------------------
// File formats

/// Writes records as little-endian interleaved `f32` pairs, back to back.
/// Returns `(offset, length)` in complex samples for each record.
pub fn write_iq_file(path: &Path, records: &[&[Complex32]]) -> Result<Vec<(u64, usize)>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut index = Vec::with_capacity(records.len());
    let mut offset = 0u64;
    for rec in records {
        for s in rec.iter() {
            w.write_all(&s.re.to_le_bytes())
                .and_then(|_| w.write_all(&s.im.to_le_bytes()))
                .map_err(|e| Error::io(path, e))?;
        }
        index.push((offset, rec.len()));
        offset += rec.len() as u64;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(index)
}

/// Reads a whole interleaved-`f32` IQ file.
pub fn read_iq_file(path: &Path) -> Result<Vec<Complex32>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Data(format!(
            "{}: length {} is not a whole number of complex f32 samples",
            path.display(),
            bytes.len()
        )));
    }
    let samples: Vec<Complex32> = bytes
        .chunks_exact(8)
        .map(|c| {
            Complex32::new(
                f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
            )
        })
        .collect();
    if samples.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
        return Err(Error::Data(format!(
            "{}: contains non-finite samples",
            path.display()
        )));
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramCacheHeader {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<usize>,
}

/// Spectrogram cache: `<stem>.f32` holds raw little-endian row-major grids,
/// `<stem>.json` the count and labels.
pub fn write_spectrogram_cache(stem: &Path, specs: &[Spectrogram], labels: &[usize]) -> Result<()> {
    if specs.len() != labels.len() {
        return Err(Error::Data("spectrogram/label count mismatch".into()));
    }
    let header = SpectrogramCacheHeader {
        count: specs.len(),
        rows: SPEC_SIZE,
        cols: SPEC_SIZE,
        labels: labels.to_vec(),
    };
    let json_path = stem.with_extension("json");
    let bin_path = stem.with_extension("f32");
    std::fs::write(&json_path, serde_json::to_vec_pretty(&header)?)
        .map_err(|e| Error::io(&json_path, e))?;
    let file = File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut w = BufWriter::new(file);
    for s in specs {
        for v in s.values() {
            w.write_all(&v.to_le_bytes())
                .map_err(|e| Error::io(&bin_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&bin_path, e))
}

pub fn read_spectrogram_cache(stem: &Path) -> Result<(Vec<Spectrogram>, Vec<usize>)> {
    let json_path = stem.with_extension("json");
    let bin_path = stem.with_extension("f32");
    let header: SpectrogramCacheHeader = serde_json::from_slice(
        &std::fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?,
    )?;
    if header.rows != SPEC_SIZE || header.cols != SPEC_SIZE || header.labels.len() != header.count {
        return Err(Error::Data(format!(
            "{}: inconsistent spectrogram cache header",
            json_path.display()
        )));
    }
    let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let per = SPEC_SIZE * SPEC_SIZE;
    if bytes.len() != header.count * per * 4 {
        return Err(Error::Data(format!(
            "{}: expected {} bytes, found {}",
            bin_path.display(),
            header.count * per * 4,
            bytes.len()
        )));
    }
    let specs = bytes
        .chunks_exact(per * 4)
        .map(|chunk| {
            Spectrogram::new(
                chunk
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((specs, header.labels))
}
