//! Labeled synthetic IQ datasets with controllable channel impairments.
//!
//! A record is a pure function of `(scheme, n_samples, channel, seed)`:
//! symbols come from `seed`, noise from `channel.seed`, so noise-free or
//! tap-free twins share their symbols with the impaired record.

use std::collections::BTreeMap;
use std::f32::consts::PI;
use std::fmt;
use std::path::Path;

use num_complex::Complex32;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{self, IqRecord};
use crate::error::{Error, Result};
use crate::rng::{mix, stream};

const RRC_SPAN_SYMBOLS: usize = 4;
const AM_DEPTH: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modulation {
    Bpsk,
    Qpsk,
    Psk8,
    Qam16,
    Qam64,
    Fsk2,
    AmTone,
}

impl Modulation {
    pub fn name(self) -> &'static str {
        match self {
            Modulation::Bpsk => "BPSK",
            Modulation::Qpsk => "QPSK",
            Modulation::Psk8 => "8PSK",
            Modulation::Qam16 => "16QAM",
            Modulation::Qam64 => "64QAM",
            Modulation::Fsk2 => "2FSK",
            Modulation::AmTone => "AM-TONE",
        }
    }

    /// Unit-average-power constellation; empty for the non-linear schemes.
    pub fn constellation(self) -> Vec<Complex32> {
        match self {
            Modulation::Bpsk => vec![Complex32::new(1.0, 0.0), Complex32::new(-1.0, 0.0)],
            Modulation::Qpsk => psk(4, PI / 4.0),
            Modulation::Psk8 => psk(8, 0.0),
            Modulation::Qam16 => square_qam(4),
            Modulation::Qam64 => square_qam(8),
            Modulation::Fsk2 | Modulation::AmTone => vec![],
        }
    }
}

fn psk(order: usize, offset: f32) -> Vec<Complex32> {
    (0..order)
        .map(|k| Complex32::from_polar(1.0, offset + 2.0 * PI * k as f32 / order as f32))
        .collect()
}

fn square_qam(side: usize) -> Vec<Complex32> {
    let levels: Vec<f32> = (0..side).map(|i| 2.0 * i as f32 - (side as f32 - 1.0)).collect();
    // E|s|² = 2·(side²−1)/3
    let norm = (2.0 * (side * side - 1) as f32 / 3.0).sqrt();
    let mut pts = Vec::with_capacity(side * side);
    for &i in &levels {
        for &q in &levels {
            pts.push(Complex32::new(i / norm, q / norm));
        }
    }
    pts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PulseShape {
    Rectangular,
    RootRaisedCosine { rolloff: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModScheme {
    pub modulation: Modulation,
    pub samples_per_symbol: usize,
    pub pulse: PulseShape,
}

impl ModScheme {
    pub fn new(modulation: Modulation, samples_per_symbol: usize, pulse: PulseShape) -> Self {
        Self {
            modulation,
            samples_per_symbol,
            pulse,
        }
    }

    pub fn rrc(modulation: Modulation, samples_per_symbol: usize) -> Self {
        Self::new(
            modulation,
            samples_per_symbol,
            PulseShape::RootRaisedCosine { rolloff: 0.35 },
        )
    }

    fn validate(&self) -> Result<()> {
        if self.samples_per_symbol < 2 {
            return Err(Error::Config(format!(
                "samples per symbol must be >= 2, got {}",
                self.samples_per_symbol
            )));
        }
        if let PulseShape::RootRaisedCosine { rolloff } = self.pulse {
            if !(rolloff > 0.0 && rolloff <= 1.0) {
                return Err(Error::Config(format!("RRC rolloff {rolloff} not in (0, 1]")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ModScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}sps", self.modulation.name(), self.samples_per_symbol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub snr_db: f32,
    /// Carrier offset as a fraction of the sample rate.
    pub cfo_norm: f32,
    pub phase_deg: f32,
    /// Complex tap gains as `[re, im]` pairs; the first tap is the direct path.
    pub multipath_taps: Option<Vec<[f32; 2]>>,
    /// Seed of the noise stream.
    pub seed: u64,
}

impl ChannelConfig {
    pub fn clean(snr_db: f32) -> Self {
        Self {
            snr_db,
            cfo_norm: 0.0,
            phase_deg: 0.0,
            multipath_taps: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.snr_db.is_finite() {
            return Err(Error::Config("snr_db must be finite".into()));
        }
        if !(self.cfo_norm.abs() < 0.5) || !self.phase_deg.is_finite() {
            return Err(Error::Config(format!(
                "cfo_norm must satisfy |cfo| < 0.5, got {}",
                self.cfo_norm
            )));
        }
        if let Some(taps) = &self.multipath_taps {
            match taps.first() {
                None => return Err(Error::Config("multipath tap list is empty".into())),
                Some([re, im]) if *re == 0.0 && *im == 0.0 => {
                    return Err(Error::Config("first multipath tap must be nonzero".into()))
                }
                _ => {}
            }
            if taps.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Config("multipath taps must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Modulated, pulse-shaped baseband with unit average power; no channel.
pub fn modulate(scheme: &ModScheme, n_samples: usize, symbol_seed: u64) -> Result<Vec<Complex32>> {
    scheme.validate()?;
    let sps = scheme.samples_per_symbol;
    let mut rng = stream(symbol_seed);
    let out = match scheme.modulation {
        Modulation::Fsk2 => {
            // Continuous-phase FSK, tone spacing 1/sps cycles per sample.
            let dev = PI / sps as f32;
            let mut phase = rng.random::<f32>() * 2.0 * PI;
            let mut out = Vec::with_capacity(n_samples);
            let mut bit = 0.0f32;
            for n in 0..n_samples {
                if n % sps == 0 {
                    bit = if rng.random::<bool>() { 1.0 } else { -1.0 };
                }
                out.push(Complex32::from_polar(1.0, phase));
                phase = (phase + bit * dev).rem_euclid(2.0 * PI);
            }
            out
        }
        Modulation::AmTone => {
            let f_tone = 1.0 / (4.0 * sps as f32);
            let phi = rng.random::<f32>() * 2.0 * PI;
            let norm = (1.0 + AM_DEPTH * AM_DEPTH / 2.0).sqrt();
            (0..n_samples)
                .map(|n| {
                    let a = 1.0 + AM_DEPTH * (2.0 * PI * f_tone * n as f32 + phi).cos();
                    Complex32::new(a / norm, 0.0)
                })
                .collect()
        }
        m => {
            let points = m.constellation();
            let pick = |rng: &mut rand_chacha::ChaCha8Rng| points[rng.random_range(0..points.len())];
            match scheme.pulse {
                PulseShape::Rectangular => {
                    let n_sym = n_samples.div_ceil(sps);
                    let mut out = Vec::with_capacity(n_sym * sps);
                    for _ in 0..n_sym {
                        let s = pick(&mut rng);
                        out.extend(std::iter::repeat_n(s, sps));
                    }
                    out.truncate(n_samples);
                    out
                }
                PulseShape::RootRaisedCosine { rolloff } => {
                    let taps = rrc_taps(rolloff, sps, RRC_SPAN_SYMBOLS);
                    let delay = taps.len() / 2;
                    // Extra symbols on both sides so the kept window has no edge transient.
                    let n_sym = n_samples / sps + 4 * RRC_SPAN_SYMBOLS + 2;
                    let symbols: Vec<Complex32> = (0..n_sym).map(|_| pick(&mut rng)).collect();
                    let skip = 2 * RRC_SPAN_SYMBOLS * sps;
                    let mut out = vec![Complex32::new(0.0, 0.0); n_samples];
                    for (n, o) in out.iter_mut().enumerate() {
                        // y[t] = Σ_s sym[s]·h[t − s·sps + delay]
                        let t = n + skip;
                        let lo = (t + delay + 1).saturating_sub(taps.len()).div_ceil(sps);
                        let hi = ((t + delay) / sps).min(n_sym - 1);
                        let mut acc = Complex32::new(0.0, 0.0);
                        for (s, sym) in symbols.iter().enumerate().take(hi + 1).skip(lo) {
                            acc += sym * taps[t + delay - s * sps];
                        }
                        *o = acc;
                    }
                    out
                }
            }
        }
    };
    Ok(out)
}

/// Root-raised-cosine taps scaled so that Σh² = sps, which gives unit
/// output power for unit-power i.i.d. symbols.
pub fn rrc_taps(rolloff: f32, sps: usize, span: usize) -> Vec<f32> {
    let beta = rolloff as f64;
    let len = 2 * span * sps + 1;
    let mid = (len / 2) as f64;
    let pi = std::f64::consts::PI;
    let mut h: Vec<f64> = (0..len)
        .map(|i| {
            let t = (i as f64 - mid) / sps as f64;
            if t.abs() < 1e-9 {
                1.0 - beta + 4.0 * beta / pi
            } else if (t.abs() - 1.0 / (4.0 * beta)).abs() < 1e-9 {
                beta / 2f64.sqrt()
                    * ((1.0 + 2.0 / pi) * (pi / (4.0 * beta)).sin()
                        + (1.0 - 2.0 / pi) * (pi / (4.0 * beta)).cos())
            } else {
                ((pi * t * (1.0 - beta)).sin() + 4.0 * beta * t * (pi * t * (1.0 + beta)).cos())
                    / (pi * t * (1.0 - (4.0 * beta * t).powi(2)))
            }
        })
        .collect();
    let energy: f64 = h.iter().map(|v| v * v).sum();
    let scale = (sps as f64 / energy).sqrt();
    h.iter_mut().for_each(|v| *v *= scale);
    h.into_iter().map(|v| v as f32).collect()
}

/// Multipath, phase rotation and carrier offset; no noise.
pub fn apply_channel(clean: &[Complex32], chan: &ChannelConfig) -> Vec<Complex32> {
    let faded: Vec<Complex32> = match &chan.multipath_taps {
        Some(taps) => {
            let taps: Vec<Complex32> = taps.iter().map(|[re, im]| Complex32::new(*re, *im)).collect();
            (0..clean.len())
                .map(|n| {
                    taps.iter()
                        .enumerate()
                        .take(n + 1)
                        .map(|(k, h)| h * clean[n - k])
                        .sum()
                })
                .collect()
        }
        None => clean.to_vec(),
    };
    let rot = chan.phase_deg.to_radians();
    faded
        .iter()
        .enumerate()
        .map(|(n, s)| {
            // Phase accumulated in f64 so long records keep a clean CFO.
            let ph = rot as f64 + 2.0 * std::f64::consts::PI * chan.cfo_norm as f64 * n as f64;
            s * Complex32::from_polar(1.0, ph.rem_euclid(2.0 * std::f64::consts::PI) as f32)
        })
        .collect()
}

pub fn mean_power(x: &[Complex32]) -> f64 {
    x.iter().map(|s| s.norm_sqr() as f64).sum::<f64>() / x.len().max(1) as f64
}

/// Adds circular complex Gaussian noise at `snr_db` relative to the measured
/// per-sample power of `signal`.
pub fn add_awgn(signal: &[Complex32], snr_db: f32, noise_seed: u64) -> Vec<Complex32> {
    let p = mean_power(signal);
    let noise_var = p / 10f64.powf(snr_db as f64 / 10.0);
    let sd = (noise_var / 2.0).sqrt() as f32;
    let mut rng = stream(noise_seed);
    signal
        .iter()
        .map(|s| {
            let re: f32 = StandardNormal.sample(&mut rng);
            let im: f32 = StandardNormal.sample(&mut rng);
            s + Complex32::new(re * sd, im * sd)
        })
        .collect()
}

/// Noise-free channel output for the same symbols as [`generate_record`].
pub fn generate_clean(
    scheme: &ModScheme,
    n_samples: usize,
    chan: &ChannelConfig,
    seed: u64,
) -> Result<Vec<Complex32>> {
    chan.validate()?;
    let base = modulate(scheme, n_samples, seed)?;
    Ok(apply_channel(&base, chan))
}

pub fn generate_record(
    scheme: &ModScheme,
    n_samples: usize,
    chan: &ChannelConfig,
    seed: u64,
    label: usize,
) -> Result<IqRecord> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be positive".into()));
    }
    let clean = generate_clean(scheme, n_samples, chan, seed)?;
    let noisy = add_awgn(&clean, chan.snr_db, chan.seed);
    IqRecord::new(noisy, label)
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f32,
    pub hi: f32,
}

impl Range {
    pub fn new(lo: f32, hi: f32) -> Self {
        Self { lo, hi }
    }

    pub fn fixed(v: f32) -> Self {
        Self { lo: v, hi: v }
    }

    fn sample(&self, rng: &mut impl Rng) -> f32 {
        if self.hi > self.lo {
            rng.random_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }

    pub fn overlaps(&self, other: &Range) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultipathSpec {
    /// Total taps including the direct path.
    pub taps: usize,
    /// RMS magnitude of the echo taps relative to the direct path.
    pub echo_gain: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRanges {
    pub snr_db: Range,
    pub cfo_norm: Range,
    pub phase_deg: Range,
    pub multipath: Option<MultipathSpec>,
}

impl ChannelRanges {
    fn draw(&self, rng: &mut impl Rng, noise_seed: u64) -> ChannelConfig {
        let snr_db = self.snr_db.sample(rng);
        let cfo_norm = self.cfo_norm.sample(rng);
        let phase_deg = self.phase_deg.sample(rng);
        let multipath_taps = self.multipath.as_ref().map(|mp| {
            let echo = Normal::new(0.0f32, mp.echo_gain / 2f32.sqrt()).expect("finite gain");
            let mut taps = vec![[1.0f32, 0.0]];
            for _ in 1..mp.taps.max(1) {
                taps.push([echo.sample(rng), echo.sample(rng)]);
            }
            taps
        });
        ChannelConfig {
            snr_db,
            cfo_norm,
            phase_deg,
            multipath_taps,
            seed: noise_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    /// `(train, val, test)` counts for one class of `n` records.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = (self.train * n as f64).round() as usize;
        let val = ((self.val * n as f64).round() as usize).min(n - train.min(n));
        let train = train.min(n);
        (train, val, n - train - val)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub classes: Vec<ModScheme>,
    pub per_class_count: usize,
    pub n_samples: usize,
    pub channel: ChannelRanges,
    #[serde(default)]
    pub split: SplitFractions,
    pub seed: u64,
}

impl DatasetSpec {
    /// Five-class target task at 8 samples/symbol under a harsh channel.
    pub fn default_target() -> Self {
        use Modulation::*;
        Self {
            name: "target".into(),
            classes: [Bpsk, Qpsk, Psk8, Qam16, Fsk2]
                .into_iter()
                .map(|m| ModScheme::rrc(m, 8))
                .collect(),
            per_class_count: 300,
            n_samples: dsp::FRAME_LEN,
            channel: ChannelRanges {
                snr_db: Range::new(0.0, 10.0),
                cfo_norm: Range::new(-0.02, 0.02),
                phase_deg: Range::new(0.0, 360.0),
                multipath: Some(MultipathSpec {
                    taps: 3,
                    echo_gain: 0.4,
                }),
            },
            split: SplitFractions::default(),
            seed: 2,
        }
    }

    /// Pretext source task: the same five schemes at 4, 8 and 16 samples
    /// per symbol (one slice per expert), clean channel, high SNR.
    pub fn default_source() -> Self {
        use Modulation::*;
        let mut classes = Vec::new();
        for sps in [4, 8, 16] {
            for m in [Bpsk, Qpsk, Psk8, Qam16, Fsk2] {
                classes.push(ModScheme::rrc(m, sps));
            }
        }
        Self {
            name: "source".into(),
            classes,
            per_class_count: 100,
            n_samples: dsp::FRAME_LEN,
            channel: ChannelRanges {
                snr_db: Range::new(15.0, 25.0),
                cfo_norm: Range::fixed(0.0),
                phase_deg: Range::new(0.0, 360.0),
                multipath: None,
            },
            split: SplitFractions::default(),
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config(format!("{}: no classes", self.name)));
        }
        if self.per_class_count < 10 {
            return Err(Error::Data(format!(
                "{}: per_class_count must be >= 10, got {}",
                self.name, self.per_class_count
            )));
        }
        let s = self.split;
        if [s.train, s.val, s.test].iter().any(|f| !(0.0..=1.0).contains(f))
            || (s.train + s.val + s.test - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "{}: split fractions must be in [0,1] and sum to 1",
                self.name
            )));
        }
        if !self.channel.snr_db.lo.is_finite()
            || !self.channel.snr_db.hi.is_finite()
            || self.channel.cfo_norm.lo.abs() >= 0.5
            || self.channel.cfo_norm.hi.abs() >= 0.5
        {
            return Err(Error::Config(format!("{}: invalid channel ranges", self.name)));
        }
        for c in &self.classes {
            c.validate()?;
        }
        Ok(())
    }

    pub fn record_seed(&self, index: usize) -> u64 {
        mix(self.seed, index as u64)
    }
}

/// Generation parameters of one record, as listed in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordInfo {
    pub class: usize,
    pub channel: ChannelConfig,
    pub symbol_seed: u64,
}

/// Per-class index lists in deterministic shuffled order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Partition {
    pub by_class: Vec<Vec<usize>>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.by_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Indices interleaved class by class: first of each class, then second…
    pub fn indices(&self) -> Vec<usize> {
        let longest = self.by_class.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = Vec::with_capacity(self.len());
        for j in 0..longest {
            for class in &self.by_class {
                if let Some(&i) = class.get(j) {
                    out.push(i);
                }
            }
        }
        out
    }

    fn take_per_class(&self, n: usize) -> Partition {
        Partition {
            by_class: self
                .by_class
                .iter()
                .map(|c| c[..n.min(c.len())].to_vec())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Partition,
    pub val: Partition,
    pub test: Partition,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub records: Vec<IqRecord>,
    pub info: Vec<RecordInfo>,
    pub splits: Splits,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.spec.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.spec.classes.iter().map(|c| c.to_string()).collect()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.records[i].label).collect()
    }
}

const SPLIT_SALT: u64 = 0x5EED_5A17;

pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut records = Vec::with_capacity(spec.classes.len() * spec.per_class_count);
    let mut info = Vec::with_capacity(records.capacity());
    for (class, scheme) in spec.classes.iter().enumerate() {
        for j in 0..spec.per_class_count {
            let index = class * spec.per_class_count + j;
            let rs = spec.record_seed(index);
            let mut rng = stream(mix(rs, 0));
            let channel = spec.channel.draw(&mut rng, mix(rs, 2));
            let symbol_seed = mix(rs, 1);
            let mut rec = generate_record(scheme, spec.n_samples, &channel, symbol_seed, class)?;
            rec.meta = BTreeMap::from([
                ("scheme".to_string(), scheme.to_string()),
                ("snr_db".to_string(), format!("{:.3}", channel.snr_db)),
            ]);
            records.push(rec);
            info.push(RecordInfo {
                class,
                channel,
                symbol_seed,
            });
        }
    }
    let splits = stratified_split(spec);
    Ok(Dataset {
        spec: spec.clone(),
        records,
        info,
        splits,
    })
}

fn stratified_split(spec: &DatasetSpec) -> Splits {
    let mut train = Partition::default();
    let mut val = Partition::default();
    let mut test = Partition::default();
    for class in 0..spec.classes.len() {
        let start = class * spec.per_class_count;
        let mut idx: Vec<usize> = (start..start + spec.per_class_count).collect();
        idx.shuffle(&mut stream(mix(spec.seed ^ SPLIT_SALT, class as u64)));
        let (n_train, n_val, _) = spec.split.counts(idx.len());
        train.by_class.push(idx[..n_train].to_vec());
        val.by_class.push(idx[n_train..n_train + n_val].to_vec());
        test.by_class.push(idx[n_train + n_val..].to_vec());
    }
    Splits { train, val, test }
}

/// First `n` training records of every class. Saturates (with a warning)
/// when a class holds fewer.
pub fn cap_per_class(train: &Partition, n: usize) -> Result<Partition> {
    if n == 0 {
        return Err(Error::Config("per-class cap must be >= 1".into()));
    }
    if let Some(short) = train.by_class.iter().map(Vec::len).filter(|&l| l < n).min() {
        log::warn!("cap {n} exceeds available records per class (smallest class has {short}); keeping all");
    }
    Ok(train.take_per_class(n))
}

/// Exactly `k` records per class; `k = 0` yields an empty support.
pub fn kshot_support(train: &Partition, k: usize) -> Result<Partition> {
    if let Some(short) = train.by_class.iter().map(Vec::len).filter(|&l| l < k).min() {
        return Err(Error::Data(format!(
            "{k}-shot support needs {k} records per class, smallest class has {short}"
        )));
    }
    Ok(train.take_per_class(k))
}

/// Source (pretext) and target (adaptation) datasets.
pub fn make_shift_pair(source: &DatasetSpec, target: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    Ok((build_dataset(source)?, build_dataset(target)?))
}

/// Groups source classes by samples-per-symbol, ascending; slice `e` is the
/// pretext task of expert `e`. Labels within a slice follow class order.
pub fn pretext_slices(spec: &DatasetSpec) -> Vec<Vec<usize>> {
    let mut rates: Vec<usize> = spec.classes.iter().map(|c| c.samples_per_symbol).collect();
    rates.sort_unstable();
    rates.dedup();
    rates
        .iter()
        .map(|&r| {
            spec.classes
                .iter()
                .enumerate()
                .filter(|(_, c)| c.samples_per_symbol == r)
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Offset into the IQ payload, in complex samples.
    pub offset: u64,
    pub length: usize,
    pub class: usize,
    pub channel: ChannelConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub class_names: Vec<String>,
    pub iq_file: String,
    pub records: Vec<ManifestEntry>,
    pub splits: Splits,
}

/// Writes `<dir>/<name>.iq` and `<dir>/<name>.manifest.json`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let iq_name = format!("{}.iq", ds.spec.name);
    let iq_path = dir.join(&iq_name);
    let payload: Vec<&[Complex32]> = ds.records.iter().map(|r| r.samples.as_slice()).collect();
    let index = dsp::write_iq_file(&iq_path, &payload)?;
    let manifest = Manifest {
        spec: ds.spec.clone(),
        class_names: ds.class_names(),
        iq_file: iq_name,
        records: index
            .into_iter()
            .zip(&ds.info)
            .map(|((offset, length), info)| ManifestEntry {
                offset,
                length,
                class: info.class,
                channel: info.channel.clone(),
                seed: info.symbol_seed,
            })
            .collect(),
        splits: ds.splits.clone(),
    };
    let mpath = dir.join(format!("{}.manifest.json", ds.spec.name));
    std::fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))
}

pub fn load_dataset(dir: &Path, name: &str) -> Result<Dataset> {
    let mpath = dir.join(format!("{name}.manifest.json"));
    let bytes = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    let samples = dsp::read_iq_file(&dir.join(&manifest.iq_file))?;
    let mut records = Vec::with_capacity(manifest.records.len());
    let mut info = Vec::with_capacity(manifest.records.len());
    for e in &manifest.records {
        let start = e.offset as usize;
        let end = start + e.length;
        if end > samples.len() {
            return Err(Error::Data(format!(
                "{}: record at {start}+{} runs past the payload",
                mpath.display(),
                e.length
            )));
        }
        records.push(IqRecord::new(samples[start..end].to_vec(), e.class)?);
        info.push(RecordInfo {
            class: e.class,
            channel: e.channel.clone(),
            symbol_seed: e.seed,
        });
    }
    Ok(Dataset {
        spec: manifest.spec,
        records,
        info,
        splits: manifest.splits,
    })
}
