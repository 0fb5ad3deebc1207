//! Per-band acoustic features of an impulse response.
//!
//! Each impulse response is split into 32 bands (one wide band, ten octave
//! and twenty-one third-octave bands). For every band seven values are
//! computed, in this order: reverberation time, early decay time,
//! direct-to-reverberant ratio and the C10/C35/C50/C80 clarity ratios.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, power_db};
use crate::error::{Error, Result};
use crate::rir::ImpulseResponse;

pub const BAND_COUNT: usize = 32;
pub const FEATURES_PER_BAND: usize = 7;
pub const FEATURE_COUNT: usize = BAND_COUNT * FEATURES_PER_BAND;

pub const FEATURE_NAMES: [&str; FEATURES_PER_BAND] =
    ["rt60", "edt", "drr", "c10", "c35", "c50", "c80"];

/// Clarity and DRR values are clamped to +/- this many dB.
pub const RATIO_CLAMP_DB: f64 = 60.0;
/// Half-width of the window counted as direct sound for the DRR.
pub const DIRECT_HALF_WIDTH_SECONDS: f64 = 0.0025;
/// Value reported when a decay time cannot be measured.
pub const DECAY_SENTINEL: f64 = 0.0;

const MOVING_AVERAGE_SECONDS: f64 = 0.005;
const TRUNCATION_MARGIN_DB: f64 = 6.0;

pub const OCTAVE_CENTERS: [f64; 10] = [
    31.5, 63.0, 125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0, 16000.0,
];

pub const THIRD_OCTAVE_CENTERS: [f64; 21] = [
    100.0, 125.0, 160.0, 200.0, 250.0, 315.0, 400.0, 500.0, 630.0, 800.0, 1000.0, 1250.0,
    1600.0, 2000.0, 2500.0, 3150.0, 4000.0, 5000.0, 6300.0, 8000.0, 10000.0,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandKind {
    Wide,
    Octave,
    ThirdOctave,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub kind: BandKind,
    pub f_center: f64,
    pub f_low: f64,
    pub f_high: f64,
}

impl BandSpec {
    pub fn wide(sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        Self {
            kind: BandKind::Wide,
            f_center: nyquist / 2.0,
            f_low: 0.0,
            f_high: nyquist,
        }
    }

    pub fn octave(f_center: f64) -> Self {
        let f_low = f_center / std::f64::consts::SQRT_2;
        Self {
            kind: BandKind::Octave,
            f_center,
            f_low,
            f_high: 2.0 * f_low,
        }
    }

    pub fn third_octave(f_center: f64) -> Self {
        let step = 2f64.powf(1.0 / 6.0);
        Self {
            kind: BandKind::ThirdOctave,
            f_center,
            f_low: f_center / step,
            f_high: f_center * step,
        }
    }

    fn transition_width(&self) -> f64 {
        (0.1 * self.f_low).min(10.0)
    }

    /// Raised-cosine band mask evaluated at `freq` (Hz, non-negative).
    fn gain_at(&self, freq: f64) -> f64 {
        let half = self.transition_width() / 2.0;
        let edge = |distance_inside: f64| -> f64 {
            // distance_inside > 0 means inside the band
            if half == 0.0 {
                return if distance_inside >= 0.0 { 1.0 } else { 0.0 };
            }
            if distance_inside >= half {
                1.0
            } else if distance_inside <= -half {
                0.0
            } else {
                0.5 - 0.5 * (std::f64::consts::PI * (distance_inside + half) / (2.0 * half)).cos()
            }
        };
        edge(freq - self.f_low) * edge(self.f_high - freq)
    }
}

/// The ordered list of analysis bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPlan {
    bands: Vec<BandSpec>,
}

impl BandPlan {
    pub fn bands(&self) -> &[BandSpec] {
        &self.bands
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }
}

/// One wide band, ten octave bands (31.5 Hz to 16 kHz) and twenty-one
/// third-octave bands (100 Hz to 10 kHz).
pub fn standard_band_plan(sample_rate: u32) -> Result<BandPlan> {
    if sample_rate < 44100 {
        return Err(Error::param(
            "sample_rate",
            format!("the standard plan needs at least 44100 Hz, got {sample_rate}"),
        ));
    }
    let mut bands = Vec::with_capacity(BAND_COUNT);
    bands.push(BandSpec::wide(sample_rate));
    bands.extend(OCTAVE_CENTERS.iter().map(|&f| BandSpec::octave(f)));
    bands.extend(THIRD_OCTAVE_CENTERS.iter().map(|&f| BandSpec::third_octave(f)));
    Ok(BandPlan { bands })
}

/// Cached spectrum of an impulse response, so several bands can be filtered
/// from one forward transform.
struct BandFilter<'a> {
    ir: &'a ImpulseResponse,
    n: usize,
    spectrum: Vec<Complex64>,
}

impl<'a> BandFilter<'a> {
    fn new(ir: &'a ImpulseResponse) -> Self {
        let n = dsp::fft_len(ir.len() + ir.len() / 2);
        Self {
            ir,
            n,
            spectrum: dsp::rfft_padded(ir.samples(), n),
        }
    }

    fn apply(&self, band: &BandSpec) -> Result<ImpulseResponse> {
        let sr = self.ir.sample_rate() as f64;
        let nyquist = sr / 2.0;
        if band.f_low >= nyquist {
            return Err(Error::param(
                "band",
                format!("band starting at {} Hz lies above Nyquist {nyquist} Hz", band.f_low),
            ));
        }
        if band.kind == BandKind::Wide {
            return Ok(self.ir.clone());
        }
        let n = self.n;
        let bin_hz = sr / n as f64;
        let filtered: Vec<Complex64> = self
            .spectrum
            .iter()
            .enumerate()
            .map(|(k, &c)| c * band.gain_at(k as f64 * bin_hz))
            .collect();
        let mut out = dsp::irfft(filtered, n);
        out.truncate(self.ir.len());
        Ok(self.ir.with_samples(out))
    }
}

/// Zero-phase band filter. The band must start below Nyquist; a band whose
/// upper edge lies beyond Nyquist is cut off there.
pub fn bandpass(ir: &ImpulseResponse, band: &BandSpec) -> Result<ImpulseResponse> {
    BandFilter::new(ir).apply(band)
}

/// Schroeder energy decay curve, starting at the direct sound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayCurve {
    pub values_db: Vec<f64>,
    pub sample_rate: u32,
    pub truncation_index: usize,
}

impl DecayCurve {
    fn min_db(&self) -> f64 {
        self.values_db.iter().copied().fold(0.0, f64::min)
    }
}

/// Last index whose trailing 5 ms mean energy is more than 6 dB above the
/// noise floor (both relative to the peak squared amplitude).
fn truncation_index(ir: &ImpulseResponse) -> usize {
    let x = ir.samples();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v * v));
    let window = ((MOVING_AVERAGE_SECONDS * ir.sample_rate() as f64).round() as usize).max(1);
    let threshold_db = ir.noise_floor_db() + TRUNCATION_MARGIN_DB;
    let mut sum = 0.0;
    let mut last = None;
    for i in 0..x.len() {
        sum += x[i] * x[i];
        if i >= window {
            sum -= x[i - window] * x[i - window];
        }
        let count = (i + 1).min(window) as f64;
        let level = power_db((sum.max(0.0) / count) / peak);
        if level > threshold_db {
            last = Some(i);
        }
    }
    last.unwrap_or(x.len() - 1).max(ir.direct_index())
}

/// Backward-integrated energy decay from the direct sound to the point where
/// the response sinks into the noise floor.
pub fn schroeder_curve(ir: &ImpulseResponse) -> Result<DecayCurve> {
    if ir.is_empty() {
        return Err(Error::Degenerate("empty impulse response".into()));
    }
    let trunc = truncation_index(ir);
    let start = ir.direct_index();
    let x = &ir.samples()[start..=trunc];
    let mut tail = vec![0.0; x.len()];
    let mut acc = 0.0;
    for (slot, v) in tail.iter_mut().zip(x).rev() {
        acc += v * v;
        *slot = acc;
    }
    let total = tail[0];
    if total == 0.0 {
        return Err(Error::Degenerate(
            "no energy after the direct sound".into(),
        ));
    }
    let mut values_db: Vec<f64> = tail.iter().map(|e| power_db(e / total)).collect();
    values_db[0] = 0.0;
    // log10 of a non-increasing sequence; guard against libm rounding
    for i in 1..values_db.len() {
        if values_db[i] > values_db[i - 1] {
            values_db[i] = values_db[i - 1];
        }
    }
    Ok(DecayCurve {
        values_db,
        sample_rate: ir.sample_rate(),
        truncation_index: trunc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayRange {
    /// -5 dB to -35 dB.
    Rt30,
    /// -5 dB to -25 dB.
    Rt20,
}

impl DecayRange {
    fn span_db(self) -> f64 {
        match self {
            DecayRange::Rt30 => 30.0,
            DecayRange::Rt20 => 20.0,
        }
    }
}

/// Least-squares slope (dB per second) of the curve samples lying in
/// `[lower, upper]` dB.
fn fitted_slope(curve: &DecayCurve, upper: f64, lower: f64) -> Result<f64> {
    if curve.min_db() > lower {
        return Err(Error::Range(format!(
            "decay reaches only {:.1} dB, need {lower} dB",
            curve.min_db()
        )));
    }
    let sr = curve.sample_rate as f64;
    let (mut n, mut st, mut sv, mut stt, mut stv) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &v) in curve.values_db.iter().enumerate() {
        if v > upper {
            continue;
        }
        if v < lower {
            break;
        }
        let t = i as f64 / sr;
        n += 1.0;
        st += t;
        sv += v;
        stt += t * t;
        stv += t * v;
    }
    let denom = n * stt - st * st;
    if n < 2.0 || denom <= 0.0 {
        return Err(Error::Range(format!(
            "too few curve samples between {upper} and {lower} dB"
        )));
    }
    let slope = (n * stv - st * sv) / denom;
    if !(slope < 0.0) {
        return Err(Error::Range("decay slope is not negative".into()));
    }
    Ok(slope)
}

/// Reverberation time extrapolated to 60 dB from a 30 or 20 dB fit range.
pub fn rt_from_decay(curve: &DecayCurve, range: DecayRange) -> Result<f64> {
    let upper = -5.0;
    let lower = upper - range.span_db();
    Ok(-60.0 / fitted_slope(curve, upper, lower)?)
}

/// Early decay time: the 60 dB extrapolation of the first 10 dB of decay.
pub fn edt(curve: &DecayCurve) -> Result<f64> {
    Ok(-60.0 / fitted_slope(curve, 0.0, -10.0)?)
}

fn ratio_db(numerator: f64, denominator: f64) -> Result<f64> {
    if numerator == 0.0 && denominator == 0.0 {
        return Err(Error::Degenerate("both energies are zero".into()));
    }
    if denominator == 0.0 {
        return Ok(RATIO_CLAMP_DB);
    }
    if numerator == 0.0 {
        return Ok(-RATIO_CLAMP_DB);
    }
    Ok((10.0 * (numerator / denominator).log10()).clamp(-RATIO_CLAMP_DB, RATIO_CLAMP_DB))
}

/// Early-to-late energy ratio in dB with the split `split_ms` after the
/// direct sound.
pub fn clarity(ir: &ImpulseResponse, split_ms: f64) -> Result<f64> {
    if ir.is_empty() {
        return Err(Error::Degenerate("empty impulse response".into()));
    }
    let split = (split_ms / 1000.0 * ir.sample_rate() as f64).round() as usize;
    let start = ir.direct_index();
    let boundary = (start + split).min(ir.len());
    let early = dsp::energy(&ir.samples()[start..boundary]);
    let late = dsp::energy(&ir.samples()[boundary..]);
    ratio_db(early, late)
}

/// Direct-to-reverberant energy ratio in dB; the direct part spans 2.5 ms on
/// either side of the direct-sound peak.
pub fn drr(ir: &ImpulseResponse) -> Result<f64> {
    if ir.is_empty() {
        return Err(Error::Degenerate("empty impulse response".into()));
    }
    let half = (DIRECT_HALF_WIDTH_SECONDS * ir.sample_rate() as f64).round() as usize;
    let lo = ir.direct_index().saturating_sub(half);
    let hi = (ir.direct_index() + half + 1).min(ir.len());
    let x = ir.samples();
    let direct = dsp::energy(&x[lo..hi]);
    let rest = dsp::energy(&x[..lo]) + dsp::energy(&x[hi..]);
    ratio_db(direct, rest)
}

/// The 224 features of one impulse response, band-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    values: Vec<f64>,
}

/// One entry of the record-style serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub band_kind: BandKind,
    pub f_center: f64,
    pub feature_name: String,
    pub value: f64,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != FEATURE_COUNT {
            return Err(Error::param(
                "features",
                format!("expected {FEATURE_COUNT} values, got {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("features", "all values must be finite"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, band: usize, feature: usize) -> f64 {
        self.values[band * FEATURES_PER_BAND + feature]
    }

    /// Flattened `{band_kind, f_center, feature_name, value}` records in
    /// canonical order.
    pub fn records(&self, plan: &BandPlan) -> Vec<FeatureRecord> {
        plan.bands()
            .iter()
            .enumerate()
            .flat_map(|(b, band)| {
                FEATURE_NAMES.iter().enumerate().map(move |(f, name)| FeatureRecord {
                    band_kind: band.kind,
                    f_center: band.f_center,
                    feature_name: (*name).to_string(),
                    value: self.values[b * FEATURES_PER_BAND + f],
                })
            })
            .collect()
    }
}

/// Human-readable name of feature `index`, e.g. `octave_1000_rt60`.
pub fn feature_label(plan: &BandPlan, index: usize) -> String {
    let band = &plan.bands()[index / FEATURES_PER_BAND];
    let kind = match band.kind {
        BandKind::Wide => return format!("wide_{}", FEATURE_NAMES[index % FEATURES_PER_BAND]),
        BandKind::Octave => "octave",
        BandKind::ThirdOctave => "third",
    };
    format!(
        "{kind}_{}_{}",
        band.f_center,
        FEATURE_NAMES[index % FEATURES_PER_BAND]
    )
}

fn band_features(band_ir: &ImpulseResponse) -> Result<[f64; FEATURES_PER_BAND]> {
    if band_ir.energy() == 0.0 {
        return Ok([DECAY_SENTINEL; FEATURES_PER_BAND]);
    }
    let (rt60, early_decay) = match schroeder_curve(band_ir) {
        Ok(curve) => {
            let rt60 = rt_from_decay(&curve, DecayRange::Rt30)
                .or_else(|_| rt_from_decay(&curve, DecayRange::Rt20))
                .unwrap_or(DECAY_SENTINEL);
            (rt60, edt(&curve).unwrap_or(DECAY_SENTINEL))
        }
        Err(Error::Degenerate(_)) => (DECAY_SENTINEL, DECAY_SENTINEL),
        Err(e) => return Err(e),
    };
    let ratio = |r: Result<f64>| match r {
        Err(Error::Degenerate(_)) => Ok(0.0),
        other => other,
    };
    Ok([
        rt60,
        early_decay,
        ratio(drr(band_ir))?,
        ratio(clarity(band_ir, 10.0))?,
        ratio(clarity(band_ir, 35.0))?,
        ratio(clarity(band_ir, 50.0))?,
        ratio(clarity(band_ir, 80.0))?,
    ])
}

/// Computes the full feature vector. Bands are processed in parallel; the
/// output order follows the plan.
pub fn feature_vector(ir: &ImpulseResponse, plan: &BandPlan) -> Result<FeatureVector> {
    if plan.len() != BAND_COUNT {
        return Err(Error::param(
            "plan",
            format!("expected {BAND_COUNT} bands, got {}", plan.len()),
        ));
    }
    if ir.energy() == 0.0 {
        return Err(Error::Degenerate("impulse response is all zeros".into()));
    }
    let filter = BandFilter::new(ir);
    let per_band: Vec<[f64; FEATURES_PER_BAND]> = plan
        .bands()
        .par_iter()
        .map(|band| band_features(&filter.apply(band)?))
        .collect::<Result<_>>()?;
    FeatureVector::new(per_band.into_iter().flatten().collect())
}
