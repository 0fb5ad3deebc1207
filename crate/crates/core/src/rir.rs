//! Impulse-response recovery: deconvolution of a recording against its
//! excitation, extraction of the linear response window and noise-floor
//! estimation.

use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};
use crate::signal::AudioSignal;

/// Seconds kept before the direct-sound peak.
pub const PRE_PEAK_SECONDS: f64 = 0.1;
/// Seconds kept after the direct-sound peak.
pub const POST_PEAK_SECONDS: f64 = 0.75;
/// Length of the pre-peak window used for the noise floor.
pub const NOISE_WINDOW_SECONDS: f64 = 0.01;
/// Reported when no pre-peak samples exist or the window is silent.
pub const NOISE_FLOOR_SENTINEL_DB: f64 = -120.0;
/// Default regularization, relative to the peak excitation power spectrum.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// A room impulse response together with its direct-sound position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseResponse {
    samples: Vec<f64>,
    sample_rate: u32,
    direct_index: usize,
    noise_floor_db: f64,
}

impl ImpulseResponse {
    pub fn new(
        samples: Vec<f64>,
        sample_rate: u32,
        direct_index: usize,
        noise_floor_db: f64,
    ) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::param("sample_rate", "must be positive"));
        }
        if direct_index >= samples.len() {
            return Err(Error::param(
                "direct_index",
                format!("{direct_index} out of range for {} samples", samples.len()),
            ));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("samples", "must be finite"));
        }
        if !(noise_floor_db <= 0.0) {
            return Err(Error::param("noise_floor_db", "must be <= 0 dB"));
        }
        Ok(Self {
            samples,
            sample_rate,
            direct_index,
            noise_floor_db,
        })
    }

    /// Wraps raw samples, locating the direct sound at the absolute maximum
    /// and estimating the noise floor in front of it.
    pub fn from_samples(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let direct_index = dsp::argmax_abs(&samples)
            .ok_or_else(|| Error::Degenerate("empty impulse response".into()))?;
        let signal = AudioSignal::new(samples, sample_rate)?;
        let noise_floor_db = estimate_noise_floor(&signal, direct_index);
        Self::new(
            signal.into_samples(),
            sample_rate,
            direct_index,
            noise_floor_db,
        )
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn direct_index(&self) -> usize {
        self.direct_index
    }

    pub fn noise_floor_db(&self) -> f64 {
        self.noise_floor_db
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        dsp::energy(&self.samples)
    }

    pub fn scaled(&self, gain: f64) -> ImpulseResponse {
        ImpulseResponse {
            samples: self.samples.iter().map(|v| v * gain).collect(),
            ..self.clone()
        }
    }

    /// Same metadata, new samples.
    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> ImpulseResponse {
        debug_assert_eq!(samples.len(), self.samples.len());
        ImpulseResponse {
            samples,
            ..self.clone()
        }
    }

    pub fn to_signal(&self) -> AudioSignal {
        AudioSignal::from_parts_unchecked(self.samples.clone(), self.sample_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeconvolutionMethod {
    /// Correlation with the excitation, normalized by its energy.
    #[default]
    MatchedFilter,
    /// Tikhonov-regularized spectral division.
    RegularizedInverse,
}

/// Recovers the impulse response relating `excitation` to `recording`.
///
/// Output index `k` holds lag `k`; the output has the length of the
/// recording. `epsilon` only affects [`DeconvolutionMethod::RegularizedInverse`]
/// and is relative to the peak excitation power spectrum.
pub fn deconvolve(
    recording: &AudioSignal,
    excitation: &AudioSignal,
    method: DeconvolutionMethod,
    epsilon: f64,
) -> Result<AudioSignal> {
    recording.check_same_rate(excitation)?;
    let excitation_energy = excitation.energy();
    if excitation_energy == 0.0 {
        return Err(Error::Degenerate("excitation is all zeros".into()));
    }
    if recording.is_empty() {
        return Ok(recording.clone());
    }
    let n = dsp::fft_len(recording.len() + excitation.len() - 1);
    let rec = dsp::rfft_padded(recording.samples(), n);
    let exc = dsp::rfft_padded(excitation.samples(), n);
    let spectrum = match method {
        DeconvolutionMethod::MatchedFilter => {
            let scale = 1.0 / excitation_energy;
            rec.iter()
                .zip(&exc)
                .map(|(r, s)| r * s.conj() * scale)
                .collect()
        }
        DeconvolutionMethod::RegularizedInverse => {
            if !(epsilon >= 0.0) {
                return Err(Error::param("epsilon", "must be non-negative"));
            }
            let peak_power = exc.iter().map(|s| s.norm_sqr()).fold(0.0, f64::max);
            let reg = epsilon * peak_power;
            rec.iter()
                .zip(&exc)
                .map(|(r, s)| {
                    let denom = s.norm_sqr() + reg;
                    if denom > 0.0 {
                        r * s.conj() / denom
                    } else {
                        rustfft::num_complex::Complex64::new(0.0, 0.0)
                    }
                })
                .collect()
        }
    };
    let mut out = dsp::irfft(spectrum, n);
    out.truncate(recording.len());
    AudioSignal::new(out, recording.sample_rate())
}

/// Length of the window produced by [`extract_linear_rir`] at `sample_rate`.
pub fn extraction_len(sample_rate: u32) -> usize {
    ((PRE_PEAK_SECONDS + POST_PEAK_SECONDS) * sample_rate as f64).round() as usize
}

fn pre_peak_len(sample_rate: u32) -> usize {
    (PRE_PEAK_SECONDS * sample_rate as f64).round() as usize
}

/// Cuts a fixed-length window around the strongest arrival of a raw
/// deconvolution: 100 ms before the peak through 750 ms after it, zero-padded
/// where the raw response runs out.
pub fn extract_linear_rir(raw: &AudioSignal) -> Result<ImpulseResponse> {
    let peak = dsp::argmax_abs(raw.samples())
        .ok_or_else(|| Error::Degenerate("empty deconvolution output".into()))?;
    if raw.samples()[peak] == 0.0 {
        return Err(Error::Degenerate("deconvolution output is all zeros".into()));
    }
    let sr = raw.sample_rate();
    let len = extraction_len(sr);
    let pre = pre_peak_len(sr);
    let mut window = vec![0.0; len];
    for (k, slot) in window.iter_mut().enumerate() {
        let src = peak as i64 - pre as i64 + k as i64;
        if src >= 0 && (src as usize) < raw.len() {
            *slot = raw.samples()[src as usize];
        }
    }
    let noise_floor_db = estimate_noise_floor(raw, peak);
    ImpulseResponse::new(window, sr, pre, noise_floor_db)
}

/// Mean pre-peak energy over the 10 ms in front of the direct sound, in dB
/// relative to the squared peak amplitude.
pub fn estimate_noise_floor(raw: &AudioSignal, direct_index: usize) -> f64 {
    let samples = raw.samples();
    let Some(&peak) = samples.get(direct_index) else {
        return NOISE_FLOOR_SENTINEL_DB;
    };
    let peak_energy = peak * peak;
    let window = (NOISE_WINDOW_SECONDS * raw.sample_rate() as f64).round() as usize;
    let start = direct_index.saturating_sub(window);
    let pre = &samples[start..direct_index];
    if pre.is_empty() || peak_energy == 0.0 {
        return NOISE_FLOOR_SENTINEL_DB;
    }
    let mean = dsp::energy(pre) / pre.len() as f64;
    dsp::power_db(mean / peak_energy).min(0.0)
}
