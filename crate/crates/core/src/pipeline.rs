//! Recording → impulse response → feature vector.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{feature_vector, standard_band_plan, BandPlan, FeatureVector};
use crate::rir::{deconvolve, extract_linear_rir, DeconvolutionMethod, ImpulseResponse, DEFAULT_EPSILON};
use crate::signal::{align, normalize, sweep_reference, AudioSignal, SweepSpec, TRIM_TAIL_SECONDS};

/// Everything the analysis of one recording produces.
#[derive(Debug, Clone, Serialize)]
pub struct Analysis {
    pub features: FeatureVector,
    /// Samples between the start of the recording and the sweep onset.
    pub alignment_lag: usize,
    pub ir: ImpulseResponse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisMeta {
    pub sample_rate: u32,
    pub alignment_lag: usize,
    pub alignment_seconds: f64,
    pub direct_index: usize,
    pub noise_floor_db: f64,
    pub rir_len: usize,
}

impl Analysis {
    pub fn meta(&self) -> AnalysisMeta {
        let sr = self.ir.sample_rate();
        AnalysisMeta {
            sample_rate: sr,
            alignment_lag: self.alignment_lag,
            alignment_seconds: self.alignment_lag as f64 / sr as f64,
            direct_index: self.ir.direct_index(),
            noise_floor_db: self.ir.noise_floor_db(),
            rir_len: self.ir.len(),
        }
    }
}

/// Reusable analysis state: the sweep reference and the band plan.
#[derive(Debug, Clone)]
pub struct Analyzer {
    reference: AudioSignal,
    keep: usize,
    plan: BandPlan,
    method: DeconvolutionMethod,
    epsilon: f64,
}

impl Analyzer {
    pub fn new(spec: &SweepSpec) -> Result<Self> {
        let reference = sweep_reference(spec)?;
        Self::with_reference(reference, spec.trimmed_samples())
    }

    /// Builds an analyzer from a padded excitation such as a sweep WAV. The
    /// exact-zero lead and tail are stripped to recover the sweep itself, so
    /// lags count from the first non-zero excitation sample.
    pub fn from_excitation(excitation: &AudioSignal) -> Result<Self> {
        let s = excitation.samples();
        let first = s.iter().position(|v| *v != 0.0);
        let last = s.iter().rposition(|v| *v != 0.0);
        let (Some(first), Some(last)) = (first, last) else {
            return Err(Error::Degenerate("excitation is all zeros".into()));
        };
        let sr = excitation.sample_rate();
        let reference = AudioSignal::new(s[first..=last].to_vec(), sr)?;
        let keep = reference.len() + (TRIM_TAIL_SECONDS * sr as f64).round() as usize;
        Self::with_reference(reference, keep)
    }

    fn with_reference(reference: AudioSignal, keep: usize) -> Result<Self> {
        let plan = standard_band_plan(reference.sample_rate())?;
        Ok(Self {
            reference,
            keep,
            plan,
            method: DeconvolutionMethod::default(),
            epsilon: DEFAULT_EPSILON,
        })
    }

    pub fn with_method(mut self, method: DeconvolutionMethod, epsilon: f64) -> Self {
        self.method = method;
        self.epsilon = epsilon;
        self
    }

    pub fn plan(&self) -> &BandPlan {
        &self.plan
    }

    pub fn reference(&self) -> &AudioSignal {
        &self.reference
    }

    /// Align, trim, normalize, deconvolve and cut the linear impulse
    /// response. Returns the alignment lag alongside.
    pub fn impulse_response(&self, recording: &AudioSignal) -> Result<(usize, ImpulseResponse)> {
        if recording.sample_rate() != self.reference.sample_rate() {
            return Err(Error::param(
                "sample_rate",
                format!(
                    "recording is {} Hz but the excitation is {} Hz",
                    recording.sample_rate(),
                    self.reference.sample_rate()
                ),
            ));
        }
        if recording.energy() == 0.0 {
            return Err(Error::Degenerate("recording is silent".into()));
        }
        let (lag, aligned) = align(recording, &self.reference)?;
        if aligned.len() < self.keep {
            return Err(Error::Truncation { needed: self.keep, got: aligned.len() });
        }
        let trimmed = AudioSignal::new(aligned.samples()[..self.keep].to_vec(), aligned.sample_rate())?;
        let normalized = normalize(&trimmed)?;
        let raw = deconvolve(&normalized, &self.reference, self.method, self.epsilon)?;
        Ok((lag, extract_linear_rir(&raw)?))
    }

    pub fn analyze(&self, recording: &AudioSignal) -> Result<Analysis> {
        let (alignment_lag, ir) = self.impulse_response(recording)?;
        let features = feature_vector(&ir, &self.plan)?;
        Ok(Analysis { features, alignment_lag, ir })
    }

    /// Feature vectors of many recordings, in input order.
    pub fn features_of(&self, recordings: &[&AudioSignal]) -> Result<Vec<FeatureVector>> {
        recordings
            .par_iter()
            .map(|r| Ok(self.analyze(r)?.features))
            .collect()
    }
}
