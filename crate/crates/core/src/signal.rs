//! Excitation sweep generation and recording-side preprocessing.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};

/// Seconds of recording kept after the end of the sweep by [`trim`].
pub const TRIM_TAIL_SECONDS: f64 = 0.5;

/// Full-scale integer used for 16-bit PCM.
const PCM_FULL_SCALE: f64 = 32767.0;

/// A uniformly sampled, single-channel waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioSignal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::param("sample_rate", "must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::param(
                "samples",
                format!("non-finite value at index {i}"),
            ));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub(crate) fn from_parts_unchecked(samples: Vec<f64>, sample_rate: u32) -> Self {
        debug_assert!(sample_rate > 0);
        debug_assert!(samples.iter().all(|v| v.is_finite()));
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        dsp::energy(&self.samples)
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            (self.energy() / self.samples.len() as f64).sqrt()
        }
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Multiplies every sample by `gain`.
    pub fn scaled(&self, gain: f64) -> AudioSignal {
        AudioSignal::from_parts_unchecked(
            self.samples.iter().map(|v| v * gain).collect(),
            self.sample_rate,
        )
    }

    /// Prepends `delay` zero samples.
    pub fn delayed(&self, delay: usize) -> AudioSignal {
        let mut samples = vec![0.0; delay];
        samples.extend_from_slice(&self.samples);
        AudioSignal::from_parts_unchecked(samples, self.sample_rate)
    }

    pub(crate) fn check_same_rate(&self, other: &AudioSignal) -> Result<()> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::param(
                "sample_rate",
                format!("mismatch: {} Hz vs {} Hz", self.sample_rate, other.sample_rate),
            ));
        }
        Ok(())
    }
}

/// Parameters of the linear excitation sweep and its silence padding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub f_start: f64,
    pub f_end: f64,
    pub sweep_duration: f64,
    pub lead_silence: f64,
    pub tail_silence: f64,
    pub amplitude: f64,
    pub sample_rate: u32,
}

impl Default for SweepSpec {
    /// 0 to 22050 Hz over two seconds, one second of lead silence and two of
    /// tail, at 44.1 kHz.
    fn default() -> Self {
        Self {
            f_start: 0.0,
            f_end: 22050.0,
            sweep_duration: 2.0,
            lead_silence: 1.0,
            tail_silence: 2.0,
            amplitude: 0.5,
            sample_rate: 44100,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.sample_rate == 0 {
            return Err(Error::param("sample_rate", "must be positive"));
        }
        let all = [
            self.f_start,
            self.f_end,
            self.sweep_duration,
            self.lead_silence,
            self.tail_silence,
            self.amplitude,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("sweep", "all fields must be finite"));
        }
        if self.f_start < 0.0 {
            return Err(Error::param("f_start", "must be non-negative"));
        }
        if self.f_start >= self.f_end {
            return Err(Error::param(
                "f_end",
                format!("must exceed f_start ({} Hz)", self.f_start),
            ));
        }
        if self.f_end > nyquist {
            return Err(Error::param(
                "f_end",
                format!("{} Hz exceeds the Nyquist frequency {nyquist} Hz", self.f_end),
            ));
        }
        if self.sweep_duration <= 0.0 {
            return Err(Error::param("sweep_duration", "must be positive"));
        }
        if self.lead_silence < 0.0 {
            return Err(Error::param("lead_silence", "must be non-negative"));
        }
        if self.tail_silence < 0.0 {
            return Err(Error::param("tail_silence", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.amplitude) {
            return Err(Error::param("amplitude", "must lie in [0, 1]"));
        }
        Ok(())
    }

    fn seconds_to_samples(&self, seconds: f64) -> usize {
        (seconds * self.sample_rate as f64).round() as usize
    }

    pub fn lead_samples(&self) -> usize {
        self.seconds_to_samples(self.lead_silence)
    }

    pub fn sweep_samples(&self) -> usize {
        self.seconds_to_samples(self.sweep_duration)
    }

    pub fn total_samples(&self) -> usize {
        self.seconds_to_samples(self.lead_silence + self.sweep_duration + self.tail_silence)
    }

    /// Length kept by [`trim`]: the sweep plus half a second of decay.
    pub fn trimmed_samples(&self) -> usize {
        self.seconds_to_samples(self.sweep_duration + TRIM_TAIL_SECONDS)
    }

    /// The fields in wire order.
    pub fn to_fields(&self) -> [f64; 7] {
        [
            self.f_start,
            self.f_end,
            self.sweep_duration,
            self.lead_silence,
            self.tail_silence,
            self.amplitude,
            self.sample_rate as f64,
        ]
    }

    pub fn from_fields(fields: [f64; 7]) -> Result<Self> {
        let rate = fields[6];
        if !(rate.is_finite() && rate >= 1.0 && rate.fract() == 0.0 && rate <= u32::MAX as f64) {
            return Err(Error::param("sample_rate", format!("not a valid rate: {rate}")));
        }
        let spec = SweepSpec {
            f_start: fields[0],
            f_end: fields[1],
            sweep_duration: fields[2],
            lead_silence: fields[3],
            tail_silence: fields[4],
            amplitude: fields[5],
            sample_rate: rate as u32,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn sweep_segment(spec: &SweepSpec) -> Vec<f64> {
    let sr = spec.sample_rate as f64;
    let duration = spec.sweep_duration;
    let rate = (spec.f_end - spec.f_start) / (2.0 * duration);
    (0..spec.sweep_samples())
        .map(|i| {
            let t = i as f64 / sr;
            spec.amplitude * (2.0 * PI * (spec.f_start * t + rate * t * t)).sin()
        })
        .collect()
}

/// Renders the padded excitation: lead silence, the linear sweep, then tail
/// silence.
pub fn generate_sweep(spec: &SweepSpec) -> Result<AudioSignal> {
    spec.validate()?;
    let total = spec.total_samples();
    let lead = spec.lead_samples();
    let mut samples = vec![0.0; total];
    for (dst, v) in samples[lead..].iter_mut().zip(sweep_segment(spec)) {
        *dst = v;
    }
    Ok(AudioSignal::from_parts_unchecked(samples, spec.sample_rate))
}

/// The sweep alone, without silence padding. This is the reference used for
/// alignment and deconvolution.
pub fn sweep_reference(spec: &SweepSpec) -> Result<AudioSignal> {
    spec.validate()?;
    Ok(AudioSignal::from_parts_unchecked(
        sweep_segment(spec),
        spec.sample_rate,
    ))
}

/// Locates `reference` inside `recorded` by cross-correlation and shifts the
/// recording so the matching content starts at index 0.
///
/// Only non-negative lags are searched; the correlation maximum is taken over
/// signed values with the smallest lag winning ties.
pub fn align(recorded: &AudioSignal, reference: &AudioSignal) -> Result<(usize, AudioSignal)> {
    recorded.check_same_rate(reference)?;
    if recorded.is_empty() || reference.is_empty() {
        return Err(Error::param("signal", "alignment needs non-empty inputs"));
    }
    let corr = dsp::cross_correlate(recorded.samples(), reference.samples());
    let offset = dsp::argmax(&corr).unwrap_or(0);
    let mut aligned = Vec::with_capacity(recorded.len());
    aligned.extend_from_slice(&recorded.samples()[offset..]);
    aligned.resize(recorded.len(), 0.0);
    Ok((
        offset,
        AudioSignal::from_parts_unchecked(aligned, recorded.sample_rate()),
    ))
}

/// Keeps the sweep plus half a second of reverberation from an aligned
/// recording.
pub fn trim(aligned: &AudioSignal, spec: &SweepSpec) -> Result<AudioSignal> {
    if aligned.sample_rate() != spec.sample_rate {
        return Err(Error::param(
            "sample_rate",
            format!(
                "recording is {} Hz but sweep is {} Hz",
                aligned.sample_rate(),
                spec.sample_rate
            ),
        ));
    }
    let needed = spec.trimmed_samples();
    if aligned.len() < needed {
        return Err(Error::Truncation {
            needed,
            got: aligned.len(),
        });
    }
    Ok(AudioSignal::from_parts_unchecked(
        aligned.samples()[..needed].to_vec(),
        aligned.sample_rate(),
    ))
}

/// Scales the signal so its largest absolute sample is exactly 1.
pub fn normalize(signal: &AudioSignal) -> Result<AudioSignal> {
    let peak = signal.peak();
    if peak == 0.0 {
        return Err(Error::Degenerate("cannot normalize an all-zero signal".into()));
    }
    Ok(AudioSignal::from_parts_unchecked(
        signal.samples().iter().map(|v| v / peak).collect(),
        signal.sample_rate(),
    ))
}

fn to_pcm16(v: f64) -> i16 {
    (v.clamp(-1.0, 1.0) * PCM_FULL_SCALE).round() as i16
}

/// Writes a mono 16-bit PCM WAV file. Samples outside [-1, 1] are clipped.
pub fn write_wav(signal: &AudioSignal, path: impl AsRef<Path>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &v in signal.samples() {
        writer.write_sample(to_pcm16(v))?;
    }
    writer.finalize()?;
    Ok(())
}

/// Reads a mono 16-bit PCM WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioSignal> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "expected 1 channel, found {}",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "expected 16-bit integer PCM, found {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM_FULL_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    AudioSignal::new(samples, spec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn sig(samples: Vec<f64>) -> AudioSignal {
        AudioSignal::new(samples, 8000).unwrap()
    }

    #[test]
    fn default_sweep_is_five_seconds() {
        let s = generate_sweep(&SweepSpec::default()).unwrap();
        assert_eq!(s.len(), 220_500);
        assert_eq!(s.sample_rate(), 44100);
        let lead = SweepSpec::default().lead_samples();
        assert!(s.samples()[..lead].iter().all(|&v| v == 0.0));
        assert_eq!(s.samples()[lead], 0.0);
        assert!((s.peak() - 0.5).abs() < 1e-3);
    }

    #[test]
    fn near_constant_sweep_is_a_tone() {
        let spec = SweepSpec {
            f_start: 440.0,
            f_end: 440.0 + 1e-6,
            sweep_duration: 1.0,
            lead_silence: 0.0,
            tail_silence: 0.0,
            amplitude: 1.0,
            sample_rate: 8000,
        };
        let s = generate_sweep(&spec).unwrap();
        let spectrum = dsp::rfft_padded(s.samples(), s.len());
        let mags: Vec<f64> = spectrum[..s.len() / 2].iter().map(|c| c.norm()).collect();
        // 1 s at 8 kHz gives 1 Hz bins.
        assert_eq!(dsp::argmax(&mags), Some(440));
    }

    #[test]
    fn rejects_invalid_specs() {
        let base = SweepSpec::default();
        let bad = [
            SweepSpec { f_end: 0.0, ..base },
            SweepSpec { f_start: 100.0, f_end: 100.0, ..base },
            SweepSpec { f_end: 30000.0, ..base },
            SweepSpec { sweep_duration: 0.0, ..base },
            SweepSpec { lead_silence: -1.0, ..base },
            SweepSpec { amplitude: 1.5, ..base },
            SweepSpec { sample_rate: 0, ..base },
        ];
        for spec in bad {
            assert!(matches!(generate_sweep(&spec), Err(Error::Parameter { .. })), "{spec:?}");
        }
    }

    #[test]
    fn instantaneous_frequency_increases() {
        let spec = SweepSpec {
            f_start: 50.0,
            f_end: 4000.0,
            sweep_duration: 1.0,
            lead_silence: 0.0,
            tail_silence: 0.0,
            amplitude: 1.0,
            sample_rate: 44100,
        };
        let s = generate_sweep(&spec).unwrap();
        let window = 2205;
        let counts: Vec<usize> = s
            .samples()
            .chunks(window)
            .filter(|c| c.len() == window)
            .map(|c| c.windows(2).filter(|w| (w[0] < 0.0) != (w[1] < 0.0)).count())
            .collect();
        for w in counts.windows(2) {
            assert!(w[1] >= w[0], "{counts:?}");
        }
        assert!(counts.last().unwrap() > &(counts[0] * 10));
    }

    #[test]
    fn align_recovers_pure_shift() {
        let spec = SweepSpec {
            sample_rate: 8000,
            f_end: 4000.0,
            sweep_duration: 0.5,
            ..SweepSpec::default()
        };
        let reference = sweep_reference(&spec).unwrap();
        let (offset, aligned) = align(&reference, &reference).unwrap();
        assert_eq!(offset, 0);
        assert_eq!(aligned, reference);
        let delayed = reference.delayed(100);
        let (offset, aligned) = align(&delayed, &reference).unwrap();
        assert_eq!(offset, 100);
        assert_eq!(&aligned.samples()[..reference.len()], reference.samples());
        assert!(aligned.samples()[reference.len()..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn align_recovers_scaled_noisy_shift() {
        let spec = SweepSpec::default();
        let reference = sweep_reference(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for k in [0usize, 37, 441, 4410] {
            let mut samples = vec![0.0; k];
            samples.extend(reference.samples().iter().map(|v| 0.5 * v));
            samples.resize(reference.len() + 5000, 0.0);
            let clean = AudioSignal::new(samples, spec.sample_rate).unwrap();
            let rms = reference.scaled(0.5).rms();
            let noise = Normal::new(0.0, rms * 10f64.powf(-30.0 / 20.0)).unwrap();
            let noisy: Vec<f64> = clean.samples().iter().map(|v| v + noise.sample(&mut rng)).collect();
            let recorded = AudioSignal::new(noisy, spec.sample_rate).unwrap();
            assert_eq!(align(&recorded, &reference).unwrap().0, k);
        }
    }

    #[test]
    fn align_rejects_rate_mismatch() {
        let a = AudioSignal::new(vec![1.0], 8000).unwrap();
        let b = AudioSignal::new(vec![1.0], 16000).unwrap();
        assert!(matches!(align(&a, &b), Err(Error::Parameter { .. })));
    }

    #[test]
    fn trim_lengths() {
        let spec = SweepSpec::default();
        let long = AudioSignal::silence(200_000, 44100).unwrap();
        assert_eq!(trim(&long, &spec).unwrap().len(), 110_250);

        let spec = SweepSpec {
            sweep_duration: 1.0,
            f_end: 4000.0,
            sample_rate: 8000,
            ..SweepSpec::default()
        };
        let exact = sig((0..12000).map(|i| (i as f64).sin()).collect());
        assert_eq!(trim(&exact, &spec).unwrap(), exact);
        let short = sig(vec![0.0; 11999]);
        assert!(matches!(
            trim(&short, &spec),
            Err(Error::Truncation { needed: 12000, got: 11999 })
        ));
    }

    #[test]
    fn normalize_examples() {
        let out = normalize(&sig(vec![0.5, -0.25])).unwrap();
        assert_eq!(out.samples(), &[1.0, -0.5]);
        let peaked = sig(vec![1.0, -0.3, 0.2]);
        assert_eq!(normalize(&peaked).unwrap(), peaked);
        assert!(matches!(normalize(&sig(vec![0.0; 4])), Err(Error::Degenerate(_))));
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_and_ratio_preserving(
            xs in prop::collection::vec(-10.0f64..10.0, 1..64)
        ) {
            prop_assume!(xs.iter().any(|v| *v != 0.0));
            let s = sig(xs.clone());
            let once = normalize(&s).unwrap();
            let twice = normalize(&once).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!((once.peak() - 1.0).abs() == 0.0);
            for (o, x) in once.samples().iter().zip(&xs) {
                prop_assert_eq!(o.signum() == x.signum() || *x == 0.0, true);
            }
            let i = dsp::argmax_abs(&xs).unwrap();
            for (j, x) in xs.iter().enumerate() {
                let expected = x / xs[i];
                let got = once.samples()[j] / once.samples()[i];
                prop_assert!((expected - got).abs() <= 1e-12 * expected.abs().max(1.0));
            }
        }

        #[test]
        fn align_is_shift_equivariant(seed in 0u64..1000, k in 0usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reference: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut x = vec![0.0; rng.gen_range(0..50)];
            x.extend(reference.iter().map(|v| 0.8 * v));
            x.extend((0..64).map(|_| rng.gen_range(-0.05..0.05)));
            let reference = sig(reference);
            let x = sig(x);
            let base = align(&x, &reference).unwrap().0;
            let shifted = align(&x.delayed(k), &reference).unwrap().0;
            prop_assert_eq!(shifted, base + k);
        }

        #[test]
        fn trim_length_ignores_content(seed in 0u64..100, extra in 0usize..500) {
            let spec = SweepSpec { sweep_duration: 0.1, f_end: 4000.0, sample_rate: 8000, ..SweepSpec::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sig((0..spec.trimmed_samples() + extra).map(|_| rng.gen_range(-1.0..1.0)).collect());
            prop_assert_eq!(trim(&s, &spec).unwrap().len(), 4800);
        }
    }

    #[test]
    fn wav_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = AudioSignal::new((0..5000).map(|_| rng.gen_range(-1.0..=1.0)).collect(), 44100).unwrap();
        write_wav(&s, &path).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 44100);
        assert_eq!(back.len(), s.len());
        let max_err = s
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1.0 / 32767.0, "{max_err}");
    }

    #[test]
    fn wav_full_scale_and_clipping() {
        assert_eq!(to_pcm16(1.0), 32767);
        assert_eq!(to_pcm16(-1.0), -32767);
        assert_eq!(to_pcm16(3.0), 32767);
        assert_eq!(to_pcm16(-3.0), -32767);
    }

    #[test]
    fn wav_empty_and_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.wav");
        write_wav(&AudioSignal::new(vec![], 44100).unwrap(), &path).unwrap();
        assert!(read_wav(&path).unwrap().is_empty());

        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"definitely not a wav file").unwrap();
        assert!(matches!(read_wav(&junk), Err(Error::Format(_))));

        let stereo = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&stereo), Err(Error::Format(_))));
    }
}
