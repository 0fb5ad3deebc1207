//! Synthetic acoustics testbed: shoebox rooms rendered with the image-source
//! method, device-coloured recordings and benign/attack pair datasets.

pub(crate) mod dataset;

pub use dataset::{
    default_corpus, expected_pair_counts, generate_dataset, mix_seed, plan_dataset, random_device, Dataset,
    DatasetManifest, ManifestEntry, MANIFEST_FILE,
    DatasetConfig, DatasetPlan, Label, PairRecord, Recording, RecordingMeta,
};

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};
use crate::features::OCTAVE_CENTERS;
use crate::rir::{ImpulseResponse, NOISE_FLOOR_SENTINEL_DB};
use crate::signal::AudioSignal;

pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;
/// Distance at which an arrival has unit amplitude; amplitudes fall as
/// `REFERENCE_DISTANCE / d`.
pub const REFERENCE_DISTANCE: f64 = 0.1;
/// Taps of the windowed-sinc fractional-delay kernel.
pub const KERNEL_TAPS: usize = 8;

/// Wall absorption coefficients, ordered `[x=0, x=Lx, y=0, y=Ly, z=0, z=Lz]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Absorption {
    Uniform([f64; 6]),
    /// One row per octave band, centred on the standard octave centres.
    PerBand(Vec<[f64; 6]>),
}

impl Absorption {
    pub fn all(alpha: f64) -> Self {
        Absorption::Uniform([alpha; 6])
    }

    fn rows(&self) -> Vec<[f64; 6]> {
        match self {
            Absorption::Uniform(row) => vec![*row],
            Absorption::PerBand(rows) => rows.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let Absorption::PerBand(rows) = self {
            if rows.len() != OCTAVE_CENTERS.len() {
                return Err(Error::param(
                    "absorption",
                    format!("expected {} octave rows, got {}", OCTAVE_CENTERS.len(), rows.len()),
                ));
            }
        }
        if self.rows().iter().flatten().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::param("absorption", "coefficients must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Mean coefficient over walls and bands.
    pub fn mean(&self) -> f64 {
        let rows = self.rows();
        rows.iter().flatten().sum::<f64>() / (6 * rows.len()) as f64
    }
}

/// A rectangular room.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomModel {
    /// `(Lx, Ly, Lz)` in metres.
    pub dimensions: [f64; 3],
    pub absorption: Absorption,
    #[serde(default = "default_speed_of_sound")]
    pub speed_of_sound: f64,
    pub max_order: u32,
    /// Arrivals later than this many seconds are not rendered.
    #[serde(default)]
    pub max_duration: Option<f64>,
}

fn default_speed_of_sound() -> f64 {
    DEFAULT_SPEED_OF_SOUND
}

impl RoomModel {
    pub fn new(dimensions: [f64; 3], absorption: Absorption, max_order: u32) -> Self {
        Self {
            dimensions,
            absorption,
            speed_of_sound: DEFAULT_SPEED_OF_SOUND,
            max_order,
            max_duration: None,
        }
    }

    pub fn volume(&self) -> f64 {
        self.dimensions.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dimensions;
        2.0 * (x * y + x * z + y * z)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimensions.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::param("dimensions", "must be positive"));
        }
        if !(self.speed_of_sound.is_finite() && self.speed_of_sound > 0.0) {
            return Err(Error::param("speed_of_sound", "must be positive"));
        }
        if let Some(d) = self.max_duration {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::param("max_duration", "must be positive"));
            }
        }
        self.absorption.validate()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        p.iter()
            .zip(&self.dimensions)
            .all(|(c, l)| c.is_finite() && *c > 0.0 && c < l)
    }
}

/// Loudspeaker and microphone positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub source: [f64; 3],
    pub receiver: [f64; 3],
}

impl Placement {
    pub fn distance(&self) -> f64 {
        distance(self.source, self.receiver)
    }

    pub fn validate(&self, room: &RoomModel) -> Result<()> {
        if !room.contains(self.source) {
            return Err(Error::param("source", "must lie strictly inside the room"));
        }
        if !room.contains(self.receiver) {
            return Err(Error::param("receiver", "must lie strictly inside the room"));
        }
        if self.distance() == 0.0 {
            return Err(Error::param("receiver", "must differ from the source"));
        }
        Ok(())
    }
}

pub(crate) fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

/// Channel imperfections of one phone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub gain_db: f64,
    /// Recording SNR relative to the signal RMS; `None` records without noise.
    pub snr_db: Option<f64>,
    /// Fractional-sample delay of the recording clock.
    pub clock_offset: f64,
    /// Spectral slope in dB per octave around 1 kHz.
    pub spectral_tilt: f64,
}

impl DeviceProfile {
    pub fn identity() -> Self {
        Self {
            gain_db: 0.0,
            snr_db: None,
            clock_offset: 0.0,
            spectral_tilt: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(snr) = self.snr_db {
            if !(snr > 0.0) {
                return Err(Error::param("snr_db", "must be positive"));
            }
        }
        if ![self.gain_db, self.clock_offset, self.spectral_tilt]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::param("device", "fields must be finite"));
        }
        Ok(())
    }
}

/// One image source as seen from the receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct Arrival {
    pub distance: f64,
    /// Delay in samples.
    pub delay: f64,
    pub order: u32,
    /// Amplitude per absorption row (one entry for uniform absorption).
    pub amplitudes: Vec<f64>,
}

/// Image positions along one axis: relative coordinate plus reflection
/// counts off the low and high wall.
struct AxisImage {
    offset: f64,
    low: u32,
    high: u32,
}

fn axis_images(length: f64, src: f64, rcv: f64, max_order: u32, max_dist: f64) -> Vec<AxisImage> {
    let reach = ((max_dist / (2.0 * length)).ceil() + 1.0).min(max_order as f64 + 1.0) as i64;
    let mut out = Vec::new();
    for n in -reach..=reach {
        for q in 0..2i64 {
            let low = (n - q).unsigned_abs() as u32;
            let high = n.unsigned_abs() as u32;
            if low + high > max_order {
                continue;
            }
            let pos = 2.0 * n as f64 * length + if q == 0 { src } else { -src };
            let offset = pos - rcv;
            if offset.abs() > max_dist {
                continue;
            }
            out.push(AxisImage { offset, low, high });
        }
    }
    out
}

/// Image positions along the three axes, within the distance limit.
struct ImageGrid {
    axes: [Vec<AxisImage>; 3],
    max_order: u32,
    max_sq: f64,
}

impl ImageGrid {
    fn new(room: &RoomModel, place: &Placement, max_dist: f64) -> Self {
        let axes = std::array::from_fn(|i| {
            axis_images(room.dimensions[i], place.source[i], place.receiver[i], room.max_order, max_dist)
        });
        Self { axes, max_order: room.max_order, max_sq: max_dist * max_dist }
    }

    /// Visits every image source up to the reflection order and distance
    /// limit. The callback receives distance, order and the index of the
    /// image along each axis.
    fn for_each(&self, mut visit: impl FnMut(f64, u32, [usize; 3])) {
        let [xs, ys, zs] = &self.axes;
        for (ix, x) in xs.iter().enumerate() {
            let ox = x.low + x.high;
            let dx2 = x.offset * x.offset;
            for (iy, y) in ys.iter().enumerate() {
                let oxy = ox + y.low + y.high;
                let dxy2 = dx2 + y.offset * y.offset;
                if oxy > self.max_order || dxy2 > self.max_sq {
                    continue;
                }
                for (iz, z) in zs.iter().enumerate() {
                    let order = oxy + z.low + z.high;
                    let d2 = dxy2 + z.offset * z.offset;
                    if order > self.max_order || d2 > self.max_sq {
                        continue;
                    }
                    visit(d2.sqrt(), order, [ix, iy, iz]);
                }
            }
        }
    }

    fn counts(&self, idx: [usize; 3]) -> [u32; 6] {
        let [x, y, z] = [&self.axes[0][idx[0]], &self.axes[1][idx[1]], &self.axes[2][idx[2]]];
        [x.low, x.high, y.low, y.high, z.low, z.high]
    }

    /// Reflection gain of every axis image per absorption row:
    /// `gains[axis][image][row]`.
    fn axis_gains<const R: usize>(&self, table: &[[Vec<f64>; 6]]) -> [Vec<[f64; R]>; 3] {
        debug_assert_eq!(table.len(), R);
        std::array::from_fn(|axis| {
            self.axes[axis]
                .iter()
                .map(|im| {
                    std::array::from_fn(|row| {
                        let t = &table[row];
                        t[2 * axis][im.low as usize] * t[2 * axis + 1][im.high as usize]
                    })
                })
                .collect()
        })
    }

    /// Sums every arrival into `len` frames of `R` band samples each.
    fn render<const R: usize>(&self, table: &[[Vec<f64>; 6]], samples_per_metre: f64, len: usize) -> Vec<[f64; R]> {
        let [gx, gy, gz] = self.axis_gains::<R>(table);
        let mut frames = vec![[0.0; R]; len];
        self.for_each(|d, _, [ix, iy, iz]| {
            let (first, taps) = fractional_delay_kernel(d * samples_per_metre);
            let lo = (-first).max(0) as usize;
            let hi = KERNEL_TAPS.min((len as i64 - first).max(0) as usize);
            if lo >= hi {
                return;
            }
            let spread = REFERENCE_DISTANCE / d;
            let (x, y, z) = (&gx[ix], &gy[iy], &gz[iz]);
            let amps: [f64; R] = std::array::from_fn(|r| spread * x[r] * y[r] * z[r]);
            let start = (first + lo as i64) as usize;
            for (frame, w) in frames[start..start + hi - lo].iter_mut().zip(&taps[lo..hi]) {
                for r in 0..R {
                    frame[r] += amps[r] * w;
                }
            }
        });
        frames
    }
}

fn max_distance(room: &RoomModel, sample_rate: u32) -> f64 {
    match room.max_duration {
        Some(t) => t * room.speed_of_sound - (KERNEL_TAPS as f64 / 2.0 + 1.0) * room.speed_of_sound / sample_rate as f64,
        None => f64::INFINITY,
    }
}

/// Reflection-coefficient powers, `table[row][wall][count]`.
fn reflection_table(room: &RoomModel) -> Vec<[Vec<f64>; 6]> {
    let max = room.max_order as usize;
    room.absorption
        .rows()
        .iter()
        .map(|row| {
            std::array::from_fn(|w| {
                let beta = (1.0 - row[w]).sqrt();
                let mut powers = Vec::with_capacity(max + 1);
                let mut p = 1.0;
                for _ in 0..=max {
                    powers.push(p);
                    p *= beta;
                }
                powers
            })
        })
        .collect()
}

fn amplitude(table: &[Vec<f64>; 6], counts: [u32; 6], distance: f64) -> f64 {
    let mut a = REFERENCE_DISTANCE / distance;
    for (w, &c) in counts.iter().enumerate() {
        a *= table[w][c as usize];
    }
    a
}

/// Lists the image-source arrivals at the receiver, sorted by delay.
pub fn image_sources(room: &RoomModel, place: &Placement, sample_rate: u32) -> Result<Vec<Arrival>> {
    room.validate()?;
    place.validate(room)?;
    let table = reflection_table(room);
    let mut out = Vec::new();
    let grid = ImageGrid::new(room, place, max_distance(room, sample_rate));
    grid.for_each(|d, order, idx| {
        let counts = grid.counts(idx);
        out.push(Arrival {
            distance: d,
            delay: d / room.speed_of_sound * sample_rate as f64,
            order,
            amplitudes: table.iter().map(|t| amplitude(t, counts, d)).collect(),
        });
    });
    out.sort_by(|a, b| a.delay.total_cmp(&b.delay));
    Ok(out)
}

/// `sin_cos(pi j / 4)` for the tap offsets `j = -3..=4`.
const QUARTER_TURNS: [(f64, f64); KERNEL_TAPS] = {
    use std::f64::consts::FRAC_1_SQRT_2 as H;
    [(-H, -H), (-1.0, 0.0), (-H, H), (0.0, 1.0), (H, H), (1.0, 0.0), (H, -H), (0.0, -1.0)]
};

/// Hann-windowed sinc taps for a delay of `delay` samples; returns the first
/// tap index and the weights.
fn fractional_delay_kernel(delay: f64) -> (i64, [f64; KERNEL_TAPS]) {
    const HALF: i64 = (KERNEL_TAPS / 2) as i64;
    let base = delay.floor();
    let frac = delay - base;
    let first = base as i64 - HALF + 1;
    // tap k sits at t = j - frac with j = k - HALF + 1, so sin(pi t) and the
    // window cosine both expand around frac with one trig evaluation each
    let sin_frac = (PI * frac).sin();
    let (ws, wc) = (PI * frac / HALF as f64).sin_cos();
    let mut taps = [0.0; KERNEL_TAPS];
    for (k, tap) in taps.iter_mut().enumerate() {
        let j = k as i64 - HALF + 1;
        let t = j as f64 - frac;
        if t.abs() >= HALF as f64 {
            continue;
        }
        let sinc = if t.abs() < 1e-12 {
            1.0
        } else {
            // sin(pi (j - frac)) = -(-1)^j sin(pi frac)
            let sign = if j % 2 == 0 { -1.0 } else { 1.0 };
            sign * sin_frac / (PI * t)
        };
        let (js, jc) = QUARTER_TURNS[k];
        let window = 0.5 * (1.0 + jc * wc + js * ws);
        *tap = sinc * window;
    }
    (first, taps)
}

/// Log-frequency crossover weights that sum to one at every frequency; band
/// `k` is centred on the k-th octave centre.
fn crossover_weight(band: usize, freq: f64) -> f64 {
    let centers = &OCTAVE_CENTERS;
    let last = centers.len() - 1;
    if freq <= centers[0] {
        return if band == 0 { 1.0 } else { 0.0 };
    }
    if freq >= centers[last] {
        return if band == last { 1.0 } else { 0.0 };
    }
    let k = centers.windows(2).position(|w| freq < w[1]).unwrap_or(last - 1);
    let u = (freq / centers[k]).log2() / (centers[k + 1] / centers[k]).log2();
    let lower = (PI * u / 2.0).cos().powi(2);
    if band == k {
        lower
    } else if band == k + 1 {
        1.0 - lower
    } else {
        0.0
    }
}

/// Renders the room impulse response between source and receiver.
///
/// The response starts at emission time, so `direct_index` sits at the
/// direct-path propagation delay. Simulated responses are noise-free and
/// carry the sentinel noise floor.
pub fn simulate_rir(room: &RoomModel, place: &Placement, sample_rate: u32) -> Result<ImpulseResponse> {
    room.validate()?;
    place.validate(room)?;
    if sample_rate == 0 {
        return Err(Error::param("sample_rate", "must be positive"));
    }
    let table = reflection_table(room);
    let rows = table.len();
    let sr = sample_rate as f64;
    let max_dist = max_distance(room, sample_rate);
    let direct_delay = place.distance() / room.speed_of_sound * sr;
    let grid = ImageGrid::new(room, place, max_dist);
    let len = match room.max_duration {
        Some(t) => (t * sr).ceil() as usize,
        None => {
            let mut longest: f64 = 0.0;
            grid.for_each(|d, _, _| longest = longest.max(d));
            (longest / room.speed_of_sound * sr).ceil() as usize + KERNEL_TAPS
        }
    }
    .max(direct_delay.ceil() as usize + KERNEL_TAPS);

    let per_metre = sr / room.speed_of_sound;
    let samples = if rows == 1 {
        grid.render::<1>(&table, per_metre, len).into_iter().map(|[v]| v).collect()
    } else {
        const BANDS: usize = OCTAVE_CENTERS.len();
        let frames = grid.render::<BANDS>(&table, per_metre, len);
        let n = dsp::fft_len(len);
        let bin_hz = sr / n as f64;
        let mut sum = vec![Complex64::new(0.0, 0.0); n / 2 + 1];
        for row in 0..BANDS {
            let band: Vec<f64> = frames.iter().map(|f| f[row]).collect();
            let spec = dsp::rfft_padded(&band, n);
            for (k, (acc, c)) in sum.iter_mut().zip(&spec).enumerate() {
                *acc += c * crossover_weight(row, k as f64 * bin_hz);
            }
        }
        let mut out = dsp::irfft(sum, n);
        out.truncate(len);
        out
    };
    let direct_index = (direct_delay.round() as usize).min(len - 1);
    ImpulseResponse::new(samples, sample_rate, direct_index, NOISE_FLOOR_SENTINEL_DB)
}

/// Applies gain, spectral tilt and clock offset in one frequency-domain pass.
fn colour(signal: &[f64], sample_rate: u32, device: &DeviceProfile) -> Vec<f64> {
    let gain = 10f64.powf(device.gain_db / 20.0);
    if device.spectral_tilt == 0.0 && device.clock_offset == 0.0 {
        return signal.iter().map(|v| v * gain).collect();
    }
    let n = dsp::fft_len(signal.len() + KERNEL_TAPS);
    let sr = sample_rate as f64;
    let nyquist = sr / 2.0;
    let mut spec = dsp::rfft_padded(signal, n);
    for (k, c) in spec.iter_mut().enumerate() {
        let f = k as f64 * sr / n as f64;
        let octaves = (f.clamp(20.0, nyquist) / 1000.0).log2();
        let mag = gain * 10f64.powf(device.spectral_tilt * octaves / 20.0);
        let phase = -2.0 * PI * k as f64 * device.clock_offset / n as f64;
        *c *= Complex64::from_polar(mag, phase);
    }
    let mut out = dsp::irfft(spec, n);
    out.truncate(signal.len());
    out
}

/// Seeded white Gaussian noise of standard deviation `sigma`.
pub(crate) fn white_noise(len: usize, sigma: f64, seed: u64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; len];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    (0..len).map(|_| normal.sample(&mut rng)).collect()
}

/// What a device hears when `excitation` is played in `room`: the excitation
/// through the room response, then the device's colouring and noise. The
/// recording has the length of the excitation.
pub fn simulate_recording(
    room: &RoomModel,
    place: &Placement,
    excitation: &AudioSignal,
    device: &DeviceProfile,
    seed: u64,
) -> Result<AudioSignal> {
    let rir = simulate_rir(room, place, excitation.sample_rate())?;
    record_through(&rir, excitation, device, seed)
}

/// As [`simulate_recording`] with a precomputed impulse response.
pub fn record_through(
    rir: &ImpulseResponse,
    excitation: &AudioSignal,
    device: &DeviceProfile,
    seed: u64,
) -> Result<AudioSignal> {
    device.validate()?;
    if rir.sample_rate() != excitation.sample_rate() {
        return Err(Error::param("sample_rate", "room response and excitation differ"));
    }
    let mut wet = dsp::convolve(excitation.samples(), rir.samples());
    wet.truncate(excitation.len());
    let mut out = colour(&wet, excitation.sample_rate(), device);
    if let Some(snr) = device.snr_db {
        let rms = (dsp::energy(&out) / out.len().max(1) as f64).sqrt();
        let sigma = rms * 10f64.powf(-snr / 20.0);
        let noise = white_noise(out.len(), sigma, seed);
        for (o, n) in out.iter_mut().zip(noise) {
            *o += n;
        }
    }
    AudioSignal::new(out, excitation.sample_rate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{feature_vector, schroeder_curve, rt_from_decay, standard_band_plan, DecayRange};
    use crate::signal::{generate_sweep, SweepSpec};

    const SR: u32 = 44100;

    fn shoebox(alpha: f64, order: u32) -> RoomModel {
        RoomModel::new([5.0, 4.0, 3.0], Absorption::all(alpha), order)
    }

    fn place() -> Placement {
        Placement {
            source: [1.3, 1.1, 1.2],
            receiver: [3.9, 2.7, 1.6],
        }
    }

    #[test]
    fn kernel_matches_direct_formula() {
        for delay in [10.0, 10.25, 10.5, 17.999, 3.0001] {
            let (first, taps) = fractional_delay_kernel(delay);
            for (k, tap) in taps.iter().enumerate() {
                let t = (first + k as i64) as f64 - delay;
                let sinc = if t.abs() < 1e-12 { 1.0 } else { (PI * t).sin() / (PI * t) };
                let window = 0.5 * (1.0 + (PI * t / 4.0).cos());
                let expected = if t.abs() < 4.0 { sinc * window } else { 0.0 };
                assert!((tap - expected).abs() < 1e-12, "{delay} {k}: {tap} vs {expected}");
            }
        }
    }

    #[test]
    fn direct_path_geometry() {
        let room = RoomModel::new([10.0, 10.0, 10.0], Absorption::all(0.3), 0);
        let place = Placement { source: [2.0, 5.0, 5.0], receiver: [5.43, 5.0, 5.0] };
        let ir = simulate_rir(&room, &place, SR).unwrap();
        assert_eq!(ir.direct_index(), 441);
        let arrivals = image_sources(&room, &place, SR).unwrap();
        assert_eq!(arrivals.len(), 1);
        assert!((arrivals[0].delay - 441.0).abs() < 1e-9);
        let expected = REFERENCE_DISTANCE / 3.43;
        assert!((ir.samples()[441] - expected).abs() < 1e-9);
        let others: f64 = ir.samples().iter().enumerate().filter(|(i, _)| *i != 441).map(|(_, v)| v.abs()).sum();
        assert!(others < 1e-9);
    }

    #[test]
    fn first_order_has_seven_arrivals() {
        let room = shoebox(0.2, 1);
        let arrivals = image_sources(&room, &place(), SR).unwrap();
        assert_eq!(arrivals.len(), 7);
        assert_eq!(arrivals.iter().filter(|a| a.order == 1).count(), 6);
    }

    #[test]
    fn full_absorption_leaves_only_direct_sound() {
        let room = shoebox(1.0, 6);
        let arrivals = image_sources(&room, &place(), SR).unwrap();
        let nonzero: Vec<_> = arrivals.iter().filter(|a| a.amplitudes[0] != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(nonzero[0].order, 0);
        let ir = simulate_rir(&room, &place(), SR).unwrap();
        let direct = simulate_rir(&shoebox(1.0, 0), &place(), SR).unwrap();
        assert_eq!(&ir.samples()[..direct.len()], direct.samples());
    }

    #[test]
    fn rejects_bad_placements() {
        let room = shoebox(0.2, 1);
        let outside = Placement { source: [6.0, 1.0, 1.0], receiver: [1.0, 1.0, 1.0] };
        assert!(matches!(simulate_rir(&room, &outside, SR), Err(Error::Parameter { .. })));
        let same = Placement { source: [1.0, 1.0, 1.0], receiver: [1.0, 1.0, 1.0] };
        assert!(matches!(simulate_rir(&room, &same, SR), Err(Error::Parameter { .. })));
        let bad_room = RoomModel::new([5.0, 4.0, 3.0], Absorption::all(1.5), 1);
        assert!(simulate_rir(&bad_room, &place(), SR).is_err());
    }

    #[test]
    fn energy_decreases_with_absorption() {
        let mut previous = f64::INFINITY;
        for alpha in [0.05, 0.1, 0.3, 0.6, 0.9] {
            let e = simulate_rir(&shoebox(alpha, 12), &place(), SR).unwrap().energy();
            assert!(e.is_finite() && e < previous, "{alpha}: {e}");
            previous = e;
        }
        // raising a single wall's absorption
        let mut walls = [0.2; 6];
        let base = simulate_rir(&RoomModel::new([5.0, 4.0, 3.0], Absorption::Uniform(walls), 10), &place(), SR).unwrap();
        walls[3] = 0.7;
        let more = simulate_rir(&RoomModel::new([5.0, 4.0, 3.0], Absorption::Uniform(walls), 10), &place(), SR).unwrap();
        assert!(more.energy() < base.energy());
    }

    #[test]
    fn rt60_grows_as_absorption_falls() {
        let mut previous = 0.0;
        for alpha in [0.9, 0.6, 0.3, 0.1] {
            let mut room = shoebox(alpha, 300);
            room.max_duration = Some(0.9);
            let ir = simulate_rir(&room, &place(), SR).unwrap();
            let curve = schroeder_curve(&ir).unwrap();
            let rt = rt_from_decay(&curve, DecayRange::Rt20).unwrap();
            assert!(rt > previous, "alpha {alpha}: {rt} <= {previous}");
            previous = rt;
        }
    }

    #[test]
    fn uniform_rows_match_banded_rendering() {
        let uniform = shoebox(0.3, 4);
        let banded = RoomModel { absorption: Absorption::PerBand(vec![[0.3; 6]; 10]), ..uniform.clone() };
        let a = simulate_rir(&uniform, &place(), SR).unwrap();
        let b = simulate_rir(&banded, &place(), SR).unwrap();
        for (x, y) in a.samples().iter().zip(b.samples()) {
            assert!((x - y).abs() < 1e-9);
        }
        for f in [5.0, 31.5, 40.0, 700.0, 12_000.0, 20_000.0] {
            let total: f64 = (0..10).map(|k| crossover_weight(k, f)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_positions_give_identical_responses() {
        let room = shoebox(0.25, 8);
        assert_eq!(simulate_rir(&room, &place(), SR).unwrap(), simulate_rir(&room, &place(), SR).unwrap());
    }

    #[test]
    fn anechoic_identity_recording_is_delayed_scaled_excitation() {
        let spec = SweepSpec { sweep_duration: 0.5, lead_silence: 0.1, tail_silence: 0.2, ..SweepSpec::default() };
        let excitation = generate_sweep(&spec).unwrap();
        let room = RoomModel::new([10.0, 10.0, 10.0], Absorption::all(0.5), 0);
        let place = Placement { source: [2.0, 5.0, 5.0], receiver: [5.43, 5.0, 5.0] };
        let rec = simulate_recording(&room, &place, &excitation, &DeviceProfile::identity(), 1).unwrap();
        let g = REFERENCE_DISTANCE / 3.43;
        for i in 0..excitation.len() {
            let expected = if i >= 441 { g * excitation.samples()[i - 441] } else { 0.0 };
            assert!((rec.samples()[i] - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn recordings_are_seeded() {
        let spec = SweepSpec { sweep_duration: 0.3, lead_silence: 0.1, tail_silence: 0.1, ..SweepSpec::default() };
        let excitation = generate_sweep(&spec).unwrap();
        let device = DeviceProfile { gain_db: -3.0, snr_db: Some(30.0), clock_offset: 0.37, spectral_tilt: -1.0 };
        let room = shoebox(0.3, 5);
        let a = simulate_recording(&room, &place(), &excitation, &device, 42).unwrap();
        let b = simulate_recording(&room, &place(), &excitation, &device, 42).unwrap();
        let c = simulate_recording(&room, &place(), &excitation, &device, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn measured_snr_matches_request() {
        let spec = SweepSpec { sweep_duration: 0.3, lead_silence: 0.05, tail_silence: 0.05, ..SweepSpec::default() };
        let excitation = generate_sweep(&spec).unwrap();
        let room = shoebox(0.3, 3);
        let rir = simulate_rir(&room, &place(), SR).unwrap();
        let clean = record_through(&rir, &excitation, &DeviceProfile::identity(), 0).unwrap();
        for seed in 0..100 {
            let device = DeviceProfile { snr_db: Some(25.0), ..DeviceProfile::identity() };
            let noisy = record_through(&rir, &excitation, &device, seed).unwrap();
            let noise: f64 = noisy.samples().iter().zip(clean.samples()).map(|(a, b)| (a - b).powi(2)).sum();
            let snr = 10.0 * (clean.energy() / noise).log10();
            assert!((snr - 25.0).abs() <= 1.0, "seed {seed}: {snr}");
        }
    }

    #[test]
    fn device_colouring_is_gain_plus_tilt() {
        let spec = SweepSpec { sweep_duration: 0.3, lead_silence: 0.05, tail_silence: 0.05, ..SweepSpec::default() };
        let excitation = generate_sweep(&spec).unwrap();
        let quiet = DeviceProfile { gain_db: -6.0, ..DeviceProfile::identity() };
        let out = colour(excitation.samples(), SR, &quiet);
        let g = 10f64.powf(-6.0 / 20.0);
        for (o, e) in out.iter().zip(excitation.samples()) {
            assert!((o - g * e).abs() < 1e-12);
        }
        let tilted = DeviceProfile { spectral_tilt: 3.0, ..DeviceProfile::identity() };
        let out = colour(excitation.samples(), SR, &tilted);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(dsp::energy(&out) > excitation.energy());
    }

    #[test]
    fn dissimilar_rooms_differ_in_some_band_rt60() {
        let plan = standard_band_plan(SR).unwrap();
        let mut small = RoomModel::new([4.0, 3.0, 2.7], Absorption::all(0.35), 300);
        small.max_duration = Some(0.85);
        let mut large = RoomModel::new([9.0, 7.0, 3.2], Absorption::all(0.12), 300);
        large.max_duration = Some(0.85);
        let p_small = Placement { source: [1.5, 1.2, 1.1], receiver: [1.9, 1.3, 1.1] };
        let p_large = Placement { source: [4.0, 3.0, 1.1], receiver: [4.4, 3.1, 1.1] };
        let a = feature_vector(&simulate_rir(&small, &p_small, SR).unwrap(), &plan).unwrap();
        let b = feature_vector(&simulate_rir(&large, &p_large, SR).unwrap(), &plan).unwrap();
        let differs = (0..32).any(|band| {
            let (x, y) = (a.get(band, 0), b.get(band, 0));
            x > 0.0 && y > 0.0 && (x - y).abs() / x.max(y) > 0.05
        });
        assert!(differs);
    }
}
