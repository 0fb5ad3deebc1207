use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{distance, record_through, simulate_rir, Absorption, DeviceProfile, Placement, RoomModel};
use crate::error::{Error, Result};
use crate::features::OCTAVE_CENTERS;
use crate::signal::{generate_sweep, read_wav, write_wav, AudioSignal, SweepSpec};

/// Distance between a phone's loudspeaker and its own microphone.
pub(crate) const SELF_DISTANCE: f64 = 0.1;
pub(crate) const WALL_MARGIN: f64 = 0.6;
pub(crate) const MIN_LISTENER_DISTANCE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Copresent,
    NonCopresent,
}

impl Label {
    pub fn is_copresent(self) -> bool {
        self == Label::Copresent
    }
}

/// How to build a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub rooms: Vec<RoomModel>,
    pub devices_per_room: usize,
    #[serde(default = "default_sessions")]
    pub sessions_per_room: usize,
    #[serde(default = "default_radius")]
    pub copresence_radius: f64,
    pub seed: u64,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default = "default_true")]
    pub include_attacks: bool,
}

fn default_sessions() -> usize {
    5
}

fn default_radius() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

impl DatasetConfig {
    /// The 20-room corpus with three phones per room and five sessions.
    pub fn default_corpus(seed: u64) -> Self {
        Self {
            rooms: default_corpus(seed),
            devices_per_room: 3,
            sessions_per_room: default_sessions(),
            copresence_radius: default_radius(),
            seed,
            sweep: SweepSpec::default(),
            include_attacks: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rooms.is_empty() {
            return Err(Error::Config("at least one room is required".into()));
        }
        if self.devices_per_room < 2 {
            return Err(Error::Config("devices_per_room must be at least 2".into()));
        }
        if self.sessions_per_room == 0 {
            return Err(Error::Config("sessions_per_room must be positive".into()));
        }
        if !(self.copresence_radius > MIN_LISTENER_DISTANCE) {
            return Err(Error::Config(format!(
                "copresence_radius must exceed {MIN_LISTENER_DISTANCE} m"
            )));
        }
        if self.include_attacks && self.rooms.len() < 2 {
            return Err(Error::Config(
                "attack pairs need recordings from at least 2 rooms".into(),
            ));
        }
        for (i, room) in self.rooms.iter().enumerate() {
            room.validate()
                .map_err(|e| Error::Config(format!("room {i}: {e}")))?;
            if room.dimensions.iter().any(|d| *d <= 2.0 * WALL_MARGIN) {
                return Err(Error::Config(format!(
                    "room {i}: every dimension must exceed {} m",
                    2.0 * WALL_MARGIN
                )));
            }
        }
        self.sweep.validate()
    }
}

/// SplitMix64 finalizer folded over `parts`; used to derive independent
/// per-room, per-session and per-device seeds from the master seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(0x6A09_E667_F3BC_C908, |h, &p| splitmix(h ^ splitmix(p)))
}

const PURPOSE_ROOM: u64 = 1;
const PURPOSE_DEVICE: u64 = 2;
const PURPOSE_PLACEMENT: u64 = 3;
const PURPOSE_NOISE: u64 = 4;

/// Procedurally generated rooms: volumes log-uniform in 30-300 m³ and
/// absorption in [0.05, 0.6], varying per surface and octave band.
pub fn default_corpus(seed: u64) -> Vec<RoomModel> {
    (0..20).map(|i| corpus_room(mix_seed(&[seed, PURPOSE_ROOM, i]))).collect()
}

fn corpus_room(seed: u64) -> RoomModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let volume = (rng.gen_range(30f64.ln()..300f64.ln())).exp();
    let height = rng.gen_range(2.4..3.4);
    let aspect = rng.gen_range(1.0..2.2);
    let floor_area = volume / height;
    let width = (floor_area / aspect).sqrt();
    let length = width * aspect;
    // walls, floor and ceiling each get a material: a base coefficient and a
    // slope across the octave bands
    let mut material = || {
        let base: f64 = rng.gen_range(0.05..0.6);
        let slope: f64 = rng.gen_range(-0.04..0.06);
        (base, slope)
    };
    let walls = material();
    let floor = material();
    let ceiling = material();
    let rows = (0..OCTAVE_CENTERS.len())
        .map(|b| {
            let at = |(base, slope): (f64, f64)| (base + slope * (b as f64 - 5.0)).clamp(0.05, 0.6);
            let w = at(walls);
            [w, w, w, w, at(floor), at(ceiling)]
        })
        .collect();
    RoomModel {
        dimensions: [length, width, height],
        absorption: Absorption::PerBand(rows),
        speed_of_sound: super::DEFAULT_SPEED_OF_SOUND,
        max_order: 1000,
        max_duration: Some(0.8),
    }
}

/// A phone drawn from the corpus device distribution.
pub fn random_device(seed: u64) -> DeviceProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DeviceProfile {
        gain_db: rng.gen_range(-12.0..-3.0),
        snr_db: Some(rng.gen_range(35.0..50.0)),
        clock_offset: rng.gen_range(0.0..1.0),
        spectral_tilt: rng.gen_range(-0.5..0.5),
    }
}

/// Metadata of one simulated recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub id: usize,
    pub room: usize,
    pub session: usize,
    pub device: usize,
    /// True for the phone that played the excitation.
    pub emitter: bool,
    pub placement: Placement,
    pub profile: DeviceProfile,
    pub noise_seed: u64,
}

/// One labelled pair of recordings, referenced by recording id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: usize,
    pub a: usize,
    pub b: usize,
    pub room_a: usize,
    pub room_b: usize,
    pub device_a: usize,
    pub device_b: usize,
    pub session: usize,
    pub label: Label,
}

/// Recording layout and pair list, without audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPlan {
    pub recordings: Vec<RecordingMeta>,
    pub pairs: Vec<PairRecord>,
}

impl DatasetPlan {
    pub fn benign_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.label.is_copresent()).count()
    }

    pub fn attack_count(&self) -> usize {
        self.pairs.len() - self.benign_count()
    }
}

#[derive(Debug, Clone)]
pub struct Recording {
    pub meta: RecordingMeta,
    pub signal: AudioSignal,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub excitation: AudioSignal,
    pub recordings: Vec<Recording>,
    pub pairs: Vec<PairRecord>,
}

impl Dataset {
    pub fn benign_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.label.is_copresent()).count()
    }

    pub fn attack_count(&self) -> usize {
        self.pairs.len() - self.benign_count()
    }
}

/// `(benign, attack)` pair counts for `rooms` rooms with `devices` phones and
/// `sessions` sessions each.
pub fn expected_pair_counts(rooms: usize, devices: usize, sessions: usize, attacks: bool) -> (usize, usize) {
    let benign = rooms * sessions * devices * (devices - 1) / 2;
    let attack = if attacks {
        rooms * (rooms - 1) / 2 * devices * devices * sessions
    } else {
        0
    };
    (benign, attack)
}

fn session_placements(room: &RoomModel, config: &DatasetConfig, room_idx: usize, session: usize) -> Vec<Placement> {
    let seed = mix_seed(&[config.seed, PURPOSE_PLACEMENT, room_idx as u64, session as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lx, ly, _] = room.dimensions;
    let source = [
        rng.gen_range(WALL_MARGIN..lx - WALL_MARGIN),
        rng.gen_range(WALL_MARGIN..ly - WALL_MARGIN),
        rng.gen_range(0.75..1.1),
    ];
    let emitter = session % config.devices_per_room;
    (0..config.devices_per_room)
        .map(|device| {
            let radius = if device == emitter {
                SELF_DISTANCE
            } else {
                rng.gen_range(MIN_LISTENER_DISTANCE..config.copresence_radius)
            };
            let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
            let dz: f64 = rng.gen_range(-0.05..0.05);
            let flat = (radius * radius - dz * dz).sqrt();
            let receiver = [
                source[0] + flat * azimuth.cos(),
                source[1] + flat * azimuth.sin(),
                source[2] + dz,
            ];
            Placement { source, receiver }
        })
        .collect()
}

/// Lays out recordings and pairs for `config` without rendering audio.
///
/// Benign pairs join distinct phones of the same room and session. Attack
/// pairs join phones of two different rooms in the same session slot, where
/// both rooms played the identical excitation.
pub fn plan_dataset(config: &DatasetConfig) -> Result<DatasetPlan> {
    config.validate()?;
    let d = config.devices_per_room;
    let mut recordings = Vec::new();
    for (r, room) in config.rooms.iter().enumerate() {
        let profiles: Vec<DeviceProfile> = (0..d)
            .map(|dev| random_device(mix_seed(&[config.seed, PURPOSE_DEVICE, r as u64, dev as u64])))
            .collect();
        for s in 0..config.sessions_per_room {
            let placements = session_placements(room, config, r, s);
            for (dev, placement) in placements.into_iter().enumerate() {
                debug_assert!(distance(placement.source, placement.receiver) <= config.copresence_radius);
                recordings.push(RecordingMeta {
                    id: recordings.len(),
                    room: r,
                    session: s,
                    device: dev,
                    emitter: dev == s % d,
                    placement,
                    profile: profiles[dev],
                    noise_seed: mix_seed(&[config.seed, PURPOSE_NOISE, r as u64, s as u64, dev as u64]),
                });
            }
        }
    }
    let index = |room: usize, session: usize, device: usize| (room * config.sessions_per_room + session) * d + device;

    let mut pairs = Vec::new();
    let mut push = |a: &RecordingMeta, b: &RecordingMeta, label: Label| {
        pairs.push(PairRecord {
            id: pairs.len(),
            a: a.id,
            b: b.id,
            room_a: a.room,
            room_b: b.room,
            device_a: a.device,
            device_b: b.device,
            session: a.session,
            label,
        });
    };
    let rooms = config.rooms.len();
    for r in 0..rooms {
        for s in 0..config.sessions_per_room {
            for i in 0..d {
                for j in i + 1..d {
                    push(&recordings[index(r, s, i)], &recordings[index(r, s, j)], Label::Copresent);
                }
            }
        }
    }
    if config.include_attacks {
        for ra in 0..rooms {
            for rb in ra + 1..rooms {
                for s in 0..config.sessions_per_room {
                    for i in 0..d {
                        for j in 0..d {
                            push(&recordings[index(ra, s, i)], &recordings[index(rb, s, j)], Label::NonCopresent);
                        }
                    }
                }
            }
        }
    }
    Ok(DatasetPlan { recordings, pairs })
}

/// Renders every recording of the plan. Each recording depends only on its
/// own seeds, so the result does not depend on scheduling.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    let plan = plan_dataset(config)?;
    let excitation = generate_sweep(&config.sweep)?;
    let recordings = plan
        .recordings
        .into_par_iter()
        .map(|meta| {
            let room = &config.rooms[meta.room];
            let rir = simulate_rir(room, &meta.placement, excitation.sample_rate())?;
            let signal = record_through(&rir, &excitation, &meta.profile, meta.noise_seed)?;
            Ok(Recording { meta, signal })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: config.clone(),
        excitation,
        recordings,
        pairs: plan.pairs,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";
const EXCITATION_FILE: &str = "excitation.wav";
const DATASET_FORMAT_VERSION: u32 = 1;

/// On-disk description of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub excitation: String,
    pub recordings: Vec<ManifestEntry>,
    pub pairs: Vec<PairRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub meta: RecordingMeta,
}

impl Dataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            config: self.config.clone(),
            excitation: EXCITATION_FILE.into(),
            recordings: self
                .recordings
                .iter()
                .map(|r| ManifestEntry {
                    file: format!("recordings/rec_{:05}.wav", r.meta.id),
                    meta: r.meta.clone(),
                })
                .collect(),
            pairs: self.pairs.clone(),
        }
    }

    /// Writes `manifest.json`, the excitation and one 16-bit WAV per
    /// recording into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("recordings"))?;
        let manifest = self.manifest();
        write_wav(&self.excitation, dir.join(&manifest.excitation))?;
        for (entry, rec) in manifest.recordings.iter().zip(&self.recordings) {
            write_wav(&rec.signal, dir.join(&entry.file))?;
        }
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "dataset format version {} is not supported",
                manifest.format_version
            )));
        }
        let n = manifest.recordings.len();
        if manifest.pairs.iter().any(|p| p.a >= n || p.b >= n)
            || manifest.recordings.iter().enumerate().any(|(i, e)| e.meta.id != i)
        {
            return Err(Error::Format("manifest recording ids are inconsistent".into()));
        }
        let excitation = read_wav(dir.join(&manifest.excitation))?;
        let recordings = manifest
            .recordings
            .into_iter()
            .map(|e| {
                Ok(Recording {
                    signal: read_wav(dir.join(&e.file))?,
                    meta: e.meta,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            config: manifest.config,
            excitation,
            recordings,
            pairs: manifest.pairs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(rooms: usize, devices: usize, sessions: usize) -> DatasetConfig {
        let all = default_corpus(5);
        DatasetConfig {
            rooms: all[..rooms].to_vec(),
            devices_per_room: devices,
            sessions_per_room: sessions,
            copresence_radius: 0.5,
            seed: 5,
            sweep: SweepSpec::default(),
            include_attacks: rooms >= 2,
        }
    }

    #[test]
    fn two_rooms_two_devices_one_session() {
        let plan = plan_dataset(&small_config(2, 2, 1)).unwrap();
        assert_eq!(plan.benign_count(), 2);
        assert_eq!(plan.attack_count(), 4);
        for p in &plan.pairs {
            match p.label {
                Label::Copresent => assert_eq!(p.room_a, p.room_b),
                Label::NonCopresent => assert_ne!(p.room_a, p.room_b),
            }
            assert_ne!(p.a, p.b);
        }
    }

    #[test]
    fn counts_match_enumeration() {
        for (r, d, s) in [(2, 2, 1), (3, 3, 2), (5, 2, 3), (4, 4, 1)] {
            let plan = plan_dataset(&small_config(r, d, s)).unwrap();
            assert_eq!((plan.benign_count(), plan.attack_count()), expected_pair_counts(r, d, s, true));
        }
        // attack pairs grow like R(R-1)
        let (_, a10) = expected_pair_counts(10, 3, 5, true);
        let (_, a20) = expected_pair_counts(20, 3, 5, true);
        assert_eq!(a20 * 90, a10 * 380);
        assert_eq!(expected_pair_counts(20, 3, 5, true), (300, 8550));
    }

    #[test]
    fn config_errors() {
        let mut cfg = small_config(1, 2, 1);
        cfg.include_attacks = true;
        assert!(matches!(plan_dataset(&cfg), Err(Error::Config(_))));
        cfg.include_attacks = false;
        assert!(plan_dataset(&cfg).is_ok());
        let mut cfg = small_config(2, 1, 1);
        cfg.devices_per_room = 1;
        assert!(matches!(plan_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn placements_respect_copresence_radius() {
        let cfg = small_config(4, 3, 5);
        let plan = plan_dataset(&cfg).unwrap();
        for rec in &plan.recordings {
            let room = &cfg.rooms[rec.room];
            assert!(room.contains(rec.placement.source));
            assert!(room.contains(rec.placement.receiver));
            assert!(rec.placement.distance() <= cfg.copresence_radius);
        }
        for p in plan.pairs.iter().filter(|p| p.label.is_copresent()) {
            let a = &plan.recordings[p.a].placement;
            let b = &plan.recordings[p.b].placement;
            assert_eq!(a.source, b.source);
        }
    }

    #[test]
    fn corpus_is_in_range_and_seeded() {
        let rooms = default_corpus(1);
        assert_eq!(rooms.len(), 20);
        for room in &rooms {
            room.validate().unwrap();
            assert!((30.0..=300.0).contains(&room.volume()));
            if let Absorption::PerBand(rows) = &room.absorption {
                assert!(rows.iter().flatten().all(|a| (0.05..=0.6).contains(a)));
            } else {
                panic!("corpus rooms are banded");
            }
        }
        assert_eq!(rooms, default_corpus(1));
        assert_ne!(rooms, default_corpus(2));
    }

    #[test]
    fn mix_seed_separates_parts() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_ne!(mix_seed(&[0]), mix_seed(&[0, 0]));
        assert_eq!(mix_seed(&[7, 8, 9]), mix_seed(&[7, 8, 9]));
    }

    #[test]
    fn generation_is_reproducible() {
        let mut cfg = small_config(2, 2, 1);
        cfg.sweep = SweepSpec { sweep_duration: 0.5, lead_silence: 0.2, tail_silence: 0.3, ..SweepSpec::default() };
        for room in &mut cfg.rooms {
            room.max_duration = Some(0.2);
        }
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.recordings.len(), 4);
        for (x, y) in a.recordings.iter().zip(&b.recordings) {
            assert_eq!(x.signal, y.signal);
            assert_eq!(x.meta, y.meta);
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let mut cfg = small_config(2, 2, 1);
        cfg.sweep = SweepSpec { sweep_duration: 0.5, lead_silence: 0.2, tail_silence: 0.3, ..SweepSpec::default() };
        for room in &mut cfg.rooms {
            room.max_duration = Some(0.2);
        }
        let ds = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.config, ds.config);
        assert_eq!(back.pairs, ds.pairs);
        assert_eq!(back.manifest(), ds.manifest());
        for (x, y) in back.recordings.iter().zip(&ds.recordings) {
            // 16-bit quantization
            let err = x.signal.samples().iter().zip(y.signal.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 0.5 / 32767.0 + 1e-12, "{err}");
        }
        assert!(Dataset::load(dir.path().join("missing")).is_err());
    }
}
