//! In-process transport, simulated acoustic environments and adversary
//! hooks for running whole sessions.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ProtocolMessage, Prover, Verifier};
use crate::classifier::ForestModel;
use crate::error::{Error, Result};
use crate::signal::{generate_sweep, AudioSignal, SweepSpec};
use crate::simulator::dataset::{MIN_LISTENER_DISTANCE, SELF_DISTANCE, WALL_MARGIN};
use crate::simulator::{
    default_corpus, mix_seed, random_device, simulate_recording, white_noise, DeviceProfile, Label, Placement,
    RoomModel,
};

/// Background level of a room in which nothing is played.
pub const AMBIENT_RMS: f64 = 1e-4;
/// Recordings quieter than this cannot contain the sweep.
pub const MIN_RECORDING_RMS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Verifier,
    Prover,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Verifier => "verifier",
            Role::Prover => "prover",
        })
    }
}

/// What is played near a party during the measurement.
#[derive(Debug, Clone)]
pub enum Emission {
    /// The session's excitation, from `placement.source`.
    Excitation,
    /// A fixed clip chosen in advance, from `placement.source`.
    Clip(AudioSignal),
    Silent,
}

/// One party's acoustic surroundings.
#[derive(Debug, Clone)]
pub struct Site {
    pub room: RoomModel,
    pub placement: Placement,
    pub device: DeviceProfile,
    pub noise_seed: u64,
    pub emission: Emission,
}

impl Site {
    fn record(&self, excitation: &AudioSignal) -> Result<AudioSignal> {
        let clip = match &self.emission {
            Emission::Excitation => excitation,
            Emission::Clip(c) => c,
            Emission::Silent => {
                let noise = white_noise(excitation.len(), AMBIENT_RMS, self.noise_seed);
                return AudioSignal::new(noise, excitation.sample_rate());
            }
        };
        simulate_recording(&self.room, &self.placement, clip, &self.device, self.noise_seed)
    }
}

/// Source of the recordings each party makes while the sweep plays.
pub trait AcousticEnvironment {
    fn record(&self, role: Role, excitation: &AudioSignal) -> Result<AudioSignal>;
}

/// Two simulated sites; a missing site is an unavailable environment.
#[derive(Debug, Clone)]
pub struct SimulatedEnvironment {
    pub verifier: Option<Site>,
    pub prover: Option<Site>,
}

impl AcousticEnvironment for SimulatedEnvironment {
    fn record(&self, role: Role, excitation: &AudioSignal) -> Result<AudioSignal> {
        let site = match role {
            Role::Verifier => &self.verifier,
            Role::Prover => &self.prover,
        };
        site.as_ref()
            .ok_or_else(|| Error::Measurement(format!("no acoustic environment for the {role}")))?
            .record(excitation)
    }
}

/// Step 2: obtain `role`'s recording of the sweep described by `sweep`.
pub fn run_measurement(role: Role, env: &dyn AcousticEnvironment, sweep: &SweepSpec) -> Result<AudioSignal> {
    let excitation = generate_sweep(sweep)?;
    let rec = env.record(role, &excitation)?;
    if rec.rms() < MIN_RECORDING_RMS {
        return Err(Error::Measurement(format!(
            "{role} recording rms {:.2e} is below {MIN_RECORDING_RMS:.0e}; no sweep was heard",
            rec.rms()
        )));
    }
    Ok(rec)
}

/// Network adversary that forwards messages unmodified.
pub fn relay(msg: &[u8]) -> Vec<u8> {
    msg.to_vec()
}

/// Context manipulation: the adversary plays `clip` at both sites, each in
/// its own room.
pub fn manipulate_context(mut verifier: Site, mut prover: Site, clip: &AudioSignal) -> SimulatedEnvironment {
    verifier.emission = Emission::Clip(clip.clone());
    prover.emission = Emission::Clip(clip.clone());
    SimulatedEnvironment {
        verifier: Some(verifier),
        prover: Some(prover),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemoKind {
    /// Both phones in one room.
    Benign,
    /// Messages relayed to a prover in a quiet room elsewhere.
    Relay,
    /// Messages relayed and the sweep replayed in the prover's room.
    Manipulate,
}

impl FromStr for DemoKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "benign" => Ok(DemoKind::Benign),
            "relay" => Ok(DemoKind::Relay),
            "manipulate" => Ok(DemoKind::Manipulate),
            other => Err(Error::Config(format!(
                "unknown demo `{other}` (expected benign, relay or manipulate)"
            ))),
        }
    }
}

fn site_in(room: &RoomModel, rng: &mut ChaCha8Rng, radius: f64, seed: u64) -> Site {
    let [lx, ly, _] = room.dimensions;
    let source = [
        rng.gen_range(WALL_MARGIN..lx - WALL_MARGIN),
        rng.gen_range(WALL_MARGIN..ly - WALL_MARGIN),
        rng.gen_range(0.75..1.1),
    ];
    let azimuth: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let receiver = [source[0] + radius * azimuth.cos(), source[1] + radius * azimuth.sin(), source[2]];
    Site {
        room: room.clone(),
        placement: Placement { source, receiver },
        device: random_device(mix_seed(&[seed, 1])),
        noise_seed: mix_seed(&[seed, 2]),
        emission: Emission::Excitation,
    }
}

/// Seeded demo wiring over two distinct rooms of a freshly drawn corpus.
/// The verifier's phone plays the sweep; the prover sits within half a
/// metre of whatever plays near it.
pub fn demo_environment(kind: DemoKind, seed: u64, sweep: &SweepSpec) -> Result<SimulatedEnvironment> {
    let rooms = default_corpus(mix_seed(&[seed, 0xDE]));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xDE, 1]));
    let a = rng.gen_range(0..rooms.len());
    let b = (a + rng.gen_range(1..rooms.len())) % rooms.len();
    let verifier = site_in(&rooms[a], &mut rng, SELF_DISTANCE, mix_seed(&[seed, 10]));
    let listener = rng.gen_range(MIN_LISTENER_DISTANCE..0.5);
    let env = match kind {
        DemoKind::Benign => {
            let mut prover = site_in(&rooms[a], &mut rng, listener, mix_seed(&[seed, 20]));
            let [x, y, z] = verifier.placement.source;
            let azimuth: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            prover.placement = Placement {
                source: [x, y, z],
                receiver: [x + listener * azimuth.cos(), y + listener * azimuth.sin(), z],
            };
            SimulatedEnvironment {
                verifier: Some(verifier),
                prover: Some(prover),
            }
        }
        DemoKind::Relay => {
            let mut prover = site_in(&rooms[b], &mut rng, listener, mix_seed(&[seed, 20]));
            prover.emission = Emission::Silent;
            SimulatedEnvironment {
                verifier: Some(verifier),
                prover: Some(prover),
            }
        }
        DemoKind::Manipulate => {
            let prover = site_in(&rooms[b], &mut rng, listener, mix_seed(&[seed, 20]));
            manipulate_context(verifier, prover, &generate_sweep(sweep)?)
        }
    };
    Ok(env)
}

#[derive(Debug, Clone, Serialize)]
pub struct TranscriptEntry {
    pub from: Role,
    pub kind: String,
    #[serde(serialize_with = "as_hex")]
    pub bytes: Vec<u8>,
}

fn as_hex<S: serde::Serializer>(bytes: &[u8], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&hex::encode(bytes))
}

/// Every message as it was sent, before the adversary saw it.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    fn push(&mut self, from: Role, bytes: &[u8]) {
        let kind = ProtocolMessage::decode(bytes)
            .map(|m| m.payload.kind().to_string())
            .unwrap_or_else(|_| "malformed".into());
        self.entries.push(TranscriptEntry {
            from,
            kind,
            bytes: bytes.to_vec(),
        });
    }

    /// One line per message: sender, kind, length and hex bytes.
    pub fn to_hex_lines(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{} {} {} {}\n", e.from, e.kind, e.bytes.len(), hex::encode(&e.bytes)))
            .collect()
    }
}

#[derive(Debug)]
pub struct SessionOutcome {
    pub transcript: Transcript,
    /// The verifier's verdict, or the error that ended the session.
    pub result: Result<Label>,
}

/// Runs steps 1 to 4 over an in-process transport. `network` sees every
/// message with its sender and returns what gets delivered.
pub fn run_session(
    verifier: &mut Verifier,
    prover: &mut Prover,
    env: &dyn AcousticEnvironment,
    model: &ForestModel,
    entropy_seed: u64,
    network: &mut dyn FnMut(Role, &[u8]) -> Vec<u8>,
) -> SessionOutcome {
    let mut transcript = Transcript::default();
    let result = (|| {
        let start = verifier.start_session(entropy_seed)?;
        transcript.push(Role::Verifier, &start);
        let sweep = prover.accept_start(&network(Role::Verifier, &start))?;

        let local = run_measurement(Role::Verifier, env, verifier.sweep())?;
        verifier.record_local(&local)?;
        let remote = run_measurement(Role::Prover, env, &sweep).map_err(|e| prover.measurement_failed(e))?;

        let report = prover.prover_respond(&remote)?;
        transcript.push(Role::Prover, &report);
        let decision = verifier.verifier_decide(&network(Role::Prover, &report), model)?;
        transcript.push(Role::Verifier, &decision);
        let verdict = match verifier.phase() {
            super::VerifierPhase::Done(v) => v,
            other => unreachable!("decision emitted in phase {other:?}"),
        };
        prover.accept_decision(&network(Role::Verifier, &decision))?;
        Ok(verdict)
    })();
    SessionOutcome { transcript, result }
}
