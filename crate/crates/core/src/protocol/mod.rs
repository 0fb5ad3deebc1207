//! Two-party copresence verification.
//!
//! The verifier sends a nonce-bearing Start, both parties record the sweep it
//! plays, the prover answers with an authenticated Report of its feature
//! vector and the echoed nonce, and the verifier compares that against its own
//! features. Messages are authenticated with HMAC-SHA256 under a pre-shared
//! key.

mod testbed;

pub use testbed::{
    demo_environment, manipulate_context, relay, run_measurement, run_session, AcousticEnvironment, DemoKind,
    Emission, Role, SessionOutcome, SimulatedEnvironment, Site, Transcript, TranscriptEntry, AMBIENT_RMS,
    MIN_RECORDING_RMS,
};

use std::fmt;

use hmac::{Hmac, Mac};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::Sha256;
use subtle::ConstantTimeEq;

use crate::classifier::{pair_features, ForestModel};
use crate::error::{Error, Result};
use crate::features::{FeatureVector, FEATURE_COUNT};
use crate::pipeline::Analyzer;
use crate::signal::{AudioSignal, SweepSpec};
use crate::simulator::Label;

type HmacSha256 = Hmac<Sha256>;

pub const MAGIC: [u8; 2] = *b"DE";
pub const WIRE_VERSION: u8 = 0x01;
pub const NONCE_LEN: usize = 16;
pub const MAC_LEN: usize = 32;
pub const KEY_LEN: usize = 32;
/// Magic, version, type and the 4-byte length.
pub const HEADER_LEN: usize = 8;

const TYPE_START: u8 = 1;
const TYPE_REPORT: u8 = 2;
const TYPE_DECISION: u8 = 3;

const START_PAYLOAD: usize = NONCE_LEN + 7 * 8;
const REPORT_PAYLOAD: usize = NONCE_LEN + FEATURE_COUNT * 8;

/// Pre-shared 256-bit secret.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionKey([u8; KEY_LEN]);

impl SessionKey {
    pub fn new(bytes: [u8; KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let arr: [u8; KEY_LEN] = bytes
            .try_into()
            .map_err(|_| Error::param("key", format!("expected {KEY_LEN} bytes, got {}", bytes.len())))?;
        Ok(Self(arr))
    }

    /// Parses 64 hex digits.
    pub fn from_hex(text: &str) -> Result<Self> {
        let bytes = hex::decode(text.trim()).map_err(|e| Error::param("key", e.to_string()))?;
        Self::from_slice(&bytes)
    }

    /// Deterministic key for tests and demos.
    pub fn from_seed(seed: u64) -> Self {
        let mut out = [0u8; KEY_LEN];
        ChaCha20Rng::seed_from_u64(seed).fill_bytes(&mut out);
        Self(out)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(&self.0).expect("hmac accepts any key length")
    }
}

impl fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SessionKey(..)")
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Nonce([u8; NONCE_LEN]);

impl Nonce {
    pub fn new(bytes: [u8; NONCE_LEN]) -> Self {
        Self(bytes)
    }

    /// Draws a nonce from a ChaCha20 stream seeded with `entropy_seed`.
    pub fn generate(entropy_seed: u64) -> Self {
        let mut out = [0u8; NONCE_LEN];
        ChaCha20Rng::seed_from_u64(entropy_seed).fill_bytes(&mut out);
        Self(out)
    }

    pub fn as_bytes(&self) -> &[u8; NONCE_LEN] {
        &self.0
    }

    /// Constant-time comparison.
    pub fn ct_matches(&self, other: &Nonce) -> bool {
        self.0.ct_eq(&other.0).into()
    }
}

impl fmt::Debug for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Nonce({})", hex::encode(self.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Start { nonce: Nonce, sweep: SweepSpec },
    Report { nonce: Nonce, features: FeatureVector },
    Decision { verdict: Label },
}

impl Payload {
    fn type_byte(&self) -> u8 {
        match self {
            Payload::Start { .. } => TYPE_START,
            Payload::Report { .. } => TYPE_REPORT,
            Payload::Decision { .. } => TYPE_DECISION,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Start { .. } => "start",
            Payload::Report { .. } => "report",
            Payload::Decision { .. } => "decision",
        }
    }

    fn encode_body(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Payload::Start { nonce, sweep } => {
                out.extend_from_slice(nonce.as_bytes());
                for v in sweep.to_fields() {
                    out.extend_from_slice(&v.to_be_bytes());
                }
            }
            Payload::Report { nonce, features } => {
                out.extend_from_slice(nonce.as_bytes());
                for v in features.values() {
                    out.extend_from_slice(&v.to_be_bytes());
                }
            }
            Payload::Decision { verdict } => out.push(verdict_byte(*verdict)),
        }
        out
    }

    fn decode_body(kind: u8, body: &[u8]) -> Result<Self> {
        let expect = |n: usize| {
            if body.len() == n {
                Ok(())
            } else {
                Err(Error::Wire(format!("payload of type {kind} must be {n} bytes, got {}", body.len())))
            }
        };
        let nonce = || Nonce::new(body[..NONCE_LEN].try_into().expect("length checked"));
        let doubles = |from: usize| {
            body[from..]
                .chunks_exact(8)
                .map(|c| f64::from_be_bytes(c.try_into().expect("chunks of 8")))
        };
        match kind {
            TYPE_START => {
                expect(START_PAYLOAD)?;
                let mut fields = [0.0; 7];
                for (f, v) in fields.iter_mut().zip(doubles(NONCE_LEN)) {
                    *f = v;
                }
                let sweep = SweepSpec::from_fields(fields).map_err(|e| Error::Wire(e.to_string()))?;
                Ok(Payload::Start { nonce: nonce(), sweep })
            }
            TYPE_REPORT => {
                expect(REPORT_PAYLOAD)?;
                let features =
                    FeatureVector::new(doubles(NONCE_LEN).collect()).map_err(|e| Error::Wire(e.to_string()))?;
                Ok(Payload::Report { nonce: nonce(), features })
            }
            TYPE_DECISION => {
                expect(1)?;
                let verdict = match body[0] {
                    0 => Label::NonCopresent,
                    1 => Label::Copresent,
                    b => return Err(Error::Wire(format!("unknown verdict byte {b}"))),
                };
                Ok(Payload::Decision { verdict })
            }
            t => Err(Error::Wire(format!("unknown message type {t}"))),
        }
    }
}

fn verdict_byte(verdict: Label) -> u8 {
    match verdict {
        Label::Copresent => 1,
        Label::NonCopresent => 0,
    }
}

/// An authenticated message. The tag covers magic through payload.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolMessage {
    pub payload: Payload,
    pub mac: [u8; MAC_LEN],
}

impl ProtocolMessage {
    pub fn seal(payload: Payload, key: &SessionKey) -> Self {
        let mut mac = key.mac();
        mac.update(&signed_part(&payload));
        Self {
            payload,
            mac: mac.finalize().into_bytes().into(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = signed_part(&self.payload);
        out.extend_from_slice(&self.mac);
        out
    }

    /// Parses the framing and payload without checking the tag.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (signed, tag) = split_frame(bytes)?;
        let payload = Payload::decode_body(signed[3], &signed[HEADER_LEN..])?;
        Ok(Self {
            payload,
            mac: tag.try_into().expect("tag length checked"),
        })
    }

    /// Checks the tag first, then parses. Nothing in an unauthenticated
    /// message is interpreted beyond its framing.
    pub fn open(bytes: &[u8], key: &SessionKey) -> Result<Self> {
        let (signed, tag) = split_frame(bytes)?;
        let mut mac = key.mac();
        mac.update(signed);
        mac.verify_slice(tag).map_err(|_| Error::Authentication)?;
        Self::decode(bytes)
    }
}

fn signed_part(payload: &Payload) -> Vec<u8> {
    let body = payload.encode_body();
    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + MAC_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(WIRE_VERSION);
    out.push(payload.type_byte());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Splits a frame into the signed bytes and the tag after checking magic,
/// version and the declared length.
fn split_frame(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    if bytes.len() < HEADER_LEN + MAC_LEN {
        return Err(Error::Wire(format!("frame of {} bytes is too short", bytes.len())));
    }
    if bytes[..2] != MAGIC {
        return Err(Error::Wire("bad magic".into()));
    }
    if bytes[2] != WIRE_VERSION {
        return Err(Error::Wire(format!("unsupported version {}", bytes[2])));
    }
    let len = u32::from_be_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() != HEADER_LEN + len + MAC_LEN {
        return Err(Error::Wire(format!(
            "declared payload of {len} bytes does not match a {}-byte frame",
            bytes.len()
        )));
    }
    Ok(bytes.split_at(HEADER_LEN + len))
}

/// Why a session ended without a verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortReason {
    Authentication,
    Replay,
    Malformed,
    Measurement,
    UnexpectedMessage,
}

impl AbortReason {
    fn of(err: &Error) -> Self {
        match err {
            Error::Authentication => AbortReason::Authentication,
            Error::Replay => AbortReason::Replay,
            Error::Wire(_) => AbortReason::Malformed,
            Error::ProtocolOrder(_) => AbortReason::UnexpectedMessage,
            _ => AbortReason::Measurement,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifierPhase {
    Idle,
    AwaitingReport,
    Done(Label),
    Aborted(AbortReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProverPhase {
    AwaitingStart,
    Recording,
    AwaitingDecision,
    Done(Label),
    Aborted(AbortReason),
}

/// The party that plays the sweep and issues the verdict.
#[derive(Debug, Clone)]
pub struct Verifier {
    key: SessionKey,
    sweep: SweepSpec,
    phase: VerifierPhase,
    nonce: Option<Nonce>,
    local: Option<FeatureVector>,
}

impl Verifier {
    pub fn new(key: SessionKey, sweep: SweepSpec) -> Self {
        Self {
            key,
            sweep,
            phase: VerifierPhase::Idle,
            nonce: None,
            local: None,
        }
    }

    pub fn phase(&self) -> VerifierPhase {
        self.phase
    }

    pub fn nonce(&self) -> Option<Nonce> {
        self.nonce
    }

    pub fn sweep(&self) -> &SweepSpec {
        &self.sweep
    }

    pub fn local_features(&self) -> Option<&FeatureVector> {
        self.local.as_ref()
    }

    fn abort(&mut self, err: Error) -> Error {
        self.phase = VerifierPhase::Aborted(AbortReason::of(&err));
        err
    }

    /// Step 1: draw a fresh nonce and emit the Start message.
    pub fn start_session(&mut self, entropy_seed: u64) -> Result<Vec<u8>> {
        if self.phase != VerifierPhase::Idle {
            return Err(Error::ProtocolOrder(format!("start in state {:?}", self.phase)));
        }
        let nonce = Nonce::generate(entropy_seed);
        self.nonce = Some(nonce);
        self.phase = VerifierPhase::AwaitingReport;
        Ok(ProtocolMessage::seal(Payload::Start { nonce, sweep: self.sweep }, &self.key).encode())
    }

    /// Analyzes the verifier's own recording of the sweep.
    pub fn record_local(&mut self, recording: &AudioSignal) -> Result<()> {
        if self.phase != VerifierPhase::AwaitingReport {
            return Err(Error::ProtocolOrder(format!("local recording in state {:?}", self.phase)));
        }
        let analysis = Analyzer::new(&self.sweep).and_then(|a| a.analyze(recording));
        match analysis {
            Ok(a) => {
                self.local = Some(a.features);
                Ok(())
            }
            Err(e) => Err(self.abort(Error::Measurement(e.to_string()))),
        }
    }

    /// Uses an already computed local feature vector.
    pub fn set_local_features(&mut self, features: FeatureVector) -> Result<()> {
        if self.phase != VerifierPhase::AwaitingReport {
            return Err(Error::ProtocolOrder(format!("local features in state {:?}", self.phase)));
        }
        self.local = Some(features);
        Ok(())
    }

    /// Step 4: authenticate the Report, check the nonce, classify, and emit
    /// the Decision. Any failed check aborts the session.
    pub fn verifier_decide(&mut self, report: &[u8], model: &ForestModel) -> Result<Vec<u8>> {
        if self.phase != VerifierPhase::AwaitingReport {
            return Err(Error::ProtocolOrder(format!("report in state {:?}", self.phase)));
        }
        let Some(local) = self.local.clone() else {
            return Err(Error::ProtocolOrder("report before the local measurement".into()));
        };
        let live = self.nonce.expect("nonce is set while awaiting a report");
        let msg = match ProtocolMessage::open(report, &self.key) {
            Ok(m) => m,
            Err(e) => return Err(self.abort(e)),
        };
        let Payload::Report { nonce, features } = msg.payload else {
            return Err(self.abort(Error::ProtocolOrder(format!("expected a report, got {}", msg.payload.kind()))));
        };
        if !nonce.ct_matches(&live) {
            return Err(self.abort(Error::Replay));
        }
        let prediction = pair_features(local.values(), features.values()).and_then(|d| model.predict(&d));
        let verdict = match prediction {
            Ok(p) => p.verdict,
            Err(e) => return Err(self.abort(Error::Measurement(e.to_string()))),
        };
        self.phase = VerifierPhase::Done(verdict);
        Ok(ProtocolMessage::seal(Payload::Decision { verdict }, &self.key).encode())
    }
}

/// The party whose copresence is being checked.
#[derive(Debug, Clone)]
pub struct Prover {
    key: SessionKey,
    phase: ProverPhase,
    nonce: Option<Nonce>,
    sweep: Option<SweepSpec>,
}

impl Prover {
    pub fn new(key: SessionKey) -> Self {
        Self {
            key,
            phase: ProverPhase::AwaitingStart,
            nonce: None,
            sweep: None,
        }
    }

    pub fn phase(&self) -> ProverPhase {
        self.phase
    }

    pub fn nonce(&self) -> Option<Nonce> {
        self.nonce
    }

    pub fn sweep(&self) -> Option<&SweepSpec> {
        self.sweep.as_ref()
    }

    fn abort(&mut self, err: Error) -> Error {
        self.phase = ProverPhase::Aborted(AbortReason::of(&err));
        err
    }

    /// Aborts a session whose recording could not be made.
    pub fn measurement_failed(&mut self, err: Error) -> Error {
        let err = match err {
            e @ Error::Measurement(_) => e,
            other => Error::Measurement(other.to_string()),
        };
        self.abort(err)
    }

    /// Accepts a Start and returns the sweep to record.
    pub fn accept_start(&mut self, start: &[u8]) -> Result<SweepSpec> {
        if self.phase != ProverPhase::AwaitingStart {
            return Err(Error::ProtocolOrder(format!("start in state {:?}", self.phase)));
        }
        let msg = match ProtocolMessage::open(start, &self.key) {
            Ok(m) => m,
            Err(e) => return Err(self.abort(e)),
        };
        let Payload::Start { nonce, sweep } = msg.payload else {
            return Err(self.abort(Error::ProtocolOrder(format!("expected a start, got {}", msg.payload.kind()))));
        };
        self.nonce = Some(nonce);
        self.sweep = Some(sweep);
        self.phase = ProverPhase::Recording;
        Ok(sweep)
    }

    /// Step 3: analyze the recording and report its features with the
    /// echoed nonce. A failed analysis aborts without a Report.
    pub fn prover_respond(&mut self, recording: &AudioSignal) -> Result<Vec<u8>> {
        if self.phase != ProverPhase::Recording {
            return Err(Error::ProtocolOrder(format!("respond in state {:?}", self.phase)));
        }
        let sweep = self.sweep.expect("sweep is set while recording");
        let nonce = self.nonce.expect("nonce is set while recording");
        let features = match Analyzer::new(&sweep).and_then(|a| a.analyze(recording)) {
            Ok(a) => a.features,
            Err(e) => return Err(self.abort(Error::Measurement(e.to_string()))),
        };
        self.phase = ProverPhase::AwaitingDecision;
        Ok(ProtocolMessage::seal(Payload::Report { nonce, features }, &self.key).encode())
    }

    pub fn accept_decision(&mut self, decision: &[u8]) -> Result<Label> {
        if self.phase != ProverPhase::AwaitingDecision {
            return Err(Error::ProtocolOrder(format!("decision in state {:?}", self.phase)));
        }
        let msg = match ProtocolMessage::open(decision, &self.key) {
            Ok(m) => m,
            Err(e) => return Err(self.abort(e)),
        };
        let Payload::Decision { verdict } = msg.payload else {
            return Err(self.abort(Error::ProtocolOrder(format!("expected a decision, got {}", msg.payload.kind()))));
        };
        self.phase = ProverPhase::Done(verdict);
        Ok(verdict)
    }
}

#[cfg(test)]
mod tests;
