use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::classifier::{fit_model, Hyperparameters, PairMeta, PairSample};
use crate::signal::generate_sweep;

fn key() -> SessionKey {
    SessionKey::from_seed(7)
}

/// Copresent pairs differ by little, attack pairs by a lot.
fn toy_model() -> ForestModel {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<PairSample> = (0..60)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Copresent } else { Label::NonCopresent };
            let base = if label.is_copresent() { 0.0 } else { 4.0 };
            let diff = (0..FEATURE_COUNT).map(|_| base + rng.gen_range(0.0..1.0)).collect();
            PairSample::new(diff, label, PairMeta::default()).unwrap()
        })
        .collect();
    let hp = Hyperparameters { tree_count: 5, top_k: 4, ..Hyperparameters::default() };
    fit_model(&samples, &hp, 1).unwrap()
}

fn features(offset: f64) -> FeatureVector {
    FeatureVector::new((0..FEATURE_COUNT).map(|i| i as f64 * 0.01 + offset).collect()).unwrap()
}

fn report(nonce: Nonce, offset: f64, key: &SessionKey) -> Vec<u8> {
    ProtocolMessage::seal(Payload::Report { nonce, features: features(offset) }, key).encode()
}

fn started(seed: u64) -> (Verifier, Nonce) {
    let mut v = Verifier::new(key(), SweepSpec::default());
    v.start_session(seed).unwrap();
    v.set_local_features(features(0.0)).unwrap();
    let n = v.nonce().unwrap();
    (v, n)
}

#[test]
fn nonces_are_distinct_across_seeds() {
    let nonces: HashSet<Nonce> = (0..1000u64).map(Nonce::generate).collect();
    assert_eq!(nonces.len(), 1000);
    assert_eq!(Nonce::generate(5), Nonce::generate(5));
}

#[test]
fn wire_layout_is_exact() {
    let nonce = Nonce::new([0xAB; NONCE_LEN]);
    let spec = SweepSpec::default();
    let start = ProtocolMessage::seal(Payload::Start { nonce, sweep: spec }, &key()).encode();
    assert_eq!(start.len(), 8 + 16 + 56 + 32);
    assert_eq!(&start[..8], &[0x44, 0x45, 0x01, 0x01, 0, 0, 0, 72]);
    assert_eq!(&start[8..24], &[0xAB; 16]);
    assert_eq!(&start[24..32], &0.0f64.to_be_bytes());
    assert_eq!(&start[32..40], &22050.0f64.to_be_bytes());
    assert_eq!(&start[72..80], &44100.0f64.to_be_bytes());

    let rep = report(nonce, 0.0, &key());
    assert_eq!(rep.len(), 8 + 16 + 224 * 8 + 32);
    assert_eq!(&rep[..8], &[0x44, 0x45, 0x01, 0x02, 0, 0, 0x07, 0x10]);

    let dec = ProtocolMessage::seal(Payload::Decision { verdict: Label::Copresent }, &key()).encode();
    assert_eq!(dec.len(), 8 + 1 + 32);
    assert_eq!(&dec[..9], &[0x44, 0x45, 0x01, 0x03, 0, 0, 0, 1, 1]);

    // the tag is HMAC-SHA256 over everything before it
    let mut mac = HmacSha256::new_from_slice(key().as_bytes()).unwrap();
    mac.update(&dec[..9]);
    assert_eq!(&dec[9..], mac.finalize().into_bytes().as_slice());
}

#[test]
fn seal_open_round_trip() {
    let nonce = Nonce::generate(1);
    for payload in [
        Payload::Start { nonce, sweep: SweepSpec::default() },
        Payload::Report { nonce, features: features(1.5) },
        Payload::Decision { verdict: Label::NonCopresent },
    ] {
        let msg = ProtocolMessage::seal(payload.clone(), &key());
        let opened = ProtocolMessage::open(&msg.encode(), &key()).unwrap();
        assert_eq!(opened, msg);
        assert_eq!(opened.payload, payload);
    }
}

#[test]
fn every_single_bit_flip_is_rejected() {
    let rep = report(Nonce::generate(2), 0.3, &key());
    for byte in 0..rep.len() {
        for bit in 0..8 {
            let mut bad = rep.clone();
            bad[byte] ^= 1 << bit;
            let err = ProtocolMessage::open(&bad, &key()).unwrap_err();
            assert!(matches!(err, Error::Authentication | Error::Wire(_)), "{err}");
        }
    }
}

#[test]
fn foreign_key_and_truncation_are_rejected() {
    let rep = report(Nonce::generate(2), 0.3, &SessionKey::from_seed(99));
    assert!(matches!(ProtocolMessage::open(&rep, &key()), Err(Error::Authentication)));
    let good = report(Nonce::generate(2), 0.3, &key());
    for cut in [0, 7, 40, good.len() - 1] {
        assert!(matches!(ProtocolMessage::open(&good[..cut], &key()), Err(Error::Wire(_))));
    }
    let mut longer = good.clone();
    longer.push(0);
    assert!(ProtocolMessage::open(&longer, &key()).is_err());
}

#[test]
fn key_parsing() {
    let k = SessionKey::from_seed(1);
    let text = hex::encode(k.as_bytes());
    assert_eq!(SessionKey::from_hex(&text).unwrap(), k);
    assert!(SessionKey::from_hex("abcd").is_err());
    assert!(SessionKey::from_hex(&"zz".repeat(32)).is_err());
    assert_eq!(format!("{k:?}"), "SessionKey(..)");
}

#[test]
fn genuine_report_yields_a_verdict() {
    let model = toy_model();
    let (mut v, nonce) = started(11);
    let decision = v.verifier_decide(&report(nonce, 0.1, &key()), &model).unwrap();
    assert_eq!(v.phase(), VerifierPhase::Done(Label::Copresent));
    let msg = ProtocolMessage::open(&decision, &key()).unwrap();
    assert_eq!(msg.payload, Payload::Decision { verdict: Label::Copresent });

    let (mut v, nonce) = started(12);
    v.verifier_decide(&report(nonce, 6.0, &key()), &model).unwrap();
    assert_eq!(v.phase(), VerifierPhase::Done(Label::NonCopresent));
}

#[test]
fn replayed_report_aborts() {
    let model = toy_model();
    let (_, old_nonce) = started(1);
    let old = report(old_nonce, 0.1, &key());
    let (mut v, _) = started(2);
    assert!(matches!(v.verifier_decide(&old, &model), Err(Error::Replay)));
    assert_eq!(v.phase(), VerifierPhase::Aborted(AbortReason::Replay));
    // aborted is terminal
    assert!(matches!(v.verifier_decide(&old, &model), Err(Error::ProtocolOrder(_))));
    assert!(v.start_session(3).is_err());
}

#[test]
fn forged_report_aborts() {
    let (mut v, nonce) = started(4);
    let forged = report(nonce, 0.1, &SessionKey::from_seed(1234));
    assert!(matches!(v.verifier_decide(&forged, &toy_model()), Err(Error::Authentication)));
    assert_eq!(v.phase(), VerifierPhase::Aborted(AbortReason::Authentication));
}

#[test]
fn start_reflected_as_report_aborts() {
    let mut v = Verifier::new(key(), SweepSpec::default());
    let start = v.start_session(5).unwrap();
    v.set_local_features(features(0.0)).unwrap();
    assert!(matches!(v.verifier_decide(&start, &toy_model()), Err(Error::ProtocolOrder(_))));
    assert_eq!(v.phase(), VerifierPhase::Aborted(AbortReason::UnexpectedMessage));
}

#[test]
fn out_of_order_calls_are_rejected() {
    let model = toy_model();
    let mut v = Verifier::new(key(), SweepSpec::default());
    let stray = report(Nonce::generate(0), 0.0, &key());
    assert!(matches!(v.verifier_decide(&stray, &model), Err(Error::ProtocolOrder(_))));
    assert!(v.set_local_features(features(0.0)).is_err());
    assert_eq!(v.phase(), VerifierPhase::Idle);
    v.start_session(1).unwrap();
    assert!(matches!(v.start_session(2), Err(Error::ProtocolOrder(_))));
    // no local measurement yet
    let rep = report(v.nonce().unwrap(), 0.0, &key());
    assert!(matches!(v.verifier_decide(&rep, &model), Err(Error::ProtocolOrder(_))));
    assert_eq!(v.phase(), VerifierPhase::AwaitingReport);

    let mut p = Prover::new(key());
    let silent = AudioSignal::silence(10, 44100).unwrap();
    assert!(matches!(p.prover_respond(&silent), Err(Error::ProtocolOrder(_))));
    let dec = ProtocolMessage::seal(Payload::Decision { verdict: Label::Copresent }, &key()).encode();
    assert!(p.accept_decision(&dec).is_err());
    assert!(matches!(p.accept_start(&dec), Err(Error::ProtocolOrder(_))));
    assert_eq!(p.phase(), ProverPhase::Aborted(AbortReason::UnexpectedMessage));
}

fn short_spec() -> SweepSpec {
    SweepSpec { sweep_duration: 0.5, lead_silence: 0.2, tail_silence: 0.8, ..SweepSpec::default() }
}

#[test]
fn prover_reports_echoed_nonce_deterministically() {
    let spec = short_spec();
    let mut v = Verifier::new(key(), spec);
    let start = v.start_session(9).unwrap();
    let rec = generate_sweep(&spec).unwrap().scaled(0.3).delayed(100);

    let respond = || {
        let mut p = Prover::new(key());
        assert_eq!(p.accept_start(&start).unwrap(), spec);
        assert_eq!(p.phase(), ProverPhase::Recording);
        let r = p.prover_respond(&rec).unwrap();
        assert_eq!(p.phase(), ProverPhase::AwaitingDecision);
        r
    };
    let first = respond();
    assert_eq!(first, respond());
    let Payload::Report { nonce, .. } = ProtocolMessage::open(&first, &key()).unwrap().payload else {
        panic!("not a report");
    };
    assert!(nonce.ct_matches(&v.nonce().unwrap()));
}

#[test]
fn silent_recording_is_a_measurement_failure() {
    let spec = short_spec();
    let mut v = Verifier::new(key(), spec);
    let start = v.start_session(9).unwrap();
    let mut p = Prover::new(key());
    p.accept_start(&start).unwrap();
    let zeros = AudioSignal::silence(spec.total_samples(), 44100).unwrap();
    assert!(matches!(p.prover_respond(&zeros), Err(Error::Measurement(_))));
    assert_eq!(p.phase(), ProverPhase::Aborted(AbortReason::Measurement));
}

struct Unavailable;

impl AcousticEnvironment for Unavailable {
    fn record(&self, role: Role, _: &AudioSignal) -> Result<AudioSignal> {
        Err(Error::Measurement(format!("{role} microphone unavailable")))
    }
}

#[test]
fn measurement_needs_an_audible_sweep() {
    let spec = short_spec();
    assert!(matches!(run_measurement(Role::Prover, &Unavailable, &spec), Err(Error::Measurement(_))));
    let mut env = demo_environment(DemoKind::Relay, 1, &spec).unwrap();
    assert!(run_measurement(Role::Verifier, &env, &spec).is_ok());
    assert!(matches!(run_measurement(Role::Prover, &env, &spec), Err(Error::Measurement(_))));
    env.prover = None;
    assert!(run_measurement(Role::Prover, &env, &spec).is_err());
}

#[test]
fn sessions_over_the_testbed() {
    let spec = short_spec();
    let model = toy_model();

    let env = demo_environment(DemoKind::Benign, 3, &spec).unwrap();
    let mut v = Verifier::new(key(), spec);
    let mut p = Prover::new(key());
    let out = run_session(&mut v, &mut p, &env, &model, 77, &mut |_, m| relay(m));
    let verdict = out.result.unwrap();
    assert_eq!(p.phase(), ProverPhase::Done(verdict));
    let kinds: Vec<_> = out.transcript.entries.iter().map(|e| (e.from, e.kind.as_str())).collect();
    assert_eq!(kinds, [(Role::Verifier, "start"), (Role::Prover, "report"), (Role::Verifier, "decision")]);
    // features only: the transcript is far smaller than one recording
    let sizes: Vec<_> = out.transcript.entries.iter().map(|e| e.bytes.len()).collect();
    assert_eq!(sizes, [112, 1848, 41]);
    assert_eq!(out.transcript.to_hex_lines().lines().count(), 3);

    let env = demo_environment(DemoKind::Relay, 3, &spec).unwrap();
    let mut v = Verifier::new(key(), spec);
    let mut p = Prover::new(key());
    let out = run_session(&mut v, &mut p, &env, &model, 78, &mut |_, m| relay(m));
    assert!(matches!(out.result, Err(Error::Measurement(_))));
    assert_eq!(p.phase(), ProverPhase::Aborted(AbortReason::Measurement));
    assert_eq!(v.phase(), VerifierPhase::AwaitingReport);
    assert_eq!(out.transcript.entries.len(), 1);

    // a network adversary that rewrites the report never gets a verdict
    let env = demo_environment(DemoKind::Benign, 4, &spec).unwrap();
    let mut v = Verifier::new(key(), spec);
    let mut p = Prover::new(key());
    let mut tamper = |from: Role, m: &[u8]| {
        let mut m = m.to_vec();
        if from == Role::Prover {
            m[30] ^= 0x01;
        }
        m
    };
    let out = run_session(&mut v, &mut p, &env, &model, 79, &mut tamper);
    assert!(matches!(out.result, Err(Error::Authentication)));
    assert_eq!(v.phase(), VerifierPhase::Aborted(AbortReason::Authentication));
}

#[test]
fn demo_kind_parses() {
    assert_eq!("manipulate".parse::<DemoKind>().unwrap(), DemoKind::Manipulate);
    assert!("other".parse::<DemoKind>().is_err());
}

#[derive(Debug, Clone)]
enum Action {
    Genuine,
    Replay(usize),
    Flip(usize),
    Forge,
    Garbage(Vec<u8>),
    Start,
    Restart,
}

fn action() -> impl Strategy<Value = Action> {
    prop_oneof![
        Just(Action::Genuine),
        (0usize..8).prop_map(Action::Replay),
        (0usize..1848 * 8).prop_map(Action::Flip),
        Just(Action::Forge),
        proptest::collection::vec(any::<u8>(), 0..64).prop_map(Action::Garbage),
        Just(Action::Start),
        Just(Action::Restart),
    ]
}

fn rank(p: VerifierPhase) -> u8 {
    match p {
        VerifierPhase::Idle => 0,
        VerifierPhase::AwaitingReport => 1,
        VerifierPhase::Done(_) | VerifierPhase::Aborted(_) => 2,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Only a correctly keyed report echoing the live nonce can produce a
    /// verdict, and phases never move backwards or skip the wait.
    #[test]
    fn fuzzed_sequences_never_decide_on_bad_reports(
        seed in any::<u64>(),
        actions in proptest::collection::vec(action(), 1..12),
    ) {
        let model = toy_model();
        let mut past: Vec<Vec<u8>> = (0..8).map(|i| report(Nonce::generate(seed ^ (i + 1)), 0.1, &key())).collect();
        let mut v = Verifier::new(key(), SweepSpec::default());
        let mut session = 0u64;
        for a in actions {
            let before = v.phase();
            let delivered_genuine;
            let outcome = match a {
                Action::Start | Action::Restart => {
                    session += 1;
                    if matches!(a, Action::Restart) && rank(before) == 2 {
                        v = Verifier::new(key(), SweepSpec::default());
                    }
                    let before = v.phase();
                    let r = v.start_session(seed.wrapping_add(session));
                    if r.is_ok() {
                        prop_assert_eq!(before, VerifierPhase::Idle);
                        v.set_local_features(features(0.0)).unwrap();
                    }
                    continue;
                }
                Action::Genuine => {
                    let Some(n) = v.nonce() else { continue };
                    delivered_genuine = true;
                    let r = report(n, 0.1, &key());
                    past.push(r.clone());
                    v.verifier_decide(&r, &model)
                }
                Action::Replay(i) => {
                    let r = past[i % past.len()].clone();
                    delivered_genuine = v.nonce().is_some_and(|n| {
                        matches!(ProtocolMessage::open(&r, &key()).unwrap().payload,
                            Payload::Report { nonce, .. } if nonce == n)
                    });
                    v.verifier_decide(&r, &model)
                }
                Action::Flip(bit) => {
                    let n = v.nonce().unwrap_or(Nonce::generate(0));
                    let mut r = report(n, 0.1, &key());
                    r[bit / 8] ^= 1 << (bit % 8);
                    delivered_genuine = false;
                    v.verifier_decide(&r, &model)
                }
                Action::Forge => {
                    let n = v.nonce().unwrap_or(Nonce::generate(0));
                    delivered_genuine = false;
                    v.verifier_decide(&report(n, 0.1, &SessionKey::from_seed(seed)), &model)
                }
                Action::Garbage(bytes) => {
                    delivered_genuine = false;
                    v.verifier_decide(&bytes, &model)
                }
            };
            let after = v.phase();
            prop_assert!(rank(after) >= rank(before));
            if outcome.is_ok() {
                prop_assert!(delivered_genuine);
                prop_assert_eq!(before, VerifierPhase::AwaitingReport);
                prop_assert!(matches!(after, VerifierPhase::Done(_)));
            } else {
                prop_assert!(!matches!(after, VerifierPhase::Done(_)) || before == after);
            }
        }
    }
}
