//! Hand-encoded practical protocols from the standard key-establishment
//! literature, restricted to what the two-party vocabulary can express.
//! Each record carries the published attack-found flag as ground truth.
//! Protocols whose original form starts with a responder message are
//! mirrored so the first send is always I to R; protocols needing MACs,
//! key derivation functions, or encryption under the freshly established
//! key are listed as unsupported rather than force-fit.
//!
//! Because nearly all of the published protocols are secure, each secure
//! entry also gets a deterministic insecure twin built with the same
//! manipulations as the training-set augmentation, keeping the evaluation
//! set from rewarding a constant "secure" answer.

use crate::augment::{apply, AugmentKind, ALL_KINDS};
use crate::oracle::{label_passive, Verdict};
use crate::protocol::{Message, Protocol, ProtocolKind};
use crate::term::parse_term;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct PracticalRecord {
    /// Protocol number in Boyd, Mathuria and Stebila's catalogue.
    pub id: String,
    pub name: String,
    pub protocol: Protocol,
    pub ground_truth: Verdict,
    /// For insecure twins, the id of the secure original.
    pub derived_from: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnsupportedProtocol {
    pub id: String,
    pub name: String,
    pub reason: String,
}

fn proto(kind: ProtocolKind, seed: u64, texts: &[&str]) -> Protocol {
    Protocol::new(
        texts
            .iter()
            .map(|t| Message::new(parse_term(t).unwrap()).unwrap())
            .collect(),
        kind,
        seed,
    )
}

fn base_entries() -> Vec<(&'static str, &'static str, Protocol, Verdict)> {
    use ProtocolKind::{Establishment, Transport};
    use Verdict::{Insecure, Secure};

    let ktm4_cert = "(aenc (tuple (ID R) (SK)) (pk I))";
    let ktm4_m2 = format!(
        "(sendRI (ID I) (esk I 1) (esk R 1) {ktm4_cert} (sign (tuple (ID I) (esk I 1) (esk R 1) {ktm4_cert}) (lsk R)))"
    );

    vec![
        (
            "3.17",
            "ISO/IEC 11770-2 Key Establishment Mechanism 1",
            proto(
                Transport,
                317,
                &["(sendIR (senc (SK) (K)))", "(acceptI (SK))", "(acceptR (SK))"],
            ),
            Secure,
        ),
        (
            "3.18",
            "ISO/IEC 11770-2 Key Establishment Mechanism 2",
            proto(
                Transport,
                318,
                &[
                    "(sendIR (senc (T I) (SK) (K)))",
                    "(acceptI (SK))",
                    "(acceptR (SK))",
                ],
            ),
            Secure,
        ),
        (
            "3.19",
            "ISO/IEC 11770-2 Key Establishment Mechanism 3",
            proto(
                Transport,
                319,
                &[
                    "(sendIR (senc (T I) (ID R) (SK) (K)))",
                    "(acceptI (SK))",
                    "(acceptR (SK))",
                ],
            ),
            Secure,
        ),
        (
            "3.20",
            "ISO/IEC 11770-2 Key Establishment Mechanism 4",
            // mirrored: the key receiver opens with a nonce challenge
            proto(
                Transport,
                320,
                &[
                    "(sendIR (esk I 1))",
                    "(sendRI (senc (esk I 1) (SK) (K)))",
                    "(acceptI (SK))",
                    "(acceptR (SK))",
                ],
            ),
            Secure,
        ),
        (
            "3.21",
            "ISO/IEC 11770-2 Key Establishment Mechanism 5",
            proto(
                Establishment,
                321,
                &[
                    "(sendIR (esk I 1))",
                    "(sendRI (senc (esk R 1) (esk I 1) (K)))",
                    "(acceptI (hash (esk I 1) (esk R 1)))",
                    "(acceptR (hash (esk I 1) (esk R 1)))",
                ],
            ),
            Secure,
        ),
        (
            "3.22",
            "ISO/IEC 11770-2 Key Establishment Mechanism 6",
            proto(
                Establishment,
                322,
                &[
                    "(sendIR (esk I 1))",
                    "(sendRI (senc (esk R 1) (esk I 1) (ID I) (K)))",
                    "(sendIR (senc (esk I 2) (esk R 1) (K)))",
                    "(acceptI (hash (esk R 1) (esk I 2)))",
                    "(acceptR (hash (esk R 1) (esk I 2)))",
                ],
            ),
            Secure,
        ),
        (
            "4.11",
            "ISO/IEC 11770-3 Key Transport Mechanism 1",
            proto(
                Transport,
                411,
                &[
                    "(sendIR (aenc (T I) (ID I) (SK) (pk R)))",
                    "(acceptI (SK))",
                    "(acceptR (SK))",
                ],
            ),
            Secure,
        ),
        (
            "4.12",
            "ISO/IEC 11770-3 Key Transport Mechanism 2",
            proto(
                Transport,
                412,
                &[
                    "(sendIR (aenc (sign (T I) (ID R) (SK) (lsk I)) (pk R)))",
                    "(acceptI (SK))",
                    "(acceptR (SK))",
                ],
            ),
            Secure,
        ),
        (
            "4.13",
            "ISO/IEC 11770-3 Key Transport Mechanism 3",
            proto(
                Transport,
                413,
                &[
                    "(sendIR (sign (aenc (T I) (ID R) (SK) (pk R)) (lsk I)))",
                    "(acceptI (SK))",
                    "(acceptR (SK))",
                ],
            ),
            Secure,
        ),
        (
            "4.14",
            "Denning-Sacco public key protocol",
            // recipient identity inside the signature, as in the repaired form
            proto(
                Transport,
                414,
                &[
                    "(sendIR (aenc (sign (ID R) (T I) (SK) (lsk I)) (pk R)))",
                    "(acceptI (SK))",
                    "(acceptR (SK))",
                ],
            ),
            Secure,
        ),
        (
            "4.15",
            "ISO/IEC 11770-3 Key Transport Mechanism 4",
            proto(
                Transport,
                415,
                &[
                    "(sendIR (esk I 1))",
                    &ktm4_m2,
                    "(acceptI (SK))",
                    "(acceptR (SK))",
                ],
            ),
            Secure,
        ),
        (
            "4.16",
            "ISO/IEC 11770-3 Key Transport Mechanism 5",
            proto(
                Establishment,
                416,
                &[
                    "(sendIR (esk I 1))",
                    "(sendRI (esk R 1) (aenc (sign (ID I) (esk I 1) (esk R 2) (lsk R)) (pk I)))",
                    "(sendIR (aenc (sign (ID R) (esk R 1) (esk I 2) (lsk I)) (pk R)))",
                    "(acceptI (hash (esk R 2) (esk I 2)))",
                    "(acceptR (hash (esk R 2) (esk I 2)))",
                ],
            ),
            Secure,
        ),
        (
            "4.17",
            "ISO/IEC 11770-3 Key Transport Mechanism 6",
            proto(
                Establishment,
                417,
                &[
                    "(sendIR (esk I 1))",
                    "(sendRI (esk R 1) (sign (esk I 1) (ID I) (aenc (esk R 2) (pk I)) (lsk R)))",
                    "(sendIR (sign (esk R 1) (ID R) (aenc (esk I 2) (pk R)) (lsk I)))",
                    "(acceptI (hash (esk R 2) (esk I 2)))",
                    "(acceptR (hash (esk R 2) (esk I 2)))",
                ],
            ),
            Secure,
        ),
        (
            "4.18",
            "Helsinki protocol",
            proto(
                Establishment,
                418,
                &[
                    "(sendIR (aenc (ID I) (esk I 1) (pk R)))",
                    "(sendRI (aenc (esk R 1) (esk I 1) (pk I)))",
                    "(sendIR (aenc (esk R 1) (pk R)))",
                    "(acceptI (hash (esk I 1) (esk R 1)))",
                    "(acceptR (hash (esk I 1) (esk R 1)))",
                ],
            ),
            Insecure,
        ),
        (
            "4.19",
            "Blake-Wilson-Menezes key transport protocol",
            proto(
                Transport,
                419,
                &[
                    "(sendIR (esk I 1))",
                    "(sendRI (aenc (sign (ID I) (esk I 1) (SK) (lsk R)) (pk I)))",
                    "(sendIR (hash (SK) (esk I 1)))",
                    "(acceptI (SK))",
                    "(acceptR (SK))",
                ],
            ),
            Secure,
        ),
        (
            "4.20",
            "Needham-Schroeder public key protocol",
            proto(
                Establishment,
                420,
                &[
                    "(sendIR (aenc (tuple (esk I 1) (ID I)) (pk R)))",
                    "(sendRI (aenc (tuple (esk I 1) (esk R 1)) (pk I)))",
                    "(sendIR (aenc (esk R 1) (pk R)))",
                    "(acceptI (hash (esk I 1) (esk R 1)))",
                    "(acceptR (hash (esk I 1) (esk R 1)))",
                ],
            ),
            Insecure,
        ),
        (
            "4.22",
            "Needham-Schroeder-Lowe protocol",
            proto(
                Establishment,
                422,
                &[
                    "(sendIR (aenc (tuple (esk I 1) (ID I)) (pk R)))",
                    "(sendRI (aenc (tuple (esk I 1) (esk R 1) (ID R)) (pk I)))",
                    "(sendIR (aenc (esk R 1) (pk R)))",
                    "(acceptI (hash (esk I 1) (esk R 1)))",
                    "(acceptR (hash (esk I 1) (esk R 1)))",
                ],
            ),
            Secure,
        ),
        (
            "4.24",
            "X.509 one-pass authentication",
            proto(
                Transport,
                424,
                &[
                    "(sendIR (sign (T I) (ID R) (aenc (SK) (pk R)) (lsk I)))",
                    "(acceptI (SK))",
                    "(acceptR (SK))",
                ],
            ),
            Secure,
        ),
        (
            "4.26",
            "X.509 two-pass authentication",
            proto(
                Transport,
                426,
                &[
                    "(sendIR (sign (T I) (ID R) (aenc (SK) (pk R)) (lsk I)))",
                    "(sendRI (sign (T R) (ID I) (aenc (esk R 1) (pk I)) (lsk R)))",
                    "(acceptI (SK))",
                    "(acceptR (SK))",
                ],
            ),
            Secure,
        ),
        (
            "4.27",
            "X.509 three-pass authentication",
            proto(
                Transport,
                427,
                &[
                    "(sendIR (sign (esk I 1) (ID R) (aenc (SK) (pk R)) (lsk I)))",
                    "(sendRI (sign (esk R 1) (esk I 1) (ID I) (aenc (esk R 2) (pk I)) (lsk R)))",
                    "(sendIR (sign (esk R 1) (ID R) (lsk I)))",
                    "(acceptI (SK))",
                    "(acceptR (SK))",
                ],
            ),
            Secure,
        ),
        (
            "5.1",
            "Diffie-Hellman key agreement",
            proto(
                Establishment,
                51,
                &[
                    "(sendIR (exp (T I) (esk I 1)))",
                    "(sendRI (exp (T I) (esk R 1)))",
                    "(acceptI (exp (exp (T I) (esk I 1)) (esk R 1)))",
                    "(acceptR (exp (exp (T I) (esk I 1)) (esk R 1)))",
                ],
            ),
            Insecure,
        ),
    ]
}

pub fn unsupported_protocols() -> Vec<UnsupportedProtocol> {
    let mk = |id: &str, name: &str, reason: &str| UnsupportedProtocol {
        id: id.into(),
        name: name.into(),
        reason: reason.into(),
    };
    vec![
        mk(
            "1.9",
            "STS protocol",
            "encrypts signatures under the freshly derived Diffie-Hellman key, which the grammar's symmetric encryption cannot key",
        ),
        mk(
            "1.10",
            "STS protocol modified to include identifiers",
            "same derived-key encryption as 1.9",
        ),
        mk(
            "1.15",
            "Protocol ntor of Goldberg, Stebila and Ustaoglu",
            "requires a key derivation function and MAC authenticators",
        ),
        mk(
            "3.14",
            "Revised Andrew protocol of Burrows et al.",
            "final handshake encrypts under the newly established session key",
        ),
        mk(
            "3.16",
            "Boyd two-pass protocol",
            "requires MAC authenticators",
        ),
    ]
}

/// Builds the insecure twin of a secure record using the augmentation
/// operators, preferring the secret-leak manipulation and verifying that
/// the result is passively insecure. Deterministic per record id.
fn insecure_twin(record: &PracticalRecord) -> Option<PracticalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(record.protocol.seed);
    for kind in ALL_KINDS {
        for _ in 0..8 {
            let Ok(candidate) = apply(kind, &record.protocol, &mut rng) else {
                break;
            };
            let insecure = label_passive(&candidate)
                .map(|l| l.verdict == Verdict::Insecure)
                .unwrap_or(false);
            if insecure {
                let tag = match kind {
                    AugmentKind::LeakSecret => "leak",
                    AugmentKind::WeakEncryptionKey => "weak-enc",
                    AugmentKind::WeakSessionKey => "weak-key",
                };
                return Some(PracticalRecord {
                    id: format!("{}-{tag}", record.id),
                    name: format!("{} ({tag} twin)", record.name),
                    protocol: candidate,
                    ground_truth: Verdict::Insecure,
                    derived_from: Some(record.id.clone()),
                });
            }
        }
    }
    None
}

/// The practical evaluation set: every expressible catalogue protocol with
/// its published attack flag, plus one insecure twin per secure entry.
pub fn encode_practical_corpus() -> Vec<PracticalRecord> {
    let mut records: Vec<PracticalRecord> = base_entries()
        .into_iter()
        .map(|(id, name, protocol, ground_truth)| PracticalRecord {
            id: id.into(),
            name: name.into(),
            protocol,
            ground_truth,
            derived_from: None,
        })
        .collect();
    let twins: Vec<PracticalRecord> = records
        .iter()
        .filter(|r| r.ground_truth == Verdict::Secure)
        .filter_map(insecure_twin)
        .collect();
    records.extend(twins);
    assert!(records.len() <= 44, "practical corpus capped at 44 records");
    records
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::validate_protocol;

    #[test]
    fn corpus_is_capped_and_deterministic() {
        let a = encode_practical_corpus();
        let b = encode_practical_corpus();
        assert_eq!(a, b);
        assert!(a.len() <= 44);
        assert!(a.len() >= 30, "got {}", a.len());
    }

    #[test]
    fn all_records_validate() {
        for r in encode_practical_corpus() {
            let violations = validate_protocol(&r.protocol);
            assert!(violations.is_empty(), "{}: {:?}", r.id, violations);
        }
    }

    #[test]
    fn published_flags_for_key_entries() {
        let corpus = encode_practical_corpus();
        let flag = |id: &str| {
            corpus
                .iter()
                .find(|r| r.id == id)
                .unwrap_or_else(|| panic!("missing {id}"))
                .ground_truth
        };
        assert_eq!(flag("4.15"), Verdict::Secure);
        assert_eq!(flag("4.20"), Verdict::Insecure);
        assert_eq!(flag("5.1"), Verdict::Insecure);
        assert_eq!(flag("4.18"), Verdict::Insecure);
    }

    #[test]
    fn twins_are_passively_insecure() {
        for r in encode_practical_corpus() {
            if r.derived_from.is_some() {
                let l = label_passive(&r.protocol).unwrap();
                assert_eq!(l.verdict, Verdict::Insecure, "{}", r.id);
            }
        }
    }

    #[test]
    fn classes_are_roughly_balanced() {
        let corpus = encode_practical_corpus();
        let insecure = corpus
            .iter()
            .filter(|r| r.ground_truth == Verdict::Insecure)
            .count();
        let secure = corpus.len() - insecure;
        assert!(insecure >= corpus.len() / 3, "{insecure} of {}", corpus.len());
        assert!(secure >= corpus.len() / 3);
    }

    #[test]
    fn unsupported_list_is_disjoint_from_records() {
        let corpus = encode_practical_corpus();
        for u in unsupported_protocols() {
            assert!(corpus.iter().all(|r| r.id != u.id));
        }
    }
}
