//! Insecurity-injecting transformations. Each one turns a secure protocol
//! into a structurally similar insecure variant: leaking a secret on the
//! channel, encrypting under an adversary-known key, or deriving the session
//! key from adversary-known material. Variants are re-labeled by the oracle
//! before they enter a corpus; transformations that fail to break the
//! protocol are discarded there.

use crate::knowledge::{initial_knowledge, public_atoms, KnowledgeSet, Owner};
use crate::oracle::{label, label_passive, OracleConfig, Verdict};
use crate::protocol::{Message, Protocol, ProtocolKind};
use crate::term::{Atom, Func, Party, Term};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AugmentKind {
    LeakSecret,
    WeakEncryptionKey,
    WeakSessionKey,
}

pub const ALL_KINDS: [AugmentKind; 3] = [
    AugmentKind::LeakSecret,
    AugmentKind::WeakEncryptionKey,
    AugmentKind::WeakSessionKey,
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AugmentError {
    #[error("no leakable secret breaks the protocol")]
    NoSecretAvailable,
    #[error("protocol has no weakenable encryption node")]
    NoEncryptionNode,
    #[error("session-key weakening applies only to establishment protocols")]
    NotEstablishment,
}

/// Knowledge of I and R just before each message is produced.
fn knowledge_trace(p: &Protocol) -> Vec<[KnowledgeSet; 2]> {
    let publics = public_atoms();
    let mut know = [
        initial_knowledge(Owner::Party(Party::I), &publics).expect("party knowledge"),
        initial_knowledge(Owner::Party(Party::R), &publics).expect("party knowledge"),
    ];
    if let Some(owner) = p.session_key_owner() {
        let idx = if owner == Party::I { 0 } else { 1 };
        know[idx] = know[idx].absorb(&Term::session_key());
    }
    let mut trace = Vec::with_capacity(p.messages.len());
    for m in &p.messages {
        trace.push(know.clone());
        if m.behavior().is_send() {
            let receiver = if m.sender() == Party::I { 1 } else { 0 };
            know[receiver] = know[receiver].absorb_all(m.body());
        }
    }
    trace
}

fn adversary_closure(p: &Protocol) -> KnowledgeSet {
    let mut adv = initial_knowledge(Owner::Adversary, &public_atoms()).expect("adversary");
    for m in p.sends() {
        adv = adv.absorb_all(m.body());
    }
    adv
}

fn with_message(p: &Protocol, index: usize, root: Term) -> Protocol {
    let mut messages = p.messages.clone();
    messages[index] = Message::new(root).expect("transformed message stays well-formed");
    Protocol::new(messages, p.kind, p.seed)
}

/// Appends one secret (the session key, K, a long-term key, or an ephemeral
/// the key is built from) as an extra cleartext element of a send message.
/// Among the candidates the sender can actually produce, a uniformly chosen
/// one that breaks passive secrecy is used.
pub fn leak_secret<R: Rng>(p: &Protocol, rng: &mut R) -> Result<Protocol, AugmentError> {
    let mut secrets: Vec<Term> = Vec::new();
    if let Some(sk) = p.session_key() {
        secrets.push(sk.clone());
        for node in sk.iter_nodes() {
            if matches!(node.as_atom(), Some(Atom::Esk(..))) {
                secrets.push(node.clone());
            }
        }
    }
    if p.messages
        .iter()
        .any(|m| m.term().contains_atom(&Atom::PreShared))
    {
        secrets.push(Term::atom(Atom::PreShared));
    }
    secrets.push(Term::lsk(Party::I));
    secrets.push(Term::lsk(Party::R));
    secrets.dedup();

    let trace = knowledge_trace(p);
    let mut pairs: Vec<(usize, &Term)> = Vec::new();
    for (i, m) in p.messages.iter().enumerate() {
        if !m.behavior().is_send() {
            continue;
        }
        let sender = if m.sender() == Party::I { 0 } else { 1 };
        for s in &secrets {
            if trace[i][sender].derivable(s) {
                pairs.push((i, s));
            }
        }
    }

    pairs.shuffle(rng);
    for (i, s) in pairs {
        let mut root = p.messages[i].term().clone();
        root.children.push(s.clone());
        let candidate = with_message(p, i, root);
        if label_passive(&candidate).map(|l| l.verdict) == Ok(Verdict::Insecure) {
            return Ok(candidate);
        }
    }
    Err(AugmentError::NoSecretAvailable)
}

/// Paths to every senc/aenc node inside a message body, as (element index,
/// child path).
fn enc_positions(m: &Message) -> Vec<(usize, Vec<usize>)> {
    fn walk(t: &Term, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if matches!(t.as_func(), Some(Func::Senc | Func::Aenc)) {
            out.push(path.clone());
        }
        for (i, c) in t.children.iter().enumerate() {
            path.push(i);
            walk(c, path, out);
            path.pop();
        }
    }
    let mut positions = Vec::new();
    for (e, elem) in m.body().iter().enumerate() {
        let mut found = Vec::new();
        walk(elem, &mut Vec::new(), &mut found);
        positions.extend(found.into_iter().map(|p| (e, p)));
    }
    positions
}

fn replace_key_at(root: &mut Term, path: &[usize], key: Term) {
    let mut node = root;
    for &i in path {
        node = &mut node.children[i];
    }
    *node.children.last_mut().expect("enc node has a key child") = key;
}

/// Replaces one encryption's key with an adversary-known one: pk_E for
/// public-key encryption, a cleartext-compromised ephemeral for symmetric
/// encryption.
pub fn weaken_encryption<R: Rng>(p: &Protocol, rng: &mut R) -> Result<Protocol, AugmentError> {
    let mut nodes: Vec<(usize, usize, Vec<usize>)> = Vec::new();
    for (i, m) in p.messages.iter().enumerate() {
        for (e, path) in enc_positions(m) {
            nodes.push((i, e, path));
        }
    }
    if nodes.is_empty() {
        return Err(AugmentError::NoEncryptionNode);
    }

    let adv = adversary_closure(p);
    let trace = knowledge_trace(p);
    nodes.shuffle(rng);
    for (i, e, path) in nodes {
        let sender = if p.messages[i].sender() == Party::I { 0 } else { 1 };
        let mut target = p.messages[i].body()[e].clone();
        let mut node = &target;
        for &c in &path {
            node = &node.children[c];
        }
        let weak_key = match node.as_func() {
            Some(Func::Aenc) => Some(Term::pk(Party::E)),
            Some(Func::Senc) => {
                // any ephemeral both the adversary and the sender hold
                let mut keys: Vec<Term> = adv
                    .basis()
                    .iter()
                    .filter(|t| matches!(t.as_atom(), Some(Atom::Esk(..))))
                    .filter(|t| trace[i][sender].derivable(t))
                    .cloned()
                    .collect();
                if keys.is_empty() {
                    None
                } else {
                    let pick = rng.random_range(0..keys.len());
                    Some(keys.swap_remove(pick))
                }
            }
            _ => None,
        };
        let Some(weak_key) = weak_key else { continue };
        replace_key_at(&mut target, &path, weak_key);
        let mut root = p.messages[i].term().clone();
        root.children[e] = target;
        return Ok(with_message(p, i, root));
    }
    Err(AugmentError::NoEncryptionNode)
}

/// Rebuilds both accept bodies as a hash over atoms jointly derivable by
/// I, R, and the adversary, so the established key carries no secret.
pub fn weaken_session_key<R: Rng>(p: &Protocol, rng: &mut R) -> Result<Protocol, AugmentError> {
    if p.kind != ProtocolKind::Establishment || p.accepts().next().is_none() {
        return Err(AugmentError::NotEstablishment);
    }
    let adv = adversary_closure(p);
    let trace = knowledge_trace(p);
    let end = trace.last().expect("non-empty protocol");
    let candidates: Vec<Term> = adv
        .basis()
        .iter()
        .filter(|t| t.is_atom())
        .filter(|t| end[0].derivable(t) && end[1].derivable(t))
        .cloned()
        .collect();
    // publics guarantee this is non-empty
    let want = if candidates.len() >= 2 && rng.random_bool(0.5) {
        2
    } else {
        1
    };
    let mut picked = Vec::new();
    let mut remaining = candidates;
    for _ in 0..want {
        let idx = rng.random_range(0..remaining.len());
        picked.push(remaining.swap_remove(idx));
    }
    let body = Term::hash(picked);

    let mut result = p.clone();
    for (i, m) in p.messages.iter().enumerate() {
        if !m.behavior().is_send() {
            let mut root = m.term().clone();
            root.children = vec![body.clone()];
            result = with_message(&result, i, root);
        }
    }
    Ok(result)
}

pub fn apply(
    kind: AugmentKind,
    p: &Protocol,
    rng: &mut impl Rng,
) -> Result<Protocol, AugmentError> {
    match kind {
        AugmentKind::LeakSecret => leak_secret(p, rng),
        AugmentKind::WeakEncryptionKey => weaken_encryption(p, rng),
        AugmentKind::WeakSessionKey => weaken_session_key(p, rng),
    }
}

/// Pairs each secure input with oracle-verified insecure variants. Emits the
/// original, then up to `per_item` transformed protocols whose oracle label
/// is Insecure; others are dropped. Deterministic in `seed`, parallel over
/// the corpus.
pub fn augment_corpus(
    secure: &[Protocol],
    per_item: usize,
    cfg: &OracleConfig,
    seed: u64,
) -> Vec<(Protocol, Verdict)> {
    let mut out: Vec<(usize, Vec<(Protocol, Verdict)>)> = secure
        .par_iter()
        .enumerate()
        .map(|(idx, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            let mut records = vec![(p.clone(), Verdict::Secure)];
            for _ in 0..per_item {
                let mut kinds = ALL_KINDS.to_vec();
                kinds.shuffle(&mut rng);
                for kind in kinds {
                    let Ok(variant) = apply(kind, p, &mut rng) else {
                        continue;
                    };
                    let Ok(l) = label(&variant, cfg) else { continue };
                    if l.verdict == Verdict::Insecure {
                        records.push((variant, Verdict::Insecure));
                        break;
                    }
                }
            }
            (idx, records)
        })
        .collect();
    out.sort_by_key(|(idx, _)| *idx);
    out.into_iter().flat_map(|(_, r)| r).collect()
}
