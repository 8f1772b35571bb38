//! Random protocol generation: alternating send roots, grammar-directed
//! message trees drawn from the sender's current knowledge, knowledge updates
//! after every message, and session-key selection for establishment-type
//! protocols.

use crate::knowledge::{initial_knowledge, public_atoms, KnowledgeSet, Owner};
use crate::protocol::{Message, Protocol, ProtocolKind};
use crate::term::{Atom, Behavior, Func, NodeLabel, Party, Term};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use thiserror::Error;

/// Function nodes may nest this deep before only atomic draws are allowed;
/// the width bound `c_max` alone does not bound the tree height.
const MAX_NESTING_DEPTH: usize = 4;

/// Attempts before falling back (transport: force-append `SK`;
/// establishment: downgrade to transport).
const MAX_ATTEMPTS: u64 = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    /// Maximum number of message exchanges.
    pub m_max: u32,
    /// Maximum number of message elements per node.
    pub c_max: u32,
    /// Probability of generating an establishment-type protocol.
    pub establishment_prob: f64,
    /// Emit acceptI/acceptR events (always on for establishment).
    pub include_accepts: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            m_max: 5,
            c_max: 3,
            establishment_prob: 0.5,
            include_accepts: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GenError {
    #[error("no joint session-key candidate with secret material")]
    EmptyIntersection,
    #[error("m_max and c_max must be at least 1")]
    BadConfig,
}

/// Randomness source for generation. The seeded implementation splits one
/// seed into independent streams (one per message index) so corpora are
/// reproducible; tests drive the generator with scripted draws instead.
pub trait Sampler {
    /// Uniform draw from `1..=max`.
    fn pick_count(&mut self, max: u32) -> u32;
    /// Uniform draw from `0..len`.
    fn pick_index(&mut self, len: usize) -> usize;
    /// Bernoulli draw.
    fn pick_bool(&mut self, p: f64) -> bool;
    /// Switch to an independent substream. Stream slots: 0 for
    /// protocol-level draws, `i` for message `i` (1-based), 255 for
    /// session-key selection; each retry attempt shifts slots by 256.
    fn enter_stream(&mut self, _slot: u64) {}
}

/// Seeded sampler over ChaCha8: portable, named, and stream-splittable.
pub struct SeededSampler {
    seed: u64,
    attempt: u64,
    rng: ChaCha8Rng,
}

impl SeededSampler {
    pub fn new(seed: u64, attempt: u64) -> SeededSampler {
        let mut s = SeededSampler {
            seed,
            attempt,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.enter_stream(0);
        s
    }
}

impl Sampler for SeededSampler {
    fn pick_count(&mut self, max: u32) -> u32 {
        self.rng.random_range(1..=max)
    }

    fn pick_index(&mut self, len: usize) -> usize {
        self.rng.random_range(0..len)
    }

    fn pick_bool(&mut self, p: f64) -> bool {
        self.rng.random_bool(p.clamp(0.0, 1.0))
    }

    fn enter_stream(&mut self, slot: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.attempt * 256 + slot);
        self.rng = rng;
    }
}

/// Plain RNG-backed sampler without stream structure (used where splitting
/// is not needed, e.g. augmentation draws).
pub struct RngSampler<R: RngCore>(pub R);

impl<R: RngCore> Sampler for RngSampler<R> {
    fn pick_count(&mut self, max: u32) -> u32 {
        self.0.random_range(1..=max)
    }
    fn pick_index(&mut self, len: usize) -> usize {
        self.0.random_range(0..len)
    }
    fn pick_bool(&mut self, p: f64) -> bool {
        self.0.random_bool(p.clamp(0.0, 1.0))
    }
}

/// Atoms a party may place in messages: the atomic terms of its knowledge
/// basis minus adversary-owned atoms (those exist only for the labeling
/// oracle).
fn drawable_atoms(k: &KnowledgeSet) -> Vec<Atom> {
    k.basis()
        .iter()
        .filter_map(|t| t.as_atom())
        .filter(|a| {
            !a.is_session_instance()
                && !matches!(
                    a,
                    Atom::Id(Party::E)
                        | Atom::Esk(Party::E, _)
                        | Atom::Lsk(Party::E)
                        | Atom::Pk(Party::E)
                        | Atom::Timestamp(Party::E)
                )
        })
        .cloned()
        .collect()
}

/// Functions drawable at this depth and width bound.
fn drawable_funcs(c_max: u32, depth: usize) -> Vec<Func> {
    if depth >= MAX_NESTING_DEPTH {
        return Vec::new();
    }
    Func::ALL
        .into_iter()
        .filter(|f| *f != Func::Tuple || c_max >= 2)
        .collect()
}

/// Draws one message element: an atom from the sender's knowledge or a
/// function node whose children are drawn recursively.
fn draw_element(
    c_max: u32,
    sender: Party,
    atoms: &[Atom],
    depth: usize,
    sampler: &mut dyn Sampler,
) -> Term {
    let funcs = drawable_funcs(c_max, depth);
    let idx = sampler.pick_index(atoms.len() + funcs.len());
    if idx < atoms.len() {
        return Term::atom(atoms[idx].clone());
    }
    let f = funcs[idx - atoms.len()];
    match f {
        Func::Senc | Func::Aenc | Func::Sign => {
            let mut children = draw_children(c_max, sender, atoms, depth + 1, sampler);
            // Key positions are forced legal: K for senc, the partner's
            // public key for aenc, the sender's own static key for sign.
            children.push(match f {
                Func::Senc => Term::pre_shared(),
                Func::Aenc => Term::pk(sender.partner()),
                _ => Term::lsk(sender),
            });
            Term::func(f, children)
        }
        Func::Hash => Term::func(f, draw_children(c_max, sender, atoms, depth + 1, sampler)),
        Func::Exp => {
            let base = draw_element(c_max, sender, atoms, depth + 1, sampler);
            let exponent = draw_element(c_max, sender, atoms, depth + 1, sampler);
            Term::exp(base, exponent)
        }
        Func::Tuple => {
            let c = 1 + sampler.pick_count(c_max.saturating_sub(1).max(1));
            let children = (0..c)
                .map(|_| draw_element(c_max, sender, atoms, depth + 1, sampler))
                .collect();
            Term::func(Func::Tuple, children)
        }
    }
}

fn draw_children(
    c_max: u32,
    sender: Party,
    atoms: &[Atom],
    depth: usize,
    sampler: &mut dyn Sampler,
) -> Vec<Term> {
    let c = sampler.pick_count(c_max);
    (0..c)
        .map(|_| draw_element(c_max, sender, atoms, depth, sampler))
        .collect()
}

/// Adds `c ∈ 1..=c_max` elements under a behavior root, drawn from the
/// sender's knowledge atoms and the function vocabulary.
pub fn generate_message(
    c_max: u32,
    knowledge: &KnowledgeSet,
    sender: Party,
    root: &mut Term,
    sampler: &mut dyn Sampler,
) {
    let atoms = drawable_atoms(knowledge);
    root.children
        .extend(draw_children(c_max, sender, &atoms, 0, sampler));
}

/// Jointly derivable session-key candidates: bare exchanged ephemerals plus
/// unary/binary hashes over the atoms both parties hold. Candidates
/// containing at least one non-public atom are preferred.
fn session_key_candidates(k_i: &KnowledgeSet, k_r: &KnowledgeSet) -> Vec<Term> {
    let joint: Vec<Atom> = drawable_atoms(k_i)
        .into_iter()
        .filter(|a| drawable_atoms(k_r).contains(a))
        .collect();
    let mut out: BTreeSet<Term> = BTreeSet::new();
    for a in &joint {
        if matches!(a, Atom::Esk(..)) {
            out.insert(Term::atom(a.clone()));
        }
        out.insert(Term::hash(vec![Term::atom(a.clone())]));
        for b in &joint {
            if b > a {
                out.insert(Term::hash(vec![Term::atom(a.clone()), Term::atom(b.clone())]));
            }
        }
    }
    let (secretish, public_only): (Vec<Term>, Vec<Term>) = out
        .into_iter()
        .partition(|t| t.iter_nodes().any(|n| n.as_atom().is_some_and(|a| !a.is_public())));
    if secretish.is_empty() {
        public_only
    } else {
        secretish
    }
}

/// Appends acceptI/acceptR events carrying a session key drawn from the
/// terms derivable by both parties after the exchange. Fails with
/// [`GenError::EmptyIntersection`] when only public-material candidates
/// exist.
pub fn choose_session_keys(
    p: &Protocol,
    k_i: &KnowledgeSet,
    k_r: &KnowledgeSet,
    sampler: &mut dyn Sampler,
) -> Result<Protocol, GenError> {
    let candidates = session_key_candidates(k_i, k_r);
    let has_secret = candidates
        .iter()
        .any(|t| t.iter_nodes().any(|n| n.as_atom().is_some_and(|a| !a.is_public())));
    if candidates.is_empty() || !has_secret {
        return Err(GenError::EmptyIntersection);
    }
    let key = candidates[sampler.pick_index(candidates.len())].clone();
    debug_assert!(k_i.derivable(&key) && k_r.derivable(&key));
    let mut messages = p.messages.clone();
    messages.push(
        Message::new(Term {
            label: NodeLabel::Behavior(Behavior::AcceptI),
            children: vec![key.clone()],
        })
        .expect("accept message"),
    );
    messages.push(
        Message::new(Term {
            label: NodeLabel::Behavior(Behavior::AcceptR),
            children: vec![key],
        })
        .expect("accept message"),
    );
    Ok(Protocol::new(messages, ProtocolKind::Establishment, p.seed))
}

/// One generation attempt; `None` means retry (transport key never sent, or
/// no establishment candidate).
fn try_generate(cfg: &GenConfig, attempt: u64, force: bool) -> Option<Protocol> {
    let mut sampler = SeededSampler::new(cfg.seed, attempt);
    generate_attempt(cfg, &mut sampler, force)
}

/// The generation core, driven by an arbitrary sampler (scriptable in tests).
pub fn generate_attempt(
    cfg: &GenConfig,
    sampler: &mut dyn Sampler,
    force: bool,
) -> Option<Protocol> {
    sampler.enter_stream(0);
    let m = sampler.pick_count(cfg.m_max);
    let establishment = cfg.include_accepts && sampler.pick_bool(cfg.establishment_prob);
    // Transport: the generating party holds SK from the start.
    let sk_owner = if establishment {
        None
    } else if m >= 2 && sampler.pick_bool(0.5) {
        Some(Party::R)
    } else {
        Some(Party::I)
    };

    let publics = public_atoms();
    let mut know = [
        initial_knowledge(Owner::Party(Party::I), &publics).expect("initial knowledge"),
        initial_knowledge(Owner::Party(Party::R), &publics).expect("initial knowledge"),
    ];
    if let Some(owner) = sk_owner {
        let idx = (owner == Party::R) as usize;
        know[idx] = know[idx].absorb(&Term::session_key());
    }

    let mut messages = Vec::with_capacity(m as usize + 2);
    for i in 1..=m {
        sampler.enter_stream(i as u64);
        let (behavior, sender) = if i % 2 == 1 {
            (Behavior::SendIR, Party::I)
        } else {
            (Behavior::SendRI, Party::R)
        };
        let mut root = Term {
            label: NodeLabel::Behavior(behavior),
            children: Vec::new(),
        };
        let sender_idx = (sender == Party::R) as usize;
        generate_message(cfg.c_max, &know[sender_idx], sender, &mut root, sampler);
        know[1 - sender_idx] = know[1 - sender_idx].absorb_all(&root.children);
        messages.push(Message::new(root).expect("generated message"));
    }

    let draft = Protocol::new(
        messages,
        if establishment {
            ProtocolKind::Establishment
        } else {
            ProtocolKind::Transport
        },
        cfg.seed,
    );

    if establishment {
        sampler.enter_stream(255);
        match choose_session_keys(&draft, &know[0], &know[1], sampler) {
            Ok(p) => Some(p),
            Err(_) => None,
        }
    } else {
        let owner = sk_owner.expect("transport owner");
        let mut draft = draft;
        let sk_sent = draft
            .sends()
            .any(|msg| msg.term().contains_atom(&Atom::SessionKey));
        if !sk_sent {
            if !force {
                return None;
            }
            // Last resort: append SK in the clear to the owner's last message.
            let idx = draft
                .messages
                .iter()
                .rposition(|msg| msg.sender() == owner)?;
            let mut root = draft.messages[idx].term().clone();
            root.children.push(Term::session_key());
            draft.messages[idx] = Message::new(root).expect("forced SK message");
            let recv_idx = (owner == Party::I) as usize; // receiver of owner's message
            know[recv_idx] = know[recv_idx].absorb(&Term::session_key());
        }
        if cfg.include_accepts {
            // Both parties must actually end up with SK for the accept
            // events to be sender-constructible.
            let receiver_idx = 1 - ((owner == Party::R) as usize);
            if !know[receiver_idx].derivable(&Term::session_key()) {
                if !force {
                    return None;
                }
                let idx = draft
                    .messages
                    .iter()
                    .rposition(|msg| msg.sender() == owner)?;
                let mut root = draft.messages[idx].term().clone();
                root.children.push(Term::session_key());
                draft.messages[idx] = Message::new(root).expect("forced SK message");
                know[receiver_idx] = know[receiver_idx].absorb(&Term::session_key());
            }
            for b in [Behavior::AcceptI, Behavior::AcceptR] {
                draft.messages.push(
                    Message::new(Term {
                        label: NodeLabel::Behavior(b),
                        children: vec![Term::session_key()],
                    })
                    .expect("accept message"),
                );
            }
        }
        Some(draft)
    }
}

/// Generates one protocol. Deterministic in `(cfg, cfg.seed)`; bounded retry
/// on dead-end draws, never fails.
pub fn generate_protocol(cfg: &GenConfig) -> Result<Protocol, GenError> {
    if cfg.m_max == 0 || cfg.c_max == 0 {
        return Err(GenError::BadConfig);
    }
    for attempt in 0..MAX_ATTEMPTS {
        if let Some(p) = try_generate(cfg, attempt, false) {
            return Ok(p);
        }
    }
    // Forced fallback: transport with SK appended if necessary.
    let forced = GenConfig {
        establishment_prob: 0.0,
        ..cfg.clone()
    };
    let mut sampler = SeededSampler::new(cfg.seed, MAX_ATTEMPTS);
    Ok(generate_attempt(&forced, &mut sampler, true).expect("forced generation cannot fail"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::validate_protocol;
    use rand_chacha::ChaCha8Rng as SmallRng;
    use std::collections::VecDeque;

    /// Replays a scripted choice sequence; panics on exhaustion.
    pub(crate) struct ScriptedSampler {
        script: VecDeque<ScriptedChoice>,
    }

    #[derive(Debug)]
    pub(crate) enum ScriptedChoice {
        Count(u32),
        Index(usize),
        Bool(bool),
    }

    impl ScriptedSampler {
        pub(crate) fn new(script: Vec<ScriptedChoice>) -> Self {
            ScriptedSampler {
                script: script.into(),
            }
        }
    }

    impl Sampler for ScriptedSampler {
        fn pick_count(&mut self, max: u32) -> u32 {
            match self.script.pop_front() {
                Some(ScriptedChoice::Count(c)) => {
                    assert!(c >= 1 && c <= max, "scripted count {c} out of 1..={max}");
                    c
                }
                other => panic!("expected Count, got {other:?}"),
            }
        }
        fn pick_index(&mut self, len: usize) -> usize {
            match self.script.pop_front() {
                Some(ScriptedChoice::Index(i)) => {
                    assert!(i < len, "scripted index {i} out of 0..{len}");
                    i
                }
                other => panic!("expected Index, got {other:?}"),
            }
        }
        fn pick_bool(&mut self, _p: f64) -> bool {
            match self.script.pop_front() {
                Some(ScriptedChoice::Bool(b)) => b,
                other => panic!("expected Bool, got {other:?}"),
            }
        }
    }

    #[test]
    fn forced_shape_single_message() {
        let cfg = GenConfig {
            m_max: 1,
            c_max: 1,
            seed: 7,
            ..GenConfig::default()
        };
        let p = generate_protocol(&cfg).unwrap();
        let first = p.sends().next().unwrap();
        assert_eq!(first.behavior(), Behavior::SendIR);
        assert_eq!(first.body().len(), 1);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = GenConfig {
            seed: 42,
            ..GenConfig::default()
        };
        let a = generate_protocol(&cfg).unwrap();
        let b = generate_protocol(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_protocol(&GenConfig {
            seed: 43,
            ..cfg
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generated_protocols_validate() {
        for seed in 0..300 {
            let cfg = GenConfig {
                seed,
                ..GenConfig::default()
            };
            let p = generate_protocol(&cfg).unwrap();
            let violations = validate_protocol(&p);
            assert!(violations.is_empty(), "seed {seed}: {violations:?}\n{p:?}");
            let n_sends = p.sends().count();
            assert!(n_sends >= 1 && n_sends <= 5);
        }
    }

    #[test]
    fn child_count_is_uniform() {
        use rand::SeedableRng;
        let mut sampler = RngSampler(SmallRng::seed_from_u64(1));
        let c_max = 3u32;
        let n = 10_000;
        let total: u64 = (0..n).map(|_| sampler.pick_count(c_max) as u64).sum();
        let mean = total as f64 / n as f64;
        let expected = (1.0 + c_max as f64) / 2.0;
        // variance of uniform{1..3} is 2/3
        let sigma = (2.0 / 3.0_f64 / n as f64).sqrt();
        assert!(
            (mean - expected).abs() < 3.0 * sigma,
            "mean {mean} vs {expected}"
        );
    }

    /// The worked generation example: scripted draws reproduce
    /// `I -> R: aenc(ID_R, pk_R), hash(senc(esk_I, K)), esk_I` and the
    /// establishment key `hash(esk_I, pk_R)`.
    #[test]
    fn worked_example_scripted() {
        // Sorted drawable atoms for I before any exchange:
        // ID_I, ID_R, esk_I1, esk_I2, lsk_I, pk_I, pk_R, T_I, T_R, K  (10)
        // then functions senc aenc sign hash exp tuple at indices 10..16.
        let script = vec![
            ScriptedChoice::Count(2),  // m = 2
            ScriptedChoice::Bool(true), // establishment
            // message 1: three elements
            ScriptedChoice::Count(3),
            ScriptedChoice::Index(11), // aenc
            ScriptedChoice::Count(1),  //   one payload element
            ScriptedChoice::Index(1),  //   ID_R
            ScriptedChoice::Index(13), // hash
            ScriptedChoice::Count(1),  //   one payload element
            ScriptedChoice::Index(10), //   senc
            ScriptedChoice::Count(1),  //     one payload element
            ScriptedChoice::Index(2),  //     esk_I1
            ScriptedChoice::Index(2),  // esk_I1 in the clear
            // message 2: R's atoms now include esk_I1 learned from message 1:
            // ID_I, ID_R, esk_I1, esk_R1, esk_R2, lsk_R, pk_I, pk_R, T_I, T_R, K (11)
            ScriptedChoice::Count(2),
            ScriptedChoice::Index(14), // hash
            ScriptedChoice::Count(1),
            ScriptedChoice::Index(2), //   esk_I1
            ScriptedChoice::Index(0), // ID_I
            // session-key draw: pick hash(esk_I1, pk_R) from the sorted
            // candidate list (index computed below)
            ScriptedChoice::Index(sk_candidate_index()),
        ];
        let cfg = GenConfig {
            m_max: 3,
            c_max: 5,
            seed: 0,
            ..GenConfig::default()
        };
        let mut sampler = ScriptedSampler::new(script);
        let p = generate_attempt(&cfg, &mut sampler, false).unwrap();
        let rendered: Vec<String> = p.messages.iter().map(|m| m.to_string()).collect();
        assert_eq!(
            rendered[0],
            "(sendIR (aenc (ID R) (pk R)) (hash (senc (esk I 1) (K))) (esk I 1))"
        );
        assert_eq!(rendered[1], "(sendRI (hash (esk I 1)) (ID I))");
        assert_eq!(rendered[2], "(acceptI (hash (esk I 1) (pk R)))");
        assert_eq!(rendered[3], "(acceptR (hash (esk I 1) (pk R)))");
        assert_eq!(p.kind, ProtocolKind::Establishment);
        assert!(validate_protocol(&p).is_empty());
    }

    /// Index of `hash(esk_I1, pk_R)` in the sorted candidate set for the
    /// worked example's post-protocol knowledge.
    fn sk_candidate_index() -> usize {
        let publics = public_atoms();
        let k_i = initial_knowledge(Owner::Party(Party::I), &publics).unwrap();
        let k_r = initial_knowledge(Owner::Party(Party::R), &publics)
            .unwrap()
            .absorb(&Term::esk(Party::I, 1));
        let candidates = super::session_key_candidates(&k_i, &k_r);
        let target = Term::hash(vec![Term::esk(Party::I, 1), Term::pk(Party::R)]);
        candidates
            .iter()
            .position(|t| *t == target)
            .expect("worked-example key must be a candidate")
    }

    #[test]
    fn establishment_keys_jointly_derivable() {
        let mut checked = 0;
        for seed in 0..400 {
            let cfg = GenConfig {
                seed,
                establishment_prob: 1.0,
                ..GenConfig::default()
            };
            let p = generate_protocol(&cfg).unwrap();
            if p.kind != ProtocolKind::Establishment {
                continue; // fallback path
            }
            let bodies: Vec<&Term> = p.accepts().map(|m| &m.body()[0]).collect();
            assert_eq!(bodies.len(), 2);
            assert_eq!(bodies[0], bodies[1]);
            checked += 1;
        }
        assert!(checked > 100, "establishment fallback rate too high");
    }
}
