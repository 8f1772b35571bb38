//! Messages, protocols, and structural validation including the
//! knowledge-replay check that every sent message is constructible by its
//! sender at send time.

use crate::knowledge::{initial_knowledge, public_atoms, Owner};
use crate::term::{Atom, Behavior, NodeLabel, Party, Term, TermError};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// A behavior-rooted message tree.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Message(Term);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MessageError {
    #[error("message root must be a behavior node, got {0}")]
    NotBehaviorRoot(String),
    #[error("send message must have at least one element")]
    EmptySend,
    #[error("accept event must have exactly one child (the session-key term)")]
    AcceptArity,
    #[error(transparent)]
    Term(#[from] TermError),
}

impl Message {
    pub fn new(root: Term) -> Result<Message, MessageError> {
        let b = match root.label {
            NodeLabel::Behavior(b) => b,
            _ => return Err(MessageError::NotBehaviorRoot(root.to_string())),
        };
        if b.is_send() && root.children.is_empty() {
            return Err(MessageError::EmptySend);
        }
        if !b.is_send() && root.children.len() != 1 {
            return Err(MessageError::AcceptArity);
        }
        for c in &root.children {
            c.check()?;
        }
        Ok(Message(root))
    }

    pub fn behavior(&self) -> Behavior {
        match self.0.label {
            NodeLabel::Behavior(b) => b,
            _ => unreachable!("Message invariant"),
        }
    }

    /// The message elements (children of the behavior root).
    pub fn body(&self) -> &[Term] {
        &self.0.children
    }

    pub fn term(&self) -> &Term {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.size()
    }

    pub fn sender(&self) -> Party {
        self.behavior().actor()
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    /// One party generates the session key and sends it.
    Transport,
    /// Both parties derive the session key from exchanged material.
    Establishment,
}

/// An ordered sequence of behavior-rooted message trees.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Protocol {
    pub messages: Vec<Message>,
    pub kind: ProtocolKind,
    pub seed: u64,
}

impl Protocol {
    pub fn new(messages: Vec<Message>, kind: ProtocolKind, seed: u64) -> Protocol {
        Protocol {
            messages,
            kind,
            seed,
        }
    }

    /// Total node count over all messages including behavior roots.
    pub fn size(&self) -> usize {
        self.messages.iter().map(Message::size).sum()
    }

    pub fn sends(&self) -> impl Iterator<Item = &Message> {
        self.messages.iter().filter(|m| m.behavior().is_send())
    }

    pub fn accepts(&self) -> impl Iterator<Item = &Message> {
        self.messages.iter().filter(|m| !m.behavior().is_send())
    }

    /// The session-key term: the body of the first accept event when accept
    /// events are present, otherwise the `SK` atom if it occurs in a sent
    /// message.
    pub fn session_key(&self) -> Option<Term> {
        if let Some(acc) = self.accepts().next() {
            return acc.body().first().cloned();
        }
        let sk = Term::session_key();
        self.sends()
            .any(|m| m.term().contains_atom(&Atom::SessionKey))
            .then_some(sk)
    }

    /// The party that generates the transport session key, inferred as the
    /// sender of the earliest message containing `SK`.
    pub fn session_key_owner(&self) -> Option<Party> {
        self.messages
            .iter()
            .find(|m| m.behavior().is_send() && m.term().contains_atom(&Atom::SessionKey))
            .map(Message::sender)
    }
}

/// A reason a protocol fails validation. Violations are collected, not thrown.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Violation {
    /// A term-level invariant failure inside message `index`.
    Structure { index: usize, detail: String },
    /// Send roots must strictly alternate starting with `sendIR`.
    Alternation { index: usize },
    /// Accept events appear only after all send messages, at most one per party.
    AcceptPlacement { index: usize },
    /// Protocol must contain at least one send message.
    NoSends,
    /// Total size must be at least 2.
    TooSmall,
    /// Session-instantiated atoms are internal to the attack search.
    SessionInstance { index: usize },
    /// Element `element` of message `index` is not derivable by its sender
    /// at send time.
    NotDerivableBySender { index: usize, element: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Structure { index, detail } => {
                write!(f, "message {index}: {detail}")
            }
            Violation::Alternation { index } => {
                write!(f, "message {index}: alternation broken (expected the other sender)")
            }
            Violation::AcceptPlacement { index } => {
                write!(f, "message {index}: accept event misplaced or duplicated")
            }
            Violation::NoSends => write!(f, "protocol has no send messages"),
            Violation::TooSmall => write!(f, "protocol size below 2"),
            Violation::SessionInstance { index } => {
                write!(f, "message {index}: contains session-instantiated atoms")
            }
            Violation::NotDerivableBySender { index, element } => {
                write!(f, "message {index} element {element}: not derivable by sender")
            }
        }
    }
}

/// Checks every structural invariant plus sender-constructibility by
/// replaying the knowledge evolution message by message. Empty result means
/// the protocol is valid.
pub fn validate_protocol(p: &Protocol) -> Vec<Violation> {
    let mut violations = Vec::new();

    if p.sends().next().is_none() {
        violations.push(Violation::NoSends);
    }
    if p.size() < 2 {
        violations.push(Violation::TooSmall);
    }

    // Structural checks and ordering.
    let mut expected_send = Behavior::SendIR;
    let mut seen_accept_i = false;
    let mut seen_accept_r = false;
    let mut in_accept_suffix = false;
    for (i, m) in p.messages.iter().enumerate() {
        for e in m.body() {
            if let Err(err) = e.check() {
                violations.push(Violation::Structure {
                    index: i,
                    detail: err.to_string(),
                });
            }
        }
        if m.term()
            .iter_nodes()
            .any(|t| t.as_atom().is_some_and(Atom::is_session_instance))
        {
            violations.push(Violation::SessionInstance { index: i });
        }
        match m.behavior() {
            b @ (Behavior::SendIR | Behavior::SendRI) => {
                if in_accept_suffix {
                    violations.push(Violation::AcceptPlacement { index: i });
                }
                if b != expected_send {
                    violations.push(Violation::Alternation { index: i });
                }
                expected_send = match b {
                    Behavior::SendIR => Behavior::SendRI,
                    _ => Behavior::SendIR,
                };
            }
            Behavior::AcceptI => {
                in_accept_suffix = true;
                if seen_accept_i {
                    violations.push(Violation::AcceptPlacement { index: i });
                }
                seen_accept_i = true;
            }
            Behavior::AcceptR => {
                in_accept_suffix = true;
                if seen_accept_r {
                    violations.push(Violation::AcceptPlacement { index: i });
                }
                seen_accept_r = true;
            }
        }
    }

    // Knowledge replay: every element of every message must be derivable by
    // its actor at that point of the run.
    let publics = public_atoms();
    let mut know = match (
        initial_knowledge(Owner::Party(Party::I), &publics),
        initial_knowledge(Owner::Party(Party::R), &publics),
    ) {
        (Ok(i), Ok(r)) => [i, r],
        _ => return violations,
    };
    // The transport session key belongs to its generating party from the start.
    if let Some(owner) = p.session_key_owner() {
        let idx = if owner == Party::I { 0 } else { 1 };
        know[idx] = know[idx].absorb(&Term::session_key());
    }
    for (i, m) in p.messages.iter().enumerate() {
        let actor_idx = if m.sender() == Party::I { 0 } else { 1 };
        for (j, e) in m.body().iter().enumerate() {
            if !know[actor_idx].derivable(e) {
                violations.push(Violation::NotDerivableBySender {
                    index: i,
                    element: j,
                });
            }
        }
        if m.behavior().is_send() {
            let receiver_idx = 1 - actor_idx;
            know[receiver_idx] = know[receiver_idx].absorb_all(m.body());
        }
    }

    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::term::parse_term;

    fn msg(text: &str) -> Message {
        Message::new(parse_term(text).unwrap()).unwrap()
    }

    /// ISO/IEC 11770-3 Key Transport Mechanism 4.
    pub(crate) fn ktm4() -> Protocol {
        let inner_aenc = "(aenc (tuple (ID R) (SK)) (pk I))";
        let m2 = format!(
            "(sendRI (ID I) (esk I 1) (esk R 1) {a} (sign (tuple (ID I) (esk I 1) (esk R 1) {a}) (lsk R)))",
            a = inner_aenc
        );
        Protocol::new(
            vec![
                msg("(sendIR (esk I 1))"),
                msg(&m2),
                msg("(acceptI (SK))"),
                msg("(acceptR (SK))"),
            ],
            ProtocolKind::Transport,
            0,
        )
    }

    #[test]
    fn ktm4_is_valid() {
        let p = ktm4();
        assert_eq!(validate_protocol(&p), vec![]);
        assert_eq!(p.session_key(), Some(Term::session_key()));
        assert_eq!(p.session_key_owner(), Some(Party::R));
    }

    #[test]
    fn alternation_violation() {
        let p = Protocol::new(
            vec![msg("(sendRI (esk R 1))")],
            ProtocolKind::Transport,
            0,
        );
        assert!(validate_protocol(&p)
            .iter()
            .any(|v| matches!(v, Violation::Alternation { index: 0 })));
    }

    #[test]
    fn sender_cannot_use_peer_secret() {
        // I sends esk_R in message 1: not derivable per initial knowledge.
        let p = Protocol::new(
            vec![msg("(sendIR (esk R 1))")],
            ProtocolKind::Transport,
            0,
        );
        assert!(validate_protocol(&p)
            .iter()
            .any(|v| matches!(v, Violation::NotDerivableBySender { index: 0, element: 0 })));
    }

    #[test]
    fn receiver_learns_and_reuses() {
        // I sends esk_I1 in clear; R may hash it in the reply.
        let p = Protocol::new(
            vec![
                msg("(sendIR (esk I 1))"),
                msg("(sendRI (hash (esk I 1)))"),
            ],
            ProtocolKind::Transport,
            0,
        );
        let violations = validate_protocol(&p);
        // no derivability violations; protocol has no session key but that is
        // not a structural violation
        assert!(violations.is_empty(), "{violations:?}");
    }

    #[test]
    fn send_after_accept_rejected() {
        let p = Protocol::new(
            vec![
                msg("(sendIR (esk I 1))"),
                msg("(acceptI (hash (esk I 1)))"),
                msg("(sendRI (ID I))"),
            ],
            ProtocolKind::Establishment,
            0,
        );
        assert!(validate_protocol(&p)
            .iter()
            .any(|v| matches!(v, Violation::AcceptPlacement { index: 2 })));
    }

    #[test]
    fn size_is_additive() {
        let p = ktm4();
        let total: usize = p.messages.iter().map(Message::size).sum();
        assert_eq!(p.size(), total);
        assert_eq!(p.messages[0].size(), 2);
    }

    #[test]
    fn accept_arity_enforced() {
        let t = parse_term("(acceptI (SK) (K))").unwrap();
        assert_eq!(Message::new(t), Err(MessageError::AcceptArity));
        let t = parse_term("(sendIR)");
        // empty send caught at parse or message level
        if let Ok(t) = t {
            assert_eq!(Message::new(t), Err(MessageError::EmptySend));
        }
    }
}
