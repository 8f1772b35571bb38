//! The term algebra shared by every other module: node labels drawn from a
//! fixed vocabulary, ordered trees over them, and the canonical textual
//! (s-expression) form used by the line-delimited corpus files.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Protocol principals. `E` is the adversary's identity; honest parties never
/// generate `E`-owned atoms, but they know `ID_E` and `pk_E`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum Party {
    I,
    R,
    E,
}

impl Party {
    pub fn as_str(&self) -> &'static str {
        match self {
            Party::I => "I",
            Party::R => "R",
            Party::E => "E",
        }
    }

    /// The honest communication partner. Only meaningful for `I` and `R`.
    pub fn partner(&self) -> Party {
        match self {
            Party::I => Party::R,
            Party::R => Party::I,
            Party::E => Party::E,
        }
    }
}

/// Maximum fresh-value index per party and kind (`esk_I1`, `esk_I2`).
pub const MAX_FRESH_INDEX: u8 = 2;

/// Atomic message components.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum Atom {
    /// Party identifier `ID_P`.
    Id(Party),
    /// Ephemeral secret key `esk_Pi`, fresh index in `1..=MAX_FRESH_INDEX`.
    Esk(Party, u8),
    /// Static (long-term) secret key `lsk_P`.
    Lsk(Party),
    /// Public key `pk_P`.
    Pk(Party),
    /// Timestamp `T_P` (opaque public value).
    Timestamp(Party),
    /// Pre-shared symmetric key `K` of the honest parties.
    PreShared,
    /// Session key `SK`.
    SessionKey,
    /// A fresh value instantiated for a particular session of the attack
    /// search. Never produced by the parser or the generator and never part
    /// of the model vocabulary.
    Inst(Box<Atom>, u32),
}

impl Atom {
    pub fn is_public(&self) -> bool {
        matches!(
            self,
            Atom::Id(_) | Atom::Pk(_) | Atom::Timestamp(_)
        )
    }

    /// The party that owns (can generate or hold) this atom, when unique.
    pub fn owner(&self) -> Option<Party> {
        match self {
            Atom::Esk(p, _) | Atom::Lsk(p) => Some(*p),
            Atom::Inst(a, _) => a.owner(),
            _ => None,
        }
    }

    pub fn is_session_instance(&self) -> bool {
        matches!(self, Atom::Inst(..))
    }
}

/// Cryptographic operations (internal tree nodes).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum Func {
    Senc,
    Aenc,
    Sign,
    Hash,
    Exp,
    Tuple,
}

impl Func {
    pub fn as_str(&self) -> &'static str {
        match self {
            Func::Senc => "senc",
            Func::Aenc => "aenc",
            Func::Sign => "sign",
            Func::Hash => "hash",
            Func::Exp => "exp",
            Func::Tuple => "tuple",
        }
    }

    pub const ALL: [Func; 6] = [
        Func::Senc,
        Func::Aenc,
        Func::Sign,
        Func::Hash,
        Func::Exp,
        Func::Tuple,
    ];

    /// senc/aenc/sign carry a trailing key child.
    pub fn has_key_child(&self) -> bool {
        matches!(self, Func::Senc | Func::Aenc | Func::Sign)
    }
}

/// Party behaviors (message roots).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum Behavior {
    SendIR,
    SendRI,
    AcceptI,
    AcceptR,
}

impl Behavior {
    pub fn as_str(&self) -> &'static str {
        match self {
            Behavior::SendIR => "sendIR",
            Behavior::SendRI => "sendRI",
            Behavior::AcceptI => "acceptI",
            Behavior::AcceptR => "acceptR",
        }
    }

    pub fn is_send(&self) -> bool {
        matches!(self, Behavior::SendIR | Behavior::SendRI)
    }

    /// The party performing this behavior.
    pub fn actor(&self) -> Party {
        match self {
            Behavior::SendIR | Behavior::AcceptI => Party::I,
            Behavior::SendRI | Behavior::AcceptR => Party::R,
        }
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum NodeLabel {
    Atomic(Atom),
    Function(Func),
    Behavior(Behavior),
}

impl NodeLabel {
    /// The full finite vocabulary in a fixed order; row indices of the
    /// embedding table follow this enumeration.
    pub fn vocabulary() -> Vec<NodeLabel> {
        let mut v = Vec::new();
        for p in [Party::I, Party::R, Party::E] {
            v.push(NodeLabel::Atomic(Atom::Id(p)));
            for i in 1..=MAX_FRESH_INDEX {
                v.push(NodeLabel::Atomic(Atom::Esk(p, i)));
            }
            v.push(NodeLabel::Atomic(Atom::Lsk(p)));
            v.push(NodeLabel::Atomic(Atom::Pk(p)));
            v.push(NodeLabel::Atomic(Atom::Timestamp(p)));
        }
        v.push(NodeLabel::Atomic(Atom::PreShared));
        v.push(NodeLabel::Atomic(Atom::SessionKey));
        for f in Func::ALL {
            v.push(NodeLabel::Function(f));
        }
        for b in [
            Behavior::SendIR,
            Behavior::SendRI,
            Behavior::AcceptI,
            Behavior::AcceptR,
        ] {
            v.push(NodeLabel::Behavior(b));
        }
        v
    }
}

/// A node-labeled ordered tree. Behavior labels may only appear at the root
/// of a [`Message`](crate::protocol::Message); [`Term::check`] enforces the
/// arity and key-position invariants for everything below.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Term {
    pub label: NodeLabel,
    pub children: Vec<Term>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TermError {
    #[error("atomic node {0} must not have children")]
    AtomWithChildren(String),
    #[error("{func} requires at least {min} children, got {got}")]
    Arity {
        func: &'static str,
        min: usize,
        got: usize,
    },
    #[error("exp requires exactly 2 children, got {0}")]
    ExpArity(usize),
    #[error("{func} key position must hold {expected}, got {got}")]
    BadKey {
        func: &'static str,
        expected: &'static str,
        got: String,
    },
    #[error("behavior node {0} below a message root")]
    NestedBehavior(String),
    #[error("fresh index {0} outside 1..={MAX_FRESH_INDEX}")]
    FreshIndex(u8),
}

impl Term {
    pub fn atom(a: Atom) -> Term {
        Term {
            label: NodeLabel::Atomic(a),
            children: Vec::new(),
        }
    }

    pub fn func(f: Func, children: Vec<Term>) -> Term {
        Term {
            label: NodeLabel::Function(f),
            children,
        }
    }

    pub fn id(p: Party) -> Term {
        Term::atom(Atom::Id(p))
    }
    pub fn esk(p: Party, i: u8) -> Term {
        Term::atom(Atom::Esk(p, i))
    }
    pub fn lsk(p: Party) -> Term {
        Term::atom(Atom::Lsk(p))
    }
    pub fn pk(p: Party) -> Term {
        Term::atom(Atom::Pk(p))
    }
    pub fn timestamp(p: Party) -> Term {
        Term::atom(Atom::Timestamp(p))
    }
    pub fn pre_shared() -> Term {
        Term::atom(Atom::PreShared)
    }
    pub fn session_key() -> Term {
        Term::atom(Atom::SessionKey)
    }

    pub fn senc(mut payload: Vec<Term>, key: Term) -> Term {
        payload.push(key);
        Term::func(Func::Senc, payload)
    }
    pub fn aenc(mut payload: Vec<Term>, key: Term) -> Term {
        payload.push(key);
        Term::func(Func::Aenc, payload)
    }
    pub fn sign(mut payload: Vec<Term>, key: Term) -> Term {
        payload.push(key);
        Term::func(Func::Sign, payload)
    }
    pub fn hash(payload: Vec<Term>) -> Term {
        Term::func(Func::Hash, payload)
    }
    pub fn exp(base: Term, exponent: Term) -> Term {
        Term::func(Func::Exp, vec![base, exponent])
    }
    pub fn tuple(items: Vec<Term>) -> Term {
        Term::func(Func::Tuple, items)
    }

    pub fn is_atom(&self) -> bool {
        matches!(self.label, NodeLabel::Atomic(_))
    }

    pub fn as_atom(&self) -> Option<&Atom> {
        match &self.label {
            NodeLabel::Atomic(a) => Some(a),
            _ => None,
        }
    }

    pub fn as_func(&self) -> Option<Func> {
        match self.label {
            NodeLabel::Function(f) => Some(f),
            _ => None,
        }
    }

    /// For senc/aenc/sign, splits children into (payload, key).
    pub fn payload_and_key(&self) -> Option<(&[Term], &Term)> {
        match self.label {
            NodeLabel::Function(f) if f.has_key_child() => {
                let (key, payload) = self.children.split_last()?;
                Some((payload, key))
            }
            _ => None,
        }
    }

    /// Total node count of the tree.
    pub fn size(&self) -> usize {
        1 + self.children.iter().map(Term::size).sum::<usize>()
    }

    /// Depth-first preorder iteration over all nodes.
    pub fn iter_nodes(&self) -> impl Iterator<Item = &Term> {
        let mut stack = vec![self];
        std::iter::from_fn(move || {
            let t = stack.pop()?;
            stack.extend(t.children.iter().rev());
            Some(t)
        })
    }

    pub fn contains_atom(&self, a: &Atom) -> bool {
        self.iter_nodes().any(|t| t.as_atom() == Some(a))
    }

    /// Structural validation: arities, key positions, no nested behaviors,
    /// fresh-index bounds. Key positions accept `K` or an ephemeral key for
    /// senc (the insecurity-injecting transformations may substitute a leaked
    /// ephemeral key), a public key for aenc, a static key for sign.
    pub fn check(&self) -> Result<(), TermError> {
        match &self.label {
            NodeLabel::Atomic(a) => {
                if !self.children.is_empty() {
                    return Err(TermError::AtomWithChildren(self.to_string()));
                }
                check_atom(a)
            }
            NodeLabel::Behavior(b) => Err(TermError::NestedBehavior(b.as_str().to_string())),
            NodeLabel::Function(f) => {
                match f {
                    Func::Senc | Func::Aenc | Func::Sign => {
                        if self.children.len() < 2 {
                            return Err(TermError::Arity {
                                func: f.as_str(),
                                min: 2,
                                got: self.children.len(),
                            });
                        }
                        let key = self.children.last().unwrap();
                        let ok = match (f, key.as_atom()) {
                            (Func::Senc, Some(Atom::PreShared)) => true,
                            (Func::Senc, Some(Atom::Esk(..))) => true,
                            (Func::Aenc, Some(Atom::Pk(_))) => true,
                            (Func::Sign, Some(Atom::Lsk(_))) => true,
                            _ => false,
                        };
                        if !ok {
                            return Err(TermError::BadKey {
                                func: f.as_str(),
                                expected: match f {
                                    Func::Senc => "K or an ephemeral key",
                                    Func::Aenc => "a public key",
                                    _ => "a static secret key",
                                },
                                got: key.to_string(),
                            });
                        }
                    }
                    Func::Hash => {
                        if self.children.is_empty() {
                            return Err(TermError::Arity {
                                func: "hash",
                                min: 1,
                                got: 0,
                            });
                        }
                    }
                    Func::Exp => {
                        if self.children.len() != 2 {
                            return Err(TermError::ExpArity(self.children.len()));
                        }
                    }
                    Func::Tuple => {
                        if self.children.len() < 2 {
                            return Err(TermError::Arity {
                                func: "tuple",
                                min: 2,
                                got: self.children.len(),
                            });
                        }
                    }
                }
                for c in &self.children {
                    c.check()?;
                }
                Ok(())
            }
        }
    }
}

fn check_atom(a: &Atom) -> Result<(), TermError> {
    match a {
        Atom::Esk(_, i) => {
            if *i == 0 || *i > MAX_FRESH_INDEX {
                Err(TermError::FreshIndex(*i))
            } else {
                Ok(())
            }
        }
        Atom::Inst(inner, _) => check_atom(inner),
        _ => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

fn write_atom(f: &mut fmt::Formatter<'_>, a: &Atom) -> fmt::Result {
    match a {
        Atom::Id(p) => write!(f, "ID {}", p.as_str()),
        Atom::Esk(p, i) => write!(f, "esk {} {}", p.as_str(), i),
        Atom::Lsk(p) => write!(f, "lsk {}", p.as_str()),
        Atom::Pk(p) => write!(f, "pk {}", p.as_str()),
        Atom::Timestamp(p) => write!(f, "T {}", p.as_str()),
        Atom::PreShared => write!(f, "K"),
        Atom::SessionKey => write!(f, "SK"),
        // Debug-only rendering; the parser does not accept it.
        Atom::Inst(inner, s) => {
            write_atom(f, inner)?;
            write!(f, " @{s}")
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        match &self.label {
            NodeLabel::Atomic(a) => write_atom(f, a)?,
            NodeLabel::Function(func) => write!(f, "{}", func.as_str())?,
            NodeLabel::Behavior(b) => write!(f, "{}", b.as_str())?,
        }
        for c in &self.children {
            write!(f, " {c}")?;
        }
        write!(f, ")")
    }
}

/// Canonical text of a term; inverse of [`parse_term`].
pub fn render_term(t: &Term) -> String {
    t.to_string()
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown symbol `{symbol}` at byte {pos}")]
    UnknownSymbol { pos: usize, symbol: String },
    #[error("invalid term at byte {pos}: {source}")]
    Invalid {
        pos: usize,
        #[source]
        source: TermError,
    },
}

struct Lexer<'a> {
    input: &'a str,
    pos: usize,
}

#[derive(Debug, PartialEq)]
enum Token<'a> {
    Open,
    Close,
    Symbol(&'a str),
}

impl<'a> Lexer<'a> {
    fn new(input: &'a str) -> Self {
        Lexer { input, pos: 0 }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.input.len()
            && self.input.as_bytes()[self.pos].is_ascii_whitespace()
        {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<(usize, Token<'a>)> {
        let saved = self.pos;
        let t = self.next_token();
        self.pos = saved;
        t
    }

    fn next_token(&mut self) -> Option<(usize, Token<'a>)> {
        self.skip_ws();
        if self.pos >= self.input.len() {
            return None;
        }
        let start = self.pos;
        let b = self.input.as_bytes()[self.pos];
        match b {
            b'(' => {
                self.pos += 1;
                Some((start, Token::Open))
            }
            b')' => {
                self.pos += 1;
                Some((start, Token::Close))
            }
            _ => {
                let mut end = self.pos;
                while end < self.input.len() {
                    let c = self.input.as_bytes()[end];
                    if c == b'(' || c == b')' || c.is_ascii_whitespace() {
                        break;
                    }
                    end += 1;
                }
                self.pos = end;
                Some((start, Token::Symbol(&self.input[start..end])))
            }
        }
    }
}

fn expect_party(lex: &mut Lexer, ctx: &str) -> Result<Party, ParseError> {
    match lex.next_token() {
        Some((_, Token::Symbol("I"))) => Ok(Party::I),
        Some((_, Token::Symbol("R"))) => Ok(Party::R),
        Some((_, Token::Symbol("E"))) => Ok(Party::E),
        other => Err(ParseError::Syntax {
            pos: other.map(|(p, _)| p).unwrap_or(lex.pos),
            msg: format!("expected party field (I, R, or E) after `{ctx}`"),
        }),
    }
}

fn expect_index(lex: &mut Lexer, ctx: &str) -> Result<u8, ParseError> {
    match lex.next_token() {
        Some((pos, Token::Symbol(s))) => s.parse::<u8>().map_err(|_| ParseError::Syntax {
            pos,
            msg: format!("expected fresh index after `{ctx}`, got `{s}`"),
        }),
        other => Err(ParseError::Syntax {
            pos: other.map(|(p, _)| p).unwrap_or(lex.pos),
            msg: format!("expected fresh index after `{ctx}`"),
        }),
    }
}

fn parse_node(lex: &mut Lexer) -> Result<Term, ParseError> {
    let (open_pos, tok) = lex.next_token().ok_or(ParseError::Syntax {
        pos: lex.pos,
        msg: "unexpected end of input".into(),
    })?;
    if tok != Token::Open {
        return Err(ParseError::Syntax {
            pos: open_pos,
            msg: "expected `(`".into(),
        });
    }
    let (sym_pos, sym) = match lex.next_token() {
        Some((p, Token::Symbol(s))) => (p, s),
        other => {
            return Err(ParseError::Syntax {
                pos: other.map(|(p, _)| p).unwrap_or(lex.pos),
                msg: "expected symbol after `(`".into(),
            })
        }
    };

    let label = match sym {
        "ID" => NodeLabel::Atomic(Atom::Id(expect_party(lex, sym)?)),
        "esk" => {
            let p = expect_party(lex, sym)?;
            let i = expect_index(lex, sym)?;
            NodeLabel::Atomic(Atom::Esk(p, i))
        }
        "lsk" => NodeLabel::Atomic(Atom::Lsk(expect_party(lex, sym)?)),
        "pk" => NodeLabel::Atomic(Atom::Pk(expect_party(lex, sym)?)),
        "T" => NodeLabel::Atomic(Atom::Timestamp(expect_party(lex, sym)?)),
        "K" => NodeLabel::Atomic(Atom::PreShared),
        "SK" => NodeLabel::Atomic(Atom::SessionKey),
        "senc" => NodeLabel::Function(Func::Senc),
        "aenc" => NodeLabel::Function(Func::Aenc),
        "sign" => NodeLabel::Function(Func::Sign),
        "hash" => NodeLabel::Function(Func::Hash),
        "exp" => NodeLabel::Function(Func::Exp),
        "tuple" => NodeLabel::Function(Func::Tuple),
        "sendIR" => NodeLabel::Behavior(Behavior::SendIR),
        "sendRI" => NodeLabel::Behavior(Behavior::SendRI),
        "acceptI" => NodeLabel::Behavior(Behavior::AcceptI),
        "acceptR" => NodeLabel::Behavior(Behavior::AcceptR),
        _ => {
            return Err(ParseError::UnknownSymbol {
                pos: sym_pos,
                symbol: sym.to_string(),
            })
        }
    };

    let mut children = Vec::new();
    loop {
        match lex.peek() {
            Some((_, Token::Close)) => {
                lex.next_token();
                break;
            }
            Some((_, Token::Open)) => children.push(parse_node(lex)?),
            Some((pos, Token::Symbol(s))) => {
                return Err(ParseError::Syntax {
                    pos,
                    msg: format!("unexpected symbol `{s}`; expected `(` or `)`"),
                })
            }
            None => {
                return Err(ParseError::Syntax {
                    pos: lex.pos,
                    msg: "unexpected end of input, missing `)`".into(),
                })
            }
        }
    }

    Ok(Term { label, children })
}

/// Parses the canonical parenthesized form. The result is validated: arity
/// violations and bad key positions are rejected. Behavior roots are
/// permitted at the top level only.
pub fn parse_term(text: &str) -> Result<Term, ParseError> {
    let mut lex = Lexer::new(text);
    let term = parse_node(&mut lex)?;
    if let Some((pos, _)) = lex.next_token() {
        return Err(ParseError::Syntax {
            pos,
            msg: "trailing input after term".into(),
        });
    }
    let body_check = match term.label {
        NodeLabel::Behavior(_) => term.children.iter().try_for_each(Term::check),
        _ => term.check(),
    };
    body_check.map_err(|source| ParseError::Invalid { pos: 0, source })?;
    Ok(term)
}
