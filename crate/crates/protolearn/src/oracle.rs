//! Session-key confidentiality labeling: a passive eavesdropper check
//! (decomposition closure over all sent messages) and a bounded active
//! attacker search over interleaved sessions where the adversary composes
//! and delivers arbitrary derivable messages, optionally under its own
//! identity `E`.

use crate::knowledge::{dh_normalize, initial_knowledge, public_atoms, KnowledgeSet, Owner};
use crate::protocol::{Protocol, ProtocolKind};
use crate::term::{Atom, Behavior, Func, NodeLabel, Party, Term};
use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashSet, VecDeque};
use std::hash::{Hash, Hasher};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Secure,
    Insecure,
    Unknown,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ProvenanceKind {
    PassiveOracle,
    ActiveSearch(u32),
    ExternalTool,
    Timeout,
}

impl ProvenanceKind {
    pub fn as_string(&self) -> String {
        match self {
            ProvenanceKind::PassiveOracle => "passive_oracle".into(),
            ProvenanceKind::ActiveSearch(b) => format!("active_search({b})"),
            ProvenanceKind::ExternalTool => "external_tool".into(),
            ProvenanceKind::Timeout => "timeout".into(),
        }
    }
}

/// An adversary interaction that can be replayed deterministically.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Action {
    Spawn { role: Party, peer: Party },
    /// Deliver concrete message elements to the session's pending receive.
    Deliver { session: usize, elements: Vec<Term> },
}

/// Evidence for an Insecure verdict; [`replay_witness`] re-derives the key.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Witness {
    /// The key falls out of the passive closure of the sent messages.
    Passive { goal: Term },
    /// An interleaving whose final state lets the adversary derive a key
    /// accepted by an honest session with an honest peer.
    Active { trace: Vec<Action>, goal: Term },
}

#[derive(Clone, PartialEq, Debug)]
pub struct SecurityLabel {
    pub verdict: Verdict,
    pub provenance: ProvenanceKind,
    pub witness: Option<Witness>,
}

impl SecurityLabel {
    fn new(verdict: Verdict, provenance: ProvenanceKind) -> SecurityLabel {
        SecurityLabel {
            verdict,
            provenance,
            witness: None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LabelError {
    #[error("protocol defines no session key")]
    NoSessionKey,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleConfig {
    /// Maximum number of interleaved sessions in the active search.
    pub session_bound: u32,
    /// Maximum node count of adversary-synthesized filler terms.
    pub depth_bound: usize,
    /// Wall-clock cap per protocol.
    pub time_budget: Duration,
    /// Deterministic work cap: maximum states explored before giving up.
    pub max_states: usize,
    /// Candidate pool cap per opaque receive position.
    pub pool_cap: usize,
    /// Cap on delivery combinations enumerated per receive step.
    pub max_combos: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            session_bound: 2,
            depth_bound: 8,
            time_budget: Duration::from_secs(10),
            max_states: 150_000,
            pool_cap: 16,
            max_combos: 256,
        }
    }
}

// ---------------------------------------------------------------------------
// Role scripts
// ---------------------------------------------------------------------------

#[derive(Clone, PartialEq, Eq, Debug)]
pub(crate) enum Step {
    Send(Vec<Term>),
    Recv(Vec<Term>),
    Accept(Term),
}

/// The protocol as seen by one role: own sends, expected receives, and the
/// final accept. Transport protocols without explicit accept events get a
/// synthesized accept of the `SK` atom.
pub(crate) fn role_script(p: &Protocol, role: Party) -> Vec<Step> {
    let mut steps = Vec::new();
    let mut has_accept = false;
    for m in &p.messages {
        match m.behavior() {
            b @ (Behavior::SendIR | Behavior::SendRI) => {
                if b.actor() == role {
                    steps.push(Step::Send(m.body().to_vec()));
                } else {
                    steps.push(Step::Recv(m.body().to_vec()));
                }
            }
            b @ (Behavior::AcceptI | Behavior::AcceptR) => {
                if b.actor() == role {
                    steps.push(Step::Accept(m.body()[0].clone()));
                    has_accept = true;
                }
            }
        }
    }
    if !has_accept {
        if let Some(sk) = p.session_key() {
            steps.push(Step::Accept(sk));
        }
    }
    steps
}

fn protocol_uses_pre_shared_key(p: &Protocol) -> bool {
    p.messages
        .iter()
        .any(|m| m.term().contains_atom(&Atom::PreShared))
}

// ---------------------------------------------------------------------------
// Session instantiation
// ---------------------------------------------------------------------------

/// Rewrites a script term for a concrete session: the role's own fresh
/// values become session instances, and when the intended peer is the
/// adversary identity, the partner's atoms become `E`-atoms.
fn instantiate(t: &Term, role: Party, peer: Party, sid: u32, sk_owner: Option<Party>) -> Term {
    let children = t
        .children
        .iter()
        .map(|c| instantiate(c, role, peer, sid, sk_owner))
        .collect();
    let label = match &t.label {
        NodeLabel::Atomic(a) => NodeLabel::Atomic(instantiate_atom(a, role, peer, sid, sk_owner)),
        other => other.clone(),
    };
    Term { label, children }
}

fn instantiate_atom(a: &Atom, role: Party, peer: Party, sid: u32, sk_owner: Option<Party>) -> Atom {
    let partner = role.partner();
    // Peer substitution first: the session is run against `peer`.
    let a = if peer == Party::E {
        match a {
            Atom::Id(p) if *p == partner => Atom::Id(Party::E),
            Atom::Pk(p) if *p == partner => Atom::Pk(Party::E),
            Atom::Lsk(p) if *p == partner => Atom::Lsk(Party::E),
            Atom::Timestamp(p) if *p == partner => Atom::Timestamp(Party::E),
            Atom::Esk(p, i) if *p == partner => Atom::Esk(Party::E, *i),
            other => other.clone(),
        }
    } else {
        a.clone()
    };
    // Own fresh values are per-session instances.
    match &a {
        Atom::Esk(p, _) if *p == role => Atom::Inst(Box::new(a.clone()), sid),
        Atom::SessionKey if sk_owner == Some(role) => Atom::Inst(Box::new(a.clone()), sid),
        _ => a,
    }
}

/// Whether a session of `role` can a-priori know this atom (publics, own
/// statics, own session instances). Placeholders for peer material are
/// unknown until bound.
fn atom_known(a: &Atom, role: Party, sid: u32) -> bool {
    match a {
        _ if a.is_public() => true,
        Atom::PreShared => true, // honest parties share K
        Atom::Lsk(p) => *p == role,
        Atom::Inst(_, s) => *s == sid,
        _ => false,
    }
}

type Bindings = BTreeMap<Term, Term>;

/// Resolves a template term to its concrete value: bound subterms are
/// substituted whole, known atoms stand for themselves. `None` while any
/// unbound placeholder remains.
fn resolve(t: &Term, bnd: &Bindings, role: Party, sid: u32) -> Option<Term> {
    if let Some(v) = bnd.get(t) {
        return Some(v.clone());
    }
    match &t.label {
        NodeLabel::Atomic(a) => atom_known(a, role, sid).then(|| t.clone()),
        _ => {
            let children = t
                .children
                .iter()
                .map(|c| resolve(c, bnd, role, sid))
                .collect::<Option<Vec<_>>>()?;
            Some(Term {
                label: t.label.clone(),
                children,
            })
        }
    }
}

/// Can this session open the encryption at the root of the template?
fn processable(t: &Term, role: Party, peer: Party) -> bool {
    let _ = peer;
    match t.as_func() {
        Some(Func::Senc) => {
            matches!(t.payload_and_key(), Some((_, k)) if k.as_atom() == Some(&Atom::PreShared))
        }
        Some(Func::Aenc) => {
            matches!(t.payload_and_key(), Some((_, k)) if k.as_atom() == Some(&Atom::Pk(role)))
        }
        // Verification only needs the public key, which everyone holds.
        Some(Func::Sign) => true,
        _ => false,
    }
}

// ---------------------------------------------------------------------------
// Receive matching
// ---------------------------------------------------------------------------

struct MatchCtx<'a> {
    role: Party,
    peer: Party,
    sid: u32,
    adv: &'a KnowledgeSet,
    pool: &'a [Term],
    cap: usize,
}

/// Matches a concrete received value against a template, checking what the
/// receiver can compute and binding the rest opaquely.
fn match_given(t: &Term, v: &Term, bnd: &Bindings, ctx: &MatchCtx) -> Option<Bindings> {
    if let Some(expect) = resolve(t, bnd, ctx.role, ctx.sid) {
        return (dh_normalize(&expect) == dh_normalize(v)).then(|| bnd.clone());
    }
    match t.as_func() {
        Some(f @ (Func::Senc | Func::Aenc | Func::Sign)) if processable(t, ctx.role, ctx.peer) => {
            if v.as_func() != Some(f) || v.children.len() != t.children.len() {
                return None;
            }
            let (t_payload, t_key) = t.payload_and_key()?;
            let (v_payload, v_key) = v.payload_and_key()?;
            if t_key != v_key {
                return None;
            }
            let mut bnd = bnd.clone();
            for (tc, vc) in t_payload.iter().zip(v_payload) {
                bnd = match_given(tc, vc, &bnd, ctx)?;
            }
            Some(bnd)
        }
        Some(Func::Tuple) => {
            if v.as_func() != Some(Func::Tuple) || v.children.len() != t.children.len() {
                return None;
            }
            let mut bnd = bnd.clone();
            for (tc, vc) in t.children.iter().zip(&v.children) {
                bnd = match_given(tc, vc, &bnd, ctx)?;
            }
            Some(bnd)
        }
        // Opaque: bind the whole template subterm to the received value.
        _ => {
            let mut bnd = bnd.clone();
            bnd.insert(t.clone(), v.clone());
            Some(bnd)
        }
    }
}

/// Enumerates concrete values the adversary can deliver for one template
/// position, with the bindings each choice induces. Capped and
/// deterministically ordered.
fn options(t: &Term, bnd: &Bindings, ctx: &MatchCtx) -> Vec<(Term, Bindings)> {
    if let Some(v) = resolve(t, bnd, ctx.role, ctx.sid) {
        return if ctx.adv.derivable(&v) {
            vec![(v, bnd.clone())]
        } else {
            vec![]
        };
    }
    let mut out: Vec<(Term, Bindings)> = Vec::new();
    match t.as_func() {
        Some(f @ (Func::Senc | Func::Aenc | Func::Sign)) if processable(t, ctx.role, ctx.peer) => {
            let (t_payload, t_key) = match t.payload_and_key() {
                Some(x) => x,
                None => return out,
            };
            // (a) the adversary builds the component itself (needs the key)
            if ctx.adv.derivable(t_key) {
                let mut partial: Vec<(Vec<Term>, Bindings)> = vec![(Vec::new(), bnd.clone())];
                for tc in t_payload {
                    let mut next = Vec::new();
                    for (vals, b) in &partial {
                        for (v, b2) in options(tc, b, ctx) {
                            let mut vals = vals.clone();
                            vals.push(v);
                            next.push((vals, b2));
                            if next.len() >= ctx.cap {
                                break;
                            }
                        }
                        if next.len() >= ctx.cap {
                            break;
                        }
                    }
                    partial = next;
                }
                for (vals, b) in partial {
                    let mut children = vals;
                    children.push(t_key.clone());
                    out.push((Term::func(f, children), b));
                }
            }
            // (b) the adversary replays an observed component with the same
            // constructor and key; the receiver decrypts or verifies it.
            for obs in ctx.adv.basis() {
                if obs.as_func() == Some(f) && obs.children.len() == t.children.len() {
                    if let Some((_, obs_key)) = obs.payload_and_key() {
                        if obs_key == t_key {
                            if let Some(b) = match_given(t, obs, bnd, ctx) {
                                out.push((obs.clone(), b));
                            }
                        }
                    }
                }
                if out.len() >= ctx.cap {
                    break;
                }
            }
        }
        Some(Func::Tuple) => {
            let mut partial: Vec<(Vec<Term>, Bindings)> = vec![(Vec::new(), bnd.clone())];
            for tc in &t.children {
                let mut next = Vec::new();
                for (vals, b) in &partial {
                    for (v, b2) in options(tc, b, ctx) {
                        let mut vals = vals.clone();
                        vals.push(v);
                        next.push((vals, b2));
                        if next.len() >= ctx.cap {
                            break;
                        }
                    }
                    if next.len() >= ctx.cap {
                        break;
                    }
                }
                partial = next;
            }
            for (vals, b) in partial {
                out.push((Term::func(Func::Tuple, vals), b));
            }
        }
        // Opaque position: any pool term, bound whole.
        _ => {
            for v in ctx.pool {
                let mut b = bnd.clone();
                b.insert(t.clone(), v.clone());
                out.push((v.clone(), b));
            }
        }
    }
    out.truncate(ctx.cap);
    out
}

/// Constraint class for receive-element ordering; lower matches first.
fn element_class(t: &Term, role: Party, peer: Party) -> u8 {
    match t.as_func() {
        Some(Func::Sign) => 0,
        Some(Func::Senc | Func::Aenc) if processable(t, role, peer) => 1,
        Some(Func::Tuple) => 2,
        _ => match t.as_atom() {
            Some(a) if atom_known(a, role, u32::MAX) || matches!(a, Atom::Inst(..)) => 3,
            _ => 4,
        },
    }
}

/// Filler candidates for opaque positions: adversary-derivable basis terms
/// up to the size bound (smallest first), plus one-step DH extensions with
/// the adversary's own exponent (covers man-in-the-middle key substitution).
fn candidate_pool(adv: &KnowledgeSet, cfg: &OracleConfig) -> Vec<Term> {
    let own_exp = Term::esk(Party::E, 1);
    let mut pool: Vec<Term> = adv
        .basis()
        .iter()
        .filter(|t| t.size() <= cfg.depth_bound)
        .cloned()
        .collect();
    pool.sort_by_key(|t| t.size());
    pool.truncate(cfg.pool_cap);
    let mut dh: Vec<Term> = Vec::new();
    for t in adv.basis() {
        let is_dh_base = t.is_atom() || t.as_func() == Some(Func::Exp);
        if is_dh_base && t.size() < cfg.depth_bound {
            let ext = dh_normalize(&Term::exp(t.clone(), own_exp.clone()));
            if !pool.contains(&ext) {
                dh.push(ext);
            }
        }
        if dh.len() >= cfg.pool_cap / 2 {
            break;
        }
    }
    pool.extend(dh);
    pool
}

// ---------------------------------------------------------------------------
// Search state
// ---------------------------------------------------------------------------

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
struct SessionState {
    role: Party,
    peer: Party,
    sid: u32,
    pc: usize,
    bindings: Bindings,
    stuck: bool,
}

#[derive(Clone, Debug)]
struct SearchState {
    sessions: Vec<SessionState>,
    adv: KnowledgeSet,
    /// Keys accepted so far by sessions whose intended peer is honest.
    accepted: Vec<Term>,
    trace: Vec<Action>,
    /// Set once any delivery happened; spawning earlier never hurts the
    /// adversary, so traces are canonicalized to a spawn prefix.
    delivered: bool,
}

impl SearchState {
    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.sessions.hash(&mut h);
        for t in self.adv.basis() {
            t.hash(&mut h);
        }
        for t in &self.accepted {
            t.hash(&mut h);
        }
        self.delivered.hash(&mut h);
        h.finish()
    }
}

struct Searcher<'a> {
    scripts: BTreeMap<Party, Vec<Step>>,
    sk_owner: Option<Party>,
    uses_k: bool,
    cfg: &'a OracleConfig,
    deadline: Instant,
    states_left: usize,
    seen: HashSet<u64>,
    exhausted: bool,
}

/// Material that makes a compromised accepted key count as an attack: an
/// honest session's fresh value or an honest long-term secret. A key the
/// adversary injected wholesale out of its own material compromises nobody's
/// secret.
fn contains_honest_secret(t: &Term) -> bool {
    t.iter_nodes().any(|n| match n.as_atom() {
        Some(Atom::Inst(..)) => true,
        Some(Atom::Lsk(Party::I | Party::R)) => true,
        Some(Atom::PreShared) => true,
        Some(Atom::SessionKey) => true,
        Some(Atom::Esk(Party::I | Party::R, _)) => true,
        _ => false,
    })
}

impl<'a> Searcher<'a> {
    /// Runs a session forward through its deterministic steps (sends and
    /// accepts) until it needs input or finishes.
    fn advance(&self, st: &mut SearchState, idx: usize) {
        loop {
            let s = &st.sessions[idx];
            if s.stuck {
                return;
            }
            let script = &self.scripts[&s.role];
            if s.pc >= script.len() {
                return;
            }
            match &script[s.pc] {
                Step::Recv(_) => return,
                Step::Send(elements) => {
                    let mut outputs = Vec::new();
                    for e in elements {
                        let templ = instantiate(e, s.role, s.peer, s.sid, self.sk_owner);
                        match resolve(&templ, &s.bindings, s.role, s.sid) {
                            Some(v) => outputs.push(v),
                            None => {
                                st.sessions[idx].stuck = true;
                                return;
                            }
                        }
                    }
                    st.adv = st.adv.absorb_all(&outputs);
                    st.sessions[idx].pc += 1;
                }
                Step::Accept(body) => {
                    let s = &st.sessions[idx];
                    let templ = instantiate(body, s.role, s.peer, s.sid, self.sk_owner);
                    if let Some(key) = resolve(&templ, &s.bindings, s.role, s.sid) {
                        if s.peer != Party::E {
                            st.accepted.push(dh_normalize(&key));
                        }
                    }
                    st.sessions[idx].pc += 1;
                }
            }
        }
    }

    fn attack_key(&self, st: &SearchState) -> Option<Term> {
        st.accepted
            .iter()
            .find(|k| contains_honest_secret(k) && st.adv.derivable(k))
            .cloned()
    }

    /// Breadth-first exploration. Returns a witness trace and compromised
    /// key, or `None` after exhausting the bounded space. Sets `exhausted`
    /// to false when a work or time limit truncated the search.
    fn search(&mut self, initial_adv: KnowledgeSet) -> Option<(Vec<Action>, Term)> {
        self.exhausted = true;
        let root = SearchState {
            sessions: Vec::new(),
            adv: initial_adv,
            accepted: Vec::new(),
            trace: Vec::new(),
            delivered: false,
        };
        let mut queue = VecDeque::new();
        self.seen.insert(root.fingerprint());
        queue.push_back(root);

        while let Some(state) = queue.pop_front() {
            if self.states_left == 0 || Instant::now() >= self.deadline {
                self.exhausted = false;
                return None;
            }
            self.states_left -= 1;

            if let Some(key) = self.attack_key(&state) {
                return Some((state.trace.clone(), key));
            }

            // Spawn actions, restricted to a canonical nondecreasing prefix.
            if !state.delivered && state.sessions.len() < self.cfg.session_bound as usize {
                let floor = state.sessions.last().map(|s| (s.role, s.peer));
                for role in [Party::I, Party::R] {
                    let mut peers = vec![role.partner()];
                    if !self.uses_k {
                        peers.push(Party::E);
                    }
                    for peer in peers {
                        if floor.is_some_and(|f| (role, peer) < f) {
                            continue;
                        }
                        let mut next = state.clone();
                        let sid = next.sessions.len() as u32 + 1;
                        next.sessions.push(SessionState {
                            role,
                            peer,
                            sid,
                            pc: 0,
                            bindings: Bindings::new(),
                            stuck: false,
                        });
                        next.trace.push(Action::Spawn { role, peer });
                        let idx = next.sessions.len() - 1;
                        self.advance(&mut next, idx);
                        self.enqueue(next, &mut queue);
                    }
                }
            }

            // Deliveries to sessions waiting on input.
            for idx in 0..state.sessions.len() {
                let s = &state.sessions[idx];
                if s.stuck {
                    continue;
                }
                let script = &self.scripts[&s.role];
                let templates = match script.get(s.pc) {
                    Some(Step::Recv(elements)) => elements.clone(),
                    _ => continue,
                };
                let pool = candidate_pool(&state.adv, self.cfg);
                let ctx = MatchCtx {
                    role: s.role,
                    peer: s.peer,
                    sid: s.sid,
                    adv: &state.adv,
                    pool: &pool,
                    cap: self.cfg.max_combos,
                };
                let instantiated: Vec<Term> = templates
                    .iter()
                    .map(|e| instantiate(e, s.role, s.peer, s.sid, self.sk_owner))
                    .collect();
                // Most-constrained-first ordering: verifiable components
                // (signatures, then decryptable encryptions) bind unknowns
                // before opaque positions multiply the candidate set.
                let mut order: Vec<usize> = (0..instantiated.len()).collect();
                order.sort_by_key(|&i| element_class(&instantiated[i], s.role, s.peer));
                let mut combos: Vec<(Vec<Term>, Bindings)> =
                    vec![(Vec::new(), s.bindings.clone())];
                for &i in &order {
                    let mut next_combos = Vec::new();
                    for (vals, b) in &combos {
                        for (v, b2) in options(&instantiated[i], b, &ctx) {
                            let mut vals = vals.clone();
                            vals.push(v);
                            next_combos.push((vals, b2));
                            if next_combos.len() >= self.cfg.max_combos {
                                break;
                            }
                        }
                        if next_combos.len() >= self.cfg.max_combos {
                            break;
                        }
                    }
                    combos = next_combos;
                }
                for (vals, bnd) in combos {
                    // undo the constraint ordering before delivery
                    let mut elements = vec![Term::session_key(); vals.len()];
                    for (slot, v) in order.iter().zip(vals) {
                        elements[*slot] = v;
                    }
                    let mut next = state.clone();
                    next.sessions[idx].bindings = bnd;
                    next.sessions[idx].pc += 1;
                    next.delivered = true;
                    next.trace.push(Action::Deliver {
                        session: idx,
                        elements,
                    });
                    self.advance(&mut next, idx);
                    self.enqueue(next, &mut queue);
                }
            }
        }
        None
    }

    fn enqueue(&mut self, st: SearchState, queue: &mut VecDeque<SearchState>) {
        if self.seen.insert(st.fingerprint()) {
            queue.push_back(st);
        }
    }
}

// ---------------------------------------------------------------------------
// Public labeling API
// ---------------------------------------------------------------------------

fn adversary_initial() -> KnowledgeSet {
    initial_knowledge(Owner::Adversary, &public_atoms()).expect("adversary knowledge")
}

/// Eavesdropper check: absorb every sent message body in order; Insecure iff
/// the session key falls out of the closure. Passive safety is necessary,
/// not sufficient, so the safe outcome is Unknown.
pub fn label_passive(p: &Protocol) -> Result<SecurityLabel, LabelError> {
    let sk = p.session_key().ok_or(LabelError::NoSessionKey)?;
    let mut adv = adversary_initial();
    for m in p.sends() {
        adv = adv.absorb_all(m.body());
    }
    if adv.derivable(&sk) {
        Ok(SecurityLabel {
            verdict: Verdict::Insecure,
            provenance: ProvenanceKind::PassiveOracle,
            witness: Some(Witness::Passive { goal: sk }),
        })
    } else {
        Ok(SecurityLabel::new(
            Verdict::Unknown,
            ProvenanceKind::PassiveOracle,
        ))
    }
}

/// Bounded active attacker search. Insecure with a replayable witness when
/// some reachable interleaving lets the adversary derive a key accepted by
/// an honest session that believes it talks to an honest peer; Secure when
/// the bounded space is exhausted without one; Unknown when a budget limit
/// truncates the search.
pub fn label_active(p: &Protocol, cfg: &OracleConfig) -> Result<SecurityLabel, LabelError> {
    // The passive fragment is a sub-case; checking it first also guarantees
    // monotonicity with label_passive at any bound.
    if let passive @ SecurityLabel {
        verdict: Verdict::Insecure,
        ..
    } = label_passive(p)?
    {
        return Ok(passive);
    }

    let mut scripts = BTreeMap::new();
    scripts.insert(Party::I, role_script(p, Party::I));
    scripts.insert(Party::R, role_script(p, Party::R));
    let mut searcher = Searcher {
        scripts,
        sk_owner: if p.kind == ProtocolKind::Transport {
            p.session_key_owner()
        } else {
            None
        },
        uses_k: protocol_uses_pre_shared_key(p),
        cfg,
        deadline: Instant::now() + cfg.time_budget,
        states_left: cfg.max_states,
        seen: HashSet::new(),
        exhausted: true,
    };

    match searcher.search(adversary_initial()) {
        Some((trace, goal)) => Ok(SecurityLabel {
            verdict: Verdict::Insecure,
            provenance: ProvenanceKind::ActiveSearch(cfg.session_bound),
            witness: Some(Witness::Active { trace, goal }),
        }),
        None if searcher.exhausted => Ok(SecurityLabel::new(
            Verdict::Secure,
            ProvenanceKind::ActiveSearch(cfg.session_bound),
        )),
        None => Ok(SecurityLabel::new(Verdict::Unknown, ProvenanceKind::Timeout)),
    }
}

/// Full labeling: cheap passive check first, then the bounded active search.
pub fn label(p: &Protocol, cfg: &OracleConfig) -> Result<SecurityLabel, LabelError> {
    let passive = label_passive(p)?;
    if passive.verdict == Verdict::Insecure {
        return Ok(passive);
    }
    label_active(p, cfg)
}

/// Replays a witness against a fresh oracle state; true iff the trace is
/// executable and re-derives the compromised key.
pub fn replay_witness(p: &Protocol, w: &Witness) -> bool {
    match w {
        Witness::Passive { goal } => {
            let mut adv = adversary_initial();
            for m in p.sends() {
                adv = adv.absorb_all(m.body());
            }
            adv.derivable(goal)
        }
        Witness::Active { trace, goal } => replay_active(p, trace, goal),
    }
}

fn replay_active(p: &Protocol, trace: &[Action], goal: &Term) -> bool {
    let cfg = OracleConfig::default();
    let mut scripts = BTreeMap::new();
    scripts.insert(Party::I, role_script(p, Party::I));
    scripts.insert(Party::R, role_script(p, Party::R));
    let searcher = Searcher {
        scripts,
        sk_owner: if p.kind == ProtocolKind::Transport {
            p.session_key_owner()
        } else {
            None
        },
        uses_k: protocol_uses_pre_shared_key(p),
        cfg: &cfg,
        deadline: Instant::now() + Duration::from_secs(60),
        states_left: usize::MAX,
        seen: HashSet::new(),
        exhausted: true,
    };
    let mut st = SearchState {
        sessions: Vec::new(),
        adv: adversary_initial(),
        accepted: Vec::new(),
        trace: Vec::new(),
        delivered: false,
    };
    for action in trace {
        match action {
            Action::Spawn { role, peer } => {
                let sid = st.sessions.len() as u32 + 1;
                st.sessions.push(SessionState {
                    role: *role,
                    peer: *peer,
                    sid,
                    pc: 0,
                    bindings: Bindings::new(),
                    stuck: false,
                });
                let idx = st.sessions.len() - 1;
                searcher.advance(&mut st, idx);
            }
            Action::Deliver { session, elements } => {
                let s = match st.sessions.get(*session) {
                    Some(s) if !s.stuck => s.clone(),
                    _ => return false,
                };
                let script = &searcher.scripts[&s.role];
                let templates = match script.get(s.pc) {
                    Some(Step::Recv(t)) => t.clone(),
                    _ => return false,
                };
                if templates.len() != elements.len() {
                    return false;
                }
                let pool: Vec<Term> = Vec::new();
                let ctx = MatchCtx {
                    role: s.role,
                    peer: s.peer,
                    sid: s.sid,
                    adv: &st.adv,
                    pool: &pool,
                    cap: cfg.max_combos,
                };
                let mut bnd = s.bindings.clone();
                for (t, v) in templates.iter().zip(elements) {
                    // the adversary must be able to produce the element...
                    if !st.adv.derivable(v) {
                        return false;
                    }
                    // ...and the receiver must accept it
                    let templ = instantiate(t, s.role, s.peer, s.sid, searcher.sk_owner);
                    bnd = match match_given(&templ, v, &bnd, &ctx) {
                        Some(b) => b,
                        None => return false,
                    };
                }
                st.sessions[*session].bindings = bnd;
                st.sessions[*session].pc += 1;
                searcher.advance(&mut st, *session);
            }
        }
    }
    st.accepted
        .iter()
        .any(|k| k == &dh_normalize(goal) && contains_honest_secret(k))
        && st.adv.derivable(goal)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::protocol::{validate_protocol, Message, Protocol, ProtocolKind};
    use crate::term::parse_term;

    fn msg(text: &str) -> Message {
        Message::new(parse_term(text).unwrap()).unwrap()
    }

    fn proto(kind: ProtocolKind, texts: &[&str]) -> Protocol {
        let p = Protocol::new(texts.iter().map(|t| msg(t)).collect(), kind, 0);
        assert!(validate_protocol(&p).is_empty(), "test protocol invalid");
        p
    }

    pub(crate) fn ktm4() -> Protocol {
        let a = "(aenc (tuple (ID R) (SK)) (pk I))";
        let m2 = format!(
            "(sendRI (ID I) (esk I 1) (esk R 1) {a} (sign (tuple (ID I) (esk I 1) (esk R 1) {a}) (lsk R)))"
        );
        proto(
            ProtocolKind::Transport,
            &[
                "(sendIR (esk I 1))",
                &m2,
                "(acceptI (SK))",
                "(acceptR (SK))",
            ],
        )
    }

    pub(crate) fn needham_schroeder() -> Protocol {
        proto(
            ProtocolKind::Establishment,
            &[
                "(sendIR (aenc (tuple (esk I 1) (ID I)) (pk R)))",
                "(sendRI (aenc (tuple (esk I 1) (esk R 1)) (pk I)))",
                "(sendIR (aenc (esk R 1) (pk R)))",
                "(acceptI (hash (esk I 1) (esk R 1)))",
                "(acceptR (hash (esk I 1) (esk R 1)))",
            ],
        )
    }

    pub(crate) fn diffie_hellman() -> Protocol {
        proto(
            ProtocolKind::Establishment,
            &[
                "(sendIR (exp (T I) (esk I 1)))",
                "(sendRI (exp (T I) (esk R 1)))",
                "(acceptI (exp (exp (T I) (esk I 1)) (esk R 1)))",
                "(acceptR (exp (exp (T I) (esk I 1)) (esk R 1)))",
            ],
        )
    }

    #[test]
    fn cleartext_sk_is_passively_insecure() {
        let p = proto(
            ProtocolKind::Transport,
            &["(sendIR (SK))", "(acceptI (SK))", "(acceptR (SK))"],
        );
        let l = label_passive(&p).unwrap();
        assert_eq!(l.verdict, Verdict::Insecure);
        assert_eq!(l.provenance, ProvenanceKind::PassiveOracle);
        assert!(replay_witness(&p, l.witness.as_ref().unwrap()));
    }

    #[test]
    fn ktm4_passively_safe() {
        let l = label_passive(&ktm4()).unwrap();
        assert_eq!(l.verdict, Verdict::Unknown);
    }

    #[test]
    fn ktm4_leak_variant_passively_insecure() {
        // leak-style manipulation: trailing SK on message 2
        let mut p = ktm4();
        let mut root = p.messages[1].term().clone();
        root.children.push(Term::session_key());
        p.messages[1] = Message::new(root).unwrap();
        let l = label_passive(&p).unwrap();
        assert_eq!(l.verdict, Verdict::Insecure);
    }

    #[test]
    fn ktm4_active_secure_at_bound_2() {
        let l = label_active(&ktm4(), &OracleConfig::default()).unwrap();
        assert_eq!(l.verdict, Verdict::Secure, "{:?}", l.provenance);
        assert_eq!(l.provenance, ProvenanceKind::ActiveSearch(2));
    }

    #[test]
    fn needham_schroeder_lowe_attack_found() {
        let p = needham_schroeder();
        assert_eq!(label_passive(&p).unwrap().verdict, Verdict::Unknown);
        let l = label_active(&p, &OracleConfig::default()).unwrap();
        assert_eq!(l.verdict, Verdict::Insecure);
        assert!(replay_witness(&p, l.witness.as_ref().unwrap()));
    }

    #[test]
    fn diffie_hellman_mitm_found() {
        let p = diffie_hellman();
        assert_eq!(label_passive(&p).unwrap().verdict, Verdict::Unknown);
        let l = label_active(&p, &OracleConfig::default()).unwrap();
        assert_eq!(l.verdict, Verdict::Insecure);
        assert!(replay_witness(&p, l.witness.as_ref().unwrap()));
    }

    #[test]
    fn no_session_key_error() {
        let p = proto(ProtocolKind::Transport, &["(sendIR (esk I 1))"]);
        assert_eq!(label_passive(&p), Err(LabelError::NoSessionKey));
    }

    #[test]
    fn label_prefers_passive_provenance() {
        let p = proto(
            ProtocolKind::Transport,
            &["(sendIR (SK))", "(acceptI (SK))", "(acceptR (SK))"],
        );
        let l = label(&p, &OracleConfig::default()).unwrap();
        assert_eq!(l.provenance, ProvenanceKind::PassiveOracle);
    }

    #[test]
    fn encrypted_sk_secure() {
        let p = proto(
            ProtocolKind::Transport,
            &[
                "(sendIR (senc (SK) (K)))",
                "(acceptI (SK))",
                "(acceptR (SK))",
            ],
        );
        let l = label(&p, &OracleConfig::default()).unwrap();
        assert_eq!(l.verdict, Verdict::Secure);
    }
}
