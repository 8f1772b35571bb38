//! Emits protocols as ProVerif scripts. The output follows a fixed template:
//! a preamble declaring the channel, constructors, destructors, and events,
//! one process per role whose send/receive/decrypt/verify lines are generated
//! from the message trees, and a secrecy probe on the accepted session key.
//! Emission is byte-deterministic.

use crate::knowledge::{exp_parts, multiset_difference};
use crate::oracle::{role_script, Step};
use crate::protocol::{Protocol, ProtocolKind};
use crate::term::{Atom, Func, NodeLabel, Party, Term, MAX_FRESH_INDEX};
use std::collections::BTreeMap;
use std::fmt::Write;
use thiserror::Error;

/// Bumped whenever the emitted template changes shape.
pub const TEMPLATE_VERSION: &str = "v1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EmitError {
    #[error("unsupported construct: {0}")]
    UnsupportedConstruct(String),
}

fn party_suffix(p: Party) -> &'static str {
    match p {
        Party::I => "I",
        Party::R => "R",
        Party::E => "E",
    }
}

fn atom_name(a: &Atom) -> Result<String, EmitError> {
    Ok(match a {
        Atom::Id(p) => format!("ID_{}", party_suffix(*p)),
        Atom::Esk(p, i) => format!("esk_{}{}", party_suffix(*p), i),
        Atom::Lsk(p) => format!("lsk_{}", party_suffix(*p)),
        Atom::Pk(p) => format!("pk_{}", party_suffix(*p)),
        Atom::Timestamp(p) => format!("T_{}", party_suffix(*p)),
        Atom::PreShared => "K".into(),
        Atom::SessionKey => "SK".into(),
        Atom::Inst(..) => {
            return Err(EmitError::UnsupportedConstruct(
                "session-instantiated atom".into(),
            ))
        }
    })
}

/// Per-role emission state: which template subterms are bound to script
/// variables and which atoms the role can compute directly.
struct RoleEmitter {
    role: Party,
    bound: BTreeMap<Term, String>,
    lines: Vec<String>,
}

impl RoleEmitter {
    fn new(role: Party, sk_owner: Option<Party>) -> RoleEmitter {
        let mut e = RoleEmitter {
            role,
            bound: BTreeMap::new(),
            lines: Vec::new(),
        };
        // Atoms the role holds at session start map to their own names.
        let mut have = vec![Atom::PreShared, Atom::Lsk(role)];
        for p in [Party::I, Party::R, Party::E] {
            have.push(Atom::Id(p));
            have.push(Atom::Pk(p));
        }
        for p in [Party::I, Party::R] {
            have.push(Atom::Timestamp(p));
        }
        for i in 1..=MAX_FRESH_INDEX {
            have.push(Atom::Esk(role, i));
        }
        if sk_owner == Some(role) {
            have.push(Atom::SessionKey);
        }
        for a in have {
            let name = atom_name(&a).expect("static atom");
            e.bound.insert(Term::atom(a), name);
        }
        e
    }

    /// Renders a term the role can compute. Reconstruction from parts is
    /// preferred (the reference template writes out nested ciphertexts in
    /// verification lines); opaquely bound variables are the fallback.
    fn expr(&self, t: &Term) -> Option<String> {
        match &t.label {
            NodeLabel::Behavior(_) => None,
            NodeLabel::Atomic(_) => self.bound.get(t).cloned(),
            NodeLabel::Function(f) => {
                let parts = t
                    .children
                    .iter()
                    .map(|c| self.expr(c))
                    .collect::<Option<Vec<_>>>();
                if let Some(parts) = parts {
                    return Some(render_func(*f, &parts));
                }
                if *f == Func::Exp {
                    if let Some(e) = self.dh_expr(t) {
                        return Some(e);
                    }
                }
                self.bound.get(t).cloned()
            }
        }
    }

    /// A DH tower whose inner share arrived opaquely is still computable by
    /// re-exponentiating the bound variable with the role's own exponents.
    fn dh_expr(&self, t: &Term) -> Option<String> {
        let (base, exps) = exp_parts(t);
        for (bt, name) in &self.bound {
            if bt.as_func() != Some(Func::Exp) {
                continue;
            }
            let (b2, exps2) = exp_parts(bt);
            if b2 != base {
                continue;
            }
            if let Some(rest) = multiset_difference(&exps, &exps2) {
                let rendered = rest
                    .iter()
                    .map(|e| self.expr(e))
                    .collect::<Option<Vec<_>>>()?;
                let mut acc = name.clone();
                for r in rendered {
                    acc = format!("exp({acc},{r})");
                }
                return Some(acc);
            }
        }
        None
    }

    fn expr_or_err(&self, t: &Term) -> Result<String, EmitError> {
        self.expr(t)
            .ok_or_else(|| EmitError::UnsupportedConstruct(format!("cannot compute {t}")))
    }

    /// Pattern for one received component. Computable parts become `=`
    /// equality patterns; decryptable ciphertexts are bound and opened with
    /// a `let ... = adec/sdec(...) in` line; signatures are bound and
    /// verified once every binding is in scope; everything else is bound
    /// opaquely, as the mN variables of the reference template.
    fn pattern(
        &mut self,
        t: &Term,
        binder: &mut Binder,
        lets: &mut Vec<String>,
        verifs: &mut Vec<Term>,
    ) -> Result<String, EmitError> {
        if let Some(e) = self.expr(t) {
            return Ok(format!("={e}"));
        }
        match &t.label {
            NodeLabel::Atomic(a) => {
                let name = atom_name(a)?;
                self.bound.insert(t.clone(), name.clone());
                Ok(format!("{name}:bitstring"))
            }
            NodeLabel::Function(Func::Tuple) => {
                let mut parts = Vec::new();
                for c in &t.children {
                    parts.push(self.pattern(c, binder, lets, verifs)?);
                }
                Ok(format!("({})", parts.join(",")))
            }
            NodeLabel::Function(f @ (Func::Senc | Func::Aenc)) if self.can_open(t) => {
                let name = binder.fresh();
                self.bound.insert(t.clone(), name.clone());
                let (payload, _) = t.payload_and_key().expect("checked enc");
                let inner = self.payload_pattern(payload, binder, lets, verifs)?;
                let open = match f {
                    Func::Senc => format!("sdec({name},K)"),
                    _ => format!("adec({name},lsk_{})", party_suffix(self.role)),
                };
                lets.push(format!("let {inner} = {open} in"));
                Ok(format!("{name}:bitstring"))
            }
            NodeLabel::Function(Func::Sign) => {
                let name = binder.fresh();
                self.bound.insert(t.clone(), name.clone());
                verifs.push(t.clone());
                Ok(format!("{name}:bitstring"))
            }
            _ => {
                let name = binder.fresh();
                self.bound.insert(t.clone(), name.clone());
                Ok(format!("{name}:bitstring"))
            }
        }
    }

    fn payload_pattern(
        &mut self,
        payload: &[Term],
        binder: &mut Binder,
        lets: &mut Vec<String>,
        verifs: &mut Vec<Term>,
    ) -> Result<String, EmitError> {
        if payload.len() == 1 {
            self.pattern(&payload[0], binder, lets, verifs)
        } else {
            let mut parts = Vec::new();
            for c in payload {
                parts.push(self.pattern(c, binder, lets, verifs)?);
            }
            Ok(format!("({})", parts.join(",")))
        }
    }

    fn can_open(&self, t: &Term) -> bool {
        match (t.as_func(), t.payload_and_key()) {
            (Some(Func::Senc), Some((_, k))) => k.as_atom() == Some(&Atom::PreShared),
            (Some(Func::Aenc), Some((_, k))) => k.as_atom() == Some(&Atom::Pk(self.role)),
            _ => false,
        }
    }

    fn emit_recv(&mut self, elements: &[Term], first_elem: usize) -> Result<(), EmitError> {
        let mut lets = Vec::new();
        let mut verifs = Vec::new();
        let mut pats = Vec::new();
        for (i, e) in elements.iter().enumerate() {
            let mut binder = Binder::new(first_elem + i);
            pats.push(self.pattern(e, &mut binder, &mut lets, &mut verifs)?);
        }
        self.lines.push(format!("in(c, ({}));", pats.join(",")));
        self.lines.extend(lets);
        for s in verifs {
            let (payload, key) = s.payload_and_key().expect("checked sign");
            let signer = match key.as_atom() {
                Some(Atom::Lsk(p)) => *p,
                _ => {
                    return Err(EmitError::UnsupportedConstruct(
                        "signature without a long-term key".into(),
                    ))
                }
            };
            // An unverifiable signature (payload still unknown) stays an
            // opaque binding, like any other undecodable component.
            if let Some(payload_expr) = self.payload_expr(payload) {
                let name = &self.bound[&s];
                self.lines.push(format!(
                    "if verif({name}, {payload_expr},pk_{})=true then",
                    party_suffix(signer)
                ));
            }
        }
        Ok(())
    }

    fn payload_expr(&self, payload: &[Term]) -> Option<String> {
        if payload.len() == 1 {
            self.expr(&payload[0])
        } else {
            let parts = payload
                .iter()
                .map(|c| self.expr(c))
                .collect::<Option<Vec<_>>>()?;
            Some(format!("({})", parts.join(",")))
        }
    }

    fn emit_send(&mut self, elements: &[Term]) -> Result<(), EmitError> {
        let parts = elements
            .iter()
            .map(|e| self.expr_or_err(e))
            .collect::<Result<Vec<_>, _>>()?;
        self.lines.push(format!("out(c,({}));", parts.join(",")));
        Ok(())
    }
}

fn render_func(f: Func, parts: &[String]) -> String {
    match f {
        Func::Tuple => format!("({})", parts.join(",")),
        Func::Hash => {
            if parts.len() == 1 {
                format!("hash({})", parts[0])
            } else {
                format!("hash(({}))", parts.join(","))
            }
        }
        Func::Exp => format!("exp({},{})", parts[0], parts[1]),
        Func::Senc | Func::Aenc | Func::Sign => {
            let (key, payload) = parts.split_last().expect("keyed function");
            let name = match f {
                Func::Senc => "senc",
                Func::Aenc => "aenc",
                _ => "sign",
            };
            if payload.len() == 1 {
                format!("{name}({},{key})", payload[0])
            } else {
                format!("{name}(({}),{key})", payload.join(","))
            }
        }
    }
}

/// Names for opaquely bound receive components: the element's global
/// position for the component itself, with a sub-counter for anything bound
/// while opening it.
struct Binder {
    elem: usize,
    next_sub: usize,
}

impl Binder {
    fn new(elem: usize) -> Binder {
        Binder { elem, next_sub: 0 }
    }
    fn fresh(&mut self) -> String {
        self.next_sub += 1;
        if self.next_sub == 1 {
            format!("m{}", self.elem)
        } else {
            format!("m{}_{}", self.elem, self.next_sub - 1)
        }
    }
}

const PREAMBLE: &str = "\
free c:channel.

free ID_I:bitstring.
free ID_R:bitstring.
free ID_E:bitstring.
free message:bitstring [private].

fun senc(bitstring,bitstring):bitstring.
reduc forall m:bitstring,k:bitstring; sdec(senc(m,k),k) = m.

fun pk(bitstring):bitstring.
fun aenc(bitstring,bitstring):bitstring.
reduc forall m:bitstring,k:bitstring; adec(aenc(m,pk(k)),k) = m.

fun sign(bitstring,bitstring):bitstring.
reduc forall m:bitstring,k:bitstring; getmess(sign(m,k)) = m.
reduc forall m:bitstring,k:bitstring; verif(sign(m,k),m,pk(k)) = true.

fun hash(bitstring):bitstring.
fun exp(bitstring,bitstring):bitstring.
equation forall z:bitstring,x:bitstring,y:bitstring; exp(exp(z,x),y) = exp(exp(z,y),x).

event protocol_start_I(bitstring).
event protocol_start_R(bitstring).
event acceptI(bitstring).
event acceptR(bitstring).

query attacker(message).
";

/// Emits the complete script for one protocol. The pk_I/pk_R/lsk_I/lsk_R
/// names inside the role processes are process parameters supplied by the
/// main process; receive lines bind components exactly as the oracle's
/// matcher consumes them.
pub fn emit_proverif(p: &Protocol) -> Result<String, EmitError> {
    let sk_owner = if p.kind == ProtocolKind::Transport {
        p.session_key_owner()
    } else {
        None
    };

    // Global element counter across all sent messages, in protocol order.
    let mut elem_starts = Vec::new();
    let mut counter = 1usize;
    for m in p.sends() {
        elem_starts.push(counter);
        counter += m.body().len();
    }

    let mut out = String::new();
    writeln!(
        out,
        "(* generated protocol script, template {TEMPLATE_VERSION}, seed {} *)",
        p.seed
    )
    .unwrap();
    out.push_str(PREAMBLE);

    // A role has an accept event either from the protocol or synthesized
    // for accept-less transports; the secrecy probe rides on the initiator
    // when it accepts, otherwise on the responder.
    let probe_role = if role_script(p, Party::I)
        .iter()
        .any(|s| matches!(s, Step::Accept(_)))
    {
        Party::I
    } else {
        Party::R
    };

    for role in [Party::I, Party::R] {
        out.push('\n');
        emit_role(&mut out, p, role, sk_owner, probe_role, &elem_starts)?;
    }

    out.push_str("\nprocess\n");
    out.push_str("  new lsk_I:bitstring;\n");
    out.push_str("  new lsk_R:bitstring;\n");
    out.push_str("  new lsk_E:bitstring;\n");
    out.push_str("  new K:bitstring;\n");
    out.push_str("  let pk_I = pk(lsk_I) in\n");
    out.push_str("  let pk_R = pk(lsk_R) in\n");
    out.push_str("  let pk_E = pk(lsk_E) in\n");
    out.push_str("  out(c, (pk_I, pk_R, pk_E, lsk_E));\n");
    out.push_str("  ((!Initiator(lsk_I, pk_I, pk_R, K)) | (!Responder(lsk_R, pk_R, pk_I, K)))\n");
    Ok(out)
}

fn emit_role(
    out: &mut String,
    p: &Protocol,
    role: Party,
    sk_owner: Option<Party>,
    probe_role: Party,
    elem_starts: &[usize],
) -> Result<(), EmitError> {
    let (title, proc_name, me, peer) = match role {
        Party::I => ("Initiator", "Initiator", "I", "R"),
        _ => ("Responder", "Responder", "R", "I"),
    };
    writeln!(out, "(* {title} *)").unwrap();
    writeln!(
        out,
        "let {proc_name}(lsk_{me}:bitstring, pk_{me}:bitstring, pk_{peer}:bitstring, K:bitstring) ="
    )
    .unwrap();
    writeln!(out, "  event protocol_start_{me}(ID_{peer});").unwrap();
    for i in 1..=MAX_FRESH_INDEX {
        writeln!(out, "  new esk_{me}{i}:bitstring;").unwrap();
    }
    if sk_owner == Some(role) {
        writeln!(out, "  new SK:bitstring;").unwrap();
    }
    writeln!(out, "  new T_{me}:bitstring;").unwrap();
    out.push('\n');
    // Timestamps are exchanged up front so both roles can reference them.
    if role == Party::I {
        writeln!(out, "  out (c, T_I);").unwrap();
        writeln!(out, "  in (c, T_R:bitstring);").unwrap();
    } else {
        writeln!(out, "  in (c, T_I:bitstring);").unwrap();
        writeln!(out, "  out (c, T_R);").unwrap();
    }
    out.push('\n');
    writeln!(out, "  (* AUTOMATIC_{me} *)").unwrap();

    let mut emitter = RoleEmitter::new(role, sk_owner);
    let mut send_idx = 0usize;
    let mut accept_key: Option<String> = None;
    for step in role_script(p, role) {
        match step {
            Step::Send(elements) => {
                emitter.emit_send(&elements)?;
                send_idx += 1;
            }
            Step::Recv(elements) => {
                emitter.emit_recv(&elements, elem_starts[send_idx])?;
                send_idx += 1;
            }
            Step::Accept(body) => {
                let key = emitter.expr_or_err(&body)?;
                emitter
                    .lines
                    .push(format!("event accept{me}({key});"));
                accept_key = Some(key);
            }
        }
    }
    if role == probe_role {
        if let Some(key) = accept_key {
            emitter.lines.push(format!("out(c, senc(message, {key}));"));
        }
    }
    if let Some(last) = emitter.lines.last_mut() {
        *last = format!("{}.", last.trim_end_matches(';'));
    }
    for line in &emitter.lines {
        writeln!(out, "  {line}").unwrap();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::tests::{diffie_hellman, ktm4, needham_schroeder};

    #[test]
    fn ktm4_matches_reference_lines() {
        let s = emit_proverif(&ktm4()).unwrap();
        let expected = [
            "out(c,(esk_I1));",
            "in(c, (=ID_I,=esk_I1,esk_R1:bitstring,m5:bitstring,m6:bitstring));",
            "let (=ID_R,SK:bitstring) = adec(m5,lsk_I) in",
            "if verif(m6, (ID_I,esk_I1,esk_R1,aenc((ID_R,SK),pk_I)),pk_R)=true then",
            "event acceptI(SK);",
            "in(c, (esk_I1:bitstring));",
            "out(c,(ID_I,esk_I1,esk_R1,aenc((ID_R,SK),pk_I),sign((ID_I,esk_I1,esk_R1,aenc((ID_R,SK),pk_I)),lsk_R)));",
            "event acceptR(SK).",
        ];
        for line in expected {
            assert!(s.contains(line), "missing line {line:?} in:\n{s}");
        }
    }

    #[test]
    fn emission_is_deterministic() {
        let p = needham_schroeder();
        assert_eq!(emit_proverif(&p).unwrap(), emit_proverif(&p).unwrap());
    }

    #[test]
    fn header_and_query_present() {
        let s = emit_proverif(&diffie_hellman()).unwrap();
        assert!(s.starts_with("(* generated protocol script, template v1"));
        assert!(s.contains("query attacker(message)."));
        assert!(s.contains("equation forall"));
        assert!(!s.contains('\r'));
    }

    #[test]
    fn establishment_accept_key_rendered() {
        let s = emit_proverif(&needham_schroeder()).unwrap();
        assert!(s.contains("event acceptI(hash((esk_I1,esk_R1)));"));
        assert!(s.contains("event acceptR(hash((esk_I1,esk_R1))).") );
    }

    #[test]
    fn session_instance_rejected() {
        use crate::protocol::{Message, Protocol, ProtocolKind};
        use crate::term::{Atom, Behavior, Term};
        let inst = Term::atom(Atom::Inst(Box::new(Atom::Esk(crate::term::Party::I, 1)), 1));
        let m = Term {
            label: crate::term::NodeLabel::Behavior(Behavior::SendIR),
            children: vec![inst],
        };
        let p = Protocol::new(
            vec![Message::new(m).unwrap()],
            ProtocolKind::Transport,
            0,
        );
        assert!(matches!(
            emit_proverif(&p),
            Err(EmitError::UnsupportedConstruct(_))
        ));
    }
}
