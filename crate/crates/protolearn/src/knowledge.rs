//! Dolev-Yao knowledge sets: initialization, decomposition closure after
//! observing messages, and composition (derivability) queries. Term equality
//! throughout this module is structural modulo [`dh_normalize`].

use crate::term::{Atom, Func, NodeLabel, Party, Term};
use std::collections::{BTreeSet, HashMap};
use thiserror::Error;

/// Principals that hold a knowledge set.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum Owner {
    Party(Party),
    Adversary,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KnowledgeError {
    #[error("unknown owner: the adversary identity E is not a protocol party")]
    UnknownOwner,
}

/// Public atoms known to everyone: identities, public keys, and timestamps
/// of all principals including the adversary identity.
pub fn public_atoms() -> Vec<Term> {
    let mut v = Vec::new();
    for p in [Party::I, Party::R, Party::E] {
        v.push(Term::id(p));
        v.push(Term::pk(p));
        v.push(Term::timestamp(p));
    }
    v
}

/// Rewrites nested exponentials into a canonical form: the multiset of
/// exponents of an `exp` tower is sorted by the structural total order, so
/// `exp(exp(g;a);b)` and `exp(exp(g;b);a)` normalize identically. Applied
/// recursively; idempotent.
pub fn dh_normalize(t: &Term) -> Term {
    let children: Vec<Term> = t.children.iter().map(dh_normalize).collect();
    let t = Term {
        label: t.label.clone(),
        children,
    };
    if t.as_func() == Some(Func::Exp) && t.children.len() == 2 {
        let (base, mut exponents) = flatten_exp(&t);
        exponents.sort();
        rebuild_exp(base, exponents)
    } else {
        t
    }
}

/// Splits a (normalized-children) exp tower into its non-exp base and the
/// list of exponents, innermost first.
pub fn exp_parts(t: &Term) -> (Term, Vec<Term>) {
    flatten_exp(t)
}

fn flatten_exp(t: &Term) -> (Term, Vec<Term>) {
    if t.as_func() == Some(Func::Exp) && t.children.len() == 2 {
        let (base, mut exps) = flatten_exp(&t.children[0]);
        exps.push(t.children[1].clone());
        (base, exps)
    } else {
        (t.clone(), Vec::new())
    }
}

fn rebuild_exp(base: Term, exponents: Vec<Term>) -> Term {
    exponents
        .into_iter()
        .fold(base, |acc, e| Term::exp(acc, e))
}

/// A closure-maintained set of terms a principal can derive. Immutable after
/// construction; [`KnowledgeSet::absorb`] returns a new set.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct KnowledgeSet {
    owner: Owner,
    basis: BTreeSet<Term>,
}

/// Initial knowledge per Alg. 1: party `P` holds the public atoms plus
/// `esk_P*`, `lsk_P`, and `K`; the adversary holds the public atoms plus its
/// own `esk_E*` and `lsk_E` but not `K`.
pub fn initial_knowledge(owner: Owner, publics: &[Term]) -> Result<KnowledgeSet, KnowledgeError> {
    let mut basis: BTreeSet<Term> = publics.iter().map(dh_normalize).collect();
    match owner {
        Owner::Party(p @ (Party::I | Party::R)) => {
            for i in 1..=crate::term::MAX_FRESH_INDEX {
                basis.insert(Term::esk(p, i));
            }
            basis.insert(Term::lsk(p));
            basis.insert(Term::pre_shared());
        }
        Owner::Party(Party::E) => return Err(KnowledgeError::UnknownOwner),
        Owner::Adversary => {
            for i in 1..=crate::term::MAX_FRESH_INDEX {
                basis.insert(Term::esk(Party::E, i));
            }
            basis.insert(Term::lsk(Party::E));
        }
    }
    let mut k = KnowledgeSet { owner, basis };
    k.saturate();
    Ok(k)
}

impl KnowledgeSet {
    pub fn owner(&self) -> Owner {
        self.owner
    }

    pub fn basis(&self) -> &BTreeSet<Term> {
        &self.basis
    }

    /// Constructs a set directly from a basis (used by tests and the attack
    /// search); the decomposition closure is computed immediately.
    pub fn from_basis(owner: Owner, terms: impl IntoIterator<Item = Term>) -> KnowledgeSet {
        let basis = terms.into_iter().map(|t| dh_normalize(&t)).collect();
        let mut k = KnowledgeSet { owner, basis };
        k.saturate();
        k
    }

    pub fn contains(&self, t: &Term) -> bool {
        self.basis.contains(&dh_normalize(t))
    }

    /// Adds an observed term and returns the decomposition closure.
    /// Idempotent and monotone.
    pub fn absorb(&self, t: &Term) -> KnowledgeSet {
        let mut next = self.clone();
        next.basis.insert(dh_normalize(t));
        next.saturate();
        next
    }

    pub fn absorb_all<'a>(&self, terms: impl IntoIterator<Item = &'a Term>) -> KnowledgeSet {
        let mut next = self.clone();
        for t in terms {
            next.basis.insert(dh_normalize(t));
        }
        next.saturate();
        next
    }

    /// Decomposition closure by fixpoint iteration. Terms only ever shrink
    /// under decomposition, so this terminates.
    fn saturate(&mut self) {
        loop {
            let mut new_terms: Vec<Term> = Vec::new();
            for t in &self.basis {
                match t.as_func() {
                    Some(Func::Tuple) => {
                        for c in &t.children {
                            if !self.basis.contains(c) {
                                new_terms.push(c.clone());
                            }
                        }
                    }
                    // Signatures do not hide their content.
                    Some(Func::Sign) => {
                        let (payload, _) = t.payload_and_key().unwrap();
                        for c in payload {
                            if !self.basis.contains(c) {
                                new_terms.push(c.clone());
                            }
                        }
                    }
                    Some(Func::Senc) => {
                        let (payload, key) = t.payload_and_key().unwrap();
                        if self.basis.contains(key) {
                            for c in payload {
                                if !self.basis.contains(c) {
                                    new_terms.push(c.clone());
                                }
                            }
                        }
                    }
                    Some(Func::Aenc) => {
                        let (payload, key) = t.payload_and_key().unwrap();
                        if let Some(Atom::Pk(p)) = key.as_atom() {
                            if self.basis.contains(&Term::lsk(*p)) {
                                for c in payload {
                                    if !self.basis.contains(c) {
                                        new_terms.push(c.clone());
                                    }
                                }
                            }
                        }
                    }
                    // hash and exp are not invertible
                    _ => {}
                }
            }
            if new_terms.is_empty() {
                break;
            }
            self.basis.extend(new_terms);
        }
    }

    /// Composition closure membership: `t` is derivable iff it is in the
    /// basis or can be built by applying constructors to derivable arguments
    /// (key arguments included). Exponentials are checked modulo DH
    /// commutativity: an observed partial tower can be extended by derivable
    /// exponents.
    pub fn derivable(&self, t: &Term) -> bool {
        let goal = dh_normalize(t);
        let mut memo = HashMap::new();
        self.derive(&goal, &mut memo)
    }

    fn derive(&self, t: &Term, memo: &mut HashMap<Term, bool>) -> bool {
        if self.basis.contains(t) {
            return true;
        }
        if let Some(&r) = memo.get(t) {
            return r;
        }
        let result = match &t.label {
            NodeLabel::Atomic(_) => false,
            NodeLabel::Behavior(_) => false,
            NodeLabel::Function(Func::Exp) => {
                let (base, exponents) = exp_parts(t);
                // Build the whole tower from scratch...
                let from_scratch = self.derive(&base, memo)
                    && exponents.iter().all(|e| self.derive(e, memo));
                from_scratch || {
                    // ...or extend an observed partial tower over the same
                    // base by the remaining (derivable) exponents.
                    self.basis.iter().any(|obs| {
                        if obs.as_func() != Some(Func::Exp) {
                            return false;
                        }
                        let (obs_base, obs_exps) = exp_parts(obs);
                        if obs_base != base {
                            return false;
                        }
                        match multiset_difference(&exponents, &obs_exps) {
                            Some(rest) if !rest.is_empty() => {
                                rest.iter().all(|e| self.derive(e, memo))
                            }
                            _ => false,
                        }
                    })
                }
            }
            NodeLabel::Function(_) => t.children.iter().all(|c| self.derive(c, memo)),
        };
        memo.insert(t.clone(), result);
        result
    }
}

/// `big \ small` as multisets over sorted-comparable terms; `None` if `small`
/// is not contained in `big`.
pub(crate) fn multiset_difference(big: &[Term], small: &[Term]) -> Option<Vec<Term>> {
    let mut rest: Vec<Term> = big.to_vec();
    for s in small {
        let idx = rest.iter().position(|x| x == s)?;
        rest.remove(idx);
    }
    Some(rest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::term::MAX_FRESH_INDEX;

    fn party_set(p: Party) -> KnowledgeSet {
        initial_knowledge(Owner::Party(p), &public_atoms()).unwrap()
    }

    fn adversary_set() -> KnowledgeSet {
        initial_knowledge(Owner::Adversary, &public_atoms()).unwrap()
    }

    #[test]
    fn initial_knowledge_contents() {
        let ki = party_set(Party::I);
        assert!(ki.contains(&Term::lsk(Party::I)));
        assert!(!ki.contains(&Term::lsk(Party::R)));
        assert!(ki.contains(&Term::pre_shared()));

        let ka = adversary_set();
        assert!(!ka.contains(&Term::pre_shared()));
        assert!(ka.contains(&Term::lsk(Party::E)));

        // AN_Pub ∪ {K} is shared by the honest parties.
        let kr = party_set(Party::R);
        for t in public_atoms() {
            assert!(ki.contains(&t) && kr.contains(&t));
        }
        assert!(kr.contains(&Term::pre_shared()));
    }

    #[test]
    fn unknown_owner_rejected() {
        assert_eq!(
            initial_knowledge(Owner::Party(Party::E), &public_atoms()),
            Err(KnowledgeError::UnknownOwner)
        );
    }

    #[test]
    fn absorb_decrypts_with_known_key() {
        let k = KnowledgeSet::from_basis(Owner::Adversary, vec![Term::pre_shared()]);
        let ct = Term::senc(vec![Term::esk(Party::I, 1)], Term::pre_shared());
        let k = k.absorb(&ct);
        assert!(k.contains(&Term::esk(Party::I, 1)));
    }

    #[test]
    fn hash_is_not_inverted() {
        let k = KnowledgeSet::from_basis(Owner::Adversary, vec![]);
        let h = Term::hash(vec![Term::esk(Party::I, 1)]);
        let k = k.absorb(&h);
        assert!(k.contains(&h));
        assert!(!k.contains(&Term::esk(Party::I, 1)));
        assert!(!k.derivable(&Term::esk(Party::I, 1)));
    }

    #[test]
    fn absorb_aenc_with_own_lsk() {
        // mirrors `let (=ID_R,SK) = adec(m5,lsk_I)`
        let k = KnowledgeSet::from_basis(Owner::Party(Party::I), vec![Term::lsk(Party::I)]);
        let ct = Term::aenc(
            vec![Term::tuple(vec![Term::id(Party::R), Term::session_key()])],
            Term::pk(Party::I),
        );
        let k = k.absorb(&ct);
        assert!(k.contains(&Term::session_key()));
    }

    #[test]
    fn signatures_reveal_payload() {
        let k = KnowledgeSet::from_basis(Owner::Adversary, vec![]);
        let s = Term::sign(vec![Term::esk(Party::R, 1)], Term::lsk(Party::R));
        let k = k.absorb(&s);
        assert!(k.contains(&Term::esk(Party::R, 1)));
        // but the signing key itself is not revealed
        assert!(!k.derivable(&Term::lsk(Party::R)));
    }

    #[test]
    fn derivable_by_composition() {
        let k = KnowledgeSet::from_basis(
            Owner::Party(Party::I),
            vec![Term::esk(Party::I, 1), Term::pk(Party::R)],
        );
        assert!(k.derivable(&Term::aenc(
            vec![Term::esk(Party::I, 1)],
            Term::pk(Party::R)
        )));
        assert!(!k.derivable(&Term::senc(
            vec![Term::esk(Party::I, 1)],
            Term::pre_shared()
        )));
    }

    #[test]
    fn adversary_never_derives_k() {
        let k = adversary_set();
        assert!(!k.derivable(&Term::pre_shared()));
    }

    #[test]
    fn dh_commutativity() {
        let a = Term::exp(
            Term::exp(Term::timestamp(Party::I), Term::esk(Party::I, 1)),
            Term::esk(Party::R, 1),
        );
        let b = Term::exp(
            Term::exp(Term::timestamp(Party::I), Term::esk(Party::R, 1)),
            Term::esk(Party::I, 1),
        );
        assert_eq!(dh_normalize(&a), dh_normalize(&b));

        let single = Term::exp(Term::timestamp(Party::I), Term::esk(Party::I, 1));
        assert_eq!(dh_normalize(&single), single);
    }

    #[test]
    fn dh_tower_extension() {
        // adversary saw g^a and knows e; derives (g^a)^e == (g^e)^a
        let g_a = Term::exp(Term::timestamp(Party::I), Term::esk(Party::I, 1));
        let k = KnowledgeSet::from_basis(Owner::Adversary, vec![g_a.clone(), Term::esk(Party::E, 1)]);
        let shared = Term::exp(
            Term::exp(Term::timestamp(Party::I), Term::esk(Party::E, 1)),
            Term::esk(Party::I, 1),
        );
        assert!(k.derivable(&shared));
        // but not a tower with an unknown exponent
        let secret = Term::exp(g_a.clone(), Term::esk(Party::R, 1));
        assert!(!k.derivable(&secret));
    }

    #[test]
    fn absorb_is_closure_operator() {
        let k0 = adversary_set();
        let t = Term::senc(
            vec![Term::tuple(vec![Term::esk(Party::I, 1), Term::id(Party::I)])],
            Term::pre_shared(),
        );
        let k1 = k0.absorb(&t);
        // extensive
        assert!(k1.basis().is_superset(k0.basis()));
        // idempotent
        let k2 = k1.absorb(&t);
        assert_eq!(k1, k2);
        // monotone
        let bigger = k0.absorb(&Term::pre_shared()).absorb(&t);
        assert!(bigger.basis().is_superset(k1.basis()));
        assert!(bigger.contains(&Term::esk(Party::I, 1)));
    }

    #[test]
    fn basis_elements_are_derivable() {
        let k = party_set(Party::R);
        for t in k.basis() {
            assert!(k.derivable(t), "basis element not derivable: {t}");
        }
        let _ = MAX_FRESH_INDEX;
    }
}
