//! Fixed-length-vector baselines. Two conversions flatten a protocol into a
//! vector whose width depends only on the vocabulary, discarding nesting
//! structure, and a small MLP is trained on the result with the same loss
//! and optimizer as the tree model. The point of the exercise is the
//! collision weakness: structurally different protocols can map to the same
//! vector.

use crate::model::{train_loop, BoundParams, Metrics, Model, ModelConfig, Params, TrainError, TrainResult};
use crate::oracle::Verdict;
use crate::protocol::Protocol;
use crate::tensor::{glorot, Tape, Tensor, Var};
use crate::term::{NodeLabel, Term};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Message slots in the TLM-like conversion: up to five sends plus the two
/// accept events. Later messages fold into the last slot rather than being
/// dropped.
const TLM_SLOTS: usize = 7;

#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Per-message-slot symbol multiplicities.
    Tlm,
    /// Global symbol histogram with message-count and depth statistics.
    Counts,
}

impl Scheme {
    pub fn width(self) -> usize {
        let v = NodeLabel::vocabulary().len();
        match self {
            Scheme::Tlm => TLM_SLOTS * v,
            Scheme::Counts => v + 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedVector {
    pub values: Vec<f64>,
    pub scheme: Scheme,
}

fn count_labels(t: &Term, into: &mut [f64], vocab: &[NodeLabel]) {
    let idx = vocab.iter().position(|l| l == &t.label).expect("label in vocabulary");
    into[idx] += 1.0;
    for c in &t.children {
        count_labels(c, into, vocab);
    }
}

fn depth(t: &Term) -> usize {
    1 + t.children.iter().map(depth).max().unwrap_or(0)
}

/// Per message slot, the multiplicity of every vocabulary symbol in that
/// message tree. Nesting order is discarded, which is exactly the weakness
/// this baseline demonstrates: sign(aenc(ID_I, SK)) and aenc(sign(ID_I, SK))
/// land on the same coordinates.
pub fn convert_tlm(p: &Protocol) -> FixedVector {
    let vocab = NodeLabel::vocabulary();
    let v = vocab.len();
    let mut values = vec![0.0; TLM_SLOTS * v];
    for (i, m) in p.messages.iter().enumerate() {
        let slot = i.min(TLM_SLOTS - 1);
        count_labels(m.term(), &mut values[slot * v..(slot + 1) * v], &vocab);
    }
    FixedVector {
        values,
        scheme: Scheme::Tlm,
    }
}

/// Global symbol histogram plus message count, maximum tree depth, and mean
/// tree depth. Permutation-invariant over messages, so strictly weaker than
/// the per-slot conversion.
pub fn convert_counts(p: &Protocol) -> FixedVector {
    let vocab = NodeLabel::vocabulary();
    let mut values = vec![0.0; vocab.len() + 3];
    let mut max_depth = 0usize;
    let mut depth_sum = 0usize;
    for m in &p.messages {
        count_labels(m.term(), &mut values[..vocab.len()], &vocab);
        let d = depth(m.term());
        max_depth = max_depth.max(d);
        depth_sum += d;
    }
    let n = vocab.len();
    values[n] = p.messages.len() as f64;
    values[n + 1] = max_depth as f64;
    values[n + 2] = if p.messages.is_empty() {
        0.0
    } else {
        depth_sum as f64 / p.messages.len() as f64
    };
    FixedVector {
        values,
        scheme: Scheme::Counts,
    }
}

pub fn convert(p: &Protocol, scheme: Scheme) -> FixedVector {
    match scheme {
        Scheme::Tlm => convert_tlm(p),
        Scheme::Counts => convert_counts(p),
    }
}

/// A V -> 128 -> 128 -> 2 network with Glorot hidden layers, zero biases,
/// and a zero final layer so the untrained output is exactly uniform.
pub fn mlp_model(cfg: ModelConfig, input_width: usize) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.hidden;
    let entries = vec![
        ("mlp_W1".to_string(), glorot(n, input_width, &mut rng)),
        ("mlp_b1".to_string(), Tensor::zeros(vec![n])),
        ("mlp_W2".to_string(), glorot(n, n, &mut rng)),
        ("mlp_b2".to_string(), Tensor::zeros(vec![n])),
        ("mlp_W3".to_string(), Tensor::zeros(vec![2, n])),
        ("mlp_b3".to_string(), Tensor::zeros(vec![2])),
    ];
    Model {
        cfg,
        params: Params { entries },
        steps_trained: 0,
    }
}

pub fn mlp_logits(tape: &mut Tape, p: &BoundParams, input: &[f64]) -> Var {
    let x = tape.leaf(Tensor::vector(input.to_vec()));
    let a1 = tape.matvec(p.var("mlp_W1"), x);
    let b1 = p.var("mlp_b1");
    let z1 = tape.add(a1, b1);
    let h1 = tape.tanh(z1);
    let a2 = tape.matvec(p.var("mlp_W2"), h1);
    let b2 = p.var("mlp_b2");
    let z2 = tape.add(a2, b2);
    let h2 = tape.tanh(z2);
    let a3 = tape.matvec(p.var("mlp_W3"), h2);
    let b3 = p.var("mlp_b3");
    tape.add(a3, b3)
}

pub fn classify_mlp(model: &Model, input: &[f64]) -> [f64; 2] {
    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, model);
    let l = mlp_logits(&mut tape, &p, input);
    let probs = tape.softmax(l);
    let v = tape.value(probs);
    [v.data[0], v.data[1]]
}

/// Trains the baseline MLP on converted protocols, sharing the optimizer
/// and batching with the tree model.
pub fn train_mlp(
    dataset: &[(Protocol, Verdict)],
    scheme: Scheme,
    cfg: ModelConfig,
) -> Result<TrainResult, TrainError> {
    let examples: Vec<(Vec<f64>, usize)> = dataset
        .iter()
        .map(|(p, v)| (convert(p, scheme).values, crate::model::class_of(*v)))
        .collect();
    let model = mlp_model(cfg, scheme.width());
    train_loop(model, &examples, |tape, p, x: &Vec<f64>| {
        mlp_logits(tape, p, x)
    })
}

pub fn evaluate_mlp(model: &Model, scheme: Scheme, dataset: &[(Protocol, Verdict)]) -> Metrics {
    let mut confusion = [[0usize; 2]; 2];
    let mut timings = Vec::with_capacity(dataset.len());
    for (p, v) in dataset {
        let start = std::time::Instant::now();
        let probs = classify_mlp(model, &convert(p, scheme).values);
        let dt = start.elapsed().as_secs_f64();
        let pred = if probs[1] > probs[0] { 1 } else { 0 };
        confusion[crate::model::class_of(*v)][pred] += 1;
        timings.push((p.size(), dt));
    }
    let correct = confusion[0][0] + confusion[1][1];
    Metrics {
        accuracy: correct as f64 / dataset.len().max(1) as f64,
        confusion,
        timings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{generate_protocol, GenConfig};
    use crate::protocol::{Message, Protocol, ProtocolKind};
    use crate::term::parse_term;

    fn proto(texts: &[&str]) -> Protocol {
        Protocol::new(
            texts
                .iter()
                .map(|t| Message::new(parse_term(t).unwrap()).unwrap())
                .collect(),
            ProtocolKind::Transport,
            0,
        )
    }

    #[test]
    fn tlm_collides_on_swapped_nesting() {
        let a = proto(&["(sendIR (sign (aenc (ID I) (SK) (pk R)) (lsk I)))"]);
        let b = proto(&["(sendIR (aenc (sign (ID I) (SK) (lsk I)) (pk R)))"]);
        assert_ne!(a, b);
        assert_eq!(convert_tlm(&a), convert_tlm(&b));
    }

    #[test]
    fn tlm_separates_message_order_but_counts_does_not() {
        let a = proto(&["(sendIR (esk I 1))", "(sendRI (hash (esk I 1)))"]);
        let b = proto(&["(sendIR (hash (esk I 1)))", "(sendRI (esk I 1))"]);
        assert_ne!(convert_tlm(&a).values, convert_tlm(&b).values);
        assert_eq!(convert_counts(&a).values, convert_counts(&b).values);
    }

    #[test]
    fn counts_single_message_example() {
        let v = convert_counts(&proto(&["(sendIR (esk I 1))"]));
        let vocab = NodeLabel::vocabulary();
        let nonzero: Vec<usize> = v.values[..vocab.len()]
            .iter()
            .enumerate()
            .filter(|(_, x)| **x != 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(nonzero.len(), 2, "esk_I1 and the sendIR root");
        let n = vocab.len();
        assert_eq!(&v.values[n..], &[1.0, 2.0, 2.0]);
    }

    #[test]
    fn width_is_constant_over_random_protocols() {
        for seed in 0..50 {
            let p = generate_protocol(&GenConfig {
                seed,
                ..Default::default()
            })
            .unwrap();
            assert_eq!(convert_tlm(&p).values.len(), Scheme::Tlm.width());
            assert_eq!(convert_counts(&p).values.len(), Scheme::Counts.width());
        }
    }

    fn toy_set() -> Vec<(Protocol, Verdict)> {
        let mut data = Vec::new();
        for _ in 0..10 {
            data.push((
                proto(&["(sendIR (SK))", "(acceptI (SK))", "(acceptR (SK))"]),
                Verdict::Insecure,
            ));
            data.push((
                proto(&["(sendIR (senc (SK) (K)))", "(acceptI (SK))", "(acceptR (SK))"]),
                Verdict::Secure,
            ));
        }
        data
    }

    #[test]
    fn untrained_mlp_is_uniform() {
        let model = mlp_model(ModelConfig::default(), Scheme::Tlm.width());
        let p = toy_set().remove(0).0;
        assert_eq!(classify_mlp(&model, &convert_tlm(&p).values), [0.5, 0.5]);
    }

    #[test]
    fn mlp_separates_toy_set() {
        let cfg = ModelConfig {
            hidden: 16,
            batch: 10,
            steps: 300,
            seed: 5,
            ..Default::default()
        };
        let data = toy_set();
        let result = train_mlp(&data, Scheme::Tlm, cfg).unwrap();
        assert!((result.loss_curve[0] - std::f64::consts::LN_2).abs() < 1e-9);
        let metrics = evaluate_mlp(&result.model, Scheme::Tlm, &data);
        assert_eq!(metrics.accuracy, 1.0, "{:?}", metrics.confusion);
    }

    #[test]
    fn mlp_cannot_separate_tlm_collisions() {
        // both classes convert to the same vector, so accuracy is stuck at 1/2
        let a = proto(&["(sendIR (sign (aenc (ID I) (SK) (pk R)) (lsk I)))"]);
        let b = proto(&["(sendIR (aenc (sign (ID I) (SK) (lsk I)) (pk R)))"]);
        let mut data = Vec::new();
        for _ in 0..5 {
            data.push((a.clone(), Verdict::Secure));
            data.push((b.clone(), Verdict::Insecure));
        }
        let cfg = ModelConfig {
            hidden: 16,
            batch: 10,
            steps: 100,
            seed: 1,
            ..Default::default()
        };
        let result = train_mlp(&data, Scheme::Tlm, cfg).unwrap();
        let metrics = evaluate_mlp(&result.model, Scheme::Tlm, &data);
        assert!(metrics.accuracy <= 0.5 + 1e-12);
    }
}
