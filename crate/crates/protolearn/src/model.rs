//! The protocol classifier: per-label embeddings feed a Child-Sum Tree-LSTM
//! over each message tree, message vectors feed a sequence LSTM, and a
//! linear layer with softmax yields (secure, insecure) probabilities.
//! Training uses RMSprop on mean cross-entropy and is deterministic given
//! the seed.

use crate::oracle::Verdict;
use crate::protocol::Protocol;
use crate::tensor::{glorot, normal, rmsprop_step, Gradients, Tape, Tensor, Var};
use crate::term::{NodeLabel, Term};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Hidden width n of both LSTM stages.
    pub hidden: usize,
    /// Embedding width d.
    pub embed: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    pub seed: u64,
    /// Optional extension: add a sinusoidal child-position offset to each
    /// node embedding. Off by default; the plain model is order-invariant
    /// across siblings.
    pub positional_tags: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 128,
            embed: 128,
            batch: 100,
            steps: 200,
            lr: 0.001,
            decay: 0.9,
            eps: 1e-8,
            seed: 0,
            positional_tags: false,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset contains a single class")]
    SingleClassDataset,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}

/// Named parameter tensors in a fixed order, shared by the optimizer and
/// the checkpoint format.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no parameter {name}"))
            .1
    }
}

const GATES_TREE: [&str; 4] = ["i", "f", "o", "u"];
const GATES_SEQ: [&str; 4] = ["f", "i", "o", "u"];

fn label_index(label: &NodeLabel, vocab: &[NodeLabel]) -> usize {
    vocab
        .iter()
        .position(|l| l == label)
        .expect("label in vocabulary")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Params,
    pub steps_trained: usize,
}

impl Model {
    /// Fresh parameters: normal(sigma=1) embeddings, Glorot weights, zero
    /// biases with +1 on forget gates, zero classifier (symmetric start).
    pub fn new(cfg: ModelConfig) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (n, d) = (cfg.hidden, cfg.embed);
        let vocab = NodeLabel::vocabulary();
        let mut entries = Vec::new();
        for (k, _) in vocab.iter().enumerate() {
            entries.push((format!("embed_{k}"), normal(d, 1.0, &mut rng)));
        }
        for g in GATES_TREE {
            entries.push((format!("tree_W_{g}"), glorot(n, d, &mut rng)));
            entries.push((format!("tree_U_{g}"), glorot(n, n, &mut rng)));
            let mut b = Tensor::zeros(vec![n]);
            if g == "f" {
                b.data.iter_mut().for_each(|x| *x = 1.0);
            }
            entries.push((format!("tree_b_{g}"), b));
        }
        for g in GATES_SEQ {
            entries.push((format!("seq_W_{g}"), glorot(n, n, &mut rng)));
            entries.push((format!("seq_U_{g}"), glorot(n, n, &mut rng)));
            let mut b = Tensor::zeros(vec![n]);
            if g == "f" {
                b.data.iter_mut().for_each(|x| *x = 1.0);
            }
            entries.push((format!("seq_b_{g}"), b));
        }
        entries.push(("cls_W".into(), Tensor::zeros(vec![2, n])));
        entries.push(("cls_b".into(), Tensor::zeros(vec![2])));
        Model {
            cfg,
            params: Params { entries },
            steps_trained: 0,
        }
    }
}

/// Parameter leaves for one tape, by entry order. Because parameters are
/// always pushed first and in the same order, their Var indices line up
/// across tapes, which the batched gradient reduction relies on.
pub struct BoundParams<'a> {
    /// Parameter Vars in `Params::entries` order.
    pub vars: Vec<Var>,
    by_name: BTreeMap<&'a str, usize>,
    vocab: Vec<NodeLabel>,
    cfg: &'a ModelConfig,
}

impl<'a> BoundParams<'a> {
    pub fn bind(tape: &mut Tape, model: &'a Model) -> BoundParams<'a> {
        let mut vars = Vec::new();
        let mut by_name = BTreeMap::new();
        for (i, (name, t)) in model.params.entries.iter().enumerate() {
            vars.push(tape.leaf(t.clone()));
            by_name.insert(name.as_str(), i);
        }
        BoundParams {
            vars,
            by_name,
            vocab: NodeLabel::vocabulary(),
            cfg: &model.cfg,
        }
    }

    pub(crate) fn var(&self, name: &str) -> Var {
        self.vars[self.by_name[name]]
    }

    fn embedding(&self, tape: &mut Tape, label: &NodeLabel, child_pos: usize) -> Var {
        let x = self.vars[label_index(label, &self.vocab)];
        if !self.cfg.positional_tags {
            return x;
        }
        let d = self.cfg.embed;
        let mut off = vec![0.0; d];
        for (j, o) in off.iter_mut().enumerate() {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let angle = child_pos as f64 * freq;
            *o = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
        let tag = tape.leaf(Tensor::vector(off));
        tape.add(x, tag)
    }
}

fn gate(
    tape: &mut Tape,
    p: &BoundParams,
    stage: &str,
    g: &str,
    x: Var,
    h: Var,
) -> Var {
    let wx = p.var(&format!("{stage}_W_{g}"));
    let uh = p.var(&format!("{stage}_U_{g}"));
    let b = p.var(&format!("{stage}_b_{g}"));
    let a = tape.matvec(wx, x);
    let c = tape.matvec(uh, h);
    let s = tape.add(a, c);
    tape.add(s, b)
}

/// Child-Sum Tree-LSTM cell over one node: h~ is the plain sum of child
/// hidden states, the forget gate is evaluated once per child against that
/// child's hidden state, and c_j = i . u + sum_k f_jk . c_k.
fn tree_node(
    tape: &mut Tape,
    p: &BoundParams,
    t: &Term,
    child_pos: usize,
) -> (Var, Var) {
    let children: Vec<(Var, Var)> = t
        .children
        .iter()
        .enumerate()
        .map(|(k, c)| tree_node(tape, p, c, k))
        .collect();
    let n = p.cfg.hidden;
    let x = p.embedding(tape, &t.label, child_pos);
    let h_tilde = if children.is_empty() {
        tape.leaf(Tensor::zeros(vec![n]))
    } else {
        let hs: Vec<Var> = children.iter().map(|(h, _)| *h).collect();
        tape.sum_list(&hs)
    };
    let i_pre = gate(tape, p, "tree", "i", x, h_tilde);
    let i = tape.sigmoid(i_pre);
    let o_pre = gate(tape, p, "tree", "o", x, h_tilde);
    let o = tape.sigmoid(o_pre);
    let u_pre = gate(tape, p, "tree", "u", x, h_tilde);
    let u = tape.tanh(u_pre);
    let mut c_parts = vec![tape.mul(i, u)];
    for (h_k, c_k) in &children {
        let f_pre = gate(tape, p, "tree", "f", x, *h_k);
        let f = tape.sigmoid(f_pre);
        c_parts.push(tape.mul(f, *c_k));
    }
    let c = if c_parts.len() == 1 {
        c_parts[0]
    } else {
        tape.sum_list(&c_parts)
    };
    let ct = tape.tanh(c);
    let h = tape.mul(o, ct);
    (h, c)
}

pub fn encode_message(tape: &mut Tape, p: &BoundParams, m: &Term) -> (Var, Var) {
    tree_node(tape, p, m, 0)
}

/// Sequence LSTM over the per-message vectors, zero initial state; returns
/// the final hidden state.
pub fn encode_protocol(tape: &mut Tape, p: &BoundParams, protocol: &Protocol) -> Var {
    let n = p.cfg.hidden;
    let mut h = tape.leaf(Tensor::zeros(vec![n]));
    let mut c = tape.leaf(Tensor::zeros(vec![n]));
    for m in &protocol.messages {
        let (x, _) = encode_message(tape, p, m.term());
        let f_pre = gate(tape, p, "seq", "f", x, h);
        let f = tape.sigmoid(f_pre);
        let i_pre = gate(tape, p, "seq", "i", x, h);
        let i = tape.sigmoid(i_pre);
        let o_pre = gate(tape, p, "seq", "o", x, h);
        let o = tape.sigmoid(o_pre);
        let u_pre = gate(tape, p, "seq", "u", x, h);
        let u = tape.tanh(u_pre);
        let fc = tape.mul(f, c);
        let iu = tape.mul(i, u);
        c = tape.add(fc, iu);
        let ct = tape.tanh(c);
        h = tape.mul(o, ct);
    }
    h
}

pub fn logits(tape: &mut Tape, p: &BoundParams, protocol: &Protocol) -> Var {
    let h = encode_protocol(tape, p, protocol);
    let a = p.var("cls_W");
    let b = p.var("cls_b");
    let ah = tape.matvec(a, h);
    tape.add(ah, b)
}

/// (secure, insecure) probabilities for one protocol.
pub fn classify(model: &Model, protocol: &Protocol) -> [f64; 2] {
    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, model);
    let l = logits(&mut tape, &p, protocol);
    let probs = tape.softmax(l);
    let v = tape.value(probs);
    [v.data[0], v.data[1]]
}

/// Class index used throughout: 0 = secure, 1 = insecure.
pub fn class_of(v: Verdict) -> usize {
    match v {
        Verdict::Insecure => 1,
        _ => 0,
    }
}

pub struct TrainResult {
    pub model: Model,
    pub loss_curve: Vec<f64>,
}

/// Mini-batch RMSprop loop shared by the tree model and the baseline MLP.
/// `forward` builds the 2-class logits for one example on the given tape.
/// Examples are shuffled once per epoch; gradients inside a batch are
/// reduced in example order, so the run is deterministic given the seed.
pub(crate) fn train_loop<E: Sync, F>(
    mut model: Model,
    examples: &[(E, usize)],
    forward: F,
) -> Result<TrainResult, TrainError>
where
    F: Fn(&mut Tape, &BoundParams, &E) -> Var + Sync,
{
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let first = examples[0].1;
    if examples.iter().all(|(_, y)| *y == first) {
        return Err(TrainError::SingleClassDataset);
    }

    let cfg = model.cfg.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut opt_state: Vec<Vec<f64>> = model
        .params
        .entries
        .iter()
        .map(|(_, t)| vec![0.0; t.len()])
        .collect();
    let mut loss_curve = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let per_example: Vec<(f64, Gradients, Vec<Var>)> = batch
            .par_iter()
            .map(|&idx| {
                let (ex, y) = &examples[idx];
                let mut tape = Tape::new();
                let p = BoundParams::bind(&mut tape, &model);
                let l = forward(&mut tape, &p, ex);
                let probs = tape.softmax(l);
                let loss = tape.cross_entropy(probs, *y);
                let value = tape.value(loss).data[0];
                let grads = tape.backward(loss);
                (value, grads, p.vars)
            })
            .collect();

        let scale = 1.0 / batch.len() as f64;
        let mut mean_loss = 0.0;
        let mut acc: Vec<Vec<f64>> = model
            .params
            .entries
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        for (value, grads, vars) in &per_example {
            mean_loss += value * scale;
            for (slot, var) in vars.iter().enumerate() {
                for (a, g) in acc[slot].iter_mut().zip(grads.grad(*var)) {
                    *a += g * scale;
                }
            }
        }
        for (slot, (_, t)) in model.params.entries.iter_mut().enumerate() {
            rmsprop_step(
                &mut t.data,
                &acc[slot],
                &mut opt_state[slot],
                cfg.lr,
                cfg.decay,
                cfg.eps,
            );
        }
        loss_curve.push(mean_loss);
        model.steps_trained += 1;
    }
    Ok(TrainResult { model, loss_curve })
}

/// Trains the tree/sequence classifier on labeled protocols.
pub fn train(
    dataset: &[(Protocol, Verdict)],
    cfg: ModelConfig,
) -> Result<TrainResult, TrainError> {
    let examples: Vec<(Protocol, usize)> = dataset
        .iter()
        .map(|(p, v)| (p.clone(), class_of(*v)))
        .collect();
    train_loop(Model::new(cfg), &examples, |tape, p, proto| {
        logits(tape, p, proto)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// confusion[truth][prediction], classes (secure, insecure)
    pub confusion: [[usize; 2]; 2],
    /// (protocol size, seconds) per evaluated protocol
    pub timings: Vec<(usize, f64)>,
}

pub fn evaluate(model: &Model, dataset: &[(Protocol, Verdict)]) -> Metrics {
    let mut confusion = [[0usize; 2]; 2];
    let mut timings = Vec::with_capacity(dataset.len());
    for (p, v) in dataset {
        let start = std::time::Instant::now();
        let probs = classify(model, p);
        let dt = start.elapsed().as_secs_f64();
        let pred = if probs[1] > probs[0] { 1 } else { 0 };
        confusion[class_of(*v)][pred] += 1;
        timings.push((p.size(), dt));
    }
    let correct = confusion[0][0] + confusion[1][1];
    let total = dataset.len().max(1);
    Metrics {
        accuracy: correct as f64 / total as f64,
        confusion,
        timings,
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"PLCK";
const CKPT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    version: u32,
    cfg: ModelConfig,
    steps_trained: usize,
    entries: Vec<(String, Vec<usize>)>,
}

/// Binary container: magic, version, JSON manifest, then the flat f64
/// arrays little-endian in manifest order. Round-trips bitwise.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let manifest = Manifest {
        version: CKPT_VERSION,
        cfg: model.cfg.clone(),
        steps_trained: model.steps_trained,
        entries: model
            .params
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), t.shape.clone()))
            .collect(),
    };
    let manifest =
        serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Format(e.to_string()))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&CKPT_VERSION.to_le_bytes())?;
    f.write_all(&(manifest.len() as u64).to_le_bytes())?;
    f.write_all(&manifest)?;
    for (_, t) in &model.params.entries {
        for x in &t.data {
            f.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model, CheckpointError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let mut v4 = [0u8; 4];
    f.read_exact(&mut v4)?;
    if u32::from_le_bytes(v4) != CKPT_VERSION {
        return Err(CheckpointError::Format("unsupported version".into()));
    }
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8)?;
    let mut manifest = vec![0u8; u64::from_le_bytes(len8) as usize];
    f.read_exact(&mut manifest)?;
    let manifest: Manifest =
        serde_json::from_slice(&manifest).map_err(|e| CheckpointError::Format(e.to_string()))?;
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for (name, shape) in manifest.entries {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut b8 = [0u8; 8];
        for _ in 0..len {
            f.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        entries.push((name, Tensor::new(shape, data)));
    }
    Ok(Model {
        cfg: manifest.cfg,
        params: Params { entries },
        steps_trained: manifest.steps_trained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::tests::ktm4;
    use crate::protocol::{Message, Protocol, ProtocolKind};
    use crate::term::parse_term;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            embed: 8,
            batch: 10,
            steps: 200,
            seed: 3,
            ..Default::default()
        }
    }

    fn proto(kind: ProtocolKind, texts: &[&str], seed: u64) -> Protocol {
        Protocol::new(
            texts
                .iter()
                .map(|t| Message::new(parse_term(t).unwrap()).unwrap())
                .collect(),
            kind,
            seed,
        )
    }

    #[test]
    fn untrained_model_is_uniform() {
        let model = Model::new(small_cfg());
        let probs = classify(&model, &ktm4());
        assert_eq!(probs, [0.5, 0.5]);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut cfg = small_cfg();
        cfg.seed = 11;
        let model = Model::new(cfg);
        let p = ktm4();
        let probs = classify(&model, &p);
        assert!((probs[0] + probs[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sibling_order_is_irrelevant_without_tags() {
        let model = Model::new(small_cfg());
        let a = proto(
            ProtocolKind::Transport,
            &["(sendIR (tuple (ID I) (esk I 1)) (SK))"],
            0,
        );
        let b = proto(
            ProtocolKind::Transport,
            &["(sendIR (tuple (esk I 1) (ID I)) (SK))"],
            0,
        );
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &model);
        let ha = encode_protocol(&mut tape, &bp, &a);
        let hb = encode_protocol(&mut tape, &bp, &b);
        let (va, vb) = (tape.value(ha).clone(), tape.value(hb));
        for (x, y) in va.data.iter().zip(&vb.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn positional_tags_distinguish_sibling_order() {
        let mut cfg = small_cfg();
        cfg.positional_tags = true;
        let model = Model::new(cfg);
        let a = proto(
            ProtocolKind::Transport,
            &["(sendIR (tuple (ID I) (esk I 1)) (SK))"],
            0,
        );
        let b = proto(
            ProtocolKind::Transport,
            &["(sendIR (tuple (esk I 1) (ID I)) (SK))"],
            0,
        );
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &model);
        let ha = encode_protocol(&mut tape, &bp, &a);
        let hb = encode_protocol(&mut tape, &bp, &b);
        assert_ne!(tape.value(ha).data, tape.value(hb).data);
    }

    #[test]
    fn structural_nesting_is_distinguished() {
        // the fixed-vector collision pair must separate under the tree model
        let a = proto(
            ProtocolKind::Transport,
            &["(sendIR (sign (aenc (ID I) (SK) (pk R)) (lsk I)))"],
            0,
        );
        let b = proto(
            ProtocolKind::Transport,
            &["(sendIR (aenc (sign (ID I) (SK) (lsk I)) (pk R)))"],
            0,
        );
        let model = Model::new(small_cfg());
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &model);
        let ha = encode_protocol(&mut tape, &bp, &a);
        let hb = encode_protocol(&mut tape, &bp, &b);
        assert_ne!(tape.value(ha).data, tape.value(hb).data);
    }

    /// Independent plain-loop recomputation of a two-node message encoding.
    #[test]
    fn manual_two_node_forward() {
        let mut cfg = small_cfg();
        cfg.hidden = 2;
        cfg.embed = 2;
        let model = Model::new(cfg);
        let m = parse_term("(sendIR (K))").unwrap();

        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &model);
        let (h, _) = encode_message(&mut tape, &bp, &m);
        let got = tape.value(h).data.clone();

        let vocab = NodeLabel::vocabulary();
        let emb = |label: &NodeLabel| model.params.get(&format!("embed_{}", label_index(label, &vocab))).data.clone();
        let mat = |name: &str| model.params.get(name).data.clone();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let cell = |x: &[f64], h_tilde: &[f64], c_sum: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let lin = |g: &str, hvec: &[f64]| -> Vec<f64> {
                let w = mat(&format!("tree_W_{g}"));
                let u = mat(&format!("tree_U_{g}"));
                let b = mat(&format!("tree_b_{g}"));
                (0..2)
                    .map(|r| {
                        let wx: f64 = (0..2).map(|c| w[r * 2 + c] * x[c]).sum();
                        let uh: f64 = (0..2).map(|c| u[r * 2 + c] * hvec[c]).sum();
                        wx + uh + b[r]
                    })
                    .collect()
            };
            let i: Vec<f64> = lin("i", h_tilde).iter().map(|v| sig(*v)).collect();
            let o: Vec<f64> = lin("o", h_tilde).iter().map(|v| sig(*v)).collect();
            let u: Vec<f64> = lin("u", h_tilde).iter().map(|v| v.tanh()).collect();
            let c: Vec<f64> = (0..2).map(|k| i[k] * u[k] + c_sum[k]).collect();
            let h: Vec<f64> = (0..2).map(|k| o[k] * c[k].tanh()).collect();
            (h, c)
        };
        // leaf K
        let xk = emb(&m.children[0].label);
        let (hk, ck) = cell(&xk, &[0.0, 0.0], &[0.0, 0.0]);
        // root sendIR with one child: forget gate against the child state
        let xr = emb(&m.label);
        let fw = mat("tree_W_f");
        let fu = mat("tree_U_f");
        let fb = mat("tree_b_f");
        let f: Vec<f64> = (0..2)
            .map(|r| {
                let wx: f64 = (0..2).map(|c| fw[r * 2 + c] * xr[c]).sum();
                let uh: f64 = (0..2).map(|c| fu[r * 2 + c] * hk[c]).sum();
                sig(wx + uh + fb[r])
            })
            .collect();
        let c_sum: Vec<f64> = (0..2).map(|k| f[k] * ck[k]).collect();
        let (hr, _) = cell(&xr, &hk, &c_sum);
        for (g, w) in got.iter().zip(&hr) {
            assert!((g - w).abs() < 1e-12, "{got:?} vs {hr:?}");
        }
    }

    #[test]
    fn gradient_check_through_full_model() {
        let mut cfg = small_cfg();
        cfg.hidden = 4;
        cfg.embed = 4;
        let model = Model::new(cfg);
        let p = proto(
            ProtocolKind::Transport,
            &[
                "(sendIR (senc (SK) (K)) (esk I 1))",
                "(sendRI (hash (esk I 1)))",
                "(acceptI (SK))",
            ],
            0,
        );

        let loss_with = |m: &Model| -> f64 {
            let mut tape = Tape::new();
            let bp = BoundParams::bind(&mut tape, m);
            let l = logits(&mut tape, &bp, &p);
            let probs = tape.softmax(l);
            let loss = tape.cross_entropy(probs, 1);
            tape.value(loss).data[0]
        };

        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &model);
        let l = logits(&mut tape, &bp, &p);
        let probs = tape.softmax(l);
        let loss = tape.cross_entropy(probs, 1);
        let grads = tape.backward(loss);

        let eps = 1e-5;
        for (slot, (name, t)) in model.params.entries.iter().enumerate() {
            let analytic = grads.grad(bp.vars[slot]);
            // probe a few coordinates per tensor to keep the test quick
            for k in (0..t.len()).step_by(t.len().div_ceil(3)) {
                let mut hi = model.clone();
                let mut lo = model.clone();
                hi.params.entries[slot].1.data[k] += eps;
                lo.params.entries[slot].1.data[k] -= eps;
                let fd = (loss_with(&hi) - loss_with(&lo)) / (2.0 * eps);
                let denom = fd.abs().max(analytic[k].abs()).max(1e-8);
                assert!(
                    (fd - analytic[k]).abs() / denom < 1e-4,
                    "{name}[{k}]: fd {fd} vs analytic {}",
                    analytic[k]
                );
            }
        }
    }

    fn separable_toy_set() -> Vec<(Protocol, Verdict)> {
        let mut data = Vec::new();
        for s in 0..10 {
            data.push((
                proto(
                    ProtocolKind::Transport,
                    &["(sendIR (SK))", "(acceptI (SK))", "(acceptR (SK))"],
                    s,
                ),
                Verdict::Insecure,
            ));
            data.push((
                proto(
                    ProtocolKind::Transport,
                    &["(sendIR (senc (SK) (K)))", "(acceptI (SK))", "(acceptR (SK))"],
                    s,
                ),
                Verdict::Secure,
            ));
        }
        data
    }

    #[test]
    fn training_separates_toy_set() {
        let data = separable_toy_set();
        let mut cfg = small_cfg();
        cfg.steps = 800;
        let result = train(&data, cfg).unwrap();
        assert!(
            (result.loss_curve[0] - std::f64::consts::LN_2).abs() < 1e-9,
            "symmetric start should sit at ln 2, got {}",
            result.loss_curve[0]
        );
        let metrics = evaluate(&result.model, &data);
        assert_eq!(metrics.accuracy, 1.0, "{:?}", metrics.confusion);
        assert!(result.loss_curve.last().unwrap() < &0.1);
    }

    #[test]
    fn train_rejects_degenerate_datasets() {
        assert!(matches!(
            train(&[], small_cfg()),
            Err(TrainError::EmptyDataset)
        ));
        let single: Vec<(Protocol, Verdict)> = separable_toy_set()
            .into_iter()
            .filter(|(_, v)| *v == Verdict::Secure)
            .collect();
        assert!(matches!(
            train(&single, small_cfg()),
            Err(TrainError::SingleClassDataset)
        ));
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let data = separable_toy_set();
        let mut cfg = small_cfg();
        cfg.steps = 20;
        let result = train(&data, cfg).unwrap();
        let dir = std::env::temp_dir().join("protolearn_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        save_checkpoint(&result.model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, result.model);
        let p = ktm4();
        assert_eq!(classify(&loaded, &p), classify(&result.model, &p));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn determinism_across_runs() {
        let data = separable_toy_set();
        let mut cfg = small_cfg();
        cfg.steps = 15;
        let a = train(&data, cfg.clone()).unwrap();
        let b = train(&data, cfg).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn op_count_linear_in_protocol_size() {
        let model = Model::new(small_cfg());
        let count = |p: &Protocol| {
            let mut tape = Tape::new();
            let bp = BoundParams::bind(&mut tape, &model);
            let before = tape.op_count();
            let l = logits(&mut tape, &bp, p);
            let _ = tape.softmax(l);
            tape.op_count() - before
        };
        // growing a message by one node adds a constant number of ops
        let p1 = proto(ProtocolKind::Transport, &["(sendIR (SK))"], 0);
        let p2 = proto(ProtocolKind::Transport, &["(sendIR (hash (SK)))"], 0);
        let p3 = proto(ProtocolKind::Transport, &["(sendIR (hash (hash (SK))))"], 0);
        let (c1, c2, c3) = (count(&p1), count(&p2), count(&p3));
        assert_eq!(c2 - c1, c3 - c2);
    }
}
