//! Machine-learning security verification of two-party key exchange
//! protocols: random protocol generation over a message syntax-tree grammar,
//! symbolic session-key secrecy labeling, insecurity-injecting augmentation,
//! and a Tree-LSTM/LSTM classifier with linear-time inference.

pub mod augment;
pub mod baselines;
pub mod corpus;
pub mod dataset;
pub mod gen;
pub mod knowledge;
pub mod model;
pub mod oracle;
pub mod protocol;
pub mod proverif;
pub mod tensor;
pub mod term;
