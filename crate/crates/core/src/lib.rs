//! Pre-training objectives, a tape autodiff engine, BERT-style encoders and
//! layer-wise probing.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod model;
pub mod objectives;
pub mod probing;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod training;
