//! Character-level language modeling for LaTeX sources.
//!
//! The pipeline: [`corpus`] turns LaTeX source trees into a cleaned character
//! stream with a vocabulary and training batches; [`models`] assembles
//! [`layers`] (built on the [`tensor`] autograd engine) into Char-LSTM,
//! Transformer, and Transformer-XL character models; [`training`] runs the
//! Adam loop with schedules, metrics, and checkpoints; [`generation`] samples
//! text with temperature control; [`validator`] checks the structural
//! well-formedness of (generated) LaTeX. [`cli`] exposes all of it as
//! subcommands.

pub mod cli;
pub mod corpus;
pub mod generation;
pub mod layers;
pub mod models;
pub mod tensor;
pub mod training;
pub mod validator;
