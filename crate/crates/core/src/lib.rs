//! Attention-based lexicon-free word recognition.
//!
//! A small convolutional encoder turns a grayscale word image into a grid of
//! feature vectors. An LSTM decoder with soft attention over that grid emits
//! one character per step until END. Inference runs a beam search that can
//! fuse a character n-gram model and restrict output to a lexicon trie.

pub mod alphabet;
pub mod attention;
pub mod beamsearch;
pub mod bundle;
pub mod cli;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod image;
pub mod lexicon;
pub mod model;
pub mod ngram;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use alphabet::{Alphabet, ALPHABET_SIZE, END};
pub use beamsearch::{beam_decode, DecodeConfig, Decoded, LexiconMode};
pub use bundle::ModelBundle;
pub use error::{Error, Result};
pub use image::GrayImage;
pub use model::{Model, ModelConfig};
