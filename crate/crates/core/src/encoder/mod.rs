//! Tokenization and the transformer encoder producing user representations.

mod features;
mod model;
mod tokenizer;

pub use features::{concat_aux, AuxFeature, AuxFeatures};
pub use model::{
    backward, encode, encode_with_trace, DropoutRates, EncodeTrace, EncoderConfig, EncoderGradSinks,
    EncoderParams, ForwardOptions, Mode,
};
pub use tokenizer::{
    pad_batch, Tokenizer, CLS_ID, DEFAULT_MAX_LENGTH, PAD_ID, RESERVED_TOKENS, SEP_ID, UNK_ID,
};
