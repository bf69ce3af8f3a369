pub mod attributes;
pub mod composer;
pub mod digest;
pub mod evaluation;
pub mod extractor;
pub mod nn;
pub mod score;
pub mod synthetic;
pub mod textgen;
pub mod tokenizer;
pub mod understanding;
