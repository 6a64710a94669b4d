pub mod autodiff;
pub mod backtranslation;
pub mod bleu;
pub mod corpus;
pub mod decoding;
pub mod experiment;
pub mod models;
pub mod pipeline;
pub mod subword;
pub mod textnorm;
pub mod training;
