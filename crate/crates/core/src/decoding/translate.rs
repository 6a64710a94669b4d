use super::{decode_best, greedy_batch, DecodeConfig, DecodeError};
use crate::models::SeqModel;
use crate::pipeline::{Stage, TextPipeline};

/// Translates one line of surface text.
pub fn translate(model: &SeqModel, text: &str, pipeline: &TextPipeline, config: &DecodeConfig) -> Result<String, DecodeError> {
    translate_traced(model, text, pipeline, config).map(|(out, _)| out)
}

/// [`translate`], also returning the stages run in order.
pub fn translate_traced(
    model: &SeqModel,
    text: &str,
    pipeline: &TextPipeline,
    config: &DecodeConfig,
) -> Result<(String, Vec<Stage>), DecodeError> {
    config.validate()?;
    check_size("source", model.src_vocab_size(), pipeline.src_vocab.len())?;
    check_size("target", model.tgt_vocab_size(), pipeline.tgt_vocab.len())?;
    let mut trace = Vec::new();
    let source = pipeline.encode_source(text, &mut trace);
    if source.len() <= 1 {
        return Ok((String::new(), trace));
    }
    let best = decode_best(model, &source, config)?;
    trace.push(Stage::Decode);
    let out = pipeline.decode_target(best.tokens(), &mut trace)?;
    Ok((out, trace))
}

fn check_size(which: &'static str, expected: usize, found: usize) -> Result<(), DecodeError> {
    if expected == found {
        Ok(())
    } else {
        Err(DecodeError::VocabSize { which, expected, found })
    }
}

/// Translates many lines; greedy configs decode in batches of 64.
pub fn translate_batch<S: AsRef<str>>(
    model: &SeqModel,
    texts: &[S],
    pipeline: &TextPipeline,
    config: &DecodeConfig,
) -> Result<Vec<String>, DecodeError> {
    config.validate()?;
    check_size("source", model.src_vocab_size(), pipeline.src_vocab.len())?;
    check_size("target", model.tgt_vocab_size(), pipeline.tgt_vocab.len())?;
    let sources: Vec<Vec<u32>> = texts
        .iter()
        .map(|t| pipeline.encode_source(t.as_ref(), &mut Vec::new()))
        .collect();
    let live: Vec<usize> = (0..sources.len()).filter(|&i| sources[i].len() > 1).collect();
    let inputs: Vec<Vec<u32>> = live.iter().map(|&i| sources[i].clone()).collect();
    let hyps = if config.beam == 1 {
        greedy_batch(model, &inputs, config, 64)?
    } else {
        inputs
            .iter()
            .map(|s| decode_best(model, s, config))
            .collect::<Result<_, _>>()?
    };
    let mut out = vec![String::new(); texts.len()];
    for (&i, h) in live.iter().zip(&hyps) {
        out[i] = pipeline.decode_target(h.tokens(), &mut Vec::new())?;
    }
    Ok(out)
}
