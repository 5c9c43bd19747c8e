//! Central finite-difference check of every model parameter gradient.

use rayon::prelude::*;

use crate::data::{generate_synthetic, SyntheticSpec};
use crate::encoder::{CrossWiring, EncoderConfig, Pooling};
use crate::error::{Error, Result};
use crate::heads::{CnnHeadConfig, GruHeadConfig};
use crate::model::{LossConfig, Model, ModelConfig, Variant};
use crate::tape::Tape;
use crate::text::{encode, EncodedSequence, Vocabulary};
use crate::train::sample_triplets;

/// Step used for the central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`]. Gradients smaller than this are
/// compared in absolute terms, since finite differences cannot resolve them
/// relative to their own size.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(plus: f64, minus: f64, h: f64) -> f64 {
    (plus - minus) / (2.0 * h)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter path and flat index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
    pub loss: f64,
}

/// Triplet inputs for a check.
pub struct TripletInputs<'a> {
    pub question: &'a EncodedSequence,
    pub positive: &'a EncodedSequence,
    pub negative: &'a EncodedSequence,
}

fn loss_value(model: &Model, inputs: &TripletInputs, loss: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let params = model.params.bind(&mut tape, false);
    let out = model.triplet_loss(&mut tape, &params, inputs.question, inputs.positive, inputs.negative, loss)?;
    Ok(tape.value(out).data()[0])
}

/// Compares backpropagated gradients with central differences over every
/// scalar parameter. The hinge must be active at the starting point.
pub fn check_triplet_gradients(model: &Model, inputs: &TripletInputs, loss: &LossConfig, h: f64) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let params = model.params.bind(&mut tape, true);
    let out = model.triplet_loss(&mut tape, &params, inputs.question, inputs.positive, inputs.negative, loss)?;
    let value = tape.value(out).data()[0];
    if value <= 0.0 {
        return Err(Error::Input(format!("hinge inactive at the check point (loss {value})")));
    }
    tape.backward(out)?;
    let grads = params.gradients(&tape);

    let names: Vec<String> = model.params.iter().map(|(k, _)| k.to_string()).collect();
    let per_param = names
        .par_iter()
        .map(|name| {
            let analytic = grads
                .get(name)
                .ok_or_else(|| Error::Input(format!("no gradient for {name}")))?;
            let mut probe = model.clone();
            let mut worst = (0.0_f64, 0_usize);
            for (i, &a) in analytic.iter().enumerate() {
                let orig = probe.params.get(name).expect("listed").data()[i];
                probe.params.get_mut(name).expect("listed").data_mut()[i] = orig + h;
                let plus = loss_value(&probe, inputs, loss)?;
                probe.params.get_mut(name).expect("listed").data_mut()[i] = orig - h;
                let minus = loss_value(&probe, inputs, loss)?;
                probe.params.get_mut(name).expect("listed").data_mut()[i] = orig;
                let err = relative_error(a, central_difference(plus, minus, h));
                if err > worst.0 {
                    worst = (err, i);
                }
            }
            Ok((name.clone(), worst, analytic.len()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
        loss: value,
    };
    for (name, (err, idx), n) in per_param {
        report.checked += n;
        if err > report.max_rel_error || report.worst.0.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = (name, idx);
        }
    }
    Ok(report)
}

/// Tiny configuration used by the standard check: d=8, L=8, one layer, one
/// head, kernel sizes {2}, 3 feature maps, GRU hidden 4.
pub fn tiny_config(variant: Variant, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        variant,
        encoder: EncoderConfig {
            dim: 8,
            layers: 1,
            heads: 1,
            ffn_dim: 16,
            mode: variant.encoder_mode(),
            cross: CrossWiring::EveryLayer,
        },
        pooling: Pooling::MeanUsefulToken,
        cnn: (variant == Variant::CrossedBertMultiScaleCnn).then(|| CnnHeadConfig {
            kernel_sizes: vec![2],
            feature_maps: 3,
        }),
        gru: (variant == Variant::CrossedBertBiGru).then_some(GruHeadConfig { hidden: 4 }),
        seq_len: 8,
        vocab_size,
        branch_segments: false,
    }
}

/// Runs the standard check for `variant` on a small synthetic triplet, with
/// margin 1 so the hinge stays active.
pub fn gradcheck_variant(variant: Variant, seed: u64) -> Result<GradCheckReport> {
    let dataset = generate_synthetic(&SyntheticSpec::new(4, 1, 12, seed))?;
    let vocab = Vocabulary::build(&dataset.texts())?;
    let config = tiny_config(variant, vocab.len());
    let model = Model::new(config, seed)?;
    let triplet = sample_triplets(&dataset, &dataset.splits().train, seed, 1)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Input("synthetic corpus produced no triplet".into()))?;
    fn text(id: Option<&str>) -> Result<&str> {
        id.ok_or_else(|| Error::Input("dangling triplet id".into()))
    }
    let enc = |t: &str| encode(t, &vocab, model.config.seq_len);
    let q = enc(text(dataset.question_text(triplet.question))?)?;
    let p = enc(text(dataset.answer_text(triplet.positive))?)?;
    let n = enc(text(dataset.answer_text(triplet.negative))?)?;
    let inputs = TripletInputs {
        question: &q,
        positive: &p,
        negative: &n,
    };
    check_triplet_gradients(&model, &inputs, &LossConfig { margin: 1.0 }, DEFAULT_STEP)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn difference_of_a_cubic() {
        let f = |x: f64| x * x * x;
        let d = central_difference(f(2.0 + 1e-5), f(2.0 - 1e-5), 1e-5);
        assert!((d - 12.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }
}
