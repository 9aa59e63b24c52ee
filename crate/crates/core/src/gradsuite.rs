//! Finite-difference checks of every tape primitive and of whole training
//! forwards on a small model.

use crate::adapter::StyleTables;
use crate::backbone::ParamId;
use crate::config::ModelConfig;
use crate::corpus::Utterance;
use crate::error::Result;
use crate::model::{Batch, Model};
use crate::numerics::{grad_check, random_tensor, GradCheckReport, Mask, NormStats, Tape, Tensor, Var};
use crate::training::{compute_losses, frozen_groups};

pub const EPS: f64 = 1e-6;

type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    f: CaseFn,
}

fn case(name: &'static str, shapes: &[&[usize]], f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f: Box::new(f),
    }
}

fn cases() -> Vec<Case> {
    let m23 = Mask::from_lengths(&[2, 3], 3);
    let m32 = Mask::from_lengths(&[3, 2], 3);
    let m42 = Mask::from_lengths(&[4, 2], 4);
    let m31 = Mask::from_lengths(&[3, 1], 3);
    let (m32b, m31b) = (m32.clone(), m31.clone());
    vec![
        case("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1])),
        case("sub", &[&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1])),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1])),
        case("scale", &[&[5]], |t, v| t.scale(v[0], -1.7)),
        case("add_bias", &[&[2, 3, 4], &[4]], |t, v| t.add_bias(v[0], v[1])),
        case("mul_const", &[&[2, 3]], |t, v| t.mul_const(v[0], vec![1.0, 0.0, 2.0, -1.0, 0.5, 3.0])),
        case("relu", &[&[4, 4]], |t, v| t.relu(v[0])),
        case("tanh", &[&[4, 4]], |t, v| t.tanh(v[0])),
        case("sigmoid", &[&[4, 4]], |t, v| t.sigmoid(v[0])),
        case("softmax", &[&[3, 5]], |t, v| t.softmax(v[0])),
        // The stopped operand is a separate leaf held fixed by the check.
        case("stop_gradient", &[&[3]], |t, v| {
            let x = t.leaf(random_tensor(&[3], 77), true);
            let s = t.stop_gradient(x)?;
            t.mul(s, v[0])
        }),
        case("mask_rows", &[&[2, 3, 4]], move |t, v| t.mask_rows(v[0], &m23)),
        case("embedding", &[&[5, 3]], |t, v| t.embedding(v[0], &[4, 0, 4, 2], &[2, 2])),
        case("broadcast_rows", &[&[2, 3]], |t, v| t.broadcast_rows(v[0], 4)),
        case("broadcast_batch", &[&[3, 2]], |t, v| t.broadcast_batch(v[0], 3)),
        case("select_time", &[&[2, 4, 3]], |t, v| t.select_time(v[0], 2)),
        case("gather_rows", &[&[4, 2]], |t, v| {
            t.gather_rows(v[0], vec![Some(3), None, Some(0), Some(3)], vec![4, 2])
        }),
        case("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], vec![3, 4])),
        case("concat", &[&[2, 3, 2], &[2, 3, 4]], |t, v| t.concat(&[v[0], v[1]])),
        case("sum", &[&[2, 5]], |t, v| t.sum(v[0])),
        case("mean", &[&[2, 5]], |t, v| t.mean(v[0])),
        case("matmul", &[&[2, 3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1])),
        case("linear", &[&[2, 3], &[3, 4], &[4]], |t, v| t.linear(v[0], v[1], v[2])),
        case("conv1d", &[&[2, 6, 3], &[3, 3, 4]], |t, v| t.conv1d(v[0], v[1])),
        case("conv1d k5", &[&[1, 4, 2], &[5, 2, 3]], |t, v| t.conv1d(v[0], v[1])),
        case("conv2d", &[&[2, 5, 6, 2], &[3, 3, 2, 3]], |t, v| t.conv2d(v[0], v[1], 2)),
        case("conv2d stride1", &[&[1, 3, 4, 1], &[3, 3, 1, 2]], |t, v| t.conv2d(v[0], v[1], 1)),
        case("layer_norm", &[&[2, 3, 5], &[5], &[5]], |t, v| t.layer_norm(v[0], v[1], v[2])),
        case("batch_norm batch", &[&[2, 3, 2, 4], &[4], &[4]], move |t, v| {
            Ok(t.batch_norm(v[0], v[1], v[2], &m32, NormStats::Batch)?.0)
        }),
        case("batch_norm running", &[&[2, 3, 2, 4], &[4], &[4]], move |t, v| {
            let mean = [0.1, -0.2, 0.3, 0.0];
            let var = [1.0, 0.5, 2.0, 0.7];
            Ok(t.batch_norm(v[0], v[1], v[2], &m32b, NormStats::Running { mean: &mean, var: &var })?.0)
        }),
        case("attention", &[&[2, 3, 4], &[2, 4, 4], &[2, 4, 6]], move |t, v| {
            t.attention(v[0], v[1], v[2], 2, Some(&m42))
        }),
        case("attention unmasked", &[&[1, 1, 6], &[1, 5, 6], &[1, 5, 6]], |t, v| {
            t.attention(v[0], v[1], v[2], 3, None)
        }),
        case("gru_step", &[&[2, 3], &[2, 4], &[3, 12], &[4, 12], &[12], &[12]], |t, v| {
            t.gru_step(v[0], v[1], v[2], v[3], v[4], v[5])
        }),
        case("mae", &[&[2, 3, 2], &[2, 3, 2]], move |t, v| t.mae(v[0], v[1], Some(&m31))),
        case("mse", &[&[2, 3, 2], &[2, 3, 2]], move |t, v| t.mse(v[0], v[1], Some(&m31b))),
        case("mse unmasked", &[&[4], &[4]], |t, v| t.mse(v[0], v[1], None)),
    ]
}

/// `sum(out * W)` for a fixed seeded `W`, so every output coordinate
/// carries a distinct upstream gradient.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random_tensor(tape.shape(out), seed ^ 0xabcd));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Worst report of one primitive over `seeds` random inputs.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

pub fn primitive_suite(seeds: u64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for c in cases() {
        let mut worst: Option<GradCheckReport> = None;
        for seed in 0..seeds {
            let inputs: Vec<Tensor> = c
                .shapes
                .iter()
                .enumerate()
                .map(|(i, s)| random_tensor(s, seed * 31 + i as u64))
                .collect();
            let r = grad_check(
                |tape, vars| {
                    let y = (c.f)(tape, vars)?;
                    probe(tape, y, seed)
                },
                &inputs,
                EPS,
            )?;
            if worst.as_ref().is_none_or(|w| r.max_relative_error > w.max_relative_error) {
                worst = Some(r);
            }
        }
        if let Some(report) = worst {
            out.push(CaseResult { name: c.name, report });
        }
    }
    Ok(out)
}

/// A reduced configuration small enough for whole-model checks.
pub fn check_config() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        encoder_filters: 8,
        decoder_filters: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        ref_filters: vec![2; 6],
        gru_hidden: 4,
        style_tokens: 3,
        token_dim: 2,
        style_heads: 2,
        style_attention_hidden: 4,
        variance_filters: 8,
        ..ModelConfig::toy()
    }
}

/// Two-phoneme utterance with seeded mel frames.
fn check_utterance(mel_dim: usize) -> Utterance {
    let durations = vec![2, 1];
    let mut mel = random_tensor(&[3, mel_dim], 90);
    for row in mel.data_mut().chunks_mut(mel_dim) {
        row[1] = row[1].abs() + 0.5;
    }
    let pitch: Vec<f64> = mel.rows().map(|r| r[0]).collect();
    let energy: Vec<f64> = mel.rows().map(|r| r[1]).collect();
    Utterance {
        id: "check".into(),
        phonemes: vec![3, 7],
        durations,
        pitch,
        energy,
        mel,
        speaker: 1,
        emotion: 2,
        pitch_shift: 0.0,
        energy_factor: 1.0,
    }
}

/// Checks the gradient of the total training loss of phase `phase` with
/// respect to every parameter trained in that phase. Zero-initialized
/// projections are randomized first so every path carries gradient.
pub fn phase_forward_check(phase: u8) -> Result<GradCheckReport> {
    let cfg = check_config();
    let mut m = Model::new(cfg.clone())?;
    let zeroed: Vec<ParamId> = m
        .store
        .iter()
        .filter(|(_, p)| p.name.ends_with(".out.w") && p.value.data().iter().all(|&x| x == 0.0))
        .map(|(id, _)| id)
        .collect();
    for (i, id) in zeroed.into_iter().enumerate() {
        let shape = m.store.value(id).shape().to_vec();
        m.store.set(id, random_tensor(&shape, 500 + i as u64))?;
    }
    m.install_tables(&StyleTables {
        speaker: random_tensor(&[cfg.speakers, cfg.hidden], 61),
        emotion: random_tensor(&[cfg.emotions, cfg.hidden], 62),
    })?;
    m.store.freeze_only(frozen_groups(phase)?);
    let ids: Vec<ParamId> = m
        .store
        .iter()
        .map(|(id, _)| id)
        .filter(|&id| m.store.is_trainable(id))
        .collect();
    let inputs: Vec<Tensor> = ids.iter().map(|&id| m.store.value(id).clone()).collect();
    let u = check_utterance(cfg.mel_dim);
    let batch = Batch::new(&[&u])?;
    grad_check(
        |tape, vars| {
            let mut p = m.store.bind(tape);
            for (&id, &v) in ids.iter().zip(vars) {
                p.replace(id, v);
            }
            let fwd = m.forward_train(tape, &p, &batch, phase)?;
            Ok(compute_losses(tape, &fwd, &batch)?.0)
        },
        &inputs,
        EPS,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        let results = primitive_suite(10).unwrap();
        assert!(results.len() >= 30);
        for r in results {
            assert!(r.report.max_relative_error < 1e-5, "{}: {:?}", r.name, r.report);
        }
    }

    #[test]
    fn phase_two_forward_passes() {
        let r = phase_forward_check(2).unwrap();
        assert!(r.coordinates > 1000, "{r:?}");
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }
}
