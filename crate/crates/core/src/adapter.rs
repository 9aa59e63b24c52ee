//! Residual variance adapter.
//!
//! Stages are applied in a fixed order, each adding one residual to the
//! phoneme embeddings:
//!
//! ```text
//! A  unstyled phoneme embedding
//! B = A + R1   speaker (or the style embedding on the reference path)
//! C = B + R2   emotion
//! D = C + R3   prosody
//! E = D + R4   pitch
//! F = E + R5   energy
//! ```
//!
//! Duration and pitch are predicted from D, energy from E.

use crate::backbone::layers::{Builder, ConvStack, Linear};
use crate::backbone::{Bound, Group, ParamId};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io::{self, BlobView, NamedArray};
use crate::numerics::{Mask, Tape, Tensor, Var};

pub const STAGE_NAMES: [&str; 6] = ["A", "B", "C", "D", "E", "F"];
pub const RESIDUAL_NAMES: [&str; 5] = ["R1", "R2", "R3", "R4", "R5"];

#[derive(Clone, Debug)]
pub struct Adapter {
    pub speaker_table: ParamId,
    pub emotion_table: ParamId,
    speaker_net: ConvStack,
    emotion_net: ConvStack,
    prosody_net: ConvStack,
    prosody_predictor: ConvStack,
    duration_predictor: ConvStack,
    pitch_predictor: ConvStack,
    energy_predictor: ConvStack,
    pitch_lift: Linear,
    pitch_net: ConvStack,
    energy_lift: Linear,
    energy_net: ConvStack,
    speakers: usize,
    emotions: usize,
}

/// Where the utterance-level style comes from. The two sources are
/// exclusive.
#[derive(Clone, Debug)]
pub enum StyleInput {
    /// Style embedding `S(x)` of shape `[B, H]`.
    Reference(Var),
    Labels {
        speakers: Vec<usize>,
        emotions: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
pub enum ProsodyInput {
    Off,
    /// Phoneme-averaged mel `[B, L, M]`; the predictor runs alongside so
    /// its loss can be formed.
    Encoder(Var),
    Predictor,
}

#[derive(Clone, Debug)]
pub enum VarianceInput {
    /// Conditioning values `[B, L, 1]` that already include the sample's
    /// shifts.
    GroundTruth { pitch: Var, energy: Var },
    /// Predictions plus user controls, one per batch item.
    Predicted {
        pitch_shift: Vec<f64>,
        energy_factor: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
pub struct AdapterMode {
    pub style: StyleInput,
    pub prosody: ProsodyInput,
    pub variance: VarianceInput,
    /// Wrap the speaker and emotion residuals in stop-gradient.
    pub stop_label_residuals: bool,
}

#[derive(Clone, Debug)]
pub struct AdapterOutput {
    pub stages: [Var; 6],
    pub residuals: [Var; 5],
    /// Predicted `log(1 + duration)`, `[B, L, 1]`.
    pub log_duration: Var,
    pub pitch: Var,
    pub energy: Var,
    pub prosody_encoded: Option<Var>,
    pub prosody_predicted: Option<Var>,
    /// Conditioning values actually fed to the pitch and energy encoders.
    pub pitch_condition: Var,
    pub energy_condition: Var,
}

impl AdapterOutput {
    pub fn last(&self) -> Var {
        self.stages[5]
    }
}

/// Broadcast-adds an utterance-level style vector `s[B, H]` to every
/// phoneme row. Returns `(stage, residual)`.
pub fn apply_style(tape: &mut Tape, e: Var, s: Var, mask: &Mask) -> Result<(Var, Var)> {
    let r = tape.broadcast_rows(s, mask.max_len())?;
    let r = tape.mask_rows(r, mask)?;
    Ok((tape.add(e, r)?, r))
}

impl Adapter {
    pub fn build(b: &mut Builder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.hidden;
        let (f, k, drop) = (cfg.variance_filters, cfg.variance_kernel, cfg.variance_dropout);
        let speaker_table = b.scoped(Group::Tables, "tables").uniform("speaker", &[cfg.speakers, h], 1.0)?;
        let emotion_table = b.scoped(Group::Tables, "tables").uniform("emotion", &[cfg.emotions, h], 1.0)?;
        let net = |b: &mut Builder<'_>, g: Group, name: &str, d_in: usize, d_out: usize, zero: bool| {
            ConvStack::build(&mut b.scoped(g, name), "net", d_in, f, k, d_out, drop, zero)
        };
        Ok(Adapter {
            speaker_table,
            emotion_table,
            speaker_net: net(b, Group::SpeakerEncoder, "speaker_encoder", 2 * h, h, true)?,
            emotion_net: net(b, Group::EmotionEncoder, "emotion_encoder", 2 * h, h, true)?,
            prosody_net: net(b, Group::ProsodyEncoder, "prosody_encoder", cfg.mel_dim + h, h, true)?,
            prosody_predictor: net(b, Group::ProsodyPredictor, "prosody_predictor", h, h, true)?,
            duration_predictor: net(b, Group::DurationPredictor, "duration_predictor", h, 1, false)?,
            pitch_predictor: net(b, Group::PitchPredictor, "pitch_predictor", h, 1, false)?,
            energy_predictor: net(b, Group::EnergyPredictor, "energy_predictor", h, 1, false)?,
            pitch_lift: b.scoped(Group::PitchEncoder, "pitch_encoder").linear("lift", 1, h)?,
            pitch_net: net(b, Group::PitchEncoder, "pitch_encoder", 2 * h, h, true)?,
            energy_lift: b.scoped(Group::EnergyEncoder, "energy_encoder").linear("lift", 1, h)?,
            energy_net: net(b, Group::EnergyEncoder, "energy_encoder", 2 * h, h, true)?,
            speakers: cfg.speakers,
            emotions: cfg.emotions,
        })
    }

    /// Residual `R = sg(mu) + net(concat(sg(mu), x))` for a table row per
    /// item.
    #[allow(clippy::too_many_arguments)]
    fn label_residual(
        &self,
        tape: &mut Tape,
        p: &Bound,
        table: ParamId,
        net: &ConvStack,
        ids: &[usize],
        x: Var,
        mask: &Mask,
    ) -> Result<Var> {
        let mu = tape.embedding(p.var(table), ids, &[ids.len()])?;
        let mu = tape.stop_gradient(mu)?;
        let mu = tape.broadcast_rows(mu, mask.max_len())?;
        let mu = tape.mask_rows(mu, mask)?;
        let input = tape.concat(&[mu, x])?;
        let delta = net.forward(tape, p, input, mask)?;
        tape.add(mu, delta)
    }

    fn scalar_residual(
        &self,
        tape: &mut Tape,
        p: &Bound,
        lift: &Linear,
        net: &ConvStack,
        value: Var,
        x: Var,
        mask: &Mask,
    ) -> Result<Var> {
        let lifted = lift.forward(tape, p, value)?;
        let lifted = tape.mask_rows(lifted, mask)?;
        let input = tape.concat(&[lifted, x])?;
        net.forward(tape, p, input, mask)
    }

    fn check_labels(&self, speakers: &[usize], emotions: &[usize], batch: usize) -> Result<()> {
        if speakers.len() != batch || emotions.len() != batch {
            return Err(Error::Mode(format!(
                "{} speaker and {} emotion labels for a batch of {batch}",
                speakers.len(),
                emotions.len()
            )));
        }
        if let Some(&s) = speakers.iter().find(|&&s| s >= self.speakers) {
            return Err(Error::UnknownLabel {
                kind: "speaker",
                id: s,
                limit: self.speakers,
            });
        }
        if let Some(&e) = emotions.iter().find(|&&e| e >= self.emotions) {
            return Err(Error::UnknownLabel {
                kind: "emotion",
                id: e,
                limit: self.emotions,
            });
        }
        Ok(())
    }

    /// Runs stages A to F on `a[B, L, H]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        a: Var,
        mask: &Mask,
        mode: &AdapterMode,
    ) -> Result<AdapterOutput> {
        let shape = tape.shape(a).to_vec();
        let batch = shape[0];
        let ground_truth = matches!(mode.variance, VarianceInput::GroundTruth { .. });
        if ground_truth != tape.is_training() {
            return Err(Error::Mode(
                "ground-truth variance conditioning is for training tapes only, predictions for inference".into(),
            ));
        }
        if matches!(mode.prosody, ProsodyInput::Encoder(_)) && !tape.is_training() {
            return Err(Error::Mode("the prosody encoder needs reference mel and runs only in training".into()));
        }
        let zeros = tape.constant(Tensor::zeros(&shape));

        let (b, r1, c, r2) = match &mode.style {
            StyleInput::Reference(s) => {
                if !matches!(mode.prosody, ProsodyInput::Off) {
                    return Err(Error::Mode("the style-encoder path runs without prosody residuals".into()));
                }
                let (b, r1) = apply_style(tape, a, *s, mask)?;
                let c = tape.add(b, zeros)?;
                (b, r1, c, zeros)
            }
            StyleInput::Labels { speakers, emotions } => {
                self.check_labels(speakers, emotions, batch)?;
                let mut r1 = self.label_residual(tape, p, self.speaker_table, &self.speaker_net, speakers, a, mask)?;
                if mode.stop_label_residuals {
                    r1 = tape.stop_gradient(r1)?;
                }
                let b = tape.add(a, r1)?;
                let mut r2 = self.label_residual(tape, p, self.emotion_table, &self.emotion_net, emotions, b, mask)?;
                if mode.stop_label_residuals {
                    r2 = tape.stop_gradient(r2)?;
                }
                let c = tape.add(b, r2)?;
                (b, r1, c, r2)
            }
        };

        let (r3, prosody_encoded, prosody_predicted) = match &mode.prosody {
            ProsodyInput::Off => (zeros, None, None),
            ProsodyInput::Encoder(mel_avg) => {
                let input = tape.concat(&[*mel_avg, c])?;
                let r3 = self.prosody_net.forward(tape, p, input, mask)?;
                let pred = self.prosody_predictor.forward(tape, p, c, mask)?;
                (r3, Some(r3), Some(pred))
            }
            ProsodyInput::Predictor => {
                let pred = self.prosody_predictor.forward(tape, p, c, mask)?;
                (pred, None, Some(pred))
            }
        };
        let d = tape.add(c, r3)?;

        let log_duration = self.duration_predictor.forward(tape, p, d, mask)?;
        let pitch = self.pitch_predictor.forward(tape, p, d, mask)?;
        let pitch_condition = match &mode.variance {
            VarianceInput::GroundTruth { pitch, .. } => *pitch,
            VarianceInput::Predicted { pitch_shift, .. } => {
                let v = per_item(tape.value(pitch), pitch_shift, mask, |x, s| x + s)?;
                tape.constant(v)
            }
        };
        let r4 = self.scalar_residual(tape, p, &self.pitch_lift, &self.pitch_net, pitch_condition, d, mask)?;
        let e = tape.add(d, r4)?;

        let energy = self.energy_predictor.forward(tape, p, e, mask)?;
        let energy_condition = match &mode.variance {
            VarianceInput::GroundTruth { energy, .. } => *energy,
            VarianceInput::Predicted { energy_factor, .. } => {
                if let Some(g) = energy_factor.iter().find(|g| !(**g > 0.0)) {
                    return Err(Error::invalid(format!("energy factor must be positive, got {g}")));
                }
                let v = per_item(tape.value(energy), energy_factor, mask, |x, g| x * g)?;
                tape.constant(v)
            }
        };
        let r5 = self.scalar_residual(tape, p, &self.energy_lift, &self.energy_net, energy_condition, e, mask)?;
        let f = tape.add(e, r5)?;

        Ok(AdapterOutput {
            stages: [a, b, c, d, e, f],
            residuals: [r1, r2, r3, r4, r5],
            log_duration,
            pitch,
            energy,
            prosody_encoded,
            prosody_predicted,
            pitch_condition,
            energy_condition,
        })
    }
}

/// Applies `f(value, control[b])` to every valid entry of `[B, L, 1]`.
fn per_item(v: &Tensor, control: &[f64], mask: &Mask, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if control.len() != mask.batch() {
        return Err(Error::Mode(format!(
            "{} control values for a batch of {}",
            control.len(),
            mask.batch()
        )));
    }
    let mut out = v.clone();
    let l = mask.max_len();
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        let (b, t) = (i / l, i % l);
        *x = if mask.is_valid(b, t) { f(*x, control[b]) } else { 0.0 };
    }
    Ok(out)
}

/// Speaker and emotion embedding tables.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleTables {
    /// `[U, H]`
    pub speaker: Tensor,
    /// `[V, H]`
    pub emotion: Tensor,
}

/// Per-utterance record of every adapter stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTrace {
    /// `A..F`, each `[L, H]`.
    pub stages: Vec<Tensor>,
    /// `R1..R5`, each `[L, H]`.
    pub residuals: Vec<Tensor>,
    pub durations: Vec<usize>,
    pub log_duration: Vec<f64>,
    /// Predicted (unshifted) pitch and energy per phoneme.
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub phonemes: Vec<usize>,
    pub speaker: usize,
    pub emotion: usize,
    pub pitch_shift: f64,
    pub energy_factor: f64,
}

impl ProbeTrace {
    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    pub fn stage(&self, name: char) -> Result<&Tensor> {
        let i = STAGE_NAMES
            .iter()
            .position(|s| s.starts_with(name))
            .ok_or_else(|| Error::invalid(format!("unknown stage {name:?}; expected one of A..F")))?;
        Ok(&self.stages[i])
    }

    /// Checks `stage[k] == stage[k-1] + R[k]` for every stage and returns
    /// the largest deviation of `F - A` from the summed residuals.
    pub fn additivity_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..5 {
            let prev = self.stages[k].data();
            let next = self.stages[k + 1].data();
            let r = self.residuals[k].data();
            for i in 0..prev.len() {
                worst = worst.max((next[i] - (prev[i] + r[i])).abs());
            }
        }
        let a = self.stages[0].data();
        let f = self.stages[5].data();
        for i in 0..a.len() {
            let sum: f64 = self.residuals.iter().map(|r| r.data()[i]).sum();
            worst = worst.max((f[i] - a[i] - sum).abs());
        }
        worst
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut arrays = Vec::new();
        for (name, t) in STAGE_NAMES.iter().zip(&self.stages) {
            arrays.push(NamedArray::real(name, t.clone()));
        }
        for (name, t) in RESIDUAL_NAMES.iter().zip(&self.residuals) {
            arrays.push(NamedArray::real(name, t.clone()));
        }
        let vec1 = |v: &[f64]| Tensor::new(vec![v.len()], v.to_vec()).expect("non-empty trace");
        arrays.push(NamedArray::index("durations", self.durations.iter().map(|&d| d as u32).collect()));
        arrays.push(NamedArray::real("log_duration", vec1(&self.log_duration)));
        arrays.push(NamedArray::real("pitch_pred", vec1(&self.pitch)));
        arrays.push(NamedArray::real("energy_pred", vec1(&self.energy)));
        arrays.push(NamedArray::index("labels", vec![self.speaker as u32, self.emotion as u32]));
        arrays.push(NamedArray::index("phonemes", self.phonemes.iter().map(|&p| p as u32).collect()));
        arrays.push(NamedArray::real("controls", vec1(&[self.pitch_shift, self.energy_factor])));
        io::encode_blob(&arrays)
    }

    pub fn from_blob(bytes: &[u8], record: &str) -> Result<Self> {
        let arrays = io::decode_blob(bytes, record)?;
        let view = BlobView::new(&arrays, record);
        let stages = STAGE_NAMES.iter().map(|n| view.real(n)).collect::<Result<Vec<_>>>()?;
        let residuals = RESIDUAL_NAMES.iter().map(|n| view.real(n)).collect::<Result<Vec<_>>>()?;
        let labels = view.index("labels")?;
        let controls = view.real("controls")?.into_data();
        if labels.len() != 2 || controls.len() != 2 {
            return Err(Error::format(record, "labels and controls must have two entries"));
        }
        let trace = ProbeTrace {
            stages,
            residuals,
            durations: view.index("durations")?,
            log_duration: view.real("log_duration")?.into_data(),
            pitch: view.real("pitch_pred")?.into_data(),
            energy: view.real("energy_pred")?.into_data(),
            phonemes: view.index("phonemes")?,
            speaker: labels[0],
            emotion: labels[1],
            pitch_shift: controls[0],
            energy_factor: controls[1],
        };
        let l = trace.phonemes.len();
        let consistent = trace
            .stages
            .iter()
            .chain(&trace.residuals)
            .all(|t| t.shape().len() == 2 && t.shape()[0] == l && t.shape() == trace.stages[0].shape())
            && trace.durations.len() == l
            && trace.pitch.len() == l
            && trace.energy.len() == l;
        if !consistent {
            return Err(Error::format(record, "trace arrays disagree on phoneme count"));
        }
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use crate::numerics::{random_tensor, TapeMode};
    use std::collections::BTreeSet;

    fn toy() -> Model {
        let mut m = Model::new(ModelConfig::toy()).unwrap();
        let tables = StyleTables {
            speaker: random_tensor(&[4, 64], 21),
            emotion: random_tensor(&[3, 64], 22),
        };
        m.install_tables(&tables).unwrap();
        m
    }

    fn randomize(m: &mut Model, nets: &[&str]) {
        for (i, name) in nets.iter().enumerate() {
            let id = m.store.id(&format!("{name}.net.out.w")).unwrap();
            let shape = m.store.value(id).shape().to_vec();
            m.store.set(id, random_tensor(&shape, 100 + i as u64)).unwrap();
        }
    }

    fn zero(m: &mut Model, nets: &[&str]) {
        for name in nets {
            for part in ["w", "b"] {
                let id = m.store.id(&format!("{name}.net.out.{part}")).unwrap();
                let shape = m.store.value(id).shape().to_vec();
                m.store.set(id, Tensor::zeros(&shape)).unwrap();
            }
        }
    }

    fn labels(speaker: usize, emotion: usize) -> StyleInput {
        StyleInput::Labels {
            speakers: vec![speaker],
            emotions: vec![emotion],
        }
    }

    fn predicted() -> VarianceInput {
        VarianceInput::Predicted {
            pitch_shift: vec![0.0],
            energy_factor: vec![1.0],
        }
    }

    /// Inference forward on one phoneme sequence; returns the stage values.
    fn stages(m: &Model, phonemes: &[usize], style: StyleInput) -> Vec<Tensor> {
        let mut tape = Tape::new(TapeMode::inference());
        let p = m.store.bind(&mut tape);
        let mask = Mask::full(1, phonemes.len());
        let a = m.encoder.forward(&mut tape, &p, phonemes, &mask).unwrap();
        let mode = AdapterMode {
            style,
            prosody: ProsodyInput::Off,
            variance: predicted(),
            stop_label_residuals: false,
        };
        let out = m.adapter.forward(&mut tape, &p, a, &mask, &mode).unwrap();
        out.stages.iter().map(|&v| tape.value(v).clone()).collect()
    }

    #[test]
    fn apply_style_broadcasts() {
        let mut tape = Tape::new(TapeMode::inference());
        let e = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let s = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let (out, r) = apply_style(&mut tape, e, s, &Mask::full(1, 2)).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 1.0, 1.0, 2.0]);
        assert_eq!(tape.value(r).data(), &[1.0, 1.0, 1.0, 1.0]);

        let zero = tape.constant(Tensor::zeros(&[1, 2]));
        let (same, _) = apply_style(&mut tape, e, zero, &Mask::full(1, 2)).unwrap();
        assert_eq!(tape.value(same), tape.value(e));
    }

    #[test]
    fn zero_nets_leave_table_rows() {
        let m = toy();
        let st = stages(&m, &[2, 7, 7, 1], labels(1, 2));
        let mu_s = m.store.value(m.adapter.speaker_table).row(1).to_vec();
        let mu_e = m.store.value(m.adapter.emotion_table).row(2).to_vec();
        let h = 64;
        for i in 0..4 {
            for j in 0..h {
                let k = i * h + j;
                let (a, b, c) = (st[0].data()[k], st[1].data()[k], st[2].data()[k]);
                assert!((b - a - mu_s[j]).abs() < 1e-12);
                assert!((c - b - mu_e[j]).abs() < 1e-12);
            }
        }
        // Prosody is off and the pitch/energy nets start at zero.
        assert_eq!(st[3], st[2]);
        assert_eq!(st[4], st[3]);
        assert_eq!(st[5], st[4]);
    }

    #[test]
    fn seeded_speaker_net_adapts_per_phoneme() {
        let mut m = toy();
        randomize(&mut m, &["speaker_encoder"]);
        let st = stages(&m, &[2, 9], labels(0, 0));
        let h = 64;
        let r: Vec<f64> = st[1].data().iter().zip(st[0].data()).map(|(b, a)| b - a).collect();
        assert!(r[..h].iter().zip(&r[h..]).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn changing_emotion_changes_stages_from_c_on() {
        let mut m = toy();
        zero(&mut m, &["speaker_encoder", "prosody_encoder", "pitch_encoder", "energy_encoder"]);
        randomize(&mut m, &["emotion_encoder"]);
        let x = stages(&m, &[3, 4, 5], labels(2, 0));
        let y = stages(&m, &[3, 4, 5], labels(2, 1));
        assert_eq!(x[0], y[0]);
        assert_eq!(x[1], y[1]);
        for k in 2..6 {
            assert_ne!(x[k], y[k], "stage {}", STAGE_NAMES[k]);
        }
    }

    #[test]
    fn emotion_then_speaker_differs_from_speaker_then_emotion() {
        let mut m = toy();
        randomize(&mut m, &["speaker_encoder", "emotion_encoder"]);
        let ad = &m.adapter;
        let mut tape = Tape::new(TapeMode::inference());
        let p = m.store.bind(&mut tape);
        let mask = Mask::full(1, 3);
        let a = m.encoder.forward(&mut tape, &p, &[1, 2, 3], &mask).unwrap();
        let r1 = ad.label_residual(&mut tape, &p, ad.speaker_table, &ad.speaker_net, &[1], a, &mask).unwrap();
        let b = tape.add(a, r1).unwrap();
        let r2 = ad.label_residual(&mut tape, &p, ad.emotion_table, &ad.emotion_net, &[2], b, &mask).unwrap();
        let forward = tape.add(b, r2).unwrap();

        let r2 = ad.label_residual(&mut tape, &p, ad.emotion_table, &ad.emotion_net, &[2], a, &mask).unwrap();
        let b = tape.add(a, r2).unwrap();
        let r1 = ad.label_residual(&mut tape, &p, ad.speaker_table, &ad.speaker_net, &[1], b, &mask).unwrap();
        let swapped = tape.add(b, r1).unwrap();
        assert!(tape.value(forward).max_abs_diff(tape.value(swapped)) > 1e-6);
    }

    fn training_forward(m: &Model, stop: bool) -> (Tape, Bound, AdapterOutput) {
        let mut tape = Tape::new(TapeMode::training(0));
        let p = m.store.bind(&mut tape);
        let mask = Mask::full(1, 3);
        let a = m.encoder.forward(&mut tape, &p, &[1, 2, 3], &mask).unwrap();
        let mode = AdapterMode {
            style: labels(0, 1),
            prosody: ProsodyInput::Encoder(tape.constant(random_tensor(&[1, 3, 16], 4))),
            variance: VarianceInput::GroundTruth {
                pitch: tape.constant(random_tensor(&[1, 3, 1], 5)),
                energy: tape.constant(random_tensor(&[1, 3, 1], 6)),
            },
            stop_label_residuals: stop,
        };
        let out = m.adapter.forward(&mut tape, &p, a, &mask, &mode).unwrap();
        (tape, p, out)
    }

    fn grad_norm(tape: &Tape, p: &Bound, m: &Model, loss: Var, prefix: &str) -> f64 {
        let g = tape.backward(loss).unwrap();
        m.store
            .iter()
            .filter(|(_, q)| q.name.starts_with(prefix))
            .map(|(id, _)| g.get(p.var(id)).map_or(0.0, |v| v.iter().map(|x| x.abs()).sum()))
            .sum()
    }

    #[test]
    fn table_rows_receive_no_gradient() {
        let mut m = toy();
        randomize(&mut m, &["speaker_encoder", "emotion_encoder"]);
        m.store.set_frozen(m.adapter.speaker_table, false);
        m.store.set_frozen(m.adapter.emotion_table, false);
        let (mut tape, p, out) = training_forward(&m, false);
        let loss = tape.sum(out.last()).unwrap();
        assert!(tape.requires_grad(p.var(m.adapter.speaker_table)));
        assert_eq!(grad_norm(&tape, &p, &m, loss, "tables."), 0.0);
        assert!(grad_norm(&tape, &p, &m, loss, "speaker_encoder.") > 0.0);
    }

    #[test]
    fn stopped_label_residuals_block_encoder_gradients() {
        let mut m = toy();
        randomize(&mut m, &["speaker_encoder", "emotion_encoder", "prosody_encoder"]);
        let (mut tape, p, out) = training_forward(&m, true);
        let loss = tape.sum(out.last()).unwrap();
        assert_eq!(grad_norm(&tape, &p, &m, loss, "speaker_encoder."), 0.0);
        assert_eq!(grad_norm(&tape, &p, &m, loss, "emotion_encoder."), 0.0);
        assert!(grad_norm(&tape, &p, &m, loss, "prosody_encoder.") > 0.0);
    }

    /// Stage labels reached from `out` without passing through a stage.
    fn stage_inputs(tape: &Tape, out: Var, stages: &[Var; 6]) -> BTreeSet<&'static str> {
        let mut found = BTreeSet::new();
        let mut seen = BTreeSet::new();
        let mut stack = vec![out];
        while let Some(v) = stack.pop() {
            if !seen.insert(v.index()) {
                continue;
            }
            if let Some(k) = stages.iter().position(|s| *s == v) {
                found.insert(STAGE_NAMES[k]);
                continue;
            }
            stack.extend(tape.inputs_of(v));
        }
        found
    }

    #[test]
    fn predictors_read_the_documented_stages() {
        let m = toy();
        let (tape, _, out) = training_forward(&m, false);
        assert_eq!(stage_inputs(&tape, out.log_duration, &out.stages), BTreeSet::from(["D"]));
        assert_eq!(stage_inputs(&tape, out.pitch, &out.stages), BTreeSet::from(["D"]));
        assert_eq!(stage_inputs(&tape, out.energy, &out.stages), BTreeSet::from(["E"]));
        assert_eq!(
            stage_inputs(&tape, out.prosody_predicted.unwrap(), &out.stages),
            BTreeSet::from(["C"])
        );
    }

    /// `energy_factor` of `None` selects ground-truth conditioning.
    fn run_mode(
        m: &Model,
        training: bool,
        style: fn(&mut Tape) -> StyleInput,
        prosody: fn(&mut Tape) -> ProsodyInput,
        energy_factor: Option<f64>,
    ) -> Result<()> {
        let mask = Mask::full(1, 2);
        let mut tape = Tape::new(if training { TapeMode::training(0) } else { TapeMode::inference() });
        let p = m.store.bind(&mut tape);
        let a = m.encoder.forward(&mut tape, &p, &[1, 2], &mask)?;
        let variance = match energy_factor {
            None => VarianceInput::GroundTruth {
                pitch: tape.constant(Tensor::zeros(&[1, 2, 1])),
                energy: tape.constant(Tensor::zeros(&[1, 2, 1])),
            },
            Some(g) => VarianceInput::Predicted {
                pitch_shift: vec![0.0],
                energy_factor: vec![g],
            },
        };
        let mode = AdapterMode {
            style: style(&mut tape),
            prosody: prosody(&mut tape),
            variance,
            stop_label_residuals: false,
        };
        m.adapter.forward(&mut tape, &p, a, &mask, &mode).map(|_| ())
    }

    #[test]
    fn mode_conflicts_are_errors() {
        let m = toy();
        let lab: fn(&mut Tape) -> StyleInput = |_| labels(0, 0);
        let reference: fn(&mut Tape) -> StyleInput = |t| StyleInput::Reference(t.constant(Tensor::zeros(&[1, 64])));
        let unknown: fn(&mut Tape) -> StyleInput = |_| labels(4, 0);
        let off: fn(&mut Tape) -> ProsodyInput = |_| ProsodyInput::Off;
        let enc: fn(&mut Tape) -> ProsodyInput = |t| ProsodyInput::Encoder(t.constant(Tensor::zeros(&[1, 2, 16])));

        assert!(run_mode(&m, true, lab, off, None).is_ok());
        assert!(run_mode(&m, true, reference, off, None).is_ok());
        assert!(run_mode(&m, false, lab, off, Some(1.0)).is_ok());
        assert!(matches!(run_mode(&m, false, lab, off, None), Err(Error::Mode(_))));
        assert!(matches!(run_mode(&m, true, lab, off, Some(1.0)), Err(Error::Mode(_))));
        assert!(matches!(run_mode(&m, false, lab, enc, Some(1.0)), Err(Error::Mode(_))));
        assert!(matches!(run_mode(&m, true, reference, enc, None), Err(Error::Mode(_))));
        assert!(run_mode(&m, false, lab, off, Some(0.0)).is_err());
        assert!(run_mode(&m, false, lab, off, Some(-1.0)).is_err());
        assert!(matches!(
            run_mode(&m, false, unknown, off, Some(1.0)),
            Err(Error::UnknownLabel { kind: "speaker", id: 4, .. })
        ));
    }

    #[test]
    fn trace_round_trips_through_blob() {
        let mut m = toy();
        randomize(&mut m, &["speaker_encoder", "emotion_encoder", "pitch_encoder", "energy_encoder"]);
        zero(&mut m, &["duration_predictor"]);
        let bias = m.store.id("duration_predictor.net.out.b").unwrap();
        m.store.set(bias, Tensor::full(&[1], 3f64.ln())).unwrap();
        let (_, trace) = m.synthesize(&[1, 2, 3, 4], 1, 2, 0.2, 1.3).unwrap();
        assert_eq!(trace.durations, vec![2; 4]);
        assert!(trace.additivity_error() < 1e-9);
        let back = ProbeTrace::from_blob(&trace.to_blob(), "t").unwrap();
        assert_eq!(back, trace);
        assert_eq!(back.stage('F').unwrap(), &trace.stages[5]);
        assert!(back.stage('G').is_err());
        assert!(ProbeTrace::from_blob(&trace.to_blob()[..20], "t").is_err());
    }
}
