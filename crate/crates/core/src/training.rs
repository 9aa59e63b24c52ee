//! Three-phase training, table distillation and the augmentation stream.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::StyleTables;
use crate::backbone::{Group, ParamId};
use crate::config::TrainConfig;
use crate::corpus::{augment, Utterance, ENERGY_FACTOR_RANGE, PITCH_SHIFT_RANGE};
use crate::error::{Error, Result};
use crate::model::{Batch, Model, TrainForward};
use crate::numerics::{Tape, TapeMode, Tensor, Var};

/// Loss values of one step. `total` is the plain sum of the active terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub mel: f64,
    pub duration: f64,
    pub pitch: f64,
    pub energy: f64,
    pub prosody: Option<f64>,
    pub total: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [self.mel, self.duration, self.pitch, self.energy, self.prosody.unwrap_or(0.0), self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("L_Mel", self.mel),
            ("L_duration", self.duration),
            ("L_pitch", self.pitch),
            ("L_energy", self.energy),
            ("L_pros", self.prosody.unwrap_or(0.0)),
            ("L_total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    /// `step, L_Mel, L_dur, L_pitch, L_energy, L_pros, L_total`, tab-separated.
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "{step}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}",
            self.mel,
            self.duration,
            self.pitch,
            self.energy,
            self.prosody.unwrap_or(0.0),
            self.total
        )
    }
}

pub const LOG_HEADER: &str = "step\tL_Mel\tL_dur\tL_pitch\tL_energy\tL_pros\tL_total";

/// Builds the loss terms of a training forward pass. Padding is excluded
/// from every reduction.
pub fn compute_losses(tape: &mut Tape, fwd: &TrainForward, batch: &Batch) -> Result<(Var, LossReport)> {
    let mel = tape.mae(fwd.mel, fwd.mel_target, Some(&batch.frame_mask))?;
    let dur_t = tape.constant(batch.log_duration_target.clone());
    let duration = tape.mse(fwd.adapter.log_duration, dur_t, Some(&batch.phoneme_mask))?;
    let pitch_t = tape.constant(batch.pitch_target.clone());
    let pitch = tape.mse(fwd.adapter.pitch, pitch_t, Some(&batch.phoneme_mask))?;
    let energy_t = tape.constant(batch.energy_target.clone());
    let energy = tape.mse(fwd.adapter.energy, energy_t, Some(&batch.phoneme_mask))?;
    let mut total = tape.add(mel, duration)?;
    total = tape.add(total, pitch)?;
    total = tape.add(total, energy)?;
    let mut prosody = None;
    if let (Some(enc), Some(pred)) = (fwd.adapter.prosody_encoded, fwd.adapter.prosody_predicted) {
        let pros = tape.mse(enc, pred, Some(&batch.phoneme_mask))?;
        total = tape.add(total, pros)?;
        prosody = Some(tape.value(pros).item());
    }
    let report = LossReport {
        mel: tape.value(mel).item(),
        duration: tape.value(duration).item(),
        pitch: tape.value(pitch).item(),
        energy: tape.value(energy).item(),
        prosody,
        total: tape.value(total).item(),
    };
    Ok((total, report))
}

/// Groups whose parameters stay fixed in each phase.
pub fn frozen_groups(phase: u8) -> Result<&'static [Group]> {
    match phase {
        1 => Ok(&[
            Group::SpeakerEncoder,
            Group::EmotionEncoder,
            Group::ProsodyEncoder,
            Group::ProsodyPredictor,
            Group::Tables,
        ]),
        2 => Ok(&[
            Group::StyleEncoder,
            Group::Tables,
            Group::ProsodyEncoder,
            Group::ProsodyPredictor,
        ]),
        3 => Ok(&[
            Group::StyleEncoder,
            Group::Tables,
            Group::SpeakerEncoder,
            Group::EmotionEncoder,
        ]),
        other => Err(Error::Mode(format!("no training phase {other}"))),
    }
}

/// One entry of the training stream: an utterance index and the shifts to
/// apply to it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub pitch_shift: f64,
    pub energy_factor: f64,
}

impl Sample {
    pub fn is_augmented(&self) -> bool {
        self.pitch_shift != 0.0 || self.energy_factor != 1.0
    }

    pub fn materialize(&self, utts: &[Utterance]) -> Result<Utterance> {
        let u = &utts[self.index];
        if self.is_augmented() {
            augment(u, self.pitch_shift, self.energy_factor)
        } else {
            Ok(u.clone())
        }
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// One epoch of the training stream: every original once, plus
/// `floor(fraction * n)` augmented copies of distinct originals, shuffled.
pub fn augmentation_schedule(n: usize, fraction: f64, seed: u64, epoch: u64) -> Result<Vec<Sample>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("augmentation fraction {fraction} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch));
    let mut out: Vec<Sample> = (0..n)
        .map(|index| Sample {
            index,
            pitch_shift: 0.0,
            energy_factor: 1.0,
        })
        .collect();
    let extra = (fraction * n as f64).floor() as usize;
    let mut sources: Vec<usize> = (0..n).collect();
    sources.shuffle(&mut rng);
    for &index in sources.iter().take(extra) {
        out.push(Sample {
            index,
            pitch_shift: rng.gen_range(PITCH_SHIFT_RANGE.0..=PITCH_SHIFT_RANGE.1),
            energy_factor: rng.gen_range(ENERGY_FACTOR_RANGE.0..=ENERGY_FACTOR_RANGE.1),
        });
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Endless batches drawn epoch by epoch from [`augmentation_schedule`].
pub struct SampleStream {
    n: usize,
    fraction: f64,
    seed: u64,
    epoch: u64,
    queue: Vec<Sample>,
    pos: usize,
}

impl SampleStream {
    pub fn new(n: usize, fraction: f64, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("no training utterances"));
        }
        let queue = augmentation_schedule(n, fraction, seed, 0)?;
        Ok(SampleStream {
            n,
            fraction,
            seed,
            epoch: 0,
            queue,
            pos: 0,
        })
    }

    pub fn next_batch(&mut self, size: usize) -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.queue.len() {
                self.epoch += 1;
                self.queue = augmentation_schedule(self.n, self.fraction, self.seed, self.epoch)?;
                self.pos = 0;
            }
            out.push(self.queue[self.pos]);
            self.pos += 1;
        }
        Ok(out)
    }
}

/// Adam with bias correction and linear warmup.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(param_sizes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// Applies one update to `value` for parameter slot `i`; call
    /// [`Adam::tick`] once per step first.
    pub fn update(&mut self, i: usize, value: &mut [f64], grad: &[f64], lr: f64) {
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (m, v) = (&mut self.m[i], &mut self.v[i]);
        for j in 0..value.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * grad[j];
            v[j] = b2 * v[j] + (1.0 - b2) * grad[j] * grad[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            value[j] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }

    pub fn tick(&mut self) {
        self.t += 1;
    }
}

pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.warmup_steps == 0 {
        cfg.learning_rate
    } else {
        cfg.learning_rate * ((step as f64) / cfg.warmup_steps as f64).min(1.0)
    }
}

/// Settings of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseConfig {
    pub phase: u8,
    pub steps: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl PhaseConfig {
    pub fn new(phase: u8, seed: u64, train: &TrainConfig) -> Result<Self> {
        train.validate()?;
        if !(1..=3).contains(&phase) {
            return Err(Error::Mode(format!("no training phase {phase}")));
        }
        Ok(PhaseConfig {
            phase,
            steps: train.steps[phase as usize - 1],
            seed,
            train: train.clone(),
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct PhaseSummary {
    pub losses: Vec<LossReport>,
}

impl PhaseSummary {
    pub fn first(&self) -> Option<&LossReport> {
        self.losses.first()
    }

    pub fn last(&self) -> Option<&LossReport> {
        self.losses.last()
    }
}

fn check_prerequisites(model: &Model, phase: u8) -> Result<()> {
    match phase {
        1 => Ok(()),
        2 if model.phase < 1 || !model.tables_present => Err(Error::Mode(
            "phase 2 needs a phase-1 checkpoint with distilled tables".into(),
        )),
        3 if model.phase < 2 => Err(Error::Mode("phase 3 needs a phase-2 checkpoint".into())),
        2 | 3 => Ok(()),
        other => Err(Error::Mode(format!("no training phase {other}"))),
    }
}

/// Trains `model` for `cfg.steps` steps of phase `cfg.phase` on `utts`.
/// Each step's losses are appended to `log` when given.
pub fn train_phase(
    model: &mut Model,
    utts: &[Utterance],
    cfg: &PhaseConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<PhaseSummary> {
    check_prerequisites(model, cfg.phase)?;
    let t = &cfg.train;
    model.store.freeze_only(frozen_groups(cfg.phase)?);
    let trainable: Vec<ParamId> = model
        .store
        .iter()
        .map(|(id, _)| id)
        .filter(|&id| model.store.is_trainable(id))
        .collect();
    let sizes: Vec<usize> = trainable.iter().map(|&id| model.store.value(id).numel()).collect();
    let mut adam = Adam::new(&sizes, t.beta1, t.beta2, t.adam_eps);
    let mut stream = SampleStream::new(utts.len(), t.augment_fraction, mix_seed(cfg.seed, cfg.phase as u64))?;
    let deterministic = model.config.dropout == 0.0 && model.config.variance_dropout == 0.0;
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}").map_err(|e| Error::invalid(format!("writing log: {e}")))?;
    }
    let mut summary = PhaseSummary::default();
    for step in 1..=cfg.steps {
        let samples = stream.next_batch(t.batch_size)?;
        let owned = samples
            .iter()
            .map(|s| s.materialize(utts))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Utterance> = owned.iter().collect();
        let batch = Batch::new(&refs)?;

        let mode = TapeMode {
            training: true,
            deterministic,
            strict: true,
            seed: mix_seed(cfg.seed, 1_000_000 + step as u64),
        };
        let mut tape = Tape::new(mode);
        let bound = model.store.bind(&mut tape);
        let diverged = |e: Error| match e {
            Error::NonFinite { op } => Error::Diverged { step, term: op },
            other => other,
        };
        let fwd = model.forward_train(&mut tape, &bound, &batch, cfg.phase).map_err(diverged)?;
        let (total, report) = compute_losses(&mut tape, &fwd, &batch).map_err(diverged)?;
        if let Some(term) = report.first_non_finite() {
            return Err(Error::Diverged { step, term });
        }
        let grads = tape.backward(total).map_err(diverged)?;

        let mut gs: Vec<Vec<f64>> = trainable
            .iter()
            .zip(&sizes)
            .map(|(&id, &n)| grads.get_or_zeros(bound.var(id), n))
            .collect();
        let norm = gs.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged { step, term: "gradient" });
        }
        if t.grad_clip > 0.0 && norm > t.grad_clip {
            let s = t.grad_clip / norm;
            gs.iter_mut().flatten().for_each(|g| *g *= s);
        }
        adam.tick();
        let lr = learning_rate(t, step);
        for (i, (&id, g)) in trainable.iter().zip(&gs).enumerate() {
            let mut value = model.store.value(id).clone();
            adam.update(i, value.data_mut(), g, lr);
            model.store.set(id, value)?;
        }
        if cfg.phase == 1 {
            model.update_running_stats(&fwd.style_stats, t.bn_momentum)?;
        }
        model.step += 1;
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", report.log_line(model.step)).map_err(|e| Error::invalid(format!("writing log: {e}")))?;
        }
        summary.losses.push(report);
    }
    model.phase = cfg.phase;
    Ok(summary)
}

/// Teacher-forced losses of phase `phase` on `utts` as one batch, with
/// dropout off. Batch normalization uses the statistics of that batch.
pub fn evaluate(model: &Model, utts: &[Utterance], phase: u8) -> Result<LossReport> {
    let refs: Vec<&Utterance> = utts.iter().collect();
    let batch = Batch::new(&refs)?;
    let mut tape = Tape::new(TapeMode::training(0));
    let bound = model.store.bind(&mut tape);
    let fwd = model.forward_train(&mut tape, &bound, &batch, phase)?;
    Ok(compute_losses(&mut tape, &fwd, &batch)?.1)
}

/// Speaker and emotion tables from per-utterance style embeddings:
/// `mu_s[u]` is the mean embedding of speaker `u`, `mu_e[v]` the mean of
/// `S - mu_s[speaker]` over emotion `v`.
pub fn distill_from_embeddings(
    embeddings: &[Vec<f64>],
    speakers: &[usize],
    emotions: &[usize],
    n_speakers: usize,
    n_emotions: usize,
) -> Result<StyleTables> {
    if embeddings.is_empty() || embeddings.len() != speakers.len() || speakers.len() != emotions.len() {
        return Err(Error::invalid("embedding and label counts differ"));
    }
    let h = embeddings[0].len();
    let mut mu_s = vec![vec![0.0; h]; n_speakers];
    let mut count_s = vec![0usize; n_speakers];
    for (e, &s) in embeddings.iter().zip(speakers) {
        if s >= n_speakers {
            return Err(Error::UnknownLabel {
                kind: "speaker",
                id: s,
                limit: n_speakers,
            });
        }
        count_s[s] += 1;
        mu_s[s].iter_mut().zip(e).for_each(|(a, x)| *a += x);
    }
    for (u, (row, &n)) in mu_s.iter_mut().zip(&count_s).enumerate() {
        if n == 0 {
            return Err(Error::EmptyLabel { kind: "speaker", id: u });
        }
        row.iter_mut().for_each(|a| *a /= n as f64);
    }
    let mut mu_e = vec![vec![0.0; h]; n_emotions];
    let mut count_e = vec![0usize; n_emotions];
    for ((e, &s), &v) in embeddings.iter().zip(speakers).zip(emotions) {
        if v >= n_emotions {
            return Err(Error::UnknownLabel {
                kind: "emotion",
                id: v,
                limit: n_emotions,
            });
        }
        count_e[v] += 1;
        for ((a, x), m) in mu_e[v].iter_mut().zip(e).zip(&mu_s[s]) {
            *a += x - m;
        }
    }
    for (v, (row, &n)) in mu_e.iter_mut().zip(&count_e).enumerate() {
        if n == 0 {
            return Err(Error::EmptyLabel { kind: "emotion", id: v });
        }
        row.iter_mut().for_each(|a| *a /= n as f64);
    }
    Ok(StyleTables {
        speaker: Tensor::from_rows(&mu_s)?,
        emotion: Tensor::from_rows(&mu_e)?,
    })
}

/// Style embeddings of every utterance (running batch-norm statistics, no
/// dropout), one at a time.
pub fn style_embeddings(model: &Model, utts: &[Utterance]) -> Result<Vec<Vec<f64>>> {
    utts.iter().map(|u| model.style_embedding(&u.mel)).collect()
}

/// Distills tables from a phase-1 model and installs them, frozen.
pub fn distill_tables(model: &mut Model, utts: &[Utterance]) -> Result<StyleTables> {
    if model.phase < 1 {
        return Err(Error::Mode("distillation needs a phase-1 checkpoint".into()));
    }
    let emb = style_embeddings(model, utts)?;
    let speakers: Vec<usize> = utts.iter().map(|u| u.speaker).collect();
    let emotions: Vec<usize> = utts.iter().map(|u| u.emotion).collect();
    let tables = distill_from_embeddings(&emb, &speakers, &emotions, model.config.speakers, model.config.emotions)?;
    model.install_tables(&tables)?;
    Ok(tables)
}
