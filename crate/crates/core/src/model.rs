//! The full acoustic model: parameters, batched forward passes, inference
//! and checkpoints.

use std::fs;
use std::path::Path;

use crate::adapter::{Adapter, AdapterMode, AdapterOutput, ProbeTrace, ProsodyInput, StyleInput, VarianceInput};
use crate::backbone::layers::Builder;
use crate::backbone::{length_regulate, Decoder, Group, ParamKind, ParameterStore, PhonemeEncoder, StyleEncoder};
use crate::backbone::Bound;
use crate::config::ModelConfig;
use crate::corpus::{self, Utterance, ENERGY_FACTOR_RANGE, PITCH_SHIFT_RANGE};
use crate::error::{Error, Result};
use crate::io::{self, record_fields, BlobView, KeyValues, NamedArray};
use crate::numerics::{BatchStats, Initializer, Mask, Tape, TapeMode, Tensor, Var};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub encoder: PhonemeEncoder,
    pub decoder: Decoder,
    pub style: StyleEncoder,
    pub adapter: Adapter,
    /// Last completed training phase (0 when untrained).
    pub phase: u8,
    pub step: usize,
    pub tables_present: bool,
}

/// Padded training batch built from (possibly augmented) utterances.
#[derive(Clone, Debug)]
pub struct Batch {
    pub phonemes: Vec<usize>,
    pub phoneme_mask: Mask,
    pub durations: Vec<Vec<usize>>,
    /// `[B, T, M]`
    pub mel: Tensor,
    pub frame_mask: Mask,
    /// `[B, L, M]`
    pub mel_avg: Tensor,
    /// Conditioning values including the sample's shifts, `[B, L, 1]`.
    pub pitch_condition: Tensor,
    pub energy_condition: Tensor,
    /// Unshifted prediction targets, `[B, L, 1]`.
    pub pitch_target: Tensor,
    pub energy_target: Tensor,
    /// `log(1 + d)`, `[B, L, 1]`.
    pub log_duration_target: Tensor,
    pub speakers: Vec<usize>,
    pub emotions: Vec<usize>,
}

impl Batch {
    pub fn new(utts: &[&Utterance]) -> Result<Self> {
        if utts.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let b = utts.len();
        let l = utts.iter().map(|u| u.len()).max().unwrap();
        let t = utts.iter().map(|u| u.frames()).max().unwrap();
        let m = utts[0].mel.last_dim();
        let mut phonemes = vec![0; b * l];
        let mut mel = vec![0.0; b * t * m];
        let mut mel_avg = vec![0.0; b * l * m];
        let mut pc = vec![0.0; b * l];
        let mut ec = vec![0.0; b * l];
        let mut pt = vec![0.0; b * l];
        let mut et = vec![0.0; b * l];
        let mut ld = vec![0.0; b * l];
        for (bi, u) in utts.iter().enumerate() {
            u.check()?;
            if u.mel.last_dim() != m {
                return Err(Error::invalid("batch items disagree on mel dimension"));
            }
            let (pitch, energy) = corpus::phoneme_level_targets(u)?;
            let avg = corpus::mel_to_phoneme_avg(&u.mel, &u.durations)?;
            mel[bi * t * m..bi * t * m + u.mel.numel()].copy_from_slice(u.mel.data());
            mel_avg[bi * l * m..bi * l * m + avg.numel()].copy_from_slice(avg.data());
            for i in 0..u.len() {
                let j = bi * l + i;
                phonemes[j] = u.phonemes[i];
                pc[j] = pitch[i];
                ec[j] = energy[i];
                pt[j] = pitch[i] - u.pitch_shift;
                et[j] = energy[i] / u.energy_factor;
                ld[j] = (1.0 + u.durations[i] as f64).ln();
            }
        }
        let col = |v: Vec<f64>| Tensor::new(vec![b, l, 1], v);
        Ok(Batch {
            phonemes,
            phoneme_mask: Mask::from_lengths(&utts.iter().map(|u| u.len()).collect::<Vec<_>>(), l),
            durations: utts.iter().map(|u| u.durations.clone()).collect(),
            mel: Tensor::new(vec![b, t, m], mel)?,
            frame_mask: Mask::from_lengths(&utts.iter().map(|u| u.frames()).collect::<Vec<_>>(), t),
            mel_avg: Tensor::new(vec![b, l, m], mel_avg)?,
            pitch_condition: col(pc)?,
            energy_condition: col(ec)?,
            pitch_target: col(pt)?,
            energy_target: col(et)?,
            log_duration_target: col(ld)?,
            speakers: utts.iter().map(|u| u.speaker).collect(),
            emotions: utts.iter().map(|u| u.emotion).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }
}

/// Graph handles of one training forward pass.
#[derive(Clone, Debug)]
pub struct TrainForward {
    pub mel: Var,
    pub mel_target: Var,
    pub adapter: AdapterOutput,
    pub style: Option<Var>,
    pub style_stats: Vec<BatchStats>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let mut init = Initializer::new(config.seed);
        let mut b = Builder::new(&mut store, &mut init, Group::PhonemeEncoder, "phoneme_encoder");
        let encoder = PhonemeEncoder::build(&mut b, &config)?;
        let decoder = Decoder::build(&mut b.scoped(Group::Decoder, "decoder"), &config)?;
        let style = StyleEncoder::build(&mut b.scoped(Group::StyleEncoder, "style_encoder"), &config)?;
        let adapter = Adapter::build(&mut b, &config)?;
        Ok(Model {
            config,
            store,
            encoder,
            decoder,
            style,
            adapter,
            phase: 0,
            step: 0,
            tables_present: false,
        })
    }

    /// Forward pass of training phase `phase` with ground-truth durations
    /// and variance conditioning.
    pub fn forward_train(&self, tape: &mut Tape, p: &Bound, batch: &Batch, phase: u8) -> Result<TrainForward> {
        let mel_target = tape.constant(batch.mel.clone());
        let a = self.encoder.forward(tape, p, &batch.phonemes, &batch.phoneme_mask)?;
        let mut style_var = None;
        let mut style_stats = Vec::new();
        let style = match phase {
            1 => {
                let out = self.style.forward(tape, p, mel_target, &batch.frame_mask)?;
                style_var = Some(out.style);
                style_stats = out.batch_stats;
                StyleInput::Reference(out.style)
            }
            2 | 3 => StyleInput::Labels {
                speakers: batch.speakers.clone(),
                emotions: batch.emotions.clone(),
            },
            other => return Err(Error::Mode(format!("no training phase {other}"))),
        };
        let prosody = if phase == 3 {
            ProsodyInput::Encoder(tape.constant(batch.mel_avg.clone()))
        } else {
            ProsodyInput::Off
        };
        let variance = VarianceInput::GroundTruth {
            pitch: tape.constant(batch.pitch_condition.clone()),
            energy: tape.constant(batch.energy_condition.clone()),
        };
        let mode = AdapterMode {
            style,
            prosody,
            variance,
            stop_label_residuals: phase == 3,
        };
        let adapter = self.adapter.forward(tape, p, a, &batch.phoneme_mask, &mode)?;
        let (expanded, frame_mask) = length_regulate(tape, adapter.last(), &batch.durations)?;
        if frame_mask != batch.frame_mask {
            return Err(Error::invalid("durations disagree with mel frame counts"));
        }
        let mel = self.decoder.forward(tape, p, expanded, &frame_mask)?;
        Ok(TrainForward {
            mel,
            mel_target,
            adapter,
            style: style_var,
            style_stats,
        })
    }

    /// Style embedding `S(x)` of one mel `[T, M]` with running statistics.
    pub fn style_embedding(&self, mel: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new(TapeMode::inference());
        let p = self.store.bind(&mut tape);
        let t = mel.shape()[0];
        let x = tape.constant(mel.clone().reshape(vec![1, t, mel.last_dim()])?);
        let out = self.style.forward(&mut tape, &p, x, &Mask::full(1, t))?;
        Ok(tape.value(out.style).data().to_vec())
    }

    /// Label-path inference with predicted durations, pitch and energy.
    pub fn synthesize(
        &self,
        phonemes: &[usize],
        speaker: usize,
        emotion: usize,
        pitch_shift: f64,
        energy_factor: f64,
    ) -> Result<(Tensor, ProbeTrace)> {
        if !self.tables_present {
            return Err(Error::Mode(
                "label-path synthesis needs distilled speaker and emotion tables (run distillation after phase 1)".into(),
            ));
        }
        if phonemes.is_empty() {
            return Err(Error::invalid("empty phoneme sequence"));
        }
        if !(PITCH_SHIFT_RANGE.0..=PITCH_SHIFT_RANGE.1).contains(&pitch_shift) {
            return Err(Error::invalid(format!(
                "pitch shift {pitch_shift} outside [{}, {}]",
                PITCH_SHIFT_RANGE.0, PITCH_SHIFT_RANGE.1
            )));
        }
        if !(ENERGY_FACTOR_RANGE.0..=ENERGY_FACTOR_RANGE.1).contains(&energy_factor) {
            return Err(Error::invalid(format!(
                "energy factor {energy_factor} outside [{}, {}]",
                ENERGY_FACTOR_RANGE.0, ENERGY_FACTOR_RANGE.1
            )));
        }
        let mut tape = Tape::new(TapeMode::inference());
        let p = self.store.bind(&mut tape);
        let l = phonemes.len();
        let mask = Mask::full(1, l);
        let a = self.encoder.forward(&mut tape, &p, phonemes, &mask)?;
        let mode = AdapterMode {
            style: StyleInput::Labels {
                speakers: vec![speaker],
                emotions: vec![emotion],
            },
            prosody: if self.phase >= 3 {
                ProsodyInput::Predictor
            } else {
                ProsodyInput::Off
            },
            variance: VarianceInput::Predicted {
                pitch_shift: vec![pitch_shift],
                energy_factor: vec![energy_factor],
            },
            stop_label_residuals: false,
        };
        let out = self.adapter.forward(&mut tape, &p, a, &mask, &mode)?;
        let rows = |tape: &Tape, v: Var| -> Result<Tensor> {
            let h = tape.value(v).last_dim();
            tape.value(v).clone().reshape(vec![l, h])
        };
        let log_duration = tape.value(out.log_duration).data().to_vec();
        let durations = durations_from_log(&log_duration)?;
        let trace = ProbeTrace {
            stages: out.stages.iter().map(|&v| rows(&tape, v)).collect::<Result<_>>()?,
            residuals: out.residuals.iter().map(|&v| rows(&tape, v)).collect::<Result<_>>()?,
            durations,
            log_duration,
            pitch: tape.value(out.pitch).data().to_vec(),
            energy: tape.value(out.energy).data().to_vec(),
            phonemes: phonemes.to_vec(),
            speaker,
            emotion,
            pitch_shift,
            energy_factor,
        };
        let mel = self.decode(&trace.stages[5], &trace.durations)?;
        Ok((mel, trace))
    }

    /// Length-regulates final-stage rows `[L, H]` and decodes them to
    /// `[T, M]`.
    pub fn decode(&self, f: &Tensor, durations: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new(TapeMode::inference());
        let p = self.store.bind(&mut tape);
        let (l, h) = (f.shape()[0], f.last_dim());
        if durations.len() != l {
            return Err(Error::Shape {
                op: "decode",
                lhs: f.shape().to_vec(),
                rhs: vec![durations.len()],
            });
        }
        let x = tape.constant(f.clone().reshape(vec![1, l, h])?);
        let (expanded, mask) = length_regulate(&mut tape, x, &[durations.to_vec()])?;
        let mel = self.decoder.forward(&mut tape, &p, expanded, &mask)?;
        let t = mask.max_len();
        tape.value(mel).clone().reshape(vec![t, self.config.mel_dim])
    }

    pub fn tables(&self) -> crate::adapter::StyleTables {
        crate::adapter::StyleTables {
            speaker: self.store.value(self.adapter.speaker_table).clone(),
            emotion: self.store.value(self.adapter.emotion_table).clone(),
        }
    }

    pub fn install_tables(&mut self, tables: &crate::adapter::StyleTables) -> Result<()> {
        if !tables.speaker.all_finite() || !tables.emotion.all_finite() {
            return Err(Error::NonFinite { op: "install_tables" });
        }
        self.store.set(self.adapter.speaker_table, tables.speaker.clone())?;
        self.store.set(self.adapter.emotion_table, tables.emotion.clone())?;
        self.store.set_frozen(self.adapter.speaker_table, true);
        self.store.set_frozen(self.adapter.emotion_table, true);
        self.tables_present = true;
        Ok(())
    }

    /// Moves the running batch-norm statistics toward a batch's statistics.
    pub fn update_running_stats(&mut self, stats: &[BatchStats], momentum: f64) -> Result<()> {
        let ids = self.style.running_stat_ids();
        if stats.len() != ids.len() {
            return Err(Error::invalid("batch statistics do not match the reference encoder"));
        }
        for ((mean_id, var_id), st) in ids.into_iter().zip(stats) {
            for (id, batch) in [(mean_id, &st.mean), (var_id, &st.var)] {
                let mut v = self.store.value(id).clone();
                for (r, b) in v.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
                self.store.set(id, v)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::write_dir_atomic(dir, |tmp| {
            let params = tmp.join("params");
            fs::create_dir_all(&params).map_err(|e| Error::io(&params, e))?;
            let mut manifest = String::new();
            manifest.push_str("format = resvox-checkpoint\n");
            manifest.push_str(&format!("version = {CHECKPOINT_VERSION}\n"));
            manifest.push_str(&format!("phase = {}\n", self.phase));
            manifest.push_str(&format!("step = {}\n", self.step));
            manifest.push_str(&format!(
                "tables = {}\n",
                if self.tables_present { "present" } else { "absent" }
            ));
            manifest.push_str("\n[model]\n");
            manifest.push_str(&self.config.to_text());
            manifest.push_str("\n[params]\n");
            for (_, p) in self.store.iter() {
                let rel = format!("params/{}.bin", p.name);
                let bytes = io::encode_blob(&[NamedArray::real("value", p.value.clone())]);
                fs::write(tmp.join(&rel), &bytes).map_err(|e| Error::io(tmp.join(&rel), e))?;
                let shape: Vec<String> = p.value.shape().iter().map(|s| s.to_string()).collect();
                manifest.push_str(&format!(
                    "param = name={} group={} kind={} frozen={} shape={} blob={} bytes={}\n",
                    p.name,
                    p.group,
                    match p.kind {
                        ParamKind::Weight => "weight",
                        ParamKind::Buffer => "buffer",
                    },
                    p.frozen,
                    shape.join("x"),
                    rel,
                    bytes.len()
                ));
            }
            fs::write(tmp.join("manifest.txt"), manifest).map_err(|e| Error::io(tmp, e))
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let rec = "checkpoint manifest";
        let kv = KeyValues::parse(&text, rec)?;
        if kv.get("format") != Some("resvox-checkpoint") {
            return Err(Error::format(rec, "not a checkpoint manifest"));
        }
        let version: u32 = kv.parse_value("version", rec)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(rec, format!("unsupported checkpoint version {version}")));
        }
        let config = ModelConfig::from_key_values(&kv, "model.")?;
        let mut model = Model::new(config)?;
        model.phase = kv.parse_value("phase", rec)?;
        model.step = kv.parse_value("step", rec)?;
        model.tables_present = match kv.require("tables", rec)? {
            "present" => true,
            "absent" => false,
            other => return Err(Error::format(rec, format!("bad tables flag {other}"))),
        };
        let mut seen = vec![false; model.store.len()];
        for line in kv.all("params.param") {
            let fields = record_fields(line);
            let field = |k: &str| {
                fields
                    .iter()
                    .find(|(n, _)| *n == k)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| Error::format(rec, format!("param record missing {k}: {line}")))
            };
            let name = field("name")?;
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::format(name, "parameter not part of this configuration"))?;
            let group: Group = field("group")?.parse()?;
            if group != model.store.param(id).group {
                return Err(Error::format(name, "parameter group differs from the model"));
            }
            let frozen = match field("frozen")? {
                "true" => true,
                "false" => false,
                other => return Err(Error::format(name, format!("bad frozen flag {other}"))),
            };
            let bytes = io::read_file(&dir.join(field("blob")?))?;
            let expected: usize = field("bytes")?
                .parse()
                .map_err(|_| Error::format(name, "bad byte count"))?;
            if bytes.len() != expected {
                return Err(Error::format(name, "blob size differs from manifest"));
            }
            let arrays = io::decode_blob(&bytes, name)?;
            let value = BlobView::new(&arrays, name).real("value")?;
            model.store.set(id, value).map_err(|e| Error::format(name, e.to_string()))?;
            model.store.set_frozen(id, frozen);
            seen[id.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let (_, p) = model.store.iter().nth(i).unwrap();
            return Err(Error::format(rec, format!("missing parameter {}", p.name)));
        }
        Ok(model)
    }
}

/// Inference durations `round(exp(x) - 1)`, floored at zero. A sequence
/// whose durations are all zero is an error.
pub fn durations_from_log(log_duration: &[f64]) -> Result<Vec<usize>> {
    let d: Vec<usize> = log_duration
        .iter()
        .map(|&x| (x.exp() - 1.0).round().max(0.0) as usize)
        .collect();
    if d.iter().sum::<usize>() == 0 {
        return Err(Error::ZeroDuration);
    }
    Ok(d)
}
