//! Phoneme encoder, length regulator, mel decoder and style encoder.

pub mod layers;
pub mod params;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Mask, NormStats, Tape, Tensor, Var};
use layers::{add_positions, Builder, FftBlock, Linear};
pub use params::{Bound, Group, Param, ParamId, ParamKind, ParameterStore};

#[derive(Clone, Debug)]
pub struct PhonemeEncoder {
    table: ParamId,
    blocks: Vec<FftBlock>,
    phonemes: usize,
}

impl PhonemeEncoder {
    pub fn build(b: &mut Builder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let table = b.uniform("embedding", &[cfg.phonemes, cfg.hidden], 1.0)?;
        let blocks = (0..cfg.encoder_layers)
            .map(|i| {
                FftBlock::build(
                    b,
                    &format!("block{i}"),
                    cfg.hidden,
                    cfg.encoder_filters,
                    cfg.fft_kernel,
                    cfg.attention_heads,
                    cfg.dropout,
                )
            })
            .collect::<Result<_>>()?;
        Ok(PhonemeEncoder {
            table,
            blocks,
            phonemes: cfg.phonemes,
        })
    }

    /// `ids` is the row-major `[B, L]` padded id grid; padded slots are
    /// ignored.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, ids: &[usize], mask: &Mask) -> Result<Var> {
        let (b, l) = (mask.batch(), mask.max_len());
        if ids.len() != b * l {
            return Err(Error::Shape {
                op: "phoneme_encoder",
                lhs: vec![ids.len()],
                rhs: vec![b, l],
            });
        }
        let flags = mask.flags();
        if let Some((&bad, _)) = ids.iter().zip(&flags).find(|(&i, &f)| f && i >= self.phonemes) {
            return Err(Error::UnknownLabel {
                kind: "phoneme",
                id: bad,
                limit: self.phonemes,
            });
        }
        let safe: Vec<usize> = ids
            .iter()
            .zip(&flags)
            .map(|(&i, &f)| if f { i } else { 0 })
            .collect();
        let x = tape.embedding(p.var(self.table), &safe, &[b, l])?;
        let mut h = add_positions(tape, x, mask)?;
        for block in &self.blocks {
            h = block.forward(tape, p, h, mask)?;
        }
        Ok(h)
    }
}

/// Repeats row `i` of every item `d[i]` times: `[B, L, H] -> [B, T, H]`
/// with `T` the largest total. Zero durations drop their row.
pub fn length_regulate(tape: &mut Tape, x: Var, durations: &[Vec<usize>]) -> Result<(Var, Mask)> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[0] != durations.len() {
        return Err(Error::Shape {
            op: "length_regulate",
            lhs: s,
            rhs: vec![durations.len()],
        });
    }
    let (b, l, h) = (s[0], s[1], s[2]);
    let mut totals = Vec::with_capacity(b);
    for d in durations {
        if d.len() > l {
            return Err(Error::Shape {
                op: "length_regulate",
                lhs: vec![b, l, h],
                rhs: vec![d.len()],
            });
        }
        let total: usize = d.iter().sum();
        if total == 0 {
            return Err(Error::ZeroDuration);
        }
        totals.push(total);
    }
    let t = *totals.iter().max().unwrap();
    let mut src = Vec::with_capacity(b * t);
    for (bi, d) in durations.iter().enumerate() {
        for (i, &n) in d.iter().enumerate() {
            src.extend(std::iter::repeat(Some(bi * l + i)).take(n));
        }
        src.extend(std::iter::repeat(None).take(t - totals[bi]));
    }
    let y = tape.gather_rows(x, src, vec![b, t, h])?;
    Ok((y, Mask::from_lengths(&totals, t)))
}

/// Plain-tensor length regulation of `[L, H]` rows.
pub fn length_regulate_rows(rows: &Tensor, durations: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new(crate::numerics::TapeMode::inference());
    let l = rows.shape()[0];
    let x = tape.constant(rows.clone().reshape(vec![1, l, rows.last_dim()])?);
    let (y, mask) = length_regulate(&mut tape, x, &[durations.to_vec()])?;
    let t = mask.max_len();
    tape.value(y).clone().reshape(vec![t, rows.last_dim()])
}

#[derive(Clone, Debug)]
pub struct Decoder {
    blocks: Vec<FftBlock>,
    pub out: Linear,
}

impl Decoder {
    pub fn build(b: &mut Builder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let blocks = (0..cfg.decoder_layers)
            .map(|i| {
                FftBlock::build(
                    b,
                    &format!("block{i}"),
                    cfg.hidden,
                    cfg.decoder_filters,
                    cfg.fft_kernel,
                    cfg.attention_heads,
                    cfg.dropout,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Decoder {
            blocks,
            out: b.linear("mel_out", cfg.hidden, cfg.mel_dim)?,
        })
    }

    /// `x[B, T, H] -> [B, T, M]`, no output activation.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, mask: &Mask) -> Result<Var> {
        let mut h = add_positions(tape, x, mask)?;
        for block in &self.blocks {
            h = block.forward(tape, p, h, mask)?;
        }
        let y = self.out.forward(tape, p, h)?;
        tape.mask_rows(y, mask)
    }
}

#[derive(Clone, Debug)]
struct RefLayer {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

/// Reference encoder (strided 2-D convolutions, batch normalization, GRU)
/// followed by attention over a bank of learned style tokens.
#[derive(Clone, Debug)]
pub struct StyleEncoder {
    layers: Vec<RefLayer>,
    stride: usize,
    gru_wx: ParamId,
    gru_wh: ParamId,
    gru_bx: ParamId,
    gru_bh: ParamId,
    gru_hidden: usize,
    tokens: ParamId,
    query: Linear,
    key: ParamId,
    value: ParamId,
    out: Linear,
    heads: usize,
}

/// Intermediate results of [`StyleEncoder::forward`].
#[derive(Clone, Debug)]
pub struct StyleOutput {
    pub reference: Var,
    pub style: Var,
    /// Output of the token attention; its weights are on the tape.
    pub attention: Var,
    /// Time extent after each convolution stage (for the longest item).
    pub time_extents: Vec<usize>,
    pub batch_stats: Vec<BatchStats>,
}

impl StyleEncoder {
    pub fn build(b: &mut Builder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.ref_filters.len());
        let mut c_in = 1;
        for (i, &c) in cfg.ref_filters.iter().enumerate() {
            let k = cfg.ref_kernel;
            layers.push(RefLayer {
                w: b.weight(&format!("ref{i}.w"), &[k, k, c_in, c], k * k * c_in)?,
                gamma: b.constant(&format!("ref{i}.bn_gamma"), &[c], 1.0)?,
                beta: b.constant(&format!("ref{i}.bn_beta"), &[c], 0.0)?,
                running_mean: b.buffer(&format!("ref{i}.bn_running_mean"), &[c], 0.0)?,
                running_var: b.buffer(&format!("ref{i}.bn_running_var"), &[c], 1.0)?,
            });
            c_in = c;
        }
        let gru_in = cfg.ref_freq_extent() * c_in;
        let g = cfg.gru_hidden;
        let ah = cfg.style_attention_hidden;
        Ok(StyleEncoder {
            layers,
            stride: cfg.ref_stride,
            gru_wx: b.weight("gru.wx", &[gru_in, 3 * g], g)?,
            gru_wh: b.weight("gru.wh", &[g, 3 * g], g)?,
            gru_bx: b.weight("gru.bx", &[3 * g], g)?,
            gru_bh: b.weight("gru.bh", &[3 * g], g)?,
            gru_hidden: g,
            tokens: b.uniform("tokens", &[cfg.style_tokens, cfg.token_dim], 0.5)?,
            query: b.linear("attn.query", g, ah)?,
            key: b.weight("attn.key", &[cfg.token_dim, ah], cfg.token_dim)?,
            value: b.weight("attn.value", &[cfg.token_dim, ah], cfg.token_dim)?,
            out: b.linear("attn.out", ah, cfg.hidden)?,
            heads: cfg.style_heads,
        })
    }

    /// `(mean, var)` buffer ids per convolution stage.
    pub fn running_stat_ids(&self) -> Vec<(ParamId, ParamId)> {
        self.layers
            .iter()
            .map(|l| (l.running_mean, l.running_var))
            .collect()
    }

    /// Final GRU state per item: `mel[B, T, M] -> [B, G]`. Batch statistics
    /// are used on training tapes, running statistics otherwise.
    pub fn reference_encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        mel: Var,
        mask: &Mask,
    ) -> Result<(Var, Vec<usize>, Vec<BatchStats>)> {
        let s = tape.shape(mel).to_vec();
        let (b, m) = (s[0], s[2]);
        let mut x = tape.reshape(mel, vec![b, s[1], m, 1])?;
        x = tape.mask_rows(x, mask)?;
        let mut mask = mask.clone();
        let mut extents = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::new();
        for layer in &self.layers {
            x = tape.conv2d(x, p.var(layer.w), self.stride)?;
            mask = if self.stride == 2 {
                mask.halved()
            } else {
                let t = tape.shape(x)[1];
                Mask::from_lengths(
                    &mask.lengths().iter().map(|l| l.div_ceil(self.stride)).collect::<Vec<_>>(),
                    t,
                )
            };
            extents.push(tape.shape(x)[1]);
            let (gamma, beta) = (p.var(layer.gamma), p.var(layer.beta));
            let (y, st) = if tape.is_training() {
                tape.batch_norm(x, gamma, beta, &mask, NormStats::Batch)?
            } else {
                let mean = tape.value(p.var(layer.running_mean)).data().to_vec();
                let var = tape.value(p.var(layer.running_var)).data().to_vec();
                tape.batch_norm(x, gamma, beta, &mask, NormStats::Running { mean: &mean, var: &var })?
            };
            stats.extend(st);
            x = tape.relu(y)?;
        }
        let xs = tape.shape(x).to_vec();
        let (t, width) = (xs[1], xs[2] * xs[3]);
        let seq = tape.reshape(x, vec![b, t, width])?;
        let mut h = tape.constant(Tensor::zeros(&[b, self.gru_hidden]));
        let mut states = Vec::with_capacity(t);
        for ti in 0..t {
            let xt = tape.select_time(seq, ti)?;
            h = tape.gru_step(
                xt,
                h,
                p.var(self.gru_wx),
                p.var(self.gru_wh),
                p.var(self.gru_bx),
                p.var(self.gru_bh),
            )?;
            states.push(h);
        }
        let all = tape.concat(&states)?;
        let all = tape.reshape(all, vec![b * t, self.gru_hidden])?;
        let src = mask
            .lengths()
            .iter()
            .enumerate()
            .map(|(bi, &len)| Some(bi * t + len - 1))
            .collect();
        let last = tape.gather_rows(all, src, vec![b, self.gru_hidden])?;
        Ok((last, extents, stats))
    }

    /// `reference[B, G] -> S(x)[B, H]` by multi-head attention over the
    /// token bank.
    pub fn style_token_attend(&self, tape: &mut Tape, p: &Bound, reference: Var) -> Result<(Var, Var)> {
        let b = tape.shape(reference)[0];
        let q = self.query.forward(tape, p, reference)?;
        let ah = tape.shape(q)[1];
        let q = tape.reshape(q, vec![b, 1, ah])?;
        let tokens = tape.tanh(p.var(self.tokens))?;
        let k = tape.matmul(tokens, p.var(self.key))?;
        let v = tape.matmul(tokens, p.var(self.value))?;
        let k = tape.broadcast_batch(k, b)?;
        let v = tape.broadcast_batch(v, b)?;
        let att = tape.attention(q, k, v, self.heads, None)?;
        let flat = tape.reshape(att, vec![b, ah])?;
        Ok((self.out.forward(tape, p, flat)?, att))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mel: Var, mask: &Mask) -> Result<StyleOutput> {
        let (reference, time_extents, batch_stats) = self.reference_encode(tape, p, mel, mask)?;
        let (style, attention) = self.style_token_attend(tape, p, reference)?;
        Ok(StyleOutput {
            reference,
            style,
            attention,
            time_extents,
            batch_stats,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use crate::numerics::{grad_check, random_tensor, Initializer, TapeMode};
    use layers::positional_encoding;

    fn small() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            encoder_filters: 8,
            decoder_filters: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            ref_filters: vec![2, 2, 2, 2, 2, 2],
            gru_hidden: 4,
            style_tokens: 3,
            token_dim: 2,
            style_heads: 2,
            style_attention_hidden: 4,
            variance_filters: 8,
            ..ModelConfig::toy()
        }
    }

    fn rows_of(t: &Tensor, item: usize, len: usize) -> Vec<Vec<f64>> {
        let s = t.shape();
        let (l, h) = (s[1], s[2]);
        (0..len)
            .map(|i| t.data()[(item * l + i) * h..(item * l + i + 1) * h].to_vec())
            .collect()
    }

    fn close(a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) -> bool {
        a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn encoder_single_phoneme() {
        let m = Model::new(ModelConfig::toy()).unwrap();
        let mut tape = Tape::new(TapeMode::inference());
        let p = m.store.bind(&mut tape);
        let y = m.encoder.forward(&mut tape, &p, &[7], &Mask::full(1, 1)).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 64]);
    }

    #[test]
    fn encoder_rejects_unknown_phoneme() {
        let m = Model::new(ModelConfig::toy()).unwrap();
        let mut tape = Tape::new(TapeMode::inference());
        let p = m.store.bind(&mut tape);
        let err = m.encoder.forward(&mut tape, &p, &[1, 16], &Mask::full(1, 2)).unwrap_err();
        assert!(matches!(err, Error::UnknownLabel { kind: "phoneme", id: 16, .. }), "{err}");
    }

    #[test]
    fn encoder_is_mask_invariant() {
        let m = Model::new(ModelConfig::toy()).unwrap();
        let (short, long) = ([3, 1, 4], [1, 5, 9, 2, 6]);
        let mut ids = vec![0; 10];
        ids[..3].copy_from_slice(&short);
        ids[5..].copy_from_slice(&long);
        let mut tape = Tape::new(TapeMode::inference());
        let p = m.store.bind(&mut tape);
        let y = m.encoder.forward(&mut tape, &p, &ids, &Mask::from_lengths(&[3, 5], 5)).unwrap();
        let batched = tape.value(y).clone();

        for (item, seq) in [(0, &short[..]), (1, &long[..])] {
            let mut tape = Tape::new(TapeMode::inference());
            let p = m.store.bind(&mut tape);
            let y = m.encoder.forward(&mut tape, &p, seq, &Mask::full(1, seq.len())).unwrap();
            let single = rows_of(tape.value(y), 0, seq.len());
            assert!(close(&rows_of(&batched, item, seq.len()), &single, 1e-5));
        }
        let padded = rows_of(&batched, 0, 5);
        assert!(padded[3..].iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn decoder_is_mask_invariant() {
        let m = Model::new(ModelConfig::toy()).unwrap();
        let x = random_tensor(&[2, 6, 64], 3);
        let mut tape = Tape::new(TapeMode::inference());
        let p = m.store.bind(&mut tape);
        let mask = Mask::from_lengths(&[4, 6], 6);
        let xv = tape.constant(x.clone());
        let xv = tape.mask_rows(xv, &mask).unwrap();
        let y = m.decoder.forward(&mut tape, &p, xv, &mask).unwrap();
        assert_eq!(tape.shape(y), &[2, 6, 16]);
        let batched = rows_of(tape.value(y), 0, 4);

        let mut tape = Tape::new(TapeMode::inference());
        let p = m.store.bind(&mut tape);
        let first = Tensor::new(vec![1, 4, 64], x.data()[..4 * 64].to_vec()).unwrap();
        let xv = tape.constant(first);
        let y = m.decoder.forward(&mut tape, &p, xv, &Mask::full(1, 4)).unwrap();
        assert!(close(&batched, &rows_of(tape.value(y), 0, 4), 1e-5));
    }

    #[test]
    fn positional_encoding_at_origin() {
        let pe = positional_encoding(3, 6);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    fn regulate(rows: &[f64], durations: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(vec![rows.len(), 1], rows.to_vec()).unwrap();
        length_regulate_rows(&t, durations)
    }

    #[test]
    fn length_regulation_examples() {
        assert_eq!(regulate(&[1.0, 2.0, 3.0], &[1, 1, 1]).unwrap().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(
            regulate(&[1.0, 2.0, 3.0], &[2, 1, 3]).unwrap().data(),
            &[1.0, 1.0, 2.0, 3.0, 3.0, 3.0]
        );
        assert_eq!(regulate(&[1.0, 2.0], &[0, 2]).unwrap().data(), &[2.0, 2.0]);
        assert!(matches!(regulate(&[1.0, 2.0], &[0, 0]), Err(Error::ZeroDuration)));
    }

    #[test]
    fn length_regulation_pads_shorter_items() {
        let mut tape = Tape::new(TapeMode::inference());
        let x = tape.constant(random_tensor(&[2, 2, 3], 5));
        let (y, mask) = length_regulate(&mut tape, x, &[vec![1, 1], vec![2, 3]]).unwrap();
        assert_eq!(tape.shape(y), &[2, 5, 3]);
        assert_eq!(mask.lengths(), &[2, 5]);
        assert!(rows_of(tape.value(y), 0, 5)[2..].iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_output_projection_gives_silent_mel() {
        let mut m = Model::new(ModelConfig::toy()).unwrap();
        for id in [m.decoder.out.w, m.decoder.out.b] {
            let shape = m.store.value(id).shape().to_vec();
            m.store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut tape = Tape::new(TapeMode::inference());
        let p = m.store.bind(&mut tape);
        let x = tape.constant(random_tensor(&[1, 5, 64], 2));
        let y = m.decoder.forward(&mut tape, &p, x, &Mask::full(1, 5)).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let m = Model::new(small()).unwrap();
        let ids: Vec<ParamId> = m
            .store
            .iter()
            .filter(|(_, p)| p.group == Group::Decoder)
            .map(|(id, _)| id)
            .collect();
        let inputs: Vec<Tensor> = ids.iter().map(|&id| m.store.value(id).clone()).collect();
        let x = random_tensor(&[1, 5, 8], 11);
        let target = random_tensor(&[1, 5, 16], 12);
        let report = grad_check(
            |tape, vars| {
                let mut p = m.store.bind(tape);
                for (&id, &v) in ids.iter().zip(vars) {
                    p.replace(id, v);
                }
                let xv = tape.constant(x.clone());
                let mask = Mask::full(1, 5);
                let y = m.decoder.forward(tape, &p, xv, &mask)?;
                let t = tape.constant(target.clone());
                tape.mae(y, t, Some(&mask))
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    fn style_parts(cfg: &ModelConfig) -> (ParameterStore, StyleEncoder) {
        let mut store = ParameterStore::new();
        let mut init = Initializer::new(cfg.seed);
        let style = StyleEncoder::build(
            &mut Builder::new(&mut store, &mut init, Group::StyleEncoder, "style_encoder"),
            cfg,
        )
        .unwrap();
        (store, style)
    }

    fn style_of(store: &ParameterStore, style: &StyleEncoder, mel: &Tensor) -> (Vec<f64>, Vec<usize>, Tensor) {
        let mut tape = Tape::new(TapeMode::inference());
        let p = store.bind(&mut tape);
        let t = mel.shape()[0];
        let x = tape.constant(mel.clone().reshape(vec![1, t, mel.last_dim()]).unwrap());
        let out = style.forward(&mut tape, &p, x, &Mask::full(1, t)).unwrap();
        let weights = tape.attention_weights(out.attention).unwrap();
        (tape.value(out.style).data().to_vec(), out.time_extents, weights)
    }

    #[test]
    fn reference_time_extents_halve_with_ceiling() {
        let (store, style) = style_parts(&ModelConfig::toy());
        let (_, extents, _) = style_of(&store, &style, &random_tensor(&[64, 16], 1));
        assert_eq!(extents, vec![32, 16, 8, 4, 2, 1]);
        let (_, extents, _) = style_of(&store, &style, &random_tensor(&[1, 16], 1));
        assert_eq!(extents, vec![1; 6]);
    }

    #[test]
    fn paper_reference_channels() {
        let (store, _) = style_parts(&ModelConfig::paper());
        let channels: Vec<usize> = (0..6)
            .map(|i| *store.value(store.id(&format!("style_encoder.ref{i}.w")).unwrap()).shape().last().unwrap())
            .collect();
        assert_eq!(channels, vec![32, 32, 64, 64, 128, 128]);
    }

    #[test]
    fn token_attention_weights_are_distributions() {
        let (store, style) = style_parts(&ModelConfig::toy());
        let (_, _, w) = style_of(&store, &style, &random_tensor(&[20, 16], 4));
        assert_eq!(w.shape(), &[1, 4, 1, 10]);
        for row in w.data().chunks(10) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_token_bank_ignores_the_query() {
        let cfg = ModelConfig { style_tokens: 1, ..ModelConfig::toy() };
        let (store, style) = style_parts(&cfg);
        let (a, _, _) = style_of(&store, &style, &random_tensor(&[12, 16], 1));
        let (b, _, _) = style_of(&store, &style, &random_tensor(&[30, 16], 2));
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn style_is_deterministic_and_order_sensitive() {
        let (store, style) = style_parts(&ModelConfig::toy());
        let mel = random_tensor(&[16, 16], 9);
        let (a, _, _) = style_of(&store, &style, &mel);
        assert_eq!(a, style_of(&store, &style, &mel).0);
        let mut rows = mel.to_rows();
        rows.reverse();
        let (b, _, _) = style_of(&store, &style, &Tensor::from_rows(&rows).unwrap());
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    }
}
