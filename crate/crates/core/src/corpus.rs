//! Synthetic oracle corpus.
//!
//! Every utterance is produced by a known generative rule, so the effect of
//! speaker, emotion, pitch and energy on the features can be checked
//! directly:
//!
//! * duration of phoneme `p` = `1 + hash(p, speaker, emotion) mod max_duration`
//! * pitch at frame `t` = `b(speaker) + o(emotion) + w(phoneme_t)`
//! * energy at frame `t` = `g(speaker) + r(emotion)`
//! * mel channel 0 = pitch, channel 1 = energy, channels `2..M` =
//!   `energy_t * (phi(phoneme_t) + sigma(speaker) + eps(emotion))`
//!
//! plus uniform noise of amplitude `noise_amp` on every cell. Generated
//! values are rounded to `f32` so the on-disk format is exact.
//!
//! Pitch is in normalized units: 1000 cents = 1.0, so a shift of 400 cents
//! is 0.4.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{
    self, join_f64, parse_f64_list, record_fields, BlobView, KeyValues, NamedArray,
};
use crate::numerics::Tensor;

pub const CORPUS_VERSION: u32 = 1;
pub const PITCH_SHIFT_RANGE: (f64, f64) = (-0.4, 0.4);
pub const ENERGY_FACTOR_RANGE: (f64, f64) = (0.3, 1.7);

/// Preprocessing constants of the recorded datasets this corpus stands in
/// for. Written to every manifest for reference; not used by the generator.
pub const REFERENCE_AUDIO: [(&str, u32); 4] = [
    ("filter_length", 1024),
    ("hop_length", 256),
    ("window_length", 1024),
    ("sample_rate_hz", 22050),
];

fn q32(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusParams {
    pub seed: u64,
    pub speakers: usize,
    pub emotions: usize,
    pub per_pair: usize,
    pub phonemes: usize,
    pub mel_dim: usize,
    pub noise_amp: f64,
    pub max_duration: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Half-width of the uniform ranges for phi, sigma and eps.
    pub phoneme_timbre: f64,
    pub speaker_timbre: f64,
    pub emotion_timbre: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            seed: 7,
            speakers: 4,
            emotions: 3,
            per_pair: 40,
            phonemes: 16,
            mel_dim: 16,
            noise_amp: 0.0,
            max_duration: 4,
            min_len: 6,
            max_len: 12,
            phoneme_timbre: 1.0,
            speaker_timbre: 1.2,
            emotion_timbre: 0.8,
        }
    }
}

impl CorpusParams {
    pub fn validate(&self) -> Result<()> {
        if self.speakers < 2 {
            return Err(Error::invalid("corpus needs at least 2 speakers"));
        }
        if self.emotions < 2 {
            return Err(Error::invalid("corpus needs at least 2 emotions"));
        }
        if self.mel_dim < 8 {
            return Err(Error::invalid("mel dimension must be at least 8"));
        }
        if self.per_pair < 1 {
            return Err(Error::invalid("need at least one utterance per pair"));
        }
        if self.phonemes < 1 || self.max_duration < 1 {
            return Err(Error::invalid("phoneme inventory and max duration must be positive"));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(Error::invalid("bad utterance length range"));
        }
        if !(self.noise_amp >= 0.0 && self.noise_amp.is_finite()) {
            return Err(Error::invalid("noise amplitude must be non-negative"));
        }
        Ok(())
    }
}

/// Constants of the generative rule.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleConstants {
    pub speaker_pitch: Vec<f64>,
    pub emotion_pitch: Vec<f64>,
    pub phoneme_pitch: Vec<f64>,
    pub speaker_energy: Vec<f64>,
    pub emotion_energy: Vec<f64>,
    /// `[phonemes][mel_dim - 2]`
    pub phoneme_timbre: Vec<Vec<f64>>,
    /// `[speakers][mel_dim - 2]`
    pub speaker_timbre: Vec<Vec<f64>>,
    /// `[emotions][mel_dim - 2]`
    pub emotion_timbre: Vec<Vec<f64>>,
    pub duration_salt: u64,
    pub max_duration: usize,
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl OracleConstants {
    pub fn duration(&self, phoneme: usize, speaker: usize, emotion: usize) -> usize {
        let mut h = mix64(self.duration_salt ^ 0x9e3779b97f4a7c15);
        for v in [phoneme, speaker, emotion] {
            h = mix64(h ^ (v as u64).wrapping_add(0x9e3779b97f4a7c15));
        }
        1 + (h % self.max_duration as u64) as usize
    }

    pub fn pitch(&self, phoneme: usize, speaker: usize, emotion: usize) -> f64 {
        q32(self.speaker_pitch[speaker] + self.emotion_pitch[emotion] + self.phoneme_pitch[phoneme])
    }

    pub fn energy(&self, speaker: usize, emotion: usize) -> f64 {
        q32(self.speaker_energy[speaker] + self.emotion_energy[emotion])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    /// `[frames, mel_dim]`
    pub mel: Tensor,
    pub speaker: usize,
    pub emotion: usize,
    pub pitch_shift: f64,
    pub energy_factor: f64,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    /// Mean of mel channel `c` over all frames.
    pub fn channel_mean(&self, c: usize) -> f64 {
        channel_mean(&self.mel, c)
    }

    pub fn check(&self) -> Result<()> {
        let frames = self.frames();
        if self.phonemes.len() != self.durations.len()
            || self.pitch.len() != frames
            || self.energy.len() != frames
            || self.mel.shape()[0] != frames
        {
            return Err(Error::format(&self.id, "inconsistent lengths"));
        }
        Ok(())
    }
}

pub fn channel_mean(mel: &Tensor, c: usize) -> f64 {
    let rows = mel.shape()[0];
    mel.rows().map(|r| r[c]).sum::<f64>() / rows as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub params: CorpusParams,
    pub oracle: OracleConstants,
    pub utterances: Vec<Utterance>,
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| q32(rng.gen_range(lo..=hi))).collect()
}

pub fn generate_corpus(params: &CorpusParams) -> Result<Corpus> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let c = params.mel_dim - 2;
    let oracle = OracleConstants {
        speaker_pitch: uniform_vec(&mut rng, params.speakers, -0.5, 0.5),
        emotion_pitch: uniform_vec(&mut rng, params.emotions, -0.5, 0.5),
        phoneme_pitch: uniform_vec(&mut rng, params.phonemes, -0.5, 0.5),
        speaker_energy: uniform_vec(&mut rng, params.speakers, 0.7, 1.3),
        emotion_energy: uniform_vec(&mut rng, params.emotions, -0.2, 0.2),
        phoneme_timbre: (0..params.phonemes)
            .map(|_| uniform_vec(&mut rng, c, -params.phoneme_timbre, params.phoneme_timbre))
            .collect(),
        speaker_timbre: (0..params.speakers)
            .map(|_| uniform_vec(&mut rng, c, -params.speaker_timbre, params.speaker_timbre))
            .collect(),
        emotion_timbre: (0..params.emotions)
            .map(|_| uniform_vec(&mut rng, c, -params.emotion_timbre, params.emotion_timbre))
            .collect(),
        duration_salt: rng.gen(),
        max_duration: params.max_duration,
    };

    let mut utterances = Vec::with_capacity(params.speakers * params.emotions * params.per_pair);
    for speaker in 0..params.speakers {
        for emotion in 0..params.emotions {
            for k in 0..params.per_pair {
                let len = rng.gen_range(params.min_len..=params.max_len);
                let phonemes: Vec<usize> =
                    (0..len).map(|_| rng.gen_range(0..params.phonemes)).collect();
                let utt = render(
                    &oracle,
                    params,
                    format!("s{speaker}_e{emotion}_{k:03}"),
                    phonemes,
                    speaker,
                    emotion,
                    &mut rng,
                );
                utterances.push(utt);
            }
        }
    }
    Ok(Corpus {
        params: params.clone(),
        oracle,
        utterances,
    })
}

fn render(
    oracle: &OracleConstants,
    params: &CorpusParams,
    id: String,
    phonemes: Vec<usize>,
    speaker: usize,
    emotion: usize,
    rng: &mut ChaCha8Rng,
) -> Utterance {
    let m = params.mel_dim;
    let durations: Vec<usize> = phonemes
        .iter()
        .map(|&p| oracle.duration(p, speaker, emotion))
        .collect();
    let frames: usize = durations.iter().sum();
    let mut pitch = Vec::with_capacity(frames);
    let mut energy = Vec::with_capacity(frames);
    let mut mel = Vec::with_capacity(frames * m);
    let noise = |rng: &mut ChaCha8Rng| {
        if params.noise_amp > 0.0 {
            rng.gen_range(-params.noise_amp..=params.noise_amp)
        } else {
            0.0
        }
    };
    for (&p, &d) in phonemes.iter().zip(&durations) {
        for _ in 0..d {
            let f0 = oracle.pitch(p, speaker, emotion);
            let e = oracle.energy(speaker, emotion);
            pitch.push(f0);
            energy.push(e);
            mel.push(q32(f0 + noise(rng)));
            mel.push(q32(e + noise(rng)));
            for j in 0..m - 2 {
                let timbre = oracle.phoneme_timbre[p][j]
                    + oracle.speaker_timbre[speaker][j]
                    + oracle.emotion_timbre[emotion][j];
                mel.push(q32(e * timbre + noise(rng)));
            }
        }
    }
    Utterance {
        id,
        phonemes,
        durations,
        pitch,
        energy,
        mel: Tensor::new(vec![frames, m], mel).expect("frames > 0"),
        speaker,
        emotion,
        pitch_shift: 0.0,
        energy_factor: 1.0,
    }
}

/// Shifts pitch by `delta` and scales energy by `gamma`.
///
/// Channel 0 and the pitch contour move by `delta`; the energy contour and
/// every other mel channel are multiplied by `gamma`. The shift fields
/// accumulate, so they always describe the offset from the original.
pub fn augment(u: &Utterance, delta: f64, gamma: f64) -> Result<Utterance> {
    if !(PITCH_SHIFT_RANGE.0..=PITCH_SHIFT_RANGE.1).contains(&delta) {
        return Err(Error::invalid(format!(
            "pitch shift {delta} outside [{}, {}]",
            PITCH_SHIFT_RANGE.0, PITCH_SHIFT_RANGE.1
        )));
    }
    if !(ENERGY_FACTOR_RANGE.0..=ENERGY_FACTOR_RANGE.1).contains(&gamma) {
        return Err(Error::invalid(format!(
            "energy factor {gamma} outside [{}, {}]",
            ENERGY_FACTOR_RANGE.0, ENERGY_FACTOR_RANGE.1
        )));
    }
    let mut out = u.clone();
    out.pitch.iter_mut().for_each(|v| *v += delta);
    out.energy.iter_mut().for_each(|v| *v *= gamma);
    let m = out.mel.last_dim();
    for row in out.mel.data_mut().chunks_mut(m) {
        row[0] += delta;
        row[1..].iter_mut().for_each(|v| *v *= gamma);
    }
    out.pitch_shift += delta;
    out.energy_factor *= gamma;
    Ok(out)
}

fn check_durations(durations: &[usize], frames: usize) -> Result<()> {
    if durations.iter().any(|&d| d == 0) {
        return Err(Error::invalid("phoneme duration 0 has no frames to average"));
    }
    let total: usize = durations.iter().sum();
    if total != frames {
        return Err(Error::invalid(format!(
            "durations sum to {total} but there are {frames} frames"
        )));
    }
    Ok(())
}

/// Mean of the mel rows spanned by each phoneme: `[frames, M] -> [L, M]`.
pub fn mel_to_phoneme_avg(mel: &Tensor, durations: &[usize]) -> Result<Tensor> {
    check_durations(durations, mel.shape()[0])?;
    let m = mel.last_dim();
    let mut out = Vec::with_capacity(durations.len() * m);
    let mut t = 0;
    for &d in durations {
        let mut acc = vec![0.0; m];
        for row in t..t + d {
            for (a, v) in acc.iter_mut().zip(mel.row(row)) {
                *a += v;
            }
        }
        out.extend(acc.iter().map(|a| a / d as f64));
        t += d;
    }
    Tensor::new(vec![durations.len(), m], out)
}

fn contour_avg(contour: &[f64], durations: &[usize]) -> Vec<f64> {
    let mut t = 0;
    durations
        .iter()
        .map(|&d| {
            let s: f64 = contour[t..t + d].iter().sum();
            t += d;
            s / d as f64
        })
        .collect()
}

/// Per-phoneme means of the pitch and energy contours.
pub fn phoneme_level_targets(u: &Utterance) -> Result<(Vec<f64>, Vec<f64>)> {
    check_durations(&u.durations, u.pitch.len())?;
    check_durations(&u.durations, u.energy.len())?;
    Ok((contour_avg(&u.pitch, &u.durations), contour_avg(&u.energy, &u.durations)))
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Splits indices into (train, held-out): the last `holdout_per_pair`
    /// utterances of every speaker/emotion pair are held out.
    pub fn split(&self, holdout_per_pair: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut held = Vec::new();
        let per = self.params.per_pair;
        for (i, _) in self.utterances.iter().enumerate() {
            if i % per >= per.saturating_sub(holdout_per_pair) {
                held.push(i);
            } else {
                train.push(i);
            }
        }
        (train, held)
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            params: self.params.clone(),
            oracle: self.oracle.clone(),
            utterances: indices.iter().map(|&i| self.utterances[i].clone()).collect(),
        }
    }
}

fn utterance_blob(u: &Utterance) -> Vec<u8> {
    io::encode_blob(&[
        NamedArray::index("phonemes", u.phonemes.iter().map(|&v| v as u32).collect()),
        NamedArray::index("durations", u.durations.iter().map(|&v| v as u32).collect()),
        NamedArray::real("pitch", Tensor::new(vec![u.pitch.len()], u.pitch.clone()).unwrap()),
        NamedArray::real("energy", Tensor::new(vec![u.energy.len()], u.energy.clone()).unwrap()),
        NamedArray::real("mel", u.mel.clone()),
    ])
}

fn manifest_text(corpus: &Corpus, records: &[(String, usize)]) -> String {
    let p = &corpus.params;
    let o = &corpus.oracle;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
    kv("format", "resvox-corpus".into());
    kv("version", CORPUS_VERSION.to_string());
    kv("seed", p.seed.to_string());
    kv("speakers", p.speakers.to_string());
    kv("emotions", p.emotions.to_string());
    kv("per_pair", p.per_pair.to_string());
    kv("phonemes", p.phonemes.to_string());
    kv("mel_dim", p.mel_dim.to_string());
    kv("noise_amp", format!("{:?}", p.noise_amp));
    kv("max_duration", p.max_duration.to_string());
    kv("min_len", p.min_len.to_string());
    kv("max_len", p.max_len.to_string());
    kv("phoneme_timbre", format!("{:?}", p.phoneme_timbre));
    kv("speaker_timbre", format!("{:?}", p.speaker_timbre));
    kv("emotion_timbre", format!("{:?}", p.emotion_timbre));
    kv("field_order", "phonemes durations pitch energy mel".into());
    kv("pitch_units", "1.0 = 1000 cents".into());
    for (name, value) in REFERENCE_AUDIO {
        kv(&format!("reference.{name}"), value.to_string());
    }
    kv("oracle.speaker_pitch", join_f64(&o.speaker_pitch));
    kv("oracle.emotion_pitch", join_f64(&o.emotion_pitch));
    kv("oracle.phoneme_pitch", join_f64(&o.phoneme_pitch));
    kv("oracle.speaker_energy", join_f64(&o.speaker_energy));
    kv("oracle.emotion_energy", join_f64(&o.emotion_energy));
    for (i, row) in o.phoneme_timbre.iter().enumerate() {
        kv(&format!("oracle.phoneme_timbre.{i}"), join_f64(row));
    }
    for (i, row) in o.speaker_timbre.iter().enumerate() {
        kv(&format!("oracle.speaker_timbre.{i}"), join_f64(row));
    }
    for (i, row) in o.emotion_timbre.iter().enumerate() {
        kv(&format!("oracle.emotion_timbre.{i}"), join_f64(row));
    }
    kv("oracle.duration_salt", o.duration_salt.to_string());
    kv("utterance_count", corpus.utterances.len().to_string());
    for (u, (blob, bytes)) in corpus.utterances.iter().zip(records) {
        kv(
            "utterance",
            format!(
                "id={} blob={} bytes={} speaker={} emotion={} phonemes={} frames={} pitch_shift={:?} energy_factor={:?}",
                u.id,
                blob,
                bytes,
                u.speaker,
                u.emotion,
                u.len(),
                u.frames(),
                u.pitch_shift,
                u.energy_factor
            ),
        );
    }
    s
}

/// Writes `manifest.txt` and `blobs/<id>.bin`; the directory appears
/// atomically.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    io::write_dir_atomic(dir, |tmp| {
        fs::create_dir_all(tmp.join("blobs")).map_err(|e| Error::io(tmp, e))?;
        let mut records = Vec::with_capacity(corpus.len());
        for u in &corpus.utterances {
            let bytes = utterance_blob(u);
            let rel = format!("blobs/{}.bin", u.id);
            fs::write(tmp.join(&rel), &bytes).map_err(|e| Error::io(tmp.join(&rel), e))?;
            records.push((rel, bytes.len()));
        }
        let text = manifest_text(corpus, &records);
        fs::write(tmp.join("manifest.txt"), text).map_err(|e| Error::io(tmp, e))
    })
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let rec = "manifest.txt";
    let kv = KeyValues::parse(&text, rec)?;
    if kv.get("format") != Some("resvox-corpus") {
        return Err(Error::format(rec, "not a corpus manifest"));
    }
    let version: u32 = kv.parse_value("version", rec)?;
    if version != CORPUS_VERSION {
        return Err(Error::format(rec, format!("unsupported corpus version {version}")));
    }
    let params = CorpusParams {
        seed: kv.parse_value("seed", rec)?,
        speakers: kv.parse_value("speakers", rec)?,
        emotions: kv.parse_value("emotions", rec)?,
        per_pair: kv.parse_value("per_pair", rec)?,
        phonemes: kv.parse_value("phonemes", rec)?,
        mel_dim: kv.parse_value("mel_dim", rec)?,
        noise_amp: kv.parse_value("noise_amp", rec)?,
        max_duration: kv.parse_value("max_duration", rec)?,
        min_len: kv.parse_value("min_len", rec)?,
        max_len: kv.parse_value("max_len", rec)?,
        phoneme_timbre: kv.parse_value("phoneme_timbre", rec)?,
        speaker_timbre: kv.parse_value("speaker_timbre", rec)?,
        emotion_timbre: kv.parse_value("emotion_timbre", rec)?,
    };
    params.validate()?;
    let list = |k: &str| parse_f64_list(kv.require(k, rec)?, rec);
    let rows = |prefix: &str, n: usize| -> Result<Vec<Vec<f64>>> {
        (0..n).map(|i| list(&format!("{prefix}.{i}"))).collect()
    };
    let oracle = OracleConstants {
        speaker_pitch: list("oracle.speaker_pitch")?,
        emotion_pitch: list("oracle.emotion_pitch")?,
        phoneme_pitch: list("oracle.phoneme_pitch")?,
        speaker_energy: list("oracle.speaker_energy")?,
        emotion_energy: list("oracle.emotion_energy")?,
        phoneme_timbre: rows("oracle.phoneme_timbre", params.phonemes)?,
        speaker_timbre: rows("oracle.speaker_timbre", params.speakers)?,
        emotion_timbre: rows("oracle.emotion_timbre", params.emotions)?,
        duration_salt: kv.parse_value("oracle.duration_salt", rec)?,
        max_duration: params.max_duration,
    };
    let expected: usize = kv.parse_value("utterance_count", rec)?;
    let mut utterances = Vec::with_capacity(expected);
    for line in kv.all("utterance") {
        let fields = record_fields(line);
        let field = |k: &str| -> Result<&str> {
            fields
                .iter()
                .find(|(n, _)| *n == k)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::format(rec, format!("utterance record missing {k}: {line}")))
        };
        let id = field("id")?.to_string();
        let parse_usize = |k: &str| -> Result<usize> {
            field(k)?
                .parse()
                .map_err(|_| Error::format(&id, format!("bad {k}")))
        };
        let parse_f = |k: &str| -> Result<f64> {
            field(k)?
                .parse()
                .map_err(|_| Error::format(&id, format!("bad {k}")))
        };
        let blob_path = dir.join(field("blob")?);
        let bytes = io::read_file(&blob_path)?;
        if bytes.len() != parse_usize("bytes")? {
            return Err(Error::format(&id, "blob size differs from manifest"));
        }
        let arrays = io::decode_blob(&bytes, &id)?;
        let view = BlobView::new(&arrays, &id);
        let u = Utterance {
            phonemes: view.index("phonemes")?,
            durations: view.index("durations")?,
            pitch: view.real("pitch")?.into_data(),
            energy: view.real("energy")?.into_data(),
            mel: view.real("mel")?,
            speaker: parse_usize("speaker")?,
            emotion: parse_usize("emotion")?,
            pitch_shift: parse_f("pitch_shift")?,
            energy_factor: parse_f("energy_factor")?,
            id: id.clone(),
        };
        u.check()?;
        if u.len() != parse_usize("phonemes")? || u.frames() != parse_usize("frames")? {
            return Err(Error::format(&id, "record counts differ from blob"));
        }
        utterances.push(u);
    }
    if utterances.len() != expected {
        return Err(Error::format(
            rec,
            format!("expected {expected} utterances, found {}", utterances.len()),
        ));
    }
    if expected != params.speakers * params.emotions * params.per_pair {
        return Err(Error::format(rec, "utterance count does not match speakers x emotions x per_pair"));
    }
    Ok(Corpus {
        params,
        oracle,
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> CorpusParams {
        CorpusParams {
            per_pair: 3,
            ..CorpusParams::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&CorpusParams { seed: 8, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn counts_follow_speaker_emotion_grid() {
        let c = generate_corpus(&CorpusParams::default()).unwrap();
        assert_eq!(c.len(), 480);
    }

    #[test]
    fn invalid_counts_rejected() {
        assert!(generate_corpus(&CorpusParams { speakers: 1, ..small() }).is_err());
        assert!(generate_corpus(&CorpusParams { emotions: 1, ..small() }).is_err());
        assert!(generate_corpus(&CorpusParams { mel_dim: 7, ..small() }).is_err());
        assert!(generate_corpus(&CorpusParams { per_pair: 0, ..small() }).is_err());
    }

    #[test]
    fn oracle_channels_match_contours() {
        let c = generate_corpus(&small()).unwrap();
        for u in &c.utterances {
            u.check().unwrap();
            for (t, row) in u.mel.rows().enumerate() {
                assert_eq!(row[0], u.pitch[t]);
                assert_eq!(row[1], u.energy[t]);
            }
            let mean_pitch = u.pitch.iter().sum::<f64>() / u.frames() as f64;
            assert_eq!(u.channel_mean(0), mean_pitch);
            for (i, &p) in u.phonemes.iter().enumerate() {
                assert_eq!(u.durations[i], c.oracle.duration(p, u.speaker, u.emotion));
                assert!((1..=4).contains(&u.durations[i]));
            }
            for e in &u.energy {
                assert!((0.5..=1.5).contains(e));
            }
        }
    }

    #[test]
    fn augment_identity_and_range() {
        let c = generate_corpus(&small()).unwrap();
        let u = &c.utterances[0];
        assert_eq!(&augment(u, 0.0, 1.0).unwrap(), u);
        assert!(augment(u, 0.0, 2.0).is_err());
        assert!(augment(u, 0.5, 1.0).is_err());
        let up = augment(u, 0.4, 1.0).unwrap();
        assert!((up.channel_mean(0) - u.channel_mean(0) - 0.4).abs() < 1e-12);
        assert_eq!((up.pitch_shift, up.energy_factor), (0.4, 1.0));
    }

    #[test]
    fn phoneme_averaging() {
        let mel = Tensor::new(vec![3, 1], vec![1.0, 3.0, 5.0]).unwrap();
        let avg = mel_to_phoneme_avg(&mel, &[2, 1]).unwrap();
        assert_eq!(avg.data(), &[2.0, 5.0]);
        let ident = mel_to_phoneme_avg(&mel, &[1, 1, 1]).unwrap();
        assert_eq!(ident, mel);
        assert!(mel_to_phoneme_avg(&mel, &[3, 0]).is_err());
        assert!(mel_to_phoneme_avg(&mel, &[1, 1]).is_err());
    }

    #[test]
    fn phoneme_targets_by_frame_mean() {
        let mut u = generate_corpus(&small()).unwrap().utterances[0].clone();
        u.durations = vec![2, 2];
        u.phonemes = vec![0, 1];
        u.pitch = vec![1.0, 2.0, 3.0, 4.0];
        u.energy = vec![0.7; 4];
        let (p, e) = phoneme_level_targets(&u).unwrap();
        assert_eq!(p, vec![1.5, 3.5]);
        assert_eq!(e, vec![0.7, 0.7]);
    }

    #[test]
    fn augmented_targets_shift_by_delta() {
        let c = generate_corpus(&small()).unwrap();
        let u = &c.utterances[5];
        let (p0, e0) = phoneme_level_targets(u).unwrap();
        let (p1, e1) = phoneme_level_targets(&augment(u, -0.25, 1.5).unwrap()).unwrap();
        for (a, b) in p0.iter().zip(&p1) {
            assert!((b - a + 0.25).abs() < 1e-12);
        }
        for (a, b) in e0.iter().zip(&e1) {
            assert!((b - 1.5 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let c = generate_corpus(&CorpusParams { noise_amp: 0.05, ..small() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus");
        save_corpus(&c, &path).unwrap();
        let back = load_corpus(&path).unwrap();
        assert_eq!(c, back);
        let text = fs::read_to_string(path.join("manifest.txt")).unwrap();
        assert!(text.contains("reference.hop_length = 256"));
        assert!(text.contains("reference.sample_rate_hz = 22050"));
    }

    #[test]
    fn corrupted_blob_names_record() {
        let c = generate_corpus(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus");
        save_corpus(&c, &path).unwrap();
        let victim = path.join("blobs").join(format!("{}.bin", c.utterances[2].id));
        let mut bytes = fs::read(&victim).unwrap();
        let off = 8 + 4 + 4 + 4 + "phonemes".len() + 4 + 4 + 8;
        bytes[off] = bytes[off].wrapping_add(8);
        fs::write(&victim, bytes).unwrap();
        let err = load_corpus(&path).unwrap_err().to_string();
        assert!(err.contains(&c.utterances[2].id), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn augment_is_invertible(idx in 0usize..36, delta in -0.4f64..=0.4, gamma in 0.6f64..=1.66) {
            let c = generate_corpus(&small()).unwrap();
            let u = &c.utterances[idx];
            let there = augment(u, delta, gamma).unwrap();
            let back = augment(&there, -delta, 1.0 / gamma).unwrap();
            prop_assert!(back.mel.max_abs_diff(&u.mel) < 1e-9);
            for (a, b) in back.pitch.iter().zip(&u.pitch) { prop_assert!((a - b).abs() < 1e-9); }
            for (a, b) in back.energy.iter().zip(&u.energy) { prop_assert!((a - b).abs() < 1e-9); }
            prop_assert!(back.pitch_shift.abs() < 1e-9);
            prop_assert!((back.energy_factor - 1.0).abs() < 1e-9);
        }

        #[test]
        fn phoneme_average_preserves_weighted_mean(
            durs in proptest::collection::vec(1usize..5, 1..8),
            seed in 0u64..1000,
        ) {
            let frames: usize = durs.iter().sum();
            let mel = crate::numerics::random_tensor(&[frames, 3], seed);
            let avg = mel_to_phoneme_avg(&mel, &durs).unwrap();
            for c in 0..3 {
                let direct = mel.rows().map(|r| r[c]).sum::<f64>() / frames as f64;
                let expanded = avg.rows().zip(&durs).map(|(r, &d)| r[c] * d as f64).sum::<f64>() / frames as f64;
                prop_assert!((direct - expanded).abs() < 1e-12);
            }
        }
    }
}
