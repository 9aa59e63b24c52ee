//! Residual extraction, projections, cluster scores and style mixing.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::adapter::{ProbeTrace, STAGE_NAMES};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;

/// `stage(l) - stage(k - 1)`: the residual of attributes `k..=l`. A single
/// attribute (`k == l`) returns the stored residual itself.
pub fn extract_residual(trace: &ProbeTrace, k: usize, l: usize) -> Result<Tensor> {
    if !(1 <= k && k <= l && l <= 5) {
        return Err(Error::invalid(format!(
            "residual range {k}..={l} outside 1 <= k <= l <= 5"
        )));
    }
    if k == l {
        return Ok(trace.residuals[k - 1].clone());
    }
    difference(&trace.stages[l], &trace.stages[k - 1])
}

fn difference(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "difference",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// `F - B`: the full style with the speaker residual removed.
pub fn normalized_full_style(trace: &ProbeTrace) -> Tensor {
    difference(&trace.stages[5], &trace.stages[1]).expect("stages share a shape")
}

/// Evaluates a stage expression: a stage (`"F"`), a difference of stages
/// (`"F-A"`), or a stored residual (`"R2"`).
pub fn stage_expression(trace: &ProbeTrace, expr: &str) -> Result<Tensor> {
    let expr = expr.trim();
    if let Some(k) = expr.strip_prefix('R') {
        let k: usize = k
            .parse()
            .map_err(|_| Error::invalid(format!("bad residual name {expr:?}")))?;
        return extract_residual(trace, k, k);
    }
    let stage = |s: &str| -> Result<&Tensor> {
        let mut chars = s.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => trace.stage(c),
            _ => Err(Error::invalid(format!(
                "bad stage {s:?}; expected one of {}",
                STAGE_NAMES.join(", ")
            ))),
        }
    };
    match expr.split_once('-') {
        Some((a, b)) => difference(stage(a)?, stage(b)?),
        None => Ok(stage(expr)?.clone()),
    }
}

/// Column means of `[L, H]` rows.
pub fn row_mean(t: &Tensor) -> Vec<f64> {
    let n = t.shape()[0] as f64;
    let mut out = vec![0.0; t.last_dim()];
    for r in t.rows() {
        out.iter_mut().zip(r).for_each(|(o, x)| *o += x);
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Labeled embedding rows, one per utterance or phoneme.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: BTreeMap<String, Vec<usize>>,
    /// Stage expression that produced the rows, e.g. `"F-A"`.
    pub provenance: String,
}

impl EmbeddingSet {
    /// One utterance-averaged row per trace, labeled by speaker and emotion.
    pub fn from_traces<'a, I>(traces: I, expr: &str) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a ProbeTrace)>,
    {
        let mut set = EmbeddingSet {
            ids: Vec::new(),
            rows: Vec::new(),
            labels: BTreeMap::new(),
            provenance: expr.to_string(),
        };
        let mut speakers = Vec::new();
        let mut emotions = Vec::new();
        for (id, trace) in traces {
            set.ids.push(id.to_string());
            set.rows.push(row_mean(&stage_expression(trace, expr)?));
            speakers.push(trace.speaker);
            emotions.push(trace.emotion);
        }
        set.labels.insert("speaker".into(), speakers);
        set.labels.insert("emotion".into(), emotions);
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn label(&self, key: &str) -> Result<&[usize]> {
        self.labels
            .get(key)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::invalid(format!("no label {key:?} in embedding set")))
    }
}

/// Principal-component coordinates `[N][2]`. Each axis is signed so that its
/// largest-magnitude loading is positive.
pub fn project_2d(set: &EmbeddingSet) -> Result<Vec<[f64; 2]>> {
    project_rows(&set.rows)
}

pub fn project_rows(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    if n < 3 {
        return Err(Error::invalid(format!("projection needs at least 3 rows, got {n}")));
    }
    let h = rows[0].len();
    if rows.iter().any(|r| r.len() != h) {
        return Err(Error::invalid("rows have different widths"));
    }
    let mut mean = vec![0.0; h];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, h, |i, j| rows[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..h).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    if !(top > 1e-24) {
        return Err(Error::invalid("projection input has rank 0 (all rows identical)"));
    }
    let mut axes = Vec::with_capacity(2);
    for &k in order.iter().take(2) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(v);
    }
    while axes.len() < 2 {
        axes.push(vec![0.0; h]);
    }
    Ok((0..n)
        .map(|i| {
            let c = centered.row(i);
            let dot = |a: &[f64]| c.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            [dot(&axes[0]), dot(&axes[1])]
        })
        .collect())
}

/// Mean silhouette with Euclidean distances.
pub fn silhouette(rows: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if rows.len() != labels.len() {
        return Err(Error::invalid("row and label counts differ"));
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *sizes.entry(l).or_default() += 1;
    }
    if sizes.len() < 2 {
        return Err(Error::invalid("silhouette needs at least two labels"));
    }
    if let Some((l, _)) = sizes.iter().find(|(_, &n)| n < 2) {
        return Err(Error::invalid(format!("label {l} has fewer than two rows")));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for i in 0..rows.len() {
        let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
        for j in 0..rows.len() {
            if i != j {
                *sums.entry(labels[j]).or_default() += dist(&rows[i], &rows[j]);
            }
        }
        let own = labels[i];
        let a = sums.get(&own).copied().unwrap_or(0.0) / (sizes[&own] - 1) as f64;
        let b = sums
            .iter()
            .filter(|(l, _)| **l != own)
            .map(|(l, s)| s / sizes[l] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(total / rows.len() as f64)
}

pub fn cluster_quality(set: &EmbeddingSet, key: &str) -> Result<f64> {
    silhouette(&set.rows, set.label(key)?)
}

/// Which trace supplies a residual when mixing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    A,
    B,
}

impl std::str::FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "A" => Ok(Source::A),
            "b" | "B" => Ok(Source::B),
            _ => Err(Error::invalid(format!("selector entries must be a or b, got {s:?}"))),
        }
    }
}

/// Parses five selector letters such as `"abbbb"` or `"a b b b b"`.
pub fn parse_selector(s: &str) -> Result<[Source; 5]> {
    let letters: Vec<Source> = s
        .chars()
        .filter(|c| !c.is_whitespace() && *c != ',')
        .map(|c| c.to_string().parse())
        .collect::<Result<_>>()?;
    letters
        .try_into()
        .map_err(|_| Error::invalid("selector needs exactly five entries (speaker, emotion, prosody, pitch, energy)"))
}

/// `A_b + sum_k R_k(selected)`, accumulated stage by stage in the same
/// order as the adapter.
pub fn mix_stages(a: &ProbeTrace, b: &ProbeTrace, selector: &[Source; 5]) -> Result<Tensor> {
    if a.phonemes != b.phonemes {
        return Err(Error::invalid(format!(
            "mixing needs traces of the same phoneme sequence (lengths {} and {})",
            a.len(),
            b.len()
        )));
    }
    let mut acc = b.stages[0].clone();
    for (k, sel) in selector.iter().enumerate() {
        let r = match sel {
            Source::A => &a.residuals[k],
            Source::B => &b.residuals[k],
        };
        acc.data_mut().iter_mut().zip(r.data()).for_each(|(x, y)| *x += y);
    }
    Ok(acc)
}

/// Decodes a mixed final stage. Durations come from `duration_source`, by
/// default whichever trace supplies the emotion residual.
pub fn mix_styles(
    model: &Model,
    a: &ProbeTrace,
    b: &ProbeTrace,
    selector: &[Source; 5],
    duration_source: Option<Source>,
) -> Result<(Tensor, Tensor)> {
    let f = mix_stages(a, b, selector)?;
    let durations = match duration_source.unwrap_or(selector[1]) {
        Source::A => &a.durations,
        Source::B => &b.durations,
    };
    let mel = model.decode(&f, durations)?;
    Ok((mel, f))
}

pub fn synthesize(
    model: &Model,
    phonemes: &[usize],
    speaker: usize,
    emotion: usize,
    pitch_shift: f64,
    energy_factor: f64,
) -> Result<(Tensor, ProbeTrace)> {
    model.synthesize(phonemes, speaker, emotion, pitch_shift, energy_factor)
}

/// `id,label_speaker,label_emotion,x,y` rows.
pub fn projection_csv(set: &EmbeddingSet, coords: &[[f64; 2]]) -> Result<String> {
    let speakers = set.label("speaker")?;
    let emotions = set.label("emotion")?;
    let mut s = String::from("id,label_speaker,label_emotion,x,y\n");
    for i in 0..set.len() {
        let _ = writeln!(
            s,
            "{},{},{},{:?},{:?}",
            set.ids[i], speakers[i], emotions[i], coords[i][0], coords[i][1]
        );
    }
    Ok(s)
}

/// Parses projection CSV text back into a 2-D embedding set.
pub fn parse_projection_csv(text: &str, record: &str) -> Result<EmbeddingSet> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::format(record, "empty CSV"))?;
    if header.trim() != "id,label_speaker,label_emotion,x,y" {
        return Err(Error::format(record, format!("unexpected header {header:?}")));
    }
    let mut set = EmbeddingSet {
        ids: Vec::new(),
        rows: Vec::new(),
        labels: BTreeMap::new(),
        provenance: "projection".into(),
    };
    let (mut sp, mut em) = (Vec::new(), Vec::new());
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::format(record, format!("line {}: malformed row {line:?}", n + 2));
        if f.len() != 5 {
            return Err(bad());
        }
        set.ids.push(f[0].to_string());
        sp.push(f[1].parse().map_err(|_| bad())?);
        em.push(f[2].parse().map_err(|_| bad())?);
        set.rows.push(vec![f[3].parse().map_err(|_| bad())?, f[4].parse().map_err(|_| bad())?]);
    }
    set.labels.insert("speaker".into(), sp);
    set.labels.insert("emotion".into(), em);
    Ok(set)
}

pub fn metrics_csv(metrics: &[(&str, f64)]) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in metrics {
        let _ = writeln!(s, "{k},{v:?}");
    }
    s
}

/// Per-phoneme mean of the timbre channels divided by the energy channel,
/// averaged over phonemes. Under the corpus rule this is
/// `mean_p phi(p) + sigma(speaker) + eps(emotion)`.
pub fn speaker_statistic(mel: &Tensor, durations: &[usize]) -> Result<Vec<f64>> {
    let avg = crate::corpus::mel_to_phoneme_avg(mel, durations.iter().copied().filter(|&d| d > 0).collect::<Vec<_>>().as_slice())?;
    let m = avg.last_dim();
    let mut out = vec![0.0; m - 2];
    for row in avg.rows() {
        for j in 2..m {
            out[j - 2] += row[j] / row[1];
        }
    }
    let n = avg.shape()[0] as f64;
    out.iter_mut().for_each(|x| *x /= n);
    Ok(out)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::StyleTables;
    use crate::config::ModelConfig;
    use crate::numerics::random_tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_model() -> Model {
        let mut m = Model::new(ModelConfig::toy()).unwrap();
        m.install_tables(&StyleTables {
            speaker: random_tensor(&[4, 64], 31),
            emotion: random_tensor(&[3, 64], 32),
        })
        .unwrap();
        let nets = ["speaker_encoder", "emotion_encoder", "pitch_encoder", "energy_encoder"];
        for (i, name) in nets.iter().enumerate() {
            let id = m.store.id(&format!("{name}.net.out.w")).unwrap();
            let shape = m.store.value(id).shape().to_vec();
            m.store.set(id, random_tensor(&shape, 200 + i as u64)).unwrap();
        }
        let bias = m.store.id("duration_predictor.net.out.b").unwrap();
        m.store.set(bias, Tensor::full(&[1], 3f64.ln())).unwrap();
        m
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
    }

    // Written independently of `silhouette`: full distance matrix, then
    // per-point cluster means.
    fn silhouette_oracle(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
        let n = rows.len();
        let d: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| euclidean(&rows[i], &rows[j])).collect()).collect();
        let mut clusters: Vec<usize> = labels.to_vec();
        clusters.sort();
        clusters.dedup();
        let mut s = 0.0;
        for i in 0..n {
            let mean_to = |c: usize| {
                let idx: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == c).collect();
                idx.iter().map(|&j| d[i][j]).sum::<f64>() / idx.len() as f64
            };
            let a = mean_to(labels[i]);
            let b = clusters
                .iter()
                .filter(|&&c| c != labels[i])
                .map(|&c| mean_to(c))
                .fold(f64::INFINITY, f64::min);
            s += if a.max(b) == 0.0 { 0.0 } else { (b - a) / a.max(b) };
        }
        s / n as f64
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-scale..scale)).collect()).collect()
    }

    #[test]
    fn projection_of_two_distinct_points_and_a_midpoint() {
        let rows = vec![vec![0.0, 0.0, 0.0], vec![2.0, 2.0, 0.0], vec![1.0, 1.0, 0.0]];
        let c = project_rows(&rows).unwrap();
        for p in &c {
            assert!(p[1].abs() < 1e-9);
        }
        assert!(((c[1][0] - c[0][0]).abs() - 8f64.sqrt()).abs() < 1e-9);
        assert!(c[2][0].abs() < 1e-9);
    }

    #[test]
    fn projection_variances_are_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.2..0.2)])
            .collect();
        let c = project_rows(&rows).unwrap();
        let var = |k: usize| c.iter().map(|p| p[k] * p[k]).sum::<f64>();
        assert!(var(0) >= var(1));
        let sum0: f64 = c.iter().map(|p| p[0]).sum();
        assert!(sum0.abs() < 1e-9);
    }

    #[test]
    fn projection_of_collinear_rows() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let c = project_rows(&rows).unwrap();
        assert!(c.iter().all(|p| p[1].abs() < 1e-9));
    }

    #[test]
    fn projection_rejects_degenerate_input() {
        assert!(project_rows(&vec![vec![1.0, 2.0]; 4]).is_err());
        assert!(project_rows(&[vec![1.0], vec![2.0]]).is_err());
        assert!(project_rows(&[vec![1.0], vec![2.0, 1.0], vec![0.0]]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn projection_is_rotation_equivariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = 4;
            let scales = [4.0, 2.0, 0.5, 0.1];
            let rows: Vec<Vec<f64>> = (0..20)
                .map(|_| (0..dim).map(|j| rng.gen_range(-1.0..1.0) * scales[j]).collect())
                .collect();
            let q = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0)).qr().q();
            let shift: Vec<f64> = (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let rotated: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| (0..dim).map(|i| (0..dim).map(|j| q[(i, j)] * r[j]).sum::<f64>() + shift[i]).collect())
                .collect();
            let p = project_rows(&rows).unwrap();
            let pr = project_rows(&rotated).unwrap();
            for k in 0..2 {
                let dot: f64 = p.iter().zip(&pr).map(|(x, y)| x[k] * y[k]).sum();
                let sign = dot.signum();
                for (x, y) in p.iter().zip(&pr) {
                    prop_assert!((x[k] - sign * y[k]).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn silhouette_matches_brute_force(seed in 0u64..10_000, k in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = cloud(&mut rng, 50, 3, 1.0);
            let mut labels: Vec<usize> = (0..50).map(|i| i % k).collect();
            for i in (1..50).rev() {
                labels.swap(i, rng.gen_range(0..=i));
            }
            let s = silhouette(&rows, &labels).unwrap();
            prop_assert!((s - silhouette_oracle(&rows, &labels)).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn separated_clusters_score_high() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3 {
            for mut r in cloud(&mut rng, 15, 2, 0.5) {
                r[0] += 100.0 * c as f64;
                rows.push(r);
                labels.push(c);
            }
        }
        assert!(silhouette(&rows, &labels).unwrap() > 0.9);
    }

    #[test]
    fn random_labels_on_one_blob_score_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let rows = cloud(&mut rng, 400, 2, 1.0);
        let labels: Vec<usize> = (0..400).map(|_| rng.gen_range(0..3)).collect();
        assert!(silhouette(&rows, &labels).unwrap().abs() < 0.1);
    }

    #[test]
    fn silhouette_errors() {
        let rows = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert!(silhouette(&rows, &[0, 0, 0]).is_err());
        assert!(silhouette(&rows, &[0, 0, 1]).is_err());
        assert!(silhouette(&rows, &[0, 1]).is_err());
    }

    #[test]
    fn residual_extraction_identities() {
        let m = toy_model();
        let (_, t) = m.synthesize(&[1, 2, 3], 2, 1, 0.1, 1.2).unwrap();
        for k in 1..=5 {
            assert_eq!(extract_residual(&t, k, k).unwrap(), t.residuals[k - 1]);
        }
        let all = extract_residual(&t, 1, 5).unwrap();
        assert!(close(&all, &stage_expression(&t, "F-A").unwrap(), 0.0));
        let mut sum = t.residuals[0].clone();
        for r in &t.residuals[1..] {
            sum.data_mut().iter_mut().zip(r.data()).for_each(|(x, y)| *x += y);
        }
        assert!(close(&all, &sum, 1e-9));

        let fb = normalized_full_style(&t);
        let mut with_r1 = fb.clone();
        with_r1.data_mut().iter_mut().zip(t.residuals[0].data()).for_each(|(x, y)| *x += y);
        assert!(close(&with_r1, &all, 1e-9));

        assert!(extract_residual(&t, 0, 2).is_err());
        assert!(extract_residual(&t, 3, 2).is_err());
        assert!(extract_residual(&t, 1, 6).is_err());
        assert_eq!(stage_expression(&t, "R3").unwrap(), t.residuals[2]);
        assert_eq!(stage_expression(&t, " C ").unwrap(), t.stages[2]);
        assert!(stage_expression(&t, "R9").is_err());
        assert!(stage_expression(&t, "FA-B").is_err());
    }

    #[test]
    fn selectors() {
        use Source::{A, B};
        assert_eq!(parse_selector("abbbb").unwrap(), [A, B, B, B, B]);
        assert_eq!(parse_selector("a, b, a, b, a").unwrap(), [A, B, A, B, A]);
        assert!(parse_selector("abbb").is_err());
        assert!(parse_selector("abbbbb").is_err());
        assert!(parse_selector("abcbb").is_err());
    }

    #[test]
    fn uniform_selectors_reproduce_synthesis() {
        let m = toy_model();
        let ph = [3, 1, 4, 1];
        let (mel_a, ta) = m.synthesize(&ph, 0, 1, 0.0, 1.0).unwrap();
        let (mel_b, tb) = m.synthesize(&ph, 3, 2, 0.0, 1.0).unwrap();
        let (mel, f) = mix_styles(&m, &ta, &tb, &[Source::B; 5], None).unwrap();
        assert_eq!(f, tb.stages[5]);
        assert_eq!(mel, mel_b);
        let (mel, f) = mix_styles(&m, &ta, &tb, &[Source::A; 5], None).unwrap();
        assert_eq!(f, ta.stages[5]);
        assert_eq!(mel, mel_a);
    }

    #[test]
    fn mixed_stage_is_base_plus_selected_residuals() {
        let m = toy_model();
        let ph = [2, 5, 7];
        let (_, ta) = m.synthesize(&ph, 0, 0, 0.0, 1.0).unwrap();
        let (_, tb) = m.synthesize(&ph, 1, 2, 0.0, 1.0).unwrap();
        let sel = parse_selector("abbab").unwrap();
        let f = mix_stages(&ta, &tb, &sel).unwrap();
        let mut want = tb.stages[0].clone();
        for (k, r) in [&ta, &tb, &tb, &ta, &tb].iter().enumerate() {
            want.data_mut().iter_mut().zip(r.residuals[k].data()).for_each(|(x, y)| *x += y);
        }
        assert!(close(&f, &want, 1e-12));
        let (_, other) = m.synthesize(&[2, 5], 0, 0, 0.0, 1.0).unwrap();
        assert!(mix_stages(&other, &tb, &sel).is_err());
    }

    #[test]
    fn embedding_sets_and_csv() {
        let m = toy_model();
        let mut traces = Vec::new();
        for (i, (s, e)) in [(0, 0), (1, 1), (2, 2), (3, 0), (0, 1)].into_iter().enumerate() {
            traces.push((format!("u{i}"), m.synthesize(&[1, 2, 3], s, e, 0.0, 1.0).unwrap().1));
        }
        let set = EmbeddingSet::from_traces(traces.iter().map(|(id, t)| (id.as_str(), t)), "F-B").unwrap();
        assert_eq!(set.len(), 5);
        assert_eq!(set.label("speaker").unwrap(), &[0, 1, 2, 3, 0]);
        assert_eq!(set.label("emotion").unwrap(), &[0, 1, 2, 0, 1]);
        assert!(set.label("phoneme").is_err());
        assert_eq!(set.rows[1], row_mean(&normalized_full_style(&traces[1].1)));

        let coords = project_2d(&set).unwrap();
        let text = projection_csv(&set, &coords).unwrap();
        let back = parse_projection_csv(&text, "p").unwrap();
        assert_eq!(back.ids, set.ids);
        assert_eq!(back.labels, set.labels);
        let flat: Vec<Vec<f64>> = coords.iter().map(|c| c.to_vec()).collect();
        assert_eq!(back.rows, flat);
        assert!(parse_projection_csv("id,x\n", "p").is_err());
        assert!(parse_projection_csv("id,label_speaker,label_emotion,x,y\na,1,2,3\n", "p").is_err());
    }

    #[test]
    fn metrics_csv_layout() {
        assert_eq!(metrics_csv(&[("s", 0.5), ("t", -1.0)]), "metric,value\ns,0.5\nt,-1.0\n");
    }

    #[test]
    fn speaker_statistic_divides_out_energy() {
        // Two phonemes, two frames each; mel dim 4.
        let rows = [
            [0.0, 2.0, 2.0, 4.0],
            [0.0, 2.0, 2.0, 4.0],
            [0.0, 0.5, 1.0, 0.0],
            [0.0, 0.5, 1.0, 0.0],
        ];
        let mel = Tensor::new(vec![4, 4], rows.concat()).unwrap();
        let s = speaker_statistic(&mel, &[2, 0, 2]).unwrap();
        assert_eq!(s, vec![1.5, 1.0]);
        assert_eq!(euclidean(&[0.0, 3.0], &[4.0, 0.0]), 5.0);
    }
}
