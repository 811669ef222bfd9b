//! Plausibility analyses over explained corpora: where in time and frequency
//! the saliency falls, how focused it is, and which previous tokens matter.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::saliency::SaliencyBundle;

/// Excess kurtosis `m4 / m2^2 - 3` from population moments.
pub fn kurtosis(values: &[f64]) -> Result<f64> {
    if values.len() < 4 {
        return Err(Error::domain(format!("kurtosis needs at least 4 values, got {}", values.len())));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (m2, m4) = values.iter().fold((0.0, 0.0), |(m2, m4), v| {
        let d2 = (v - mean).powi(2);
        (m2 + d2, m4 + d2 * d2)
    });
    let (m2, m4) = (m2 / n, m4 / n);
    if m2 <= 1e-300 || m2 <= 1e-24 * mean.powi(2) {
        return Err(Error::domain("kurtosis of a sample without variance"));
    }
    Ok(m4 / (m2 * m2) - 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub mean_a: f64,
    pub mean_b: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub t: f64,
    pub df: f64,
    /// One-sided p-value for `mean_a > mean_b`.
    pub p: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Student's two-sample t-test with pooled variance, one-sided in favour of
/// `a` having the larger mean.
pub fn t_test_greater(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.is_empty() || b.is_empty() || a.len() + b.len() < 3 {
        return Err(Error::domain(format!(
            "t-test needs non-empty samples with at least 3 values in total, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, mb) = (mean(a), mean(b));
    let ss = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    let df = (a.len() + b.len() - 2) as f64;
    let pooled = (ss(a, ma) + ss(b, mb)) / df;
    let se = (pooled * (1.0 / a.len() as f64 + 1.0 / b.len() as f64)).sqrt();
    let diff = ma - mb;
    let t = if diff == 0.0 {
        0.0
    } else if se > 0.0 {
        diff / se
    } else {
        diff.signum() * f64::INFINITY
    };
    let p = if t.is_infinite() {
        if t > 0.0 {
            0.0
        } else {
            1.0
        }
    } else {
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::domain(e.to_string()))?;
        dist.sf(t)
    };
    Ok(TTest {
        mean_a: ma,
        mean_b: mb,
        n_a: a.len(),
        n_b: b.len(),
        t,
        df,
        p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordAlignment {
    pub word: String,
    pub start_s: f64,
    pub end_s: f64,
}

pub fn validate_alignments(words: &[WordAlignment]) -> Result<()> {
    for w in words {
        if !(w.start_s >= 0.0 && w.start_s < w.end_s) {
            return Err(Error::domain(format!(
                "alignment of {:?} spans [{}, {})",
                w.word, w.start_s, w.end_s
            )));
        }
    }
    Ok(())
}

pub fn load_alignments(path: impl AsRef<Path>) -> Result<Vec<WordAlignment>> {
    let text = std::fs::read_to_string(path)?;
    let words: Vec<WordAlignment> =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("bad alignment file: {e}")))?;
    validate_alignments(&words)?;
    Ok(words)
}

/// A decoded word's saliency (mean of its tokens' maps) and its aligned span.
#[derive(Debug, Clone)]
pub struct WordSaliency {
    pub word: String,
    pub map: Array2<f64>,
    pub start_s: f64,
    pub end_s: f64,
}

/// Word maps paired in order with alignment entries. Returns the pairs and
/// the number of decoded words that could not be paired.
pub fn word_saliencies(bundle: &SaliencyBundle, alignment: &[WordAlignment]) -> (Vec<WordSaliency>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    let mut next = 0;
    for (word, positions) in bundle.tokens.word_spans() {
        let maps: Vec<&Array2<f64>> = positions
            .iter()
            .filter_map(|&p| bundle.token(p).map(|t| &t.sx))
            .collect();
        let found = alignment[next.min(alignment.len())..]
            .iter()
            .position(|a| a.word.eq_ignore_ascii_case(&word));
        match (found, maps.is_empty()) {
            (Some(offset), false) => {
                let a = &alignment[next + offset];
                next += offset + 1;
                let mut map = Array2::<f64>::zeros(maps[0].dim());
                for m in &maps {
                    map += *m;
                }
                map /= maps.len() as f64;
                out.push(WordSaliency {
                    word,
                    map,
                    start_s: a.start_s,
                    end_s: a.end_s,
                });
            }
            _ => skipped += 1,
        }
    }
    (out, skipped)
}

fn frames_in_span(n_frames: usize, stride_s: f64, start_s: f64, end_s: f64) -> Vec<bool> {
    (0..n_frames)
        .map(|t| {
            let time = t as f64 * stride_s;
            time >= start_s && time < end_s
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeAlignmentReport {
    pub mean_in: f64,
    pub mean_out: f64,
    pub t: f64,
    pub p: f64,
    pub n_words: usize,
    pub skipped: usize,
}

/// For every aligned word, the mean of its per-frame maximum over frequency
/// inside and outside its span; a one-sided t-test compares the two samples.
pub fn time_alignment_test(bundles: &[SaliencyBundle], alignments: &[Vec<WordAlignment>]) -> Result<TimeAlignmentReport> {
    if bundles.len() != alignments.len() {
        return Err(Error::domain("one alignment list per bundle is required"));
    }
    if alignments.iter().all(Vec::is_empty) {
        return Err(Error::domain("no word alignments given"));
    }
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    for (b, a) in bundles.iter().zip(alignments) {
        let (words, missed) = word_saliencies(b, a);
        skipped += missed;
        for w in words {
            let profile = w.map.map_axis(Axis(1), |row| row.fold(f64::NEG_INFINITY, |m, &v| m.max(v)));
            let span = frames_in_span(profile.len(), b.input.stride_s, w.start_s, w.end_s);
            let pick = |want: bool| -> Vec<f64> {
                profile.iter().zip(&span).filter(|(_, s)| **s == want).map(|(v, _)| *v).collect()
            };
            let (i, o) = (pick(true), pick(false));
            if i.is_empty() || o.is_empty() {
                skipped += 1;
                continue;
            }
            inside.push(mean(&i));
            outside.push(mean(&o));
        }
    }
    let test = t_test_greater(&inside, &outside)?;
    Ok(TimeAlignmentReport {
        mean_in: test.mean_a,
        mean_out: test.mean_b,
        t: test.t,
        p: test.p,
        n_words: inside.len(),
        skipped,
    })
}

/// Per-channel maximum over the frames of a span.
pub fn span_channel_max(map: &Array2<f64>, stride_s: f64, start_s: f64, end_s: f64) -> Option<Vec<f64>> {
    let span = frames_in_span(map.nrows(), stride_s, start_s, end_s);
    if !span.iter().any(|&s| s) {
        return None;
    }
    let mut best = vec![f64::NEG_INFINITY; map.ncols()];
    for (row, _) in map.outer_iter().zip(&span).filter(|(_, s)| **s) {
        for (b, &v) in best.iter_mut().zip(row) {
            *b = b.max(v);
        }
    }
    Some(best)
}

/// Mean of per-occurrence channel profiles.
pub fn mean_profile(profiles: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = profiles.first().ok_or_else(|| Error::Empty("no occurrences".into()))?;
    let mut sum = vec![0.0; first.len()];
    for p in profiles {
        for (s, v) in sum.iter_mut().zip(p) {
            *s += v;
        }
    }
    Ok(sum.into_iter().map(|s| s / profiles.len() as f64).collect())
}

/// Channel profile of `word` averaged over its aligned occurrences.
pub fn frequency_profile(bundles: &[SaliencyBundle], alignments: &[Vec<WordAlignment>], word: &str) -> Result<Vec<f64>> {
    if bundles.len() != alignments.len() {
        return Err(Error::domain("one alignment list per bundle is required"));
    }
    let mut profiles = Vec::new();
    for (b, a) in bundles.iter().zip(alignments) {
        for w in word_saliencies(b, a).0 {
            if w.word.eq_ignore_ascii_case(word) {
                if let Some(p) = span_channel_max(&w.map, b.input.stride_s, w.start_s, w.end_s) {
                    profiles.push(p);
                }
            }
        }
    }
    mean_profile(&profiles).map_err(|_| Error::Empty(format!("no aligned occurrence of {word:?}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenKurtosis {
    pub token: String,
    pub count: usize,
    pub mean_kurtosis: f64,
}

/// Kurtosis of every explained token's spectrogram map, in corpus order.
pub fn token_kurtoses(bundles: &[SaliencyBundle]) -> Vec<(String, f64)> {
    bundles
        .iter()
        .flat_map(|b| b.maps.iter())
        .filter_map(|m| {
            let v: Vec<f64> = m.sx.iter().copied().collect();
            kurtosis(&v).ok().map(|k| (m.surface.clone(), k))
        })
        .collect()
}

/// Mean kurtosis per token, most focused first.
pub fn kurtosis_report(bundles: &[SaliencyBundle]) -> Vec<TokenKurtosis> {
    let mut by_token: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (t, k) in token_kurtoses(bundles) {
        by_token.entry(t).or_default().push(k);
    }
    let mut rows: Vec<TokenKurtosis> = by_token
        .into_iter()
        .map(|(token, ks)| TokenKurtosis {
            token,
            count: ks.len(),
            mean_kurtosis: mean(&ks),
        })
        .collect();
    rows.sort_by(|a, b| b.mean_kurtosis.total_cmp(&a.mean_kurtosis).then(a.token.cmp(&b.token)));
    rows
}

/// Token-map scores split by prefix position: `<s>` (index 0), the latest
/// token (last index) and everything between.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PositionalStats {
    pub start: Vec<f64>,
    pub intermediate: Vec<f64>,
    pub latest: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionalReport {
    pub mean_start: Option<f64>,
    pub mean_intermediate: Option<f64>,
    pub mean_latest: Option<f64>,
    pub latest_vs_intermediate: Option<TTest>,
    pub start_vs_intermediate: Option<TTest>,
}

/// Each token map is divided by its maximum before it is split, so maps of
/// different tokens share a scale. Tokens in `exclude` are left out.
pub fn positional_stats(bundles: &[SaliencyBundle], exclude: &[&str]) -> PositionalStats {
    let mut stats = PositionalStats::default();
    for m in bundles.iter().flat_map(|b| b.maps.iter()) {
        if exclude.contains(&m.surface.as_str()) || m.sy.is_empty() {
            continue;
        }
        let max = m.sy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scale = if max > 0.0 { max } else { 1.0 };
        let last = m.sy.len() - 1;
        for (j, &v) in m.sy.iter().enumerate() {
            let v = v / scale;
            if j == 0 {
                stats.start.push(v);
            } else if j == last {
                stats.latest.push(v);
            } else {
                stats.intermediate.push(v);
            }
        }
    }
    stats
}

impl PositionalStats {
    pub fn report(&self) -> PositionalReport {
        let m = |v: &[f64]| (!v.is_empty()).then(|| mean(v));
        PositionalReport {
            mean_start: m(&self.start),
            mean_intermediate: m(&self.intermediate),
            mean_latest: m(&self.latest),
            latest_vs_intermediate: t_test_greater(&self.latest, &self.intermediate).ok(),
            start_vs_intermediate: t_test_greater(&self.start, &self.intermediate).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntermediateRow {
    pub token: String,
    pub occurrences: usize,
    /// Share of occurrences, in percent, whose highest token score sits on an
    /// intermediate token.
    pub it_max_pct: f64,
    /// Intermediate tokens holding the maximum, most frequent first.
    pub top: Vec<(String, usize)>,
}

/// Tokens seen at least `min_count` times whose token map peaks on an
/// intermediate token at least once, by descending percentage.
pub fn intermediate_token_report(bundles: &[SaliencyBundle], min_count: usize) -> Vec<IntermediateRow> {
    let mut occ: BTreeMap<String, (usize, BTreeMap<String, usize>)> = BTreeMap::new();
    for b in bundles {
        for m in &b.maps {
            let entry = occ.entry(m.surface.clone()).or_default();
            entry.0 += 1;
            if m.sy.len() < 3 {
                continue;
            }
            let mut best = 0;
            for (j, &v) in m.sy.iter().enumerate() {
                if v > m.sy[best] {
                    best = j;
                }
            }
            if best > 0 && best < m.sy.len() - 1 {
                *entry.1.entry(b.tokens.surface[best].clone()).or_default() += 1;
            }
        }
    }
    let mut rows: Vec<IntermediateRow> = occ
        .into_iter()
        .filter(|(_, (n, its))| *n >= min_count && !its.is_empty())
        .map(|(token, (n, its))| {
            let hits: usize = its.values().sum();
            let mut top: Vec<(String, usize)> = its.into_iter().collect();
            top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            IntermediateRow {
                token,
                occurrences: n,
                it_max_pct: 100.0 * hits as f64 / n as f64,
                top,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.it_max_pct.total_cmp(&a.it_max_pct).then(a.token.cmp(&b.token)));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::Spectrogram;
    use crate::oracle::TokenSequence;
    use crate::saliency::{Method, NormStage, TokenSaliency};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kurtosis_examples() {
        let two_point: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        assert!((kurtosis(&two_point).unwrap() + 2.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let uniform: Vec<f64> = (0..100_000).map(|_| rng.gen::<f64>()).collect();
        assert!((kurtosis(&uniform).unwrap() + 1.2).abs() < 0.05);
        let normal: Vec<f64> = (0..100_000).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        assert!(kurtosis(&normal).unwrap().abs() < 0.1);
        assert!(kurtosis(&[1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(kurtosis(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn t_test_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let t = t_test_greater(&a, &a).unwrap();
        assert_eq!(t.t, 0.0);
        assert!((t.p - 0.5).abs() < 1e-9);
        // Hand evaluation: means 5 and 2, pooled variance 1, n = 3 + 3.
        let t = t_test_greater(&[4.0, 5.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((t.t - 3.0 / (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(t.df, 4.0);
        // Closed-form t CDF at 4 degrees of freedom.
        let u = 1.0 + t.t * t.t / 4.0;
        let cdf = 0.5 + 0.375 * t.t / u.sqrt() * (1.0 - t.t * t.t / (12.0 * u));
        assert!((t.p - (1.0 - cdf)).abs() < 1e-9);
        let swapped = t_test_greater(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(swapped.t, -t.t);
        assert!((swapped.p + t.p - 1.0).abs() < 1e-12);
        assert!(t_test_greater(&[], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn t_test_pvalue_against_table() {
        // The one-sided 5% point at 5 degrees of freedom is t = 2.015.
        let dist = StudentsT::new(0.0, 1.0, 5.0).unwrap();
        assert!((dist.sf(2.015) - 0.05).abs() < 1e-4);
    }

    fn bundle(surfaces: &[&str], maps: Vec<(Array2<f64>, Vec<f64>)>) -> SaliencyBundle {
        let (t, c) = maps[0].0.dim();
        let tokens = TokenSequence::new(
            (0..surfaces.len() as u32).collect(),
            surfaces.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap();
        SaliencyBundle {
            maps: maps
                .into_iter()
                .enumerate()
                .map(|(e, (sx, sy))| TokenSaliency {
                    position: e + 1,
                    token_id: e as u32 + 1,
                    surface: surfaces[e + 1].to_string(),
                    sx,
                    sy,
                })
                .collect(),
            tokens,
            method: Method::Spes,
            stage: NormStage::Minmaxed,
            seed: 0,
            config: serde_json::Value::Null,
            sentence: Array2::zeros((t, c)),
            input: Spectrogram::from_frames(Array2::zeros((t, c)), true).unwrap(),
        }
    }

    fn lit(t: usize, c: usize, frames: std::ops::Range<usize>, chans: std::ops::Range<usize>) -> Array2<f64> {
        Array2::from_shape_fn((t, c), |(i, j)| if frames.contains(&i) && chans.contains(&j) { 1.0 } else { 0.0 })
    }

    #[test]
    fn positional_groups_partition() {
        let b = bundle(
            &["<s>", "A", "B", "C", "</s>"],
            vec![
                (lit(4, 4, 0..1, 0..1), vec![0.5]),
                (lit(4, 4, 0..1, 0..1), vec![0.2, 0.4]),
                (lit(4, 4, 0..1, 0..1), vec![0.1, 0.3, 0.6]),
            ],
        );
        let s = positional_stats(&[b.clone()], &[]);
        assert_eq!(s.start.len() + s.intermediate.len() + s.latest.len(), 6);
        assert_eq!(s.start, vec![1.0, 0.5, 0.1 / 0.6]);
        assert_eq!(s.latest, vec![1.0, 1.0]);
        assert_eq!(s.intermediate, vec![0.3 / 0.6]);
        let s = positional_stats(&[b], &["C"]);
        assert!(s.intermediate.is_empty());
        assert_eq!(s.report().latest_vs_intermediate, None);
    }

    #[test]
    fn equal_saliency_gives_zero_t() {
        let b = bundle(&["<s>", "A", "B", "C"], vec![
            (lit(4, 4, 0..1, 0..1), vec![1.0, 1.0]),
            (lit(4, 4, 0..1, 0..1), vec![1.0, 1.0, 1.0]),
            (lit(4, 4, 0..1, 0..1), vec![1.0, 1.0, 1.0, 1.0]),
        ]);
        let r = positional_stats(&[b], &[]).report();
        assert_eq!(r.mean_latest, r.mean_intermediate);
        assert_eq!(r.latest_vs_intermediate.unwrap().t, 0.0);
    }

    #[test]
    fn intermediate_report() {
        let b = bundle(
            &["<s>", "x", "C", "y", "MARK"],
            vec![
                (lit(4, 4, 0..1, 0..1), vec![0.1]),
                (lit(4, 4, 0..1, 0..1), vec![0.1, 0.9]),
                (lit(4, 4, 0..1, 0..1), vec![0.0, 0.1, 0.2]),
                (lit(4, 4, 0..1, 0..1), vec![0.0, 0.1, 1.0, 0.3]),
            ],
        );
        let rows = intermediate_token_report(&[b.clone()], 1);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].token, "MARK");
        assert_eq!(rows[0].it_max_pct, 100.0);
        assert_eq!(rows[0].top, vec![("C".to_string(), 1)]);
        assert!(intermediate_token_report(&[b], 2).is_empty());
        let lt = bundle(&["<s>", "a", "b", "c"], vec![
            (lit(4, 4, 0..1, 0..1), vec![0.0]),
            (lit(4, 4, 0..1, 0..1), vec![0.0, 1.0]),
            (lit(4, 4, 0..1, 0..1), vec![0.0, 0.2, 1.0]),
        ]);
        assert!(intermediate_token_report(&[lt], 0).is_empty());
    }

    #[test]
    fn time_alignment_and_profile() {
        // Two words over 20 frames of 10 ms; each lights its own half.
        let b = bundle(
            &["<s>", "A", "B", "</s>"],
            vec![(lit(20, 6, 0..10, 1..3), vec![1.0]), (lit(20, 6, 10..20, 4..5), vec![0.0, 1.0])],
        );
        let align = vec![
            WordAlignment { word: "A".into(), start_s: 0.0, end_s: 0.095 },
            WordAlignment { word: "B".into(), start_s: 0.095, end_s: 0.2 },
        ];
        let r = time_alignment_test(&[b.clone()], &[align.clone()]).unwrap();
        assert_eq!((r.mean_in, r.mean_out, r.n_words, r.skipped), (1.0, 0.0, 2, 0));
        assert_eq!(r.p, 0.0);
        let p = frequency_profile(&[b.clone()], &[align.clone()], "A").unwrap();
        assert_eq!(p, vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let twice = frequency_profile(&[b.clone(), b.clone()], &[align.clone(), align.clone()], "A").unwrap();
        assert_eq!(twice, p);
        assert!(matches!(frequency_profile(&[b.clone()], &[align], "Z"), Err(Error::Empty(_))));
        assert!(time_alignment_test(&[b], &[vec![]]).is_err());
    }

    #[test]
    fn profile_mean() {
        let u = vec![1.0, 0.0];
        let v = vec![0.0, 3.0];
        assert_eq!(mean_profile(&[u.clone(), v.clone()]).unwrap(), vec![0.5, 1.5]);
        assert_eq!(mean_profile(&[v.clone(), u.clone()]).unwrap(), mean_profile(&[u, v]).unwrap());
    }

    #[test]
    fn alignment_validation() {
        let bad = [WordAlignment { word: "a".into(), start_s: 0.5, end_s: 0.5 }];
        assert!(validate_alignments(&bad).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        std::fs::write(&path, r#"[{"word":"A","start_s":0.0,"end_s":0.5}]"#).unwrap();
        assert_eq!(load_alignments(&path).unwrap().len(), 1);
    }

    #[test]
    fn kurtosis_report_orders_tokens() {
        let peaked = lit(10, 10, 0..1, 0..1);
        let spread = Array2::from_shape_fn((10, 10), |(i, j)| ((i + j) % 2) as f64);
        let b = bundle(&["<s>", "A", "MARK"], vec![(peaked, vec![1.0]), (spread, vec![0.0, 1.0])]);
        let rows = kurtosis_report(&[b]);
        assert_eq!(rows[0].token, "A");
        assert!(rows[0].mean_kurtosis > rows[1].mean_kurtosis);
    }
}
