//! Faithfulness and compactness curves, and the task scorers behind them.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::OnceLock;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::audio::Spectrogram;
use crate::error::{Error, Result};
use crate::masks::substream;
use crate::oracle::Oracle;
use crate::saliency::minmax_map;

/// Deletion fractions and size thresholds: 0 to 1 in steps of 0.05.
pub const CURVE_POINTS: usize = 21;

pub fn curve_xs() -> Vec<f64> {
    (0..CURVE_POINTS).map(|i| i as f64 / (CURVE_POINTS - 1) as f64).collect()
}

fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence WER in percent, capped at 100.
pub fn wer<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Result<f64> {
    corpus_wer(&[(hyp, reference)])
}

/// Corpus WER in percent: total edits over total reference words, capped at
/// 100.
pub fn corpus_wer<S: AsRef<str>, H: AsRef<[S]>>(pairs: &[(H, H)]) -> Result<f64> {
    let mut edits = 0;
    let mut words = 0;
    for (hyp, reference) in pairs {
        let h: Vec<&str> = hyp.as_ref().iter().map(AsRef::as_ref).collect();
        let r: Vec<&str> = reference.as_ref().iter().map(AsRef::as_ref).collect();
        edits += levenshtein(&h, &r);
        words += r.len();
    }
    if words == 0 {
        return Err(Error::domain("WER needs a non-empty reference"));
    }
    Ok((100.0 * edits as f64 / words as f64).min(100.0))
}

fn tokenize_13a_regexes() -> &'static [(Regex, &'static str); 4] {
    static RES: OnceLock<[(Regex, &'static str); 4]> = OnceLock::new();
    RES.get_or_init(|| {
        [
            (Regex::new(r"([{-~\[-` -&(-+:-@/])").unwrap(), " $1 "),
            (Regex::new(r"([^0-9])([.,])").unwrap(), "$1 $2 "),
            (Regex::new(r"([.,])([^0-9])").unwrap(), " $1 $2"),
            (Regex::new(r"([0-9])(-)").unwrap(), "$1 $2 "),
        ]
    })
}

/// Mteval-13a tokenization: splits punctuation off words, keeping periods
/// and commas inside numbers.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let mut s = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if s.contains('&') {
        s = s
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let mut s = format!(" {s} ");
    for (re, rep) in tokenize_13a_regexes() {
        s = re.replace_all(&s, *rep).into_owned();
    }
    s.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU in percent over 1- to 4-grams with the brevity penalty and no
/// smoothing. Orders for which the hypotheses hold no n-gram at all are left
/// out of the geometric mean; an order with candidates but no match gives 0.
pub fn bleu<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::domain(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::domain("BLEU of an empty corpus"));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let h = tokenize_13a(h.as_ref());
        let r = tokenize_13a(r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(&r, n);
            for (g, c) in ngram_counts(&h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for (m, t) in matches.iter().zip(&totals) {
        if *t == 0 {
            continue;
        }
        if *m == 0 {
            return Ok(0.0);
        }
        log_sum += (*m as f64 / *t as f64).ln();
        orders += 1;
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

/// Trapezoidal area normalized by the x-range.
pub fn auc(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::domain("AUC needs at least two points"));
    }
    if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::domain("AUC points must have strictly increasing x"));
    }
    let area: f64 = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Ok(area / (points[points.len() - 1].0 - points[0].0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub metric: String,
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl EvalCurve {
    pub fn new(metric: impl Into<String>, points: Vec<(f64, f64)>) -> Result<Self> {
        let auc = auc(&points)?;
        Ok(Self {
            metric: metric.into(),
            points,
            auc,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y\n");
        for (x, y) in &self.points {
            writeln!(out, "{x},{y}").unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("curve serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMetric {
    Wer,
    Bleu,
}

impl TaskMetric {
    pub fn name(self) -> &'static str {
        match self {
            TaskMetric::Wer => "wer",
            TaskMetric::Bleu => "bleu",
        }
    }

    /// Corpus score of hypothesis and reference word lists.
    pub fn score(self, hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
        match self {
            TaskMetric::Wer => {
                let pairs: Vec<(&[String], &[String])> =
                    hyps.iter().zip(refs).map(|(h, r)| (&h[..], &r[..])).collect();
                corpus_wer(&pairs)
            }
            TaskMetric::Bleu => {
                let h: Vec<String> = hyps.iter().map(|w| w.join(" ")).collect();
                let r: Vec<String> = refs.iter().map(|w| w.join(" ")).collect();
                bleu(&h, &r)
            }
        }
    }
}

/// Cells ordered by descending saliency, ties by ascending row-major index.
pub fn saliency_ranking(map: &Array2<f64>) -> Vec<usize> {
    let values: Vec<f64> = map.iter().copied().collect();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Zeroes the `round(fraction * cells)` top-ranked cells.
pub fn delete_top(x: &Spectrogram, ranking: &[usize], fraction: f64) -> Result<Spectrogram> {
    let n = x.frames().len();
    if ranking.len() != n {
        return Err(Error::domain(format!("ranking of {} cells for {n}", ranking.len())));
    }
    let count = (fraction.clamp(0.0, 1.0) * n as f64).round() as usize;
    let mut frames = x.frames().clone();
    let c = x.n_mels();
    for &i in &ranking[..count] {
        frames[[i / c, i % c]] = 0.0;
    }
    let mut out = Spectrogram::from_frames(frames, x.cmvn)?;
    out.stride_s = x.stride_s;
    Ok(out)
}

/// One utterance of an evaluation corpus.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub input: Spectrogram,
    pub reference: Vec<String>,
    pub saliency: Array2<f64>,
}

/// Task score after deleting the most salient cells, at each of the 21
/// fractions. The per-step decodes run in parallel.
pub fn deletion_curve<O: Oracle>(oracle: &O, items: &[EvalItem], metric: TaskMetric) -> Result<EvalCurve> {
    if items.is_empty() {
        return Err(Error::domain("deletion curve of an empty corpus"));
    }
    for it in items {
        if it.saliency.dim() != it.input.shape() {
            return Err(Error::ShapeMismatch {
                expected: it.input.shape(),
                got: it.saliency.dim(),
            });
        }
    }
    let rankings: Vec<Vec<usize>> = items.par_iter().map(|it| saliency_ranking(&it.saliency)).collect();
    let refs: Vec<Vec<String>> = items.iter().map(|it| it.reference.clone()).collect();
    let mut points = Vec::with_capacity(CURVE_POINTS);
    for x in curve_xs() {
        let hyps = items
            .par_iter()
            .zip(&rankings)
            .map(|(it, rank)| {
                let xp = delete_top(&it.input, rank, x)?;
                Ok(oracle.decode(&xp)?.words())
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e: Error| Error::domain(format!("deletion step {x:.2} failed: {e}")))?;
        let y = metric.score(&hyps, &refs)?;
        log::debug!("deletion {x:.2}: {} = {y:.3}", metric.name());
        points.push((x, y));
    }
    EvalCurve::new(format!("deletion-{}", metric.name()), points)
}

/// Mean fraction of cells scoring above each threshold once every map is
/// min-max normalized.
pub fn size_curve(maps: &[Array2<f64>]) -> Result<EvalCurve> {
    if maps.is_empty() {
        return Err(Error::domain("size curve of no maps"));
    }
    let normalized: Vec<Vec<f64>> = maps
        .iter()
        .map(|m| {
            let mut v: Vec<f64> = minmax_map(m).iter().copied().collect();
            v.sort_by(f64::total_cmp);
            v
        })
        .collect();
    let points = curve_xs()
        .into_iter()
        .map(|t| {
            let mean = normalized
                .iter()
                .map(|v| {
                    let above = v.len() - v.partition_point(|&s| s <= t);
                    above as f64 / v.len() as f64
                })
                .sum::<f64>()
                / normalized.len() as f64;
            (t, mean)
        })
        .collect();
    EvalCurve::new("size", points)
}

/// Uniform random scores, the chance baseline for deletion.
pub fn random_saliency(shape: (usize, usize), seed: u64) -> Array2<f64> {
    const RANDOM_STREAM: u64 = 0x5241_4e44;
    let mut rng = substream(seed, RANDOM_STREAM, 0);
    Array2::from_shape_simple_fn(shape, || rng.gen::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{ToyModel, ToyToken, TONE_BANDS};
    use ndarray::s;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&words("a b c"), &words("a b c")).unwrap(), 0.0);
        assert!((wer(&words("a x c"), &words("a b c")).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        let long: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
        let r: Vec<String> = words("a b c").into_iter().map(String::from).collect();
        assert_eq!(wer(&long, &r).unwrap(), 100.0);
        assert!(wer(&words("a"), &[]).is_err());
        assert_eq!(wer(&[] as &[&str], &words("a b")).unwrap(), 100.0);
    }

    #[test]
    fn corpus_wer_pools_edits() {
        let pairs = [(words("a b"), words("a c")), (words("x y z w"), words("x y z w"))];
        assert!((corpus_wer(&pairs).unwrap() - 100.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn tokenization() {
        assert_eq!(tokenize_13a("Hello, world!"), vec!["Hello", ",", "world", "!"]);
        assert_eq!(tokenize_13a("costs 3.50 or 1,000."), vec!["costs", "3.50", "or", "1,000", "."]);
        assert_eq!(tokenize_13a("a&amp;b"), vec!["a", "&", "b"]);
    }

    #[test]
    fn bleu_examples() {
        let c = ["the cat sat on the mat", "a dog"];
        assert!((bleu(&c, &c).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(bleu(&["one two three four"], &["five six seven eight"]).unwrap(), 0.0);
        // Precisions 3/3, 2/2, 1/1 with no 4-gram candidate; brevity 3 vs 4.
        let got = bleu(&["the cat sat"], &["the cat sat down"]).unwrap();
        assert!((got - 100.0 * (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-9);
        assert!((got - 71.6531).abs() < 1e-4);
        assert!(bleu(&["a"], &[] as &[&str]).is_err());
        assert!(bleu(&[] as &[&str], &[]).is_err());
    }

    #[test]
    fn bleu_hand_computed_with_partial_matches() {
        // hyp: a b c d e (5), ref: a b x d e f (6).
        // 1-grams 4/5, 2-grams 2/4, 3-grams 0/3 -> 0.
        assert_eq!(bleu(&["a b c d e"], &["a b x d e f"]).unwrap(), 0.0);
        // hyp: a b c d x (5), ref: a b c d y (5): 4/5, 3/4, 2/3, 1/2.
        let got = bleu(&["a b c d x"], &["a b c d y"]).unwrap();
        let expect = 100.0 * (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((got - expect).abs() < 1e-9);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[(0.0, 0.0), (1.0, 1.0)]).unwrap(), 0.5);
        assert!((auc(&[(0.0, 0.3), (0.4, 0.3), (1.0, 0.3)]).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(auc(&[(0.0, 0.0), (0.5, 1.0), (1.0, 0.0)]).unwrap(), 0.5);
        assert!(auc(&[(0.0, 0.0), (0.0, 1.0)]).is_err());
        assert!(auc(&[(0.0, 0.0)]).is_err());
    }

    #[test]
    fn ranking_ties_by_index() {
        let m = ndarray::array![[0.5, 0.9], [0.5, 0.1]];
        assert_eq!(saliency_ranking(&m), vec![1, 0, 2, 3]);
    }

    #[test]
    fn size_examples() {
        let zero = size_curve(&[Array2::zeros((4, 5))]).unwrap();
        assert!(zero.points.iter().all(|p| p.1 == 0.0));
        assert_eq!(zero.auc, 0.0);

        let n = 1001;
        let spaced = Array2::from_shape_fn((1, n), |(_, i)| i as f64 / (n - 1) as f64);
        let c = size_curve(&[spaced]).unwrap();
        for (t, y) in &c.points {
            assert!((y - (1.0 - t)).abs() < 2e-3, "{t} {y}");
        }
        assert!((c.auc - 0.5).abs() < 2e-3);

        let binary = Array2::from_shape_fn((10, 10), |(r, _)| if r < 3 { 1.0 } else { 0.0 });
        let c = size_curve(&[binary]).unwrap();
        for (t, y) in &c.points {
            let expect = if *t < 1.0 { 0.3 } else { 0.0 };
            assert!((y - expect).abs() < 1e-12);
        }
        assert!((c.auc - 0.3 * 0.975).abs() < 1e-12);
    }

    #[test]
    fn csv_and_json() {
        let c = EvalCurve::new("size", vec![(0.0, 1.0), (1.0, 0.0)]).unwrap();
        assert_eq!(c.to_csv(), "x,y\n0,1\n1,0\n");
        let v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(v["metric"], "size");
        assert_eq!(v["auc"], 0.5);
    }

    #[test]
    fn deletion_endpoints_on_toy_input() {
        use ToyToken::*;
        let model = ToyModel::default();
        let mut frames = Array2::from_elem((100, 80), -0.3);
        for (i, tone) in [B, D].iter().enumerate() {
            let (lo, hi) = TONE_BANDS[tone.tone_index().unwrap()];
            frames.slice_mut(s![i * 50..(i + 1) * 50, lo..=hi]).fill(1.5);
        }
        let input = Spectrogram::from_frames(frames, true).unwrap();
        let item = EvalItem {
            reference: vec!["B".into(), "D".into()],
            saliency: random_saliency((100, 80), 1),
            input: input.clone(),
        };
        let c = deletion_curve(&model, &[item], TaskMetric::Wer).unwrap();
        assert_eq!(c.points.len(), 21);
        assert_eq!(c.points[0].1, 0.0);
        let zeros = Spectrogram::from_frames(Array2::zeros((100, 80)), true).unwrap();
        let expect = wer(&model.decode(&zeros).unwrap().words(), &["B".to_string(), "D".to_string()]).unwrap();
        assert_eq!(c.points[20].1, expect);
    }
}
