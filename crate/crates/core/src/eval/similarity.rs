use std::collections::BTreeMap;

use super::EvalError;
use crate::inference::cosine;

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(EvalError::TooShort(xs.len()));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimBenchmark {
    pub pairs: Vec<(String, String, f64)>,
}

impl SimBenchmark {
    /// `word1<TAB>word2<TAB>score` per line; blank lines and `#` comments skipped.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let parse_err = |reason: String| EvalError::Parse { line: i + 1, reason };
            if fields.len() != 3 {
                return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
            }
            let score: f64 = fields[2].trim().parse().map_err(|_| parse_err(format!("bad score `{}`", fields[2])))?;
            pairs.push((fields[0].trim().to_lowercase(), fields[1].trim().to_lowercase(), score));
        }
        Ok(Self { pairs })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimResult {
    pub rho: f64,
    pub covered: usize,
    pub total: usize,
}

impl SimResult {
    pub fn coverage(&self) -> f64 {
        self.covered as f64 / self.total as f64
    }
}

/// Spearman correlation between gold scores and embedding cosines over the
/// pairs whose words both have an embedding.
pub fn eval_word_similarity(bench: &SimBenchmark, embeddings: &BTreeMap<String, Vec<f64>>) -> Result<SimResult, EvalError> {
    let mut gold = Vec::new();
    let mut model = Vec::new();
    for (a, b, score) in &bench.pairs {
        if let (Some(x), Some(y)) = (embeddings.get(a), embeddings.get(b)) {
            gold.push(*score);
            model.push(cosine(x, y)?);
        }
    }
    if gold.is_empty() {
        return Err(EvalError::NoCoverage);
    }
    Ok(SimResult {
        rho: spearman(&model, &gold)?,
        covered: gold.len(),
        total: bench.pairs.len(),
    })
}
