use std::collections::{BTreeMap, BTreeSet};

use super::EvalError;
use crate::corpus::Vocabulary;
use crate::inference::{contextual_embed, cosine, UniversalEmbedding};
use crate::model::JtwModel;

#[derive(Clone, Debug, PartialEq)]
pub struct LexsubInstance {
    pub target: String,
    pub position: usize,
    pub sentence: Vec<String>,
    pub candidates: Vec<String>,
    pub gold: BTreeSet<String>,
}

/// One instance per line:
/// `target<TAB>position<TAB>sentence tokens<TAB>candidates<TAB>gold`, with
/// space-separated tokens and comma-separated word lists.
pub fn parse_lexsub(text: &str) -> Result<Vec<LexsubInstance>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| EvalError::Parse { line: i + 1, reason };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", f.len())));
        }
        let position: usize = f[1].trim().parse().map_err(|_| err(format!("bad position `{}`", f[1])))?;
        let sentence: Vec<String> = f[2].split_whitespace().map(str::to_lowercase).collect();
        if position >= sentence.len() {
            return Err(err(format!("position {position} outside sentence of {} tokens", sentence.len())));
        }
        let list = |s: &str| -> Vec<String> {
            s.split(',').map(|w| w.trim().to_lowercase()).filter(|w| !w.is_empty()).collect()
        };
        out.push(LexsubInstance {
            target: f[0].trim().to_lowercase(),
            position,
            sentence,
            candidates: list(f[3]),
            gold: list(f[4]).into_iter().collect(),
        });
    }
    Ok(out)
}

/// `(C·cos(y, x) + Σ_c cos(y, w_c)) / 2C` for original word `x`, candidate
/// `y` and context vectors `w_c`.
pub fn baladd(x: &[f64], y: &[f64], context: &[&[f64]]) -> Result<f64, EvalError> {
    if context.is_empty() {
        return Err(EvalError::EmptyContext);
    }
    let c = context.len() as f64;
    let mut total = c * cosine(y, x)?;
    for w in context {
        total += cosine(y, w)?;
    }
    Ok(total / (2.0 * c))
}

#[derive(Clone, Copy, Debug)]
pub enum LexsubMode<'a> {
    /// Compare posterior means of target and candidates under the same context.
    Contextual,
    /// Score candidates by BalAdd over universal vectors.
    BalAdd(&'a BTreeMap<usize, UniversalEmbedding>),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LexsubResult {
    pub hits: usize,
    pub scored: usize,
    /// Instances without a usable target or candidate.
    pub excluded: usize,
    /// Candidates dropped for being out of vocabulary.
    pub skipped_candidates: usize,
}

impl LexsubResult {
    pub fn accuracy(&self) -> f64 {
        self.hits as f64 / self.scored as f64
    }
}

pub fn eval_lexsub(
    instances: &[LexsubInstance],
    model: &JtwModel,
    vocab: &Vocabulary,
    mode: LexsubMode<'_>,
) -> Result<LexsubResult, EvalError> {
    let mut result = LexsubResult::default();
    for inst in instances {
        let context: Vec<usize> = inst
            .sentence
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != inst.position)
            .filter_map(|(_, w)| vocab.id(w))
            .collect();
        let known = |w: &String| -> Option<usize> {
            let id = vocab.id(w)?;
            match mode {
                LexsubMode::Contextual => Some(id),
                LexsubMode::BalAdd(universal) => universal.contains_key(&id).then_some(id),
            }
        };
        let candidates: Vec<(&String, usize)> = inst.candidates.iter().filter_map(|w| known(w).map(|id| (w, id))).collect();
        result.skipped_candidates += inst.candidates.len() - candidates.len();
        let Some(target) = known(&inst.target) else {
            result.excluded += 1;
            continue;
        };
        if candidates.is_empty() {
            result.excluded += 1;
            continue;
        }

        let scores: Vec<f64> = match mode {
            LexsubMode::Contextual => {
                let x = contextual_embed(model, target, &context)?;
                candidates
                    .iter()
                    .map(|&(_, id)| Ok(cosine(x.vector(), contextual_embed(model, id, &context)?.vector())?))
                    .collect::<Result<_, EvalError>>()?
            }
            LexsubMode::BalAdd(universal) => {
                let x = &universal[&target].mean;
                let ctx: Vec<&[f64]> = context.iter().filter_map(|w| universal.get(w)).map(|e| e.mean.as_slice()).collect();
                candidates
                    .iter()
                    .map(|&(_, id)| {
                        let y = &universal[&id].mean;
                        if ctx.is_empty() {
                            Ok(cosine(y, x)?)
                        } else {
                            baladd(x, y, &ctx)
                        }
                    })
                    .collect::<Result<_, EvalError>>()?
            }
        };
        // First candidate wins ties.
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        result.scored += 1;
        if inst.gold.contains(candidates[best].0) {
            result.hits += 1;
        }
    }
    Ok(result)
}
