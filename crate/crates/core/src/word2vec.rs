//! word2vec text format: a `<count> <dim>` header line, then `word v1 ... vD`
//! per line.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Word2VecError {
    #[error("missing or malformed `<count> <dim>` header")]
    Header,
    #[error("line {line}: expected {expected} values, found {found}")]
    Dimension { line: usize, expected: usize, found: usize },
    #[error("line {line}: bad number `{value}`")]
    Number { line: usize, value: String },
    #[error("header promises {expected} vectors, found {found}")]
    Count { expected: usize, found: usize },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WordVectors {
    pub dim: usize,
    pub entries: Vec<(String, Vec<f64>)>,
}

impl WordVectors {
    pub fn parse(text: &str) -> Result<Self, Word2VecError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Word2VecError::Header)?;
        let head: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| Word2VecError::Header)?;
        let [count, dim] = head[..] else {
            return Err(Word2VecError::Header);
        };
        let mut entries = Vec::with_capacity(count);
        for (i, line) in lines {
            let mut fields = line.split_whitespace();
            let word = fields.next().expect("non-empty line").to_string();
            let values: Vec<f64> = fields
                .map(|v| {
                    v.parse().map_err(|_| Word2VecError::Number {
                        line: i + 1,
                        value: v.to_string(),
                    })
                })
                .collect::<Result<_, _>>()?;
            if values.len() != dim {
                return Err(Word2VecError::Dimension {
                    line: i + 1,
                    expected: dim,
                    found: values.len(),
                });
            }
            entries.push((word, values));
        }
        if entries.len() != count {
            return Err(Word2VecError::Count {
                expected: count,
                found: entries.len(),
            });
        }
        Ok(Self { dim, entries })
    }

    /// Shortest round-trip decimal representation, so parsing the output
    /// reproduces every value exactly.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.entries.len(), self.dim);
        for (word, values) in &self.entries {
            out.push_str(word);
            for v in values {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_and_validates() {
        let w = WordVectors::parse("2 3\na 1 2 3\nb -0.5 0 1e-3\n").unwrap();
        assert_eq!(w.dim, 3);
        assert_eq!(w.entries[1], ("b".to_string(), vec![-0.5, 0.0, 0.001]));
        assert_eq!(WordVectors::parse(""), Err(Word2VecError::Header));
        assert!(matches!(WordVectors::parse("1 2\na 1\n"), Err(Word2VecError::Dimension { .. })));
        assert!(matches!(WordVectors::parse("2 1\na 1\n"), Err(Word2VecError::Count { .. })));
        assert!(matches!(WordVectors::parse("1 1\na x\n"), Err(Word2VecError::Number { .. })));
    }

    proptest! {
        #[test]
        fn text_round_trip_is_exact(values in prop::collection::vec(prop::num::f64::NORMAL, 1..20)) {
            let w = WordVectors { dim: values.len(), entries: vec![("w@0:1".into(), values)] };
            let text = w.to_text();
            prop_assert!(text.ends_with('\n'));
            prop_assert_eq!(WordVectors::parse(&text).unwrap(), w);
        }
    }
}
