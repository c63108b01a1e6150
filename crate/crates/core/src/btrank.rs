//! Bradley–Terry strengths from pairwise preference counts.
//!
//! Under the model, method `i` is preferred over `j` with probability
//! `p_i / (p_i + p_j)`. The maximum-likelihood strengths are found with the
//! minorization–maximization update
//!
//! ```text
//! p_i <- W_i / Σ_{j≠i} n_ij / (p_i + p_j)
//! ```
//!
//! where `W_i` is the total number of wins of `i` and `n_ij` the number of
//! comparisons between `i` and `j`, followed by rescaling to `Σ p = 1`.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use thiserror::Error;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;

#[derive(Debug, Error)]
pub enum BtError {
    #[error("invalid comparison data: {0}")]
    Invalid(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("comparison graph is disconnected; strengths are not identifiable across components {components:?}")]
    Disconnected { components: Vec<Vec<String>> },
    #[error("no convergence after {iterations} iterations (last change {last_change:e})")]
    NotConverged {
        iterations: usize,
        last_change: f64,
        scores: Vec<f64>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// `wins[i][j]` counts how often `labels[i]` was preferred over `labels[j]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairwiseWins {
    labels: Vec<String>,
    wins: Vec<Vec<u64>>,
}

impl PairwiseWins {
    pub fn new(labels: Vec<String>, wins: Vec<Vec<u64>>) -> Result<Self, BtError> {
        let n = labels.len();
        if n == 0 {
            return Err(BtError::Invalid("no methods".into()));
        }
        if wins.len() != n || wins.iter().any(|r| r.len() != n) {
            return Err(BtError::Invalid(format!("win matrix is not {n}×{n}")));
        }
        if let Some(i) = (0..n).find(|&i| wins[i][i] != 0) {
            return Err(BtError::Invalid(format!(
                "{} has wins against itself",
                labels[i]
            )));
        }
        let mut seen = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            if let Some(j) = seen.insert(l.as_str(), i) {
                return Err(BtError::Invalid(format!(
                    "label {l:?} repeated at {j} and {i}"
                )));
            }
        }
        Ok(Self { labels, wins })
    }

    /// Reads `winner,loser,count` rows. A leading `winner,loser,count` header,
    /// blank lines and `#` comments are skipped; repeated pairs add up.
    /// Methods are numbered in order of first appearance.
    pub fn from_csv<R: BufRead>(reader: R) -> Result<Self, BtError> {
        let mut labels: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut triples = Vec::new();
        let mut first = true;
        for (k, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if std::mem::take(&mut first) && fields == ["winner", "loser", "count"] {
                continue;
            }
            let parse = |reason: String| BtError::Parse {
                line: k + 1,
                reason,
            };
            let [w, l, c] = fields[..] else {
                return Err(parse(format!("expected 3 fields, found {}", fields.len())));
            };
            if w.is_empty() || l.is_empty() {
                return Err(parse("empty method name".into()));
            }
            if w == l {
                return Err(parse(format!("{w} compared with itself")));
            }
            let count: u64 = c
                .parse()
                .map_err(|_| parse(format!("count {c:?} is not a non-negative integer")))?;
            let mut id = |name: &str| {
                *index.entry(name.to_string()).or_insert_with(|| {
                    labels.push(name.to_string());
                    labels.len() - 1
                })
            };
            let (wi, li) = (id(w), id(l));
            triples.push((wi, li, count));
        }
        let n = labels.len();
        let mut wins = vec![vec![0u64; n]; n];
        for (w, l, c) in triples {
            wins[w][l] = wins[w][l]
                .checked_add(c)
                .ok_or_else(|| BtError::Invalid("win count overflows".into()))?;
        }
        Self::new(labels, wins)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn wins(&self) -> &[Vec<u64>] {
        &self.wins
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn games(&self, i: usize, j: usize) -> u64 {
        self.wins[i][j] + self.wins[j][i]
    }

    /// Connected components of the comparison graph, each sorted, ordered by
    /// smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.len();
        let mut comp = vec![usize::MAX; n];
        let mut out = Vec::new();
        for start in 0..n {
            if comp[start] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut members = vec![start];
            comp[start] = id;
            let mut stack = vec![start];
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    if comp[j] == usize::MAX && self.games(i, j) > 0 {
                        comp[j] = id;
                        members.push(j);
                        stack.push(j);
                    }
                }
            }
            members.sort_unstable();
            out.push(members);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BtFit {
    /// Non-negative, summing to 1.
    pub scores: Vec<f64>,
    /// Methods without a single win; their score is exactly 0.
    pub winless: Vec<bool>,
    pub iterations: usize,
}

pub fn bt_fit(data: &PairwiseWins, tol: f64, max_iter: usize) -> Result<BtFit, BtError> {
    let n = data.len();
    let comps = data.components();
    if comps.len() > 1 {
        return Err(BtError::Disconnected {
            components: comps
                .into_iter()
                .map(|c| c.into_iter().map(|i| data.labels[i].clone()).collect())
                .collect(),
        });
    }
    let total: Vec<f64> = data
        .wins
        .iter()
        .map(|r| r.iter().sum::<u64>() as f64)
        .collect();
    let winless: Vec<bool> = total.iter().map(|&w| w == 0.0).collect();
    let mut p = vec![1.0 / n as f64; n];
    if n == 1 {
        return Ok(BtFit {
            scores: vec![1.0],
            winless,
            iterations: 0,
        });
    }
    let mut next = vec![0.0; n];
    let mut change = f64::INFINITY;
    for it in 1..=max_iter {
        for i in 0..n {
            next[i] = if winless[i] {
                0.0
            } else {
                let denom: f64 = (0..n)
                    .filter(|&j| j != i && data.games(i, j) > 0)
                    .map(|j| data.games(i, j) as f64 / (p[i] + p[j]))
                    .sum();
                total[i] / denom
            };
        }
        let sum: f64 = next.iter().sum();
        change = 0.0;
        for (old, new) in p.iter_mut().zip(&next) {
            let v = new / sum;
            change = change.max((v - *old).abs());
            *old = v;
        }
        if change <= tol {
            return Ok(BtFit {
                scores: p,
                winless,
                iterations: it,
            });
        }
    }
    Err(BtError::NotConverged {
        iterations: max_iter,
        last_change: change,
        scores: p,
    })
}

/// `method,score` rows, highest score first; ties keep label order.
pub fn write_scores_csv<W: Write>(mut w: W, labels: &[String], scores: &[f64]) -> io::Result<()> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(labels[a].cmp(&labels[b]))
    });
    writeln!(w, "method,score")?;
    for i in order {
        writeln!(w, "{},{}", labels[i], scores[i])?;
    }
    Ok(())
}
