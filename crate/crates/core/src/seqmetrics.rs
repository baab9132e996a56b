//! Diversity/novelty metrics and PWM motif scoring.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("k-mers must all have the same length")]
    LengthMismatch,
    #[error("sequence shorter than the motif ({0} < {1})")]
    SequenceTooShort(usize, usize),
    #[error("bad PWM file: {0}")]
    BadPwmFile(String),
    #[error("unknown nucleotide {0:?}")]
    UnknownNucleotide(char),
}

/// Global-alignment identity: matches are maximized (match 1, mismatch 0,
/// gaps contribute nothing) and divided by the longer length.
pub fn pairwise_identity(a: &str, b: &str) -> f64 {
    let a: Vec<u8> = a.bytes().collect();
    let b: Vec<u8> = b.bytes().collect();
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let (n, m) = (a.len(), b.len());
    let mut prev = vec![0u32; m + 1];
    let mut cur = vec![0u32; m + 1];
    for i in 1..=n {
        for j in 1..=m {
            let diag = prev[j - 1] + u32::from(a[i - 1] == b[j - 1]);
            cur[j] = diag.max(prev[j]).max(cur[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m] as f64 / n.max(m) as f64
}

/// Greedy incremental clustering in input order: a sequence joins the first
/// cluster whose founder is at least `threshold` identical, else founds a
/// new cluster. Returns clusters / n.
pub fn diversity(seqs: &[String], threshold: f64) -> f64 {
    assert!(!seqs.is_empty(), "diversity of an empty set is undefined");
    let reps = greedy_cluster_representatives(seqs, threshold);
    reps.len() as f64 / seqs.len() as f64
}

/// Founders of the greedy clusters, in founding order.
pub fn greedy_cluster_representatives(seqs: &[String], threshold: f64) -> Vec<usize> {
    let mut reps: Vec<usize> = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        let mut joined = false;
        for &r in &reps {
            let rep = &seqs[r];
            // identity can never reach the threshold when lengths differ
            // too much; skip the alignment entirely
            let (lo, hi) = if rep.len() < s.len() {
                (rep.len(), s.len())
            } else {
                (s.len(), rep.len())
            };
            if (lo as f64) < threshold * hi as f64 {
                continue;
            }
            if pairwise_identity(s, rep) >= threshold {
                joined = true;
                break;
            }
        }
        if !joined {
            reps.push(i);
        }
    }
    reps
}

/// Canonical input order for clustering: descending length, then
/// lexicographic.
pub fn canonical_order(seqs: &[String]) -> Vec<String> {
    let mut sorted = seqs.to_vec();
    sorted.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    sorted
}

/// Fraction of sequences whose best identity against the reference set is
/// below `threshold`.
pub fn novelty(seqs: &[String], reference: &[String], threshold: f64) -> f64 {
    if seqs.is_empty() {
        return 0.0;
    }
    let novel = seqs
        .iter()
        .filter(|s| {
            !reference.iter().any(|r| {
                let (lo, hi) = if r.len() < s.len() { (r.len(), s.len()) } else { (s.len(), r.len()) };
                if (lo as f64) < threshold * hi as f64 {
                    return false;
                }
                pairwise_identity(s, r) >= threshold
            })
        })
        .count();
    novel as f64 / seqs.len() as f64
}

/// Position weight matrix over (A, C, G, U): per-column log-odds against a
/// background distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Pwm {
    pub log_odds: Array2<f64>,
    pub background: [f64; 4],
}

fn base_index(c: char) -> Result<usize, MetricsError> {
    match c.to_ascii_uppercase() {
        'A' => Ok(0),
        'C' => Ok(1),
        'G' => Ok(2),
        'U' | 'T' => Ok(3),
        other => Err(MetricsError::UnknownNucleotide(other)),
    }
}

impl Pwm {
    pub fn len(&self) -> usize {
        self.log_odds.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Build from equal-length ungapped k-mers: pseudocount-protected
    /// column frequencies converted to log-odds.
    pub fn from_kmers(
        kmers: &[String],
        pseudocount: f64,
        background: Option<[f64; 4]>,
    ) -> Result<Pwm, MetricsError> {
        if kmers.is_empty() {
            return Err(MetricsError::LengthMismatch);
        }
        let k = kmers[0].len();
        if k == 0 || kmers.iter().any(|m| m.len() != k) {
            return Err(MetricsError::LengthMismatch);
        }
        let background = background.unwrap_or([0.25; 4]);
        let mut counts = Array2::<f64>::zeros((k, 4));
        for kmer in kmers {
            for (col, ch) in kmer.chars().enumerate() {
                counts[(col, base_index(ch)?)] += 1.0;
            }
        }
        let total = kmers.len() as f64 + 4.0 * pseudocount;
        let log_odds = Array2::from_shape_fn((k, 4), |(col, b)| {
            let freq = (counts[(col, b)] + pseudocount) / total;
            (freq / background[b]).ln()
        });
        Ok(Pwm { log_odds, background })
    }

    /// Score of the window starting at `pos`.
    fn window_score(&self, seq: &[usize], pos: usize) -> f64 {
        (0..self.len()).map(|c| self.log_odds[(c, seq[pos + c])]).sum()
    }

    /// Best window: maximum summed log-odds over all windows, leftmost
    /// argmax, and the sigmoid-mapped score.
    pub fn scan(&self, seq: &str) -> Result<PwmHit, MetricsError> {
        let ids: Vec<usize> = seq.chars().map(base_index).collect::<Result<_, _>>()?;
        if ids.len() < self.len() {
            return Err(MetricsError::SequenceTooShort(ids.len(), self.len()));
        }
        let mut best_pos = 0usize;
        let mut best = f64::NEG_INFINITY;
        for pos in 0..=ids.len() - self.len() {
            let score = self.window_score(&ids, pos);
            if score > best {
                best = score;
                best_pos = pos;
            }
        }
        Ok(PwmHit {
            max_score: best,
            position: best_pos,
            sigmoid_score: 1.0 / (1.0 + (-best).exp()),
        })
    }

    /// Text format: header `PWM L=<n>`, then n lines of 4 tab-separated
    /// log-odds in A C G U order.
    pub fn to_text(&self) -> String {
        let mut out = format!("PWM L={}\n", self.len());
        for row in self.log_odds.rows() {
            out.push_str(
                &row.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join("\t"),
            );
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Pwm, MetricsError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| MetricsError::BadPwmFile("empty".into()))?;
        let l: usize = header
            .strip_prefix("PWM L=")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| MetricsError::BadPwmFile("bad header".into()))?;
        let mut log_odds = Array2::zeros((l, 4));
        for row in 0..l {
            let line = lines
                .next()
                .ok_or_else(|| MetricsError::BadPwmFile(format!("missing row {row}")))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| MetricsError::BadPwmFile(format!("bad number in row {row}")))?;
            if vals.len() != 4 {
                return Err(MetricsError::BadPwmFile(format!(
                    "row {row} has {} columns, expected 4",
                    vals.len()
                )));
            }
            for (b, v) in vals.into_iter().enumerate() {
                log_odds[(row, b)] = v;
            }
        }
        Ok(Pwm { log_odds, background: [0.25; 4] })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PwmHit {
    pub max_score: f64,
    pub position: usize,
    pub sigmoid_score: f64,
}
