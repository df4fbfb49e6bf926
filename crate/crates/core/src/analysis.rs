//! Diagnostics over sampled solutions: solve tables, learning and
//! forgetting matrices, n-gram solution similarity, pass@k and avg@N.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::policy::{sample_trajectory, PolicyParams, Source};
use crate::seed;
use crate::taskgen::{Problem, Token};

/// `N` samples per problem for one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSlice {
    pub problems: Vec<String>,
    pub samples: usize,
    /// `[problem][sample]`, flattened.
    pub bits: Vec<u8>,
    pub solutions: Vec<Vec<Token>>,
}

impl SolveSlice {
    pub fn correct(&self, problem: usize) -> usize {
        let n = self.samples;
        self.bits[problem * n..(problem + 1) * n].iter().map(|&b| b as usize).sum()
    }

    pub fn avg(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.bits.iter().map(|&b| b as f64).sum::<f64>() / self.bits.len() as f64
    }

    /// Mean over problems of the unbiased pass@k estimate.
    pub fn pass_at(&self, k: usize) -> Result<f64> {
        let p = self.problems.len();
        if p == 0 {
            return Err(Error::Precondition("no problems evaluated".into()));
        }
        let mut sum = 0.0;
        for i in 0..p {
            sum += pass_at_k(self.samples, self.correct(i), k)?;
        }
        Ok(sum / p as f64)
    }
}

/// Samples `n` solutions per problem. Problem `i` draws from its own
/// stream below `seed`, so results do not depend on worker count.
pub fn evaluate_checkpoint(
    params: &PolicyParams,
    problems: &[&Problem],
    n: usize,
    seed: u64,
    max_len: usize,
) -> Result<SolveSlice> {
    if n == 0 {
        return Err(Error::Precondition("samples per problem must be >= 1".into()));
    }
    let rows = par::map_indexed(problems, |i, p| {
        let mut rng = seed::stream(seed, &[seed::STREAM_EVAL, i as u64]);
        (0..n)
            .map(|k| {
                let src = Source { iteration: 0, step: 0, sample: k };
                let t = sample_trajectory(params, p, &mut rng, max_len, src);
                (t.reward, t.tokens)
            })
            .collect::<Vec<_>>()
    });
    let mut bits = Vec::with_capacity(problems.len() * n);
    let mut solutions = Vec::with_capacity(problems.len() * n);
    for row in rows {
        for (b, s) in row {
            bits.push(b);
            solutions.push(s);
        }
    }
    Ok(SolveSlice {
        problems: problems.iter().map(|p| p.id.clone()).collect(),
        samples: n,
        bits,
        solutions,
    })
}

/// Success bits `[checkpoint][problem][sample]` with the sampled solutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveTable {
    pub checkpoints: Vec<String>,
    pub problems: Vec<String>,
    pub samples: usize,
    pub bits: Vec<u8>,
    /// Same indexing as `bits`; empty when the table carries bits only.
    pub solutions: Vec<Vec<Token>>,
}

impl SolveTable {
    pub fn new(problems: Vec<String>, samples: usize) -> Self {
        SolveTable {
            checkpoints: Vec::new(),
            problems,
            samples,
            bits: Vec::new(),
            solutions: Vec::new(),
        }
    }

    /// Table from bits alone, `[checkpoint][problem][sample]`.
    pub fn from_bits(checkpoints: Vec<String>, problems: Vec<String>, samples: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != checkpoints.len() * problems.len() * samples {
            return Err(Error::ShapeMismatch(format!(
                "{} bits for {}x{}x{}",
                bits.len(),
                checkpoints.len(),
                problems.len(),
                samples
            )));
        }
        Ok(SolveTable {
            checkpoints,
            problems,
            samples,
            bits,
            solutions: Vec::new(),
        })
    }

    pub fn push(&mut self, label: impl Into<String>, slice: SolveSlice) -> Result<()> {
        if slice.problems != self.problems || slice.samples != self.samples {
            return Err(Error::ShapeMismatch("slice does not match table problems or N".into()));
        }
        if !self.checkpoints.is_empty() && self.solutions.is_empty() {
            return Err(Error::ShapeMismatch("table was built without solutions".into()));
        }
        self.checkpoints.push(label.into());
        self.bits.extend(slice.bits);
        self.solutions.extend(slice.solutions);
        Ok(())
    }

    pub fn has_solutions(&self) -> bool {
        self.solutions.len() == self.bits.len()
    }

    fn cell(&self, c: usize, p: usize) -> std::ops::Range<usize> {
        let base = (c * self.problems.len() + p) * self.samples;
        base..base + self.samples
    }

    pub fn slice(&self, c: usize) -> SolveSlice {
        let p = self.problems.len();
        let range = self.cell(c, 0).start..self.cell(c, p.saturating_sub(1)).end;
        let range = if p == 0 { 0..0 } else { range };
        SolveSlice {
            problems: self.problems.clone(),
            samples: self.samples,
            bits: self.bits[range.clone()].to_vec(),
            solutions: if self.has_solutions() { self.solutions[range].to_vec() } else { Vec::new() },
        }
    }

    /// Problems with at least one success, per checkpoint.
    pub fn solved_sets(&self) -> Vec<Vec<bool>> {
        (0..self.checkpoints.len())
            .map(|c| {
                (0..self.problems.len())
                    .map(|p| self.bits[self.cell(c, p)].contains(&1))
                    .collect()
            })
            .collect()
    }

    /// Sub-table of the listed checkpoints, in the given order.
    pub fn select(&self, rows: &[usize]) -> SolveTable {
        let mut out = SolveTable::new(self.problems.clone(), self.samples);
        for &c in rows {
            let s = self.slice(c);
            out.checkpoints.push(self.checkpoints[c].clone());
            out.bits.extend(s.bits);
            out.solutions.extend(s.solutions);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixKind {
    Learning,
    Forgetting,
    Similarity,
    DifferentialForgetting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub kind: MatrixKind,
    pub labels: Vec<String>,
    /// Row = earlier checkpoint `i`, column = later checkpoint `j`.
    pub values: Vec<Vec<f64>>,
}

impl Matrix {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "i\\j")?;
        for l in &self.labels {
            write!(w, ",{l}")?;
        }
        writeln!(w)?;
        for (l, row) in self.labels.iter().zip(&self.values) {
            write!(w, "{l}")?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = Vec::new();
        self.write_csv(&mut out).expect("write to Vec");
        String::from_utf8(out).expect("utf8 csv")
    }
}

/// Integer numerators of the learning and forgetting matrices over a
/// common denominator `|problems|`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionCounts {
    pub problems: usize,
    pub solved: Vec<usize>,
    /// `|S_j \ S_i|` at `[i][j]`.
    pub learned: Vec<Vec<usize>>,
    /// `|S_i \ S_j|` at `[i][j]`.
    pub forgotten: Vec<Vec<usize>>,
}

pub fn transition_counts(table: &SolveTable) -> Result<TransitionCounts> {
    if table.checkpoints.len() < 2 {
        return Err(Error::Precondition("need at least 2 checkpoints".into()));
    }
    if table.problems.is_empty() {
        return Err(Error::Precondition("empty problem set".into()));
    }
    let sets = table.solved_sets();
    let c = sets.len();
    let diff = |a: &[bool], b: &[bool]| a.iter().zip(b).filter(|(&x, &y)| x && !y).count();
    let mut learned = vec![vec![0; c]; c];
    let mut forgotten = vec![vec![0; c]; c];
    for i in 0..c {
        for j in 0..c {
            learned[i][j] = diff(&sets[j], &sets[i]);
            forgotten[i][j] = diff(&sets[i], &sets[j]);
        }
    }
    Ok(TransitionCounts {
        problems: table.problems.len(),
        solved: sets.iter().map(|s| s.iter().filter(|&&x| x).count()).collect(),
        learned,
        forgotten,
    })
}

fn ratio_matrix(kind: MatrixKind, labels: &[String], counts: &[Vec<usize>], denom: usize) -> Matrix {
    Matrix {
        kind,
        labels: labels.to_vec(),
        values: counts
            .iter()
            .map(|row| row.iter().map(|&x| x as f64 / denom as f64).collect())
            .collect(),
    }
}

/// `L[i,j] = |S_j \ S_i| / |P|`.
pub fn learning_matrix(table: &SolveTable) -> Result<Matrix> {
    let t = transition_counts(table)?;
    Ok(ratio_matrix(MatrixKind::Learning, &table.checkpoints, &t.learned, t.problems))
}

/// `F[i,j] = |S_i \ S_j| / |P|`.
pub fn forgetting_matrix(table: &SolveTable) -> Result<Matrix> {
    let t = transition_counts(table)?;
    Ok(ratio_matrix(MatrixKind::Forgetting, &table.checkpoints, &t.forgotten, t.problems))
}

/// Set of `n`-grams of a sequence.
pub fn ngrams(s: &[Token], n: usize) -> BTreeSet<&[Token]> {
    assert!(n >= 1, "n-gram order must be >= 1");
    if s.len() < n {
        return BTreeSet::new();
    }
    s.windows(n).collect()
}

/// Jaccard index of the two `n`-gram sets. Two empty sets score 1, one
/// empty set scores 0.
pub fn jaccard_ngram(s1: &[Token], s2: &[Token], n: usize) -> f64 {
    let a = ngrams(s1, n);
    let b = ngrams(s2, n);
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let inter = a.intersection(&b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Mean of all `N^2` pairwise Jaccard scores.
pub fn prompt_similarity(si: &[Vec<Token>], sj: &[Vec<Token>], n: usize) -> Result<f64> {
    if si.len() != sj.len() {
        return Err(Error::ShapeMismatch(format!(
            "solution sets of size {} and {}",
            si.len(),
            sj.len()
        )));
    }
    if si.is_empty() {
        return Err(Error::Precondition("solution sets must be non-empty".into()));
    }
    let mut sum = 0.0;
    for a in si {
        for b in sj {
            sum += jaccard_ngram(a, b, n);
        }
    }
    Ok(sum / (si.len() * si.len()) as f64)
}

/// N-gram sets interned to sorted id lists for fast repeated comparison.
struct Interned {
    sets: Vec<Vec<u32>>,
}

impl Interned {
    fn build(solutions: &[Vec<Token>], n: usize) -> Self {
        let mut ids: HashMap<&[Token], u32> = HashMap::new();
        let sets = solutions
            .iter()
            .map(|s| {
                let mut v: Vec<u32> = ngrams(s, n)
                    .into_iter()
                    .map(|g| {
                        let next = ids.len() as u32;
                        *ids.entry(g).or_insert(next)
                    })
                    .collect();
                v.sort_unstable();
                v
            })
            .collect();
        Interned { sets }
    }

    fn jaccard(&self, a: usize, b: usize) -> f64 {
        let (x, y) = (&self.sets[a], &self.sets[b]);
        match (x.is_empty(), y.is_empty()) {
            (true, true) => return 1.0,
            (true, false) | (false, true) => return 0.0,
            _ => {}
        }
        let (mut i, mut j, mut inter) = (0, 0, 0usize);
        while i < x.len() && j < y.len() {
            match x[i].cmp(&y[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    inter += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        inter as f64 / (x.len() + y.len() - inter) as f64
    }
}

/// `M[i,j]` = mean over prompts of [`prompt_similarity`] between the
/// solutions of checkpoints `i` and `j`. The diagonal compares a set with
/// itself, self-pairs included.
pub fn similarity_matrix(table: &SolveTable, n: usize) -> Result<Matrix> {
    if !table.has_solutions() {
        return Err(Error::MissingArtifact("solve table has no cached solutions".into()));
    }
    if table.problems.is_empty() || table.samples == 0 {
        return Err(Error::Precondition("empty solve table".into()));
    }
    let interned = Interned::build(&table.solutions, n);
    let c = table.checkpoints.len();
    let (p, s) = (table.problems.len(), table.samples);
    let pairs: Vec<(usize, usize)> = (0..c).flat_map(|i| (i..c).map(move |j| (i, j))).collect();
    let vals = par::map_indexed(&pairs, |_, &(i, j)| {
        let mut total = 0.0;
        for q in 0..p {
            let bi = table.cell(i, q).start;
            let bj = table.cell(j, q).start;
            let mut sum = 0.0;
            for a in 0..s {
                for b in 0..s {
                    sum += interned.jaccard(bi + a, bj + b);
                }
            }
            total += sum / (s * s) as f64;
        }
        total / p as f64
    });
    let mut values = vec![vec![0.0; c]; c];
    for (&(i, j), v) in pairs.iter().zip(vals) {
        values[i][j] = v;
        values[j][i] = v;
    }
    Ok(Matrix {
        kind: MatrixKind::Similarity,
        labels: table.checkpoints.clone(),
        values,
    })
}

/// Unbiased pass@k, `1 - C(n-c, k) / C(n, k)`, in product form.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n || k == 0 || k > n {
        return Err(Error::Precondition(format!("pass@k needs 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let mut miss = 1.0;
    for i in (n - c + 1)..=n {
        miss *= 1.0 - k as f64 / i as f64;
    }
    Ok(1.0 - miss)
}

/// Mean success bit of one checkpoint row.
pub fn avg_at_n(slice: &SolveSlice) -> f64 {
    slice.avg()
}

/// Elementwise `F_vanilla - F_rloop`.
pub fn differential_forgetting(f_vanilla: &Matrix, f_rloop: &Matrix) -> Result<Matrix> {
    let shape = |m: &Matrix| (m.values.len(), m.values.first().map_or(0, Vec::len));
    if shape(f_vanilla) != shape(f_rloop) {
        return Err(Error::ShapeMismatch(format!(
            "forgetting matrices {:?} and {:?}",
            shape(f_vanilla),
            shape(f_rloop)
        )));
    }
    let values = f_vanilla
        .values
        .iter()
        .zip(&f_rloop.values)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
        .collect();
    let labels = f_vanilla
        .labels
        .iter()
        .zip(&f_rloop.labels)
        .map(|(a, b)| if a == b { a.clone() } else { format!("{a}|{b}") })
        .collect();
    Ok(Matrix {
        kind: MatrixKind::DifferentialForgetting,
        labels,
        values,
    })
}

/// Mean of `m[a][b]` over pairs whose windows satisfy `window[a] < window[b]`.
pub fn inter_window_mean(m: &Matrix, window: &[usize]) -> Result<f64> {
    if window.len() != m.values.len() {
        return Err(Error::ShapeMismatch("window labels do not match matrix".into()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (a, row) in m.values.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            if window[a] < window[b] {
                sum += v;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Precondition("no cross-window pairs".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub run_id: String,
    pub series: String,
    pub step: usize,
    pub value: f64,
}

pub fn write_curves_csv<W: Write>(points: &[CurvePoint], mut w: W) -> Result<()> {
    writeln!(w, "run_id,series,step,value")?;
    for p in points {
        writeln!(w, "{},{},{},{}", p.run_id, p.series, p.step, p.value)?;
    }
    Ok(())
}

/// Table-style metrics of one checkpoint on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub avg_at_n: f64,
    /// `(k, pass@k)` for each requested `k <= N`.
    pub pass_at: Vec<(usize, f64)>,
}

impl CheckpointMetrics {
    pub fn from_slice(slice: &SolveSlice, ks: &[usize]) -> Result<Self> {
        let mut pass_at = Vec::new();
        for &k in ks {
            if k <= slice.samples {
                pass_at.push((k, slice.pass_at(k)?));
            }
        }
        Ok(CheckpointMetrics {
            avg_at_n: slice.avg(),
            pass_at,
        })
    }

    pub fn pass(&self, k: usize) -> Option<f64> {
        self.pass_at.iter().find(|(kk, _)| *kk == k).map(|&(_, v)| v)
    }
}
