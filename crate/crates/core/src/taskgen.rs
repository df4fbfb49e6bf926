//! Synthetic verifiable task: left-to-right modular arithmetic chains.
//!
//! A problem is a chain `x0 op1 a1 op2 a2 ... % m =` evaluated strictly left
//! to right. Solutions are free-form token sequences; only the answer suffix
//! `ANS <digit> EOS` is checked by the verifier, so many distinct correct
//! trajectories exist per problem.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Add, Op::Sub, Op::Mul];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Sub => "-",
            Op::Mul => "*",
        }
    }

    pub fn apply(self, lhs: u32, rhs: u32, modulus: u32) -> u32 {
        let (l, r, m) = (lhs as i64, rhs as i64, modulus as i64);
        let v = match self {
            Op::Add => l + r,
            Op::Sub => l - r,
            Op::Mul => l * r,
        };
        v.rem_euclid(m) as u32
    }
}

/// The role of a vocabulary entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum TokenKind {
    Digit(u32),
    Op(Op),
    /// The `%` sign in prompts.
    Mod,
    /// The literal modulus value in prompts.
    Modulus(u32),
    Equals,
    /// Step separator between intermediate values.
    Sep,
    /// Answer marker.
    Answer,
    Eos,
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenKind::Digit(d) => write!(f, "{d}"),
            TokenKind::Op(op) => f.write_str(op.symbol()),
            TokenKind::Mod => f.write_str("%"),
            TokenKind::Modulus(m) => write!(f, "{m}"),
            TokenKind::Equals => f.write_str("="),
            TokenKind::Sep => f.write_str(";"),
            TokenKind::Answer => f.write_str("ANS"),
            TokenKind::Eos => f.write_str("EOS"),
        }
    }
}

/// Token ids are indices into a [`Vocabulary`].
pub type Token = u16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<TokenKind>,
}

impl Vocabulary {
    /// Digits `0..modulus`, the three operators, prompt punctuation, the step
    /// separator, the answer marker and end-of-sequence.
    pub fn standard(modulus: u32) -> Self {
        let mut tokens: Vec<TokenKind> = (0..modulus).map(TokenKind::Digit).collect();
        tokens.extend(Op::ALL.iter().map(|&op| TokenKind::Op(op)));
        tokens.extend([
            TokenKind::Mod,
            TokenKind::Modulus(modulus),
            TokenKind::Equals,
            TokenKind::Sep,
            TokenKind::Answer,
            TokenKind::Eos,
        ]);
        Vocabulary { tokens }
    }

    pub fn from_kinds(tokens: Vec<TokenKind>) -> Result<Self> {
        let v = Vocabulary { tokens };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() < 4 {
            return Err(Error::InvalidVocabulary(format!(
                "needs at least 4 tokens, got {}",
                self.tokens.len()
            )));
        }
        if self.tokens.len() > Token::MAX as usize {
            return Err(Error::InvalidVocabulary("too many tokens".into()));
        }
        let count = |k: TokenKind| self.tokens.iter().filter(|&&t| t == k).count();
        if count(TokenKind::Eos) != 1 {
            return Err(Error::InvalidVocabulary(
                "must contain exactly one end-of-sequence token".into(),
            ));
        }
        if count(TokenKind::Answer) != 1 {
            return Err(Error::InvalidVocabulary(
                "must contain exactly one answer marker".into(),
            ));
        }
        let mut seen = HashSet::new();
        for t in &self.tokens {
            if !seen.insert(t.to_string()) {
                return Err(Error::InvalidVocabulary(format!("duplicate symbol {t}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn kinds(&self) -> &[TokenKind] {
        &self.tokens
    }

    pub fn kind(&self, token: Token) -> Option<TokenKind> {
        self.tokens.get(token as usize).copied()
    }

    pub fn id(&self, kind: TokenKind) -> Option<Token> {
        self.tokens.iter().position(|&t| t == kind).map(|i| i as Token)
    }

    pub fn symbol(&self, token: Token) -> String {
        self.kind(token)
            .map(|k| k.to_string())
            .unwrap_or_else(|| format!("<{token}>"))
    }

    /// Looks a symbol up by its rendered text.
    pub fn parse_symbol(&self, symbol: &str) -> Option<Token> {
        self.tokens
            .iter()
            .position(|t| t.to_string() == symbol)
            .map(|i| i as Token)
    }

    pub fn render(&self, tokens: &[Token]) -> String {
        tokens
            .iter()
            .map(|&t| self.symbol(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn eos(&self) -> Token {
        self.id(TokenKind::Eos).expect("validated vocabulary has EOS")
    }

    pub fn answer(&self) -> Token {
        self.id(TokenKind::Answer).expect("validated vocabulary has ANS")
    }

    pub fn digit_value(&self, token: Token) -> Option<u32> {
        match self.kind(token) {
            Some(TokenKind::Digit(d)) => Some(d),
            _ => None,
        }
    }
}

/// Inclusive range of chain lengths (number of operator steps).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LenRange {
    pub min: usize,
    pub max: usize,
}

impl LenRange {
    pub fn new(min: usize, max: usize) -> Self {
        LenRange { min, max }
    }

    pub fn contains(&self, len: usize) -> bool {
        (self.min..=self.max).contains(&len)
    }

    fn overlaps(&self, other: &LenRange) -> bool {
        self.min <= other.max && other.min <= self.max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub modulus: u32,
    pub chain_len_train: LenRange,
    pub chain_len_ood: LenRange,
    pub operator_set: Vec<Op>,
    pub vocab: Vocabulary,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(modulus: u32, train: LenRange, ood: LenRange, seed: u64) -> Self {
        TaskSpec {
            modulus,
            chain_len_train: train,
            chain_len_ood: ood,
            operator_set: Op::ALL.to_vec(),
            vocab: Vocabulary::standard(modulus),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modulus < 2 {
            return Err(Error::InvalidTaskSpec(format!(
                "modulus must be >= 2, got {}",
                self.modulus
            )));
        }
        for (name, r) in [("train", self.chain_len_train), ("ood", self.chain_len_ood)] {
            if r.min == 0 || r.min > r.max {
                return Err(Error::InvalidTaskSpec(format!(
                    "{name} chain length range {}..={} is empty or includes 0",
                    r.min, r.max
                )));
            }
        }
        if self.chain_len_train.overlaps(&self.chain_len_ood) {
            return Err(Error::InvalidTaskSpec(
                "OOD chain lengths must be disjoint from train chain lengths".into(),
            ));
        }
        if self.operator_set.is_empty() {
            return Err(Error::InvalidTaskSpec("operator set is empty".into()));
        }
        self.vocab.validate()?;
        let mut required: Vec<TokenKind> = (0..self.modulus).map(TokenKind::Digit).collect();
        required.extend(self.operator_set.iter().map(|&op| TokenKind::Op(op)));
        required.extend([
            TokenKind::Mod,
            TokenKind::Modulus(self.modulus),
            TokenKind::Equals,
            TokenKind::Sep,
        ]);
        for kind in required {
            if self.vocab.id(kind).is_none() {
                return Err(Error::InvalidVocabulary(format!("missing required token {kind}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    ValID,
    ValOOD,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::ValID, Split::ValOOD];

    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValID => "val_id",
            Split::ValOOD => "val_ood",
        }
    }

    fn stream_label(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Chain {
    pub start: u32,
    pub steps: Vec<(Op, u32)>,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Values after each step, left to right.
    pub fn prefix_values(&self, modulus: u32) -> Vec<u32> {
        let mut acc = self.start;
        self.steps
            .iter()
            .map(|&(op, operand)| {
                acc = op.apply(acc, operand, modulus);
                acc
            })
            .collect()
    }

    pub fn evaluate(&self, modulus: u32) -> u32 {
        self.steps
            .iter()
            .fold(self.start, |acc, &(op, operand)| op.apply(acc, operand, modulus))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub split: Split,
    pub prompt_tokens: Vec<Token>,
    pub target: u32,
    pub chain: Chain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSet {
    pub spec: TaskSpec,
    pub problems: Vec<Problem>,
}

impl ProblemSet {
    pub fn split(&self, split: Split) -> Vec<&Problem> {
        self.problems.iter().filter(|p| p.split == split).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Problem> {
        self.problems.iter().find(|p| p.id == id)
    }

    /// One JSON object per line, fields in the order
    /// `id, split, prompt_tokens, target, chain`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for p in &self.problems {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(spec: TaskSpec, r: R) -> Result<Self> {
        let mut problems = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            problems.push(serde_json::from_str(&line)?);
        }
        Ok(ProblemSet { spec, problems })
    }
}

fn random_chain<R: Rng>(spec: &TaskSpec, lens: LenRange, rng: &mut R) -> Chain {
    let len = rng.random_range(lens.min..=lens.max);
    let start = rng.random_range(0..spec.modulus);
    let steps = (0..len)
        .map(|_| {
            let op = spec.operator_set[rng.random_range(0..spec.operator_set.len())];
            (op, rng.random_range(0..spec.modulus))
        })
        .collect();
    Chain { start, steps }
}

/// Renders `x0 op1 a1 ... % m =`.
pub fn render_chain(vocab: &Vocabulary, chain: &Chain, modulus: u32) -> Vec<Token> {
    let id = |k: TokenKind| vocab.id(k).expect("validated vocabulary");
    let mut out = Vec::with_capacity(2 * chain.len() + 4);
    out.push(id(TokenKind::Digit(chain.start)));
    for &(op, a) in &chain.steps {
        out.push(id(TokenKind::Op(op)));
        out.push(id(TokenKind::Digit(a)));
    }
    out.push(id(TokenKind::Mod));
    out.push(id(TokenKind::Modulus(modulus)));
    out.push(id(TokenKind::Equals));
    out
}

pub fn render_prompt(spec: &TaskSpec, problem: &Problem) -> Vec<Token> {
    render_chain(&spec.vocab, &problem.chain, spec.modulus)
}

/// Per-split problem counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val_id: usize,
    pub val_ood: usize,
}

impl SplitCounts {
    pub fn uniform(n: usize) -> Self {
        SplitCounts { train: n, val_id: n, val_ood: n }
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::ValID => self.val_id,
            Split::ValOOD => self.val_ood,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val_id + self.val_ood
    }
}

/// Generates `count_per_split` problems for each split. Chains are unique
/// across all splits; OOD chains use only `chain_len_ood`.
pub fn generate_problems(spec: &TaskSpec, count_per_split: usize) -> Result<ProblemSet> {
    generate_split_counts(spec, SplitCounts::uniform(count_per_split))
}

/// As `generate_problems`, with a separate count for each split.
pub fn generate_split_counts(spec: &TaskSpec, counts: SplitCounts) -> Result<ProblemSet> {
    spec.validate()?;
    if Split::ALL.iter().any(|&s| counts.get(s) == 0) {
        return Err(Error::Precondition("every split needs at least one problem".into()));
    }
    let mut seen: HashSet<Chain> = HashSet::new();
    let mut problems = Vec::with_capacity(counts.total());
    for split in Split::ALL {
        let want = counts.get(split);
        let lens = match split {
            Split::ValOOD => spec.chain_len_ood,
            _ => spec.chain_len_train,
        };
        let mut rng = seed::stream(spec.seed, &[seed::STREAM_TASK, split.stream_label()]);
        let budget = 1000 * want + 10_000;
        let mut attempts = 0;
        let mut made = 0;
        while made < want {
            attempts += 1;
            if attempts > budget {
                return Err(Error::InvalidTaskSpec(format!(
                    "could not draw {want} distinct {split} chains; the chain space is too small"
                )));
            }
            let chain = random_chain(spec, lens, &mut rng);
            if !seen.insert(chain.clone()) {
                continue;
            }
            let target = chain.evaluate(spec.modulus);
            problems.push(Problem {
                id: format!("{}-{:05}", split.label(), made),
                split,
                prompt_tokens: render_chain(&spec.vocab, &chain, spec.modulus),
                target,
                chain,
            });
            made += 1;
        }
    }
    Ok(ProblemSet {
        spec: spec.clone(),
        problems,
    })
}

/// The generator's own step-by-step solution: `v1 ; v2 ; ... ; ANS vL EOS`.
/// Self-tests the verifier; never used to train on generated problem sets.
pub fn gold_solution(vocab: &Vocabulary, problem: &Problem, modulus: u32) -> Vec<Token> {
    let id = |k: TokenKind| vocab.id(k).expect("validated vocabulary");
    let mut out = Vec::new();
    for v in problem.chain.prefix_values(modulus) {
        out.push(id(TokenKind::Digit(v)));
        out.push(id(TokenKind::Sep));
    }
    out.push(id(TokenKind::Answer));
    out.push(id(TokenKind::Digit(problem.target)));
    out.push(id(TokenKind::Eos));
    out
}

/// Binary reward. The sequence must end with end-of-sequence (and contain
/// no earlier one), and the first answer marker must be followed by the
/// target digit and then that final end-of-sequence. Total over all inputs.
pub fn verify(vocab: &Vocabulary, problem: &Problem, solution: &[Token]) -> u8 {
    let eos = vocab.eos();
    let ans = vocab.answer();
    let n = solution.len();
    if n < 3 || solution[n - 1] != eos {
        return 0;
    }
    if solution[..n - 1].contains(&eos) {
        return 0;
    }
    let Some(p) = solution.iter().position(|&t| t == ans) else {
        return 0;
    };
    if p + 3 != n {
        return 0;
    }
    match vocab.digit_value(solution[p + 1]) {
        Some(d) if d == problem.target => 1,
        _ => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec10() -> TaskSpec {
        TaskSpec::new(10, LenRange::new(1, 3), LenRange::new(4, 6), 7)
    }

    fn hand_problem() -> (TaskSpec, Problem) {
        let spec = spec10();
        let chain = Chain {
            start: 3,
            steps: vec![(Op::Add, 4), (Op::Mul, 2)],
        };
        let p = Problem {
            id: "hand".into(),
            split: Split::Train,
            prompt_tokens: render_chain(&spec.vocab, &chain, 10),
            target: chain.evaluate(10),
            chain,
        };
        (spec, p)
    }

    fn toks(vocab: &Vocabulary, s: &str) -> Vec<Token> {
        s.split_whitespace()
            .map(|w| vocab.parse_symbol(w).unwrap())
            .collect()
    }

    #[test]
    fn counts_per_split() {
        let set = generate_problems(&spec10(), 100).unwrap();
        assert_eq!(set.problems.len(), 300);
        for split in Split::ALL {
            assert_eq!(set.split(split).len(), 100);
        }
    }

    #[test]
    fn deterministic_serialization() {
        let a = generate_problems(&spec10(), 50).unwrap().to_jsonl_string();
        let b = generate_problems(&spec10(), 50).unwrap().to_jsonl_string();
        assert_eq!(a, b);
        let mut other = spec10();
        other.seed = 8;
        assert_ne!(a, generate_problems(&other, 50).unwrap().to_jsonl_string());
    }

    #[test]
    fn left_to_right_evaluation() {
        let (_, p) = hand_problem();
        // ((3 + 4) * 2) mod 10
        assert_eq!(p.target, 4);
    }

    #[test]
    fn prompt_rendering() {
        let (spec, p) = hand_problem();
        let rendered = render_prompt(&spec, &p);
        assert_eq!(spec.vocab.render(&rendered), "3 + 4 * 2 % 10 =");
        assert_eq!(rendered, render_prompt(&spec, &p));
    }

    #[test]
    fn verify_examples() {
        let (spec, p) = hand_problem();
        let v = &spec.vocab;
        assert_eq!(verify(v, &p, &toks(v, "7 ; 4 ; ANS 4 EOS")), 1);
        assert_eq!(verify(v, &p, &toks(v, "ANS 4 EOS")), 1);
        assert_eq!(verify(v, &p, &toks(v, "9 + ANS 4 EOS")), 1);
        assert_eq!(verify(v, &p, &[]), 0);
        // correct answer but truncated before EOS
        assert_eq!(verify(v, &p, &toks(v, "7 ; 4 ; ANS 4")), 0);
        assert_eq!(verify(v, &p, &toks(v, "ANS 5 EOS")), 0);
        assert_eq!(verify(v, &p, &toks(v, "ANS 4 ; EOS")), 0);
        assert_eq!(verify(v, &p, &toks(v, "ANS 3 ANS 4 EOS")), 0);
        assert_eq!(verify(v, &p, &toks(v, "ANS ; EOS")), 0);
        assert_eq!(verify(v, &p, &toks(v, "EOS ANS 4 EOS")), 0);
    }

    #[test]
    fn gold_solutions_verify_and_splits_are_disjoint() {
        let spec = spec10();
        let set = generate_problems(&spec, 200).unwrap();
        let mut ids = HashSet::new();
        let mut chains = HashSet::new();
        for p in &set.problems {
            assert!(ids.insert(p.id.clone()));
            assert!(chains.insert(p.chain.clone()));
            assert_eq!(verify(&spec.vocab, p, &gold_solution(&spec.vocab, p, 10)), 1);
            assert_eq!(p.target, p.chain.evaluate(10));
            assert!(p.prompt_tokens.iter().all(|&t| (t as usize) < spec.vocab.len()));
            let lens = if p.split == Split::ValOOD {
                spec.chain_len_ood
            } else {
                spec.chain_len_train
            };
            assert!(lens.contains(p.chain.len()));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = spec10();
        s.operator_set.clear();
        assert!(matches!(generate_problems(&s, 1), Err(Error::InvalidTaskSpec(_))));

        let mut s = spec10();
        s.vocab = Vocabulary {
            tokens: Vocabulary::standard(10)
                .kinds()
                .iter()
                .copied()
                .filter(|&k| k != TokenKind::Answer)
                .collect(),
        };
        assert!(matches!(generate_problems(&s, 1), Err(Error::InvalidVocabulary(_))));

        let mut s = spec10();
        s.vocab = Vocabulary {
            tokens: Vocabulary::standard(10)
                .kinds()
                .iter()
                .copied()
                .filter(|&k| k != TokenKind::Sep)
                .collect(),
        };
        assert!(matches!(generate_problems(&s, 1), Err(Error::InvalidVocabulary(_))));

        let mut s = spec10();
        s.chain_len_ood = LenRange::new(3, 5);
        assert!(generate_problems(&s, 1).is_err());

        let mut s = spec10();
        s.modulus = 1;
        assert!(generate_problems(&s, 1).is_err());

        assert!(generate_problems(&spec10(), 0).is_err());
    }

    #[test]
    fn vocabulary_markers_required() {
        let mut kinds = Vocabulary::standard(5).kinds().to_vec();
        kinds.push(TokenKind::Eos);
        assert!(Vocabulary::from_kinds(kinds).is_err());
        assert!(Vocabulary::from_kinds(vec![TokenKind::Answer, TokenKind::Eos]).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let spec = spec10();
        let set = generate_problems(&spec, 5).unwrap();
        let text = set.to_jsonl_string();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("{\"id\":"));
        let order: Vec<usize> = ["\"id\"", "\"split\"", "\"prompt_tokens\"", "\"target\"", "\"chain\""]
            .iter()
            .map(|k| first.find(k).unwrap())
            .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
        let back = ProblemSet::read_jsonl(spec, text.as_bytes()).unwrap();
        assert_eq!(back, set);
    }

    proptest! {
        #[test]
        fn verifier_is_total(seq in proptest::collection::vec(0u16..19, 0..40)) {
            let (spec, p) = hand_problem();
            let r = verify(&spec.vocab, &p, &seq);
            prop_assert!(r == 0 || r == 1);
        }

        #[test]
        fn distinct_problems_render_distinct_prompts(seed in 0u64..200) {
            let spec = TaskSpec::new(5, LenRange::new(1, 2), LenRange::new(3, 3), seed);
            let set = generate_problems(&spec, 20).unwrap();
            let prompts: HashSet<_> = set.problems.iter().map(|p| render_prompt(&spec, p)).collect();
            prop_assert_eq!(prompts.len(), set.problems.len());
        }
    }
}
