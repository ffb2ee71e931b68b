//! Synthetic verifiable tasks.
//!
//! All tasks share one small vocabulary so a policy trained on one family can
//! be evaluated on another. Every problem input starts with a family marker:
//!
//! * `E 2 3 4 = 1 4` asks for an expression over `+ * ( )` that uses exactly
//!   the operands 2, 3, 4 and evaluates to 14 (`2+3*4`, `(3+4)*2`, ...).
//! * `R a b c =` asks for the letters reversed (`cba`).
//! * `M 3 + 4 % 5 =` asks for `(3 + 4) mod 5` (`2`).
//!
//! Outputs are scored by exact verifiers. An optional scalar score gives
//! partial credit and equals 1 exactly when the verifier accepts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::io::{read_jsonl, write_jsonl_atomic};
use crate::rng::rng_from;
use crate::seqpolicy::{TokenId, TokenSeq, Vocab};

const LAB_TOKENS: [&str; 24] = [
    "<eos>", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "*", "(", ")", "=", "%", "a", "b", "c", "d", "E",
    "R", "M",
];

/// Upper bound on an enumerated problem universe.
const MAX_UNIVERSE: usize = 1 << 20;

/// The vocabulary shared by every task family.
pub fn lab_vocab() -> &'static Vocab {
    static VOCAB: OnceLock<Vocab> = OnceLock::new();
    VOCAB.get_or_init(|| Vocab::new(LAB_TOKENS.iter().map(|s| s.to_string()).collect(), 0).expect("lab vocab is valid"))
}

fn tok(symbol: char) -> TokenId {
    lab_vocab()
        .id_of(symbol.encode_utf8(&mut [0; 4]))
        .expect("symbol in lab vocab")
}

fn sym(id: TokenId) -> Option<char> {
    let v = lab_vocab();
    if id as usize >= v.size() || id == v.eos() {
        return None;
    }
    v.symbol(id).chars().next()
}

fn encode(text: &str) -> Vec<TokenId> {
    text.chars().map(tok).collect()
}

fn render(ids: &[TokenId]) -> Option<String> {
    ids.iter().map(|&t| sym(t)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    ExprTarget,
    Reverse,
    ModAdd,
}

impl TaskKind {
    fn prefix(self) -> &'static str {
        match self {
            TaskKind::ExprTarget => "expr",
            TaskKind::Reverse => "rev",
            TaskKind::ModAdd => "mod",
        }
    }
}

/// An input context plus the canonical answer its verifier checks against.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub kind: TaskKind,
    pub input: TokenSeq,
    pub answer_key: String,
}

/// One known-correct output per problem; stands in for human-written data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceSolution {
    pub problem_id: String,
    pub output: TokenSeq,
}

/// Binary verifier outcome with optional partial credit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardValue {
    pub binary: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scalar: Option<f64>,
}

impl RewardValue {
    /// The reward the filters act on: the scalar when present.
    pub fn value(&self) -> f64 {
        self.scalar.unwrap_or(f64::from(self.binary))
    }
}

/// Task family together with its difficulty knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskFamily {
    ExprTarget { operands: usize, max_operand: u32 },
    Reverse { min_len: usize, max_len: usize, alphabet: usize },
    ModAdd { max_operand: u32, max_modulus: u32 },
}

impl TaskFamily {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskFamily::ExprTarget { .. } => TaskKind::ExprTarget,
            TaskFamily::Reverse { .. } => TaskKind::Reverse,
            TaskFamily::ModAdd { .. } => TaskKind::ModAdd,
        }
    }

    /// Longest reference output in tokens, including eos.
    pub fn max_output_len(&self) -> usize {
        match *self {
            // n digits, n-1 operators, and one pair of parentheses per
            // operator in the worst case.
            TaskFamily::ExprTarget { operands, .. } => 2 * operands - 1 + 2 * (operands - 1) + 1,
            TaskFamily::Reverse { max_len, .. } => max_len + 1,
            TaskFamily::ModAdd { max_modulus, .. } => digits(max_modulus.saturating_sub(1)).len() + 1,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            TaskFamily::ExprTarget { operands, max_operand } => {
                if !(2..=4).contains(&operands) {
                    return Err(config_err("task.family.operands", "must lie in 2..=4"));
                }
                if !(1..=9).contains(&max_operand) {
                    return Err(config_err("task.family.max_operand", "must lie in 1..=9"));
                }
            }
            TaskFamily::Reverse {
                min_len,
                max_len,
                alphabet,
            } => {
                if min_len == 0 || min_len > max_len {
                    return Err(config_err("task.family.min_len", "need 1 <= min_len <= max_len"));
                }
                if !(1..=4).contains(&alphabet) {
                    return Err(config_err("task.family.alphabet", "must lie in 1..=4"));
                }
            }
            TaskFamily::ModAdd {
                max_operand,
                max_modulus,
            } => {
                if max_modulus < 2 {
                    return Err(config_err("task.family.max_modulus", "must be at least 2"));
                }
                if max_operand > 999 {
                    return Err(config_err("task.family.max_operand", "must be at most 999"));
                }
            }
        }
        Ok(())
    }
}

/// Sizes of the four disjoint splits. The warm-up split only feeds the
/// supervised pass that produces the base checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    #[serde(default)]
    pub warmup: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test + self.warmup
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
    Warmup,
}

/// Generated problems split four ways, with one reference each.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSet {
    pub train: Vec<Problem>,
    pub val: Vec<Problem>,
    pub test: Vec<Problem>,
    pub warmup: Vec<Problem>,
    pub references: BTreeMap<String, ReferenceSolution>,
}

impl ProblemSet {
    pub fn split(&self, split: Split) -> &[Problem] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
            Split::Warmup => &self.warmup,
        }
    }

    pub fn reference(&self, problem_id: &str) -> Option<&ReferenceSolution> {
        self.references.get(problem_id)
    }

    /// References for `problems`, in the same order.
    pub fn references_for(&self, problems: &[Problem]) -> Vec<ReferenceSolution> {
        problems
            .iter()
            .filter_map(|p| self.references.get(&p.id).cloned())
            .collect()
    }

    pub fn all(&self) -> impl Iterator<Item = (Split, &Problem)> {
        [Split::Train, Split::Val, Split::Test, Split::Warmup]
            .into_iter()
            .flat_map(move |s| self.split(s).iter().map(move |p| (s, p)))
    }
}

fn digits(n: u32) -> String {
    n.to_string()
}

/// Expression tree over single-digit operands.
#[derive(Clone, Debug)]
enum Expr {
    Leaf(u32),
    Add(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
}

impl Expr {
    fn value(&self) -> i64 {
        match self {
            Expr::Leaf(v) => i64::from(*v),
            Expr::Add(a, b) => a.value() + b.value(),
            Expr::Mul(a, b) => a.value() * b.value(),
        }
    }

    /// Infix text with only the parentheses precedence requires.
    fn render(&self) -> String {
        match self {
            Expr::Leaf(v) => v.to_string(),
            Expr::Add(a, b) => format!("{}+{}", a.render(), b.render()),
            Expr::Mul(a, b) => {
                let side = |e: &Expr| match e {
                    Expr::Add(..) => format!("({})", e.render()),
                    _ => e.render(),
                };
                format!("{}*{}", side(a), side(b))
            }
        }
    }
}

/// Every expression tree over the operands in exactly this order.
fn trees(ops: &[u32]) -> Vec<Expr> {
    if ops.len() == 1 {
        return vec![Expr::Leaf(ops[0])];
    }
    let mut out = Vec::new();
    for split in 1..ops.len() {
        let lefts = trees(&ops[..split]);
        let rights = trees(&ops[split..]);
        for l in &lefts {
            for r in &rights {
                out.push(Expr::Add(Box::new(l.clone()), Box::new(r.clone())));
                out.push(Expr::Mul(Box::new(l.clone()), Box::new(r.clone())));
            }
        }
    }
    out
}

fn permutations(items: &[u32]) -> BTreeSet<Vec<u32>> {
    if items.len() <= 1 {
        return BTreeSet::from([items.to_vec()]);
    }
    let mut out = BTreeSet::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.insert(tail);
        }
    }
    out
}

/// All distinct minimal-parenthesis expressions over a multiset of operands,
/// grouped by value.
fn expressions_by_value(operands: &[u32]) -> BTreeMap<i64, BTreeSet<String>> {
    let mut out: BTreeMap<i64, BTreeSet<String>> = BTreeMap::new();
    for perm in permutations(operands) {
        for e in trees(&perm) {
            out.entry(e.value()).or_default().insert(e.render());
        }
    }
    out
}

fn multisets(len: usize, lo: u32, hi: u32) -> Vec<Vec<u32>> {
    if len == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for first in lo..=hi {
        for mut rest in multisets(len - 1, first, hi) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// One candidate problem before ids are assigned.
struct Draft {
    input: String,
    answer_key: String,
    references: Vec<String>,
}

/// Target first, so the operands always sit right before the output.
fn expr_input(operands: &[u32], target: i64) -> String {
    let ops: String = operands.iter().map(|d| d.to_string()).collect();
    format!("E{target}={ops}")
}

fn universe(family: &TaskFamily) -> Result<Vec<Draft>> {
    let mut out = Vec::new();
    match *family {
        TaskFamily::ExprTarget { operands, max_operand } => {
            for ms in multisets(operands, 1, max_operand) {
                for (value, exprs) in expressions_by_value(&ms) {
                    out.push(Draft {
                        input: expr_input(&ms, value),
                        answer_key: value.to_string(),
                        references: exprs.into_iter().collect(),
                    });
                }
            }
        }
        TaskFamily::Reverse {
            min_len,
            max_len,
            alphabet,
        } => {
            let letters: Vec<char> = ['a', 'b', 'c', 'd'][..alphabet].to_vec();
            let size: usize = (min_len..=max_len)
                .map(|l| alphabet.checked_pow(l as u32).unwrap_or(usize::MAX))
                .fold(0usize, |a, b| a.saturating_add(b));
            if size > MAX_UNIVERSE {
                return Err(Error::Generation(format!(
                    "reverse universe of {size} strings is too large to enumerate"
                )));
            }
            let mut layer = vec![String::new()];
            for len in 1..=max_len {
                layer = layer
                    .iter()
                    .flat_map(|s| letters.iter().map(move |c| format!("{s}{c}")))
                    .collect();
                if len >= min_len {
                    for s in &layer {
                        let rev: String = s.chars().rev().collect();
                        out.push(Draft {
                            input: format!("R{s}="),
                            answer_key: rev.clone(),
                            references: vec![rev],
                        });
                    }
                }
            }
        }
        TaskFamily::ModAdd {
            max_operand,
            max_modulus,
        } => {
            let size = (max_operand as usize + 1).pow(2) * (max_modulus as usize - 1);
            if size > MAX_UNIVERSE {
                return Err(Error::Generation(format!(
                    "mod-add universe of {size} problems is too large to enumerate"
                )));
            }
            for m in 2..=max_modulus {
                for a in 0..=max_operand {
                    for b in 0..=max_operand {
                        let key = ((a + b) % m).to_string();
                        out.push(Draft {
                            input: format!("M{a}+{b}%{m}="),
                            answer_key: key.clone(),
                            references: vec![key],
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Draws distinct problems, splits them and attaches one reference each.
/// Deterministic in `seed`; fails if the family has fewer distinct problems
/// than requested.
pub fn gen_problem_set(family: &TaskFamily, sizes: SplitSizes, seed: u64) -> Result<ProblemSet> {
    family.validate()?;
    let count = sizes.total();
    if count < 3 || sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(Error::Generation(
            "need at least one train, val and test problem and three overall".into(),
        ));
    }
    let mut pool = universe(family)?;
    if pool.len() < count {
        return Err(Error::Generation(format!(
            "requested {count} problems but the family only has {} distinct ones",
            pool.len()
        )));
    }
    let mut rng = rng_from(seed);
    pool.shuffle(&mut rng);
    pool.truncate(count);

    let kind = family.kind();
    let eos = lab_vocab().eos();
    let mut set = ProblemSet {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        warmup: Vec::new(),
        references: BTreeMap::new(),
    };
    let bounds = [
        (Split::Train, sizes.train),
        (Split::Val, sizes.val),
        (Split::Test, sizes.test),
        (Split::Warmup, sizes.warmup),
    ];
    let mut drafts = pool.into_iter().enumerate();
    for (split, n) in bounds {
        for (index, draft) in drafts.by_ref().take(n) {
            let id = format!("{}-{index:05}", kind.prefix());
            let reference = draft.references[rng.gen_range(0..draft.references.len())].clone();
            let problem = Problem {
                id: id.clone(),
                kind,
                input: TokenSeq::open(encode(&draft.input)),
                answer_key: draft.answer_key,
            };
            set.references.insert(
                id.clone(),
                ReferenceSolution {
                    problem_id: id,
                    output: TokenSeq::terminated(&encode(&reference), eos),
                },
            );
            match split {
                Split::Train => set.train.push(problem),
                Split::Val => set.val.push(problem),
                Split::Test => set.test.push(problem),
                Split::Warmup => set.warmup.push(problem),
            }
        }
    }
    Ok(set)
}

/// Operands and target of an expression problem, read back from its input.
fn expr_spec(problem: &Problem) -> Option<(Vec<u32>, i64)> {
    let text = render(&problem.input.ids)?;
    let body = text.strip_prefix('E')?;
    let (target, ops) = body.split_once('=')?;
    let operands = ops.chars().map(|c| c.to_digit(10)).collect::<Option<Vec<_>>>()?;
    Some((operands, target.parse().ok()?))
}

fn mod_spec(problem: &Problem) -> Option<u32> {
    let text = render(&problem.input.ids)?;
    let (_, m) = text.strip_prefix('M')?.strip_suffix('=')?.split_once('%')?;
    m.parse().ok()
}

/// Recursive-descent parser for `expr := term (+ term)*`,
/// `term := factor (* factor)*`, `factor := digit | ( expr )`.
struct Parser<'a> {
    chars: &'a [char],
    pos: usize,
    operands: Vec<u32>,
}

impl Parser<'_> {
    fn expr(&mut self) -> Option<i64> {
        let mut v = self.term()?;
        while self.peek() == Some('+') {
            self.pos += 1;
            v = v.checked_add(self.term()?)?;
        }
        Some(v)
    }

    fn term(&mut self) -> Option<i64> {
        let mut v = self.factor()?;
        while self.peek() == Some('*') {
            self.pos += 1;
            v = v.checked_mul(self.factor()?)?;
        }
        Some(v)
    }

    fn factor(&mut self) -> Option<i64> {
        match self.peek()? {
            '(' => {
                self.pos += 1;
                let v = self.expr()?;
                (self.peek()? == ')').then_some(())?;
                self.pos += 1;
                Some(v)
            }
            c => {
                let d = c.to_digit(10)?;
                self.pos += 1;
                // Operands are single digits; adjacent digits do not parse.
                if self.peek().is_some_and(|n| n.is_ascii_digit()) {
                    return None;
                }
                self.operands.push(d);
                Some(i64::from(d))
            }
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }
}

/// Value of a well-formed expression and its operands in sorted order.
fn parse_expression(y: &TokenSeq) -> Option<(i64, Vec<u32>)> {
    if !y.terminated {
        return None;
    }
    let chars: Vec<char> = render(y.content())?.chars().collect();
    let mut p = Parser {
        chars: &chars,
        pos: 0,
        operands: Vec::new(),
    };
    let v = p.expr()?;
    if p.pos != chars.len() {
        return None;
    }
    p.operands.sort_unstable();
    Some((v, p.operands))
}

fn plain_output(y: &TokenSeq) -> Option<String> {
    if !y.terminated {
        return None;
    }
    render(y.content())
}

/// The final answer carried by an output, or `None` when it is malformed.
///
/// For expressions the answer is the value, and only expressions over
/// exactly the given operands count as well-formed. Reversal answers are the
/// letters; modular answers are the digits.
pub fn extract_answer(problem: &Problem, y: &TokenSeq) -> Option<String> {
    match problem.kind {
        TaskKind::ExprTarget => {
            let (operands, _) = expr_spec(problem)?;
            let (value, used) = parse_expression(y)?;
            (used == operands).then(|| value.to_string())
        }
        TaskKind::Reverse => {
            let s = plain_output(y)?;
            (!s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase())).then_some(s)
        }
        TaskKind::ModAdd => {
            let s = plain_output(y)?;
            let canonical = s == "0" || !s.starts_with('0');
            (!s.is_empty() && canonical && s.chars().all(|c| c.is_ascii_digit())).then_some(s)
        }
    }
}

/// Exact verifier: 1 iff `y` is terminated, parses and matches the answer.
pub fn verify_binary(problem: &Problem, y: &TokenSeq) -> u8 {
    u8::from(extract_answer(problem, y).is_some_and(|a| a == problem.answer_key))
}

/// Partial credit in `[0, 1]`; equals 1 exactly when [`verify_binary`] does.
pub fn score_scalar(problem: &Problem, y: &TokenSeq) -> f64 {
    match problem.kind {
        TaskKind::Reverse => {
            let Some(s) = plain_output(y) else { return 0.0 };
            let key: Vec<char> = problem.answer_key.chars().collect();
            let out: Vec<char> = s.chars().collect();
            let denom = key.len().max(out.len());
            if denom == 0 {
                return 0.0;
            }
            let hits = key.iter().zip(&out).filter(|(a, b)| a == b).count();
            hits as f64 / denom as f64
        }
        TaskKind::ExprTarget => {
            let Some((operands, target)) = expr_spec(problem) else { return 0.0 };
            let Some((value, used)) = parse_expression(y) else { return 0.0 };
            let closeness = 1.0 - ((value - target).abs() as f64 / target.max(1) as f64).min(1.0);
            if used == operands {
                closeness
            } else {
                0.5 * closeness
            }
        }
        TaskKind::ModAdd => {
            let (Some(m), Some(s)) = (mod_spec(problem), extract_answer(problem, y)) else {
                return 0.0;
            };
            let (Ok(a), Ok(key)) = (s.parse::<i64>(), problem.answer_key.parse::<i64>()) else {
                return 0.0;
            };
            (1.0 - (a - key).abs() as f64 / f64::from(m)).max(0.0)
        }
    }
}

/// Reward annotation; the scalar is attached only in scalar mode.
pub fn reward(problem: &Problem, y: &TokenSeq, scalar_mode: bool) -> RewardValue {
    let binary = verify_binary(problem, y);
    RewardValue {
        binary,
        scalar: scalar_mode.then(|| if binary == 1 { 1.0 } else { score_scalar(problem, y) }),
    }
}

/// JSON-lines row for a persisted problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemRow {
    pub id: String,
    pub kind: TaskKind,
    pub input_tokens: Vec<TokenId>,
    pub answer_key: String,
    pub reference_tokens: Vec<TokenId>,
    pub split: Split,
}

pub fn write_problem_set(set: &ProblemSet, path: &Path) -> Result<()> {
    let rows: Vec<ProblemRow> = set
        .all()
        .map(|(split, p)| ProblemRow {
            id: p.id.clone(),
            kind: p.kind,
            input_tokens: p.input.ids.clone(),
            answer_key: p.answer_key.clone(),
            reference_tokens: set.references[&p.id].output.ids.clone(),
            split,
        })
        .collect();
    write_jsonl_atomic(path, &rows)
}

pub fn read_problem_set(path: &Path) -> Result<ProblemSet> {
    let rows: Vec<ProblemRow> = read_jsonl(path)?;
    let eos = lab_vocab().eos();
    let mut set = ProblemSet {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        warmup: Vec::new(),
        references: BTreeMap::new(),
    };
    for row in rows {
        let terminated = row.reference_tokens.last() == Some(&eos);
        let problem = Problem {
            id: row.id.clone(),
            kind: row.kind,
            input: TokenSeq::open(row.input_tokens),
            answer_key: row.answer_key,
        };
        set.references.insert(
            row.id.clone(),
            ReferenceSolution {
                problem_id: row.id,
                output: TokenSeq {
                    ids: row.reference_tokens,
                    terminated,
                },
            },
        );
        match row.split {
            Split::Train => set.train.push(problem),
            Split::Val => set.val.push(problem),
            Split::Test => set.test.push(problem),
            Split::Warmup => set.warmup.push(problem),
        }
    }
    Ok(set)
}

/// Builds a problem directly from its surface text, for tests and examples.
pub fn problem_from_text(id: &str, kind: TaskKind, input: &str, answer_key: &str) -> Problem {
    Problem {
        id: id.into(),
        kind,
        input: TokenSeq::open(encode(input)),
        answer_key: answer_key.into(),
    }
}

/// Encodes an output string as a terminated sequence.
pub fn output_from_text(text: &str) -> TokenSeq {
    TokenSeq::terminated(&encode(text), lab_vocab().eos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn expr_problem() -> Problem {
        problem_from_text("e", TaskKind::ExprTarget, "E14=234", "14")
    }

    #[test]
    fn lab_vocab_is_small_and_eos_first() {
        let v = lab_vocab();
        assert_eq!(v.size(), 24);
        assert_eq!(v.eos(), 0);
    }

    #[test]
    fn expression_examples() {
        let p = expr_problem();
        assert_eq!(verify_binary(&p, &output_from_text("2+3*4")), 1);
        assert_eq!(verify_binary(&p, &output_from_text("2*(3+4)")), 1);
        assert_eq!(verify_binary(&p, &output_from_text("(4+3)*2")), 1);
        assert_eq!(verify_binary(&p, &output_from_text("2+3+4")), 0);
        // Right value, wrong operands.
        assert_eq!(verify_binary(&p, &output_from_text("7*2")), 0);
        assert_eq!(verify_binary(&p, &output_from_text("2*(3+4")), 0);
        assert_eq!(verify_binary(&p, &output_from_text("23+4")), 0);
        // Missing eos.
        let open = TokenSeq::open(encode("2+3*4"));
        assert_eq!(verify_binary(&p, &open), 0);
        assert_eq!(score_scalar(&p, &open), 0.0);
    }

    #[test]
    fn expression_universe_contains_both_solutions() {
        let by_value = expressions_by_value(&[2, 3, 4]);
        let fourteen = &by_value[&14];
        assert!(fourteen.contains("2+3*4"));
        assert!(fourteen.contains("2*(3+4)"));
    }

    #[test]
    fn reverse_examples() {
        let p = problem_from_text("r", TaskKind::Reverse, "Rabc=", "cba");
        assert_eq!(verify_binary(&p, &output_from_text("cba")), 1);
        assert_eq!(verify_binary(&p, &output_from_text("abc")), 0);
        let q = problem_from_text("r", TaskKind::Reverse, "Rabcd=", "dcba");
        assert_eq!(score_scalar(&q, &output_from_text("dcba")), 1.0);
        assert_eq!(score_scalar(&q, &output_from_text("dcab")), 0.5);
        assert_eq!(score_scalar(&q, &output_from_text("")), 0.0);
    }

    #[test]
    fn mod_add_example() {
        let fam = TaskFamily::ModAdd {
            max_operand: 4,
            max_modulus: 5,
        };
        let drafts = universe(&fam).unwrap();
        let d = drafts.iter().find(|d| d.input == "M3+4%5=").unwrap();
        assert_eq!(d.answer_key, "2");
        let p = problem_from_text("m", TaskKind::ModAdd, "M3+4%5=", "2");
        assert_eq!(verify_binary(&p, &output_from_text("2")), 1);
        assert_eq!(score_scalar(&p, &output_from_text("3")), 0.8);
        assert_eq!(extract_answer(&p, &output_from_text("2+")), None);
        assert_eq!(extract_answer(&p, &output_from_text("02")), None);
        assert_eq!(score_scalar(&p, &output_from_text("02")), 0.0);
    }

    #[test]
    fn reverse_set_of_ten() {
        let fam = TaskFamily::Reverse {
            min_len: 2,
            max_len: 4,
            alphabet: 3,
        };
        let set = gen_problem_set(
            &fam,
            SplitSizes {
                train: 6,
                val: 2,
                test: 2,
                warmup: 0,
            },
            3,
        )
        .unwrap();
        let all: Vec<_> = set.all().collect();
        assert_eq!(all.len(), 10);
        for (_, p) in all {
            let text = render(&p.input.ids).unwrap();
            let letters: String = text[1..text.len() - 1].chars().rev().collect();
            assert_eq!(render(set.reference(&p.id).unwrap().output.content()).unwrap(), letters);
        }
    }

    #[test]
    fn infeasible_sizes_fail() {
        let fam = TaskFamily::ModAdd {
            max_operand: 1,
            max_modulus: 2,
        };
        let sizes = SplitSizes {
            train: 3,
            val: 1,
            test: 1,
            warmup: 0,
        };
        assert!(matches!(gen_problem_set(&fam, sizes, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let fam = TaskFamily::ExprTarget {
            operands: 3,
            max_operand: 5,
        };
        let sizes = SplitSizes {
            train: 5,
            val: 2,
            test: 2,
            warmup: 3,
        };
        let set = gen_problem_set(&fam, sizes, 11).unwrap();
        write_problem_set(&set, &path).unwrap();
        assert_eq!(read_problem_set(&path).unwrap(), set);
    }

    fn arb_family() -> impl Strategy<Value = TaskFamily> {
        prop_oneof![
            (2usize..=3, 2u32..=9).prop_map(|(operands, max_operand)| TaskFamily::ExprTarget {
                operands,
                max_operand
            }),
            (1usize..=3, 0usize..=2, 2usize..=4).prop_map(|(min_len, extra, alphabet)| TaskFamily::Reverse {
                min_len,
                max_len: min_len + extra,
                alphabet
            }),
            (2u32..=12, 2u32..=9).prop_map(|(max_operand, max_modulus)| TaskFamily::ModAdd {
                max_operand,
                max_modulus
            }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn references_verify_and_splits_are_disjoint(fam in arb_family(), seed in any::<u64>()) {
            let sizes = SplitSizes { train: 4, val: 2, test: 2, warmup: 1 };
            let set = match gen_problem_set(&fam, sizes, seed) {
                Ok(s) => s,
                Err(Error::Generation(_)) => return Ok(()),
                Err(e) => panic!("{e}"),
            };
            let mut ids = BTreeSet::new();
            let mut inputs = BTreeSet::new();
            for (_, p) in set.all() {
                prop_assert!(ids.insert(p.id.clone()));
                prop_assert!(inputs.insert(p.input.ids.clone()));
                let r = &set.reference(&p.id).unwrap().output;
                prop_assert_eq!(verify_binary(p, r), 1);
                prop_assert_eq!(score_scalar(p, r), 1.0);
                prop_assert!(r.len() <= fam.max_output_len());
            }
            prop_assert_eq!(gen_problem_set(&fam, sizes, seed).unwrap(), set);
        }

        #[test]
        fn scalar_is_one_iff_binary_is_one(
            fam in arb_family(),
            seed in any::<u64>(),
            noise in proptest::collection::vec(1u32..24, 0..7),
            terminated in any::<bool>(),
        ) {
            let sizes = SplitSizes { train: 1, val: 1, test: 1, warmup: 0 };
            let Ok(set) = gen_problem_set(&fam, sizes, seed) else { return Ok(()) };
            let p = &set.train[0];
            let y = if terminated { TokenSeq::terminated(&noise, 0) } else { TokenSeq::open(noise) };
            let b = verify_binary(p, &y);
            let s = score_scalar(p, &y);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s == 1.0, b == 1);
            prop_assert_eq!(verify_binary(p, &y), b);
        }
    }
}
