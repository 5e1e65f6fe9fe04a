//! Arithmetic fixture suite and the scripted agents that solve it.
//!
//! A fixture is a start value followed by a chain of operations, one per
//! step. The agent acting at step `t` takes the most recent value it can see
//! in its visible history (or the start value), applies every operation
//! between that step and `t`, and reports "the answer is N". Gaps in
//! visibility are filled by recomputing from the query, so a clean run is
//! always correct, while a corrupted value that is visible propagates.

use std::sync::LazyLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{AgentContext, AgentOutput, AgentPolicy};
use crate::error::{MascError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Add(i64),
    Subtract(i64),
    MultiplyBy(i64),
}

impl Op {
    pub fn apply(self, v: i64) -> i64 {
        match self {
            Op::Add(k) => v + k,
            Op::Subtract(k) => v - k,
            Op::MultiplyBy(k) => v * k,
        }
    }

    pub fn describe(self) -> String {
        match self {
            Op::Add(k) => format!("add {k}"),
            Op::Subtract(k) => format!("subtract {k}"),
            Op::MultiplyBy(k) => format!("multiply by {k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fixture {
    pub id: String,
    pub start: i64,
    pub ops: Vec<Op>,
    pub answer: i64,
}

impl Fixture {
    pub fn new(id: impl Into<String>, start: i64, ops: Vec<Op>) -> Self {
        let answer = ops.iter().fold(start, |v, op| op.apply(v));
        Fixture { id: id.into(), start, ops, answer }
    }

    pub fn query(&self) -> String {
        let ops: Vec<String> = self.ops.iter().map(|o| o.describe()).collect();
        format!("Start with {}, then {}. Report the final number.", self.start, ops.join(", then "))
    }
}

/// `n` seeded fixtures with `n_ops` operations each.
pub fn arithmetic_suite(n: usize, n_ops: usize, seed: u64) -> Vec<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let start = rng.random_range(2..=20);
            let ops = (0..n_ops)
                .map(|_| match rng.random_range(0..5) {
                    0 | 1 => Op::Add(rng.random_range(1..=9)),
                    2 | 3 => Op::Subtract(rng.random_range(1..=9)),
                    _ => Op::MultiplyBy(rng.random_range(2..=3)),
                })
                .collect();
            Fixture::new(format!("fx-{seed}-{i:03}"), start, ops)
        })
        .collect()
}

static START_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"Start with (-?\d+)").expect("valid regex"));
static OP_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(add|subtract|multiply by) (-?\d+)").expect("valid regex"));
static VALUE_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"the answer is (-?\d+)").expect("valid regex"));

/// Recovers the start value and operations from a fixture query.
pub fn parse_query(query: &str) -> Option<(i64, Vec<Op>)> {
    let start = START_RE.captures(query)?[1].parse().ok()?;
    let ops = OP_RE
        .captures_iter(query)
        .map(|c| {
            let k: i64 = c[2].parse().ok()?;
            Some(match &c[1] {
                "add" => Op::Add(k),
                "subtract" => Op::Subtract(k),
                _ => Op::MultiplyBy(k),
            })
        })
        .collect::<Option<Vec<_>>>()?;
    Some((start, ops))
}

/// Value reported in an output, if it carries one.
pub fn reported_value(output: &str) -> Option<i64> {
    VALUE_RE.captures_iter(output).last().and_then(|c| c[1].parse().ok())
}

/// Deterministic agent whose wording depends on its role.
#[derive(Debug, Clone, Default)]
pub struct ScriptedArithmeticAgent;

impl AgentPolicy for ScriptedArithmeticAgent {
    fn act(&self, ctx: &AgentContext) -> Result<AgentOutput> {
        let (start, ops) = parse_query(ctx.query)
            .ok_or_else(|| MascError::precondition(format!("not an arithmetic query: {}", ctx.query)))?;
        let (source, prev) = ctx
            .visible
            .iter()
            .rev()
            .find_map(|s| reported_value(&s.output).map(|v| (s.t, v)))
            .unwrap_or((0, start));
        let lo = source.min(ops.len());
        let hi = ctx.t.min(ops.len());
        let applied = &ops[lo..hi];
        let value = applied.iter().fold(prev, |v, op| op.apply(v));
        let steps = if applied.is_empty() {
            "no further operation".to_string()
        } else {
            applied.iter().map(|o| o.describe()).collect::<Vec<_>>().join(" then ")
        };
        let t = ctx.t;
        let mut text = match ctx.role {
            "decomposer" => format!("plan stage {t}: starting from {prev}, {steps}, so the answer is {value}"),
            "solver" => format!("solving stage {t}: {prev} with {steps} gives {value}, the answer is {value}"),
            _ => format!("checking stage {t}: confirmed {steps} on {prev}, the answer is {value}"),
        };
        if ctx.t == ctx.total_steps {
            text.push_str(&format!(". ANSWER: {value}"));
        }
        Ok(AgentOutput { text, source: Some(source) })
    }
}
