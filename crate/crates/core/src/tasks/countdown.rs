//! Countdown: reach a target with `+ - * /` over given numbers, each used at
//! most once. Arithmetic is exact over the rationals.

use std::collections::BTreeMap;

use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedDiv, CheckedMul, CheckedSub};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PromptStyle;
use crate::error::{Error, Result};

type Q = Ratio<i64>;

pub const MAX_OPERANDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountdownInstance {
    pub target: i64,
    pub operands: Vec<i64>,
    /// One expression certified to reach the target.
    pub solution: String,
    pub prompt: String,
}

/// Every value reachable from `nums` using each at most once, with one
/// witnessing expression per value. Values using all numbers are returned
/// separately.
pub fn reachable(nums: &[i64]) -> (BTreeMap<Q, String>, BTreeMap<Q, String>) {
    let items: Vec<(Q, String)> = nums.iter().map(|&n| (Q::from_integer(n), n.to_string())).collect();
    let mut any = BTreeMap::new();
    let mut all = BTreeMap::new();
    search(items, &mut any, &mut all);
    (any, all)
}

fn search(items: Vec<(Q, String)>, any: &mut BTreeMap<Q, String>, all: &mut BTreeMap<Q, String>) {
    for (v, e) in &items {
        any.entry(*v).or_insert_with(|| e.clone());
    }
    if items.len() == 1 {
        all.entry(items[0].0).or_insert_with(|| items[0].1.clone());
        return;
    }
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            let (a, ea) = &items[i];
            let (b, eb) = &items[j];
            let rest: Vec<(Q, String)> = items
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != i && k != j)
                .map(|(_, x)| x.clone())
                .collect();
            let candidates = [
                (a.checked_add(b), format!("({ea}+{eb})")),
                (a.checked_sub(b), format!("({ea}-{eb})")),
                (b.checked_sub(a), format!("({eb}-{ea})")),
                (a.checked_mul(b), format!("({ea}*{eb})")),
                (a.checked_div(b), format!("({ea}/{eb})")),
                (b.checked_div(a), format!("({eb}/{ea})")),
            ];
            for (v, e) in candidates {
                if let Some(v) = v {
                    let mut next = rest.clone();
                    next.push((v, e));
                    search(next, any, all);
                }
            }
        }
    }
}

fn strip_outer(e: &str) -> String {
    let b = e.as_bytes();
    if b.first() == Some(&b'(') && b.last() == Some(&b')') {
        // only strip when the opening paren closes at the very end
        let mut depth = 0;
        for (i, &c) in b.iter().enumerate() {
            match c {
                b'(' => depth += 1,
                b')' => depth -= 1,
                _ => {}
            }
            if depth == 0 && i + 1 < b.len() {
                return e.to_string();
            }
        }
        return e[1..e.len() - 1].to_string();
    }
    e.to_string()
}

/// `count` operands drawn from `lo..=hi` and a positive integer target
/// reachable using all of them.
pub fn gen_countdown<R: Rng + ?Sized>(
    rng: &mut R,
    lo: i64,
    hi: i64,
    count: usize,
    style: PromptStyle,
) -> Result<CountdownInstance> {
    if lo < 1 || lo > hi {
        return Err(Error::Config(format!(
            "operand range {lo}..={hi} must be positive and non-empty"
        )));
    }
    if count == 0 || count > MAX_OPERANDS {
        return Err(Error::Config(format!(
            "operand count must lie in 1..={MAX_OPERANDS}, got {count}"
        )));
    }
    for _ in 0..100 {
        let operands: Vec<i64> = (0..count).map(|_| rng.random_range(lo..=hi)).collect();
        let (_, all) = reachable(&operands);
        let targets: Vec<(i64, &String)> = all
            .iter()
            .filter(|(v, _)| v.is_integer() && *v.numer() > 0)
            .map(|(v, e)| (*v.numer(), e))
            .collect();
        if targets.is_empty() {
            continue;
        }
        let (target, expr) = targets[rng.random_range(0..targets.len())];
        return Ok(CountdownInstance {
            target,
            prompt: countdown_prompt(target, &operands, style),
            solution: strip_outer(expr),
            operands,
        });
    }
    Err(Error::Config("no solvable countdown instance found".into()))
}

fn list(operands: &[i64]) -> String {
    operands.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(", ")
}

pub fn countdown_prompt(target: i64, operands: &[i64], style: PromptStyle) -> String {
    match style {
        PromptStyle::Compact => format!(
            "{}={target}",
            operands.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
        ),
        PromptStyle::Full => format!(
            "Using only the numbers [{}], create an arithmetic expression that evaluates to exactly \
{target}. You may use +, -, *, / and parentheses, and each number at most once.

Respond in this exact format:
<reasoning>
Your step-by-step reasoning
</reasoning>
<answer>
[arithmetic expression]
</answer>


Target: {target} | Numbers: [{}]",
            list(operands),
            list(operands)
        ),
    }
}

/// Parses and evaluates an expression over `+ - * /`, parentheses and
/// non-negative integer literals. Returns the value and the literals used,
/// or `None` if it does not parse, divides by zero, or overflows.
pub fn evaluate(expr: &str) -> Option<(Q, Vec<i64>)> {
    let mut p = Parser {
        s: expr.as_bytes(),
        i: 0,
        used: Vec::new(),
    };
    let v = p.expr()?;
    p.ws();
    (p.i == p.s.len()).then_some((v, p.used))
}

struct Parser<'a> {
    s: &'a [u8],
    i: usize,
    used: Vec<i64>,
}

impl Parser<'_> {
    fn ws(&mut self) {
        while self.i < self.s.len() && self.s[self.i].is_ascii_whitespace() {
            self.i += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.ws();
        self.s.get(self.i).copied()
    }

    fn expr(&mut self) -> Option<Q> {
        let mut v = self.term()?;
        while let Some(op @ (b'+' | b'-')) = self.peek() {
            self.i += 1;
            let r = self.term()?;
            v = if op == b'+' {
                v.checked_add(&r)?
            } else {
                v.checked_sub(&r)?
            };
        }
        Some(v)
    }

    fn term(&mut self) -> Option<Q> {
        let mut v = self.factor()?;
        while let Some(op @ (b'*' | b'/')) = self.peek() {
            self.i += 1;
            let r = self.factor()?;
            v = if op == b'*' {
                v.checked_mul(&r)?
            } else {
                v.checked_div(&r)?
            };
        }
        Some(v)
    }

    fn factor(&mut self) -> Option<Q> {
        match self.peek()? {
            b'(' => {
                self.i += 1;
                let v = self.expr()?;
                (self.peek()? == b')').then_some(())?;
                self.i += 1;
                Some(v)
            }
            c if c.is_ascii_digit() => {
                let start = self.i;
                while self.i < self.s.len() && self.s[self.i].is_ascii_digit() {
                    self.i += 1;
                }
                let n: i64 = std::str::from_utf8(&self.s[start..self.i]).ok()?.parse().ok()?;
                self.used.push(n);
                Some(Q::from_integer(n))
            }
            _ => None,
        }
    }
}

/// 1 iff `answer` evaluates exactly to the target using each provided
/// number at most once.
pub fn reward_countdown(instance: &CountdownInstance, answer: &str) -> f64 {
    let Some((value, used)) = evaluate(answer) else {
        return 0.0;
    };
    let mut pool = instance.operands.clone();
    for n in used {
        match pool.iter().position(|&x| x == n) {
            Some(k) => {
                pool.swap_remove(k);
            }
            None => return 0.0,
        }
    }
    if value == Q::from_integer(instance.target) {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inst(target: i64, operands: &[i64]) -> CountdownInstance {
        CountdownInstance {
            target,
            operands: operands.to_vec(),
            solution: String::new(),
            prompt: String::new(),
        }
    }

    #[test]
    fn worked_examples() {
        assert_eq!(reward_countdown(&inst(67, &[72, 92, 47]), "92 -72 + 47"), 1.0);
        assert_eq!(evaluate("77*73-98").unwrap().0, Q::from_integer(5523));
        assert_eq!(reward_countdown(&inst(94, &[77, 73, 98]), "77*73-98"), 0.0);
        assert_eq!(reward_countdown(&inst(94, &[77, 73, 98]), ""), 0.0);
    }

    #[test]
    fn usage_rules_and_rationals() {
        let i = inst(2, &[4, 2, 3]);
        assert_eq!(reward_countdown(&i, "4-2"), 1.0);
        assert_eq!(reward_countdown(&i, "2"), 1.0);
        assert_eq!(reward_countdown(&i, "4/2"), 1.0);
        assert_eq!(reward_countdown(&i, "2+2-2"), 0.0);
        assert_eq!(reward_countdown(&i, "4/(3-3)"), 0.0);
        assert_eq!(reward_countdown(&inst(3, &[9, 6, 2]), "9/(6/2)"), 1.0);
        assert_eq!(reward_countdown(&inst(3, &[1, 2]), "(1+2"), 0.0);
        assert_eq!(reward_countdown(&inst(3, &[1, 2]), "1+2)"), 0.0);
        assert_eq!(reward_countdown(&inst(3, &[3]), "-3"), 0.0);
        assert_eq!(reward_countdown(&inst(1, &[1]), "99999999999999999999999"), 0.0);
        // 7/2 + 1/2 = 4 needs exact fractions
        assert_eq!(reward_countdown(&inst(4, &[7, 2, 1, 2]), "7/2+1/2"), 1.0);
    }

    #[test]
    fn single_operand_is_its_own_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = gen_countdown(&mut rng, 5, 5, 1, PromptStyle::Compact).unwrap();
        assert_eq!((c.target, c.solution.as_str()), (5, "5"));
        assert_eq!(c.prompt, "5=5");
    }

    #[test]
    fn generated_instances_are_solvable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let c = gen_countdown(&mut rng, 1, 30, 3, PromptStyle::Full).unwrap();
            assert_eq!(reward_countdown(&c, &c.solution), 1.0, "{c:?}");
            assert!(c.target > 0);
        }
        assert!(gen_countdown(&mut rng, 0, 3, 3, PromptStyle::Compact).is_err());
        assert!(gen_countdown(&mut rng, 1, 3, 0, PromptStyle::Compact).is_err());
    }
}
