use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::vocab::{Token, MASK, PAD};

/// A prompt and a clean completion.
///
/// Pad tokens may appear in the completion; they are never masked and never
/// scored.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    prompt: Vec<Token>,
    completion: Vec<Token>,
}

impl TokenSequence {
    pub fn new(prompt: Vec<Token>, completion: Vec<Token>) -> Result<Self> {
        if completion.is_empty() {
            return Err(domain("completion must hold at least one token"));
        }
        if prompt.contains(&MASK) || completion.contains(&MASK) {
            return Err(domain("clean sequence contains the mask symbol"));
        }
        Ok(Self { prompt, completion })
    }

    pub fn prompt(&self) -> &[Token] {
        &self.prompt
    }

    pub fn completion(&self) -> &[Token] {
        &self.completion
    }

    /// Completion length `L`, pads included.
    pub fn len(&self) -> usize {
        self.completion.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Completion positions that may be masked (everything but pads).
    pub fn eligible(&self) -> Vec<usize> {
        self.completion
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != PAD)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_eligible(&self) -> usize {
        self.completion.iter().filter(|&&t| t != PAD).count()
    }

    /// Prompt followed by the completion with `masked` positions replaced.
    pub fn tokens_with_masks(&self, masked: &[usize]) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.prompt.len() + self.completion.len());
        out.extend_from_slice(&self.prompt);
        out.extend_from_slice(&self.completion);
        let off = self.prompt.len();
        for &p in masked {
            out[off + p] = MASK;
        }
        out
    }
}

/// How a corruption was parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MaskLevel {
    /// Continuous masking rate `t` in (0, 1].
    Rate(f64),
    /// Exactly `l` masked tokens.
    Count(usize),
}

/// A set of masked completion positions, strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskDraw {
    pub level: MaskLevel,
    pub positions: Vec<usize>,
}

impl MaskDraw {
    pub fn count(&self) -> usize {
        self.positions.len()
    }

    /// Checks the draw against a sequence: positions eligible, increasing,
    /// and matching the count in l-form.
    pub fn validate(&self, seq: &TokenSequence) -> Result<()> {
        if self.positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(domain("mask positions must be strictly increasing"));
        }
        if let Some(&p) = self
            .positions
            .iter()
            .find(|&&p| p >= seq.len() || seq.completion[p] == PAD)
        {
            return Err(domain(format!(
                "mask position {p} is not an eligible completion position"
            )));
        }
        match self.level {
            MaskLevel::Count(l) if l != self.positions.len() => Err(domain(format!(
                "l-form draw declares {l} masks but lists {}",
                self.positions.len()
            ))),
            MaskLevel::Rate(t) if !(t > 0.0 && t <= 1.0) => Err(domain(format!("masking rate {t} outside (0, 1]"))),
            _ => Ok(()),
        }
    }
}

/// A completion together with one corruption of it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub sequence: TokenSequence,
    pub draw: MaskDraw,
}

impl MaskedSequence {
    pub fn tokens(&self) -> Vec<Token> {
        self.sequence.tokens_with_masks(&self.draw.positions)
    }
}

/// Masks each eligible completion position independently with probability `t`.
pub fn corrupt_t<R: Rng + ?Sized>(seq: &TokenSequence, t: f64, rng: &mut R) -> Result<MaskedSequence> {
    let draw = draw_t(seq, t, rng)?;
    Ok(MaskedSequence {
        sequence: seq.clone(),
        draw,
    })
}

pub(crate) fn draw_t<R: Rng + ?Sized>(seq: &TokenSequence, t: f64, rng: &mut R) -> Result<MaskDraw> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(domain(format!("masking rate {t} outside (0, 1]")));
    }
    let positions = seq.eligible().into_iter().filter(|_| rng.random::<f64>() < t).collect();
    Ok(MaskDraw {
        level: MaskLevel::Rate(t),
        positions,
    })
}

/// Masks exactly `l` eligible positions, uniformly over all subsets of that size.
pub fn corrupt_l<R: Rng + ?Sized>(seq: &TokenSequence, l: usize, rng: &mut R) -> Result<MaskedSequence> {
    let draw = draw_l(seq, l, rng)?;
    Ok(MaskedSequence {
        sequence: seq.clone(),
        draw,
    })
}

pub(crate) fn draw_l<R: Rng + ?Sized>(seq: &TokenSequence, l: usize, rng: &mut R) -> Result<MaskDraw> {
    let eligible = seq.eligible();
    if l > eligible.len() {
        return Err(domain(format!(
            "cannot mask {l} tokens in a completion with {} eligible positions",
            eligible.len()
        )));
    }
    let mut positions: Vec<usize> = rand::seq::index::sample(rng, eligible.len(), l)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    positions.sort_unstable();
    Ok(MaskDraw {
        level: MaskLevel::Count(l),
        positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn seq(n: usize) -> TokenSequence {
        TokenSequence::new(vec![2, 3], (0..n).map(|i| 2 + (i % 5) as Token).collect()).unwrap()
    }

    #[test]
    fn rejects_masks_and_empty_completions() {
        assert!(TokenSequence::new(vec![2], vec![]).is_err());
        assert!(TokenSequence::new(vec![MASK], vec![2]).is_err());
        assert!(TokenSequence::new(vec![2], vec![3, MASK]).is_err());
    }

    #[test]
    fn rate_one_masks_everything_and_prompt_never() {
        let s = seq(7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = corrupt_t(&s, 1.0, &mut rng).unwrap();
        assert_eq!(m.draw.positions, (0..7).collect::<Vec<_>>());
        let toks = m.tokens();
        assert_eq!(&toks[..2], &[2, 3]);
        assert!(toks[2..].iter().all(|&t| t == MASK));
    }

    #[test]
    fn rate_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(corrupt_t(&seq(3), 0.0, &mut rng).is_err());
        assert!(corrupt_t(&seq(3), 1.5, &mut rng).is_err());
    }

    #[test]
    fn binomial_count_at_half_rate() {
        // 4 sigma of Binomial(10^4, 0.5) is 200
        let s = seq(10_000);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let m = corrupt_t(&s, 0.5, &mut rng).unwrap();
        assert!((4600..=5400).contains(&m.draw.count()), "{}", m.draw.count());
    }

    #[test]
    fn seeded_draws_repeat() {
        let s = seq(20);
        let a = corrupt_t(&s, 0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = corrupt_t(&s, 0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn count_form_extremes_and_errors() {
        let s = seq(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(corrupt_l(&s, 0, &mut rng).unwrap().draw.positions.is_empty());
        assert_eq!(corrupt_l(&s, 5, &mut rng).unwrap().draw.positions, vec![0, 1, 2, 3, 4]);
        assert!(corrupt_l(&s, 6, &mut rng).is_err());
    }

    #[test]
    fn count_form_subsets_are_uniform() {
        let s = seq(4);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 60_000;
        let mut freq: HashMap<Vec<usize>, usize> = HashMap::new();
        for _ in 0..n {
            let d = corrupt_l(&s, 2, &mut rng).unwrap().draw;
            d.validate(&s).unwrap();
            *freq.entry(d.positions).or_default() += 1;
        }
        assert_eq!(freq.len(), 6);
        for (k, c) in freq {
            let f = c as f64 / n as f64;
            assert!((f - 1.0 / 6.0).abs() <= 0.01, "{k:?}: {f}");
        }
    }

    #[test]
    fn pads_are_never_masked() {
        let s = TokenSequence::new(vec![2], vec![3, 4, PAD, PAD]).unwrap();
        assert_eq!(s.eligible(), vec![0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(corrupt_t(&s, 1.0, &mut rng).unwrap().draw.positions, vec![0, 1]);
        assert!(corrupt_l(&s, 3, &mut rng).is_err());
        let bad = MaskDraw {
            level: MaskLevel::Count(1),
            positions: vec![2],
        };
        assert!(bad.validate(&s).is_err());
    }
}
