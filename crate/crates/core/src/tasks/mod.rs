//! Verifiable toy tasks: 4x4 Sudoku and small-number Countdown.
//!
//! Rewards are binary and pure functions of the instance and the decoded
//! completion. Prompts come in two styles: the full instruction text, or a
//! compact encoding that a tiny denoiser can attend over cheaply.

pub mod answer;
pub mod countdown;
pub mod sudoku;

use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use answer::extract_answer;
pub use countdown::{gen_countdown, reward_countdown, CountdownInstance};
pub use sudoku::{gen_sudoku, reward_sudoku, SudokuInstance};

use crate::error::{Error, Result};
use crate::nn::checkpoint::write_atomic;
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStyle {
    /// Instance data only, e.g. the 16-digit puzzle.
    #[default]
    Compact,
    /// Full instruction text asking for a tagged answer.
    Full,
}

/// How the answer is located in a completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerFormat {
    /// The whole completion, trimmed, is the answer.
    #[default]
    Bare,
    /// The answer sits between `<answer>` tags.
    Tagged,
}

impl AnswerFormat {
    pub fn extract(self, completion: &str) -> Option<String> {
        match self {
            AnswerFormat::Bare => Some(completion.trim().to_string()),
            AnswerFormat::Tagged => extract_answer(completion),
        }
    }

    /// Wraps a reference answer the way a correct completion would present it.
    pub fn render(self, answer: &str) -> String {
        match self {
            AnswerFormat::Bare => answer.to_string(),
            AnswerFormat::Tagged => format!("<answer>\n{answer}\n</answer>"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Sudoku,
    Countdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    #[serde(default)]
    pub prompt_style: PromptStyle,
    #[serde(default)]
    pub answer_format: AnswerFormat,
    #[serde(default = "default_givens")]
    pub sudoku_givens: usize,
    #[serde(default = "default_operand_min")]
    pub operand_min: i64,
    #[serde(default = "default_operand_max")]
    pub operand_max: i64,
    #[serde(default = "default_operand_count")]
    pub operand_count: usize,
}

fn default_givens() -> usize {
    10
}
fn default_operand_min() -> i64 {
    1
}
fn default_operand_max() -> i64 {
    20
}
fn default_operand_count() -> usize {
    3
}

impl TaskConfig {
    pub fn sudoku() -> Self {
        Self::new(TaskKind::Sudoku)
    }

    pub fn countdown() -> Self {
        Self::new(TaskKind::Countdown)
    }

    fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            prompt_style: PromptStyle::Compact,
            answer_format: AnswerFormat::Bare,
            sudoku_givens: default_givens(),
            operand_min: default_operand_min(),
            operand_max: default_operand_max(),
            operand_count: default_operand_count(),
        }
    }

    /// Smallest character set covering prompts and answers.
    pub fn vocab(&self) -> Vocab {
        if self.prompt_style == PromptStyle::Full || self.answer_format == AnswerFormat::Tagged {
            return Vocab::ascii();
        }
        match self.kind {
            TaskKind::Sudoku => Vocab::new("01234"),
            TaskKind::Countdown => Vocab::new("0123456789+-*/()=,"),
        }
        .expect("task alphabets are unique")
    }

    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TaskInstance> {
        Ok(match self.kind {
            TaskKind::Sudoku => TaskInstance::Sudoku(gen_sudoku(rng, self.sudoku_givens, self.prompt_style)?),
            TaskKind::Countdown => TaskInstance::Countdown(gen_countdown(
                rng,
                self.operand_min,
                self.operand_max,
                self.operand_count,
                self.prompt_style,
            )?),
        })
    }

    pub fn generate_many<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<TaskInstance>> {
        (0..n).map(|_| self.generate(rng)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case")]
pub enum TaskInstance {
    Sudoku(SudokuInstance),
    Countdown(CountdownInstance),
}

impl TaskInstance {
    pub fn prompt(&self) -> &str {
        match self {
            TaskInstance::Sudoku(s) => &s.prompt,
            TaskInstance::Countdown(c) => &c.prompt,
        }
    }

    /// A reference answer string.
    pub fn solution(&self) -> &str {
        match self {
            TaskInstance::Sudoku(s) => &s.solution,
            TaskInstance::Countdown(c) => &c.solution,
        }
    }

    pub fn reward_answer(&self, answer: &str) -> f64 {
        match self {
            TaskInstance::Sudoku(s) => reward_sudoku(s, answer),
            TaskInstance::Countdown(c) => reward_countdown(c, answer),
        }
    }

    /// Reward of a decoded completion; 0 when no answer can be located.
    pub fn reward(&self, completion: &str, format: AnswerFormat) -> f64 {
        format.extract(completion).map_or(0.0, |a| self.reward_answer(&a))
    }
}

pub fn write_instances(path: &Path, instances: &[TaskInstance]) -> Result<()> {
    let mut out = Vec::new();
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn read_instances(path: &Path) -> Result<Vec<TaskInstance>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn formats_and_rewards() {
        let inst = TaskInstance::Sudoku(SudokuInstance {
            puzzle: "3204003014002001".into(),
            solution: "3214413214232341".into(),
            prompt: String::new(),
        });
        assert_eq!(inst.reward(" 3214413214232341 ", AnswerFormat::Bare), 1.0);
        assert_eq!(inst.reward("3214413214232341", AnswerFormat::Tagged), 0.0);
        let tagged = AnswerFormat::Tagged.render(inst.solution());
        assert_eq!(inst.reward(&tagged, AnswerFormat::Tagged), 1.0);
    }

    #[test]
    fn instance_files_keep_prompts_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut all = TaskConfig::sudoku().generate_many(&mut rng, 3).unwrap();
        let mut cd = TaskConfig::countdown();
        cd.prompt_style = PromptStyle::Full;
        all.extend(cd.generate_many(&mut rng, 3).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inst.jsonl");
        write_instances(&path, &all).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().starts_with("{\"task\":\"sudoku\""));
        assert_eq!(read_instances(&path).unwrap(), all);
    }

    #[test]
    fn compact_vocab_covers_prompts_and_answers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for cfg in [TaskConfig::sudoku(), TaskConfig::countdown()] {
            let v = cfg.vocab();
            for inst in cfg.generate_many(&mut rng, 20).unwrap() {
                v.encode(inst.prompt()).unwrap();
                v.encode(inst.solution()).unwrap();
            }
        }
    }
}
