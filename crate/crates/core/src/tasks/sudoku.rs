//! 4x4 Sudoku: generation with a certified unique solution, prompts, and the
//! exact verifier.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PromptStyle;
use crate::error::{Error, Result};

pub const CELLS: usize = 16;
/// Fewest givens that can pin down a unique 4x4 solution.
pub const MIN_GIVENS: usize = 4;

pub type Grid = [u8; CELLS];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SudokuInstance {
    /// Row-major digits with `0` for empty cells.
    pub puzzle: String,
    pub solution: String,
    pub prompt: String,
}

fn peers(cell: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (cell / 4, cell % 4);
    let (br, bc) = (r / 2 * 2, c / 2 * 2);
    (0..CELLS).filter(move |&o| {
        let (orow, ocol) = (o / 4, o % 4);
        o != cell && (orow == r || ocol == c || (orow / 2 * 2 == br && ocol / 2 * 2 == bc))
    })
}

fn allowed(grid: &Grid, cell: usize, d: u8) -> bool {
    peers(cell).all(|o| grid[o] != d)
}

/// Counts completions of `grid`, stopping once `limit` are found.
pub fn count_solutions(grid: &Grid, limit: usize) -> usize {
    let mut g = *grid;
    let mut found = 0;
    count_rec(&mut g, limit, &mut found);
    found
}

fn count_rec(g: &mut Grid, limit: usize, found: &mut usize) {
    let Some(cell) = g.iter().position(|&d| d == 0) else {
        *found += 1;
        return;
    };
    for d in 1..=4 {
        if allowed(g, cell, d) {
            g[cell] = d;
            count_rec(g, limit, found);
            g[cell] = 0;
            if *found >= limit {
                return;
            }
        }
    }
}

/// The unique completion of `grid`, if there is exactly one.
pub fn solve_unique(grid: &Grid) -> Option<Grid> {
    if count_solutions(grid, 2) != 1 {
        return None;
    }
    let mut g = *grid;
    fill(&mut g, &mut |_| [1, 2, 3, 4]).then_some(g)
}

fn fill(g: &mut Grid, order: &mut dyn FnMut(usize) -> [u8; 4]) -> bool {
    let Some(cell) = g.iter().position(|&d| d == 0) else {
        return true;
    };
    for d in order(cell) {
        if allowed(g, cell, d) {
            g[cell] = d;
            if fill(g, order) {
                return true;
            }
            g[cell] = 0;
        }
    }
    false
}

/// True when every row, column and box holds 1..4 exactly once.
pub fn is_valid_solution(grid: &Grid) -> bool {
    grid.iter().all(|&d| (1..=4).contains(&d)) && (0..CELLS).all(|c| allowed(grid, c, grid[c]))
}

pub fn parse_grid(s: &str) -> Option<Grid> {
    let bytes = s.as_bytes();
    if bytes.len() != CELLS {
        return None;
    }
    let mut g = [0u8; CELLS];
    for (cell, &b) in g.iter_mut().zip(bytes) {
        if !(b'0'..=b'4').contains(&b) {
            return None;
        }
        *cell = b - b'0';
    }
    Some(g)
}

pub fn grid_string(g: &Grid) -> String {
    g.iter().map(|d| char::from(b'0' + d)).collect()
}

/// A random puzzle with `givens` filled cells and a unique solution.
pub fn gen_sudoku<R: Rng + ?Sized>(rng: &mut R, givens: usize, style: PromptStyle) -> Result<SudokuInstance> {
    if !(MIN_GIVENS..=CELLS).contains(&givens) {
        return Err(Error::Config(format!(
            "sudoku givens must lie in {MIN_GIVENS}..={CELLS}, got {givens}"
        )));
    }
    for _ in 0..1000 {
        let mut solution = [0u8; CELLS];
        fill(&mut solution, &mut |_| {
            let mut d = [1, 2, 3, 4];
            d.shuffle(rng);
            d
        });
        let mut puzzle = solution;
        let mut order: Vec<usize> = (0..CELLS).collect();
        order.shuffle(rng);
        let mut filled = CELLS;
        for cell in order {
            if filled == givens {
                break;
            }
            let keep = puzzle[cell];
            puzzle[cell] = 0;
            if count_solutions(&puzzle, 2) == 1 {
                filled -= 1;
            } else {
                puzzle[cell] = keep;
            }
        }
        if filled == givens {
            let puzzle = grid_string(&puzzle);
            return Ok(SudokuInstance {
                prompt: sudoku_prompt(&puzzle, style),
                puzzle,
                solution: grid_string(&solution),
            });
        }
    }
    Err(Error::Config(format!(
        "could not reach {givens} givens with a unique solution"
    )))
}

/// Instance text in the requested style.
pub fn sudoku_prompt(puzzle: &str, style: PromptStyle) -> String {
    match style {
        PromptStyle::Compact => puzzle.to_string(),
        PromptStyle::Full => format!(
            "Please solve the following 4x4 Sudoku puzzle. The puzzle is provided as a 16-character \
string reading left-to-right, top-to-bottom, where '0' represents empty cells.

**Rules:**
- Fill empty cells with digits 1-4.
- Each row must contain digits 1-4 exactly once.
- Each column must contain digits 1-4 exactly once.
- Each 2x2 box must contain digits 1-4 exactly once.

**Important:** Your solution must be a COMPLETE 16-character string with only the digits 1-4, \
representing your final solved grid.

Respond in this exact format:
<reasoning>
Your step-by-step solving process
</reasoning>
<answer>
[16-character solution string with no spaces or separators]
</answer>


Now, solve the following Sudoku puzzle: {puzzle}"
        ),
    }
}

/// 1 iff `answer` is a complete valid grid agreeing with every given.
pub fn reward_sudoku(instance: &SudokuInstance, answer: &str) -> f64 {
    let (Some(puzzle), Some(grid)) = (parse_grid(&instance.puzzle), parse_grid(answer)) else {
        return 0.0;
    };
    let consistent = puzzle.iter().zip(&grid).all(|(&p, &a)| p == 0 || p == a);
    if consistent && is_valid_solution(&grid) {
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

    fn instance(puzzle: &str) -> SudokuInstance {
        SudokuInstance {
            puzzle: puzzle.into(),
            solution: String::new(),
            prompt: String::new(),
        }
    }

    #[test]
    fn worked_example_scores_one() {
        let inst = instance("3204003014002001");
        assert_eq!(reward_sudoku(&inst, "3214413214232341"), 1.0);
        assert_eq!(reward_sudoku(&inst, "321441321423234"), 0.0);
        assert_eq!(reward_sudoku(&inst, ""), 0.0);
    }

    #[test]
    fn violating_a_given_scores_zero() {
        // a valid grid (digits 1 and 2 swapped everywhere) that contradicts givens
        let swapped = "3124423124131342";
        assert!(is_valid_solution(&parse_grid(swapped).unwrap()));
        assert_eq!(reward_sudoku(&instance("3204003014002001"), swapped), 0.0);
    }

    #[test]
    fn full_board_is_its_own_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inst = gen_sudoku(&mut rng, 16, PromptStyle::Compact).unwrap();
        assert_eq!(inst.puzzle, inst.solution);
        assert_eq!(inst.prompt, inst.puzzle);
    }

    #[test]
    fn generated_puzzles_are_unique_and_verified() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for givens in [4, 6, 8, 12] {
            for _ in 0..50 {
                let inst = gen_sudoku(&mut rng, givens, PromptStyle::Full).unwrap();
                let p = parse_grid(&inst.puzzle).unwrap();
                assert_eq!(p.iter().filter(|&&d| d != 0).count(), givens);
                assert_eq!(solve_unique(&p).map(|g| grid_string(&g)), Some(inst.solution.clone()));
                assert_eq!(reward_sudoku(&inst, &inst.solution), 1.0);
                assert!(inst.prompt.ends_with(&inst.puzzle));
            }
        }
        assert!(gen_sudoku(&mut rng, 3, PromptStyle::Compact).is_err());
        assert!(gen_sudoku(&mut rng, 17, PromptStyle::Compact).is_err());
    }
}
