use crate::error::{Error, Result};
use crate::model::argmax_lowest;

/// A two-player zero-sum game given by the row player's payoffs; the column
/// player receives the negation.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixGame {
    rows: usize,
    cols: usize,
    payoff: Vec<f64>,
}

impl MatrixGame {
    pub fn new(payoff: Vec<Vec<f64>>) -> Result<Self> {
        let rows = payoff.len();
        let cols = payoff.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 || payoff.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("payoff matrix must be non-empty and rectangular"));
        }
        let flat: Vec<f64> = payoff.into_iter().flatten().collect();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("payoff entry".into()));
        }
        Ok(Self {
            rows,
            cols,
            payoff: flat,
        })
    }

    pub fn rock_paper_scissors() -> Self {
        Self::new(vec![vec![0.0, -1.0, 1.0], vec![1.0, 0.0, -1.0], vec![-1.0, 1.0, 0.0]]).expect("valid")
    }

    pub fn matching_pennies() -> Self {
        Self::new(vec![vec![1.0, -1.0], vec![-1.0, 1.0]]).expect("valid")
    }

    /// Built-in games: `rps`, `pennies`, and `dominant` (row action 1
    /// strictly dominates).
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "rps" => Ok(Self::rock_paper_scissors()),
            "pennies" => Ok(Self::matching_pennies()),
            "dominant" => Self::new(vec![vec![0.0, 1.0], vec![2.0, 3.0]]),
            other => Err(Error::Config(format!("unknown game `{other}`"))),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn payoff(&self, i: usize, j: usize) -> f64 {
        self.payoff[i * self.cols + j]
    }

    /// Expected row payoff `p^T A q`.
    pub fn value(&self, p: &[f64], q: &[f64]) -> f64 {
        let mut v = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            for (j, &qj) in q.iter().enumerate() {
                v += pi * qj * self.payoff(i, j);
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixGameResult {
    pub row_strategy: Vec<f64>,
    pub col_strategy: Vec<f64>,
    /// Duality gap `max_i (A q)_i - min_j (p^T A)_j` of the empirical
    /// strategies after each iteration.
    pub exploitability: Vec<f64>,
    pub row_actions: Vec<usize>,
    pub col_actions: Vec<usize>,
}

/// Simultaneous discrete fictitious play: each round both players
/// best-respond to the opponent's empirical action frequencies so far (the
/// first round, with no history, plays action 0), ties going to the lowest
/// action index.
pub fn fp_matrix_game(game: &MatrixGame, iterations: usize) -> Result<MatrixGameResult> {
    if iterations == 0 {
        return Err(Error::invalid("fictitious play needs at least one iteration"));
    }
    let (m, n) = game.shape();
    let mut row_counts = vec![0usize; m];
    let mut col_counts = vec![0usize; n];
    // row_payoff[i] = Σ_j A_ij * col_counts[j]; col_payoff[j] = Σ_i row_counts[i] * A_ij.
    let mut row_payoff = vec![0.0; m];
    let mut col_payoff = vec![0.0; n];
    let mut result = MatrixGameResult {
        row_strategy: Vec::new(),
        col_strategy: Vec::new(),
        exploitability: Vec::with_capacity(iterations),
        row_actions: Vec::with_capacity(iterations),
        col_actions: Vec::with_capacity(iterations),
    };
    for t in 1..=iterations {
        let i = argmax_lowest(&row_payoff);
        let neg: Vec<f64> = col_payoff.iter().map(|v| -v).collect();
        let j = argmax_lowest(&neg);
        row_counts[i] += 1;
        col_counts[j] += 1;
        for (r, v) in row_payoff.iter_mut().enumerate() {
            *v += game.payoff(r, j);
        }
        for (c, v) in col_payoff.iter_mut().enumerate() {
            *v += game.payoff(i, c);
        }
        result.row_actions.push(i);
        result.col_actions.push(j);
        let best_row = row_payoff.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / t as f64;
        let best_col = col_payoff.iter().cloned().fold(f64::INFINITY, f64::min) / t as f64;
        result.exploitability.push(best_row - best_col);
    }
    let total = iterations as f64;
    result.row_strategy = row_counts.iter().map(|&c| c as f64 / total).collect();
    result.col_strategy = col_counts.iter().map(|&c| c as f64 / total).collect();
    Ok(result)
}
