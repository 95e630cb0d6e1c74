use crate::error::{Error, Result};

/// Descending energy levels E_m = levels[0] > ... > levels[L-1] = E₀ with trapezoid weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyGrid {
    pub levels: Vec<f64>,
    /// steps[l] = levels[l] - levels[l + 1].
    pub steps: Vec<f64>,
    pub weights: Vec<f64>,
}

impl EnergyGrid {
    pub fn from_levels(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::Invalid("energy grid needs at least two levels".into()));
        }
        if levels.iter().any(|e| !e.is_finite() || *e <= 0.0) {
            return Err(Error::Invalid("energy levels must be positive and finite".into()));
        }
        let steps: Vec<f64> = levels.windows(2).map(|w| w[0] - w[1]).collect();
        if steps.iter().any(|h| *h <= 0.0) {
            return Err(Error::Invalid("energy levels must be strictly decreasing".into()));
        }
        let n = levels.len();
        let mut weights = vec![0.0; n];
        for (l, h) in steps.iter().enumerate() {
            weights[l] += 0.5 * h;
            weights[l + 1] += 0.5 * h;
        }
        Ok(EnergyGrid { levels, steps, weights })
    }

    /// `n` uniformly spaced levels from `e_max` down to `e_min`.
    pub fn uniform(e_min: f64, e_max: f64, n: usize) -> Result<Self> {
        if !(e_max > e_min) || n < 2 {
            return Err(Error::Invalid(format!(
                "need E_m > E₀ and at least two levels (E₀={e_min}, E_m={e_max}, n={n})"
            )));
        }
        let h = (e_max - e_min) / (n - 1) as f64;
        let mut levels: Vec<f64> = (0..n).map(|l| e_max - l as f64 * h).collect();
        levels[n - 1] = e_min;
        Self::from_levels(levels)
    }

    /// `n` logarithmically spaced levels from `e_max` down to `e_min`.
    pub fn log_spaced(e_min: f64, e_max: f64, n: usize) -> Result<Self> {
        if !(e_max > e_min) || e_min <= 0.0 || n < 2 {
            return Err(Error::Invalid("log grid needs 0 < E₀ < E_m and n ≥ 2".into()));
        }
        let r = (e_min / e_max).ln() / (n - 1) as f64;
        let mut levels: Vec<f64> = (0..n).map(|l| e_max * (r * l as f64).exp()).collect();
        levels[n - 1] = e_min;
        Self::from_levels(levels)
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn e_max(&self) -> f64 {
        self.levels[0]
    }

    pub fn e_min(&self) -> f64 {
        *self.levels.last().unwrap()
    }

    pub fn width(&self) -> f64 {
        self.e_max() - self.e_min()
    }

    /// Trapezoid quadrature of `f` over I.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.levels.iter().zip(&self.weights).map(|(e, w)| w * f(*e)).sum()
    }
}
