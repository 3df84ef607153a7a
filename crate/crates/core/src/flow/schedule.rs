use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Discretisation `0 = t_0 < t_1 < ... < t_N = 1` shared by sampling and inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(invalid("time grid needs at least two points"));
        }
        if times[0] != 0.0 || *times.last().unwrap() != 1.0 {
            return Err(invalid("time grid must start at 0 and end at 1"));
        }
        if times.windows(2).any(|w| w[1] <= w[0] || !w[1].is_finite()) {
            return Err(invalid("time grid must be strictly increasing"));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of intervals `N`.
    pub fn num_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Interval `i` as `(t_i, t_{i+1})`.
    pub fn interval(&self, i: usize) -> (f64, f64) {
        (self.times[i], self.times[i + 1])
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = crate::error::Error;

    fn try_from(times: Vec<f64>) -> Result<Self> {
        Self::new(times)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(grid: TimeGrid) -> Self {
        grid.times
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    #[default]
    Uniform,
}

pub fn make_schedule(num_steps: usize, spacing: Spacing) -> Result<TimeGrid> {
    if num_steps < 1 {
        return Err(invalid("num_steps must be at least 1"));
    }
    let times = match spacing {
        Spacing::Uniform => (0..=num_steps)
            .map(|i| i as f64 / num_steps as f64)
            .collect(),
    };
    TimeGrid::new(times)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_schedules() {
        assert_eq!(make_schedule(1, Spacing::Uniform).unwrap().times(), &[0.0, 1.0]);
        assert_eq!(
            make_schedule(4, Spacing::Uniform).unwrap().times(),
            &[0.0, 0.25, 0.5, 0.75, 1.0]
        );
        let g = make_schedule(15, Spacing::Uniform).unwrap();
        assert_eq!(g.times().len(), 16);
        assert_eq!(g.times()[0], 0.0);
        assert_eq!(g.times()[15], 1.0);
        assert!(make_schedule(0, Spacing::Uniform).is_err());
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(TimeGrid::new(vec![0.0]).is_err());
        assert!(TimeGrid::new(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(TimeGrid::new(vec![0.1, 1.0]).is_err());
        assert!(TimeGrid::new(vec![0.0, 0.9]).is_err());
        assert!(serde_json::from_str::<TimeGrid>("[0.0, 0.7, 0.2, 1.0]").is_err());
    }
}
