//! Tensor grids on `[0, a_max] x [0, x_max]` with trapezoid weights.

use crate::error::{Error, Result};

/// Smallest admissible number of nodes per axis.
pub const MIN_NODES: usize = 16;

/// Uniform tensor grid in age and content.
///
/// Nodes include both end points, so `dx = x_max / (nx - 1)`. Every integral
/// in the crate uses the trapezoid weights of this grid, which are also the
/// widths of the dual cells used by the transport scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    x_max: f64,
    a_max: f64,
    nx: usize,
    na: usize,
}

impl Grid {
    pub fn new(x_max: f64, nx: usize, a_max: f64, na: usize) -> Result<Self> {
        if !(x_max.is_finite() && x_max > 0.0) {
            return Err(Error::param("x_max", "must be positive and finite"));
        }
        if !(a_max.is_finite() && a_max > 0.0) {
            return Err(Error::param("a_max", "must be positive and finite"));
        }
        if nx < MIN_NODES {
            return Err(Error::param(
                "nx",
                format!("needs at least {MIN_NODES} nodes"),
            ));
        }
        if na < MIN_NODES {
            return Err(Error::param(
                "na",
                format!("needs at least {MIN_NODES} nodes"),
            ));
        }
        Ok(Grid {
            x_max,
            a_max,
            nx,
            na,
        })
    }

    /// Grid whose age step is fixed and whose age range covers `a_max`.
    pub fn with_age_step(x_max: f64, nx: usize, a_max: f64, da: f64) -> Result<Self> {
        if !(da > 0.0) {
            return Err(Error::param("da", "must be positive"));
        }
        let cells = (a_max / da - 1e-9).ceil().max(1.0) as usize;
        Grid::new(x_max, nx, cells as f64 * da, cells + 1)
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn a_max(&self) -> f64 {
        self.a_max
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn na(&self) -> usize {
        self.na
    }

    pub fn dx(&self) -> f64 {
        self.x_max / (self.nx - 1) as f64
    }

    pub fn da(&self) -> f64 {
        self.a_max / (self.na - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        if i + 1 == self.nx {
            self.x_max
        } else {
            i as f64 * self.dx()
        }
    }

    pub fn a(&self, k: usize) -> f64 {
        if k + 1 == self.na {
            self.a_max
        } else {
            k as f64 * self.da()
        }
    }

    pub fn x_nodes(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    pub fn a_nodes(&self) -> Vec<f64> {
        (0..self.na).map(|k| self.a(k)).collect()
    }

    pub fn wx(&self, i: usize) -> f64 {
        trapezoid(i, self.nx, self.dx())
    }

    pub fn wa(&self, k: usize) -> f64 {
        trapezoid(k, self.na, self.da())
    }

    pub fn x_weights(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.wx(i)).collect()
    }

    pub fn a_weights(&self) -> Vec<f64> {
        (0..self.na).map(|k| self.wa(k)).collect()
    }

    /// Same domain with every cell split in two.
    pub fn refined(&self) -> Grid {
        Grid {
            nx: 2 * self.nx - 1,
            na: 2 * self.na - 1,
            ..*self
        }
    }

    /// Index of the node at or just below `x`, clamped to the last cell.
    pub fn x_cell(&self, x: f64) -> usize {
        let i = (x / self.dx()).floor();
        if i <= 0.0 {
            0
        } else {
            (i as usize).min(self.nx - 2)
        }
    }

    /// Value at `x` of the piecewise-linear "hat" basis function of node `i`.
    pub fn hat(&self, i: usize, x: f64) -> f64 {
        let h = self.dx();
        (1.0 - (x - self.x(i)).abs() / h).max(0.0)
    }

    /// `int_0^z hat_i(x) dx` for `z` in `[0, x_max]`.
    pub fn hat_cumulative(&self, i: usize, z: f64) -> f64 {
        let h = self.dx();
        let xi = self.x(i);
        let left = if i == 0 { xi } else { xi - h };
        let right = if i + 1 == self.nx { xi } else { xi + h };
        let mut total = 0.0;
        if i > 0 {
            // rising half on [left, xi]
            let t = z.clamp(left, xi) - left;
            total += t * t / (2.0 * h);
        }
        if i + 1 < self.nx && z > xi {
            let t = right - z.min(right);
            total += h / 2.0 - t * t / (2.0 * h);
        }
        total
    }

    /// Trapezoid integral of a field stored age-major.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.nx * self.na);
        let wx = self.x_weights();
        let mut total = 0.0;
        for k in 0..self.na {
            let row = &values[k * self.nx..(k + 1) * self.nx];
            let s: f64 = row.iter().zip(&wx).map(|(v, w)| v * w).sum();
            total += self.wa(k) * s;
        }
        total
    }

    /// Trapezoid integral in content of one profile.
    pub fn integrate_x(&self, profile: &[f64]) -> f64 {
        profile
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.wx(i))
            .sum()
    }
}

fn trapezoid(i: usize, n: usize, h: f64) -> f64 {
    if i == 0 || i + 1 == n {
        0.5 * h
    } else {
        h
    }
}

/// Scalar field sampled on a [`Grid`], stored age-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: Grid) -> Self {
        Field {
            grid,
            values: vec![0.0; grid.nx() * grid.na()],
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.nx() * grid.na());
        for k in 0..grid.na() {
            let a = grid.a(k);
            for i in 0..grid.nx() {
                values.push(f(a, grid.x(i)));
            }
        }
        Field { grid, values }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.nx() * grid.na() {
            return Err(Error::param(
                "field",
                format!(
                    "expected {} values, got {}",
                    grid.nx() * grid.na(),
                    values.len()
                ),
            ));
        }
        Ok(Field { grid, values })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn at(&self, k: usize, i: usize) -> f64 {
        self.values[k * self.grid.nx() + i]
    }

    pub fn set(&mut self, k: usize, i: usize, v: f64) {
        let nx = self.grid.nx();
        self.values[k * nx + i] = v;
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let nx = self.grid.nx();
        &self.values[k * nx..(k + 1) * nx]
    }

    pub fn integral(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    /// `int int w(a, x) f(a, x)` for a weight given pointwise.
    pub fn weighted_integral(&self, mut w: impl FnMut(f64, f64) -> f64) -> f64 {
        let g = &self.grid;
        let mut total = 0.0;
        for k in 0..g.na() {
            let a = g.a(k);
            let mut s = 0.0;
            for i in 0..g.nx() {
                s += g.wx(i) * w(a, g.x(i)) * self.at(k, i);
            }
            total += g.wa(k) * s;
        }
        total
    }

    /// `int int self * other`.
    pub fn dot(&self, other: &Field) -> f64 {
        let prod: Vec<f64> = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .collect();
        self.grid.integrate(&prod)
    }

    pub fn scale(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
    }

    pub fn scaled(&self, c: f64) -> Field {
        let mut out = self.clone();
        out.scale(c);
        out
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_lengths() {
        let g = Grid::new(3.0, 31, 40.0, 81).unwrap();
        let sx: f64 = g.x_weights().iter().sum();
        let sa: f64 = g.a_weights().iter().sum();
        assert!((sx - 3.0).abs() < 1e-12);
        assert!((sa - 40.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_small_grids() {
        assert!(Grid::new(1.0, 8, 1.0, 32).is_err());
        assert!(Grid::new(1.0, 32, 1.0, 15).is_err());
    }

    #[test]
    fn hat_cumulative_matches_weights() {
        let g = Grid::new(1.0, 17, 1.0, 17).unwrap();
        for i in 0..g.nx() {
            let full = g.hat_cumulative(i, 1.0);
            assert!((full - g.wx(i)).abs() < 1e-14, "node {i}");
            assert_eq!(g.hat_cumulative(i, 0.0), 0.0);
        }
        // partition of unity: sum of cumulative integrals equals z
        for z in [0.0, 0.013, 0.5, 0.77, 1.0] {
            let s: f64 = (0..g.nx()).map(|i| g.hat_cumulative(i, z)).sum();
            assert!((s - z).abs() < 1e-14, "z = {z}");
        }
    }

    #[test]
    fn age_step_constructor_covers_range() {
        let g = Grid::with_age_step(1.0, 16, 2.05, 0.1).unwrap();
        assert!((g.da() - 0.1).abs() < 1e-12);
        assert!(g.a_max() >= 2.05 - 1e-9);
    }
}
