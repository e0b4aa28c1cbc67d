//! Distribution-aware non-uniform quantization.
//!
//! Values are divided by a scale (ideally their standard deviation) and
//! mapped to the nearest entry of a fixed level table that minimizes the
//! expected squared error for a standard normal input. Level `r` owns the
//! half-open cell `[u_r, u_{r+1})` whose interior edges are midpoints of
//! adjacent levels; the outermost cells extend to `±inf`.

mod codec;

pub use codec::{
    dequantize, pack_codes, quantize, uniform_quantize_absmax, unpack_codes, QuantizedBlock,
    WIRE_HEADER_BYTES,
};

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

/// Bit-widths with optimized level tables.
pub const SUPPORTED_BITS: [u8; 3] = [1, 2, 4];

/// Lloyd-Max stops once no level moves by more than this.
pub const LLOYD_TOLERANCE: f64 = 1e-9;
pub const LLOYD_MAX_ITERATIONS: usize = 10_000;

pub const REFERENCE_LEVELS_1BIT: [f64; 2] = [-0.798, 0.798];
pub const REFERENCE_LEVELS_2BIT: [f64; 4] = [-1.224, 0.0, 0.765, 1.724];
pub const REFERENCE_LEVELS_4BIT: [f64; 16] = [
    -2.654, -1.974, -1.508, -1.149, -0.834, -0.544, -0.269, 0.0, 0.230, 0.465, 0.708, 0.966,
    1.248, 1.568, 1.968, 2.649,
];

/// Published reference table for a bit-width, if there is one.
pub fn reference_levels(bits: u8) -> Option<&'static [f64]> {
    match bits {
        1 => Some(&REFERENCE_LEVELS_1BIT),
        2 => Some(&REFERENCE_LEVELS_2BIT),
        4 => Some(&REFERENCE_LEVELS_4BIT),
        _ => None,
    }
}

/// Error function, accurate to a few ulp.
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `P(a <= X < b)` for `X ~ N(0, 1)`, using the complementary function in
/// the tails to keep relative accuracy.
pub fn normal_mass(a: f64, b: f64) -> f64 {
    let (sa, sb) = (a * FRAC_1_SQRT_2, b * FRAC_1_SQRT_2);
    if a >= 0.0 {
        0.5 * (erfc(sa) - erfc(sb))
    } else if b <= 0.0 {
        0.5 * (erfc(-sb) - erfc(-sa))
    } else {
        0.5 * (erf(sb) - erf(sa))
    }
}

/// `E[X | a <= X < b]` for `X ~ N(0, 1)`.
pub fn normal_centroid(a: f64, b: f64) -> f64 {
    (normal_pdf(a) - normal_pdf(b)) / normal_mass(a, b)
}

/// An ascending level table together with its decision boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantLevels {
    bits: u8,
    levels: Vec<f64>,
    boundaries: Vec<f64>,
    zero_pinned: bool,
}

impl QuantLevels {
    /// Builds a table from `2^B` strictly ascending finite levels (`B <= 8`).
    pub fn from_levels(levels: Vec<f64>) -> Result<Self> {
        let n = levels.len();
        if n == 0 || !n.is_power_of_two() || n > 256 {
            return Err(Error::arg(format!(
                "level table needs 2^B entries with B <= 8, got {n}"
            )));
        }
        if levels.iter().any(|q| !q.is_finite()) {
            return Err(Error::arg("level table contains a non-finite entry"));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg("levels must be strictly ascending"));
        }
        let boundaries = levels.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let zero_pinned = levels.contains(&0.0);
        Ok(QuantLevels {
            bits: n.trailing_zeros() as u8,
            levels,
            boundaries,
            zero_pinned,
        })
    }

    /// `2^B` equally spaced levels on `[-1, 1]`.
    pub fn uniform(bits: u8) -> Result<Self> {
        if bits == 0 || bits > 8 {
            return Err(Error::config(format!("unsupported bit-width {bits}")));
        }
        let n = 1usize << bits;
        let top = (n - 1) as f64;
        QuantLevels::from_levels((0..n).map(|k| (2.0 * k as f64 - top) / top).collect())
    }

    /// The published reference table for `bits` as a `QuantLevels`.
    pub fn reference(bits: u8) -> Option<Self> {
        reference_levels(bits).map(|l| QuantLevels::from_levels(l.to_vec()).expect("valid table"))
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Interior cell edges, `levels.len() - 1` of them.
    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn is_zero_pinned(&self) -> bool {
        self.zero_pinned
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Cell `[lo, hi)` owned by level `r`.
    pub fn cell(&self, r: usize) -> (f64, f64) {
        let lo = if r == 0 {
            f64::NEG_INFINITY
        } else {
            self.boundaries[r - 1]
        };
        let hi = self.boundaries.get(r).copied().unwrap_or(f64::INFINITY);
        (lo, hi)
    }

    /// Index of the cell containing `x`; a value on an edge belongs to the upper cell.
    pub fn index_of(&self, x: f64) -> usize {
        self.boundaries.partition_point(|&u| u <= x)
    }
}

/// Expected squared error `E[(X - Q(X))^2]` for `X ~ N(0, 1)`, in closed form.
///
/// Per cell `[a, b)` with level `q` the integral of `(x - q)^2 p(x)` is
///
/// ```text
/// ((2q - b) e^{-b^2/2} - (2q - a) e^{-a^2/2}) / sqrt(2 pi)
///     + (q^2 + 1) (erf(b / sqrt 2) - erf(a / sqrt 2)) / 2
/// ```
pub fn expected_error(levels: &QuantLevels) -> f64 {
    // (2q - u) e^{-u^2/2} and erf(u/sqrt2), with their limits at +-inf.
    let edge = |q: f64, u: f64| -> (f64, f64) {
        if u.is_infinite() {
            (0.0, u.signum())
        } else {
            ((2.0 * q - u) * (-0.5 * u * u).exp(), erf(u * FRAC_1_SQRT_2))
        }
    };
    let inv_sqrt_2pi = 1.0 / (2.0 * PI).sqrt();
    (0..levels.len())
        .map(|r| {
            let q = levels.levels[r];
            let (a, b) = levels.cell(r);
            let (ga, ea) = edge(q, a);
            let (gb, eb) = edge(q, b);
            inv_sqrt_2pi * (gb - ga) + 0.5 * (q * q + 1.0) * (eb - ea)
        })
        .sum()
}

fn check_bits(bits: u8) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "unsupported bit-width {bits}; expected one of {SUPPORTED_BITS:?}"
        )))
    }
}

fn initial_levels(bits: u8, pin_zero: bool) -> (Vec<f64>, Option<usize>) {
    let n = 1usize << bits;
    if bits == 1 || !pin_zero {
        let step = 4.0 / n as f64;
        let levels = (0..n).map(|k| -2.0 + step * (k as f64 + 0.5)).collect();
        return (levels, None);
    }
    // One level fixed at zero: 2^(B-1) - 1 negative levels, 2^(B-1) positive.
    let half = n / 2;
    let step = 2.5 / half as f64;
    let mut levels: Vec<f64> = (1..half).rev().map(|k| -step * k as f64).collect();
    let zero = levels.len();
    levels.push(0.0);
    levels.extend((1..=half).map(|k| step * k as f64));
    (levels, Some(zero))
}

/// Level table minimizing [`expected_error`] for a standard normal input.
///
/// Solved by Lloyd-Max iteration: every free level moves to the conditional
/// mean of its cell, cells are rebuilt from midpoints, until no level moves
/// by more than [`LLOYD_TOLERANCE`]. With `pin_zero` (ignored for 1 bit,
/// where both levels stay free) one level is held at exactly zero and the
/// remaining `2^B - 1` are split with one more on the positive side.
pub fn optimize_levels(bits: u8, pin_zero: bool) -> Result<QuantLevels> {
    check_bits(bits)?;
    let (mut levels, pinned) = initial_levels(bits, pin_zero);
    for _ in 0..LLOYD_MAX_ITERATIONS {
        let table = QuantLevels::from_levels(levels.clone())?;
        let mut max_change = 0.0f64;
        for (r, q) in levels.iter_mut().enumerate() {
            if Some(r) == pinned {
                continue;
            }
            let (a, b) = table.cell(r);
            let c = normal_centroid(a, b);
            max_change = max_change.max((c - *q).abs());
            *q = c;
        }
        if max_change < LLOYD_TOLERANCE {
            return QuantLevels::from_levels(levels);
        }
    }
    Err(Error::Numerical(format!(
        "Lloyd-Max for {bits} bits did not converge in {LLOYD_MAX_ITERATIONS} iterations"
    )))
}

/// Exhaustive multi-resolution grid minimization of [`expected_error`] for
/// small tables (`bits <= 2`). Independent of the fixed-point iteration and
/// used to cross-check it. Each stage scans every sorted combination of
/// free levels on a grid around the incumbent, then the step shrinks ten-fold.
pub fn grid_search_levels(bits: u8, pin_zero: bool) -> Result<QuantLevels> {
    if bits == 0 || bits > 2 {
        return Err(Error::config(format!(
            "grid search supports 1 or 2 bits, got {bits}"
        )));
    }
    let n = 1usize << bits;
    let pinned = bits >= 2 && pin_zero;
    let free = if pinned { n - 1 } else { n };
    // Free levels as a vector; the pinned zero (if any) is inserted when
    // assembling the table so that one level stays negative.
    let assemble = |free_levels: &[f64]| -> Option<Vec<f64>> {
        let mut v = free_levels.to_vec();
        if pinned {
            v.insert(1, 0.0);
        }
        v.windows(2).all(|w| w[0] < w[1]).then_some(v)
    };
    let cost = |free_levels: &[f64]| -> f64 {
        assemble(free_levels)
            .and_then(|v| QuantLevels::from_levels(v).ok())
            .map_or(f64::INFINITY, |t| expected_error(&t))
    };

    let mut best = vec![0.0; free];
    let mut best_cost = f64::INFINITY;
    let stages: [(f64, f64, Option<f64>); 5] = [
        (0.05, 0.0, Some(3.0)),
        (0.01, 0.06, None),
        (0.001, 0.012, None),
        (0.0001, 0.0012, None),
        (0.00001, 0.00012, None),
    ];
    for (step, window, range) in stages {
        let axes: Vec<Vec<f64>> = (0..free)
            .map(|i| {
                let (lo, hi) = match range {
                    Some(r) => (-r, r),
                    None => (best[i] - window, best[i] + window),
                };
                let count = ((hi - lo) / step).round() as usize;
                (0..=count).map(|k| lo + step * k as f64).collect()
            })
            .collect();
        let mut idx = vec![0usize; free];
        let mut point = vec![0.0; free];
        'scan: loop {
            for i in 0..free {
                point[i] = axes[i][idx[i]];
            }
            let c = cost(&point);
            if c < best_cost {
                best_cost = c;
                best.copy_from_slice(&point);
            }
            for i in (0..free).rev() {
                idx[i] += 1;
                if idx[i] < axes[i].len() {
                    continue 'scan;
                }
                idx[i] = 0;
            }
            break;
        }
    }
    let levels = assemble(&best)
        .ok_or_else(|| Error::Numerical("grid search found no ordered table".into()))?;
    QuantLevels::from_levels(levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Maclaurin series of erf, summed until terms vanish.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        while term.abs() > 1e-20 {
            n += 1.0;
            term *= -x * x / n;
            sum += term / (2.0 * n + 1.0);
        }
        2.0 / PI.sqrt() * sum
    }

    #[test]
    fn erf_reference_points() {
        assert_eq!(erf(0.0), 0.0);
        assert_abs_diff_eq!(erf(1.0), erf_series(1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(erf(1.0), 0.8427008, epsilon = 1e-7);
        for x in [6.0, 7.5, 20.0] {
            assert_abs_diff_eq!(erf(x), 1.0, epsilon = 1e-7);
            assert_abs_diff_eq!(erf(-x), -1.0, epsilon = 1e-7);
        }
        for x in [0.1, 0.5, 1.7, 2.3, 3.1] {
            assert_abs_diff_eq!(erf(x), erf_series(x), epsilon = 1e-12);
            assert_eq!(erf(-x), -erf(x));
        }
    }

    #[test]
    fn single_level_error_is_unit_variance() {
        let t = QuantLevels::from_levels(vec![0.0]).unwrap();
        assert_eq!(t.bits(), 0);
        assert_abs_diff_eq!(expected_error(&t), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn one_bit_optimum_is_analytic() {
        let t = optimize_levels(1, true).unwrap();
        let a = (2.0 / PI).sqrt();
        assert!(!t.is_zero_pinned());
        assert_abs_diff_eq!(t.levels()[0], -a, epsilon = 1e-9);
        assert_abs_diff_eq!(t.levels()[1], a, epsilon = 1e-9);
        assert_abs_diff_eq!(expected_error(&t), 1.0 - 2.0 / PI, epsilon = 1e-12);
    }

    #[test]
    fn two_bit_pinned_matches_reference() {
        let t = optimize_levels(2, true).unwrap();
        assert!(t.is_zero_pinned());
        assert_eq!(t.levels()[1], 0.0);
        for (a, b) in t.levels().iter().zip(REFERENCE_LEVELS_2BIT) {
            assert_abs_diff_eq!(*a, b, epsilon = 0.005);
        }
    }

    #[test]
    fn unpinned_tables_are_symmetric() {
        for bits in [2, 4] {
            let t = optimize_levels(bits, false).unwrap();
            assert!(!t.is_zero_pinned());
            let l = t.levels();
            for i in 0..l.len() {
                assert_abs_diff_eq!(l[i], -l[l.len() - 1 - i], epsilon = 1e-7);
            }
        }
        // Classic 4-level Lloyd-Max values for a unit Gaussian.
        let l = optimize_levels(2, false).unwrap();
        assert_abs_diff_eq!(l.levels()[3], 1.510, epsilon = 1e-3);
        assert_abs_diff_eq!(l.levels()[2], 0.4528, epsilon = 1e-3);
    }

    #[test]
    fn unsupported_bits() {
        assert!(matches!(optimize_levels(3, true), Err(Error::Config(_))));
        assert!(matches!(optimize_levels(0, false), Err(Error::Config(_))));
    }

    #[test]
    fn grid_search_agrees_with_lloyd() {
        for (bits, pin) in [(1, true), (2, true)] {
            let g = grid_search_levels(bits, pin).unwrap();
            let l = optimize_levels(bits, pin).unwrap();
            for (a, b) in g.levels().iter().zip(l.levels()) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-3);
            }
            assert!(expected_error(&g) >= expected_error(&l) - 1e-12);
        }
    }

    #[test]
    fn index_of_uses_half_open_cells() {
        let t = QuantLevels::from_levels(REFERENCE_LEVELS_2BIT.to_vec()).unwrap();
        assert_eq!(t.index_of(0.3), 1);
        assert_eq!(t.index_of(1e6), 3);
        assert_eq!(t.index_of(-1e6), 0);
        let mid = t.boundaries()[1];
        assert_eq!(t.index_of(mid), 2);
        assert_eq!(t.index_of(f64::from_bits(mid.to_bits() - 1)), 1);
    }

    #[test]
    fn from_levels_validation() {
        assert!(QuantLevels::from_levels(vec![0.0, 1.0, 2.0]).is_err());
        assert!(QuantLevels::from_levels(vec![1.0, 0.0]).is_err());
        assert!(QuantLevels::from_levels(vec![]).is_err());
        let u = QuantLevels::uniform(2).unwrap();
        assert_eq!(u.levels(), &[-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0]);
    }
}
