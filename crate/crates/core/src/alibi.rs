//! Linear attention biases (ALiBi), standard and mask-aware.
//!
//! A bias is always `-slope * distance` for an integer distance. The modified
//! form measures distance in visible-key rank rather than raw position, which
//! is exactly what a KV cache holding only the attended tokens produces.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadSlopes {
    slopes: Vec<f64>,
}

impl HeadSlopes {
    pub fn as_slice(&self) -> &[f64] {
        &self.slopes
    }

    pub fn len(&self) -> usize {
        self.slopes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slopes.is_empty()
    }
}

/// Geometric head slopes `2^(-8h / n_heads)` for `h = 1..=n_heads`.
pub fn alibi_slopes(n_heads: usize) -> Result<HeadSlopes> {
    if n_heads == 0 {
        return Err(Error::Config("ALiBi needs at least one head".into()));
    }
    let n = n_heads as f64;
    let slopes = (1..=n_heads)
        .map(|h| 2f64.powf(-8.0 * h as f64 / n))
        .collect();
    Ok(HeadSlopes { slopes })
}

/// `-slope * distance`, with zero distance giving `+0`.
#[inline]
pub fn bias_value<T: Scalar>(slope: f64, distance: usize) -> T {
    if distance == 0 {
        T::zero()
    } else {
        T::lit(-slope * distance as f64)
    }
}

/// Per-(query, key) distances for one head, defined on visible entries only.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalBias {
    len: usize,
    slope: f64,
    distance: Vec<Option<u32>>,
}

impl PositionalBias {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn distance(&self, i: usize, j: usize) -> Option<usize> {
        self.distance[i * self.len + j].map(|d| d as usize)
    }

    pub fn value<T: Scalar>(&self, i: usize, j: usize) -> Option<T> {
        self.distance(i, j).map(|d| bias_value(self.slope, d))
    }

    /// CSV with header `row,col,bias`, visible entries only, row-major.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,bias\n");
        for i in 0..self.len {
            for j in 0..self.len {
                if let Some(b) = self.value::<f64>(i, j) {
                    writeln!(out, "{i},{j},{b}").unwrap();
                }
            }
        }
        out
    }
}

fn check_slope(slope: f64) -> Result<()> {
    if !(slope > 0.0 && slope.is_finite()) {
        return Err(Error::Config(format!("ALiBi slope must be positive, got {slope}")));
    }
    Ok(())
}

/// `-slope * (i - j)` on the causal triangle.
pub fn standard_alibi(length: usize, slope: f64) -> Result<PositionalBias> {
    if length == 0 {
        return Err(Error::EmptyInput("ALiBi of length 0"));
    }
    check_slope(slope)?;
    let distance = (0..length)
        .flat_map(|i| (0..length).map(move |j| (j <= i).then(|| (i - j) as u32)))
        .collect();
    Ok(PositionalBias {
        len: length,
        slope,
        distance,
    })
}

/// Raw positional distance `i - j` restricted to the mask's visible entries,
/// leaving the gaps a sparse mask opens.
pub fn standard_alibi_masked(mask: &AttentionMask, slope: f64) -> Result<PositionalBias> {
    check_slope(slope)?;
    mask.validate_self_attention()?;
    let n = mask.rows();
    let distance = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| mask.is_visible(i, j).then(|| (i - j) as u32))
        .collect();
    Ok(PositionalBias {
        len: n,
        slope,
        distance,
    })
}

/// Rank-distance biases: along each row the visible keys are enumerated in
/// sequence order and the r-th from last gets `-slope * r`.
pub fn modified_alibi(mask: &AttentionMask, slope: f64) -> Result<PositionalBias> {
    check_slope(slope)?;
    if mask.rows() != mask.cols() {
        return Err(Error::Shape("modified ALiBi needs a square mask".into()));
    }
    let n = mask.rows();
    let mut distance = vec![None; n * n];
    for i in 0..n {
        let visible: Vec<usize> = mask.visible_in_row(i).collect();
        if visible.is_empty() {
            return Err(Error::DegenerateRow { row: i });
        }
        let last = visible.len() - 1;
        for (rank, &j) in visible.iter().enumerate() {
            distance[i * n + j] = Some((last - rank) as u32);
        }
    }
    Ok(PositionalBias {
        len: n,
        slope,
        distance,
    })
}
