use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::{self, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    L1,
    L2,
    Sfr,
    Sw,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::L1, Metric::L2, Metric::Sfr, Metric::Sw];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::L1 => "l1",
            Metric::L2 => "l2",
            Metric::Sfr => "sfr",
            Metric::Sw => "sw",
        }
    }
}

fn same_len(x: &[f64], m: &[f64]) -> Result<()> {
    if x.len() != m.len() {
        return Err(Error::ShapeMismatch);
    }
    Ok(())
}

/// Mean absolute difference.
pub fn metric_l1(x: &[f64], m: &[f64]) -> Result<f64> {
    same_len(x, m)?;
    if x.is_empty() {
        return Ok(0.0);
    }
    Ok(x.iter().zip(m).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

/// Mean squared difference of the whitened vectors.
pub fn metric_l2_whitened(x: &[f64], m: &[f64]) -> Result<f64> {
    same_len(x, m)?;
    let wx = numerics::whiten(x)?;
    let wm = numerics::whiten(m)?;
    Ok(wx.iter().zip(&wm).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// Fraction of coordinates whose signs disagree; `sign(0) = +1`.
pub fn metric_sfr(x: &[f64], m: &[f64]) -> Result<f64> {
    same_len(x, m)?;
    if x.is_empty() {
        return Ok(0.0);
    }
    let flips = x.iter().zip(m).filter(|(a, b)| (**a >= 0.0) != (**b >= 0.0)).count();
    Ok(flips as f64 / x.len() as f64)
}

/// Coordinate-distribution Wasserstein distance (the one-direction reading).
pub fn metric_sw(x: &[f64], m: &[f64]) -> Result<f64> {
    numerics::wasserstein1d(x, m)
}

/// Fixed set of seeded unit directions for the projected sliced distance.
#[derive(Debug, Clone, PartialEq)]
pub struct SwProjector {
    directions: Vec<Vec<f64>>,
}

impl SwProjector {
    pub fn new(dim: usize, n_proj: usize, stream: RngStream) -> Self {
        let mut rng = stream.rng();
        Self { directions: (0..n_proj).map(|_| rng.unit_vector(dim)).collect() }
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.directions.first().map_or(0, Vec::len)
    }
}

/// Mean over directions of the 1-D transport between the projected rows of
/// `x` and `m` (both `n x dim`).
pub fn metric_sw_projected(x: &Matrix, m: &Matrix, proj: &SwProjector) -> Result<f64> {
    if x.shape() != m.shape() || x.cols() != proj.dim() {
        return Err(Error::ShapeMismatch);
    }
    if proj.is_empty() {
        return Err(Error::InvalidParameter("projector has no directions"));
    }
    let mut total = 0.0;
    for d in &proj.directions {
        let px: Vec<f64> = (0..x.rows()).map(|r| numerics::dot(x.row(r), d)).collect();
        let pm: Vec<f64> = (0..m.rows()).map(|r| numerics::dot(m.row(r), d)).collect();
        total += numerics::wasserstein1d(&px, &pm)?;
    }
    Ok(total / proj.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_examples() {
        assert_eq!(metric_l1(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(metric_l1(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 1.5);
        assert_eq!(metric_l1(&[-1.0, 1.0], &[1.0, -1.0]).unwrap(), 2.0);
        assert_eq!(metric_l1(&[1.0], &[1.0, 2.0]), Err(Error::ShapeMismatch));
    }

    #[test]
    fn l2_examples() {
        assert_eq!(metric_l2_whitened(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!((metric_l2_whitened(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(metric_l2_whitened(&[2.0, 2.0], &[7.0, 7.0]).unwrap(), 0.0);
        assert_eq!(metric_l2_whitened(&[2.0], &[7.0]), Err(Error::DegenerateVector));
    }

    #[test]
    fn sfr_examples() {
        assert_eq!(metric_sfr(&[1.0, -1.0], &[1.0, -1.0]).unwrap(), 0.0);
        assert!((metric_sfr(&[1.0, -1.0, 2.0], &[1.0, 1.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(metric_sfr(&[-0.5, 3.0, -2.0], &[0.5, -3.0, 2.0]).unwrap(), 1.0);
        assert_eq!(metric_sfr(&[0.0], &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn sw_examples() {
        assert_eq!(metric_sw(&[3.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(metric_sw(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(metric_sw(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn projected_sw_is_zero_on_equal_batches() {
        let mut rng = RngStream::new(3, "p").rng();
        let x = Matrix::random_normal(6, 4, 1.0, &mut rng);
        let proj = SwProjector::new(4, 8, RngStream::new(3, "dirs"));
        assert_eq!(metric_sw_projected(&x, &x, &proj).unwrap(), 0.0);
        let shifted = x.map(|v| v + 1.0);
        assert!(metric_sw_projected(&x, &shifted, &proj).unwrap() > 0.0);
    }
}
