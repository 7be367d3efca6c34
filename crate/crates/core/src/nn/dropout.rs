use ndarray::{Array, Dimension};
use rand::Rng as _;

use crate::error::{PvadError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(PvadError::invalid(format!("dropout rate {p} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<D: Dimension>(shape: D, p: f64, rng: &mut Rng) -> Result<Array<f64, D>> {
    check_rate(p)?;
    let keep = 1.0 / (1.0 - p);
    if p == 0.0 {
        return Ok(Array::from_elem(shape, 1.0));
    }
    Ok(Array::from_shape_simple_fn(shape, || {
        if rng.gen::<f64>() < p {
            0.0
        } else {
            keep
        }
    }))
}

/// Train mode zeroes entries with probability `p` and rescales survivors;
/// eval mode is the identity.
pub fn dropout<D: Dimension>(
    x: &Array<f64, D>,
    p: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Array<f64, D>> {
    check_rate(p)?;
    match mode {
        Mode::Eval => Ok(x.clone()),
        Mode::Train => Ok(x * &dropout_mask(x.raw_dim(), p, rng)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::Array1;

    #[test]
    fn identity_cases() {
        let mut r = rng::stream(0, "d", 0);
        let x = Array1::from_vec(vec![1.0, -2.0, 3.5]);
        assert_eq!(dropout(&x, 0.0, Mode::Train, &mut r).unwrap(), x);
        assert_eq!(dropout(&x, 0.0, Mode::Eval, &mut r).unwrap(), x);
        assert_eq!(dropout(&x, 0.7, Mode::Eval, &mut r).unwrap(), x);
    }

    #[test]
    fn rejects_rate_of_one() {
        let mut r = rng::stream(0, "d", 0);
        assert!(dropout(&Array1::<f64>::ones(2), 1.0, Mode::Train, &mut r).is_err());
        assert!(dropout(&Array1::<f64>::ones(2), -0.1, Mode::Eval, &mut r).is_err());
    }

    #[test]
    fn inverted_scaling_preserves_mean() {
        let mut r = rng::stream(11, "d", 0);
        let x = Array1::<f64>::ones(100_000);
        let y = dropout(&x, 0.5, Mode::Train, &mut r).unwrap();
        let mean = y.mean().unwrap();
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!(y.iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
