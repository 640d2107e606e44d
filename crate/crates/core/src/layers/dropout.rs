//! Inverted dropout with a seeded mask.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::validation(format!(
                "dropout rate {p} outside [0, 1)"
            )));
        }
        Ok(Self { p })
    }

    pub fn rate(&self) -> f64 {
        self.p
    }

    /// Each entry is 0 with probability `p`, otherwise `1 / (1 - p)`.
    pub fn mask(&self, rng: &mut impl Rng, n: usize) -> Vec<f64> {
        let keep = 1.0 / (1.0 - self.p);
        (0..n)
            .map(|_| {
                if rng.random::<f64>() < self.p {
                    0.0
                } else {
                    keep
                }
            })
            .collect()
    }

    pub fn forward(&self, x: &Tensor, training: bool, rng: &mut impl Rng) -> Tensor {
        if !training || self.p == 0.0 {
            return x.clone();
        }
        let mask = self.mask(rng, x.len());
        let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn forward_var<'t>(
        &self,
        x: Var<'t>,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Var<'t>> {
        if !training || self.p == 0.0 {
            return Ok(x);
        }
        let mask = Tensor::new(
            x.shape().to_vec(),
            self.mask(rng, x.shape().iter().product()),
        )?;
        x.mul(x.tape().constant(mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_is_identity() {
        let d = Dropout::new(0.5).unwrap();
        let x = Tensor::row(vec![1.0, -2.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(d.forward(&x, false, &mut rng), x);
    }

    #[test]
    fn kept_entries_are_rescaled() {
        let d = Dropout::new(0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = d.mask(&mut rng, 1000);
        assert!(m.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
        let dropped = m.iter().filter(|&&v| v == 0.0).count();
        assert!((150..350).contains(&dropped), "{dropped}");
    }

    #[test]
    fn same_seed_same_mask() {
        let d = Dropout::new(0.3).unwrap();
        let a = d.mask(&mut ChaCha8Rng::seed_from_u64(9), 64);
        let b = d.mask(&mut ChaCha8Rng::seed_from_u64(9), 64);
        assert_eq!(a, b);
    }

    #[test]
    fn rate_is_validated() {
        assert!(Dropout::new(1.0).is_err());
        assert!(Dropout::new(-0.1).is_err());
        assert!(Dropout::new(0.0).is_ok());
    }
}
