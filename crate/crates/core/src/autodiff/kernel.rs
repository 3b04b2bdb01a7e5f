use crate::error::{Error, Result};

/// Sum of Gaussian RBF kernels `Σ_σ exp(-u / 2σ²)` as a function of the
/// squared distance `u`.
///
/// Bandwidth sets whose precisions `1/2σ²` differ by exact powers of two
/// (the median-heuristic ladder σ/4 … 4σ) are evaluated with one `exp` and
/// repeated squaring.
#[derive(Clone, Debug)]
pub(crate) struct GaussianBank {
    // Precisions 1/(2σ²), ascending.
    gammas: Vec<f64>,
    // squarings[b] = Some(s) when gammas[b] = 2^s · gammas[b-1].
    squarings: Vec<Option<u32>>,
}

const MAX_SQUARINGS: u32 = 8;

impl GaussianBank {
    pub(crate) fn new(bandwidths: &[f64]) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::Config("kernel needs at least one bandwidth".into()));
        }
        if let Some(bad) = bandwidths.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Config(format!("kernel bandwidth must be positive, got {bad}")));
        }
        let mut gammas: Vec<f64> = bandwidths.iter().map(|s| 0.5 / (s * s)).collect();
        gammas.sort_by(f64::total_cmp);
        let squarings = gammas
            .iter()
            .enumerate()
            .map(|(b, &g)| {
                if b == 0 {
                    return None;
                }
                let ratio = g / gammas[b - 1];
                (1..=MAX_SQUARINGS).find(|&s| ratio == f64::from(1u32 << s))
            })
            .collect();
        Ok(Self { gammas, squarings })
    }

    pub(crate) fn len(&self) -> usize {
        self.gammas.len()
    }

    /// Returns `(Σ_b e_b, Σ_b -γ_b e_b)`: the kernel value and its derivative
    /// with respect to the squared distance.
    #[inline]
    pub(crate) fn eval(&self, u: f64) -> (f64, f64) {
        let mut value = 0.0;
        let mut slope = 0.0;
        let mut prev = 0.0;
        for (b, &gamma) in self.gammas.iter().enumerate() {
            let e = match self.squarings[b] {
                Some(s) => {
                    let mut e = prev;
                    for _ in 0..s {
                        e *= e;
                    }
                    e
                }
                None => (-gamma * u).exp(),
            };
            value += e;
            slope -= gamma * e;
            prev = e;
        }
        (value, slope)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_matches_direct_exponentials() {
        let sigmas = [0.25, 0.5, 1.0, 2.0, 4.0];
        let bank = GaussianBank::new(&sigmas).unwrap();
        assert!(bank.squarings.iter().skip(1).all(|s| *s == Some(2)));
        for &u in &[0.0, 1e-3, 0.1, 0.7, 3.0, 20.0] {
            let (v, slope) = bank.eval(u);
            let want: f64 = sigmas.iter().map(|s| (-u / (2.0 * s * s)).exp()).sum();
            let want_slope: f64 = sigmas
                .iter()
                .map(|s| -(0.5 / (s * s)) * (-u / (2.0 * s * s)).exp())
                .sum();
            assert!((v - want).abs() < 1e-12 * want.max(1.0), "u={u}");
            assert!((slope - want_slope).abs() < 1e-12 * want_slope.abs().max(1.0));
        }
    }

    #[test]
    fn irregular_bandwidths_use_exp() {
        let bank = GaussianBank::new(&[1.0, 1.3]).unwrap();
        assert_eq!(bank.squarings, vec![None, None]);
    }

    #[test]
    fn rejects_bad_bandwidths() {
        assert!(GaussianBank::new(&[]).is_err());
        assert!(GaussianBank::new(&[1.0, 0.0]).is_err());
        assert!(GaussianBank::new(&[f64::NAN]).is_err());
    }
}
