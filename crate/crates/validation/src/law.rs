//! Finite-support covariate laws with exact expectations.

use rand::Rng;

/// Probability law on a finite set of covariate vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLaw {
    pub points: Vec<Vec<f64>>,
    pub prob: Vec<f64>,
}

impl DiscreteLaw {
    /// Normalize nonnegative `weights` into probabilities.
    pub fn new(points: Vec<Vec<f64>>, weights: &[f64]) -> Self {
        assert_eq!(points.len(), weights.len());
        let total: f64 = weights.iter().sum();
        DiscreteLaw { points, prob: weights.iter().map(|w| w / total).collect() }
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn expect(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.points.iter().zip(&self.prob).map(|(x, p)| p * f(x)).sum()
    }

    pub fn probability(&self, keep: impl Fn(&[f64]) -> bool) -> f64 {
        self.expect(|x| if keep(x) { 1.0 } else { 0.0 })
    }

    /// `E[f | keep]`.
    pub fn conditional(&self, f: impl Fn(&[f64]) -> f64, keep: impl Fn(&[f64]) -> bool) -> f64 {
        let num = self.expect(|x| if keep(x) { f(x) } else { 0.0 });
        num / self.probability(keep)
    }

    pub fn variance(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let m = self.expect(&f);
        self.expect(|x| (f(x) - m).powi(2))
    }

    /// Law proportional to `p(x) exp(η·h(x))`.
    pub fn tilt(&self, h: impl Fn(&[f64]) -> Vec<f64>, eta: &[f64]) -> DiscreteLaw {
        let w: Vec<f64> = self
            .points
            .iter()
            .zip(&self.prob)
            .map(|(x, p)| p * h(x).iter().zip(eta).map(|(a, b)| a * b).sum::<f64>().exp())
            .collect();
        DiscreteLaw::new(self.points.clone(), &w)
    }

    /// Row-major rows repeating point `k` `counts[k]` times, so that the
    /// empirical law of the rows is exactly `counts / Σ counts`.
    pub fn replicate(&self, counts: &[usize]) -> Vec<f64> {
        let mut out = Vec::new();
        for (x, &c) in self.points.iter().zip(counts) {
            for _ in 0..c {
                out.extend_from_slice(x);
            }
        }
        out
    }

    /// `n` i.i.d. rows, row-major.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let mut cdf = Vec::with_capacity(self.prob.len());
        let mut acc = 0.0;
        for p in &self.prob {
            acc += p;
            cdf.push(acc);
        }
        let mut out = Vec::with_capacity(n * self.dim());
        for _ in 0..n {
            let u: f64 = rng.random::<f64>() * acc;
            let k = cdf.partition_point(|c| *c < u).min(self.points.len() - 1);
            out.extend_from_slice(&self.points[k]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tilt_of_bernoulli_has_logit_shift() {
        let law = DiscreteLaw::new(vec![vec![0.0], vec![1.0]], &[0.5, 0.5]);
        let t = law.tilt(|x| vec![x[0]], &[2f64.ln()]);
        assert!((t.expect(|x| x[0]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn replicated_rows_reproduce_the_law() {
        let law = DiscreteLaw::new(vec![vec![0.0], vec![3.0]], &[1.0, 2.0]);
        let rows = law.replicate(&[1, 2]);
        let mean = rows.iter().sum::<f64>() / rows.len() as f64;
        assert!((mean - law.expect(|x| x[0])).abs() < 1e-15);
    }
}
