use serde::{Deserialize, Serialize};

/// Streaming central moments: count, mean and the central power sums
/// `M2 = sum (x - mean)^2`, `M3`, `M4`. One-pass and mergeable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        let n1 = self.n as f64;
        self.n += 1;
        let n = self.n as f64;
        let delta = x - self.mean;
        let dn = delta / n;
        let dn2 = dn * dn;
        let term1 = delta * dn * n1;
        self.mean += dn;
        self.m4 += term1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2 - 4.0 * dn * self.m3;
        self.m3 += term1 * dn * (n - 2.0) - 3.0 * dn * self.m2;
        self.m2 += term1;
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut m = Self::default();
        xs.iter().for_each(|&x| m.push(x));
        m
    }

    /// Moments of the concatenation of both streams.
    pub fn merge(&self, other: &Self) -> Self {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let d = other.mean - self.mean;
        let d2 = d * d;
        let d3 = d2 * d;
        let d4 = d2 * d2;
        Self {
            n: self.n + other.n,
            mean: self.mean + d * nb / n,
            m2: self.m2 + other.m2 + d2 * na * nb / n,
            m3: self.m3 + other.m3 + d3 * na * nb * (na - nb) / (n * n) + 3.0 * d * (na * other.m2 - nb * self.m2) / n,
            m4: self.m4
                + other.m4
                + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
                + 6.0 * d2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
                + 4.0 * d * (na * other.m3 - nb * self.m3) / n,
        }
    }

    pub fn variance(&self) -> Option<f64> {
        (self.n > 0).then(|| self.m2 / self.n as f64)
    }

    /// Population kurtosis `n M4 / M2^2`, without the excess offset.
    /// `None` for fewer than four observations or zero spread.
    pub fn kurtosis(&self) -> Option<f64> {
        if self.n < 4 || self.m2 <= 0.0 {
            return None;
        }
        let k = self.n as f64 * self.m4 / (self.m2 * self.m2);
        k.is_finite().then_some(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_pass(xs: &[f64]) -> (f64, f64, f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let c = |p: i32| xs.iter().map(|x| (x - mean).powi(p)).sum::<f64>();
        (mean, c(2), c(3), c(4))
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn fixtures() {
        assert_eq!(Moments::from_slice(&[0.0, 0.0, 0.0, 0.0, 10.0]).kurtosis(), Some(3.25));
        assert_eq!(Moments::from_slice(&[-1.0, 1.0, -1.0, 1.0]).kurtosis(), Some(1.0));
        assert_eq!(Moments::from_slice(&[2.5; 10]).kurtosis(), None);
        assert_eq!(Moments::from_slice(&[1.0, 2.0, 3.0]).kurtosis(), None);
        let one = Moments::from_slice(&[4.0]);
        assert_eq!((one.n, one.m2, one.m3, one.m4), (1, 0.0, 0.0, 0.0));
        let c = Moments::from_slice(&[1.0, 1.0, 1.0]);
        assert_eq!((c.mean, c.m2), (1.0, 0.0));
    }

    #[test]
    fn merge_identity() {
        let a = Moments::from_slice(&[1.0, 5.0, -2.0]);
        assert_eq!(a.merge(&Moments::default()), a);
        assert_eq!(Moments::default().merge(&a), a);
    }

    proptest! {
        #[test]
        fn streaming_matches_two_pass(xs in prop::collection::vec(-100.0..100.0f64, 2..200)) {
            let m = Moments::from_slice(&xs);
            let (mean, m2, m3, m4) = two_pass(&xs);
            prop_assert!((m.mean - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
            prop_assert!(close(m.m2, m2, 1e-10));
            prop_assert!((m.m3 - m3).abs() <= 1e-9 * m2.powf(1.5).max(1e-12));
            prop_assert!(close(m.m4, m4, 1e-10));
        }

        #[test]
        fn merge_matches_concatenation(
            a in prop::collection::vec(-50.0..50.0f64, 0..60),
            b in prop::collection::vec(-50.0..50.0f64, 0..60),
            c in prop::collection::vec(-50.0..50.0f64, 0..60),
        ) {
            let (ma, mb, mc) = (Moments::from_slice(&a), Moments::from_slice(&b), Moments::from_slice(&c));
            let all: Vec<f64> = a.iter().chain(&b).chain(&c).copied().collect();
            let whole = Moments::from_slice(&all);
            let left = ma.merge(&mb).merge(&mc);
            let right = ma.merge(&mb.merge(&mc));
            let ab = ma.merge(&mb);
            let ba = mb.merge(&ma);
            let scale = whole.m2.max(1e-12);
            for (x, y) in [(left, right), (left, whole), (ab, ba)] {
                prop_assert_eq!(x.n, y.n);
                prop_assert!((x.mean - y.mean).abs() <= 1e-10 * (1.0 + y.mean.abs()));
                prop_assert!((x.m2 - y.m2).abs() <= 1e-10 * scale);
                prop_assert!((x.m3 - y.m3).abs() <= 1e-9 * scale.powf(1.5));
                prop_assert!((x.m4 - y.m4).abs() <= 1e-10 * scale * scale);
            }
        }
    }
}
