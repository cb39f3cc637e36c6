//! Closed-form TKF91 link-survival quantities.
//!
//! The general birth/death form covers `lambda < mu`; the `lambda == mu`
//! long-sequence limit is selected by an explicit flag and evaluated through
//! its analytic expressions, never as a numeric limit.

use crate::error::{Error, Result};
use crate::real::Real;

/// Death rate of a link, either an explicit rate or tied to the birth rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeathRate<T> {
    EqualToBirth,
    Rate(T),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndelRates<T> {
    lambda: T,
    mu: DeathRate<T>,
}

impl<T: Real> IndelRates<T> {
    /// Rates with `mu == lambda`, the regime used by the alignment model.
    pub fn equal(lambda: T) -> Result<Self> {
        check_positive("lambda", lambda)?;
        Ok(Self { lambda, mu: DeathRate::EqualToBirth })
    }

    /// General rates; `mu` must exceed `lambda` for a stationary length law.
    pub fn general(lambda: T, mu: T) -> Result<Self> {
        check_positive("lambda", lambda)?;
        check_positive("mu", mu)?;
        if lambda >= mu {
            return Err(Error::Domain(format!(
                "birth rate {lambda} must be smaller than death rate {mu}"
            )));
        }
        Ok(Self { lambda, mu: DeathRate::Rate(mu) })
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    /// Numeric death rate (equal to lambda in the tied regime).
    pub fn mu(&self) -> T {
        match self.mu {
            DeathRate::EqualToBirth => self.lambda,
            DeathRate::Rate(mu) => mu,
        }
    }

    pub fn is_equal_regime(&self) -> bool {
        matches!(self.mu, DeathRate::EqualToBirth)
    }
}

/// Evolutionary distance along a branch.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct BranchTime<T>(T);

impl<T: Real> BranchTime<T> {
    pub fn new(t: T) -> Result<Self> {
        if !t.is_finite() || t < T::zero() {
            return Err(Error::InvalidParameter(format!("branch time {t} must be finite and >= 0")));
        }
        Ok(Self(t))
    }

    pub fn get(self) -> T {
        self.0
    }
}

fn check_positive<T: Real>(name: &str, x: T) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::InvalidParameter(format!("{name} = {x} is not finite")));
    }
    if x == T::zero() {
        return Err(Error::Boundary(format!("{name} = 0")));
    }
    if x < T::zero() {
        return Err(Error::InvalidParameter(format!("{name} = {x} must be > 0")));
    }
    Ok(())
}

fn check_lambda<T: Real>(lambda: T) -> Result<()> {
    check_positive("lambda", lambda)
}

/// `beta(t)`; `lambda * beta(t)` is the probability of further insertions.
pub fn beta<T: Real>(rates: &IndelRates<T>, t: BranchTime<T>) -> T {
    let t = t.get();
    let l = rates.lambda;
    match rates.mu {
        DeathRate::EqualToBirth => t / (T::one() + l * t),
        DeathRate::Rate(mu) => {
            let e = ((l - mu) * t).exp();
            // 1 - e computed as -expm1 keeps precision for small t.
            -((l - mu) * t).exp_m1() / (mu - l * e)
        }
    }
}

fn general_only<T: Real>(rates: &IndelRates<T>) -> Result<T> {
    match rates.mu {
        DeathRate::Rate(mu) => Ok(mu),
        DeathRate::EqualToBirth => Err(Error::Domain(
            "p_h/p_n/p_i need distinct rates; use q_h/q_n when mu == lambda".into(),
        )),
    }
}

fn geometric_power<T: Real>(ratio: T, n: u64) -> T {
    if n == 0 {
        T::one()
    } else if ratio == T::zero() {
        T::zero()
    } else {
        (T::of(n as f64) * ratio.ln()).exp()
    }
}

/// Probability that a link survives and has `n >= 1` descendants.
pub fn p_h<T: Real>(n: u64, rates: &IndelRates<T>, t: BranchTime<T>) -> Result<T> {
    let mu = general_only(rates)?;
    if n == 0 {
        return Err(Error::Domain("p_h needs n >= 1".into()));
    }
    let lb = rates.lambda * beta(rates, t);
    Ok((-mu * t.get()).exp() * (T::one() - lb) * geometric_power(lb, n - 1))
}

/// Probability that a link dies leaving `n >= 0` descendants.
pub fn p_n<T: Real>(n: u64, rates: &IndelRates<T>, t: BranchTime<T>) -> Result<T> {
    let mu = general_only(rates)?;
    let b = beta(rates, t);
    if n == 0 {
        return Ok(mu * b);
    }
    let lb = rates.lambda * b;
    let dead = -(-mu * t.get()).exp_m1();
    Ok((dead - mu * b) * (T::one() - lb) * geometric_power(lb, n - 1))
}

/// Descendant count law of the immortal link, `n >= 1`.
pub fn p_i<T: Real>(n: u64, rates: &IndelRates<T>, t: BranchTime<T>) -> Result<T> {
    general_only(rates)?;
    if n == 0 {
        return Err(Error::Domain("p_i needs n >= 1".into()));
    }
    let lb = rates.lambda * beta(rates, t);
    Ok((T::one() - lb) * geometric_power(lb, n - 1))
}

/// `ln q_h(n)` in the `mu == lambda` regime.
pub fn ln_q_h<T: Real>(n: u64, lambda: T, t: BranchTime<T>) -> Result<T> {
    check_lambda(lambda)?;
    if n == 0 {
        return Err(Error::Domain("q_h needs n >= 1".into()));
    }
    let k = BranchKernel::new(lambda, t)?;
    Ok(k.ln_q_h(n))
}

/// `ln q_n(n)` in the `mu == lambda` regime.
pub fn ln_q_n<T: Real>(n: u64, lambda: T, t: BranchTime<T>) -> Result<T> {
    check_lambda(lambda)?;
    let k = BranchKernel::new(lambda, t)?;
    Ok(k.ln_q_n(n))
}

pub fn q_h<T: Real>(n: u64, lambda: T, t: BranchTime<T>) -> Result<T> {
    ln_q_h(n, lambda, t).map(T::exp)
}

pub fn q_n<T: Real>(n: u64, lambda: T, t: BranchTime<T>) -> Result<T> {
    ln_q_n(n, lambda, t).map(T::exp)
}

/// Survival probability `exp(-mu t)` of the ancestral link.
pub fn alpha_surv<T: Real>(rates: &IndelRates<T>, t: BranchTime<T>) -> T {
    (-rates.mu() * t.get()).exp()
}

/// Probability of at least one insertion given that the link died.
pub fn kappa<T: Real>(rates: &IndelRates<T>, t: BranchTime<T>) -> Result<T> {
    if t.get() == T::zero() {
        return Err(Error::Domain("kappa(0) is 0/0".into()));
    }
    let mu = rates.mu();
    let dead = -(-mu * t.get()).exp_m1();
    Ok(match rates.mu {
        DeathRate::EqualToBirth => {
            let lt = rates.lambda * t.get();
            T::one() - lt / ((T::one() + lt) * dead)
        }
        DeathRate::Rate(_) => (dead - mu * beta(rates, t)) / dead,
    })
}

/// Expected number of descendants of one link, `sum_m m (q_h(m) + q_n(m))`.
pub fn mean_descendants<T: Real>(lambda: T, t: BranchTime<T>) -> Result<T> {
    let k = BranchKernel::new(lambda, t)?;
    // Both families are geometric with ratio r and 1 - r = b, so
    // sum_m m r^(m-1) = 1 / b^2.
    let surv = k.alpha * k.b / (k.b * k.b);
    let died = (k.b - k.alpha) * k.b / (k.b * k.b);
    Ok(surv + died)
}

/// Smallest `N` such that the geometric tail `ratio^N / (1 - ratio)` is below `eps`.
pub fn truncation_horizon<T: Real>(ratio: T, eps: T) -> u64 {
    if ratio <= T::zero() {
        return 1;
    }
    let target = (eps * (T::one() - ratio)).ln() / ratio.ln();
    target.ceil().max(T::one()).to_f64_lossy() as u64
}

/// Per-branch constants of the `mu == lambda` kernel.
#[derive(Debug, Clone, Copy)]
pub struct BranchKernel<T> {
    /// Survival probability `exp(-lambda t)`.
    pub alpha: T,
    /// Insertion continuation `lambda t / (1 + lambda t)`.
    pub r: T,
    /// Stop probability `1 / (1 + lambda t)`.
    pub b: T,
    /// First-insertion probability after a death; 0 at `t == 0`.
    pub kappa: T,
    ln_alpha: T,
    ln_r: T,
    ln_b: T,
    ln_dead_ins: T,
}

impl<T: Real> BranchKernel<T> {
    pub fn new(lambda: T, t: BranchTime<T>) -> Result<Self> {
        check_lambda(lambda)?;
        let lt = lambda * t.get();
        let one = T::one();
        let alpha = (-lt).exp();
        let r = lt / (one + lt);
        let b = one / (one + lt);
        let kappa = if lt == T::zero() {
            T::zero()
        } else {
            one - r / -(-lt).exp_m1()
        };
        Ok(Self {
            alpha,
            r,
            b,
            kappa,
            ln_alpha: -lt,
            ln_r: r.ln(),
            ln_b: -lt.ln_1p(),
            ln_dead_ins: (b - alpha).ln(),
        })
    }

    /// Probability of no insertion after a survivor (`b`) or a death (`1 - kappa`).
    pub fn no_insert(&self, survived: bool) -> T {
        if survived {
            self.b
        } else {
            T::one() - self.kappa
        }
    }

    /// Probability of a first insertion after a survivor (`r`) or a death (`kappa`).
    pub fn start_insert(&self, survived: bool) -> T {
        if survived {
            self.r
        } else {
            self.kappa
        }
    }

    pub fn ln_q_h(&self, n: u64) -> T {
        debug_assert!(n >= 1);
        self.ln_alpha + self.ln_b + self.ln_pow_r(n - 1)
    }

    pub fn ln_q_n(&self, n: u64) -> T {
        if n == 0 {
            self.ln_r
        } else {
            self.ln_dead_ins + self.ln_b + self.ln_pow_r(n - 1)
        }
    }

    /// Log-probability of a single branch's fate in a star column.
    pub fn ln_fate(&self, survived: bool, inserted: u64) -> T {
        if survived {
            self.ln_q_h(inserted + 1)
        } else {
            self.ln_q_n(inserted)
        }
    }

    /// `ln q_h(total)` for a surviving link, `ln q_n(total)` otherwise.
    pub fn ln_fate_total(&self, survived: bool, total: u64) -> T {
        if survived {
            self.ln_q_h(total)
        } else {
            self.ln_q_n(total)
        }
    }

    fn ln_pow_r(&self, m: u64) -> T {
        if m == 0 {
            T::zero()
        } else {
            T::of(m as f64) * self.ln_r
        }
    }

    /// Probability generating function of the descendant count, `E[s^N]`.
    pub fn descendant_pgf(&self, s: T) -> T {
        self.r + self.b * self.b * s / (T::one() - self.r * s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bt(t: f64) -> BranchTime<f64> {
        BranchTime::new(t).unwrap()
    }

    #[test]
    fn beta_values() {
        let eq = IndelRates::equal(0.02).unwrap();
        assert_eq!(beta(&eq, bt(0.0)), 0.0);
        assert_relative_eq!(beta(&eq, bt(1.0)), 0.980392, epsilon = 1e-6);
        let gen = IndelRates::general(0.5, 1.0).unwrap();
        assert_relative_eq!(beta(&gen, bt(1.0)), 0.564_733_401_606_416, epsilon = 1e-14);
        assert!(IndelRates::general(1.0, 0.5).is_err());
    }

    #[test]
    fn general_families() {
        let gen = IndelRates::general(0.5, 1.0).unwrap();
        assert_relative_eq!(p_n(0, &gen, bt(1.0)).unwrap(), 0.564_733_401_606_416, epsilon = 1e-14);
        assert_relative_eq!(p_i(1, &gen, bt(1.0)).unwrap(), 0.717_633_299_196_792, epsilon = 1e-14);
        assert_relative_eq!(p_h(1, &gen, bt(1e-12)).unwrap(), 1.0, epsilon = 1e-9);
        assert!(p_h(0, &gen, bt(1.0)).is_err());
        let eq = IndelRates::equal(0.5).unwrap();
        assert!(p_h(1, &eq, bt(1.0)).is_err());
    }

    #[test]
    fn tied_families() {
        assert_relative_eq!(q_h(1, 1.0, bt(1.0)).unwrap(), 0.183_939_720_585_721, epsilon = 1e-14);
        assert_relative_eq!(q_n(0, 1.0, bt(1.0)).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(q_h(1, 0.3, bt(0.0)).unwrap(), 1.0);
        assert_eq!(q_n(0, 0.3, bt(0.0)).unwrap(), 0.0);
        assert!(matches!(q_h(1, 0.0, bt(1.0)), Err(Error::Boundary(_))));
    }

    #[test]
    fn kappa_and_survival() {
        let eq = IndelRates::equal(0.02).unwrap();
        assert_relative_eq!(alpha_surv(&eq, bt(1.0)), 0.980_198_673_306_755, epsilon = 1e-14);
        assert_eq!(alpha_surv(&eq, bt(0.0)), 1.0);
        let one = IndelRates::equal(1.0).unwrap();
        assert_relative_eq!(kappa(&one, bt(1.0)).unwrap(), 0.209_011_646_565_337, epsilon = 1e-14);
        assert!(kappa(&one, bt(0.0)).is_err());
        let k = BranchKernel::new(1.0, bt(1.0)).unwrap();
        assert_relative_eq!(k.kappa, 0.209_011_646_565_337, epsilon = 1e-14);
    }

    #[test]
    fn tied_limit_of_general_form() {
        let lam = 0.3;
        let gen = IndelRates::general(lam, lam * (1.0 + 1e-6)).unwrap();
        for n in 1..5 {
            let a = p_h(n, &gen, bt(0.7)).unwrap();
            let b = q_h(n, lam, bt(0.7)).unwrap();
            assert!((a - b).abs() / b < 1e-4);
        }
    }

    #[test]
    fn mean_is_one() {
        assert_relative_eq!(mean_descendants(0.02, bt(1.0)).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(mean_descendants(1.0, bt(5.0)).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(mean_descendants(0.01, bt(0.0)).unwrap(), 1.0);
    }

    #[test]
    fn horizon_bounds_tail() {
        let r = 0.5_f64;
        let n = truncation_horizon(r, 1e-13);
        assert!(r.powi(n as i32) / (1.0 - r) < 1e-13);
        assert!(r.powi(n as i32 - 1) / (1.0 - r) >= 1e-13);
    }

    #[test]
    fn works_in_single_precision() {
        let k = BranchKernel::<f32>::new(0.02, BranchTime::new(1.0).unwrap()).unwrap();
        assert!((k.r + k.b - 1.0).abs() < 1e-6);
        assert!((k.alpha - 0.980_199).abs() < 1e-6);
    }
}
