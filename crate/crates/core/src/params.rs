use crate::error::{Error, Result};
use crate::real::Real;
use crate::substitution::SubstParams;

/// Model parameter `(lambda, alpha, nu)` with the death rate tied to `lambda`.
///
/// Construction enforces strictly positive components; `nu` is carried along
/// but is not part of the estimated parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolParams<T> {
    lambda: T,
    subst: SubstParams<T>,
}

impl<T: Real> EvolParams<T> {
    pub fn new(lambda: T, alpha: T, nu: Vec<T>) -> Result<Self> {
        if !lambda.is_finite() || lambda < T::zero() {
            return Err(Error::InvalidParameter(format!("lambda = {lambda} must be > 0")));
        }
        if lambda == T::zero() {
            return Err(Error::Boundary("lambda = 0".into()));
        }
        if nu.iter().any(|&p| p == T::zero()) {
            return Err(Error::Boundary("nu has a zero entry".into()));
        }
        Ok(Self { lambda, subst: SubstParams::new(alpha, nu)? })
    }

    /// Parameters with uniform `nu` over `size` symbols.
    pub fn uniform(lambda: T, alpha: T, size: usize) -> Result<Self> {
        let p = T::one() / T::of_usize(size);
        Self::new(lambda, alpha, vec![p; size])
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn alpha(&self) -> T {
        self.subst.alpha()
    }

    pub fn nu(&self) -> &[T] {
        self.subst.nu()
    }

    pub fn subst(&self) -> &SubstParams<T> {
        &self.subst
    }

    /// Same `nu`, different `(lambda, alpha)`.
    pub fn with_rates(&self, lambda: T, alpha: T) -> Result<Self> {
        Self::new(lambda, alpha, self.nu().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_boundary() {
        assert!(EvolParams::uniform(0.02, 0.1, 4).is_ok());
        assert!(matches!(EvolParams::uniform(0.0, 0.1, 4), Err(Error::Boundary(_))));
        assert!(matches!(EvolParams::uniform(0.02, 0.0, 4), Err(Error::Boundary(_))));
        assert!(matches!(EvolParams::new(0.02, 0.1, vec![0.5, 0.5, 0.0]), Err(Error::Boundary(_))));
        assert!(EvolParams::uniform(-1.0, 0.1, 4).is_err());
    }
}
