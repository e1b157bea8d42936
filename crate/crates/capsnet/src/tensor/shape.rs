use crate::error::{bail, Result};

/// Extents of a dense row-major tensor. Every extent is at least 1.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            bail!(InvalidArgument, "shape must have at least one axis");
        }
        if let Some(ax) = dims.iter().position(|&d| d == 0) {
            bail!(InvalidArgument, "shape axis {ax} has extent 0; extents must be >= 1");
        }
        let mut numel: usize = 1;
        for &d in &dims {
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| crate::error::Error::InvalidArgument(format!(
                    "element count overflows for shape {dims:?}"
                )))?;
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides, in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.0[i + 1];
        }
        s
    }

    pub fn axis(&self, i: usize) -> usize {
        self.0[i]
    }
}

impl std::fmt::Debug for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

#[macro_export]
macro_rules! shape {
    ($($d:expr),+ $(,)?) => {
        $crate::tensor::Shape::new(vec![$($d),+]).expect("valid shape literal")
    };
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numel_and_strides() {
        let s = Shape::new(vec![2, 3, 4]).unwrap();
        assert_eq!(s.numel(), 24);
        assert_eq!(s.strides(), vec![12, 4, 1]);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Shape::new(vec![2, 0, 4]).is_err());
        assert!(Shape::new(Vec::<usize>::new()).is_err());
    }
}
