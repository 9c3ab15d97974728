//! Simulator input spaces: named, bounded dimensions split into decision
//! variables and uncertain parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One bounded input dimension in native units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

/// The simulator's input space. Dimensions flagged as decisions are the
/// controllable choices `d`; the remainder are the uncertain inputs `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpace {
    dims: Vec<Dimension>,
    #[serde(default)]
    decision: Vec<String>,
}

impl InputSpace {
    pub fn new(dims: Vec<Dimension>, decision_dims: &[&str]) -> Result<Self> {
        let space = InputSpace {
            dims,
            decision: decision_dims.iter().map(|s| s.to_string()).collect(),
        };
        space.validate()?;
        Ok(space)
    }

    /// All dimensions are uncertain parameters.
    pub fn new_parameters(dims: Vec<Dimension>) -> Result<Self> {
        Self::new(dims, &[])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::InvalidSpace("no dimensions".into()));
        }
        for d in &self.dims {
            if !(d.lower < d.upper) {
                return Err(Error::InvalidSpace(format!(
                    "dimension `{}` has lower {} >= upper {}",
                    d.name, d.lower, d.upper
                )));
            }
        }
        for (i, d) in self.dims.iter().enumerate() {
            if self.dims[..i].iter().any(|e| e.name == d.name) {
                return Err(Error::InvalidSpace(format!(
                    "duplicate dimension name `{}`",
                    d.name
                )));
            }
        }
        for name in &self.decision {
            if !self.dims.iter().any(|d| &d.name == name) {
                return Err(Error::InvalidSpace(format!(
                    "decision dimension `{name}` is not a dimension"
                )));
            }
        }
        for (i, name) in self.decision.iter().enumerate() {
            if self.decision[..i].contains(name) {
                return Err(Error::InvalidSpace(format!(
                    "decision dimension `{name}` listed twice"
                )));
            }
        }
        Ok(())
    }

    pub fn n_dims(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[Dimension] {
        &self.dims
    }

    pub fn names(&self) -> Vec<&str> {
        self.dims.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|d| d.name == name)
    }

    pub fn is_decision(&self, name: &str) -> bool {
        self.decision.iter().any(|d| d == name)
    }

    pub fn decision_indices(&self) -> Vec<usize> {
        self.dims
            .iter()
            .enumerate()
            .filter(|(_, d)| self.is_decision(&d.name))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn parameter_indices(&self) -> Vec<usize> {
        self.dims
            .iter()
            .enumerate()
            .filter(|(_, d)| !self.is_decision(&d.name))
            .map(|(i, _)| i)
            .collect()
    }

    /// Keep only the named dimensions, in the given order.
    pub fn subspace(&self, names: &[&str]) -> Result<InputSpace> {
        let mut dims = Vec::with_capacity(names.len());
        for name in names {
            let i = self
                .index_of(name)
                .ok_or_else(|| Error::InvalidSpace(format!("no dimension named `{name}`")))?;
            dims.push(self.dims[i].clone());
        }
        let decision: Vec<&str> = names
            .iter()
            .filter(|n| self.is_decision(n))
            .copied()
            .collect();
        InputSpace::new(dims, &decision)
    }

    pub fn contains(&self, point: &[f64]) -> Result<bool> {
        self.check_arity(point)?;
        Ok(point
            .iter()
            .zip(&self.dims)
            .all(|(v, d)| *v >= d.lower && *v <= d.upper))
    }

    pub fn check_arity(&self, point: &[f64]) -> Result<()> {
        if point.len() != self.dims.len() {
            return Err(Error::DimensionMismatch {
                expected: self.dims.len(),
                got: point.len(),
                context: " (input space)".into(),
            });
        }
        Ok(())
    }

    /// Map a native-unit point onto [-1, 1] per dimension.
    pub fn standardize(&self, point: &[f64]) -> Result<Vec<f64>> {
        self.check_arity(point)?;
        Ok(point
            .iter()
            .zip(&self.dims)
            .map(|(v, d)| 2.0 * (v - d.lower) / (d.upper - d.lower) - 1.0)
            .collect())
    }

    /// Inverse of [`standardize`](Self::standardize).
    pub fn destandardize(&self, point: &[f64]) -> Result<Vec<f64>> {
        self.check_arity(point)?;
        Ok(point
            .iter()
            .zip(&self.dims)
            .map(|(v, d)| d.lower + (v + 1.0) / 2.0 * (d.upper - d.lower))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space2() -> InputSpace {
        InputSpace::new(
            vec![
                Dimension {
                    name: "x".into(),
                    lower: 0.0,
                    upper: 2.0,
                },
                Dimension {
                    name: "d".into(),
                    lower: -1.0,
                    upper: 3.0,
                },
            ],
            &["d"],
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_bounds() {
        let err = InputSpace::new_parameters(vec![Dimension {
            name: "x".into(),
            lower: 1.0,
            upper: 1.0,
        }]);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_duplicate_names() {
        let dims = vec![
            Dimension {
                name: "x".into(),
                lower: 0.0,
                upper: 1.0,
            },
            Dimension {
                name: "x".into(),
                lower: 0.0,
                upper: 1.0,
            },
        ];
        assert!(InputSpace::new_parameters(dims).is_err());
    }

    #[test]
    fn decision_parameter_split_partitions_dims() {
        let s = space2();
        assert_eq!(s.decision_indices(), vec![1]);
        assert_eq!(s.parameter_indices(), vec![0]);
    }

    #[test]
    fn standardize_round_trips() {
        let s = space2();
        let p = vec![0.5, 2.0];
        let std = s.standardize(&p).unwrap();
        assert_eq!(std, vec![-0.5, 0.5]);
        let back = s.destandardize(&std).unwrap();
        assert!((back[0] - 0.5).abs() < 1e-15 && (back[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn arity_checked() {
        assert!(space2().standardize(&[1.0]).is_err());
    }
}
