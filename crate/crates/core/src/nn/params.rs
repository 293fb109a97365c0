use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{domain, Error, Result};

/// One named real-valued array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamArray {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named parameter arrays plus a version counter bumped on every update.
///
/// Array order is insertion order and is part of the contract: gradient sets,
/// optimizer state and checkpoints all line up with it index by index.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    arrays: Vec<ParamArray>,
    index: HashMap<String, usize>,
    version: u64,
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self {
            arrays: Vec::new(),
            index: HashMap::new(),
            version: 0,
        }
    }

    /// Adds an array; names must be unique and data must match the shape.
    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(domain(format!("duplicate parameter name `{name}`")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(domain(format!(
                "parameter `{name}`: shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                node: name.to_string(),
                detail: format!("non-finite initial value at index {bad}"),
            });
        }
        let idx = self.arrays.len();
        self.arrays.push(ParamArray {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        self.index.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn arrays(&self) -> &[ParamArray] {
        &self.arrays
    }

    pub fn get(&self, name: &str) -> Option<&ParamArray> {
        self.index.get(name).map(|&i| &self.arrays[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn array(&self, idx: usize) -> &ParamArray {
        &self.arrays[idx]
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(ParamArray::numel).sum()
    }

    /// Mutable access to values of one array; shapes stay fixed. Bumps the version.
    pub fn data_mut(&mut self, idx: usize) -> &mut [f64] {
        self.version += 1;
        &mut self.arrays[idx].data
    }

    /// Applies `f(array_index, values)` to every array and bumps the version once.
    pub fn update(&mut self, mut f: impl FnMut(usize, &mut [f64])) {
        for (i, a) in self.arrays.iter_mut().enumerate() {
            f(i, &mut a.data);
        }
        self.version += 1;
    }

    /// Checks the finiteness invariant.
    pub fn check_finite(&self) -> Result<()> {
        for a in &self.arrays {
            if let Some(i) = a.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    node: a.name.clone(),
                    detail: format!("value at index {i} is {}", a.data[i]),
                });
            }
        }
        Ok(())
    }

    /// A set with the same names and shapes, all zeros, version 0.
    pub fn zeros_like(&self) -> ParameterSet {
        let mut out = ParameterSet::new();
        for a in &self.arrays {
            out.insert(&a.name, &a.shape, vec![0.0; a.data.len()])
                .expect("names and shapes already validated");
        }
        out
    }

    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.arrays.len() == other.arrays.len()
            && self
                .arrays
                .iter()
                .zip(&other.arrays)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Flat view of all values in array order.
    pub fn flatten(&self) -> Vec<f64> {
        self.arrays.iter().flat_map(|a| a.data.iter().copied()).collect()
    }

    /// Euclidean norm over every scalar.
    pub fn global_norm(&self) -> f64 {
        self.arrays
            .iter()
            .flat_map(|a| a.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Standard normal truncated to two standard deviations, scaled by `std`.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParameterSet::new();
        p.insert("w", &[2], vec![0.0, 1.0]).unwrap();
        assert!(p.insert("w", &[1], vec![0.0]).is_err());
    }

    #[test]
    fn shape_mismatch_and_non_finite_rejected() {
        let mut p = ParameterSet::new();
        assert!(p.insert("w", &[2, 2], vec![0.0; 3]).is_err());
        assert!(matches!(
            p.insert("w", &[1], vec![f64::NAN]),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn version_counts_updates() {
        let mut p = ParameterSet::new();
        p.insert("w", &[1], vec![1.0]).unwrap();
        assert_eq!(p.version(), 0);
        p.update(|_, d| d[0] += 1.0);
        p.data_mut(0)[0] = 5.0;
        assert_eq!(p.version(), 2);
    }

    #[test]
    fn truncated_normal_stays_in_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = truncated_normal(&mut rng, 0.02, 10_000);
        assert!(xs.iter().all(|x| x.abs() <= 0.04));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 1e-3);
    }
}
