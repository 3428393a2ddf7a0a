use nalgebra::DMatrix;

use super::{complete_basis, fix_sign};
use crate::distribution::DenseTensor;
use crate::error::{Error, Result};

/// Tucker decomposition of a fundamental tensor with grouped positions.
///
/// The core is stored row-major over `(α_1, ..., α_m)` in partition order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tucker {
    pub alphabet: usize,
    pub order: usize,
    /// Groups of 0-based positions.
    pub groups: Vec<Vec<usize>>,
    /// Orthonormal factor basis per group, one column per basis vector.
    pub factors: Vec<DMatrix<f64>>,
    pub core: Vec<f64>,
}

fn validate(order: usize, partition: &[Vec<usize>]) -> Result<()> {
    let mut seen = vec![false; order];
    for g in partition {
        if g.is_empty() {
            return Err(Error::InvalidArgument("empty group in partition".into()));
        }
        for &p in g {
            if p >= order || seen[p] {
                return Err(Error::InvalidArgument(format!("position {p} is out of range or repeated")));
            }
            seen[p] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::InvalidArgument("partition does not cover every position".into()));
    }
    Ok(())
}

/// Reorders tensor positions so that `perm[0]` becomes the first (most significant).
fn permute(data: &[f64], alphabet: usize, order: usize, perm: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let mut digits = vec![0usize; order];
    for (idx, v) in data.iter().enumerate() {
        let mut rem = idx;
        for p in (0..order).rev() {
            digits[p] = rem % alphabet;
            rem /= alphabet;
        }
        let target = perm.iter().fold(0usize, |acc, &p| acc * alphabet + digits[p]);
        out[target] = *v;
    }
    out
}

/// `new[.., a, ..] = Σ_i m[(a, i)] old[.., i, ..]` along axis `axis` of `dims`.
fn mode_product(data: &[f64], dims: &[usize], axis: usize, m: &DMatrix<f64>) -> Vec<f64> {
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let n = dims[axis];
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for a in 0..n {
            for i in 0..n {
                let c = m[(a, i)];
                if c == 0.0 {
                    continue;
                }
                let src = (o * n + i) * inner;
                let dst = (o * n + a) * inner;
                for t in 0..inner {
                    out[dst + t] += c * data[src + t];
                }
            }
        }
    }
    out
}

/// Factor bases from the left singular vectors of each group unfolding.
pub fn tucker_decompose(tensor: &DenseTensor, partition: &[Vec<usize>]) -> Result<Tucker> {
    validate(tensor.order, partition)?;
    let s = tensor.alphabet;
    let perm: Vec<usize> = partition.iter().flatten().copied().collect();
    let grouped = permute(&tensor.data, s, tensor.order, &perm);
    let dims: Vec<usize> = partition.iter().map(|g| s.pow(g.len() as u32)).collect();
    let mut factors = Vec::with_capacity(partition.len());
    for (j, g) in partition.iter().enumerate() {
        // group positions first, everything else in original order
        let mut order: Vec<usize> = g.clone();
        order.extend((0..tensor.order).filter(|p| !g.contains(p)));
        let rows = dims[j];
        let cols = tensor.data.len() / rows;
        let unfolded = permute(&tensor.data, s, tensor.order, &order);
        let mat = DMatrix::from_row_slice(rows, cols, &unfolded);
        let svd = mat.svd(true, false);
        let u = svd.u.ok_or_else(|| Error::NonFinite("unfolding SVD".into()))?;
        let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let tol = 1e-12 * svd.singular_values.iter().copied().fold(0.0, f64::max);
        let cols: Vec<_> = idx
            .iter()
            .filter(|&&i| svd.singular_values[i] > tol)
            .map(|&i| {
                let mut c = u.column(i).into_owned();
                fix_sign(&mut c);
                c
            })
            .collect();
        let basis = if cols.is_empty() {
            DMatrix::identity(rows, rows)
        } else {
            complete_basis(&DMatrix::from_columns(&cols))
        };
        factors.push(basis);
    }
    let mut core = grouped;
    for (axis, f) in factors.iter().enumerate() {
        core = mode_product(&core, &dims, axis, &f.transpose());
    }
    Ok(Tucker { alphabet: s, order: tensor.order, groups: partition.to_vec(), factors, core })
}

impl Tucker {
    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.nrows()).collect()
    }

    /// `Σ_α λ_α ⊗_j v^{(j)}_{α_j}` back in the original position order.
    pub fn reconstruct(&self) -> Result<DenseTensor> {
        let dims = self.dims();
        let mut grouped = self.core.clone();
        for (axis, f) in self.factors.iter().enumerate() {
            grouped = mode_product(&grouped, &dims, axis, f);
        }
        let perm: Vec<usize> = self.groups.iter().flatten().copied().collect();
        let mut inverse = vec![0; self.order];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        DenseTensor::new(self.alphabet, self.order, permute(&grouped, self.alphabet, self.order, &inverse))
    }

    /// Number of core entries with magnitude above `tol`.
    pub fn core_support(&self, tol: f64) -> usize {
        self.core.iter().filter(|v| v.abs() > tol).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::{random_language, Alphabet};

    #[test]
    fn matrix_case_is_an_svd() {
        let lang = random_language(2, Alphabet::new(3).unwrap(), 2, 1.0).unwrap();
        let a = lang.joint();
        let t = tucker_decompose(a, &[vec![0], vec![1]]).unwrap();
        let m = DMatrix::from_row_slice(3, 3, &a.data);
        let svd = m.clone().svd(true, true);
        let core = DMatrix::from_row_slice(3, 3, &t.core);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(core[(i, j)].abs() < 1e-12);
                }
            }
            let mut sorted = svd.singular_values.as_slice().to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            assert!((core[(i, i)].abs() - sorted[i]).abs() < 1e-12);
        }
        assert!(t.reconstruct().unwrap().max_abs_diff(a) < 1e-12);
    }

    #[test]
    fn product_tensor_has_single_core_entry() {
        let (a, b, c) = ([0.2, 0.8], [0.5, 0.5], [0.1, 0.9]);
        let mut data = Vec::new();
        for x in a {
            for y in b {
                for z in c {
                    data.push(x * y * z);
                }
            }
        }
        let t = tucker_decompose(&DenseTensor::new(2, 3, data).unwrap(), &[vec![0], vec![1], vec![2]]).unwrap();
        assert_eq!(t.core_support(1e-12), 1);
    }

    #[test]
    fn grouped_reconstruction() {
        let lang = random_language(7, Alphabet::new(3).unwrap(), 3, 1.0).unwrap();
        for partition in [vec![vec![0, 2], vec![1]], vec![vec![2], vec![0], vec![1]], vec![vec![1, 0, 2]]] {
            let t = tucker_decompose(lang.joint(), &partition).unwrap();
            assert!(t.reconstruct().unwrap().max_abs_diff(lang.joint()) < 1e-10);
            for f in &t.factors {
                let g = f.tr_mul(f);
                assert!((g - DMatrix::identity(f.ncols(), f.ncols())).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn invalid_partitions() {
        let lang = random_language(7, Alphabet::new(2).unwrap(), 3, 1.0).unwrap();
        assert!(tucker_decompose(lang.joint(), &[vec![0], vec![1]]).is_err());
        assert!(tucker_decompose(lang.joint(), &[vec![0, 1], vec![1, 2]]).is_err());
        assert!(tucker_decompose(lang.joint(), &[vec![0, 1, 3]]).is_err());
    }
}
