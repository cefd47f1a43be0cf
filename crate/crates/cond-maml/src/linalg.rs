//! Symmetric eigendecomposition and condition numbers.
//!
//! The solver is a cyclic Jacobi iteration: pairwise rotations that drive the
//! off-diagonal mass to zero. It is exact enough for the small Gram matrices
//! this crate produces (tens of rows) and, unlike a QR-based solver, has a
//! backward rule that fits on one line: for a symmetric matrix,
//! `d lambda_i / dA = v_i v_i^T` with the eigenvectors held fixed.
//! [`sym_eigen`] inserts the eigenvalues into a [`Graph`] under exactly that
//! rule; eigenvectors are reported but never differentiable.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Relative off-diagonal Frobenius tolerance at which the Jacobi iteration is
/// considered converged.
const JACOBI_REL_TOL: f64 = 1e-12;

/// Hard cap on Jacobi sweeps; symmetric inputs converge in far fewer.
const JACOBI_MAX_SWEEPS: usize = 100;

/// A square symmetric matrix. Construction symmetrizes `(A + A^T) / 2` after
/// checking the input was already symmetric to within an absolute 1e-10, so
/// downstream code can rely on exact symmetry.
#[derive(Clone, Debug)]
pub struct SymMatrix {
    data: Tensor,
}

impl SymMatrix {
    pub fn new(matrix: Tensor) -> Result<SymMatrix> {
        let n = square_dim(&matrix)?;
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((matrix.at(i, j) - matrix.at(j, i)).abs());
            }
        }
        if worst > 1e-10 {
            return Err(Error::Domain {
                op: "sym-matrix",
                msg: format!("input is asymmetric by {worst:.3e} (limit 1e-10)"),
            });
        }
        Ok(SymMatrix::average_halves(&matrix, n))
    }

    /// Symmetrizes an arbitrary square matrix without the asymmetry limit of
    /// [`SymMatrix::new`]. This is what the differentiable path uses: a
    /// perturbation of a single entry is a legitimate input there, and the
    /// eigenvalue gradient is defined through `(A + A^T) / 2`.
    pub fn symmetrize(matrix: &Tensor) -> Result<SymMatrix> {
        let n = square_dim(matrix)?;
        Ok(SymMatrix::average_halves(matrix, n))
    }

    fn average_halves(matrix: &Tensor, n: usize) -> SymMatrix {
        let data = (0..n * n)
            .map(|idx| {
                let (i, j) = (idx / n, idx % n);
                (matrix.at(i, j) + matrix.at(j, i)) * 0.5
            })
            .collect();
        SymMatrix {
            data: Tensor::from_raw(vec![n, n], data),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }
}

/// Result of a symmetric eigendecomposition: eigenvalues ascending,
/// eigenvector columns in matching order, and the sweep count the Jacobi
/// iteration used.
#[derive(Clone, Debug)]
pub struct EigDecomposition {
    pub eigenvalues: Tensor,
    pub eigenvectors: Tensor,
    pub sweeps: usize,
}

/// Eigenvalues of a symmetric matrix inserted into a graph: the
/// decomposition itself plus the differentiable eigenvalue node.
#[derive(Debug)]
pub struct SymEigen {
    pub values: NodeId,
    pub decomposition: EigDecomposition,
}

fn square_dim(matrix: &Tensor) -> Result<usize> {
    let shape = matrix.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Domain {
            op: "sym-matrix",
            msg: format!("expected a square matrix, got {shape:?}"),
        });
    }
    Ok(shape[0])
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Converges when the off-diagonal Frobenius norm falls below
/// 1e-12 times the Frobenius norm of the input; errors after 100 sweeps
/// reporting the residual off-diagonal norm.
pub fn jacobi_eigen(m: &SymMatrix) -> Result<EigDecomposition> {
    let n = m.dim();
    let mut a = m.tensor().data().to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = JACOBI_REL_TOL * frob;

    let off_norm = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * a[i * n + j] * a[i * n + j];
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while off_norm(&a) > tol {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Convergence {
                what: "jacobi eigendecomposition",
                detail: format!(
                    "off-diagonal norm {:.3e} after {} sweeps (tolerance {:.3e})",
                    off_norm(&a),
                    JACOBI_MAX_SWEEPS,
                    tol
                ),
            });
        }
        sweeps += 1;
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                // Rotation angle zeroing a_pq, in the stable cot-based form.
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                let app = a[p * n + p];
                let aqq = a[q * n + q];
                a[p * n + p] = c * c * app - 2.0 * s * c * apq + s * s * aqq;
                a[q * n + q] = s * s * app + 2.0 * s * c * apq + c * c * aqq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for i in 0..n {
                    if i == p || i == q {
                        continue;
                    }
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[p * n + i] = a[i * n + p];
                    a[i * n + q] = s * aip + c * aiq;
                    a[q * n + i] = a[i * n + q];
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }

    // Ascending eigenvalue order, columns permuted to match.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].partial_cmp(&a[j * n + j]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for row in 0..n {
            vectors[row * n + new_col] = v[row * n + old_col];
        }
    }

    Ok(EigDecomposition {
        eigenvalues: Tensor::from_raw(vec![n], eigenvalues),
        eigenvectors: Tensor::from_raw(vec![n, n], vectors),
        sweeps,
    })
}

/// Decomposes the symmetric matrix held by graph node `matrix` and inserts
/// its ascending eigenvalues as a differentiable node.
///
/// The input is symmetrized in-graph as `(A + A^T) / 2` (rejecting inputs
/// asymmetric beyond 1e-10), so the eigenvalue gradient `v_i v_i^T` lands on
/// the symmetrized matrix and chains correctly through entrywise
/// perturbations of `A`. Gradients flow only into the eigenvalues — the
/// reported eigenvectors are frozen at forward time.
pub fn sym_eigen(g: &mut Graph, matrix: NodeId) -> Result<SymEigen> {
    let sym = SymMatrix::symmetrize(g.value(matrix))?;
    let n = sym.dim();

    let eye = g.constant(Tensor::eye(n));
    let transposed = g.matmul_flags(matrix, eye, true, false)?;
    let doubled = g.add(matrix, transposed)?;
    let symmetrized = g.scale(doubled, 0.5)?;
    debug_assert_eq!(g.value(symmetrized).data(), sym.tensor().data());

    let decomposition = jacobi_eigen(&sym)?;
    let values = g.eigvals_node(
        symmetrized,
        decomposition.eigenvalues.clone(),
        decomposition.eigenvectors.clone(),
    )?;
    Ok(SymEigen {
        values,
        decomposition,
    })
}

/// Condition number of a spectrum: `|lambda|_max / max(|lambda|_min, floor)`.
///
/// Pure reporting — this quantity is never differentiated; the trainable
/// surrogate is the log-eigenvalue variance in the conditioning module.
pub fn condition_number(eigenvalues: &[f64], floor: f64) -> Result<f64> {
    if eigenvalues.is_empty() {
        return Err(Error::InvalidArgument(
            "condition_number: empty eigenvalue list".to_string(),
        ));
    }
    if !(floor > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "condition_number: floor must be positive, got {floor}"
        )));
    }
    let mut max_abs = 0.0_f64;
    let mut min_abs = f64::INFINITY;
    for &l in eigenvalues {
        max_abs = max_abs.max(l.abs());
        min_abs = min_abs.min(l.abs());
    }
    Ok(max_abs / min_abs.max(floor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, max_rel_err, rand_tensor, rng};
    use rand::Rng;

    fn sym_from(vals: &[f64], n: usize) -> SymMatrix {
        SymMatrix::new(Tensor::new(vec![n, n], vals.to_vec()).unwrap()).unwrap()
    }

    /// Random symmetric matrix with entries of order one.
    fn random_sym(n: usize, seed: u64) -> SymMatrix {
        let mut r = rng(seed);
        let mut vals = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let x = r.gen_range(-1.0..1.0);
                vals[i * n + j] = x;
                vals[j * n + i] = x;
            }
        }
        sym_from(&vals, n)
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let eig = jacobi_eigen(&SymMatrix::new(Tensor::eye(3)).unwrap()).unwrap();
        assert_eq!(eig.eigenvalues.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(eig.eigenvectors.data(), Tensor::eye(3).data());
    }

    #[test]
    fn diagonal_matrix_recovers_diagonal() {
        let eig = jacobi_eigen(&sym_from(&[4.0, 0.0, 0.0, 1.0], 2)).unwrap();
        assert_eq!(eig.eigenvalues.data(), &[1.0, 4.0]);
        // Eigenvectors are the standard basis up to sign, ascending order.
        assert!(eig.eigenvectors.at(1, 0).abs() == 1.0);
        assert!(eig.eigenvectors.at(0, 1).abs() == 1.0);
    }

    #[test]
    fn two_by_two_matches_quadratic_formula() {
        // Characteristic polynomial roots of [[a, b], [b, c]]:
        // ((a+c) ± sqrt((a-c)^2 + 4 b^2)) / 2.
        let (a, b, c) = (0.7, -0.3, -1.2);
        let eig = jacobi_eigen(&sym_from(&[a, b, b, c], 2)).unwrap();
        let disc = ((a - c) * (a - c) + 4.0 * b * b).sqrt();
        let lo = ((a + c) - disc) / 2.0;
        let hi = ((a + c) + disc) / 2.0;
        assert_close(eig.eigenvalues.data()[0], lo, 1e-12);
        assert_close(eig.eigenvalues.data()[1], hi, 1e-12);
    }

    #[test]
    fn three_by_three_matches_trigonometric_cubic() {
        // Independent oracle: eigenvalues of a symmetric 3x3 via the
        // trigonometric solution of the characteristic cubic.
        let m = random_sym(3, 7);
        let a = m.tensor();
        let eig = jacobi_eigen(&m).unwrap();

        let p1 = a.at(0, 1).powi(2) + a.at(0, 2).powi(2) + a.at(1, 2).powi(2);
        let q = (a.at(0, 0) + a.at(1, 1) + a.at(2, 2)) / 3.0;
        let p2 = (a.at(0, 0) - q).powi(2)
            + (a.at(1, 1) - q).powi(2)
            + (a.at(2, 2) - q).powi(2)
            + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let det_b = {
            let b = |i: usize, j: usize| (a.at(i, j) - if i == j { q } else { 0.0 }) / p;
            b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1))
                - b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0))
                + b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0))
        };
        let r = (det_b / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let hi = q + 2.0 * p * phi.cos();
        let lo = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        let mid = 3.0 * q - hi - lo;

        let got = eig.eigenvalues.data();
        assert_close(got[0], lo, 1e-9);
        assert_close(got[1], mid, 1e-9);
        assert_close(got[2], hi, 1e-9);
    }

    #[test]
    fn reconstruction_and_orthogonality_hold_up_to_n32() {
        for &n in &[2usize, 5, 11, 32] {
            let m = random_sym(n, 100 + n as u64);
            let eig = jacobi_eigen(&m).unwrap();
            let frob = m
                .tensor()
                .data()
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();

            // V diag(lambda) V^T == A within 1e-8 * ||A||_F.
            let v = &eig.eigenvectors;
            let lam = eig.eigenvalues.data();
            let mut worst = 0.0_f64;
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += v.at(i, k) * lam[k] * v.at(j, k);
                    }
                    worst = worst.max((acc - m.tensor().at(i, j)).abs());
                }
            }
            assert!(
                worst <= 1e-8 * frob.max(1.0),
                "n={n}: reconstruction error {worst:.3e}"
            );

            // V^T V == I.
            let mut worst_ortho = 0.0_f64;
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += v.at(k, i) * v.at(k, j);
                    }
                    let expect = if i == j { 1.0 } else { 0.0 };
                    worst_ortho = worst_ortho.max((acc - expect).abs());
                }
            }
            assert!(worst_ortho <= 1e-10, "n={n}: orthogonality {worst_ortho:.3e}");

            // Ascending order.
            assert!(lam.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn trace_and_determinant_identities() {
        for seed in 0..5 {
            let m = random_sym(4, 200 + seed);
            let eig = jacobi_eigen(&m).unwrap();
            let frob = m.tensor().data().iter().map(|x| x * x).sum::<f64>().sqrt();

            let trace: f64 = (0..4).map(|i| m.tensor().at(i, i)).sum();
            let eig_sum: f64 = eig.eigenvalues.data().iter().sum();
            assert!((trace - eig_sum).abs() <= 1e-9 * frob.max(1.0));

            // Cofactor-expansion determinant as the independent oracle.
            fn det(vals: &[f64], n: usize) -> f64 {
                if n == 1 {
                    return vals[0];
                }
                let mut acc = 0.0;
                for col in 0..n {
                    let minor: Vec<f64> = (1..n)
                        .flat_map(|r| {
                            (0..n).filter(|c| *c != col).map(move |c| (r, c))
                        })
                        .map(|(r, c)| vals[r * n + c])
                        .collect();
                    let sign = if col % 2 == 0 { 1.0 } else { -1.0 };
                    acc += sign * vals[col] * det(&minor, n - 1);
                }
                acc
            }
            let det_direct = det(m.tensor().data(), 4);
            let det_eig: f64 = eig.eigenvalues.data().iter().product();
            assert!(
                max_rel_err(&[det_direct], &[det_eig]) <= 1e-7,
                "det {det_direct} vs eigenvalue product {det_eig}"
            );
        }
    }

    #[test]
    fn eigenvalue_gradient_matches_rank_one_outer_product() {
        // L = lambda_max(A): the gradient must be v_max v_max^T, checked both
        // against the formula and against central finite differences.
        let n = 3;
        let m = random_sym(n, 42);
        let base = m.tensor().clone();

        let mut g = Graph::new();
        let a = g.parameter(base.clone());
        let eig = sym_eigen(&mut g, a).unwrap();
        let pick = {
            let mut sel = vec![0.0; n];
            sel[n - 1] = 1.0;
            g.constant(Tensor::from_raw(vec![n], sel))
        };
        let picked = g.mul(eig.values, pick).unwrap();
        let lmax = g.sum(picked).unwrap();
        let grads = g.gradient(lmax, &[a], false).unwrap();
        let grad = g.value(grads[0]).clone();

        // Formula check.
        let v = &eig.decomposition.eigenvectors;
        for i in 0..n {
            for j in 0..n {
                let expect = v.at(i, n - 1) * v.at(j, n - 1);
                assert_close(grad.at(i, j), expect, 1e-9);
            }
        }

        // Finite differences on individual entries (the in-graph
        // symmetrization makes entrywise perturbations well-defined).
        let h = 1e-6;
        for i in 0..n {
            for j in 0..n {
                let eval = |delta: f64| {
                    let mut vals = base.data().to_vec();
                    vals[i * n + j] += delta;
                    let mut g2 = Graph::new();
                    let a2 = g2.parameter(Tensor::from_raw(vec![n, n], vals));
                    let e2 = sym_eigen(&mut g2, a2).unwrap();
                    *e2.decomposition.eigenvalues.data().last().unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(
                    (fd - grad.at(i, j)).abs() <= 1e-5,
                    "entry ({i},{j}): fd {fd} vs grad {}",
                    grad.at(i, j)
                );
            }
        }
    }

    #[test]
    fn gram_matrices_are_psd() {
        let mut r = rng(9);
        for _ in 0..10 {
            let j = rand_tensor(&[6, 4], &mut r, -2.0, 2.0);
            let n = 6;
            let mut gram = vec![0.0; n * n];
            for a in 0..n {
                for b in 0..n {
                    gram[a * n + b] = (0..4).map(|k| j.at(a, k) * j.at(b, k)).sum();
                }
            }
            let eig = jacobi_eigen(&sym_from(&gram, n)).unwrap();
            assert!(eig.eigenvalues.data().iter().all(|&l| l >= -1e-10));
        }
    }

    #[test]
    fn condition_number_examples() {
        assert_eq!(condition_number(&[1.0, 1.0], 1e-12).unwrap(), 1.0);
        assert_close(condition_number(&[0.1, 0.2], 1e-12).unwrap(), 2.0, 1e-12);
        assert_close(
            condition_number(&[2.0, 5.0, 10.0], 1e-12).unwrap(),
            5.0,
            1e-12,
        );
        // The floor guards the zero-eigenvalue case.
        assert_close(
            condition_number(&[0.0, 1.0], 1e-12).unwrap(),
            1e12,
            1e-3,
        );
        assert!(condition_number(&[], 1e-12).is_err());
        assert!(condition_number(&[1.0], 0.0).is_err());
    }

    #[test]
    fn sym_matrix_rejects_asymmetry_and_non_square() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 0.5, 0.4, 1.0]).unwrap();
        assert!(SymMatrix::new(t).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(SymMatrix::new(t).is_err());
    }

    #[test]
    fn one_by_one_matrix_is_its_own_spectrum() {
        let eig = jacobi_eigen(&sym_from(&[-2.5], 1)).unwrap();
        assert_eq!(eig.eigenvalues.data(), &[-2.5]);
        assert_eq!(eig.sweeps, 0);
    }
}
