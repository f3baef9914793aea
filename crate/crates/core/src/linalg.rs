//! Dense symmetric eigendecomposition.
//!
//! Classic two-stage approach: Householder reduction to tridiagonal form
//! followed by the implicitly shifted QL iteration, with the orthogonal
//! transformations accumulated so eigenvectors come out directly. This is
//! the standard EISPACK `tred2`/`tql2` pair, which is exact enough for the
//! moderate dimensions used here (hundreds) and keeps the crate free of a
//! linear-algebra dependency in the build graph.

use crate::error::{Error, Result};

const MAX_QL_ITERS: usize = 100;

/// Eigendecomposition of a symmetric matrix given in row-major order.
///
/// Returns `(values, vectors)` with eigenvalues sorted in descending order
/// and `vectors` row-major: row `i` is the unit eigenvector for
/// `values[i]`. Each eigenvector's sign is fixed so that its
/// largest-magnitude entry (first such entry on ties) is positive, making
/// the output deterministic.
pub fn sym_eigen_desc(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return Err(Error::Shape(format!("matrix has {} entries, expected {}", a.len(), n * n)));
    }
    if n == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let asym = a
        .iter()
        .enumerate()
        .map(|(idx, &v)| (v - a[(idx % n) * n + idx / n]).abs())
        .fold(0.0f64, f64::max);
    let scale = a.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-300);
    if asym > 1e-8 * scale {
        return Err(Error::Input(format!(
            "matrix is not symmetric (max asymmetry {asym:.3e} at scale {scale:.3e})"
        )));
    }

    let mut v = a.to_vec();
    let mut d = vec![0.0f64; n];
    let mut e = vec![0.0f64; n];
    tred2(&mut v, &mut d, &mut e, n);
    tql2(&mut v, &mut d, &mut e, n)?;

    // Sort descending by eigenvalue; stable order for equal values.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].partial_cmp(&d[i]).expect("eigenvalues are finite"));

    let mut values = Vec::with_capacity(n);
    let mut vectors = vec![0.0f64; n * n];
    for (row, &src) in order.iter().enumerate() {
        values.push(d[src]);
        // Column `src` of v is the eigenvector.
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for k in 0..n {
            let abs = v[k * n + src].abs();
            if abs > best_abs {
                best_abs = abs;
                best = k;
            }
        }
        let flip = if v[best * n + src] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[row * n + k] = flip * v[k * n + src];
        }
    }
    Ok((values, vectors))
}

/// Householder reduction of `v` (symmetric, row-major) to tridiagonal form
/// with accumulated transformations left in `v`.
fn tred2(v: &mut [f64], d: &mut [f64], e: &mut [f64], n: usize) {
    for j in 0..n {
        d[j] = v[(n - 1) * n + j];
    }

    for i in (1..n).rev() {
        let mut scale = 0.0f64;
        let mut h = 0.0f64;
        for item in d.iter().take(i) {
            scale += item.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[(i - 1) * n + j];
                v[i * n + j] = 0.0;
                v[j * n + i] = 0.0;
            }
        } else {
            for item in d.iter_mut().take(i) {
                *item /= scale;
                h += *item * *item;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for item in e.iter_mut().take(i) {
                *item = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[j * n + i] = f;
                g = e[j] + v[j * n + j] * f;
                for k in j + 1..i {
                    g += v[k * n + j] * d[k];
                    e[k] += v[k * n + j] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[k * n + j] -= f * e[k] + g * d[k];
                }
                d[j] = v[(i - 1) * n + j];
                v[i * n + j] = 0.0;
            }
        }
        d[i] = h;
    }

    // Accumulate transformations.
    for i in 0..n.saturating_sub(1) {
        v[(n - 1) * n + i] = v[i * n + i];
        v[i * n + i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for (k, item) in d.iter_mut().enumerate().take(i + 1) {
                *item = v[k * n + i + 1] / h;
            }
            for j in 0..=i {
                let mut g = 0.0f64;
                for k in 0..=i {
                    g += v[k * n + i + 1] * v[k * n + j];
                }
                for k in 0..=i {
                    v[k * n + j] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[k * n + i + 1] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[(n - 1) * n + j];
        v[(n - 1) * n + j] = 0.0;
    }
    v[(n - 1) * n + (n - 1)] = 1.0;
    e[0] = 0.0;
}

/// Implicit-shift QL iteration on the tridiagonal (d, e), rotating the
/// accumulated transformations in `v` so its columns become eigenvectors.
fn tql2(v: &mut [f64], d: &mut [f64], e: &mut [f64], n: usize) -> Result<()> {
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0f64;
    let mut tst1 = 0.0f64;
    let eps = 2.0f64.powi(-52);
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0usize;
            loop {
                iter += 1;
                if iter > MAX_QL_ITERS {
                    return Err(Error::Invariant(format!(
                        "eigensolver failed to converge for eigenvalue {l} after {MAX_QL_ITERS} iterations"
                    )));
                }
                // Implicit shift from the 2x2 leading block.
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for item in d.iter_mut().take(n).skip(l + 2) {
                    *item -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0f64;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0f64;
                let mut s2 = 0.0f64;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        h = v[k * n + i + 1];
                        v[k * n + i + 1] = s * v[k * n + i] + c * h;
                        v[k * n + i] = c * v[k * n + i] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut a = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = rng.gen_range(-1.0..1.0);
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        a
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let n = 5;
        let mut a = vec![0.0f64; n * n];
        for i in 0..n {
            a[i * n + i] = 1.0;
        }
        let (vals, vecs) = sym_eigen_desc(&a, n).unwrap();
        for v in &vals {
            assert!((v - 1.0).abs() < 1e-12);
        }
        // Vectors are orthonormal.
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| vecs[i * n + k] * vecs[j * n + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn diagonal_matrix_sorts_descending() {
        let n = 4;
        let mut a = vec![0.0f64; n * n];
        for (i, v) in [3.0, -1.0, 7.0, 0.5].iter().enumerate() {
            a[i * n + i] = *v;
        }
        let (vals, _) = sym_eigen_desc(&a, n).unwrap();
        assert_eq!(vals, vec![7.0, 3.0, 0.5, -1.0]);
    }

    #[test]
    fn eigenpairs_satisfy_definition_and_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &n in &[3usize, 12, 40] {
            let a = random_symmetric(n, &mut rng);
            let (vals, vecs) = sym_eigen_desc(&a, n).unwrap();
            let scale = vals.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for i in 0..n {
                // r = A v - lambda v must vanish.
                for row in 0..n {
                    let av: f64 = (0..n).map(|k| a[row * n + k] * vecs[i * n + k]).sum();
                    let r = av - vals[i] * vecs[i * n + row];
                    assert!(r.abs() < 1e-9 * scale, "residual {r} (n={n}, pair {i})");
                }
                for j in i..n {
                    let dot: f64 = (0..n).map(|k| vecs[i * n + k] * vecs[j * n + k]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-9, "orthonormality (n={n}, {i},{j})");
                }
            }
            // Sorted descending.
            for w in vals.windows(2) {
                assert!(w[0] >= w[1] - 1e-12);
            }
        }
    }

    /// Cross-check values and vectors against an independent implementation.
    #[test]
    fn matches_external_eigensolver() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for &n in &[6usize, 25, 60] {
            let a = random_symmetric(n, &mut rng);
            let (vals, vecs) = sym_eigen_desc(&a, n).unwrap();

            let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[i * n + j]);
            let se = m.symmetric_eigen();
            let mut reference: Vec<(f64, Vec<f64>)> = (0..n)
                .map(|i| (se.eigenvalues[i], se.eigenvectors.column(i).iter().cloned().collect()))
                .collect();
            reference.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());

            for i in 0..n {
                assert!(
                    (vals[i] - reference[i].0).abs() < 1e-9,
                    "value {i}: {} vs {}",
                    vals[i],
                    reference[i].0
                );
                // Same line up to sign: |<v_ours, v_ref>| = 1.
                let dot: f64 = (0..n).map(|k| vecs[i * n + k] * reference[i].1[k]).sum();
                assert!(dot.abs() > 1.0 - 1e-7, "vector {i}: |dot| = {}", dot.abs());
            }
        }
    }

    #[test]
    fn gram_matrix_rank_deficiency_yields_zero_eigenvalues() {
        // B is n x k with k < n, so A = B Bt has exactly n - k zero eigenvalues.
        let (n, k) = (10usize, 4usize);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let b: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut a = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..k).map(|l| b[i * k + l] * b[j * k + l]).sum();
            }
        }
        let (vals, _) = sym_eigen_desc(&a, n).unwrap();
        let scale = vals[0].max(1.0);
        for (i, v) in vals.iter().enumerate() {
            if i < k {
                assert!(*v > 1e-6, "leading eigenvalue {i} should be positive, got {v}");
            } else {
                assert!(v.abs() < 1e-10 * scale, "trailing eigenvalue {i} should vanish, got {v}");
            }
        }
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        assert!(sym_eigen_desc(&a, 2).is_err());
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = random_symmetric(8, &mut rng);
        let (_, v1) = sym_eigen_desc(&a, 8).unwrap();
        let (_, v2) = sym_eigen_desc(&a, 8).unwrap();
        assert_eq!(v1, v2);
        // Largest-magnitude entry of each vector is positive.
        for i in 0..8 {
            let row = &v1[i * 8..(i + 1) * 8];
            let best = row.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(best > 0.0);
        }
    }
}
