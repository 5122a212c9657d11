//! Small dense helpers for the tiny (<= 3x3, <= n'xn') systems that show up
//! in the Hamiltonian algebra. Nothing here is tuned for large matrices.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Eigenvalues of a small symmetric matrix (row-major `dim x dim`) by cyclic
/// Jacobi rotations. Returns them in ascending order.
pub fn sym_eigenvalues(mat: &[f64], dim: usize) -> Vec<f64> {
    assert_eq!(mat.len(), dim * dim);
    if dim == 1 {
        return vec![mat[0]];
    }
    let mut a = mat.to_vec();
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..dim {
            for q in (p + 1)..dim {
                off += a[p * dim + q] * a[p * dim + q];
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..dim {
            for q in (p + 1)..dim {
                let apq = a[p * dim + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * dim + p];
                let aqq = a[q * dim + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..dim {
                    let akp = a[k * dim + p];
                    let akq = a[k * dim + q];
                    a[k * dim + p] = c * akp - s * akq;
                    a[k * dim + q] = s * akp + c * akq;
                }
                for k in 0..dim {
                    let apk = a[p * dim + k];
                    let aqk = a[q * dim + k];
                    a[p * dim + k] = c * apk - s * aqk;
                    a[q * dim + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..dim).map(|i| a[i * dim + i]).collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev
}

/// Solve `A x = b` in place for a small dense system by Gaussian elimination
/// with partial pivoting. Returns `None` when the pivot collapses.
pub fn solve_dense(a: &[f64], b: &[f64], dim: usize) -> Option<Vec<f64>> {
    assert_eq!(a.len(), dim * dim);
    assert_eq!(b.len(), dim);
    let mut m = a.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..dim {
        let mut piv = col;
        for r in (col + 1)..dim {
            if m[r * dim + col].abs() > m[piv * dim + col].abs() {
                piv = r;
            }
        }
        if m[piv * dim + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..dim {
                m.swap(col * dim + k, piv * dim + k);
            }
            rhs.swap(col, piv);
        }
        let inv = 1.0 / m[col * dim + col];
        for r in (col + 1)..dim {
            let f = m[r * dim + col] * inv;
            if f == 0.0 {
                continue;
            }
            for k in col..dim {
                m[r * dim + k] -= f * m[col * dim + k];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; dim];
    for row in (0..dim).rev() {
        let mut acc = rhs[row];
        for k in (row + 1)..dim {
            acc -= m[row * dim + k] * x[k];
        }
        x[row] = acc / m[row * dim + row];
    }
    Some(x)
}

/// Least-squares line fit `y ~ a + b x`; returns `(slope, intercept, r2)`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}
